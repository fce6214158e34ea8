//! Command-line front end: `synth`, `train`, `search`, `eval` and
//! `cost-report`, all working inside one run directory.
//!
//! ```text
//! <out>/manifest.json
//! <out>/corpus/...                      synth
//! <out>/train/<label>/metrics.jsonl     train
//! <out>/train/<label>/checkpoints/epoch-NNN.ckpt
//! <out>/train/<label>/summary.json
//! <out>/search/<stem>.{json,csv}        search
//! <out>/eval/<stem>.json                eval
//! <out>/cost/<stem>.{json,csv}          cost-report
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, RunManifest};
use crate::data::{generate_corpus, Corpus, Split};
use crate::distill::KdMode;
use crate::error::{Error, Result};
use crate::search::{self, Budget, SearchParams, SearchResult};
use crate::supernet::{model_size_bytes, Checkpoint, Decoder, SubnetworkConfig};
use crate::trainer::{self, RunCost, TrainRun, TrainTarget};

#[derive(Debug, Parser)]
#[command(name = "todm", version, about = "Train a weight-sharing transducer supernet and search it for size-bounded subnetworks")]
pub struct Cli {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus into <out>/corpus.
    Synth,
    /// Train the supernet (or one fixed subnetwork) on the corpus.
    Train(TrainArgs),
    /// Evolutionary (or exhaustive) search over a trained supernet.
    Search(SearchArgs),
    /// Word error rate of subnetworks on a corpus split.
    Eval(EvalArgs),
    /// Training FLOPs of supernet runs against K individually trained models.
    CostReport(CostArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Continue from the newest checkpoint of this run.
    #[arg(long)]
    pub resume: bool,
    /// Distillation term: none, kld or alphaD.
    #[arg(long)]
    pub kd: Option<KdMode>,
    /// Explicit token buckets per node for distillation.
    #[arg(long)]
    pub kd_j: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Train only this subnetwork (e.g. drop2:256-64-64-32-32-128), without sandwich sampling.
    #[arg(long)]
    pub individual: Option<SubnetworkConfig>,
    /// Stop after this many completed epochs; the schedule still follows --epochs.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Run name under <out>/train; derived from the target when omitted.
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated size budgets, each in bytes or as a percentage ("30%,50%,100%").
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<Budget>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub generations: Option<usize>,
    /// Fitness decoder: greedy or beamK.
    #[arg(long)]
    pub decoder: Option<Decoder>,
    /// Evaluate every config instead (refused above the cap).
    #[arg(long)]
    pub exhaustive: bool,
    #[arg(long, default_value_t = search::EXHAUSTIVE_CAP)]
    pub cap: usize,
    /// Split used as the validation set.
    #[arg(long, default_value = "dev")]
    pub split: Split,
    /// Output file stem under <out>/search.
    #[arg(long)]
    pub stem: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Subnetwork to evaluate; repeatable. Defaults to the max config.
    #[arg(long = "subnet")]
    pub subnets: Vec<SubnetworkConfig>,
    /// Evaluate every front entry of a search result (.json).
    #[arg(long)]
    pub front: Option<PathBuf>,
    #[arg(long, default_value = "dev")]
    pub split: Split,
    /// Decoders to report; repeatable. Defaults to greedy and beam5.
    #[arg(long = "decoder")]
    pub decoders: Vec<Decoder>,
    /// Output file stem under <out>/eval.
    #[arg(long, default_value = "eval")]
    pub stem: String,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Training run directories (each with metrics.jsonl); labels are the directory names.
    #[arg(long, value_delimiter = ',', required = true)]
    pub runs: Vec<PathBuf>,
    /// Deployment-target counts K; defaults to 3,6,...,30.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long, default_value = "cost")]
    pub stem: String,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn corpus_dir(out: &Path) -> PathBuf {
    out.join("corpus")
}

fn load_corpus(out: &Path) -> Result<Corpus> {
    let dir = corpus_dir(out);
    if !dir.join("corpus.json").exists() {
        return Err(Error::Config(format!("no corpus at {}; run `todm synth` first", dir.display())));
    }
    Corpus::load(&dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable output");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn record(out: &Path, config: &RunConfig, kind: &str, files: &[PathBuf]) -> Result<()> {
    let mut m = RunManifest::load_or_new(out, config)?;
    m.config = config.clone();
    m.seeds = RunManifest::new(config).seeds;
    m.record(out, kind, files)?;
    m.save(out)?;
    Ok(())
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::Synth => cmd_synth(&cli.out, &config),
        Command::Train(a) => cmd_train(&cli.out, config, a),
        Command::Search(a) => cmd_search(&cli.out, config, a),
        Command::Eval(a) => cmd_eval(&cli.out, &config, a),
        Command::CostReport(a) => cmd_cost(&cli.out, &config, a),
    }
}

fn cmd_synth(out: &Path, config: &RunConfig) -> Result<()> {
    let corpus = generate_corpus(&config.corpus)?;
    let dir = corpus_dir(out);
    corpus.save(&dir)?;
    record(out, config, "corpus", &files_under(&dir)?)?;
    let m = RunManifest::load_or_new(out, config)?;
    println!(
        "corpus: {} train / {} dev / {} test utterances in {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        dir.display()
    );
    println!("manifest hash {}", m.hash());
    Ok(())
}

/// Final state of a training run, written next to its metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub label: String,
    pub target: TrainTarget,
    pub epochs_completed: usize,
    pub final_dev_wer: Option<f64>,
    pub steps: usize,
    pub flops: u64,
    pub wall_secs: f64,
    pub checkpoint: Option<String>,
}

/// Newest `epoch-NNN.ckpt` in a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let dir = run_dir.join("checkpoints");
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&dir).ok()?.flatten() {
        let p = entry.path();
        let epoch = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch-"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, p));
            }
        }
    }
    best.map(|(_, p)| p)
}

fn cmd_train(out: &Path, mut config: RunConfig, a: &TrainArgs) -> Result<()> {
    let t = &mut config.train;
    if let Some(k) = a.kd {
        t.kd_mode = k;
    }
    if let Some(j) = a.kd_j {
        t.kd_j = j;
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    config.check()?;
    let corpus = load_corpus(out)?;
    let space = config.search_space()?;
    let target = match &a.individual {
        Some(c) => TrainTarget::Individual(c.clone()),
        None => TrainTarget::Supernet,
    };
    let label = a.label.clone().unwrap_or_else(|| match &target {
        TrainTarget::Supernet => format!("supernet-{}", config.train.kd_mode),
        TrainTarget::Individual(c) => format!("individual-{}", c.to_string().replace(':', "_")),
    });
    let run_dir = out.join("train").join(&label);
    let resume = if a.resume {
        let path = latest_checkpoint(&run_dir)
            .ok_or_else(|| Error::Config(format!("--resume: no checkpoint under {}", run_dir.display())))?;
        log::info!("resuming from {}", path.display());
        Some(Checkpoint::load(&path)?)
    } else {
        None
    };
    let run = TrainRun {
        arch: config.model.clone(),
        space,
        config: config.train.clone(),
        target: target.clone(),
        corpus: &corpus,
        out_dir: Some(run_dir.clone()),
        stop_after: a.stop_after,
    };
    let outcome = trainer::train(&run, resume.as_ref())?;
    let ckpt = latest_checkpoint(&run_dir);
    let cost = RunCost::from_metrics_log(&label, &run_dir.join(trainer::METRICS_FILE))?;
    let final_dev_wer = fs::read_to_string(run_dir.join(trainer::METRICS_FILE))
        .map_err(|e| Error::io(&run_dir, e))?
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .rfind(|v| v["record"] == "epoch")
        .and_then(|v| v["dev_wer"].as_f64());
    let summary = TrainSummary {
        label: label.clone(),
        target,
        epochs_completed: outcome.epochs_completed,
        final_dev_wer,
        steps: cost.steps,
        flops: cost.flops,
        wall_secs: outcome.wall_secs,
        checkpoint: ckpt.as_ref().map(|p| p.to_string_lossy().into_owned()),
    };
    let summary_path = run_dir.join("summary.json");
    write_json(&summary_path, &summary)?;
    record(out, &config, "train", &files_under(&run_dir)?)?;
    println!(
        "{label}: {} epochs, dev WER {}, {:.3e} FLOPs, {:.1}s",
        summary.epochs_completed,
        final_dev_wer.map_or("n/a".into(), |w| format!("{w:.4}")),
        summary.flops as f64,
        summary.wall_secs
    );
    Ok(())
}

fn cmd_search(out: &Path, mut config: RunConfig, a: &SearchArgs) -> Result<()> {
    let sp: &mut SearchParams = &mut config.search;
    if let Some(b) = &a.budgets {
        sp.budgets = b.clone();
    }
    if let Some(s) = a.seed {
        sp.seed = s;
    }
    if let Some(p) = a.population {
        sp.population_size = p;
    }
    if let Some(g) = a.generations {
        sp.generations = g;
    }
    if let Some(d) = a.decoder {
        sp.fitness_decoder = d;
    }
    sp.check()?;
    let corpus = load_corpus(out)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let val = corpus.split(a.split);
    let result = if a.exhaustive {
        search::exhaustive_search(&ck.params, &ck.space, val, &config.search.budgets, config.search.fitness_decoder, a.cap)?
    } else {
        search::evolve(&ck.params, &ck.space, val, &config.search)?
    };
    let stem = a.stem.clone().unwrap_or_else(|| result.method.clone());
    let dir = out.join("search");
    result.export(&dir, &stem)?;
    record(out, &config, "search", &[dir.join(format!("{stem}.json")), dir.join(format!("{stem}.csv"))])?;
    print_winners(&result);
    Ok(())
}

fn print_winners(r: &SearchResult) {
    println!(
        "{} search: {} configs evaluated, {} on the front, {:.2}s",
        r.method,
        r.evaluated.len(),
        r.front.len(),
        r.wall_secs
    );
    for w in &r.winners {
        match &w.winner {
            Some(e) => println!("  budget {} ({} B): {} {} B WER {:.4}", w.budget, w.budget_bytes, e.config, e.size_bytes, e.wer),
            None => println!("  budget {} ({} B): infeasible", w.budget, w.budget_bytes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub config: String,
    pub size_bytes: u64,
    pub decoder: Decoder,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub split: Split,
    pub utterances: usize,
    pub rows: Vec<EvalRow>,
}

fn cmd_eval(out: &Path, config: &RunConfig, a: &EvalArgs) -> Result<()> {
    let corpus = load_corpus(out)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut configs = a.subnets.clone();
    if let Some(front) = &a.front {
        let text = fs::read_to_string(front).map_err(|e| Error::io(front, e))?;
        let r: SearchResult = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "search result",
            detail: e.to_string(),
        })?;
        configs.extend(r.front.into_iter().map(|e| e.config));
    }
    if configs.is_empty() {
        configs.push(ck.space.max_config());
    }
    let decoders = if a.decoders.is_empty() {
        vec![Decoder::Greedy, Decoder::BEAM5]
    } else {
        a.decoders.clone()
    };
    let utts = corpus.split(a.split);
    let mut rows = Vec::new();
    for cfg in &configs {
        let size_bytes = model_size_bytes(ck.params.arch(), &ck.space, cfg)?;
        for &decoder in &decoders {
            let wer = ck.params.word_error_rate(&ck.space, cfg, utts, decoder)?;
            println!("{cfg} ({size_bytes} B) {decoder}: WER {wer:.4}");
            rows.push(EvalRow {
                config: cfg.to_string(),
                size_bytes,
                decoder,
                wer,
            });
        }
    }
    let report = EvalReport {
        checkpoint: a.checkpoint.to_string_lossy().into_owned(),
        split: a.split,
        utterances: utts.len(),
        rows,
    };
    let path = out.join("eval").join(format!("{}.json", a.stem));
    write_json(&path, &report)?;
    record(out, config, "eval", &[path])
}

fn cmd_cost(out: &Path, config: &RunConfig, a: &CostArgs) -> Result<()> {
    let runs = a
        .runs
        .iter()
        .map(|dir| {
            let label = dir.file_name().map_or_else(|| dir.to_string_lossy().into_owned(), |n| n.to_string_lossy().into_owned());
            RunCost::from_metrics_log(label, &dir.join(trainer::METRICS_FILE))
        })
        .collect::<Result<Vec<_>>>()?;
    let ks = a.ks.clone().unwrap_or_else(trainer::default_cost_ks);
    let report = trainer::training_cost_report(&runs, &ks)?;
    let dir = out.join("cost");
    let json = dir.join(format!("{}.json", a.stem));
    write_json(&json, &(&runs, &report))?;
    let csv = dir.join(format!("{}.csv", a.stem));
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    record(out, config, "cost", &[json, csv])?;
    print!("{}", report.to_csv());
    Ok(())
}
