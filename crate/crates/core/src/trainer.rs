//! Sandwich training of the supernet, plus a plain trainer for a single
//! fixed subnetwork used as the individually trained baseline.
//!
//! One supernet step:
//!
//! 1. sample `[max, min, random, random]` configs;
//! 2. run the max network on the whole batch and keep its lattices,
//!    detached, as the teacher;
//! 3. run min and the two random configs on three disjoint quarters of the
//!    batch, each with the transducer loss plus `λ·KD` against the teacher;
//! 4. sum the four per-pass mean losses, clip the accumulated gradient to a
//!    global norm and take one optimizer step on the shared weights.
//!
//! All randomness in a step derives from `(seed, epoch, step)`, so a run
//! resumed from a checkpoint replays the uninterrupted one.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Corpus, Utterance};
use crate::distill::{self, Divergence, KdMode};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, Optimizer, OptimizerKind};
use crate::params::ParamGrads;
use crate::supernet::{Architecture, Checkpoint, Decoder, Dropout, Grad, SearchSpace, SubnetworkConfig, SupernetParams};
use crate::tensor::Tensor;
use crate::transducer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// First epoch (0-based) whose learning rate is shrunk.
    pub anneal_start_epoch: usize,
    pub anneal_factor: f64,
    pub lambda_initial: f64,
    pub lambda_late: f64,
    /// The optimizer switches to ScaledAdam, and λ to `lambda_late`, at epoch
    /// `floor(fraction · epochs)`.
    pub optimizer_switch_fraction: f64,
    pub kd_mode: KdMode,
    pub kd_j: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub base_dropout: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Decoder for the per-epoch dev WER.
    pub eval_decoder: Decoder,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 18,
            lr: 0.006,
            anneal_start_epoch: 6,
            anneal_factor: 0.96,
            lambda_initial: 1.0,
            lambda_late: 0.1,
            optimizer_switch_fraction: 2.0 / 3.0,
            kd_mode: KdMode::AlphaD,
            kd_j: 10,
            batch_size: 32,
            seed: 1,
            base_dropout: 0.1,
            weight_decay: 0.01,
            clip_norm: 5.0,
            eval_decoder: Decoder::Greedy,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor <= 1.0) {
            return bad(format!("anneal_factor {} must be in (0, 1]", self.anneal_factor));
        }
        if !(0.0..=1.0).contains(&self.optimizer_switch_fraction) {
            return bad(format!("optimizer_switch_fraction {} must be in [0, 1]", self.optimizer_switch_fraction));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(4) {
            return bad(format!("batch_size {} must be a positive multiple of 4", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.base_dropout) {
            return bad(format!("base_dropout {} must be in [0, 1)", self.base_dropout));
        }
        if self.lambda_initial < 0.0 || self.lambda_late < 0.0 || self.weight_decay < 0.0 || !(self.clip_norm > 0.0) {
            return bad("lambda, weight_decay must be >= 0 and clip_norm > 0".into());
        }
        if self.kd_mode != KdMode::None && self.kd_j < 2 {
            return bad(format!("kd_j {} must be >= 2", self.kd_j));
        }
        Ok(())
    }

    /// 0-based epoch at which ScaledAdam and `lambda_late` take over.
    pub fn switch_epoch(&self) -> usize {
        (self.optimizer_switch_fraction * self.epochs as f64 + 1e-9).floor() as usize
    }

    /// Learning rate of 0-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.anneal_factor.powi(epoch.saturating_sub(self.anneal_start_epoch) as i32)
    }

    pub fn lambda_at(&self, epoch: usize) -> f64 {
        if epoch >= self.switch_epoch() {
            self.lambda_late
        } else {
            self.lambda_initial
        }
    }

    pub fn optimizer_at(&self, epoch: usize) -> OptimizerKind {
        if epoch >= self.switch_epoch() {
            OptimizerKind::ScaledAdam
        } else {
            OptimizerKind::Adam
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// What a run trains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTarget {
    /// Sandwich-sampled supernet.
    Supernet,
    /// One fixed subnetwork, trained alone with one full-batch pass per step.
    Individual(SubnetworkConfig),
}

impl TrainTarget {
    fn mode(&self) -> &'static str {
        match self {
            TrainTarget::Supernet => "supernet",
            TrainTarget::Individual(_) => "individual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassRole {
    Max,
    Min,
    Random,
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassMetrics {
    pub role: PassRole,
    pub config: String,
    pub utterances: usize,
    pub rnnt_loss: f64,
    pub kd_loss: Option<f64>,
    pub grad_norm: f64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub record: String,
    pub mode: String,
    pub epoch: usize,
    pub step: usize,
    pub global_step: usize,
    pub lr: f64,
    pub lambda: f64,
    pub optimizer: OptimizerKind,
    pub passes: Vec<PassMetrics>,
    pub total_loss: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub flops: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub record: String,
    pub mode: String,
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub optimizer: OptimizerKind,
    pub steps: usize,
    pub skipped_steps: usize,
    pub mean_total_loss: f64,
    pub dev_wer: f64,
    pub flops: u64,
    pub wall_secs: f64,
}

/// Deterministic seed for a `(seed, a, b)` triple (splitmix64 finalizer).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Distillation settings for one pass.
#[derive(Debug, Clone, Copy)]
pub struct KdSettings<'t> {
    /// Teacher lattices, one per utterance of the pass.
    pub teacher: &'t [Vec<f64>],
    pub divergence: Divergence,
    pub j: usize,
    pub lambda: f64,
}

/// Result of one forward (and optionally backward) pass of one subnetwork.
#[derive(Debug)]
pub struct PassOutput {
    /// `mean rnnt + λ·mean kd` over the pass's utterances.
    pub loss: f64,
    pub rnnt_loss: f64,
    pub kd_loss: Option<f64>,
    pub grads: Option<ParamGrads>,
    /// Detached lattice log-probabilities, when requested.
    pub lattices: Vec<Vec<f64>>,
    pub flops: u64,
}

/// Runs subnetwork `cfg` on `utts`. With `backward` the gradient of the
/// pass loss is returned; otherwise only values are computed.
#[allow(clippy::too_many_arguments)]
pub fn run_pass(
    params: &SupernetParams,
    space: &SearchSpace,
    cfg: &SubnetworkConfig,
    utts: &[&Utterance],
    dropout: Option<Dropout>,
    kd: Option<KdSettings<'_>>,
    keep_lattices: bool,
    backward: bool,
) -> Result<PassOutput> {
    let n = utts.len() as f64;
    let grad = if backward { Grad::Track } else { Grad::Frozen };
    let mut tape = Tape::new();
    let batch: Vec<(&Tensor, &[usize])> = utts.iter().map(|u| (&u.features, u.tokens.as_slice())).collect();
    let lattices = params.lattices(&mut tape, space, cfg, &batch, dropout, grad)?;
    let mut rnnt: Option<Var> = None;
    let mut kd_sum: Option<Var> = None;
    for (i, (&lp, u)) in lattices.iter().zip(utts).enumerate() {
        let l = transducer::transducer_loss(&mut tape, lp, &u.tokens)?;
        rnnt = Some(match rnnt {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
        if let Some(k) = kd {
            let (d, _) = distill::kd_loss(&mut tape, &k.teacher[i], lp, &u.tokens, k.j, k.divergence)?;
            kd_sum = Some(match kd_sum {
                Some(acc) => tape.add(acc, d)?,
                None => d,
            });
        }
    }
    let rnnt = tape.scale(rnnt.expect("non-empty pass"), 1.0 / n);
    let rnnt_loss = tape.scalar(rnnt);
    let (total, kd_loss) = match (kd_sum, kd) {
        (Some(s), Some(k)) => {
            let mean = tape.scale(s, 1.0 / n);
            let kd_value = tape.scalar(mean);
            let weighted = tape.scale(mean, k.lambda);
            (tape.add(rnnt, weighted)?, Some(kd_value))
        }
        _ => (rnnt, None),
    };
    let loss = tape.scalar(total);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss} for {cfg}")));
    }
    let kept = if keep_lattices {
        lattices.iter().map(|&v| tape.value(v).to_vec()).collect()
    } else {
        Vec::new()
    };
    let grads = if backward {
        let g = tape.backward(total)?;
        let mut out = params.store().zero_grads();
        g.accumulate_params(&mut out, 1.0);
        Some(out)
    } else {
        None
    };
    Ok(PassOutput {
        loss,
        rnnt_loss,
        kd_loss,
        grads,
        lattices: kept,
        flops: tape.flops(),
    })
}

/// Everything random about one step, fixed up front.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub configs: Vec<(PassRole, SubnetworkConfig)>,
    pub dropout_seeds: Vec<u64>,
}

impl StepPlan {
    pub fn new(space: &SearchSpace, target: &TrainTarget, seed: u64, epoch: usize, step: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64, step as u64));
        let configs = match target {
            TrainTarget::Supernet => {
                let [max, min, r1, r2] = space.sample_sandwich(&mut rng);
                vec![
                    (PassRole::Max, max),
                    (PassRole::Min, min),
                    (PassRole::Random, r1),
                    (PassRole::Random, r2),
                ]
            }
            TrainTarget::Individual(cfg) => vec![(PassRole::Single, cfg.clone())],
        };
        let dropout_seeds = configs.iter().map(|_| rng.random()).collect();
        Self { configs, dropout_seeds }
    }
}

/// Gradient, per-pass metrics and FLOPs of one step's objective.
pub struct StepGradients {
    pub loss: f64,
    pub grads: ParamGrads,
    pub passes: Vec<PassMetrics>,
    pub flops: u64,
}

/// Accumulated gradient of the step objective for a fixed plan. The first
/// pass sees the whole batch; in a supernet plan passes 2–4 see quarters
/// `0..q`, `q..2q`, `2q..3q`.
pub fn step_gradients(
    params: &SupernetParams,
    space: &SearchSpace,
    cfg: &TrainConfig,
    plan: &StepPlan,
    batch: &[&Utterance],
    lambda: f64,
) -> Result<StepGradients> {
    if !batch.len().is_multiple_of(4) || batch.is_empty() {
        return Err(Error::contract(format!("batch of {} is not a positive multiple of 4", batch.len())));
    }
    let q = batch.len() / 4;
    let divergence = Divergence::for_mode(cfg.kd_mode);
    let mut grads = params.store().zero_grads();
    let mut passes = Vec::with_capacity(plan.configs.len());
    let mut teacher: Vec<Vec<f64>> = Vec::new();
    let mut loss = 0.0;
    let mut flops = 0;
    for (k, ((role, sub), &seed)) in plan.configs.iter().zip(&plan.dropout_seeds).enumerate() {
        let utts = if k == 0 { batch } else { &batch[(k - 1) * q..k * q] };
        let dropout = (cfg.base_dropout > 0.0).then_some(Dropout {
            base_rate: cfg.base_dropout,
            seed,
        });
        let kd = match (k, divergence) {
            (1.., Some(divergence)) => Some(KdSettings {
                teacher: &teacher[(k - 1) * q..k * q],
                divergence,
                j: cfg.kd_j,
                lambda,
            }),
            _ => None,
        };
        let keep = k == 0 && divergence.is_some() && plan.configs.len() > 1;
        let out = run_pass(params, space, sub, utts, dropout, kd, keep, true)?;
        let g = out.grads.expect("backward requested");
        if keep {
            teacher = out.lattices;
        }
        grads.add_scaled(&g, 1.0);
        loss += out.loss;
        flops += out.flops;
        passes.push(PassMetrics {
            role: *role,
            config: sub.to_string(),
            utterances: utts.len(),
            rnnt_loss: out.rnnt_loss,
            kd_loss: out.kd_loss,
            grad_norm: g.global_norm(),
            flops: out.flops,
        });
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(StepGradients {
        loss,
        grads,
        passes,
        flops,
    })
}

/// Position of a step within training.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub epoch: usize,
    pub step: usize,
    pub global_step: usize,
}

/// One training step. On a numeric failure nothing is modified.
pub fn train_step(
    params: &mut SupernetParams,
    space: &SearchSpace,
    cfg: &TrainConfig,
    target: &TrainTarget,
    opt: &mut Optimizer,
    batch: &[&Utterance],
    ctx: StepContext,
) -> Result<StepMetrics> {
    let start = Instant::now();
    let lr = cfg.lr_at(ctx.epoch);
    let lambda = cfg.lambda_at(ctx.epoch);
    let plan = StepPlan::new(space, target, cfg.seed, ctx.epoch, ctx.step);
    let mut sg = step_gradients(params, space, cfg, &plan, batch, lambda)?;
    let norm = sg.grads.global_norm();
    let clipped = norm > cfg.clip_norm;
    if clipped {
        sg.grads.scale(cfg.clip_norm / norm);
    }
    opt.step(params.store_mut(), &sg.grads, lr)?;
    Ok(StepMetrics {
        record: "step".into(),
        mode: target.mode().into(),
        epoch: ctx.epoch,
        step: ctx.step,
        global_step: ctx.global_step,
        lr,
        lambda,
        optimizer: opt.kind(),
        passes: sg.passes,
        total_loss: sg.loss,
        grad_norm: norm,
        clipped,
        flops: sg.flops,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Inputs of a training run.
#[derive(Debug, Clone)]
pub struct TrainRun<'c> {
    pub arch: Architecture,
    pub space: SearchSpace,
    pub config: TrainConfig,
    pub target: TrainTarget,
    pub corpus: &'c Corpus,
    /// Checkpoints and `metrics.jsonl` go here when set.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed epochs (the schedule still follows
    /// `config.epochs`).
    pub stop_after: Option<usize>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: SupernetParams,
    pub optimizer: Optimizer,
    pub steps: Vec<StepMetrics>,
    pub epochs: Vec<EpochMetrics>,
    pub epochs_completed: usize,
    pub wall_secs: f64,
}

impl TrainOutcome {
    pub fn total_flops(&self) -> u64 {
        self.steps.iter().map(|s| s.flops).sum()
    }

    pub fn dev_wer_after(&self, epochs_completed: usize) -> Option<f64> {
        self.epochs.iter().find(|e| e.epoch + 1 == epochs_completed).map(|e| e.dev_wer)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainState {
    kind: String,
    epochs_completed: usize,
    train_config: TrainConfig,
    target: TrainTarget,
    optimizer: serde_json::Value,
}

pub const METRICS_FILE: &str = "metrics.jsonl";

pub fn checkpoint_path(dir: &Path, epochs_completed: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("epoch-{epochs_completed:03}.ckpt"))
}

/// Builds the checkpoint written after an epoch.
fn snapshot(run: &TrainRun<'_>, params: &SupernetParams, opt: &Optimizer, epochs_completed: usize) -> Checkpoint {
    let (extra, optimizer) = opt.to_parts(params.store());
    let state = TrainState {
        kind: "todm-train-state".into(),
        epochs_completed,
        train_config: run.config.clone(),
        target: run.target.clone(),
        optimizer,
    };
    Checkpoint {
        params: params.clone(),
        space: run.space.clone(),
        extra,
        metadata: serde_json::to_value(state).expect("serializable"),
    }
}

/// Epochs completed and training target recorded in a checkpoint, if it
/// was written by [`train`].
pub fn checkpoint_progress(ck: &Checkpoint) -> Option<(usize, TrainTarget)> {
    let state: TrainState = serde_json::from_value(ck.metadata.clone()).ok()?;
    Some((state.epochs_completed, state.target))
}

fn metric_epoch(line: &str) -> Option<usize> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    v.get("epoch")?.as_u64().map(|e| e as usize)
}

/// Keeps only metrics lines of epochs before `epoch`.
fn truncate_metrics(path: &Path, epoch: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if metric_epoch(&line).is_some_and(|e| e < epoch) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Runs (or resumes) training.
pub fn train(run: &TrainRun<'_>, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    let cfg = &run.config;
    cfg.check()?;
    run.arch.check_space(&run.space)?;
    if let TrainTarget::Individual(c) = &run.target {
        run.space.require_valid(c)?;
    }
    if run.corpus.train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "training split has {} utterances, fewer than one batch of {}",
            run.corpus.train.len(),
            cfg.batch_size
        )));
    }
    if run.corpus.dev.is_empty() {
        return Err(Error::Config("dev split is empty".into()));
    }
    if run.corpus.config.d_in != run.arch.d_in || run.corpus.config.vocab != run.arch.vocab {
        return Err(Error::Config(format!(
            "corpus (d_in {}, vocab {}) does not match model (d_in {}, vocab {})",
            run.corpus.config.d_in, run.corpus.config.vocab, run.arch.d_in, run.arch.vocab
        )));
    }
    if cfg.kd_mode != KdMode::None && cfg.kd_j >= run.arch.vocab {
        return Err(Error::Config(format!("kd_j {} must be below the vocabulary size {}", cfg.kd_j, run.arch.vocab)));
    }

    let (mut params, mut opt, start_epoch) = match resume {
        Some(ck) => {
            let state: TrainState = serde_json::from_value(ck.metadata.clone()).map_err(|e| Error::Format {
                what: "checkpoint metadata",
                detail: e.to_string(),
            })?;
            if state.train_config != *cfg || state.target != run.target {
                return Err(Error::Config("checkpoint was written with a different training config".into()));
            }
            if ck.params.arch() != &run.arch || ck.space != run.space {
                return Err(Error::Config("checkpoint architecture or search space differs from the run".into()));
            }
            let opt = Optimizer::from_parts(ck.params.store(), &ck.extra, &state.optimizer)?;
            (ck.params.clone(), opt, state.epochs_completed)
        }
        None => {
            let params = SupernetParams::init(run.arch.clone(), derive_seed(cfg.seed, u64::MAX, 0))?;
            let opt = Optimizer::new(cfg.optimizer_at(0), cfg.adam(), params.store());
            (params, opt, 0)
        }
    };

    let mut log = MetricsLog::open(run.out_dir.as_deref(), resume.is_some().then_some(start_epoch))?;

    let eval_cfg = match &run.target {
        TrainTarget::Supernet => run.space.max_config(),
        TrainTarget::Individual(c) => c.clone(),
    };
    let end_epoch = run.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    let steps_per_epoch = run.corpus.train.len() / cfg.batch_size;
    let started = Instant::now();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    for epoch in start_epoch..end_epoch {
        let epoch_start = Instant::now();
        let kind = cfg.optimizer_at(epoch);
        if opt.kind() != kind {
            log::info!("epoch {epoch}: switching optimizer to {kind:?}");
            opt = Optimizer::new(kind, cfg.adam(), params.store());
        }
        let mut order: Vec<usize> = (0..run.corpus.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, u64::MAX)));
        let mut loss_sum = 0.0;
        let mut done = 0;
        let mut skipped = 0;
        let mut flops = 0;
        for step in 0..steps_per_epoch {
            let batch: Vec<&Utterance> = order[step * cfg.batch_size..(step + 1) * cfg.batch_size]
                .iter()
                .map(|&i| &run.corpus.train[i])
                .collect();
            let ctx = StepContext {
                epoch,
                step,
                global_step: epoch * steps_per_epoch + step,
            };
            match train_step(&mut params, &run.space, cfg, &run.target, &mut opt, &batch, ctx) {
                Ok(m) => {
                    loss_sum += m.total_loss;
                    flops += m.flops;
                    done += 1;
                    log.write(&m)?;
                    steps.push(m);
                }
                Err(Error::Numeric(msg)) => {
                    log::warn!("epoch {epoch} step {step} skipped: {msg}");
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        let dev_wer = params.word_error_rate(&run.space, &eval_cfg, &run.corpus.dev, cfg.eval_decoder)?;
        let em = EpochMetrics {
            record: "epoch".into(),
            mode: run.target.mode().into(),
            epoch,
            lr: cfg.lr_at(epoch),
            lambda: cfg.lambda_at(epoch),
            optimizer: opt.kind(),
            steps: done,
            skipped_steps: skipped,
            mean_total_loss: if done > 0 { loss_sum / done as f64 } else { f64::NAN },
            dev_wer,
            flops,
            wall_secs: epoch_start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {}/{} loss {:.4} dev WER {:.4} ({:.1}s)",
            epoch + 1,
            cfg.epochs,
            em.mean_total_loss,
            dev_wer,
            em.wall_secs
        );
        log.write(&em)?;
        epochs.push(em);
        log.flush()?;
        if let Some(dir) = &run.out_dir {
            snapshot(run, &params, &opt, epoch + 1).save(&checkpoint_path(dir, epoch + 1))?;
        }
    }
    Ok(TrainOutcome {
        params,
        optimizer: opt,
        steps,
        epochs,
        epochs_completed: end_epoch.max(start_epoch),
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

/// Append-only JSONL sink; a no-op without an output directory.
struct MetricsLog(Option<(PathBuf, BufWriter<fs::File>)>);

impl MetricsLog {
    /// Opens `dir/metrics.jsonl`. When resuming at `resume_epoch` the log is
    /// cut back to earlier epochs, otherwise it starts empty.
    fn open(dir: Option<&Path>, resume_epoch: Option<usize>) -> Result<Self> {
        let Some(dir) = dir else { return Ok(Self(None)) };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        match resume_epoch {
            Some(epoch) => truncate_metrics(&path, epoch)?,
            None if path.exists() => fs::remove_file(&path).map_err(|e| Error::io(&path, e))?,
            None => {}
        }
        let f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self(Some((path, BufWriter::new(f)))))
    }

    fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        if let Some((path, w)) = self.0.as_mut() {
            let line = serde_json::to_string(record).expect("serializable record");
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = self.0.as_mut() {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }
}

/// Training cost of one finished run, read back from its metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCost {
    pub label: String,
    pub mode: String,
    pub steps: usize,
    pub passes: usize,
    pub flops: u64,
}

impl RunCost {
    pub fn from_steps(label: impl Into<String>, steps: &[StepMetrics]) -> Self {
        Self {
            label: label.into(),
            mode: steps.first().map_or_else(String::new, |s| s.mode.clone()),
            steps: steps.len(),
            passes: steps.iter().map(|s| s.passes.len()).sum(),
            flops: steps.iter().map(|s| s.flops).sum(),
        }
    }

    /// Reads a `metrics.jsonl` written by [`train`].
    pub fn from_metrics_log(label: impl Into<String>, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut steps = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Format {
                what: "metrics log",
                detail: format!("{}:{}: {e}", path.display(), i + 1),
            })?;
            if v.get("record").and_then(|r| r.as_str()) == Some("step") {
                steps.push(serde_json::from_value::<StepMetrics>(v).map_err(|e| Error::Format {
                    what: "metrics log",
                    detail: format!("{}:{}: {e}", path.display(), i + 1),
                })?);
            }
        }
        Ok(Self::from_steps(label, &steps))
    }
}

/// One row of the deployment-cost table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    /// Number of deployment targets.
    pub k: usize,
    /// FLOPs to train `k` individual models.
    pub individual_flops: f64,
    /// FLOPs of each supernet run, in input order; independent of `k`.
    pub supernet_flops: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub supernet_labels: Vec<String>,
    pub individual_flops_per_model: f64,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,individual_flops");
        for l in &self.supernet_labels {
            out.push_str(&format!(",{l}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{:.6e}", r.k, r.individual_flops));
            for s in &r.supernet_flops {
                out.push_str(&format!(",{s:.6e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Training FLOPs for `K ∈ ks` deployment targets: `K` individual models
/// (each costing the mean of the individual runs) against each supernet run,
/// which is paid once.
pub fn training_cost_report(runs: &[RunCost], ks: &[usize]) -> Result<CostReport> {
    let individual: Vec<&RunCost> = runs.iter().filter(|r| r.mode == "individual").collect();
    let supernets: Vec<&RunCost> = runs.iter().filter(|r| r.mode == "supernet").collect();
    if individual.is_empty() || supernets.is_empty() {
        return Err(Error::Config("cost report needs at least one individual and one supernet run".into()));
    }
    let per_model = individual.iter().map(|r| r.flops as f64).sum::<f64>() / individual.len() as f64;
    Ok(CostReport {
        supernet_labels: supernets.iter().map(|r| r.label.clone()).collect(),
        individual_flops_per_model: per_model,
        rows: ks
            .iter()
            .map(|&k| CostRow {
                k,
                individual_flops: k as f64 * per_model,
                supernet_flops: supernets.iter().map(|r| r.flops as f64).collect(),
            })
            .collect(),
    })
}

/// Deployment-target counts 3, 6, …, 30.
pub fn default_cost_ks() -> Vec<usize> {
    (1..=10).map(|i| 3 * i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, CorpusConfig};
    use crate::gradcheck;

    fn tiny_arch() -> Architecture {
        Architecture {
            d_in: 4,
            d_model: 6,
            n_layers: 3,
            ffn_width: 8,
            d_pred: 4,
            d_joint: 5,
            vocab: 5,
        }
    }

    fn tiny_space() -> SearchSpace {
        SearchSpace::new(3, vec![0, 1], vec![2, 4, 8]).unwrap()
    }

    fn tiny_corpus(n_train: usize) -> Corpus {
        generate_corpus(&CorpusConfig {
            seed: 3,
            n_train,
            n_dev: 6,
            n_test: 2,
            vocab: 5,
            d_in: 4,
            tokens_per_utterance: [1, 3],
            frames_per_token: [1, 2],
            noise_std: 0.2,
            embedding_norm: 1.0,
        })
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            anneal_start_epoch: 1,
            kd_j: 2,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(c.switch_epoch(), 12);
        for k in 0..12 {
            assert!((c.lr_at(6 + k) - 0.006 * 0.96f64.powi(k as i32)).abs() < 1e-18);
        }
        assert_eq!(c.lr_at(0), c.lr_at(6));
        assert_eq!(c.optimizer_at(11), OptimizerKind::Adam);
        assert_eq!(c.optimizer_at(12), OptimizerKind::ScaledAdam);
        assert_eq!((c.lambda_at(11), c.lambda_at(12)), (1.0, 0.1));
        let never = TrainConfig {
            optimizer_switch_fraction: 1.0,
            ..c.clone()
        };
        assert_eq!(never.optimizer_at(17), OptimizerKind::Adam);
        assert!(TrainConfig { batch_size: 30, ..c.clone() }.check().is_err());
        assert!(TrainConfig { anneal_factor: 0.0, ..c }.check().is_err());
    }

    #[test]
    fn sandwich_plan_shape() {
        let space = tiny_space();
        for step in 0..50 {
            let plan = StepPlan::new(&space, &TrainTarget::Supernet, 4, 1, step);
            assert_eq!(plan.configs.len(), 4);
            assert_eq!(plan.configs[0].1, space.max_config());
            assert_eq!(plan.configs[1].1, space.min_config());
            assert_eq!(plan, StepPlan::new(&space, &TrainTarget::Supernet, 4, 1, step));
        }
    }

    #[test]
    fn step_gradient_is_sum_of_pass_gradients() {
        let corpus = tiny_corpus(8);
        let space = tiny_space();
        let params = SupernetParams::init(tiny_arch(), 1).unwrap();
        let cfg = TrainConfig {
            kd_mode: KdMode::Kld,
            ..tiny_config()
        };
        let batch: Vec<&Utterance> = corpus.train.iter().collect();
        let plan = StepPlan::new(&space, &TrainTarget::Supernet, 9, 0, 0);
        let sg = step_gradients(&params, &space, &cfg, &plan, &batch, 1.0).unwrap();
        assert_eq!(sg.passes.len(), 4);
        assert_eq!(sg.passes.iter().map(|p| p.utterances).collect::<Vec<_>>(), vec![8, 2, 2, 2]);
        assert!(sg.passes[0].kd_loss.is_none() && sg.passes[1..].iter().all(|p| p.kd_loss.is_some()));

        // rebuild the same passes independently and add their gradients
        let dropout = |k: usize| Some(Dropout { base_rate: cfg.base_dropout, seed: plan.dropout_seeds[k] });
        let max = run_pass(&params, &space, &plan.configs[0].1, &batch, dropout(0), None, true, true).unwrap();
        let mut total = max.grads.unwrap();
        for k in 1..4 {
            let kd = KdSettings {
                teacher: &max.lattices[(k - 1) * 2..k * 2],
                divergence: Divergence::Kld,
                j: 2,
                lambda: 1.0,
            };
            let out = run_pass(&params, &space, &plan.configs[k].1, &batch[(k - 1) * 2..k * 2], dropout(k), Some(kd), false, true).unwrap();
            total.add_scaled(&out.grads.unwrap(), 1.0);
        }
        for id in params.store().ids() {
            for (a, b) in total.get(id).iter().zip(sg.grads.get(id)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn combined_loss_gradient_matches_finite_differences() {
        let corpus = tiny_corpus(4);
        let space = tiny_space();
        let mut params = SupernetParams::init(tiny_arch(), 2).unwrap();
        let batch: Vec<&Utterance> = corpus.train.iter().collect();
        let cfg = TrainConfig {
            kd_mode: KdMode::AlphaD,
            base_dropout: 0.0,
            ..tiny_config()
        };
        let plan = StepPlan::new(&space, &TrainTarget::Supernet, 5, 0, 0);
        let sg = step_gradients(&params, &space, &cfg, &plan, &batch, 0.7).unwrap();
        // the teacher is a constant of the objective
        let teacher = run_pass(&params, &space, &plan.configs[0].1, &batch, None, None, true, false).unwrap().lattices;
        let objective = |p: &SupernetParams| {
            let mut total = run_pass(p, &space, &plan.configs[0].1, &batch, None, None, false, false).unwrap().loss;
            for k in 1..4 {
                let kd = KdSettings {
                    teacher: &teacher[k - 1..k],
                    divergence: Divergence::Alpha(Default::default()),
                    j: 2,
                    lambda: 0.7,
                };
                total += run_pass(p, &space, &plan.configs[k].1, &batch[k - 1..k], None, Some(kd), false, false).unwrap().loss;
            }
            total
        };
        assert!((objective(&params) - sg.loss).abs() < 1e-12);
        let probes = ["encoder.layers.0.ffn.w_in", "encoder.layers.1.mixer.w", "predictor.embed", "joiner.out.w"];
        for name in probes {
            let id = params.store().id(name).unwrap();
            for idx in [0usize, 3] {
                let orig = params.store().get(id).data()[idx];
                let h = gradcheck::DEFAULT_STEP;
                params.store_mut().get_mut(id).data_mut()[idx] = orig + h;
                let up = objective(&params);
                params.store_mut().get_mut(id).data_mut()[idx] = orig - h;
                let down = objective(&params);
                params.store_mut().get_mut(id).data_mut()[idx] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = sg.grads.get(id)[idx];
                assert!(gradcheck::rel_error(ana, num) < 1e-3, "{name}[{idx}]: {ana} vs {num}");
            }
        }
    }

    #[test]
    fn identical_teacher_and_student_give_zero_kd() {
        let corpus = tiny_corpus(8);
        let space = SearchSpace::new(3, vec![0], vec![8]).unwrap();
        let params = SupernetParams::init(tiny_arch(), 3).unwrap();
        let cfg = TrainConfig {
            base_dropout: 0.0,
            ..tiny_config()
        };
        let batch: Vec<&Utterance> = corpus.train.iter().collect();
        let plan = StepPlan::new(&space, &TrainTarget::Supernet, 1, 0, 0);
        let sg = step_gradients(&params, &space, &cfg, &plan, &batch, 1.0).unwrap();
        for p in &sg.passes[1..] {
            assert!(p.kd_loss.unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_space_matches_single_model_objective() {
        let corpus = tiny_corpus(2);
        let space = SearchSpace::new(3, vec![0], vec![8]).unwrap();
        let params = SupernetParams::init(tiny_arch(), 4).unwrap();
        let cfg = TrainConfig {
            kd_mode: KdMode::None,
            base_dropout: 0.0,
            ..tiny_config()
        };
        // every quarter holds the same two utterances, so each pass mean equals the full mean
        let quarter: Vec<&Utterance> = corpus.train.iter().collect();
        let batch: Vec<&Utterance> = quarter.iter().cycle().take(8).copied().collect();
        let sandwich = step_gradients(&params, &space, &cfg, &StepPlan::new(&space, &TrainTarget::Supernet, 1, 0, 0), &batch, 1.0).unwrap();
        let single_target = TrainTarget::Individual(space.max_config());
        let single = step_gradients(&params, &space, &cfg, &StepPlan::new(&space, &single_target, 1, 0, 0), &batch, 1.0).unwrap();
        assert!((sandwich.loss - 4.0 * single.loss).abs() < 1e-10);
        for id in params.store().ids() {
            for (a, b) in sandwich.grads.get(id).iter().zip(single.grads.get(id)) {
                assert!((a - 4.0 * b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn resume_replays_uninterrupted_run() {
        let corpus = tiny_corpus(16);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            optimizer_switch_fraction: 0.34,
            ..tiny_config()
        };
        let run = |out: &str, stop: Option<usize>| TrainRun {
            arch: tiny_arch(),
            space: tiny_space(),
            config: cfg.clone(),
            target: TrainTarget::Supernet,
            corpus: &corpus,
            out_dir: Some(dir.path().join(out)),
            stop_after: stop,
        };
        let full = train(&run("full", None), None).unwrap();
        let first = train(&run("split", Some(1)), None).unwrap();
        assert_eq!(first.epochs_completed, 1);
        let ck = Checkpoint::load(&checkpoint_path(&dir.path().join("split"), 1)).unwrap();
        let rest = train(&run("split", None), Some(&ck)).unwrap();
        assert_eq!(rest.epochs_completed, 3);
        let a: Vec<f64> = full.steps.iter().map(|s| s.total_loss).collect();
        let b: Vec<f64> = first.steps.iter().chain(&rest.steps).map(|s| s.total_loss).collect();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(full.params.store(), rest.params.store());
        assert_eq!(full.optimizer, rest.optimizer);
        assert_eq!(full.optimizer.kind(), OptimizerKind::ScaledAdam);
        let cost_full = RunCost::from_metrics_log("a", &dir.path().join("full").join(METRICS_FILE)).unwrap();
        let cost_split = RunCost::from_metrics_log("b", &dir.path().join("split").join(METRICS_FILE)).unwrap();
        assert_eq!(cost_full.steps, cost_split.steps);
        assert_eq!(cost_full.passes, 4 * cost_full.steps);
    }

    #[test]
    fn sandwich_contract_over_an_epoch() {
        let corpus = tiny_corpus(24);
        let cfg = TrainConfig {
            epochs: 1,
            optimizer_switch_fraction: 1.0,
            ..tiny_config()
        };
        let run = TrainRun {
            arch: tiny_arch(),
            space: tiny_space(),
            config: cfg.clone(),
            target: TrainTarget::Supernet,
            corpus: &corpus,
            out_dir: None,
            stop_after: None,
        };
        let out = train(&run, None).unwrap();
        assert_eq!(out.steps.len(), 3);
        for s in &out.steps {
            assert_eq!(s.passes.len(), 4);
            assert_eq!(s.passes[0].role, PassRole::Max);
            assert_eq!(s.passes[0].config, run.space.max_config().to_string());
            assert_eq!(s.passes[0].utterances, 8);
            assert!(s.passes[1..].iter().all(|p| p.utterances == 2));
            assert_eq!(s.lambda, cfg.lambda_initial);
        }
        assert!(out.epochs[0].dev_wer.is_finite());
    }

    #[test]
    fn cost_report_constancy() {
        let runs = vec![
            RunCost { label: "ind".into(), mode: "individual".into(), steps: 1, passes: 1, flops: 100 },
            RunCost { label: "sn".into(), mode: "supernet".into(), steps: 1, passes: 4, flops: 250 },
            RunCost { label: "sn-kd".into(), mode: "supernet".into(), steps: 1, passes: 4, flops: 300 },
        ];
        let r = training_cost_report(&runs, &default_cost_ks()).unwrap();
        assert_eq!(r.rows[0].k, 3);
        assert_eq!(r.rows[0].individual_flops, 300.0);
        assert_eq!(r.rows[1].individual_flops, 2.0 * r.rows[0].individual_flops);
        assert!(r.rows.iter().all(|row| row.supernet_flops == vec![250.0, 300.0]));
        assert!(r.to_csv().starts_with("k,individual_flops,sn,sn-kd\n3,"));
        assert!(training_cost_report(&runs[..1], &[3]).is_err());
    }
}
