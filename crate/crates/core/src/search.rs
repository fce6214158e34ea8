//! Post-training subnetwork search: evolutionary search under size budgets,
//! an exhaustive oracle for small spaces, and Pareto-front extraction.
//!
//! Fitness is the corpus WER of a subnetwork with the supernet weights
//! frozen; nothing here records a tape or runs a backward pass.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff;
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::supernet::{model_size_bytes, Decoder, FrozenEvaluator, SearchSpace, SubnetworkConfig, SupernetParams};

/// Default cap on the number of configs [`exhaustive_search`] will visit.
pub const EXHAUSTIVE_CAP: usize = 10_000;

/// Added to the WER of configs that fit no budget, so selection prefers
/// any feasible config.
const INFEASIBLE_PENALTY: f64 = 1e6;

/// Children resampled at most this often when they repeat a known config.
const FRESH_CHILD_ATTEMPTS: usize = 8;

/// One evaluated subnetwork.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoEntry {
    pub config: SubnetworkConfig,
    pub size_bytes: u64,
    pub wer: f64,
}

/// A size budget, absolute or relative to the max config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Bytes(u64),
    /// Fraction of the max config's size, e.g. 0.3 for "30%".
    Fraction(f64),
}

impl Budget {
    pub fn resolve(self, max_bytes: u64) -> u64 {
        match self {
            Budget::Bytes(b) => b,
            Budget::Fraction(f) => (f * max_bytes as f64 + 1e-9).floor() as u64,
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Bytes(b) => write!(f, "{b}"),
            Budget::Fraction(x) => write!(f, "{}%", x * 100.0),
        }
    }
}

impl FromStr for Budget {
    type Err = Error;

    /// Accepts `"30%"` or a byte count such as `"120000"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("cannot parse size budget {s:?}; expected bytes or a percentage"));
        match s.strip_suffix('%') {
            Some(p) => {
                let pct: f64 = p.trim().parse().map_err(|_| bad())?;
                if !(pct > 0.0 && pct.is_finite()) {
                    return Err(bad());
                }
                Ok(Budget::Fraction(pct / 100.0))
            }
            None => s.parse().map(Budget::Bytes).map_err(|_| bad()),
        }
    }
}

impl Serialize for Budget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Budget::Bytes(b) => s.serialize_u64(*b),
            Budget::Fraction(_) => s.serialize_str(&self.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Bytes(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Bytes(b) => Ok(Budget::Bytes(b)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchParams {
    pub population_size: usize,
    pub generations: usize,
    pub mutation_rate: f64,
    pub crossover_rate: f64,
    pub seed: u64,
    pub budgets: Vec<Budget>,
    pub fitness_decoder: Decoder,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            population_size: 16,
            generations: 10,
            mutation_rate: 0.2,
            crossover_rate: 0.5,
            seed: 0,
            budgets: vec![Budget::Fraction(0.3), Budget::Fraction(0.5), Budget::Fraction(1.0)],
            fitness_decoder: Decoder::Greedy,
        }
    }
}

impl SearchParams {
    pub fn check(&self) -> Result<()> {
        if self.population_size < 2 {
            return Err(Error::Config(format!("population_size {} must be >= 2", self.population_size)));
        }
        for (name, r) in [("mutation_rate", self.mutation_rate), ("crossover_rate", self.crossover_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} {r} must be in [0, 1]")));
            }
        }
        if self.budgets.is_empty() {
            return Err(Error::Config("at least one size budget is required".into()));
        }
        Ok(())
    }

    /// Budgets in bytes, which must come out strictly ascending.
    pub fn resolve_budgets(&self, max_bytes: u64) -> Result<Vec<u64>> {
        let bytes: Vec<u64> = self.budgets.iter().map(|b| b.resolve(max_bytes)).collect();
        if bytes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("size budgets {bytes:?} are not strictly ascending")));
        }
        Ok(bytes)
    }
}

/// Corpus WER of `cfg` on `val` with frozen weights.
pub fn evaluate_fitness(
    params: &SupernetParams,
    space: &SearchSpace,
    cfg: &SubnetworkConfig,
    val: &[Utterance],
    decoder: Decoder,
) -> Result<f64> {
    params.word_error_rate(space, cfg, val, decoder)
}

fn step_index<R: Rng + ?Sized>(rng: &mut R, i: usize, len: usize) -> usize {
    match (i > 0, i + 1 < len) {
        (true, true) => {
            if rng.random_bool(0.5) {
                i - 1
            } else {
                i + 1
            }
        }
        (true, false) => i - 1,
        (false, true) => i + 1,
        (false, false) => i,
    }
}

/// Moves each coordinate, with probability `rate`, to a neighbouring option:
/// the dropped-layer count to an adjacent layer option (cutting the channel
/// list, or extending it at full width) and each width one step up or down.
pub fn mutate<R: Rng + ?Sized>(cfg: &SubnetworkConfig, space: &SearchSpace, rng: &mut R, rate: f64) -> SubnetworkConfig {
    let mut out = cfg.clone();
    if rng.random_bool(rate) {
        let i = space
            .layer_options
            .iter()
            .position(|&d| d == cfg.dropped_top_layers)
            .expect("valid config");
        let d = space.layer_options[step_index(rng, i, space.layer_options.len())];
        out.dropped_top_layers = d;
        out.channels.resize(space.n_layers_max - d, space.max_channels());
    }
    let opts = &space.channel_options;
    for c in &mut out.channels {
        if rng.random_bool(rate) {
            let i = opts.iter().position(|o| o == c).expect("valid config");
            *c = opts[step_index(rng, i, opts.len())];
        }
    }
    out
}

/// Uniform crossover: the dropped-layer count comes from one parent and each
/// kept layer's width from either parent that has that layer.
pub fn crossover<R: Rng + ?Sized>(a: &SubnetworkConfig, b: &SubnetworkConfig, rng: &mut R) -> SubnetworkConfig {
    let (first, other) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
    let channels = first
        .channels
        .iter()
        .enumerate()
        .map(|(i, &c)| match other.channels.get(i) {
            Some(&o) if rng.random_bool(0.5) => o,
            _ => c,
        })
        .collect();
    SubnetworkConfig {
        dropped_top_layers: first.dropped_top_layers,
        channels,
    }
}

/// Entries no other entry dominates (no larger size, no higher WER, one of
/// them strictly better), ordered by size with ties in input order.
pub fn pareto_filter(entries: &[ParetoEntry]) -> Vec<ParetoEntry> {
    let mut sorted: Vec<&ParetoEntry> = entries.iter().collect();
    sorted.sort_by_key(|e| e.size_bytes);
    let mut out = Vec::new();
    let mut best_smaller = f64::INFINITY;
    for group in sorted.chunk_by(|a, b| a.size_bytes == b.size_bytes) {
        let w = group.iter().map(|e| e.wer).fold(f64::INFINITY, f64::min);
        if w < best_smaller {
            out.extend(group.iter().filter(|e| e.wer == w).map(|&e| e.clone()));
        }
        best_smaller = best_smaller.min(w);
    }
    out
}

/// Best config found for one budget; `None` when even the min config is
/// larger than the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetWinner {
    pub budget: Budget,
    pub budget_bytes: u64,
    pub feasible: bool,
    pub winner: Option<ParetoEntry>,
}

/// Lowest-WER entry within each budget (ties to the smaller, then the
/// lexicographically first config).
pub fn budget_winners(entries: &[ParetoEntry], budgets: &[Budget], bytes: &[u64], min_bytes: u64) -> Vec<BudgetWinner> {
    budgets
        .iter()
        .zip(bytes)
        .map(|(&budget, &b)| BudgetWinner {
            budget,
            budget_bytes: b,
            feasible: b >= min_bytes,
            winner: entries
                .iter()
                .filter(|e| e.size_bytes <= b)
                .min_by(|x, y| {
                    x.wer
                        .total_cmp(&y.wer)
                        .then(x.size_bytes.cmp(&y.size_bytes))
                        .then(x.config.cmp(&y.config))
                })
                .cloned(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub method: String,
    pub decoder: Decoder,
    pub seed: u64,
    pub max_bytes: u64,
    pub winners: Vec<BudgetWinner>,
    /// Pareto front of every evaluated config.
    pub front: Vec<ParetoEntry>,
    /// Every distinct config evaluated, in evaluation order.
    pub evaluated: Vec<ParetoEntry>,
    /// Fitness lookups, including cache hits.
    pub fitness_calls: usize,
    pub encoder_layers_run: usize,
    pub backward_passes: u64,
    pub wall_secs: f64,
}

/// Fitness with a per-config cache over one frozen evaluator.
struct Fitness<'a> {
    eval: FrozenEvaluator<'a>,
    arch: &'a crate::supernet::Architecture,
    space: &'a SearchSpace,
    decoder: Decoder,
    cache: HashMap<SubnetworkConfig, usize>,
    evaluated: Vec<ParetoEntry>,
    calls: usize,
}

impl<'a> Fitness<'a> {
    fn new(params: &'a SupernetParams, space: &'a SearchSpace, val: &[Utterance], decoder: Decoder) -> Result<Self> {
        Ok(Self {
            eval: FrozenEvaluator::new(params, space, val)?,
            arch: params.arch(),
            space,
            decoder,
            cache: HashMap::new(),
            evaluated: Vec::new(),
            calls: 0,
        })
    }

    fn entry(&mut self, cfg: &SubnetworkConfig) -> Result<&ParetoEntry> {
        self.calls += 1;
        let idx = match self.cache.get(cfg) {
            Some(&i) => i,
            None => {
                let wer = self.eval.word_error_rate(cfg, self.decoder)?;
                let size_bytes = model_size_bytes(self.arch, self.space, cfg)?;
                self.evaluated.push(ParetoEntry {
                    config: cfg.clone(),
                    size_bytes,
                    wer,
                });
                self.cache.insert(cfg.clone(), self.evaluated.len() - 1);
                self.evaluated.len() - 1
            }
        };
        Ok(&self.evaluated[idx])
    }
}

/// Picks up to `n` distinct parents: round-robin over the budgets, each
/// taking its best not-yet-chosen feasible member, then by penalized WER.
fn select_parents(pool: &[ParetoEntry], budgets: &[u64], n: usize) -> Vec<SubnetworkConfig> {
    let rank = |a: &&ParetoEntry, b: &&ParetoEntry| {
        a.wer
            .total_cmp(&b.wer)
            .then(a.size_bytes.cmp(&b.size_bytes))
            .then(a.config.cmp(&b.config))
    };
    let mut per_budget: Vec<Vec<&ParetoEntry>> = budgets
        .iter()
        .map(|&b| {
            let mut v: Vec<&ParetoEntry> = pool.iter().filter(|e| e.size_bytes <= b).collect();
            v.sort_by(rank);
            v
        })
        .collect();
    let mut chosen: Vec<SubnetworkConfig> = Vec::with_capacity(n);
    let mut seen = HashSet::new();
    let mut cursor = vec![0usize; budgets.len()];
    while chosen.len() < n {
        let mut progressed = false;
        for (list, pos) in per_budget.iter_mut().zip(cursor.iter_mut()) {
            while *pos < list.len() && seen.contains(&list[*pos].config) {
                *pos += 1;
            }
            if *pos < list.len() && chosen.len() < n {
                seen.insert(list[*pos].config.clone());
                chosen.push(list[*pos].config.clone());
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    let largest = budgets.iter().copied().max().unwrap_or(u64::MAX);
    let penalized = |e: &ParetoEntry| e.wer + if e.size_bytes > largest { INFEASIBLE_PENALTY } else { 0.0 };
    let mut rest: Vec<&ParetoEntry> = pool.iter().filter(|e| !seen.contains(&e.config)).collect();
    rest.sort_by(|a, b| penalized(a).total_cmp(&penalized(b)).then(a.config.cmp(&b.config)));
    for e in rest {
        if chosen.len() >= n {
            break;
        }
        if seen.insert(e.config.clone()) {
            chosen.push(e.config.clone());
        }
    }
    chosen
}

/// Evolutionary search with frozen weights.
///
/// The population starts from the max and min configs plus random ones.
/// Each generation keeps the better half as parents (see
/// [`select_parents`]) and refills with mutated crossovers. Winners and the
/// front are taken over every config evaluated along the way.
pub fn evolve(params: &SupernetParams, space: &SearchSpace, val: &[Utterance], sp: &SearchParams) -> Result<SearchResult> {
    sp.check()?;
    params.arch().check_space(space)?;
    let started = Instant::now();
    let backward_before = autodiff::thread_backward_pass_count();
    let arch = params.arch();
    let max_bytes = model_size_bytes(arch, space, &space.max_config())?;
    let min_bytes = model_size_bytes(arch, space, &space.min_config())?;
    let budgets = sp.resolve_budgets(max_bytes)?;
    let mut fit = Fitness::new(params, space, val, sp.fitness_decoder)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sp.seed);

    let mut population = vec![space.max_config(), space.min_config()];
    while population.len() < sp.population_size {
        population.push(space.random_config(&mut rng));
    }
    population.truncate(sp.population_size);
    let n_parents = sp.population_size.div_ceil(2);
    for generation in 0..=sp.generations {
        let mut pool = Vec::with_capacity(population.len());
        for cfg in &population {
            pool.push(fit.entry(cfg)?.clone());
        }
        if generation == sp.generations {
            break;
        }
        let parents = select_parents(&pool, &budgets, n_parents);
        let mut next = parents.clone();
        while next.len() < sp.population_size {
            let mut child = None;
            for _ in 0..FRESH_CHILD_ATTEMPTS {
                let a = parents.choose(&mut rng).expect("non-empty parents");
                let base = if parents.len() > 1 && rng.random_bool(sp.crossover_rate) {
                    let b = parents.choose(&mut rng).expect("non-empty parents");
                    crossover(a, b, &mut rng)
                } else {
                    a.clone()
                };
                let c = mutate(&base, space, &mut rng, sp.mutation_rate);
                let fresh = !fit.cache.contains_key(&c) && !next.contains(&c);
                child = Some(c);
                if fresh {
                    break;
                }
            }
            next.push(child.expect("at least one attempt"));
        }
        population = next;
        log::debug!("generation {generation}: {} configs evaluated", fit.evaluated.len());
    }

    let winners = budget_winners(&fit.evaluated, &sp.budgets, &budgets, min_bytes);
    Ok(SearchResult {
        method: "evolve".into(),
        decoder: sp.fitness_decoder,
        seed: sp.seed,
        max_bytes,
        winners,
        front: pareto_filter(&fit.evaluated),
        fitness_calls: fit.calls,
        encoder_layers_run: fit.eval.layers_run(),
        evaluated: fit.evaluated,
        backward_passes: autodiff::thread_backward_pass_count() - backward_before,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

/// Evaluates every config of a small space. Refuses spaces with more than
/// `cap` configs.
pub fn exhaustive_search(
    params: &SupernetParams,
    space: &SearchSpace,
    val: &[Utterance],
    budgets: &[Budget],
    decoder: Decoder,
    cap: usize,
) -> Result<SearchResult> {
    params.arch().check_space(space)?;
    let configs = space.enumerate(cap)?;
    let started = Instant::now();
    let backward_before = autodiff::thread_backward_pass_count();
    let arch = params.arch();
    let max_bytes = model_size_bytes(arch, space, &space.max_config())?;
    let min_bytes = model_size_bytes(arch, space, &space.min_config())?;
    let bytes: Vec<u64> = budgets.iter().map(|b| b.resolve(max_bytes)).collect();
    let mut fit = Fitness::new(params, space, val, decoder)?;
    // lexicographic order maximizes shared channel prefixes
    let mut ordered = configs;
    ordered.sort_by(|a, b| a.channels.cmp(&b.channels));
    for cfg in &ordered {
        fit.entry(cfg)?;
    }
    Ok(SearchResult {
        method: "exhaustive".into(),
        decoder,
        seed: 0,
        max_bytes,
        winners: budget_winners(&fit.evaluated, budgets, &bytes, min_bytes),
        front: pareto_filter(&fit.evaluated),
        fitness_calls: fit.calls,
        encoder_layers_run: fit.eval.layers_run(),
        evaluated: fit.evaluated,
        backward_passes: autodiff::thread_backward_pass_count() - backward_before,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

/// Flat record for the exported front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontRecord {
    pub config: String,
    pub dropped_top_layers: usize,
    pub size_bytes: u64,
    pub wer: f64,
    pub decoder: Decoder,
    pub seed: u64,
}

impl SearchResult {
    pub fn front_records(&self) -> Vec<FrontRecord> {
        self.front
            .iter()
            .map(|e| FrontRecord {
                config: e.config.to_string(),
                dropped_top_layers: e.config.dropped_top_layers,
                size_bytes: e.size_bytes,
                wer: e.wer,
                decoder: self.decoder,
                seed: self.seed,
            })
            .collect()
    }

    pub fn front_csv(&self) -> String {
        let mut out = String::from("config,dropped_top_layers,size_bytes,wer,decoder,seed\n");
        for r in self.front_records() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.config, r.dropped_top_layers, r.size_bytes, r.wer, r.decoder, r.seed
            ));
        }
        out
    }

    /// Writes `<stem>.json` (full result) and `<stem>.csv` (front table).
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(self).expect("serializable result");
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.front_csv()).map_err(|e| Error::io(&csv, e))
    }

    pub fn winner(&self, budget_index: usize) -> Option<&ParetoEntry> {
        self.winners.get(budget_index)?.winner.as_ref()
    }
}
