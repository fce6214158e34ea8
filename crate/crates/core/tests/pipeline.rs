use std::path::Path;
use std::sync::OnceLock;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use todm::config::RunConfig;
use todm::data::{generate_corpus, Corpus, CorpusConfig};
use todm::distill::KdMode;
use todm::optim::OptimizerKind;
use todm::search::{self, Budget, SearchParams};
use todm::supernet::{model_size_bytes, Architecture, Decoder, SearchSpace, SupernetParams};
use todm::trainer::{train, TrainConfig, TrainOutcome, TrainRun, TrainTarget};

fn small_arch() -> Architecture {
    Architecture {
        d_in: 8,
        d_model: 16,
        n_layers: 4,
        ffn_width: 32,
        d_pred: 8,
        d_joint: 16,
        vocab: 7,
    }
}

fn small_space() -> SearchSpace {
    SearchSpace::new(4, vec![0, 2], vec![8, 16, 32]).unwrap()
}

fn small_corpus(noise_std: f64) -> Corpus {
    generate_corpus(&CorpusConfig {
        seed: 11,
        n_train: 320,
        n_dev: 60,
        n_test: 10,
        vocab: 7,
        d_in: 8,
        tokens_per_utterance: [2, 4],
        frames_per_token: [2, 3],
        noise_std,
        embedding_norm: 1.5,
    })
    .unwrap()
}

fn small_train(target: TrainTarget, corpus: &Corpus, epochs: usize) -> TrainOutcome {
    let run = TrainRun {
        arch: small_arch(),
        space: small_space(),
        config: TrainConfig {
            epochs,
            anneal_start_epoch: 2,
            kd_j: 3,
            batch_size: 16,
            lr: 0.01,
            ..TrainConfig::default()
        },
        target,
        corpus,
        out_dir: None,
        stop_after: None,
    };
    train(&run, None).unwrap()
}

/// Supernet trained once and shared by the decoding checks.
fn trained() -> &'static (Corpus, SupernetParams) {
    static CELL: OnceLock<(Corpus, SupernetParams)> = OnceLock::new();
    CELL.get_or_init(|| {
        let corpus = small_corpus(0.3);
        let out = small_train(TrainTarget::Supernet, &corpus, 6);
        (corpus, out.params)
    })
}

#[test]
fn committed_config_is_the_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::default());
}

#[test]
fn logged_schedule_follows_the_switch() {
    let corpus = small_corpus(0.3);
    let out = small_train(TrainTarget::Supernet, &corpus, 3);
    assert_eq!(out.epochs.len(), 3);
    for s in &out.steps {
        assert_eq!(s.passes.len(), 4);
        let late = s.epoch >= 2;
        assert_eq!(s.lambda, if late { 0.1 } else { 1.0 });
        assert_eq!(s.optimizer, if late { OptimizerKind::ScaledAdam } else { OptimizerKind::Adam });
        let expected_lr = 0.01 * 0.96f64.powi(s.epoch.saturating_sub(2) as i32);
        assert_eq!(s.lr, expected_lr);
        assert!(s.passes[1..].iter().all(|p| p.kd_loss.is_some_and(|k| k >= 0.0)));
    }
    let no_kd = TrainRun {
        arch: small_arch(),
        space: small_space(),
        config: TrainConfig {
            epochs: 1,
            kd_mode: KdMode::None,
            batch_size: 16,
            ..TrainConfig::default()
        },
        target: TrainTarget::Supernet,
        corpus: &corpus,
        out_dir: None,
        stop_after: None,
    };
    let plain = train(&no_kd, None).unwrap();
    assert!(plain.steps.iter().all(|s| s.passes.iter().all(|p| p.kd_loss.is_none())));
    // distillation costs extra work for the same passes
    let kd_flops: u64 = out.steps.iter().filter(|s| s.epoch == 0).map(|s| s.flops).sum();
    assert!(kd_flops > plain.total_flops());
}

#[test]
fn corpus_difficulty_grows_with_noise() {
    let cfg = small_space().max_config();
    let wers: Vec<f64> = [0.05, 0.6, 1.5]
        .iter()
        .map(|&noise| {
            let corpus = small_corpus(noise);
            let out = small_train(TrainTarget::Individual(cfg.clone()), &corpus, 4);
            out.params.word_error_rate(&small_space(), &cfg, &corpus.dev, Decoder::Greedy).unwrap()
        })
        .collect();
    assert!(wers[0] <= wers[1] && wers[1] <= wers[2], "{wers:?}");
}

#[test]
fn beam_and_greedy_agree_on_a_trained_model() {
    let (corpus, params) = trained();
    let space = small_space();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut configs = vec![space.max_config(), space.min_config()];
    configs.extend((0..10).map(|_| space.random_config(&mut rng)));
    let mut close = 0;
    for cfg in &configs {
        let g = params.word_error_rate(&space, cfg, &corpus.dev, Decoder::Greedy).unwrap();
        let b = params.word_error_rate(&space, cfg, &corpus.dev, Decoder::BEAM5).unwrap();
        if b <= g + 0.005 {
            close += 1;
        }
        if cfg == &space.max_config() {
            assert!((g - b).abs() <= 0.02, "greedy {g} beam {b}");
        }
    }
    assert!(close as f64 >= 0.95 * configs.len() as f64, "{close}/{}", configs.len());
}

#[test]
fn search_on_a_trained_model_respects_budgets_and_the_oracle() {
    let (corpus, params) = trained();
    let space = small_space();
    let budgets = vec![Budget::Fraction(0.4), Budget::Fraction(0.7), Budget::Fraction(1.0)];
    let exact = search::exhaustive_search(params, &space, &corpus.dev, &budgets, Decoder::Greedy, search::EXHAUSTIVE_CAP).unwrap();
    let sp = SearchParams {
        population_size: 10,
        generations: 6,
        budgets,
        seed: 2,
        ..SearchParams::default()
    };
    let found = search::evolve(params, &space, &corpus.dev, &sp).unwrap();
    assert_eq!(found.backward_passes, 0);
    for (f, e) in found.winners.iter().zip(&exact.winners) {
        let (fw, ew) = (f.winner.as_ref().unwrap(), e.winner.as_ref().unwrap());
        assert!(fw.size_bytes <= f.budget_bytes);
        assert_eq!(fw.size_bytes, model_size_bytes(params.arch(), &space, &fw.config).unwrap());
        assert!(fw.wer >= ew.wer && fw.wer - ew.wer <= 0.01, "{} vs {}", fw.wer, ew.wer);
    }
    assert_eq!(search::pareto_filter(&found.front), found.front);
    // the exhaustive front holds every entry no other entry dominates
    for e in &exact.evaluated {
        let dominated = exact.evaluated.iter().any(|f| {
            f.size_bytes <= e.size_bytes && f.wer <= e.wer && (f.size_bytes < e.size_bytes || f.wer < e.wer)
        });
        assert_eq!(!dominated, exact.front.contains(e));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn size_is_monotone_in_the_config(seed in any::<u64>()) {
        let arch = Architecture::default();
        let space = RunConfig::default().search_space().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = space.random_config(&mut rng);
        // shrink: drop more layers where allowed and narrow every width
        let mut b = a.clone();
        if let Some(&d) = space.layer_options.iter().find(|&&d| d > a.dropped_top_layers) {
            b.dropped_top_layers = d;
            b.channels.truncate(space.n_layers_max - d);
        }
        for c in &mut b.channels {
            *c = space.channel_options[0].max(*c / 2).min(*c);
            if !space.channel_options.contains(c) {
                *c = space.channel_options[0];
            }
        }
        let (sa, sb) = (model_size_bytes(&arch, &space, &a).unwrap(), model_size_bytes(&arch, &space, &b).unwrap());
        prop_assert!(sb <= sa);
        prop_assert!(sa <= model_size_bytes(&arch, &space, &space.max_config()).unwrap());
        prop_assert!(sb >= model_size_bytes(&arch, &space, &space.min_config()).unwrap());
    }

    #[test]
    fn budgets_resolve_monotonically(a in 1u32..100, b in 1u32..100, max in 1u64..10_000_000) {
        let (lo, hi) = (a.min(b), a.max(b));
        let rl = format!("{lo}%").parse::<Budget>().unwrap().resolve(max);
        let rh = format!("{hi}%").parse::<Budget>().unwrap().resolve(max);
        prop_assert!(rl <= rh && rh <= max);
    }
}
