//! Transducer lattice: loss, posteriors, decoding and word error rate.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, logaddexp};
use crate::tensor::Tensor;

/// Vocabulary index of the blank symbol.
pub const BLANK: usize = 0;

/// Joiner log-probabilities over a `T × (U+1) × V` lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    frames: usize,
    labels: usize,
    vocab: usize,
    log_probs: Vec<f64>,
}

impl Lattice {
    /// `labels` is `U`; the lattice has `U + 1` label positions.
    pub fn new(frames: usize, labels: usize, vocab: usize, log_probs: Vec<f64>) -> Result<Self> {
        if frames == 0 || vocab < 2 {
            return Err(Error::contract(format!(
                "lattice needs T >= 1 and V >= 2, got T={frames}, V={vocab}"
            )));
        }
        if log_probs.len() != frames * (labels + 1) * vocab {
            return Err(Error::Shape {
                op: "lattice",
                left: vec![frames, labels + 1, vocab],
                right: vec![log_probs.len()],
            });
        }
        Ok(Self {
            frames,
            labels,
            vocab,
            log_probs,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[f, u1, v] => Self::new(f, u1 - 1, v, t.data().to_vec()),
            s => Err(Error::Shape {
                op: "lattice",
                left: s.to_vec(),
                right: vec![0, 0, 0],
            }),
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn node(&self, t: usize, u: usize) -> &[f64] {
        let i = (t * (self.labels + 1) + u) * self.vocab;
        &self.log_probs[i..i + self.vocab]
    }

    /// Max deviation of any node's probability mass from 1.
    pub fn normalization_error(&self) -> f64 {
        self.log_probs
            .chunks_exact(self.vocab)
            .map(|n| (n.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.frames, self.labels + 1, self.vocab], self.log_probs.clone())
            .expect("lattice shape is consistent")
    }
}

fn check_target(target: &[usize], vocab: usize) -> Result<()> {
    if let Some(&bad) = target.iter().find(|&&y| y == BLANK || y >= vocab) {
        return Err(Error::contract(format!(
            "target token {bad} is blank or outside vocabulary of size {vocab}"
        )));
    }
    Ok(())
}

/// Negative log-likelihood of `target` under the lattice `log_probs`
/// (`[T × (U+1) × V]` on the tape), summed over all monotonic alignments by
/// the forward recursion. The result is differentiable through the tape.
pub fn transducer_loss(tape: &mut Tape<'_>, log_probs: Var, target: &[usize]) -> Result<Var> {
    let shape = tape.shape(log_probs).to_vec();
    let (frames, u1, vocab) = match shape[..] {
        [f, u1, v] => (f, u1, v),
        _ => {
            return Err(Error::Shape {
                op: "transducer_loss",
                left: shape,
                right: vec![0, target.len() + 1, 0],
            })
        }
    };
    if frames == 0 {
        return Err(Error::contract("transducer loss needs at least one frame"));
    }
    if u1 != target.len() + 1 {
        return Err(Error::Shape {
            op: "transducer_loss",
            left: shape,
            right: vec![frames, target.len() + 1, vocab],
        });
    }
    check_target(target, vocab)?;
    let at = |t: usize, u: usize, k: usize| (t * u1 + u) * vocab + k;

    let mut alpha: Vec<Var> = Vec::with_capacity(frames * u1);
    let zero = tape.constant(Tensor::scalar(0.0));
    for t in 0..frames {
        for u in 0..u1 {
            if t == 0 && u == 0 {
                alpha.push(zero);
                continue;
            }
            let from_time = if t > 0 {
                let b = tape.pick(log_probs, at(t - 1, u, BLANK))?;
                Some(tape.add(alpha[(t - 1) * u1 + u], b)?)
            } else {
                None
            };
            let from_label = if u > 0 {
                let e = tape.pick(log_probs, at(t, u - 1, target[u - 1]))?;
                Some(tape.add(alpha[t * u1 + u - 1], e)?)
            } else {
                None
            };
            let a = match (from_time, from_label) {
                (Some(x), Some(y)) => tape.logaddexp(x, y)?,
                (Some(x), None) | (None, Some(x)) => x,
                (None, None) => unreachable!(),
            };
            alpha.push(a);
        }
    }
    let last_blank = tape.pick(log_probs, at(frames - 1, u1 - 1, BLANK))?;
    let total = tape.add(alpha[frames * u1 - 1], last_blank)?;
    Ok(tape.scale(total, -1.0))
}

/// Convenience wrapper computing the loss value for a plain lattice.
pub fn transducer_loss_value(lattice: &Lattice, target: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let lp = tape.constant(lattice.to_tensor());
    let loss = transducer_loss(&mut tape, lp, target)?;
    Ok(tape.scalar(loss))
}

/// Per-node probabilities `exp(log_probs)`, shape `[T × (U+1) × V]`.
pub fn lattice_posteriors(lattice: &Lattice) -> Tensor {
    let probs = lattice.log_probs.iter().map(|l| l.exp()).collect();
    Tensor::new(vec![lattice.frames, lattice.labels + 1, lattice.vocab], probs)
        .expect("lattice shape is consistent")
}

/// A decoded token sequence with its accumulated log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
}

/// A frame-synchronous transducer as seen by the decoders: fixed encoder
/// frames, a label-conditioned predictor state, and a joiner producing
/// log-probabilities over the vocabulary.
pub trait StepModel {
    type State: Clone;

    fn frames(&self) -> usize;
    fn initial_state(&self) -> Self::State;
    fn advance(&self, state: &Self::State, token: usize) -> Self::State;
    /// Log-probabilities over the vocabulary at frame `t`.
    fn joint(&self, t: usize, state: &Self::State) -> Vec<f64>;
}

/// Frame-synchronous greedy decoding. After `max_symbols_per_frame`
/// emissions at one frame the blank transition is taken.
pub fn greedy_decode<M: StepModel>(model: &M, max_symbols_per_frame: usize) -> Result<Hypothesis> {
    if max_symbols_per_frame == 0 {
        return Err(Error::contract("max_symbols_per_frame must be >= 1"));
    }
    let mut state = model.initial_state();
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for t in 0..model.frames() {
        let mut emitted = 0;
        loop {
            let lp = model.joint(t, &state);
            let k = if emitted < max_symbols_per_frame {
                kernels::argmax(&lp)
            } else {
                BLANK
            };
            score += lp[k];
            if k == BLANK {
                break;
            }
            tokens.push(k);
            state = model.advance(&state, k);
            emitted += 1;
        }
    }
    Ok(Hypothesis { tokens, score })
}

enum Source<S> {
    Ready(S),
    Extend { parent: usize, token: usize },
}

struct Candidate<S> {
    tokens: Vec<usize>,
    score: f64,
    done: bool,
    source: Source<S>,
}

/// Frame-synchronous beam search.
///
/// Within a frame, hypotheses that took the blank transition (finished the
/// frame) and hypotheses that emitted a token (still expanding) compete in a
/// single pool pruned to `beam`. Candidates with identical token sequences
/// and status are merged by `logaddexp`. With `beam == 1` this reduces to
/// [`greedy_decode`] exactly.
pub fn beam_decode<M: StepModel>(model: &M, beam: usize, max_symbols_per_frame: usize) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::contract("beam must be >= 1"));
    }
    if max_symbols_per_frame == 0 {
        return Err(Error::contract("max_symbols_per_frame must be >= 1"));
    }
    struct Hyp<S> {
        tokens: Vec<usize>,
        score: f64,
        state: S,
    }
    let mut frontier = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
        state: model.initial_state(),
    }];
    for t in 0..model.frames() {
        let mut done: Vec<Hyp<M::State>> = Vec::new();
        let mut active = std::mem::take(&mut frontier);
        for s in 0..=max_symbols_per_frame {
            let mut pool: Vec<Candidate<M::State>> = done
                .drain(..)
                .map(|h| Candidate {
                    tokens: h.tokens,
                    score: h.score,
                    done: true,
                    source: Source::Ready(h.state),
                })
                .collect();
            let mut index: HashMap<(bool, Vec<usize>), usize> = pool
                .iter()
                .enumerate()
                .map(|(i, c)| ((true, c.tokens.clone()), i))
                .collect();
            let mut push = |pool: &mut Vec<Candidate<M::State>>, c: Candidate<M::State>| {
                let key = (c.done, c.tokens.clone());
                if let Some(&i) = index.get(&key) {
                    pool[i].score = logaddexp(pool[i].score, c.score);
                } else {
                    index.insert(key, pool.len());
                    pool.push(c);
                }
            };
            for (pi, h) in active.iter().enumerate() {
                let lp = model.joint(t, &h.state);
                push(
                    &mut pool,
                    Candidate {
                        tokens: h.tokens.clone(),
                        score: h.score + lp[BLANK],
                        done: true,
                        source: Source::Ready(h.state.clone()),
                    },
                );
                if s < max_symbols_per_frame {
                    for (k, &l) in lp.iter().enumerate().skip(1) {
                        let mut tokens = h.tokens.clone();
                        tokens.push(k);
                        push(
                            &mut pool,
                            Candidate {
                                tokens,
                                score: h.score + l,
                                done: false,
                                source: Source::Extend { parent: pi, token: k },
                            },
                        );
                    }
                }
            }
            // stable: ties keep generation order (blank first, low ids first)
            pool.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
            pool.truncate(beam);
            let mut next_active = Vec::new();
            for c in pool {
                let state = match c.source {
                    Source::Ready(s) => s,
                    Source::Extend { parent, token } => model.advance(&active[parent].state, token),
                };
                let h = Hyp {
                    tokens: c.tokens,
                    score: c.score,
                    state,
                };
                if c.done {
                    done.push(h);
                } else {
                    next_active.push(h);
                }
            }
            active = next_active;
            if active.is_empty() {
                break;
            }
        }
        frontier = done;
    }
    let best = frontier
        .into_iter()
        .reduce(|a, b| if b.score > a.score { b } else { a })
        .expect("beam keeps at least one hypothesis");
    Ok(Hypothesis {
        tokens: best.tokens,
        score: best.score,
    })
}

/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Corpus-level word error rate: total edit distance over total reference
/// length.
pub fn word_error_rate(refs: &[Vec<usize>], hyps: &[Vec<usize>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::contract(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::contract("word error rate needs at least one reference token"));
    }
    let errors: usize = refs.iter().zip(hyps).map(|(r, h)| edit_distance(r, h)).sum();
    Ok(errors as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck;

    fn random_lattice(rng: &mut ChaCha8Rng, t: usize, u: usize, v: usize) -> Lattice {
        let mut lp: Vec<f64> = (0..t * (u + 1) * v).map(|_| rng.random_range(-3.0..3.0)).collect();
        kernels::log_softmax_rows(&mut lp, v);
        Lattice::new(t, u, v, lp).unwrap()
    }

    /// Sums path probabilities over every alignment by explicit recursion in
    /// probability space.
    fn brute_force_loss(lat: &Lattice, target: &[usize]) -> f64 {
        fn walk(lat: &Lattice, target: &[usize], t: usize, u: usize) -> f64 {
            let node = lat.node(t, u);
            let mut p = 0.0;
            if t + 1 == lat.frames() && u == target.len() {
                return node[BLANK].exp();
            }
            if t + 1 < lat.frames() {
                p += node[BLANK].exp() * walk(lat, target, t + 1, u);
            }
            if u < target.len() {
                p += node[target[u]].exp() * walk(lat, target, t, u + 1);
            }
            p
        }
        -walk(lat, target, 0, 0).ln()
    }

    #[test]
    fn single_frame_blank_only() {
        let lat = Lattice::new(1, 0, 3, vec![(1.0f64 / 3.0).ln(); 3]).unwrap();
        let loss = transducer_loss_value(&lat, &[]).unwrap();
        assert!((loss + (1.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn two_frame_one_label_hand_enumeration() {
        // nodes (t,u) with V=3, target [2]
        let p = |b: f64, e1: f64, e2: f64| vec![b.ln(), e1.ln(), e2.ln()];
        let nodes = [p(0.5, 0.2, 0.3), p(0.6, 0.3, 0.1), p(0.1, 0.2, 0.7), p(0.9, 0.05, 0.05)];
        let lat = Lattice::new(2, 1, 3, nodes.concat()).unwrap();
        // emit at t=0 then blank, blank:  e(0,0) * b(0,1) * b(1,1)
        let a = 0.3 * 0.6 * 0.9;
        // blank at t=0, emit at t=1, blank: b(0,0) * e(1,0) * b(1,1)
        let b = 0.5 * 0.7 * 0.9;
        let expected = -((a + b) as f64).ln();
        let loss = transducer_loss_value(&lat, &[2]).unwrap();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn dp_matches_brute_force_on_random_lattices() {
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = rng.random_range(1..=4);
            let u = rng.random_range(0..=3);
            let v = rng.random_range(2..=5);
            let lat = random_lattice(&mut rng, t, u, v);
            let target: Vec<usize> = (0..u).map(|_| rng.random_range(1..v)).collect();
            let dp = transducer_loss_value(&lat, &target).unwrap();
            let bf = brute_force_loss(&lat, &target);
            assert!((dp - bf).abs() < 1e-9, "seed {seed}: {dp} vs {bf}");
            assert!(dp >= 0.0);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for seed in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (t, u, v) = (rng.random_range(1..=4), rng.random_range(0..=3), rng.random_range(2..=5));
            let lat = random_lattice(&mut rng, t, u, v);
            let target: Vec<usize> = (0..u).map(|_| rng.random_range(1..v)).collect();
            let err = gradcheck::check(&[lat.to_tensor()], gradcheck::DEFAULT_STEP, |tape, vars| {
                transducer_loss(tape, vars[0], &target)
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn loss_decreases_toward_consistent_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lat = random_lattice(&mut rng, 3, 2, 4);
        let target = [1, 3];
        // alignment: emit 1 at t=0, emit 3 at t=0, blank, blank, blank
        let mut path = vec![(0usize, 0usize, 1usize), (0, 1, 3), (0, 2, BLANK), (1, 2, BLANK), (2, 2, BLANK)];
        path.sort();
        let before = transducer_loss_value(&lat, &target).unwrap();
        let mut sharpened = lat.log_probs().to_vec();
        for &(t, u, k) in &path {
            let base = (t * 3 + u) * 4;
            sharpened[base + k] += 2.0;
            kernels::log_softmax_rows(&mut sharpened[base..base + 4], 4);
        }
        let after = transducer_loss_value(&Lattice::new(3, 2, 4, sharpened).unwrap(), &target).unwrap();
        assert!(after < before);
    }

    #[test]
    fn loss_contract_errors() {
        let lat = Lattice::new(2, 1, 3, vec![(1.0f64 / 3.0).ln(); 12]).unwrap();
        assert!(matches!(transducer_loss_value(&lat, &[3]), Err(Error::Contract(_))));
        assert!(matches!(transducer_loss_value(&lat, &[BLANK]), Err(Error::Contract(_))));
        assert!(transducer_loss_value(&lat, &[1, 2]).is_err());
        assert!(Lattice::new(0, 0, 3, vec![]).is_err());
    }

    #[test]
    fn posteriors_are_normalized() {
        let uni = Lattice::new(1, 0, 4, vec![0.25f64.ln(); 4]).unwrap();
        for p in lattice_posteriors(&uni).data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let hot = Lattice::new(1, 0, 3, vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        assert_eq!(lattice_posteriors(&hot).data(), &[1.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lat = random_lattice(&mut rng, 3, 2, 6);
        for node in lattice_posteriors(&lat).data().chunks(6) {
            assert!((node.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    /// Deterministic pseudo-random joiner keyed by (frame, emitted tokens).
    struct TableModel {
        frames: usize,
        vocab: usize,
        seed: u64,
    }

    impl StepModel for TableModel {
        type State = Vec<usize>;

        fn frames(&self) -> usize {
            self.frames
        }

        fn initial_state(&self) -> Vec<usize> {
            Vec::new()
        }

        fn advance(&self, state: &Vec<usize>, token: usize) -> Vec<usize> {
            let mut s = state.clone();
            s.push(token);
            s
        }

        fn joint(&self, t: usize, state: &Vec<usize>) -> Vec<f64> {
            let mut h = self.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            for &k in state {
                h = h.rotate_left(13) ^ (k as u64 + 1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            let mut lp: Vec<f64> = (0..self.vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
            kernels::log_softmax_rows(&mut lp, self.vocab);
            lp
        }
    }

    /// Enumerates every alignment with at most `max_sym` emissions per frame
    /// and returns the token sequence with the largest total probability.
    fn exhaustive_best(model: &TableModel, max_sym: usize) -> (Vec<usize>, f64) {
        fn rec(m: &TableModel, t: usize, tokens: Vec<usize>, score: f64, emitted: usize, max_sym: usize, acc: &mut HashMap<Vec<usize>, f64>) {
            if t == m.frames {
                let e = acc.entry(tokens).or_insert(f64::NEG_INFINITY);
                *e = logaddexp(*e, score);
                return;
            }
            let lp = m.joint(t, &tokens);
            rec(m, t + 1, tokens.clone(), score + lp[BLANK], 0, max_sym, acc);
            if emitted < max_sym {
                for k in 1..m.vocab {
                    let mut next = tokens.clone();
                    next.push(k);
                    rec(m, t, next, score + lp[k], emitted + 1, max_sym, acc);
                }
            }
        }
        let mut acc = HashMap::new();
        rec(model, 0, Vec::new(), 0.0, 0, max_sym, &mut acc);
        acc.into_iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
    }

    struct ConstModel(Vec<Vec<f64>>);

    impl StepModel for ConstModel {
        type State = usize;
        fn frames(&self) -> usize {
            1
        }
        fn initial_state(&self) -> usize {
            0
        }
        fn advance(&self, s: &usize, _: usize) -> usize {
            s + 1
        }
        fn joint(&self, _: usize, s: &usize) -> Vec<f64> {
            self.0[(*s).min(self.0.len() - 1)].clone()
        }
    }

    #[test]
    fn greedy_blank_model_is_empty() {
        let m = TableModel { frames: 4, vocab: 3, seed: 1 };
        struct Blank(TableModel);
        impl StepModel for Blank {
            type State = ();
            fn frames(&self) -> usize {
                self.0.frames
            }
            fn initial_state(&self) {}
            fn advance(&self, _: &(), _: usize) {}
            fn joint(&self, _: usize, _: &()) -> Vec<f64> {
                vec![0.8f64.ln(), 0.1f64.ln(), 0.1f64.ln()]
            }
        }
        let h = greedy_decode(&Blank(m), 3).unwrap();
        assert!(h.tokens.is_empty());
        assert!((h.score - 4.0 * 0.8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn greedy_single_frame_token_then_blank() {
        let m = ConstModel(vec![
            vec![0.1f64.ln(), 0.2f64.ln(), 0.7f64.ln()],
            vec![0.9f64.ln(), 0.05f64.ln(), 0.05f64.ln()],
        ]);
        let h = greedy_decode(&m, 5).unwrap();
        assert_eq!(h.tokens, vec![2]);
        assert!(greedy_decode(&m, 0).is_err());
    }

    #[test]
    fn greedy_respects_symbol_cap() {
        let m = ConstModel(vec![vec![0.1f64.ln(), 0.9f64.ln()]]);
        let h = greedy_decode(&m, 3).unwrap();
        assert_eq!(h.tokens, vec![1, 1, 1]);
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..100 {
            let m = TableModel { frames: 5, vocab: 4, seed };
            let g = greedy_decode(&m, 2).unwrap();
            let b = beam_decode(&m, 1, 2).unwrap();
            assert_eq!(g.tokens, b.tokens, "seed {seed}");
            assert!((g.score - b.score).abs() <= 1e-9);
        }
    }

    #[test]
    fn wide_beam_recovers_exhaustive_argmax() {
        for seed in 0..60 {
            let frames = 1 + (seed as usize % 3);
            let m = TableModel { frames, vocab: 3, seed };
            let (best, score) = exhaustive_best(&m, 2);
            let b = beam_decode(&m, 100_000, 2).unwrap();
            assert_eq!(b.tokens, best, "seed {seed}");
            assert!((b.score - score).abs() < 1e-9);
        }
    }

    #[test]
    fn edit_distance_matches_naive_recursion() {
        fn naive(a: &[usize], b: &[usize]) -> usize {
            match (a.split_first(), b.split_first()) {
                (None, _) => b.len(),
                (_, None) => a.len(),
                (Some((x, ra)), Some((y, rb))) => {
                    let sub = naive(ra, rb) + usize::from(x != y);
                    sub.min(naive(ra, b) + 1).min(naive(a, rb) + 1)
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let a: Vec<usize> = (0..rng.random_range(0..=6)).map(|_| rng.random_range(1..4)).collect();
            let b: Vec<usize> = (0..rng.random_range(0..=6)).map(|_| rng.random_range(1..4)).collect();
            assert_eq!(edit_distance(&a, &b), naive(&a, &b), "{a:?} {b:?}");
        }
    }

    #[test]
    fn wer_examples() {
        let r = vec![vec![1, 2, 3]];
        assert_eq!(word_error_rate(&r, &r).unwrap(), 0.0);
        assert!((word_error_rate(&r, &[vec![1, 3]]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(word_error_rate(&[vec![]], &[vec![1]]).is_err());
        assert!(word_error_rate(&r, &[]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn edit_distance_triangle(a in proptest::collection::vec(1usize..4, 0..7),
                                  b in proptest::collection::vec(1usize..4, 0..7),
                                  c in proptest::collection::vec(1usize..4, 0..7)) {
            proptest::prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            proptest::prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        }
    }
}
