//! Sampled in-place distillation on transducer lattices.
//!
//! At every lattice node the teacher distribution picks `j` token ids: blank,
//! the next reference token, then the teacher's most probable remaining
//! tokens. Teacher and student are both collapsed onto those ids plus one
//! remainder bucket, so the divergence works on `j + 1` numbers per node
//! whatever the vocabulary size.
//!
//! Divergences take the teacher `p` as a constant and are differentiated
//! with respect to the student's bucketed log-probabilities.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::transducer::BLANK;

/// Floor applied to probabilities before logs and ratios.
pub const PROB_FLOOR: f64 = 1e-8;

/// Which distillation term the trainer adds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KdMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "kld")]
    Kld,
    #[serde(rename = "alphaD")]
    AlphaD,
}

impl std::fmt::Display for KdMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KdMode::None => "none",
            KdMode::Kld => "kld",
            KdMode::AlphaD => "alphaD",
        })
    }
}

impl std::str::FromStr for KdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(KdMode::None),
            "kld" => Ok(KdMode::Kld),
            "alphaD" | "alphad" => Ok(KdMode::AlphaD),
            _ => Err(Error::Config(format!("unknown kd mode {s:?} (expected none, kld or alphaD)"))),
        }
    }
}

/// Parameters of the adaptive alpha-divergence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaParams {
    pub alpha_minus: f64,
    pub alpha_plus: f64,
    /// Density ratios are clamped to `[1/beta, beta]`.
    pub beta: f64,
}

impl Default for AlphaParams {
    fn default() -> Self {
        Self {
            alpha_minus: -1.0,
            alpha_plus: 1.0,
            beta: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Divergence {
    Kld,
    Alpha(AlphaParams),
}

impl Divergence {
    pub fn for_mode(mode: KdMode) -> Option<Self> {
        match mode {
            KdMode::None => None,
            KdMode::Kld => Some(Divergence::Kld),
            KdMode::AlphaD => Some(Divergence::Alpha(AlphaParams::default())),
        }
    }

    /// Divergence between bucketed teacher `p` and student `q`.
    pub fn value(&self, p: &[f64], q: &[f64]) -> Result<f64> {
        check_pair(p, q)?;
        let log_q: Vec<f64> = q.iter().map(|&x| x.ln()).collect();
        Ok(self.eval_log(p, &log_q).0)
    }

    /// Value and gradient with respect to `log q`.
    fn eval_log(&self, p: &[f64], log_q: &[f64]) -> (f64, Vec<f64>) {
        match *self {
            Divergence::Kld => kld_log(p, log_q),
            Divergence::Alpha(a) => {
                let lo = alpha_log(p, log_q, a.alpha_minus, a.beta);
                let hi = alpha_log(p, log_q, a.alpha_plus, a.beta);
                if hi.0 >= lo.0 {
                    hi
                } else {
                    lo
                }
            }
        }
    }
}

/// Teacher and student mass on the same `j` token ids plus a remainder.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketedDistribution {
    pub token_ids: Vec<usize>,
    /// `j + 1` entries; the last is the remainder bucket.
    pub probs: Vec<f64>,
}

fn check_distribution(probs: &[f64]) -> Result<()> {
    if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(Error::Numeric("distribution has negative or non-finite entries".into()));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!("distribution sums to {s}")));
    }
    Ok(())
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::contract(format!("bucket sizes differ: {} vs {}", p.len(), q.len())));
    }
    check_distribution(p)?;
    check_distribution(q)
}

/// Bucket ids chosen by the teacher: blank, `target`, then the most probable
/// remaining tokens (ties to the lower id) until there are `j`.
pub fn select_bucket_ids(teacher: &[f64], j: usize, target: usize, blank: usize) -> Result<Vec<usize>> {
    let v = teacher.len();
    if j < 2 || j >= v {
        return Err(Error::contract(format!("bucket size j={j} must satisfy 2 <= j < V={v}")));
    }
    if target >= v || blank >= v {
        return Err(Error::contract(format!("token id out of range for V={v}")));
    }
    let mut ids = vec![blank];
    if target != blank {
        ids.push(target);
    }
    let mut rest: Vec<usize> = (0..v).filter(|&i| i != blank && i != target).collect();
    rest.sort_unstable_by(|&a, &b| teacher[b].total_cmp(&teacher[a]).then(a.cmp(&b)));
    ids.extend_from_slice(&rest[..j - ids.len()]);
    Ok(ids)
}

/// Mass of `probs` on `ids` plus the remainder.
pub fn bucket_on(probs: &[f64], ids: &[usize]) -> BucketedDistribution {
    let mut selected = vec![false; probs.len()];
    let mut out: Vec<f64> = ids
        .iter()
        .map(|&i| {
            selected[i] = true;
            probs[i]
        })
        .collect();
    let rest = probs.iter().zip(&selected).filter(|(_, &s)| !s).map(|(&p, _)| p).sum();
    out.push(rest);
    BucketedDistribution {
        token_ids: ids.to_vec(),
        probs: out,
    }
}

pub fn bucket_topj(teacher: &[f64], j: usize, target: usize, blank: usize) -> Result<BucketedDistribution> {
    check_distribution(teacher)?;
    let ids = select_bucket_ids(teacher, j, target, blank)?;
    Ok(bucket_on(teacher, &ids))
}

fn kld_log(p: &[f64], log_q: &[f64]) -> (f64, Vec<f64>) {
    let floor = PROB_FLOOR.ln();
    let mut value = 0.0;
    let grad = p
        .iter()
        .zip(log_q)
        .map(|(&pi, &lq)| {
            if pi == 0.0 {
                return 0.0;
            }
            value += pi * (pi.max(PROB_FLOOR).ln() - lq.max(floor));
            if lq > floor {
                -pi
            } else {
                0.0
            }
        })
        .collect();
    (value, grad)
}

/// `Σ p log(p/q)` with both sides floored at [`PROB_FLOOR`].
pub fn kld(p: &BucketedDistribution, q: &BucketedDistribution) -> Result<f64> {
    if p.token_ids != q.token_ids {
        return Err(Error::contract("kld on buckets with different token ids"));
    }
    Divergence::Kld.value(&p.probs, &q.probs)
}

/// `φ_α(r)` at `r = e^{lr}`: convex, zero with zero slope at `r = 1`, and
/// non-negative, so rounding noise below zero is clipped.
fn phi(alpha: f64, lr: f64) -> f64 {
    let v = if alpha == 1.0 {
        lr.exp_m1() - lr
    } else if alpha == 0.0 {
        lr.exp() * lr - lr.exp_m1()
    } else {
        let a1 = 1.0 - alpha;
        ((a1 * lr).exp_m1() - a1 * lr.exp_m1()) / (alpha * (alpha - 1.0))
    };
    v.max(0.0)
}

/// `φ_α'(r) = (1 − r^{−α}) / α`.
fn phi_prime(alpha: f64, r: f64) -> f64 {
    if alpha == 0.0 {
        r.ln()
    } else {
        -(-alpha * r.ln()).exp_m1() / alpha
    }
}

fn alpha_log(p: &[f64], log_q: &[f64], alpha: f64, beta: f64) -> (f64, Vec<f64>) {
    let floor = PROB_FLOOR.ln();
    let (lo, hi) = (-beta.ln(), beta.ln());
    let mut value = 0.0;
    let grad = p
        .iter()
        .zip(log_q)
        .map(|(&pi, &lq)| {
            if pi == 0.0 {
                return 0.0;
            }
            let raw = lq.max(floor) - pi.max(PROB_FLOOR).ln();
            let lr = raw.clamp(lo, hi);
            let r = lr.exp();
            value += pi * phi(alpha, lr);
            if lq > floor && raw > lo && raw < hi {
                pi * phi_prime(alpha, r) * r
            } else {
                0.0
            }
        })
        .collect();
    (value, grad)
}

/// Single-alpha divergence `Σ p φ_α(q/p)` with clamped ratios. It equals
/// `1/(α(α−1)) Σ p[(q/p)^{1−α} − 1]` for normalized, unclamped pairs and is
/// non-negative term by term otherwise. `α = 1` is the KL limit.
pub fn alpha_divergence_single(p: &[f64], q: &[f64], alpha: f64, beta: f64) -> Result<f64> {
    check_pair(p, q)?;
    if beta < 1.0 {
        return Err(Error::contract(format!("beta {beta} must be >= 1")));
    }
    let log_q: Vec<f64> = q.iter().map(|&x| x.ln()).collect();
    Ok(alpha_log(p, &log_q, alpha, beta).0)
}

/// `max(D_{α₋}, D_{α₊})`.
pub fn alpha_divergence(p: &BucketedDistribution, q: &BucketedDistribution, params: AlphaParams) -> Result<f64> {
    if p.token_ids != q.token_ids {
        return Err(Error::contract("alpha divergence on buckets with different token ids"));
    }
    Divergence::Alpha(params).value(&p.probs, &q.probs)
}

/// How many floats the bucketed teacher and student occupy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KdFootprint {
    pub nodes: usize,
    pub bucket_floats: usize,
}

impl KdFootprint {
    pub fn floats_per_node(&self) -> f64 {
        self.bucket_floats as f64 / self.nodes as f64
    }
}

/// Mean divergence over all `T·(U+1)` nodes between a constant teacher
/// lattice (log-probabilities, `[T, U+1, V]` flattened) and the student.
/// Node `(t, u)` buckets around `target[u]`, or blank at `u = U`.
pub fn kd_loss(
    tape: &mut Tape<'_>,
    teacher_log_probs: &[f64],
    student: Var,
    target: &[usize],
    j: usize,
    div: Divergence,
) -> Result<(Var, KdFootprint)> {
    let shape = tape.shape(student).to_vec();
    let [t, u1, v] = shape[..] else {
        return Err(Error::Shape {
            op: "kd_loss",
            left: shape,
            right: vec![0, target.len() + 1, 0],
        });
    };
    if u1 != target.len() + 1 || teacher_log_probs.len() != t * u1 * v {
        return Err(Error::Shape {
            op: "kd_loss",
            left: shape,
            right: vec![teacher_log_probs.len() / (u1 * v).max(1), target.len() + 1, v],
        });
    }
    if let Some(&bad) = target.iter().find(|&&y| y == BLANK || y >= v) {
        return Err(Error::contract(format!("target token {bad} invalid for V={v}")));
    }
    let nodes = t * u1;
    let mut ids = Vec::with_capacity(nodes * j);
    let mut teacher = Vec::with_capacity(nodes * (j + 1));
    let mut probs = vec![0.0; v];
    for (n, row) in teacher_log_probs.chunks_exact(v).enumerate() {
        let u = n % u1;
        let next = if u < target.len() { target[u] } else { BLANK };
        probs.iter_mut().zip(row).for_each(|(p, &l)| *p = l.exp());
        let sel = select_bucket_ids(&probs, j, next, BLANK)?;
        teacher.extend(bucket_on(&probs, &sel).probs);
        ids.extend(sel);
    }
    let flat = tape.reshape(student, vec![nodes, v])?;
    let buckets = tape.bucket_log_probs(flat, &ids, j)?;
    let footprint = KdFootprint {
        nodes,
        bucket_floats: teacher.len() + tape.value(buckets).len(),
    };
    let per_node = tape.row_scalar(buckets, |r, log_q| div.eval_log(&teacher[r * (j + 1)..(r + 1) * (j + 1)], log_q))?;
    Ok((tape.mean(per_node), footprint))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck;
    use crate::kernels;
    use crate::tensor::Tensor;

    fn random_dist(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<f64> {
        let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(-spread..spread)).collect();
        kernels::log_softmax_rows(&mut x, n);
        x.iter().map(|l| l.exp()).collect()
    }

    fn bucket(p: Vec<f64>) -> BucketedDistribution {
        BucketedDistribution {
            token_ids: (0..p.len() - 1).collect(),
            probs: p,
        }
    }

    /// Reference `1/(α(α−1)) Σ p[(q/p)^{1−α} − 1]` with compensated sums.
    fn alpha_reference(p: &[f64], q: &[f64], alpha: f64) -> f64 {
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for (&pi, &qi) in p.iter().zip(q) {
            let term = pi * ((1.0 - alpha) * (qi / pi).ln()).exp_m1();
            let y = term - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        sum / (alpha * (alpha - 1.0))
    }

    #[test]
    fn bucket_examples() {
        let b = bucket_topj(&[0.25; 4], 2, 3, 0).unwrap();
        assert_eq!(b.token_ids, vec![0, 3]);
        assert_eq!(b.probs, vec![0.25, 0.25, 0.5]);
        for j in 2..6 {
            let b = bucket_topj(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], j, 2, 0).unwrap();
            assert_eq!(b.probs[0], 1.0);
            assert!(b.probs[1..].iter().all(|&x| x == 0.0));
            assert_eq!(b.probs.len(), j + 1);
        }
        assert!(bucket_topj(&[0.25; 4], 4, 1, 0).is_err());
        assert!(bucket_topj(&[0.25; 4], 1, 1, 0).is_err());
    }

    #[test]
    fn bucket_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let p = random_dist(&mut rng, 50, 4.0);
            let target = rng.random_range(1..50);
            let b = bucket_topj(&p, 10, target, 0).unwrap();
            let selected: f64 = b.probs[..10].iter().sum();
            assert!((b.probs[10] - (1.0 - selected)).abs() < 1e-12);
            assert!((b.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut order: Vec<usize> = (1..50).filter(|&i| i != target).collect();
            order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap());
            let mut got = b.token_ids[2..].to_vec();
            let mut want = order[..8].to_vec();
            got.sort();
            want.sort();
            assert_eq!(got, want);
            assert_eq!(&b.token_ids[..2], &[0, target]);
        }
    }

    #[test]
    fn kld_examples() {
        let p = bucket(vec![0.2, 0.3, 0.5]);
        assert_eq!(kld(&p, &p).unwrap(), 0.0);
        let v = kld(&bucket(vec![1.0, 0.0, 0.0]), &bucket(vec![0.5, 0.25, 0.25])).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let other = BucketedDistribution {
            token_ids: vec![0, 2],
            probs: vec![0.2, 0.3, 0.5],
        };
        assert!(kld(&p, &other).is_err());
    }

    #[test]
    fn kld_matches_reference_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let n = rng.random_range(3..12);
            let p = random_dist(&mut rng, n, 3.0);
            let q = random_dist(&mut rng, n, 3.0);
            let v = kld(&bucket(p.clone()), &bucket(q.clone())).unwrap();
            let reference: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
            assert!(v >= 0.0);
            assert!((v - reference).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_one_branch_is_kld() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut checked = 0;
        while checked < 2000 {
            let p = random_dist(&mut rng, 6, 1.0);
            let q = random_dist(&mut rng, 6, 1.0);
            if p.iter().zip(&q).any(|(a, b)| b / a > 5.0 || a / b > 5.0) {
                continue;
            }
            let a = alpha_divergence_single(&p, &q, 1.0, 5.0).unwrap();
            let k = Divergence::Kld.value(&p, &q).unwrap();
            assert!((a - k).abs() < 1e-9, "{a} vs {k}");
            checked += 1;
        }
    }

    #[test]
    fn alpha_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 2000 {
            let p = random_dist(&mut rng, 5, 1.0);
            let q = random_dist(&mut rng, 5, 1.0);
            if p.iter().zip(&q).any(|(a, b)| b / a > 5.0 || a / b > 5.0) {
                continue;
            }
            for alpha in [-1.0, 0.999, 0.5, 2.0] {
                let got = alpha_divergence_single(&p, &q, alpha, 5.0).unwrap();
                let want = alpha_reference(&p, &q, alpha);
                assert!((got - want).abs() < 1e-9, "alpha {alpha}: {got} vs {want}");
            }
            checked += 1;
        }
    }

    #[test]
    fn alpha_adaptive_is_max_and_vanishes_at_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let p = random_dist(&mut rng, 7, 4.0);
            let q = random_dist(&mut rng, 7, 4.0);
            let ap = AlphaParams::default();
            let d = alpha_divergence(&bucket(p.clone()), &bucket(q.clone()), ap).unwrap();
            let lo = alpha_divergence_single(&p, &q, -1.0, 5.0).unwrap();
            let hi = alpha_divergence_single(&p, &q, 1.0, 5.0).unwrap();
            assert_eq!(d, lo.max(hi));
            assert!(lo >= 0.0 && hi >= 0.0);
            assert_eq!(alpha_divergence(&bucket(p.clone()), &bucket(p.clone()), ap).unwrap(), 0.0);
        }
    }

    #[test]
    fn divergence_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for div in [Divergence::Kld, Divergence::Alpha(AlphaParams::default())] {
            for alpha in [-1.0, 0.0, 0.5, 1.0, 2.0] {
                let p = random_dist(&mut rng, 6, 1.0);
                let lq: Vec<f64> = (0..6).map(|_| rng.random_range(-2.5..-1.0)).collect();
                let (_, g) = match div {
                    Divergence::Kld => kld_log(&p, &lq),
                    Divergence::Alpha(_) => alpha_log(&p, &lq, alpha, 5.0),
                };
                for i in 0..6 {
                    let f = |x: f64| {
                        let mut l = lq.clone();
                        l[i] = x;
                        match div {
                            Divergence::Kld => kld_log(&p, &l).0,
                            Divergence::Alpha(_) => alpha_log(&p, &l, alpha, 5.0).0,
                        }
                    };
                    let h = gradcheck::DEFAULT_STEP;
                    let num = (f(lq[i] + h) - f(lq[i] - h)) / (2.0 * h);
                    assert!(gradcheck::rel_error(g[i], num) < 1e-4, "{div:?} {alpha} {i}: {} vs {num}", g[i]);
                }
            }
        }
    }

    fn lattice(rng: &mut ChaCha8Rng, t: usize, u1: usize, v: usize) -> Vec<f64> {
        let mut x: Vec<f64> = (0..t * u1 * v).map(|_| rng.random_range(-2.0..2.0)).collect();
        kernels::log_softmax_rows(&mut x, v);
        x
    }

    fn kd_value(teacher: &[f64], student: &[f64], shape: [usize; 3], target: &[usize], j: usize, div: Divergence) -> f64 {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(shape.to_vec(), student.to_vec()).unwrap());
        let (l, _) = kd_loss(&mut tape, teacher, s, target, j, div).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn kd_loss_identity_single_node_and_manual_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let div = Divergence::Alpha(AlphaParams::default());
        let a = lattice(&mut rng, 2, 2, 5);
        assert!(kd_value(&a, &a, [2, 2, 5], &[3], 2, Divergence::Kld).abs() < 1e-15);
        assert!(kd_value(&a, &a, [2, 2, 5], &[3], 2, div) < 1e-15);

        let t1 = lattice(&mut rng, 1, 1, 5);
        let s1 = lattice(&mut rng, 1, 1, 5);
        let tp: Vec<f64> = t1.iter().map(|l| l.exp()).collect();
        let sp: Vec<f64> = s1.iter().map(|l| l.exp()).collect();
        let pb = bucket_topj(&tp, 3, 0, 0).unwrap();
        let qb = bucket_on(&sp, &pb.token_ids);
        let want = alpha_divergence(&pb, &qb, AlphaParams::default()).unwrap();
        assert!((kd_value(&t1, &s1, [1, 1, 5], &[], 3, div) - want).abs() < 1e-12);

        let b = lattice(&mut rng, 2, 2, 5);
        let target = [4usize];
        let mut manual = 0.0;
        for t in 0..2 {
            for u in 0..2 {
                let base = (t * 2 + u) * 5;
                let tp: Vec<f64> = a[base..base + 5].iter().map(|l| l.exp()).collect();
                let sp: Vec<f64> = b[base..base + 5].iter().map(|l| l.exp()).collect();
                let next = if u == 0 { 4 } else { 0 };
                let pb = bucket_topj(&tp, 2, next, 0).unwrap();
                manual += kld(&pb, &bucket_on(&sp, &pb.token_ids)).unwrap() / 4.0;
            }
        }
        assert!((kd_value(&a, &b, [2, 2, 5], &target, 2, Divergence::Kld) - manual).abs() < 1e-12);
    }

    #[test]
    fn kd_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (t, u1, v) = (3, 3, 6);
        let target = [2usize, 5];
        let teacher = lattice(&mut rng, t, u1, v);
        let logits: Vec<f64> = (0..t * u1 * v).map(|_| rng.random_range(-1.0..1.0)).collect();
        for div in [Divergence::Kld, Divergence::Alpha(AlphaParams::default())] {
            let run = |x: &Tensor, grad: bool| -> (f64, Vec<f64>) {
                let mut tape = Tape::new();
                let s = if grad { tape.leaf(x.clone()) } else { tape.constant(x.clone()) };
                let lp = tape.log_softmax(s).unwrap();
                let (l, _) = kd_loss(&mut tape, &teacher, lp, &target, 3, div).unwrap();
                let value = tape.scalar(l);
                if !grad {
                    return (value, vec![]);
                }
                let g = tape.backward(l).unwrap();
                (value, g.wrt_or_zero(&tape, s))
            };
            let x = Tensor::new(vec![t, u1, v], logits.clone()).unwrap();
            let (_, analytic) = run(&x, true);
            for i in 0..x.len() {
                let h = gradcheck::DEFAULT_STEP;
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                let num = (run(&plus, false).0 - run(&minus, false).0) / (2.0 * h);
                assert!(gradcheck::rel_error(analytic[i], num) < 1e-4, "{div:?} {i}: {} vs {num}", analytic[i]);
            }
        }
    }

    #[test]
    fn kd_memory_scales_with_bucket_size_not_vocab() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for j in [2usize, 10, 100] {
            for v in [128usize, 300] {
                let teacher = lattice(&mut rng, 2, 2, v);
                let mut tape = Tape::new();
                let s = tape.constant(Tensor::new(vec![2, 2, v], teacher.clone()).unwrap());
                let (_, fp) = kd_loss(&mut tape, &teacher, s, &[7], j, Divergence::Kld).unwrap();
                assert_eq!(fp.nodes, 4);
                assert_eq!(fp.floats_per_node(), 2.0 * (j + 1) as f64);
            }
        }
    }

    #[test]
    fn kd_loss_rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = lattice(&mut rng, 2, 2, 5);
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(vec![2, 2, 5], a.clone()).unwrap());
        assert!(kd_loss(&mut tape, &a, s, &[1, 2], 2, Divergence::Kld).is_err());
        assert!(kd_loss(&mut tape, &a[..10], s, &[1], 2, Divergence::Kld).is_err());
        assert!(kd_loss(&mut tape, &a, s, &[0], 2, Divergence::Kld).is_err());
    }

    proptest! {
        #[test]
        fn divergences_nonnegative(seed in 0u64..10_000, n in 3usize..10, spread in 0.1f64..8.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_dist(&mut rng, n, spread);
            let q = random_dist(&mut rng, n, spread);
            prop_assert!(Divergence::Kld.value(&p, &q).unwrap() >= 0.0);
            prop_assert!(Divergence::Alpha(AlphaParams::default()).value(&p, &q).unwrap() >= 0.0);
            prop_assert_eq!(Divergence::Alpha(AlphaParams::default()).value(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn bucketing_preserves_mass(seed in 0u64..10_000, v in 4usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_dist(&mut rng, v, 5.0);
            let j = rng.random_range(2..v);
            let target = rng.random_range(0..v);
            let b = bucket_topj(&p, j, target, 0).unwrap();
            prop_assert!((b.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut ids = b.token_ids.clone();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), j);
            prop_assert!(b.token_ids.contains(&0) && b.token_ids.contains(&target));
        }
    }
}
