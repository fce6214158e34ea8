//! Weight-sharing transducer: encoder with sliceable FFNs, fixed predictor
//! and joiner.
//!
//! Encoder layer (pre-norm):
//!
//! ```text
//! x = x + scan(LN1(x)·W_mix + b_mix)
//! x = x + dropout(relu(LN2(x)·W_in[:, :c] + b_in[:c]))·W_out[:c, :] + b_out
//! ```
//!
//! followed by a final layer norm after the last kept layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::space::{SearchSpace, SubnetworkConfig};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::transducer::BLANK;

/// Fixed dimensions of the supernet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub d_in: usize,
    pub d_model: usize,
    pub n_layers: usize,
    /// Physical FFN width of every encoder layer.
    pub ffn_width: usize,
    pub d_pred: usize,
    pub d_joint: usize,
    /// Vocabulary size including blank.
    pub vocab: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            d_in: 16,
            d_model: 64,
            n_layers: 8,
            ffn_width: 256,
            d_pred: 32,
            d_joint: 64,
            vocab: 17,
        }
    }
}

impl Architecture {
    pub fn check_space(&self, space: &SearchSpace) -> Result<()> {
        space.check()?;
        if space.n_layers_max != self.n_layers || space.max_channels() != self.ffn_width {
            return Err(Error::Config(format!(
                "search space (n={}, max width {}) does not match architecture (n={}, width {})",
                space.n_layers_max,
                space.max_channels(),
                self.n_layers,
                self.ffn_width
            )));
        }
        Ok(())
    }

    /// Parameters of one encoder layer keeping `c` FFN channels.
    pub fn layer_params(&self, c: usize) -> usize {
        let d = self.d_model;
        // two norms, mixer, FFN in (d×c + c), FFN out (c×d + d)
        4 * d + (d * 2 * d + 2 * d) + (d * c + c) + (c * d + d)
    }

    /// Parameters outside the searchable encoder layers.
    pub fn fixed_params(&self) -> usize {
        let (d, p, j, v) = (self.d_model, self.d_pred, self.d_joint, self.vocab);
        let encoder_io = self.d_in * d + d + 2 * d;
        let predictor = v * p + p * 2 * p + 2 * p;
        let joiner = d * j + j + p * j + j * v + v;
        encoder_io + predictor + joiner
    }

    pub fn encoder_params(&self, cfg: &SubnetworkConfig) -> usize {
        let d = self.d_model;
        self.d_in * d + d + 2 * d + cfg.channels.iter().map(|&c| self.layer_params(c)).sum::<usize>()
    }

    pub fn subnet_params(&self, cfg: &SubnetworkConfig) -> usize {
        self.fixed_params() + cfg.channels.iter().map(|&c| self.layer_params(c)).sum::<usize>()
    }
}

/// Size in bytes of a subnetwork under 8-bit quantization (one byte per
/// parameter).
pub fn model_size_bytes(arch: &Architecture, space: &SearchSpace, cfg: &SubnetworkConfig) -> Result<u64> {
    space.require_valid(cfg)?;
    Ok(arch.subnet_params(cfg) as u64)
}

/// Dropout rate after an FFN trimmed to `c` of `m` channels:
/// `base_rate · c / m`.
pub fn adaptive_dropout_rate(base_rate: f64, c: usize, m: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&base_rate) {
        return Err(Error::contract(format!("dropout rate {base_rate} outside [0, 1]")));
    }
    if c == 0 || c > m {
        return Err(Error::contract(format!("channel count {c} not in [1, {m}]")));
    }
    Ok(base_rate * c as f64 / m as f64)
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIds {
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub mix_w: ParamId,
    pub mix_b: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
    pub ffn_w_in: ParamId,
    pub ffn_b_in: ParamId,
    pub ffn_w_out: ParamId,
    pub ffn_b_out: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub layers: Vec<LayerIds>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub pred_embed: ParamId,
    pub pred_w: ParamId,
    pub pred_b: ParamId,
    pub join_enc_w: ParamId,
    pub join_enc_b: ParamId,
    pub join_pred_w: ParamId,
    pub join_out_w: ParamId,
    pub join_out_b: ParamId,
}

impl Layout {
    fn resolve(store: &ParamStore, n_layers: usize) -> Result<Self> {
        let id = |name: &str| {
            store.id(name).ok_or_else(|| Error::Format {
                what: "parameters",
                detail: format!("missing tensor {name}"),
            })
        };
        let layers = (0..n_layers)
            .map(|i| {
                let p = |s: &str| id(&format!("encoder.layers.{i}.{s}"));
                Ok(LayerIds {
                    norm1_gain: p("norm1.gain")?,
                    norm1_bias: p("norm1.bias")?,
                    mix_w: p("mixer.w")?,
                    mix_b: p("mixer.b")?,
                    norm2_gain: p("norm2.gain")?,
                    norm2_bias: p("norm2.bias")?,
                    ffn_w_in: p("ffn.w_in")?,
                    ffn_b_in: p("ffn.b_in")?,
                    ffn_w_out: p("ffn.w_out")?,
                    ffn_b_out: p("ffn.b_out")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            in_w: id("encoder.input.w")?,
            in_b: id("encoder.input.b")?,
            layers,
            final_gain: id("encoder.final_norm.gain")?,
            final_bias: id("encoder.final_norm.bias")?,
            pred_embed: id("predictor.embed")?,
            pred_w: id("predictor.mixer.w")?,
            pred_b: id("predictor.mixer.b")?,
            join_enc_w: id("joiner.enc.w")?,
            join_enc_b: id("joiner.enc.b")?,
            join_pred_w: id("joiner.pred.w")?,
            join_out_w: id("joiner.out.w")?,
            join_out_b: id("joiner.out.b")?,
        })
    }
}

/// All shared weights of the supernet.
#[derive(Debug, Clone)]
pub struct SupernetParams {
    arch: Architecture,
    store: ParamStore,
    pub(crate) layout: Layout,
}

fn expected_shapes(arch: &Architecture) -> Vec<(String, Vec<usize>)> {
    let (d, m, p, j, v) = (arch.d_model, arch.ffn_width, arch.d_pred, arch.d_joint, arch.vocab);
    let mut out = vec![
        ("encoder.input.w".to_string(), vec![arch.d_in, d]),
        ("encoder.input.b".to_string(), vec![d]),
    ];
    for i in 0..arch.n_layers {
        let p = |s: &str| format!("encoder.layers.{i}.{s}");
        out.extend([
            (p("norm1.gain"), vec![d]),
            (p("norm1.bias"), vec![d]),
            (p("mixer.w"), vec![d, 2 * d]),
            (p("mixer.b"), vec![2 * d]),
            (p("norm2.gain"), vec![d]),
            (p("norm2.bias"), vec![d]),
            (p("ffn.w_in"), vec![d, m]),
            (p("ffn.b_in"), vec![m]),
            (p("ffn.w_out"), vec![m, d]),
            (p("ffn.b_out"), vec![d]),
        ]);
    }
    out.extend([
        ("encoder.final_norm.gain".to_string(), vec![d]),
        ("encoder.final_norm.bias".to_string(), vec![d]),
        ("predictor.embed".to_string(), vec![v, p]),
        ("predictor.mixer.w".to_string(), vec![p, 2 * p]),
        ("predictor.mixer.b".to_string(), vec![2 * p]),
        ("joiner.enc.w".to_string(), vec![d, j]),
        ("joiner.enc.b".to_string(), vec![j]),
        ("joiner.pred.w".to_string(), vec![p, j]),
        ("joiner.out.w".to_string(), vec![j, v]),
        ("joiner.out.b".to_string(), vec![v]),
    ]);
    out
}

impl SupernetParams {
    /// Seeded initialization: uniform fan-in scaled weights, zero biases,
    /// unit norm gains.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        if arch.vocab < 3 || arch.d_model == 0 || arch.n_layers == 0 || arch.ffn_width == 0 {
            return Err(Error::Config(format!("degenerate architecture {arch:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in expected_shapes(&arch) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else if name == "predictor.embed" {
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
            } else {
                let bound = (3.0 / shape[0] as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            store.insert(name, Tensor::new(shape, data)?);
        }
        Self::from_store(arch, store)
    }

    /// Wraps an existing store, checking that names and shapes match `arch`.
    pub fn from_store(arch: Architecture, store: ParamStore) -> Result<Self> {
        let expected = expected_shapes(&arch);
        if expected.len() != store.len() {
            return Err(Error::Format {
                what: "parameters",
                detail: format!("expected {} tensors, found {}", expected.len(), store.len()),
            });
        }
        for ((name, shape), (_, got_name, got)) in expected.iter().zip(store.iter()) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(Error::Format {
                    what: "parameters",
                    detail: format!("expected {name} {shape:?}, found {got_name} {:?}", got.shape()),
                });
            }
        }
        let layout = Layout::resolve(&store, arch.n_layers)?;
        Ok(Self { arch, store, layout })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn total_params(&self) -> usize {
        self.store.total_elements()
    }
}

/// Seeded dropout in training mode.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub base_rate: f64,
    pub seed: u64,
}

fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::new(vec![n], data).expect("non-empty mask")
}

/// Parameter access on a tape: either tracked (training) or frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grad {
    Track,
    Frozen,
}

fn p<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, id: ParamId, grad: Grad) -> Var {
    match grad {
        Grad::Track => tape.param(store, id),
        Grad::Frozen => tape.frozen_param(store, id),
    }
}

impl SupernetParams {
    /// Encoder forward for subnetwork `cfg`. Returns `[T × d_model]`.
    pub fn encode<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        space: &SearchSpace,
        cfg: &SubnetworkConfig,
        features: &Tensor,
        dropout: Option<Dropout>,
        grad: Grad,
    ) -> Result<Var> {
        self.encode_batch(tape, space, cfg, &[features], dropout, grad)
    }

    /// Encoder forward over several utterances stacked along time. Rows of
    /// the `[ΣT × d_model]` output follow the input order; the recurrence
    /// restarts at every utterance boundary, so each block equals the
    /// single-utterance result.
    pub fn encode_batch<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        space: &SearchSpace,
        cfg: &SubnetworkConfig,
        features: &[&Tensor],
        dropout: Option<Dropout>,
        grad: Grad,
    ) -> Result<Var> {
        space.require_valid(cfg)?;
        self.arch.check_space(space)?;
        let s = &self.store;
        let l = &self.layout;
        let segments = self.check_features("encode", features)?;
        let frames: usize = segments.iter().sum();
        let mut data = Vec::with_capacity(frames * self.arch.d_in);
        for f in features {
            data.extend_from_slice(f.data());
        }
        let mut rng = dropout.map(|d| ChaCha8Rng::seed_from_u64(d.seed));
        let x = tape.constant(Tensor::new(vec![frames, self.arch.d_in], data)?);
        let (w, b) = (p(tape, s, l.in_w, grad), p(tape, s, l.in_b, grad));
        let x = tape.matmul(x, w)?;
        let mut x = tape.add_bias(x, b)?;
        for (ids, &c) in l.layers.iter().zip(&cfg.channels) {
            let g1 = p(tape, s, ids.norm1_gain, grad);
            let b1 = p(tape, s, ids.norm1_bias, grad);
            let h = tape.layer_norm(x, g1, b1)?;
            let mw = p(tape, s, ids.mix_w, grad);
            let mb = p(tape, s, ids.mix_b, grad);
            let h = tape.matmul(h, mw)?;
            let h = tape.add_bias(h, mb)?;
            let h = tape.gated_scan_segments(h, &segments)?;
            x = tape.add(x, h)?;

            let g2 = p(tape, s, ids.norm2_gain, grad);
            let b2 = p(tape, s, ids.norm2_bias, grad);
            let h = tape.layer_norm(x, g2, b2)?;
            let w_in = p(tape, s, ids.ffn_w_in, grad);
            let w_in = tape.slice_cols(w_in, 0, c)?;
            let b_in = p(tape, s, ids.ffn_b_in, grad);
            let b_in = tape.slice_cols(b_in, 0, c)?;
            let h = tape.matmul(h, w_in)?;
            let h = tape.add_bias(h, b_in)?;
            let mut h = tape.relu(h);
            if let (Some(rng), Some(d)) = (rng.as_mut(), dropout) {
                let rate = adaptive_dropout_rate(d.base_rate, c, self.arch.ffn_width)?;
                if rate > 0.0 {
                    let mask = dropout_mask(rng, frames * c, rate);
                    let mask = tape.constant(Tensor::new(vec![frames, c], mask.into_data())?);
                    h = tape.mul(h, mask)?;
                }
            }
            let w_out = p(tape, s, ids.ffn_w_out, grad);
            let w_out = tape.slice_rows(w_out, 0, c)?;
            let b_out = p(tape, s, ids.ffn_b_out, grad);
            let h = tape.matmul(h, w_out)?;
            let h = tape.add_bias(h, b_out)?;
            x = tape.add(x, h)?;
        }
        let g = p(tape, s, l.final_gain, grad);
        let b = p(tape, s, l.final_bias, grad);
        tape.layer_norm(x, g, b)
    }

    /// Frame counts of `features`, checking their widths.
    pub(crate) fn check_features(&self, op: &'static str, features: &[&Tensor]) -> Result<Vec<usize>> {
        if features.is_empty() {
            return Err(Error::contract(format!("{op}: empty batch")));
        }
        features
            .iter()
            .map(|f| {
                if f.shape().len() != 2 || f.cols() != self.arch.d_in {
                    return Err(Error::Shape {
                        op,
                        left: f.shape().to_vec(),
                        right: vec![0, self.arch.d_in],
                    });
                }
                Ok(f.rows())
            })
            .collect()
    }

    /// Predictor outputs for the label prefix `[blank, y_1, …, y_U]`,
    /// `[(U+1) × d_pred]`.
    pub fn predict<'a>(&'a self, tape: &mut Tape<'a>, target: &[usize], grad: Grad) -> Result<Var> {
        self.predict_batch(tape, &[target], grad)
    }

    /// Predictor outputs for several targets stacked along label position.
    pub fn predict_batch<'a>(&'a self, tape: &mut Tape<'a>, targets: &[&[usize]], grad: Grad) -> Result<Var> {
        let s = &self.store;
        let l = &self.layout;
        let mut ids = Vec::new();
        let mut segments = Vec::with_capacity(targets.len());
        for target in targets {
            if let Some(&bad) = target.iter().find(|&&y| y == BLANK || y >= self.arch.vocab) {
                return Err(Error::contract(format!("target token {bad} invalid for V={}", self.arch.vocab)));
            }
            ids.push(BLANK);
            ids.extend_from_slice(target);
            segments.push(target.len() + 1);
        }
        let table = p(tape, s, l.pred_embed, grad);
        let e = tape.embedding(table, &ids)?;
        let w = p(tape, s, l.pred_w, grad);
        let b = p(tape, s, l.pred_b, grad);
        let h = tape.matmul(e, w)?;
        let h = tape.add_bias(h, b)?;
        tape.gated_scan_segments(h, &segments)
    }

    /// Joiner log-probabilities `[T × (U+1) × V]`.
    pub fn join<'a>(&'a self, tape: &mut Tape<'a>, enc: Var, pred: Var, grad: Grad) -> Result<Var> {
        let frames = tape.shape(enc)[0];
        let u1 = tape.shape(pred)[0];
        let (e, q) = self.join_projections(tape, enc, pred, grad)?;
        self.join_projected(tape, e, q, frames, u1, grad)
    }

    fn join_projections<'a>(&'a self, tape: &mut Tape<'a>, enc: Var, pred: Var, grad: Grad) -> Result<(Var, Var)> {
        let s = &self.store;
        let l = &self.layout;
        let (we, be) = (p(tape, s, l.join_enc_w, grad), p(tape, s, l.join_enc_b, grad));
        let e = tape.matmul(enc, we)?;
        let e = tape.add_bias(e, be)?;
        let wp = p(tape, s, l.join_pred_w, grad);
        let q = tape.matmul(pred, wp)?;
        Ok((e, q))
    }

    fn join_projected<'a>(&'a self, tape: &mut Tape<'a>, e: Var, q: Var, frames: usize, u1: usize, grad: Grad) -> Result<Var> {
        let s = &self.store;
        let l = &self.layout;
        let z = tape.outer_add(e, q)?;
        let z = tape.tanh(z);
        let (wo, bo) = (p(tape, s, l.join_out_w, grad), p(tape, s, l.join_out_b, grad));
        let o = tape.matmul(z, wo)?;
        let o = tape.add_bias(o, bo)?;
        let lp = tape.log_softmax(o)?;
        tape.reshape(lp, vec![frames, u1, self.arch.vocab])
    }

    /// Full lattice for one utterance.
    #[allow(clippy::too_many_arguments)]
    pub fn lattice<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        space: &SearchSpace,
        cfg: &SubnetworkConfig,
        features: &Tensor,
        target: &[usize],
        dropout: Option<Dropout>,
        grad: Grad,
    ) -> Result<Var> {
        let mut v = self.lattices(tape, space, cfg, &[(features, target)], dropout, grad)?;
        Ok(v.pop().expect("one lattice"))
    }

    /// Lattices `[T_i × (U_i+1) × V]` for a batch of `(features, target)`
    /// pairs; encoder and predictor run once over the stacked batch.
    pub fn lattices<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        space: &SearchSpace,
        cfg: &SubnetworkConfig,
        batch: &[(&Tensor, &[usize])],
        dropout: Option<Dropout>,
        grad: Grad,
    ) -> Result<Vec<Var>> {
        let feats: Vec<&Tensor> = batch.iter().map(|b| b.0).collect();
        let targets: Vec<&[usize]> = batch.iter().map(|b| b.1).collect();
        let enc = self.encode_batch(tape, space, cfg, &feats, dropout, grad)?;
        let pred = self.predict_batch(tape, &targets, grad)?;
        let (e, q) = self.join_projections(tape, enc, pred, grad)?;
        let (mut t0, mut u0) = (0, 0);
        let mut out = Vec::with_capacity(batch.len());
        for (f, y) in batch {
            let (t, u1) = (f.rows(), y.len() + 1);
            let ei = tape.slice_rows(e, t0, t)?;
            let qi = tape.slice_rows(q, u0, u1)?;
            out.push(self.join_projected(tape, ei, qi, t, u1, grad)?);
            t0 += t;
            u0 += u1;
        }
        Ok(out)
    }
}
