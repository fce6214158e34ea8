//! Tape-free forward pass used for decoding and fitness evaluation. No
//! gradients are recorded; weights are only read.

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::model::SupernetParams;
use super::space::{SearchSpace, SubnetworkConfig};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;
use crate::transducer::{self, Hypothesis, StepModel, BLANK};

pub const DEFAULT_MAX_SYMBOLS_PER_FRAME: usize = 3;
/// Utterances encoded together during evaluation.
const EVAL_CHUNK: usize = 256;

/// Which search the decoder runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Decoder {
    Greedy,
    Beam(usize),
}

impl Decoder {
    pub const BEAM5: Decoder = Decoder::Beam(5);
}

impl std::fmt::Display for Decoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Decoder::Greedy => write!(f, "greedy"),
            Decoder::Beam(k) => write!(f, "beam{k}"),
        }
    }
}

impl std::str::FromStr for Decoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "greedy" {
            return Ok(Decoder::Greedy);
        }
        s.strip_prefix("beam")
            .and_then(|k| k.parse().ok())
            .filter(|&k: &usize| k >= 1)
            .map(Decoder::Beam)
            .ok_or_else(|| Error::Config(format!("unknown decoder {s:?} (expected greedy or beam<k>)")))
    }
}

impl TryFrom<String> for Decoder {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Decoder> for String {
    fn from(d: Decoder) -> String {
        d.to_string()
    }
}

impl SupernetParams {
    /// Encoder states `[T × d_model]` for subnetwork `cfg`, evaluation mode.
    pub fn encode_frozen(&self, space: &SearchSpace, cfg: &SubnetworkConfig, features: &Tensor) -> Result<Vec<f64>> {
        self.encode_frozen_batch(space, cfg, &[features])
    }

    /// Evaluation-mode encoder over utterances stacked along time.
    pub fn encode_frozen_batch(&self, space: &SearchSpace, cfg: &SubnetworkConfig, features: &[&Tensor]) -> Result<Vec<f64>> {
        space.require_valid(cfg)?;
        self.arch().check_space(space)?;
        let segments = self.check_features("encode_frozen", features)?;
        let stacked: Vec<f64> = features.iter().flat_map(|f| f.data().iter().copied()).collect();
        let mut x = self.frozen_input(&stacked);
        for (layer, &c) in cfg.channels.iter().enumerate() {
            x = self.frozen_layer(x, layer, c, &segments);
        }
        Ok(self.frozen_final(&x))
    }

    /// Residual stream entering the first layer.
    fn frozen_input(&self, stacked: &[f64]) -> Vec<f64> {
        let arch = self.arch();
        let (s, l) = (self.store(), &self.layout);
        let t = stacked.len() / arch.d_in;
        kernels::linear(stacked, t, arch.d_in, s.get(l.in_w).data(), arch.d_model, arch.d_model, Some(s.get(l.in_b).data()))
    }

    /// Applies encoder layer `layer` with `c` FFN channels to the residual stream.
    fn frozen_layer(&self, mut x: Vec<f64>, layer: usize, c: usize, segments: &[usize]) -> Vec<f64> {
        let arch = self.arch();
        let s = self.store();
        let ids = &self.layout.layers[layer];
        let (d, m) = (arch.d_model, arch.ffn_width);
        let t = x.len() / d;
        let v = |id| s.get(id).data();
        let h = kernels::layer_norm_rows(&x, d, v(ids.norm1_gain), v(ids.norm1_bias));
        let h = kernels::linear(&h, t, d, v(ids.mix_w), 2 * d, 2 * d, Some(v(ids.mix_b)));
        let h = kernels::gated_scan_segments(&h, d, segments);
        x.iter_mut().zip(&h).for_each(|(a, b)| *a += b);

        let h = kernels::layer_norm_rows(&x, d, v(ids.norm2_gain), v(ids.norm2_bias));
        let mut h = kernels::linear(&h, t, d, v(ids.ffn_w_in), m, c, Some(&v(ids.ffn_b_in)[..c]));
        h.iter_mut().for_each(|a| *a = a.max(0.0));
        let h = kernels::linear(&h, t, c, &v(ids.ffn_w_out)[..c * d], d, d, Some(v(ids.ffn_b_out)));
        x.iter_mut().zip(&h).for_each(|(a, b)| *a += b);
        x
    }

    fn frozen_final(&self, x: &[f64]) -> Vec<f64> {
        let (s, l) = (self.store(), &self.layout);
        kernels::layer_norm_rows(x, self.arch().d_model, s.get(l.final_gain).data(), s.get(l.final_bias).data())
    }

    /// Joiner projections of stacked encoder states.
    fn project_encoder(&self, enc: &[f64]) -> Vec<f64> {
        let arch = self.arch();
        let s = self.store();
        let l = &self.layout;
        kernels::linear(
            enc,
            enc.len() / arch.d_model,
            arch.d_model,
            s.get(l.join_enc_w).data(),
            arch.d_joint,
            arch.d_joint,
            Some(s.get(l.join_enc_b).data()),
        )
    }

    /// Step-wise decoding view of one utterance.
    pub fn runner(&self, space: &SearchSpace, cfg: &SubnetworkConfig, features: &Tensor) -> Result<Runner<'_>> {
        let enc = self.encode_frozen(space, cfg, features)?;
        Ok(Runner {
            params: self,
            frames: features.rows(),
            enc_proj: self.project_encoder(&enc),
        })
    }

    /// Decodes one utterance with subnetwork `cfg`.
    pub fn decode(&self, space: &SearchSpace, cfg: &SubnetworkConfig, features: &Tensor, decoder: Decoder) -> Result<Hypothesis> {
        let mut v = self.decode_batch(space, cfg, &[features], decoder)?;
        Ok(v.pop().expect("one hypothesis"))
    }

    /// Corpus-level WER of subnetwork `cfg` on `utts`.
    pub fn word_error_rate(&self, space: &SearchSpace, cfg: &SubnetworkConfig, utts: &[Utterance], decoder: Decoder) -> Result<f64> {
        if utts.is_empty() {
            return Err(Error::contract("word error rate on an empty set"));
        }
        let mut hyps = Vec::with_capacity(utts.len());
        for chunk in utts.chunks(EVAL_CHUNK) {
            let feats: Vec<&Tensor> = chunk.iter().map(|u| &u.features).collect();
            hyps.extend(self.decode_batch(space, cfg, &feats, decoder)?.into_iter().map(|h| h.tokens));
        }
        let refs: Vec<Vec<usize>> = utts.iter().map(|u| u.tokens.clone()).collect();
        transducer::word_error_rate(&refs, &hyps)
    }

    /// Decodes several utterances, running the encoder once over the stack.
    pub fn decode_batch(&self, space: &SearchSpace, cfg: &SubnetworkConfig, features: &[&Tensor], decoder: Decoder) -> Result<Vec<Hypothesis>> {
        let enc = self.encode_frozen_batch(space, cfg, features)?;
        let frames: Vec<usize> = features.iter().map(|f| f.rows()).collect();
        self.decode_encoded(&enc, &frames, decoder)
    }

    /// Decodes stacked encoder outputs of utterances with `frames` rows each.
    fn decode_encoded(&self, enc: &[f64], frames: &[usize], decoder: Decoder) -> Result<Vec<Hypothesis>> {
        let proj = self.project_encoder(enc);
        let j = self.arch().d_joint;
        let mut start = 0;
        frames
            .iter()
            .map(|&frames| {
                let runner = Runner {
                    params: self,
                    frames,
                    enc_proj: proj[start * j..(start + frames) * j].to_vec(),
                };
                start += frames;
                match decoder {
                    Decoder::Greedy => transducer::greedy_decode(&runner, DEFAULT_MAX_SYMBOLS_PER_FRAME),
                    Decoder::Beam(k) => transducer::beam_decode(&runner, k, DEFAULT_MAX_SYMBOLS_PER_FRAME),
                }
            })
            .collect()
    }
}

/// Repeated corpus-WER evaluation of many subnetworks on one fixed set.
///
/// The residual stream after the first `k` layers depends only on the first
/// `k` channel widths, so it is memoized by that prefix and shared between
/// configs (a config dropping top layers is a prefix of a deeper one).
pub struct FrozenEvaluator<'a> {
    params: &'a SupernetParams,
    space: &'a SearchSpace,
    refs: Vec<Vec<usize>>,
    frames: Vec<usize>,
    input: Vec<f64>,
    cache: HashMap<Vec<usize>, Rc<Vec<f64>>>,
    cache_limit: usize,
    layers_run: usize,
}

/// Default bound on memoized residual streams.
pub const PREFIX_CACHE_ENTRIES: usize = 128;

impl<'a> FrozenEvaluator<'a> {
    pub fn new(params: &'a SupernetParams, space: &'a SearchSpace, utts: &[Utterance]) -> Result<Self> {
        if utts.is_empty() {
            return Err(Error::contract("word error rate on an empty set"));
        }
        params.arch().check_space(space)?;
        let feats: Vec<&Tensor> = utts.iter().map(|u| &u.features).collect();
        let frames = params.check_features("evaluate", &feats)?;
        let stacked: Vec<f64> = feats.iter().flat_map(|f| f.data().iter().copied()).collect();
        Ok(Self {
            params,
            space,
            refs: utts.iter().map(|u| u.tokens.clone()).collect(),
            frames,
            input: params.frozen_input(&stacked),
            cache: HashMap::new(),
            cache_limit: PREFIX_CACHE_ENTRIES,
            layers_run: 0,
        })
    }

    /// Caps the number of memoized prefixes; 0 disables memoization.
    pub fn with_cache_limit(mut self, entries: usize) -> Self {
        self.cache_limit = entries;
        self.cache.clear();
        self
    }

    /// Encoder layers actually computed so far.
    pub fn layers_run(&self) -> usize {
        self.layers_run
    }

    pub fn utterances(&self) -> usize {
        self.refs.len()
    }

    /// Corpus-level WER of `cfg`.
    pub fn word_error_rate(&mut self, cfg: &SubnetworkConfig, decoder: Decoder) -> Result<f64> {
        self.space.require_valid(cfg)?;
        let ch = &cfg.channels;
        let hit = (1..=ch.len()).rev().find(|&k| self.cache.contains_key(&ch[..k]));
        let (mut x, from) = match hit {
            Some(k) => (self.cache[&ch[..k]].as_ref().clone(), k),
            None => (self.input.clone(), 0),
        };
        for (layer, &c) in ch.iter().enumerate().skip(from) {
            x = self.params.frozen_layer(x, layer, c, &self.frames);
            self.layers_run += 1;
            if self.cache_limit > 0 {
                if self.cache.len() >= self.cache_limit {
                    self.cache.clear();
                }
                self.cache.insert(ch[..=layer].to_vec(), Rc::new(x.clone()));
            }
        }
        let enc = self.params.frozen_final(&x);
        let hyps: Vec<Vec<usize>> = self.params.decode_encoded(&enc, &self.frames, decoder)?.into_iter().map(|h| h.tokens).collect();
        transducer::word_error_rate(&self.refs, &hyps)
    }
}

/// Encoder projections of one utterance plus frozen predictor and joiner.
pub struct Runner<'a> {
    params: &'a SupernetParams,
    frames: usize,
    enc_proj: Vec<f64>,
}

/// Predictor recurrent state and its joiner projection.
#[derive(Debug, Clone)]
pub struct PredictorState {
    hidden: Vec<f64>,
    proj: Vec<f64>,
}

impl Runner<'_> {
    fn feed(&self, hidden: &[f64], token: usize) -> PredictorState {
        let arch = self.params.arch();
        let s = self.params.store();
        let l = &self.params.layout;
        let p = arch.d_pred;
        let e = &s.get(l.pred_embed).data()[token * p..(token + 1) * p];
        let m = kernels::linear(e, 1, p, s.get(l.pred_w).data(), 2 * p, 2 * p, Some(s.get(l.pred_b).data()));
        let hidden = kernels::gated_scan(&m, p, hidden);
        let proj = kernels::linear(&hidden, 1, p, s.get(l.join_pred_w).data(), arch.d_joint, arch.d_joint, None);
        PredictorState { hidden, proj }
    }
}

impl StepModel for Runner<'_> {
    type State = PredictorState;

    fn frames(&self) -> usize {
        self.frames
    }

    fn initial_state(&self) -> PredictorState {
        self.feed(&vec![0.0; self.params.arch().d_pred], BLANK)
    }

    fn advance(&self, state: &PredictorState, token: usize) -> PredictorState {
        self.feed(&state.hidden, token)
    }

    fn joint(&self, t: usize, state: &PredictorState) -> Vec<f64> {
        let arch = self.params.arch();
        let s = self.params.store();
        let l = &self.params.layout;
        let j = arch.d_joint;
        let z: Vec<f64> = self.enc_proj[t * j..(t + 1) * j]
            .iter()
            .zip(&state.proj)
            .map(|(a, b)| (a + b).tanh())
            .collect();
        let mut o = kernels::linear(&z, 1, j, s.get(l.join_out_w).data(), arch.vocab, arch.vocab, Some(s.get(l.join_out_b).data()));
        kernels::log_softmax_rows(&mut o, arch.vocab);
        o
    }
}
