//! Search space, subnetwork configurations and the sandwich sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The legal subnetworks: how many top encoder layers may be dropped and
/// which FFN widths each remaining layer may keep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub n_layers_max: usize,
    /// Allowed numbers of dropped top layers; must contain 0.
    pub layer_options: Vec<usize>,
    /// Allowed FFN widths, strictly ascending; the last is the physical width.
    pub channel_options: Vec<usize>,
}

/// One point of the search space.
///
/// Only a suffix of layers can be removed, and each kept layer keeps a prefix
/// of its FFN channels, so a config is fully described by the number of
/// dropped top layers and one width per kept layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubnetworkConfig {
    pub dropped_top_layers: usize,
    pub channels: Vec<usize>,
}

impl SubnetworkConfig {
    pub fn active_layers(&self) -> usize {
        self.channels.len()
    }
}

impl std::fmt::Display for SubnetworkConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let ch: Vec<String> = self.channels.iter().map(usize::to_string).collect();
        write!(f, "drop{}:{}", self.dropped_top_layers, ch.join("-"))
    }
}

impl std::str::FromStr for SubnetworkConfig {
    type Err = Error;

    /// Parses the `drop<k>:<c0>-<c1>-...` form produced by `Display`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse subnetwork config {s:?}"));
        let rest = s.strip_prefix("drop").ok_or_else(bad)?;
        let (d, ch) = rest.split_once(':').ok_or_else(bad)?;
        let dropped_top_layers = d.parse().map_err(|_| bad())?;
        let channels = ch
            .split('-')
            .map(|c| c.parse().map_err(|_| bad()))
            .collect::<Result<Vec<usize>>>()?;
        Ok(Self {
            dropped_top_layers,
            channels,
        })
    }
}

impl SearchSpace {
    pub fn new(n_layers_max: usize, mut layer_options: Vec<usize>, channel_options: Vec<usize>) -> Result<Self> {
        layer_options.sort_unstable();
        layer_options.dedup();
        let space = Self {
            n_layers_max,
            layer_options,
            channel_options,
        };
        space.check()?;
        Ok(space)
    }

    pub fn check(&self) -> Result<()> {
        if self.n_layers_max == 0 {
            return Err(Error::Config("search space needs at least one layer".into()));
        }
        if self.channel_options.is_empty() || self.channel_options[0] == 0 {
            return Err(Error::Config("channel options must be non-empty and >= 1".into()));
        }
        if self.channel_options.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "channel options {:?} must be strictly ascending",
                self.channel_options
            )));
        }
        if !self.layer_options.contains(&0) {
            return Err(Error::Config("layer options must contain 0".into()));
        }
        if let Some(&bad) = self.layer_options.iter().find(|&&l| l >= self.n_layers_max) {
            return Err(Error::Config(format!(
                "layer option {bad} leaves no layers (n = {})",
                self.n_layers_max
            )));
        }
        Ok(())
    }

    pub fn max_channels(&self) -> usize {
        *self.channel_options.last().unwrap()
    }

    pub fn min_channels(&self) -> usize {
        self.channel_options[0]
    }

    pub fn validate(&self, cfg: &SubnetworkConfig) -> bool {
        self.layer_options.contains(&cfg.dropped_top_layers)
            && cfg.dropped_top_layers <= self.n_layers_max
            && cfg.channels.len() == self.n_layers_max - cfg.dropped_top_layers
            && cfg.channels.iter().all(|c| self.channel_options.contains(c))
    }

    pub fn require_valid(&self, cfg: &SubnetworkConfig) -> Result<()> {
        if self.validate(cfg) {
            Ok(())
        } else {
            Err(Error::contract(format!("config {cfg} is not in the search space")))
        }
    }

    /// The whole supernet.
    pub fn max_config(&self) -> SubnetworkConfig {
        SubnetworkConfig {
            dropped_top_layers: 0,
            channels: vec![self.max_channels(); self.n_layers_max],
        }
    }

    /// Most layers dropped, narrowest width everywhere.
    pub fn min_config(&self) -> SubnetworkConfig {
        let dropped = *self.layer_options.last().unwrap();
        SubnetworkConfig {
            dropped_top_layers: dropped,
            channels: vec![self.min_channels(); self.n_layers_max - dropped],
        }
    }

    pub fn random_config<R: Rng + ?Sized>(&self, rng: &mut R) -> SubnetworkConfig {
        let dropped = self.layer_options[rng.random_range(0..self.layer_options.len())];
        let channels = (0..self.n_layers_max - dropped)
            .map(|_| self.channel_options[rng.random_range(0..self.channel_options.len())])
            .collect();
        SubnetworkConfig {
            dropped_top_layers: dropped,
            channels,
        }
    }

    /// Sandwich sample: `[max, min, random, random]`. The random draws may
    /// coincide with max or min.
    pub fn sample_sandwich<R: Rng + ?Sized>(&self, rng: &mut R) -> [SubnetworkConfig; 4] {
        [
            self.max_config(),
            self.min_config(),
            self.random_config(rng),
            self.random_config(rng),
        ]
    }

    /// Number of configs in the space (saturating).
    pub fn cardinality(&self) -> u128 {
        let c = self.channel_options.len() as u128;
        self.layer_options
            .iter()
            .map(|&d| c.saturating_pow((self.n_layers_max - d) as u32))
            .fold(0u128, u128::saturating_add)
    }

    /// Every config in the space, refusing when there are more than `cap`.
    pub fn enumerate(&self, cap: usize) -> Result<Vec<SubnetworkConfig>> {
        let n = self.cardinality();
        if n > cap as u128 {
            return Err(Error::contract(format!(
                "search space has {n} configs, above the enumeration cap of {cap}"
            )));
        }
        let mut out = Vec::with_capacity(n as usize);
        for &d in &self.layer_options {
            let len = self.n_layers_max - d;
            let mut idx = vec![0usize; len];
            loop {
                out.push(SubnetworkConfig {
                    dropped_top_layers: d,
                    channels: idx.iter().map(|&i| self.channel_options[i]).collect(),
                });
                let mut k = 0;
                while k < len {
                    idx[k] += 1;
                    if idx[k] < self.channel_options.len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
                if k == len {
                    break;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn large_space() -> SearchSpace {
        SearchSpace::new(16, vec![0, 3, 7], vec![512, 1024, 2048, 4096]).unwrap()
    }

    #[test]
    fn validate_examples() {
        let s = large_space();
        assert!(s.validate(&s.max_config()));
        assert!(s.validate(&SubnetworkConfig {
            dropped_top_layers: 3,
            channels: vec![1024; 13]
        }));
        assert!(!s.validate(&SubnetworkConfig {
            dropped_top_layers: 2,
            channels: vec![1024; 14]
        }));
        assert!(!s.validate(&SubnetworkConfig {
            dropped_top_layers: 3,
            channels: vec![1024; 12]
        }));
        assert!(!s.validate(&SubnetworkConfig {
            dropped_top_layers: 0,
            channels: vec![1000; 16]
        }));
    }

    #[test]
    fn space_invariants_rejected() {
        assert!(SearchSpace::new(4, vec![1], vec![2, 4]).is_err());
        assert!(SearchSpace::new(4, vec![0, 4], vec![2, 4]).is_err());
        assert!(SearchSpace::new(4, vec![0], vec![4, 2]).is_err());
        assert!(SearchSpace::new(4, vec![0], vec![0, 2]).is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let c = SubnetworkConfig {
            dropped_top_layers: 2,
            channels: vec![32, 256, 64],
        };
        assert_eq!(c.to_string(), "drop2:32-256-64");
        assert_eq!(c.to_string().parse::<SubnetworkConfig>().unwrap(), c);
        assert!("2:32".parse::<SubnetworkConfig>().is_err());
    }

    #[test]
    fn sandwich_fixed_slots() {
        let s = large_space();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let [a, b, c, d] = s.sample_sandwich(&mut rng);
            assert_eq!(a, s.max_config());
            assert_eq!(b, s.min_config());
            assert!(s.validate(&c) && s.validate(&d));
        }
        assert_eq!(s.min_config().channels, vec![512; 9]);
    }

    #[test]
    fn sandwich_random_slots_are_uniform() {
        let s = SearchSpace::new(8, vec![0, 2, 4], vec![32, 64, 128, 256]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mut layer_counts = [0usize; 3];
        // channel of layer 0 (always present)
        let mut ch_counts = [0usize; 4];
        for _ in 0..n {
            let [_, _, c, _] = s.sample_sandwich(&mut rng);
            layer_counts[s.layer_options.iter().position(|&d| d == c.dropped_top_layers).unwrap()] += 1;
            ch_counts[s.channel_options.iter().position(|&x| x == c.channels[0]).unwrap()] += 1;
        }
        let check = |counts: &[usize]| {
            let p = 1.0 / counts.len() as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            for &c in counts {
                assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
            }
        };
        check(&layer_counts);
        check(&ch_counts);
    }

    #[test]
    fn enumeration_counts() {
        let s = SearchSpace::new(4, vec![0, 2], vec![8, 16]).unwrap();
        let all = s.enumerate(100).unwrap();
        assert_eq!(all.len() as u128, s.cardinality());
        assert_eq!(all.len(), 16 + 4);
        assert!(all.iter().all(|c| s.validate(c)));
        let mut sorted = all.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), all.len());
        assert!(s.enumerate(10).is_err());
    }
}
