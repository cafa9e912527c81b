//! Piecewise-uniform occlusion-ratio distributions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One `[low, high)` interval drawn with probability `probability`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioBin {
    pub low: f64,
    pub high: f64,
    pub probability: f64,
}

/// A validated set of disjoint ratio bins whose probabilities sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<RatioBin>", into = "Vec<RatioBin>")]
pub struct RatioDistribution {
    bins: Vec<RatioBin>,
}

impl TryFrom<Vec<RatioBin>> for RatioDistribution {
    type Error = Error;
    fn try_from(bins: Vec<RatioBin>) -> Result<Self> {
        Self::new(bins)
    }
}

impl From<RatioDistribution> for Vec<RatioBin> {
    fn from(d: RatioDistribution) -> Self {
        d.bins
    }
}

impl RatioDistribution {
    pub fn new(mut bins: Vec<RatioBin>) -> Result<Self> {
        if bins.is_empty() {
            return Err(Error::Distribution("no bins".into()));
        }
        for b in &bins {
            if !(b.low.is_finite() && b.high.is_finite() && 0.0 <= b.low && b.low < b.high && b.high <= 1.0) {
                return Err(Error::Distribution(format!("bin [{}, {}) outside 0 ≤ low < high ≤ 1", b.low, b.high)));
            }
            if !(b.probability.is_finite() && b.probability >= 0.0) {
                return Err(Error::Distribution(format!("bad probability {}", b.probability)));
            }
        }
        bins.sort_by(|a, b| a.low.total_cmp(&b.low));
        for pair in bins.windows(2) {
            if pair[1].low < pair[0].high {
                return Err(Error::Distribution(format!(
                    "bins [{}, {}) and [{}, {}) overlap",
                    pair[0].low, pair[0].high, pair[1].low, pair[1].high
                )));
            }
        }
        let total: f64 = bins.iter().map(|b| b.probability).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Distribution(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { bins })
    }

    fn uniform_over(edges: &[(f64, f64)]) -> Self {
        let p = 1.0 / edges.len() as f64;
        Self::new(
            edges
                .iter()
                .map(|&(low, high)| RatioBin {
                    low,
                    high,
                    probability: p,
                })
                .collect(),
        )
        .expect("built-in distribution is valid")
    }

    /// Training default: thirds on `[0,0.1)`, `[0.1,0.2)` and `[0.3,0.4)`.
    ///
    /// `[0.2,0.3)` is deliberately absent.
    pub fn train_default() -> Self {
        Self::uniform_over(&[(0.0, 0.1), (0.1, 0.2), (0.3, 0.4)])
    }

    /// Validation default: quarters on the training bins plus `[0.4,0.5)`.
    pub fn val_default() -> Self {
        Self::uniform_over(&[(0.0, 0.1), (0.1, 0.2), (0.3, 0.4), (0.4, 0.5)])
    }

    pub fn bins(&self) -> &[RatioBin] {
        &self.bins
    }

    /// Index of the bin containing `ratio`, if any.
    pub fn bin_of(&self, ratio: f64) -> Option<usize> {
        self.bins.iter().position(|b| b.low <= ratio && ratio < b.high)
    }

    /// Picks a bin by its probability, then a uniform value inside it.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = self.bins.last().unwrap();
        for b in &self.bins {
            acc += b.probability;
            if u < acc && b.probability > 0.0 {
                chosen = b;
                break;
            }
        }
        rng.gen_range(chosen.low..chosen.high)
    }
}

/// Draws one ratio from `dist` with a fresh generator seeded by `rng_seed`.
pub fn sample_ratio(dist: &RatioDistribution, rng_seed: u64) -> f64 {
    dist.sample(&mut ChaCha8Rng::seed_from_u64(rng_seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_bins() {
        let t = RatioDistribution::train_default();
        let edges: Vec<_> = t.bins().iter().map(|b| (b.low, b.high, b.probability)).collect();
        assert_eq!(edges, vec![(0.0, 0.1, 1.0 / 3.0), (0.1, 0.2, 1.0 / 3.0), (0.3, 0.4, 1.0 / 3.0)]);
        let v = RatioDistribution::val_default();
        assert_eq!(v.bins().len(), 4);
        assert!(v.bins().iter().all(|b| b.probability == 0.25));
        assert_eq!((v.bins()[3].low, v.bins()[3].high), (0.4, 0.5));
    }

    #[test]
    fn single_bin_stays_inside() {
        let d = RatioDistribution::new(vec![RatioBin {
            low: 0.2,
            high: 0.3,
            probability: 1.0,
        }])
        .unwrap();
        for s in 0..1000 {
            let r = sample_ratio(&d, s);
            assert!((0.2..0.3).contains(&r));
        }
    }

    #[test]
    fn rejects_invalid() {
        let bin = |low, high, probability| RatioBin { low, high, probability };
        assert!(RatioDistribution::new(vec![]).is_err());
        assert!(RatioDistribution::new(vec![bin(0.0, 0.2, 0.5), bin(0.1, 0.3, 0.5)]).is_err());
        assert!(RatioDistribution::new(vec![bin(0.0, 0.2, 0.5)]).is_err());
        assert!(RatioDistribution::new(vec![bin(0.3, 0.2, 1.0)]).is_err());
        assert!(RatioDistribution::new(vec![bin(0.0, 1.2, 1.0)]).is_err());
    }

    #[test]
    fn histogram_matches_masses() {
        let d = RatioDistribution::train_default();
        let mut counts = [0usize; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            counts[d.bin_of(d.sample(&mut rng)).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 1.0 / 3.0).abs() < 0.02);
        }
    }
}
