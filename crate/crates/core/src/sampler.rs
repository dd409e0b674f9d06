//! Cross-section sub-sampling.
//!
//! A mini-batch is `m` distinct days, each reduced to a uniform random
//! subset of `k` of its stocks. Stocks are drawn independently per day.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::marketdata::CrossSection;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubSampleSpec {
    /// Distinct days per mini-batch.
    pub m: usize,
    /// Stocks per sub-sampled cross-section.
    pub k: usize,
    pub seed: u64,
}

/// What to do when a drawn day has fewer than `k` stocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortDayPolicy {
    #[default]
    Error,
    /// Draw only among days with at least `k` stocks.
    Resample,
}

impl SubSampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("sampler: m must be at least 1".into()));
        }
        if self.k < 2 {
            return Err(Error::Config("sampler: k must be at least 2".into()));
        }
        Ok(())
    }
}

/// Index form of one sub-sample: a day and its sorted stock positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DrawnDay {
    pub day: usize,
    pub stocks: Vec<usize>,
}

/// Uniform `k`-subset of `0..n`, sorted ascending.
pub fn sample_stocks(n: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {k} stocks from {n}"
        )));
    }
    let mut picked = index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Draws the indices of one mini-batch.
pub fn draw_indices(
    sizes: &[usize],
    spec: &SubSampleSpec,
    policy: ShortDayPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<DrawnDay>> {
    spec.validate()?;
    let candidates: Vec<usize> = match policy {
        ShortDayPolicy::Error => (0..sizes.len()).collect(),
        ShortDayPolicy::Resample => (0..sizes.len()).filter(|&d| sizes[d] >= spec.k).collect(),
    };
    if candidates.len() < spec.m {
        return Err(Error::Data(format!(
            "sampler: need {} days with at least {} stocks, have {}",
            spec.m,
            spec.k,
            candidates.len()
        )));
    }
    let mut days: Vec<usize> = index::sample(rng, candidates.len(), spec.m)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    days.sort_unstable();
    days.into_iter()
        .map(|day| {
            if sizes[day] < spec.k {
                return Err(Error::Data(format!(
                    "sampler: day {day} has {} stocks, fewer than k = {}",
                    sizes[day], spec.k
                )));
            }
            Ok(DrawnDay {
                day,
                stocks: sample_stocks(sizes[day], spec.k, rng)?,
            })
        })
        .collect()
}

/// Draws `m` sub-sampled cross-sections from `data`.
pub fn draw_minibatch(
    data: &[CrossSection],
    spec: &SubSampleSpec,
    policy: ShortDayPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<CrossSection>> {
    let sizes: Vec<usize> = data.iter().map(CrossSection::len).collect();
    draw_indices(&sizes, spec, policy, rng)?
        .into_iter()
        .map(|d| data[d.day].select(&d.stocks))
        .collect()
}

/// A stateful mini-batch source seeded from its spec.
#[derive(Clone, Debug)]
pub struct Sampler {
    spec: SubSampleSpec,
    policy: ShortDayPolicy,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(spec: SubSampleSpec, policy: ShortDayPolicy) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            policy,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
        })
    }

    pub fn next_batch(&mut self, data: &[CrossSection]) -> Result<Vec<CrossSection>> {
        draw_minibatch(data, &self.spec, self.policy, &mut self.rng)
    }
}

/// `log10` of the binomial coefficient `C(n, k)`.
pub fn count_unique_subsamples(n: u64, k: u64) -> Result<f64> {
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "count_unique_subsamples: k = {k} exceeds n = {n}"
        )));
    }
    if k == 0 || k == n {
        return Ok(0.0);
    }
    let (n, k) = (n as f64, k as f64);
    let ln = ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0);
    Ok(ln / std::f64::consts::LN_10)
}
