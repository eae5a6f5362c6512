//! Distributions over the recurrent depth used during training.

use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Sampler for the loop depth `t`. Every draw is clipped to
/// `[clip_min, clip_max]`; `Fixed` has both bounds equal to `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LoopDistribution {
    /// `round(exp(N(mu, sigma)))`.
    LogNormal {
        mu: f64,
        sigma: f64,
        clip_min: usize,
        clip_max: usize,
    },
    Poisson {
        rate: f64,
        clip_min: usize,
        clip_max: usize,
    },
    /// Integer uniform on the clip range.
    Uniform { clip_min: usize, clip_max: usize },
    Fixed { t: usize },
}

impl LoopDistribution {
    pub fn fixed(t: usize) -> Self {
        LoopDistribution::Fixed { t }
    }

    pub fn log_normal(mu: f64, sigma: f64, clip_min: usize, clip_max: usize) -> Self {
        LoopDistribution::LogNormal {
            mu,
            sigma,
            clip_min,
            clip_max,
        }
    }

    pub fn poisson(rate: f64, clip_min: usize, clip_max: usize) -> Self {
        LoopDistribution::Poisson {
            rate,
            clip_min,
            clip_max,
        }
    }

    pub fn uniform(clip_min: usize, clip_max: usize) -> Self {
        LoopDistribution::Uniform { clip_min, clip_max }
    }

    pub fn clip_min(&self) -> usize {
        match *self {
            LoopDistribution::LogNormal { clip_min, .. }
            | LoopDistribution::Poisson { clip_min, .. }
            | LoopDistribution::Uniform { clip_min, .. } => clip_min,
            LoopDistribution::Fixed { t } => t,
        }
    }

    pub fn clip_max(&self) -> usize {
        match *self {
            LoopDistribution::LogNormal { clip_max, .. }
            | LoopDistribution::Poisson { clip_max, .. }
            | LoopDistribution::Uniform { clip_max, .. } => clip_max,
            LoopDistribution::Fixed { t } => t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.clip_min(), self.clip_max());
        if lo < 1 || hi < lo {
            return Err(Error::Config(format!("loop depth range [{lo}, {hi}] is invalid")));
        }
        match *self {
            LoopDistribution::LogNormal { mu, sigma, .. } if !(mu.is_finite() && sigma.is_finite() && sigma > 0.0) => {
                Err(Error::Config(format!("log-normal needs finite mu and sigma > 0, got ({mu}, {sigma})")))
            }
            LoopDistribution::Poisson { rate, .. } if !(rate.is_finite() && rate > 0.0) => {
                Err(Error::Config(format!("poisson rate must be positive, got {rate}")))
            }
            _ => Ok(()),
        }
    }

    /// Clamp a raw draw into the range.
    pub fn clip(&self, raw: f64) -> usize {
        let (lo, hi) = (self.clip_min(), self.clip_max());
        if raw.is_nan() {
            return lo;
        }
        raw.clamp(lo as f64, hi as f64) as usize
    }

    /// Draw one depth. The distribution is assumed valid.
    pub fn sample(&self, rng: &mut Rng) -> usize {
        match *self {
            LoopDistribution::LogNormal { mu, sigma, .. } => {
                let d = LogNormal::new(mu, sigma).expect("validated log-normal");
                self.clip(d.sample(rng).round())
            }
            LoopDistribution::Poisson { rate, .. } => {
                let d = Poisson::new(rate).expect("validated poisson");
                self.clip(d.sample(rng))
            }
            LoopDistribution::Uniform { clip_min, clip_max } => rng.random_range(clip_min..=clip_max),
            LoopDistribution::Fixed { t } => t,
        }
    }

    /// Reference sampler grid: two settings for each family.
    pub fn sampler_grid() -> [(&'static str, LoopDistribution); 6] {
        [
            ("log_normal_1", Self::log_normal(2.62, 0.60, 1, 40)),
            ("log_normal_2", Self::log_normal(2.00, 0.70, 1, 100)),
            ("poisson_1", Self::poisson(5.0, 1, 30)),
            ("poisson_2", Self::poisson(10.0, 1, 30)),
            ("uniform_1", Self::uniform(1, 10)),
            ("uniform_2", Self::uniform(1, 40)),
        ]
    }

    /// Variant grid with a heavier log-normal tail and a shorter uniform range.
    pub fn sampler_grid_wide() -> [(&'static str, LoopDistribution); 6] {
        [
            ("log_normal_1", Self::log_normal(2.62, 0.60, 1, 40)),
            ("log_normal_2", Self::log_normal(3.2, 0.45, 1, 80)),
            ("poisson_1", Self::poisson(5.0, 1, 30)),
            ("poisson_2", Self::poisson(10.0, 1, 30)),
            ("uniform_1", Self::uniform(1, 10)),
            ("uniform_2", Self::uniform(1, 30)),
        ]
    }
}

/// Sample a loop depth; free-function form of [`LoopDistribution::sample`].
pub fn sample_loop_depth(dist: &LoopDistribution, rng: &mut Rng) -> usize {
    dist.sample(rng)
}
