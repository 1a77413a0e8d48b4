//! Variance schedules and per-domain timestep vectors.
//!
//! Timestep `0` is clean data (`alpha_bar = 1`), timesteps `1..=T` are the
//! diffusion steps, and `T` doubles as the level assigned to a missing view.

use crate::error::{Error, Result};
use crate::kv::{fmt_f64, KvMap};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Precomputed `beta`, `alpha` and cumulative `alpha_bar` tables.
///
/// All tables are indexed by timestep and have length `T + 1`; index `0` of
/// `betas`/`alphas` is unused and set to `0`/`1` so that the cumulative
/// product starts at exactly one.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear `beta` ramp from `beta_start` at `t = 1` to `beta_end` at `t = T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let valid = beta_start.is_finite()
            && beta_end.is_finite()
            && beta_start > 0.0
            && beta_start <= beta_end
            && beta_end < 1.0;
        if !valid {
            return Err(Error::invalid(format!(
                "beta range must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }

        let mut betas = Vec::with_capacity(steps + 1);
        betas.push(0.0);
        for t in 1..=steps {
            let frac = if steps == 1 {
                0.0
            } else {
                (t - 1) as f64 / (steps - 1) as f64
            };
            betas.push(beta_start + (beta_end - beta_start) * frac);
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for t in 1..=steps {
            let prev = alpha_bars[t - 1];
            alpha_bars.push(prev * alphas[t]);
        }

        Ok(Self {
            steps,
            beta_start,
            beta_end,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))` for a single timestep.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        let ab = self.alpha_bars[t];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Posterior variance `beta_tilde_t = (1 - ab_{t-1}) / (1 - ab_t) * beta_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t]) * self.betas[t]
    }

    /// `schedule.*` keys as stored in checkpoint and dataset manifests.
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("schedule.kind", "linear");
        kv.set("schedule.steps", self.steps);
        kv.set("schedule.beta_start", fmt_f64(self.beta_start));
        kv.set("schedule.beta_end", fmt_f64(self.beta_end));
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        if let Some(kind) = kv.get("schedule.kind") {
            if kind != "linear" {
                return Err(Error::format(format!("unknown schedule kind `{kind}`")));
            }
        }
        Self::linear(kv.parse("schedule.steps")?, kv.parse("schedule.beta_start")?, kv.parse("schedule.beta_end")?)
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t > self.steps {
            Err(Error::TimestepOutOfRange { t, max: self.steps })
        } else {
            Ok(())
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }
}

/// One noise level per domain.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TimestepVector(Vec<usize>);

impl TimestepVector {
    pub fn new(entries: Vec<usize>, max: usize) -> Result<Self> {
        if let Some(&t) = entries.iter().find(|&&t| t > max) {
            return Err(Error::TimestepOutOfRange { t, max });
        }
        Ok(Self(entries))
    }

    /// All domains at the same level.
    pub fn uniform(domains: usize, t: usize) -> Self {
        Self(vec![t; domains])
    }

    pub fn entries(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, domain: usize) -> usize {
        self.0[domain]
    }
}

impl std::ops::Index<usize> for TimestepVector {
    type Output = usize;

    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

/// Missing domains (mask `false`) are pinned to `T`; available ones keep
/// their sampled level.
pub fn build_tvector(mask: &[bool], t_sup: &TimestepVector, steps: usize) -> Result<TimestepVector> {
    if mask.len() != t_sup.len() {
        return Err(Error::LengthMismatch {
            context: "build_tvector mask".into(),
            expected: t_sup.len(),
            got: mask.len(),
        });
    }
    let entries = mask
        .iter()
        .zip(t_sup.entries())
        .map(|(&available, &t)| if available { t } else { steps })
        .collect();
    TimestepVector::new(entries, steps)
}

/// Per-domain `(sqrt(alpha_bar), sqrt(1 - alpha_bar))` pairs.
pub fn gather_coefficients(schedule: &NoiseSchedule, tvec: &TimestepVector) -> Result<Vec<(f64, f64)>> {
    tvec.entries().iter().map(|&t| schedule.coefficients(t)).collect()
}
