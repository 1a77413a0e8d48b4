//! Conditional generation: condition domains are re-noised to `phi(t)` at
//! every reverse step while target domains follow the DDPM or DDIM update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::kv::{fmt_f64, KvMap};
use crate::schedule::{NoiseSchedule, TimestepVector};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhiFamily {
    Vanilla,
    Skip,
    Constant,
    ConstantFading,
}

impl PhiFamily {
    pub const ALL: [PhiFamily; 4] = [PhiFamily::Vanilla, PhiFamily::Skip, PhiFamily::Constant, PhiFamily::ConstantFading];

    pub fn name(self) -> &'static str {
        match self {
            PhiFamily::Vanilla => "vanilla",
            PhiFamily::Skip => "skip",
            PhiFamily::Constant => "constant",
            PhiFamily::ConstantFading => "constant_fading",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown phi family `{s}` (vanilla|skip|constant|constant_fading)")))
    }
}

/// Maps the target timestep to the condition timestep. `c` is the fraction
/// of `T` used as condition noise; `c = 0` keeps conditions clean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiSchedule {
    family: PhiFamily,
    c: f64,
}

impl PhiSchedule {
    pub fn new(family: PhiFamily, c: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::invalid(format!("phi fraction c must be in [0, 1], got {c}")));
        }
        Ok(Self { family, c })
    }

    pub fn vanilla() -> Self {
        Self {
            family: PhiFamily::Vanilla,
            c: 0.0,
        }
    }

    pub fn clean() -> Self {
        Self {
            family: PhiFamily::Constant,
            c: 0.0,
        }
    }

    pub fn family(&self) -> PhiFamily {
        self.family
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn eval(&self, t: usize, steps: usize) -> usize {
        let level = (self.c * steps as f64).round() as usize;
        let out = match self.family {
            PhiFamily::Vanilla => t,
            PhiFamily::Constant => level,
            PhiFamily::Skip => t.saturating_sub(steps - level),
            PhiFamily::ConstantFading => t.min(level),
        };
        out.min(steps)
    }
}

impl Default for PhiSchedule {
    fn default() -> Self {
        Self {
            family: PhiFamily::Constant,
            c: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            _ => Err(Error::invalid(format!("unknown sampler `{s}` (ddpm|ddim)"))),
        }
    }
}

/// Ancestral noise scale of the DDPM update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sigma {
    /// `sqrt(beta_tilde_t)`, the posterior standard deviation.
    Posterior,
    /// `sqrt(beta_t)`.
    Beta,
}

/// Independent noise streams. Each generated sample derives its own
/// generators from these and its global index, so results do not depend
/// on how samples are batched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub init: u64,
    pub condition: u64,
    pub step: u64,
}

impl Seeds {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            init: seed,
            condition: seed ^ 0xC0D1_7100_0000_0000,
            step: seed ^ 0x57E9_0000_0000_0000,
        }
    }
}

fn stream(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    /// Per-domain `[B, ...]`; only condition slots are read.
    pub x_cond: Vec<Tensor<f32>>,
    pub cond_mask: Vec<bool>,
    pub phi: PhiSchedule,
    pub sampler: SamplerKind,
    pub ddim_steps: usize,
    pub seeds: Seeds,
    /// Global index of the first sample, for batch-independent streams.
    pub sample_offset: usize,
    pub clamp: bool,
    pub paper_literal_update: bool,
    pub sigma: Sigma,
}

impl GenerationRequest {
    pub fn new(x_cond: Vec<Tensor<f32>>, cond_mask: Vec<bool>, seed: u64) -> Self {
        Self {
            x_cond,
            cond_mask,
            phi: PhiSchedule::default(),
            sampler: SamplerKind::Ddim,
            ddim_steps: 100,
            seeds: Seeds::from_seed(seed),
            sample_offset: 0,
            clamp: true,
            paper_literal_update: false,
            sigma: Sigma::Posterior,
        }
    }

    pub fn batch(&self) -> usize {
        self.x_cond.first().map_or(0, |x| x.rows())
    }

    fn validate(&self, domains: usize, steps: usize) -> Result<()> {
        if self.cond_mask.len() != domains || self.x_cond.len() != domains {
            return Err(Error::LengthMismatch {
                context: "generation domains".into(),
                expected: domains,
                got: self.cond_mask.len().min(self.x_cond.len()),
            });
        }
        if !self.cond_mask.iter().any(|&c| c) || self.cond_mask.iter().all(|&c| c) {
            return Err(Error::invalid("generation needs at least one condition and one target domain"));
        }
        if self.sampler == SamplerKind::Ddim && !(1..=steps).contains(&self.ddim_steps) {
            return Err(Error::invalid(format!("ddim steps must be in [1, {steps}], got {}", self.ddim_steps)));
        }
        let shape = self.x_cond[0].shape();
        if shape.first().copied().unwrap_or(0) == 0 {
            return Err(Error::EmptyBatch);
        }
        for (d, x) in self.x_cond.iter().enumerate() {
            if x.shape() != shape {
                return Err(Error::ShapeMismatch {
                    context: format!("condition domain {d}"),
                    expected: shape.to_vec(),
                    got: x.shape().to_vec(),
                });
            }
            if self.cond_mask[d] && !x.is_finite() {
                return Err(Error::NonFinite(format!("condition domain {d}")));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("gen.phi", self.phi.family().name());
        kv.set("gen.c", fmt_f64(self.phi.c()));
        kv.set("gen.sampler", self.sampler.name());
        kv.set("gen.steps", self.ddim_steps);
        let mask: String = self.cond_mask.iter().map(|&c| if c { '1' } else { '0' }).collect();
        kv.set("gen.cond_mask", mask);
        kv.set("gen.seed.init", self.seeds.init);
        kv.set("gen.seed.condition", self.seeds.condition);
        kv.set("gen.seed.step", self.seeds.step);
        kv.set("gen.clamp", self.clamp);
        kv.set("gen.paper_literal_update", self.paper_literal_update);
        kv.set(
            "gen.sigma",
            match self.sigma {
                Sigma::Posterior => "posterior",
                Sigma::Beta => "beta",
            },
        );
        kv
    }
}

/// Anything that predicts per-domain noise; the trained denoiser or a test
/// double.
pub trait NoisePredictor {
    fn domains(&self) -> usize;
    fn predict(&self, x: &[Tensor<f32>], tvecs: &[TimestepVector], codes: Option<&[Vec<bool>]>) -> Result<Vec<Tensor<f32>>>;
    fn uses_condition_code(&self) -> bool {
        false
    }
}

impl NoisePredictor for Denoiser<f32> {
    fn domains(&self) -> usize {
        self.config().domains
    }

    fn predict(&self, x: &[Tensor<f32>], tvecs: &[TimestepVector], codes: Option<&[Vec<bool>]>) -> Result<Vec<Tensor<f32>>> {
        self.forward(x, tvecs, codes)
    }

    fn uses_condition_code(&self) -> bool {
        self.config().condition_code
    }
}

/// State handed to the snapshot observer after each reverse step.
pub struct Snapshot<'a> {
    /// 0-based index of the reverse step just taken.
    pub step: usize,
    pub total_steps: usize,
    /// Target timestep the network was evaluated at.
    pub t: usize,
    /// Current per-domain state (targets updated, conditions re-noised).
    pub x: &'a [Tensor<f32>],
    /// Clean-data estimate from this step's noise prediction.
    pub x0_hat: &'a [Tensor<f32>],
}

struct Run<'a> {
    req: &'a GenerationRequest,
    schedule: &'a NoiseSchedule,
    cond_rngs: Vec<ChaCha8Rng>,
    step_rngs: Vec<ChaCha8Rng>,
    x: Vec<Tensor<f32>>,
    codes: Option<Vec<Vec<bool>>>,
}

impl<'a> Run<'a> {
    fn new(req: &'a GenerationRequest, schedule: &'a NoiseSchedule, uses_code: bool) -> Self {
        let batch = req.batch();
        let idx = |b: usize| req.sample_offset + b;
        let mut init: Vec<ChaCha8Rng> = (0..batch).map(|b| stream(req.seeds.init, idx(b))).collect();
        let mut x = Vec::with_capacity(req.x_cond.len());
        for (d, xc) in req.x_cond.iter().enumerate() {
            let mut t = Tensor::zeros(xc.shape());
            if !req.cond_mask[d] {
                for (b, rng) in init.iter_mut().enumerate() {
                    for v in t.row_mut(b) {
                        *v = StandardNormal.sample(rng);
                    }
                }
            }
            x.push(t);
        }
        Self {
            req,
            schedule,
            cond_rngs: (0..batch).map(|b| stream(req.seeds.condition, idx(b))).collect(),
            step_rngs: (0..batch).map(|b| stream(req.seeds.step, idx(b))).collect(),
            x,
            codes: uses_code.then(|| vec![req.cond_mask.clone(); batch]),
        }
    }

    /// Writes condition slots at level `tc` and returns the timestep vectors.
    fn renoise_conditions(&mut self, t: usize, tc: usize) -> Result<Vec<TimestepVector>> {
        let (sa, sb) = self.schedule.coefficients(tc)?;
        for (d, xc) in self.req.x_cond.iter().enumerate() {
            if !self.req.cond_mask[d] {
                continue;
            }
            for (b, rng) in self.cond_rngs.iter_mut().enumerate() {
                for (o, &c) in self.x[d].row_mut(b).iter_mut().zip(xc.row(b)) {
                    let e: f32 = StandardNormal.sample(rng);
                    *o = (sa * c as f64 + sb * e as f64) as f32;
                }
            }
        }
        let entries: Vec<usize> = self.req.cond_mask.iter().map(|&c| if c { tc } else { t }).collect();
        let tvec = TimestepVector::new(entries, self.schedule.steps())?;
        Ok(vec![tvec; self.req.batch()])
    }

    fn x0_hat(&self, eps: &[Tensor<f32>], t: usize) -> Result<Vec<Tensor<f32>>> {
        let (sa, sb) = self.schedule.coefficients(t)?;
        Ok(self
            .x
            .iter()
            .zip(eps)
            .enumerate()
            .map(|(d, (x, e))| {
                if self.req.cond_mask[d] {
                    self.req.x_cond[d].clone()
                } else {
                    let mut out = x.clone();
                    for (o, &n) in out.data_mut().iter_mut().zip(e.data()) {
                        *o = ((*o as f64 - sb * n as f64) / sa) as f32;
                    }
                    out
                }
            })
            .collect())
    }

    fn check_finite(&self, step: usize, t: usize) -> Result<()> {
        let bad = self
            .x
            .iter()
            .zip(&self.req.cond_mask)
            .any(|(x, &c)| !c && !x.is_finite());
        if bad {
            Err(Error::NonFiniteGeneration { step, t })
        } else {
            Ok(())
        }
    }

    fn finish(self) -> Vec<Tensor<f32>> {
        let req = self.req;
        self.x
            .into_iter()
            .enumerate()
            .map(|(d, x)| {
                if req.cond_mask[d] {
                    req.x_cond[d].clone()
                } else if req.clamp {
                    x.map(|v| v.clamp(-1.0, 1.0))
                } else {
                    x
                }
            })
            .collect()
    }
}

fn predict_checked(model: &impl NoisePredictor, run: &Run<'_>, tvecs: &[TimestepVector], step: usize, t: usize) -> Result<Vec<Tensor<f32>>> {
    match model.predict(&run.x, tvecs, run.codes.as_deref()) {
        Err(Error::NonFinite(_)) => Err(Error::NonFiniteGeneration { step, t }),
        other => other,
    }
}

/// Ancestral sampling over every timestep `T..1`.
pub fn ddpm_generate(
    req: &GenerationRequest,
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    mut observer: impl FnMut(&Snapshot<'_>),
) -> Result<Vec<Tensor<f32>>> {
    let big_t = schedule.steps();
    req.validate(model.domains(), big_t)?;
    let mut run = Run::new(req, schedule, model.uses_condition_code());
    for (step, t) in (1..=big_t).rev().enumerate() {
        let tvecs = run.renoise_conditions(t, req.phi.eval(t, big_t))?;
        let eps = predict_checked(model, &run, &tvecs, step, t)?;
        let lead = if req.paper_literal_update {
            1.0 / schedule.alpha_bar(t).sqrt()
        } else {
            1.0 / schedule.alpha(t).sqrt()
        };
        let eps_coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
        let sigma = match (t, req.sigma) {
            (1, _) => 0.0,
            (_, Sigma::Posterior) => schedule.posterior_variance(t).sqrt(),
            (_, Sigma::Beta) => schedule.beta(t).sqrt(),
        };
        let x0_hat = run.x0_hat(&eps, t)?;
        for d in 0..run.x.len() {
            if req.cond_mask[d] {
                continue;
            }
            for b in 0..req.batch() {
                let rng = &mut run.step_rngs[b];
                for (o, &e) in run.x[d].row_mut(b).iter_mut().zip(eps[d].row(b)) {
                    let z: f64 = if sigma > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
                    *o = (lead * (*o as f64 - eps_coef * e as f64) + sigma * z) as f32;
                }
            }
        }
        run.check_finite(step, t)?;
        observer(&Snapshot {
            step,
            total_steps: big_t,
            t,
            x: &run.x,
            x0_hat: &x0_hat,
        });
    }
    Ok(run.finish())
}

/// `tau_i = floor(i * T / S)` for `i = 0..=S`.
pub fn ddim_timesteps(steps: usize, sub: usize) -> Vec<usize> {
    (0..=sub).map(|i| i * steps / sub).collect()
}

/// Deterministic (eta = 0) sampling over a uniform subsequence of `1..=T`.
pub fn ddim_generate(
    req: &GenerationRequest,
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    mut observer: impl FnMut(&Snapshot<'_>),
) -> Result<Vec<Tensor<f32>>> {
    let big_t = schedule.steps();
    req.validate(model.domains(), big_t)?;
    let taus = ddim_timesteps(big_t, req.ddim_steps);
    let mut run = Run::new(req, schedule, model.uses_condition_code());
    for (step, i) in (1..taus.len()).rev().enumerate() {
        let (tau, prev) = (taus[i], taus[i - 1]);
        let tvecs = run.renoise_conditions(tau, req.phi.eval(tau, big_t))?;
        let eps = predict_checked(model, &run, &tvecs, step, tau)?;
        let x0_hat = run.x0_hat(&eps, tau)?;
        let (pa, pb) = schedule.coefficients(prev)?;
        for d in 0..run.x.len() {
            if req.cond_mask[d] {
                continue;
            }
            for ((o, &x0), &e) in run.x[d].data_mut().iter_mut().zip(x0_hat[d].data()).zip(eps[d].data()) {
                *o = (pa * x0 as f64 + pb * e as f64) as f32;
            }
        }
        run.check_finite(step, tau)?;
        observer(&Snapshot {
            step,
            total_steps: req.ddim_steps,
            t: tau,
            x: &run.x,
            x0_hat: &x0_hat,
        });
    }
    Ok(run.finish())
}

/// Dispatches on `req.sampler`.
pub fn generate(
    req: &GenerationRequest,
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    observer: impl FnMut(&Snapshot<'_>),
) -> Result<Vec<Tensor<f32>>> {
    match req.sampler {
        SamplerKind::Ddpm => ddpm_generate(req, model, schedule, observer),
        SamplerKind::Ddim => ddim_generate(req, model, schedule, observer),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn phi_examples() {
        let c = PhiSchedule::new(PhiFamily::Constant, 0.2).unwrap();
        assert!([1, 200, 999, 1000].iter().all(|&t| c.eval(t, 1000) == 200));
        assert_eq!(PhiSchedule::vanilla().eval(737, 1000), 737);
        let s = PhiSchedule::new(PhiFamily::Skip, 0.2).unwrap();
        assert_eq!((s.eval(1000, 1000), s.eval(800, 1000)), (200, 0));
        let f = PhiSchedule::new(PhiFamily::ConstantFading, 0.2).unwrap();
        assert_eq!((f.eval(900, 1000), f.eval(150, 1000)), (200, 150));
        assert!((1..=1000).all(|t| PhiSchedule::clean().eval(t, 1000) == 0));
        assert!(PhiSchedule::new(PhiFamily::Constant, 1.5).is_err());
        assert!(PhiSchedule::new(PhiFamily::Skip, -0.1).is_err());
    }

    #[test]
    fn ddim_subsequence() {
        assert_eq!(ddim_timesteps(1000, 100)[..3], [0, 10, 20]);
        assert_eq!(*ddim_timesteps(1000, 100).last().unwrap(), 1000);
        assert_eq!(ddim_timesteps(10, 10), (0..=10).collect::<Vec<_>>());
        assert_eq!(ddim_timesteps(1000, 3), vec![0, 333, 666, 1000]);
    }

    proptest! {
        #[test]
        fn phi_is_monotone_and_in_range(c in 0.0f64..=1.0, fam in 0usize..4, steps in 1usize..1200) {
            let phi = PhiSchedule::new(PhiFamily::ALL[fam], c).unwrap();
            let mut prev = usize::MAX;
            for t in (1..=steps).rev() {
                let v = phi.eval(t, steps);
                prop_assert!(v <= steps);
                prop_assert!(v <= prev);
                prev = v;
            }
        }
    }
}
