#![allow(dead_code)]

use mdd_core::{DataShape, Denoiser, DenoiserConfig, NoiseSchedule, Tensor, TimestepVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Image-mode model with every block type (conv residual blocks, time
/// embedding, down/upsampling, bottleneck attention) and < 5k parameters.
pub fn tiny_image_config() -> DenoiserConfig {
    DenoiserConfig {
        shape: DataShape::Image { channels: 1, size: 4 },
        domains: 2,
        width: 2,
        channel_mult: vec![1, 1],
        res_blocks: 1,
        groups: 1,
        time_dim: 4,
        attention_chunk: 0,
        condition_code: false,
        init_seed: 5,
    }
}

pub fn tiny_vector_config(domains: usize) -> DenoiserConfig {
    DenoiserConfig {
        shape: DataShape::Vector { features: 3 },
        domains,
        width: 4,
        channel_mult: vec![1],
        res_blocks: 1,
        groups: 1,
        time_dim: 4,
        attention_chunk: 4,
        condition_code: false,
        init_seed: 6,
    }
}

pub fn random_views(shape: DataShape, domains: usize, batch: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..domains)
        .map(|_| {
            let s = shape.batch_shape(batch);
            let n = s.iter().product();
            Tensor::from_vec(&s, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        })
        .collect()
}

pub fn random_tvecs(domains: usize, batch: usize, steps: usize, seed: u64) -> Vec<TimestepVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| TimestepVector::new((0..domains).map(|_| rng.random_range(0..=steps)).collect(), steps).unwrap())
        .collect()
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub params_checked: usize,
    pub worst: String,
}

/// Relative error between an analytic and a numeric derivative. Values
/// below `floor` in both are compared on an absolute scale.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central finite differences with step `h` against `loss_and_gradients`
/// for every scalar parameter of `model`.
pub fn gradient_check(model: &Denoiser<f64>, batch: usize, h: f64, floor: f64) -> GradCheck {
    let cfg = model.config().clone();
    let m = cfg.domains;
    let x = random_views(cfg.shape, m, batch, 101);
    let eps = random_views(cfg.shape, m, batch, 102);
    let tvecs = random_tvecs(m, batch, 1000, 103);
    let mask: Vec<Vec<bool>> = (0..batch).map(|b| (0..m).map(|d| (b + d) % 3 != 2).collect()).collect();
    let codes: Option<Vec<Vec<bool>>> = cfg
        .condition_code
        .then(|| (0..batch).map(|b| (0..m).map(|d| (b + d) % 2 == 0).collect()).collect());

    let (_, grads) = model
        .loss_and_gradients(&x, &tvecs, codes.as_deref(), &eps, &mask)
        .unwrap();
    let mut probe = model.clone();
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for p in 0..model.params().len() {
        for i in 0..model.params().values()[p].len() {
            let orig = model.params().values()[p].data()[i];
            probe.params_mut().values_mut()[p].data_mut()[i] = orig + h;
            let (lp, _) = probe.loss_and_gradients(&x, &tvecs, codes.as_deref(), &eps, &mask).unwrap();
            probe.params_mut().values_mut()[p].data_mut()[i] = orig - h;
            let (lm, _) = probe.loss_and_gradients(&x, &tvecs, codes.as_deref(), &eps, &mask).unwrap();
            probe.params_mut().values_mut()[p].data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads[p].data()[i];
            let err = rel_error(analytic, numeric, floor);
            checked += 1;
            if err > worst.0 {
                worst = (
                    err,
                    format!("{}[{i}] analytic {analytic:e} numeric {numeric:e}", model.params().names()[p]),
                );
            }
        }
    }
    GradCheck {
        max_rel_error: worst.0,
        params_checked: checked,
        worst: worst.1,
    }
}

/// Small 8-feature vector model matching TriShape's vector mode.
pub fn small_trishape_config(condition_code: bool) -> DenoiserConfig {
    DenoiserConfig {
        shape: DataShape::Vector { features: 8 },
        domains: 3,
        width: 16,
        channel_mult: vec![1],
        res_blocks: 1,
        groups: 4,
        time_dim: 8,
        attention_chunk: 8,
        condition_code,
        init_seed: 21,
    }
}

/// Batch of `n` random 8-feature views per domain with the given masks.
pub fn random_batch(masks: &[Vec<bool>], seed: u64) -> mdd_core::trainer::MultiDomainBatch {
    let n = masks.len();
    let m = masks[0].len();
    let mut views = random_views(DataShape::Vector { features: 8 }, m, n, seed)
        .into_iter()
        .map(|t| t.cast::<f32>())
        .collect::<Vec<_>>();
    for (b, mask) in masks.iter().enumerate() {
        for d in 0..m {
            if !mask[d] {
                views[d].row_mut(b).fill(f32::NAN);
            }
        }
    }
    mdd_core::trainer::MultiDomainBatch::new(views, masks.to_vec()).unwrap()
}

/// Mean and variance of a sample.
pub fn moments(xs: impl IntoIterator<Item = f64>) -> (f64, f64, usize) {
    let v: Vec<f64> = xs.into_iter().collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var, v.len())
}

/// |mean| and |var - 1| of a standard normal sample within 3 standard errors.
pub fn looks_standard_normal(xs: impl IntoIterator<Item = f64>) -> bool {
    let (mean, var, n) = moments(xs);
    let n = n as f64;
    mean.abs() < 3.0 / n.sqrt() && (var - 1.0).abs() < 3.0 * (2.0 / (n - 1.0)).sqrt()
}

/// Returns the exact noise that maps a known clean sample to the current
/// input at the given timestep.
pub struct EpsOracle {
    pub x0: Vec<Tensor<f32>>,
    pub schedule: NoiseSchedule,
}

impl mdd_core::NoisePredictor for EpsOracle {
    fn domains(&self) -> usize {
        self.x0.len()
    }

    fn predict(&self, x: &[Tensor<f32>], tvecs: &[TimestepVector], _: Option<&[Vec<bool>]>) -> mdd_core::Result<Vec<Tensor<f32>>> {
        Ok(x.iter()
            .enumerate()
            .map(|(d, xt)| {
                let mut out = Tensor::zeros(xt.shape());
                for b in 0..xt.rows() {
                    let (sa, sb) = self.schedule.coefficients(tvecs[b].get(d)).unwrap();
                    if sb == 0.0 {
                        continue;
                    }
                    for ((o, &v), &c) in out.row_mut(b).iter_mut().zip(xt.row(b)).zip(self.x0[d].row(b)) {
                        *o = ((v as f64 - sa * c as f64) / sb) as f32;
                    }
                }
                out
            })
            .collect())
    }
}
