//! Translation metrics and the experiment protocols.

mod protocols;
pub mod report;

use sha2::{Digest, Sha256};

use crate::dataset::{DataPoint, Domain, ViewMode};
use crate::denoiser::DataShape;
use crate::error::{Error, Result};
use crate::sampler::{generate, GenerationRequest, NoisePredictor, PhiSchedule, SamplerKind, Seeds, Snapshot};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

pub use protocols::{
    bridge_snapshot_steps, run_bridge, run_phi_sweep, run_supervision_sweep, BridgeOutput, BridgeSnapshot, CellKey,
    ProtocolConfig, TrainedCell, PHI_C_GRID, SUPERVISION_GRID,
};

/// Mean absolute difference after mapping both arrays from `[-1, 1]` to
/// `[0, 1]`.
pub fn mae(generated: &[f32], truth: &[f32]) -> Result<f64> {
    if generated.len() != truth.len() {
        return Err(Error::LengthMismatch {
            context: "mae".into(),
            expected: truth.len(),
            got: generated.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::invalid("mae of empty arrays"));
    }
    let sum: f64 = generated
        .iter()
        .zip(truth)
        .map(|(&a, &b)| ((a as f64 - b as f64) / 2.0).abs())
        .sum();
    Ok(sum / truth.len() as f64)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. Zero when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length samples of size >= 2"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_sd(&rx);
    let (my, _) = mean_sd(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// How translations are generated for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub sampler: SamplerKind,
    pub ddim_steps: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Ddim,
            ddim_steps: 100,
            seed: 0,
            batch_size: 64,
        }
    }
}

/// Per-domain `[B, ...]` ground-truth tensors of fully observed points.
pub fn stack_views(points: &[DataPoint], shape: DataShape) -> Result<Vec<Tensor<f32>>> {
    let m = points.first().map_or(0, |p| p.views.len());
    (0..m)
        .map(|d| {
            let mut data = Vec::with_capacity(points.len() * shape.view_len());
            for (i, p) in points.iter().enumerate() {
                let v = p.views[d]
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("evaluation point {i} lacks domain {d}")))?;
                data.extend_from_slice(v);
            }
            Tensor::from_vec(&shape.batch_shape(points.len()), data)
        })
        .collect()
}

/// Generated target views for `truth` conditioned on the `cond` domains,
/// in batches of `settings.batch_size` with batch-independent noise.
pub fn translate(
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    truth: &[Tensor<f32>],
    cond: &[bool],
    phi: PhiSchedule,
    settings: &EvalSettings,
    mut observer: impl FnMut(usize, &Snapshot<'_>),
) -> Result<Vec<Tensor<f32>>> {
    let n = truth.first().map_or(0, |t| t.rows());
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let size = settings.batch_size.max(1);
    let mut out: Vec<Vec<f32>> = vec![Vec::new(); truth.len()];
    for start in (0..n).step_by(size) {
        let end = (start + size).min(n);
        let part: Vec<Tensor<f32>> = truth
            .iter()
            .map(|t| {
                let mut shape = t.shape().to_vec();
                shape[0] = end - start;
                let w = t.row_len();
                Tensor::from_vec(&shape, t.data()[start * w..end * w].to_vec())
            })
            .collect::<Result<_>>()?;
        let mut req = GenerationRequest::new(part, cond.to_vec(), settings.seed);
        req.seeds = Seeds::from_seed(settings.seed);
        req.phi = phi;
        req.sampler = settings.sampler;
        req.ddim_steps = settings.ddim_steps;
        req.sample_offset = start;
        let gen = generate(&req, model, schedule, |s| observer(start, s))?;
        for (o, g) in out.iter_mut().zip(gen) {
            o.extend_from_slice(g.data());
        }
    }
    out.into_iter()
        .zip(truth)
        .map(|(data, t)| Tensor::from_vec(t.shape(), data))
        .collect()
}

/// MAE of every target domain (`None` for conditions).
pub fn translation_mae(generated: &[Tensor<f32>], truth: &[Tensor<f32>], cond: &[bool]) -> Result<Vec<Option<f64>>> {
    generated
        .iter()
        .zip(truth)
        .zip(cond)
        .map(|((g, t), &c)| if c { Ok(None) } else { mae(g.data(), t.data()).map(Some) })
        .collect()
}

/// One long-format result row: a (cell, seed, target domain) MAE.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub protocol: String,
    pub scheme: String,
    pub n_sup: f64,
    pub phi_family: String,
    pub c: f64,
    pub sampler: String,
    pub seed: u64,
    pub source: String,
    pub target: String,
    pub mae: f64,
    pub runtime_s: f64,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scheme: String,
    pub n_sup: f64,
    pub phi_family: String,
    pub c: f64,
    pub source: String,
    pub target: String,
    pub mean: f64,
    pub sd: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<ExperimentRow>,
    /// Cells for which no checkpoint was available.
    pub missing: Vec<String>,
}

impl ExperimentResult {
    /// Mean and standard deviation over seeds for each cell and target,
    /// in first-appearance order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: Vec<(SummaryRow, Vec<f64>)> = Vec::new();
        for r in &self.rows {
            let key = SummaryRow {
                scheme: r.scheme.clone(),
                n_sup: r.n_sup,
                phi_family: r.phi_family.clone(),
                c: r.c,
                source: r.source.clone(),
                target: r.target.clone(),
                mean: 0.0,
                sd: 0.0,
                seeds: 0,
            };
            let same = |g: &SummaryRow| {
                g.scheme == key.scheme
                    && g.n_sup == key.n_sup
                    && g.phi_family == key.phi_family
                    && g.c == key.c
                    && g.source == key.source
                    && g.target == key.target
            };
            match groups.iter_mut().find(|(g, _)| same(g)) {
                Some((_, v)) => v.push(r.mae),
                None => groups.push((key, vec![r.mae])),
            }
        }
        groups
            .into_iter()
            .map(|(mut g, v)| {
                let (mean, sd) = mean_sd(&v);
                g.mean = mean;
                g.sd = sd;
                g.seeds = v.len();
                g
            })
            .collect()
    }

    /// Mean MAE over rows matching the predicate.
    pub fn mean_where(&self, pred: impl Fn(&ExperimentRow) -> bool) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| pred(r)).map(|r| r.mae).collect();
        (!v.is_empty()).then(|| mean_sd(&v).0)
    }
}

pub(crate) fn domain_set(mask: &[bool], want: bool) -> String {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m == want)
        .map(|(d, _)| Domain::ALL.get(d).map_or('?', |x| x.letter()))
        .collect()
}

pub(crate) fn mode_name(mode: ViewMode) -> String {
    match mode {
        ViewMode::Vector => "vector".into(),
        ViewMode::Image { size } => format!("image{size}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mae_examples() {
        let a = vec![0.3f32; 10];
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(mae(&[-1.0; 4], &[1.0; 4]).unwrap(), 1.0);
        assert!(mae(&[0.0; 3], &[0.0; 4]).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap(), 0.0);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(r > 0.9 && r < 1.0);
    }

    #[test]
    fn mean_sd_examples() {
        assert_eq!(mean_sd(&[2.0, 4.0]), (3.0, 2f64.sqrt()));
        assert_eq!(mean_sd(&[5.0]), (5.0, 0.0));
    }

    proptest! {
        #[test]
        fn mae_is_a_metric(a in prop::collection::vec(-1.0f32..=1.0, 12), b in prop::collection::vec(-1.0f32..=1.0, 12), c in prop::collection::vec(-1.0f32..=1.0, 12)) {
            prop_assert_eq!(mae(&a, &a).unwrap(), 0.0);
            prop_assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
            prop_assert!(mae(&a, &c).unwrap() <= mae(&a, &b).unwrap() + mae(&b, &c).unwrap() + 1e-12);
            prop_assert!(mae(&a, &b).unwrap() >= 0.0);
        }
    }
}
