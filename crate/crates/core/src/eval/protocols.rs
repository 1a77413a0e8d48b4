//! Supervision sweep, bridge translation and phi sweep. Trained models are
//! obtained through a provider closure so that protocols can train on
//! demand, load checkpoints, or report missing cells.

use std::time::Instant;

use super::{domain_set, mode_name, sha256_hex, stack_views, translate, translation_mae, EvalSettings, ExperimentResult, ExperimentRow};
use crate::dataset::{generate_test_points, PairPolicy, ViewMode, DOMAINS};
use crate::denoiser::Denoiser;
use crate::error::Result;
use crate::kv::{fmt_f64, KvMap};
use crate::sampler::{PhiFamily, PhiSchedule};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::trainer::{SchemeKind, TrainingScheme};

pub const SUPERVISION_GRID: [f64; 4] = [1.0, 0.7, 0.4, 0.3];
pub const PHI_C_GRID: [f64; 7] = [0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Identifies one trained model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellKey {
    pub scheme: TrainingScheme,
    pub n_sup: f64,
    pub pair_policy: PairPolicy,
    pub seed: u64,
}

impl CellKey {
    pub fn label(&self) -> String {
        format!("{}/N={}/{}/seed={}", self.scheme, fmt_f64(self.n_sup), self.pair_policy.name(), self.seed)
    }
}

pub struct TrainedCell {
    pub model: Denoiser<f32>,
    pub schedule: NoiseSchedule,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub mode: ViewMode,
    pub schemes: Vec<TrainingScheme>,
    pub n_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub test_points: usize,
    pub test_seed: u64,
    pub eval: EvalSettings,
    pub phi_c_grid: Vec<f64>,
    /// Training split of the checkpoints used by the bridge and phi sweeps.
    pub bridge_n_sup: f64,
    pub bridge_policy: PairPolicy,
    pub snapshot_count: usize,
    pub snapshot_samples: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            mode: ViewMode::Vector,
            schemes: vec![
                TrainingScheme::mdd(),
                TrainingScheme::ummcsgm(crate::trainer::Fill::PureNoise),
                TrainingScheme::ummcsgm(crate::trainer::Fill::MinusOne),
                TrainingScheme::noisycond(crate::trainer::Fill::PureNoise),
                TrainingScheme::noisycond(crate::trainer::Fill::MinusOne),
            ],
            n_grid: SUPERVISION_GRID.to_vec(),
            seeds: vec![0, 1, 2],
            test_points: 200,
            test_seed: 1234,
            eval: EvalSettings::default(),
            phi_c_grid: PHI_C_GRID.to_vec(),
            bridge_n_sup: 0.0,
            bridge_policy: PairPolicy::BridgeAbBc,
            snapshot_count: 10,
            snapshot_samples: 4,
        }
    }
}

impl ProtocolConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("mode", mode_name(self.mode));
        let schemes: Vec<String> = self.schemes.iter().map(|s| s.to_string()).collect();
        kv.set("schemes", schemes.join(","));
        let grid = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",");
        kv.set("n_grid", grid(&self.n_grid));
        kv.set("seeds", self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
        kv.set("test_points", self.test_points);
        kv.set("test_seed", self.test_seed);
        kv.set("sampler", self.eval.sampler.name());
        kv.set("steps", self.eval.ddim_steps);
        kv.set("gen_seed", self.eval.seed);
        kv.set("phi_c_grid", grid(&self.phi_c_grid));
        kv.set("bridge_n_sup", fmt_f64(self.bridge_n_sup));
        kv.set("bridge_policy", self.bridge_policy.name());
        kv.set("snapshot_count", self.snapshot_count);
        kv
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(self.to_kv().to_text().as_bytes())
    }

    fn truth(&self) -> Result<Vec<Tensor<f32>>> {
        let points = generate_test_points(self.mode, self.test_points, self.test_seed)?;
        stack_views(&points, self.mode.data_shape())
    }
}

/// Condition function used when comparing schemes: clean conditions, except
/// for NoisyCond whose conditions are always noised at the target level.
pub fn comparison_phi(scheme: &TrainingScheme) -> PhiSchedule {
    match scheme.kind {
        SchemeKind::NoisyCond => PhiSchedule::vanilla(),
        _ => PhiSchedule::clean(),
    }
}

const COND_A: [bool; DOMAINS] = [true, false, false];

struct Cell<'a> {
    protocol: &'static str,
    key: CellKey,
    trained: &'a TrainedCell,
    config_hash: &'a str,
}

impl Cell<'_> {
    fn rows(&self, phi: PhiSchedule, eval: &EvalSettings, maes: &[Option<f64>], runtime: f64) -> Vec<ExperimentRow> {
        maes.iter()
            .enumerate()
            .filter_map(|(d, m)| m.map(|m| (d, m)))
            .map(|(d, mae)| {
                let mut target = vec![false; DOMAINS];
                target[d] = true;
                ExperimentRow {
                    protocol: self.protocol.into(),
                    scheme: self.key.scheme.to_string(),
                    n_sup: self.key.n_sup,
                    phi_family: phi.family().name().into(),
                    c: phi.c(),
                    sampler: eval.sampler.name().into(),
                    seed: self.key.seed,
                    source: domain_set(&COND_A, true),
                    target: domain_set(&target, true),
                    mae,
                    runtime_s: runtime,
                    config_hash: self.config_hash.into(),
                    checkpoint_hash: self.trained.checkpoint_hash.clone(),
                }
            })
            .collect()
    }
}

fn fetch(
    provider: &mut impl FnMut(&CellKey) -> Result<Option<TrainedCell>>,
    key: &CellKey,
    missing: &mut Vec<String>,
) -> Option<TrainedCell> {
    match provider(key) {
        Ok(Some(t)) => Some(t),
        Ok(None) => {
            missing.push(key.label());
            None
        }
        Err(e) => {
            missing.push(format!("{}: {e}", key.label()));
            None
        }
    }
}

/// A -> (B, C) MAE for every (scheme, N, seed) cell.
pub fn run_supervision_sweep(
    config: &ProtocolConfig,
    mut provider: impl FnMut(&CellKey) -> Result<Option<TrainedCell>>,
) -> Result<ExperimentResult> {
    let truth = config.truth()?;
    let hash = config.config_hash();
    let mut result = ExperimentResult::default();
    for scheme in &config.schemes {
        for &n_sup in &config.n_grid {
            for &seed in &config.seeds {
                let key = CellKey {
                    scheme: *scheme,
                    n_sup,
                    pair_policy: PairPolicy::EqualPairs,
                    seed,
                };
                let Some(trained) = fetch(&mut provider, &key, &mut result.missing) else {
                    continue;
                };
                let phi = comparison_phi(scheme);
                let start = Instant::now();
                let gen = translate(&trained.model, &trained.schedule, &truth, &COND_A, phi, &config.eval, |_, _| {})?;
                let maes = translation_mae(&gen, &truth, &COND_A)?;
                let cell = Cell {
                    protocol: "supervision",
                    key,
                    trained: &trained,
                    config_hash: &hash,
                };
                result.rows.extend(cell.rows(phi, &config.eval, &maes, start.elapsed().as_secs_f64()));
            }
        }
    }
    Ok(result)
}

/// Clean-data estimates and their L1 error maps at one reverse step, for the
/// first `snapshot_samples` test points.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSnapshot {
    pub step: usize,
    pub t: usize,
    /// Per domain `[k, ...]`; condition domains hold the clean condition.
    pub estimates: Vec<Tensor<f32>>,
    /// Per domain elementwise `|estimate - truth| / 2`.
    pub l1: Vec<Tensor<f32>>,
    /// Per target domain MAE of the estimates.
    pub mae: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeOutput {
    pub result: ExperimentResult,
    /// Per seed, the snapshots in reverse-process order.
    pub snapshots: Vec<(u64, Vec<BridgeSnapshot>)>,
    /// First samples' ground truth per domain, for rendering grids.
    pub truth: Vec<Tensor<f32>>,
}

/// `count` reverse-step indices spread uniformly over `0..total`, always
/// including the last step.
pub fn bridge_snapshot_steps(total: usize, count: usize) -> Vec<usize> {
    if count == 0 || total == 0 {
        return Vec::new();
    }
    if count >= total {
        return (0..total).collect();
    }
    if count == 1 {
        return vec![total - 1];
    }
    (0..count).map(|i| (i * (total - 1) + (count - 1) / 2) / (count - 1)).collect()
}

fn head_rows(t: &Tensor<f32>, k: usize) -> Tensor<f32> {
    let mut shape = t.shape().to_vec();
    shape[0] = k;
    Tensor::from_vec(&shape, t.data()[..k * t.row_len()].to_vec()).expect("row prefix")
}

/// A -> (B, C) on a model trained on the bridge split, with snapshots.
pub fn run_bridge(
    config: &ProtocolConfig,
    mut provider: impl FnMut(&CellKey) -> Result<Option<TrainedCell>>,
) -> Result<BridgeOutput> {
    let truth = config.truth()?;
    let hash = config.config_hash();
    let k = config.snapshot_samples.min(config.test_points).max(1);
    let head_truth: Vec<Tensor<f32>> = truth.iter().map(|t| head_rows(t, k)).collect();
    let mut out = BridgeOutput {
        result: ExperimentResult::default(),
        snapshots: Vec::new(),
        truth: head_truth.clone(),
    };
    let total = match config.eval.sampler {
        crate::sampler::SamplerKind::Ddim => config.eval.ddim_steps,
        crate::sampler::SamplerKind::Ddpm => 0,
    };
    for &seed in &config.seeds {
        let key = CellKey {
            scheme: TrainingScheme::mdd(),
            n_sup: config.bridge_n_sup,
            pair_policy: config.bridge_policy,
            seed,
        };
        let Some(trained) = fetch(&mut provider, &key, &mut out.result.missing) else {
            continue;
        };
        let total = if total == 0 { trained.schedule.steps() } else { total };
        let wanted = bridge_snapshot_steps(total, config.snapshot_count);
        let mut snaps = Vec::with_capacity(wanted.len());
        let phi = PhiSchedule::clean();
        let start = Instant::now();
        let gen = translate(&trained.model, &trained.schedule, &truth, &COND_A, phi, &config.eval, |offset, s| {
            if offset != 0 || !wanted.contains(&s.step) {
                return;
            }
            let estimates: Vec<Tensor<f32>> = s.x0_hat.iter().map(|t| head_rows(t, k)).collect();
            let l1: Vec<Tensor<f32>> = estimates
                .iter()
                .zip(&head_truth)
                .map(|(e, t)| {
                    let data = e.data().iter().zip(t.data()).map(|(a, b)| ((a - b) / 2.0).abs()).collect();
                    Tensor::from_vec(e.shape(), data).expect("same shape")
                })
                .collect();
            let clamped: Vec<Tensor<f32>> = estimates.iter().map(|t| t.map(|v| v.clamp(-1.0, 1.0))).collect();
            let mae = translation_mae(&clamped, &head_truth, &COND_A).unwrap_or_default();
            snaps.push(BridgeSnapshot {
                step: s.step,
                t: s.t,
                estimates,
                l1,
                mae,
            });
        })?;
        let maes = translation_mae(&gen, &truth, &COND_A)?;
        let cell = Cell {
            protocol: "bridge",
            key,
            trained: &trained,
            config_hash: &hash,
        };
        out.result.rows.extend(cell.rows(phi, &config.eval, &maes, start.elapsed().as_secs_f64()));
        out.snapshots.push((seed, snaps));
    }
    Ok(out)
}

/// Every phi family over the `c` grid (Vanilla once) on MDD checkpoints.
pub fn run_phi_sweep(
    config: &ProtocolConfig,
    mut provider: impl FnMut(&CellKey) -> Result<Option<TrainedCell>>,
) -> Result<ExperimentResult> {
    let truth = config.truth()?;
    let hash = config.config_hash();
    let mut phis = vec![PhiSchedule::vanilla()];
    for family in [PhiFamily::Skip, PhiFamily::Constant, PhiFamily::ConstantFading] {
        for &c in &config.phi_c_grid {
            phis.push(PhiSchedule::new(family, c)?);
        }
    }
    let mut result = ExperimentResult::default();
    for &seed in &config.seeds {
        let key = CellKey {
            scheme: TrainingScheme::mdd(),
            n_sup: config.bridge_n_sup,
            pair_policy: config.bridge_policy,
            seed,
        };
        let Some(trained) = fetch(&mut provider, &key, &mut result.missing) else {
            continue;
        };
        let cell = Cell {
            protocol: "phi",
            key,
            trained: &trained,
            config_hash: &hash,
        };
        for &phi in &phis {
            let start = Instant::now();
            let gen = translate(&trained.model, &trained.schedule, &truth, &COND_A, phi, &config.eval, |_, _| {})?;
            let maes = translation_mae(&gen, &truth, &COND_A)?;
            result.rows.extend(cell.rows(phi, &config.eval, &maes, start.elapsed().as_secs_f64()));
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_steps_are_spread_and_end_at_the_last_step() {
        let s = bridge_snapshot_steps(100, 10);
        assert_eq!(s.len(), 10);
        assert_eq!((s[0], s[9]), (0, 99));
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(bridge_snapshot_steps(5, 10), vec![0, 1, 2, 3, 4]);
        assert_eq!(bridge_snapshot_steps(100, 1), vec![99]);
    }
}
