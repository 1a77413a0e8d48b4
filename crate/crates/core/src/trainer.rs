//! Training schemes over semi-supervised multi-domain batches.
//!
//! MDD samples an independent timestep per available view and feeds missing
//! views as pure noise at `T`. The baselines share one timestep across the
//! noised views: UMM-CSGM keeps a random subset of the available views clean
//! as conditions, NoisyCond noises every available view.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{DataPoint, Dataset};
use crate::denoiser::optim::{optimizer_step, AdamConfig, OptimizerState, PlateauScheduler};
use crate::denoiser::{DataShape, Denoiser};
use crate::error::{Error, Result};
use crate::kv::{fmt_f64, KvMap};
use crate::schedule::{build_tvector, NoiseSchedule, TimestepVector};
use crate::tensor::Tensor;

/// Per-domain clean views plus the availability mask. Slots of missing
/// views hold placeholders that are never copied into network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainBatch {
    pub x0: Vec<Tensor<f32>>,
    pub sup_mask: Vec<Vec<bool>>,
}

impl MultiDomainBatch {
    pub fn new(x0: Vec<Tensor<f32>>, sup_mask: Vec<Vec<bool>>) -> Result<Self> {
        let batch = sup_mask.len();
        if batch == 0 {
            return Err(Error::EmptyBatch);
        }
        if x0.is_empty() {
            return Err(Error::invalid("batch needs at least one domain"));
        }
        let m = x0.len();
        for (b, row) in sup_mask.iter().enumerate() {
            if row.len() != m {
                return Err(Error::LengthMismatch {
                    context: format!("sup_mask row {b}"),
                    expected: m,
                    got: row.len(),
                });
            }
            if !row.iter().any(|&v| v) {
                return Err(Error::invalid(format!("sample {b} has no available view")));
            }
        }
        let shape = x0[0].shape().to_vec();
        for (d, x) in x0.iter().enumerate() {
            if x.shape() != shape.as_slice() || x.rows() != batch {
                return Err(Error::ShapeMismatch {
                    context: format!("batch domain {d}"),
                    expected: shape.clone(),
                    got: x.shape().to_vec(),
                });
            }
            for (n, row) in sup_mask.iter().enumerate() {
                if row[d] && x.row(n).iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("available view of sample {n}, domain {d}")));
                }
            }
        }
        Ok(Self { x0, sup_mask })
    }

    /// Stacks dataset points; missing views become NaN placeholders.
    pub fn from_points(points: &[&DataPoint], shape: DataShape) -> Result<Self> {
        let view = shape.view_len();
        let m = points.first().map_or(0, |p| p.views.len());
        let mut x0 = Vec::with_capacity(m);
        for d in 0..m {
            let mut data = Vec::with_capacity(points.len() * view);
            for p in points {
                match &p.views[d] {
                    Some(v) => data.extend_from_slice(v),
                    None => data.extend(std::iter::repeat_n(f32::NAN, view)),
                }
            }
            x0.push(Tensor::from_vec(&shape.batch_shape(points.len()), data)?);
        }
        let sup_mask = points.iter().map(|p| p.sup_mask().to_vec()).collect();
        Self::new(x0, sup_mask)
    }

    pub fn len(&self) -> usize {
        self.sup_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sup_mask.is_empty()
    }

    pub fn domains(&self) -> usize {
        self.x0.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeKind {
    Mdd,
    UmmCsgm,
    NoisyCond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fill {
    PureNoise,
    MinusOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossScope {
    AllDomains,
    SupervisedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrainingScheme {
    pub kind: SchemeKind,
    pub fill: Fill,
    pub loss_scope: LossScope,
}

impl TrainingScheme {
    pub fn mdd() -> Self {
        Self {
            kind: SchemeKind::Mdd,
            fill: Fill::PureNoise,
            loss_scope: LossScope::AllDomains,
        }
    }

    pub fn ummcsgm(fill: Fill) -> Self {
        Self {
            kind: SchemeKind::UmmCsgm,
            fill,
            loss_scope: LossScope::SupervisedOnly,
        }
    }

    pub fn noisycond(fill: Fill) -> Self {
        Self {
            kind: SchemeKind::NoisyCond,
            fill,
            loss_scope: LossScope::SupervisedOnly,
        }
    }

    /// Missing slots carry a noise target only when filled with noise.
    pub fn validate(&self) -> Result<()> {
        if self.kind == SchemeKind::Mdd && self.fill != Fill::PureNoise {
            return Err(Error::invalid("MDD fills missing views with pure noise only"));
        }
        if self.loss_scope == LossScope::AllDomains && self.fill == Fill::MinusOne {
            return Err(Error::invalid(
                "loss over all domains needs pure-noise fill (a -1 slot has no noise target)",
            ));
        }
        Ok(())
    }

    pub fn uses_condition_code(&self) -> bool {
        self.kind == SchemeKind::UmmCsgm
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            SchemeKind::Mdd => "mdd",
            SchemeKind::UmmCsgm => "ummcsgm",
            SchemeKind::NoisyCond => "noisycond",
        }
    }

    pub fn fill_name(&self) -> &'static str {
        match self.fill {
            Fill::PureNoise => "pure_noise",
            Fill::MinusOne => "minus_one",
        }
    }

    pub fn loss_scope_name(&self) -> &'static str {
        match self.loss_scope {
            LossScope::AllDomains => "all_domains",
            LossScope::SupervisedOnly => "supervised_only",
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("scheme", self.kind_name());
        kv.set("fill", self.fill_name());
        kv.set("loss_scope", self.loss_scope_name());
        kv
    }

    pub fn from_names(kind: &str, fill: Option<&str>, loss_scope: Option<&str>) -> Result<Self> {
        let fill = match fill {
            None => None,
            Some("pure_noise" | "noise" | "n") => Some(Fill::PureNoise),
            Some("minus_one" | "o") => Some(Fill::MinusOne),
            Some(other) => return Err(Error::invalid(format!("unknown fill `{other}` (pure_noise|minus_one)"))),
        };
        let mut scheme = match kind {
            "mdd" => Self::mdd(),
            "ummcsgm" => Self::ummcsgm(fill.unwrap_or(Fill::PureNoise)),
            "noisycond" => Self::noisycond(fill.unwrap_or(Fill::PureNoise)),
            other => return Err(Error::invalid(format!("unknown scheme `{other}` (mdd|ummcsgm|noisycond)"))),
        };
        if let Some(f) = fill {
            scheme.fill = f;
        }
        match loss_scope {
            None => {}
            Some("all_domains") => scheme.loss_scope = LossScope::AllDomains,
            Some("supervised_only") => scheme.loss_scope = LossScope::SupervisedOnly,
            Some(other) => {
                return Err(Error::invalid(format!(
                    "unknown loss scope `{other}` (all_domains|supervised_only)"
                )))
            }
        }
        scheme.validate()?;
        Ok(scheme)
    }
}

/// `mdd`, or the baseline name with its fill suffix (`ummcsgm-n`, `noisycond-o`).
impl fmt::Display for TrainingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            SchemeKind::Mdd => f.write_str("mdd"),
            _ => {
                let suffix = if self.fill == Fill::PureNoise { "n" } else { "o" };
                write!(f, "{}-{suffix}", self.kind_name())
            }
        }
    }
}

/// Parses the [`Display`](fmt::Display) label; baseline names without a
/// suffix default to the pure-noise fill.
impl std::str::FromStr for TrainingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.rsplit_once('-') {
            Some((kind, "n")) if kind != "mdd" => Self::from_names(kind, Some("pure_noise"), None),
            Some((kind, "o")) if kind != "mdd" => Self::from_names(kind, Some("minus_one"), None),
            Some(_) => Err(Error::invalid(format!("unknown scheme label `{s}`"))),
            None => Self::from_names(s, None, None),
        }
    }
}

/// Network inputs and regression targets for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub x_t: Vec<Tensor<f32>>,
    pub eps: Vec<Tensor<f32>>,
    pub tvecs: Vec<TimestepVector>,
    pub codes: Option<Vec<Vec<bool>>>,
    pub loss_mask: Vec<Vec<bool>>,
}

/// Test hook replacing the random timestep draws. For MDD row `b` is the
/// per-domain `t_sup`; the baselines read the shared `t` from entry 0.
pub type ForcedTimesteps<'a> = Option<&'a [Vec<usize>]>;

fn draw_eps(rng: &mut ChaCha8Rng, shape: &[usize], domains: usize) -> Vec<Tensor<f32>> {
    (0..domains)
        .map(|_| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            Tensor::from_vec(shape, data).expect("shape product")
        })
        .collect()
}

fn forced_row<'a>(forced: ForcedTimesteps<'a>, b: usize, batch: usize, width: usize) -> Result<Option<&'a [usize]>> {
    match forced {
        None => Ok(None),
        Some(rows) => {
            if rows.len() != batch || rows[b].len() < width {
                return Err(Error::invalid("forced timesteps must cover every sample and domain"));
            }
            Ok(Some(&rows[b]))
        }
    }
}

/// Draw order: timesteps (and condition subsets) sample by sample, then
/// noise domain by domain. Equal forced timesteps therefore make MDD and
/// NoisyCond consume identical noise.
pub fn prepare_batch(
    scheme: &TrainingScheme,
    batch: &MultiDomainBatch,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    forced: ForcedTimesteps<'_>,
) -> Result<PreparedBatch> {
    scheme.validate()?;
    let (b_count, m) = (batch.len(), batch.domains());
    if b_count == 0 {
        return Err(Error::EmptyBatch);
    }
    let big_t = schedule.steps();
    let mut tvecs = Vec::with_capacity(b_count);
    let mut codes = scheme.uses_condition_code().then(|| Vec::with_capacity(b_count));
    // per (sample, domain): condition slot kept clean
    let mut is_cond = vec![vec![false; m]; b_count];
    for b in 0..b_count {
        let mask = &batch.sup_mask[b];
        let tvec = match scheme.kind {
            SchemeKind::Mdd => {
                let t_sup = match forced_row(forced, b, b_count, m)? {
                    Some(row) => row.to_vec(),
                    None => (0..m).map(|_| rng.random_range(1..=big_t)).collect(),
                };
                build_tvector(mask, &TimestepVector::new(t_sup, big_t)?, big_t)?
            }
            SchemeKind::NoisyCond => {
                let t = match forced_row(forced, b, b_count, 1)? {
                    Some(row) => row[0],
                    None => rng.random_range(1..=big_t),
                };
                build_tvector(mask, &TimestepVector::uniform(m, t), big_t)?
            }
            SchemeKind::UmmCsgm => {
                let avail: Vec<usize> = (0..m).filter(|&d| mask[d]).collect();
                if avail.len() >= 2 {
                    // uniform over the 2^k - 2 nonempty proper subsets
                    let pick = rng.random_range(1..(1u64 << avail.len()) - 1);
                    for (bit, &d) in avail.iter().enumerate() {
                        is_cond[b][d] = pick >> bit & 1 == 1;
                    }
                }
                let t = match forced_row(forced, b, b_count, 1)? {
                    Some(row) => row[0],
                    None => rng.random_range(1..=big_t),
                };
                let entries = (0..m)
                    .map(|d| match (mask[d], is_cond[b][d]) {
                        (false, _) => big_t,
                        (true, true) => 0,
                        (true, false) => t,
                    })
                    .collect();
                TimestepVector::new(entries, big_t)?
            }
        };
        if let Some(c) = codes.as_mut() {
            c.push(is_cond[b].clone());
        }
        tvecs.push(tvec);
    }

    let shape = batch.x0[0].shape().to_vec();
    let eps = draw_eps(rng, &shape, m);
    let view = batch.x0[0].row_len();
    let mut x_t = Vec::with_capacity(m);
    for d in 0..m {
        let mut data = vec![0f32; b_count * view];
        for b in 0..b_count {
            let out = &mut data[b * view..(b + 1) * view];
            let e = eps[d].row(b);
            if batch.sup_mask[b][d] {
                let (sa, sb) = schedule.coefficients(tvecs[b].get(d))?;
                for ((o, &x), &n) in out.iter_mut().zip(batch.x0[d].row(b)).zip(e) {
                    *o = (sa * x as f64 + sb * n as f64) as f32;
                }
            } else {
                match scheme.fill {
                    Fill::PureNoise => out.copy_from_slice(e),
                    Fill::MinusOne => out.fill(-1.0),
                }
            }
        }
        x_t.push(Tensor::from_vec(&shape, data)?);
    }

    let loss_mask = (0..b_count)
        .map(|b| {
            (0..m)
                .map(|d| {
                    let avail = batch.sup_mask[b][d];
                    let target = avail && !is_cond[b][d];
                    match scheme.loss_scope {
                        LossScope::SupervisedOnly => target,
                        LossScope::AllDomains => target || !avail,
                    }
                })
                .collect()
        })
        .collect();
    Ok(PreparedBatch {
        x_t,
        eps,
        tvecs,
        codes,
        loss_mask,
    })
}

/// Loss and parameter gradients for one prepared batch; the caller applies
/// the update.
pub fn training_step(
    scheme: &TrainingScheme,
    batch: &MultiDomainBatch,
    model: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let p = prepare_batch(scheme, batch, schedule, rng, None)?;
    model.loss_and_gradients(&p.x_t, &p.tvecs, p.codes.as_deref(), &p.eps, &p.loss_mask)
}

pub fn mdd_training_step(
    batch: &MultiDomainBatch,
    model: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    training_step(&TrainingScheme::mdd(), batch, model, schedule, rng)
}

pub fn ummcsgm_training_step(
    fill: Fill,
    batch: &MultiDomainBatch,
    model: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    training_step(&TrainingScheme::ummcsgm(fill), batch, model, schedule, rng)
}

pub fn noisycond_training_step(
    fill: Fill,
    batch: &MultiDomainBatch,
    model: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    training_step(&TrainingScheme::noisycond(fill), batch, model, schedule, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub scheme: TrainingScheme,
    /// Stop after this many optimizer steps; `None` runs `epochs` full passes.
    pub max_steps: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub patience: usize,
    pub factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: TrainingScheme::mdd(),
            max_steps: None,
            epochs: 100,
            batch_size: 32,
            adam: AdamConfig::default(),
            patience: 10,
            factor: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.max_steps == Some(0) || (self.max_steps.is_none() && self.epochs == 0) {
            return Err(Error::invalid("training needs at least one step"));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::invalid(format!("plateau factor must be in (0, 1), got {}", self.factor)));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = self.scheme.to_kv();
        match self.max_steps {
            Some(s) => kv.set("train.steps", s),
            None => kv.set("train.epochs", self.epochs),
        }
        kv.set("train.batch", self.batch_size);
        kv.set("train.lr", fmt_f64(self.adam.lr));
        kv.set("train.patience", self.patience);
        kv.set("train.factor", fmt_f64(self.factor));
        kv.set("train.seed", self.seed);
        kv
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Denoiser<f32>,
    pub best: Denoiser<f32>,
    pub best_val_loss: f64,
    pub steps: usize,
    pub curve: Vec<LossRecord>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> Option<f64> {
        self.curve.iter().find(|r| r.split == Split::Train).map(|r| r.loss)
    }

    /// Mean of the last `window` training losses.
    pub fn final_loss(&self, window: usize) -> Option<f64> {
        let train: Vec<f64> = self.curve.iter().filter(|r| r.split == Split::Train).map(|r| r.loss).collect();
        let tail = &train[train.len().saturating_sub(window.max(1))..];
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Columns `step,epoch,scheme,split,loss,lr`.
pub fn write_loss_csv(w: &mut impl Write, scheme: &TrainingScheme, curve: &[LossRecord]) -> Result<()> {
    writeln!(w, "step,epoch,scheme,split,loss,lr")?;
    for r in curve {
        let split = match r.split {
            Split::Train => "train",
            Split::Validation => "val",
        };
        writeln!(w, "{},{},{scheme},{split},{:?},{:?}", r.step, r.epoch, r.loss, r.lr)?;
    }
    Ok(())
}

pub fn save_loss_csv(path: impl AsRef<Path>, scheme: &TrainingScheme, curve: &[LossRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_loss_csv(&mut buf, scheme, curve)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn batches_of<'a>(dataset: &'a Dataset, idx: &[usize], size: usize) -> Vec<Result<MultiDomainBatch>> {
    idx.chunks(size)
        .map(|c| {
            let pts: Vec<&'a DataPoint> = c.iter().map(|&i| &dataset.points[i]).collect();
            MultiDomainBatch::from_points(&pts, dataset.shape())
        })
        .collect()
}

/// Mean loss over `indices` with a fixed noise stream, so epochs compare.
pub fn evaluate_loss(
    scheme: &TrainingScheme,
    model: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut total, mut weight) = (0.0, 0.0);
    for batch in batches_of(dataset, indices, batch_size) {
        let batch = batch?;
        let p = prepare_batch(scheme, &batch, schedule, &mut rng, None)?;
        let selected = p.loss_mask.iter().flatten().filter(|&&b| b).count() as f64;
        if selected == 0.0 {
            continue;
        }
        let pred = model.forward(&p.x_t, &p.tvecs, p.codes.as_deref())?;
        let mut sum = 0.0;
        for (d, out) in pred.iter().enumerate() {
            for (b, mask) in p.loss_mask.iter().enumerate() {
                if mask[d] {
                    sum += out.row(b).iter().zip(p.eps[d].row(b)).map(|(&a, &e)| (a as f64 - e as f64).powi(2)).sum::<f64>();
                }
            }
        }
        total += sum;
        weight += selected * batch.x0[0].row_len() as f64;
    }
    if weight == 0.0 {
        return Err(Error::EmptyObjective);
    }
    Ok(total / weight)
}

/// Epoch loop with shuffled batches, per-epoch validation loss driving the
/// plateau scheduler, and tracking of the best model. Points are held out
/// for validation by [`crate::dataset::is_validation`]; with no held-out
/// point the epoch's mean training loss stands in.
pub fn train(config: &TrainConfig, schedule: &NoiseSchedule, dataset: &Dataset, model: Denoiser<f32>) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if config.scheme.uses_condition_code() != model.config().condition_code {
        return Err(Error::invalid(format!(
            "scheme {} {} a condition-code input channel",
            config.scheme,
            if config.scheme.uses_condition_code() { "requires" } else { "does not use" }
        )));
    }
    let (mut train_idx, val_idx) = dataset.train_val_indices();
    if train_idx.is_empty() {
        train_idx = val_idx.clone();
    }
    let mut state = OptimizerState::new(&model, config.adam.clone(), PlateauScheduler::new(config.patience, config.factor))?;
    let mut model = model;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6E6F_6973_6500_0001);
    let val_seed = config.seed ^ 0x7661_6C00_0000_0002;

    let mut curve = Vec::new();
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut step = 0usize;
    let scheme_name = config.scheme.to_string();
    for epoch in 0.. {
        if config.max_steps.is_none() && epoch >= config.epochs {
            break;
        }
        train_idx.shuffle(&mut shuffle_rng);
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0usize;
        for batch in batches_of(dataset, &train_idx, config.batch_size) {
            if config.max_steps.is_some_and(|s| step >= s) {
                break;
            }
            let batch = batch?;
            let lr = state.lr();
            let result = training_step(&config.scheme, &batch, &model, schedule, &mut noise_rng);
            let (loss, grads) = match result {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::NonFiniteLoss {
                        step,
                        lr,
                        scheme: scheme_name,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    lr,
                    scheme: scheme_name,
                });
            }
            optimizer_step(&mut model, &grads, &mut state).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss {
                    step,
                    lr,
                    scheme: scheme_name.clone(),
                },
                other => other,
            })?;
            curve.push(LossRecord {
                step,
                epoch,
                split: Split::Train,
                loss,
                lr,
            });
            epoch_sum += loss;
            epoch_batches += 1;
            step += 1;
        }
        if epoch_batches == 0 {
            break;
        }
        let val = if val_idx.is_empty() {
            epoch_sum / epoch_batches as f64
        } else {
            evaluate_loss(&config.scheme, &model, schedule, dataset, &val_idx, config.batch_size, val_seed)?
        };
        curve.push(LossRecord {
            step,
            epoch,
            split: Split::Validation,
            loss: val,
            lr: state.lr(),
        });
        if val < best_val {
            best_val = val;
            best = model.clone();
        }
        state.end_epoch(val);
        if config.max_steps.is_some_and(|s| step >= s) {
            break;
        }
    }
    Ok(TrainOutcome {
        last: model,
        best,
        best_val_loss: best_val,
        steps: step,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheme_names_and_validation() {
        assert_eq!(TrainingScheme::mdd().to_string(), "mdd");
        assert_eq!(TrainingScheme::ummcsgm(Fill::MinusOne).to_string(), "ummcsgm-o");
        assert_eq!(TrainingScheme::noisycond(Fill::PureNoise).to_string(), "noisycond-n");
        let s = TrainingScheme::from_names("ummcsgm", Some("minus_one"), None).unwrap();
        assert_eq!(s, TrainingScheme::ummcsgm(Fill::MinusOne));
        assert!(TrainingScheme::from_names("mdd", Some("minus_one"), None).is_err());
        assert!(TrainingScheme::from_names("noisycond", Some("minus_one"), Some("all_domains")).is_err());
        assert!(TrainingScheme::from_names("gan", None, None).is_err());
    }

    #[test]
    fn batch_rejects_samples_without_views() {
        let x = vec![Tensor::<f32>::zeros(&[1, 2]); 2];
        assert!(MultiDomainBatch::new(x.clone(), vec![vec![false, false]]).is_err());
        assert!(MultiDomainBatch::new(x, vec![vec![true, false]]).is_ok());
        assert!(matches!(MultiDomainBatch::new(vec![], vec![]), Err(Error::EmptyBatch)));
    }
}
