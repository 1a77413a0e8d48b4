//! Pieces shared by the subcommands: typed views of the resolved keys,
//! checkpoint persistence and training runs.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mdd_core::dataset::{split_counts, DatasetSpec, PairPolicy, ViewMode, DOMAINS};
use mdd_core::eval::sha256_hex;
use mdd_core::kv::fmt_f64;
use mdd_core::trainer::save_loss_csv;
use mdd_core::{
    AdamConfig, Checkpoint, DataShape, Dataset, Denoiser, DenoiserConfig, KvMap, NoiseSchedule, TrainConfig,
    TrainingScheme,
};

use crate::config::{as_config, config_error, Resolved};

pub fn view_mode(mode: &str, size: usize) -> Result<ViewMode> {
    match mode {
        "vector" => Ok(ViewMode::Vector),
        "image" if size >= 16 => Ok(ViewMode::Image { size }),
        "image" => Err(config_error(format!("image size must be at least 16, got {size}"))),
        other => Err(config_error(format!("unknown mode `{other}` (image|vector)"))),
    }
}

pub fn mode_of_shape(shape: DataShape) -> ViewMode {
    match shape {
        DataShape::Vector { .. } => ViewMode::Vector,
        DataShape::Image { size, .. } => ViewMode::Image { size },
    }
}

/// Dataset keys: `n`, `mode`, `size`, `sup`, `pairs`, `seed`.
pub fn dataset_spec(r: &Resolved, n_key: &str) -> Result<DatasetSpec> {
    as_config(|| {
        let spec = DatasetSpec {
            n_points: r.get(n_key)?,
            mode: view_mode(r.str("mode"), r.get("size")?)?,
            sup_fraction: r.get("sup")?,
            pair_policy: PairPolicy::from_name(r.str("pairs"))?,
            seed: r.get("seed")?,
        };
        split_counts(spec.n_points, spec.sup_fraction, spec.pair_policy)?;
        Ok(spec)
    })
}

pub fn schedule(r: &Resolved) -> Result<NoiseSchedule> {
    as_config(|| Ok(NoiseSchedule::linear(r.get("T")?, r.get("beta_start")?, r.get("beta_end")?)?))
}

/// Fills unset architecture keys with the defaults of `mode` and builds the
/// model configuration.
pub fn model_config(r: &mut Resolved, mode: ViewMode, scheme: &TrainingScheme, init_seed: u64) -> Result<DenoiserConfig> {
    let base = match mode {
        ViewMode::Vector => DenoiserConfig::vector(DOMAINS, mode.view_len()),
        ViewMode::Image { size } => DenoiserConfig::image(DOMAINS, 3, size),
    };
    let mult: Vec<String> = base.channel_mult.iter().map(usize::to_string).collect();
    r.default_to("width", base.width);
    r.default_to("channel_mult", mult.join(","));
    r.default_to("res_blocks", base.res_blocks);
    r.default_to("groups", base.groups);
    r.default_to("time_dim", base.time_dim);
    // Vector attention tokens default to the width so any width is valid.
    let chunk = match mode {
        ViewMode::Vector => r.str("width").to_string(),
        ViewMode::Image { .. } => "0".into(),
    };
    r.default_to("attention_chunk", chunk);
    as_config(|| {
        let cfg = DenoiserConfig {
            width: r.get("width")?,
            channel_mult: r.list("channel_mult")?,
            res_blocks: r.get("res_blocks")?,
            groups: r.get("groups")?,
            time_dim: r.get("time_dim")?,
            attention_chunk: r.get("attention_chunk")?,
            condition_code: scheme.uses_condition_code(),
            init_seed,
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    })
}

/// `steps_key` names the optimizer-step budget (0 means train by epochs).
pub fn train_config(r: &Resolved, scheme: TrainingScheme, seed: u64, steps_key: &str) -> Result<TrainConfig> {
    as_config(|| {
        let steps: usize = r.get(steps_key)?;
        let cfg = TrainConfig {
            scheme,
            max_steps: (steps > 0).then_some(steps),
            epochs: r.get("epochs")?,
            batch_size: r.get("batch")?,
            adam: AdamConfig {
                lr: r.get("lr")?,
                ..AdamConfig::default()
            },
            patience: r.get("patience")?,
            factor: r.get("factor")?,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    })
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub struct LoadedModel {
    pub model: Denoiser<f32>,
    pub schedule: NoiseSchedule,
    pub sha256: String,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedModel> {
    let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let ck = Checkpoint::from_bytes(&bytes).with_context(|| format!("parsing checkpoint {}", path.display()))?;
    let schedule = NoiseSchedule::from_kv(&ck.metadata).context("checkpoint schedule")?;
    Ok(LoadedModel {
        model: ck.to_model()?,
        schedule,
        sha256: sha256_hex(&bytes),
    })
}

pub struct TrainedRun {
    pub best: PathBuf,
    pub last: PathBuf,
    pub best_sha256: String,
    pub best_model: Denoiser<f32>,
}

/// Trains on `data` and writes `best.mddc`, `last.mddc` and `loss.csv`
/// into `out`. `provenance` is stored in both checkpoints.
pub fn train_and_save(
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    data: &Dataset,
    model: Denoiser<f32>,
    provenance: &KvMap,
    out: &Path,
) -> Result<TrainedRun> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let outcome = mdd_core::train(config, schedule, data, model)?;
    let mut meta = schedule.to_kv();
    meta.extend(&config.to_kv());
    meta.extend(provenance);
    meta.set("train.steps_done", outcome.steps);
    meta.set("train.best_val_loss", fmt_f64(outcome.best_val_loss));
    let save = |model: &Denoiser<f32>, kind: &str| -> Result<PathBuf> {
        let mut m = meta.clone();
        m.set("checkpoint.kind", kind);
        let path = out.join(format!("{kind}.mddc"));
        Checkpoint::from_model(model, &m).save(&path)?;
        Ok(path)
    };
    let best = save(&outcome.best, "best")?;
    let last = save(&outcome.last, "last")?;
    save_loss_csv(out.join("loss.csv"), &config.scheme, &outcome.curve)?;
    eprintln!(
        "trained {} for {} steps: loss {:.4} -> {:.4}, best validation {:.4}",
        config.scheme,
        outcome.steps,
        outcome.initial_loss().unwrap_or(f64::NAN),
        outcome.final_loss(50).unwrap_or(f64::NAN),
        outcome.best_val_loss
    );
    Ok(TrainedRun {
        best_sha256: file_sha256(&best)?,
        best,
        last,
        best_model: outcome.best,
    })
}
