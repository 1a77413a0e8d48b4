use anyhow::{Context, Result};
use clap::Args;
use mdd_core::{Dataset, Denoiser, KvMap, TrainingScheme};

use super::{flag, resolve_out};
use crate::config::{as_config, Resolved, Schema};
use crate::runs::{file_sha256, model_config, schedule, train_and_save, train_config};
use crate::Common;

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset file written by `mdd dataset`.
    #[arg(long)]
    data: Option<String>,
    /// `mdd`, `ummcsgm` or `noisycond`.
    #[arg(long)]
    scheme: Option<String>,
    /// Placeholder for missing views: `pure_noise` or `minus_one`.
    #[arg(long)]
    fill: Option<String>,
    /// `all_domains` or `supervised_only`.
    #[arg(long)]
    loss_scope: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Optimizer steps; 0 trains for `epochs` full passes.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

pub const SCHEMA: Schema = &[
    ("data", ""),
    ("scheme", "mdd"),
    ("fill", ""),
    ("loss_scope", ""),
    ("epochs", "100"),
    ("steps", "0"),
    ("batch", "32"),
    ("lr", "2e-5"),
    ("patience", "10"),
    ("factor", "0.5"),
    ("T", "1000"),
    ("beta_start", "0.0001"),
    ("beta_end", "0.02"),
    ("width", ""),
    ("channel_mult", ""),
    ("res_blocks", ""),
    ("groups", ""),
    ("time_dim", ""),
    ("attention_chunk", ""),
    ("init_seed", ""),
    ("seed", "0"),
    ("out", ""),
];

/// Scheme from `scheme`, `fill` and `loss_scope`, writing the effective
/// fill and scope back into the resolved keys.
pub fn scheme(r: &mut Resolved) -> Result<TrainingScheme> {
    let s = as_config(|| {
        let opt = |k: &str| (!r.is_unset(k)).then(|| r.str(k));
        Ok(TrainingScheme::from_names(r.str("scheme"), opt("fill"), opt("loss_scope"))?)
    })?;
    r.set("fill", s.fill_name());
    r.set("loss_scope", s.loss_scope_name());
    Ok(s)
}

pub fn run(a: TrainArgs) -> Result<()> {
    let mut r = Resolved::build(
        SCHEMA,
        a.common.config.as_deref(),
        &[
            ("data", a.data.clone()),
            ("scheme", a.scheme.clone()),
            ("fill", a.fill.clone()),
            ("loss_scope", a.loss_scope.clone()),
            ("epochs", flag(&a.epochs)),
            ("steps", flag(&a.steps)),
            ("batch", flag(&a.batch)),
            ("lr", flag(&a.lr)),
            ("seed", flag(&a.seed)),
            ("out", a.common.out.as_ref().map(|p| p.display().to_string())),
        ],
        &a.common.sets,
    )?;
    let data_path = r.path("data")?;
    let scheme = scheme(&mut r)?;
    let sched = schedule(&r)?;
    let seed: u64 = r.get("seed")?;
    r.default_to("init_seed", seed);
    let init_seed: u64 = r.get("init_seed")?;
    let train_cfg = train_config(&r, scheme, seed, "steps")?;
    let out = resolve_out(&mut r, "train");

    let data = Dataset::load(&data_path).with_context(|| format!("loading dataset {}", data_path.display()))?;
    let model_cfg = model_config(&mut r, data.spec.mode, &scheme, init_seed)?;
    let model = Denoiser::new(model_cfg)?;
    eprintln!("model: {} parameters", model.param_count());

    let mut provenance = KvMap::new();
    provenance.set("data.path", data_path.display());
    provenance.set("data.sha256", file_sha256(&data_path)?);
    for (k, v) in data.manifest_header().iter() {
        provenance.set(format!("data.{k}"), v);
    }
    std::fs::create_dir_all(&out)?;
    r.write(&out.join("config.txt"))?;
    let run = train_and_save(&train_cfg, &sched, &data, model, &provenance, &out)?;
    eprintln!(
        "wrote {} and {} (best sha256 {})",
        run.best.display(),
        run.last.display(),
        run.best_sha256
    );
    Ok(())
}
