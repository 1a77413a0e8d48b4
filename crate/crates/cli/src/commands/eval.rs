use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use mdd_core::dataset::{
    random_pair_mae_floor, PairPolicy, ViewMode, IMAGE32_RANDOM_PAIR_MAE_FLOOR, VECTOR_RANDOM_PAIR_MAE_FLOOR,
};
use mdd_core::eval::report::{error_tile, image_grid, phi_sweep_svg, ppm_bytes, write_results_csv, write_summary_csv};
use mdd_core::eval::{run_bridge, run_phi_sweep, run_supervision_sweep, BridgeOutput, CellKey, ProtocolConfig, TrainedCell};
use mdd_core::kv::fmt_f64;
use mdd_core::{generate_dataset, Denoiser, EvalSettings, ExperimentResult, KvMap, SamplerKind, TrainingScheme};

use super::{flag, resolve_out};
use crate::config::{as_config, config_error, Resolved, Schema};
use crate::runs::{dataset_spec, load_checkpoint, mode_of_shape, model_config, schedule, train_and_save, train_config, view_mode};
use crate::Common;

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// `supervision`, `bridge` or `phi`.
    #[arg(long)]
    protocol: Option<String>,
    /// `vector` or `image`.
    #[arg(long)]
    mode: Option<String>,
    /// Comma-separated scheme labels, e.g. `mdd,ummcsgm-n,noisycond-o`.
    #[arg(long)]
    schemes: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Checkpoint tree, one `<scheme>/n<N>/<policy>/seed<s>/best.mddc` per cell.
    #[arg(long)]
    ck_root: Option<String>,
}

pub const SCHEMA: Schema = &[
    ("protocol", "supervision"),
    ("mode", "vector"),
    ("size", "32"),
    ("schemes", "mdd,ummcsgm-n,ummcsgm-o,noisycond-n,noisycond-o"),
    ("n_grid", "1.0,0.7,0.4,0.3"),
    ("seeds", "0,1,2"),
    ("test_points", "200"),
    ("test_seed", "1234"),
    ("sampler", "ddim"),
    ("ddim_steps", "100"),
    ("gen_seed", "0"),
    ("eval_batch", "64"),
    ("phi_c_grid", "0.0,0.1,0.2,0.4,0.6,0.8,1.0"),
    ("bridge_n_sup", "0.0"),
    ("bridge_policy", "bridge"),
    ("snapshots", "10"),
    ("snapshot_samples", "4"),
    ("ck_root", ""),
    // Training of missing cells (sweep only).
    ("n_points", "4000"),
    ("epochs", "100"),
    ("train_steps", "0"),
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
    ("out", ""),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Protocol {
    Supervision,
    Bridge,
    Phi,
}

fn protocol(name: &str) -> Result<Protocol> {
    match name {
        "supervision" => Ok(Protocol::Supervision),
        "bridge" => Ok(Protocol::Bridge),
        "phi" => Ok(Protocol::Phi),
        other => Err(config_error(format!("unknown protocol `{other}` (supervision|bridge|phi)"))),
    }
}

fn protocol_config(r: &Resolved) -> Result<ProtocolConfig> {
    as_config(|| {
        let schemes = r
            .str("schemes")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<TrainingScheme>())
            .collect::<mdd_core::Result<Vec<_>>>()?;
        let n_grid: Vec<f64> = r.list("n_grid")?;
        let c_grid: Vec<f64> = r.list("phi_c_grid")?;
        if let Some(bad) = n_grid.iter().chain(&c_grid).find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(config_error(format!("grid value {bad} outside [0, 1]")));
        }
        Ok(ProtocolConfig {
            mode: view_mode(r.str("mode"), r.get("size")?)?,
            schemes,
            n_grid,
            seeds: r.list("seeds")?,
            test_points: r.get("test_points")?,
            test_seed: r.get("test_seed")?,
            eval: EvalSettings {
                sampler: SamplerKind::from_name(r.str("sampler"))?,
                ddim_steps: r.get("ddim_steps")?,
                seed: r.get("gen_seed")?,
                batch_size: r.get("eval_batch")?,
            },
            phi_c_grid: c_grid,
            bridge_n_sup: r.get("bridge_n_sup")?,
            bridge_policy: PairPolicy::from_name(r.str("bridge_policy"))?,
            snapshot_count: r.get("snapshots")?,
            snapshot_samples: r.get("snapshot_samples")?,
        })
    })
}

pub fn cell_dir(root: &Path, key: &CellKey) -> PathBuf {
    root.join(key.scheme.to_string())
        .join(format!("n{}", fmt_f64(key.n_sup)))
        .join(key.pair_policy.name())
        .join(format!("seed{}", key.seed))
}

/// Supplies trained cells from the checkpoint tree, training the missing
/// ones when `train_missing` is set.
struct Cells {
    root: PathBuf,
    mode: ViewMode,
    train_missing: bool,
    r: Resolved,
}

impl Cells {
    fn get(&self, key: &CellKey) -> mdd_core::Result<Option<TrainedCell>> {
        self.fetch(key).map_err(|e| mdd_core::Error::InvalidArgument(format!("{e:#}")))
    }

    fn fetch(&self, key: &CellKey) -> Result<Option<TrainedCell>> {
        let dir = cell_dir(&self.root, key);
        let path = dir.join("best.mddc");
        if path.exists() {
            let loaded = load_checkpoint(&path)?;
            let mode = mode_of_shape(loaded.model.config().shape);
            if mode != self.mode {
                anyhow::bail!("{} holds a {mode:?} model, protocol expects {:?}", path.display(), self.mode);
            }
            return Ok(Some(TrainedCell {
                model: loaded.model,
                schedule: loaded.schedule,
                checkpoint_hash: loaded.sha256,
            }));
        }
        if !self.train_missing {
            return Ok(None);
        }
        let mut r = self.r.clone();
        r.set("sup", fmt_f64(key.n_sup));
        r.set("pairs", key.pair_policy.name());
        r.set("seed", key.seed);
        let spec = dataset_spec(&r, "n_points")?;
        let data = generate_dataset(&spec)?;
        let sched = schedule(&r)?;
        let model = Denoiser::new(model_config(&mut r, self.mode, &key.scheme, key.seed)?)?;
        let cfg = train_config(&r, key.scheme, key.seed, "train_steps")?;
        eprintln!("training cell {} ({} parameters)", key.label(), model.param_count());
        let mut provenance = KvMap::new();
        provenance.set("cell", key.label());
        for (k, v) in data.manifest_header().iter() {
            provenance.set(format!("data.{k}"), v);
        }
        let run = train_and_save(&cfg, &sched, &data, model, &provenance, &dir)?;
        let mut cell_cfg = cfg.to_kv();
        cell_cfg.extend(&sched.to_kv());
        cell_cfg.extend(&data.manifest_header());
        std::fs::write(dir.join("config.txt"), cell_cfg.to_text())?;
        Ok(Some(TrainedCell {
            model: run.best_model,
            schedule: sched,
            checkpoint_hash: run.best_sha256,
        }))
    }
}

fn floor(mode: ViewMode) -> Result<f64> {
    Ok(match mode {
        ViewMode::Vector => VECTOR_RANDOM_PAIR_MAE_FLOOR,
        ViewMode::Image { size: 32 } => IMAGE32_RANDOM_PAIR_MAE_FLOOR,
        other => random_pair_mae_floor(other, 1000, 0)?,
    })
}

fn write_tables(out: &Path, result: &ExperimentResult) -> Result<()> {
    write_results_csv(&mut std::fs::File::create(out.join("results.csv"))?, result)?;
    write_summary_csv(&mut std::fs::File::create(out.join("summary.csv"))?, &result.summary())?;
    let mut missing = result.missing.join("\n");
    if !missing.is_empty() {
        missing.push('\n');
        eprintln!("{} cell(s) missing, see missing.txt", result.missing.len());
    }
    std::fs::write(out.join("missing.txt"), missing)?;
    Ok(())
}

fn write_bridge(out: &Path, mode: ViewMode, b: &BridgeOutput) -> Result<()> {
    let mut csv = std::fs::File::create(out.join("bridge_steps.csv"))?;
    writeln!(csv, "seed,step,t,target,mae")?;
    for (seed, snaps) in &b.snapshots {
        for s in snaps {
            for (d, m) in s.mae.iter().enumerate() {
                if let Some(m) = m {
                    writeln!(csv, "{seed},{},{},{},{m:?}", s.step, s.t, mdd_core::Domain::ALL[d].letter())?;
                }
            }
        }
        let ViewMode::Image { size } = mode else { continue };
        // Row per snapshot: for each sample, B and C estimates then their
        // error maps; the last row holds the ground truth.
        let k = b.truth[0].rows();
        let mut owned: Vec<Option<Vec<f32>>> = Vec::new();
        for s in snaps {
            for i in 0..k {
                for d in [1, 2] {
                    owned.push(Some(s.estimates[d].row(i).to_vec()));
                }
                for d in [1, 2] {
                    owned.push(Some(error_tile(s.l1[d].row(i), size)));
                }
            }
        }
        for i in 0..k {
            for d in [1, 2] {
                owned.push(Some(b.truth[d].row(i).to_vec()));
            }
            owned.extend([None, None]);
        }
        let tiles: Vec<Option<&[f32]>> = owned.iter().map(|t| t.as_deref()).collect();
        let (w, h, rgb) = image_grid(&tiles, size, 4 * k)?;
        std::fs::write(out.join(format!("bridge_seed{seed}.ppm")), ppm_bytes(w, h, &rgb)?)?;
    }
    Ok(())
}

pub fn run(a: EvalArgs, train_missing: bool) -> Result<()> {
    let mut r = Resolved::build(
        SCHEMA,
        a.common.config.as_deref(),
        &[
            ("protocol", a.protocol.clone()),
            ("mode", a.mode.clone()),
            ("schemes", a.schemes.clone()),
            ("seeds", flag(&a.seeds)),
            ("ck_root", a.ck_root.clone()),
            ("out", a.common.out.as_ref().map(|p| p.display().to_string())),
        ],
        &a.common.sets,
    )?;
    let proto = protocol(r.str("protocol"))?;
    let config = protocol_config(&r)?;
    r.default_to("ck_root", crate::config::out_root().join("cells").display());
    let root = r.path("ck_root")?;
    if train_missing {
        // Fail on bad training keys before any work starts.
        schedule(&r)?;
        model_config(&mut r, config.mode, &TrainingScheme::mdd(), 0)?;
        train_config(&r, TrainingScheme::mdd(), 0, "train_steps")?;
    }
    let verb = if train_missing { "sweep" } else { "eval" };
    let default_out = format!("{verb}-{}", r.str("protocol"));
    let out = resolve_out(&mut r, &default_out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    r.write(&out.join("config.txt"))?;
    std::fs::write(out.join("protocol.txt"), config.to_kv().to_text())?;

    let cells = Cells {
        root,
        mode: config.mode,
        train_missing,
        r: r.clone(),
    };
    let provider = |key: &CellKey| cells.get(key);
    let result = match proto {
        Protocol::Supervision => run_supervision_sweep(&config, provider)?,
        Protocol::Phi => {
            let result = run_phi_sweep(&config, provider)?;
            std::fs::write(out.join("phi_sweep.svg"), phi_sweep_svg(&result.summary(), Some(floor(config.mode)?)))?;
            result
        }
        Protocol::Bridge => {
            let b = run_bridge(&config, provider)?;
            write_bridge(&out, config.mode, &b)?;
            b.result
        }
    };
    write_tables(&out, &result)?;
    for row in result.summary() {
        eprintln!(
            "{:<12} N={:<4} {:>15}({}) {}->{}: {:.4} +- {:.4} ({} seeds)",
            row.scheme, row.n_sup, row.phi_family, row.c, row.source, row.target, row.mean, row.sd, row.seeds
        );
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}
