use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use mdd_core::eval::sha256_hex;
use mdd_core::generate_dataset;

use super::{flag, resolve_out};
use crate::config::{Resolved, Schema};
use crate::runs::dataset_spec;
use crate::Common;

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[command(flatten)]
    common: Common,
    /// Number of points.
    #[arg(long)]
    n: Option<usize>,
    /// `image` or `vector`.
    #[arg(long)]
    mode: Option<String>,
    /// Image side length in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Fully supervised fraction N in [0, 1].
    #[arg(long)]
    sup: Option<f64>,
    /// Pair policy for the rest: `equal` or `bridge`.
    #[arg(long)]
    pairs: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

pub const SCHEMA: Schema = &[
    ("n", "4000"),
    ("mode", "image"),
    ("size", "32"),
    ("sup", "1.0"),
    ("pairs", "equal"),
    ("seed", "0"),
    ("out", ""),
];

pub fn run(a: DatasetArgs) -> Result<()> {
    let mut r = Resolved::build(
        SCHEMA,
        a.common.config.as_deref(),
        &[
            ("n", flag(&a.n)),
            ("mode", a.mode.clone()),
            ("size", flag(&a.size)),
            ("sup", flag(&a.sup)),
            ("pairs", a.pairs.clone()),
            ("seed", flag(&a.seed)),
            ("out", a.common.out.as_ref().map(|p| p.display().to_string())),
        ],
        &a.common.sets,
    )?;
    let spec = dataset_spec(&r, "n")?;
    let out = resolve_out(&mut r, "dataset.mdds");
    let data = generate_dataset(&spec)?;
    let bytes = data.to_bytes();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(&out, &bytes).with_context(|| format!("writing {}", out.display()))?;
    std::fs::write(sidecar(&out, "manifest"), data.manifest_text())?;
    r.write(&sidecar(&out, "config"))?;
    let c = data.counts;
    eprintln!(
        "wrote {} ({} points: {} full, {} AB, {} BC, {} AC), sha256 {}",
        out.display(),
        data.len(),
        c.full,
        c.pair_ab,
        c.pair_bc,
        c.pair_ac,
        sha256_hex(&bytes)
    );
    Ok(())
}

/// `d.mdds` -> `d.mdds.<ext>`.
fn sidecar(path: &std::path::Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}
