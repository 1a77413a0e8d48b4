use std::io::Write;

use anyhow::{Context, Result};
use clap::Args;
use mdd_core::dataset::{generate_test_points, Domain, ViewMode, DOMAINS};
use mdd_core::eval::report::{image_grid, ppm_bytes, write_vector_csv};
use mdd_core::eval::{stack_views, translation_mae};
use mdd_core::sampler::{generate, Sigma};
use mdd_core::{GenerationRequest, PhiFamily, PhiSchedule, SamplerKind};

use super::{flag, resolve_out};
use crate::config::{as_config, config_error, Resolved, Schema};
use crate::runs::{load_checkpoint, mode_of_shape};
use crate::Common;

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint file.
    #[arg(long)]
    ck: Option<String>,
    /// Condition domains as letters, e.g. `A` or `AB`.
    #[arg(long)]
    cond: Option<String>,
    /// Condition noise family: `vanilla`, `skip`, `constant`, `constant_fading`.
    #[arg(long)]
    phi: Option<String>,
    /// Condition noise fraction in [0, 1].
    #[arg(long)]
    c: Option<f64>,
    /// `ddim` or `ddpm`.
    #[arg(long)]
    sampler: Option<String>,
    /// DDIM steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Number of test points to translate.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

pub const SCHEMA: Schema = &[
    ("ck", ""),
    ("cond", "A"),
    ("phi", "constant"),
    ("c", "0.2"),
    ("sampler", "ddim"),
    ("steps", "100"),
    ("n", "8"),
    ("test_seed", "1234"),
    ("seed", "0"),
    ("clamp", "true"),
    ("literal_update", "false"),
    ("sigma", "posterior"),
    ("out", ""),
];

pub fn cond_mask(letters: &str) -> Result<Vec<bool>> {
    let mut mask = vec![false; DOMAINS];
    for ch in letters.chars() {
        let d = Domain::from_letter(ch).map_err(|_| config_error(format!("unknown domain `{ch}` in `{letters}`")))?;
        mask[d.index()] = true;
    }
    if !mask.iter().any(|&m| m) || mask.iter().all(|&m| m) {
        return Err(config_error(format!(
            "condition set `{letters}` must name at least one and at most {} domains",
            DOMAINS - 1
        )));
    }
    Ok(mask)
}

pub fn run(a: SampleArgs) -> Result<()> {
    let mut r = Resolved::build(
        SCHEMA,
        a.common.config.as_deref(),
        &[
            ("ck", a.ck.clone()),
            ("cond", a.cond.clone()),
            ("phi", a.phi.clone()),
            ("c", flag(&a.c)),
            ("sampler", a.sampler.clone()),
            ("steps", flag(&a.steps)),
            ("n", flag(&a.n)),
            ("seed", flag(&a.seed)),
            ("out", a.common.out.as_ref().map(|p| p.display().to_string())),
        ],
        &a.common.sets,
    )?;
    let ck_path = r.path("ck")?;
    let mask = cond_mask(r.str("cond"))?;
    let (phi, sampler, n, test_seed, seed) = as_config(|| {
        let phi = PhiSchedule::new(PhiFamily::from_name(r.str("phi"))?, r.get("c")?)?;
        let n: usize = r.get("n")?;
        if n == 0 {
            return Err(config_error("`n` must be positive"));
        }
        Ok((phi, SamplerKind::from_name(r.str("sampler"))?, n, r.get::<u64>("test_seed")?, r.get::<u64>("seed")?))
    })?;
    let sigma = match r.str("sigma") {
        "posterior" => Sigma::Posterior,
        "beta" => Sigma::Beta,
        other => return Err(config_error(format!("unknown sigma `{other}` (posterior|beta)"))),
    };
    let out = resolve_out(&mut r, "sample");

    let loaded = load_checkpoint(&ck_path)?;
    let shape = loaded.model.config().shape;
    let mode = mode_of_shape(shape);
    let points = generate_test_points(mode, n, test_seed)?;
    let truth = stack_views(&points, shape)?;
    let mut req = GenerationRequest::new(truth.clone(), mask.clone(), seed);
    req.phi = phi;
    req.sampler = sampler;
    req.ddim_steps = r.get("steps")?;
    req.clamp = r.get("clamp")?;
    req.paper_literal_update = r.get("literal_update")?;
    req.sigma = sigma;
    let gen = generate(&req, &loaded.model, &loaded.schedule, |_| {})?;
    let maes = translation_mae(&gen, &truth, &mask)?;

    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    r.write(&out.join("config.txt"))?;
    let mut meta = req.to_kv();
    meta.set("checkpoint.path", ck_path.display());
    meta.set("checkpoint.sha256", &loaded.sha256);
    meta.set("test.seed", test_seed);
    meta.set("test.points", n);
    std::fs::write(out.join("metadata.txt"), meta.to_text())?;

    let mut csv = std::fs::File::create(out.join("mae.csv"))?;
    writeln!(csv, "target,mae")?;
    for (d, m) in maes.iter().enumerate() {
        if let Some(m) = m {
            let letter = Domain::ALL[d].letter();
            writeln!(csv, "{letter},{m:?}")?;
            eprintln!("{} -> {letter}: MAE {m:.4}", r.str("cond"));
        }
    }
    match mode {
        ViewMode::Vector => {
            write_vector_csv(&mut std::fs::File::create(out.join("generated.csv"))?, &gen)?;
            write_vector_csv(&mut std::fs::File::create(out.join("truth.csv"))?, &truth)?;
        }
        ViewMode::Image { size } => {
            // One row per sample: generated A B C, then ground truth A B C.
            let mut tiles = Vec::with_capacity(n * 2 * DOMAINS);
            for b in 0..n {
                tiles.extend(gen.iter().map(|t| Some(t.row(b))));
                tiles.extend(truth.iter().map(|t| Some(t.row(b))));
            }
            let (w, h, rgb) = image_grid(&tiles, size, 2 * DOMAINS)?;
            std::fs::write(out.join("grid.ppm"), ppm_bytes(w, h, &rgb)?)?;
        }
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}
