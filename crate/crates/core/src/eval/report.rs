//! Result tables, portable pixmaps and a small SVG plot of the phi sweep.

use std::fmt::Write as _;
use std::io::Write;

use super::{ExperimentResult, SummaryRow};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RESULTS_HEADER: &str =
    "protocol,scheme,n_sup,phi_family,c,sampler,seed,source,target,mae,runtime_s,config_hash,checkpoint_hash";

pub fn write_results_csv(w: &mut impl Write, result: &ExperimentResult) -> Result<()> {
    writeln!(w, "{RESULTS_HEADER}")?;
    for r in &result.rows {
        writeln!(
            w,
            "{},{},{:?},{},{:?},{},{},{},{},{:?},{:.3},{},{}",
            r.protocol,
            r.scheme,
            r.n_sup,
            r.phi_family,
            r.c,
            r.sampler,
            r.seed,
            r.source,
            r.target,
            r.mae,
            r.runtime_s,
            r.config_hash,
            r.checkpoint_hash
        )?;
    }
    Ok(())
}

pub fn write_summary_csv(w: &mut impl Write, rows: &[SummaryRow]) -> Result<()> {
    writeln!(w, "scheme,n_sup,phi_family,c,source,target,mae_mean,mae_sd,seeds")?;
    for r in rows {
        writeln!(
            w,
            "{},{:?},{},{:?},{},{},{:?},{:?},{}",
            r.scheme, r.n_sup, r.phi_family, r.c, r.source, r.target, r.mean, r.sd, r.seeds
        )?;
    }
    Ok(())
}

/// One row per sample and domain: `sample,domain,f0,f1,...`.
pub fn write_vector_csv(w: &mut impl Write, views: &[Tensor<f32>]) -> Result<()> {
    let k = views.first().map_or(0, |t| t.row_len());
    let cols: Vec<String> = (0..k).map(|i| format!("f{i}")).collect();
    writeln!(w, "sample,domain,{}", cols.join(","))?;
    for (d, t) in views.iter().enumerate() {
        let letter = crate::dataset::Domain::from_index(d).map_or('?', |x| x.letter());
        for b in 0..t.rows() {
            let vals: Vec<String> = t.row(b).iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{b},{letter},{}", vals.join(","))?;
        }
    }
    Ok(())
}

/// Binary `P6` pixmap.
pub fn ppm_bytes(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::LengthMismatch {
            context: "pixmap".into(),
            expected: width * height * 3,
            got: rgb.len(),
        });
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// A `rows x cols` grid of `[3, size, size]` tiles in `[-1, 1]`, separated by
/// one-pixel white lines. Missing tiles stay black.
pub fn image_grid(tiles: &[Option<&[f32]>], size: usize, cols: usize) -> Result<(usize, usize, Vec<u8>)> {
    if cols == 0 {
        return Err(Error::invalid("grid needs at least one column"));
    }
    let rows = tiles.len().div_ceil(cols);
    let (w, h) = (cols * (size + 1) + 1, rows * (size + 1) + 1);
    let mut rgb = vec![255u8; w * h * 3];
    for (i, tile) in tiles.iter().enumerate() {
        let (r0, c0) = ((i / cols) * (size + 1) + 1, (i % cols) * (size + 1) + 1);
        for y in 0..size {
            for x in 0..size {
                let px = ((r0 + y) * w + c0 + x) * 3;
                for ch in 0..3 {
                    rgb[px + ch] = match tile {
                        Some(t) => {
                            if t.len() != 3 * size * size {
                                return Err(Error::LengthMismatch {
                                    context: "grid tile".into(),
                                    expected: 3 * size * size,
                                    got: t.len(),
                                });
                            }
                            to_byte(t[(ch * size + y) * size + x])
                        }
                        None => 0,
                    };
                }
            }
        }
    }
    Ok((w, h, rgb))
}

/// Grey-scale tile of a per-element `[0, 1]` error map, averaged over
/// channels and expressed in `[-1, 1]`.
pub fn error_tile(l1: &[f32], size: usize) -> Vec<f32> {
    let plane = size * size;
    let mut out = vec![0f32; 3 * plane];
    for i in 0..plane {
        let e = (l1[i] + l1[plane + i] + l1[2 * plane + i]) / 3.0;
        let v = 2.0 * e.clamp(0.0, 1.0) - 1.0;
        out[i] = v;
        out[plane + i] = v;
        out[2 * plane + i] = v;
    }
    out
}

const PALETTE: [&str; 4] = ["#444444", "#1f77b4", "#d62728", "#2ca02c"];

/// Mean MAE versus `c` per phi family; Vanilla as a dashed horizontal line
/// and the random-pair floor, if given, as a dotted one.
pub fn phi_sweep_svg(summary: &[SummaryRow], floor: Option<f64>) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let families = ["skip", "constant", "constant_fading"];
    let mut ys: Vec<f64> = summary.iter().map(|r| r.mean).filter(|v| v.is_finite()).collect();
    ys.extend(floor);
    let y_max = ys.iter().cloned().fold(0.0f64, f64::max).max(1e-6) * 1.1;
    let sx = |c: f64| pad + c * (w - 2.0 * pad);
    let sy = |v: f64| h - pad - v / y_max * (h - 2.0 * pad);
    let mean_over_targets = |family: &str| -> Vec<(f64, f64)> {
        let mut cs: Vec<f64> = summary.iter().filter(|r| r.phi_family == family).map(|r| r.c).collect();
        cs.sort_by(f64::total_cmp);
        cs.dedup();
        cs.into_iter()
            .map(|c| {
                let v: Vec<f64> = summary
                    .iter()
                    .filter(|r| r.phi_family == family && r.c == c)
                    .map(|r| r.mean)
                    .collect();
                (c, v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect()
    };

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#,
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    for i in 0..=5 {
        let c = i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{c:.1}</text>"#, sx(c), h - pad + 16.0);
        let v = y_max * i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, pad - 4.0, sy(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">condition noise fraction c</text>"#, w / 2.0, h - 8.0);
    let _ = writeln!(s, r#"<text x="12" y="{:.1}" transform="rotate(-90 12 {:.1})" text-anchor="middle">MAE</text>"#, h / 2.0, h / 2.0);

    if let Some(&(_, v)) = mean_over_targets("vanilla").first() {
        let _ = writeln!(
            s,
            r#"<line x1="{pad}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="{}" stroke-dasharray="6 4"/>"#,
            w - pad,
            PALETTE[0],
            y = sy(v)
        );
    }
    if let Some(f) = floor {
        let _ = writeln!(
            s,
            r##"<line x1="{pad}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#888888" stroke-dasharray="2 3"/>"##,
            w - pad,
            y = sy(f)
        );
    }
    for (i, fam) in families.iter().enumerate() {
        let pts = mean_over_targets(fam);
        if pts.is_empty() {
            continue;
        }
        let path: Vec<String> = pts.iter().map(|&(c, v)| format!("{:.1},{:.1}", sx(c), sy(v))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#, PALETTE[i + 1], path.join(" "));
        for &(c, v) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{}"/>"#, sx(c), sy(v), PALETTE[i + 1]);
        }
    }
    let mut legend = vec![("vanilla", PALETTE[0])];
    legend.extend(families.iter().zip(&PALETTE[1..]).map(|(f, c)| (*f, *c)));
    if floor.is_some() {
        legend.push(("random-pair floor", "#888888"));
    }
    for (i, (name, color)) in legend.iter().enumerate() {
        let y = pad + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="3" fill="{color}"/><text x="{:.1}" y="{:.1}">{name}</text>"#,
            w - pad - 110.0,
            y - 4.0,
            w - pad - 96.0,
            y
        );
    }
    s.push_str("</svg>\n");
    s
}
