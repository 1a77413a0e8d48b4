//! Deterministic rasterizer for the three TriShape domains.
//!
//! The background is a floor band (bottom third) below two walls split at the
//! vertical midline. One shape per domain sits on top: a square (A), a
//! triangle (B) or a notched disc (C), centred at the factor position and
//! rotated by the factor angle. No anti-aliasing; channels in `[-1, 1]`.

use std::f64::consts::PI;

use super::{Domain, FactorVector};

pub const CHANNELS: usize = 3;

const WALL_SV: (f64, f64) = (0.45, 0.85);
const FLOOR_SV: (f64, f64) = (0.6, 0.55);
const OBJECT_SV: (f64, f64) = (0.9, 1.0);
/// Maps the factor position `[-0.5, 0.5]` to the visible centre range.
const POSITION_SCALE: f64 = 0.6;
const SHAPE_RADIUS: f64 = 0.2;
const NOTCH_HALF_ANGLE: f64 = 0.45;
const NOTCH_INNER: f64 = 0.35;

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Whether the point `(a, b)` in the shape's rotated local frame lies inside.
fn inside(domain: Domain, a: f64, b: f64) -> bool {
    let r = SHAPE_RADIUS;
    match domain {
        Domain::A => a.abs() <= 0.8 * r && b.abs() <= 0.8 * r,
        Domain::B => {
            // Equilateral triangle with a vertex along +b; edge normals at
            // -90, 30 and 150 degrees, inradius half the circumradius.
            let circum = 1.1 * r;
            [-PI / 2.0, PI / 6.0, 5.0 * PI / 6.0]
                .iter()
                .all(|&n| a * n.cos() + b * n.sin() <= circum / 2.0)
        }
        Domain::C => {
            let rho = (a * a + b * b).sqrt();
            if rho > r {
                return false;
            }
            let notch = b.atan2(a).abs() <= NOTCH_HALF_ANGLE && rho > NOTCH_INNER * r;
            !notch
        }
    }
}

/// Which background region a pixel centre belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Floor,
    LeftWall,
    RightWall,
    Object,
}

pub fn region(domain: Domain, f: &FactorVector, size: usize, row: usize, col: usize) -> Region {
    let u = (col as f64 + 0.5) / size as f64 - 0.5;
    let v = 0.5 - (row as f64 + 0.5) / size as f64;
    let (cx, cy) = (f.px * POSITION_SCALE, f.py * POSITION_SCALE);
    let (dx, dy) = (u - cx, v - cy);
    let (s, c) = f.angle.sin_cos();
    // rotate by -angle into the shape frame
    let a = c * dx + s * dy;
    let b = -s * dx + c * dy;
    if inside(domain, a, b) {
        Region::Object
    } else if 3 * row >= 2 * size {
        Region::Floor
    } else if 2 * col < size {
        Region::LeftWall
    } else {
        Region::RightWall
    }
}

/// Renders `[3, size, size]` channel-major, values in `[-1, 1]`. `factors`
/// are taken as already expressed in this domain's frame.
pub fn render_view(domain: Domain, f: &FactorVector, size: usize) -> Vec<f32> {
    let colors = [
        hsv_to_rgb(f.floor_hue, FLOOR_SV.0, FLOOR_SV.1),
        hsv_to_rgb(f.wall1_hue, WALL_SV.0, WALL_SV.1),
        hsv_to_rgb(f.wall2_hue, WALL_SV.0, WALL_SV.1),
        hsv_to_rgb(f.obj_hue, OBJECT_SV.0, OBJECT_SV.1),
    ];
    let mut out = vec![0f32; CHANNELS * size * size];
    for row in 0..size {
        for col in 0..size {
            let rgb = match region(domain, f, size, row, col) {
                Region::Floor => colors[0],
                Region::LeftWall => colors[1],
                Region::RightWall => colors[2],
                Region::Object => colors[3],
            };
            for (ch, v) in rgb.iter().enumerate() {
                out[(ch * size + row) * size + col] = (2.0 * v - 1.0) as f32;
            }
        }
    }
    out
}
