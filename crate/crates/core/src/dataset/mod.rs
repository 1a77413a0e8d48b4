//! TriShape: a procedural three-domain dataset with shared and semantically
//! inverted generative factors.
//!
//! Every data point is one [`FactorVector`]. Each domain sees it through a
//! fixed inversion (mirrored position, reversed or shifted angle, rotated
//! object hue) while floor and wall hues are shared. Views are rendered as
//! 2-D images or encoded as 8-feature vectors.

mod file;
pub mod render;

use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::DataShape;
use crate::error::{Error, Result};

pub use file::{DATASET_MAGIC, DATASET_VERSION};

pub const DOMAINS: usize = 3;
pub const VECTOR_FEATURES: usize = 8;

/// Mean absolute error (in `[0, 1]` units) between views of independent
/// factor draws, averaged over domains. Monte-Carlo estimate over 1000 pairs
/// with seed 0 (see `random_pair_mae_floor`).
pub const VECTOR_RANDOM_PAIR_MAE_FLOOR: f64 = 0.3115535914472134;
/// Same for 32x32 image renders.
pub const IMAGE32_RANDOM_PAIR_MAE_FLOOR: f64 = 0.2126042515030754;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    A,
    B,
    C,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::A, Domain::B, Domain::C];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("domain index {i} out of range")))
    }

    pub fn letter(self) -> char {
        ['A', 'B', 'C'][self.index()]
    }

    pub fn from_letter(c: char) -> Result<Self> {
        match c.to_ascii_uppercase() {
            'A' => Ok(Domain::A),
            'B' => Ok(Domain::B),
            'C' => Ok(Domain::C),
            _ => Err(Error::invalid(format!("unknown domain `{c}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorVector {
    pub px: f64,
    pub py: f64,
    pub angle: f64,
    pub obj_hue: f64,
    pub floor_hue: f64,
    pub wall1_hue: f64,
    pub wall2_hue: f64,
}

impl FactorVector {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            px: rng.random_range(-0.5..=0.5),
            py: rng.random_range(-0.5..=0.5),
            angle: rng.random_range(0.0..TAU),
            obj_hue: rng.random_range(0.0..1.0),
            floor_hue: rng.random_range(0.0..1.0),
            wall1_hue: rng.random_range(0.0..1.0),
            wall2_hue: rng.random_range(0.0..1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = (-0.5..=0.5).contains(&self.px) && (-0.5..=0.5).contains(&self.py);
        let unit = |h: f64| (0.0..1.0).contains(&h);
        let ok = pos
            && (0.0..TAU).contains(&self.angle)
            && unit(self.obj_hue)
            && unit(self.floor_hue)
            && unit(self.wall1_hue)
            && unit(self.wall2_hue);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("factor vector out of range: {self:?}")))
        }
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.px, self.py, self.angle, self.obj_hue, self.floor_hue, self.wall1_hue, self.wall2_hue]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self {
            px: a[0],
            py: a[1],
            angle: a[2],
            obj_hue: a[3],
            floor_hue: a[4],
            wall1_hue: a[5],
            wall2_hue: a[6],
        }
    }
}

fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

fn wrap_unit(h: f64) -> f64 {
    let w = h.rem_euclid(1.0);
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// The factors as seen by `domain`.
///
/// | domain | position     | angle        | object hue     |
/// |--------|--------------|--------------|----------------|
/// | A      | `(px, py)`   | `θ`          | `h`            |
/// | B      | `(-px, py)`  | `2π - θ`     | `h + 1/3`      |
/// | C      | `(px, -py)`  | `θ + π`      | `h + 2/3`      |
///
/// Angles wrap modulo `2π`, hues modulo 1. Floor and wall hues are shared.
pub fn domain_factors(domain: Domain, u: &FactorVector) -> FactorVector {
    let mut f = *u;
    match domain {
        Domain::A => {}
        Domain::B => {
            f.px = -u.px;
            f.angle = wrap_angle(TAU - u.angle);
            f.obj_hue = wrap_unit(u.obj_hue + 1.0 / 3.0);
        }
        Domain::C => {
            f.py = -u.py;
            f.angle = wrap_angle(u.angle + PI);
            f.obj_hue = wrap_unit(u.obj_hue + 2.0 / 3.0);
        }
    }
    f
}

/// Inverse of [`domain_factors`].
pub fn shared_factors(domain: Domain, f: &FactorVector) -> FactorVector {
    let mut u = *f;
    match domain {
        Domain::A => {}
        Domain::B => {
            u.px = -f.px;
            u.angle = wrap_angle(TAU - f.angle);
            u.obj_hue = wrap_unit(f.obj_hue - 1.0 / 3.0);
        }
        Domain::C => {
            u.py = -f.py;
            u.angle = wrap_angle(f.angle - PI);
            u.obj_hue = wrap_unit(f.obj_hue - 2.0 / 3.0);
        }
    }
    u
}

/// Image of `u` in `domain`, `[3, size, size]` in `[-1, 1]`.
pub fn render(domain: Domain, u: &FactorVector, size: usize) -> Result<Vec<f32>> {
    if size < 16 {
        return Err(Error::invalid(format!("render size must be >= 16, got {size}")));
    }
    Ok(render::render_view(domain, &domain_factors(domain, u), size))
}

/// `(px, py, cos θ, sin θ, obj, floor, wall1, wall2)` of the domain's
/// factors, hues mapped to `2h - 1`.
pub fn vector_mode(domain: Domain, u: &FactorVector) -> Vec<f32> {
    let f = domain_factors(domain, u);
    let hue = |h: f64| (2.0 * h - 1.0) as f32;
    vec![
        f.px as f32,
        f.py as f32,
        f.angle.cos() as f32,
        f.angle.sin() as f32,
        hue(f.obj_hue),
        hue(f.floor_hue),
        hue(f.wall1_hue),
        hue(f.wall2_hue),
    ]
}

/// Recovers the shared factors from a vector-mode view.
pub fn decode_vector(domain: Domain, v: &[f32]) -> Result<FactorVector> {
    if v.len() != VECTOR_FEATURES {
        return Err(Error::LengthMismatch {
            context: "vector view".into(),
            expected: VECTOR_FEATURES,
            got: v.len(),
        });
    }
    let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    let hue = |x: f64| wrap_unit((x + 1.0) / 2.0);
    let f = FactorVector {
        px: v[0],
        py: v[1],
        angle: wrap_angle(v[3].atan2(v[2])),
        obj_hue: hue(v[4]),
        floor_hue: hue(v[5]),
        wall1_hue: hue(v[6]),
        wall2_hue: hue(v[7]),
    };
    Ok(shared_factors(domain, &f))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewMode {
    Image { size: usize },
    Vector,
}

impl ViewMode {
    pub fn data_shape(self) -> DataShape {
        match self {
            ViewMode::Image { size } => DataShape::Image {
                channels: render::CHANNELS,
                size,
            },
            ViewMode::Vector => DataShape::Vector {
                features: VECTOR_FEATURES,
            },
        }
    }

    pub fn view_len(self) -> usize {
        self.data_shape().view_len()
    }

    /// The view of `u` in `domain` under this mode.
    pub fn view(self, domain: Domain, u: &FactorVector) -> Result<Vec<f32>> {
        match self {
            ViewMode::Image { size } => render(domain, u, size),
            ViewMode::Vector => Ok(vector_mode(domain, u)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Full,
    PairAB,
    PairBC,
    PairAC,
}

impl SplitTag {
    pub fn mask(self) -> [bool; DOMAINS] {
        match self {
            SplitTag::Full => [true, true, true],
            SplitTag::PairAB => [true, true, false],
            SplitTag::PairBC => [false, true, true],
            SplitTag::PairAC => [true, false, true],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Full => "FULL",
            SplitTag::PairAB => "PAIR_AB",
            SplitTag::PairBC => "PAIR_BC",
            SplitTag::PairAC => "PAIR_AC",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "FULL" => Ok(SplitTag::Full),
            "PAIR_AB" => Ok(SplitTag::PairAB),
            "PAIR_BC" => Ok(SplitTag::PairBC),
            "PAIR_AC" => Ok(SplitTag::PairAC),
            _ => Err(Error::format(format!("unknown split tag `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairPolicy {
    /// Unsupervised remainder split equally among (A,B), (B,C), (A,C).
    EqualPairs,
    /// Remainder split 50/50 between (A,B) and (B,C); no (A,C) pairs.
    BridgeAbBc,
}

impl PairPolicy {
    pub fn name(self) -> &'static str {
        match self {
            PairPolicy::EqualPairs => "equal",
            PairPolicy::BridgeAbBc => "bridge",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "equal" => Ok(PairPolicy::EqualPairs),
            "bridge" => Ok(PairPolicy::BridgeAbBc),
            _ => Err(Error::invalid(format!("unknown pair policy `{s}` (expected equal|bridge)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_points: usize,
    pub mode: ViewMode,
    pub sup_fraction: f64,
    pub pair_policy: PairPolicy,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn vector(n_points: usize, sup_fraction: f64, pair_policy: PairPolicy, seed: u64) -> Self {
        Self {
            n_points,
            mode: ViewMode::Vector,
            sup_fraction,
            pair_policy,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    /// Ground truth for every domain, present views or not. Only used for
    /// evaluation.
    pub factors: FactorVector,
    pub views: Vec<Option<Vec<f32>>>,
    pub split: SplitTag,
}

impl DataPoint {
    pub fn sup_mask(&self) -> [bool; DOMAINS] {
        self.split.mask()
    }
}

/// Number of points per split tag, in the order FULL, AB, BC, AC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub full: usize,
    pub pair_ab: usize,
    pub pair_bc: usize,
    pub pair_ac: usize,
}

/// `round(N * n)` fully supervised points; the rest divided per policy.
/// Leftovers that do not divide evenly go to the pairs in the order
/// (A,B), (B,C), (A,C).
pub fn split_counts(n_points: usize, sup_fraction: f64, policy: PairPolicy) -> Result<SplitCounts> {
    if !(0.0..=1.0).contains(&sup_fraction) {
        return Err(Error::invalid(format!("supervised fraction must be in [0, 1], got {sup_fraction}")));
    }
    if n_points == 0 {
        return Err(Error::invalid("dataset needs at least one point"));
    }
    let full = ((sup_fraction * n_points as f64).round() as usize).min(n_points);
    let rest = n_points - full;
    let kinds = match policy {
        PairPolicy::EqualPairs => 3,
        PairPolicy::BridgeAbBc => 2,
    };
    if rest > 0 && rest < kinds {
        return Err(Error::invalid(format!(
            "{n_points} points with supervised fraction {sup_fraction} leave {rest} unsupervised points, \
             fewer than the {kinds} pair kinds of the `{}` policy",
            policy.name()
        )));
    }
    let (base, extra) = (rest / kinds, rest % kinds);
    let share = |i: usize| base + usize::from(i < extra);
    Ok(match policy {
        PairPolicy::EqualPairs => SplitCounts {
            full,
            pair_ab: share(0),
            pair_bc: share(1),
            pair_ac: share(2),
        },
        PairPolicy::BridgeAbBc => SplitCounts {
            full,
            pair_ab: share(0),
            pair_bc: share(1),
            pair_ac: 0,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub counts: SplitCounts,
    pub points: Vec<DataPoint>,
}

/// Deterministic from the spec alone.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if let ViewMode::Image { size } = spec.mode {
        if size < 16 {
            return Err(Error::invalid(format!("render size must be >= 16, got {size}")));
        }
    }
    let counts = split_counts(spec.n_points, spec.sup_fraction, spec.pair_policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tags = Vec::with_capacity(spec.n_points);
    tags.extend(std::iter::repeat_n(SplitTag::Full, counts.full));
    tags.extend(std::iter::repeat_n(SplitTag::PairAB, counts.pair_ab));
    tags.extend(std::iter::repeat_n(SplitTag::PairBC, counts.pair_bc));
    tags.extend(std::iter::repeat_n(SplitTag::PairAC, counts.pair_ac));
    tags.shuffle(&mut rng);

    let factors: Vec<FactorVector> = (0..spec.n_points).map(|_| FactorVector::sample(&mut rng)).collect();
    let points = factors
        .into_iter()
        .zip(tags)
        .map(|(u, split)| {
            let views = Domain::ALL
                .iter()
                .zip(split.mask())
                .map(|(&d, present)| if present { spec.mode.view(d, &u).map(Some) } else { Ok(None) })
                .collect::<Result<Vec<_>>>()?;
            Ok(DataPoint { factors: u, views, split })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        counts,
        points,
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed-stable 5% hold-out membership.
pub fn is_validation(seed: u64, index: usize) -> bool {
    splitmix64(seed ^ splitmix64(index as u64)).is_multiple_of(20)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Indices of training and validation points.
    pub fn train_val_indices(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| !is_validation(self.spec.seed, i))
    }

    pub fn shape(&self) -> DataShape {
        self.spec.mode.data_shape()
    }
}

/// Fully observed points drawn from an independent stream, for evaluation.
pub fn generate_test_points(mode: ViewMode, n: usize, seed: u64) -> Result<Vec<DataPoint>> {
    let spec = DatasetSpec {
        n_points: n,
        mode,
        sup_fraction: 1.0,
        pair_policy: PairPolicy::EqualPairs,
        seed: splitmix64(seed ^ 0x7E57_7E57),
    };
    Ok(generate_dataset(&spec)?.points)
}

/// Monte-Carlo estimate of the MAE between views of independent factor
/// draws; pair `i` uses domain `i mod 3`.
pub fn random_pair_mae_floor(mode: ViewMode, pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for i in 0..pairs {
        let d = Domain::ALL[i % DOMAINS];
        let a = mode.view(d, &FactorVector::sample(&mut rng))?;
        let b = mode.view(d, &FactorVector::sample(&mut rng))?;
        total += crate::eval::mae(&a, &b)?;
    }
    Ok(total / pairs as f64)
}
