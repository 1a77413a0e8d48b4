//! `MDDS` dataset files: magic, version, a text manifest (header keys, then
//! one line per point with its split and factors), then every present view
//! as little-endian `f32` in point order.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use super::{DataPoint, Dataset, DatasetSpec, FactorVector, PairPolicy, SplitCounts, SplitTag, ViewMode, DOMAINS};
use crate::denoiser::checkpoint::{read_string, read_u32, read_u64};
use crate::error::{Error, Result};
use crate::kv::{fmt_f64, KvMap};

pub const DATASET_MAGIC: &[u8; 4] = b"MDDS";
pub const DATASET_VERSION: u32 = 1;
const POINTS_MARKER: &str = "[points]\n";

fn mask_text(mask: [bool; DOMAINS]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

impl Dataset {
    pub fn manifest_header(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("format", "mdds");
        kv.set("seed", self.spec.seed);
        kv.set("n_points", self.spec.n_points);
        match self.spec.mode {
            ViewMode::Image { size } => {
                kv.set("mode", "image");
                kv.set("size", size);
            }
            ViewMode::Vector => kv.set("mode", "vector"),
        }
        kv.set("view_len", self.spec.mode.view_len());
        kv.set("domains", DOMAINS);
        kv.set("sup_fraction", fmt_f64(self.spec.sup_fraction));
        kv.set("pair_policy", self.spec.pair_policy.name());
        kv.set("count.full", self.counts.full);
        kv.set("count.pair_ab", self.counts.pair_ab);
        kv.set("count.pair_bc", self.counts.pair_bc);
        kv.set("count.pair_ac", self.counts.pair_ac);
        kv.set("remainder_order", "pair_ab,pair_bc,pair_ac");
        kv
    }

    /// Header keys followed by the per-point table
    /// `index split sup_mask px py angle obj_hue floor_hue wall1_hue wall2_hue`.
    pub fn manifest_text(&self) -> String {
        let mut text = self.manifest_header().to_text();
        text.push_str(POINTS_MARKER);
        for (i, p) in self.points.iter().enumerate() {
            let _ = write!(text, "{i} {} {}", p.split.name(), mask_text(p.sup_mask()));
            for v in p.factors.to_array() {
                let _ = write!(text, " {}", fmt_f64(v));
            }
            text.push('\n');
        }
        text
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        let manifest = self.manifest_text();
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(manifest.as_bytes())?;
        let mut buf = Vec::new();
        for p in &self.points {
            for v in p.views.iter().flatten() {
                buf.clear();
                buf.extend(v.iter().flat_map(|x| x.to_le_bytes()));
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::format("not a dataset file (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(Error::Version {
                kind: "dataset",
                found: version,
                supported: DATASET_VERSION,
            });
        }
        let len = read_u64(r)? as usize;
        let manifest = read_string(r, len)?;
        let (header, table) = manifest
            .split_once(POINTS_MARKER)
            .ok_or_else(|| Error::format("manifest lacks a point table"))?;
        let kv = KvMap::from_text(header)?;
        let mode = match kv.require("mode")? {
            "image" => ViewMode::Image { size: kv.parse("size")? },
            "vector" => ViewMode::Vector,
            other => return Err(Error::format(format!("unknown view mode `{other}`"))),
        };
        let spec = DatasetSpec {
            n_points: kv.parse("n_points")?,
            mode,
            sup_fraction: kv.parse("sup_fraction")?,
            pair_policy: PairPolicy::from_name(kv.require("pair_policy")?).map_err(|e| Error::format(e.to_string()))?,
            seed: kv.parse("seed")?,
        };
        let counts = SplitCounts {
            full: kv.parse("count.full")?,
            pair_ab: kv.parse("count.pair_ab")?,
            pair_bc: kv.parse("count.pair_bc")?,
            pair_ac: kv.parse("count.pair_ac")?,
        };
        let view_len = mode.view_len();
        if kv.parse::<usize>("view_len")? != view_len {
            return Err(Error::format("manifest view_len disagrees with mode"));
        }
        let mut points = Vec::with_capacity(spec.n_points);
        let mut buf = vec![0u8; view_len * 4];
        for (i, line) in table.lines().enumerate() {
            let fields: Vec<&str> = line.split_ascii_whitespace().collect();
            if fields.len() != 10 || fields[0].parse::<usize>().ok() != Some(i) {
                return Err(Error::format(format!("malformed point line {i}")));
            }
            let split = SplitTag::from_name(fields[1])?;
            if fields[2] != mask_text(split.mask()) {
                return Err(Error::format(format!("point {i}: sup_mask disagrees with split tag")));
            }
            let mut a = [0f64; 7];
            for (slot, f) in a.iter_mut().zip(&fields[3..]) {
                *slot = f.parse().map_err(|_| Error::format(format!("point {i}: bad factor `{f}`")))?;
            }
            let factors = FactorVector::from_array(a);
            factors.validate().map_err(|e| Error::format(e.to_string()))?;
            let mut views = Vec::with_capacity(DOMAINS);
            for present in split.mask() {
                views.push(if present {
                    r.read_exact(&mut buf)?;
                    Some(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
                } else {
                    None
                });
            }
            points.push(DataPoint { factors, views, split });
        }
        if points.len() != spec.n_points {
            return Err(Error::format(format!(
                "manifest lists {} points, header says {}",
                points.len(),
                spec.n_points
            )));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("trailing bytes after view data"));
        }
        Ok(Self { spec, counts, points })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
