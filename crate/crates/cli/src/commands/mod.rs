pub mod dataset;
pub mod eval;
pub mod sample;
pub mod train;

use std::path::PathBuf;

use crate::config::{out_root, Resolved};

/// The `out` key, defaulting to `default` under the output root.
pub(crate) fn resolve_out(r: &mut Resolved, default: &str) -> PathBuf {
    r.default_to("out", out_root().join(default).display());
    PathBuf::from(r.str("out"))
}

pub(crate) fn flag<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}
