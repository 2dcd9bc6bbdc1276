//! Shared setup for the solver and simulator benchmarks.

use std::path::Path;

use remat_core::profile::{load_profile, Profile};

/// A profile from the core crate's fixture directory.
pub fn fixture(name: &str) -> Profile {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(format!("{name}.json"));
    let bytes = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    load_profile(&bytes, true).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
