use std::path::PathBuf;

use generalist_core::config::RunConfig;

pub fn workspace() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// One of the shipped configs under `configs/`, with overrides.
pub fn shipped_config(name: &str, overrides: &[String]) -> RunConfig {
    let path = workspace().join("configs").join(name);
    RunConfig::load(&path, overrides).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}
