//! Timestamped, never-overwritten output directories.

use std::path::{Path, PathBuf};

use anyhow::Context;

pub const OUT_ENV: &str = "BVAD_OUT";

/// Output root: `--out`, then `$BVAD_OUT`, then the configured default.
pub fn output_root(flag: Option<&Path>, configured: &Path) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| configured.to_path_buf())
}

/// Create `<root>/<prefix>-<timestamp>` (with a numeric suffix when taken).
pub fn create_run_dir(root: &Path, prefix: &str) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(root)
        .with_context(|| format!("creating output root {}", root.display()))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    for n in 0.. {
        let name = if n == 0 {
            format!("{prefix}-{stamp}")
        } else {
            format!("{prefix}-{stamp}-{n}")
        };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => {
                return Err(e).with_context(|| format!("creating run directory {}", dir.display()))
            }
        }
    }
    unreachable!()
}
