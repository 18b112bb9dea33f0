//! A simple directory lock preventing two commands from writing the same
//! output directory concurrently.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    /// Create `<dir>/.lock` exclusively. With `force`, a stale lock is
    /// replaced.
    pub fn acquire(dir: &Path, force: bool) -> anyhow::Result<Self> {
        let path = dir.join(".lock");
        if force && path.exists() {
            std::fs::remove_file(&path)?;
        }
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                anyhow::anyhow!(
                    "output directory {} is locked ({e}); another command may be running \
                     (remove {} or pass --force if it is stale)",
                    dir.display(),
                    path.display()
                )
            })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exclusive_until_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let l1 = DirLock::acquire(dir.path(), false).unwrap();
        assert!(DirLock::acquire(dir.path(), false).is_err());
        drop(l1);
        let _l2 = DirLock::acquire(dir.path(), false).unwrap();
    }

    #[test]
    fn force_replaces_stale_lock() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(".lock"), "12345\n").unwrap();
        let _l = DirLock::acquire(dir.path(), true).unwrap();
    }
}
