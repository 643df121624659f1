//! Output directories that only receive files once a command succeeds.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Files are written into a hidden staging directory next to the target and
/// moved over on [`Staged::commit`]. Dropping without committing removes
/// the staging directory, so a failed command leaves no partial outputs.
pub struct Staged {
    target: PathBuf,
    staging: PathBuf,
    committed: bool,
}

impl Staged {
    pub fn new(target: &Path) -> Result<Self> {
        fs::create_dir_all(target).with_context(|| format!("creating {}", target.display()))?;
        let staging = target.join(format!(".partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(Self {
            target: target.to_path_buf(),
            staging,
            committed: false,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    pub fn commit(mut self) -> Result<()> {
        for entry in fs::read_dir(&self.staging)? {
            let entry = entry?;
            let dest = self.target.join(entry.file_name());
            fs::rename(entry.path(), &dest).with_context(|| format!("moving output to {}", dest.display()))?;
        }
        fs::remove_dir(&self.staging)?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}
