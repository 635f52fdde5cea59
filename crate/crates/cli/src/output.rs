use std::fs;
use std::path::{Path, PathBuf};

use ensemble_uq::{Error, Result};
use serde::Serialize;

/// Outputs written under temporary names and renamed into place together
/// on [`Staged::commit`]. Anything not committed is removed on drop.
pub struct Staged {
    dir: PathBuf,
    pending: Vec<(PathBuf, PathBuf)>,
}

impl Staged {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            pending: Vec::new(),
        })
    }

    /// Temporary path for `name`; the suffix is kept so `.gz` still selects
    /// compression.
    pub fn path(&mut self, name: &str) -> PathBuf {
        let temp = self.dir.join(format!(".tmp-{}-{name}", std::process::id()));
        self.pending.push((temp.clone(), self.dir.join(name)));
        temp
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(self.dir.join(name))
    }

    pub fn with_writer(
        &mut self,
        name: &str,
        write: impl FnOnce(fs::File) -> Result<()>,
    ) -> Result<PathBuf> {
        let path = self.path(name);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write(file)?;
        Ok(self.dir.join(name))
    }

    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        let mut done = Vec::new();
        for (temp, target) in std::mem::take(&mut self.pending) {
            fs::rename(&temp, &target).map_err(|e| Error::io(&target, e))?;
            done.push(target);
        }
        Ok(done)
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        for (temp, _) in &self.pending {
            let _ = fs::remove_file(temp);
        }
    }
}
