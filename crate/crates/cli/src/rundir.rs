use std::fs;
use std::path::{Path, PathBuf};

/// Output directory that only appears under its final name once complete.
pub struct RunDir {
    staging: PathBuf,
    target: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    pub fn create(target: &Path) -> Result<Self, String> {
        if target.exists() {
            return Err(format!("output directory {} already exists", target.display()));
        }
        let name = target
            .file_name()
            .ok_or_else(|| format!("invalid output directory {}", target.display()))?
            .to_string_lossy();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| format!("{}: {e}", parent.display()))?;
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| format!("{}: {e}", staging.display()))?;
        }
        fs::create_dir(&staging).map_err(|e| format!("{}: {e}", staging.display()))?;
        Ok(Self {
            staging,
            target: target.to_path_buf(),
            files: Vec::new(),
        })
    }

    /// Path of a new file inside the run, recorded in the manifest.
    pub fn file(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.staging.join(name)
    }

    /// Records the `.bin`/`.toml` pair written under `stem`.
    pub fn pair(&mut self, stem: &str) -> &Path {
        self.files.push(format!("{stem}.bin"));
        self.files.push(format!("{stem}.toml"));
        &self.staging
    }

    /// Moves the staging directory into place and returns the manifest.
    pub fn finish(self) -> Result<(PathBuf, Vec<String>), String> {
        fs::rename(&self.staging, &self.target).map_err(|e| format!("{}: {e}", self.target.display()))?;
        let mut files = self.files.clone();
        files.sort();
        let target = self.target.clone();
        std::mem::forget(self);
        Ok((target, files))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.staging);
    }
}
