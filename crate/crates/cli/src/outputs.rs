//! Files produced by one run, so they can be listed on success and removed
//! on failure.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub const CONFIG_ECHO: &str = "config.txt";
pub const FILE_LIST: &str = "outputs.json";

pub struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
    /// Directories this run created, outermost first.
    made: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Self {
        Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            made: Vec::new(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn ensure_dir(&mut self, d: &Path) -> Result<()> {
        let mut missing = Vec::new();
        let mut cur = Some(d);
        while let Some(p) = cur {
            if p.as_os_str().is_empty() || p.exists() {
                break;
            }
            missing.push(p.to_path_buf());
            cur = p.parent();
        }
        std::fs::create_dir_all(d).with_context(|| format!("cannot create {}", d.display()))?;
        self.made.extend(missing.into_iter().rev());
        Ok(())
    }

    /// Register `path` (relative paths live under the output directory) and
    /// create its parent directories.
    pub fn claim(&mut self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let p = path.as_ref();
        let full = if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        };
        if let Some(parent) = full.parent() {
            self.ensure_dir(parent)?;
        }
        self.files.push(full.clone());
        Ok(full)
    }

    /// Register an external path given by the user as-is.
    pub fn claim_external(&mut self, path: &Path) -> Result<PathBuf> {
        if let Some(parent) = path.parent() {
            self.ensure_dir(parent)?;
        }
        self.files.push(path.to_path_buf());
        Ok(path.to_path_buf())
    }

    pub fn write(&mut self, rel: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.claim(rel)?;
        std::fs::write(&p, contents).with_context(|| format!("cannot write {}", p.display()))?;
        Ok(p)
    }

    fn listed(&self, p: &Path) -> String {
        p.strip_prefix(&self.dir).unwrap_or(p).display().to_string()
    }

    /// Write the effective-config echo and the list of produced files.
    pub fn finish(mut self, config: &str) -> Result<Vec<PathBuf>> {
        self.write(CONFIG_ECHO, config)?;
        let list_path = self.dir.join(FILE_LIST);
        let mut names: Vec<String> = self.files.iter().map(|p| self.listed(p)).collect();
        names.push(FILE_LIST.to_owned());
        let json = serde_json::to_string_pretty(&names)?;
        std::fs::write(&list_path, json).with_context(|| format!("cannot write {}", list_path.display()))?;
        self.files.push(list_path);
        Ok(std::mem::take(&mut self.files))
    }

    /// Remove everything this run wrote.
    pub fn discard(self) {
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        for d in self.made.iter().rev() {
            let _ = std::fs::remove_dir(d);
        }
    }
}
