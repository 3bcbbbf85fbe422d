use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Files written by one command. Unless [`Artifacts::commit`] is called,
/// everything written (and the output directory, if this run created it) is
/// removed on drop, so a failed run leaves no partial artifacts.
pub struct Artifacts {
    dir: PathBuf,
    created_dir: bool,
    written: Vec<PathBuf>,
    committed: bool,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Self {
        Artifacts {
            dir: dir.to_path_buf(),
            created_dir: false,
            written: Vec::new(),
            committed: false,
        }
    }

    pub fn write(&mut self, name: &str, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<PathBuf> {
        if !self.dir.exists() {
            fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
            self.created_dir = true;
        }
        let path = self.dir.join(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        self.written.push(path.clone());
        let mut out = BufWriter::new(file);
        body(&mut out)
            .and_then(|_| out.flush())
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn write_json(&mut self, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
        self.write(name, |out| {
            serde_json::to_writer_pretty(&mut *out, value)?;
            writeln!(out)
        })
    }

    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.written)
    }
}

impl Drop for Artifacts {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for path in &self.written {
            let _ = fs::remove_file(path);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_runs_leave_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("out");
        {
            let mut a = Artifacts::new(&dir);
            a.write("x.csv", |w| writeln!(w, "1")).unwrap();
            assert!(dir.join("x.csv").exists());
        }
        assert!(!dir.exists());

        let mut a = Artifacts::new(&dir);
        a.write("x.csv", |w| writeln!(w, "1")).unwrap();
        assert_eq!(a.commit(), vec![dir.join("x.csv")]);
        assert!(dir.join("x.csv").exists());
    }
}
