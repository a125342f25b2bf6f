use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

/// Where artifacts go: files in a directory, or stdout.
pub struct Output {
    dir: Option<PathBuf>,
}

impl Output {
    pub fn new(dir: Option<PathBuf>) -> anyhow::Result<Self> {
        if let Some(dir) = &dir {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(Self { dir })
    }

    /// Write `contents` as artifact `name`, or print it when there is no
    /// output directory.
    pub fn emit(&self, name: &str, contents: &str) -> anyhow::Result<()> {
        match &self.dir {
            Some(dir) => write_file(&dir.join(name), contents),
            None => {
                print!("{contents}");
                Ok(())
            }
        }
    }

    pub fn emit_json<T: Serialize>(&self, name: &str, value: &T) -> anyhow::Result<()> {
        self.emit(name, &to_json(value)?)
    }

    /// Artifacts that only make sense as files; skipped without a directory.
    pub fn emit_file_only(&self, name: &str, contents: &str) -> anyhow::Result<()> {
        match &self.dir {
            Some(dir) => write_file(&dir.join(name), contents),
            None => Ok(()),
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> anyhow::Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

pub fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}
