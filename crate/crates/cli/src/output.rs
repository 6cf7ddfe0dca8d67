use std::fs;
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use image::{ImageFormat, RgbImage};
use serde::Serialize;

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    write_atomic(path, buf.get_ref())
}

/// `dir/stem.suffix` for a path `dir/stem.ext`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Record of one command invocation, enough to replay it.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub dataset_root: Option<String>,
    pub artifacts: Vec<String>,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String]) -> Self {
        RunManifest {
            command: command.to_string(),
            args: argv.iter().skip(1).cloned().collect(),
            config: serde_json::Value::Null,
            seed: None,
            dataset_root: None,
            artifacts: Vec::new(),
            wall_time_secs: 0.0,
        }
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    pub fn finish(mut self, path: &Path, started: Instant) -> Result<()> {
        self.wall_time_secs = started.elapsed().as_secs_f64();
        write_json(path, &self)
    }
}
