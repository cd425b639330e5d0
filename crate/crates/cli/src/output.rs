//! Run directory: atomic artifact writes and the manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

pub struct RunDir {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
    started: Instant,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a temporary sibling and renames, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), artifacts: Vec::new(), started: Instant::now() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.retain(|a| a.file != name);
        self.artifacts.push(Artifact { file: name.to_string(), bytes: bytes.len(), sha256: hex(&Sha256::digest(bytes)) });
        Ok(())
    }

    /// Buffers the output of a library writer and stores it as `name`.
    pub fn write_with(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> nly2d::Result<()>,
    ) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Written last: config echo, artifact checksums, timing and seed.
    pub fn finish(mut self, subcommand: &str, seed: u64, threads: Option<usize>, config: Value) -> Result<()> {
        self.artifacts.sort_by(|a, b| a.file.cmp(&b.file));
        let manifest = json!({
            "tool": "nly2d",
            "version": env!("CARGO_PKG_VERSION"),
            "subcommand": subcommand,
            "seed": seed,
            "threads": threads,
            "config": config,
            "artifacts": self.artifacts,
            "timings": { "wall_seconds": self.started.elapsed().as_secs_f64() },
        });
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        let path = self.dir.join("manifest.json");
        write_atomic(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Long-format CSV writer with 17 significant digits.
pub struct Csv {
    buf: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut buf = header.join(",");
        buf.push('\n');
        Self { buf }
    }

    pub fn row(&mut self, cells: &[Cell]) {
        let parts: Vec<String> = cells.iter().map(Cell::render).collect();
        self.buf.push_str(&parts.join(","));
        self.buf.push('\n');
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf.into_bytes()
    }
}

pub enum Cell {
    F(f64),
    I(i64),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::F(v) if v.is_finite() => format!("{v:.16e}"),
            Cell::F(v) => format!("{v}"),
            Cell::I(v) => v.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_cells_round_trip() {
        let mut c = Csv::new(&["a", "b"]);
        c.row(&[Cell::F(0.1), Cell::I(-3)]);
        c.row(&[Cell::F(f64::NAN), Cell::I(0)]);
        let text = String::from_utf8(c.into_bytes()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "a,b");
        let v: f64 = lines[1].split(',').next().unwrap().parse().unwrap();
        assert_eq!(v, 0.1);
        assert_eq!(lines[2], "NaN,0");
    }

    #[test]
    fn manifest_lists_checksums() {
        let tmp = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(tmp.path()).unwrap();
        run.write("x.txt", b"abc").unwrap();
        run.finish("demo", 7, None, json!({})).unwrap();
        let m: Value = serde_json::from_slice(&fs::read(tmp.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["artifacts"][0]["sha256"], "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert!(!tmp.path().join("x.txt.partial").exists());
    }
}
