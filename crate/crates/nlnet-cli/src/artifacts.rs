//! Run-directory artifacts: CSV writers, PGM heatmaps, and the content-hash
//! manifest every command emits.

use crate::error::{CliError, CliResult};
use nlnet::attention::AttentionRecord;
use nlnet::train::MetricsRow;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Collects emitted files and writes `manifest.txt` with one
/// `<sha256>  <name>` line per artifact, sorted by name. The manifest never
/// lists itself; wall-clock tables are excluded by never being registered.
pub struct RunDir {
    root: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root)?;
        Ok(RunDir {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Write a file and record it in the manifest.
    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        fs::write(self.root.join(name), contents.as_ref())?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Record a file that was written through another path (checkpoints).
    pub fn register(&mut self, name: &str) {
        self.files.push(name.to_string());
    }

    pub fn write_manifest(&mut self) -> CliResult<()> {
        self.files.sort();
        self.files.dedup();
        let mut out = String::new();
        for name in &self.files {
            let bytes = fs::read(self.root.join(name))
                .map_err(|e| CliError::runtime(format!("manifest: {name}: {e}")))?;
            let _ = writeln!(out, "{}  {}", sha256_hex(&bytes), name);
        }
        fs::write(self.root.join("manifest.txt"), out)?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("iter,lr,loss,train_top1,val_top1\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.iter, r.lr, r.loss, r.train_top1, r.val_top1);
    }
    s
}

/// One row per arrow: query (t,h,w), key (t,h,w) on the key grid, weight.
pub fn attention_csv(records: &[AttentionRecord]) -> String {
    let mut s = String::from("block,query_t,query_h,query_w,key_t,key_h,key_w,weight,probabilistic\n");
    for r in records {
        for e in &r.entries {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.block,
                r.query.0,
                r.query.1,
                r.query.2,
                e.key.0,
                e.key.1,
                e.key.2,
                e.weight,
                r.probabilistic
            );
        }
    }
    s
}

/// Binary (P5) grayscale PGM.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Per-frame heatmaps of one query's weight row over the key grid. Pixel
/// values are scaled by the row maximum (a uniform row renders all-255).
pub fn heatmap_frames(record: &AttentionRecord, full_row: &[f64]) -> Vec<(String, Vec<u8>)> {
    let (kt, kh, kw) = record.key_grid;
    assert_eq!(full_row.len(), kt * kh * kw);
    let wmax = full_row.iter().cloned().fold(0.0f64, f64::max);
    let mut out = Vec::with_capacity(kt);
    for t in 0..kt {
        let mut pixels = Vec::with_capacity(kh * kw);
        for i in 0..kh * kw {
            let v = full_row[t * kh * kw + i];
            let p = if wmax > 0.0 {
                ((v / wmax) * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            pixels.push(p);
        }
        let name = format!(
            "heatmap_q{}_{}_{}_f{}.pgm",
            record.query.0, record.query.1, record.query.2, t
        );
        out.push((name, pgm_bytes(kw, kh, &pixels)));
    }
    out
}
