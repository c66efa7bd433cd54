//! Metrics CSV, run manifests, step logs and PGM mask export.

use std::fs;
use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::eval::MetricsReport;
use crate::harness::train::StepLog;
use crate::latent::Grid;

/// Every reported number is a latent-space distance, not a pixel one.
pub const METRIC_SPACE: &str = "latent";

/// One row per (variant, split, seed, bucket).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub table: String,
    pub variant: String,
    pub regime: String,
    pub mask_source: String,
    pub split: String,
    pub seed: u64,
    pub bucket: String,
    pub space: String,
    pub l1_global: f64,
    pub l2_global: f64,
    pub l1_keep: f64,
    pub l1_edit: f64,
    pub mask_iou: Option<f64>,
    pub mask_dice: Option<f64>,
    pub n_samples: usize,
    pub n_skipped: usize,
}

impl MetricsRow {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        table: &str,
        variant: &str,
        regime: &str,
        mask_source: &str,
        split: &str,
        seed: u64,
        bucket: &str,
        r: &MetricsReport,
    ) -> Self {
        Self {
            table: table.into(),
            variant: variant.into(),
            regime: regime.into(),
            mask_source: mask_source.into(),
            split: split.into(),
            seed,
            bucket: bucket.into(),
            space: METRIC_SPACE.into(),
            l1_global: r.l1_global,
            l2_global: r.l2_global,
            l1_keep: r.l1_keep,
            l1_edit: r.l1_edit,
            mask_iou: r.mask_iou,
            mask_dice: r.mask_dice,
            n_samples: r.n_samples,
            n_skipped: r.n_skipped,
        }
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport {
            l1_global: self.l1_global,
            l2_global: self.l2_global,
            l1_keep: self.l1_keep,
            l1_edit: self.l1_edit,
            mask_iou: self.mask_iou,
            mask_dice: self.mask_dice,
            n_samples: self.n_samples,
            n_skipped: self.n_skipped,
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

/// Floats are written in shortest round-trip form, so rereading is exact.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
    Ok(rows)
}

pub fn write_step_log(path: &Path, log: &[StepLog]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for s in log {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_step_log(path: &Path) -> Result<Vec<StepLog>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<StepLog>, _>>()?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// The subcommand and its arguments, minus the output location.
    pub command: serde_json::Value,
    pub config_hash: String,
    pub config: crate::config::ExperimentConfig,
    pub seeds: Vec<u64>,
    pub git_describe: String,
    pub metric_space: String,
    /// Non-finite training losses abort the run; the failure lands here.
    pub error: Option<String>,
    pub metrics: serde_json::Value,
}

pub fn write_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_string_pretty(m)? + "\n")?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// `git describe --always --dirty` of the working directory, or "unknown".
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Plain-text PGM (P2); values in [0, 1] map to 0..=255.
pub fn pgm_string(grid: &Grid) -> String {
    let mut out = format!("P2\n{} {}\n255\n", grid.w, grid.h);
    for y in 0..grid.h {
        let row: Vec<String> = (0..grid.w)
            .map(|x| ((grid.at(y, x).clamp(0.0, 1.0) * 255.0).round() as u32).to_string())
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_pgm(path: &Path, grid: &Grid) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, pgm_string(grid))?;
    Ok(())
}

/// Reads a P2 or P5 PGM into [0, 1] by dividing by maxval.
pub fn read_pgm(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Mask(format!("{}: {msg}", path.display()));
    // Header tokens, skipping `#` comments; returns the offset after the last one.
    let mut pos = 0;
    let mut header = Vec::new();
    while header.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let vals: Vec<usize> = match header[0].as_str() {
        "P2" => std::str::from_utf8(&bytes[pos..])
            .map_err(|_| bad("non-text raster"))?
            .split_ascii_whitespace()
            .map(num)
            .collect::<Result<_>>()?,
        "P5" => bytes.get(pos + 1..).unwrap_or(&[]).iter().map(|&b| b as usize).collect(),
        _ => return Err(bad("not a PGM")),
    };
    if vals.len() < w * h {
        return Err(bad("raster shorter than width x height"));
    }
    Grid::new(h, w, vals[..w * h].iter().map(|&v| v as f32 / maxval as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scaling() {
        let g = Grid::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(pgm_string(&g), "P2\n3 1\n255\n0 128 255\n");
    }

    #[test]
    fn pgm_reads_back_binary_masks() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::from_fn(3, 4, |y, x| ((x + y) % 2) as f32);
        let p = dir.path().join("m.pgm");
        write_pgm(&p, &g).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), g);
        std::fs::write(&p, b"P5\n# c\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(read_pgm(&p).unwrap().data, vec![0.0, 1.0]);
    }

    #[test]
    fn metrics_csv_rereads_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let r = MetricsReport {
            l1_global: 0.1 + 0.2,
            l2_global: 1.0 / 3.0,
            l1_keep: 1e-17,
            l1_edit: 12345.678901234567,
            mask_iou: None,
            mask_dice: Some(0.7),
            n_samples: 3,
            n_skipped: 1,
        };
        let rows = vec![MetricsRow::new("ablation", "G", "decoupled", "gt", "test", 2, "none", &r)];
        write_metrics_csv(&p, &rows).unwrap();
        assert_eq!(read_metrics_csv(&p).unwrap(), rows);
    }
}
