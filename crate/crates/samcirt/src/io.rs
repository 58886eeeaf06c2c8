//! File formats.
//!
//! Volumes and projection stacks are stored as raw little-endian 32-bit
//! floats next to a JSON sidecar: `<stem>.raw` holds the row-major data and
//! `<stem>.json` the metadata (`{dims, spacing, center}` for volumes;
//! `{angles, det_count, det_spacing, subscan_bounds}` for stacks). Motion
//! parameters serialize as JSON `{model, raw}` objects, trajectories as JSON
//! arrays of those. Run histories export to CSV with columns `iter,
//! objective, gamma_x, gamma_p...` (one column per motion block) followed by
//! the motion parameters flattened per subscan.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Geometry, ProjStack};
use crate::optimizer::RunHistory;
use crate::partition::SubscanPlan;
use crate::volume::{GridSpec, Volume};
use crate::warp::AffineParams;

fn sidecar_path(raw_path: &Path) -> PathBuf {
    raw_path.with_extension("json")
}

fn write_raw_f32(path: &Path, data: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &v in data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_raw_f32(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() != expected * 4 {
        return Err(Error::ShapeMismatch(format!(
            "{} holds {} bytes, expected {} values",
            path.display(),
            bytes.len(),
            expected
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

#[derive(Serialize, Deserialize)]
struct VolumeMeta {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    center: Vec<f64>,
}

/// Write `<path>` (raw f32) and its JSON sidecar. `path` should end in
/// `.raw`.
pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    vol.validate()?;
    write_raw_f32(path, &vol.data)?;
    let meta = VolumeMeta {
        dims: vol.grid.dims.clone(),
        spacing: vol.grid.spacing.clone(),
        center: vol.grid.center.clone(),
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(sidecar_path(path))?), &meta)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let meta: VolumeMeta =
        serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
    let grid = GridSpec {
        dims: meta.dims,
        spacing: meta.spacing,
        center: meta.center,
    };
    grid.validate()?;
    let data = read_raw_f32(path, grid.len())?;
    Volume::new(grid, data)
}

#[derive(Serialize, Deserialize)]
struct ProjMeta {
    angles: Vec<f64>,
    det_count: Vec<usize>,
    det_spacing: Vec<f64>,
    subscan_bounds: Vec<(usize, usize)>,
}

pub fn write_proj_stack(path: &Path, stack: &ProjStack) -> Result<()> {
    stack.validate()?;
    write_raw_f32(path, &stack.data)?;
    let meta = ProjMeta {
        angles: stack.geometry.angles.clone(),
        det_count: stack.geometry.det_count.clone(),
        det_spacing: stack.geometry.det_spacing.clone(),
        subscan_bounds: stack.subscan_bounds.clone(),
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(sidecar_path(path))?), &meta)?;
    Ok(())
}

pub fn read_proj_stack(path: &Path) -> Result<ProjStack> {
    let meta: ProjMeta =
        serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
    let geometry = Geometry {
        angles: meta.angles,
        det_count: meta.det_count,
        det_spacing: meta.det_spacing,
    };
    geometry.validate()?;
    let data = read_raw_f32(path, geometry.n_angles() * geometry.det_elems())?;
    ProjStack::new(geometry, meta.subscan_bounds, data)
}

/// One parameter set per subscan, as a JSON array.
pub fn write_params_json(path: &Path, params: &[AffineParams]) -> Result<()> {
    for p in params {
        p.validate()?;
    }
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), params)?;
    Ok(())
}

pub fn read_params_json(path: &Path) -> Result<Vec<AffineParams>> {
    let params: Vec<AffineParams> =
        serde_json::from_reader(BufReader::new(File::open(path)?))?;
    for p in &params {
        p.validate()?;
    }
    Ok(params)
}

pub fn write_plan(path: &Path, plan: &SubscanPlan) -> Result<()> {
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), plan)?;
    Ok(())
}

pub fn read_plan(path: &Path) -> Result<SubscanPlan> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Export a run history as CSV. Multi-block motion updates get one
/// `gamma_p*` column per block, in model group order.
pub fn write_history_csv(path: &Path, history: &RunHistory) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let n_blocks = history.gamma_p.first().map_or(0, |g| g.len());
    let mut header = String::from("iter,objective,gamma_x");
    for bi in 0..n_blocks {
        if bi == 0 {
            header.push_str(",gamma_p");
        } else {
            header.push_str(&format!(",gamma_p{}", bi + 1));
        }
    }
    if let Some(first) = history.params.first() {
        for (sub, p) in first.iter().enumerate() {
            for q in 0..p.raw.len() {
                header.push_str(&format!(",p{sub}_{q}"));
            }
        }
    }
    writeln!(w, "{header}")?;
    for k in 0..history.objective.len() {
        let mut line = format!("{},{:.17e},{:.17e}", k, history.objective[k], history.gamma_x[k]);
        if let Some(gammas) = history.gamma_p.get(k) {
            for g in gammas {
                line.push_str(&format!(",{g:.17e}"));
            }
        }
        if let Some(params) = history.params.get(k) {
            for p in params {
                for v in &p.raw {
                    line.push_str(&format!(",{v:.17e}"));
                }
            }
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// 8-bit PGM slice export with window/level mapping; values at or below
/// `lo` map to 0, at or above `hi` to 255.
pub fn write_pgm(path: &Path, data: &[f64], width: usize, height: usize, lo: f64, hi: f64) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a {width}x{height} image",
            data.len()
        )));
    }
    if !(hi > lo) {
        return Err(Error::invalid("window", "hi must exceed lo".to_string()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    let scale = 255.0 / (hi - lo);
    let bytes: Vec<u8> = data
        .iter()
        .map(|&v| ((v - lo) * scale).clamp(0.0, 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}
