use std::fs;
use std::path::{Path, PathBuf};

use crate::envs::{self, GridworldSpec};
use crate::error::{Error, Result};

/// Per-cell learned reward `max_a r_theta(s, a)`, min-max normalized to
/// `[0, 1]`. A constant map becomes 0.5 everywhere.
pub fn heatmap_values(spec: &GridworldSpec, theta: &[f64]) -> Result<Vec<f64>> {
    let world = envs::build_gridworld(spec)?;
    let r = world.model.reward_table(theta)?;
    let raw: Vec<f64> = (0..spec.n_states())
        .map(|s| r.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 1e-12 * hi.abs().max(lo.abs()).max(1e-300)) {
        return Ok(vec![0.5; raw.len()]);
    }
    Ok(raw.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect())
}

pub fn to_gray(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn heatmap_csv(spec: &GridworldSpec, values: &[f64]) -> String {
    let mut out = String::from("# schema: heatmap/v1\nx,y,value\n");
    for y in 0..spec.height {
        for x in 0..spec.width {
            out.push_str(&format!("{x},{y},{}\n", values[spec.state(x, y)]));
        }
    }
    out
}

/// Binary PGM with north up: the first image row is `y = height - 1`.
pub fn heatmap_pgm(spec: &GridworldSpec, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", spec.width, spec.height).into_bytes();
    for y in (0..spec.height).rev() {
        for x in 0..spec.width {
            out.push(to_gray(values[spec.state(x, y)]));
        }
    }
    out
}

/// Writes `heatmap.csv` and `heatmap.pgm` into `out`.
pub fn export_heatmap(spec: Option<&GridworldSpec>, theta: &[f64], out: &Path) -> Result<(PathBuf, PathBuf)> {
    let spec = spec.ok_or_else(|| Error::Config("heatmap export needs a gridworld environment".into()))?;
    let values = heatmap_values(spec, theta)?;
    fs::create_dir_all(out)?;
    let csv = out.join("heatmap.csv");
    let pgm = out.join("heatmap.pgm");
    fs::write(&csv, heatmap_csv(spec, &values))?;
    fs::write(&pgm, heatmap_pgm(spec, &values))?;
    Ok((csv, pgm))
}
