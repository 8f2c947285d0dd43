use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Density, LogDensity};
use crate::error::{Error, Result};

/// `count` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (count - 1) as f64;
            (0..count)
                .map(|i| {
                    if i + 1 == count {
                        hi
                    } else {
                        lo + step * i as f64
                    }
                })
                .collect()
        }
    }
}

/// What a grid is filled from. Log-densities are exponentiated after the
/// grid maximum has been subtracted.
#[derive(Clone, Copy)]
pub enum GridFunction<'a> {
    Density(&'a dyn Density),
    LogDensity(&'a dyn LogDensity),
}

/// Density values on a tensor grid, stored row-major (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct GridEvaluation {
    axes: Vec<Vec<f64>>,
    values: Vec<f64>,
    normalized: bool,
}

/// JSON sidecar written next to a grid CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridMeta {
    pub axes: Vec<Vec<f64>>,
    pub normalized: bool,
    pub provenance: String,
    #[serde(default)]
    pub dt: Option<f64>,
}

fn check_axes(axes: &[Vec<f64>]) -> Result<()> {
    if axes.is_empty() {
        return Err(Error::invalid("a grid needs at least one axis"));
    }
    for (d, ax) in axes.iter().enumerate() {
        if ax.is_empty()
            || ax.windows(2).any(|w| !(w[0] < w[1]))
            || ax.iter().any(|v| !v.is_finite())
        {
            return Err(Error::invalid(format!(
                "grid axis {d} must be finite and strictly increasing"
            )));
        }
    }
    Ok(())
}

/// Composite trapezoid weights of one axis.
fn trapezoid_weights(ax: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; ax.len()];
    for i in 1..ax.len() {
        let h = 0.5 * (ax[i] - ax[i - 1]);
        w[i - 1] += h;
        w[i] += h;
    }
    w
}

impl GridEvaluation {
    pub fn new(axes: Vec<Vec<f64>>, values: Vec<f64>, normalized: bool) -> Result<Self> {
        check_axes(&axes)?;
        let len: usize = axes.iter().map(Vec::len).product();
        if values.len() != len {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {len} points",
                values.len()
            )));
        }
        Ok(Self {
            axes,
            values,
            normalized,
        })
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Coordinates of grid point `k` in row-major order.
    pub fn point(&self, k: usize) -> Vec<f64> {
        point_of(&self.axes, k)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest value.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = k;
            }
        }
        best
    }

    /// Tensor trapezoid weight of every grid point.
    pub fn weights(&self) -> Vec<f64> {
        let per_axis: Vec<Vec<f64>> = self.axes.iter().map(|a| trapezoid_weights(a)).collect();
        let shape: Vec<usize> = self.axes.iter().map(Vec::len).collect();
        (0..self.len())
            .map(|k| {
                let mut rem = k;
                let mut w = 1.0;
                for d in (0..shape.len()).rev() {
                    w *= per_axis[d][rem % shape[d]];
                    rem /= shape[d];
                }
                w
            })
            .collect()
    }

    /// Trapezoidal integral of the values.
    pub fn integral(&self) -> f64 {
        self.weights()
            .iter()
            .zip(&self.values)
            .map(|(w, v)| w * v)
            .sum()
    }

    /// Rescales to unit trapezoidal mass.
    pub fn normalize(&mut self) -> Result<()> {
        let mass = self.integral();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::invalid(format!(
                "cannot normalize a grid with mass {mass}"
            )));
        }
        self.values.iter_mut().for_each(|v| *v /= mass);
        self.normalized = true;
        Ok(())
    }

    pub fn normalized(mut self) -> Result<Self> {
        self.normalize()?;
        Ok(self)
    }

    pub fn same_axes(&self, other: &Self) -> bool {
        self.axes == other.axes
    }

    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("meta.json")
    }

    /// Writes `x1,…,xn,density` rows plus the JSON sidecar.
    pub fn save(&self, csv_path: &Path, provenance: &str, dt: Option<f64>) -> Result<()> {
        let mut w = csv::Writer::from_path(csv_path)?;
        let mut header: Vec<String> = (1..=self.dim()).map(|i| format!("x{i}")).collect();
        header.push("density".into());
        w.write_record(&header)?;
        for (k, v) in self.values.iter().enumerate() {
            let mut row: Vec<String> = self.point(k).iter().map(|c| format!("{c:e}")).collect();
            row.push(format!("{v:e}"));
            w.write_record(&row)?;
        }
        w.flush()?;
        let meta = GridMeta {
            axes: self.axes.clone(),
            normalized: self.normalized,
            provenance: provenance.to_string(),
            dt,
        };
        serde_json::to_writer_pretty(
            BufWriter::new(File::create(Self::sidecar_path(csv_path))?),
            &meta,
        )?;
        Ok(())
    }

    pub fn load(csv_path: &Path) -> Result<(Self, GridMeta)> {
        let meta: GridMeta = serde_json::from_reader(File::open(Self::sidecar_path(csv_path))?)?;
        let mut r = csv::Reader::from_path(csv_path)?;
        let n = meta.axes.len();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != n + 1 {
                return Err(Error::invalid(
                    "grid csv row has the wrong number of columns",
                ));
            }
            let v: f64 = rec[n]
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad number {:?} in grid csv", &rec[n])))?;
            values.push(v);
        }
        let grid = Self::new(meta.axes.clone(), values, meta.normalized)?;
        Ok((grid, meta))
    }
}

fn point_of(axes: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut rem = k;
    let mut p = vec![0.0; axes.len()];
    for d in (0..axes.len()).rev() {
        let len = axes[d].len();
        p[d] = axes[d][rem % len];
        rem /= len;
    }
    p
}

/// Evaluates `f` at every tensor-grid point, in parallel.
pub fn evaluate_on_grid(
    f: GridFunction<'_>,
    axes: Vec<Vec<f64>>,
    normalize: bool,
) -> Result<GridEvaluation> {
    check_axes(&axes)?;
    let expected = match f {
        GridFunction::Density(d) => d.dim(),
        GridFunction::LogDensity(l) => l.dim(),
    };
    if expected != axes.len() {
        return Err(Error::GridMismatch(format!(
            "{}-dimensional grid for a {expected}-dimensional density",
            axes.len()
        )));
    }
    let len: usize = axes.iter().map(Vec::len).product();
    let mut values: Vec<f64> = (0..len)
        .into_par_iter()
        .map(|k| {
            let x = point_of(&axes, k);
            match f {
                GridFunction::Density(d) => d.density(&x),
                GridFunction::LogDensity(l) => l.log_density(&x),
            }
        })
        .collect();
    // a log-density of −∞ is a zero density
    let log_input = matches!(f, GridFunction::LogDensity(_));
    let bad: Vec<usize> = (0..len)
        .filter(|&k| !(values[k].is_finite() || log_input && values[k] == f64::NEG_INFINITY))
        .collect();
    if let Some(&first) = bad.first() {
        return Err(Error::NonFinite {
            count: bad.len(),
            first: point_of(&axes, first),
        });
    }
    if log_input {
        let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY {
            return Err(Error::NonFinite {
                count: len,
                first: point_of(&axes, 0),
            });
        }
        values.iter_mut().for_each(|v| *v = (*v - top).exp());
    }
    let mut grid = GridEvaluation::new(axes, values, false)?;
    if normalize {
        grid.normalize()?;
    }
    Ok(grid)
}
