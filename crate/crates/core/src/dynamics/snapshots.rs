use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dop853, Dynamics, Tolerance};
use crate::basis::{BasisSet, BoxDomain};
use crate::error::{Error, Result};

/// Local tolerance used to generate snapshot images.
pub const SNAPSHOT_TOL: f64 = 1e-12;

/// Sidecar record stored next to a snapshot CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotMeta {
    pub dt: f64,
    pub seed: u64,
    pub count: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Paired states `(x_m, y_m)` with `y_m` the `Δt`-flow image of `x_m`.
/// Both matrices hold one state per column.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub dt: f64,
    pub seed: u64,
    pub domain: BoxDomain,
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn meta(&self) -> SnapshotMeta {
        SnapshotMeta {
            dt: self.dt,
            seed: self.seed,
            count: self.len(),
            lower: self.domain.lower().to_vec(),
            upper: self.domain.upper().to_vec(),
        }
    }

    /// Path of the JSON sidecar that accompanies `csv_path`.
    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("meta.json")
    }

    /// Writes `x1..xn,y1..yn` rows plus the metadata sidecar.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        let n = self.dim();
        let mut w = csv::Writer::from_path(csv_path)?;
        let header: Vec<String> = (1..=n)
            .map(|i| format!("x{i}"))
            .chain((1..=n).map(|i| format!("y{i}")))
            .collect();
        w.write_record(&header)?;
        for m in 0..self.len() {
            let row: Vec<String> = self
                .x
                .column(m)
                .iter()
                .chain(self.y.column(m).iter())
                .map(|v| format!("{v:e}"))
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        let meta = BufWriter::new(File::create(Self::sidecar_path(csv_path))?);
        serde_json::to_writer_pretty(meta, &self.meta())?;
        Ok(())
    }

    pub fn load(csv_path: &Path) -> Result<Self> {
        let meta: SnapshotMeta =
            serde_json::from_reader(File::open(Self::sidecar_path(csv_path))?)?;
        let domain = BoxDomain::new(meta.lower.clone(), meta.upper.clone())?;
        let n = domain.dim();
        let mut r = csv::Reader::from_path(csv_path)?;
        let headers = r.headers()?.clone();
        if headers.len() != 2 * n {
            return Err(Error::invalid(format!(
                "snapshot csv has {} columns, expected {}",
                headers.len(),
                2 * n
            )));
        }
        let mut xs = Vec::with_capacity(meta.count * n);
        let mut ys = Vec::with_capacity(meta.count * n);
        for rec in r.records() {
            let rec = rec?;
            for (k, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad number {field:?} in snapshot csv")))?;
                if k < n {
                    xs.push(v);
                } else {
                    ys.push(v);
                }
            }
        }
        let count = xs.len() / n;
        if count != meta.count {
            return Err(Error::invalid(format!(
                "snapshot csv holds {count} rows but metadata says {}",
                meta.count
            )));
        }
        Ok(Self {
            x: DMatrix::from_vec(n, count, xs),
            y: DMatrix::from_vec(n, count, ys),
            dt: meta.dt,
            seed: meta.seed,
            domain,
        })
    }
}

/// Uniform sample `m` of the box under `seed`. Each sample owns its own RNG
/// stream, so the draw does not depend on evaluation order.
pub(crate) fn uniform_point(domain: &BoxDomain, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    domain
        .lower()
        .iter()
        .zip(domain.upper())
        .map(|(lo, hi)| rng.gen_range(*lo..*hi))
        .collect()
}

/// Draws `count` states uniformly from the basis box and flows each by `dt`
/// with the reference integrator.
pub fn generate_snapshots(
    sys: &dyn Dynamics,
    basis: &BasisSet,
    count: usize,
    dt: f64,
    seed: u64,
) -> Result<SnapshotSet> {
    let eta = basis.size();
    if count < eta {
        return Err(Error::invalid(format!(
            "{count} snapshots cannot determine a {eta}x{eta} Koopman matrix; need at least {eta}"
        )));
    }
    if sys.dim() != basis.dim() {
        return Err(Error::invalid("system and basis dimensions differ"));
    }
    let domain = basis.domain().clone();
    let n = domain.dim();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..count)
        .into_par_iter()
        .map_init(
            || Dop853::new(n, Tolerance::uniform(SNAPSHOT_TOL)),
            |solver, m| {
                let x = uniform_point(&domain, seed, m as u64);
                let mut y = x.clone();
                solver.integrate(sys, &mut y, 0.0, dt)?;
                Ok((x, y))
            },
        )
        .collect::<Result<_>>()?;
    let mut x = DMatrix::zeros(n, count);
    let mut y = DMatrix::zeros(n, count);
    for (m, (xm, ym)) in pairs.into_iter().enumerate() {
        x.column_mut(m).copy_from_slice(&xm);
        y.column_mut(m).copy_from_slice(&ym);
    }
    Ok(SnapshotSet {
        x,
        y,
        dt,
        seed,
        domain,
    })
}
