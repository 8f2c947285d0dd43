use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use koopman_uq::basis::{BasisSet, BoxDomain};
use koopman_uq::dynamics::Duffing;
use koopman_uq::reduce::{monomial_count, ReductionConfig, SAMPLES_PER_MONOMIAL};
use koopman_uq::updf::{linspace, GaussianPdf};

/// A complete experiment. Every section has defaults, so an empty file (or
/// no file) describes the default Duffing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub basis: BasisConfig,
    pub koopman: KoopmanConfig,
    pub edmd: EdmdConfig,
    pub prior: PriorConfig,
    pub schedule: ScheduleConfig,
    pub state: StateConfig,
    pub reduction: ReductionSection,
    pub grid: GridConfig,
    pub monte_carlo: MonteCarloConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: SystemConfig::Duffing {
                mass: 1.0,
                stiffness: 1.0,
                unit_scale: 1.0,
                epsilon: 0.01,
            },
            basis: BasisConfig::default(),
            koopman: KoopmanConfig::default(),
            edmd: EdmdConfig::default(),
            prior: PriorConfig::default(),
            schedule: ScheduleConfig::default(),
            state: StateConfig::default(),
            reduction: ReductionSection::default(),
            grid: GridConfig::default(),
            monte_carlo: MonteCarloConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemConfig {
    Duffing {
        #[serde(default = "one")]
        mass: f64,
        #[serde(default = "one")]
        stiffness: f64,
        #[serde(default = "one")]
        unit_scale: f64,
        epsilon: f64,
    },
    /// The linear oscillator; enables the analytic density oracle.
    Harmonic {
        #[serde(default = "one")]
        mass: f64,
        #[serde(default = "one")]
        stiffness: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl SystemConfig {
    pub fn dynamics(&self) -> Duffing {
        match *self {
            SystemConfig::Duffing {
                mass,
                stiffness,
                unit_scale,
                epsilon,
            } => Duffing {
                mass,
                stiffness,
                unit_scale,
                epsilon,
            },
            SystemConfig::Harmonic { mass, stiffness } => Duffing {
                mass,
                stiffness,
                ..Duffing::harmonic()
            },
        }
    }

    pub fn is_harmonic(&self) -> bool {
        matches!(self, SystemConfig::Harmonic { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    /// Total-degree order `α`.
    pub order: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            order: 9,
            lower: vec![-1.5, -1.5],
            upper: vec![1.5, 1.5],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Galerkin,
    Edmd,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KoopmanConfig {
    /// Model used by `propagate-pdf` and `recursive`.
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdmdConfig {
    pub samples: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Default for EdmdConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            dt: 0.1,
            seed: 0,
        }
    }
}

/// Gaussian prior, given either by an isotropic standard deviation or a full
/// covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub mean: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            mean: vec![0.4, 0.6],
            sigma: None,
            covariance: None,
        }
    }
}

const DEFAULT_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Propagation leg durations in seconds.
    pub legs: Vec<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { legs: vec![500.0] }
    }
}

impl ScheduleConfig {
    pub fn total(&self) -> f64 {
        self.legs.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StateConfig {
    /// Initial state of the error series; the prior mean when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<f64>>,
    /// Spacing of the error-series time grid over the whole schedule.
    pub step: f64,
    /// Reference integrator tolerance.
    pub tol: f64,
}

impl Default for StateConfig {
    fn default() -> Self {
        Self {
            initial: None,
            step: 5.0,
            tol: 1e-12,
        }
    }
}

impl StateConfig {
    /// `0, step, 2·step, …` up to and including `horizon`.
    pub fn times(&self, horizon: f64) -> Vec<f64> {
        let steps = (horizon / self.step + 1e-9).floor() as usize;
        let mut times: Vec<f64> = (0..=steps).map(|k| k as f64 * self.step).collect();
        if horizon - times[steps] > 1e-9 * horizon.max(1.0) {
            times.push(horizon);
        }
        times
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReductionSection {
    /// Polynomial order `ω` of the reduced log-density.
    pub order: usize,
    /// Samples per reduction; `20 ×` the monomial count when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    pub seed: u64,
    /// Per-axis resolution of the support search.
    pub resolution: usize,
}

impl Default for ReductionSection {
    fn default() -> Self {
        Self {
            order: 4,
            samples: None,
            seed: 0,
            resolution: 151,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Points per axis.
    pub points: usize,
    /// Grid box; the basis box when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    /// Scale written grids to unit mass.
    pub normalize: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            points: 151,
            lower: None,
            upper: None,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    /// Ensemble size; 0 skips the Monte Carlo oracle.
    pub samples: usize,
    pub seed: u64,
    pub tol: f64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            seed: 0,
            tol: koopman_uq::validate::MC_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("run"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mc_samples: Option<usize>,
    pub order: Option<usize>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// `--seed` replaces every seed of the run.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out {
            self.output.dir = out.clone();
        }
        if let Some(seed) = o.seed {
            self.edmd.seed = seed;
            self.reduction.seed = seed;
            self.monte_carlo.seed = seed;
        }
        if let Some(n) = o.mc_samples {
            self.monte_carlo.samples = n;
        }
        if let Some(order) = o.order {
            self.basis.order = order;
        }
    }

    /// Fills derived defaults so the echoed config states every value used.
    pub fn resolve(&mut self) -> Result<()> {
        if self.prior.covariance.is_none() {
            let s = self.prior.sigma.unwrap_or(DEFAULT_SIGMA);
            if !(s.is_finite() && s > 0.0) {
                bail!("prior: sigma must be positive");
            }
            let n = self.prior.mean.len();
            self.prior.covariance = Some(
                (0..n)
                    .map(|i| (0..n).map(|j| if i == j { s * s } else { 0.0 }).collect())
                    .collect(),
            );
        } else if self.prior.sigma.is_some() {
            bail!("prior: give either sigma or covariance, not both");
        }
        self.prior.sigma = None;
        if self.state.initial.is_none() {
            self.state.initial = Some(self.prior.mean.clone());
        }
        if self.grid.lower.is_none() {
            self.grid.lower = Some(self.basis.lower.clone());
        }
        if self.grid.upper.is_none() {
            self.grid.upper = Some(self.basis.upper.clone());
        }
        if self.reduction.samples.is_none() {
            let n = self.basis.lower.len();
            self.reduction.samples =
                Some(SAMPLES_PER_MONOMIAL * monomial_count(n, self.reduction.order));
        }
        self.validate()
    }

    /// Checks every section against the invariants of the module it feeds.
    fn validate(&self) -> Result<()> {
        let sys = self.system.dynamics();
        sys.validate().map_err(|e| anyhow!("system: {e}"))?;
        let basis = self.basis_set()?;
        let n = basis.dim();
        if n != 2 {
            bail!("basis: the oscillator is two-dimensional, got a {n}-dimensional box");
        }
        if self.basis.order == 0 {
            bail!("basis: order must be at least 1");
        }
        let eta = basis.size();
        if self.edmd.samples < eta {
            bail!(
                "edmd: {} samples cannot determine a {eta}-term basis",
                self.edmd.samples
            );
        }
        if !(self.edmd.dt.is_finite() && self.edmd.dt > 0.0) {
            bail!("edmd: dt must be positive");
        }
        self.prior().map_err(|e| anyhow!("prior: {e}"))?;
        if self.schedule.legs.is_empty() {
            bail!("schedule: at least one leg is required");
        }
        if self
            .schedule
            .legs
            .iter()
            .any(|t| !(t.is_finite() && *t >= 0.0))
        {
            bail!("schedule: leg durations must be finite and non-negative");
        }
        if !(self.state.step.is_finite() && self.state.step > 0.0) {
            bail!("state: step must be positive");
        }
        if !(self.state.tol > 0.0) {
            bail!("state: tol must be positive");
        }
        if self.state.initial.as_ref().is_some_and(|x| x.len() != n) {
            bail!("state: initial must have {n} components");
        }
        if self.reduction.resolution < 2 {
            bail!("reduction: resolution must be at least 2");
        }
        if self.grid.points < 2 {
            bail!("grid: at least 2 points per axis are required");
        }
        self.grid_box()?;
        if !(self.monte_carlo.tol > 0.0) {
            bail!("monte_carlo: tol must be positive");
        }
        Ok(())
    }

    /// Checks the reduction settings against the basis; only multi-leg runs
    /// reduce, so other commands accept any reduction section.
    pub fn validate_reduction(&self) -> Result<()> {
        let basis = self.basis_set()?;
        let reduction = ReductionConfig {
            order: self.reduction.order,
            samples: self.reduction.samples.unwrap_or(0),
            region: basis.domain().clone(),
            seed: self.reduction.seed,
        };
        reduction
            .validate(Some(self.basis.order))
            .map_err(|e| anyhow!("reduction: {e}"))
    }

    pub fn basis_set(&self) -> Result<BasisSet> {
        let domain = BoxDomain::new(self.basis.lower.clone(), self.basis.upper.clone())
            .map_err(|e| anyhow!("basis: {e}"))?;
        Ok(BasisSet::new(domain, self.basis.order))
    }

    pub fn prior(&self) -> Result<GaussianPdf> {
        let cov = self
            .prior
            .covariance
            .as_ref()
            .ok_or_else(|| anyhow!("prior covariance is unresolved"))?;
        let n = self.prior.mean.len();
        if cov.len() != n || cov.iter().any(|r| r.len() != n) {
            bail!("covariance must be {n}×{n}");
        }
        let flat: Vec<f64> = cov.iter().flatten().copied().collect();
        Ok(GaussianPdf::new(
            self.prior.mean.clone(),
            nalgebra::DMatrix::from_row_slice(n, n, &flat),
        )?)
    }

    fn grid_box(&self) -> Result<BoxDomain> {
        let (lo, hi) = (self.grid.lower.clone(), self.grid.upper.clone());
        BoxDomain::new(
            lo.ok_or_else(|| anyhow!("grid box is unresolved"))?,
            hi.ok_or_else(|| anyhow!("grid box is unresolved"))?,
        )
        .map_err(|e| anyhow!("grid: {e}"))
    }

    pub fn grid_axes(&self) -> Result<Vec<Vec<f64>>> {
        let b = self.grid_box()?;
        Ok(b.lower()
            .iter()
            .zip(b.upper())
            .map(|(&lo, &hi)| linspace(lo, hi, self.grid.points))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolved(text: &str) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::parse(text)?;
        c.resolve()?;
        Ok(c)
    }

    #[test]
    fn empty_file_is_the_default_run() {
        let c = resolved("").unwrap();
        assert_eq!(c.basis.order, 9);
        assert_eq!(c.basis_set().unwrap().size(), 55);
        assert_eq!(c.system.dynamics(), Duffing::default());
        let var = 0.1 * 0.1;
        assert_eq!(
            c.prior.covariance,
            Some(vec![vec![var, 0.0], vec![0.0, var]])
        );
        assert_eq!(c.state.initial, Some(vec![0.4, 0.6]));
        assert_eq!(c.reduction.samples, Some(300));
        assert_eq!(c.grid_axes().unwrap()[0].len(), 151);
        assert_eq!((c.monte_carlo.samples, c.edmd.samples), (100_000, 10_000));
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_location() {
        let err = ExperimentConfig::parse("[basis]\norder = 3\nordr = 4\n").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("ordr") && msg.contains("line 3"), "{msg}");
        assert!(ExperimentConfig::parse("[system]\nkind = \"harmonic\"\nepsilon = 0.1\n").is_err());
        assert!(ExperimentConfig::parse("[nonsense]\n").is_err());
    }

    #[test]
    fn invariants_are_checked_at_load() {
        let low = resolved("[reduction]\norder = 4\n[basis]\norder = 2\n").unwrap();
        assert!(low.validate_reduction().is_err());
        assert!(resolved("[reduction]\nsamples = 10\n")
            .unwrap()
            .validate_reduction()
            .is_err());
        assert!(resolved("[prior]\nsigma = 0.1\ncovariance = [[1.0, 0.0], [0.0, 1.0]]\n").is_err());
        assert!(resolved("[prior]\nsigma = -0.1\n").is_err());
        assert!(resolved("[schedule]\nlegs = []\n").is_err());
        assert!(resolved("[schedule]\nlegs = [-1.0]\n").is_err());
        assert!(resolved("[basis]\nlower = [1.0, -1.0]\nupper = [-1.0, 1.0]\n").is_err());
        assert!(resolved("[edmd]\nsamples = 10\n").is_err());
        assert!(resolved("[system]\nkind = \"duffing\"\nepsilon = 0.01\nmass = 0.0\n").is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let mut c = ExperimentConfig::parse("[monte_carlo]\nsamples = 5\n").unwrap();
        c.apply(&Overrides {
            out: Some("elsewhere".into()),
            seed: Some(9),
            mc_samples: Some(7),
            order: Some(3),
        });
        assert_eq!(c.output.dir, PathBuf::from("elsewhere"));
        assert_eq!(
            (c.edmd.seed, c.reduction.seed, c.monte_carlo.seed),
            (9, 9, 9)
        );
        assert_eq!((c.monte_carlo.samples, c.basis.order), (7, 3));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = resolved("[system]\nkind = \"harmonic\"\n[schedule]\nlegs = [1.0, 2.0]\n").unwrap();
        let text = toml::to_string(&c).unwrap();
        let mut back = ExperimentConfig::parse(&text).unwrap();
        back.resolve().unwrap();
        assert_eq!(back, c);
        let json: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(json, c);
    }

    #[test]
    fn time_grid_covers_the_horizon() {
        let s = StateConfig {
            step: 2.0,
            ..StateConfig::default()
        };
        assert_eq!(s.times(0.0), vec![0.0]);
        assert_eq!(s.times(4.0), vec![0.0, 2.0, 4.0]);
        assert_eq!(s.times(5.0), vec![0.0, 2.0, 4.0, 5.0]);
    }
}
