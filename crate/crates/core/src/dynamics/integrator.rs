//! Adaptive Dormand–Prince 8(5,3) integrator.
//!
//! Coefficients and the combined 5th/3rd order error estimate follow Hairer's
//! DOP853. Works on slices with reusable stage buffers so the Monte Carlo
//! oracle can integrate millions of short systems without allocating.

#![allow(clippy::excessive_precision)]

use super::Dynamics;
use crate::error::{Error, Result};

const STAGES: usize = 12;

const C: [f64; STAGES] = [
    0.0,
    0.526001519587677318785587544488E-01,
    0.789002279381515978178381316732E-01,
    0.118350341907227396726757197510E+00,
    0.281649658092772603273242802490E+00,
    0.333333333333333333333333333333E+00,
    0.25E+00,
    0.307692307692307692307692307692E+00,
    0.651282051282051282051282051282E+00,
    0.6E+00,
    0.857142857142857142857142857142E+00,
    1.0,
];

#[rustfmt::skip]
const A: [[f64; STAGES - 1]; STAGES] = [
    [0.0; 11],
    [5.26001519587677318785587544488E-2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.97250569845378994544595329183E-2, 5.91751709536136983633785987549E-2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [2.95875854768068491816892993775E-2, 0.0, 8.87627564304205475450678981324E-2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [2.41365134159266685502369798665E-1, 0.0, -8.84549479328286085344864962717E-1, 9.24834003261792003115737966543E-1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.7037037037037037037037037037E-2, 0.0, 0.0, 1.70828608729473871279604482173E-1, 1.25467687566822425016691814123E-1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.7109375E-2, 0.0, 0.0, 1.70252211019544039314978060272E-1, 6.02165389804559606850219397283E-2, -1.7578125E-2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.70920001185047927108779319836E-2, 0.0, 0.0, 1.70383925712239993810214054705E-1, 1.07262030446373284651809199168E-1, -1.53194377486244017527936158236E-2, 8.27378916381402288758473766002E-3, 0.0, 0.0, 0.0, 0.0],
    [6.24110958716075717114429577812E-1, 0.0, 0.0, -3.36089262944694129406857109825E0, -8.68219346841726006818189891453E-1, 2.75920996994467083049415600797E1, 2.01540675504778934086186788979E1, -4.34898841810699588477366255144E1, 0.0, 0.0, 0.0],
    [4.77662536438264365890433908527E-1, 0.0, 0.0, -2.48811461997166764192642586468E0, -5.90290826836842996371446475743E-1, 2.12300514481811942347288949897E1, 1.52792336328824235832596922938E1, -3.32882109689848629194453265587E1, -2.03312017085086261358222928593E-2, 0.0, 0.0],
    [-9.3714243008598732571704021658E-1, 0.0, 0.0, 5.18637242884406370830023853209E0, 1.09143734899672957818500254654E0, -8.14978701074692612513997267357E0, -1.85200656599969598641566180701E1, 2.27394870993505042818970056734E1, 2.49360555267965238987089396762E0, -3.0467644718982195003823669022E0, 0.0],
    [2.27331014751653820792359768449E0, 0.0, 0.0, -1.05344954667372501984066689879E1, -2.00087205822486249909675718444E0, -1.79589318631187989172765950534E1, 2.79488845294199600508499808837E1, -2.85899827713502369474065508674E0, -8.87285693353062954433549289258E0, 1.23605671757943030647266201528E1, 6.43392746015763530355970484046E-1],
];

const B: [f64; STAGES] = [
    5.42937341165687622380535766363E-2,
    0.0,
    0.0,
    0.0,
    0.0,
    4.45031289275240888144113950566E0,
    1.89151789931450038304281599044E0,
    -5.8012039600105847814672114227E0,
    3.1116436695781989440891606237E-1,
    -1.52160949662516078556178806805E-1,
    2.01365400804030348374776537501E-1,
    4.47106157277725905176885569043E-2,
];

// 5th order error weights
const E5: [f64; STAGES] = [
    0.1312004499419488073250102996E-01,
    0.0,
    0.0,
    0.0,
    0.0,
    -0.1225156446376204440720569753E+01,
    -0.4957589496572501915214079952E+00,
    0.1664377182454986536961530415E+01,
    -0.3503288487499736816886487290E+00,
    0.3341791187130174790297318841E+00,
    0.8192320648511571246570742613E-01,
    -0.2235530786388629525884427845E-01,
];

// 3rd order error weights on stages 1, 9, 12
const BHH: [f64; 3] = [
    0.244094488188976377952755905512E+00,
    0.733846688281611857341361741547E+00,
    0.220588235294117647058823529412E-01,
];

const SAFETY: f64 = 0.9;
const MAX_GROWTH: f64 = 6.0;
const MAX_SHRINK: f64 = 1.0 / 3.0;
const MAX_STEPS: usize = 50_000_000;

/// Mixed absolute/relative local error tolerance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Tolerance {
    pub fn uniform(tol: f64) -> Self {
        Self { rel: tol, abs: tol }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegrationStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// Reusable DOP853 workspace for systems of a fixed dimension.
#[derive(Debug, Clone)]
pub struct Dop853 {
    tol: Tolerance,
    k: Vec<Vec<f64>>,
    stage: Vec<f64>,
    y_new: Vec<f64>,
}

impl Dop853 {
    pub fn new(dim: usize, tol: Tolerance) -> Self {
        Self {
            tol,
            k: vec![vec![0.0; dim]; STAGES],
            stage: vec![0.0; dim],
            y_new: vec![0.0; dim],
        }
    }

    fn scale(&self, a: f64, b: f64) -> f64 {
        self.tol.abs + self.tol.rel * a.abs().max(b.abs())
    }

    fn initial_step(&mut self, sys: &dyn Dynamics, t: f64, y: &[f64], span: f64) -> f64 {
        let n = y.len();
        let dir = span.signum();
        let (mut dnf, mut dny) = (0.0, 0.0);
        for i in 0..n {
            let sk = self.scale(y[i], y[i]);
            dnf += (self.k[0][i] / sk).powi(2);
            dny += (y[i] / sk).powi(2);
        }
        let mut h = if dnf <= 1e-10 || dny <= 1e-10 {
            1e-6
        } else {
            (dny / dnf).sqrt() * 0.01
        };
        h = h.min(span.abs());
        for i in 0..n {
            self.stage[i] = y[i] + dir * h * self.k[0][i];
        }
        sys.rhs(t + dir * h, &self.stage, &mut self.k[1]);
        let mut der2: f64 = 0.0;
        for i in 0..n {
            let sk = self.scale(y[i], y[i]);
            der2 += ((self.k[1][i] - self.k[0][i]) / sk).powi(2);
        }
        let der2 = der2.sqrt() / h;
        let der12 = der2.max(dnf.sqrt());
        let h1 = if der12 <= 1e-15 {
            (h * 1e-3).max(1e-6)
        } else {
            (0.01 / der12).powf(1.0 / 8.0)
        };
        dir * (100.0 * h).min(h1).min(span.abs())
    }

    /// Integrates `y` in place from `t0` to `tf` (either direction).
    pub fn integrate(
        &mut self,
        sys: &dyn Dynamics,
        y: &mut [f64],
        t0: f64,
        tf: f64,
    ) -> Result<IntegrationStats> {
        let n = y.len();
        let mut stats = IntegrationStats::default();
        if tf == t0 {
            return Ok(stats);
        }
        let span = tf - t0;
        let dir = span.signum();
        let mut t = t0;
        sys.rhs(t, y, &mut self.k[0]);
        let mut h = self.initial_step(sys, t, y, span);
        stats.evaluations += 2;

        loop {
            if stats.accepted + stats.rejected > MAX_STEPS {
                return Err(Error::StepUnderflow { t, step: h });
            }
            let last = (t + h - tf) * dir >= 0.0;
            if last {
                h = tf - t;
            }
            if h.abs() <= 1e-14 * t.abs().max(1.0) && !last {
                return Err(Error::StepUnderflow { t, step: h });
            }

            for s in 1..STAGES {
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, a) in A[s][..s].iter().enumerate() {
                        acc += a * self.k[j][i];
                    }
                    self.stage[i] = y[i] + h * acc;
                }
                let (_, rest) = self.k.split_at_mut(s);
                sys.rhs(t + C[s] * h, &self.stage, &mut rest[0]);
            }
            stats.evaluations += STAGES - 1;

            let (mut err5, mut err3) = (0.0, 0.0);
            for i in 0..n {
                let mut incr = 0.0;
                let mut e5 = 0.0;
                for j in 0..STAGES {
                    incr += B[j] * self.k[j][i];
                    e5 += E5[j] * self.k[j][i];
                }
                self.y_new[i] = y[i] + h * incr;
                let e3 =
                    incr - BHH[0] * self.k[0][i] - BHH[1] * self.k[8][i] - BHH[2] * self.k[11][i];
                let sk = self.scale(y[i], self.y_new[i]);
                err5 += (e5 / sk).powi(2);
                err3 += (e3 / sk).powi(2);
            }
            if !self.y_new.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteState { t });
            }
            let mut deno = err5 + 0.01 * err3;
            if deno <= 0.0 {
                deno = 1.0;
            }
            let err = h.abs() * err5 * (1.0 / (n as f64 * deno)).sqrt();
            let fac = err.powf(1.0 / 8.0) / SAFETY;

            if err <= 1.0 {
                stats.accepted += 1;
                t = if last { tf } else { t + h };
                y.copy_from_slice(&self.y_new);
                if last {
                    return Ok(stats);
                }
                sys.rhs(t, y, &mut self.k[0]);
                stats.evaluations += 1;
                let fac = fac.clamp(1.0 / MAX_GROWTH, 1.0 / MAX_SHRINK);
                h /= fac;
            } else {
                stats.rejected += 1;
                h /= fac.min(1.0 / MAX_SHRINK);
            }
        }
    }
}

/// Integrates `x0` from `t0` to `tf` with local tolerance `tol` (relative and
/// absolute).
pub fn integrate(sys: &dyn Dynamics, x0: &[f64], t0: f64, tf: f64, tol: f64) -> Result<Vec<f64>> {
    integrate_with(sys, x0, t0, tf, Tolerance::uniform(tol)).map(|(x, _)| x)
}

pub fn integrate_with(
    sys: &dyn Dynamics,
    x0: &[f64],
    t0: f64,
    tf: f64,
    tol: Tolerance,
) -> Result<(Vec<f64>, IntegrationStats)> {
    if x0.len() != sys.dim() {
        return Err(Error::invalid(format!(
            "state has {} components, system expects {}",
            x0.len(),
            sys.dim()
        )));
    }
    let mut y = x0.to_vec();
    let stats = Dop853::new(sys.dim(), tol).integrate(sys, &mut y, t0, tf)?;
    Ok((y, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Duffing, SystemModel};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn harmonic_period_returns_to_start() {
        let sys = Duffing::harmonic();
        let x = integrate(&sys, &[1.0, 0.0], 0.0, 2.0 * PI, 1e-12).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-8 && x[1].abs() < 1e-8, "{x:?}");
    }

    #[test]
    fn zero_span_is_identity() {
        let sys = Duffing::default();
        let x0 = [0.123, -0.456];
        assert_eq!(integrate(&sys, &x0, 3.0, 3.0, 1e-12).unwrap(), x0.to_vec());
    }

    #[test]
    fn forward_then_backward_recovers_start() {
        let sys = Duffing::default();
        let x0 = [0.4, 0.6];
        let xf = integrate(&sys, &x0, 0.0, 37.0, 1e-12).unwrap();
        let back = integrate(&sys, &xf, 37.0, 0.0, 1e-12).unwrap();
        assert!((back[0] - x0[0]).abs() < 1e-8 && (back[1] - x0[1]).abs() < 1e-8);
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let sys = SystemModel::new(1, false, |_t, x: &[f64], dx: &mut [f64]| {
            dx[0] = -2.0 * x[0]
        });
        let x = integrate(&sys, &[1.0], 0.0, 1.5, 1e-12).unwrap();
        assert_relative_eq!(x[0], (-3.0f64).exp(), max_relative = 1e-10);
    }

    #[test]
    fn time_dependent_rhs() {
        // ẋ = cos t, x(0) = 0 → x(t) = sin t
        let sys = SystemModel::new(1, false, |t, _x: &[f64], dx: &mut [f64]| dx[0] = t.cos());
        let x = integrate(&sys, &[0.0], 0.0, 4.0, 1e-12).unwrap();
        assert_relative_eq!(x[0], 4f64.sin(), epsilon = 1e-10);
    }

    #[test]
    fn duffing_energy_conserved_over_long_horizon() {
        let sys = Duffing::default();
        let x0 = [0.4, 0.6];
        let e0 = sys.energy(&x0);
        let mut x = x0.to_vec();
        let mut solver = Dop853::new(2, Tolerance::uniform(1e-12));
        for k in 0..50 {
            solver
                .integrate(&sys, &mut x, k as f64 * 10.0, (k + 1) as f64 * 10.0)
                .unwrap();
            let rel = (sys.energy(&x) - e0).abs() / e0;
            assert!(rel < 1e-8, "t={} rel={rel:e}", (k + 1) * 10);
        }
    }

    #[test]
    fn blow_up_is_reported() {
        // ẋ = x², x(0) = 1 explodes at t = 1
        let sys = SystemModel::new(1, false, |_t, x: &[f64], dx: &mut [f64]| {
            dx[0] = x[0] * x[0]
        });
        let err = integrate(&sys, &[1.0], 0.0, 2.0, 1e-10).unwrap_err();
        assert!(err.is_numeric(), "{err}");
    }
}
