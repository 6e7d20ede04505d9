//! Trajectories and an adaptive Dormand-Prince 5(4) integrator with dense
//! output, plus the corpus amplitude filter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exprtree::OdeSystem;

/// Corpus amplitude bound: trajectories with any `|x| > 100` are rejected.
pub const AMPLITUDE_LIMIT: f64 = 100.0;
/// Early-exit bound used inside the solver.
pub const BLOWUP_LIMIT: f64 = 1e6;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("times must be strictly increasing")]
    NonIncreasingTimes,
    #[error("state matrix has {got} entries, expected {expected}")]
    ShapeMismatch { got: usize, expected: usize },
    #[error("non-finite state value")]
    NonFinite,
    #[error("empty trajectory")]
    Empty,
}

/// Time grid plus an `s x D` state matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<f64>,
    dim: usize,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<f64>, dim: usize) -> Result<Self, TrajectoryError> {
        if times.is_empty() || dim == 0 {
            return Err(TrajectoryError::Empty);
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(TrajectoryError::NonIncreasingTimes);
        }
        if states.len() != times.len() * dim {
            return Err(TrajectoryError::ShapeMismatch { got: states.len(), expected: times.len() * dim });
        }
        if states.iter().chain(&times).any(|v| !v.is_finite()) {
            return Err(TrajectoryError::NonFinite);
        }
        Ok(Self { times, states, dim })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.states.chunks_exact(self.dim)
    }

    pub fn initial(&self) -> &[f64] {
        self.row(0)
    }

    /// Component `k` over time.
    pub fn component(&self, k: usize) -> Vec<f64> {
        self.rows().map(|r| r[k]).collect()
    }

    /// Same grid, states transformed entrywise.
    pub fn map_states(&self, mut f: impl FnMut(usize, f64) -> f64) -> Trajectory {
        let states = self.states.iter().enumerate().map(|(i, &x)| f(i, x)).collect();
        Trajectory { times: self.times.clone(), states, dim: self.dim }
    }

    pub fn max_abs(&self) -> f64 {
        self.states.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

/// `n` equidistant points on `[t0, t1]`.
pub fn uniform_grid(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && t1 > t0, "grid needs n >= 2 and t1 > t0");
    let h = (t1 - t0) / (n - 1) as f64;
    (0..n).map(|i| if i + 1 == n { t1 } else { t0 + h * i as f64 }).collect()
}

/// The standard evaluation grid: 100 points on `[1, 10]`.
pub fn default_grid() -> Vec<f64> {
    uniform_grid(1.0, 10.0, 100)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { rtol: 1e-3, atol: 1e-6, max_steps: 20_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Divergence {
    NonFiniteRhs,
    StepLimit,
    BlowUp,
    StepUnderflow,
}

#[derive(Debug, Error, PartialEq)]
pub enum SolveError {
    #[error("integration diverged: {0:?}")]
    Divergent(Divergence),
    #[error("initial value has {got} components, system has dimension {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("grid must have at least two strictly increasing points")]
    BadGrid,
    #[error("invalid solver tolerances")]
    BadConfig,
}

impl SolveError {
    pub fn is_divergent(&self) -> bool {
        matches!(self, SolveError::Divergent(_))
    }
}

// Dormand-Prince 5(4) tableau. The systems are autonomous, so the nodes c_i are unused.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// dense output
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

struct Stages {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y1: Vec<f64>,
    err: Vec<f64>,
}

impl Stages {
    fn new(d: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; d]),
            tmp: vec![0.0; d],
            y1: vec![0.0; d],
            err: vec![0.0; d],
        }
    }
}

fn rhs_checked(sys: &OdeSystem, x: &[f64], out: &mut [f64]) -> Result<(), SolveError> {
    sys.rhs(x, out);
    if out.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SolveError::Divergent(Divergence::NonFiniteRhs))
    }
}

fn rms_norm(v: &[f64], y0: &[f64], y1: &[f64], cfg: &SolverConfig) -> f64 {
    let s: f64 = v
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sk = cfg.atol + cfg.rtol * a.abs().max(b.abs());
            (e / sk).powi(2)
        })
        .sum();
    (s / v.len() as f64).sqrt()
}

/// Hairer's starting step heuristic.
fn initial_step(sys: &OdeSystem, y0: &[f64], f0: &[f64], span: f64, cfg: &SolverConfig) -> Result<f64, SolveError> {
    let d = y0.len();
    let sk: Vec<f64> = y0.iter().map(|y| cfg.atol + cfg.rtol * y.abs()).collect();
    let dnf = (f0.iter().zip(&sk).map(|(f, s)| (f / s).powi(2)).sum::<f64>() / d as f64).sqrt();
    let dny = (y0.iter().zip(&sk).map(|(y, s)| (y / s).powi(2)).sum::<f64>() / d as f64).sqrt();
    let mut h = if dnf <= 1e-10 || dny <= 1e-10 { 1e-6 } else { 0.01 * dny / dnf };
    h = h.min(span);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + h * f).collect();
    let mut f1 = vec![0.0; d];
    rhs_checked(sys, &y1, &mut f1)?;
    let der2 = (f1
        .iter()
        .zip(f0)
        .zip(&sk)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum::<f64>()
        / d as f64)
        .sqrt()
        / h;
    let der12 = der2.max(dnf);
    let h1 = if der12 <= 1e-15 { (h * 1e-3).max(1e-6) } else { (0.01 / der12).powf(0.2) };
    Ok((100.0 * h).min(h1).min(span))
}

/// Integrates `system` from `x0` at `grid[0]` and samples the dense output at
/// every grid point. Divergence is reported as [`SolveError::Divergent`].
pub fn solve(system: &OdeSystem, x0: &[f64], grid: &[f64], cfg: &SolverConfig) -> Result<Trajectory, SolveError> {
    let d = system.dim();
    if x0.len() != d {
        return Err(SolveError::DimensionMismatch { got: x0.len(), expected: d });
    }
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SolveError::BadGrid);
    }
    if !(cfg.rtol > 0.0 && cfg.atol > 0.0) {
        return Err(SolveError::BadConfig);
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(SolveError::Divergent(Divergence::NonFiniteRhs));
    }

    let t_end = *grid.last().unwrap();
    let mut t = grid[0];
    let mut y = x0.to_vec();
    let mut out = Vec::with_capacity(grid.len() * d);
    out.extend_from_slice(&y);
    let mut next = 1;

    let mut st = Stages::new(d);
    rhs_checked(system, &y, &mut st.k[0])?;
    let mut h = initial_step(system, &y, &st.k[0], t_end - t, cfg)?;
    let mut rejected_last = false;
    let mut cont = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];

    for _ in 0..cfg.max_steps {
        if next == grid.len() {
            break;
        }
        if h < 1e-12 * t.abs().max(1.0) {
            return Err(SolveError::Divergent(Divergence::StepUnderflow));
        }
        if t + 1.01 * h >= t_end {
            h = t_end - t;
        }
        let Stages { k, tmp, y1, err } = &mut st;
        macro_rules! stage {
            ($dst:expr, $($a:expr => $ki:expr),+) => {{
                for i in 0..d {
                    tmp[i] = y[i] + h * (0.0 $(+ $a * k[$ki][i])+);
                }
                rhs_checked(system, tmp, &mut k[$dst])?;
            }};
        }
        stage!(1, A21 => 0);
        stage!(2, A31 => 0, A32 => 1);
        stage!(3, A41 => 0, A42 => 1, A43 => 2);
        stage!(4, A51 => 0, A52 => 1, A53 => 2, A54 => 3);
        stage!(5, A61 => 0, A62 => 1, A63 => 2, A64 => 3, A65 => 4);
        for i in 0..d {
            y1[i] = y[i] + h * (A71 * k[0][i] + A73 * k[2][i] + A74 * k[3][i] + A75 * k[4][i] + A76 * k[5][i]);
        }
        rhs_checked(system, y1, &mut k[6])?;
        for i in 0..d {
            err[i] = h * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i] + E7 * k[6][i]);
        }
        let e = rms_norm(err, &y, y1, cfg);
        if !e.is_finite() {
            return Err(SolveError::Divergent(Divergence::NonFiniteRhs));
        }

        if e <= 1.0 {
            let t_new = t + h;
            for i in 0..d {
                let ydiff = y1[i] - y[i];
                let bspl = h * k[0][i] - ydiff;
                cont[0][i] = y[i];
                cont[1][i] = ydiff;
                cont[2][i] = bspl;
                cont[3][i] = ydiff - h * k[6][i] - bspl;
                cont[4][i] = h * (D1 * k[0][i] + D3 * k[2][i] + D4 * k[3][i] + D5 * k[4][i] + D6 * k[5][i] + D7 * k[6][i]);
            }
            while next < grid.len() && grid[next] <= t_new {
                let theta = (grid[next] - t) / h;
                let theta1 = 1.0 - theta;
                for i in 0..d {
                    let v = cont[0][i]
                        + theta * (cont[1][i] + theta1 * (cont[2][i] + theta * (cont[3][i] + theta1 * cont[4][i])));
                    out.push(v);
                }
                next += 1;
            }
            t = t_new;
            y.copy_from_slice(y1);
            if y.iter().any(|v| v.abs() > BLOWUP_LIMIT) {
                return Err(SolveError::Divergent(Divergence::BlowUp));
            }
            let (k0, rest) = k.split_at_mut(1);
            k0[0].copy_from_slice(&rest[5]);
            let mut fac = (0.9 * e.max(1e-10).powf(-0.2)).clamp(0.2, 10.0);
            if rejected_last {
                fac = fac.min(1.0);
            }
            h *= fac;
            rejected_last = false;
        } else {
            h *= (0.9 * e.powf(-0.2)).clamp(0.2, 1.0);
            rejected_last = true;
        }
    }
    if next < grid.len() {
        return Err(SolveError::Divergent(Divergence::StepLimit));
    }
    if out.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_LIMIT) {
        return Err(SolveError::Divergent(Divergence::BlowUp));
    }
    Ok(Trajectory { times: grid.to_vec(), states: out, dim: d })
}

/// `max |x| <= 100` over every entry; the bound itself passes.
pub fn amplitude_ok(traj: &Trajectory) -> bool {
    traj.states.iter().all(|x| x.abs() <= AMPLITUDE_LIMIT)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprtree::{Expr, UnaryOp};

    fn sys(eqs: Vec<Expr>) -> OdeSystem {
        OdeSystem::new(eqs).unwrap()
    }

    #[test]
    fn exponential_decay() {
        let s = sys(vec![Expr::mul(Expr::Const(-1.0), Expr::var(0))]);
        let tr = solve(&s, &[1.0], &default_grid(), &SolverConfig::default()).unwrap();
        let last = tr.row(99)[0];
        let exact = (-9.0f64).exp();
        assert!(((last - exact) / exact).abs() <= 1e-2, "{last} vs {exact}");
        assert_eq!(tr.row(0), &[1.0]);
    }

    #[test]
    fn harmonic_oscillator() {
        let s = sys(vec![Expr::var(1), Expr::mul(Expr::Const(-1.0), Expr::var(0))]);
        let grid = default_grid();
        let tr = solve(&s, &[1.0, 0.0], &grid, &SolverConfig::default()).unwrap();
        let err = grid
            .iter()
            .enumerate()
            .map(|(i, t)| (tr.row(i)[0] - (t - 1.0).cos()).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-2, "max err {err}");
    }

    #[test]
    fn finite_time_blowup_is_divergent() {
        let s = sys(vec![Expr::unary(UnaryOp::Square, Expr::var(0))]);
        let r = solve(&s, &[1.0], &default_grid(), &SolverConfig::default());
        assert!(r.unwrap_err().is_divergent());
    }

    #[test]
    fn singular_rhs_is_divergent() {
        let s = sys(vec![Expr::unary(UnaryOp::Inv, Expr::var(0))]);
        let r = solve(&s, &[0.0], &default_grid(), &SolverConfig::default());
        assert_eq!(r.unwrap_err(), SolveError::Divergent(Divergence::NonFiniteRhs));
    }

    #[test]
    fn amplitude_filter() {
        let zero = Trajectory::new(vec![0.0, 1.0], vec![0.0, 0.0], 1).unwrap();
        assert!(amplitude_ok(&zero));
        let edge = Trajectory::new(vec![0.0, 1.0], vec![3.0, -100.0], 1).unwrap();
        assert!(amplitude_ok(&edge));
        let s = sys(vec![Expr::var(0)]);
        let tr = solve(&s, &[1.0], &default_grid(), &SolverConfig::default()).unwrap();
        assert!((tr.row(99)[0] - 9f64.exp()).abs() / 9f64.exp() < 1e-2);
        assert!(!amplitude_ok(&tr));
    }

    #[test]
    fn input_validation() {
        let s = sys(vec![Expr::var(0)]);
        assert_eq!(
            solve(&s, &[1.0, 2.0], &default_grid(), &SolverConfig::default()).unwrap_err(),
            SolveError::DimensionMismatch { got: 2, expected: 1 }
        );
        assert_eq!(solve(&s, &[1.0], &[1.0], &SolverConfig::default()).unwrap_err(), SolveError::BadGrid);
        assert!(Trajectory::new(vec![1.0, 1.0], vec![0.0, 0.0], 1).is_err());
    }

    #[test]
    fn grid_endpoints() {
        let g = default_grid();
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], 1.0);
        assert_eq!(g[99], 10.0);
    }
}
