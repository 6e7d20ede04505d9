//! R² scoring for the reconstruction and generalization tasks, accuracy,
//! finite differences and the STLSQ sparse-regression baseline.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{enumerate_monomials, monomial_term, sample_initial_values, select_first_n_instances, sum_terms, SystemRecord};
use crate::exec::Exec;
use crate::exprtree::{Expr, OdeSystem};
use crate::infer::PredictionLine;
use crate::integrate::{amplitude_ok, solve, SolverConfig, Trajectory};

pub const PASS_THRESHOLD: f64 = 0.9;
pub const GENERALIZATION_REDRAWS: usize = 10;
const GEN_SALT: u64 = 0x6765_6e5f_6976_3031;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {0} values")]
    TooShort(usize),
    #[error("accuracy of an empty outcome set is undefined")]
    Empty,
    #[error("STLSQ needs at least one instance with 3 or more samples")]
    NoData,
    #[error("invalid STLSQ configuration: {0}")]
    Config(String),
}

/// `1 - SS_res / SS_tot` over all values; `None` when `SS_tot = 0` and the
/// prediction is not exact.
pub fn r2(y_true: &[f64], y_pred: &[f64]) -> Result<Option<f64>, EvalError> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if y_true.len() < 2 {
        return Err(EvalError::TooShort(2));
    }
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(a, b)| (a - b).powi(2)).sum();
    if !ss_res.is_finite() {
        return Ok(None);
    }
    if ss_tot == 0.0 {
        return Ok((ss_res == 0.0).then_some(1.0));
    }
    Ok(Some(1.0 - ss_res / ss_tot))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Reconstruction,
    Generalization,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Reconstruction => "reconstruction",
            Task::Generalization => "generalization",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailReason {
    Divergent,
    Parse,
    Undefined,
    BelowThreshold,
}

impl FailReason {
    pub fn name(self) -> &'static str {
        match self {
            FailReason::Divergent => "divergent",
            FailReason::Parse => "parse",
            FailReason::Undefined => "undefined",
            FailReason::BelowThreshold => "below_threshold",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconOutcome {
    /// Pooled R² per instance (`None` when undefined or divergent).
    pub r2: Vec<Option<f64>>,
    /// Per instance, per dimension, for diagnostics.
    pub r2_per_dim: Vec<Vec<Option<f64>>>,
    pub pass: bool,
    pub reason: Option<FailReason>,
}

impl ReconOutcome {
    pub fn min_r2(&self) -> Option<f64> {
        self.r2.iter().try_fold(f64::INFINITY, |m, r| r.map(|r| m.min(r)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenOutcome {
    pub r2: Option<f64>,
    pub pass: bool,
    /// No usable unseen initial value was found; the system is left out.
    pub excluded: bool,
    pub reason: Option<FailReason>,
    pub initial: Vec<f64>,
}

fn score_pair(truth: &Trajectory, pred: &Trajectory) -> (Option<f64>, Vec<Option<f64>>) {
    let pooled = r2(truth.states(), pred.states()).expect("same grid");
    let per_dim = (0..truth.dim()).map(|k| r2(&truth.component(k), &pred.component(k)).expect("same grid")).collect();
    (pooled, per_dim)
}

/// Solves `pred` from every instance's initial value; passes iff the
/// smallest per-instance R² exceeds the threshold.
pub fn reconstruction_score(record: &SystemRecord, pred: &OdeSystem, solver: &SolverConfig) -> ReconOutcome {
    let mut out = ReconOutcome { r2: Vec::new(), r2_per_dim: Vec::new(), pass: false, reason: None };
    if pred.dim() != record.dim() {
        out.reason = Some(FailReason::Parse);
        return out;
    }
    for truth in &record.instances {
        match solve(pred, truth.initial(), truth.times(), solver) {
            Ok(p) => {
                let (pooled, per_dim) = score_pair(truth, &p);
                out.r2.push(pooled);
                out.r2_per_dim.push(per_dim);
            }
            Err(_) => {
                out.r2.push(None);
                out.r2_per_dim.push(vec![None; record.dim()]);
                out.reason.get_or_insert(FailReason::Divergent);
            }
        }
    }
    match out.min_r2() {
        Some(m) if m > PASS_THRESHOLD => out.pass = true,
        Some(_) => out.reason = Some(FailReason::BelowThreshold),
        None => {
            out.reason.get_or_insert(FailReason::Undefined);
        }
    }
    out
}

/// The unseen initial value for a record: standard normal, redrawn while
/// the ground-truth solution diverges or leaves the amplitude bound.
/// Depends only on `(seed, record id)`.
pub fn unseen_initial(record: &SystemRecord, seed: u64, solver: &SolverConfig) -> Option<(Vec<f64>, Trajectory)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ GEN_SALT);
    rng.set_stream(record.id);
    for _ in 0..=GENERALIZATION_REDRAWS {
        let x0 = sample_initial_values(record.dim(), 1, &mut rng).remove(0);
        if let Ok(tr) = solve(&record.system, &x0, record.grid(), solver) {
            if amplitude_ok(&tr) {
                return Some((x0, tr));
            }
        }
    }
    None
}

pub fn generalization_score(record: &SystemRecord, pred: &OdeSystem, seed: u64, solver: &SolverConfig) -> GenOutcome {
    let Some((x0, truth)) = unseen_initial(record, seed, solver) else {
        return GenOutcome { r2: None, pass: false, excluded: true, reason: None, initial: Vec::new() };
    };
    if pred.dim() != record.dim() {
        return GenOutcome { r2: None, pass: false, excluded: false, reason: Some(FailReason::Parse), initial: x0 };
    }
    match solve(pred, &x0, truth.times(), solver) {
        Ok(p) => {
            let (r, _) = score_pair(&truth, &p);
            let pass = r.is_some_and(|r| r > PASS_THRESHOLD);
            let reason = match r {
                None => Some(FailReason::Undefined),
                Some(_) if !pass => Some(FailReason::BelowThreshold),
                _ => None,
            };
            GenOutcome { r2: r, pass, excluded: false, reason, initial: x0 }
        }
        Err(_) => GenOutcome { r2: None, pass: false, excluded: false, reason: Some(FailReason::Divergent), initial: x0 },
    }
}

/// One row of a results file: a system scored on one task at one noise
/// level and instance count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub id: u64,
    pub dim: usize,
    pub instances: usize,
    pub sigma: f64,
    pub task: Task,
    pub r2: Option<f64>,
    pub pass: bool,
    pub excluded: bool,
    pub reason: Option<FailReason>,
}

/// Passes over non-excluded rows.
pub fn accuracy(rows: &[&EvalRow]) -> Result<f64, EvalError> {
    let scored: Vec<&&EvalRow> = rows.iter().filter(|r| !r.excluded).collect();
    if scored.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(scored.iter().filter(|r| r.pass).count() as f64 / scored.len() as f64)
}

/// Scores one prediction (or failure) against its record. The record should
/// already be restricted to the instances the prediction was made from.
pub fn score_prediction(
    model: &str,
    record: &SystemRecord,
    sigma: f64,
    pred: Result<&OdeSystem, FailReason>,
    seed: u64,
    solver: &SolverConfig,
) -> [EvalRow; 2] {
    let base = |task, r2, pass, excluded, reason| EvalRow {
        model: model.to_string(),
        id: record.id,
        dim: record.dim(),
        instances: record.instances.len(),
        sigma,
        task,
        r2,
        pass,
        excluded,
        reason,
    };
    match pred {
        Ok(p) => {
            let rec = reconstruction_score(record, p, solver);
            let gen = generalization_score(record, p, seed, solver);
            [
                base(Task::Reconstruction, rec.min_r2(), rec.pass, false, rec.reason),
                base(Task::Generalization, gen.r2, gen.pass, gen.excluded, gen.reason),
            ]
        }
        Err(reason) => {
            let excluded = unseen_initial(record, seed, solver).is_none();
            [
                base(Task::Reconstruction, None, false, false, Some(reason)),
                base(Task::Generalization, None, false, excluded, (!excluded).then_some(reason)),
            ]
        }
    }
}

/// Scores prediction lines against a corpus. Each line names the record id
/// and how many leading instances were used.
pub fn evaluate_predictions(
    model: &str,
    records: &[SystemRecord],
    predictions: &[PredictionLine],
    seed: u64,
    solver: &SolverConfig,
    exec: Exec,
) -> Result<Vec<EvalRow>, String> {
    let by_id: BTreeMap<u64, &SystemRecord> = records.iter().map(|r| (r.id, r)).collect();
    let rows = exec.map(predictions, |p| -> Result<[EvalRow; 2], String> {
        let rec = by_id.get(&p.id).ok_or_else(|| format!("prediction for unknown system {}", p.id))?;
        let rec = select_first_n_instances(rec, p.instances).map_err(|e| e.to_string())?;
        let sys = p.system();
        let pred = sys.as_ref().map_err(|_| FailReason::Parse);
        Ok(score_prediction(model, &rec, p.sigma, pred, seed, solver))
    });
    let mut out = Vec::with_capacity(rows.len() * 2);
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

pub fn write_results_csv(w: &mut dyn Write, rows: &[EvalRow]) -> std::io::Result<()> {
    writeln!(w, "model,id,dim,instances,sigma,task,r2,pass,excluded,reason")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.model,
            r.id,
            r.dim,
            r.instances,
            r.sigma,
            r.task.name(),
            fmt_opt(r.r2),
            r.pass as u8,
            r.excluded as u8,
            r.reason.map(|x| x.name()).unwrap_or("")
        )?;
    }
    w.flush()
}

pub fn read_results_csv(text: &str) -> Result<Vec<EvalRow>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty results file")?;
    if header.trim() != "model,id,dim,instances,sigma,task,r2,pass,excluded,reason" {
        return Err("unexpected results header".into());
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || format!("results line {}: malformed", i + 2);
        if f.len() != 10 {
            return Err(bad());
        }
        let task = match f[5] {
            "reconstruction" => Task::Reconstruction,
            "generalization" => Task::Generalization,
            _ => return Err(bad()),
        };
        let reason = match f[9] {
            "" => None,
            "divergent" => Some(FailReason::Divergent),
            "parse" => Some(FailReason::Parse),
            "undefined" => Some(FailReason::Undefined),
            "below_threshold" => Some(FailReason::BelowThreshold),
            _ => return Err(bad()),
        };
        rows.push(EvalRow {
            model: f[0].to_string(),
            id: f[1].parse().map_err(|_| bad())?,
            dim: f[2].parse().map_err(|_| bad())?,
            instances: f[3].parse().map_err(|_| bad())?,
            sigma: f[4].parse().map_err(|_| bad())?,
            task,
            r2: if f[6].is_empty() { None } else { Some(f[6].parse().map_err(|_| bad())?) },
            pass: f[7] == "1",
            excluded: f[8] == "1",
            reason,
        });
    }
    Ok(rows)
}

/// Accuracy per (model, dim, instances, sigma, task).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub dim: usize,
    pub instances: usize,
    pub sigma: f64,
    pub task: Task,
    pub systems: usize,
    pub excluded: usize,
    pub accuracy: f64,
}

pub fn summarize(rows: &[EvalRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, usize, usize, u64, Task), Vec<&EvalRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.model.clone(), r.dim, r.instances, r.sigma.to_bits(), r.task)).or_default().push(r);
    }
    groups
        .into_iter()
        .filter_map(|((model, dim, instances, sigma, task), rs)| {
            let acc = accuracy(&rs).ok()?;
            Some(SummaryRow {
                model,
                dim,
                instances,
                sigma: f64::from_bits(sigma),
                task,
                systems: rs.len(),
                excluded: rs.iter().filter(|r| r.excluded).count(),
                accuracy: acc,
            })
        })
        .collect()
}

pub fn write_summary_csv(w: &mut dyn Write, rows: &[SummaryRow]) -> std::io::Result<()> {
    writeln!(w, "model,dim,instances,sigma,task,systems,excluded,accuracy")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{},{},{:.6}", r.model, r.dim, r.instances, r.sigma, r.task.name(), r.systems, r.excluded, r.accuracy)?;
    }
    w.flush()
}

/// Derivative estimates, `s x D` row-major: second-order central
/// differences inside, second-order one-sided at both ends (non-uniform
/// spacing allowed).
pub fn finite_diff(traj: &Trajectory) -> Result<Vec<f64>, EvalError> {
    let (s, d, t) = (traj.len(), traj.dim(), traj.times());
    if s < 3 {
        return Err(EvalError::TooShort(3));
    }
    let x = traj.states();
    let at = |i: usize, k: usize| x[i * d + k];
    let mut out = vec![0.0; s * d];
    for k in 0..d {
        let (h1, h2) = (t[1] - t[0], t[2] - t[1]);
        out[k] = -(2.0 * h1 + h2) / (h1 * (h1 + h2)) * at(0, k) + (h1 + h2) / (h1 * h2) * at(1, k)
            - h1 / (h2 * (h1 + h2)) * at(2, k);
        for i in 1..s - 1 {
            let (h1, h2) = (t[i] - t[i - 1], t[i + 1] - t[i]);
            out[i * d + k] = -h2 / (h1 * (h1 + h2)) * at(i - 1, k) + (h2 - h1) / (h1 * h2) * at(i, k)
                + h1 / (h2 * (h1 + h2)) * at(i + 1, k);
        }
        let (h1, h2) = (t[s - 2] - t[s - 3], t[s - 1] - t[s - 2]);
        out[(s - 1) * d + k] = h2 / (h1 * (h1 + h2)) * at(s - 3, k) - (h1 + h2) / (h1 * h2) * at(s - 2, k)
            + (2.0 * h2 + h1) / (h2 * (h1 + h2)) * at(s - 1, k);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StlsqConfig {
    pub threshold: f64,
    pub max_iter: usize,
    pub degree: u32,
}

impl Default for StlsqConfig {
    fn default() -> Self {
        Self { threshold: 0.1, max_iter: 400, degree: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StlsqFit {
    pub system: OdeSystem,
    /// Library exponent vectors, one per column of `coefficients`.
    pub library: Vec<Vec<u32>>,
    /// `coefficients[k][j]`: weight of library term `j` in equation `k`.
    pub coefficients: Vec<Vec<f64>>,
    pub rows: usize,
    /// The library matrix was rank deficient; minimum-norm solutions were used.
    pub rank_deficient: bool,
}

fn monomial_value(x: &[f64], exps: &[u32]) -> f64 {
    x.iter().zip(exps).map(|(v, &e)| v.powi(e as i32)).product()
}

/// Minimum-norm least squares on the columns in `support`.
fn lstsq(theta: &DMatrix<f64>, y: &DVector<f64>, support: &[usize]) -> (Vec<f64>, bool) {
    let mut full = vec![0.0; theta.ncols()];
    if support.is_empty() {
        return (full, false);
    }
    let sub = theta.select_columns(support);
    let dims = sub.nrows().max(sub.ncols()) as f64;
    let svd = sub.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * f64::EPSILON * dims;
    let deficient = svd.rank(tol) < support.len();
    let sol = svd.solve(y, tol).expect("u and v were computed");
    for (i, &c) in support.iter().enumerate() {
        full[c] = sol[i];
    }
    (full, deficient)
}

/// Sequentially thresholded least squares over the monomial library, with
/// data rows stacked across all instances.
pub fn stlsq_fit(instances: &[Trajectory], cfg: &StlsqConfig) -> Result<StlsqFit, EvalError> {
    if !(cfg.threshold > 0.0) {
        return Err(EvalError::Config("threshold must be positive".into()));
    }
    let first = instances.first().ok_or(EvalError::NoData)?;
    let d = first.dim();
    let library = enumerate_monomials(d, cfg.degree);
    let mut xs: Vec<&[f64]> = Vec::new();
    let mut dx: Vec<f64> = Vec::new();
    for tr in instances {
        if tr.dim() != d {
            return Err(EvalError::LengthMismatch(tr.dim(), d));
        }
        dx.extend(finite_diff(tr)?);
        xs.extend(tr.rows());
    }
    let n = xs.len();
    let theta = DMatrix::from_fn(n, library.len(), |i, j| monomial_value(xs[i], &library[j]));
    let mut coefficients = Vec::with_capacity(d);
    let mut rank_deficient = false;
    for k in 0..d {
        let y = DVector::from_fn(n, |i, _| dx[i * d + k]);
        let mut support: Vec<usize> = (0..library.len()).collect();
        let (mut xi, def) = lstsq(&theta, &y, &support);
        rank_deficient |= def;
        for _ in 0..cfg.max_iter {
            let keep: Vec<usize> = support.iter().copied().filter(|&j| xi[j].abs() >= cfg.threshold).collect();
            if keep == support {
                break;
            }
            support = keep;
            let (next, def) = lstsq(&theta, &y, &support);
            rank_deficient |= def;
            xi = next;
        }
        coefficients.push(xi);
    }
    let eqs = coefficients
        .iter()
        .map(|xi| {
            let terms: Vec<Expr> =
                xi.iter().zip(&library).filter(|(c, _)| **c != 0.0).map(|(c, e)| monomial_term(*c, e)).collect();
            if terms.is_empty() {
                Expr::Const(0.0)
            } else {
                sum_terms(terms)
            }
        })
        .collect();
    let system = OdeSystem::new(eqs).expect("library terms are valid");
    Ok(StlsqFit { system, library, coefficients, rows: n, rank_deficient })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::{default_grid, uniform_grid};

    #[test]
    fn r2_examples() {
        assert_eq!(r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), Some(1.0));
        assert_eq!(r2(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), Some(0.0));
        assert_eq!(r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap(), Some(0.5));
        assert_eq!(r2(&[5.0, 5.0], &[5.0, 5.0]).unwrap(), Some(1.0));
        assert_eq!(r2(&[5.0, 5.0], &[5.0, 6.0]).unwrap(), None);
        assert_eq!(r2(&[1.0], &[1.0]), Err(EvalError::TooShort(2)));
        assert_eq!(r2(&[1.0, 2.0], &[1.0]), Err(EvalError::LengthMismatch(2, 1)));
    }

    #[test]
    fn finite_diff_oracles() {
        let t = default_grid();
        let lin = Trajectory::new(t.clone(), t.iter().map(|t| 2.0 * t).collect(), 1).unwrap();
        assert!(finite_diff(&lin).unwrap().iter().all(|d| (d - 2.0).abs() < 1e-12));
        let sq = Trajectory::new(t.clone(), t.iter().map(|t| t * t).collect(), 1).unwrap();
        for (d, t) in finite_diff(&sq).unwrap().iter().zip(&t) {
            assert!((d - 2.0 * t).abs() < 1e-10);
        }
        let h = t[1] - t[0];
        let s = Trajectory::new(t.clone(), t.iter().map(|t| t.sin()).collect(), 1).unwrap();
        let err = finite_diff(&s).unwrap().iter().zip(&t).map(|(d, t)| (d - t.cos()).abs()).fold(0.0, f64::max);
        assert!(err <= h * h, "{err} > {}", h * h);
        // non-uniform spacing stays exact for quadratics
        let tn = vec![0.0, 0.1, 0.3, 0.35, 0.9];
        let q = Trajectory::new(tn.clone(), tn.iter().map(|t| 3.0 * t * t - t).collect(), 1).unwrap();
        for (d, t) in finite_diff(&q).unwrap().iter().zip(&tn) {
            assert!((d - (6.0 * t - 1.0)).abs() < 1e-12);
        }
    }

    fn record_for(sys: OdeSystem, x0s: &[Vec<f64>]) -> SystemRecord {
        let grid = default_grid();
        let instances = x0s.iter().map(|x| solve(&sys, x, &grid, &SolverConfig::default()).unwrap()).collect();
        SystemRecord { id: 3, system: sys, instances, sigma: 0.0, generator: crate::datagen::Generator::Poly, seed: 1 }
    }

    #[test]
    fn self_scoring_passes() {
        let sys = OdeSystem::new(vec![Expr::mul(Expr::Const(-0.5), Expr::var(0))]).unwrap();
        let rec = record_for(sys.clone(), &[vec![1.0], vec![-2.0]]);
        let out = reconstruction_score(&rec, &sys, &SolverConfig::default());
        assert!(out.pass && out.r2.iter().all(|r| r.unwrap() > 0.999));
        let g = generalization_score(&rec, &sys, 7, &SolverConfig::default());
        assert!(g.pass && !g.excluded);
        assert_eq!(g.initial, generalization_score(&rec, &sys, 7, &SolverConfig::default()).initial);
        let zero = OdeSystem::new(vec![Expr::Const(0.0)]).unwrap();
        let g = generalization_score(&rec, &zero, 7, &SolverConfig::default());
        assert!(!g.pass && g.r2.unwrap() < 0.9);
    }

    #[test]
    fn min_rule_and_divergence() {
        let sys = OdeSystem::new(vec![Expr::mul(Expr::Const(-0.5), Expr::var(0))]).unwrap();
        let rec = record_for(sys, &[vec![1.0], vec![0.5]]);
        // x^2 from x0 = 1 blows up at t = 1
        let bad = OdeSystem::new(vec![Expr::unary(crate::exprtree::UnaryOp::Square, Expr::var(0))]).unwrap();
        let out = reconstruction_score(&rec, &bad, &SolverConfig::default());
        assert!(!out.pass);
        assert_eq!(out.reason, Some(FailReason::Divergent));
    }

    #[test]
    fn accuracy_rules() {
        let row = |pass, excluded| EvalRow {
            model: "m".into(),
            id: 0,
            dim: 1,
            instances: 1,
            sigma: 0.0,
            task: Task::Reconstruction,
            r2: None,
            pass,
            excluded,
            reason: None,
        };
        let rows = [row(true, false), row(false, false), row(false, true)];
        let refs: Vec<&EvalRow> = rows.iter().collect();
        assert_eq!(accuracy(&refs).unwrap(), 0.5);
        assert_eq!(accuracy(&refs[..1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[]), Err(EvalError::Empty));
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &rows).unwrap();
        assert_eq!(read_results_csv(std::str::from_utf8(&buf).unwrap()).unwrap(), rows);
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].systems, s[0].excluded, s[0].accuracy), (3, 1, 0.5));
    }

    #[test]
    fn stlsq_recovers_decay() {
        let sys = OdeSystem::new(vec![Expr::mul(Expr::Const(-0.5), Expr::var(0))]).unwrap();
        let rec = record_for(sys, &[vec![1.0], vec![-2.0], vec![0.5], vec![1.5]]);
        let fit = stlsq_fit(&rec.instances, &StlsqConfig::default()).unwrap();
        assert_eq!(fit.rows, 400);
        assert_eq!(fit.library, vec![vec![0], vec![1], vec![2], vec![3]]);
        let c = &fit.coefficients[0];
        assert!((c[1] + 0.5).abs() < 0.01, "{c:?}");
        assert!(c[0] == 0.0 && c[2] == 0.0 && c[3] == 0.0, "{c:?}");
        let t = uniform_grid(0.0, 1.0, 2);
        let short = Trajectory::new(t, vec![0.0, 1.0], 1).unwrap();
        assert_eq!(stlsq_fit(&[short], &StlsqConfig::default()), Err(EvalError::TooShort(3)));
    }
}
