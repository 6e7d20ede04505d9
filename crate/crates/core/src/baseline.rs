//! STLSQ baseline run through the same prediction and scoring path as the
//! learned model.

use std::collections::BTreeMap;

use crate::corpus::system_to_strings;
use crate::datagen::{select_first_n_instances, SystemRecord};
use crate::eval::{score_prediction, stlsq_fit, EvalError, EvalRow, FailReason, StlsqConfig};
use crate::exec::Exec;
use crate::exprtree::{BinaryOp, Expr, OdeSystem, UnaryOp};
use crate::infer::PredictionLine;
use crate::integrate::SolverConfig;

pub const BASELINE_MODEL: &str = "stlsq";
pub const NOISE_GRID: [f64; 4] = [0.0, 0.01, 0.05, 0.1];
pub const INSTANCE_COUNTS: [usize; 4] = [1, 2, 3, 4];

pub type Poly = BTreeMap<Vec<u32>, f64>;

/// Expands a polynomial expression into monomial coefficients; `None` if it
/// contains `sin` or `inv`.
pub fn expand_polynomial(e: &Expr, dim: usize) -> Option<Poly> {
    let mut out = Poly::new();
    match e {
        Expr::Const(c) => {
            out.insert(vec![0; dim], *c);
        }
        Expr::Var(i) => {
            let mut m = vec![0; dim];
            *m.get_mut(*i)? = 1;
            out.insert(m, 1.0);
        }
        Expr::Unary(UnaryOp::Id, a) => return expand_polynomial(a, dim),
        Expr::Unary(UnaryOp::Square, a) => {
            let p = expand_polynomial(a, dim)?;
            return Some(poly_mul(&p, &p));
        }
        Expr::Unary(_, _) => return None,
        Expr::Binary(BinaryOp::Add, a, b) => {
            out = expand_polynomial(a, dim)?;
            for (m, c) in expand_polynomial(b, dim)? {
                *out.entry(m).or_insert(0.0) += c;
            }
        }
        Expr::Binary(BinaryOp::Mul, a, b) => return Some(poly_mul(&expand_polynomial(a, dim)?, &expand_polynomial(b, dim)?)),
    }
    Some(out)
}

fn poly_mul(a: &Poly, b: &Poly) -> Poly {
    let mut out = Poly::new();
    for (ma, ca) in a {
        for (mb, cb) in b {
            let m: Vec<u32> = ma.iter().zip(mb).map(|(x, y)| x + y).collect();
            *out.entry(m).or_insert(0.0) += ca * cb;
        }
    }
    out
}

/// Largest absolute coefficient difference between a fitted system and a
/// polynomial ground truth, over the union of their monomials.
pub fn coefficient_error(fit: &OdeSystem, truth: &OdeSystem) -> Option<f64> {
    if fit.dim() != truth.dim() {
        return None;
    }
    let d = truth.dim();
    let mut worst: f64 = 0.0;
    for (f, t) in fit.equations().iter().zip(truth.equations()) {
        let (pf, pt) = (expand_polynomial(f, d)?, expand_polynomial(t, d)?);
        for m in pf.keys().chain(pt.keys()) {
            let a = pf.get(m).copied().unwrap_or(0.0);
            let b = pt.get(m).copied().unwrap_or(0.0);
            worst = worst.max((a - b).abs());
        }
    }
    Some(worst)
}

pub fn prediction_line(id: u64, instances: usize, sigma: f64, fit: &Result<OdeSystem, EvalError>) -> PredictionLine {
    match fit {
        Ok(sys) => PredictionLine {
            id,
            instances,
            sigma,
            expressions: Some(system_to_strings(sys)),
            infix: Some(sys.render_inline()),
            tokens: Vec::new(),
            r: 1.0,
            scores: Vec::new(),
            error: None,
        },
        Err(e) => PredictionLine {
            id,
            instances,
            sigma,
            expressions: None,
            infix: None,
            tokens: Vec::new(),
            r: 1.0,
            scores: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

#[derive(Debug, Clone)]
pub struct BaselineConfig {
    pub stlsq: StlsqConfig,
    pub instance_counts: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            stlsq: StlsqConfig::default(),
            instance_counts: INSTANCE_COUNTS.to_vec(),
            sigmas: NOISE_GRID.to_vec(),
            seed: 0,
            solver: SolverConfig::default(),
        }
    }
}

/// Fits on the first `n` noisy instances of every system for every `(n, σ)`
/// and scores against the noiseless record. Counts larger than a record's
/// instance count are skipped for that record.
pub fn run_baseline(records: &[SystemRecord], cfg: &BaselineConfig, exec: Exec) -> (Vec<PredictionLine>, Vec<EvalRow>) {
    let mut jobs = Vec::new();
    for rec in records {
        for &n in &cfg.instance_counts {
            if n == 0 || n > rec.instances.len() {
                continue;
            }
            for &sigma in &cfg.sigmas {
                jobs.push((rec, n, sigma));
            }
        }
    }
    let results = exec.map(&jobs, |&(rec, n, sigma)| {
        let sub = select_first_n_instances(rec, n).expect("n checked above");
        let fit = stlsq_fit(&sub.observed(sigma), &cfg.stlsq).map(|f| f.system);
        let line = prediction_line(rec.id, n, sigma, &fit);
        let pred = fit.as_ref().map_err(|_| FailReason::Parse);
        let rows = score_prediction(BASELINE_MODEL, &sub, sigma, pred, cfg.seed, &cfg.solver);
        (line, rows)
    });
    let mut lines = Vec::with_capacity(results.len());
    let mut rows = Vec::with_capacity(results.len() * 2);
    for (l, r) in results {
        lines.push(l);
        rows.extend(r);
    }
    (lines, rows)
}
