//! Random ODE systems (polynomial and operator-tree generators), initial
//! values, multiplicative noise, and multi-instance corpus assembly.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::exprtree::{BinaryOp, Expr, OdeSystem, UnaryOp, MAX_DIM};
use crate::integrate::{amplitude_ok, solve, uniform_grid, SolverConfig, Trajectory};
use crate::tokenizer::encode_trajectory;

/// Upper bound on instances per system.
pub const MAX_INSTANCES: usize = 4;
const NOISE_SALT: u64 = 0x6e6f_6973_655f_7631;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("requested {requested} instances but the record has {available}")]
    NotEnoughInstances { requested: usize, available: usize },
    #[error("instance count must be at least 1")]
    NoInstances,
    #[error("generation stalled for record {id}: {rejected} consecutive rejections")]
    Stalled { id: u64, rejected: usize },
    #[error("invalid corpus configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyGenConfig {
    pub max_order: u32,
    pub max_terms: usize,
    pub terms_mean: f64,
    pub terms_std: f64,
    pub coeff_log_mean: f64,
    pub coeff_log_std: f64,
    pub decimals: i32,
}

impl Default for PolyGenConfig {
    fn default() -> Self {
        Self { max_order: 3, max_terms: 5, terms_mean: 2.0, terms_std: 2.0, coeff_log_mean: 0.0, coeff_log_std: 1.0, decimals: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeGenConfig {
    pub max_binary: usize,
    pub max_unary: usize,
    pub const_min: f64,
    pub const_max: f64,
    pub max_depth: usize,
    /// sin, square, inverse, identity
    pub unary_probs: [f64; 4],
    /// add, mul
    pub binary_probs: [f64; 2],
    /// Probability that a leaf is a variable rather than a constant.
    pub leaf_var_prob: f64,
}

impl Default for TreeGenConfig {
    fn default() -> Self {
        Self {
            max_binary: 5,
            max_unary: 3,
            const_min: 0.05,
            const_max: 20.0,
            max_depth: 6,
            unary_probs: [1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 0.5],
            binary_probs: [0.75, 0.25],
            leaf_var_prob: 0.75,
        }
    }
}

impl TreeGenConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let ok = |p: &[f64]| (p.iter().sum::<f64>() - 1.0).abs() < 1e-9 && p.iter().all(|v| *v >= 0.0);
        if !ok(&self.unary_probs) || !ok(&self.binary_probs) {
            return Err(DataError::Config("operator probabilities must sum to 1".into()));
        }
        if self.max_depth == 0 || !(self.const_min > 0.0 && self.const_max > self.const_min) {
            return Err(DataError::Config("tree bounds must be positive".into()));
        }
        Ok(())
    }
}

/// All exponent vectors with total degree `<= max_order`, lexicographic.
pub fn enumerate_monomials(dim: usize, max_order: u32) -> Vec<Vec<u32>> {
    fn rec(dim: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if cur.len() == dim {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur.push(e);
            rec(dim, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(dim, max_order, &mut Vec::with_capacity(dim), &mut out);
    out
}

fn power(var: usize, e: u32) -> Expr {
    match e {
        1 => Expr::var(var),
        2 => Expr::unary(UnaryOp::Square, Expr::var(var)),
        _ => Expr::mul(Expr::var(var), power(var, e - 1)),
    }
}

/// `c * x_0^o_0 * ... * x_{D-1}^o_{D-1}`, or the bare constant.
pub fn monomial_term(coeff: f64, exps: &[u32]) -> Expr {
    let factors: Vec<Expr> = exps.iter().enumerate().filter(|(_, e)| **e > 0).map(|(v, e)| power(v, *e)).collect();
    match factors.into_iter().rev().reduce(|acc, f| Expr::mul(f, acc)) {
        None => Expr::Const(coeff),
        Some(m) => Expr::mul(Expr::Const(coeff), m),
    }
}

pub fn sum_terms(terms: Vec<Expr>) -> Expr {
    terms.into_iter().rev().reduce(|acc, t| Expr::add(t, acc)).expect("at least one term")
}

pub fn round_decimals(v: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (v * s).round() / s
}

fn sample_coefficient(rng: &mut impl Rng, cfg: &PolyGenConfig) -> f64 {
    let ln = LogNormal::new(cfg.coeff_log_mean, cfg.coeff_log_std).expect("valid log-normal");
    loop {
        let mag = round_decimals(ln.sample(rng), cfg.decimals);
        if mag != 0.0 {
            return if rng.random_bool(0.5) { mag } else { -mag };
        }
    }
}

/// Normal draw clipped to `[1, max_terms]`, then rounded half away from zero.
pub fn sample_term_count(rng: &mut impl Rng, cfg: &PolyGenConfig) -> usize {
    let n = Normal::new(cfg.terms_mean, cfg.terms_std).expect("valid normal");
    let v: f64 = n.sample(rng);
    v.clamp(1.0, cfg.max_terms as f64).round() as usize
}

/// Monomial support of a polynomial system, one list of exponent vectors per
/// equation; coefficients are drawn separately so a support can be retried.
#[derive(Debug, Clone, PartialEq)]
pub struct PolySupport {
    pub max_order: u32,
    pub terms: Vec<Vec<Vec<u32>>>,
}

pub fn sample_polynomial_support(dim: usize, rng: &mut impl Rng, cfg: &PolyGenConfig) -> PolySupport {
    assert!((1..=MAX_DIM).contains(&dim));
    let max_order = rng.random_range(1..=cfg.max_order);
    let monomials = enumerate_monomials(dim, max_order);
    let terms = (0..dim)
        .map(|_| {
            let n = sample_term_count(rng, cfg).min(monomials.len());
            let mut picked = sample_indices(rng, monomials.len(), n).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| monomials[i].clone()).collect()
        })
        .collect();
    PolySupport { max_order, terms }
}

pub fn polynomial_from_support(support: &PolySupport, rng: &mut impl Rng, cfg: &PolyGenConfig) -> OdeSystem {
    let eqs = support
        .terms
        .iter()
        .map(|terms| sum_terms(terms.iter().map(|e| monomial_term(sample_coefficient(rng, cfg), e)).collect()))
        .collect();
    OdeSystem::new(eqs).expect("generated system is valid")
}

pub fn sample_polynomial_system(dim: usize, rng: &mut impl Rng, cfg: &PolyGenConfig) -> OdeSystem {
    let support = sample_polynomial_support(dim, rng, cfg);
    polynomial_from_support(&support, rng, cfg)
}

pub fn sample_unary_op(rng: &mut impl Rng, cfg: &TreeGenConfig) -> UnaryOp {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (op, p) in UnaryOp::ALL.iter().zip(cfg.unary_probs) {
        acc += p;
        if u < acc {
            return *op;
        }
    }
    UnaryOp::Id
}

pub fn sample_binary_op(rng: &mut impl Rng, cfg: &TreeGenConfig) -> BinaryOp {
    if rng.random::<f64>() < cfg.binary_probs[0] {
        BinaryOp::Add
    } else {
        BinaryOp::Mul
    }
}

/// Signed constant with log-uniform magnitude in `[const_min, const_max]`.
pub fn sample_tree_constant(rng: &mut impl Rng, cfg: &TreeGenConfig) -> f64 {
    let (lo, hi) = (cfg.const_min.ln(), cfg.const_max.ln());
    let mag = rng.random_range(lo..=hi).exp();
    if rng.random_bool(0.5) {
        mag
    } else {
        -mag
    }
}

fn random_shape(binary: usize, dim: usize, rng: &mut impl Rng, cfg: &TreeGenConfig) -> Expr {
    if binary == 0 {
        return if rng.random::<f64>() < cfg.leaf_var_prob {
            Expr::var(rng.random_range(0..dim))
        } else {
            Expr::Const(sample_tree_constant(rng, cfg))
        };
    }
    let left = rng.random_range(0..binary);
    let op = sample_binary_op(rng, cfg);
    Expr::Binary(
        op,
        Box::new(random_shape(left, dim, rng, cfg)),
        Box::new(random_shape(binary - 1 - left, dim, rng, cfg)),
    )
}

fn node_count(e: &Expr) -> usize {
    match e {
        Expr::Const(_) | Expr::Var(_) => 1,
        Expr::Unary(_, a) => 1 + node_count(a),
        Expr::Binary(_, a, b) => 1 + node_count(a) + node_count(b),
    }
}

/// Wraps the `target`-th node (pre-order) in `op`.
fn wrap_nth(e: Expr, target: &mut usize, op: UnaryOp) -> Expr {
    if *target == 0 {
        *target = usize::MAX;
        return Expr::unary(op, e);
    }
    *target -= 1;
    match e {
        Expr::Unary(u, a) => Expr::Unary(u, Box::new(wrap_nth(*a, target, op))),
        Expr::Binary(b, l, r) => {
            let l = wrap_nth(*l, target, op);
            let r = wrap_nth(*r, target, op);
            Expr::Binary(b, Box::new(l), Box::new(r))
        }
        leaf => leaf,
    }
}

/// Rewrites each unary node `u(e)` as `a*u(e) + b` while binary budget lasts
/// (`a*u(e)` when only one operator is left).
fn add_affine(e: Expr, budget: &mut usize, rng: &mut impl Rng, cfg: &TreeGenConfig) -> Expr {
    match e {
        Expr::Unary(op, a) => {
            let inner = Expr::Unary(op, Box::new(add_affine(*a, budget, rng, cfg)));
            match *budget {
                0 => inner,
                1 => {
                    *budget -= 1;
                    Expr::mul(Expr::Const(sample_tree_constant(rng, cfg)), inner)
                }
                _ => {
                    *budget -= 2;
                    let scaled = Expr::mul(Expr::Const(sample_tree_constant(rng, cfg)), inner);
                    Expr::add(scaled, Expr::Const(sample_tree_constant(rng, cfg)))
                }
            }
        }
        Expr::Binary(b, l, r) => {
            let l = add_affine(*l, budget, rng, cfg);
            let r = add_affine(*r, budget, rng, cfg);
            Expr::Binary(b, Box::new(l), Box::new(r))
        }
        leaf => leaf,
    }
}

fn has_constant_unary(e: &Expr) -> bool {
    match e {
        Expr::Const(_) | Expr::Var(_) => false,
        Expr::Unary(_, a) => a.max_var().is_none() || has_constant_unary(a),
        Expr::Binary(_, a, b) => has_constant_unary(a) || has_constant_unary(b),
    }
}

/// One random equation. Binary operators (structural plus affine) never
/// exceed `max_binary`, unary operators never exceed `max_unary`, and depth
/// never exceeds `max_depth`.
pub fn sample_tree_expr(dim: usize, rng: &mut impl Rng, cfg: &TreeGenConfig) -> Expr {
    loop {
        let binary = rng.random_range(0..=cfg.max_binary);
        let unary = rng.random_range(0..=cfg.max_unary);
        let mut e = random_shape(binary, dim, rng, cfg);
        for _ in 0..unary {
            let mut target = rng.random_range(0..node_count(&e));
            let op = sample_unary_op(rng, cfg);
            e = wrap_nth(e, &mut target, op);
        }
        let mut budget = cfg.max_binary - binary;
        e = add_affine(e, &mut budget, rng, cfg);
        if e.depth() <= cfg.max_depth && e.max_var().is_some() && !has_constant_unary(&e) {
            return e;
        }
    }
}

pub fn sample_tree_system(dim: usize, rng: &mut impl Rng, cfg: &TreeGenConfig) -> OdeSystem {
    assert!((1..=MAX_DIM).contains(&dim));
    OdeSystem::new((0..dim).map(|_| sample_tree_expr(dim, rng, cfg)).collect()).expect("generated system is valid")
}

/// Redraws every constant of a tree system from the same distribution.
fn resample_tree_constants(system: &OdeSystem, rng: &mut impl Rng, cfg: &TreeGenConfig) -> OdeSystem {
    let eqs = system
        .equations()
        .iter()
        .map(|e| {
            let consts = e.constants();
            let fresh: Vec<f64> = consts.iter().map(|_| sample_tree_constant(rng, cfg)).collect();
            let idx = std::cell::Cell::new(0);
            e.map_constants(&|_| {
                let i = idx.get();
                idx.set(i + 1);
                fresh[i]
            })
        })
        .collect();
    OdeSystem::new(eqs).expect("valid")
}

/// `n x D` i.i.d. standard normal initial values.
pub fn sample_initial_values(dim: usize, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect()).collect()
}

/// Multiplies every state entry by an independent `N(1, sigma^2)` factor.
pub fn apply_noise(traj: &Trajectory, sigma: f64, rng: &mut impl Rng) -> Trajectory {
    assert!(sigma >= 0.0, "noise level must be non-negative");
    if sigma == 0.0 {
        return traj.clone();
    }
    traj.map_states(|_, x| {
        let eps: f64 = StandardNormal.sample(rng);
        x * (1.0 + sigma * eps)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Poly,
    Tree,
}

impl std::str::FromStr for Generator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "poly" => Ok(Generator::Poly),
            "tree" => Ok(Generator::Tree),
            _ => Err(format!("unknown generator {s}")),
        }
    }
}

/// One system and its observed instances (noiseless; see [`SystemRecord::observed`]).
#[derive(Debug, Clone, PartialEq)]
pub struct SystemRecord {
    pub id: u64,
    pub system: OdeSystem,
    pub instances: Vec<Trajectory>,
    pub sigma: f64,
    pub generator: Generator,
    pub seed: u64,
}

impl SystemRecord {
    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn grid(&self) -> &[f64] {
        self.instances[0].times()
    }

    /// Model inputs: the instances with noise level `sigma`, reproducible per
    /// (seed, id). Instance `j` gets the same noise no matter how many
    /// instances are selected.
    pub fn observed(&self, sigma: f64) -> Vec<Trajectory> {
        self.instances
            .iter()
            .enumerate()
            .map(|(j, tr)| {
                let salt = NOISE_SALT ^ (j as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt);
                rng.set_stream(self.id);
                apply_noise(tr, sigma, &mut rng)
            })
            .collect()
    }

    /// Inputs at the record's own noise level.
    pub fn inputs(&self) -> Vec<Trajectory> {
        self.observed(self.sigma)
    }
}

pub fn select_first_n_instances(record: &SystemRecord, n: usize) -> Result<SystemRecord, DataError> {
    if n == 0 {
        return Err(DataError::NoInstances);
    }
    if n > record.instances.len() {
        return Err(DataError::NotEnoughInstances { requested: n, available: record.instances.len() });
    }
    let mut out = record.clone();
    out.instances.truncate(n);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CountSpec {
    Fixed(usize),
    Uniform(usize, usize),
}

impl CountSpec {
    fn sample(self, rng: &mut impl Rng) -> usize {
        match self {
            CountSpec::Fixed(n) => n,
            CountSpec::Uniform(lo, hi) => rng.random_range(lo..=hi),
        }
    }

    fn range(self) -> (usize, usize) {
        match self {
            CountSpec::Fixed(n) => (n, n),
            CountSpec::Uniform(lo, hi) => (lo, hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub count: usize,
    pub generator: Generator,
    pub dims: CountSpec,
    pub instances: CountSpec,
    pub sigma: f64,
    pub seed: u64,
    pub t0: f64,
    pub t1: f64,
    pub points: usize,
    pub solver: SolverConfig,
    pub poly: PolyGenConfig,
    pub tree: TreeGenConfig,
    /// Coefficient redraws per structure before a new structure is sampled.
    pub coefficient_retries: usize,
    /// Consecutive rejections for one record that count as a stall.
    pub stall_window: usize,
}

impl CorpusConfig {
    /// Varying dimension and instance count, polynomial systems.
    pub fn mixed_polynomial(count: usize, seed: u64) -> Self {
        Self {
            count,
            generator: Generator::Poly,
            dims: CountSpec::Uniform(1, 4),
            instances: CountSpec::Uniform(1, 4),
            sigma: 0.0,
            seed,
            t0: 1.0,
            t1: 10.0,
            points: 100,
            solver: SolverConfig::default(),
            poly: PolyGenConfig::default(),
            tree: TreeGenConfig::default(),
            coefficient_retries: 50,
            stall_window: 10_000,
        }
    }

    /// Fixed dimension, four instances, operator-tree systems with noise.
    pub fn fixed_dim_tree(dim: usize, count: usize, sigma: f64, seed: u64) -> Self {
        Self {
            generator: Generator::Tree,
            dims: CountSpec::Fixed(dim),
            instances: CountSpec::Fixed(MAX_INSTANCES),
            sigma,
            ..Self::mixed_polynomial(count, seed)
        }
    }

    pub fn grid(&self) -> Vec<f64> {
        uniform_grid(self.t0, self.t1, self.points)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (dlo, dhi) = self.dims.range();
        let (ilo, ihi) = self.instances.range();
        if dlo == 0 || dhi > MAX_DIM || dlo > dhi {
            return Err(DataError::Config(format!("dimensions must lie in 1..={MAX_DIM}")));
        }
        if ilo == 0 || ihi > MAX_INSTANCES || ilo > ihi {
            return Err(DataError::Config(format!("instances must lie in 1..={MAX_INSTANCES}")));
        }
        if !(self.sigma >= 0.0) || self.points < 2 || !(self.t1 > self.t0) {
            return Err(DataError::Config("bad noise level or time grid".into()));
        }
        self.tree.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub records: usize,
    pub rejected: usize,
    /// `[dim-1][instances-1]` counts.
    pub buckets: [[usize; MAX_INSTANCES]; MAX_DIM],
}

impl CorpusStats {
    pub fn rejection_rate(&self) -> f64 {
        let total = self.records + self.rejected;
        if total == 0 {
            0.0
        } else {
            self.rejected as f64 / total as f64
        }
    }
}

/// Solves every initial value and applies the corpus filters.
pub fn simulate_instances(
    system: &OdeSystem,
    initials: &[Vec<f64>],
    grid: &[f64],
    solver: &SolverConfig,
) -> Option<Vec<Trajectory>> {
    initials
        .iter()
        .map(|x0| {
            let tr = solve(system, x0, grid, solver).ok()?;
            (amplitude_ok(&tr) && encode_trajectory(&tr).is_ok()).then_some(tr)
        })
        .collect()
}

fn generate_record(cfg: &CorpusConfig, id: u64) -> Result<(SystemRecord, usize), DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(id);
    let dim = cfg.dims.sample(&mut rng);
    let n = cfg.instances.sample(&mut rng);
    let grid = cfg.grid();
    let mut rejected = 0;
    loop {
        let (mut system, support) = match cfg.generator {
            Generator::Poly => {
                let s = sample_polynomial_support(dim, &mut rng, &cfg.poly);
                (polynomial_from_support(&s, &mut rng, &cfg.poly), Some(s))
            }
            Generator::Tree => (sample_tree_system(dim, &mut rng, &cfg.tree), None),
        };
        for attempt in 0..=cfg.coefficient_retries {
            if attempt > 0 {
                system = match &support {
                    Some(s) => polynomial_from_support(s, &mut rng, &cfg.poly),
                    None => resample_tree_constants(&system, &mut rng, &cfg.tree),
                };
            }
            let initials = sample_initial_values(dim, n, &mut rng);
            if let Some(instances) = simulate_instances(&system, &initials, &grid, &cfg.solver) {
                let record = SystemRecord { id, system, instances, sigma: cfg.sigma, generator: cfg.generator, seed: cfg.seed };
                return Ok((record, rejected));
            }
            rejected += 1;
            if rejected >= cfg.stall_window {
                return Err(DataError::Stalled { id, rejected });
            }
        }
    }
}

/// Generates `cfg.count` records; record `i` depends only on `(seed, i)`.
pub fn build_corpus(cfg: &CorpusConfig, exec: Exec) -> Result<(Vec<SystemRecord>, CorpusStats), DataError> {
    cfg.validate()?;
    let results = exec.map_range(cfg.count, |i| generate_record(cfg, i as u64));
    let mut stats = CorpusStats::default();
    let mut records = Vec::with_capacity(cfg.count);
    for r in results {
        let (rec, rejected) = r?;
        stats.records += 1;
        stats.rejected += rejected;
        stats.buckets[rec.dim() - 1][rec.instances.len() - 1] += 1;
        records.push(rec);
    }
    Ok((records, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binom(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    /// Brute force over the full cube `[0, o]^D`.
    fn brute_force(dim: usize, o: u32) -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        let total = (o as usize + 1).pow(dim as u32);
        for mut code in 0..total {
            let mut v = vec![0u32; dim];
            for slot in v.iter_mut().rev() {
                *slot = (code % (o as usize + 1)) as u32;
                code /= o as usize + 1;
            }
            if v.iter().sum::<u32>() <= o {
                out.push(v);
            }
        }
        out
    }

    #[test]
    fn monomials_match_listed_example() {
        let got = enumerate_monomials(2, 3);
        let want: Vec<Vec<u32>> = [(0, 0), (0, 1), (0, 2), (0, 3), (1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (3, 0)]
            .iter()
            .map(|(a, b)| vec![*a, *b])
            .collect();
        assert_eq!(got, want);
        assert_eq!(enumerate_monomials(1, 1), vec![vec![0], vec![1]]);
        assert_eq!(enumerate_monomials(3, 2).len(), 10);
    }

    #[test]
    fn monomial_counts_match_brute_force() {
        for d in 1..=4 {
            for o in 1..=3 {
                let got = enumerate_monomials(d, o);
                assert_eq!(got.len(), binom(d + o as usize, d));
                assert_eq!(got, brute_force(d, o));
            }
        }
    }

    #[test]
    fn monomial_terms_evaluate() {
        let t = monomial_term(1.5, &[1, 2]);
        assert_eq!(t.eval(&[2.0, 3.0]).unwrap(), 27.0);
        let t = monomial_term(-2.0, &[3]);
        assert_eq!(t.eval(&[2.0]).unwrap(), -16.0);
        assert_eq!(monomial_term(0.25, &[0, 0]), Expr::Const(0.25));
    }

    #[test]
    fn polynomial_systems_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = PolyGenConfig::default();
        for _ in 0..500 {
            let d = rng.random_range(1..=4);
            let s = sample_polynomial_system(d, &mut rng, &cfg);
            for e in s.equations() {
                let terms = e.count_binary() + 1 - count_muls_in_terms(e);
                assert!((1..=5).contains(&terms), "{terms} terms in {e}");
                for c in e.constants() {
                    assert!(c != 0.0);
                    assert!((round_decimals(c, 5) - c).abs() == 0.0);
                }
            }
        }
    }

    fn count_muls_in_terms(e: &Expr) -> usize {
        match e {
            Expr::Binary(BinaryOp::Add, a, b) => count_muls_in_terms(a) + count_muls_in_terms(b),
            other => other.count_binary(),
        }
    }

    #[test]
    fn first_order_1d_has_two_monomials() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = PolyGenConfig { max_order: 1, ..Default::default() };
        for _ in 0..200 {
            let s = sample_polynomial_system(1, &mut rng, &cfg);
            let e = &s.equations()[0];
            assert!(e.depth() <= 3, "{e}");
            for x in [0.0, 1.0, 2.0] {
                let v = e.eval(&[x]).unwrap();
                let (a, b) = (e.eval(&[0.0]).unwrap(), e.eval(&[1.0]).unwrap() - e.eval(&[0.0]).unwrap());
                assert!((v - (a + b * x)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn term_count_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = PolyGenConfig::default();
        let mut hist = [0usize; 6];
        for _ in 0..20_000 {
            hist[sample_term_count(&mut rng, &cfg)] += 1;
        }
        assert_eq!(hist[0], 0);
        // P(clip to 1 or round to 1) = P(X < 1.5) ~ 0.401 for N(2, 2)
        let p1 = hist[1] as f64 / 20_000.0;
        assert!((p1 - 0.4013).abs() < 0.02, "{p1}");
    }

    #[test]
    fn tree_systems_respect_budgets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = TreeGenConfig::default();
        for _ in 0..10_000 {
            let e = sample_tree_expr(rng.random_range(1..=4), &mut rng, &cfg);
            assert!(e.count_binary() <= cfg.max_binary);
            assert!(e.count_unary() <= cfg.max_unary);
            assert!(e.depth() <= cfg.max_depth);
            for c in e.constants() {
                assert!((0.05..=20.0).contains(&c.abs()), "{c}");
            }
        }
    }

    #[test]
    fn unary_operator_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = TreeGenConfig::default();
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            let op = sample_unary_op(&mut rng, &cfg);
            counts[UnaryOp::ALL.iter().position(|o| *o == op).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip(cfg.unary_probs) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.01);
        }
        let adds = (0..n).filter(|_| sample_binary_op(&mut rng, &cfg) == BinaryOp::Add).count();
        assert!((adds as f64 / n as f64 - 0.75).abs() < 0.01);
    }

    #[test]
    fn initial_value_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let v = sample_initial_values(4, 25_000, &mut rng);
        assert_eq!(v.len(), 25_000);
        assert!(v.iter().all(|r| r.len() == 4));
        let flat: Vec<f64> = v.into_iter().flatten().collect();
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        let var = flat.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / flat.len() as f64;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.05);

        let a = sample_initial_values(2, 3, &mut ChaCha8Rng::seed_from_u64(99));
        let b = sample_initial_values(2, 3, &mut ChaCha8Rng::seed_from_u64(99));
        assert_eq!(a, b);
    }

    #[test]
    fn noise_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let times: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let clean = Trajectory::new(times.clone(), (0..100_000).map(|i| 1.0 + (i % 7) as f64).collect(), 100).unwrap();
        assert_eq!(apply_noise(&clean, 0.0, &mut rng), clean);
        let noisy = apply_noise(&clean, 0.05, &mut rng);
        assert_eq!(noisy.times(), clean.times());
        let ratio = noisy.states().iter().zip(clean.states()).map(|(a, b)| a / b).sum::<f64>() / 100_000.0;
        assert!((ratio - 1.0).abs() < 0.002, "{ratio}");
        let zero = Trajectory::new(vec![0.0, 1.0], vec![0.0, 0.0], 1).unwrap();
        assert_eq!(apply_noise(&zero, 0.5, &mut rng), zero);
    }

    #[test]
    fn first_n_selection() {
        let cfg = CorpusConfig::fixed_dim_tree(2, 3, 0.05, 21);
        let (recs, _) = build_corpus(&cfg, Exec::Sequential).unwrap();
        let r = &recs[0];
        assert_eq!(select_first_n_instances(r, 4).unwrap(), *r);
        let one = select_first_n_instances(r, 1).unwrap();
        assert_eq!(one.instances, vec![r.instances[0].clone()]);
        let two = select_first_n_instances(r, 2).unwrap();
        let three = select_first_n_instances(r, 3).unwrap();
        assert_eq!(two.instances[..], three.instances[..2]);
        assert_eq!(two.inputs()[..], three.inputs()[..2]);
        assert_eq!(
            select_first_n_instances(r, 5).unwrap_err(),
            DataError::NotEnoughInstances { requested: 5, available: 4 }
        );
    }

    #[test]
    fn corpus_regimes_and_filter() {
        let cfg = CorpusConfig::mixed_polynomial(60, 3);
        let (recs, stats) = build_corpus(&cfg, Exec::default()).unwrap();
        assert_eq!(recs.len(), 60);
        assert_eq!(stats.records, 60);
        let dims: std::collections::BTreeSet<usize> = recs.iter().map(|r| r.dim()).collect();
        let inst: std::collections::BTreeSet<usize> = recs.iter().map(|r| r.instances.len()).collect();
        assert_eq!(dims.len(), 4);
        assert_eq!(inst.len(), 4);
        for r in &recs {
            assert!(r.instances.iter().all(|t| t.max_abs() <= 100.0));
            assert!(r.instances.iter().all(|t| t.times() == r.grid()));
        }
        let (again, _) = build_corpus(&cfg, Exec::Sequential).unwrap();
        assert_eq!(recs, again);

        let cfg = CorpusConfig::fixed_dim_tree(3, 10, 0.05, 4);
        let (recs, _) = build_corpus(&cfg, Exec::default()).unwrap();
        assert!(recs.iter().all(|r| r.dim() == 3 && r.instances.len() == 4));
    }
}
