//! Expression trees for ODE right-hand sides, evaluation, and prefix
//! (Polish) serialization.

use std::fmt;

use thiserror::Error;

/// Largest supported system dimension.
pub const MAX_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Sin,
    Square,
    Inv,
    Id,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 4] = [UnaryOp::Sin, UnaryOp::Square, UnaryOp::Inv, UnaryOp::Id];

    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            UnaryOp::Sin => v.sin(),
            UnaryOp::Square => v * v,
            UnaryOp::Inv => 1.0 / v,
            UnaryOp::Id => v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Sin => "sin",
            UnaryOp::Square => "pow2",
            UnaryOp::Inv => "inv",
            UnaryOp::Id => "id",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Mul,
}

impl BinaryOp {
    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Mul => a * b,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Mul => "mul",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Error, PartialEq)]
pub enum ExprError {
    #[error("expression references x{index} but the system has dimension {dim}")]
    DimensionMismatch { index: usize, dim: usize },
    #[error("operator at position {0} is missing operands")]
    ArityUnderflow(usize),
    #[error("trailing tokens after a complete expression at position {0}")]
    ArityOverflow(usize),
    #[error("expected {expected} equations, found {found}")]
    SegmentCount { expected: usize, found: usize },
    #[error("unsupported system dimension {0}")]
    BadDimension(usize),
    #[error("non-finite constant {0}")]
    NonFiniteConstant(f64),
}

impl Expr {
    pub fn var(i: usize) -> Self {
        Expr::Var(i)
    }

    pub fn unary(op: UnaryOp, e: Expr) -> Self {
        Expr::Unary(op, Box::new(e))
    }

    pub fn add(a: Expr, b: Expr) -> Self {
        Expr::Binary(BinaryOp::Add, Box::new(a), Box::new(b))
    }

    pub fn mul(a: Expr, b: Expr) -> Self {
        Expr::Binary(BinaryOp::Mul, Box::new(a), Box::new(b))
    }

    /// Evaluates at `x`, checking that every variable index is in range.
    /// Singular points (e.g. `inv(0)`) give a non-finite value, not an error.
    pub fn eval(&self, x: &[f64]) -> Result<f64, ExprError> {
        if let Some(i) = self.max_var() {
            if i >= x.len() {
                return Err(ExprError::DimensionMismatch { index: i, dim: x.len() });
            }
        }
        Ok(self.eval_unchecked(x))
    }

    /// Evaluation without the index check; panics on an out-of-range variable.
    #[inline]
    pub fn eval_unchecked(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => x[*i],
            Expr::Unary(op, e) => op.apply(e.eval_unchecked(x)),
            Expr::Binary(op, a, b) => op.apply(a.eval_unchecked(x), b.eval_unchecked(x)),
        }
    }

    pub fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Var(i) => Some(*i),
            Expr::Unary(_, e) => e.max_var(),
            Expr::Binary(_, a, b) => match (a.max_var(), b.max_var()) {
                (Some(x), Some(y)) => Some(x.max(y)),
                (x, y) => x.or(y),
            },
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) => 1,
            Expr::Unary(_, e) => 1 + e.depth(),
            Expr::Binary(_, a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    pub fn count_binary(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) => 0,
            Expr::Unary(_, e) => e.count_binary(),
            Expr::Binary(_, a, b) => 1 + a.count_binary() + b.count_binary(),
        }
    }

    pub fn count_unary(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) => 0,
            Expr::Unary(_, e) => 1 + e.count_unary(),
            Expr::Binary(_, a, b) => a.count_unary() + b.count_unary(),
        }
    }

    pub fn constants(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_constants(&mut |c| out.push(c));
        out
    }

    fn visit_constants(&self, f: &mut impl FnMut(f64)) {
        match self {
            Expr::Const(c) => f(*c),
            Expr::Var(_) => {}
            Expr::Unary(_, e) => e.visit_constants(f),
            Expr::Binary(_, a, b) => {
                a.visit_constants(f);
                b.visit_constants(f);
            }
        }
    }

    /// Rewrites every constant through `f`.
    pub fn map_constants(&self, f: &impl Fn(f64) -> f64) -> Expr {
        match self {
            Expr::Const(c) => Expr::Const(f(*c)),
            Expr::Var(i) => Expr::Var(*i),
            Expr::Unary(op, e) => Expr::Unary(*op, Box::new(e.map_constants(f))),
            Expr::Binary(op, a, b) => {
                Expr::Binary(*op, Box::new(a.map_constants(f)), Box::new(b.map_constants(f)))
            }
        }
    }

    /// Replaces each variable `x_i` by `sub(i)`.
    pub fn substitute(&self, sub: &impl Fn(usize) -> Expr) -> Expr {
        match self {
            Expr::Const(c) => Expr::Const(*c),
            Expr::Var(i) => sub(*i),
            Expr::Unary(op, e) => Expr::Unary(*op, Box::new(e.substitute(sub))),
            Expr::Binary(op, a, b) => {
                Expr::Binary(*op, Box::new(a.substitute(sub)), Box::new(b.substitute(sub)))
            }
        }
    }

    /// Numeric constant folding: evaluates constant subtrees and merges
    /// nested constant factors `c1 * (c2 * e)`. No other rewriting.
    pub fn fold_constants(&self) -> Expr {
        match self {
            Expr::Const(_) | Expr::Var(_) => self.clone(),
            Expr::Unary(op, e) => match e.fold_constants() {
                Expr::Const(c) => Expr::Const(op.apply(c)),
                inner => Expr::Unary(*op, Box::new(inner)),
            },
            Expr::Binary(op, a, b) => {
                let a = a.fold_constants();
                let b = b.fold_constants();
                match (op, a, b) {
                    (_, Expr::Const(x), Expr::Const(y)) => Expr::Const(op.apply(x, y)),
                    (BinaryOp::Mul, Expr::Const(x), Expr::Binary(BinaryOp::Mul, l, r))
                        if matches!(*l, Expr::Const(_)) =>
                    {
                        let Expr::Const(y) = *l else { unreachable!() };
                        Expr::mul(Expr::Const(x * y), *r)
                    }
                    (BinaryOp::Mul, Expr::Binary(BinaryOp::Mul, l, r), Expr::Const(y))
                        if matches!(*l, Expr::Const(_)) =>
                    {
                        let Expr::Const(x) = *l else { unreachable!() };
                        Expr::mul(Expr::Const(x * y), *r)
                    }
                    (op, a, b) => Expr::Binary(*op, Box::new(a), Box::new(b)),
                }
            }
        }
    }

    fn push_prefix(&self, out: &mut Vec<Symbol>) {
        match self {
            Expr::Const(c) => out.push(Symbol::Const(*c)),
            Expr::Var(i) => out.push(Symbol::Var(*i)),
            Expr::Unary(op, e) => {
                out.push(Symbol::Unary(*op));
                e.push_prefix(out);
            }
            Expr::Binary(op, a, b) => {
                out.push(Symbol::Binary(*op));
                a.push_prefix(out);
                b.push_prefix(out);
            }
        }
    }

    fn write_infix(&self, f: &mut fmt::Formatter<'_>, parent_mul: bool) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if parent_mul && *c < 0.0 {
                    write!(f, "({c})")
                } else {
                    write!(f, "{c}")
                }
            }
            Expr::Var(i) => write!(f, "x{i}"),
            Expr::Unary(UnaryOp::Id, e) => e.write_infix(f, parent_mul),
            Expr::Unary(UnaryOp::Sin, e) => {
                write!(f, "sin(")?;
                e.write_infix(f, false)?;
                write!(f, ")")
            }
            Expr::Unary(UnaryOp::Inv, e) => {
                write!(f, "1/(")?;
                e.write_infix(f, false)?;
                write!(f, ")")
            }
            Expr::Unary(UnaryOp::Square, e) => {
                if matches!(**e, Expr::Var(_)) {
                    e.write_infix(f, true)?;
                } else {
                    write!(f, "(")?;
                    e.write_infix(f, false)?;
                    write!(f, ")")?;
                }
                write!(f, "^2")
            }
            Expr::Binary(BinaryOp::Add, a, b) => {
                if parent_mul {
                    write!(f, "(")?;
                }
                a.write_infix(f, false)?;
                write!(f, " + ")?;
                b.write_infix(f, false)?;
                if parent_mul {
                    write!(f, ")")?;
                }
                Ok(())
            }
            Expr::Binary(BinaryOp::Mul, a, b) => {
                a.write_infix(f, true)?;
                write!(f, "*")?;
                b.write_infix(f, true)
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_infix(f, false)
    }
}

/// One symbolic token of a prefix-serialized system. Constants carry their
/// full-precision value; the tokenizer expands them into numeric tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Symbol {
    Unary(UnaryOp),
    Binary(BinaryOp),
    Var(usize),
    Const(f64),
    Sep,
}

impl Symbol {
    fn arity(self) -> usize {
        match self {
            Symbol::Unary(_) => 1,
            Symbol::Binary(_) => 2,
            _ => 0,
        }
    }
}

/// `dx_i/dt = f_i(x)` for `i in 0..dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeSystem {
    equations: Vec<Expr>,
}

impl OdeSystem {
    pub fn new(equations: Vec<Expr>) -> Result<Self, ExprError> {
        let dim = equations.len();
        if dim == 0 || dim > MAX_DIM {
            return Err(ExprError::BadDimension(dim));
        }
        for e in &equations {
            if let Some(i) = e.max_var() {
                if i >= dim {
                    return Err(ExprError::DimensionMismatch { index: i, dim });
                }
            }
            if let Some(c) = e.constants().into_iter().find(|c| !c.is_finite()) {
                return Err(ExprError::NonFiniteConstant(c));
            }
        }
        Ok(Self { equations })
    }

    pub fn dim(&self) -> usize {
        self.equations.len()
    }

    pub fn equations(&self) -> &[Expr] {
        &self.equations
    }

    /// Writes `f(x)` into `out`. Non-finite entries signal a singularity.
    #[inline]
    pub fn rhs(&self, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.equations) {
            *o = e.eval_unchecked(x);
        }
    }

    pub fn to_prefix(&self) -> Vec<Symbol> {
        let mut out = Vec::new();
        for (i, e) in self.equations.iter().enumerate() {
            if i > 0 {
                out.push(Symbol::Sep);
            }
            e.push_prefix(&mut out);
        }
        out
    }

    /// Inverse of [`OdeSystem::to_prefix`]. Malformed input is rejected.
    pub fn parse_prefix(tokens: &[Symbol], dim: usize) -> Result<Self, ExprError> {
        if dim == 0 || dim > MAX_DIM {
            return Err(ExprError::BadDimension(dim));
        }
        let segments: Vec<&[Symbol]> = tokens.split(|t| matches!(t, Symbol::Sep)).collect();
        if segments.len() != dim {
            return Err(ExprError::SegmentCount { expected: dim, found: segments.len() });
        }
        let mut equations = Vec::with_capacity(dim);
        let mut offset = 0;
        for seg in segments {
            let mut pos = 0;
            let e = parse_one(seg, &mut pos, offset)?;
            if pos != seg.len() {
                return Err(ExprError::ArityOverflow(offset + pos));
            }
            equations.push(e);
            offset += seg.len() + 1;
        }
        OdeSystem::new(equations)
    }

    pub fn fold_constants(&self) -> OdeSystem {
        OdeSystem { equations: self.equations.iter().map(Expr::fold_constants).collect() }
    }

    /// The infix rendering used in reports, one `dxi/dt = ...` per line.
    pub fn render(&self) -> String {
        self.equations
            .iter()
            .enumerate()
            .map(|(i, e)| format!("dx{i}/dt = {e}"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Single-line rendering, equations joined by `" | "`.
    pub fn render_inline(&self) -> String {
        self.render().replace('\n', " | ")
    }
}

fn parse_one(seg: &[Symbol], pos: &mut usize, offset: usize) -> Result<Expr, ExprError> {
    let Some(&tok) = seg.get(*pos) else {
        return Err(ExprError::ArityUnderflow(offset + pos.saturating_sub(1)));
    };
    let here = *pos;
    *pos += 1;
    let need = tok.arity();
    let expr = match tok {
        Symbol::Const(c) => Expr::Const(c),
        Symbol::Var(i) => Expr::Var(i),
        Symbol::Unary(op) => {
            let e = parse_one(seg, pos, offset).map_err(|_| ExprError::ArityUnderflow(offset + here))?;
            Expr::Unary(op, Box::new(e))
        }
        Symbol::Binary(op) => {
            let a = parse_one(seg, pos, offset);
            let b = a.as_ref().ok().map(|_| parse_one(seg, pos, offset));
            match (a, b) {
                (Ok(a), Some(Ok(b))) => Expr::Binary(op, Box::new(a), Box::new(b)),
                (Err(ExprError::ArityUnderflow(_)), _) | (_, Some(Err(ExprError::ArityUnderflow(_)))) => {
                    return Err(ExprError::ArityUnderflow(offset + here))
                }
                (Err(e), _) | (_, Some(Err(e))) => return Err(e),
                (Ok(_), None) => unreachable!(),
            }
        }
        Symbol::Sep => unreachable!("segments are split on Sep"),
    };
    debug_assert!(need <= 2);
    Ok(expr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x(i: usize) -> Expr {
        Expr::var(i)
    }

    #[test]
    fn eval_examples() {
        let sq = Expr::unary(UnaryOp::Square, x(0));
        assert_eq!(sq.eval(&[3.0]).unwrap(), 9.0);

        let e = Expr::add(Expr::unary(UnaryOp::Sin, x(0)), x(1));
        assert_eq!(e.eval(&[0.0, 2.0]).unwrap(), 2.0);

        let e = Expr::mul(Expr::Const(1.5), Expr::mul(x(0), Expr::unary(UnaryOp::Square, x(1))));
        assert_eq!(e.eval(&[2.0, 3.0]).unwrap(), 27.0);
    }

    #[test]
    fn eval_dimension_mismatch() {
        let e = Expr::add(x(0), x(2));
        assert_eq!(e.eval(&[1.0, 2.0]), Err(ExprError::DimensionMismatch { index: 2, dim: 2 }));
    }

    #[test]
    fn singular_points_are_non_finite() {
        let e = Expr::unary(UnaryOp::Inv, x(0));
        assert!(!e.eval(&[0.0]).unwrap().is_finite());
        let e = Expr::add(Expr::Const(1.0), Expr::unary(UnaryOp::Inv, Expr::Const(0.0)));
        assert!(!e.eval(&[]).unwrap().is_finite());
    }

    #[test]
    fn identity_is_exact() {
        let inner = Expr::mul(Expr::Const(0.3), Expr::unary(UnaryOp::Sin, x(0)));
        let wrapped = Expr::unary(UnaryOp::Id, inner.clone());
        for v in [-3.1, 0.0, 0.7, 12.5] {
            assert_eq!(wrapped.eval(&[v]).unwrap().to_bits(), inner.eval(&[v]).unwrap().to_bits());
        }
    }

    #[test]
    fn prefix_examples() {
        let s = OdeSystem::new(vec![x(0)]).unwrap();
        assert_eq!(s.to_prefix(), vec![Symbol::Var(0)]);

        let s = OdeSystem::new(vec![Expr::add(x(0), x(1)), Expr::mul(Expr::Const(-1.0), x(1))]).unwrap();
        assert_eq!(
            s.to_prefix(),
            vec![
                Symbol::Binary(BinaryOp::Add),
                Symbol::Var(0),
                Symbol::Var(1),
                Symbol::Sep,
                Symbol::Binary(BinaryOp::Mul),
                Symbol::Const(-1.0),
                Symbol::Var(1),
            ]
        );

        let s = OdeSystem::new(vec![Expr::unary(UnaryOp::Sin, Expr::unary(UnaryOp::Square, x(0)))]).unwrap();
        assert_eq!(
            s.to_prefix(),
            vec![Symbol::Unary(UnaryOp::Sin), Symbol::Unary(UnaryOp::Square), Symbol::Var(0)]
        );
    }

    #[test]
    fn parse_rejects_malformed() {
        let ok = OdeSystem::parse_prefix(&[Symbol::Var(0)], 1).unwrap();
        assert_eq!(ok.equations(), &[x(0)]);

        let err = OdeSystem::parse_prefix(&[Symbol::Binary(BinaryOp::Add), Symbol::Var(0)], 1).unwrap_err();
        assert_eq!(err, ExprError::ArityUnderflow(0));

        let err = OdeSystem::parse_prefix(&[Symbol::Var(0), Symbol::Var(0)], 1).unwrap_err();
        assert_eq!(err, ExprError::ArityOverflow(1));

        let err = OdeSystem::parse_prefix(&[Symbol::Var(0)], 2).unwrap_err();
        assert_eq!(err, ExprError::SegmentCount { expected: 2, found: 1 });

        let err = OdeSystem::parse_prefix(&[Symbol::Var(1)], 1).unwrap_err();
        assert_eq!(err, ExprError::DimensionMismatch { index: 1, dim: 1 });

        let err = OdeSystem::parse_prefix(&[Symbol::Var(0), Symbol::Sep], 2).unwrap_err();
        assert_eq!(err, ExprError::ArityUnderflow(2));
    }

    #[test]
    fn infix_rendering() {
        let e = Expr::mul(Expr::Const(1.5), Expr::mul(x(0), Expr::unary(UnaryOp::Square, x(1))));
        let s = OdeSystem::new(vec![e, Expr::add(x(0), Expr::unary(UnaryOp::Sin, x(1)))]).unwrap();
        assert_eq!(s.render(), "dx0/dt = 1.5*x0*x1^2\ndx1/dt = x0 + sin(x1)");
    }

    #[test]
    fn folding_merges_constant_factors() {
        let e = Expr::mul(Expr::Const(2.0), Expr::mul(Expr::Const(3.0), x(0)));
        assert_eq!(e.fold_constants(), Expr::mul(Expr::Const(6.0), x(0)));
        let e = Expr::add(Expr::Const(2.0), Expr::unary(UnaryOp::Square, Expr::Const(3.0)));
        assert_eq!(e.fold_constants(), Expr::Const(11.0));
    }
}
