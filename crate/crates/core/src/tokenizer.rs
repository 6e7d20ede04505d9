//! Three-token float codec (sign, mantissa, exponent) and the fixed
//! vocabulary shared by the trajectory embedder and the expression decoder.
//!
//! A nonzero value is rounded to four significant digits and written as
//! `sign * m * 10^q` with an integer mantissa `m` in `1000..=9999`, so every
//! representable number has exactly one encoding. Zero is `(+, 0, 0)`.
//!
//! Vocabulary layout (ids are dense and never change):
//!
//! | ids           | tokens                         |
//! |---------------|--------------------------------|
//! | 0, 1          | `+`, `-`                       |
//! | 2 ..= 10001   | mantissas `0` ..= `9999`       |
//! | 10002 ..= 10202 | exponents `E-100` ..= `E100` |
//! | 10203 ..      | operators, variables, markers  |

use std::io::{self, Write};

use thiserror::Error;

use crate::exprtree::{BinaryOp, ExprError, OdeSystem, Symbol, UnaryOp, MAX_DIM};
use crate::integrate::Trajectory;

pub const MIN_EXPONENT: i32 = -100;
pub const MAX_EXPONENT: i32 = 100;
pub const MANTISSA_COUNT: usize = 10_000;
pub const EXPONENT_COUNT: usize = (MAX_EXPONENT - MIN_EXPONENT + 1) as usize;
/// Signs + mantissas + exponents.
pub const NUMERIC_VOCAB: usize = 2 + MANTISSA_COUNT + EXPONENT_COUNT;

const MANTISSA_BASE: usize = 2;
const EXPONENT_BASE: usize = MANTISSA_BASE + MANTISSA_COUNT;

#[derive(Debug, Error, PartialEq)]
pub enum TokenError {
    #[error("value {0} is outside the representable range")]
    Range(f64),
    #[error("sequence does not start with BOS")]
    MissingBos,
    #[error("sequence is not terminated by EOS")]
    MissingEos,
    #[error("tokens after EOS at position {0}")]
    TrailingTokens(usize),
    #[error("malformed constant at position {0}")]
    BadConstant(usize),
    #[error("unexpected token {name} at position {pos}")]
    Unexpected { name: String, pos: usize },
    #[error("unknown token id {0}")]
    UnknownId(usize),
    #[error(transparent)]
    Parse(#[from] ExprError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenTriple {
    pub negative: bool,
    pub mantissa: u16,
    pub exponent: i16,
}

impl TokenTriple {
    pub const ZERO: TokenTriple = TokenTriple { negative: false, mantissa: 0, exponent: 0 };

    pub fn decode(self) -> f64 {
        // decimal parsing is correctly rounded; powi is not for large |q|
        let mag: f64 = format!("{}e{}", self.mantissa, self.exponent).parse().expect("valid literal");
        if self.negative {
            -mag
        } else {
            mag
        }
    }

    pub fn is_valid(self) -> bool {
        if self.mantissa == 0 {
            self == TokenTriple::ZERO
        } else {
            (1000..=9999).contains(&self.mantissa)
                && (MIN_EXPONENT..=MAX_EXPONENT).contains(&(self.exponent as i32))
        }
    }

    pub fn ids(self) -> [usize; 3] {
        [
            self.negative as usize,
            MANTISSA_BASE + self.mantissa as usize,
            EXPONENT_BASE + (self.exponent as i32 - MIN_EXPONENT) as usize,
        ]
    }

    pub fn from_ids(ids: [usize; 3]) -> Option<Self> {
        let [s, m, e] = ids;
        if s > 1 || !(MANTISSA_BASE..EXPONENT_BASE).contains(&m) || !(EXPONENT_BASE..NUMERIC_VOCAB).contains(&e) {
            return None;
        }
        let t = TokenTriple {
            negative: s == 1,
            mantissa: (m - MANTISSA_BASE) as u16,
            exponent: (e - EXPONENT_BASE) as i16 + MIN_EXPONENT as i16,
        };
        t.is_valid().then_some(t)
    }
}

/// Rounds to four significant digits, half away from zero.
pub fn encode_float(v: f64) -> Result<TokenTriple, TokenError> {
    if !v.is_finite() {
        return Err(TokenError::Range(v));
    }
    if v == 0.0 {
        return Ok(TokenTriple::ZERO);
    }
    let a = v.abs();
    let mut q = a.log10().floor() as i32 - 3;
    let scale = |q: i32| if q >= 0 { a / 10f64.powi(q) } else { a * 10f64.powi(-q) };
    let mut m = scale(q).round();
    // log10 can be off by one ulp near powers of ten
    if m < 1000.0 {
        q -= 1;
        m = scale(q).round();
    } else if m >= 10_000.0 {
        q += 1;
        m = scale(q).round();
    }
    if m >= 10_000.0 {
        m = 1000.0;
        q += 1;
    }
    if !(MIN_EXPONENT..=MAX_EXPONENT).contains(&q) {
        return Err(TokenError::Range(v));
    }
    Ok(TokenTriple { negative: v < 0.0, mantissa: m as u16, exponent: q as i16 })
}

pub fn decode_float(t: TokenTriple) -> f64 {
    t.decode()
}

/// Rounds through the codec: `decode(encode(v))`.
pub fn round_trip(v: f64) -> Result<f64, TokenError> {
    encode_float(v).map(TokenTriple::decode)
}

/// Symbolic (non-numeric) tokens, in vocabulary order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Add,
    Mul,
    Sin,
    Square,
    Inv,
    Id,
    X(u8),
    Sep,
    Const,
    Bos,
    Eos,
    Pad,
    Cls,
}

const SPECIALS: [Special; 4 + 6 + 6] = [
    Special::Add,
    Special::Mul,
    Special::Sin,
    Special::Square,
    Special::Inv,
    Special::Id,
    Special::X(0),
    Special::X(1),
    Special::X(2),
    Special::X(3),
    Special::Sep,
    Special::Const,
    Special::Bos,
    Special::Eos,
    Special::Pad,
    Special::Cls,
];

impl Special {
    pub fn id(self) -> usize {
        let i = SPECIALS.iter().position(|s| *s == self).expect("known special");
        NUMERIC_VOCAB + i
    }

    pub fn from_id(id: usize) -> Option<Self> {
        id.checked_sub(NUMERIC_VOCAB).and_then(|i| SPECIALS.get(i).copied())
    }

    pub fn name(self) -> String {
        match self {
            Special::Add => "add".into(),
            Special::Mul => "mul".into(),
            Special::Sin => "sin".into(),
            Special::Square => "pow2".into(),
            Special::Inv => "inv".into(),
            Special::Id => "id".into(),
            Special::X(i) => format!("x{i}"),
            Special::Sep => "SEP".into(),
            Special::Const => "CONST".into(),
            Special::Bos => "BOS".into(),
            Special::Eos => "EOS".into(),
            Special::Pad => "PAD".into(),
            Special::Cls => "CLS".into(),
        }
    }
}

pub const VOCAB_SIZE: usize = NUMERIC_VOCAB + SPECIALS.len();
pub const BOS: usize = NUMERIC_VOCAB + 12;
pub const EOS: usize = NUMERIC_VOCAB + 13;
pub const PAD: usize = NUMERIC_VOCAB + 14;

/// Id <-> name tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
}

impl Vocab {
    pub fn build() -> Self {
        let mut names = Vec::with_capacity(VOCAB_SIZE);
        names.push("+".to_string());
        names.push("-".to_string());
        names.extend((0..MANTISSA_COUNT).map(|m| m.to_string()));
        names.extend((MIN_EXPONENT..=MAX_EXPONENT).map(|e| format!("E{e}")));
        names.extend(SPECIALS.iter().map(|s| s.name()));
        Vocab { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numeric_len(&self) -> usize {
        NUMERIC_VOCAB
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// One token per line; the line number (from 0) is the id.
    pub fn dump(&self, mut w: impl Write) -> io::Result<()> {
        for n in &self.names {
            writeln!(w, "{n}")?;
        }
        Ok(())
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.name(i).unwrap_or("?")).collect::<Vec<_>>().join(" ")
    }
}

/// Tokens for one trajectory: per time point, the triple for `t` followed by
/// one triple per state dimension. Length `s * 3 * (D + 1)`.
pub fn encode_trajectory(traj: &Trajectory) -> Result<Vec<usize>, TokenError> {
    let d = traj.dim();
    let mut out = Vec::with_capacity(traj.len() * 3 * (d + 1));
    for (t, row) in traj.times().iter().zip(traj.rows()) {
        out.extend(encode_float(*t)?.ids());
        for &x in row {
            out.extend(encode_float(x)?.ids());
        }
    }
    Ok(out)
}

pub fn symbol_ids(sym: Symbol, out: &mut Vec<usize>) -> Result<(), TokenError> {
    let special = match sym {
        Symbol::Binary(BinaryOp::Add) => Special::Add,
        Symbol::Binary(BinaryOp::Mul) => Special::Mul,
        Symbol::Unary(UnaryOp::Sin) => Special::Sin,
        Symbol::Unary(UnaryOp::Square) => Special::Square,
        Symbol::Unary(UnaryOp::Inv) => Special::Inv,
        Symbol::Unary(UnaryOp::Id) => Special::Id,
        Symbol::Var(i) if i < MAX_DIM => Special::X(i as u8),
        Symbol::Var(i) => return Err(ExprError::DimensionMismatch { index: i, dim: MAX_DIM }.into()),
        Symbol::Sep => Special::Sep,
        Symbol::Const(c) => {
            out.push(Special::Const.id());
            out.extend(encode_float(c)?.ids());
            return Ok(());
        }
    };
    out.push(special.id());
    Ok(())
}

/// `[BOS, prefix tokens..., EOS]`, constants as `CONST s m e`.
pub fn encode_system(system: &OdeSystem) -> Result<Vec<usize>, TokenError> {
    let mut out = vec![BOS];
    for sym in system.to_prefix() {
        symbol_ids(sym, &mut out)?;
    }
    out.push(EOS);
    Ok(out)
}

/// Maps the body of a token sequence (no BOS/EOS) back to symbols.
pub fn ids_to_symbols(body: &[usize], offset: usize) -> Result<Vec<Symbol>, TokenError> {
    let mut syms = Vec::with_capacity(body.len());
    let mut i = 0;
    while i < body.len() {
        let pos = offset + i;
        let id = body[i];
        let Some(sp) = Special::from_id(id) else {
            if id < NUMERIC_VOCAB {
                return Err(TokenError::BadConstant(pos));
            }
            return Err(TokenError::UnknownId(id));
        };
        let sym = match sp {
            Special::Add => Symbol::Binary(BinaryOp::Add),
            Special::Mul => Symbol::Binary(BinaryOp::Mul),
            Special::Sin => Symbol::Unary(UnaryOp::Sin),
            Special::Square => Symbol::Unary(UnaryOp::Square),
            Special::Inv => Symbol::Unary(UnaryOp::Inv),
            Special::Id => Symbol::Unary(UnaryOp::Id),
            Special::X(k) => Symbol::Var(k as usize),
            Special::Sep => Symbol::Sep,
            Special::Const => {
                let triple = body
                    .get(i + 1..i + 4)
                    .and_then(|s| TokenTriple::from_ids([s[0], s[1], s[2]]))
                    .ok_or(TokenError::BadConstant(pos))?;
                i += 3;
                Symbol::Const(triple.decode())
            }
            Special::Bos | Special::Eos | Special::Pad | Special::Cls => {
                return Err(TokenError::Unexpected { name: sp.name(), pos })
            }
        };
        syms.push(sym);
        i += 1;
    }
    Ok(syms)
}

/// Inverse of [`encode_system`]; malformed framing or grammar is an error.
pub fn decode_system(ids: &[usize], dim: usize) -> Result<OdeSystem, TokenError> {
    if ids.first() != Some(&BOS) {
        return Err(TokenError::MissingBos);
    }
    let Some(end) = ids.iter().position(|&t| t == EOS) else {
        return Err(TokenError::MissingEos);
    };
    if end + 1 != ids.len() {
        return Err(TokenError::TrailingTokens(end + 1));
    }
    let syms = ids_to_symbols(&ids[1..end], 1)?;
    Ok(OdeSystem::parse_prefix(&syms, dim)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprtree::Expr;

    fn t(neg: bool, m: u16, e: i16) -> TokenTriple {
        TokenTriple { negative: neg, mantissa: m, exponent: e }
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_float(3.14159).unwrap(), t(false, 3142, -3));
        assert_eq!(encode_float(0.0).unwrap(), TokenTriple::ZERO);
        assert_eq!(encode_float(-0.0).unwrap(), TokenTriple::ZERO);
        assert_eq!(encode_float(-0.05).unwrap(), t(true, 5000, -5));
        assert_eq!(encode_float(1.0).unwrap(), t(false, 1000, -3));
    }

    #[test]
    fn ties_round_away_and_carry() {
        assert_eq!(encode_float(12345.0).unwrap(), t(false, 1235, 1));
        assert_eq!(encode_float(-12345.0).unwrap(), t(true, 1235, 1));
        assert_eq!(encode_float(99995.0).unwrap(), t(false, 1000, 2));
        assert_eq!(encode_float(9.9996).unwrap(), t(false, 1000, -2));
    }

    #[test]
    fn decode_examples() {
        assert_eq!(t(false, 1234, -3).decode(), 1.234);
        let v = round_trip(123456.7).unwrap();
        assert_eq!(v, 123500.0);
        assert!(((v - 123456.7) / 123456.7).abs() <= 5e-4);
        assert_eq!(t(true, 9999, 100).decode(), -9.999e103);
    }

    #[test]
    fn range_errors() {
        assert!(encode_float(1e105).is_err());
        assert!(encode_float(1e-105).is_err());
        assert!(encode_float(f64::NAN).is_err());
        assert_eq!(encode_float(1000e-100).unwrap(), t(false, 1000, -100));
        assert_eq!(encode_float(9999e100).unwrap(), t(false, 9999, 100));
    }

    #[test]
    fn vocab_layout() {
        let v = Vocab::build();
        assert_eq!(NUMERIC_VOCAB, 10_203);
        assert_eq!(EXPONENT_COUNT, 201);
        assert_eq!(v.len(), VOCAB_SIZE);
        assert_eq!(v.name(BOS), Some("BOS"));
        assert_eq!(v.name(EOS), Some("EOS"));
        assert_eq!(v.name(PAD), Some("PAD"));
        assert_eq!(v.name(0), Some("+"));
        assert_eq!(v.name(2 + 9999), Some("9999"));
        assert_eq!(v.name(EXPONENT_BASE), Some("E-100"));
        assert_eq!(v.name(NUMERIC_VOCAB - 1), Some("E100"));
        assert_eq!(v, Vocab::build());
        for sp in SPECIALS {
            assert_eq!(Special::from_id(sp.id()), Some(sp));
        }
    }

    #[test]
    fn trajectory_token_count() {
        let traj = Trajectory::new(vec![1.0], vec![0.0], 1).unwrap();
        let ids = encode_trajectory(&traj).unwrap();
        assert_eq!(ids.len(), 6);
        assert_eq!(&ids[..3], &t(false, 1000, -3).ids());
        assert_eq!(&ids[3..], &TokenTriple::ZERO.ids());

        let times: Vec<f64> = (0..100).map(|i| 1.0 + i as f64 * 9.0 / 99.0).collect();
        let states: Vec<f64> = (0..200).map(|i| (i as f64).sin()).collect();
        let traj = Trajectory::new(times, states, 2).unwrap();
        assert_eq!(encode_trajectory(&traj).unwrap().len(), 900);
    }

    #[test]
    fn system_framing() {
        let s = OdeSystem::new(vec![Expr::var(0)]).unwrap();
        let ids = encode_system(&s).unwrap();
        assert_eq!(ids, vec![BOS, Special::X(0).id(), EOS]);
        assert_eq!(decode_system(&ids, 1).unwrap(), s);
        assert_eq!(decode_system(&ids[..2], 1), Err(TokenError::MissingEos));
        assert_eq!(decode_system(&ids[1..], 1), Err(TokenError::MissingBos));
    }

    #[test]
    fn truncated_constant_is_rejected() {
        let s = OdeSystem::new(vec![Expr::mul(Expr::Const(2.5), Expr::var(0))]).unwrap();
        let mut ids = encode_system(&s).unwrap();
        ids.remove(4);
        assert!(matches!(decode_system(&ids, 1), Err(TokenError::BadConstant(_))));
    }
}
