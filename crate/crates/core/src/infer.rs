//! Shared RMS rescaling, beam decoding and symbolic unscaling.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Scalar};
use crate::corpus::{system_from_strings, system_to_strings};
use crate::exec::Exec;
use crate::exprtree::{Expr, OdeSystem};
use crate::integrate::Trajectory;
use crate::model::{Model, ModelError};
use crate::tokenizer::{decode_system, encode_trajectory, TokenError, Vocab, BOS, EOS};

#[derive(Debug, Error)]
pub enum InferError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("input trajectory cannot be tokenized: {0}")]
    Token(#[from] TokenError),
    #[error("no beam candidate parses as a {dim}-dimensional system")]
    NoParse { dim: usize },
    #[error("invalid beam configuration: {0}")]
    Config(String),
}

/// How the shared factor `R` relates to the RMS of the initial values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleConvention {
    /// `R = rms`, so scaled initial values have unit RMS.
    #[default]
    DivideByRms,
    /// `1/R = rms`, the literal reading of the formula.
    ReciprocalRms,
}

/// RMS over all instances and components of the initial values.
pub fn initial_rms(instances: &[Trajectory]) -> f64 {
    let (sum, n) = instances
        .iter()
        .flat_map(|t| t.initial().iter())
        .fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Divides every state by one shared `R`; `R = 1` when all initial values are zero.
pub fn rms_scale_with(instances: &[Trajectory], conv: ScaleConvention) -> (Vec<Trajectory>, f64) {
    let rms = initial_rms(instances);
    let r = if rms > 0.0 && rms.is_finite() {
        match conv {
            ScaleConvention::DivideByRms => rms,
            ScaleConvention::ReciprocalRms => 1.0 / rms,
        }
    } else {
        1.0
    };
    let scaled = instances.iter().map(|t| t.map_states(|_, x| x / r)).collect();
    (scaled, r)
}

pub fn rms_scale(instances: &[Trajectory]) -> (Vec<Trajectory>, f64) {
    rms_scale_with(instances, ScaleConvention::DivideByRms)
}

/// Maps a system for `x̃ = x/R` back to `x`: `dx/dt = R f̃(x/R)`.
pub fn unscale_system(pred: &OdeSystem, r: f64) -> OdeSystem {
    assert!(r > 0.0 && r.is_finite(), "scale must be positive");
    if r == 1.0 {
        return pred.clone();
    }
    let inv = 1.0 / r;
    let eqs = pred
        .equations()
        .iter()
        .map(|e| {
            let sub = e.substitute(&|i| Expr::mul(Expr::Const(inv), Expr::var(i)));
            Expr::mul(Expr::Const(r), sub).fold_constants()
        })
        .collect();
    OdeSystem::new(eqs).expect("unscaling preserves validity")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub temperature: f64,
    /// Generated tokens allowed after BOS, EOS included.
    pub max_len: usize,
    /// Stochastic expansion (Gumbel top-k) seeded with this value.
    pub sample_seed: Option<u64>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam_size: 20, temperature: 0.1, max_len: 200, sample_seed: None }
    }
}

impl BeamConfig {
    pub fn greedy() -> Self {
        Self { beam_size: 1, temperature: 1.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), InferError> {
        if self.beam_size == 0 {
            return Err(InferError::Config("beam size must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(InferError::Config("temperature must be positive".into()));
        }
        if self.max_len == 0 {
            return Err(InferError::Config("max_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Full sequence, BOS first; ends in EOS when complete.
    pub tokens: Vec<usize>,
    /// Sum of temperature-scaled log-probabilities.
    pub log_prob: f64,
    /// `log_prob` per generated token.
    pub score: f64,
    pub complete: bool,
}

fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scaled.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    scaled.into_iter().map(|v| v - lse).collect()
}

/// Beam search over `logits / temperature` with `next` giving raw logits of
/// the token after a prefix. Candidates come back sorted by length-normalized
/// score (non-increasing); when nothing reaches EOS the best partial
/// sequences are returned flagged incomplete.
pub fn beam_search(
    cfg: &BeamConfig,
    mut next: impl FnMut(&[usize]) -> Result<Vec<f64>, InferError>,
) -> Result<Vec<Candidate>, InferError> {
    cfg.validate()?;
    let mut rng = cfg.sample_seed.map(ChaCha8Rng::seed_from_u64);
    let mut live: Vec<(f64, Vec<usize>)> = vec![(0.0, vec![BOS])];
    let mut done: Vec<(f64, Vec<usize>)> = Vec::new();
    for _ in 0..cfg.max_len {
        let mut pool: Vec<(f64, f64, Vec<usize>)> = Vec::new();
        for (lp, seq) in &live {
            let logp = log_softmax(&next(seq)?, cfg.temperature);
            // Gumbel perturbation turns top-k into sampling without replacement.
            let keys: Vec<f64> = match rng.as_mut() {
                Some(r) => logp.iter().map(|l| l - (-(r.random::<f64>().max(1e-300)).ln()).ln()).collect(),
                None => logp.clone(),
            };
            let mut order: Vec<usize> = (0..keys.len()).collect();
            let k = cfg.beam_size.min(order.len());
            order.select_nth_unstable_by(k - 1, |a, b| keys[*b].total_cmp(&keys[*a]).then(a.cmp(b)));
            for &tok in &order[..k] {
                let mut s = seq.clone();
                s.push(tok);
                pool.push((keys[tok] + lp, lp + logp[tok], s));
            }
        }
        pool.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.2.cmp(&b.2)));
        pool.truncate(cfg.beam_size - done.len());
        live.clear();
        for (_, lp, seq) in pool {
            if *seq.last().unwrap() == EOS {
                done.push((lp, seq));
            } else {
                live.push((lp, seq));
            }
        }
        if live.is_empty() || done.len() >= cfg.beam_size {
            break;
        }
    }
    let finish = |v: Vec<(f64, Vec<usize>)>, complete: bool| -> Vec<Candidate> {
        let mut scored: Vec<(f64, Vec<usize>, f64)> =
            v.into_iter().map(|(lp, s)| (lp / (s.len() - 1) as f64, s, lp)).collect();
        // score descending, ties by token sequence ascending
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        scored.into_iter().map(|(score, tokens, log_prob)| Candidate { tokens, log_prob, score, complete }).collect()
    };
    if done.is_empty() {
        Ok(finish(live, false))
    } else {
        Ok(finish(done, true))
    }
}

/// Beam decoding from an aggregated latent (already bridged to the decoder width).
pub fn beam_decode<F: Scalar>(
    model: &Model<F>,
    instances: &[Vec<usize>],
    dim: usize,
    cfg: &BeamConfig,
) -> Result<Vec<Candidate>, InferError> {
    let mut g = Graph::new(model.params());
    let memory = model.encode_system(&mut g, instances, dim)?;
    let cache = model.memory_cache(&mut g, memory);
    drop(g);
    let max_len = cfg.max_len.min(model.config().max_target_len);
    let cfg = BeamConfig { max_len, ..cfg.clone() };
    beam_search(&cfg, |prefix| Ok(model.next_token_logits(&cache, prefix)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    pub beam: BeamConfig,
    pub rescale: bool,
    pub convention: ScaleConvention,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { beam: BeamConfig::default(), rescale: true, convention: ScaleConvention::DivideByRms }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub system: OdeSystem,
    /// Token sequence of the chosen candidate (in the scaled frame).
    pub tokens: Vec<usize>,
    pub r: f64,
    pub candidates: Vec<Candidate>,
    /// Candidates ranked above the chosen one that failed to parse.
    pub parse_failures: usize,
}

/// Rescales and tokenizes model inputs.
pub fn prepare_inputs(
    instances: &[Trajectory],
    rescale: bool,
    conv: ScaleConvention,
) -> Result<(Vec<Vec<usize>>, f64), TokenError> {
    let (scaled, r) = if rescale { rms_scale_with(instances, conv) } else { (instances.to_vec(), 1.0) };
    let tokens = scaled.iter().map(encode_trajectory).collect::<Result<_, _>>()?;
    Ok((tokens, r))
}

pub fn predict<F: Scalar>(instances: &[Trajectory], model: &Model<F>, cfg: &PredictConfig) -> Result<Prediction, InferError> {
    let dim = instances.first().ok_or(ModelError::NoInstances)?.dim();
    let (tokens, r) = prepare_inputs(instances, cfg.rescale, cfg.convention)?;
    let candidates = beam_decode(model, &tokens, dim, &cfg.beam)?;
    for (i, c) in candidates.iter().enumerate() {
        if !c.complete {
            continue;
        }
        if let Ok(sys) = decode_system(&c.tokens, dim) {
            return Ok(Prediction {
                system: unscale_system(&sys, r),
                tokens: c.tokens.clone(),
                r,
                candidates,
                parse_failures: i,
            });
        }
    }
    Err(InferError::NoParse { dim })
}

/// One line of a predictions file. `expressions` is `None` on failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub id: u64,
    pub instances: usize,
    pub sigma: f64,
    pub expressions: Option<Vec<String>>,
    pub infix: Option<String>,
    pub tokens: Vec<String>,
    pub r: f64,
    pub scores: Vec<f64>,
    pub error: Option<String>,
}

impl PredictionLine {
    pub fn from_result(id: u64, instances: usize, sigma: f64, res: &Result<Prediction, InferError>, vocab: &Vocab) -> Self {
        match res {
            Ok(p) => Self {
                id,
                instances,
                sigma,
                expressions: Some(system_to_strings(&p.system)),
                infix: Some(p.system.render_inline()),
                tokens: p.tokens.iter().map(|&t| vocab.name(t).unwrap_or("?").to_string()).collect(),
                r: p.r,
                scores: p.candidates.iter().map(|c| c.score).collect(),
                error: None,
            },
            Err(e) => Self {
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

    /// The predicted system, `Err` with a reason when unavailable.
    pub fn system(&self) -> Result<OdeSystem, String> {
        match &self.expressions {
            Some(e) => system_from_strings(e),
            None => Err(self.error.clone().unwrap_or_else(|| "no prediction".into())),
        }
    }
}

pub fn write_predictions(w: &mut dyn Write, lines: &[PredictionLine]) -> std::io::Result<()> {
    for l in lines {
        serde_json::to_writer(&mut *w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_predictions(r: impl BufRead) -> Result<Vec<PredictionLine>, String> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    Ok(out)
}

/// Predicts every `(id, instances, sigma)` job; order is preserved.
pub fn predict_many<F: Scalar>(
    jobs: &[(u64, f64, Vec<Trajectory>)],
    model: &Model<F>,
    cfg: &PredictConfig,
    exec: Exec,
) -> Vec<PredictionLine> {
    let vocab = Vocab::build();
    exec.map(jobs, |(id, sigma, inst)| {
        let res = predict(inst, model, cfg);
        PredictionLine::from_result(*id, inst.len(), *sigma, &res, &vocab)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprtree::UnaryOp;
    use crate::tokenizer::VOCAB_SIZE;

    fn traj(x0: &[f64]) -> Trajectory {
        Trajectory::new(vec![0.0, 1.0], [x0, x0].concat(), x0.len()).unwrap()
    }

    #[test]
    fn rms_examples() {
        let (s, r) = rms_scale(&[traj(&[3.0]), traj(&[4.0])]);
        assert!((r - 12.5f64.sqrt()).abs() < 1e-12);
        assert!((s[0].initial()[0] - 0.848_528).abs() < 1e-6);
        assert!((s[1].initial()[0] - 1.131_371).abs() < 1e-6);
        assert!((initial_rms(&s) - 1.0).abs() < 1e-12);
        assert_eq!(rms_scale(&[traj(&[1.0])]).1, 1.0);
        assert_eq!(rms_scale(&[traj(&[20.0]), traj(&[-20.0])]).1, 20.0);
        assert_eq!(rms_scale(&[traj(&[0.0, 0.0])]).1, 1.0);
        let (_, r) = rms_scale_with(&[traj(&[4.0])], ScaleConvention::ReciprocalRms);
        assert_eq!(r, 0.25);
    }

    #[test]
    fn unscale_examples() {
        let sq = OdeSystem::new(vec![Expr::unary(UnaryOp::Square, Expr::var(0))]).unwrap();
        let u = unscale_system(&sq, 2.0);
        for x in [-3.0, 0.5, 7.0] {
            assert!((u.equations()[0].eval(&[x]).unwrap() - x * x / 2.0).abs() < 1e-12);
        }
        let lin = OdeSystem::new(vec![Expr::mul(Expr::Const(-1.0), Expr::var(0))]).unwrap();
        for r in [0.3, 2.0, 17.0] {
            let u = unscale_system(&lin, r);
            assert!((u.equations()[0].eval(&[1.7]).unwrap() + 1.7).abs() < 1e-12);
        }
        assert_eq!(unscale_system(&sq, 1.0), sq);
    }

    #[test]
    fn greedy_and_ties() {
        // after BOS, tokens 5 and 6 tie; then EOS
        let table = |p: &[usize]| -> Result<Vec<f64>, InferError> {
            let mut l = vec![0.0; VOCAB_SIZE];
            if p.len() == 1 {
                l[5] = 3.0;
                l[6] = 3.0;
            } else {
                l[EOS] = 10.0;
            }
            Ok(l)
        };
        let c = beam_search(&BeamConfig::greedy(), table).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].tokens, vec![BOS, 5, EOS]);
        let c = beam_search(&BeamConfig { beam_size: 4, temperature: 1.0, ..Default::default() }, table).unwrap();
        assert!(c.windows(2).all(|w| w[0].score >= w[1].score));
        assert_eq!(c[0].tokens, vec![BOS, 5, EOS]);
        assert_eq!(c[1].tokens, vec![BOS, 6, EOS]);
        assert!(c.iter().all(|c| c.complete));
    }

    #[test]
    fn incomplete_when_no_eos() {
        let never = |_: &[usize]| -> Result<Vec<f64>, InferError> {
            let mut l = vec![0.0; VOCAB_SIZE];
            l[EOS] = -1e9;
            Ok(l)
        };
        let c = beam_search(&BeamConfig { beam_size: 2, temperature: 1.0, max_len: 5, sample_seed: None }, never).unwrap();
        assert!(!c.is_empty() && c.iter().all(|c| !c.complete && c.tokens.len() == 6));
        assert!(beam_search(&BeamConfig { beam_size: 0, ..Default::default() }, never).is_err());
    }

    #[test]
    fn larger_beam_keeps_top_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table: Vec<Vec<f64>> = (0..64).map(|_| (0..VOCAB_SIZE).map(|_| rng.random::<f64>() * 4.0).collect()).collect();
        let next = |p: &[usize]| -> Result<Vec<f64>, InferError> {
            let mut l = table[p.len() * 7 % 64].clone();
            l[EOS] = if p.len() >= 3 { 9.0 } else { -9.0 };
            Ok(l)
        };
        let small = beam_search(&BeamConfig { beam_size: 2, temperature: 0.5, ..Default::default() }, next).unwrap();
        let big = beam_search(&BeamConfig { beam_size: 5, temperature: 0.5, ..Default::default() }, next).unwrap();
        assert!(big[0].score >= small[0].score);
    }
}
