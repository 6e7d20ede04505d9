//! Trajectory embedder, transformer encoder, the four instance aggregators and
//! the autoregressive decoder, all expressed on the autograd tape.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AttnPattern, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::exprtree::MAX_DIM;
use crate::tokenizer::{NUMERIC_VOCAB, PAD, VOCAB_SIZE};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("system dimension {0} exceeds the model maximum {MAX_DIM}")]
    DimTooLarge(usize),
    #[error("trajectory token count {len} is not a multiple of {per_step}")]
    BadTrajectory { len: usize, per_step: usize },
    #[error("instances of one system must share their length")]
    RaggedInstances,
    #[error("no instances to aggregate")]
    NoInstances,
    #[error("target of {len} tokens exceeds the maximum {max}")]
    TargetTooLong { len: usize, max: usize },
    #[error("target contains no non-padding tokens")]
    EmptyLoss,
    #[error("token id {0} is outside the vocabulary")]
    BadToken(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Mean,
    Attentive,
    XattnTimeAgnostic,
    AttnTimeAware,
}

impl std::str::FromStr for AggregatorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Self::Mean),
            "attentive" => Ok(Self::Attentive),
            "xattn" | "xattn_time_agnostic" => Ok(Self::XattnTimeAgnostic),
            "timeaware" | "attn_time_aware" => Ok(Self::AttnTimeAware),
            _ => Err(format!("unknown aggregator {s:?} (mean, attentive, xattn, timeaware)")),
        }
    }
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 4] = [Self::Mean, Self::Attentive, Self::XattnTimeAgnostic, Self::AttnTimeAware];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Attentive => "attentive",
            Self::XattnTimeAgnostic => "xattn",
            Self::AttnTimeAware => "timeaware",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_enc: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub d_dec: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    /// Hidden width of every feed-forward block, as a multiple of the model width.
    pub ffn_mult: usize,
    pub aggregator: AggregatorKind,
    pub agg_layers: usize,
    pub agg_heads: usize,
    pub d_max: usize,
    /// Longest decoder input, BOS included.
    pub max_target_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_enc: 256,
            enc_layers: 4,
            enc_heads: 16,
            d_dec: 512,
            dec_layers: 12,
            dec_heads: 16,
            ffn_mult: 4,
            aggregator: AggregatorKind::Mean,
            agg_layers: 4,
            agg_heads: 8,
            d_max: MAX_DIM,
            max_target_len: 512,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and desk-scale runs.
    pub fn toy(aggregator: AggregatorKind) -> Self {
        Self {
            d_enc: 64,
            enc_layers: 2,
            enc_heads: 4,
            d_dec: 64,
            dec_layers: 4,
            dec_heads: 4,
            ffn_mult: 4,
            aggregator,
            agg_layers: 2,
            agg_heads: 4,
            d_max: MAX_DIM,
            max_target_len: 256,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_enc == 0 || self.d_dec == 0 || self.ffn_mult == 0 {
            return bad("widths must be positive");
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("encoder and decoder need at least one layer");
        }
        for (d, h, what) in [
            (self.d_enc, self.enc_heads, "encoder"),
            (self.d_dec, self.dec_heads, "decoder"),
            (self.d_enc, self.agg_heads, "aggregator"),
        ] {
            if h == 0 || d % h != 0 {
                return Err(ModelError::Config(format!("{what} width {d} not divisible by {h} heads")));
            }
        }
        if matches!(self.aggregator, AggregatorKind::Attentive | AggregatorKind::AttnTimeAware) && self.agg_layers == 0 {
            return bad("aggregator encoder needs at least one layer");
        }
        if self.d_max == 0 || self.d_max > MAX_DIM {
            return bad("d_max must lie in 1..=4");
        }
        if self.max_target_len < 2 {
            return bad("max_target_len must allow BOS and one token");
        }
        Ok(())
    }

    /// Token slots per time point: `3 (D_max + 1)`.
    pub fn slots(&self) -> usize {
        3 * (self.d_max + 1)
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct Stack {
    layers: Vec<EncLayer>,
    ln: Norm,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross: Attn,
    ln3: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct TimeEncoder {
    cls: ParamId,
    stack: Stack,
}

#[derive(Debug, Clone)]
enum AggParams {
    Mean,
    Attentive { time: TimeEncoder, w: ParamId },
    XAttn { query: ParamId, attn: Attn },
    TimeAware { time: TimeEncoder, cls: ParamId, fusion: Stack },
}

#[derive(Debug, Clone)]
struct Layout {
    slot_embed: ParamId,
    emb1: Linear,
    emb2: Linear,
    encoder: Stack,
    agg: AggParams,
    bridge: Linear,
    tok_embed: ParamId,
    decoder: Vec<DecLayer>,
    dec_ln: Norm,
    out: Linear,
}

struct Builder<'a, F: Scalar> {
    store: &'a mut ParamStore<F>,
    rng: ChaCha8Rng,
}

impl<F: Scalar> Builder<'_, F> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            F::from_f64(z * std)
        });
        self.store.add(name, t)
    }

    fn constant(&mut self, name: String, rows: usize, cols: usize, v: f64) -> ParamId {
        self.store.add(name, Tensor::from_vec(rows, cols, vec![F::from_f64(v); rows * cols]))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(fan_in, fan_out, |_, _| F::from_f64(rng.random_range(-a..a)));
        let w = self.store.add(format!("{name}.w"), t);
        let b = self.constant(format!("{name}.b"), 1, fan_out, 0.0);
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm { g: self.constant(format!("{name}.g"), 1, d, 1.0), b: self.constant(format!("{name}.b"), 1, d, 0.0) }
    }

    fn attn(&mut self, name: &str, d: usize, heads: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
            heads,
        }
    }

    fn stack(&mut self, name: &str, layers: usize, d: usize, heads: usize, mult: usize) -> Stack {
        let layers = (0..layers)
            .map(|i| {
                let p = format!("{name}.{i}");
                EncLayer {
                    ln1: self.norm(&format!("{p}.ln1"), d),
                    attn: self.attn(&format!("{p}.attn"), d, heads),
                    ln2: self.norm(&format!("{p}.ln2"), d),
                    ff1: self.linear(&format!("{p}.ff1"), d, mult * d),
                    ff2: self.linear(&format!("{p}.ff2"), mult * d, d),
                }
            })
            .collect();
        Stack { layers, ln: self.norm(&format!("{name}.ln"), d) }
    }

    fn time_encoder(&mut self, name: &str, cfg: &ModelConfig) -> TimeEncoder {
        TimeEncoder {
            cls: self.normal(format!("{name}.cls"), 1, cfg.d_enc, 1.0),
            stack: self.stack(name, cfg.agg_layers, cfg.d_enc, cfg.agg_heads, cfg.ffn_mult),
        }
    }
}

/// Sinusoidal position table, `n x d`.
pub fn positional_encoding<F: Scalar>(n: usize, d: usize) -> Tensor<F> {
    Tensor::from_fn(n, d, |pos, i| {
        let freq = 1.0 / 10_000f64.powf((i / 2 * 2) as f64 / d as f64);
        let a = pos as f64 * freq;
        F::from_f64(if i % 2 == 0 { a.sin() } else { a.cos() })
    })
}

/// One system as the network sees it: tokenized instances plus the decoder
/// target framed by BOS/EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub dim: usize,
    /// One token vector per instance, `s * 3 (dim + 1)` ids each.
    pub instances: Vec<Vec<usize>>,
    pub target: Vec<usize>,
}

impl Example {
    pub fn steps(&self) -> usize {
        self.instances.first().map_or(0, |t| t.len() / (3 * (self.dim + 1)))
    }
}

/// The encoder/aggregator/decoder network with its parameters.
#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    cfg: ModelConfig,
    params: ParamStore<F>,
    layout: Layout,
}

/// Per-layer cross-attention keys and values of one aggregated latent.
#[derive(Debug, Clone)]
pub struct MemoryCache<F> {
    kv: Vec<(Tensor<F>, Tensor<F>)>,
}

impl<F: Scalar> Model<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let layout = {
            let mut b = Builder { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
            let (de, dd, m) = (cfg.d_enc, cfg.d_dec, cfg.ffn_mult);
            let slot_embed = b.normal("embed.tokens".into(), NUMERIC_VOCAB, de, 1.0);
            let emb1 = b.linear("embed.ff1", cfg.slots() * de, de);
            let emb2 = b.linear("embed.ff2", de, de);
            let encoder = b.stack("enc", cfg.enc_layers, de, cfg.enc_heads, m);
            let agg = match cfg.aggregator {
                AggregatorKind::Mean => AggParams::Mean,
                AggregatorKind::Attentive => AggParams::Attentive {
                    time: b.time_encoder("agg.time", &cfg),
                    w: b.normal("agg.w".into(), 1, de, (1.0 / de as f64).sqrt()),
                },
                AggregatorKind::XattnTimeAgnostic => AggParams::XAttn {
                    query: b.normal("agg.query".into(), 1, de, 1.0),
                    attn: b.attn("agg.xattn", de, cfg.agg_heads),
                },
                AggregatorKind::AttnTimeAware => AggParams::TimeAware {
                    time: b.time_encoder("agg.time", &cfg),
                    cls: b.normal("agg.cls".into(), 1, de, 1.0),
                    fusion: b.stack("agg.fusion", cfg.agg_layers, de, cfg.agg_heads, m),
                },
            };
            let bridge = b.linear("bridge", de, dd);
            let tok_embed = b.normal("dec.tokens".into(), VOCAB_SIZE, dd, 1.0);
            let decoder = (0..cfg.dec_layers)
                .map(|i| {
                    let p = format!("dec.{i}");
                    DecLayer {
                        ln1: b.norm(&format!("{p}.ln1"), dd),
                        self_attn: b.attn(&format!("{p}.self"), dd, cfg.dec_heads),
                        ln2: b.norm(&format!("{p}.ln2"), dd),
                        cross: b.attn(&format!("{p}.cross"), dd, cfg.dec_heads),
                        ln3: b.norm(&format!("{p}.ln3"), dd),
                        ff1: b.linear(&format!("{p}.ff1"), dd, m * dd),
                        ff2: b.linear(&format!("{p}.ff2"), m * dd, dd),
                    }
                })
                .collect();
            let dec_ln = b.norm("dec.ln", dd);
            let out = b.linear("dec.out", dd, VOCAB_SIZE);
            Layout { slot_embed, emb1, emb2, encoder, agg, bridge, tok_embed, decoder, dec_ln, out }
        };
        Ok(Self { cfg, params: store, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// Same network in another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model { cfg: self.cfg.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    fn lin(&self, g: &mut Graph<'_, F>, l: Linear, x: Var) -> Var {
        let w = g.param(l.w);
        let b = g.param(l.b);
        g.linear(x, w, b)
    }

    fn ln(&self, g: &mut Graph<'_, F>, n: Norm, x: Var) -> Var {
        let gamma = g.param(n.g);
        let beta = g.param(n.b);
        g.layer_norm(x, gamma, beta)
    }

    fn mha(&self, g: &mut Graph<'_, F>, a: &Attn, xq: Var, xkv: Var, pattern: AttnPattern) -> Var {
        let q = self.lin(g, a.q, xq);
        let k = self.lin(g, a.k, xkv);
        let v = self.lin(g, a.v, xkv);
        let o = g.attention(q, k, v, a.heads, pattern);
        self.lin(g, a.o, o)
    }

    fn ffn(&self, g: &mut Graph<'_, F>, l1: Linear, l2: Linear, x: Var) -> Var {
        let h = self.lin(g, l1, x);
        let h = g.gelu(h);
        self.lin(g, l2, h)
    }

    fn run_stack(&self, g: &mut Graph<'_, F>, st: &Stack, mut x: Var, pattern: AttnPattern) -> Var {
        for l in &st.layers {
            let h = self.ln(g, l.ln1, x);
            let h = self.mha(g, &l.attn, h, h, pattern);
            x = g.add(x, h);
            let h = self.ln(g, l.ln2, x);
            let h = self.ffn(g, l.ff1, l.ff2, h);
            x = g.add(x, h);
        }
        self.ln(g, st.ln, x)
    }

    fn add_positions(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let (n, d) = g.value(x).shape();
        let pe = g.input(positional_encoding(n, d));
        g.add(x, pe)
    }

    /// `H: s x d_enc` from one tokenized trajectory of a `dim`-dimensional system.
    pub fn embed_trajectory(&self, g: &mut Graph<'_, F>, tokens: &[usize], dim: usize) -> Result<Var, ModelError> {
        if dim == 0 || dim > self.cfg.d_max {
            return Err(ModelError::DimTooLarge(dim));
        }
        let per_step = 3 * (dim + 1);
        if tokens.is_empty() || tokens.len() % per_step != 0 {
            return Err(ModelError::BadTrajectory { len: tokens.len(), per_step });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= NUMERIC_VOCAB) {
            return Err(ModelError::BadToken(t));
        }
        let s = tokens.len() / per_step;
        let slots = self.cfg.slots();
        let mut ids = Vec::with_capacity(s * slots);
        for step in tokens.chunks(per_step) {
            ids.extend(step.iter().map(|&t| Some(t)));
            ids.extend(std::iter::repeat_n(None, slots - per_step));
        }
        let table = g.param(self.layout.slot_embed);
        let e = g.embedding(table, ids);
        let e = g.reshape(e, s, slots * self.cfg.d_enc);
        let h = self.lin(g, self.layout.emb1, e);
        let h = g.gelu(h);
        Ok(self.lin(g, self.layout.emb2, h))
    }

    /// `Z_j = E(H_j)`.
    pub fn encode(&self, g: &mut Graph<'_, F>, h: Var) -> Var {
        let x = self.add_positions(g, h);
        self.run_stack(g, &self.layout.encoder, x, AttnPattern::Full { causal: false })
    }

    fn condense(&self, g: &mut Graph<'_, F>, te: &TimeEncoder, z: Var) -> Var {
        let cls = g.param(te.cls);
        let x = g.concat_rows(&[cls, z]);
        let x = self.add_positions(g, x);
        let y = self.run_stack(g, &te.stack, x, AttnPattern::Full { causal: false });
        g.slice_rows(y, 0, 1)
    }

    /// Class-token summary `1 x d_enc` of one instance latent; `None` when the
    /// aggregator has no time encoder.
    pub fn condense_time(&self, g: &mut Graph<'_, F>, z: Var) -> Option<Var> {
        match &self.layout.agg {
            AggParams::Attentive { time, .. } | AggParams::TimeAware { time, .. } => Some(self.condense(g, time, z)),
            _ => None,
        }
    }

    /// Fuses `n` instance latents (each `s x d_enc`) into `Z̄: s x d_enc`.
    /// Also returns the pooling weights for the attentive aggregator.
    pub fn aggregate(&self, g: &mut Graph<'_, F>, zs: &[Var]) -> Result<(Var, Option<Vec<f64>>), ModelError> {
        let Some(&first) = zs.first() else { return Err(ModelError::NoInstances) };
        let (s, d) = g.value(first).shape();
        if zs.iter().any(|z| g.value(*z).shape() != (s, d)) {
            return Err(ModelError::RaggedInstances);
        }
        let n = zs.len();
        match &self.layout.agg {
            AggParams::Mean => {
                let sum = g.add_n(zs);
                Ok((g.scale(sum, F::from_f64(1.0 / n as f64)), None))
            }
            AggParams::Attentive { time, w } => {
                let condensed: Vec<Var> = zs.iter().map(|z| self.condense(g, time, *z)).collect();
                let zt = g.concat_rows(&condensed);
                let w = g.param(*w);
                let scores = g.matmul_ex(w, zt, false, true);
                let omega = g.softmax_rows(scores);
                let stacked = g.concat_rows(zs);
                let flat = g.reshape(stacked, n, s * d);
                let pooled = g.matmul(omega, flat);
                let weights = g.value(omega).data().iter().map(|v| v.to_f64()).collect();
                Ok((g.reshape(pooled, s, d), Some(weights)))
            }
            AggParams::XAttn { query, attn } => {
                let q = g.param(*query);
                let q = self.lin(g, attn.q, q);
                let q = g.repeat_rows(q, s);
                let kv = g.concat_rows(zs);
                let k = self.lin(g, attn.k, kv);
                let v = self.lin(g, attn.v, kv);
                let o = g.attention(q, k, v, attn.heads, AttnPattern::PerStep { steps: s });
                Ok((self.lin(g, attn.o, o), None))
            }
            AggParams::TimeAware { time, cls, fusion } => {
                let mut parts: Vec<Var> = zs.to_vec();
                for z in zs {
                    let zt = self.condense(g, time, *z);
                    parts.push(g.repeat_rows(zt, s));
                }
                let c = g.param(*cls);
                parts.push(g.repeat_rows(c, s));
                let x = g.concat_rows(&parts);
                let y = self.run_stack(g, fusion, x, AttnPattern::PerStep { steps: s });
                Ok((g.slice_rows(y, 2 * n * s, s), None))
            }
        }
    }

    /// Embeds, encodes and aggregates the instances, then maps the result to
    /// the decoder width.
    pub fn encode_system(&self, g: &mut Graph<'_, F>, instances: &[Vec<usize>], dim: usize) -> Result<Var, ModelError> {
        if instances.is_empty() {
            return Err(ModelError::NoInstances);
        }
        if instances.iter().any(|t| t.len() != instances[0].len()) {
            return Err(ModelError::RaggedInstances);
        }
        let zs = instances
            .iter()
            .map(|t| {
                let h = self.embed_trajectory(g, t, dim)?;
                Ok(self.encode(g, h))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let (zbar, _) = self.aggregate(g, &zs)?;
        Ok(self.lin(g, self.layout.bridge, zbar))
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        if tokens.len() > self.cfg.max_target_len {
            return Err(ModelError::TargetTooLong { len: tokens.len(), max: self.cfg.max_target_len });
        }
        match tokens.iter().find(|&&t| t >= VOCAB_SIZE) {
            Some(&t) => Err(ModelError::BadToken(t)),
            None => Ok(()),
        }
    }

    fn decoder_hidden(
        &self,
        g: &mut Graph<'_, F>,
        tokens: &[usize],
        mut cross_kv: impl FnMut(&mut Graph<'_, F>, usize) -> (Var, Var),
    ) -> Var {
        let table = g.param(self.layout.tok_embed);
        let x = g.embedding(table, tokens.iter().map(|&t| Some(t)).collect());
        let mut x = self.add_positions(g, x);
        for (i, l) in self.layout.decoder.iter().enumerate() {
            let h = self.ln(g, l.ln1, x);
            let h = self.mha(g, &l.self_attn, h, h, AttnPattern::Full { causal: true });
            x = g.add(x, h);
            let h = self.ln(g, l.ln2, x);
            let q = self.lin(g, l.cross.q, h);
            let (k, v) = cross_kv(g, i);
            let o = g.attention(q, k, v, l.cross.heads, AttnPattern::Full { causal: false });
            let h = self.lin(g, l.cross.o, o);
            x = g.add(x, h);
            let h = self.ln(g, l.ln3, x);
            let h = self.ffn(g, l.ff1, l.ff2, h);
            x = g.add(x, h);
        }
        self.ln(g, self.layout.dec_ln, x)
    }

    /// Teacher-forced logits `len(tokens) x VOCAB_SIZE` given the bridged
    /// latent `memory: s x d_dec`; row `k` depends on `tokens[..=k]` only.
    pub fn decode_logits(&self, g: &mut Graph<'_, F>, memory: Var, tokens: &[usize]) -> Result<Var, ModelError> {
        self.check_tokens(tokens)?;
        let h = self.decoder_hidden(g, tokens, |g, i| {
            let l = &self.layout.decoder[i];
            (self.lin(g, l.cross.k, memory), self.lin(g, l.cross.v, memory))
        });
        Ok(self.lin(g, self.layout.out, h))
    }

    /// Cross-attention keys/values for incremental decoding.
    pub fn memory_cache(&self, g: &mut Graph<'_, F>, memory: Var) -> MemoryCache<F> {
        let kv = self
            .layout
            .decoder
            .iter()
            .map(|l| {
                let k = self.lin(g, l.cross.k, memory);
                let v = self.lin(g, l.cross.v, memory);
                (g.value(k).clone(), g.value(v).clone())
            })
            .collect();
        MemoryCache { kv }
    }

    /// Log-probabilities of the token following `prefix`.
    pub fn next_token_logits(&self, cache: &MemoryCache<F>, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
        self.check_tokens(prefix)?;
        let mut g = Graph::new(&self.params);
        let h = self.decoder_hidden(&mut g, prefix, |g, i| {
            let (k, v) = &cache.kv[i];
            (g.input(k.clone()), g.input(v.clone()))
        });
        let last = g.slice_rows(h, prefix.len() - 1, 1);
        let logits = self.lin(&mut g, self.layout.out, last);
        Ok(g.value(logits).data().iter().map(|v| v.to_f64()).collect())
    }

    /// Mean token cross-entropy times `scale`, PAD targets masked. `logits`
    /// rows predict `targets` one-to-one.
    pub fn loss(&self, g: &mut Graph<'_, F>, logits: Var, targets: &[usize], scale: f64) -> Result<Var, ModelError> {
        let t: Vec<Option<usize>> = targets.iter().map(|&t| (t != PAD).then_some(t)).collect();
        let count = t.iter().flatten().count();
        if count == 0 {
            return Err(ModelError::EmptyLoss);
        }
        Ok(g.cross_entropy(logits, t, F::from_f64(scale / count as f64)))
    }

    /// Teacher-forced summed token cross-entropy of one example, scaled by
    /// `scale`; the caller normalizes over a batch.
    pub fn example_loss(&self, g: &mut Graph<'_, F>, ex: &Example, scale: f64) -> Result<(Var, usize), ModelError> {
        if ex.target.len() < 2 {
            return Err(ModelError::EmptyLoss);
        }
        let memory = self.encode_system(g, &ex.instances, ex.dim)?;
        let (input, output) = (&ex.target[..ex.target.len() - 1], &ex.target[1..]);
        let logits = self.decode_logits(g, memory, input)?;
        let n = output.iter().filter(|&&t| t != PAD).count();
        let loss = self.loss(g, logits, output, scale * n as f64)?;
        Ok((loss, n))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let ck = Checkpoint::from_model(self, serde_json::Value::Null);
        ck.save(path)
    }

    /// Loads a checkpoint; `expected` guards against config drift.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self, ModelError> {
        let ck = Checkpoint::load(path)?;
        ck.into_model(expected).map(|(m, _)| m)
    }
}

const MAGIC: &[u8; 8] = b"SYMODECK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<(String, usize, usize)>,
}

/// Named tensors plus a model config and free-form metadata. Layout: magic,
/// version (u32 LE), header length (u64 LE), JSON header, raw LE values.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn from_model<F: Scalar>(m: &Model<F>, meta: serde_json::Value) -> Self {
        let tensors = m.params.iter().map(|(n, t)| (n.to_string(), t.cast())).collect();
        Self { config: m.cfg.clone(), meta, tensors }
    }

    /// Rebuilds the model; tensors beyond the model's parameters are returned.
    pub fn into_model<F: Scalar>(self, expected: Option<&ModelConfig>) -> Result<(Model<F>, Vec<(String, Tensor<f64>)>), ModelError> {
        if let Some(e) = expected {
            if *e != self.config {
                return Err(ModelError::Checkpoint("model configuration differs from the checkpoint".into()));
            }
        }
        let mut model = Model::<F>::new(self.config, 0)?;
        let mut rest = Vec::new();
        let mut seen = 0;
        for (name, t) in self.tensors {
            match model.params.find(&name) {
                Some(id) => {
                    if model.params.get(id).shape() != t.shape() {
                        return Err(ModelError::Checkpoint(format!("shape mismatch for {name}")));
                    }
                    *model.params.get_mut(id) = t.cast();
                    seen += 1;
                }
                None => rest.push((name, t)),
            }
        }
        if seen != model.params.len() {
            return Err(ModelError::Checkpoint(format!("{} of {} parameters present", seen, model.params.len())));
        }
        Ok((model, rest))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let header = Header {
            config: self.config.clone(),
            dtype: "f64".into(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.rows(), t.cols())).collect(),
        };
        let hjson = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(hjson.len() as u64).to_le_bytes())?;
        w.write_all(&hjson)?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated file"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let hlen = u64::from_le_bytes(b8) as usize;
        let mut hjson = vec![0u8; hlen];
        r.read_exact(&mut hjson).map_err(|_| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&hjson).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if header.dtype != "f64" {
            return Err(bad("unknown dtype"));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (name, rows, cols) in header.tensors {
            let mut buf = vec![0u8; rows * cols * 8];
            r.read_exact(&mut buf).map_err(|_| bad("truncated tensor data"))?;
            let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::from_vec(rows, cols, data)));
        }
        Ok(Self { config: header.config, meta: header.meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::BOS;

    fn toy_example(dim: usize, n: usize, s: usize, seed: u64) -> Example {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let instances = (0..n).map(|_| (0..s * 3 * (dim + 1)).map(|_| rng.random_range(0..NUMERIC_VOCAB)).collect()).collect();
        Example { dim, instances, target: vec![BOS, NUMERIC_VOCAB + 1, NUMERIC_VOCAB + 6, crate::tokenizer::EOS] }
    }

    #[test]
    fn shapes() {
        let m = Model::<f32>::new(ModelConfig::toy(AggregatorKind::Mean), 1).unwrap();
        let ex = toy_example(2, 3, 10, 1);
        let mut g = Graph::new(m.params());
        let h = m.embed_trajectory(&mut g, &ex.instances[0], 2).unwrap();
        assert_eq!(g.value(h).shape(), (10, 64));
        assert_eq!(m.params().get(m.layout.emb1.w).rows(), 15 * 64);
        let z = m.encode(&mut g, h);
        assert_eq!(g.value(z).shape(), (10, 64));
        let mem = m.encode_system(&mut g, &ex.instances, 2).unwrap();
        let logits = m.decode_logits(&mut g, mem, &ex.target[..3]).unwrap();
        assert_eq!(g.value(logits).shape(), (3, VOCAB_SIZE));
    }

    #[test]
    fn input_errors() {
        let m = Model::<f32>::new(ModelConfig::toy(AggregatorKind::Mean), 1).unwrap();
        let mut g = Graph::new(m.params());
        assert!(matches!(m.embed_trajectory(&mut g, &[0; 18], 5), Err(ModelError::DimTooLarge(5))));
        assert!(matches!(m.embed_trajectory(&mut g, &[0; 10], 2), Err(ModelError::BadTrajectory { .. })));
        assert!(matches!(m.aggregate(&mut g, &[]), Err(ModelError::NoInstances)));
        let mem = g.input(Tensor::zeros(4, 64));
        let long = vec![BOS; 300];
        assert!(matches!(m.decode_logits(&mut g, mem, &long), Err(ModelError::TargetTooLong { .. })));
        let logits = m.decode_logits(&mut g, mem, &[BOS, 3]).unwrap();
        assert!(matches!(m.loss(&mut g, logits, &[PAD, PAD], 1.0), Err(ModelError::EmptyLoss)));
        assert!(ModelConfig { enc_heads: 5, ..ModelConfig::toy(AggregatorKind::Mean) }.validate().is_err());
    }

    #[test]
    fn padding_slots_do_not_touch_unused_embeddings() {
        let m = Model::<f64>::new(ModelConfig { d_enc: 8, enc_heads: 2, agg_heads: 2, ..ModelConfig::toy(AggregatorKind::Mean) }, 3).unwrap();
        let mut g = Graph::new(m.params());
        let h = m.embed_trajectory(&mut g, &[5; 6], 1).unwrap();
        let loss = g.sum_all(h);
        let grads = g.backward(loss);
        let gt = grads.param(m.layout.slot_embed).unwrap();
        let touched: Vec<usize> = (0..gt.rows()).filter(|&r| gt.row(r).iter().any(|v| *v != 0.0)).collect();
        assert_eq!(touched, vec![5]);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let m = Model::<f64>::new(ModelConfig::toy(AggregatorKind::Mean), 1).unwrap();
        let mut g = Graph::new(m.params());
        let logits = g.input(Tensor::zeros(3, VOCAB_SIZE));
        let l = m.loss(&mut g, logits, &[1, 2, PAD], 1.0).unwrap();
        assert!((g.value(l).get(0, 0) - (VOCAB_SIZE as f64).ln()).abs() < 1e-9);
        let mut confident = Tensor::zeros(1, VOCAB_SIZE);
        confident.data_mut()[7] = 60.0;
        let logits = g.input(confident);
        let l = m.loss(&mut g, logits, &[7], 1.0).unwrap();
        assert!(g.value(l).get(0, 0) < 1e-20);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::<f32>::new(ModelConfig::toy(AggregatorKind::AttnTimeAware), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = Model::<f32>::load(&p, Some(m.config())).unwrap();
        for ((n1, a), (n2, b)) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b);
        }
        let other = ModelConfig::toy(AggregatorKind::Mean);
        assert!(matches!(Model::<f32>::load(&p, Some(&other)), Err(ModelError::Checkpoint(_))));
        std::fs::write(&p, b"garbage").unwrap();
        assert!(Model::<f32>::load(&p, None).is_err());
    }

    #[test]
    fn incremental_logits_match_teacher_forcing() {
        let m = Model::<f64>::new(ModelConfig::toy(AggregatorKind::XattnTimeAgnostic), 4).unwrap();
        let ex = toy_example(1, 2, 6, 2);
        let mut g = Graph::new(m.params());
        let mem = m.encode_system(&mut g, &ex.instances, 1).unwrap();
        let logits = m.decode_logits(&mut g, mem, &ex.target).unwrap();
        let cache = m.memory_cache(&mut g, mem);
        for k in 1..=ex.target.len() {
            let step = m.next_token_logits(&cache, &ex.target[..k]).unwrap();
            let row = g.value(logits).row(k - 1);
            let diff = step.iter().zip(row).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-10, "{diff}");
        }
    }
}
