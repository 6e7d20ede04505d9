//! Learning-rate schedules, batching over variable instance counts, Adam,
//! and the training loop with CSV logging and resumable checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Scalar, Tensor};
use crate::datagen::SystemRecord;
use crate::exec::Exec;
use crate::infer::{prepare_inputs, unscale_system, ScaleConvention};
use crate::model::{Checkpoint, Example, Model, ModelConfig, ModelError};
use crate::tokenizer::{encode_system, TokenError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("record {id}: {source}")]
    Token { id: u64, source: TokenError },
    #[error("record {0} has no instances")]
    NoInstances(u64),
    #[error("non-finite loss at step {step}; records {ids:?}")]
    NonFinite { step: usize, ids: Vec<u64> },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineConfig {
    pub warmup: usize,
    pub cycle: usize,
    pub cycle_mult: f64,
    pub shrink: f64,
    pub lr_max: f64,
    pub lr_min: f64,
}

impl Default for CosineConfig {
    fn default() -> Self {
        Self { warmup: 1000, cycle: 30_000, cycle_mult: 1.1, shrink: 0.75, lr_max: 2e-4, lr_min: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoamConfig {
    pub warmup: usize,
    pub lr_max: f64,
}

impl Default for NoamConfig {
    fn default() -> Self {
        Self { warmup: 2000, lr_max: 4e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine(CosineConfig),
    Noam(NoamConfig),
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        match self {
            Schedule::Cosine(c) => cosine_schedule(step, c),
            Schedule::Noam(c) => noam_schedule(step, c),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let (warmup, ok) = match self {
            Schedule::Cosine(c) => (c.warmup, c.lr_min < c.lr_max && c.cycle > 0 && c.cycle_mult > 0.0),
            Schedule::Noam(c) => (c.warmup, c.lr_max > 0.0),
        };
        if warmup == 0 || !ok {
            return Err(TrainError::Config("schedule needs warmup >= 1 and lr_min < lr_max".into()));
        }
        Ok(())
    }
}

/// Cycle index, peak and length of the post-warmup cycle containing `step`,
/// plus the offset inside it.
pub fn cosine_cycle(step: usize, cfg: &CosineConfig) -> (usize, f64, f64, f64) {
    let mut t = (step - cfg.warmup.min(step)) as f64;
    let (mut len, mut peak, mut k) = (cfg.cycle as f64, cfg.lr_max, 0);
    while t >= len {
        t -= len;
        len *= cfg.cycle_mult;
        peak *= cfg.shrink;
        k += 1;
    }
    (k, peak, len, t)
}

/// Linear warmup to `lr_max`, then cosine cycles whose length grows by
/// `cycle_mult` and whose peak shrinks by `shrink`.
pub fn cosine_schedule(step: usize, cfg: &CosineConfig) -> f64 {
    if step < cfg.warmup {
        return cfg.lr_max * step as f64 / cfg.warmup as f64;
    }
    let (_, peak, len, t) = cosine_cycle(step, cfg);
    cfg.lr_min + (peak - cfg.lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * t / len).cos())
}

pub fn noam_schedule(step: usize, cfg: &NoamConfig) -> f64 {
    if step == 0 {
        return 0.0;
    }
    let (s, w) = (step as f64, cfg.warmup as f64);
    cfg.lr_max * (s / w).min((w / s).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: Some(1.0) }
    }
}

impl AdamConfig {
    /// The pairing used with the Noam schedule.
    pub fn for_noam() -> Self {
        Self { beta2: 0.98, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    pub t: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new<G: Scalar>(cfg: AdamConfig, model: &Model<G>) -> Self {
        let zeros: Vec<Tensor<F>> = model.params().iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { cfg, t: 0, m: zeros.clone(), v: zeros }
    }

    /// One update; returns the gradient norm before clipping.
    pub fn step(&mut self, model: &mut Model<F>, grads: &[Option<Tensor<F>>], lr: f64) -> f64 {
        let norm = grads.iter().flatten().map(|g| g.sum_sq()).sum::<f64>().sqrt();
        let clip = match self.cfg.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step = F::from_f64(lr / bc1);
        let (fb1, fb2) = (F::from_f64(b1), F::from_f64(b2));
        let (ob1, ob2) = (F::from_f64(1.0 - b1), F::from_f64(1.0 - b2));
        let (fclip, eps, inv_bc2) = (F::from_f64(clip), F::from_f64(self.cfg.eps), F::from_f64(1.0 / bc2));
        let ids: Vec<_> = model.params().ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = model.params_mut().get_mut(id).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                let g = g * fclip;
                *m = fb1 * *m + ob1 * g;
                *v = fb2 * *v + ob2 * g * g;
                *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        norm
    }
}

/// A batch of systems: instances are listed flat for the encoder and
/// `groups[i]` is the range of flat entries that belong to system `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub systems: Vec<usize>,
    pub flat: Vec<(usize, usize)>,
    pub groups: Vec<std::ops::Range<usize>>,
}

impl Batch {
    pub fn new(systems: Vec<usize>, counts: &[usize]) -> Self {
        let mut flat = Vec::new();
        let mut groups = Vec::with_capacity(systems.len());
        for &s in &systems {
            let start = flat.len();
            flat.extend((0..counts[s]).map(|j| (s, j)));
            groups.push(start..flat.len());
        }
        Self { systems, flat, groups }
    }

    /// Regroups flat per-instance items by system.
    pub fn gather<'a, T>(&self, flat_items: &'a [T]) -> Vec<&'a [T]> {
        self.groups.iter().map(|g| &flat_items[g.clone()]).collect()
    }
}

/// One shuffled epoch of batches over systems with the given instance counts.
pub fn make_batches(counts: &[usize], batch_size: usize, rng: &mut impl rand::Rng) -> Result<Vec<Batch>, TrainError> {
    if batch_size == 0 {
        return Err(TrainError::Config("batch size must be positive".into()));
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(TrainError::NoInstances(i as u64));
    }
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(|c| Batch::new(c.to_vec(), counts)).collect())
}

/// Batch for a global step: epoch `e` is shuffled with stream `e` of `seed`.
pub fn batch_for_step(counts: &[usize], batch_size: usize, seed: u64, step: usize) -> Result<Batch, TrainError> {
    let per_epoch = counts.len().div_ceil(batch_size.max(1)).max(1);
    let (epoch, idx) = (step / per_epoch, step % per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut batches = make_batches(counts, batch_size, &mut rng)?;
    Ok(batches.swap_remove(idx))
}

/// Turns a record into network inputs and a framed target.
pub fn prepare_example(record: &SystemRecord, sigma: f64, rescale: bool, conv: ScaleConvention) -> Result<Example, TrainError> {
    if record.instances.is_empty() {
        return Err(TrainError::NoInstances(record.id));
    }
    let tok = |source| TrainError::Token { id: record.id, source };
    let (instances, r) = prepare_inputs(&record.observed(sigma), rescale, conv).map_err(tok)?;
    let target_system = if r == 1.0 { record.system.clone() } else { unscale_system(&record.system, 1.0 / r) };
    let target = encode_system(&target_system).map_err(tok)?;
    Ok(Example { dim: record.dim(), instances, target })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Noise level of the inputs; `None` uses each record's own level.
    pub sigma: Option<f64>,
    pub rescale: bool,
    pub convention: ScaleConvention,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 55,
            steps: 10_000,
            schedule: Schedule::Cosine(CosineConfig::default()),
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 1000,
            log_every: 10,
            sigma: None,
            rescale: true,
            convention: ScaleConvention::DivideByRms,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(TrainError::Config("batch size and log cadence must be positive".into()));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Examples per gradient chunk. Chunks are summed in a fixed order so the
/// result does not depend on the execution policy.
const CHUNK: usize = 8;

fn add_grads<F: Scalar>(acc: &mut Vec<Option<Tensor<F>>>, g: Vec<Option<Tensor<F>>>) {
    for (a, g) in acc.iter_mut().zip(g) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.add_assign(&g),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// Mean token loss of the batch and its parameter gradients.
pub fn batch_gradients<F: Scalar>(
    model: &Model<F>,
    examples: &[&Example],
    exec: Exec,
) -> Result<(f64, Vec<Option<Tensor<F>>>), ModelError> {
    let total: usize = examples.iter().map(|e| e.target.len().saturating_sub(1)).sum();
    if total == 0 {
        return Err(ModelError::EmptyLoss);
    }
    let scale = 1.0 / total as f64;
    let chunks: Vec<&[&Example]> = examples.chunks(CHUNK).collect();
    let parts = exec.map(&chunks, |chunk| -> Result<(f64, Vec<Option<Tensor<F>>>), ModelError> {
        let mut loss = 0.0;
        let mut acc: Vec<Option<Tensor<F>>> = vec![None; model.params().len()];
        for ex in *chunk {
            let mut g = Graph::new(model.params());
            let (l, _) = model.example_loss(&mut g, ex, scale)?;
            loss += g.value(l).get(0, 0).to_f64();
            add_grads(&mut acc, g.backward(l).into_param_grads());
        }
        Ok((loss, acc))
    });
    let mut loss = 0.0;
    let mut acc = vec![None; model.params().len()];
    for p in parts {
        let (l, g) = p?;
        loss += l;
        add_grads(&mut acc, g);
    }
    Ok((loss, acc))
}

/// Forward, backward and one Adam update at learning rate `lr`.
pub fn train_step<F: Scalar>(
    model: &mut Model<F>,
    opt: &mut Adam<F>,
    examples: &[&Example],
    lr: f64,
    exec: Exec,
) -> Result<(f64, f64), ModelError> {
    let (loss, grads) = batch_gradients(model, examples, exec)?;
    if !loss.is_finite() {
        return Ok((loss, f64::NAN));
    }
    let norm = opt.step(model, &grads, lr);
    Ok((loss, norm))
}

/// Model, optimizer and step counter; what a checkpoint stores.
pub struct TrainState {
    pub model: Model<f32>,
    pub opt: Adam<f32>,
    pub step: usize,
}

impl TrainState {
    pub fn new(cfg: ModelConfig, train: &TrainConfig) -> Result<Self, TrainError> {
        let model = Model::new(cfg, train.seed)?;
        let opt = Adam::new(train.adam.clone(), &model);
        Ok(Self { model, opt, step: 0 })
    }

    pub fn save(&self, path: &Path, train: &TrainConfig) -> Result<(), TrainError> {
        let meta = serde_json::json!({ "step": self.step, "adam_t": self.opt.t, "train": train });
        let mut ck = Checkpoint::from_model(&self.model, meta);
        let names: Vec<String> = self.model.params().iter().map(|(n, _)| n.to_string()).collect();
        for (i, n) in names.iter().enumerate() {
            ck.tensors.push((format!("adam.m/{n}"), self.opt.m[i].cast()));
            ck.tensors.push((format!("adam.v/{n}"), self.opt.v[i].cast()));
        }
        ck.save(path)?;
        Ok(())
    }

    /// Restores model, optimizer moments and the step counter.
    pub fn load(path: &Path, expected: Option<&ModelConfig>, adam: AdamConfig) -> Result<Self, TrainError> {
        let ck = Checkpoint::load(path)?;
        let step = ck.meta.get("step").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let t = ck.meta.get("adam_t").and_then(|v| v.as_u64()).unwrap_or(0);
        let (model, rest) = ck.into_model::<f32>(expected)?;
        let mut opt = Adam::new(adam, &model);
        opt.t = t;
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
        for (name, tensor) in rest {
            let (slot, pname) = match name.split_once('/') {
                Some(("adam.m", p)) => (0, p),
                Some(("adam.v", p)) => (1, p),
                _ => continue,
            };
            if let Some(i) = names.iter().position(|n| n == pname) {
                let target = if slot == 0 { &mut opt.m[i] } else { &mut opt.v[i] };
                if target.shape() == tensor.shape() {
                    *target = tensor.cast();
                }
            }
        }
        Ok(Self { model, opt, step })
    }
}

pub struct TrainOutputs<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint: Option<PathBuf>,
}

/// Runs until `cfg.steps` total steps (continuing from `state.step`).
/// Returns the per-step statistics of this call.
pub fn train(
    state: &mut TrainState,
    records: &[SystemRecord],
    cfg: &TrainConfig,
    exec: Exec,
    mut out: TrainOutputs<'_>,
) -> Result<Vec<StepStats>, TrainError> {
    cfg.validate()?;
    let examples = exec
        .map(records, |r| prepare_example(r, cfg.sigma.unwrap_or(r.sigma), cfg.rescale, cfg.convention))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let counts: Vec<usize> = examples.iter().map(|e| e.instances.len()).collect();
    if let Some(log) = out.log.as_deref_mut() {
        if state.step == 0 {
            writeln!(log, "step,lr,loss,grad_norm")?;
        }
    }
    let mut stats = Vec::new();
    while state.step < cfg.steps {
        let batch = batch_for_step(&counts, cfg.batch_size, cfg.seed, state.step)?;
        let exs: Vec<&Example> = batch.systems.iter().map(|&i| &examples[i]).collect();
        let lr = cfg.schedule.lr(state.step);
        let (loss, grad_norm) = train_step(&mut state.model, &mut state.opt, &exs, lr, exec)?;
        if !loss.is_finite() {
            let ids = batch.systems.iter().map(|&i| records[i].id).collect();
            return Err(TrainError::NonFinite { step: state.step, ids });
        }
        state.step += 1;
        let s = StepStats { step: state.step, lr, loss, grad_norm };
        if let Some(log) = out.log.as_deref_mut() {
            if state.step % cfg.log_every == 0 || state.step == cfg.steps {
                writeln!(log, "{},{:e},{},{}", s.step, s.lr, s.loss, s.grad_norm)?;
                log.flush()?;
            }
        }
        stats.push(s);
        if let Some(p) = &out.checkpoint {
            if cfg.checkpoint_every > 0 && (state.step % cfg.checkpoint_every == 0 || state.step == cfg.steps) {
                state.save(p, cfg)?;
            }
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_corpus, CorpusConfig};
    use crate::model::AggregatorKind;

    #[test]
    fn cosine_values() {
        let c = CosineConfig::default();
        assert_eq!(cosine_schedule(0, &c), 0.0);
        assert!((cosine_schedule(500, &c) - 1e-4).abs() < 1e-18);
        assert!((cosine_schedule(1000, &c) - 2e-4).abs() < 1e-18);
        let (k, peak, len, t) = cosine_cycle(1000 + 30_000, &c);
        assert_eq!(k, 1);
        assert!((peak - 1.5e-4).abs() < 1e-18);
        assert!((len - 33_000.0).abs() < 1e-9);
        assert_eq!(t, 0.0);
        assert!((cosine_schedule(31_000, &c) - 1.5e-4).abs() < 1e-15);
        assert!((cosine_schedule(31_000 - 1, &c) - 1e-9).abs() < 1e-12);
        let (k, peak, _, _) = cosine_cycle(1000 + 30_000 + 33_000, &c);
        assert_eq!(k, 2);
        assert!((peak - 1.125e-4).abs() < 1e-18);
    }

    #[test]
    fn noam_values() {
        let c = NoamConfig::default();
        assert_eq!(noam_schedule(2000, &c), c.lr_max);
        assert!((noam_schedule(8000, &c) - c.lr_max / 2.0).abs() < 1e-18);
        assert_eq!(noam_schedule(0, &c), 0.0);
        for s in 1..2000 {
            assert!(noam_schedule(s, &c) > noam_schedule(s - 1, &c));
        }
        for s in 2001..6000 {
            assert!(noam_schedule(s, &c) < noam_schedule(s - 1, &c));
        }
    }

    #[test]
    fn batch_grouping() {
        let counts = [1, 2, 4];
        let b = Batch::new(vec![0, 1, 2], &counts);
        assert_eq!(b.flat.len(), 7);
        assert_eq!(b.groups.len(), 3);
        let labels: Vec<(usize, usize)> = b.flat.clone();
        let regrouped = b.gather(&labels);
        for (sys, group) in b.systems.iter().zip(regrouped) {
            assert!(group.iter().all(|(s, _)| s == sys));
            assert_eq!(group.len(), counts[*sys]);
            assert!(group.iter().enumerate().all(|(j, (_, i))| *i == j));
        }
        let a = make_batches(&[1, 2, 3, 4, 1, 1], 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let c = make_batches(&[1, 2, 3, 4, 1, 1], 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, c);
        let mut all: Vec<usize> = a.iter().flat_map(|b| b.systems.clone()).collect();
        all.sort();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        assert!(make_batches(&[1, 0], 2, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    fn small_setup() -> (Vec<SystemRecord>, ModelConfig, TrainConfig) {
        let mut cc = CorpusConfig::mixed_polynomial(6, 2);
        cc.dims = crate::datagen::CountSpec::Fixed(1);
        cc.instances = crate::datagen::CountSpec::Uniform(1, 2);
        cc.points = 12;
        let (recs, _) = build_corpus(&cc, Exec::Sequential).unwrap();
        let mc = ModelConfig { d_enc: 16, d_dec: 16, enc_heads: 2, dec_heads: 2, agg_heads: 2, ..ModelConfig::toy(AggregatorKind::Mean) };
        let tc = TrainConfig {
            batch_size: 3,
            steps: 4,
            schedule: Schedule::Cosine(CosineConfig { warmup: 2, cycle: 10, lr_max: 1e-3, ..Default::default() }),
            rescale: false,
            log_every: 1,
            ..Default::default()
        };
        (recs, mc, tc)
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (recs, mc, tc) = small_setup();
        let mut st = TrainState::new(mc, &tc).unwrap();
        let before = st.model.params().clone();
        let ex: Vec<Example> = recs.iter().map(|r| prepare_example(r, 0.0, false, ScaleConvention::DivideByRms).unwrap()).collect();
        let refs: Vec<&Example> = ex.iter().collect();
        train_step(&mut st.model, &mut st.opt, &refs, 0.0, Exec::Sequential).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(st.model.params().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn policies_and_resume_agree() {
        let (recs, mc, tc) = small_setup();
        let run = |exec| {
            let mut st = TrainState::new(mc.clone(), &tc).unwrap();
            train(&mut st, &recs, &tc, exec, TrainOutputs { log: None, checkpoint: None }).unwrap()
        };
        let a = run(Exec::Sequential);
        let b = run(Exec::default());
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("t.ckpt");
        let half = TrainConfig { steps: 2, ..tc.clone() };
        let mut st = TrainState::new(mc.clone(), &half).unwrap();
        let mut log = Vec::new();
        train(&mut st, &recs, &half, Exec::Sequential, TrainOutputs { log: Some(&mut log), checkpoint: Some(ck.clone()) }).unwrap();
        let mut st = TrainState::load(&ck, Some(&mc), tc.adam.clone()).unwrap();
        assert_eq!(st.step, 2);
        let rest = train(&mut st, &recs, &tc, Exec::Sequential, TrainOutputs { log: Some(&mut log), checkpoint: None }).unwrap();
        let tail: Vec<f64> = a[2..].iter().map(|s| s.loss).collect();
        let resumed: Vec<f64> = rest.iter().map(|s| s.loss).collect();
        for (x, y) in tail.iter().zip(&resumed) {
            assert!((x - y).abs() < 1e-5 * x.abs(), "{x} vs {y}");
        }
        let text = String::from_utf8(log).unwrap();
        assert!(text.starts_with("step,lr,loss,grad_norm\n"));
        assert_eq!(text.lines().count(), 5);
    }
}
