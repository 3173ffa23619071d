//! Initialization, losses, the Adam optimizer with warmup, and the epoch loop.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::DropoutCtx;
use crate::data::{make_batches, EncodedExample, PAD};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Mtn, MtnParams};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Probability floor applied before every logarithm in the losses.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform on `±√(6 / (fan_in + fan_out))`.
    Glorot,
    Zeros,
    Ones,
}

/// Seeded source of initial parameter values.
pub struct Initializer {
    rng: Option<ChaCha8Rng>,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Produces all-zero tensors; used to lay out a store before loading values.
    pub fn zeros() -> Self {
        Initializer { rng: None }
    }

    pub fn make(&mut self, rows: usize, cols: usize, init: Init) -> Tensor {
        match (init, self.rng.as_mut()) {
            (_, None) | (Init::Zeros, _) => Tensor::zeros(rows, cols),
            (Init::Ones, _) => Tensor::filled(rows, cols, 1.0),
            (Init::Glorot, Some(rng)) => {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
                Tensor::new(rows, cols, data).expect("length matches shape")
            }
        }
    }
}

pub fn init_params(config: &ModelConfig, seed: u64) -> Result<MtnParams> {
    MtnParams::build(config, &mut Initializer::new(seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    /// Weight of the visual query auto-encoding loss.
    pub alpha: f64,
    /// Weight of the audio query auto-encoding loss.
    pub beta: f64,
    /// Multiplier on the warmup schedule.
    pub lr_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_steps: 13_000,
            epochs: 50,
            batch_size: 32,
            label_smoothing: 0.1,
            alpha: 1.0,
            beta: 1.0,
            lr_scale: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            warmup_steps: 400,
            epochs: 20,
            batch_size: 16,
            lr_scale: 0.25,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.warmup_steps == 0 {
            return fail("warmup_steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || !(self.lr_scale > 0.0) {
            return fail("alpha and beta must be nonnegative and lr_scale positive".into());
        }
        Ok(())
    }
}

/// `(row, col, coefficient)` triples of the smoothed cross-entropy for
/// `targets`, each multiplied by `scale`. Pad targets are skipped.
///
/// The gold id gets `1 - ε`; every other non-pad id gets `ε / (|V| - 2)`.
pub fn smoothed_targets(targets: &[usize], vocab: usize, eps: f64, scale: f64) -> Result<Vec<(usize, usize, f64)>> {
    if vocab < 3 && eps > 0.0 {
        return Err(Error::InvalidArgument(format!("cannot smooth over a vocabulary of {vocab}")));
    }
    let spread = if eps > 0.0 { eps / (vocab - 2) as f64 } else { 0.0 };
    let mut out = Vec::new();
    for (i, &y) in targets.iter().enumerate() {
        if y == PAD {
            continue;
        }
        if y >= vocab {
            return Err(Error::TokenOutOfRange { id: y, vocab });
        }
        out.push((i, y, (1.0 - eps) * scale));
        if spread > 0.0 {
            for w in (0..vocab).filter(|&w| w != y && w != PAD) {
                out.push((i, w, spread * scale));
            }
        }
    }
    Ok(out)
}

fn count_tokens(ids: &[usize]) -> usize {
    ids.iter().filter(|&&t| t != PAD).count()
}

/// Mean smoothed cross-entropy of `p_vocab` rows against `targets`, over
/// non-pad positions.
pub fn generation_loss(g: &mut Graph<'_>, p_vocab: Var, targets: &[usize], eps: f64) -> Result<Var> {
    let [rows, vocab] = g.shape(p_vocab);
    if rows != targets.len() {
        return Err(Error::shape("generation_loss", [rows, vocab], [targets.len(), 1]));
    }
    let n = count_tokens(targets);
    if n == 0 {
        return Err(Error::InvalidArgument("target is entirely padding".into()));
    }
    let coeffs = smoothed_targets(targets, vocab, eps, 1.0 / n as f64)?;
    g.weighted_nll(p_vocab, coeffs, LOG_FLOOR)
}

/// Query reconstruction losses of the two auto-encoder branches. A branch
/// that is `None` contributes a constant zero.
pub fn qae_losses(g: &mut Graph<'_>, vis: Option<Var>, aud: Option<Var>, query: &[usize]) -> Result<(Var, Var)> {
    let mut branch = |p: Option<Var>| match p {
        Some(p) => generation_loss(g, p, query, 0.0),
        None => Ok(g.constant(Tensor::scalar(0.0))),
    };
    Ok((branch(vis)?, branch(aud)?))
}

/// `l_gen + α·l_vis + β·l_aud`.
pub fn joint_loss(g: &mut Graph<'_>, l_gen: Var, l_vis: Var, l_aud: Var, alpha: f64, beta: f64) -> Result<Var> {
    let v = g.scale(l_vis, alpha);
    let a = g.scale(l_aud, beta);
    let s = g.add(l_gen, v)?;
    g.add(s, a)
}

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`; `step` counts from 1.
pub fn noam_lr(step: usize, d: usize, warmup: usize) -> f64 {
    let s = step.max(1) as f64;
    (d as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5))
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self::with_betas(store, 0.9, 0.98, 1e-9)
    }

    pub fn with_betas(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.data().len()]).collect::<Vec<_>>();
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters missing from `grads` are treated as
    /// having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccumulator, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads.get(id);
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Parameter gradients summed over several graphs.
#[derive(Clone, Debug, Default)]
pub struct GradAccumulator {
    grads: HashMap<ParamId, Vec<f64>>,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs backward from `loss` and adds every bound parameter's gradient.
    pub fn accumulate(&mut self, g: &Graph<'_>, loss: Var) -> Result<()> {
        let grads = g.backward(loss)?;
        for (pid, var) in g.bound_params() {
            if let Some(src) = grads.get(var) {
                let dst = self.grads.entry(pid).or_insert_with(|| vec![0.0; src.len()]);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(&id).map(|v| v.as_slice())
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }
}

/// Loss normalizers for one batch: total target tokens and total query tokens.
#[derive(Clone, Copy, Debug)]
struct Norm {
    targets: f64,
    queries: f64,
}

impl Norm {
    fn of<'a>(examples: impl IntoIterator<Item = &'a EncodedExample>) -> Self {
        let (mut t, mut q) = (0usize, 0usize);
        for ex in examples {
            t += count_tokens(&ex.target);
            q += count_tokens(&ex.query);
        }
        Norm {
            targets: t.max(1) as f64,
            queries: q.max(1) as f64,
        }
    }
}

/// One example's share of the batch joint loss.
fn example_loss<'p>(
    model: &'p Mtn,
    g: &mut Graph<'p>,
    ex: &EncodedExample,
    cfg: &TrainConfig,
    norm: Norm,
    drop: &mut DropoutCtx,
) -> Result<Var> {
    let out = model.forward(g, &ex.model_input(), &ex.decoder_input, drop)?;
    let vocab = model.config().vocab_size;
    let gen = smoothed_targets(&ex.target, vocab, cfg.label_smoothing, 1.0 / norm.targets)?;
    let l_gen = g.weighted_nll(out.output.p_vocab, gen, LOG_FLOOR)?;
    let mut qae = |p: Option<Var>, w: f64| -> Result<Var> {
        match p {
            Some(p) if w != 0.0 => {
                let c = smoothed_targets(&ex.query, vocab, 0.0, w / norm.queries)?;
                g.weighted_nll(p, c, LOG_FLOOR)
            }
            _ => Ok(g.constant(Tensor::scalar(0.0))),
        }
    };
    let l_vis = qae(out.qae_vis, cfg.alpha)?;
    let l_aud = qae(out.qae_aud, cfg.beta)?;
    joint_loss(g, l_gen, l_vis, l_aud, 1.0, 1.0)
}

/// Per-token joint loss over `examples` with dropout off.
pub fn evaluate_loss(model: &Mtn, examples: &[EncodedExample], cfg: &TrainConfig) -> Result<f64> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let norm = Norm::of(examples);
    let mut total = 0.0;
    for ex in examples {
        let mut g = Graph::new();
        let loss = example_loss(model, &mut g, ex, cfg, norm, &mut DropoutCtx::eval())?;
        total += g.value(loss)[0];
    }
    Ok(total)
}

/// Teacher-forced argmax accuracy over every target token: `(correct, total)`.
pub fn token_accuracy(model: &Mtn, examples: &[EncodedExample]) -> Result<(usize, usize)> {
    let (mut hit, mut total) = (0, 0);
    for ex in examples {
        let mut g = Graph::new();
        let mut drop = DropoutCtx::eval();
        let enc = model.encode(&mut g, &ex.model_input(), &mut drop)?;
        let (_, _, out) = model.decode_prefix(&mut g, &enc, &ex.decoder_input, &mut drop)?;
        for (i, &y) in ex.target.iter().enumerate() {
            if y == PAD {
                continue;
            }
            total += 1;
            if argmax(g.row(out.p_vocab, i)) == y {
                hit += 1;
            }
        }
    }
    Ok((hit, total))
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// Counts from 1.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
}

impl EpochRecord {
    pub const TSV_HEADER: &'static str = "epoch\ttrain_loss\tvalid_loss\tlr";

    pub fn tsv_line(&self) -> String {
        format!("{}\t{:.6}\t{:.6}\t{:.6e}", self.epoch, self.train_loss, self.valid_loss, self.lr)
    }
}

pub fn log_tsv(records: &[EpochRecord]) -> String {
    let mut s = String::new();
    writeln!(s, "{}", EpochRecord::TSV_HEADER).unwrap();
    for r in records {
        writeln!(s, "{}", r.tsv_line()).unwrap();
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpochControl {
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: Mtn,
    pub best_epoch: usize,
    /// Parameters after the last epoch that ran.
    pub last: Mtn,
    pub log: Vec<EpochRecord>,
}

/// Trains with teacher forcing and keeps the parameters with the lowest
/// validation loss. When `valid` is empty, the training loss is used.
///
/// `on_epoch` sees each epoch's record and the current parameters and may
/// stop training early.
pub fn train(
    mut model: Mtn,
    train_set: &[EncodedExample],
    valid: &[EncodedExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Mtn) -> Result<EpochControl>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let d = model.config().d;
    let rate = model.config().dropout;
    let mut adam = Adam::new(model.store());
    let mut grads = GradAccumulator::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Mtn)> = None;
    let mut lr = 0.0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let batches = make_batches(&order, cfg.batch_size);
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let norm = Norm::of(batch.iter().map(|&i| &train_set[i]));
            grads.clear();
            for &i in batch {
                let drop_seed = shuffle_rng.gen::<u64>();
                let mut drop = if rate > 0.0 {
                    DropoutCtx::train(rate, drop_seed)
                } else {
                    DropoutCtx::eval()
                };
                let mut g = Graph::new();
                let loss = example_loss(&model, &mut g, &train_set[i], cfg, norm, &mut drop)?;
                epoch_loss += g.value(loss)[0] / batches.len() as f64;
                grads.accumulate(&g, loss)?;
            }
            lr = cfg.lr_scale * noam_lr(adam.steps() as usize + 1, d, cfg.warmup_steps);
            adam.step(model.store_mut(), &grads, lr);
        }
        if !epoch_loss.is_finite() {
            return Err(Error::InvalidArgument(format!("training loss diverged in epoch {epoch}")));
        }
        let valid_loss = if valid.is_empty() {
            epoch_loss
        } else {
            evaluate_loss(&model, valid, cfg)?
        };
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss,
            valid_loss,
            lr,
        };
        if best.as_ref().map_or(true, |(l, _, _)| valid_loss < *l) {
            best = Some((valid_loss, epoch, model.clone()));
        }
        let control = on_epoch(&record, &model)?;
        log.push(record);
        if control == EpochControl::Stop {
            break;
        }
    }
    let (best_epoch, best) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model.clone()),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        log,
    })
}
