//! Training machinery: input/output heads, regularization, optimizers,
//! schedules, and the task training loops.
//!
//! Batching runs one tape per lane (sequence) and averages gradients across
//! lanes; dropout masks are sampled **once per optimization step** and
//! shared by every lane and every layer of that step (variational dropout
//! over `z2` channels, DropConnect over the hidden-to-hidden kernel).

use std::f64::consts::LN_2;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{gen_copy_sequence, lm_batches, LmChunk};
use crate::tensor::{Gradients, Tape, Tensor, TensorError};
use crate::trellis::{
    network_forward, repackage, BoundParams, ForwardOpts, HistoryPad, NetworkOutput, TrellisError,
    TrellisParams,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(TensorError),
    #[error(transparent)]
    Trellis(TrellisError),
    /// A forward or backward pass produced a non-finite value.
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("training config: {0}")]
    Config(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { op } => {
                TrainError::Diverged(format!("non-finite value in {op}"))
            }
            other => TrainError::Tensor(other),
        }
    }
}

impl From<TrellisError> for TrainError {
    fn from(e: TrellisError) -> Self {
        match e {
            TrellisError::Tensor(te) => TrainError::from(te),
            other => TrainError::Trellis(other),
        }
    }
}

/// Converts a mean cross-entropy in nats to bits per symbol.
pub fn bits_per_symbol(nats: f64) -> f64 {
    nats / LN_2
}

// ── Heads ───────────────────────────────────────────────────────────────────

/// How hidden channels are decoded to class logits.
#[derive(Debug, Clone)]
pub enum DecoderKind {
    /// `logits = embeddingᵀ·z2 + b`; requires an embedding with `p == q`.
    Tied,
    /// A separate `[classes, q]` matrix.
    Weights(Tensor),
}

/// Input embedding and output decoder around the trellis core.
#[derive(Debug, Clone)]
pub struct Heads {
    /// `[p, vocab]` token embedding; absent for raw (already numeric) inputs.
    pub embedding: Option<Tensor>,
    pub decoder: DecoderKind,
    /// `[classes]` decoder bias.
    pub decoder_b: Tensor,
}

impl Heads {
    /// Token-input head with a separate decoder.
    pub fn token_head(p: usize, vocab: usize, classes: usize, q: usize, rng: &mut ChaCha8Rng) -> Heads {
        Heads {
            embedding: Some(Tensor::from_fn(vec![p, vocab], |_| rng.gen_range(-0.1..0.1))),
            decoder: DecoderKind::Weights(Tensor::from_fn(vec![classes, q], |_| {
                let b = 1.0 / (q as f64).sqrt();
                rng.gen_range(-b..b)
            })),
            decoder_b: Tensor::zeros(vec![classes]),
        }
    }

    /// Token-input head whose decoder reuses the embedding transpose
    /// (requires `p == q`; classes == vocab).
    pub fn tied_head(q: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Heads {
        Heads {
            embedding: Some(Tensor::from_fn(vec![q, vocab], |_| rng.gen_range(-0.1..0.1))),
            decoder: DecoderKind::Tied,
            decoder_b: Tensor::zeros(vec![vocab]),
        }
    }

    /// Raw-input head (no embedding), e.g. pixel sequences.
    pub fn raw_head(classes: usize, q: usize, rng: &mut ChaCha8Rng) -> Heads {
        Heads {
            embedding: None,
            decoder: DecoderKind::Weights(Tensor::from_fn(vec![classes, q], |_| {
                let b = 1.0 / (q as f64).sqrt();
                rng.gen_range(-b..b)
            })),
            decoder_b: Tensor::zeros(vec![classes]),
        }
    }

    pub fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<(&'static str, &Tensor)> = Vec::new();
        if let Some(e) = &self.embedding {
            out.push(("embedding", e));
        }
        if let DecoderKind::Weights(w) = &self.decoder {
            out.push(("decoder_w", w));
        }
        out.push(("decoder_b", &self.decoder_b));
        out
    }

    pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out: Vec<(&'static str, &mut Tensor)> = Vec::new();
        if let Some(e) = &mut self.embedding {
            out.push(("embedding", e));
        }
        if let DecoderKind::Weights(w) = &mut self.decoder {
            out.push(("decoder_w", w));
        }
        out.push(("decoder_b", &mut self.decoder_b));
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundHeads {
        BoundHeads {
            embedding: self.embedding.as_ref().map(|e| tape.param(e)),
            decoder_w: match &self.decoder {
                DecoderKind::Weights(w) => Some(tape.param(w)),
                DecoderKind::Tied => None,
            },
            decoder_b: tape.param(&self.decoder_b),
        }
    }
}

/// Tape-attached head handles for one forward pass.
pub struct BoundHeads {
    pub embedding: Option<Tensor>,
    pub decoder_w: Option<Tensor>,
    pub decoder_b: Tensor,
}

impl BoundHeads {
    pub fn handles(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<(&'static str, &Tensor)> = Vec::new();
        if let Some(e) = &self.embedding {
            out.push(("embedding", e));
        }
        if let Some(w) = &self.decoder_w {
            out.push(("decoder_w", w));
        }
        out.push(("decoder_b", &self.decoder_b));
        out
    }

    /// Embeds a token sequence as `[p, T]` via one-hot × embedding.
    pub fn encode_tokens(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Tensor, TrainError> {
        let emb = self
            .embedding
            .as_ref()
            .ok_or_else(|| TrainError::Config("token input needs an embedding head".into()))?;
        let vocab = emb.cols();
        let t_len = tokens.len();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(TrainError::Config(format!("token id {bad} outside vocab {vocab}")));
        }
        let mut onehot = vec![0.0; vocab * t_len];
        for (t, &tok) in tokens.iter().enumerate() {
            onehot[tok * t_len + t] = 1.0;
        }
        let onehot = Tensor::new(vec![vocab, t_len], onehot).unwrap();
        Ok(tape.matmul(emb, &onehot)?)
    }

    /// Decodes hidden channels `[q, T]` to logits `[classes, T]`.
    pub fn decode(&self, tape: &mut Tape, z2: &Tensor) -> Result<Tensor, TrainError> {
        let logits = match (&self.decoder_w, &self.embedding) {
            (Some(w), _) => tape.matmul(w, z2)?,
            (None, Some(e)) => tape.matmul_tn(e, z2)?,
            (None, None) => {
                return Err(TrainError::Config("tied decoder needs an embedding".into()))
            }
        };
        Ok(tape.add(&logits, &self.decoder_b)?)
    }
}

// ── Model ───────────────────────────────────────────────────────────────────

/// A trellis core plus its heads: everything the optimizer updates.
#[derive(Debug, Clone)]
pub struct Model {
    pub trellis: TrellisParams,
    pub config: crate::trellis::TrellisConfig,
    pub heads: Heads,
}

impl Model {
    pub fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = self.trellis.fields();
        out.extend(self.heads.fields());
        out
    }

    pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = self.trellis.fields_mut();
        out.extend(self.heads.fields_mut());
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.fields().iter().map(|(_, t)| t.numel()).collect()
    }

    pub fn bind(
        &self,
        tape: &mut Tape,
        dropconnect: Option<&Tensor>,
    ) -> Result<(BoundParams, BoundHeads), TrainError> {
        let bp = self.trellis.bind(tape, dropconnect)?;
        let bh = self.heads.bind(tape);
        Ok((bp, bh))
    }
}

fn bound_handles<'a>(bp: &'a BoundParams, bh: &'a BoundHeads) -> Vec<(&'static str, &'a Tensor)> {
    let mut out = bp.handles();
    out.extend(bh.handles());
    out
}

// ── Regularization ──────────────────────────────────────────────────────────

/// All regularization knobs. Zero disables each one. (Weight decay lives on
/// the [`Optimizer`], which folds it into the gradient.)
#[derive(Debug, Clone)]
pub struct Regularization {
    /// Variational dropout rate over `z2` channels.
    pub variational_dropout: f64,
    /// DropConnect rate over the hidden-to-hidden kernel.
    pub dropconnect: f64,
    /// Global gradient L2 clip threshold; `<= 0` disables.
    pub clip_norm: f64,
    /// Weight of the mean auxiliary-tap loss.
    pub aux_lambda: f64,
    /// Targets masked at the start of each *continued* subsequence, where
    /// the carried history pad is only approximate.
    pub loss_chop: usize,
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization {
            variational_dropout: 0.0,
            dropconnect: 0.0,
            clip_norm: 0.0,
            aux_lambda: 0.0,
            loss_chop: 0,
        }
    }
}

/// Inverted-dropout channel mask `[q]`: entries are 0 with probability
/// `p_drop`, else `1/(1-p_drop)`, so the mask has unit mean.
pub fn sample_vd_mask(q: usize, p_drop: f64, rng: &mut ChaCha8Rng) -> Option<Tensor> {
    if p_drop <= 0.0 {
        return None;
    }
    assert!(p_drop < 1.0, "dropout rate must be below 1");
    let keep = 1.0 / (1.0 - p_drop);
    Some(Tensor::from_fn(vec![q], |_| if rng.gen::<f64>() < p_drop { 0.0 } else { keep }))
}

/// Inverted DropConnect mask over the `[r, q, 2]` hidden kernel.
pub fn sample_dropconnect_mask(
    r: usize,
    q: usize,
    p_drop: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Tensor> {
    if p_drop <= 0.0 {
        return None;
    }
    assert!(p_drop < 1.0, "dropconnect rate must be below 1");
    let keep = 1.0 / (1.0 - p_drop);
    Some(Tensor::from_fn(vec![r, q, 2], |_| if rng.gen::<f64>() < p_drop { 0.0 } else { keep }))
}

// ── Loss assembly ───────────────────────────────────────────────────────────

/// Masks the first `chop` targets of a continued subsequence.
pub fn apply_loss_chop(targets: &mut [Option<usize>], chop: usize) {
    for t in targets.iter_mut().take(chop) {
        *t = None;
    }
}

/// Builds the total training loss: main cross-entropy on the final layer
/// plus `aux_lambda` times the mean cross-entropy of the auxiliary taps
/// (all through the same decoder). Returns the composite loss tensor and
/// the main-term value.
pub fn total_loss(
    tape: &mut Tape,
    heads: &BoundHeads,
    out: &NetworkOutput,
    targets: &[Option<usize>],
    aux_lambda: f64,
) -> Result<(Tensor, f64), TrainError> {
    let logits = heads.decode(tape, &out.z2)?;
    let main = tape.softmax_cross_entropy(&logits, targets)?;
    let main_value = main.scalar_value();
    if aux_lambda <= 0.0 || out.aux.is_empty() {
        return Ok((main, main_value));
    }
    let mut aux_sum: Option<Tensor> = None;
    for (_, tap) in &out.aux {
        let tap_logits = heads.decode(tape, tap)?;
        let ce = tape.softmax_cross_entropy(&tap_logits, targets)?;
        aux_sum = Some(match aux_sum {
            Some(s) => tape.add(&s, &ce)?,
            None => ce,
        });
    }
    let aux_mean = tape.scale(&aux_sum.unwrap(), aux_lambda / out.aux.len() as f64)?;
    let total = tape.add(&main, &aux_mean)?;
    Ok((total, main_value))
}

// ── Gradient utilities ──────────────────────────────────────────────────────

/// Pulls gradients out in the fixed handle order.
pub fn collect_grads(
    grads: &Gradients,
    handles: &[(&'static str, &Tensor)],
) -> Result<Vec<Vec<f64>>, TrainError> {
    handles
        .iter()
        .map(|(name, h)| {
            grads
                .wrt(h)
                .map(|g| g.to_vec())
                .ok_or_else(|| TrainError::Config(format!("no gradient slot for {name}")))
        })
        .collect()
}

pub fn global_grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales all gradients down to a global L2 norm of `max_norm` when they
/// exceed it; returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Mean-of-lanes gradient accumulator (fixed handle order).
pub struct GradAccum {
    sums: Vec<Vec<f64>>,
    count: usize,
}

impl GradAccum {
    pub fn new(sizes: &[usize]) -> GradAccum {
        GradAccum { sums: sizes.iter().map(|&n| vec![0.0; n]).collect(), count: 0 }
    }

    pub fn add(&mut self, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), self.sums.len());
        for (sum, g) in self.sums.iter_mut().zip(grads.iter()) {
            for (s, v) in sum.iter_mut().zip(g.iter()) {
                *s += v;
            }
        }
        self.count += 1;
    }

    pub fn mean(mut self) -> Vec<Vec<f64>> {
        let n = self.count.max(1) as f64;
        for sum in self.sums.iter_mut() {
            for v in sum.iter_mut() {
                *v /= n;
            }
        }
        self.sums
    }
}

// ── Optimizers ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// SGD or Adam with L2-style weight decay added to the gradient.
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, sizes: &[usize]) -> Optimizer {
        Optimizer {
            kind,
            lr,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update in place. `fields` and `grads` must follow the
    /// same fixed parameter order the optimizer was sized with.
    pub fn apply(&mut self, fields: &mut [(&'static str, &mut Tensor)], grads: &[Vec<f64>]) {
        assert_eq!(fields.len(), grads.len());
        assert_eq!(fields.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        for (i, ((_, param), grad)) in fields.iter_mut().zip(grads.iter()).enumerate() {
            let data = param.data_mut();
            assert_eq!(data.len(), grad.len());
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, g) in data.iter_mut().zip(grad.iter()) {
                        *x -= self.lr * (g + self.weight_decay * *x);
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - ADAM_BETA1.powi(t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t);
                    for (j, (x, g)) in data.iter_mut().zip(grad.iter()).enumerate() {
                        let gp = g + self.weight_decay * *x;
                        let m = &mut self.m[i][j];
                        let v = &mut self.v[i][j];
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gp;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gp * gp;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *x -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

// ── LR schedule ─────────────────────────────────────────────────────────────

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// observations without strict improvement over the best metric seen.
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> PlateauScheduler {
        assert!(factor > 0.0 && factor < 1.0, "decay factor must be in (0, 1)");
        assert!(patience >= 1);
        PlateauScheduler { factor, patience, best: f64::INFINITY, bad: 0 }
    }

    /// Feeds one validation metric (lower is better); decays `lr` in place
    /// when patience runs out and returns whether a decay happened.
    pub fn observe(&mut self, metric: f64, lr: &mut f64) -> bool {
        if metric < self.best {
            self.best = metric;
            self.bad = 0;
            return false;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            *lr *= self.factor;
            self.bad = 0;
            return true;
        }
        false
    }
}

// ── Metrics ─────────────────────────────────────────────────────────────────

/// One evaluation record. `epoch` counts epochs for epoch-based tasks and
/// optimization steps for step-based ones; `metric` is task-specific
/// (accuracy, or bits per symbol for language modeling).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub metric: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,split,loss,metric,lr,wall_seconds";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.split, self.loss, self.metric, self.lr, self.wall_seconds
        )
    }
}

/// Writes rows as CSV with a fixed header. Numeric fields use the shortest
/// round-trip representation, so identical runs produce identical bytes.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{METRICS_CSV_HEADER}")?;
    for row in rows {
        writeln!(f, "{}", row.to_csv())?;
    }
    Ok(())
}

// ── Step execution ──────────────────────────────────────────────────────────

/// One lane (independent sequence) of a batch.
pub enum LaneInput<'a> {
    Tokens(&'a [usize]),
    Raw(&'a Tensor),
}

pub struct LanePlan<'a> {
    pub input: LaneInput<'a>,
    pub targets: Vec<Option<usize>>,
    pub pad: HistoryPad,
}

#[derive(Debug)]
pub struct StepResult {
    /// Mean main-term loss across lanes.
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Repackaged history, one pad per lane, in lane order.
    pub new_pads: Vec<HistoryPad>,
}

/// Runs one optimization step over a batch of lanes: samples the step's
/// dropout masks, accumulates mean gradients over per-lane tapes, clips,
/// and applies the optimizer.
pub fn train_step(
    model: &mut Model,
    opt: &mut Optimizer,
    reg: &Regularization,
    lanes: &[LanePlan],
    rng: &mut ChaCha8Rng,
) -> Result<StepResult, TrainError> {
    assert!(!lanes.is_empty());
    let q = model.config.q;
    let r = model.config.r();
    let vd_mask = sample_vd_mask(q, reg.variational_dropout, rng);
    let dc_mask = sample_dropconnect_mask(r, q, reg.dropconnect, rng);

    let mut accum = GradAccum::new(&model.param_sizes());
    let mut loss_sum = 0.0;
    let mut new_pads = Vec::with_capacity(lanes.len());
    for lane in lanes {
        let mut tape = Tape::new();
        let (bp, bh) = model.bind(&mut tape, dc_mask.as_ref())?;
        let x = match &lane.input {
            LaneInput::Tokens(tokens) => bh.encode_tokens(&mut tape, tokens)?,
            LaneInput::Raw(t) => tape.constant(t),
        };
        let opts = ForwardOpts { vd_mask: vd_mask.as_ref(), collect_all_layers: false };
        let out = network_forward(&mut tape, &x, &bp, &model.config, &lane.pad, &opts)?;
        let (total, main_value) = total_loss(&mut tape, &bh, &out, &lane.targets, reg.aux_lambda)?;
        let grads = tape.backprop(&total)?;
        let handles = bound_handles(&bp, &bh);
        accum.add(&collect_grads(&grads, &handles)?);
        loss_sum += main_value;
        new_pads.push(repackage(out.z1.as_ref(), &out.z2, &x));
    }
    let mut grads = accum.mean();
    let grad_norm = clip_gradients(&mut grads, reg.clip_norm);
    opt.apply(&mut model.fields_mut(), &grads);
    Ok(StepResult { loss: loss_sum / lanes.len() as f64, grad_norm, new_pads })
}

/// Evaluation over lanes without dropout or gradients.
pub struct EvalResult {
    /// Active-target-weighted mean loss.
    pub loss: f64,
    /// Fraction of active targets predicted correctly (argmax).
    pub accuracy: f64,
    pub new_pads: Vec<HistoryPad>,
}

pub fn eval_lanes(model: &Model, lanes: &[LanePlan]) -> Result<EvalResult, TrainError> {
    let mut loss_weighted = 0.0;
    let mut active_total = 0usize;
    let mut correct = 0usize;
    let mut new_pads = Vec::with_capacity(lanes.len());
    for lane in lanes {
        let mut tape = Tape::new();
        let (bp, bh) = model.bind(&mut tape, None)?;
        let x = match &lane.input {
            LaneInput::Tokens(tokens) => bh.encode_tokens(&mut tape, tokens)?,
            LaneInput::Raw(t) => tape.constant(t),
        };
        let out =
            network_forward(&mut tape, &x, &bp, &model.config, &lane.pad, &ForwardOpts::default())?;
        let logits = bh.decode(&mut tape, &out.z2)?;
        let active = lane.targets.iter().filter(|t| t.is_some()).count();
        if active > 0 {
            let ce = tape.softmax_cross_entropy(&logits, &lane.targets)?;
            loss_weighted += ce.scalar_value() * active as f64;
            active_total += active;
            let classes = logits.rows();
            for (t, target) in lane.targets.iter().enumerate() {
                if let Some(y) = target {
                    let best = (0..classes)
                        .max_by(|&a, &b| {
                            logits.at2(a, t).partial_cmp(&logits.at2(b, t)).unwrap()
                        })
                        .unwrap();
                    if best == *y {
                        correct += 1;
                    }
                }
            }
        }
        new_pads.push(repackage(out.z1.as_ref(), &out.z2, &x));
    }
    if active_total == 0 {
        return Err(TrainError::Config("evaluation lanes carry no targets".into()));
    }
    Ok(EvalResult {
        loss: loss_weighted / active_total as f64,
        accuracy: correct as f64 / active_total as f64,
        new_pads,
    })
}

// ── Task loops ──────────────────────────────────────────────────────────────

/// Copy-memory training options.
#[derive(Debug, Clone)]
pub struct CopyTaskOptions {
    pub delay: usize,
    pub payload: usize,
    pub batch: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub eval_sequences: usize,
    /// Stop as soon as evaluation accuracy reaches this.
    pub target_accuracy: Option<f64>,
    pub seed: u64,
}

#[derive(Debug)]
pub struct CopyRunResult {
    /// Optimization steps actually taken.
    pub steps: usize,
    pub final_accuracy: f64,
    /// Whether `target_accuracy` was reached within `max_steps`.
    pub reached: bool,
    pub rows: Vec<MetricsRow>,
}

/// Trains on freshly sampled copy-memory batches until the accuracy target
/// or the step limit is hit. Evaluation uses a fixed held-out set of
/// sequences drawn from `seed + 1`.
pub fn run_copy_training(
    model: &mut Model,
    opt: &mut Optimizer,
    reg: &Regularization,
    task: &CopyTaskOptions,
) -> Result<CopyRunResult, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(task.seed.wrapping_add(1));
    let eval_set: Vec<(Vec<usize>, Vec<Option<usize>>)> = (0..task.eval_sequences)
        .map(|_| gen_copy_sequence(task.delay, task.payload, &mut eval_rng))
        .collect();
    let q = model.config.q;
    let p = model.config.p;
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut reached = false;
    let mut final_accuracy = 0.0;
    let mut steps = 0usize;
    for step in 1..=task.max_steps {
        let batch: Vec<(Vec<usize>, Vec<Option<usize>>)> =
            (0..task.batch).map(|_| gen_copy_sequence(task.delay, task.payload, &mut rng)).collect();
        let lanes: Vec<LanePlan> = batch
            .iter()
            .map(|(input, targets)| LanePlan {
                input: LaneInput::Tokens(input),
                targets: targets.clone(),
                pad: HistoryPad::zeros(q, p),
            })
            .collect();
        let result = train_step(model, opt, reg, &lanes, &mut rng)?;
        steps = step;
        if step % task.eval_every == 0 || step == task.max_steps {
            let eval_lanes_vec: Vec<LanePlan> = eval_set
                .iter()
                .map(|(input, targets)| LanePlan {
                    input: LaneInput::Tokens(input),
                    targets: targets.clone(),
                    pad: HistoryPad::zeros(q, p),
                })
                .collect();
            let eval = eval_lanes(model, &eval_lanes_vec)?;
            final_accuracy = eval.accuracy;
            rows.push(MetricsRow {
                epoch: step,
                split: "train",
                loss: result.loss,
                metric: f64::NAN,
                lr: opt.lr,
                wall_seconds: started.elapsed().as_secs_f64(),
            });
            rows.push(MetricsRow {
                epoch: step,
                split: "eval",
                loss: eval.loss,
                metric: eval.accuracy,
                lr: opt.lr,
                wall_seconds: started.elapsed().as_secs_f64(),
            });
            if let Some(target) = task.target_accuracy {
                if eval.accuracy >= target {
                    reached = true;
                    break;
                }
            }
        }
    }
    Ok(CopyRunResult { steps, final_accuracy, reached, rows })
}

/// Character language-model training options.
#[derive(Debug, Clone)]
pub struct LmTaskOptions {
    pub bptt: usize,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Early stop: running mean training loss (bits per symbol) over the
    /// last epoch's worth of steps falls below this.
    pub target_train_bpc: Option<f64>,
}

#[derive(Debug)]
pub struct LmRunResult {
    pub rows: Vec<MetricsRow>,
    /// Optimization steps taken in total.
    pub steps: usize,
    /// Step count at which the running train bpc first hit the target.
    pub reached_at_step: Option<usize>,
}

/// Trains a character language model over contiguous lanes with carried
/// history; evaluates on the validation stream (when present) each epoch
/// and drives the plateau scheduler from the validation loss.
pub fn run_lm_training(
    model: &mut Model,
    opt: &mut Optimizer,
    reg: &Regularization,
    sched: Option<&mut PlateauScheduler>,
    train_tokens: &[usize],
    valid_tokens: &[usize],
    task: &LmTaskOptions,
) -> Result<LmRunResult, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let steps_per_epoch = {
        let s = lm_batches(train_tokens, task.batch, task.bptt);
        if s.is_empty() {
            return Err(TrainError::Config("training stream too short for the batch size".into()));
        }
        s.len()
    };
    let mut sched = sched;
    let q = model.config.q;
    let p = model.config.p;
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut window: Vec<f64> = Vec::new();
    let mut steps = 0usize;
    let mut reached_at_step = None;
    'outer: for epoch in 1..=task.epochs {
        let mut pads: Vec<HistoryPad> = (0..task.batch).map(|_| HistoryPad::zeros(q, p)).collect();
        let mut epoch_loss_weighted = 0.0;
        let mut epoch_active = 0usize;
        for step_chunks in lm_batches(train_tokens, task.batch, task.bptt) {
            let lanes: Vec<LanePlan> = step_chunks
                .iter()
                .map(|chunk: &LmChunk| {
                    let mut targets = chunk.targets.clone();
                    let pad = if chunk.is_first {
                        HistoryPad::zeros(q, p)
                    } else {
                        apply_loss_chop(&mut targets, reg.loss_chop);
                        pads[chunk.lane].clone()
                    };
                    LanePlan { input: LaneInput::Tokens(&chunk.inputs), targets, pad }
                })
                .collect();
            let result = train_step(model, opt, reg, &lanes, &mut rng)?;
            for (chunk, pad) in step_chunks.iter().zip(result.new_pads.into_iter()) {
                pads[chunk.lane] = pad;
            }
            steps += 1;
            let active: usize = lanes.iter().map(|l| l.targets.iter().flatten().count()).sum();
            epoch_loss_weighted += result.loss * active as f64;
            epoch_active += active;
            window.push(result.loss);
            if window.len() > steps_per_epoch {
                window.remove(0);
            }
            if let Some(target) = task.target_train_bpc {
                if reached_at_step.is_none() && window.len() == steps_per_epoch {
                    let mean = window.iter().sum::<f64>() / window.len() as f64;
                    if bits_per_symbol(mean) < target {
                        reached_at_step = Some(steps);
                        break 'outer;
                    }
                }
            }
        }
        let train_loss = epoch_loss_weighted / epoch_active.max(1) as f64;
        rows.push(MetricsRow {
            epoch,
            split: "train",
            loss: train_loss,
            metric: bits_per_symbol(train_loss),
            lr: opt.lr,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if !valid_tokens.is_empty() {
            let valid_loss = eval_lm_stream(model, valid_tokens, task.batch, task.bptt)?;
            rows.push(MetricsRow {
                epoch,
                split: "valid",
                loss: valid_loss,
                metric: bits_per_symbol(valid_loss),
                lr: opt.lr,
                wall_seconds: started.elapsed().as_secs_f64(),
            });
            if let Some(s) = sched.as_deref_mut() {
                s.observe(valid_loss, &mut opt.lr);
            }
        }
    }
    Ok(LmRunResult { rows, steps, reached_at_step })
}

/// Mean next-token cross-entropy of a token stream under the model, with
/// carried history (no dropout).
pub fn eval_lm_stream(
    model: &Model,
    tokens: &[usize],
    batch: usize,
    bptt: usize,
) -> Result<f64, TrainError> {
    let q = model.config.q;
    let p = model.config.p;
    let mut pads: Vec<HistoryPad> = (0..batch).map(|_| HistoryPad::zeros(q, p)).collect();
    let mut loss_weighted = 0.0;
    let mut active_total = 0usize;
    for step_chunks in lm_batches(tokens, batch, bptt) {
        let lanes: Vec<LanePlan> = step_chunks
            .iter()
            .map(|chunk| LanePlan {
                input: LaneInput::Tokens(&chunk.inputs),
                targets: chunk.targets.clone(),
                pad: if chunk.is_first { HistoryPad::zeros(q, p) } else { pads[chunk.lane].clone() },
            })
            .collect();
        let eval = eval_lanes(model, &lanes)?;
        for (chunk, pad) in step_chunks.iter().zip(eval.new_pads.into_iter()) {
            pads[chunk.lane] = pad;
        }
        let active: usize = lanes.iter().map(|l| l.targets.iter().flatten().count()).sum();
        loss_weighted += eval.loss * active as f64;
        active_total += active;
    }
    if active_total == 0 {
        return Err(TrainError::Config("evaluation stream too short".into()));
    }
    Ok(loss_weighted / active_total as f64)
}

/// Pixel-sequence classification options (images as length-T sequences).
#[derive(Debug, Clone)]
pub struct PixelTaskOptions {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Debug)]
pub struct PixelRunResult {
    pub rows: Vec<MetricsRow>,
    pub final_test_accuracy: f64,
}

/// Trains a classifier over pixel sequences: each image is a `[1, T]` lane
/// with a single target at the last position. Test accuracy is evaluated
/// after every epoch.
pub fn run_pixel_training(
    model: &mut Model,
    opt: &mut Optimizer,
    reg: &Regularization,
    sched: Option<&mut PlateauScheduler>,
    train: &[(Vec<f64>, u8)],
    test: &[(Vec<f64>, u8)],
    task: &PixelTaskOptions,
) -> Result<PixelRunResult, TrainError> {
    if train.is_empty() || test.is_empty() {
        return Err(TrainError::Config("pixel task needs nonempty train and test sets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let mut sched = sched;
    let q = model.config.q;
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut final_test_accuracy = 0.0;
    let as_lane = |pixels: &[f64], label: u8, t_len: usize| -> (Tensor, Vec<Option<usize>>) {
        let x = Tensor::new(vec![1, t_len], pixels.to_vec()).unwrap();
        let mut targets = vec![None; t_len];
        targets[t_len - 1] = Some(label as usize);
        (x, targets)
    };
    let t_len = train[0].0.len();
    for epoch in 1..=task.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(task.batch) {
            let prepared: Vec<(Tensor, Vec<Option<usize>>)> =
                chunk.iter().map(|&i| as_lane(&train[i].0, train[i].1, t_len)).collect();
            let lanes: Vec<LanePlan> = prepared
                .iter()
                .map(|(x, targets)| LanePlan {
                    input: LaneInput::Raw(x),
                    targets: targets.clone(),
                    pad: HistoryPad::zeros(q, 1),
                })
                .collect();
            let result = train_step(model, opt, reg, &lanes, &mut rng)?;
            epoch_loss += result.loss;
            batches += 1;
        }
        let (test_loss, test_acc) = eval_pixel_set(model, test, t_len)?;
        final_test_accuracy = test_acc;
        rows.push(MetricsRow {
            epoch,
            split: "train",
            loss: epoch_loss / batches.max(1) as f64,
            metric: f64::NAN,
            lr: opt.lr,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        rows.push(MetricsRow {
            epoch,
            split: "test",
            loss: test_loss,
            metric: test_acc,
            lr: opt.lr,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if let Some(s) = sched.as_deref_mut() {
            s.observe(test_loss, &mut opt.lr);
        }
    }
    Ok(PixelRunResult { rows, final_test_accuracy })
}

/// Loss and accuracy of a labeled pixel-sequence set.
pub fn eval_pixel_set(
    model: &Model,
    set: &[(Vec<f64>, u8)],
    t_len: usize,
) -> Result<(f64, f64), TrainError> {
    let q = model.config.q;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    // Evaluate in modest groups to bound tape size.
    for group in set.chunks(64) {
        let prepared: Vec<(Tensor, Vec<Option<usize>>)> = group
            .iter()
            .map(|(pixels, label)| {
                let x = Tensor::new(vec![1, t_len], pixels.clone()).unwrap();
                let mut targets = vec![None; t_len];
                targets[t_len - 1] = Some(*label as usize);
                (x, targets)
            })
            .collect();
        let lanes: Vec<LanePlan> = prepared
            .iter()
            .map(|(x, targets)| LanePlan {
                input: LaneInput::Raw(x),
                targets: targets.clone(),
                pad: HistoryPad::zeros(q, 1),
            })
            .collect();
        let eval = eval_lanes(model, &lanes)?;
        loss_sum += eval.loss * group.len() as f64;
        correct += (eval.accuracy * group.len() as f64).round() as usize;
    }
    Ok((loss_sum / set.len() as f64, correct as f64 / set.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trellis::{Activation, TrellisConfig};

    fn tiny_model(p: usize, q: usize, vocab: usize, depth: usize, seed: u64) -> Model {
        let config = TrellisConfig {
            p,
            q,
            depth,
            dilations: vec![1; depth],
            activation: Activation::LstmGate,
            aux_every: 0,
            inject_every: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trellis = TrellisParams::init(&config, false, &mut rng);
        let heads = Heads::token_head(p, vocab, vocab, q, &mut rng);
        Model { trellis, config, heads }
    }

    #[test]
    fn test_adam_matches_hand_computed_trajectory() {
        // theta0 = 1, constant gradient 0.5, lr = 0.1: the bias-corrected
        // update is almost exactly lr·sign(g) each step.
        let mut theta = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, 0.0, &[1]);
        let expect = [0.900000002000000, 0.800000004000001, 0.700000006000001];
        for e in expect {
            let mut fields = vec![("theta", &mut theta)];
            opt.apply(&mut fields, &[vec![0.5]]);
            assert!((theta.data()[0] - e).abs() < 1e-12, "got {}, want {e}", theta.data()[0]);
        }
    }

    #[test]
    fn test_adam_with_weight_decay_matches_hand_values() {
        let mut theta = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, 0.1, &[1]);
        let expect = [0.900000001666667, 0.800047340488332];
        for e in expect {
            let mut fields = vec![("theta", &mut theta)];
            opt.apply(&mut fields, &[vec![0.5]]);
            assert!((theta.data()[0] - e).abs() < 1e-12, "got {}, want {e}", theta.data()[0]);
        }
    }

    #[test]
    fn test_sgd_with_weight_decay_matches_hand_value() {
        let mut theta = Tensor::new(vec![1], vec![2.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.01, &[1]);
        let mut fields = vec![("theta", &mut theta)];
        opt.apply(&mut fields, &[vec![0.5]]);
        assert!((theta.data()[0] - 1.948).abs() < 1e-15);
    }

    #[test]
    fn test_clip_rescales_to_global_norm() {
        let mut grads = vec![vec![3.0], vec![4.0]];
        let pre = clip_gradients(&mut grads, 2.0);
        assert!((pre - 5.0).abs() < 1e-15);
        assert!((grads[0][0] - 1.2).abs() < 1e-12);
        assert!((grads[1][0] - 1.6).abs() < 1e-12);
        // Below the threshold nothing changes.
        let mut grads = vec![vec![0.3], vec![0.4]];
        let pre = clip_gradients(&mut grads, 2.0);
        assert!((pre - 0.5).abs() < 1e-15);
        assert_eq!(grads[0][0], 0.3);
    }

    #[test]
    fn test_plateau_scheduler_decays_after_patience() {
        let mut sched = PlateauScheduler::new(0.5, 2);
        let mut lr = 1.0;
        let mut decays = 0;
        for m in [3.0, 3.0, 3.0, 2.9, 2.9, 2.9] {
            if sched.observe(m, &mut lr) {
                decays += 1;
            }
        }
        assert_eq!(decays, 2);
        assert!((lr - 0.25).abs() < 1e-15);
    }

    #[test]
    fn test_vd_mask_statistics_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p_drop = 0.3;
        let keep = 1.0 / (1.0 - p_drop);
        let mut sum = 0.0;
        let mut zeros = 0usize;
        let n_masks = 2000;
        let q = 16;
        for _ in 0..n_masks {
            let mask = sample_vd_mask(q, p_drop, &mut rng).unwrap();
            for &v in mask.data().iter() {
                assert!(v == 0.0 || (v - keep).abs() < 1e-12, "mask entry {v} not in {{0, 1/(1-p)}}");
                sum += v;
                if v == 0.0 {
                    zeros += 1;
                }
            }
        }
        let total = (n_masks * q) as f64;
        assert!((sum / total - 1.0).abs() < 0.02, "mask mean must be ≈ 1, got {}", sum / total);
        assert!((zeros as f64 / total - p_drop).abs() < 0.02);
        assert!(sample_vd_mask(q, 0.0, &mut rng).is_none());
    }

    #[test]
    fn test_loss_chop_masks_leading_targets() {
        let mut targets = vec![Some(1), Some(2), Some(3), Some(4)];
        apply_loss_chop(&mut targets, 2);
        assert_eq!(targets, vec![None, None, Some(3), Some(4)]);
        let mut short = vec![Some(1)];
        apply_loss_chop(&mut short, 5);
        assert_eq!(short, vec![None]);
    }

    #[test]
    fn test_one_dropout_mask_per_step_shared_across_lanes() {
        // With one mask per step, a batch of two identical lanes must
        // produce exactly the single-lane loss (the mean of two equal
        // numbers); resampling per lane would break the equality.
        let tokens = vec![1usize, 2, 3, 0, 2];
        let targets: Vec<Option<usize>> = vec![Some(2), Some(3), Some(0), Some(2), Some(1)];
        let reg = Regularization {
            variational_dropout: 0.4,
            dropconnect: 0.3,
            ..Regularization::default()
        };
        let run = |lanes_n: usize| -> f64 {
            let mut model = tiny_model(3, 4, 5, 2, 99);
            let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.05, 0.0, &model.param_sizes());
            let mut rng = ChaCha8Rng::seed_from_u64(1234);
            let lanes: Vec<LanePlan> = (0..lanes_n)
                .map(|_| LanePlan {
                    input: LaneInput::Tokens(&tokens),
                    targets: targets.clone(),
                    pad: HistoryPad::zeros(4, 3),
                })
                .collect();
            train_step(&mut model, &mut opt, &reg, &lanes, &mut rng).unwrap().loss
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn test_train_step_reduces_loss_on_fixed_batch() {
        let mut model = tiny_model(4, 6, 5, 3, 11);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, 0.0, &model.param_sizes());
        let reg = Regularization::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tokens = vec![1usize, 3, 2, 4, 0, 1, 3];
        let targets: Vec<Option<usize>> = tokens[1..].iter().map(|&t| Some(t)).chain([Some(2)]).collect();
        let mk_lanes = || {
            vec![LanePlan {
                input: LaneInput::Tokens(&tokens),
                targets: targets.clone(),
                pad: HistoryPad::zeros(6, 4),
            }]
        };
        let first = train_step(&mut model, &mut opt, &reg, &mk_lanes(), &mut rng).unwrap().loss;
        let mut last = first;
        for _ in 0..60 {
            last = train_step(&mut model, &mut opt, &reg, &mk_lanes(), &mut rng).unwrap().loss;
        }
        assert!(last < first * 0.5, "loss should fall on a memorizable batch: {first} -> {last}");
    }

    #[test]
    fn test_aux_loss_changes_total_gradient_but_not_main_metric() {
        // Same model/batch with and without the auxiliary term: the recorded
        // main loss must be identical; the parameter update must differ.
        let tokens = vec![1usize, 2, 0, 3, 1];
        let targets: Vec<Option<usize>> = vec![Some(2), Some(0), Some(3), Some(1), Some(2)];
        let run = |lambda: f64| -> (f64, Vec<f64>) {
            let config = TrellisConfig {
                p: 3,
                q: 4,
                depth: 4,
                dilations: vec![1; 4],
                activation: Activation::LstmGate,
                aux_every: 2,
                inject_every: 1,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let trellis = TrellisParams::init(&config, false, &mut rng);
            let heads = Heads::token_head(3, 4, 4, 4, &mut rng);
            let mut model = Model { trellis, config, heads };
            let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.0, &model.param_sizes());
            let reg = Regularization { aux_lambda: lambda, ..Regularization::default() };
            let mut step_rng = ChaCha8Rng::seed_from_u64(7);
            let lanes = vec![LanePlan {
                input: LaneInput::Tokens(&tokens),
                targets: targets.clone(),
                pad: HistoryPad::zeros(4, 3),
            }];
            let loss = train_step(&mut model, &mut opt, &reg, &lanes, &mut step_rng).unwrap().loss;
            let snapshot = model.fields()[0].1.data().to_vec();
            (loss, snapshot)
        };
        let (loss_plain, params_plain) = run(0.0);
        let (loss_aux, params_aux) = run(0.05);
        assert_eq!(loss_plain, loss_aux, "main loss metric must not include the aux term");
        assert_ne!(params_plain, params_aux, "aux gradient must alter the update");
    }

    #[test]
    fn test_tied_decoder_shares_embedding_parameter() {
        let config = TrellisConfig {
            p: 5,
            q: 5,
            depth: 2,
            dilations: vec![1; 2],
            activation: Activation::LstmGate,
            aux_every: 0,
            inject_every: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trellis = TrellisParams::init(&config, false, &mut rng);
        let heads = Heads::tied_head(5, 7, &mut rng);
        let model = Model { trellis, config, heads };
        // One field for the embedding, none for a decoder matrix.
        let names: Vec<&str> = model.fields().iter().map(|(n, _)| *n).collect();
        assert!(names.contains(&"embedding"));
        assert!(!names.contains(&"decoder_w"));
        // Gradient flows into the embedding through both uses.
        let mut tape = Tape::new();
        let (bp, bh) = model.bind(&mut tape, None).unwrap();
        let tokens = vec![0usize, 3, 6, 2];
        let x = bh.encode_tokens(&mut tape, &tokens).unwrap();
        let out = network_forward(
            &mut tape,
            &x,
            &bp,
            &model.config,
            &HistoryPad::zeros(5, 5),
            &ForwardOpts::default(),
        )
        .unwrap();
        let (total, _) = total_loss(&mut tape, &bh, &out, &[Some(3), Some(6), Some(2), Some(0)], 0.0)
            .unwrap();
        let grads = tape.backprop(&total).unwrap();
        let g = grads.wrt(bh.embedding.as_ref().unwrap()).unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn test_eval_lanes_accuracy_on_known_logits() {
        // A raw-input model with an identity-ish decoder is overkill here;
        // instead check the bookkeeping: perfect model accuracy on a batch
        // it has memorized approaches 1.
        let mut model = tiny_model(4, 6, 5, 3, 21);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.02, 0.0, &model.param_sizes());
        let reg = Regularization::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tokens = vec![1usize, 3, 2, 4, 0, 1];
        let targets: Vec<Option<usize>> = vec![Some(3), Some(2), Some(4), Some(0), Some(1), Some(3)];
        let lanes = || {
            vec![LanePlan {
                input: LaneInput::Tokens(&tokens),
                targets: targets.clone(),
                pad: HistoryPad::zeros(6, 4),
            }]
        };
        for _ in 0..200 {
            train_step(&mut model, &mut opt, &reg, &lanes(), &mut rng).unwrap();
        }
        let eval = eval_lanes(&model, &lanes()).unwrap();
        assert!(eval.accuracy > 0.99, "memorized batch accuracy {}", eval.accuracy);
        assert!(eval.loss < 0.1);
    }

    #[test]
    fn test_divergence_is_reported_as_error() {
        let mut model = tiny_model(3, 4, 5, 2, 31);
        // Poison a parameter so the forward pass blows up.
        model.trellis.wx.data_mut()[0] = f64::INFINITY;
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.0, &model.param_sizes());
        let reg = Regularization::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tokens = vec![1usize, 2];
        let lanes = vec![LanePlan {
            input: LaneInput::Tokens(&tokens),
            targets: vec![Some(2), Some(1)],
            pad: HistoryPad::zeros(4, 3),
        }];
        // NaN/Inf parameters surface as a tensor error at bind/forward time;
        // anything non-finite downstream maps to Diverged.
        let err = train_step(&mut model, &mut opt, &reg, &lanes, &mut rng).unwrap_err();
        assert!(matches!(err, TrainError::Diverged(_)), "got {err:?}");
    }

    #[test]
    fn test_metrics_csv_is_deterministic() {
        let rows = vec![
            MetricsRow { epoch: 1, split: "train", loss: 1.25, metric: 0.5, lr: 0.1, wall_seconds: 2.5 },
            MetricsRow { epoch: 1, split: "valid", loss: 1.5, metric: f64::NAN, lr: 0.1, wall_seconds: 3.0 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_metrics_csv(&a, &rows).unwrap();
        write_metrics_csv(&b, &rows).unwrap();
        let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(ba, bb);
        let text = String::from_utf8(ba).unwrap();
        assert!(text.starts_with("epoch,split,loss,metric,lr,wall_seconds\n"));
        assert!(text.contains("1,train,1.25,0.5,0.1,2.5"));
    }

    #[test]
    fn test_lm_training_carries_history_and_reports_rows() {
        // Tiny two-epoch smoke run; checks row structure and that training
        // on a repetitive stream lowers the loss.
        let mut patterned = Vec::new();
        for _ in 0..100 {
            patterned.extend_from_slice(&[0usize, 1, 2, 1]);
        }
        let mut model = tiny_model(4, 6, 3, 3, 55);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, 0.0, &model.param_sizes());
        let reg = Regularization { loss_chop: 2, ..Regularization::default() };
        let task = LmTaskOptions { bptt: 8, batch: 2, epochs: 2, seed: 9, target_train_bpc: None };
        let result =
            run_lm_training(&mut model, &mut opt, &reg, None, &patterned, &patterned[..40], &task)
                .unwrap();
        assert_eq!(result.rows.len(), 4, "train+valid rows per epoch");
        assert!(result.steps > 0);
        let first_train = result.rows[0].loss;
        let last_train = result.rows[2].loss;
        assert!(last_train < first_train, "loss should drop on a periodic stream");
        // bpc metric is loss/ln2.
        assert!((result.rows[0].metric - bits_per_symbol(first_train)).abs() < 1e-12);
    }

    #[test]
    fn test_copy_training_smoke_reaches_easy_target() {
        // Minimal delay and payload: a small net should hit high accuracy
        // fast; checks early stopping and bookkeeping.
        let config = TrellisConfig {
            p: 8,
            q: 16,
            depth: 4,
            dilations: vec![1, 2, 4, 8],
            activation: Activation::LstmGate,
            aux_every: 0,
            inject_every: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let trellis = TrellisParams::init(&config, false, &mut rng);
        let heads = Heads::token_head(8, 10, 10, 16, &mut rng);
        let mut model = Model { trellis, config, heads };
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.005, 0.0, &model.param_sizes());
        let reg = Regularization { clip_norm: 1.0, ..Regularization::default() };
        let task = CopyTaskOptions {
            delay: 4,
            payload: 4,
            batch: 4,
            max_steps: 1500,
            eval_every: 50,
            eval_sequences: 20,
            target_accuracy: Some(0.98),
            seed: 1,
        };
        let result = run_copy_training(&mut model, &mut opt, &reg, &task).unwrap();
        assert!(result.reached, "easy copy task should be solved, acc {}", result.final_accuracy);
        assert!(result.steps < 1500);
        assert!(!result.rows.is_empty());
    }
}
