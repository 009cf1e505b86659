//! The constructive embedding of truncated recurrent networks into trellis
//! networks with sparse kernels, and the machinery to verify it numerically.
//!
//! An L-layer width-d recurrent network whose output at time t is recomputed
//! from a zero state over the last M inputs ("M-truncation") is *exactly* a
//! trellis network of depth `M + L − 1`, width `q = L·d`, all dilations 1,
//! whose kernel is mostly zeros:
//!
//! * hidden channels split into L groups of d, group i carrying layer i;
//! * the kernel's older tap holds each layer's recurrent matrix on the
//!   diagonal group block (it sees the group's own previous time step);
//! * the current-time tap holds each layer's input matrix on the subdiagonal
//!   block (group i reads group i−1), with layer 1's input matrix moved into
//!   the injection `Wx`;
//! * the network output is the last group of the final layer.
//!
//! Along the way each intermediate layer j holds, in group i, the layer-i
//! state of a shorter truncation: a fresh run over the window of length
//! `j − i + 1` ending at the current step ([`state_trace_vanilla`] checks
//! every one of these cells).
//!
//! Exactness at the sequence boundary requires the update to map a zero
//! state with zero input to a zero state, because cells "before the first
//! layer of history" hold literal zeros in the trellis. That holds for tanh
//! (and any odd activation) and for the gated cell whenever the candidate
//! bias is zero; the other three gate biases may be arbitrary. A sigmoid
//! vanilla cell maps 0 to 0.5 and genuinely breaks the correspondence
//! ([`verify_equivalence`] therefore samples tanh cells, and LSTM cells with
//! zero candidate bias).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::rnn::{
    lstm_step, run_truncated, run_truncated_lstm, vanilla_step, LstmLayer, LstmParams, LstmState,
    Nonlinearity, VanillaRnnParams, VanillaState,
};
use crate::tensor::{max_abs_diff, Tensor};
use crate::trellis::{
    forward_values, Activation, HistoryPad, KernelParam, NetworkOutput, TrellisConfig,
    TrellisError, TrellisParams,
};

#[derive(Debug, thiserror::Error)]
pub enum EquivalenceError {
    #[error("embedding: {0}")]
    Embedding(String),
    #[error(transparent)]
    Trellis(#[from] TrellisError),
}

/// Which recurrent cell an embedding (or verification run) refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RnnCell {
    Vanilla,
    Lstm,
}

/// The two dense mixing matrices of one trellis layer written in combined
/// form: with `u_t = [x_t ; z_t]` (input stacked on hidden, `p + q` rows),
/// the pre-activation is `ẑ_t = W1·u_{t−1} + W2·u_t + bias`. This is the
/// natural shape in which the embedding is constructed; [`Self::split`]
/// rearranges it into the `Wx`/`Wz` tap layout the network runs with.
#[derive(Debug, Clone)]
pub struct SparseKernelPair {
    /// `[r, p + q]`, applied to the previous time step.
    pub w1: Tensor,
    /// `[r, p + q]`, applied to the current time step.
    pub w2: Tensor,
    /// `[r]`.
    pub bias: Tensor,
}

impl SparseKernelPair {
    pub fn rows(&self) -> usize {
        self.w1.shape()[0]
    }

    /// Splits the combined matrices at input width `p` into trellis
    /// parameters: columns `0..p` become the injection kernel `Wx`, columns
    /// `p..` the hidden kernel `Wz`; `W1` fills tap 0, `W2` tap 1.
    pub fn split(&self, p: usize) -> TrellisParams {
        let r = self.rows();
        let cols = self.w1.shape()[1];
        let q = cols - p;
        let wx = Tensor::from_fn(vec![r, p, 2], |idx| {
            let (row, rest) = (idx / (p * 2), idx % (p * 2));
            let (col, tap) = (rest / 2, rest % 2);
            let src = if tap == 0 { &self.w1 } else { &self.w2 };
            src.at2(row, col)
        });
        let wz = Tensor::from_fn(vec![r, q, 2], |idx| {
            let (row, rest) = (idx / (q * 2), idx % (q * 2));
            let (col, tap) = (rest / 2, rest % 2);
            let src = if tap == 0 { &self.w1 } else { &self.w2 };
            src.at2(row, p + col)
        });
        TrellisParams { wz: KernelParam::Direct(wz), wx, bias: self.bias.clone() }
    }

    /// Inverse of [`Self::split`]: reassembles the combined matrices from
    /// trellis parameters (the kernel must be in direct form).
    pub fn from_params(params: &TrellisParams, p: usize, q: usize) -> SparseKernelPair {
        let wz = match &params.wz {
            KernelParam::Direct(k) => k,
            KernelParam::WeightNormed { .. } => {
                panic!("combined form is only defined for a direct kernel")
            }
        };
        let r = wz.shape()[0];
        let cols = p + q;
        let pick = |tap: usize, idx: usize| -> f64 {
            let (row, col) = (idx / cols, idx % cols);
            if col < p {
                params.wx.at3(row, col, tap)
            } else {
                wz.at3(row, col - p, tap)
            }
        };
        SparseKernelPair {
            w1: Tensor::from_fn(vec![r, cols], |i| pick(0, i)),
            w2: Tensor::from_fn(vec![r, cols], |i| pick(1, i)),
            bias: params.bias.clone(),
        }
    }
}

/// A trellis network produced by embedding a truncated recurrent network,
/// with enough bookkeeping to find the recurrent output inside it.
#[derive(Debug, Clone)]
pub struct EmbeddedTrellis {
    pub params: TrellisParams,
    pub config: TrellisConfig,
    pub cell: RnnCell,
    /// L, d, p of the source network.
    pub layers: usize,
    pub hidden: usize,
    pub input_dim: usize,
    /// The truncation length M the embedding realizes.
    pub truncation: usize,
}

impl EmbeddedTrellis {
    /// Channel rows of the final layer that carry the recurrent network's
    /// output (its top layer): the last group.
    pub fn output_rows(&self) -> std::ops::Range<usize> {
        (self.layers - 1) * self.hidden..self.layers * self.hidden
    }

    /// Full forward pass from the given history pad (values only).
    pub fn forward(&self, x: &Tensor, pad: &HistoryPad) -> Result<NetworkOutput, TrellisError> {
        forward_values(&self.params, &self.config, x, pad)
    }

    /// Copies the output group's rows out of a final-layer `z2`.
    pub fn output_slice(&self, z2: &Tensor) -> Tensor {
        let rows = self.output_rows();
        let t_len = z2.cols();
        let d = self.hidden;
        Tensor::from_fn(vec![d, t_len], |idx| z2.at2(rows.start + idx / t_len, idx % t_len))
    }

    /// Runs from zero history and returns the `[d, T]` output that should
    /// match the M-truncated recurrent network.
    pub fn run(&self, x: &Tensor) -> Result<Tensor, TrellisError> {
        let pad = HistoryPad::zeros(self.config.q, self.config.p);
        let out = self.forward(x, &pad)?;
        Ok(self.output_slice(&out.z2))
    }
}

/// Embeds an M-truncated vanilla RNN as a sparse-kernel trellis network of
/// depth `M + L − 1` and width `L·d`.
pub fn embed_vanilla(rnn: &VanillaRnnParams, m: usize) -> Result<EmbeddedTrellis, EquivalenceError> {
    rnn.validate();
    if m == 0 {
        return Err(EquivalenceError::Embedding("truncation must be at least 1".into()));
    }
    let (l, d, p) = (rnn.layers(), rnn.hidden(), rnn.input_dim());
    let q = l * d;
    let cols = p + q;
    let mut w1 = vec![0.0; q * cols];
    let mut w2 = vec![0.0; q * cols];
    for i in 0..l {
        let row0 = i * d;
        // Recurrent matrix: previous time step, the group's own block.
        for a in 0..d {
            for b in 0..d {
                w1[(row0 + a) * cols + (p + row0 + b)] = rnn.w_hh[i].at2(a, b);
            }
        }
        // Input matrix: current time step, from the group below (or the
        // injected input for layer 1).
        if i == 0 {
            for a in 0..d {
                for b in 0..p {
                    w2[(row0 + a) * cols + b] = rnn.w_hx[0].at2(a, b);
                }
            }
        } else {
            let below0 = (i - 1) * d;
            for a in 0..d {
                for b in 0..d {
                    w2[(row0 + a) * cols + (p + below0 + b)] = rnn.w_hx[i].at2(a, b);
                }
            }
        }
    }
    let pair = SparseKernelPair {
        w1: Tensor::new(vec![q, cols], w1).unwrap(),
        w2: Tensor::new(vec![q, cols], w2).unwrap(),
        bias: Tensor::zeros(vec![q]),
    };
    let depth = m + l - 1;
    let config = TrellisConfig {
        p,
        q,
        depth,
        dilations: vec![1; depth],
        activation: Activation::Elementwise(rnn.g),
        aux_every: 0,
        inject_every: 1,
    };
    Ok(EmbeddedTrellis {
        params: pair.split(p),
        config,
        cell: RnnCell::Vanilla,
        layers: l,
        hidden: d,
        input_dim: p,
        truncation: m,
    })
}

/// Embeds an M-truncated LSTM as a gated trellis network of depth
/// `M + L − 1` and width `L·d` (pre-activation rows `4·L·d`, gate-major:
/// forget, input, candidate, output blocks). The trellis cell `z1` carries
/// the LSTM cell states, `z2` the hidden states.
pub fn embed_lstm(rnn: &LstmParams, m: usize) -> Result<EmbeddedTrellis, EquivalenceError> {
    rnn.validate();
    if m == 0 {
        return Err(EquivalenceError::Embedding("truncation must be at least 1".into()));
    }
    let (l, d, p) = (rnn.layers(), rnn.hidden(), rnn.input_dim());
    let q = l * d;
    let r = 4 * q;
    let cols = p + q;
    let mut w1 = vec![0.0; r * cols];
    let mut w2 = vec![0.0; r * cols];
    let mut bias = vec![0.0; r];
    for (i, lp) in rnn.layers.iter().enumerate() {
        let gates: [(&Tensor, &Tensor, &Tensor); 4] = [
            (&lp.w_f, &lp.u_f, &lp.b_f),
            (&lp.w_i, &lp.u_i, &lp.b_i),
            (&lp.w_g, &lp.u_g, &lp.b_g),
            (&lp.w_o, &lp.u_o, &lp.b_o),
        ];
        for (gate, (w, u, b)) in gates.iter().enumerate() {
            let row0 = gate * q + i * d;
            for a in 0..d {
                bias[row0 + a] = b.data()[a];
                // Recurrent matrix: previous hidden state of the same group.
                for bb in 0..d {
                    w1[(row0 + a) * cols + (p + i * d + bb)] = u.at2(a, bb);
                }
                // Input matrix: current step, group below or injected input.
                if i == 0 {
                    for bb in 0..p {
                        w2[(row0 + a) * cols + bb] = w.at2(a, bb);
                    }
                } else {
                    for bb in 0..d {
                        w2[(row0 + a) * cols + (p + (i - 1) * d + bb)] = w.at2(a, bb);
                    }
                }
            }
        }
    }
    let pair = SparseKernelPair {
        w1: Tensor::new(vec![r, cols], w1).unwrap(),
        w2: Tensor::new(vec![r, cols], w2).unwrap(),
        bias: Tensor::new(vec![r], bias).unwrap(),
    };
    let depth = m + l - 1;
    let config = TrellisConfig {
        p,
        q,
        depth,
        dilations: vec![1; depth],
        activation: Activation::LstmGate,
        aux_every: 0,
        inject_every: 1,
    };
    Ok(EmbeddedTrellis {
        params: pair.split(p),
        config,
        cell: RnnCell::Lstm,
        layers: l,
        hidden: d,
        input_dim: p,
        truncation: m,
    })
}

// ── Windowed oracles ────────────────────────────────────────────────────────

/// State of a fresh zero-state vanilla run over the window of length
/// `window` ending at 1-based position `t_end` (nonpositive positions feed
/// zero vectors; `window ≤ 0` means no steps at all).
fn windowed_vanilla(params: &VanillaRnnParams, x: &Tensor, window: i64, t_end: usize) -> VanillaState {
    let mut h = vec![vec![0.0; params.hidden()]; params.layers()];
    let zero_x = vec![0.0; params.input_dim()];
    for s in (t_end as i64 - window + 1)..=(t_end as i64) {
        let x_s: Vec<f64>;
        let input: &[f64] = if s >= 1 {
            x_s = (0..x.rows()).map(|r| x.at2(r, s as usize - 1)).collect();
            &x_s
        } else {
            &zero_x
        };
        h = vanilla_step(params, &h, input);
    }
    h
}

/// LSTM counterpart of [`windowed_vanilla`].
fn windowed_lstm(params: &LstmParams, x: &Tensor, window: i64, t_end: usize) -> LstmState {
    let mut state = LstmState::zeros(params.layers(), params.hidden());
    let zero_x = vec![0.0; params.input_dim()];
    for s in (t_end as i64 - window + 1)..=(t_end as i64) {
        let x_s: Vec<f64>;
        let input: &[f64] = if s >= 1 {
            x_s = (0..x.rows()).map(|r| x.at2(r, s as usize - 1)).collect();
            &x_s
        } else {
            &zero_x
        };
        state = lstm_step(params, &state, input);
    }
    state
}

// ── State tracing ───────────────────────────────────────────────────────────

/// Cell-by-cell comparison of a whole embedded trellis against windowed
/// recurrent runs.
#[derive(Debug, Clone)]
pub struct TraceReport {
    /// Max abs deviation found at each trellis layer (index 0 = layer 1).
    pub per_layer: Vec<f64>,
    pub max_err: f64,
}

impl TraceReport {
    fn from_layers(per_layer: Vec<f64>) -> TraceReport {
        let max_err = per_layer.iter().cloned().fold(0.0, f64::max);
        TraceReport { per_layer, max_err }
    }
}

/// Verifies the interior of the vanilla embedding: at every trellis layer j,
/// group i must hold the layer-i state of a fresh run over the window of
/// length `j − i + 1` ending at the current step (groups with an empty
/// window must be exactly zero).
pub fn state_trace_vanilla(
    rnn: &VanillaRnnParams,
    m: usize,
    x: &Tensor,
) -> Result<TraceReport, EquivalenceError> {
    let emb = embed_vanilla(rnn, m)?;
    let pad = HistoryPad::zeros(emb.config.q, emb.config.p);
    let out = emb.forward(x, &pad)?;
    let states = out.all_layers.expect("forward_values collects all layers");
    let (l, d) = (emb.layers, emb.hidden);
    let t_len = x.cols();
    let mut per_layer = Vec::with_capacity(states.len());
    for (j0, state) in states.iter().enumerate() {
        let mut worst = 0.0f64;
        for tau in 1..=t_len {
            for i in 1..=l {
                let window = (j0 + 1) as i64 - i as i64 + 1;
                let oracle = windowed_vanilla(rnn, x, window, tau);
                for a in 0..d {
                    let got = state.z2.at2((i - 1) * d + a, tau - 1);
                    worst = worst.max((got - oracle[i - 1][a]).abs());
                }
            }
        }
        per_layer.push(worst);
    }
    Ok(TraceReport::from_layers(per_layer))
}

/// LSTM counterpart of [`state_trace_vanilla`]: checks both the hidden
/// channels (`z2` vs h) and the cell channels (`z1` vs c) of every group at
/// every layer.
pub fn state_trace_lstm(
    rnn: &LstmParams,
    m: usize,
    x: &Tensor,
) -> Result<TraceReport, EquivalenceError> {
    let emb = embed_lstm(rnn, m)?;
    let pad = HistoryPad::zeros(emb.config.q, emb.config.p);
    let out = emb.forward(x, &pad)?;
    let states = out.all_layers.expect("forward_values collects all layers");
    let (l, d) = (emb.layers, emb.hidden);
    let t_len = x.cols();
    let mut per_layer = Vec::with_capacity(states.len());
    for (j0, state) in states.iter().enumerate() {
        let z1 = state.z1.as_ref().expect("gated network carries a cell state");
        let mut worst = 0.0f64;
        for tau in 1..=t_len {
            for i in 1..=l {
                let window = (j0 + 1) as i64 - i as i64 + 1;
                let oracle = windowed_lstm(rnn, x, window, tau);
                for a in 0..d {
                    let row = (i - 1) * d + a;
                    worst = worst.max((state.z2.at2(row, tau - 1) - oracle.h[i - 1][a]).abs());
                    worst = worst.max((z1.at2(row, tau - 1) - oracle.c[i - 1][a]).abs());
                }
            }
        }
        per_layer.push(worst);
    }
    Ok(TraceReport::from_layers(per_layer))
}

// ── Randomized end-to-end verification ──────────────────────────────────────

/// Upper bounds for the randomized trial dimensions (each sampled uniformly
/// from 1..=max).
#[derive(Debug, Clone)]
pub struct TrialLimits {
    pub max_layers: usize,
    pub max_hidden: usize,
    pub max_input: usize,
    pub max_truncation: usize,
    pub max_t: usize,
}

impl Default for TrialLimits {
    fn default() -> Self {
        TrialLimits { max_layers: 3, max_hidden: 4, max_input: 3, max_truncation: 6, max_t: 16 }
    }
}

/// Dimensions and error of one randomized trial.
#[derive(Debug, Clone)]
pub struct TrialInfo {
    pub layers: usize,
    pub hidden: usize,
    pub input_dim: usize,
    pub truncation: usize,
    pub t_len: usize,
    pub err: f64,
}

#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    pub cell: RnnCell,
    pub trials: usize,
    /// Largest output deviation across all trials.
    pub max_abs_err: f64,
    /// The trial that produced it.
    pub worst: Option<TrialInfo>,
}

/// Samples random recurrent networks, embeds each one, and compares the
/// trellis output against the directly-computed M-truncated recurrence on
/// random inputs. Vanilla cells use tanh and LSTM cells a zero candidate
/// bias — the conditions under which the correspondence is exact (see the
/// module docs); the other LSTM gate biases are sampled freely.
pub fn verify_equivalence(
    cell: RnnCell,
    trials: usize,
    seed: u64,
    limits: &TrialLimits,
) -> Result<EquivalenceReport, EquivalenceError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs_err = 0.0f64;
    let mut worst: Option<TrialInfo> = None;
    for _ in 0..trials {
        let l = rng.gen_range(1..=limits.max_layers);
        let d = rng.gen_range(1..=limits.max_hidden);
        let p = rng.gen_range(1..=limits.max_input);
        let m = rng.gen_range(1..=limits.max_truncation);
        let t_len = rng.gen_range(1..=limits.max_t);
        let x = Tensor::from_fn(vec![p, t_len], |_| rng.gen_range(-1.0..1.0));
        let err = match cell {
            RnnCell::Vanilla => {
                let rnn = sample_vanilla(l, d, p, &mut rng);
                let emb = embed_vanilla(&rnn, m)?;
                max_abs_diff(&emb.run(&x)?, &run_truncated(&rnn, &x, m))
            }
            RnnCell::Lstm => {
                let rnn = sample_lstm(l, d, p, &mut rng);
                let emb = embed_lstm(&rnn, m)?;
                max_abs_diff(&emb.run(&x)?, &run_truncated_lstm(&rnn, &x, m))
            }
        };
        if worst.is_none() || err > max_abs_err {
            max_abs_err = max_abs_err.max(err);
            worst = Some(TrialInfo { layers: l, hidden: d, input_dim: p, truncation: m, t_len, err });
        }
    }
    Ok(EquivalenceReport { cell, trials, max_abs_err, worst })
}

/// Like [`verify_equivalence`], but every trial uses exactly the given
/// dimensions; only the weights and inputs are resampled.
pub fn verify_equivalence_fixed(
    cell: RnnCell,
    layers: usize,
    hidden: usize,
    input_dim: usize,
    truncation: usize,
    t_len: usize,
    trials: usize,
    seed: u64,
) -> Result<EquivalenceReport, EquivalenceError> {
    for (name, v) in
        [("layers", layers), ("hidden", hidden), ("input_dim", input_dim), ("truncation", truncation), ("t_len", t_len)]
    {
        if v == 0 {
            return Err(EquivalenceError::Embedding(format!("{name} must be >= 1")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs_err = 0.0f64;
    let mut worst: Option<TrialInfo> = None;
    for _ in 0..trials {
        let x = Tensor::from_fn(vec![input_dim, t_len], |_| rng.gen_range(-1.0..1.0));
        let err = match cell {
            RnnCell::Vanilla => {
                let rnn = sample_vanilla(layers, hidden, input_dim, &mut rng);
                let emb = embed_vanilla(&rnn, truncation)?;
                max_abs_diff(&emb.run(&x)?, &run_truncated(&rnn, &x, truncation))
            }
            RnnCell::Lstm => {
                let rnn = sample_lstm(layers, hidden, input_dim, &mut rng);
                let emb = embed_lstm(&rnn, truncation)?;
                max_abs_diff(&emb.run(&x)?, &run_truncated_lstm(&rnn, &x, truncation))
            }
        };
        if worst.is_none() || err > max_abs_err {
            max_abs_err = max_abs_err.max(err);
            worst = Some(TrialInfo {
                layers,
                hidden,
                input_dim,
                truncation,
                t_len,
                err,
            });
        }
    }
    Ok(EquivalenceReport { cell, trials, max_abs_err, worst })
}

fn sample_vanilla(l: usize, d: usize, p: usize, rng: &mut ChaCha8Rng) -> VanillaRnnParams {
    let mut w_hx = Vec::with_capacity(l);
    let mut w_hh = Vec::with_capacity(l);
    for i in 0..l {
        let d_in = if i == 0 { p } else { d };
        w_hx.push(Tensor::from_fn(vec![d, d_in], |_| rng.gen_range(-0.5..0.5)));
        w_hh.push(Tensor::from_fn(vec![d, d], |_| rng.gen_range(-0.5..0.5)));
    }
    VanillaRnnParams { w_hx, w_hh, g: Nonlinearity::Tanh }
}

fn sample_lstm(l: usize, d: usize, p: usize, rng: &mut ChaCha8Rng) -> LstmParams {
    let mut layers = Vec::with_capacity(l);
    for i in 0..l {
        let d_in = if i == 0 { p } else { d };
        let mut mat = |rows: usize, cols: usize| Tensor::from_fn(vec![rows, cols], |_| rng.gen_range(-0.5..0.5));
        let w_f = mat(d, d_in);
        let u_f = mat(d, d);
        let w_i = mat(d, d_in);
        let u_i = mat(d, d);
        let w_g = mat(d, d_in);
        let u_g = mat(d, d);
        let w_o = mat(d, d_in);
        let u_o = mat(d, d);
        let mut vecb = |()| Tensor::from_fn(vec![d], |_| rng.gen_range(-0.3..0.3));
        layers.push(LstmLayer {
            w_f,
            u_f,
            b_f: vecb(()),
            w_i,
            u_i,
            b_i: vecb(()),
            w_g,
            u_g,
            // The candidate bias must be zero for the embedding to be exact
            // at the sequence boundary (tanh(0) = 0 keeps unreached cells at
            // zero); everything else may be arbitrary.
            b_g: Tensor::zeros(vec![d]),
            w_o,
            u_o,
            b_o: vecb(()),
        });
    }
    LstmParams { layers }
}
