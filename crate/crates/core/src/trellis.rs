//! The trellis network: a temporal ConvNet with weights tied across both
//! time and depth and the input re-injected at every layer.
//!
//! One layer computes, over the whole sequence at once,
//!
//! ```text
//! ẑ^{(i+1)} = CausalConv1d(z2^{(i)}; Wz, dilation) + x̃
//! z^{(i+1)} = f(ẑ^{(i+1)}, z1^{(i)} delayed by the dilation)
//! ```
//!
//! where `x̃` is the injection `x̃_t = Wx[:,:,0]·x_{t-1} + Wx[:,:,1]·x_t + bias`,
//! computed once and reused by every layer, and `f` is either an elementwise
//! nonlinearity (then a layer's state is just `z2`, `r = q` rows of `ẑ`) or
//! the LSTM-style gated update (state `(z1, z2)` = (cell, hidden), `r = 4q`):
//!
//! ```text
//! z1' = σ(ẑ₁)∘z1_delayed + σ(ẑ₂)∘tanh(ẑ₃)      (forget / input / candidate)
//! z2' = σ(ẑ₄)∘tanh(z1')                          (output gate)
//! ```
//!
//! The input layer is `z^{(0)} = 0`. Reads that fall before t=0 — both the
//! convolution over `z2` and the `z1` delay — are served from a
//! [`HistoryPad`] so that a long sequence can be processed as consecutive
//! subsequences: [`repackage`] stores the final layer's last-step state and
//! the last input column, detached, and the next call applies that same
//! vector as left padding at every layer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rnn::Nonlinearity;
use crate::tensor::{Tape, Tensor, TensorError};

/// Errors from configuration validation or the underlying tensor ops.
#[derive(Debug, thiserror::Error)]
pub enum TrellisError {
    #[error("trellis config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-layer activation of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `z2' = g(ẑ)`; the pre-activation has `r = q` rows and there is no cell state.
    Elementwise(Nonlinearity),
    /// LSTM-style gated update; the pre-activation has `r = 4q` rows
    /// (forget, input, candidate, output blocks) and the state carries a cell `z1`.
    LstmGate,
}

/// Static shape of a trellis network.
#[derive(Debug, Clone)]
pub struct TrellisConfig {
    /// Input channels.
    pub p: usize,
    /// Hidden channels per time step (`z2` width; also `z1` width for the gated activation).
    pub q: usize,
    /// Number of layers (the same weights are applied at every one).
    pub depth: usize,
    /// Per-layer convolution dilation, length `depth`.
    pub dilations: Vec<usize>,
    pub activation: Activation,
    /// Auxiliary-tap spacing ℓ for deep supervision: taps sit at layers
    /// depth−ℓ, depth−2ℓ, … (> 0). Zero disables taps.
    pub aux_every: usize,
    /// Inject `x̃` only at layers 1, 1+k, 1+2k, …; 1 injects everywhere
    /// (the normal configuration — sparser injection exists for ablation).
    pub inject_every: usize,
}

impl TrellisConfig {
    /// Rows of the pre-activation `ẑ` implied by the activation.
    pub fn r(&self) -> usize {
        match self.activation {
            Activation::Elementwise(_) => self.q,
            Activation::LstmGate => 4 * self.q,
        }
    }

    /// With kernel size 2, the output at time t depends exactly on inputs in
    /// `[t − Σ dilations, t]`.
    pub fn receptive_field(&self) -> usize {
        self.dilations.iter().sum()
    }

    pub fn validate(&self) -> Result<(), TrellisError> {
        if self.p == 0 || self.q == 0 {
            return Err(TrellisError::Config("p and q must be at least 1".into()));
        }
        if self.depth == 0 {
            return Err(TrellisError::Config("depth must be at least 1".into()));
        }
        if self.dilations.len() != self.depth {
            return Err(TrellisError::Config(format!(
                "{} dilations for depth {}",
                self.dilations.len(),
                self.depth
            )));
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return Err(TrellisError::Config("dilations must be at least 1".into()));
        }
        if self.inject_every == 0 {
            return Err(TrellisError::Config("inject_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Ascending 1-based layer indices carrying auxiliary taps.
    pub fn aux_tap_layers(&self) -> Vec<usize> {
        aux_tap_layers(self.depth, self.aux_every)
    }
}

/// Ascending 1-based tap layers `{depth − k·aux_every : k ≥ 1} ∩ [1, depth)`.
pub fn aux_tap_layers(depth: usize, aux_every: usize) -> Vec<usize> {
    let mut taps = Vec::new();
    if aux_every == 0 {
        return taps;
    }
    let mut l = depth as i64 - aux_every as i64;
    while l >= 1 {
        taps.push(l as usize);
        l -= aux_every as i64;
    }
    taps.reverse();
    taps
}

/// The convolution kernel over hidden channels, either stored directly or
/// reparameterized by weight normalization (direction `v`, per-row gain `g`;
/// the effective row is `g·row(v)/‖row(v)‖₂`).
#[derive(Debug, Clone)]
pub enum KernelParam {
    Direct(Tensor),
    WeightNormed { v: Tensor, g: Tensor },
}

/// Trainable parameters of a trellis network.
///
/// `wz` is `[r, q, 2]` (over hidden channels), `wx` is `[r, p, 2]` (over the
/// injected input), `bias` is `[r]` and rides along with the injection. Tap
/// index 0 is the older time step, tap 1 the current one.
#[derive(Debug, Clone)]
pub struct TrellisParams {
    pub wz: KernelParam,
    pub wx: Tensor,
    pub bias: Tensor,
}

impl TrellisParams {
    /// Uniform ±1/√fan_in init. With `weight_norm`, gains start at the row
    /// norms so the effective kernel equals the sampled direction. For the
    /// gated activation the forget-gate block of the bias starts at 1 (the
    /// usual keep-the-cell-early init); everything else starts at 0.
    pub fn init(config: &TrellisConfig, weight_norm: bool, rng: &mut ChaCha8Rng) -> TrellisParams {
        let (r, q, p) = (config.r(), config.q, config.p);
        let bz = 1.0 / ((2 * q) as f64).sqrt();
        let bx = 1.0 / ((2 * p) as f64).sqrt();
        let wz_raw = Tensor::from_fn(vec![r, q, 2], |_| rng.gen_range(-bz..bz));
        let wz = if weight_norm {
            let cols = q * 2;
            let gains = Tensor::from_fn(vec![r], |i| {
                wz_raw.data()[i * cols..(i + 1) * cols]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            });
            KernelParam::WeightNormed { v: wz_raw, g: gains }
        } else {
            KernelParam::Direct(wz_raw)
        };
        let wx = Tensor::from_fn(vec![r, p, 2], |_| rng.gen_range(-bx..bx));
        let mut bias = vec![0.0; r];
        if matches!(config.activation, Activation::LstmGate) {
            for b in bias.iter_mut().take(config.q) {
                *b = 1.0;
            }
        }
        TrellisParams { wz, wx, bias: Tensor::new(vec![r], bias).unwrap() }
    }

    /// Attaches all parameters to a tape and materializes the effective
    /// kernel (weight norm applied, then the DropConnect mask if given).
    pub fn bind(&self, tape: &mut Tape, dropconnect: Option<&Tensor>) -> Result<BoundParams, TensorError> {
        let (mut kernel, wz_direct, wn_v, wn_g) = match &self.wz {
            KernelParam::Direct(k) => {
                let h = tape.param(k);
                (h.clone(), Some(h), None, None)
            }
            KernelParam::WeightNormed { v, g } => {
                let vh = tape.param(v);
                let gh = tape.param(g);
                let eff = tape.weight_norm(&vh, &gh)?;
                (eff, None, Some(vh), Some(gh))
            }
        };
        if let Some(mask) = dropconnect {
            kernel = tape.hadamard(&kernel, mask)?;
        }
        let wx = tape.param(&self.wx);
        let bias = tape.param(&self.bias);
        Ok(BoundParams { kernel, wz_direct, wn_v, wn_g, wx, bias })
    }

    /// The raw parameter tensors, in the same order as
    /// [`BoundParams::handles`].
    pub fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<(&'static str, &Tensor)> = Vec::new();
        match &self.wz {
            KernelParam::Direct(k) => out.push(("wz", k)),
            KernelParam::WeightNormed { v, g } => {
                out.push(("wz_v", v));
                out.push(("wz_g", g));
            }
        }
        out.push(("wx", &self.wx));
        out.push(("bias", &self.bias));
        out
    }

    /// Mutable variant of [`Self::fields`], in the same order. The optimizer
    /// walks this.
    pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out: Vec<(&'static str, &mut Tensor)> = Vec::new();
        match &mut self.wz {
            KernelParam::Direct(k) => out.push(("wz", k)),
            KernelParam::WeightNormed { v, g } => {
                out.push(("wz_v", v));
                out.push(("wz_g", g));
            }
        }
        out.push(("wx", &mut self.wx));
        out.push(("bias", &mut self.bias));
        out
    }
}

/// Tape-attached parameter handles for one forward pass.
pub struct BoundParams {
    /// Effective convolution kernel actually used by the layers.
    pub kernel: Tensor,
    pub wz_direct: Option<Tensor>,
    pub wn_v: Option<Tensor>,
    pub wn_g: Option<Tensor>,
    pub wx: Tensor,
    pub bias: Tensor,
}

impl BoundParams {
    /// Attached leaf handles for gradient lookup, same order as
    /// [`TrellisParams::fields_mut`].
    pub fn handles(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<(&'static str, &Tensor)> = Vec::new();
        match (&self.wz_direct, &self.wn_v, &self.wn_g) {
            (Some(k), _, _) => out.push(("wz", k)),
            (None, Some(v), Some(g)) => {
                out.push(("wz_v", v));
                out.push(("wz_g", g));
            }
            _ => unreachable!("bind always sets either wz_direct or the weight-norm pair"),
        }
        out.push(("wx", &self.wx));
        out.push(("bias", &self.bias));
        out
    }
}

/// Detached boundary state carried between consecutive subsequences of one
/// long sequence: the final layer's last-step `(z1, z2)` and the last input
/// column. Applied as the left pad at every layer of the next call.
#[derive(Debug, Clone)]
pub struct HistoryPad {
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub x: Vec<f64>,
}

impl HistoryPad {
    /// Fresh-start padding: all zeros (the defined value of history before t=1).
    pub fn zeros(q: usize, p: usize) -> HistoryPad {
        HistoryPad { z1: vec![0.0; q], z2: vec![0.0; q], x: vec![0.0; p] }
    }
}

/// Builds the next subsequence's [`HistoryPad`] from a finished forward:
/// final layer `z1`/`z2` at the last time step plus the last input column,
/// copied out as plain values so no gradient flows across the boundary.
pub fn repackage(final_z1: Option<&Tensor>, final_z2: &Tensor, x: &Tensor) -> HistoryPad {
    let q = final_z2.rows();
    let t_last = final_z2.cols() - 1;
    let z1 = match final_z1 {
        Some(z1) => (0..q).map(|c| z1.at2(c, t_last)).collect(),
        None => vec![0.0; q],
    };
    let z2 = (0..q).map(|c| final_z2.at2(c, t_last)).collect();
    let x_col = (0..x.rows()).map(|c| x.at2(c, x.cols() - 1)).collect();
    HistoryPad { z1, z2, x: x_col }
}

/// Per-layer state snapshot (detached values), for tracing and verification.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub z1: Option<Tensor>,
    pub z2: Tensor,
}

/// Everything a forward pass produces.
#[derive(Debug)]
pub struct NetworkOutput {
    /// Final layer hidden channels `[q, T]`, attached to the tape.
    pub z2: Tensor,
    /// Final layer cell channels (gated activation only), attached.
    pub z1: Option<Tensor>,
    /// Auxiliary taps `(layer index, z2 at that layer)`, ascending by layer.
    pub aux: Vec<(usize, Tensor)>,
    /// Detached per-layer states 1..=depth, present when requested.
    pub all_layers: Option<Vec<LayerState>>,
}

/// Knobs for one forward pass.
#[derive(Default)]
pub struct ForwardOpts<'a> {
    /// Variational-dropout channel mask `[q]`, multiplied onto every layer's
    /// post-activation `z2` at every time step (one mask per pass).
    pub vd_mask: Option<&'a Tensor>,
    /// Snapshot every layer's state into [`NetworkOutput::all_layers`].
    pub collect_all_layers: bool,
}

/// The injection `x̃`: `x̃_t = Wx[:,:,0]·x_{t-1} + Wx[:,:,1]·x_t + bias`,
/// with `x_0` read from the history pad. Computed once per forward and added
/// to each injected layer's pre-activation.
pub fn precompute_injection(
    tape: &mut Tape,
    x: &Tensor,
    wx: &Tensor,
    bias: &Tensor,
    x_pad: &[f64],
) -> Result<Tensor, TensorError> {
    let pad = Tensor::new(vec![x.rows(), 1], x_pad.to_vec()).unwrap();
    let conv = tape.causal_conv1d(x, wx, 1, Some(&pad))?;
    tape.add(&conv, bias)
}

/// Runs the network over a whole subsequence.
///
/// `x` is `[p, T]`; `bound` comes from [`TrellisParams::bind`] on the same
/// tape. The returned tensors stay attached, so a loss built on them can be
/// backpropagated to the bound parameter handles.
pub fn network_forward(
    tape: &mut Tape,
    x: &Tensor,
    bound: &BoundParams,
    config: &TrellisConfig,
    pad: &HistoryPad,
    opts: &ForwardOpts,
) -> Result<NetworkOutput, TrellisError> {
    config.validate()?;
    let (p, q, r) = (config.p, config.q, config.r());
    if x.shape().len() != 2 || x.rows() != p {
        return Err(TrellisError::Config(format!(
            "input must be [{}, T], got {:?}",
            p,
            x.shape()
        )));
    }
    let t_len = x.cols();
    if t_len == 0 {
        return Err(TrellisError::Config("sequence must have at least one step".into()));
    }
    if pad.z1.len() != q || pad.z2.len() != q || pad.x.len() != p {
        return Err(TrellisError::Config("history pad widths do not match the config".into()));
    }
    if bound.kernel.shape() != [r, q, 2] {
        return Err(TrellisError::Config(format!(
            "wz must be [{}, {}, 2], got {:?}",
            r,
            q,
            bound.kernel.shape()
        )));
    }
    if bound.wx.shape() != [r, p, 2] || bound.bias.shape() != [r] {
        return Err(TrellisError::Config("wx/bias shapes do not match the config".into()));
    }

    let x_tilde = precompute_injection(tape, x, &bound.wx, &bound.bias, &pad.x)?;
    let gated = matches!(config.activation, Activation::LstmGate);
    let tap_set = config.aux_tap_layers();

    let mut z2 = tape.constant(&Tensor::zeros(vec![q, t_len]));
    let mut z1 = if gated { Some(tape.constant(&Tensor::zeros(vec![q, t_len]))) } else { None };
    let mut aux = Vec::with_capacity(tap_set.len());
    let mut all_layers = opts.collect_all_layers.then(Vec::new);

    for layer in 1..=config.depth {
        let dilation = config.dilations[layer - 1];
        // Left pads replicate the stored boundary vector across the columns
        // the dilated reads can touch.
        let z2_pad = Tensor::from_fn(vec![q, dilation], |i| pad.z2[i / dilation]);
        let conv = tape.causal_conv1d(&z2, &bound.kernel, dilation, Some(&z2_pad))?;
        let inject = (layer - 1) % config.inject_every == 0;
        let zhat = if inject { tape.add(&conv, &x_tilde)? } else { conv };

        let (mut z2_new, z1_new) = match config.activation {
            Activation::Elementwise(g) => {
                let out = match g {
                    Nonlinearity::Tanh => tape.tanh(&zhat)?,
                    Nonlinearity::Sigmoid => tape.sigmoid(&zhat)?,
                };
                (out, None)
            }
            Activation::LstmGate => {
                let zh1 = tape.slice_channels(&zhat, 0, q)?;
                let zh2 = tape.slice_channels(&zhat, q, q)?;
                let zh3 = tape.slice_channels(&zhat, 2 * q, q)?;
                let zh4 = tape.slice_channels(&zhat, 3 * q, q)?;
                let z1_pad = Tensor::from_fn(vec![q, dilation], |i| pad.z1[i / dilation]);
                let z1_delayed = tape.shift_time(z1.as_ref().unwrap(), dilation, Some(&z1_pad))?;
                let forget = tape.sigmoid(&zh1)?;
                let input = tape.sigmoid(&zh2)?;
                let cand = tape.tanh(&zh3)?;
                let output = tape.sigmoid(&zh4)?;
                let keep = tape.hadamard(&forget, &z1_delayed)?;
                let write = tape.hadamard(&input, &cand)?;
                let z1_new = tape.add(&keep, &write)?;
                let z1_act = tape.tanh(&z1_new)?;
                let z2_new = tape.hadamard(&output, &z1_act)?;
                (z2_new, Some(z1_new))
            }
        };
        if let Some(mask) = opts.vd_mask {
            z2_new = tape.hadamard(&z2_new, mask)?;
        }
        if let Some(states) = all_layers.as_mut() {
            states.push(LayerState {
                z1: z1_new.as_ref().map(|t| t.detached()),
                z2: z2_new.detached(),
            });
        }
        if tap_set.contains(&layer) {
            aux.push((layer, z2_new.clone()));
        }
        z2 = z2_new;
        z1 = z1_new.or(z1);
    }

    Ok(NetworkOutput { z2, z1: if gated { z1 } else { None }, aux, all_layers })
}

/// Convenience for oracle-style uses: runs the network on a scratch tape
/// with no dropout and per-layer collection on, returning detached values.
pub fn forward_values(
    params: &TrellisParams,
    config: &TrellisConfig,
    x: &Tensor,
    pad: &HistoryPad,
) -> Result<NetworkOutput, TrellisError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, None)?;
    let opts = ForwardOpts { vd_mask: None, collect_all_layers: true };
    network_forward(&mut tape, x, &bound, config, pad, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sigma(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    fn small_config(p: usize, q: usize, depth: usize, activation: Activation) -> TrellisConfig {
        TrellisConfig {
            p,
            q,
            depth,
            dilations: vec![1; depth],
            activation,
            aux_every: 0,
            inject_every: 1,
        }
    }

    fn random_params(config: &TrellisConfig, seed: u64) -> TrellisParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrellisParams::init(config, false, &mut rng)
    }

    #[test]
    fn test_config_validation_catches_bad_shapes() {
        let mut c = small_config(2, 3, 2, Activation::LstmGate);
        c.dilations = vec![1];
        assert!(c.validate().is_err(), "dilation count mismatch must fail");
        let mut c2 = small_config(2, 3, 2, Activation::LstmGate);
        c2.dilations = vec![1, 0];
        assert!(c2.validate().is_err(), "zero dilation must fail");
        let mut c3 = small_config(2, 3, 2, Activation::LstmGate);
        c3.inject_every = 0;
        assert!(c3.validate().is_err(), "inject_every 0 must fail");
    }

    #[test]
    fn test_aux_tap_layers_spacing() {
        assert_eq!(aux_tap_layers(55, 16), vec![7, 23, 39]);
        assert_eq!(aux_tap_layers(8, 3), vec![2, 5]);
        assert_eq!(aux_tap_layers(8, 0), Vec::<usize>::new());
        assert_eq!(aux_tap_layers(8, 8), Vec::<usize>::new());
        assert_eq!(aux_tap_layers(8, 7), vec![1]);
    }

    #[test]
    fn test_injection_precompute_matches_per_step_oracle() {
        // x̃_t = Wx0·x_{t-1} + Wx1·x_t + bias, with x_0 from the pad.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (r, p, t_len) = (3, 2, 5);
        let wx = Tensor::from_fn(vec![r, p, 2], |_| rng.gen_range(-1.0..1.0));
        let bias = Tensor::from_fn(vec![r], |_| rng.gen_range(-1.0..1.0));
        let x = Tensor::from_fn(vec![p, t_len], |_| rng.gen_range(-1.0..1.0));
        let x_pad: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let got = precompute_injection(&mut tape, &x, &wx, &bias, &x_pad).unwrap();

        for t in 0..t_len {
            for row in 0..r {
                let mut want = bias.data()[row];
                for c in 0..p {
                    let x_prev = if t == 0 { x_pad[c] } else { x.at2(c, t - 1) };
                    want += wx.at3(row, c, 0) * x_prev + wx.at3(row, c, 1) * x.at2(c, t);
                }
                let diff = (got.at2(row, t) - want).abs();
                assert!(diff < 1e-14, "x̃[{row},{t}]: {diff:.3e}");
            }
        }
    }

    #[test]
    fn test_elementwise_network_matches_naive_recurrence() {
        // Independent oracle: compute every layer with explicit per-step
        // loops over ẑ_t = Wz0·z_{t-1} + Wz1·z_t + x̃_t, z^{(0)} = 0.
        let config = small_config(2, 3, 3, Activation::Elementwise(Nonlinearity::Tanh));
        let params = random_params(&config, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let t_len = 6;
        let x = Tensor::from_fn(vec![2, t_len], |_| rng.gen_range(-1.0..1.0));
        let pad = HistoryPad::zeros(config.q, config.p);
        let out = forward_values(&params, &config, &x, &pad).unwrap();

        let wz = match &params.wz {
            KernelParam::Direct(k) => k,
            _ => unreachable!(),
        };
        let q = config.q;
        // Oracle injection.
        let mut x_tilde = vec![vec![0.0; t_len]; q];
        for t in 0..t_len {
            for row in 0..q {
                let mut v = params.bias.data()[row];
                for c in 0..2 {
                    let xp = if t == 0 { 0.0 } else { x.at2(c, t - 1) };
                    v += params.wx.at3(row, c, 0) * xp + params.wx.at3(row, c, 1) * x.at2(c, t);
                }
                x_tilde[row][t] = v;
            }
        }
        // Oracle layers.
        let mut z = vec![vec![0.0; t_len]; q];
        for _layer in 0..config.depth {
            let mut z_next = vec![vec![0.0; t_len]; q];
            for t in 0..t_len {
                for row in 0..q {
                    let mut v = x_tilde[row][t];
                    for c in 0..q {
                        let zp = if t == 0 { 0.0 } else { z[c][t - 1] };
                        v += wz.at3(row, c, 0) * zp + wz.at3(row, c, 1) * z[c][t];
                    }
                    z_next[row][t] = v.tanh();
                }
            }
            z = z_next;
        }
        for row in 0..q {
            for t in 0..t_len {
                let diff = (out.z2.at2(row, t) - z[row][t]).abs();
                assert!(diff < 1e-13, "z2[{row},{t}]: {diff:.3e}");
            }
        }
    }

    #[test]
    fn test_gated_layer2_reads_delayed_cell_from_layer1() {
        // Zero Wz makes ẑ equal x̃ at every layer, so layer 1's cell is
        // a_t = σ(x̃₂_t)·tanh(x̃₃_t) and layer 2's cell must read a at t−d:
        // z1²_t = σ(x̃₁_t)·a_{t−d} + σ(x̃₂_t)·tanh(x̃₃_t), with a at t<d
        // coming from the (zero) history pad.
        let q = 1;
        let dilation = 2;
        let config = TrellisConfig {
            p: 1,
            q,
            depth: 2,
            dilations: vec![dilation; 2],
            activation: Activation::LstmGate,
            aux_every: 0,
            inject_every: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let t_len = 6;
        let params = TrellisParams {
            wz: KernelParam::Direct(Tensor::zeros(vec![4, 1, 2])),
            wx: Tensor::from_fn(vec![4, 1, 2], |_| rng.gen_range(-1.0..1.0)),
            bias: Tensor::from_fn(vec![4], |_| rng.gen_range(-0.5..0.5)),
        };
        let x = Tensor::from_fn(vec![1, t_len], |_| rng.gen_range(-1.0..1.0));
        let pad = HistoryPad::zeros(q, 1);
        let out = forward_values(&params, &config, &x, &pad).unwrap();
        let states = out.all_layers.as_ref().unwrap();

        // Oracle x̃ rows (4 gate rows).
        let zhat = |row: usize, t: usize| -> f64 {
            let xp = if t == 0 { 0.0 } else { x.at2(0, t - 1) };
            params.bias.data()[row] + params.wx.at3(row, 0, 0) * xp + params.wx.at3(row, 0, 1) * x.at2(0, t)
        };
        let a: Vec<f64> = (0..t_len).map(|t| sigma(zhat(1, t)) * zhat(2, t).tanh()).collect();
        for t in 0..t_len {
            let diff = (states[0].z1.as_ref().unwrap().at2(0, t) - a[t]).abs();
            assert!(diff < 1e-14, "layer1 cell at t={t}: {diff:.3e}");
            let a_delayed = if t >= dilation { a[t - dilation] } else { 0.0 };
            let want = sigma(zhat(0, t)) * a_delayed + sigma(zhat(1, t)) * zhat(2, t).tanh();
            let got = states[1].z1.as_ref().unwrap().at2(0, t);
            assert!((got - want).abs() < 1e-14, "layer2 cell at t={t}: got {got}, want {want}");
            let want_h = sigma(zhat(3, t)) * want.tanh();
            let got_h = states[1].z2.at2(0, t);
            assert!((got_h - want_h).abs() < 1e-14, "layer2 hidden at t={t}");
        }
    }

    #[test]
    fn test_network_is_causal_with_exact_receptive_field() {
        let config = TrellisConfig {
            p: 2,
            q: 3,
            depth: 3,
            dilations: vec![1, 2, 1],
            activation: Activation::LstmGate,
            aux_every: 0,
            inject_every: 1,
        };
        let params = random_params(&config, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let t_len = 12;
        let x = Tensor::from_fn(vec![2, t_len], |_| rng.gen_range(-1.0..1.0));
        let pad = HistoryPad::zeros(config.q, config.p);
        let base = forward_values(&params, &config, &x, &pad).unwrap();

        let rf = config.receptive_field();
        assert_eq!(rf, 4);
        let t_perturb = 5;
        let mut xp = x.clone();
        xp.data_mut()[t_perturb] += 1.0; // channel 0
        let pert = forward_values(&params, &config, &xp, &pad).unwrap();

        for t in 0..t_len {
            for c in 0..config.q {
                let same = base.z2.at2(c, t) == pert.z2.at2(c, t);
                if t < t_perturb {
                    assert!(same, "future perturbation leaked to t={t} < {t_perturb}");
                }
            }
        }
        // Influence reaches exactly t_perturb + rf and no further.
        let influence: Vec<bool> = (0..t_len)
            .map(|t| (0..config.q).any(|c| base.z2.at2(c, t) != pert.z2.at2(c, t)))
            .collect();
        assert!(influence[t_perturb], "perturbation must affect its own step");
        assert!(influence[t_perturb + rf], "receptive field must reach t+Σd");
        for (t, inf) in influence.iter().enumerate() {
            if t > t_perturb + rf {
                assert!(!inf, "influence beyond the receptive field at t={t}");
            }
        }
    }

    #[test]
    fn test_repackage_extracts_last_step_and_pads_flow_in() {
        let config = small_config(1, 2, 2, Activation::LstmGate);
        let params = random_params(&config, 51);
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let x1 = Tensor::from_fn(vec![1, 4], |_| rng.gen_range(-1.0..1.0));
        let x2 = Tensor::from_fn(vec![1, 4], |_| rng.gen_range(-1.0..1.0));
        let fresh = HistoryPad::zeros(2, 1);
        let out1 = forward_values(&params, &config, &x1, &fresh).unwrap();
        let pad = repackage(out1.z1.as_ref(), &out1.z2, &x1);
        assert_eq!(pad.z2.len(), 2);
        for (c, v) in pad.z2.iter().enumerate() {
            assert_eq!(*v, out1.z2.at2(c, 3), "z2 pad must be the last column");
        }
        for (c, v) in pad.z1.iter().enumerate() {
            assert_eq!(*v, out1.z1.as_ref().unwrap().at2(c, 3));
        }
        assert_eq!(pad.x[0], x1.at2(0, 3));

        // Continuing with the pad differs from a fresh start (history flows in)
        // and a zero pad is exactly a fresh start.
        let cont = forward_values(&params, &config, &x2, &pad).unwrap();
        let fresh2 = forward_values(&params, &config, &x2, &fresh).unwrap();
        assert!(
            (cont.z2.at2(0, 0) - fresh2.z2.at2(0, 0)).abs() > 1e-12,
            "carried history must change the first step"
        );
        let zero_pad = HistoryPad::zeros(2, 1);
        let again = forward_values(&params, &config, &x2, &zero_pad).unwrap();
        assert_eq!(again.z2.data(), fresh2.z2.data(), "zero pad must equal fresh start");
    }

    #[test]
    fn test_vd_mask_zeroes_channels_and_scales_rest() {
        let config = small_config(1, 3, 2, Activation::LstmGate);
        let params = random_params(&config, 61);
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let x = Tensor::from_fn(vec![1, 5], |_| rng.gen_range(-1.0..1.0));
        let pad = HistoryPad::zeros(3, 1);
        let mask = Tensor::new(vec![3], vec![0.0, 2.0, 1.0]).unwrap();

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, None).unwrap();
        let opts = ForwardOpts { vd_mask: Some(&mask), collect_all_layers: true };
        let out = network_forward(&mut tape, &x, &bound, &config, &pad, &opts).unwrap();
        for state in out.all_layers.as_ref().unwrap() {
            for t in 0..5 {
                assert_eq!(state.z2.at2(0, t), 0.0, "masked channel must be zero at every layer");
            }
        }
    }

    #[test]
    fn test_weight_norm_bind_effective_rows_have_gain_norm() {
        let config = small_config(2, 3, 1, Activation::Elementwise(Nonlinearity::Tanh));
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let params = TrellisParams::init(&config, true, &mut rng);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, None).unwrap();
        let (g, v) = match &params.wz {
            KernelParam::WeightNormed { v, g } => (g, v),
            _ => panic!("init with weight_norm must produce the reparameterization"),
        };
        let cols = 3 * 2;
        for i in 0..config.r() {
            let row = &bound.kernel.data()[i * cols..(i + 1) * cols];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - g.data()[i]).abs() < 1e-12, "row {i} norm {norm} vs gain {}", g.data()[i]);
            // Gains were initialized to the direction's row norms, so the
            // effective kernel equals v at init.
            for (a, b) in row.iter().zip(v.data()[i * cols..(i + 1) * cols].iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn test_dropconnect_mask_gates_kernel_entries() {
        let config = small_config(1, 2, 1, Activation::Elementwise(Nonlinearity::Tanh));
        let params = random_params(&config, 81);
        let mask = Tensor::zeros(vec![2, 2, 2]); // drop everything
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, Some(&mask)).unwrap();
        assert!(bound.kernel.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn test_forward_rejects_mismatched_input() {
        let config = small_config(2, 3, 1, Activation::LstmGate);
        let params = random_params(&config, 91);
        let x = Tensor::zeros(vec![3, 4]); // wrong channel count
        let pad = HistoryPad::zeros(3, 2);
        let err = forward_values(&params, &config, &x, &pad).unwrap_err();
        assert!(matches!(err, TrellisError::Config(_)), "got {err:?}");
    }

    #[test]
    fn test_gradients_flow_to_all_parameters() {
        let config = TrellisConfig {
            p: 2,
            q: 3,
            depth: 3,
            dilations: vec![1, 2, 1],
            activation: Activation::LstmGate,
            aux_every: 2,
            inject_every: 1,
        };
        let params = random_params(&config, 101);
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let x = Tensor::from_fn(vec![2, 6], |_| rng.gen_range(-1.0..1.0));
        let pad = HistoryPad::zeros(3, 2);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, None).unwrap();
        let out = network_forward(&mut tape, &x, &bound, &config, &pad, &ForwardOpts::default()).unwrap();
        assert_eq!(out.aux.len(), 1, "depth 3 with spacing 2 taps layer 1");
        let loss = tape.sum(&out.z2).unwrap();
        let grads = tape.backprop(&loss).unwrap();
        for (name, handle) in bound.handles() {
            let g = grads.wrt(handle).unwrap();
            let nonzero = g.iter().filter(|v| v.abs() > 0.0).count();
            assert!(nonzero > 0, "parameter {name} received no gradient");
        }
    }
}
