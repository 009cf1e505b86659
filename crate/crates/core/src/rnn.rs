//! Ground-truth recurrent references: stacked vanilla RNNs and LSTMs.
//!
//! These run as plain f64 loops with no tape involvement; they exist to be
//! oracles. [`run_full`] is the ordinary recurrence from a zero initial
//! state. [`run_truncated`] realizes the M-step truncation y_t = output of a
//! fresh zero-state run over the window x_{t-M+1..t}; window positions at
//! nonpositive sequence indices are fed as zero vectors. For activations
//! that fix zero (tanh; an LSTM whose candidate bias is zero) those leading
//! zero steps leave the state at zero, so truncation with M ≥ T reproduces
//! the untruncated run exactly.
//!
//! Stacking convention: layer i at time t reads the *current* output of
//! layer i-1 (h^{(i-1)}_t) and its own previous output (h^{(i)}_{t-1}).

use crate::tensor::Tensor;

/// Elementwise nonlinearity of the vanilla cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Tanh,
    Sigmoid,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => v.tanh(),
            Nonlinearity::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        }
    }
}

/// Parameters of an L-layer vanilla RNN, hidden width `d`, input width `p`:
/// `h^{(i)}_t = g(W_hx^{(i)} h^{(i-1)}_t + W_hh^{(i)} h^{(i)}_{t-1})`, no biases.
///
/// `w_hx[0]` is `[d, p]`; `w_hx[i>0]` is `[d, d]`; every `w_hh[i]` is `[d, d]`.
#[derive(Debug, Clone)]
pub struct VanillaRnnParams {
    pub w_hx: Vec<Tensor>,
    pub w_hh: Vec<Tensor>,
    pub g: Nonlinearity,
}

impl VanillaRnnParams {
    pub fn layers(&self) -> usize {
        self.w_hh.len()
    }

    pub fn hidden(&self) -> usize {
        self.w_hh[0].shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.w_hx[0].shape()[1]
    }

    /// Checks layer counts and matrix shapes line up; panics with a clear
    /// message otherwise. Used by constructors in tests and the embedders.
    pub fn validate(&self) {
        assert!(!self.w_hh.is_empty(), "vanilla RNN needs at least one layer");
        assert_eq!(self.w_hx.len(), self.w_hh.len(), "w_hx/w_hh layer counts differ");
        let d = self.hidden();
        for (i, (wx, wh)) in self.w_hx.iter().zip(self.w_hh.iter()).enumerate() {
            let d_in = if i == 0 { self.input_dim() } else { d };
            assert_eq!(wx.shape(), &[d, d_in], "layer {i} w_hx shape");
            assert_eq!(wh.shape(), &[d, d], "layer {i} w_hh shape");
        }
    }
}

/// One LSTM layer: four gates (forget, input, candidate, output), each with
/// an input matrix `w_* [d, d_in]`, a recurrent matrix `u_* [d, d]`, and a
/// bias `b_* [d]`.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub w_f: Tensor,
    pub u_f: Tensor,
    pub b_f: Tensor,
    pub w_i: Tensor,
    pub u_i: Tensor,
    pub b_i: Tensor,
    pub w_g: Tensor,
    pub u_g: Tensor,
    pub b_g: Tensor,
    pub w_o: Tensor,
    pub u_o: Tensor,
    pub b_o: Tensor,
}

/// Parameters of an L-layer LSTM:
/// `f,i,o = σ(W h^{(below)} + U h_prev + b)`, `g = tanh(W_g h^{(below)} + U_g h_prev + b_g)`,
/// `c' = f∘c + i∘g`, `h' = o∘tanh(c')`.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub layers: Vec<LstmLayer>,
}

impl LstmParams {
    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].u_f.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w_f.shape()[1]
    }

    /// Checks all gate matrix/bias shapes line up; panics with a clear
    /// message otherwise.
    pub fn validate(&self) {
        assert!(!self.layers.is_empty(), "LSTM needs at least one layer");
        let d = self.hidden();
        for (i, lp) in self.layers.iter().enumerate() {
            let d_in = if i == 0 { self.input_dim() } else { d };
            for (name, w, u, b) in [
                ("f", &lp.w_f, &lp.u_f, &lp.b_f),
                ("i", &lp.w_i, &lp.u_i, &lp.b_i),
                ("g", &lp.w_g, &lp.u_g, &lp.b_g),
                ("o", &lp.w_o, &lp.u_o, &lp.b_o),
            ] {
                assert_eq!(w.shape(), &[d, d_in], "layer {i} gate {name} input matrix shape");
                assert_eq!(u.shape(), &[d, d], "layer {i} gate {name} recurrent matrix shape");
                assert_eq!(b.shape(), &[d], "layer {i} gate {name} bias shape");
            }
        }
    }
}

/// Per-layer hidden state of a vanilla RNN (one `Vec<f64>` of width d per layer).
pub type VanillaState = Vec<Vec<f64>>;

/// Per-layer (hidden, cell) state of an LSTM.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LstmState {
    pub fn zeros(layers: usize, d: usize) -> Self {
        LstmState { h: vec![vec![0.0; d]; layers], c: vec![vec![0.0; d]; layers] }
    }
}

fn zero_state(layers: usize, d: usize) -> VanillaState {
    vec![vec![0.0; d]; layers]
}

/// `y += m · x` for a row-major `[rows, cols]` matrix.
fn mat_vec_acc(m: &Tensor, x: &[f64], y: &mut [f64]) {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(y.len(), rows);
    let mv = m.data();
    for r in 0..rows {
        let row = &mv[r * cols..(r + 1) * cols];
        let mut s = 0.0;
        for (w, v) in row.iter().zip(x.iter()) {
            s += w * v;
        }
        y[r] += s;
    }
}

/// Advances every layer of a vanilla RNN by one time step.
pub fn vanilla_step(params: &VanillaRnnParams, h_prev: &VanillaState, x_t: &[f64]) -> VanillaState {
    let layers = params.layers();
    let d = params.hidden();
    let mut h_new = Vec::with_capacity(layers);
    let mut below: &[f64] = x_t;
    for i in 0..layers {
        let mut pre = vec![0.0; d];
        mat_vec_acc(&params.w_hx[i], below, &mut pre);
        mat_vec_acc(&params.w_hh[i], &h_prev[i], &mut pre);
        for v in pre.iter_mut() {
            *v = params.g.apply(*v);
        }
        h_new.push(pre);
        below = h_new.last().unwrap();
    }
    h_new
}

/// Advances every layer of an LSTM by one time step.
pub fn lstm_step(params: &LstmParams, state: &LstmState, x_t: &[f64]) -> LstmState {
    let layers = params.layers();
    let d = params.hidden();
    let mut new = LstmState { h: Vec::with_capacity(layers), c: Vec::with_capacity(layers) };
    let mut below: Vec<f64> = x_t.to_vec();
    for (i, lp) in params.layers.iter().enumerate() {
        let gate = |w: &Tensor, u: &Tensor, b: &Tensor| -> Vec<f64> {
            let mut pre = b.data().to_vec();
            mat_vec_acc(w, &below, &mut pre);
            mat_vec_acc(u, &state.h[i], &mut pre);
            pre
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let f: Vec<f64> = gate(&lp.w_f, &lp.u_f, &lp.b_f).into_iter().map(sig).collect();
        let inp: Vec<f64> = gate(&lp.w_i, &lp.u_i, &lp.b_i).into_iter().map(sig).collect();
        let g: Vec<f64> = gate(&lp.w_g, &lp.u_g, &lp.b_g).into_iter().map(f64::tanh).collect();
        let o: Vec<f64> = gate(&lp.w_o, &lp.u_o, &lp.b_o).into_iter().map(sig).collect();
        let mut c_new = vec![0.0; d];
        let mut h_new = vec![0.0; d];
        for j in 0..d {
            c_new[j] = f[j] * state.c[i][j] + inp[j] * g[j];
            h_new[j] = o[j] * c_new[j].tanh();
        }
        below = h_new.clone();
        new.h.push(h_new);
        new.c.push(c_new);
    }
    new
}

/// Full recurrence from a zero state; returns the last layer's outputs `[d, T]`.
pub fn run_full(params: &VanillaRnnParams, x: &Tensor) -> Tensor {
    run_full_states(params, x).pop().unwrap()
}

/// Full recurrence from a zero state; returns every layer's outputs, each `[d, T]`.
pub fn run_full_states(params: &VanillaRnnParams, x: &Tensor) -> Vec<Tensor> {
    let (layers, d, t_len) = (params.layers(), params.hidden(), x.cols());
    let mut out = vec![vec![0.0; d * t_len]; layers];
    let mut h = zero_state(layers, d);
    for t in 0..t_len {
        let x_t: Vec<f64> = (0..x.rows()).map(|r| x.at2(r, t)).collect();
        h = vanilla_step(params, &h, &x_t);
        for (i, hv) in h.iter().enumerate() {
            for (j, &v) in hv.iter().enumerate() {
                out[i][j * t_len + t] = v;
            }
        }
    }
    out.into_iter().map(|o| Tensor::new(vec![d, t_len], o).unwrap()).collect()
}

/// Full LSTM recurrence from a zero state; returns per-layer hidden and cell
/// trajectories `(h, c)`, each layer `[d, T]`.
pub fn run_full_lstm_states(params: &LstmParams, x: &Tensor) -> (Vec<Tensor>, Vec<Tensor>) {
    let (layers, d, t_len) = (params.layers(), params.hidden(), x.cols());
    let mut hs = vec![vec![0.0; d * t_len]; layers];
    let mut cs = vec![vec![0.0; d * t_len]; layers];
    let mut state = LstmState::zeros(layers, d);
    for t in 0..t_len {
        let x_t: Vec<f64> = (0..x.rows()).map(|r| x.at2(r, t)).collect();
        state = lstm_step(params, &state, &x_t);
        for i in 0..layers {
            for j in 0..d {
                hs[i][j * t_len + t] = state.h[i][j];
                cs[i][j * t_len + t] = state.c[i][j];
            }
        }
    }
    let wrap = |v: Vec<Vec<f64>>| v.into_iter().map(|o| Tensor::new(vec![d, t_len], o).unwrap()).collect();
    (wrap(hs), wrap(cs))
}

/// Full LSTM recurrence; last layer's hidden outputs `[d, T]`.
pub fn run_full_lstm(params: &LstmParams, x: &Tensor) -> Tensor {
    run_full_lstm_states(params, x).0.pop().unwrap()
}

/// M-step truncated outputs: `y_t` is the last-layer output of a fresh
/// zero-state run over the window `x_{t-M+1..t}`, with zero vectors fed at
/// nonpositive window positions.
pub fn run_truncated(params: &VanillaRnnParams, x: &Tensor, m: usize) -> Tensor {
    assert!(m >= 1, "truncation window must be at least 1");
    let (layers, d, p, t_len) = (params.layers(), params.hidden(), params.input_dim(), x.cols());
    let zero_x = vec![0.0; p];
    let mut out = vec![0.0; d * t_len];
    for t in 0..t_len {
        let mut h = zero_state(layers, d);
        // Window covers 1-based positions (t+1)-M+1 ..= t+1; nonpositive
        // positions feed a zero vector (one step each, literally).
        for s in (t as i64 + 2 - m as i64)..=(t as i64 + 1) {
            let x_s: Vec<f64>;
            let input: &[f64] = if s >= 1 {
                x_s = (0..x.rows()).map(|r| x.at2(r, s as usize - 1)).collect();
                &x_s
            } else {
                &zero_x
            };
            h = vanilla_step(params, &h, input);
        }
        for (j, v) in h[layers - 1].iter().enumerate() {
            out[j * t_len + t] = *v;
        }
    }
    Tensor::new(vec![d, t_len], out).unwrap()
}

/// LSTM counterpart of [`run_truncated`].
pub fn run_truncated_lstm(params: &LstmParams, x: &Tensor, m: usize) -> Tensor {
    assert!(m >= 1, "truncation window must be at least 1");
    let (layers, d, p, t_len) = (params.layers(), params.hidden(), params.input_dim(), x.cols());
    let zero_x = vec![0.0; p];
    let mut out = vec![0.0; d * t_len];
    for t in 0..t_len {
        let mut state = LstmState::zeros(layers, d);
        for s in (t as i64 + 2 - m as i64)..=(t as i64 + 1) {
            let x_s: Vec<f64>;
            let input: &[f64] = if s >= 1 {
                x_s = (0..x.rows()).map(|r| x.at2(r, s as usize - 1)).collect();
                &x_s
            } else {
                &zero_x
            };
            state = lstm_step(params, &state, input);
        }
        for (j, v) in state.h[layers - 1].iter().enumerate() {
            out[j * t_len + t] = *v;
        }
    }
    Tensor::new(vec![d, t_len], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_mat(v: f64) -> Tensor {
        Tensor::new(vec![1, 1], vec![v]).unwrap()
    }

    fn scalar_vec(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    pub(crate) fn random_vanilla(l: usize, d: usize, p: usize, rng: &mut ChaCha8Rng) -> VanillaRnnParams {
        let mut w_hx = Vec::new();
        let mut w_hh = Vec::new();
        for i in 0..l {
            let d_in = if i == 0 { p } else { d };
            w_hx.push(Tensor::from_fn(vec![d, d_in], |_| rng.gen_range(-0.5..0.5)));
            w_hh.push(Tensor::from_fn(vec![d, d], |_| rng.gen_range(-0.5..0.5)));
        }
        VanillaRnnParams { w_hx, w_hh, g: Nonlinearity::Tanh }
    }

    pub(crate) fn random_lstm(l: usize, d: usize, p: usize, rng: &mut ChaCha8Rng) -> LstmParams {
        let layers = (0..l)
            .map(|i| {
                let d_in = if i == 0 { p } else { d };
                let mut mk_w = || Tensor::from_fn(vec![d, d_in], |_| rng.gen_range(-0.5..0.5));
                let w_f = mk_w();
                let w_i = mk_w();
                let w_g = mk_w();
                let w_o = mk_w();
                let mut mk_u = || Tensor::from_fn(vec![d, d], |_| rng.gen_range(-0.5..0.5));
                let u_f = mk_u();
                let u_i = mk_u();
                let u_g = mk_u();
                let u_o = mk_u();
                let zb = || Tensor::zeros(vec![d]);
                LstmLayer {
                    w_f, u_f, b_f: zb(), w_i, u_i, b_i: zb(),
                    w_g, u_g, b_g: zb(), w_o, u_o, b_o: zb(),
                }
            })
            .collect();
        LstmParams { layers }
    }

    #[test]
    fn test_vanilla_step_zero_weights_gives_zero_state() {
        let params = VanillaRnnParams {
            w_hx: vec![Tensor::zeros(vec![2, 3])],
            w_hh: vec![Tensor::zeros(vec![2, 2])],
            g: Nonlinearity::Tanh,
        };
        let h = vanilla_step(&params, &zero_state(1, 2), &[1.0, -2.0, 3.0]);
        assert_eq!(h[0], vec![0.0, 0.0]);
    }

    #[test]
    fn test_vanilla_two_layer_scalar_hand_values() {
        // Frozen from an independent scalar computation:
        //   h1_t = tanh(0.7 x_t - 0.4 h1_{t-1}); h2_t = tanh(1.2 h1_t + 0.3 h2_{t-1})
        let params = VanillaRnnParams {
            w_hx: vec![scalar_mat(0.7), scalar_mat(1.2)],
            w_hh: vec![scalar_mat(-0.4), scalar_mat(0.3)],
            g: Nonlinearity::Tanh,
        };
        let x = Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap();
        let states = run_full_states(&params, &x);
        let expect_h1 = [0.336375544336332, -0.682911697992237];
        let expect_h2 = [0.383068262211406, -0.607262773756221];
        for t in 0..2 {
            assert!((states[0].at2(0, t) - expect_h1[t]).abs() < 1e-14, "h1[{t}]");
            assert!((states[1].at2(0, t) - expect_h2[t]).abs() < 1e-14, "h2[{t}]");
        }
    }

    #[test]
    fn test_lstm_scalar_hand_values() {
        // Frozen from an independent scalar computation of the gate equations.
        let layer = LstmLayer {
            w_f: scalar_mat(0.5), u_f: scalar_mat(-0.3), b_f: scalar_vec(0.1),
            w_i: scalar_mat(0.8), u_i: scalar_mat(0.2), b_i: scalar_vec(-0.2),
            w_g: scalar_mat(1.1), u_g: scalar_mat(-0.7), b_g: scalar_vec(0.05),
            w_o: scalar_mat(0.6), u_o: scalar_mat(0.4), b_o: scalar_vec(-0.1),
        };
        let params = LstmParams { layers: vec![layer] };
        let x = Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap();
        let (hs, cs) = run_full_lstm_states(&params, &x);
        let expect_c = [0.527988077383377, 0.007353977644269];
        let expect_h = [0.301171759361612, 0.003166335432241];
        for t in 0..2 {
            assert!((cs[0].at2(0, t) - expect_c[t]).abs() < 1e-14, "c[{t}] = {}", cs[0].at2(0, t));
            assert!((hs[0].at2(0, t) - expect_h[t]).abs() < 1e-14, "h[{t}] = {}", hs[0].at2(0, t));
        }
    }

    #[test]
    fn test_run_truncated_m1_depends_only_on_current_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = random_vanilla(2, 3, 2, &mut rng);
        let x = Tensor::from_fn(vec![2, 5], |_| rng.gen_range(-1.0..1.0));
        let y = run_truncated(&params, &x, 1);
        // Each column equals a fresh single-step run on that column alone.
        for t in 0..5 {
            let x_t: Vec<f64> = (0..2).map(|r| x.at2(r, t)).collect();
            let h = vanilla_step(&params, &zero_state(2, 3), &x_t);
            for j in 0..3 {
                assert!((y.at2(j, t) - h[1][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn test_run_truncated_window_locality() {
        // Changing x outside the window of t must not change y_t.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = random_vanilla(2, 3, 2, &mut rng);
        let x = Tensor::from_fn(vec![2, 8], |_| rng.gen_range(-1.0..1.0));
        let m = 3;
        let y = run_truncated(&params, &x, m);
        let t_probe = 6; // 0-based; window covers 1-based positions 5..=7
        let mut xp = x.clone();
        xp.data_mut()[3] += 10.0; // channel 0, t=3 (1-based 4): outside window
        let yp = run_truncated(&params, &xp, m);
        for j in 0..3 {
            assert_eq!(y.at2(j, t_probe), yp.at2(j, t_probe), "outside-window change leaked in");
        }
        let mut xq = x.clone();
        xq.data_mut()[5] += 1.0; // channel 0, t=5 (1-based 6): inside window
        let yq = run_truncated(&params, &xq, m);
        assert!((y.at2(0, t_probe) - yq.at2(0, t_probe)).abs() > 1e-12, "inside-window change must matter");
    }

    #[test]
    fn test_run_truncated_with_large_m_equals_run_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for (l, d, p, t_len) in [(1, 2, 1, 6), (2, 3, 2, 5), (3, 2, 2, 7)] {
            let params = random_vanilla(l, d, p, &mut rng);
            let x = Tensor::from_fn(vec![p, t_len], |_| rng.gen_range(-1.0..1.0));
            let full = run_full(&params, &x);
            for m in [t_len, t_len + 1, t_len + 4] {
                let trunc = run_truncated(&params, &x, m);
                let err = max_abs_diff(&full, &trunc);
                assert!(err < 1e-15, "L={l} d={d} M={m}: err {err:.3e}");
            }
        }
    }

    #[test]
    fn test_run_truncated_lstm_with_large_m_equals_run_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let params = random_lstm(2, 3, 2, &mut rng);
        let x = Tensor::from_fn(vec![2, 5], |_| rng.gen_range(-1.0..1.0));
        let full = run_full_lstm(&params, &x);
        let trunc = run_truncated_lstm(&params, &x, 9);
        assert!(max_abs_diff(&full, &trunc) < 1e-15);
    }

    #[test]
    fn test_truncation_cuts_long_range_dependence() {
        // With M « T, early inputs must not influence late outputs, while the
        // full run does carry that influence (generically).
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let params = random_vanilla(1, 3, 1, &mut rng);
        let x = Tensor::from_fn(vec![1, 10], |_| rng.gen_range(-1.0..1.0));
        let mut xp = x.clone();
        xp.data_mut()[0] = 5.0;
        let (y, yp) = (run_truncated(&params, &x, 2), run_truncated(&params, &xp, 2));
        for t in 2..10 {
            for j in 0..3 {
                assert_eq!(y.at2(j, t), yp.at2(j, t));
            }
        }
        let (f, fp) = (run_full(&params, &x), run_full(&params, &xp));
        assert!(max_abs_diff(&f, &fp) > 1e-9, "full run should feel the early change");
    }

    #[test]
    fn test_sigmoid_nonlinearity_step() {
        let params = VanillaRnnParams {
            w_hx: vec![scalar_mat(1.0)],
            w_hh: vec![scalar_mat(0.0)],
            g: Nonlinearity::Sigmoid,
        };
        let h = vanilla_step(&params, &zero_state(1, 1), &[0.0]);
        assert_eq!(h[0][0], 0.5, "sigmoid(0) = 0.5");
    }
}
