//! Trellis networks for sequence modeling, built from scratch on a small
//! reverse-mode autodiff engine.
//!
//! A trellis network is a temporal convolutional network whose weights are
//! tied across both time and depth and whose input is re-injected at every
//! layer. With a particular sparse kernel structure it computes exactly the
//! same function as a truncated multi-layer RNN or LSTM; [`equivalence`]
//! constructs that embedding and checks it numerically against [`rnn`].
//!
//! Module map:
//! - [`tensor`]: f64 tensors, a Wengert-list tape, primitive ops, backprop,
//!   and finite-difference gradients.
//! - [`trellis`]: the trellis network itself (injection precompute, gated
//!   activation, layer/network forward, history repackaging, weight norm).
//! - [`rnn`]: ground-truth vanilla RNN / LSTM references, full and truncated.
//! - [`equivalence`]: sparse-kernel embeddings of RNNs into trellis form plus
//!   numerical verification utilities.
//! - [`training`]: losses, regularizers, optimizers, and the training loop.
//! - [`data`]: desk-scale tasks (copy memory, char-level LM, pixel sequences).

pub mod data;
pub mod equivalence;
pub mod rnn;
pub mod tensor;
pub mod training;
pub mod trellis;
