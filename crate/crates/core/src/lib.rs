//! LSTM training and gradient-verification toolkit built around stochastic
//! hidden-state gradient detaching ("h-detach").
//!
//! * [`numerics`]: vectors, matrices, activations, seeded RNG.
//! * [`lstm`]: parameters, roll-out step, masked sequence forward.
//! * [`backprop`]: exact BPTT under detach masks and forward-mode oracles.
//! * [`paths`]: the cell-path / hidden-path decomposition of `d(c_t, h_t)/dw`.
//! * [`tasks`]: copying task, MNIST IDX loading, permutations.
//! * [`optim`]: ADAM and global-norm clipping.
//! * [`checkpoint`]: portable parameter files.

pub mod backprop;
pub mod checkpoint;
pub mod dual;
pub mod lstm;
pub mod numerics;
pub mod optim;
pub mod paths;
pub mod tasks;

pub use backprop::{bptt, LossGrads, ParamGrads};
pub use lstm::{DetachMask, LstmParams, LstmState, StepCache};
pub use numerics::{Matrix, Rng, Vector};
