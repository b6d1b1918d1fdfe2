//! Dense tensors, reverse-mode autodiff, SGD and deterministic randomness.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod real;
mod rng;
mod tensor;

pub use graph::{log_sum_exp_split, softmax_in_place, Graph, Var};
pub use optim::{cosine_anneal_lr, sgd_momentum_step, OptimState};
pub use params::{ParamId, ParamStore, Parameter};
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;
