//! Tensors, a higher-order reverse-mode engine, and the two network
//! families used by the pipeline (dense backbone and LSTM stacks).

mod graph;
mod nn;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use nn::{
    backbone_logits, cross_entropy, cross_entropy_sum, forward_backbone, glorot, grad, grad_through_update,
    lstm_forward, lstm_graph, mse, mse_graph, one_hot, BackboneSpec, LstmGraphOutput, LstmOutput, LstmSpec,
    MetaGradMode, MetaGradient, PROB_FLOOR,
};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState};
pub use params::{NamedTensor, ParamSet};
pub use tensor::Tensor;
