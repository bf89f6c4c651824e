//! Desk-scale continual-learning engine built on a wake/sleep loop: running
//! class-mean classifier updates while awake, product-quantized latent replay
//! with compute-budgeted gradient consolidation while asleep, plus the
//! experiment harness, metrics, and significance tests around it.

pub mod error;
pub mod head;
pub mod nn;
pub mod pq;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use head::{CosineHead, HeadGrads, SoftLabel};
pub use nn::optim::{onecycle_lr, LrSchedule, OneCycleConfig, OptimizerState, SgdConfig};
pub use nn::{LayerKind, LayerSpec, Network, NetworkGrads};
pub use pq::{EncodedTensor, PqCodec, PqConfig};
pub use tensor::LatentTensor;
