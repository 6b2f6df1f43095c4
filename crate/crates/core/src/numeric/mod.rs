//! Differentiable tensor arithmetic, AdamW, EMA and schedules.

pub mod bundle;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{ema_update, wsd_lr, AdamWConfig, AdamWState, LrSchedule, WarmupCosine, WsdSchedule};
pub use tape::{Bound, Gradients, ParamSet, Tape, Var};
pub use tensor::{soft_cross_entropy, Tensor};
