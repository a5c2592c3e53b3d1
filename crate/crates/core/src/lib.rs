//! Controllable video diffusion with a frozen block-structured denoiser and a
//! lightweight parallel control adapter fused through sparse residuals.
//!
//! Everything in this crate is pure computation over `alloc` containers so it
//! builds without `std`. File formats, configuration and the command line live
//! in the companion `vctrl` crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod adapter;
pub mod base;
pub mod codec;
pub mod control;
pub mod diffusion;
pub mod error;
pub mod extract;
mod math;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use adapter::{
    adaptive_avg_pool, control_indices, AdapterConfig, ControlledModel, Layout, NetworkSpec,
    SizeRatio, VCtrlParams,
};
pub use base::{BaseConfig, BaseModel, BaseParams, Tap};
pub use codec::{decode, encode, LatentTensor, PatchSpec, VideoTensor};
pub use control::{
    build_task_mask, clip_control, encode_control, record_control, ControlBundle, ControlKind,
    ControlVideo, TaskMask,
};
pub use diffusion::{add_noise, eps_loss, make_schedule, sample, Denoiser, NoiseSchedule};
pub use error::{Error, Result};
pub use params::ParamSet;
pub use tensor::{BinaryVideo, Tensor, TokenMap};
