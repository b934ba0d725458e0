//! Desk-scale tri-plane radiance field engine.
//!
//! The crate lifts images into tri-plane radiance fields, disentangles
//! appearance from expression through additive tri-plane residuals, renders
//! views by volumetric ray marching, and schedules multi-view sweeps for
//! holographic quilt output. Everything runs on CPU in 32-bit floats on top
//! of a small reverse-mode autodiff core; ground truth comes from an
//! analytic Gaussian-blob scene family rather than pretrained face networks.
//!
//! Module map:
//! - [`tensor`]: dense tensors, the gradient tape, optimizer, checkpoints.
//! - [`triplane`]: the three-plane representation, sampling, asset files.
//! - [`camera`]: poses, intrinsics, ray generation, yaw sweeps.
//! - [`renderer`]: ray marching, compositing, the decoder MLP, upsampler.
//! - [`nets`]: the learned encoders, expression head, embedder, critic.
//! - [`synth`]: blob-world scenes, analytic rendering, tri-plane baking.
//! - [`pipeline`]: reenactment, losses, augmentation, training stages.
//! - [`holo`]: parallel view sweeps and quilt assembly.

pub mod camera;
pub mod cli;
pub mod holo;
pub mod img;
pub mod nets;
pub mod par;
pub mod pipeline;
pub mod renderer;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod triplane;

pub use tensor::{Tape, Tensor, TensorError, TensorId};
