//! Desk-scale tri-plane radiance pipeline: fit tri-plane fields to multi-view
//! renders of procedural subjects, train a latent-conditioned diffusion model
//! plus a cascaded upsampler over the rolled-out planes, then sample, invert
//! and render. Everything runs on a small CPU tensor core with reverse-mode
//! autodiff; no GPU or external ML runtime.

pub mod numerics;
pub mod triplane;
pub mod radiance;
pub mod optim;
pub mod fitting;
pub mod denoiser;
pub mod diffusion;
pub mod pipeline;
