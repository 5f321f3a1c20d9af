//! Guided-diffusion augmentation lab on small synthetic images.

pub mod cli;
pub mod contour;
pub mod diffusion;
pub mod guidance;
pub mod harness;
pub mod models;
pub mod synthbench;
pub mod tensor;
