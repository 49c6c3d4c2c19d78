//! Leader-follower formation navigation with a diffusion policy: rigidity
//! tools, the kinematic world, classical controllers, a DDPM noise schedule,
//! a from-scratch temporal U-Net, the receding-horizon policy and the
//! dataset/evaluation pipeline.

pub mod config;
pub mod controllers;
pub mod data;
pub mod ddpm;
pub mod error;
pub mod graph;
pub mod nn;
pub mod policy;
pub mod world;

pub use error::{Error, Result};
