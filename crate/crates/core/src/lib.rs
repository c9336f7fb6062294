//! Jacobian saliency maps from deformable registration, and training of small
//! 3D classifiers with a Jacobian-augmented input-gradient penalty.

pub mod error;
pub mod volume;

pub use error::{Error, Result};
pub mod register;
pub mod jsm;
pub mod diffnet;
pub mod jal;
pub mod synthdata;
pub mod harness;
