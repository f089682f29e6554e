#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod dataset;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod palette;
pub mod params;
pub mod superres;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
