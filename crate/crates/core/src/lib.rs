pub mod autodiff;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod losses;
pub mod meta;
pub mod networks;
pub mod nn;
pub mod scalar;
pub mod stream;
pub mod twosample;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type ParamStore = autodiff::ParamStore<f64>;
pub type KernelParams = kernels::KernelParams<f64>;
