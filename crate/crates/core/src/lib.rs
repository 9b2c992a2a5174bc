//! LiDAR pose regression with dual-branch feature extraction and
//! Euclidean/hyperbolic feature fusion, trained end-to-end on a synthetic
//! spinning-LiDAR dataset generated by this crate.
//!
//! The numeric core (tensors, reverse-mode autodiff, Poincaré-ball operators,
//! quaternion machinery) is generic over the scalar type via [`Scalar`];
//! the training pipeline and all file formats use the `f64` aliases exported
//! at the crate root.

pub mod checkpoint;
pub mod config;
pub mod encoder2d;
pub mod encoder3d;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod hyperbolic;
pub mod model;
pub mod optim;
pub mod params;
pub mod pose;
pub mod projection;
pub mod scanio;
pub mod synth;
pub mod tape;
pub mod tensor;

mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::Var;

/// Dense double-precision tensor, the default numeric currency.
pub type Tensor = tensor::TensorBase<f64>;
/// Double-precision autodiff tape.
pub type Tape = tape::Tape<f64>;
/// Double-precision Poincaré-ball configuration.
pub type BallConfig = hyperbolic::BallConfig<f64>;
/// Double-precision rigid pose.
pub type PoseSE3 = pose::PoseSE3<f64>;
/// Double-precision log-quaternion.
pub type LogQuat = pose::LogQuat<f64>;
/// Double-precision LiDAR scan.
pub type LidarScan = projection::LidarScan<f64>;
/// Double-precision range image.
pub type RangeImage = projection::RangeImage<f64>;
/// Double-precision bird's-eye-view image.
pub type BevImage = projection::BevImage<f64>;
/// Double-precision parameter store.
pub type ParamStore = params::ParamStore<f64>;
/// Double-precision forward-pass graph.
pub type Graph<'a> = params::Graph<'a, f64>;
/// Double-precision Adam optimizer.
pub type Adam = optim::Adam<f64>;
