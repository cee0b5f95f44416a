//! Longitudinal MS-lesion segmentation toolkit.
//!
//! * [`volumes`]: volume/slice data model and I/O
//! * [`synthgen`]: deterministic synthetic longitudinal phantoms
//! * [`nets`]: FC-DenseNet (Tiramisu) static, early-fusion, multitask and siamese variants
//! * [`warp`]: differentiable 2D bilinear warping
//! * [`losses`]: segmentation, registration and multitask objectives
//! * [`trainer`]: slice sampling, AMSGrad optimization, checkpoints
//! * [`infer`]: 2.5D inference with three-view probability fusion
//! * [`metrics`]: DSC, PPV, VD, LTPR, LFPR and the overall score

pub mod gradcheck;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod synthgen;
pub mod trainer;
pub mod volumes;
pub mod warp;
