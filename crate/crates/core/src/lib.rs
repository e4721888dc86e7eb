#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod pose;
pub mod raster;
pub mod segment;
pub mod synth;
pub mod warp;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, RigidPose};
pub use mask::{BinaryMask, Instance, InstanceId, InstanceMaskSet};
pub use raster::{Raster, ValidityMask};
