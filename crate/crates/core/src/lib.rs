//! Equivariant two-step pose estimation for pairwise object assembly.
//!
//! Object B (the receiving part) is posed first from its own point cloud;
//! object A (the fitting part) is then posed from its cloud fused with a
//! rotation-invariant descriptor of B in canonical pose. Both branches use a
//! two-scale vector-neuron edge-convolution encoder built on the small
//! reverse-mode autodiff engine in [`tensor`].

pub mod data;
pub mod geometry;
pub mod model;
pub mod tensor;
pub mod train;
pub mod vn;

pub use geometry::{Mat3, PointCloud, RigidTransform, SymmetryGroup, Vec3};
pub use model::{Branch, EncoderConfig, EncoderKind, ModelParams, PosePrediction};
pub use tensor::{Tape, Tensor, Var};
