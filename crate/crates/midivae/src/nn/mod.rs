//! A small reverse-mode autodiff engine over `f64` matrices, the transformer
//! building blocks assembled from it, and the Adam optimizer.
//!
//! Everything runs in double precision on the CPU with a fixed evaluation
//! order, so repeated runs are bit-identical and analytic gradients can be
//! validated against central finite differences at tight tolerances.

pub mod adam;
pub mod graph;
pub mod layers;
pub mod params;

pub use adam::Adam;
pub use graph::{Graph, Mat, NodeId};
pub use params::{ParamSet, ParamGrads};
