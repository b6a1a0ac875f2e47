//! Small reverse-mode autodiff engine for mixed planar/volumetric CNNs.
//!
//! All tensors carry the axis order `(batch, channels, H, W, D)`; planar
//! feature maps use `D = 1`, so a 2D convolution is a 3D convolution with a
//! `k×k×1` kernel.

mod conv;
mod element;
mod graph;
pub mod kernels;
mod tensor;

pub use conv::{conv_backward, conv_forward, ConvGeometry};
pub use element::Element;
pub use graph::{Grads, Graph, Param, ParamId, ParamStore, Var};
pub use tensor::{numel, Shape, ShapeError, Tensor};
