//! Inference engine and kernel library for mask- and motion-aware local
//! motion deblurring with pixel-level pruning.
//!
//! Pipeline: a mask predictor marks blurred pixels, a motion analyzer
//! estimates each pixel's exposure-time trajectory, and every block runs its
//! 3×3 convolutions only on the marked pixels (gather, reparameterized 1×1
//! GEMM, scatter) while a deformable convolution samples along the
//! trajectory. [`ledger`] counts the multiply-accumulates to show the
//! `Q/(H·W)` saving.

pub mod conv;
pub mod deform;
pub mod error;
pub mod image;
pub mod ledger;
pub mod losses;
pub mod mask;
pub mod motion;
pub mod network;
pub mod ops;
pub mod pruned;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
