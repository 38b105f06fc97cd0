//! Label enhancement and automatic annotation for binary segmentation.
//!
//! The crate is organised bottom-up:
//!
//! * [`ndarr`] – tensors, a reverse-mode tape and a finite-difference checker.
//! * [`maskio`] – masks, images, manifests and segmentation metrics.
//! * [`perturb`] – the three test-time perturbations and their exact inverses.
//! * [`lqe`] – the label quality evaluator.
//! * [`model`] – frozen backbone with adapters, receptive field blocks and an
//!   edge-attention decoder with three supervised heads.
//! * [`train`] – losses, Adam, fine-tuning, backbone pretraining, checkpoints.
//! * [`pipeline`] – the iterative generate / filter / refine loop.
//! * [`synth`] – the synthetic speckled benchmark and the evaluation protocol.

pub mod error;
pub mod gradsuite;
pub mod lqe;
pub mod maskio;
pub mod model;
pub mod ndarr;
pub mod perturb;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use ndarr::{Graph, Scalar, Tensor, TensorError, Var};
