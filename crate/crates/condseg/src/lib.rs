//! Metadata-conditioned channel modulation for semantic segmentation.
//!
//! A self-contained micro-framework built around one idea: feeding
//! acquisition metadata (a one-hot category, a normalized scalar) into
//! the channel-gating bottleneck of a small U-Net, so that one network
//! can adapt its segmentation behaviour to the domain, annotation style,
//! task, or expected object size the metadata describes.
//!
//! The crate contains everything needed to study that mechanism on a CPU:
//!
//! - [`tensor`] / [`tape`] / [`ops`]: a dense tensor type with
//!   reverse-mode automatic differentiation and the op set a conditioned
//!   U-Net needs (`f32` for training, `f64` for gradient checks);
//! - [`conditioning`]: the four interchangeable conditioning blocks —
//!   SE (gate from pooled features), ME (gate from metadata only),
//!   SME (gate from both, concatenated), and FiLM (per-channel affine);
//! - [`unet`]: an encoder–decoder segmentation network with one
//!   conditioning block per stage;
//! - [`metadata`]: declarative schema turning records into fixed-length
//!   vectors, with dummy (all-zeros) and label-swap transforms;
//! - [`synth`]: deterministic synthetic dataset generators for four
//!   benchmark families (visual domains, annotation styles, multitask
//!   switching, continuous size conditioning), including polyline
//!   simplification and mask polygonization;
//! - [`training`]: Adam with a triangular cyclic learning-rate schedule,
//!   best-by-validation checkpointing, byte-reproducible given a seed;
//! - [`eval`] / [`experiment`]: per-subset F1 evaluation under
//!   correct/dummy/swapped metadata and the preset experiment grids with
//!   aggregate reporting.
//!
//! Runnable walkthroughs live in `examples/`; the `condseg` binary wraps
//! generation, training, evaluation and reporting for the command line.

pub mod conditioning;
pub mod container;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod grad_check;
pub mod init;
pub mod metadata;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
