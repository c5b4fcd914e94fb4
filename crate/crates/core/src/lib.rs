//! Signal enhancement for noisy 2-D particle images.
//!
//! The pipeline expands preprocessed images in a steerable basis, picks random
//! seed images, gathers their rotation/reflection-invariant nearest neighbors,
//! grades every class by the spectrum of its dihedral synchronization matrix,
//! prunes weak classes and inconsistent members, and finally runs one
//! expectation-maximization alignment per class to produce a high-SNR average.
//!
//! Module map:
//!
//! * [`formats`]: MRC/MRCS stacks and STAR CTF metadata.
//! * [`preprocess`]: CTF phase flipping, noise whitening, Fourier downsampling.
//! * [`spca`]: Fourier-Bessel basis, steerable PCA, steering and reflection.
//! * [`neighbors`]: invariant correlation and batched nearest-neighbor search.
//! * [`sync`]: synchronization matrices, class and member grades, reflection sync.
//! * [`em`]: per-class EM over rotations and translations.
//! * [`evalgen`]: synthetic data and quality metrics.
//! * [`pipeline`]: configuration, checkpoints, stage orchestration.

pub mod bessel;
pub mod eigen;
pub mod em;
mod error;
pub mod evalgen;
pub mod fft;
pub mod formats;
pub mod image;
pub mod neighbors;
pub mod pipeline;
pub mod preprocess;
pub mod spca;
pub mod sync;
pub mod transform;

pub use error::{Error, Result};
pub use image::Image;
