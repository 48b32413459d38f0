//! Multi-frame image deturbulence through circular quasi-conformal optimization.
//!
//! The toolkit estimates one homeomorphic deformation field per distorted
//! frame, warps the frames into geometric agreement, fuses and deblurs them
//! into a single restored image, and validates the estimate by re-distorting
//! the restoration through the inverse maps. Deformations are kept bijective
//! by penalizing their Beltrami coefficients; frames are presented to the
//! fusion network as undecimated tight-frame subbands.
//!
//! Modules:
//! - [`imaging`]: image containers, bilinear warping, PSNR/SSIM.
//! - [`field`]: dense displacement fields and their binary file format.
//! - [`tightframe`]: UEP filter bank, multi-level decomposition, exact
//!   reconstruction.
//! - [`quasiconformal`]: Beltrami coefficients, the BC regularizer, fixed
//!   point map inversion, bijectivity diagnostics.
//! - [`simulator`]: synthetic turbulence sequences with ground-truth fields.
//! - [`restoration`]: the alternating optimizer tying everything together.

pub mod error;
pub mod field;
pub mod imaging;
pub mod io;
pub mod parallel;
pub mod quasiconformal;
pub mod restoration;
pub mod simulator;
pub mod tightframe;

pub use error::{CqcdError, Result};
pub use field::DisplacementField;
pub use imaging::{FrameSequence, Image};
