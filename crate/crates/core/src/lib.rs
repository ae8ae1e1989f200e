//! Kernels of an attention-guided salient object detection network.
//!
//! * [`grid`]: dense maps, integral-image box filter, convolutions, resampling.
//! * [`spectral`]: 2-D FFT, ideal high-pass and masked edge attention.
//! * [`attention`]: union attention, object attention and the dilated
//!   receptive-field block.
//! * [`loss`]: adaptive pixel intensity weights and the weighted
//!   BCE / IoU / L1 losses with analytic gradients.
//! * [`metrics`]: MAE, F-measure sweep and S-measure.
//! * [`nettoy`]: a seeded toy-scale network wiring all of the above.
//! * [`pgm`]: binary 8-bit PGM reading and writing.

pub mod attention;
pub mod error;
pub mod grid;
pub mod loss;
pub mod metrics;
pub mod nettoy;
pub mod pgm;
pub mod spectral;

pub use error::{Error, Result};
pub use grid::{ConvParams, FeatureMap, Grid2D, Matrix};
