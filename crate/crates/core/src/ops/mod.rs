//! Raw numeric kernels over dense f32 buffers.
//!
//! Everything here is a pure function of slices plus explicit shapes; the
//! autodiff tape composes these into differentiable ops. Reductions
//! accumulate in f64 and round once on store. Kernels that loop over large
//! outputs split the work per batch/channel region through
//! [`crate::parallel::for_each_chunk`], which keeps results independent of
//! thread count.

pub mod act;
pub mod conv;
pub mod norm;
pub mod shape;
pub mod shift;

pub use conv::{ConvSpec, Dim5};
