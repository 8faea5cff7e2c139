//! Forward and backward kernels on raw slices. The graph layer owns shape
//! validation and bookkeeping; these functions assume consistent inputs.

pub mod conv;
pub mod dense;
pub mod norm;
pub mod pool;
