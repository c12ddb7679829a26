//! Dense linear algebra, Fourier transform, singular values and the PRNG
//! that the rest of the crate builds on.

mod fourier;
mod rng;
mod svd;
mod tensor;

pub(crate) use fourier::transform;
pub use fourier::{dft, dft_magnitudes, dft_naive};
pub use rng::{mix64, Rng};
pub use svd::singular_values;
pub use tensor::{dot, matmul_backward, matmul_into, Tensor};
