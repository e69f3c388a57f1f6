mod conv;
mod elementwise;
mod fourier;
mod matmul;
mod nn;
mod reduce;
pub(crate) mod shape;
