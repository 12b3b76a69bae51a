mod conv;
mod elementwise;
pub mod gather;
mod loss;
pub mod norm;
pub(crate) mod reduce;
pub(crate) mod shape;
mod resample;
