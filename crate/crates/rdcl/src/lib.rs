pub use ndarray;

pub mod analysis;
pub mod checkpoint;
pub mod codec;
pub mod context;
pub mod entropy;
pub mod rate_control;
pub mod eval;
pub mod image_io;
pub mod model;
pub mod nn;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod transforms;
