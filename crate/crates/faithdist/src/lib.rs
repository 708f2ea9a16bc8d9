//! Teacher-student distillation with empirical and verified bounds on the
//! maximum confidence discrepancy over an l-infinity input ball.
//!
//! The crate trains fully-connected ReLU teacher/student pairs with four
//! distillation losses, attacks the pair with PGD to obtain empirical lower
//! bounds on the worst-case confidence gap, and certifies upper bounds via
//! backward linear relaxation plus analytic softmax bounding.

pub mod attacks;
pub mod autodiff;
pub mod bounds;
pub mod data;
pub mod distillation;
pub mod error;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use network::{ArchPreset, FeedForwardNetwork, Layer, TeacherStudentPair};
pub use tensor::Tensor;
