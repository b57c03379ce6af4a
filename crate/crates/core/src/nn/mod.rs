//! Dense tensors with reverse-mode differentiation and the layers the
//! segmentation network is built from.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod linalg;
pub mod lstm;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use lstm::LstmVars;
pub use ops::{BnLayout, BnMode, BnStats};
pub use params::{Ctx, Kind, Mode, Params};
pub use tape::{Backprop, Gradients, Tape, Var};
pub use tensor::Tensor;
