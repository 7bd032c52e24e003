//! Class activation mapping for small convolutional networks.
//!
//! The crate carries its own inference and reverse-mode gradient engine
//! ([`net`]), a portable model format ([`model_io`]), the CAM methods
//! ([`cam`]) including multi-layer Combi-CAM, rendering helpers
//! ([`render`]), and a synthetic localization benchmark ([`bench`]).

pub mod bench;
pub mod cam;
pub mod error;
pub mod model_io;
pub mod net;
pub mod render;
pub mod tensor;

pub use error::{Error, Result};
pub use net::{ActivationRecord, ClassScore, Network, NetworkSpec};
pub use tensor::Tensor;
