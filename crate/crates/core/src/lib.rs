pub mod cracker;
pub mod distinguisher;
pub mod dtype;
pub mod fingerprint;
pub mod param_store;
pub mod softlock;
pub mod tinynet;
pub mod transform;
mod wire;

pub use dtype::{Dtype, MiniFloat};
pub use fingerprint::{Fingerprint, Key, Method};
pub use param_store::{ParamStore, ParamTensor, Schema, StoreError, TensorSpec};
pub use wire::sha256;
