//! Model parameters, network graph builders, and optimization.

pub mod net;
pub mod optim;
pub mod params;

pub use net::{init_decoder_params, init_encoder_params, ModelDims, NetBuilder};
pub use optim::{lr_at, phase_steps, Adam};
pub use params::ParamStore;
