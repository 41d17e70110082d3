//! The separation U-Net: configuration, forward pass, streaming inference,
//! checkpoints and compute accounting.

pub mod checkpoint;
mod config;
pub mod counts;
mod net;
mod stream;

pub use checkpoint::Checkpoint;
pub use config::{KeyDoc, SeparatorConfig, MODEL_KEYS};
pub use counts::{
    calibrate, count_macs, count_params, estimate_peak_memory, gmac_per_second, lookahead, Calibration,
    CalibrationRow, Tracer,
};
pub use net::{ConvParams, Separator, SeparatorModel};
pub use stream::{StreamState, UpState};
