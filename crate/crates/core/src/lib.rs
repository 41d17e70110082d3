//! Bidirectional Mamba U-Net for single-channel speaker separation.
//!
//! The crate is layered bottom-up: [`numerics`] (tensors and autodiff),
//! [`ssm`] (selective scan), [`mamba`] (blocks and bidirectional stacks),
//! [`separator`] (the U-Net, streaming, checkpoints, compute accounting),
//! [`objective`], [`data`], [`train`], [`bench`] and [`verify`].

pub mod bench;
pub mod data;
pub mod error;
pub mod init;
pub mod mamba;
pub mod numerics;
pub mod objective;
pub mod separator;
pub mod ssm;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
