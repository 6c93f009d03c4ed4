//! Library surface of the `batclip` benchmark harness: configuration
//! parsing and the five command implementations. The binary in `main.rs`
//! is a thin argument-parsing shell over these.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_adapt, cmd_corrupt, cmd_gradcheck, cmd_pretrain, cmd_zeroshot, read_image_archive,
    THREADS_ENV,
};
pub use config::{DatasetConfig, ExperimentConfig, PretrainSection};
