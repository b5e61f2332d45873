//! Pipeline library behind the `ovtad` binary: dataset IO, synthetic data,
//! training, detection, and evaluation commands.

pub mod cli;
pub mod config;
pub mod data;
pub mod detect;
pub mod evalcmd;
pub mod formats;
pub mod synth;
pub mod train;
