//! Diagonal state space models: time-invariant systems with recurrent,
//! convolutional and chunked execution, and input-selective (S6) scans.

mod layer;
mod lti;
mod selective;

pub use layer::{selective_scan_graph, SelectiveSsm};
pub use lti::{
    discretize_zoh, lti_kernel, lti_scan, lti_scan_chunked, lti_scan_convolutional, lti_scan_recurrent,
    zoh_coefficients, DiscreteSystem, LtiSystem, ScanMode, SsmKernel, ZOH_LIMIT,
};
pub use selective::{
    inverse_softplus, selective_scan, selective_scan_chunked, selective_scan_counted, selective_scan_with_mode,
    OpCounter, SelectiveParams,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SsmError {
    #[error("empty input sequence")]
    EmptySequence,
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("state matrix entry {index} is {value}; a stable system needs A < 0")]
    Unstable { index: usize, value: f64 },
    #[error("{what}: expected length {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("chunk length must be at least 1")]
    ZeroChunk,
    #[error("state dimension must be at least 1")]
    ZeroState,
    #[error("convolutional mode needs a time-invariant system")]
    ConvolutionalSelective,
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), SsmError> {
    if expected != got {
        return Err(SsmError::Length { what, expected, got });
    }
    Ok(())
}
