//! State-space sequence kernels and the bidirectional Mamba layer.

mod layer;
mod scan;
mod selective;

pub use layer::{Direction, MambaLayer, CONV_KERNEL};
pub use scan::{
    discretize_zoh, phi, phi_prime, scan_convolutional, scan_recurrent, ssm_kernel, zoh,
    SERIES_THRESHOLD,
};
pub use selective::{inverse_softplus, selective_scan, SsmParams};
