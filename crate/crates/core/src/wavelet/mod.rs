//! Orthonormal 2-D wavelet transforms, pyramids and wavelet-domain convolution.

pub mod family;
pub mod pyramid;
pub mod transform;
pub mod wtc;

pub use family::{family, registry, Daubechies2, Haar, WaveletFamily};
pub use pyramid::{pyramid_vars, Details, WaveletPyramid};
pub use transform::{
    dwt2, dwt2_packed, dwt2_var, idwt2, idwt2_packed, idwt2_var, pad_reflect, Band, Subbands,
};
pub use wtc::{wcg_block, wtc_apply, wtc_apply_kernel, WTCKernel, WcgWeights};

#[cfg(test)]
mod tests;
