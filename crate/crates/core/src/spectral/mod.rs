//! Frequency-domain preprocessing: DCT, band-pass mask, DII/SPI generation.

pub mod dct;
pub mod mask;
pub mod stream;

pub use dct::{dct2, idct2};
pub use mask::{build_mask, BandPassMask, MaskParams};
pub use stream::{derive_seed, extract_dii, make_spi, make_spi_with_noise, stream_apply, StreamOutput};
