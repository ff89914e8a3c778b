pub mod bitstream;
pub mod quant;
pub mod range_coder;
