//! Physical-layer chain: serialization, rate-1/2 convolutional coding with
//! Viterbi decoding, Gray-mapped 16-QAM and an AWGN channel.
//!
//! Bits are carried as `u8` values `0`/`1`. Soft metrics are log-likelihood
//! ratios with the convention `llr = ln P(b=0) / P(b=1)`, so a positive value
//! favours a zero bit.

mod bits;
mod channel;
mod conv;
mod link;
mod qam;

pub use bits::{
    ascii_decode, ascii_encode, deserialize_latent, pack_bits, serialize_latent, unpack_bits,
    BITS_PER_CHAR, BITS_PER_COEFFICIENT,
};
pub use channel::{awgn, mean_power, AwgnChannel, ChannelConfig, LinkModel};
pub use conv::{
    coded_len, conv_encode, info_len, viterbi_decode, viterbi_decode_hard, CONSTRAINT_LENGTH,
    GENERATORS, TAIL_BITS,
};
pub use link::{
    ber_point, bit_error_rate, decode_symbols, encode_bits, BerPoint, CodedFrame, PayloadBits,
};
pub use qam::{hard_bits, qam16_demod, qam16_mod, qam16_pad_bits, Demod, QAM16_SCALE};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhyError {
    #[error("coefficient {index} is not finite")]
    NonFinite { index: usize },
    #[error("bit stream has {found} bits, {expected} expected")]
    Length { expected: usize, found: usize },
    #[error("bit stream length {0} is not a multiple of 8")]
    ByteAlignment(usize),
    #[error("coded frame length {0} is not a valid terminated rate-1/2 codeword")]
    MalformedFrame(usize),
    #[error("soft demodulation needs a positive finite noise variance, got {0}")]
    NoiseVariance(f64),
    #[error("channel SNR must be finite, got {0} dB")]
    Snr(f64),
    #[error("symbol {index} is not finite")]
    NonFiniteSymbol { index: usize },
    #[error("pad of {pad} bits exceeds frame of {bits} bits")]
    Padding { pad: usize, bits: usize },
}
