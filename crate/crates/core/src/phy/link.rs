use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    conv_encode, hard_bits, info_len, qam16_demod, qam16_mod, qam16_pad_bits, viterbi_decode,
    AwgnChannel, ChannelConfig, Demod, PhyError, TAIL_BITS,
};

/// Bit accounting of one coded frame. Rate figures use `coded_payload`,
/// which excludes the termination tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PayloadBits {
    pub info: usize,
    pub coded_payload: usize,
    pub tail: usize,
}

impl PayloadBits {
    pub fn for_info(info: usize) -> Self {
        Self {
            info,
            coded_payload: 2 * info,
            tail: TAIL_BITS,
        }
    }

    pub fn coded_total(&self) -> usize {
        self.coded_payload + self.tail
    }
}

impl std::ops::AddAssign for PayloadBits {
    fn add_assign(&mut self, rhs: Self) {
        self.info += rhs.info;
        self.coded_payload += rhs.coded_payload;
        self.tail += rhs.tail;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodedFrame {
    pub symbols: Vec<Complex64>,
    /// Zero bits appended after the codeword to fill the last symbol.
    pub pad_bits: usize,
    pub bits: PayloadBits,
}

/// Channel-codes and modulates an info bit stream.
pub fn encode_bits(info: &[u8]) -> CodedFrame {
    let coded = conv_encode(info);
    let pad_bits = qam16_pad_bits(coded.len());
    CodedFrame {
        symbols: qam16_mod(&coded),
        pad_bits,
        bits: PayloadBits::for_info(info.len()),
    }
}

/// Demodulates, strips padding and Viterbi-decodes back to info bits.
pub fn decode_symbols(
    symbols: &[Complex64],
    pad_bits: usize,
    mode: Demod,
) -> Result<Vec<u8>, PhyError> {
    let mut llrs = qam16_demod(symbols, mode)?;
    if pad_bits > llrs.len() {
        return Err(PhyError::Padding {
            pad: pad_bits,
            bits: llrs.len(),
        });
    }
    llrs.truncate(llrs.len() - pad_bits);
    info_len(llrs.len())?;
    viterbi_decode(&llrs)
}

pub fn bit_error_rate(sent: &[u8], received: &[u8]) -> f64 {
    assert_eq!(sent.len(), received.len());
    if sent.is_empty() {
        return 0.0;
    }
    let errors = sent.iter().zip(received).filter(|(a, b)| a != b).count();
    errors as f64 / sent.len() as f64
}

/// Measured error rates at one SNR, all over the same noise realisation
/// family (same seed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BerPoint {
    pub snr_db: f64,
    pub info_bits: usize,
    pub uncoded: f64,
    pub coded_hard: f64,
    pub coded_soft: f64,
}

/// Monte-Carlo BER of uncoded 16-QAM and of the coded chain with hard and soft
/// Viterbi decoding.
pub fn ber_point(snr_db: f64, info_bits: usize, seed: u64) -> Result<BerPoint, PhyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let info: Vec<u8> = (0..info_bits).map(|_| rng.random_range(0..2u8)).collect();
    let config = ChannelConfig::new(snr_db, seed.wrapping_add(1))?;
    let mut channel = AwgnChannel::new(config)?;
    let noise_var = config.noise_variance();

    let mut raw = qam16_mod(&info);
    channel.add_noise(&mut raw);
    let mut raw_bits = hard_bits(&qam16_demod(&raw, Demod::Hard)?);
    raw_bits.truncate(info_bits);

    let mut frame = encode_bits(&info);
    channel.add_noise(&mut frame.symbols);
    let soft = decode_symbols(&frame.symbols, frame.pad_bits, Demod::Soft { noise_var })?;
    let hard = decode_symbols(&frame.symbols, frame.pad_bits, Demod::Hard)?;

    Ok(BerPoint {
        snr_db,
        info_bits,
        uncoded: bit_error_rate(&info, &raw_bits),
        coded_hard: bit_error_rate(&info, &hard),
        coded_soft: bit_error_rate(&info, &soft),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phy::{deserialize_latent, serialize_latent};

    #[test]
    fn one_request_payload() {
        // 16 blocks of 4x4x4 coefficients
        let info = serialize_latent(&vec![0.25; 16 * 64]).unwrap();
        let frame = encode_bits(&info);
        assert_eq!(frame.bits.info, 65536);
        assert_eq!(frame.bits.coded_payload, 131072);
        assert_eq!(frame.bits.tail, 12);
        assert_eq!(frame.pad_bits, 0);
        assert_eq!(frame.symbols.len(), 131084 / 4);
    }

    #[test]
    fn noiseless_chain() {
        let values: Vec<f64> = (0..100).map(|k| (k as f64).sin() * 1e3).collect();
        let frame = encode_bits(&serialize_latent(&values).unwrap());
        let bits = decode_symbols(
            &frame.symbols,
            frame.pad_bits,
            Demod::Soft { noise_var: 0.1 },
        )
        .unwrap();
        assert_eq!(deserialize_latent(&bits, values.len()).unwrap(), values);
    }

    #[test]
    fn padded_text_frame() {
        // 3 chars -> 24 info bits -> 60 coded bits -> pad 0; 5 chars -> 92 -> pad 0
        // 1 char -> 8 -> 28 coded, pad 0; check an odd case through the pad path
        let info = vec![1u8; 9];
        let frame = encode_bits(&info);
        assert_eq!(frame.pad_bits, qam16_pad_bits(30));
        assert_eq!(frame.pad_bits, 2);
        assert_eq!(
            decode_symbols(&frame.symbols, frame.pad_bits, Demod::Hard).unwrap(),
            info
        );
        assert!(decode_symbols(&frame.symbols, 1000, Demod::Hard).is_err());
    }

    #[test]
    fn ber_improves_with_coding_at_high_snr() {
        let p = ber_point(10.0, 20_000, 3).unwrap();
        assert!(p.coded_soft <= p.uncoded, "{p:?}");
    }
}
