use super::PhyError;

pub const BITS_PER_COEFFICIENT: usize = 64;
pub const BITS_PER_CHAR: usize = 8;

fn push_word(out: &mut Vec<u8>, word: u64, width: usize) {
    out.extend((0..width).rev().map(|k| ((word >> k) & 1) as u8));
}

fn read_word(bits: &[u8]) -> u64 {
    bits.iter()
        .fold(0u64, |acc, &b| (acc << 1) | u64::from(b & 1))
}

/// Emits each coefficient as its IEEE 754 binary64 pattern, MSB first.
pub fn serialize_latent(coefficients: &[f64]) -> Result<Vec<u8>, PhyError> {
    let mut out = Vec::with_capacity(coefficients.len() * BITS_PER_COEFFICIENT);
    for (index, value) in coefficients.iter().enumerate() {
        if !value.is_finite() {
            return Err(PhyError::NonFinite { index });
        }
        push_word(&mut out, value.to_bits(), BITS_PER_COEFFICIENT);
    }
    Ok(out)
}

/// Inverse of [`serialize_latent`]. Bit patterns are reinterpreted as-is, so a
/// corrupted stream may yield non-finite values.
pub fn deserialize_latent(bits: &[u8], count: usize) -> Result<Vec<f64>, PhyError> {
    let expected = count * BITS_PER_COEFFICIENT;
    if bits.len() != expected {
        return Err(PhyError::Length {
            expected,
            found: bits.len(),
        });
    }
    Ok(bits
        .chunks_exact(BITS_PER_COEFFICIENT)
        .map(|chunk| f64::from_bits(read_word(chunk)))
        .collect())
}

/// 8 bits per character, MSB first. Characters outside 7-bit ASCII become `?`.
pub fn ascii_encode(text: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(text.len() * BITS_PER_CHAR);
    for ch in text.chars() {
        let byte = if ch.is_ascii() { ch as u8 } else { b'?' };
        push_word(&mut out, u64::from(byte), BITS_PER_CHAR);
    }
    out
}

/// Bytes outside the printable range `0x20..=0x7e` decode to `?`.
pub fn ascii_decode(bits: &[u8]) -> Result<String, PhyError> {
    if bits.len() % BITS_PER_CHAR != 0 {
        return Err(PhyError::ByteAlignment(bits.len()));
    }
    Ok(bits
        .chunks_exact(BITS_PER_CHAR)
        .map(|chunk| {
            let byte = read_word(chunk) as u8;
            if (0x20..=0x7e).contains(&byte) {
                byte as char
            } else {
                '?'
            }
        })
        .collect())
}

/// Packs bits MSB-first into bytes, zero-filling the last byte.
pub fn pack_bits(bits: &[u8]) -> Vec<u8> {
    bits.chunks(8)
        .map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (k, &b)| acc | ((b & 1) << (7 - k)))
        })
        .collect()
}

pub fn unpack_bits(bytes: &[u8], count: usize) -> Vec<u8> {
    bytes
        .iter()
        .flat_map(|&byte| (0..8).rev().map(move |k| (byte >> k) & 1))
        .take(count)
        .collect()
}
