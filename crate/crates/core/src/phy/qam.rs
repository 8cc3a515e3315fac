//! Gray-mapped 16-QAM.
//!
//! The first two bits of each 4-bit group select the in-phase level and the
//! last two the quadrature level, with per-axis map `00 → -3`, `01 → -1`,
//! `11 → +1`, `10 → +3`, scaled by `1/√10` for unit average energy.

use num_complex::Complex64;

use super::PhyError;

pub const QAM16_SCALE: f64 = 0.316_227_766_016_837_94; // 1/sqrt(10)

const BITS_PER_SYMBOL: usize = 4;

#[inline]
fn axis_level(b0: u8, b1: u8) -> f64 {
    match (b0 & 1, b1 & 1) {
        (0, 0) => -3.0,
        (0, 1) => -1.0,
        (1, 1) => 1.0,
        _ => 3.0,
    }
}

/// Zero bits appended to reach a whole number of symbols.
pub fn qam16_pad_bits(bits: usize) -> usize {
    (BITS_PER_SYMBOL - bits % BITS_PER_SYMBOL) % BITS_PER_SYMBOL
}

/// Maps bits to symbols, zero-padding the last group. Use
/// [`qam16_pad_bits`] to learn how many bits were added.
pub fn qam16_mod(bits: &[u8]) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(bits.len().div_ceil(BITS_PER_SYMBOL));
    for chunk in bits.chunks(BITS_PER_SYMBOL) {
        let mut g = [0u8; BITS_PER_SYMBOL];
        g[..chunk.len()].copy_from_slice(chunk);
        out.push(Complex64::new(
            axis_level(g[0], g[1]) * QAM16_SCALE,
            axis_level(g[2], g[3]) * QAM16_SCALE,
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Demod {
    /// Nearest-level decision; LLRs are ±1.
    Hard,
    /// Max-log LLRs for circular noise of variance `noise_var` per symbol.
    Soft { noise_var: f64 },
}

/// Nearest level on the unscaled axis; boundary ties go to the lower level.
#[inline]
fn decide(x: f64) -> (u8, u8) {
    if x <= -2.0 {
        (0, 0)
    } else if x <= 0.0 {
        (0, 1)
    } else if x <= 2.0 {
        (1, 1)
    } else {
        (1, 0)
    }
}

/// Max-log LLRs of the two bits on one axis, before dividing by the noise
/// variance. `x` is in unscaled level units.
#[inline]
fn axis_llr(x: f64) -> (f64, f64) {
    let d = |a: f64| (x - a) * (x - a);
    let (m3, m1, p1, p3) = (d(-3.0), d(-1.0), d(1.0), d(3.0));
    // first bit: 0 on {-3,-1}, 1 on {+1,+3}; second bit: 0 on {-3,+3}, 1 on {-1,+1}
    let first = p1.min(p3) - m3.min(m1);
    let second = m1.min(p1) - m3.min(p3);
    (first, second)
}

/// Per-bit metrics, 4 per symbol, positive favouring 0.
pub fn qam16_demod(symbols: &[Complex64], mode: Demod) -> Result<Vec<f64>, PhyError> {
    let scale = match mode {
        Demod::Soft { noise_var } => {
            if !(noise_var > 0.0 && noise_var.is_finite()) {
                return Err(PhyError::NoiseVariance(noise_var));
            }
            // distances are in level units: |y - s|^2 = (x - a)^2 / 10
            QAM16_SCALE * QAM16_SCALE / noise_var
        }
        Demod::Hard => 0.0,
    };
    let mut out = Vec::with_capacity(symbols.len() * BITS_PER_SYMBOL);
    for (index, y) in symbols.iter().enumerate() {
        if !(y.re.is_finite() && y.im.is_finite()) {
            return Err(PhyError::NonFiniteSymbol { index });
        }
        for x in [y.re / QAM16_SCALE, y.im / QAM16_SCALE] {
            match mode {
                Demod::Hard => {
                    let (b0, b1) = decide(x);
                    out.push(if b0 == 0 { 1.0 } else { -1.0 });
                    out.push(if b1 == 0 { 1.0 } else { -1.0 });
                }
                Demod::Soft { .. } => {
                    let (a, b) = axis_llr(x);
                    out.push(a * scale);
                    out.push(b * scale);
                }
            }
        }
    }
    Ok(out)
}

/// Sign decisions on LLRs; zero maps to bit 0.
pub fn hard_bits(llrs: &[f64]) -> Vec<u8> {
    llrs.iter().map(|&l| u8::from(l < 0.0)).collect()
}
