//! Rate-1/2 feedforward convolutional code, K = 7, generators (171, 133)
//! octal, zero-tail terminated; Viterbi decoding over soft or hard metrics.

use super::PhyError;

pub const CONSTRAINT_LENGTH: usize = 7;
/// Generator polynomials in output order; the MSB tap is the current input.
pub const GENERATORS: [u32; 2] = [0o171, 0o133];
const MEMORY: usize = CONSTRAINT_LENGTH - 1;
const STATES: usize = 1 << MEMORY;
/// Coded bits produced by the termination flush.
pub const TAIL_BITS: usize = 2 * MEMORY;

#[inline]
fn parity(x: u32) -> u8 {
    (x.count_ones() & 1) as u8
}

/// Output pair for the 7-bit register `(input << 6) | state`.
const fn branch_outputs() -> [[u8; 2]; 2 * STATES] {
    let mut table = [[0u8; 2]; 2 * STATES];
    let mut reg = 0;
    while reg < 2 * STATES {
        let mut g = 0;
        while g < 2 {
            table[reg][g] = ((reg as u32 & GENERATORS[g]).count_ones() & 1) as u8;
            g += 1;
        }
        reg += 1;
    }
    table
}

const OUTPUTS: [[u8; 2]; 2 * STATES] = branch_outputs();

pub fn coded_len(info_bits: usize) -> usize {
    2 * (info_bits + MEMORY)
}

/// Info length carried by a terminated codeword of `coded` bits.
pub fn info_len(coded: usize) -> Result<usize, PhyError> {
    if coded % 2 != 0 || coded < TAIL_BITS {
        return Err(PhyError::MalformedFrame(coded));
    }
    Ok(coded / 2 - MEMORY)
}

/// Encodes `bits` and flushes the register with six zeros. Output length is
/// `2 * (n + 6)`.
pub fn conv_encode(bits: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(coded_len(bits.len()));
    let mut state = 0u32;
    for &b in bits.iter().chain(std::iter::repeat_n(&0u8, MEMORY)) {
        let reg = (u32::from(b & 1) << MEMORY) | state;
        out.push(parity(reg & GENERATORS[0]));
        out.push(parity(reg & GENERATORS[1]));
        state = reg >> 1;
    }
    out
}

/// Maximum-likelihood decoding of a zero-terminated codeword from per-bit
/// LLRs (positive favours 0). The surviving path must end in state zero; the
/// six tail inputs are stripped.
pub fn viterbi_decode(llrs: &[f64]) -> Result<Vec<u8>, PhyError> {
    let info = info_len(llrs.len())?;
    let steps = info + MEMORY;

    let mut metric = [f64::NEG_INFINITY; STATES];
    metric[0] = 0.0;
    let mut next = [0.0f64; STATES];
    // bit `s` of decisions[k] = low bit of the survivor predecessor of state s
    let mut decisions = Vec::with_capacity(steps);

    for pair in llrs.chunks_exact(2) {
        let (l0, l1) = (pair[0], pair[1]);
        // correlation of each output pattern with the LLRs
        let gain = [l0 + l1, l0 - l1, -l0 + l1, -l0 - l1];
        let mut word = 0u64;
        for (ns, slot) in next.iter_mut().enumerate() {
            let input = ns >> (MEMORY - 1);
            let base = (ns << 1) & (STATES - 1);
            let mut best = f64::NEG_INFINITY;
            let mut choice = 0u64;
            for low in 0..2 {
                let s = base | low;
                let out = OUTPUTS[(input << MEMORY) | s];
                let m = metric[s] + gain[usize::from(out[0]) * 2 + usize::from(out[1])];
                // ties keep the even predecessor
                if m > best {
                    best = m;
                    choice = low as u64;
                }
            }
            *slot = best;
            word |= choice << ns;
        }
        decisions.push(word);
        metric = next;
    }

    let mut state = 0usize;
    let mut bits = vec![0u8; steps];
    for k in (0..steps).rev() {
        bits[k] = (state >> (MEMORY - 1)) as u8;
        let low = ((decisions[k] >> state) & 1) as usize;
        state = ((state << 1) & (STATES - 1)) | low;
    }
    bits.truncate(info);
    Ok(bits)
}

/// Hard-decision decoding: each received bit maps to an LLR of ±1.
pub fn viterbi_decode_hard(bits: &[u8]) -> Result<Vec<u8>, PhyError> {
    let llrs: Vec<f64> = bits
        .iter()
        .map(|&b| if b == 0 { 1.0 } else { -1.0 })
        .collect();
    viterbi_decode(&llrs)
}
