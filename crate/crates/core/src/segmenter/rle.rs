//! Run-length mask encoding: alternating run lengths over the row-major pixel
//! sequence, starting with a (possibly empty) background run.

use thiserror::Error;

use crate::mask::BinaryMask;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RleError {
    #[error("runs sum to {sum}, expected {expected}")]
    LengthMismatch { sum: u64, expected: u64 },
    #[error("mask dimensions must be positive (got {0}x{1})")]
    EmptyGrid(usize, usize),
}

pub fn encode(mask: &BinaryMask) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &b in mask.bits() {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn decode(width: usize, height: usize, runs: &[u32]) -> Result<BinaryMask, RleError> {
    if width == 0 || height == 0 {
        return Err(RleError::EmptyGrid(width, height));
    }
    let expected = (width * height) as u64;
    let sum: u64 = runs.iter().map(|&r| u64::from(r)).sum();
    if sum != expected {
        return Err(RleError::LengthMismatch { sum, expected });
    }
    let mut bits = Vec::with_capacity(width * height);
    for (i, &r) in runs.iter().enumerate() {
        bits.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
    }
    Ok(BinaryMask::from_bits(width, height, bits).expect("length checked"))
}
