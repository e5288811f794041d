//! Bit packing of integer codes.
//!
//! Row-major, every row starts on a byte boundary, and within a byte the
//! first code occupies the least-significant bits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedTensor {
    pub bits: u8,
    pub rows: usize,
    pub cols: usize,
    pub payload: Vec<u8>,
    pub scale: f64,
    pub zero: i32,
}

pub fn row_bytes(cols: usize, bits: u8) -> usize {
    (cols * bits as usize).div_ceil(8)
}

impl PackedTensor {
    pub fn pack(codes: &[i32], rows: usize, cols: usize, bits: u8, scale: f64, zero: i32) -> Result<Self> {
        let qc = QuantConfig::new(bits)?;
        if codes.len() != rows * cols {
            return Err(Error::shape(
                "pack",
                format!("{} codes for a {rows}x{cols} tensor", codes.len()),
            ));
        }
        let stride = row_bytes(cols, bits);
        let per_byte = 8 / bits as usize;
        let mut payload = vec![0u8; rows * stride];
        for r in 0..rows {
            let out = &mut payload[r * stride..(r + 1) * stride];
            for (c, &code) in codes[r * cols..(r + 1) * cols].iter().enumerate() {
                if code < 0 || code > qc.max_code() {
                    return Err(Error::CodeOutOfRange {
                        code: code as i64,
                        bits,
                    });
                }
                let shift = (c % per_byte) * bits as usize;
                out[c / per_byte] |= (code as u8) << shift;
            }
        }
        Ok(Self {
            bits,
            rows,
            cols,
            payload,
            scale,
            zero,
        })
    }

    pub fn unpack(&self) -> Vec<i32> {
        let stride = row_bytes(self.cols, self.bits);
        let per_byte = 8 / self.bits as usize;
        let mask = ((1u16 << self.bits) - 1) as u8;
        let mut codes = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            let row = &self.payload[r * stride..(r + 1) * stride];
            for c in 0..self.cols {
                let shift = (c % per_byte) * self.bits as usize;
                codes.push(((row[c / per_byte] >> shift) & mask) as i32);
            }
        }
        codes
    }
}
