//! Sub-byte code packing.
//!
//! Codes are laid out LSB-first as a continuous little-endian bit stream,
//! one row at a time; every row starts on a byte boundary. A row of `cols`
//! codes at `bits` each therefore occupies `ceil(cols * bits / 8)` bytes.

use crate::error::{Error, Result};

/// Bytes taken by one packed row.
#[inline]
pub fn packed_row_bytes(cols: usize, bits: u8) -> usize {
    (cols * bits as usize).div_ceil(8)
}

/// Packs a row-major `rows × cols` code matrix.
pub fn pack_codes(codes: &[u8], rows: usize, cols: usize, bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    if codes.len() != rows * cols {
        return Err(Error::shape(
            "pack_codes",
            format!("{} codes for {rows}x{cols}", codes.len()),
        ));
    }
    let limit = 1u16 << bits;
    if let Some(pos) = codes.iter().position(|&c| c as u16 >= limit) {
        return Err(Error::Value(format!(
            "code {} at index {pos} does not fit in {bits} bits",
            codes[pos]
        )));
    }
    let row_bytes = packed_row_bytes(cols, bits);
    let mut out = vec![0u8; rows * row_bytes];
    for r in 0..rows {
        pack_row(
            &codes[r * cols..(r + 1) * cols],
            bits,
            &mut out[r * row_bytes..(r + 1) * row_bytes],
        );
    }
    Ok(out)
}

/// Packs one row into `out`, which must be `packed_row_bytes` long and zeroed.
pub(crate) fn pack_row(codes: &[u8], bits: u8, out: &mut [u8]) {
    if bits == 8 {
        out.copy_from_slice(codes);
        return;
    }
    let mut bit = 0usize;
    for &c in codes {
        let byte = bit / 8;
        let shift = bit % 8;
        let v = (c as u16) << shift;
        out[byte] |= v as u8;
        if shift + bits as usize > 8 {
            out[byte + 1] |= (v >> 8) as u8;
        }
        bit += bits as usize;
    }
}

/// Inverse of [`pack_codes`].
pub fn unpack_codes(packed: &[u8], rows: usize, cols: usize, bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let row_bytes = packed_row_bytes(cols, bits);
    if packed.len() != rows * row_bytes {
        return Err(Error::format(
            packed.len().min(rows * row_bytes) as u64,
            format!(
                "packed payload is {} bytes, expected {} ({rows} rows of {row_bytes})",
                packed.len(),
                rows * row_bytes
            ),
        ));
    }
    let mut out = vec![0u8; rows * cols];
    for r in 0..rows {
        unpack_row(
            &packed[r * row_bytes..(r + 1) * row_bytes],
            bits,
            &mut out[r * cols..(r + 1) * cols],
        );
    }
    Ok(out)
}

/// Decodes `out.len()` codes from one packed row.
#[inline]
pub(crate) fn unpack_row(row: &[u8], bits: u8, out: &mut [u8]) {
    match bits {
        8 => out.copy_from_slice(&row[..out.len()]),
        4 => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = (row[i >> 1] >> ((i & 1) * 4)) & 0x0f;
            }
        }
        2 => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = (row[i >> 2] >> ((i & 3) * 2)) & 0x03;
            }
        }
        _ => {
            let mask = (1u16 << bits) - 1;
            let mut bit = 0usize;
            for o in out.iter_mut() {
                let byte = bit / 8;
                let shift = bit % 8;
                let mut v = row[byte] as u16;
                if shift + bits as usize > 8 {
                    v |= (row[byte + 1] as u16) << 8;
                }
                *o = ((v >> shift) & mask) as u8;
                bit += bits as usize;
            }
        }
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if (1..=8).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Value(format!("cannot pack {bits}-bit codes")))
    }
}
