//! Binary adapter checkpoints.
//!
//! Layout (all integers `u64` little-endian unless noted, all reals IEEE-754
//! `f64` little-endian):
//!
//! ```text
//! magic        8 bytes  b"PCLADPT\0"
//! version      u32      currently 1
//! rows (R)     u64
//! cols (D)     u64
//! programs (N) u64
//! W            R·D f64, row-major
//! s            N f64
//! gamma_logit  f64
//! ```
//!
//! Values are stored bit-exactly, so a save/load round trip reproduces the
//! adapter exactly.

use std::io::{Read, Write};

use super::{AdapterTensor, ScalingParams};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const ADAPTER_MAGIC: &[u8; 8] = b"PCLADPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_adapter<W: Write>(out: &mut W, adapter: &AdapterTensor, scaling: &ScalingParams) -> Result<()> {
    let mut enc = Encoder::new(out);
    enc.bytes(ADAPTER_MAGIC)?;
    enc.u32(CHECKPOINT_VERSION)?;
    enc.u64(adapter.rank() as u64)?;
    enc.u64(adapter.dim() as u64)?;
    enc.u64(adapter.num_programs() as u64)?;
    enc.reals(adapter.weight().as_slice())?;
    enc.reals(&scaling.s)?;
    enc.real(scaling.gamma_logit)
}

pub fn read_adapter<R: Read>(input: &mut R) -> Result<(AdapterTensor, ScalingParams)> {
    let mut dec = Decoder::new(input);
    dec.expect_magic(ADAPTER_MAGIC)?;
    let version = dec.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported adapter version {version}")));
    }
    let rows = dec.len()?;
    let cols = dec.len()?;
    let n = dec.len()?;
    let w = dec.matrix(rows, cols)?;
    let s = dec.reals(n)?;
    let gamma_logit = dec.real()?;
    let adapter = AdapterTensor::new(w, n)?;
    Ok((adapter, ScalingParams { s, gamma_logit }))
}

pub(crate) struct Encoder<'a, W: Write> {
    out: &'a mut W,
}

impl<'a, W: Write> Encoder<'a, W> {
    pub(crate) fn new(out: &'a mut W) -> Self {
        Self { out }
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.out.write_all(b)?;
        Ok(())
    }

    pub(crate) fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn real(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_bits().to_le_bytes())
    }

    pub(crate) fn reals(&mut self, vs: &[f64]) -> Result<()> {
        vs.iter().try_for_each(|&v| self.real(v))
    }

    pub(crate) fn matrix(&mut self, m: &Matrix) -> Result<()> {
        self.u64(m.rows() as u64)?;
        self.u64(m.cols() as u64)?;
        self.reals(m.as_slice())
    }
}

pub(crate) struct Decoder<'a, R: Read> {
    input: &'a mut R,
}

// Refuse absurd dimensions from corrupt files before allocating.
const MAX_ELEMENTS: usize = 1 << 28;

impl<'a, R: Read> Decoder<'a, R> {
    pub(crate) fn new(input: &'a mut R) -> Self {
        Self { input }
    }

    fn fill<const K: usize>(&mut self) -> Result<[u8; K]> {
        let mut buf = [0u8; K];
        self.input
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let got: [u8; 8] = self.fill()?;
        if &got != magic {
            return Err(Error::Checkpoint(format!("bad magic {got:?}")));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.fill()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.fill()?))
    }

    pub(crate) fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| Error::Checkpoint(format!("dimension {v} out of range")))
    }

    pub(crate) fn real(&mut self) -> Result<f64> {
        Ok(f64::from_bits(u64::from_le_bytes(self.fill()?)))
    }

    pub(crate) fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.real()).collect()
    }

    pub(crate) fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        if rows.saturating_mul(cols) > MAX_ELEMENTS {
            return Err(Error::Checkpoint(format!("matrix {rows}x{cols} too large")));
        }
        let data = self.reals(rows * cols)?;
        Matrix::from_vec(rows, cols, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub(crate) fn sized_matrix(&mut self) -> Result<Matrix> {
        let rows = self.len()?;
        let cols = self.len()?;
        self.matrix(rows, cols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn adapter_round_trips_bit_exactly(seed in any::<u64>(), n_idx in 0usize..3, d in 1usize..7) {
            let n = [1usize, 2, 4][n_idx];
            let mut rng = Rng::new(seed);
            let adapter = AdapterTensor::init(4, d, n, &mut rng).unwrap();
            let scaling = ScalingParams { s: rng.gaussian_vec(n, 1.0), gamma_logit: rng.gaussian() };
            let mut buf = Vec::new();
            write_adapter(&mut buf, &adapter, &scaling).unwrap();
            prop_assert_eq!(buf.len(), 8 + 4 + 24 + 8 * (4 * d + n + 1));
            let (a2, s2) = read_adapter(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(a2.weight().checksum(), adapter.weight().checksum());
            prop_assert_eq!(a2.num_programs(), n);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&s2.s), bits(&scaling.s));
            prop_assert_eq!(s2.gamma_logit.to_bits(), scaling.gamma_logit.to_bits());
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut rng = Rng::new(1);
        let adapter = AdapterTensor::init(2, 2, 1, &mut rng).unwrap();
        let scaling = ScalingParams::init(&adapter).unwrap();
        let mut buf = Vec::new();
        write_adapter(&mut buf, &adapter, &scaling).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_adapter(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_adapter(&mut &short[..]), Err(Error::Checkpoint(_))));
    }
}
