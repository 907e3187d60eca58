//! Full model checkpoints: the adapter record followed by the frozen and
//! auxiliary tensors.
//!
//! ```text
//! magic          8 bytes  b"PCLMODL\0"
//! version        u32      currently 1
//! adapter        embedded adapter record (see program_memory)
//! W0             matrix
//! A              matrix
//! W_orig         matrix
//! anchor gamma   f64
//! heads, d_k     u64, u64
//! encoder weight matrix
//! encoder bias   heads·d_k f64
//! keys           heads matrices
//! ```
//!
//! A "matrix" is `rows u64, cols u64` then row-major `f64` data, all
//! little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::program_memory::{read_adapter, write_adapter, FrozenAnchor, CHECKPOINT_VERSION};
use crate::routing::{KeyBank, TaskEncoder};
use crate::program_memory::checkpoint::{Decoder, Encoder};

use super::ModelState;

pub const MODEL_MAGIC: &[u8; 8] = b"PCLMODL\0";

pub fn write_model<W: Write>(out: &mut W, state: &ModelState) -> Result<()> {
    {
        let mut enc = Encoder::new(out);
        enc.bytes(MODEL_MAGIC)?;
        enc.u32(CHECKPOINT_VERSION)?;
    }
    write_adapter(out, &state.adapter, &state.scaling)?;
    let mut enc = Encoder::new(out);
    enc.matrix(&state.w0)?;
    enc.matrix(&state.a)?;
    enc.matrix(state.anchor.w_orig())?;
    enc.real(state.anchor.gamma())?;
    enc.u64(state.encoder.num_heads() as u64)?;
    enc.u64(state.encoder.key_dim() as u64)?;
    enc.matrix(&state.encoder.weight)?;
    enc.reals(&state.encoder.bias)?;
    for k in &state.keys.keys {
        enc.matrix(k)?;
    }
    Ok(())
}

pub fn read_model<R: Read>(input: &mut R) -> Result<ModelState> {
    {
        let mut dec = Decoder::new(input);
        dec.expect_magic(MODEL_MAGIC)?;
        let version = dec.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported model version {version}")));
        }
    }
    let (adapter, scaling) = read_adapter(input)?;
    let mut dec = Decoder::new(input);
    let w0 = dec.sized_matrix()?;
    let a = dec.sized_matrix()?;
    let w_orig = dec.sized_matrix()?;
    let anchor_gamma = dec.real()?;
    let heads = dec.len()?;
    let key_dim = dec.len()?;
    let weight = dec.sized_matrix()?;
    let bias = dec.reals(heads * key_dim)?;
    let keys = (0..heads).map(|_| dec.sized_matrix()).collect::<Result<Vec<_>>>()?;
    let encoder = TaskEncoder::new(weight, bias, heads, key_dim)?;
    let mut state = ModelState::from_parts(w0, a, adapter, encoder, KeyBank { keys })?;
    state.scaling = scaling;
    state.anchor = FrozenAnchor::new(w_orig, anchor_gamma);
    Ok(state)
}
