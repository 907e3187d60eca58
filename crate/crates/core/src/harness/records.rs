//! Line-delimited JSON records.
//!
//! Every line is one object whose first two fields are `schema` and `kind`.
//! The remaining fields depend on the kind and keep their declaration
//! order. Floats use the shortest round-trip representation.

use std::io::Write;

use serde::Serialize;

use crate::error::Result;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema: u32,
    kind: &'a str,
    #[serde(flatten)]
    data: &'a T,
}

pub struct RecordWriter<W: Write> {
    out: W,
    count: usize,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out, count: 0 }
    }

    pub fn write<T: Serialize>(&mut self, kind: &str, data: &T) -> Result<()> {
        serde_json::to_writer(
            &mut self.out,
            &Envelope {
                schema: SCHEMA_VERSION,
                kind,
                data,
            },
        )?;
        self.out.write_all(b"\n")?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Discards records; for runs where only the return value matters.
pub fn null_writer() -> RecordWriter<std::io::Sink> {
    RecordWriter::new(std::io::sink())
}
