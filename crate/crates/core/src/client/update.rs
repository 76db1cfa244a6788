//! `FXU1` update format.
//!
//! ```text
//! "FXU1"
//! u32 client, u32 round, u32 samples (nᵢ), u8 depth (Lᵢ), u32 layer_count
//! layer_count × { u32 layer, u32 byte_len, f64[byte_len / 8] }   layers 0..=Lᵢ ascending
//! u32 0xFFFF_FFFF, u32 exit, u32 task, u32 byte_len, f64[byte_len / 8]   head record
//! u64 samples_processed, f64 final_loss
//! ```
//! Little-endian throughout.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::HeadKey;
use crate::wire::{Reader, Writer};

pub const MAGIC: &[u8; 4] = b"FXU1";
/// Layer index that marks the head record.
pub const HEAD_RECORD: u32 = u32::MAX;

const MAX_LAYERS: usize = 255;
const MAX_INDEX: usize = 1 << 20;

/// What one client sends after a round: post-training values of the layers
/// it trained plus its one head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerUpdate {
    pub client: u32,
    pub round: u32,
    /// Local data size nᵢ.
    pub samples: usize,
    /// Trained depth Lᵢ.
    pub depth: usize,
    /// Flattened values of layers `0..=depth`, indexed by layer.
    pub layers: Vec<Vec<f64>>,
    pub head: HeadKey,
    pub head_values: Vec<f64>,
    pub samples_processed: u64,
    pub final_loss: f64,
}

impl LayerUpdate {
    pub fn layer(&self, layer: usize) -> Option<&[f64]> {
        self.layers.get(layer).map(Vec::as_slice)
    }

    pub fn covers(&self, layer: usize) -> bool {
        layer <= self.depth
    }

    pub fn encoded_len(&self) -> usize {
        let header = 4 + 4 + 4 + 4 + 1 + 4;
        let layers: usize = self.layers.iter().map(|l| 8 + 8 * l.len()).sum();
        let head = 16 + 8 * self.head_values.len();
        header + layers + head + 16
    }

    fn check(&self) -> Result<()> {
        if self.layers.len() != self.depth + 1 {
            return Err(Error::Protocol(format!(
                "client {}: depth {} but {} layer payloads",
                self.client,
                self.depth,
                self.layers.len()
            )));
        }
        if self.head.exit != self.depth {
            return Err(Error::Protocol(format!(
                "client {}: head exit {} differs from trained depth {}",
                self.client, self.head.exit, self.depth
            )));
        }
        Ok(())
    }
}

pub fn encode_update(update: &LayerUpdate) -> Result<Vec<u8>> {
    update.check()?;
    let depth = u8::try_from(update.depth)
        .map_err(|_| Error::Protocol(format!("depth {} does not fit in u8", update.depth)))?;
    let samples = u32::try_from(update.samples)
        .map_err(|_| Error::Protocol(format!("sample count {} does not fit in u32", update.samples)))?;
    let mut w = Writer::with_capacity(update.encoded_len());
    w.bytes(MAGIC);
    w.u32(update.client);
    w.u32(update.round);
    w.u32(samples);
    w.u8(depth);
    w.len32(update.layers.len());
    for (i, values) in update.layers.iter().enumerate() {
        w.len32(i);
        w.len32(8 * values.len());
        w.f64s(values);
    }
    w.u32(HEAD_RECORD);
    w.len32(update.head.exit);
    w.len32(update.head.task);
    w.len32(8 * update.head_values.len());
    w.f64s(&update.head_values);
    w.u64(update.samples_processed);
    w.f64(update.final_loss);
    Ok(w.finish())
}

fn payload(r: &mut Reader<'_>) -> Result<Vec<f64>> {
    let at = r.offset();
    let len = r.u32("payload length")? as usize;
    if !len.is_multiple_of(8) {
        return Err(Error::decode(at, format!("payload length {len} is not a multiple of 8")));
    }
    if len > r.remaining() {
        return Err(Error::decode(
            at,
            format!("payload length {len} exceeds the {} bytes left", r.remaining()),
        ));
    }
    r.f64s(len / 8, "payload")
}

pub fn decode_update(bytes: &[u8]) -> Result<LayerUpdate> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let client = r.u32("client id")?;
    let round = r.u32("round")?;
    let samples = r.u32("sample count")? as usize;
    let depth_at = r.offset();
    let depth = r.u8("depth")? as usize;
    let count_at = r.offset();
    let count = r.count(MAX_LAYERS + 1, "layer count")?;
    if count != depth + 1 {
        return Err(Error::decode(
            count_at,
            format!("layer count {count} does not match depth {depth}"),
        ));
    }
    if samples == 0 {
        return Err(Error::decode(depth_at - 4, "sample count must be >= 1"));
    }
    let mut layers = Vec::with_capacity(count);
    for expected in 0..count {
        let at = r.offset();
        let index = r.u32("layer index")?;
        if index as usize != expected {
            return Err(Error::decode(
                at,
                format!("layer index {index}, expected {expected}"),
            ));
        }
        layers.push(payload(&mut r)?);
    }
    let at = r.offset();
    if r.u32("head marker")? != HEAD_RECORD {
        return Err(Error::decode(at, "missing head record"));
    }
    let exit_at = r.offset();
    let exit = r.count(MAX_INDEX, "head exit")?;
    let task = r.count(MAX_INDEX, "head task")?;
    if exit != depth {
        return Err(Error::decode(
            exit_at,
            format!("head exit {exit} differs from depth {depth}"),
        ));
    }
    let head_values = payload(&mut r)?;
    let samples_processed = r.u64("samples processed")?;
    let final_loss = r.f64("final loss")?;
    r.finish()?;
    Ok(LayerUpdate {
        client,
        round,
        samples,
        depth,
        layers,
        head: HeadKey { exit, task },
        head_values,
        samples_processed,
        final_loss,
    })
}

pub fn write_update(path: &Path, update: &LayerUpdate) -> Result<()> {
    std::fs::write(path, encode_update(update)?).map_err(|e| Error::io(path, e))
}

pub fn read_update(path: &Path) -> Result<LayerUpdate> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_update(&bytes)
}
