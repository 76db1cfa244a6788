//! `FXS1` shard dump.
//!
//! ```text
//! "FXS1"
//! u32 client_id, seq_len, input_dim, sample_count, speaker_count
//! u32 speakers[speaker_count]
//! f64 frames[sample_count · seq_len · input_dim]
//! u32 labels[sample_count]
//! u32 sample_speakers[sample_count]
//! ```

use std::path::Path;

use super::{Sample, Shard};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::wire::{Reader, Writer};

pub const MAGIC: &[u8; 4] = b"FXS1";
const MAX_COUNT: usize = 1 << 24;

pub fn encode_shard(shard: &Shard) -> Result<Vec<u8>> {
    let (t, f) = match shard.samples.first() {
        Some(s) => (s.frames.rows(), s.frames.cols()),
        None => (0, 0),
    };
    if shard.samples.iter().any(|s| s.frames.shape() != [t, f]) {
        return Err(Error::InvalidTensor("shard samples have mixed shapes".into()));
    }
    let mut w = Writer::with_capacity(24 + shard.len() * (8 * t * f + 8));
    w.bytes(MAGIC);
    w.u32(shard.client_id);
    w.len32(t);
    w.len32(f);
    w.len32(shard.len());
    w.len32(shard.speakers.len());
    for &s in &shard.speakers {
        w.u32(s);
    }
    for s in &shard.samples {
        w.f64s(s.frames.data());
    }
    for s in &shard.samples {
        w.len32(s.label);
    }
    for s in &shard.samples {
        w.u32(s.speaker);
    }
    Ok(w.finish())
}

pub fn decode_shard(bytes: &[u8]) -> Result<Shard> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let client_id = r.u32("client id")?;
    let t = r.count(MAX_COUNT, "seq_len")?;
    let f = r.count(MAX_COUNT, "input_dim")?;
    let n = r.count(MAX_COUNT, "sample count")?;
    let speaker_count = r.count(MAX_COUNT, "speaker count")?;
    let speakers = (0..speaker_count)
        .map(|_| r.u32("speaker"))
        .collect::<Result<Vec<_>>>()?;
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        frames.push(Tensor::new(vec![t, f], r.f64s(t * f, "frames")?)?);
    }
    let labels = (0..n).map(|_| r.u32("label")).collect::<Result<Vec<_>>>()?;
    let owners = (0..n).map(|_| r.u32("speaker")).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let samples = frames
        .into_iter()
        .zip(labels)
        .zip(owners)
        .map(|((frames, label), speaker)| Sample {
            frames,
            label: label as usize,
            speaker,
        })
        .collect();
    Ok(Shard {
        client_id,
        samples,
        speakers,
    })
}

pub fn write_shard(shard: &Shard, path: &Path) -> Result<()> {
    std::fs::write(path, encode_shard(shard)?).map_err(|e| Error::io(path, e))
}

pub fn read_shard(path: &Path) -> Result<Shard> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_shard(&bytes)
}
