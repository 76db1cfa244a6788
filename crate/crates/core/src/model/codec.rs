//! `FXP1` parameter format.
//!
//! ```text
//! "FXP1"
//! u32 input_dim, width, hidden, depth, exit_count, exits[exit_count],
//!     task_count, classes[task_count]
//! f64 values: embed, blocks 1..=depth (norm_gain, norm_bias, w1, b1, w2, b2),
//!     heads sorted by (exit, task) (w, b)
//! ```
//! All integers and floats are little-endian.

use super::{ExitSet, ModelConfig, ParameterSet};
use crate::error::{Error, Result};
use crate::wire::{Reader, Writer};

pub const MAGIC: &[u8; 4] = b"FXP1";

/// Sanity bound on any dimension read from a stream.
const MAX_DIM: usize = 1 << 20;

pub fn header_len(config: &ModelConfig) -> usize {
    4 + 4 * (5 + config.exits.len() + 1 + config.task_classes.len())
}

pub fn encoded_len(config: &ModelConfig) -> usize {
    header_len(config) + 8 * config.parameter_count()
}

pub(crate) fn write_config(w: &mut Writer, c: &ModelConfig) {
    for v in [c.input_dim, c.width, c.hidden, c.depth, c.exits.len()] {
        w.len32(v);
    }
    for e in c.exits.iter() {
        w.len32(e);
    }
    w.len32(c.task_classes.len());
    for &k in &c.task_classes {
        w.len32(k);
    }
}

pub(crate) fn read_config(r: &mut Reader<'_>) -> Result<ModelConfig> {
    let start = r.offset();
    let input_dim = r.count(MAX_DIM, "input_dim")?;
    let width = r.count(MAX_DIM, "width")?;
    let hidden = r.count(MAX_DIM, "hidden")?;
    let depth = r.count(MAX_DIM, "depth")?;
    let exit_count = r.count(MAX_DIM, "exit count")?;
    let exits = (0..exit_count)
        .map(|_| r.count(MAX_DIM, "exit"))
        .collect::<Result<Vec<_>>>()?;
    let task_count = r.count(MAX_DIM, "task count")?;
    let task_classes = (0..task_count)
        .map(|_| r.count(MAX_DIM, "class count"))
        .collect::<Result<Vec<_>>>()?;
    let exits = ExitSet::new(exits).map_err(|e| Error::decode(start, e.to_string()))?;
    let config = ModelConfig {
        input_dim,
        width,
        hidden,
        depth,
        exits,
        task_classes,
    };
    config
        .validate()
        .map_err(|e| Error::decode(start, e.to_string()))?;
    Ok(config)
}

pub fn encode_params(params: &ParameterSet) -> Vec<u8> {
    let mut w = Writer::with_capacity(encoded_len(params.config()));
    w.bytes(MAGIC);
    write_config(&mut w, params.config());
    for t in params.all_tensors() {
        w.f64s(t.data());
    }
    w.finish()
}

pub fn decode_params(bytes: &[u8]) -> Result<ParameterSet> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let config = read_config(&mut r)?;
    let expected = 8 * config.parameter_count();
    if r.remaining() != expected {
        return Err(Error::decode(
            r.offset(),
            format!(
                "tensor section is {} bytes, config needs {expected}",
                r.remaining()
            ),
        ));
    }
    let mut params = ParameterSet::zeros(&config)?;
    for t in params.all_tensors_mut() {
        let values = r.f64s(t.len(), "tensor")?;
        t.data_mut().copy_from_slice(&values);
    }
    r.finish()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::numerics::Prng;

    fn config() -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            width: 4,
            hidden: 8,
            depth: 12,
            exits: ExitSet::default(),
            task_classes: vec![3, 2],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = init_model(&config(), &mut Prng::new(8)).unwrap();
        let bytes = encode_params(&p);
        assert!(decode_params(&bytes).unwrap().bitwise_eq(&p));
    }

    #[test]
    fn size_matches_analytic_count() {
        let c = config();
        let p = init_model(&c, &mut Prng::new(8)).unwrap();
        // F·D + 12·(2D + DH + H + HD + D) + 4 exits·(2D·3+3 + 2D·2+2)
        let count = 3 * 4 + 12 * (8 + 32 + 8 + 32 + 4) + 4 * (27 + 18);
        // magic + 5 fields + 4 exits + task count + 2 class counts
        let header = 4 + 4 * (5 + 4 + 1 + 2);
        assert_eq!(bytes_len(&p), header + 8 * count);
        assert_eq!(encoded_len(&c), header + 8 * count);
    }

    fn bytes_len(p: &ParameterSet) -> usize {
        encode_params(p).len()
    }

    #[test]
    fn corrupt_header_is_an_error() {
        let p = init_model(&config(), &mut Prng::new(8)).unwrap();
        let mut bytes = encode_params(&p);
        bytes[0] = b'X';
        assert!(matches!(decode_params(&bytes), Err(Error::Decode { offset: 0, .. })));
        let mut bytes = encode_params(&p);
        bytes[8] = 0xff; // width
        assert!(matches!(decode_params(&bytes), Err(Error::Decode { .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let p = init_model(&config(), &mut Prng::new(8)).unwrap();
        let bytes = encode_params(&p);
        for cut in [2, 10, 30, bytes.len() - 1] {
            match decode_params(&bytes[..cut]) {
                Err(Error::Decode { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }
}
