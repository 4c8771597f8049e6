//! Binary training checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CKPT" | version u32 | layer count u32 | (in u32, out u32) per layer
//! | epochs_done u64
//! | weights then bias per layer, f64
//! | velocity in the same order, f64
//! | rng seed u64 | rng stream u64 | rng word position u128
//! | CRC32 of everything above, u32
//! ```

use std::path::Path;

use gradcal::numkit::{Matrix, RngSnapshot, RngStream};
use gradcal::trainer::{DenseLayer, MlpModel, TrainState, Velocity};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"CKPT";
pub const VERSION: u32 = 1;

pub fn encode(state: &TrainState) -> Vec<u8> {
    let layers = state.model.layers();
    let mut out = Vec::with_capacity(64 + 16 * state.model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for layer in layers {
        out.extend_from_slice(&(layer.input_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.output_dim() as u32).to_le_bytes());
    }
    out.extend_from_slice(&(state.epochs_done as u64).to_le_bytes());
    for layer in layers.iter().chain(&state.velocity.layers) {
        for v in layer.weights.data().iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let snap = state.rng.snapshot();
    out.extend_from_slice(&snap.seed.to_le_bytes());
    out.extend_from_slice(&snap.stream.to_le_bytes());
    out.extend_from_slice(&snap.word_pos.to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CliError::Data(format!("checkpoint truncated at byte offset {}", self.bytes.len()))
        })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CliError::Data("checkpoint shape overflows".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(CliError::Data("not a checkpoint: bad magic at byte offset 0".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(CliError::Data(format!(
            "checkpoint CRC mismatch: stored 0x{stored:08x}, computed 0x{actual:08x} (truncated or corrupted)"
        )));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::Data(format!("checkpoint format version {version} is not supported (expected {VERSION})")));
    }
    let n_layers = r.u32()? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(CliError::Data(format!("checkpoint declares {n_layers} layers")));
    }
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        shapes.push((r.u32()? as usize, r.u32()? as usize));
    }
    let epochs_done = r.u64()? as usize;
    let read_layers = |r: &mut Reader| -> Result<Vec<DenseLayer>> {
        shapes
            .iter()
            .map(|&(input, output)| {
                let weights = Matrix::from_vec(output, input, r.f64s(input * output)?)?;
                Ok(DenseLayer { weights, bias: r.f64s(output)? })
            })
            .collect()
    };
    let layers = read_layers(&mut r)?;
    let velocity = Velocity { layers: read_layers(&mut r)? };
    let seed = r.u64()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    if r.pos != body.len() {
        return Err(CliError::Data(format!("checkpoint has {} trailing bytes", body.len() - r.pos)));
    }
    let model = MlpModel::from_layers(layers).map_err(|e| CliError::Data(format!("checkpoint: {e}")))?;
    Ok(TrainState { model, velocity, rng: RngStream::restore(RngSnapshot { seed, stream, word_pos }), epochs_done })
}

/// Writes through a temporary file so a crash never leaves half a checkpoint.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, encode(state)).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        CliError::Data(msg) => CliError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> TrainState {
        let mut rng = RngStream::new(5);
        let model = MlpModel::new(2, &[4, 3], 3, &mut rng).unwrap();
        let velocity = Velocity::zeros_for(&model);
        rng.uniform();
        TrainState { model, velocity, rng, epochs_done: 2 }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = state();
        let back = decode(&encode(&s)).unwrap();
        let bits = |m: &MlpModel| m.flat_parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.model), bits(&s.model));
        assert_eq!(back.velocity, s.velocity);
        assert_eq!(back.rng.snapshot(), s.rng.snapshot());
        assert_eq!(back.epochs_done, 2);
        assert_eq!(encode(&back), encode(&s));
    }

    #[test]
    fn flipped_bit_fails_the_crc() {
        let mut bytes = encode(&state());
        bytes[40] ^= 1;
        assert!(decode(&bytes).unwrap_err().to_string().contains("CRC"));
    }

    #[test]
    fn other_versions_are_refused() {
        let mut bytes = encode(&state());
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(decode(&bytes).unwrap_err().to_string().contains("version 2"));
    }
}
