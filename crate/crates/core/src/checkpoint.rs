//! Model serialization. Layout: 8-byte magic, u32 little-endian header
//! length, UTF-8 JSON header (config, run metadata, tensor manifest), then
//! raw little-endian float32 payloads in manifest order.

use crate::data::Scaler;
use crate::error::{Error, Result};
use crate::kernel::Real;
use crate::model::{PositionalEncoding, TransAppConfig, TransAppModel};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"TAPPCKPT";
const FORMAT_VERSION: u32 = 1;

/// Run metadata carried alongside the weights so detection can reproduce
/// the training-time preprocessing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub scaler: Scaler,
    pub window: Option<usize>,
    pub appliance: Option<String>,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        CheckpointMeta { scaler: Scaler::identity(), window: None, appliance: None }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the payload region.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: TransAppConfig,
    #[serde(default)]
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Write the model's parameters and batch-norm running statistics, in visit
/// order, with both heads included.
pub fn save_checkpoint<T: Real>(
    model: &TransAppModel<T>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    {
        let mut push = |name: String, t: &crate::tensor::Tensor<T>| {
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: "f32".to_string(),
                offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_f32().to_le_bytes());
            }
        };
        model.visit_params(&mut |n, t| push(n, t));
        model.visit_buffers(&mut |n, t| push(n, t));
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.cfg.clone(),
        meta: meta.clone(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header_json.len() as u32).to_le_bytes())?;
    out.write_all(&header_json)?;
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

/// Rebuild a model from a checkpoint file. Parameters round-trip
/// bit-identically at float32 precision.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(TransAppModel<T>, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ckpt_err(format!(
            "{} is not a model checkpoint (bad magic bytes)",
            path.display()
        )));
    }
    let header_len =
        u32::from_le_bytes(bytes[8..12].try_into().expect("widths are fixed")) as usize;
    let header_end = 12usize.checked_add(header_len).ok_or_else(|| ckpt_err("header length overflows"))?;
    if bytes.len() < header_end {
        return Err(ckpt_err(format!(
            "truncated checkpoint: header claims {header_len} bytes, file has {}",
            bytes.len().saturating_sub(12)
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[12..header_end])?;
    if header.format_version != FORMAT_VERSION {
        return Err(ckpt_err(format!(
            "checkpoint format version {} but this build reads version {FORMAT_VERSION}",
            header.format_version
        )));
    }
    let payload = &bytes[header_end..];

    let max_window = header
        .tensors
        .iter()
        .find(|e| e.name == "pos.table")
        .map(|e| e.shape.first().copied().unwrap_or(0))
        .unwrap_or(0);
    if header.config.positional_encoding == PositionalEncoding::Learnable && max_window < 2 {
        return Err(ckpt_err("learnable positional encoding but no position table stored"));
    }
    let mut model = TransAppModel::<T>::new(header.config.clone(), max_window, 0)?;

    let mut index: HashMap<&str, &TensorEntry> =
        header.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut err: Option<Error> = None;
    {
        let mut fill = |name: String, t: &mut crate::tensor::Tensor<T>| {
            if err.is_some() {
                return;
            }
            let entry = match index.remove(name.as_str()) {
                Some(e) => e,
                None => {
                    err = Some(ckpt_err(format!("checkpoint is missing tensor {name}")));
                    return;
                }
            };
            if entry.dtype != "f32" {
                err = Some(ckpt_err(format!(
                    "tensor {name} has unsupported dtype {}",
                    entry.dtype
                )));
                return;
            }
            if entry.shape != t.shape() {
                err = Some(ckpt_err(format!(
                    "tensor {name} has shape {:?} but the config implies {:?}",
                    entry.shape,
                    t.shape()
                )));
                return;
            }
            let start = entry.offset as usize;
            let end = start + 4 * t.numel();
            if end > payload.len() {
                err = Some(ckpt_err(format!(
                    "tensor {name} payload runs past the end of the file"
                )));
                return;
            }
            for (dst, src) in t.data_mut().iter_mut().zip(payload[start..end].chunks_exact(4)) {
                *dst = T::from_f32(f32::from_le_bytes(src.try_into().expect("chunks are 4 bytes")));
            }
        };
        model.visit_params_mut(&mut |n, t| fill(n, t));
        model.visit_buffers_mut(&mut |n, t| fill(n, t));
    }
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(stray) = index.keys().next() {
        return Err(ckpt_err(format!(
            "checkpoint carries tensor {stray} that the config does not expect"
        )));
    }
    Ok((model, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> TransAppConfig {
        TransAppConfig {
            d_model: 12,
            heads: 2,
            n_layers: 1,
            d_ff: 24,
            dropout: 0.0,
            ..Default::default()
        }
    }

    fn tensors_of<T: Real>(model: &TransAppModel<T>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        model.visit_params(&mut |n, t| {
            out.push((n, t.shape().to_vec(), t.data().iter().map(|v| v.to_f32()).collect()))
        });
        model.visit_buffers(&mut |n, t| {
            out.push((n, t.shape().to_vec(), t.data().iter().map(|v| v.to_f32()).collect()))
        });
        out
    }

    fn logits_on_fixed_input(model: &TransAppModel<f32>) -> Vec<f32> {
        let (b, w, m) = (2usize, 8usize, 5usize);
        let x: Vec<f32> = (0..b * w * m).map(|i| ((i * 37 % 101) as f32) * 0.01 - 0.5).collect();
        let mut g = Graph::inference();
        let bound = model.bind(&mut g);
        let xid = g.constant(Tensor::new(vec![b, w, m], x).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = bound.encode(&mut g, xid, false, &mut rng).unwrap();
        let logits = bound.classify(&mut g, enc.z).unwrap();
        g.value(logits).data().to_vec()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = TransAppModel::<f32>::new(small_cfg(), 0, 7).unwrap();
        // make running stats distinctive so buffer round-tripping shows
        let mut k = 0.0f32;
        model.visit_buffers_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v = 0.37 + k;
                k += 0.001;
            }
        });
        let meta = CheckpointMeta {
            scaler: Scaler { mean: 0.42, std: 1.7 },
            window: Some(1024),
            appliance: Some("dishwasher".to_string()),
        };
        save_checkpoint(&model, &meta, &path).unwrap();
        let (loaded, got_meta) = load_checkpoint::<f32>(&path).unwrap();

        assert_eq!(got_meta, meta);
        assert_eq!(loaded.cfg, model.cfg);
        let a = tensors_of(&model);
        let b = tensors_of(&loaded);
        assert_eq!(a.len(), b.len());
        for ((na, sa, da), (nb, sb, db)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(sa, sb);
            assert_eq!(da.len(), db.len());
            for (x, y) in da.iter().zip(db.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "tensor {na} differs");
            }
        }
        let la = logits_on_fixed_input(&model);
        let lb = logits_on_fixed_input(&loaded);
        for (x, y) in la.iter().zip(lb.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn learnable_position_table_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = TransAppConfig {
            positional_encoding: PositionalEncoding::Learnable,
            ..small_cfg()
        };
        let model = TransAppModel::<f32>::new(cfg, 64, 3).unwrap();
        save_checkpoint(&model, &CheckpointMeta::default(), &path).unwrap();
        let (loaded, _) = load_checkpoint::<f32>(&path).unwrap();
        let pos_a = model.pos.as_ref().unwrap();
        let pos_b = loaded.pos.as_ref().unwrap();
        assert_eq!(pos_a.shape(), pos_b.shape());
        assert_eq!(pos_a.data(), pos_b.data());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = TransAppModel::<f32>::new(small_cfg(), 0, 0).unwrap();
        save_checkpoint(&model, &CheckpointMeta::default(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint::<f32>(&path).map(|_| ()) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected a checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = TransAppModel::<f32>::new(small_cfg(), 0, 0).unwrap();
        save_checkpoint(&model, &CheckpointMeta::default(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let needle = b"\"format_version\":1";
        let patch = b"\"format_version\":9";
        let at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .expect("header holds the version field");
        let mut patched = bytes.clone();
        patched[at..at + patch.len()].copy_from_slice(patch);
        std::fs::write(&path, &patched).unwrap();
        match load_checkpoint::<f32>(&path).map(|_| ()) {
            Err(Error::Checkpoint(msg)) => {
                assert!(msg.contains('9') && msg.contains('1'), "message: {msg}")
            }
            other => panic!("expected a checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = TransAppModel::<f32>::new(small_cfg(), 0, 0).unwrap();
        save_checkpoint(&model, &CheckpointMeta::default(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        match load_checkpoint::<f32>(&path).map(|_| ()) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("past the end")),
            other => panic!("expected a checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn default_config_checkpoint_stays_small() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = TransAppModel::<f32>::new(TransAppConfig::default(), 0, 0).unwrap();
        save_checkpoint(&model, &CheckpointMeta::default(), &path).unwrap();
        let size = std::fs::metadata(&path).unwrap().len();
        assert!(size <= 5 * 1024 * 1024, "checkpoint is {size} bytes");
        // payload accounts for every parameter and buffer, nothing else
        let mut floats = model.param_count();
        model.visit_buffers(&mut |_, t| floats += t.numel());
        assert!(size >= 4 * floats as u64);
    }
}
