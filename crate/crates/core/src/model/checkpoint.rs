//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (config, channel layout, tensor table), then every tensor as
//! little-endian `f64` in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelParams};
use crate::condition::CHANNEL_LAYOUT;
use crate::error::{Error, Result};
use crate::nn::Mat;

const MAGIC: &[u8; 8] = b"EVCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    channel_layout: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn write_checkpoint(model: &Model, out: &mut impl Write) -> Result<()> {
    let tensors = model.params.tensors();
    let header = Header {
        config: model.config.clone(),
        channel_layout: CHANNEL_LAYOUT.to_owned(),
        tensors: tensors
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                rows: m.rows,
                cols: m.cols,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, m) in &tensors {
        buf.clear();
        buf.extend(m.data.iter().flat_map(|v| v.to_le_bytes()));
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<Model> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 64 << 20 {
        return Err(Error::Checkpoint("header too large".into()));
    }
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.channel_layout != CHANNEL_LAYOUT {
        return Err(Error::Checkpoint(format!(
            "channel layout {:?} does not match {CHANNEL_LAYOUT:?}",
            header.channel_layout
        )));
    }
    header.config.validate()?;
    let mut params = ModelParams::init(&header.config, 0);
    let slots = params.tensors_mut();
    if slots.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {}", slots.len(), header.tensors.len())));
    }
    for ((name, slot), entry) in slots.into_iter().zip(&header.tensors) {
        if name != entry.name || slot.rows != entry.rows || slot.cols != entry.cols {
            return Err(Error::Checkpoint(format!(
                "tensor {} ({}x{}) does not fit {name} ({}x{})",
                entry.name, entry.rows, entry.cols, slot.rows, slot.cols
            )));
        }
        let mut bytes = vec![0u8; entry.rows * entry.cols * 8];
        input.read_exact(&mut bytes).map_err(|_| Error::Checkpoint(format!("truncated tensor {name}")))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        *slot = Mat::from_vec(entry.rows, entry.cols, data);
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(Model {
        config: header.config,
        params,
    })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::*;

    fn bytes(model: &Model) -> Vec<u8> {
        let mut b = Vec::new();
        write_checkpoint(model, &mut b).unwrap();
        b
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let mut model = Model::new(tiny_config(), 11).unwrap();
        model.params.in_b.data[0] = -0.0;
        model.params.out_b.data[1] = f64::MIN_POSITIVE / 3.0;
        let a = bytes(&model);
        let back = read_checkpoint(&mut a.as_slice()).unwrap();
        assert_eq!(bytes(&back), a);
        assert_eq!(back.config, model.config);
        assert_eq!(back.params.in_b.data[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_corruption_and_contract_mismatch() {
        let model = Model::new(tiny_config(), 11).unwrap();
        let good = bytes(&model);
        assert!(read_checkpoint(&mut &good[..good.len() - 1]).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(read_checkpoint(&mut extra.as_slice()).is_err());
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(read_checkpoint(&mut magic.as_slice()).is_err());

        let text = String::from_utf8_lossy(&good).into_owned();
        let start = text.find("noise:C").unwrap();
        let mut swapped = good.clone();
        swapped[start..start + 7].copy_from_slice(b"image:C");
        assert!(matches!(read_checkpoint(&mut swapped.as_slice()), Err(Error::Checkpoint(_))));
    }
}
