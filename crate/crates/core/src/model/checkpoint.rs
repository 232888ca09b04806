//! Checkpoint file: one JSON header line, then the flat little-endian f32
//! payload in [`ParamLayout`](super::ParamLayout) order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ParamLayout, Parameters};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "factscope-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    seed: u64,
    n_params: usize,
    payload_sha256: String,
    tensor_order: Vec<String>,
}

fn payload_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(params: &Parameters, path: &Path) -> Result<()> {
    let payload = payload_bytes(&params.data);
    let header = Header {
        format: MAGIC.into(),
        version: CHECKPOINT_VERSION,
        config: params.cfg,
        seed: params.cfg.seed,
        n_params: params.data.len(),
        payload_sha256: sha256_hex(&payload),
        tensor_order: params.layout.named_tensors().into_iter().map(|(n, _)| n).collect(),
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &header)?;
    f.write_all(b"\n")?;
    f.write_all(&payload)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Parameters> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end())?;
    if header.format != MAGIC || header.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint {} v{}", header.format, header.version)));
    }
    header.config.validate()?;
    let layout = ParamLayout::new(&header.config);
    if layout.total != header.n_params {
        return Err(Error::Format(format!(
            "header claims {} params, config implies {}",
            header.n_params, layout.total
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != layout.total * 4 {
        return Err(Error::Format(format!("payload has {} bytes, expected {}", payload.len(), layout.total * 4)));
    }
    if sha256_hex(&payload) != header.payload_sha256 {
        return Err(Error::Format("checkpoint payload checksum mismatch".into()));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Parameters { cfg: header.config, layout, data })
}
