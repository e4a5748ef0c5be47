//! Versioned binary model checkpoint.
//!
//! Layout: magic `DLGPCKPT`, u32 version, u32 header length, JSON header
//! (architecture specs, tensor manifest, normalization stats, `r_min`, and a
//! config echo), then the raw little-endian f64 payload of every tensor in
//! manifest order. Serialization is deterministic and round-trips exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DlgpdParams, NormStats};
use crate::nets::{DecoderParams, DecoderSpec, EncoderParams, EncoderSpec};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DLGPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    encoder_spec: EncoderSpec,
    decoder_spec: DecoderSpec,
    r_min: f64,
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
    /// Tensor shapes in canonical order ([`DlgpdParams::to_tensor_list`]).
    tensor_shapes: Vec<Vec<usize>>,
    /// Echo of the configuration that produced this checkpoint.
    config_echo: serde_json::Value,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: DlgpdParams,
    pub norm_stats: NormStats,
    pub config_echo: serde_json::Value,
}

/// Writes a checkpoint file.
pub fn save_checkpoint(
    path: &Path,
    params: &DlgpdParams,
    norm_stats: &NormStats,
    config_echo: serde_json::Value,
) -> Result<()> {
    let tensors = params.to_tensor_list();
    let header = Header {
        version: CHECKPOINT_VERSION,
        encoder_spec: params.encoder.spec.clone(),
        decoder_spec: params.decoder.spec.clone(),
        r_min: params.r_min,
        norm_mean: norm_stats.mean.clone(),
        norm_std: norm_stats.std.clone(),
        tensor_shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
        config_echo,
    };
    let header_json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())?;
    f.write_all(&header_json)?;
    let mut payload = Vec::new();
    for t in &tensors {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&payload)?;
    Ok(())
}

/// Reads a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 16 || &buf[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    if buf.len() < 16 + hlen {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let header: Header = serde_json::from_slice(&buf[16..16 + hlen])?;
    let mut pos = 16 + hlen;
    let mut tensors = Vec::with_capacity(header.tensor_shapes.len());
    for shape in &header.tensor_shapes {
        let n: usize = shape.iter().product();
        if buf.len() < pos + n * 8 {
            return Err(Error::Format("truncated checkpoint payload".into()));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(f64::from_le_bytes(
                buf[pos + i * 8..pos + (i + 1) * 8].try_into().unwrap(),
            ));
        }
        pos += n * 8;
        tensors.push(Tensor::from_vec(shape, data));
    }
    if pos != buf.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }

    // rebuild structured parameters, then overwrite with the stored tensors
    let latent_dim = header.encoder_spec.latent_dim;
    let gp_dim = latent_dim + 1;
    let mut params = DlgpdParams {
        encoder: EncoderParams::zeros(&header.encoder_spec),
        decoder: DecoderParams::zeros(&header.decoder_spec),
        transition_gps: (0..latent_dim)
            .map(|_| crate::gp::RawKernelParams::default_transition(gp_dim))
            .collect(),
        reward_gp: crate::gp::RawKernelParams::default_reward(gp_dim, 1.0),
        r_min: header.r_min,
    };
    let expected = params.to_tensor_list();
    if expected.len() != tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, architecture needs {}",
            tensors.len(),
            expected.len()
        )));
    }
    for (e, t) in expected.iter().zip(tensors.iter()) {
        if e.shape() != t.shape() {
            return Err(Error::Format(format!(
                "tensor shape mismatch: {:?} vs {:?}",
                t.shape(),
                e.shape()
            )));
        }
    }
    params.assign_from_tensor_list(&tensors);
    Ok(Checkpoint {
        params,
        norm_stats: NormStats {
            mean: header.norm_mean,
            std: header.norm_std,
        },
        config_echo: header.config_echo,
    })
}
