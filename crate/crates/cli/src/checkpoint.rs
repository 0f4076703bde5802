//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes   "EFQATCKP"
//! version  u32
//! hlen     u64       length of the JSON header
//! header   hlen bytes
//! arrays   f32 values of every array listed in the header, in order
//! digest   32 bytes  SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use efqat_core::net::{LayerParams, LayerQuant, Model, NetSpec, QuantState};
use efqat_core::quant::{Granularity, QuantParams, ScaleTransform};
use efqat_core::trainer::{TrainConfig, TrainMode};
use efqat_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"EFQATCKP";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Fp,
    Ptq,
    Trained,
}

/// Provenance stored alongside the arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub kind: CheckpointKind,
    pub mode: TrainMode,
    /// Digest of the checkpoint this one was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Metadata,
    pub model: Model,
    pub quant: Option<QuantState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantHeader {
    bits: u32,
    symmetric: bool,
    granularity: Granularity,
    transform: ScaleTransform,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerQuantHeader {
    layer: usize,
    weight: QuantHeader,
    input: QuantHeader,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: Metadata,
    net: NetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<Vec<LayerQuantHeader>>,
    arrays: Vec<ArrayHeader>,
}

fn quant_header(q: &QuantParams) -> QuantHeader {
    QuantHeader {
        bits: q.bits,
        symmetric: q.symmetric,
        granularity: q.granularity,
        transform: q.transform,
    }
}

/// Named arrays in storage order.
fn arrays(model: &Model, quant: Option<&QuantState>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    let mut push =
        |name: String, shape: &[usize], data: &[f32]| out.push((name, shape.to_vec(), data.to_vec()));
    for (i, p) in model.params.iter().enumerate() {
        match p {
            LayerParams::Affine { weight, bias } => {
                push(format!("layers.{i}.weight"), weight.shape(), weight.data());
                push(format!("layers.{i}.bias"), bias.shape(), bias.data());
            }
            LayerParams::Norm { gamma, beta, running } => {
                push(format!("layers.{i}.gamma"), gamma.shape(), gamma.data());
                push(format!("layers.{i}.beta"), beta.shape(), beta.data());
                push(
                    format!("layers.{i}.running_mean"),
                    &[running.mean.len()],
                    &running.mean,
                );
                push(
                    format!("layers.{i}.running_var"),
                    &[running.var.len()],
                    &running.var,
                );
            }
            LayerParams::None => {}
        }
    }
    for (i, lq) in quant.into_iter().flatten() {
        for (part, q) in [("weight", &lq.weight), ("input", &lq.input)] {
            push(format!("quant.{i}.{part}_scale"), &[q.scale.len()], &q.scale);
            push(
                format!("quant.{i}.{part}_zero_point"),
                &[q.zero_point.len()],
                &q.zero_point,
            );
        }
    }
    out
}

pub fn hex_digest(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let arrays = arrays(&self.model, self.quant.as_ref());
        let header = Header {
            meta: self.meta.clone(),
            net: self.model.spec.clone(),
            quant: self.quant.as_ref().map(|q| {
                q.iter()
                    .map(|(&layer, lq)| LayerQuantHeader {
                        layer,
                        weight: quant_header(&lq.weight),
                        input: quant_header(&lq.input),
                    })
                    .collect()
            }),
            arrays: arrays
                .iter()
                .map(|(name, shape, _)| ArrayHeader {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("headers serialize");
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, data) in &arrays {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Digest of the serialized checkpoint (hex SHA-256).
    pub fn digest(&self) -> String {
        let bytes = self.to_bytes();
        hex::encode(&bytes[bytes.len() - DIGEST_LEN..])
    }

    /// Writes the checkpoint and returns its digest.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(CliError::io("write checkpoint", path))?;
        Ok(hex::encode(&bytes[bytes.len() - DIGEST_LEN..]))
    }

    /// Reads and verifies a checkpoint; returns it with its digest.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(CliError::io("read checkpoint", path))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(Self, String)> {
        let bad = |msg: String| CliError::Checkpoint {
            path: path.into(),
            msg,
        };
        if bytes.len() < PREFIX_LEN + DIGEST_LEN || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (missing EFQATCKP magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version > VERSION {
            return Err(bad(format!(
                "format version {version} is newer than the supported version {VERSION}; upgrade efqat"
            )));
        }
        if version == 0 {
            return Err(bad("format version 0 is invalid".into()));
        }
        let (body, stored) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != stored {
            return Err(bad(
                "content hash mismatch; the file is corrupted or truncated".into()
            ));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_bytes = body
            .get(PREFIX_LEN..PREFIX_LEN.saturating_add(hlen))
            .ok_or_else(|| bad(format!("header length {hlen} runs past the end of the file")))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| bad(format!("malformed header: {e}")))?;

        let mut payload = &body[PREFIX_LEN + hlen..];
        let mut named: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
        for a in &header.arrays {
            let n: usize = a.shape.iter().product();
            if payload.len() < 4 * n {
                return Err(bad(format!("array `{}` is truncated", a.name)));
            }
            let (chunk, rest) = payload.split_at(4 * n);
            payload = rest;
            let data = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if named.insert(a.name.clone(), (a.shape.clone(), data)).is_some() {
                return Err(bad(format!("array `{}` appears twice", a.name)));
            }
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} bytes after the last array", payload.len())));
        }

        let mut take = |name: String, shape: &[usize]| -> Result<Vec<f32>> {
            let (s, data) = named
                .remove(&name)
                .ok_or_else(|| bad(format!("missing array `{name}`")))?;
            if s != shape {
                return Err(bad(format!(
                    "array `{name}` has shape {s:?}, the network expects {shape:?}"
                )));
            }
            Ok(data)
        };
        let mut model =
            Model::init(header.net.clone(), 0).map_err(|e| bad(format!("invalid network: {e}")))?;
        for (i, p) in model.params.iter_mut().enumerate() {
            match p {
                LayerParams::Affine { weight, bias } => {
                    *weight = Tensor::new(
                        weight.shape().to_vec(),
                        take(format!("layers.{i}.weight"), weight.shape())?,
                    )?;
                    *bias = Tensor::new(
                        bias.shape().to_vec(),
                        take(format!("layers.{i}.bias"), bias.shape())?,
                    )?;
                }
                LayerParams::Norm { gamma, beta, running } => {
                    *gamma = Tensor::new(
                        gamma.shape().to_vec(),
                        take(format!("layers.{i}.gamma"), gamma.shape())?,
                    )?;
                    *beta = Tensor::new(
                        beta.shape().to_vec(),
                        take(format!("layers.{i}.beta"), beta.shape())?,
                    )?;
                    let c = running.mean.len();
                    running.mean = take(format!("layers.{i}.running_mean"), &[c])?;
                    running.var = take(format!("layers.{i}.running_var"), &[c])?;
                }
                LayerParams::None => {}
            }
        }

        let quant = match header.quant {
            None => None,
            Some(layers) => {
                let expected = header.net.quantized_layers();
                let found: Vec<usize> = layers.iter().map(|l| l.layer).collect();
                if found != expected {
                    return Err(bad(format!(
                        "quantization parameters cover layers {found:?}, the network quantizes {expected:?}"
                    )));
                }
                let mut state = QuantState::new();
                for l in layers {
                    let i = l.layer;
                    let c_out = model.weight(i).expect("quantized layers carry weights").shape()[0];
                    let weight_len = if l.weight.granularity == Granularity::PerTensor {
                        1
                    } else {
                        c_out
                    };
                    let mut params = |part: &str, h: QuantHeader, len: usize| -> Result<QuantParams> {
                        let q = QuantParams {
                            bits: h.bits,
                            symmetric: h.symmetric,
                            granularity: h.granularity,
                            scale: take(format!("quant.{i}.{part}_scale"), &[len])?,
                            zero_point: take(format!("quant.{i}.{part}_zero_point"), &[len])?,
                            transform: h.transform,
                        };
                        q.validate()
                            .map_err(|e| bad(format!("layer {i} {part} parameters: {e}")))?;
                        Ok(q)
                    };
                    let weight = params("weight", l.weight, weight_len)?;
                    let input = params("input", l.input, 1)?;
                    state.insert(i, LayerQuant { weight, input });
                }
                Some(state)
            }
        };
        if let Some(extra) = named.keys().next() {
            return Err(bad(format!("unexpected array `{extra}`")));
        }
        let digest = hex::encode(stored);
        Ok((
            Self {
                meta: header.meta,
                model,
                quant,
            },
            digest,
        ))
    }
}

mod hex {
    pub fn encode(bytes: &[u8]) -> String {
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// First difference between two networks, phrased for an error message.
pub fn net_mismatch(expected: &NetSpec, found: &NetSpec) -> Option<String> {
    if expected == found {
        return None;
    }
    if expected.input != found.input {
        return Some(format!("input shape {:?} vs {:?}", found.input, expected.input));
    }
    if (expected.bits_w, expected.bits_a) != (found.bits_w, found.bits_a) {
        return Some(format!(
            "bit widths W{}A{} vs W{}A{}",
            found.bits_w, found.bits_a, expected.bits_w, expected.bits_a
        ));
    }
    for (i, (e, f)) in expected.layers.iter().zip(&found.layers).enumerate() {
        if e != f {
            return Some(format!("layer {i} is {f:?} vs {e:?}"));
        }
    }
    Some(format!(
        "{} layers vs {}",
        found.layers.len(),
        expected.layers.len()
    ))
}
