//! Network container file: human-inspectable JSON topology header followed
//! by exact little-endian f64 weight blobs.
//!
//! Byte layout:
//!
//! ```text
//! magic "GAPANET1" | u32 header_len | UTF-8 JSON header
//!   | f64 weight blobs in layer-declaration order
//!   | optional noise-head blob (declared in the header)
//!   | u32 CRC32 of every preceding byte
//! ```
//!
//! Per layer the blob order is: Linear `W` (row-major) then `b`; RMSNorm
//! `gamma`; SelfAttention `Wq`, `Wk`, `Wv`, `Wo`. Activation and softmax
//! layers carry no weights. The header also records a CRC32 of the weight
//! region alone, so topology edits cannot silently reuse stale weights.

use crate::error::{GapaError, Result};
use crate::fileio::*;
use crate::heads::NoiseHead;
use crate::network::{ActivationTag, LayerSpec, NetworkSpec, TaskKind};
use crate::tensor::{Matrix, Vector};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"GAPANET1";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    task: TaskKind,
    input_width: usize,
    gapa_points: Vec<usize>,
    layers: Vec<LayerHeader>,
    weights_crc32: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_head: Option<NoiseHeadHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerHeader {
    Linear { rows: usize, cols: usize },
    Activation { f: ActivationTag },
    RmsNorm { width: usize, eps: f64 },
    SelfAttention {
        qk_rows: usize,
        v_rows: usize,
        out_rows: usize,
        in_cols: usize,
        heads: usize,
        causal: bool,
    },
    SoftmaxHead,
}

#[derive(Debug, Serialize, Deserialize)]
struct NoiseHeadHeader {
    in_dim: usize,
    hidden: Option<usize>,
    floor: f64,
}

fn layer_headers(net: &NetworkSpec) -> Vec<LayerHeader> {
    net.layers()
        .iter()
        .map(|layer| match layer {
            LayerSpec::Linear { weight, .. } => LayerHeader::Linear {
                rows: weight.rows(),
                cols: weight.cols(),
            },
            LayerSpec::Activation(tag) => LayerHeader::Activation { f: *tag },
            LayerSpec::RmsNorm { gamma, eps } => LayerHeader::RmsNorm {
                width: gamma.len(),
                eps: *eps,
            },
            LayerSpec::SelfAttention {
                wq,
                wv,
                wo,
                heads,
                causal,
                ..
            } => LayerHeader::SelfAttention {
                qk_rows: wq.rows(),
                v_rows: wv.rows(),
                out_rows: wo.rows(),
                in_cols: wq.cols(),
                heads: *heads,
                causal: *causal,
            },
            LayerSpec::SoftmaxHead => LayerHeader::SoftmaxHead,
        })
        .collect()
}

fn weight_blob(net: &NetworkSpec, noise_head: Option<&NoiseHead>) -> Vec<u8> {
    let mut blob = Vec::new();
    let mut push = |vs: &[f64]| {
        for v in vs {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for layer in net.layers() {
        match layer {
            LayerSpec::Linear { weight, bias } => {
                push(weight.data());
                push(bias.data());
            }
            LayerSpec::RmsNorm { gamma, .. } => push(gamma.data()),
            LayerSpec::SelfAttention { wq, wk, wv, wo, .. } => {
                push(wq.data());
                push(wk.data());
                push(wv.data());
                push(wo.data());
            }
            LayerSpec::Activation(_) | LayerSpec::SoftmaxHead => {}
        }
    }
    if let Some(head) = noise_head {
        push(&head.flat_params());
    }
    blob
}

/// Serializes a network (and optional auxiliary noise head) to container
/// bytes.
pub fn container_bytes(net: &NetworkSpec, noise_head: Option<&NoiseHead>) -> Vec<u8> {
    let blob = weight_blob(net, noise_head);
    let header = Header {
        schema_version: SCHEMA_VERSION,
        task: net.task(),
        input_width: net.input_width(),
        gapa_points: net.gapa_points().to_vec(),
        layers: layer_headers(net),
        weights_crc32: crc32fast::hash(&blob),
        noise_head: noise_head.map(|h| NoiseHeadHeader {
            in_dim: h.in_dim(),
            hidden: h.hidden_width(),
            floor: h.floor(),
        }),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header_json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blob);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_network(net: &NetworkSpec, path: &Path) -> Result<()> {
    save_network_with_head(net, None, path)
}

pub fn save_network_with_head(
    net: &NetworkSpec,
    noise_head: Option<&NoiseHead>,
    path: &Path,
) -> Result<()> {
    let bytes = container_bytes(net, noise_head);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<NetworkSpec> {
    load_network_with_head(path).map(|(net, _)| net)
}

/// Reads the container back, verifying both CRCs and re-validating the
/// reconstructed spec. Round-trips are bit-identical on the weights.
pub fn load_network_with_head(path: &Path) -> Result<(NetworkSpec, Option<NoiseHead>)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_container(&bytes)
}

pub fn parse_container(bytes: &[u8]) -> Result<(NetworkSpec, Option<NoiseHead>)> {
    if bytes.len() < 16 {
        return Err(GapaError::CorruptFile {
            reason: "container shorter than fixed fields".into(),
        });
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(GapaError::CorruptFile {
            reason: "trailing CRC32 mismatch".into(),
        });
    }
    let mut r = body;
    read_magic(&mut r, MAGIC)?;
    let header_len = read_u32(&mut r, "header length")? as usize;
    let header_json = read_bytes(&mut r, header_len, "JSON header")?;
    let header: Header = serde_json::from_slice(&header_json).map_err(|e| {
        GapaError::CorruptFile {
            reason: format!("header JSON: {e}"),
        }
    })?;
    if header.schema_version > SCHEMA_VERSION {
        return Err(GapaError::SchemaVersionUnsupported {
            found: header.schema_version,
            supported: SCHEMA_VERSION,
        });
    }
    if crc32fast::hash(r) != header.weights_crc32 {
        return Err(GapaError::CorruptFile {
            reason: "weight-region CRC32 mismatch".into(),
        });
    }

    let mut take_f64s = |n: usize, what: &str| -> Result<Vec<f64>> {
        read_f64_vec(&mut r, n, what)
    };
    let mut layers = Vec::with_capacity(header.layers.len());
    for lh in &header.layers {
        let layer = match lh {
            LayerHeader::Linear { rows, cols } => LayerSpec::Linear {
                weight: Matrix::from_vec(*rows, *cols, take_f64s(rows * cols, "linear weight")?)?,
                bias: Vector::from_vec(take_f64s(*rows, "linear bias")?)?,
            },
            LayerHeader::Activation { f } => LayerSpec::Activation(*f),
            LayerHeader::RmsNorm { width, eps } => LayerSpec::RmsNorm {
                gamma: Vector::from_vec(take_f64s(*width, "rmsnorm gamma")?)?,
                eps: *eps,
            },
            LayerHeader::SelfAttention {
                qk_rows,
                v_rows,
                out_rows,
                in_cols,
                heads,
                causal,
            } => LayerSpec::SelfAttention {
                wq: Matrix::from_vec(*qk_rows, *in_cols, take_f64s(qk_rows * in_cols, "Wq")?)?,
                wk: Matrix::from_vec(*qk_rows, *in_cols, take_f64s(qk_rows * in_cols, "Wk")?)?,
                wv: Matrix::from_vec(*v_rows, *in_cols, take_f64s(v_rows * in_cols, "Wv")?)?,
                wo: Matrix::from_vec(*out_rows, *v_rows, take_f64s(out_rows * v_rows, "Wo")?)?,
                heads: *heads,
                causal: *causal,
            },
            LayerHeader::SoftmaxHead => LayerSpec::SoftmaxHead,
        };
        layers.push(layer);
    }
    let noise_head = match &header.noise_head {
        Some(nh) => Some(NoiseHead::from_flat_params(
            nh.in_dim,
            nh.hidden,
            nh.floor,
            &take_f64s(
                NoiseHead::param_count(nh.in_dim, nh.hidden),
                "noise head",
            )?,
        )?),
        None => None,
    };
    if !r.is_empty() {
        return Err(GapaError::CorruptFile {
            reason: format!("{} trailing bytes after weight blobs", r.len()),
        });
    }
    let net = NetworkSpec::new(layers, header.gapa_points, header.task, header.input_width)?;
    Ok((net, noise_head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn sample_net() -> NetworkSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w1 = Matrix::from_vec(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let b1 =
            Vector::from_vec((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w2 = Matrix::from_vec(2, 4, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        NetworkSpec::new(
            vec![
                LayerSpec::Linear {
                    weight: w1,
                    bias: b1,
                },
                LayerSpec::Activation(ActivationTag::Tanh),
                LayerSpec::Linear {
                    weight: w2,
                    bias: Vector::zeros(2),
                },
            ],
            vec![1],
            TaskKind::Classification,
            3,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.gapanet");
        let net = sample_net();
        save_network(&net, &path).unwrap();
        let loaded = load_network(&path).unwrap();
        assert_eq!(net, loaded);
        // Saving again produces byte-identical files.
        let path2 = dir.path().join("net2.gapanet");
        save_network(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.gapanet");
        save_network(&sample_net(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_network(&path),
            Err(GapaError::CorruptFile { .. })
        ));
    }

    #[test]
    fn flipped_weight_byte_is_corrupt() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.gapanet");
        save_network(&sample_net(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() - 20;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_network(&path),
            Err(GapaError::CorruptFile { .. })
        ));
    }

    #[test]
    fn future_schema_version_is_rejected() {
        let net = sample_net();
        let mut bytes = container_bytes(&net, None);
        // Bump the version field inside the JSON header, then rewrite both CRCs.
        let header_len =
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[12..12 + header_len].to_vec()).unwrap();
        let bumped = json.replace("\"schema_version\":1", "\"schema_version\":9");
        assert_ne!(json, bumped);
        bytes.splice(12..12 + header_len, bumped.into_bytes());
        let body_len = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body_len]);
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        match parse_container(&bytes) {
            Err(GapaError::SchemaVersionUnsupported { found: 9, .. }) => {}
            other => panic!("expected SchemaVersionUnsupported, got {other:?}"),
        }
    }

    #[test]
    fn gapa_point_on_linear_layer_fails_validation() {
        let net = sample_net();
        let mut bytes = container_bytes(&net, None);
        let header_len =
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[12..12 + header_len].to_vec()).unwrap();
        let bad = json.replace("\"gapa_points\":[1]", "\"gapa_points\":[0]");
        assert_ne!(json, bad);
        bytes.splice(12..12 + header_len, bad.into_bytes());
        let body_len = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body_len]);
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            parse_container(&bytes),
            Err(GapaError::InvalidParameter { .. })
        ));
    }
}
