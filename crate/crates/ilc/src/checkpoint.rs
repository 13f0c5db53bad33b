//! Backbone and probe checkpoints: a magic tag, a length-prefixed JSON
//! header and little-endian `f32` parameter blocks.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ilc_core::backbone::{Backbone, BackboneTrainConfig, BackboneTrainReport, Layer, LayerSpec};
use ilc_core::probe::{Hyper, Ilc, ProbeKey, ProbeSet};
use ilc_core::Matrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BACKBONE_MAGIC: &[u8; 4] = b"ILCB";
pub const PROBE_MAGIC: &[u8; 4] = b"ILCP";
const VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn frame(magic: &[u8; 4], header: &impl Serialize) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(8 + json.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

/// Splits a framed file into its header and payload.
fn unframe<'a, H: for<'de> Deserialize<'de>>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(H, &'a [u8])> {
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(Error::Format(format!("expected magic {:?}", String::from_utf8_lossy(magic))));
    }
    let len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let body = bytes.get(8..8 + len).ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
    let header = serde_json::from_slice(body).map_err(|e| Error::Format(format!("header: {e}")))?;
    Ok((header, &bytes[8 + len..]))
}

struct F32Cursor<'a> {
    bytes: &'a [u8],
}

impl F32Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f32>> {
        let need = n * 4;
        if self.bytes.len() < need {
            return Err(Error::Format("parameter blocks are truncated".into()));
        }
        let (head, rest) = self.bytes.split_at(need);
        self.bytes = rest;
        Ok(head
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing bytes after parameters", self.bytes.len())))
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneHeader {
    pub format_version: u32,
    pub spec: Vec<LayerSpec>,
    pub num_classes: usize,
    pub init_seed: u64,
    pub train_seed: Option<u64>,
    pub frozen: bool,
    pub train_config: Option<BackboneTrainConfig>,
    pub report: Option<BackboneTrainReport>,
}

pub fn encode_backbone(b: &Backbone<f32>, train_config: Option<&BackboneTrainConfig>, report: Option<&BackboneTrainReport>) -> Result<Vec<u8>> {
    let header = BackboneHeader {
        format_version: VERSION,
        spec: b.spec(),
        num_classes: b.num_classes(),
        init_seed: b.init_seed(),
        train_seed: b.train_seed(),
        frozen: b.is_frozen(),
        train_config: train_config.cloned(),
        report: report.cloned(),
    };
    let mut out = frame(BACKBONE_MAGIC, &header)?;
    for layer in b.layers() {
        put_f32s(&mut out, layer.weight.as_slice());
        put_f32s(&mut out, &layer.bias);
    }
    Ok(out)
}

pub fn decode_backbone(bytes: &[u8]) -> Result<(Backbone<f32>, BackboneHeader)> {
    let (header, payload): (BackboneHeader, _) = unframe(bytes, BACKBONE_MAGIC)?;
    if header.format_version != VERSION {
        return Err(Error::Format(format!("unsupported backbone version {}", header.format_version)));
    }
    let mut cur = F32Cursor { bytes: payload };
    let mut layers = Vec::with_capacity(header.spec.len());
    for spec in &header.spec {
        let weight = Matrix::from_vec(spec.out_dim, spec.in_dim, cur.take(spec.out_dim * spec.in_dim)?)?;
        let bias = cur.take(spec.out_dim)?;
        layers.push(Layer {
            spec: *spec,
            weight,
            bias,
        });
    }
    cur.finish()?;
    let b = Backbone::from_layers(layers, header.frozen, header.init_seed, header.train_seed)?;
    if b.num_classes() != header.num_classes {
        return Err(Error::Format("head width disagrees with num_classes".into()));
    }
    Ok((b, header))
}

/// Writes a backbone checkpoint and returns the SHA-256 of its bytes.
pub fn save_backbone(path: &Path, b: &Backbone<f32>, train_config: Option<&BackboneTrainConfig>, report: Option<&BackboneTrainReport>) -> Result<String> {
    let bytes = encode_backbone(b, train_config, report)?;
    write_file(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Loads a checkpoint together with the SHA-256 of its bytes.
pub fn load_backbone(path: &Path) -> Result<(Backbone<f32>, BackboneHeader, String)> {
    let bytes = read_file(path)?;
    let (b, h) = decode_backbone(&bytes)?;
    Ok((b, h, sha256_hex(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub layer: usize,
    pub eta: f64,
    pub lambda: f64,
    pub seed: u64,
    pub num_classes: usize,
    pub dim: usize,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeIndex {
    pub format_version: u32,
    pub epochs: usize,
    pub val_scores: BTreeMap<usize, f64>,
    /// One entry per parameter block, in file order.
    pub probes: Vec<ProbeEntry>,
}

pub fn encode_probes(ps: &ProbeSet) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(ps.len());
    for (&layer, m) in &ps.probes {
        for (key, ilc) in m {
            let losses = ps.epoch_losses.get(&layer).and_then(|l| l.get(key)).cloned().unwrap_or_default();
            entries.push(ProbeEntry {
                layer,
                eta: key.eta,
                lambda: key.lambda,
                seed: key.seed,
                num_classes: ilc.num_classes(),
                dim: ilc.dim(),
                epoch_losses: losses,
            });
        }
    }
    let index = ProbeIndex {
        format_version: VERSION,
        epochs: ps.epochs,
        val_scores: ps.val_scores.clone(),
        probes: entries,
    };
    let mut out = frame(PROBE_MAGIC, &index)?;
    for m in ps.probes.values() {
        for ilc in m.values() {
            put_f32s(&mut out, ilc.weight.as_slice());
            put_f32s(&mut out, &ilc.bias);
        }
    }
    Ok(out)
}

pub fn decode_probes(bytes: &[u8]) -> Result<ProbeSet> {
    let (index, payload): (ProbeIndex, _) = unframe(bytes, PROBE_MAGIC)?;
    if index.format_version != VERSION {
        return Err(Error::Format(format!("unsupported probe version {}", index.format_version)));
    }
    let mut cur = F32Cursor { bytes: payload };
    let mut ps = ProbeSet {
        epochs: index.epochs,
        val_scores: index.val_scores,
        ..Default::default()
    };
    for e in index.probes {
        let weight = Matrix::from_vec(e.num_classes, e.dim, cur.take(e.num_classes * e.dim)?)?;
        let bias = cur.take(e.num_classes)?;
        let key = ProbeKey {
            eta: e.eta,
            lambda: e.lambda,
            seed: e.seed,
        };
        ps.insert(Ilc {
            layer: e.layer,
            weight,
            bias,
            hyper: Hyper {
                eta: e.eta,
                lambda: e.lambda,
            },
            seed: e.seed,
        });
        if !e.epoch_losses.is_empty() {
            ps.epoch_losses.entry(e.layer).or_default().insert(key, e.epoch_losses);
        }
    }
    cur.finish()?;
    Ok(ps)
}

pub fn save_probes(path: &Path, ps: &ProbeSet) -> Result<String> {
    let bytes = encode_probes(ps)?;
    write_file(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_probes(path: &Path) -> Result<ProbeSet> {
    decode_probes(&read_file(path)?)
}
