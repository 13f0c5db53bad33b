//! The `ILCF` feature container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ILCF" | u32 manifest length | manifest JSON
//!        | labels: n × u32 | groups: n × u32
//!        | layer blocks in ascending layer order: n × d_l × f32, row-major
//!        | CRC32 of every preceding byte
//! ```
//!
//! Opening a store streams the whole file once to verify the checksum but
//! keeps only the header, labels and groups; layer blocks are read on demand.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ilc_core::data::DistTag;
use ilc_core::features::FeatureSet;
use ilc_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ILCF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format_version: u32,
    pub split_name: String,
    /// Layer index of each block; 0 denotes raw inputs.
    pub layers: Vec<usize>,
    pub layer_dims: Vec<usize>,
    pub num_samples: usize,
    pub num_classes: usize,
    pub num_groups: usize,
    pub provenance: serde_json::Value,
}

impl StoreManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {}", self.format_version)));
        }
        if self.layers.is_empty() || self.layers.len() != self.layer_dims.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} layer indices for {} layer dims",
                self.layers.len(),
                self.layer_dims.len()
            )));
        }
        if self.layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("layer indices must be strictly ascending".into()));
        }
        if self.num_samples == 0 {
            return Err(Error::ShapeMismatch("store has no samples".into()));
        }
        Ok(())
    }

    fn block_bytes(&self, i: usize) -> u64 {
        (self.num_samples * self.layer_dims[i] * 4) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBlock {
    pub layer: usize,
    pub data: Matrix<f32>,
}

struct CrcWriter<W> {
    inner: W,
    hasher: crc32fast::Hasher,
}

impl<W: Write> Write for CrcWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::ShapeMismatch(format!("{what} {v} does not fit in u32")))
}

/// Serializes a store to `w` and returns its CRC32.
pub fn encode_store<W: Write>(w: W, manifest: &StoreManifest, blocks: &[LayerBlock], labels: &[usize], groups: &[usize]) -> Result<u32> {
    manifest.validate()?;
    let n = manifest.num_samples;
    if labels.len() != n || groups.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels and {} groups for {n} samples",
            labels.len(),
            groups.len()
        )));
    }
    if blocks.len() != manifest.layers.len() {
        return Err(Error::ShapeMismatch(format!("{} blocks for {} layers", blocks.len(), manifest.layers.len())));
    }
    for ((b, &l), &d) in blocks.iter().zip(&manifest.layers).zip(&manifest.layer_dims) {
        if b.layer != l || b.data.rows() != n || b.data.cols() != d {
            return Err(Error::ShapeMismatch(format!(
                "block for layer {} is {}×{}, manifest says layer {l} is {n}×{d}",
                b.layer,
                b.data.rows(),
                b.data.cols()
            )));
        }
        if b.data.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("layer {l} contains non-finite values")));
        }
    }
    if let Some(y) = labels.iter().find(|&&y| y >= manifest.num_classes) {
        return Err(Error::ShapeMismatch(format!("label {y} outside 0..{}", manifest.num_classes)));
    }
    if let Some(g) = groups.iter().find(|&&g| g >= manifest.num_groups) {
        return Err(Error::ShapeMismatch(format!("group {g} outside 0..{}", manifest.num_groups)));
    }

    let mut w = CrcWriter {
        inner: w,
        hasher: crc32fast::Hasher::new(),
    };
    let json = serde_json::to_vec(manifest)?;
    let io = |e| Error::io("<store>", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&u32_of(json.len(), "manifest length")?.to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for ints in [labels, groups] {
        for &v in ints {
            w.write_all(&u32_of(v, "label/group")?.to_le_bytes()).map_err(io)?;
        }
    }
    for b in blocks {
        for v in b.data.as_slice() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    let crc = w.hasher.clone().finalize();
    w.inner.write_all(&crc.to_le_bytes()).map_err(io)?;
    w.inner.flush().map_err(io)?;
    Ok(crc)
}

/// Path of the human-readable manifest mirror written next to a store.
pub fn manifest_mirror_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes the store and its `.manifest.json` mirror; returns the CRC32.
pub fn write_store(path: &Path, manifest: &StoreManifest, blocks: &[LayerBlock], labels: &[usize], groups: &[usize]) -> Result<u32> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let crc = encode_store(BufWriter::new(file), manifest, blocks, labels, groups).map_err(|e| relabel(e, path))?;
    let mirror = manifest_mirror_path(path);
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    std::fs::write(&mirror, text).map_err(|e| Error::io(&mirror, e))?;
    Ok(crc)
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

/// An opened store. Layer blocks stay on disk until [`Store::load_layer`].
#[derive(Debug)]
pub struct Store<R> {
    pub manifest: StoreManifest,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub checksum: u32,
    offsets: BTreeMap<usize, (u64, usize)>,
    reader: R,
}

pub type FileStore = Store<BufReader<File>>;

/// Opens `path`, verifying magic, version and checksum.
pub fn read_store(path: &Path) -> Result<FileStore> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    Store::from_reader(BufReader::new(file)).map_err(|e| relabel(e, path))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("file is truncated".into()),
        _ => Error::io("<store>", e),
    })
}

fn read_u32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<usize>> {
    let mut buf = vec![0u8; n * 4];
    read_exact(r, &mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect())
}

impl<R: Read + Seek> Store<R> {
    pub fn from_reader(mut reader: R) -> Result<Self> {
        let io = |e| Error::io("<store>", e);
        let mut magic = [0u8; 4];
        read_exact(&mut reader, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let len = reader.seek(SeekFrom::End(0)).map_err(io)?;
        if len < 12 {
            return Err(Error::Format("file is truncated".into()));
        }

        reader.seek(SeekFrom::Start(0)).map_err(io)?;
        let mut hasher = crc32fast::Hasher::new();
        let mut remaining = len - 4;
        let mut buf = vec![0u8; 1 << 16];
        while remaining > 0 {
            let take = remaining.min(buf.len() as u64) as usize;
            read_exact(&mut reader, &mut buf[..take])?;
            hasher.update(&buf[..take]);
            remaining -= take as u64;
        }
        let mut tail = [0u8; 4];
        read_exact(&mut reader, &mut tail)?;
        let stored = u32::from_le_bytes(tail);
        let computed = hasher.finalize();
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        reader.seek(SeekFrom::Start(4)).map_err(io)?;
        let mut lenbuf = [0u8; 4];
        read_exact(&mut reader, &mut lenbuf)?;
        let mlen = u32::from_le_bytes(lenbuf) as u64;
        if 8 + mlen + 4 > len {
            return Err(Error::Format("manifest length exceeds file size".into()));
        }
        let mut json = vec![0u8; mlen as usize];
        read_exact(&mut reader, &mut json)?;
        let manifest: StoreManifest = serde_json::from_slice(&json).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        manifest.validate()?;
        let n = manifest.num_samples;
        let mut offset = 8 + mlen + 8 * n as u64;
        let mut offsets = BTreeMap::new();
        for (i, (&l, &d)) in manifest.layers.iter().zip(&manifest.layer_dims).enumerate() {
            offsets.insert(l, (offset, d));
            offset += manifest.block_bytes(i);
        }
        if offset + 4 != len {
            return Err(Error::Format(format!("expected {} bytes, file has {len}", offset + 4)));
        }
        let labels = read_u32s(&mut reader, n)?;
        let groups = read_u32s(&mut reader, n)?;
        if labels.iter().any(|&y| y >= manifest.num_classes) || groups.iter().any(|&g| g >= manifest.num_groups) {
            return Err(Error::Format("label or group out of range".into()));
        }
        Ok(Self {
            manifest,
            labels,
            groups,
            checksum: stored,
            offsets,
            reader,
        })
    }

    pub fn layers(&self) -> Vec<usize> {
        self.manifest.layers.clone()
    }

    /// Reads one layer block, touching only its byte range.
    pub fn load_layer(&mut self, layer: usize) -> Result<LayerBlock> {
        let &(offset, d) = self.offsets.get(&layer).ok_or(Error::LayerNotFound(layer))?;
        let n = self.manifest.num_samples;
        self.reader.seek(SeekFrom::Start(offset)).map_err(|e| Error::io("<store>", e))?;
        let mut buf = vec![0u8; n * d * 4];
        read_exact(&mut self.reader, &mut buf)?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(LayerBlock {
            layer,
            data: Matrix::from_vec(n, d, data)?,
        })
    }

    pub fn load_all(&mut self) -> Result<Vec<LayerBlock>> {
        self.layers().into_iter().map(|l| self.load_layer(l)).collect()
    }

    pub fn into_inner(self) -> R {
        self.reader
    }

    pub fn reader_mut(&mut self) -> &mut R {
        &mut self.reader
    }
}

fn tag_name(t: DistTag) -> &'static str {
    match t {
        DistTag::Id => "id",
        DistTag::Ood => "ood",
    }
}

fn parse_tag(s: &str) -> Result<DistTag> {
    match s {
        "id" => Ok(DistTag::Id),
        "ood" => Ok(DistTag::Ood),
        other => Err(Error::Format(format!("unknown distribution tag {other:?}"))),
    }
}

/// Writes a feature set. Sample ids and distribution tags travel in the
/// provenance under `"samples"`, next to the caller's `provenance` fields.
pub fn write_feature_set(path: &Path, fs: &FeatureSet, provenance: serde_json::Value) -> Result<u32> {
    let layers: Vec<usize> = fs.layers.keys().copied().collect();
    let layer_dims = fs.layers.values().map(|m| m.cols()).collect();
    let tags: serde_json::Value = match fs.tags.first() {
        Some(&t) if fs.tags.iter().all(|&u| u == t) => tag_name(t).into(),
        _ => fs.tags.iter().map(|&t| tag_name(t)).collect::<Vec<_>>().into(),
    };
    let mut prov = match provenance {
        serde_json::Value::Object(m) => m,
        serde_json::Value::Null => serde_json::Map::new(),
        other => {
            let mut m = serde_json::Map::new();
            m.insert("info".into(), other);
            m
        }
    };
    prov.insert("samples".into(), serde_json::json!({ "ids": fs.sample_ids, "tags": tags }));
    let manifest = StoreManifest {
        format_version: FORMAT_VERSION,
        split_name: fs.name.clone(),
        layers,
        layer_dims,
        num_samples: fs.len(),
        num_classes: fs.num_classes,
        num_groups: fs.num_groups,
        provenance: prov.into(),
    };
    let blocks: Vec<LayerBlock> = fs.layers.iter().map(|(&layer, m)| LayerBlock { layer, data: m.clone() }).collect();
    write_store(path, &manifest, &blocks, &fs.labels, &fs.groups)
}

impl<R: Read + Seek> Store<R> {
    /// Rebuilds a feature set holding `layers` (all layers when `None`).
    pub fn feature_set(&mut self, layers: Option<&[usize]>) -> Result<FeatureSet> {
        let n = self.manifest.num_samples;
        let samples = &self.manifest.provenance["samples"];
        let sample_ids: Vec<u64> = serde_json::from_value(samples["ids"].clone()).map_err(|e| Error::Format(format!("sample ids: {e}")))?;
        let tags = match &samples["tags"] {
            serde_json::Value::String(s) => vec![parse_tag(s)?; n],
            serde_json::Value::Array(a) => a
                .iter()
                .map(|v| parse_tag(v.as_str().unwrap_or("")))
                .collect::<Result<Vec<_>>>()?,
            _ => return Err(Error::Format("missing sample tags".into())),
        };
        if sample_ids.len() != n || tags.len() != n {
            return Err(Error::Format("sample metadata does not match num_samples".into()));
        }
        let wanted = match layers {
            Some(ls) => ls.to_vec(),
            None => self.layers(),
        };
        let mut out = BTreeMap::new();
        for l in wanted {
            out.insert(l, self.load_layer(l)?.data);
        }
        Ok(FeatureSet {
            name: self.manifest.split_name.clone(),
            layers: out,
            labels: self.labels.clone(),
            groups: self.groups.clone(),
            sample_ids,
            tags,
            num_classes: self.manifest.num_classes,
            num_groups: self.manifest.num_groups,
        })
    }
}

/// Opens `path` and loads it as a feature set.
pub fn read_feature_set(path: &Path, layers: Option<&[usize]>) -> Result<FeatureSet> {
    read_store(path)?.feature_set(layers)
}
