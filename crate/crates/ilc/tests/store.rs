use std::io::{Cursor, Read, Seek, SeekFrom};

use ilc::store::{encode_store, read_feature_set, read_store, write_feature_set, write_store, LayerBlock, Store, StoreManifest, FORMAT_VERSION};
use ilc::Error;
use ilc_core::data::DistTag;
use ilc_core::features::FeatureSet;
use ilc_core::Matrix;
use proptest::prelude::*;

fn manifest(layers: &[usize], dims: &[usize], n: usize) -> StoreManifest {
    StoreManifest {
        format_version: FORMAT_VERSION,
        split_name: "probe".into(),
        layers: layers.to_vec(),
        layer_dims: dims.to_vec(),
        num_samples: n,
        num_classes: 2,
        num_groups: 4,
        provenance: serde_json::json!({ "seed": 7, "backbone_sha256": "abc" }),
    }
}

fn block(layer: usize, n: usize, d: usize, offset: f32) -> LayerBlock {
    let data = (0..n * d).map(|i| offset + i as f32 * 0.25 - 1.0).collect();
    LayerBlock {
        layer,
        data: Matrix::from_vec(n, d, data).unwrap(),
    }
}

fn encode(m: &StoreManifest, blocks: &[LayerBlock], labels: &[usize], groups: &[usize]) -> Vec<u8> {
    let mut buf = Vec::new();
    encode_store(&mut buf, m, blocks, labels, groups).unwrap();
    buf
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ilcf");
    let m = manifest(&[1, 2, 3], &[4, 2, 5], 3);
    let blocks = vec![block(1, 3, 4, 0.0), block(2, 3, 2, 10.0), block(3, 3, 5, -3.5)];
    let crc = write_store(&path, &m, &blocks, &[0, 1, 1], &[0, 3, 2]).unwrap();
    let mut st = read_store(&path).unwrap();
    assert_eq!(st.checksum, crc);
    assert_eq!(st.manifest, m);
    assert_eq!(st.labels, vec![0, 1, 1]);
    assert_eq!(st.groups, vec![0, 3, 2]);
    assert_eq!(st.load_all().unwrap(), blocks);
    let mirror: StoreManifest = serde_json::from_slice(&std::fs::read(ilc::store::manifest_mirror_path(&path)).unwrap()).unwrap();
    assert_eq!(mirror, m);
}

#[test]
fn two_small_layers_occupy_72_payload_bytes() {
    let m = manifest(&[1, 2], &[4, 2], 3);
    let bytes = encode(&m, &[block(1, 3, 4, 0.0), block(2, 3, 2, 0.0)], &[0, 1, 0], &[0, 1, 2]);
    let mlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload = bytes.len() - 8 - mlen - 2 * 3 * 4 - 4;
    assert_eq!(payload, 72);
}

#[test]
fn any_corrupted_byte_is_detected() {
    let m = manifest(&[1, 2], &[4, 2], 3);
    let bytes = encode(&m, &[block(1, 3, 4, 0.0), block(2, 3, 2, 0.0)], &[0, 1, 0], &[0, 1, 2]);
    for i in 4..bytes.len() {
        let mut bad = bytes.clone();
        bad[i] ^= 0x5a;
        let err = Store::from_reader(Cursor::new(bad)).unwrap_err();
        assert!(matches!(err, Error::Checksum { .. }), "byte {i}: {err}");
    }
}

#[test]
fn bad_magic_is_a_format_error() {
    let m = manifest(&[1], &[2], 1);
    let mut bytes = encode(&m, &[block(1, 1, 2, 0.0)], &[0], &[0]);
    bytes[0] = b'X';
    assert!(matches!(Store::from_reader(Cursor::new(bytes)).unwrap_err(), Error::Format(_)));
}

#[test]
fn unknown_layer_is_reported() {
    let m = manifest(&[1, 2], &[4, 2], 3);
    let bytes = encode(&m, &[block(1, 3, 4, 0.0), block(2, 3, 2, 0.0)], &[0, 1, 0], &[0, 1, 2]);
    let mut st = Store::from_reader(Cursor::new(bytes)).unwrap();
    assert!(matches!(st.load_layer(5).unwrap_err(), Error::LayerNotFound(5)));
}

#[test]
fn mismatched_block_shape_is_rejected() {
    let m = manifest(&[1, 2], &[4, 2], 3);
    let mut buf = Vec::new();
    let err = encode_store(&mut buf, &m, &[block(1, 3, 4, 0.0), block(2, 3, 3, 0.0)], &[0, 1, 0], &[0, 1, 2]).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch(_)));
}

#[test]
fn missing_file_is_a_missing_artifact() {
    let err = read_store(std::path::Path::new("/nonexistent/store.ilcf")).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact(_)));
    assert_eq!(err.exit_code(), 3);
}

struct Counting<R> {
    inner: R,
    bytes: u64,
}

impl<R: Read> Read for Counting<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.bytes += n as u64;
        Ok(n)
    }
}

impl<R: Seek> Seek for Counting<R> {
    fn seek(&mut self, pos: SeekFrom) -> std::io::Result<u64> {
        self.inner.seek(pos)
    }
}

#[test]
fn loading_one_layer_reads_only_its_block() {
    let n = 50;
    let m = manifest(&[1, 2, 3], &[16, 8, 32], n);
    let blocks = vec![block(1, n, 16, 0.0), block(2, n, 8, 1.0), block(3, n, 32, 2.0)];
    let labels = vec![1; n];
    let groups = vec![2; n];
    let bytes = encode(&m, &blocks, &labels, &groups);
    let mut st = Store::from_reader(Counting {
        inner: Cursor::new(bytes),
        bytes: 0,
    })
    .unwrap();
    st.reader_mut().bytes = 0;
    let b = st.load_layer(2).unwrap();
    assert_eq!(b, blocks[1]);
    let block_size = (n * 8 * 4) as u64;
    assert!(st.reader_mut().bytes <= block_size, "read {} bytes for a {block_size}-byte block", st.reader_mut().bytes);
}

#[test]
fn feature_sets_keep_ids_and_tags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ilcf");
    let mut layers = std::collections::BTreeMap::new();
    layers.insert(1, Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    layers.insert(4, Matrix::from_vec(3, 1, vec![-1.0, 0.5, f32::MIN_POSITIVE]).unwrap());
    let fs = FeatureSet {
        name: "valid".into(),
        layers,
        labels: vec![0, 1, 2],
        groups: vec![1, 0, 1],
        sample_ids: vec![9, 1 << 40, 3],
        tags: vec![DistTag::Ood, DistTag::Id, DistTag::Ood],
        num_classes: 3,
        num_groups: 2,
    };
    write_feature_set(&path, &fs, serde_json::json!({ "seed": 1 })).unwrap();
    assert_eq!(read_feature_set(&path, None).unwrap(), fs);
    let only = read_feature_set(&path, Some(&[4])).unwrap();
    assert_eq!(only.layer_indices(), vec![4]);
    assert!(matches!(read_feature_set(&path, Some(&[2])).unwrap_err(), Error::LayerNotFound(2)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arbitrary_payloads_round_trip(
        n in 1usize..6,
        dims in proptest::collection::vec(1usize..5, 1..4),
        seed in any::<u32>(),
    ) {
        let layers: Vec<usize> = (1..=dims.len()).collect();
        let m = manifest(&layers, &dims, n);
        let blocks: Vec<LayerBlock> = layers
            .iter()
            .zip(&dims)
            .map(|(&l, &d)| {
                let data = (0..n * d)
                    .map(|i| f32::from_bits((seed as u64 * 2654435761 + i as u64 * 40503) as u32 & 0x3fff_ffff))
                    .collect();
                LayerBlock { layer: l, data: Matrix::from_vec(n, d, data).unwrap() }
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let groups: Vec<usize> = (0..n).map(|i| (i + seed as usize) % 4).collect();
        let bytes = encode(&m, &blocks, &labels, &groups);
        let mut st = Store::from_reader(Cursor::new(bytes.clone())).unwrap();
        prop_assert_eq!(&st.manifest, &m);
        let back = st.load_all().unwrap();
        for (a, b) in back.iter().zip(&blocks) {
            let (x, y): (Vec<u32>, Vec<u32>) = (
                a.data.as_slice().iter().map(|v| v.to_bits()).collect(),
                b.data.as_slice().iter().map(|v| v.to_bits()).collect(),
            );
            prop_assert_eq!(x, y);
        }
        let pos = seed as usize % bytes.len();
        let mut bad = bytes;
        bad[pos] = bad[pos].wrapping_add(1 + (seed % 255) as u8);
        prop_assert!(Store::from_reader(Cursor::new(bad)).is_err());
    }
}
