use ilc::checkpoint::{decode_backbone, decode_probes, encode_backbone, encode_probes, load_backbone, load_probes, save_backbone, save_probes};
use ilc::runner::Pool;
use ilc::Error;
use ilc_core::backbone::{build_backbone, mlp_spec, train_backbone, BackboneTrainConfig};
use ilc_core::data::{gen_conditional_shift, ConditionalShiftParams};
use ilc_core::features::FeatureSet;
use ilc_core::probe::{train_ilcs, HyperGrid};

fn small_params() -> ConditionalShiftParams {
    ConditionalShiftParams {
        n_train: 200,
        n_test: 100,
        ..Default::default()
    }
}

#[test]
fn trained_backbone_round_trips() {
    let (id, _) = gen_conditional_shift(&small_params(), 3).unwrap();
    let spec = mlp_spec(id.input_dim, 16, 4, id.num_classes, true);
    let cfg = BackboneTrainConfig {
        epochs: 2,
        seed: 3,
        ..Default::default()
    };
    let (mut b, report) = train_backbone(build_backbone(&spec, 3).unwrap(), &id.features(), &id.labels(), id.num_classes, &cfg).unwrap();
    b.freeze();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.ilcb");
    let sha = save_backbone(&path, &b, Some(&cfg), Some(&report)).unwrap();
    let (back, header, sha2) = load_backbone(&path).unwrap();
    assert_eq!(sha, sha2);
    assert_eq!(back, b);
    assert_eq!(header.report.as_ref(), Some(&report));
    assert_eq!(header.train_config.as_ref(), Some(&cfg));
    assert_eq!(back.predict(&id.features()).unwrap(), b.predict(&id.features()).unwrap());
}

#[test]
fn truncated_or_foreign_bytes_are_rejected() {
    let b = build_backbone(&mlp_spec(4, 3, 3, 2, false), 1).unwrap();
    let bytes = encode_backbone(&b, None, None).unwrap();
    assert!(matches!(decode_backbone(&bytes[..bytes.len() - 1]).unwrap_err(), Error::Format(_)));
    let mut foreign = bytes.clone();
    foreign[..4].copy_from_slice(b"ILCP");
    assert!(matches!(decode_backbone(&foreign).unwrap_err(), Error::Format(_)));
    let mut extra = bytes;
    extra.push(0);
    assert!(matches!(decode_backbone(&extra).unwrap_err(), Error::Format(_)));
}

#[test]
fn probe_sets_round_trip() {
    let (id, _) = gen_conditional_shift(&small_params(), 5).unwrap();
    let b = build_backbone(&mlp_spec(id.input_dim, 8, 4, id.num_classes, true), 5).unwrap();
    let fs = FeatureSet::extract("probe", &b, &id).unwrap();
    let grid = HyperGrid {
        etas: vec![1e-3, 1e-2],
        lambdas: vec![0.0, 1e-3],
        ..HyperGrid::zero_shot()
    };
    let ps = train_ilcs(&fs, &[1, 3], &grid, 3, &[5, 6], &Pool::new(2)).unwrap();
    assert_eq!(ps.len(), 2 * 4 * 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ilcp");
    save_probes(&path, &ps).unwrap();
    assert_eq!(load_probes(&path).unwrap(), ps);
    assert_eq!(decode_probes(&encode_probes(&ps).unwrap()).unwrap(), ps);
    assert!(matches!(load_probes(&dir.path().join("missing.ilcp")).unwrap_err(), Error::MissingArtifact(_)));
}

#[test]
fn pool_results_do_not_depend_on_thread_count() {
    let (id, _) = gen_conditional_shift(&small_params(), 8).unwrap();
    let b = build_backbone(&mlp_spec(id.input_dim, 8, 4, id.num_classes, true), 8).unwrap();
    let fs = FeatureSet::extract("probe", &b, &id).unwrap();
    let grid = HyperGrid::zero_shot();
    let one = train_ilcs(&fs, &[1, 2, 3], &grid, 2, &[8], &Pool::new(1)).unwrap();
    let four = train_ilcs(&fs, &[1, 2, 3], &grid, 2, &[8], &Pool::new(4)).unwrap();
    assert_eq!(encode_probes(&one).unwrap(), encode_probes(&four).unwrap());
}
