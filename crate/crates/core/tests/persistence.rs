//! Checkpoint format: round trips, corruption guards and a hand-authored
//! fixture.

mod common;

use apdm_core::checkpoint::{
    decode_params, encode_params, load_checkpoint, read_params, save_checkpoint, sidecar_path, CheckpointMeta,
    ScheduleParams,
};
use apdm_core::ApdmError;
use common::*;

fn meta(hidden: &[usize]) -> CheckpointMeta {
    CheckpointMeta {
        arch: arch(hidden),
        schedule: ScheduleParams {
            steps: 50,
            beta_start: 1e-3,
            beta_end: 0.2,
        },
        seed: 7,
        stage: "pretrain".into(),
    }
}

fn format_field(bytes: &[u8]) -> &'static str {
    match decode_params(bytes) {
        Err(ApdmError::Format { field, .. }) => field,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn save_load_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (k, hidden) in ARCHS.iter().enumerate() {
        let m = model(hidden, k as u64);
        let path = dir.path().join(format!("m{k}.ckpt"));
        save_checkpoint(&m, &path, &meta(hidden)).unwrap();
        let (back, back_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(back.params.to_le_bytes(), m.params.to_le_bytes());
        assert_eq!(back.arch, m.arch);
        assert_eq!(back_meta, meta(hidden));
        // re-saving reproduces the file
        let again = dir.path().join(format!("m{k}b.ckpt"));
        save_checkpoint(&back, &again, &back_meta).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
        assert_eq!(std::fs::read(sidecar_path(&path)).unwrap(), std::fs::read(sidecar_path(&again)).unwrap());
    }
}

#[test]
fn special_values_survive() {
    let values = [0.0, -0.0, f64::MIN_POSITIVE, 1e308, -3.5e-300, std::f64::consts::PI];
    let back = decode_params(&encode_params(&values)).unwrap();
    for (a, b) in back.iter().zip(values) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn truncated_files_are_rejected() {
    let bytes = encode_params(&[1.0, 2.0, 3.0]);
    for cut in 0..bytes.len() {
        let err = decode_params(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, ApdmError::Format { .. }), "cut at {cut}: {err:?}");
    }
    assert_eq!(format_field(&bytes[..2]), "magic");
    assert_eq!(format_field(&bytes[..6]), "version");
    assert_eq!(format_field(&bytes[..12]), "param_count");
    assert_eq!(format_field(&bytes[..bytes.len() - 1]), "param_count");
}

#[test]
fn corrupted_headers_name_the_field() {
    let good = encode_params(&[1.0, 2.0]);
    let mut b = good.clone();
    b[3] = b'X';
    assert_eq!(format_field(&b), "magic");
    let mut b = good.clone();
    b[4] = 2;
    assert_eq!(format_field(&b), "version");
    let mut b = good.clone();
    b[8] = 3;
    assert_eq!(format_field(&b), "param_count");
    let mut b = good;
    b.extend_from_slice(&[0; 8]);
    assert_eq!(format_field(&b), "param_count");
}

#[test]
fn sidecar_arch_must_match_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = model(&[3], 1);
    save_checkpoint(&m, &path, &meta(&[3])).unwrap();
    std::fs::write(sidecar_path(&path), serde_json::to_vec(&meta(&[4])).unwrap()).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(ApdmError::Format { field: "param_count", .. })));
    assert!(save_checkpoint(&m, &path, &meta(&[4])).is_err());
}

#[test]
fn hex_fixture_parses_to_documented_params() {
    let text = include_str!("fixtures/four_params.hex");
    let hex: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .flat_map(|l| l.split_whitespace())
        .collect();
    let bytes = hex::decode(hex).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixture.ckpt");
    std::fs::write(&path, &bytes).unwrap();
    let params = read_params(&path).unwrap();
    assert_eq!(params.0, vec![1.0, -2.0, 0.5, 0.25]);
    assert_eq!(encode_params(&params), bytes);
}
