use msgt_core::arch::{build_model, ArchConfig, Model};
use msgt_harness::checkpoint::{decode, encode, load_into, save};
use msgt_harness::HarnessError;

fn nano() -> Model<f32> {
    build_model(&ArchConfig::nano(4), 5).unwrap()
}

#[test]
fn round_trip_is_bit_exact() {
    let model = nano();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save(&model, &path).unwrap();
    let mut other: Model<f32> = build_model(&ArchConfig::nano(4), 6).unwrap();
    load_into(&mut other, &path).unwrap();
    for (a, b) in model.params().iter().zip(other.params()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &[f32]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.tensor.data()), bits(b.tensor.data()), "{}", a.name);
    }
    assert_eq!(encode(&other), encode(&model));
}

#[test]
fn corrupted_magic_is_rejected_before_tensors() {
    let mut bytes = encode(&nano());
    bytes[0] = b'X';
    assert!(matches!(decode(&bytes), Err(HarnessError::Format { offset: 0, .. })));
    let mut v = encode(&nano());
    v[4] = 9;
    assert!(matches!(decode(&v), Err(HarnessError::Format { offset: 4, .. })));
}

#[test]
fn truncated_and_padded_files_fail() {
    let bytes = encode(&nano());
    assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(HarnessError::Format { .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode(&long), Err(HarnessError::Format { .. })));
}

#[test]
fn small_checkpoint_into_large_model_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("micro.ckpt");
    let micro: Model<f32> = build_model(&ArchConfig::micro(4), 0).unwrap();
    save(&micro, &path).unwrap();
    let mut big: Model<f32> = build_model(&ArchConfig::msg_t(4), 0).unwrap();
    let err = load_into(&mut big, &path).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, HarnessError::Model(_)), "{msg}");
    assert!(msg.contains("patch_embed.weight"), "{msg}");
}
