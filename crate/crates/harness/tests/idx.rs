use msgt_harness::idx::{dataset_from_idx, encode_idx, load_idx, parse_idx, write_idx, IMAGES_MAGIC, LABELS_MAGIC};
use msgt_harness::HarnessError;

fn fixture() -> (Vec<u8>, Vec<u8>) {
    // Four 2×3 images with pixel value 10·image + position.
    let pixels: Vec<u8> = (0..4).flat_map(|i| (0..6).map(move |p| 10 * i + p)).collect();
    (encode_idx(IMAGES_MAGIC, &[4, 2, 3], &pixels), encode_idx(LABELS_MAGIC, &[4], &[3, 0, 2, 1]))
}

#[test]
fn four_image_fixture_parses() {
    let (images, labels) = fixture();
    let (dims, payload) = parse_idx(&images, IMAGES_MAGIC).unwrap();
    assert_eq!(dims, vec![4, 2, 3]);
    assert_eq!(payload.len(), 24);
    let ds = dataset_from_idx(&images, &labels, 4, 4).unwrap();
    assert_eq!(ds.labels, vec![3, 0, 2, 1]);
    assert_eq!((ds.height, ds.width, ds.channels), (4, 4, 3));
    // 2×3 centred on 4×4: rows 1..3, columns 0..3.
    let img = ds.image(2);
    let at = |y: usize, x: usize| img[(y * 4 + x) * 3];
    assert_eq!(at(0, 0), 0.0);
    assert_eq!(at(1, 0), 20.0 / 255.0);
    assert_eq!(at(2, 2), 25.0 / 255.0);
    assert_eq!(at(1, 3), 0.0);
    assert_eq!(img[(4 + 1) * 3..(4 + 1) * 3 + 3], [21.0 / 255.0; 3]);
}

#[test]
fn count_mismatch_is_reported() {
    let (images, _) = fixture();
    let labels = encode_idx(LABELS_MAGIC, &[3], &[0, 1, 2]);
    let err = dataset_from_idx(&images, &labels, 4, 4).unwrap_err();
    assert!(matches!(err, HarnessError::Format { .. }), "{err}");
    assert!(err.to_string().contains("3 labels for 4 images"), "{err}");
}

#[test]
fn empty_file_fails_at_offset_zero() {
    let err = parse_idx(&[], IMAGES_MAGIC).unwrap_err();
    assert!(matches!(err, HarnessError::Format { offset: 0, .. }), "{err}");
}

#[test]
fn wrong_magic_truncation_and_label_range() {
    let (images, labels) = fixture();
    assert!(matches!(parse_idx(&labels, IMAGES_MAGIC), Err(HarnessError::Format { offset: 0, .. })));
    let cut = &images[..images.len() - 1];
    assert!(matches!(parse_idx(cut, IMAGES_MAGIC), Err(HarnessError::Format { .. })));
    let mut long = images.clone();
    long.push(0);
    assert!(matches!(parse_idx(&long, IMAGES_MAGIC), Err(HarnessError::Format { .. })));
    let err = dataset_from_idx(&images, &labels, 4, 3).unwrap_err();
    assert!(matches!(err, HarnessError::Format { offset: 8, .. }), "{err}");
}

#[test]
fn write_then_load_round_trips() {
    let (images, labels) = fixture();
    let ds = dataset_from_idx(&images, &labels, 4, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    write_idx(&ds, &ip, &lp).unwrap();
    assert_eq!(load_idx(&ip, &lp, 4, 4).unwrap(), ds);
}
