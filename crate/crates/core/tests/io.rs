use normlab::harness::data::{
    load_source, parse_idx, read_csv, synthetic_mixture, write_csv, write_idx, DataSource, Dataset, MixtureSpec,
};
use normlab::harness::HarnessError;
use normlab::numeric::io::{decode_tensor, read_tensor, write_tensor};
use normlab::numeric::{PrecisionMode, Tensor};

fn pixel_dataset() -> Dataset {
    let data = (0..6 * 4).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
    Dataset::new(Tensor::from_f64(vec![6, 4], data).unwrap(), vec![0, 1, 2, 1, 0, 2], 3)
        .unwrap()
        .with_image([2, 2, 1])
        .unwrap()
}

#[test]
fn idx_round_trip_preserves_pixels_and_labels() {
    let ds = pixel_dataset();
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    write_idx(&ds, &mut images, &mut labels).unwrap();
    assert_eq!(&images[..4], &[0, 0, 8, 3]);
    assert_eq!(&labels[..4], &[0, 0, 8, 1]);
    let back = parse_idx(&images, &labels, 3).unwrap();
    assert_eq!(back.labels(), ds.labels());
    assert_eq!(back.image(), Some([2, 2, 1]));
    for (a, b) in back.features().data().iter().zip(ds.features().data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn idx_header_by_hand() {
    // Two 1x2 images and their labels, written byte by byte.
    let mut images = vec![0, 0, 8, 3];
    for d in [2u32, 1, 2] {
        images.extend_from_slice(&d.to_be_bytes());
    }
    images.extend_from_slice(&[0, 255, 51, 102]);
    let mut labels = vec![0, 0, 8, 1];
    labels.extend_from_slice(&2u32.to_be_bytes());
    labels.extend_from_slice(&[1, 0]);
    let ds = parse_idx(&images, &labels, 2).unwrap();
    assert_eq!(ds.features().data(), &[0.0, 1.0, 0.2, 0.4]);
    assert_eq!(ds.labels(), &[1, 0]);
}

#[test]
fn idx_rejects_bad_magic_truncation_and_labels() {
    let ds = pixel_dataset();
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    write_idx(&ds, &mut images, &mut labels).unwrap();
    let mut bad = images.clone();
    bad[2] = 9;
    assert!(matches!(parse_idx(&bad, &labels, 3), Err(HarnessError::Parse { offset: 0, .. })));
    assert!(matches!(parse_idx(&images[..images.len() - 1], &labels, 3), Err(HarnessError::Parse { .. })));
    assert!(matches!(parse_idx(&images, &labels, 2), Err(HarnessError::LabelOutOfRange { label: 2, .. })));
}

#[test]
fn csv_round_trip_is_exact() {
    let ds = synthetic_mixture(&MixtureSpec { samples: 40, features: 3, ..MixtureSpec::default() }).unwrap();
    let mut buf = Vec::new();
    write_csv(&ds, &mut buf).unwrap();
    let back = read_csv(&buf[..], Some(2)).unwrap();
    assert_eq!(back.labels(), ds.labels());
    assert_eq!(back.features(), ds.features());
}

#[test]
fn csv_without_header_and_inferred_classes() {
    let ds = read_csv("2,0.5,1\n0,1.5,-1\n".as_bytes(), None).unwrap();
    assert_eq!(ds.classes(), 3);
    assert_eq!(ds.dim(), 2);
    assert!(matches!(read_csv("1,0.5\n2,x\n".as_bytes(), None), Err(HarnessError::Parse { .. })));
    assert!(matches!(read_csv("-1,0.5\n".as_bytes(), None), Err(HarnessError::LabelOutOfRange { label: -1, .. })));
}

#[test]
fn files_load_through_sources() {
    let dir = tempfile::tempdir().unwrap();
    let ds = pixel_dataset();
    let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    write_idx(&ds, &mut images, &mut labels).unwrap();
    std::fs::write(&ip, images).unwrap();
    std::fs::write(&lp, labels).unwrap();
    let loaded = load_source(&DataSource::Idx { images: ip, labels: lp, classes: 3 }).unwrap();
    assert_eq!(loaded.labels(), ds.labels());
    assert!(matches!(
        load_source(&DataSource::Csv { path: dir.path().join("missing.csv"), classes: None }),
        Err(HarnessError::Io(_))
    ));
}

#[test]
fn tensor_file_layout() {
    let t = Tensor::new(vec![1, 2], vec![1.5, -2.0], PrecisionMode::HALF).unwrap();
    let mut buf = Vec::new();
    write_tensor(&mut buf, &t).unwrap();
    let mut expected = b"NLT1".to_vec();
    expected.extend_from_slice(&[2, 2]);
    expected.extend_from_slice(&1u32.to_le_bytes());
    expected.extend_from_slice(&2u32.to_le_bytes());
    expected.extend_from_slice(&1.5f64.to_le_bytes());
    expected.extend_from_slice(&(-2.0f64).to_le_bytes());
    assert_eq!(buf, expected);
    assert_eq!(read_tensor(&buf[..]).unwrap(), t);
    let mut bad = buf.clone();
    bad[4] = 7;
    assert!(decode_tensor(&bad).is_err());
    assert!(decode_tensor(&buf[..buf.len() - 3]).is_err());
}
