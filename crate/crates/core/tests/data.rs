use svbi::data::{
    flip_horizontal, generate_synthetic, load_image_file, normalize_pixel, prepare_data, reflect_pad, split_hash,
    DataError, Dataset, DatasetManifest,
};
use svbi::tensor::Tensor;

#[test]
fn prepare_lays_out_tensors_and_manifest() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    assert_eq!(generate_synthetic(src.path(), 6, 2).unwrap(), 60);
    let m = prepare_data(src.path(), out.path(), 1, 0.5, 4).unwrap();
    assert_eq!(m.sample_count, 60);
    assert_eq!(m.class_count, 10);
    assert_eq!(m.class_names[0], "00_disk");
    assert_eq!((m.image_height, m.image_width), (32, 32));
    assert_eq!(m.train_ids.len() + m.val_ids.len(), 60);
    // stratified: three of each class on both sides
    let label = |id: &u32| m.samples[*id as usize].label;
    for c in 0..10 {
        assert_eq!(m.val_ids.iter().filter(|i| label(i) == c).count(), 3);
    }
    assert_eq!(m.train_hash, split_hash(&m.train_ids));
    for s in &m.samples {
        let on_disk = std::fs::metadata(src.path().join(&s.path)).unwrap().len();
        assert_eq!(s.raw_bytes, on_disk);
    }
    assert!(m.mean_raw_bytes(&m.val_ids) > 0.0);

    let loaded = DatasetManifest::load(&out.path().join("manifest.json")).unwrap();
    assert_eq!(loaded, m);
    let split = loaded.load_split(out.path()).unwrap();
    assert_eq!(split.train.len(), m.train_ids.len());
    assert_eq!(split.val.ids(), &m.val_ids[..]);

    // same seed, same split
    let again = tempfile::tempdir().unwrap();
    let m2 = prepare_data(src.path(), again.path(), 1, 0.5, 4).unwrap();
    assert_eq!(m2.val_hash, m.val_hash);
}

#[test]
fn undecodable_files_are_all_listed() {
    let src = tempfile::tempdir().unwrap();
    generate_synthetic(src.path(), 1, 0).unwrap();
    let bad_a = src.path().join("00_disk").join("broken.png");
    let bad_b = src.path().join("03_plus").join("notes.png");
    std::fs::write(&bad_a, b"not an image").unwrap();
    std::fs::write(&bad_b, b"").unwrap();
    let out = tempfile::tempdir().unwrap();
    match prepare_data(src.path(), out.path(), 0, 0.2, 4) {
        Err(DataError::Undecodable(list)) => {
            assert_eq!(list, vec![bad_a, bad_b]);
        }
        other => panic!("expected an undecodable listing, got {other:?}"),
    }
}

#[test]
fn empty_source_is_an_error() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    assert!(matches!(prepare_data(src.path(), out.path(), 0, 0.2, 4), Err(DataError::Empty)));
}

#[test]
fn odd_sized_images_are_padded_reflectively() {
    // 1×1×3 row [a b c] to width 4: left pad 0, right pad 1 mirrors b
    let (p, h, w) = reflect_pad(&[1, 2, 3], 1, 1, 3, 4);
    assert_eq!((h, w), (4, 4));
    assert_eq!(&p[..4], &[1, 2, 3, 2]);
    let (p, _, w) = reflect_pad(&[1, 2, 3, 4, 5, 6], 1, 1, 6, 4);
    assert_eq!(w, 8);
    assert_eq!(&p[..8], &[2, 1, 2, 3, 4, 5, 6, 5]);
}

#[test]
fn tensor_store_round_trips() {
    let images: Vec<f32> = (0..2 * 3 * 4 * 4).map(|i| normalize_pixel((i * 7 % 256) as u8)).collect();
    let d = Dataset::new((3, 4, 4), 5, vec![7, 3], vec![4, 0], images).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.bin");
    d.write_to(&path).unwrap();
    let back = Dataset::read_from(&path).unwrap();
    assert_eq!(back.ids(), d.ids());
    assert_eq!(back.all_labels(), d.all_labels());
    assert_eq!(back.image(1), d.image(1));
    std::fs::write(&path, b"junk").unwrap();
    assert!(Dataset::read_from(&path).is_err());
}

#[test]
fn label_reads_are_counted() {
    let d = Dataset::new((1, 1, 1), 2, vec![0, 1], vec![0, 1], vec![0.0, 1.0]).unwrap();
    let before = d.label_reads();
    let _ = d.labels_for(&[1]);
    assert!(d.label_reads() > before);
    let _ = d.batch(&[0, 1]);
    let after = d.label_reads();
    let _ = d.batch(&[1]);
    assert_eq!(d.label_reads(), after);
}

#[test]
fn flipping_twice_is_identity() {
    let mut t = Tensor::from_fn([2, 3, 4, 5], |i| i as f32);
    let orig = t.clone();
    flip_horizontal(&mut t, &[true, false]);
    assert_ne!(t, orig);
    assert_eq!(&t.data()[60..], &orig.data()[60..]);
    assert_eq!(t.data()[0], 4.0);
    flip_horizontal(&mut t, &[true, false]);
    assert_eq!(t, orig);
}

#[test]
fn pixels_normalize_to_unit_range() {
    assert_eq!(normalize_pixel(0), -1.0);
    assert_eq!(normalize_pixel(255), 1.0);
}

#[test]
fn single_images_load_from_png_and_raw_planes() {
    let src = tempfile::tempdir().unwrap();
    generate_synthetic(src.path(), 1, 5).unwrap();
    let png = src.path().join("02_triangle").join("00000.png");
    let x = load_image_file(&png, 32, 32, 4).unwrap();
    assert_eq!(x.shape(), &[1, 3, 32, 32]);
    let out = tempfile::tempdir().unwrap();
    let m = prepare_data(src.path(), out.path(), 0, 0.0, 4).unwrap();
    let d = m.load_split(out.path()).unwrap().train;
    let idx = m.samples.iter().position(|s| s.path.ends_with("02_triangle/00000.png")).unwrap();
    assert_eq!(x.data(), d.image(idx));

    let raw: Vec<u8> = x.data().iter().map(|v| ((v + 1.0) * 127.5).round() as u8).collect();
    let bin = out.path().join("x.bin");
    std::fs::write(&bin, &raw).unwrap();
    assert_eq!(load_image_file(&bin, 32, 32, 4).unwrap(), x);
    std::fs::write(&bin, &raw[..100]).unwrap();
    assert!(matches!(load_image_file(&bin, 32, 32, 4), Err(DataError::Format(_))));
}
