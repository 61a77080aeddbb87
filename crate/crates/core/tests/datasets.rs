use metaquant::datasets::{load_idx, make_synthetic, write_idx, Split, SplitFractions, SyntheticKind};

#[test]
fn class_frequencies_within_three_sigma() {
    let n = 10_000;
    for (kind, k) in [(SyntheticKind::Blobs, 3), (SyntheticKind::Spirals, 5)] {
        let ds = make_synthetic(kind, n, k, 0.1, 31).unwrap();
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        for class in 0..k {
            let freq = ds.labels.iter().filter(|&&l| l == class).count() as f64 / n as f64;
            assert!((freq - p).abs() <= 3.0 * sigma, "{kind:?} class {class}: {freq}");
        }
    }
}

#[test]
fn idx_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = (dir.path().join("images.idx"), dir.path().join("labels.idx"));
    let (rows, cols) = (4, 3);
    let pixels: Vec<u8> = (0..3 * rows * cols).map(|i| (i * 37 % 256) as u8).collect();
    let tags = [2u8, 0, 7];
    write_idx(&images, &labels, &pixels, &tags, rows, cols).unwrap();

    let ds = load_idx(&images, &labels).unwrap();
    assert_eq!(ds.features.shape(), &[3, 1, rows, cols]);
    assert_eq!(ds.labels, vec![2, 0, 7]);
    assert_eq!(ds.class_count, 8);
    let back: Vec<u8> = ds.features.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
    assert_eq!(back, pixels);
    for (&v, &p) in ds.features.data().iter().zip(&pixels) {
        assert_eq!(v.to_bits(), (p as f32 / 255.0).to_bits());
    }

    let raw = std::fs::read(&images).unwrap();
    assert_eq!(&raw[..4], &[0, 0, 8, 3]);
    assert_eq!(raw.len(), 16 + pixels.len());
}

#[test]
fn truncated_idx_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = (dir.path().join("i"), dir.path().join("l"));
    write_idx(&images, &labels, &[1, 2, 3, 4], &[0, 1], 2, 1).unwrap();
    let mut raw = std::fs::read(&images).unwrap();
    raw.pop();
    std::fs::write(&images, raw).unwrap();
    assert!(load_idx(&images, &labels).is_err());
}

#[test]
fn split_membership_depends_only_on_seed_and_fractions() {
    let base = make_synthetic(SyntheticKind::Spirals, 500, 3, 0.1, 4).unwrap();
    let a = base.clone().with_splits(SplitFractions::default(), 9).unwrap();
    let b = base.clone().with_splits(SplitFractions::default(), 9).unwrap();
    let c = base.with_splits(SplitFractions::default(), 10).unwrap();
    assert_eq!(a.splits, b.splits);
    assert_ne!(a.splits, c.splits);
    let counts: Vec<usize> = [Split::Train, Split::Val, Split::Test].iter().map(|&s| a.indices(s).len()).collect();
    assert_eq!(counts, vec![400, 50, 50]);
}

#[test]
fn rasterized_spirals_keep_labels() {
    let ds = make_synthetic(SyntheticKind::Spirals, 60, 3, 0.05, 2).unwrap();
    let img = ds.rasterize(12, 1.0).unwrap();
    assert_eq!(img.features.shape(), &[60, 1, 12, 12]);
    assert_eq!(img.labels, ds.labels);
    assert!(img.features.data().iter().all(|v| (0.0..=1.0).contains(v)));
}
