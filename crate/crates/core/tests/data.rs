mod common;

use std::path::{Path, PathBuf};

use cat_core::data::{IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
use cat_core::{init_network, load_mnist_idx, make_blobs, mlp_specs, split, Dataset, Error, FeatureShape, SplitTag};

fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

fn write_pair(dir: &Path, images: &[u8], labels: &[u8]) -> (PathBuf, PathBuf) {
    let i = dir.join("images.idx");
    let l = dir.join("labels.idx");
    std::fs::write(&i, images).unwrap();
    std::fs::write(&l, labels).unwrap();
    (i, l)
}

#[test]
fn parses_a_tiny_handwritten_file() {
    let dir = tempfile::tempdir().unwrap();
    let (i, l) = write_pair(dir.path(), &idx_images(2, 2, 2, &[0, 255, 51, 102, 255, 0, 0, 0]), &idx_labels(&[1, 0]));
    let d: Dataset = load_mnist_idx(&i, &l).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.dim(), 4);
    assert_eq!(d.labels(), &[1, 0]);
    assert_eq!(d.num_classes(), 2);
    assert_eq!(d.x().row(0), &[0.0, 1.0, 0.2, 0.4]);
    assert_eq!(
        d.feature_shape(),
        FeatureShape::Image {
            channels: 1,
            height: 2,
            width: 2
        }
    );
    assert_eq!(d.split_tag(), SplitTag::Train);
}

#[test]
fn round_trips_through_the_writer() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..5 * 9).map(|v| (v * 37 % 256) as u8).collect();
    let (i, l) = write_pair(dir.path(), &idx_images(5, 3, 3, &pixels), &idx_labels(&[0, 1, 2, 1, 0]));
    let d: Dataset = load_mnist_idx(&i, &l).unwrap();
    let (i2, l2) = (dir.path().join("a"), dir.path().join("b"));
    d.write_idx(&i2, &l2).unwrap();
    assert_eq!(std::fs::read(&i).unwrap(), std::fs::read(&i2).unwrap());
    assert_eq!(std::fs::read(&l).unwrap(), std::fs::read(&l2).unwrap());
}

#[test]
fn wrong_magic_names_the_observed_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = idx_images(1, 1, 2, &[0, 0]);
    img[3] = 0x01;
    let (i, l) = write_pair(dir.path(), &img, &idx_labels(&[0]));
    let err = load_mnist_idx::<f64>(&i, &l).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(err.to_string().contains("0x00000801"), "{err}");
}

#[test]
fn count_mismatch_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let (i, l) = write_pair(dir.path(), &idx_images(2, 1, 2, &[0; 4]), &idx_labels(&[0, 1, 1]));
    assert!(matches!(load_mnist_idx::<f64>(&i, &l), Err(Error::Format { .. })));
}

#[test]
fn truncated_payload_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let (i, l) = write_pair(dir.path(), &idx_images(2, 2, 2, &[0; 7]), &idx_labels(&[0, 1]));
    match load_mnist_idx::<f64>(&i, &l) {
        Err(Error::Io { source, .. }) => assert_eq!(source.kind(), std::io::ErrorKind::UnexpectedEof),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("nope");
    assert!(matches!(load_mnist_idx::<f64>(&p, &p), Err(Error::Io { .. })));
}

#[test]
fn real_mnist_headers_when_present() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let images = root.join("train-images-idx3-ubyte");
    if !images.exists() {
        eprintln!("MNIST not found under {}, skipping", root.display());
        return;
    }
    let d: Dataset = load_mnist_idx(&images, root.join("train-labels-idx1-ubyte")).unwrap();
    assert_eq!((d.len(), d.dim(), d.num_classes()), (60_000, 784, 10));
    assert!(d.x().as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn blobs_are_deterministic_and_in_range() {
    let a: Dataset = make_blobs(90, 3, 4, 0.1, 7).unwrap();
    let b: Dataset = make_blobs(90, 3, 4, 0.1, 7).unwrap();
    assert_eq!(a.x(), b.x());
    assert_eq!(a.class_counts(), vec![30, 30, 30]);
    assert!(a.x().as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(make_blobs::<f64>(5, 1, 2, 0.1, 0).is_err());
}

#[test]
fn blobs_are_linearly_separable() {
    let d: Dataset = make_blobs(400, 2, 2, 0.05, 5).unwrap();
    let mut net = init_network(&mlp_specs(2, &[], 2), 5).unwrap();
    for _ in 0..500 {
        let (_, g) = net.loss_and_grads(d.x(), d.labels(), false, true).unwrap();
        net.sgd_step(&g, 2.0).unwrap();
    }
    let acc = net.accuracy(d.x(), d.labels()).unwrap();
    assert!(acc > 0.99, "logistic fit reached {acc}");
}

#[test]
fn split_is_stratified_and_disjoint() {
    let d: Dataset = make_blobs(103, 4, 2, 0.1, 1).unwrap();
    let (train, eval) = split(&d, 0.25, 3).unwrap();
    assert_eq!(eval.len(), 26);
    assert_eq!(train.len() + eval.len(), 103);
    assert_eq!(eval.split_tag(), SplitTag::Eval);
    for (c, (&t, &e)) in train.class_counts().iter().zip(&eval.class_counts()).enumerate() {
        let total = d.class_counts()[c];
        assert_eq!(t + e, total);
        assert!((e as f64 - total as f64 * 0.25).abs() < 1.0);
    }
    let rows = |s: &Dataset| -> Vec<Vec<u64>> {
        (0..s.len()).map(|i| s.x().row(i).iter().map(|v| v.to_bits()).collect()).collect()
    };
    let tr = rows(&train);
    assert!(rows(&eval).iter().all(|r| !tr.contains(r)));
    assert!(split(&d, 1.0, 0).is_err());
}
