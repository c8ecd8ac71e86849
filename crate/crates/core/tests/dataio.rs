use qdsnn::data::{load_idx, load_mnist, write_idx, Split, IMAGE_MAGIC, LABEL_MAGIC};
use qdsnn::Error;

fn fixture(dir: &std::path::Path, n: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    let ip = dir.join("img");
    let lp = dir.join("lbl");
    let pixels: Vec<u8> = (0..n * 9).map(|i| (i * 37 % 256) as u8).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    write_idx(&ip, &lp, &pixels, 3, 3, &labels).unwrap();
    (ip, lp)
}

#[test]
fn round_trip_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = fixture(dir.path(), 12);
    let ds = load_idx(&ip, &lp, Split::Train).unwrap();
    assert_eq!(ds.len(), 12);
    assert_eq!(ds.images().shape(), &[12, 1, 3, 3]);
    assert_eq!(ds.image(0)[1], 37.0 / 255.0);
    assert!(ds.images().data().iter().all(|p| (0.0..=1.0).contains(p)));
    let again = load_idx(&ip, &lp, Split::Train).unwrap();
    assert_eq!(ds, again);
}

#[test]
fn wrong_magic() {
    let dir = tempfile::tempdir().unwrap();
    let (_, lp) = fixture(dir.path(), 3);
    // a label file where an image file is expected
    let err = load_idx(&lp, &lp, Split::Test).unwrap_err();
    match err {
        Error::WrongMagic { expected, found, .. } => {
            assert_eq!(expected, IMAGE_MAGIC);
            assert_eq!(found, LABEL_MAGIC);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, _) = fixture(dir.path(), 10);
    let d2 = dir.path().join("nine");
    std::fs::create_dir(&d2).unwrap();
    let (_, lp9) = fixture(&d2, 9);
    assert!(matches!(
        load_idx(&ip, &lp9, Split::Test),
        Err(Error::CountMismatch { images: 10, labels: 9 })
    ));
}

#[test]
fn truncated_file() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = fixture(dir.path(), 4);
    let bytes = std::fs::read(&ip).unwrap();
    std::fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(load_idx(&ip, &lp, Split::Test), Err(Error::Truncated { .. })));
    std::fs::write(&ip, &bytes[..2]).unwrap();
    assert!(matches!(load_idx(&ip, &lp, Split::Test), Err(Error::Truncated { .. })));
}

#[test]
fn bad_label() {
    let dir = tempfile::tempdir().unwrap();
    let ip = dir.path().join("i");
    let lp = dir.path().join("l");
    write_idx(&ip, &lp, &[0; 2], 1, 1, &[3, 11]).unwrap();
    assert!(matches!(load_idx(&ip, &lp, Split::Test), Err(Error::BadLabel { index: 1, label: 11, .. })));
}

#[test]
fn missing_file() {
    assert!(matches!(
        load_idx("/nonexistent/a", "/nonexistent/b", Split::Test),
        Err(Error::MissingArtifact(_))
    ));
}

#[test]
fn mnist_test_split_when_available() {
    let dir = std::env::var("QDSNN_MNIST_DIR").unwrap_or_else(|_| concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist").into());
    let Ok(ds) = load_mnist(&dir, Split::Test) else {
        eprintln!("MNIST not found under {dir}; skipping");
        return;
    };
    assert_eq!(ds.len(), 10_000);
    assert_eq!(ds.sample_shape(), &[1, 28, 28]);
}
