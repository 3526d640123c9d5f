use std::fs;
use std::io::Write;
use std::path::PathBuf;

use flate2::write::GzEncoder;
use flate2::Compression;

use otafl::data::{encode_idx, parse_idx, read_maybe_gz, Dataset, IdxFile};
use otafl::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn expected_pixel(i: usize, r: usize, c: usize) -> u8 {
    ((37 * i + 11 * r + 3 * c) % 256) as u8
}

#[test]
fn fixture_parses_to_known_pixels() {
    let data = Dataset::load(
        &fixture("two-images-idx3-ubyte"),
        &fixture("two-labels-idx1-ubyte"),
    )
    .unwrap();
    assert_eq!(data.len(), 2);
    assert_eq!(data.labels(), &[7, 2]);
    for i in 0..2 {
        let raw = data.raw_image(i);
        for r in 0..28 {
            for c in 0..28 {
                assert_eq!(raw[r * 28 + c], expected_pixel(i, r, c));
            }
        }
        let scaled = data.image(i);
        assert_eq!(scaled[5], f64::from(expected_pixel(i, 0, 5)) / 255.0);
    }
}

#[test]
fn fixture_round_trips_byte_for_byte() {
    for name in ["two-images-idx3-ubyte", "two-labels-idx1-ubyte"] {
        let bytes = fs::read(fixture(name)).unwrap();
        assert_eq!(encode_idx(&parse_idx(&bytes).unwrap()), bytes, "{name}");
    }
}

#[test]
fn gzip_fallback() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["two-images-idx3-ubyte", "two-labels-idx1-ubyte"] {
        let mut gz = GzEncoder::new(Vec::new(), Compression::default());
        gz.write_all(&fs::read(fixture(name)).unwrap()).unwrap();
        fs::write(dir.path().join(format!("{name}.gz")), gz.finish().unwrap()).unwrap();
    }
    let data = Dataset::load(
        &dir.path().join("two-images-idx3-ubyte"),
        &dir.path().join("two-labels-idx1-ubyte"),
    )
    .unwrap();
    assert_eq!(data.labels(), &[7, 2]);
    assert_eq!(data.raw_image(1)[0], expected_pixel(1, 0, 0));
}

#[test]
fn missing_file_names_both_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let err = read_maybe_gz(&dir.path().join("absent")).unwrap_err();
    assert!(err.is_io());
    let msg = err.to_string();
    assert!(msg.contains("absent") && msg.contains("absent.gz"), "{msg}");
}

#[test]
fn corrupted_fixture_errors() {
    let mut bytes = fs::read(fixture("two-images-idx3-ubyte")).unwrap();
    bytes[3] = 0x04;
    assert!(matches!(
        parse_idx(&bytes),
        Err(Error::UnsupportedMagic(0x0804))
    ));
    let bytes = fs::read(fixture("two-images-idx3-ubyte")).unwrap();
    assert!(matches!(
        parse_idx(&bytes[..bytes.len() - 1]),
        Err(Error::Truncated { .. })
    ));
    let labels = fs::read(fixture("two-labels-idx1-ubyte")).unwrap();
    match parse_idx(&labels).unwrap() {
        IdxFile::Labels(l) => assert_eq!(l, vec![7, 2]),
        other => panic!("{other:?}"),
    }
    // Images and labels of different lengths.
    assert!(Dataset::parse(
        &fs::read(fixture("two-images-idx3-ubyte")).unwrap(),
        &encode_idx(&IdxFile::Labels(vec![1]))
    )
    .is_err());
}
