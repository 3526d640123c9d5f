use std::fs;
use std::path::Path;

use otafl::data::{encode_idx, IdxFile};

/// Writes a small MNIST-shaped data set under `dir`: `per_class` training
/// and 2 test images of each digit, each a noisy class-specific stripe.
pub fn write_toy_mnist(dir: &Path, per_class: usize) {
    fs::create_dir_all(dir).unwrap();
    let write = |prefix: &str, n: usize| {
        let mut pixels = Vec::with_capacity(n * 10 * 784);
        let mut labels = Vec::with_capacity(n * 10);
        for i in 0..n * 10 {
            let c = i % 10;
            for p in 0..784 {
                let (r, col) = (p / 28, p % 28);
                let on = r / 3 == c || col / 3 == c;
                let jitter = ((i * 131 + p * 31) % 61) as u8;
                pixels.push(if on { 180 + jitter } else { jitter });
            }
            labels.push(c as u8);
        }
        let images = IdxFile::Images {
            rows: 28,
            cols: 28,
            pixels,
        };
        fs::write(
            dir.join(format!("{prefix}-images-idx3-ubyte")),
            encode_idx(&images),
        )
        .unwrap();
        fs::write(
            dir.join(format!("{prefix}-labels-idx1-ubyte")),
            encode_idx(&IdxFile::Labels(labels)),
        )
        .unwrap();
    };
    write("train", per_class);
    write("t10k", 2);
}
