#![allow(dead_code)]

use std::path::Path;

/// IDX image file bytes: magic 2051, count, rows, cols, pixels.
pub fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [2051u32, count, rows, cols] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [2049u32, labels.len() as u32] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(labels);
    b
}

/// 28×28 "digits": class `c` lights rows `2c..2c+3` plus a little
/// deterministic texture.
pub fn synthetic_digits(count: usize, offset: usize) -> (Vec<u8>, Vec<u8>) {
    let mut pixels = Vec::with_capacity(count * 784);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let c = (i + offset) % 10;
        labels.push(c as u8);
        for r in 0..28 {
            for col in 0..28 {
                let on = r >= 2 * c + 2 && r < 2 * c + 5 && (4..24).contains(&col);
                let texture = ((i * 7 + r * 3 + col * 5) % 17) as u8;
                pixels.push(if on { 230 - texture } else { texture });
            }
        }
    }
    (pixels, labels)
}

/// Writes a synthetic MNIST directory with `train` and `test` examples.
pub fn write_mnist(dir: &Path, train: usize, test: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for (prefix, n, offset) in [("train", train, 0), ("t10k", test, 3)] {
        let (px, lb) = synthetic_digits(n, offset);
        std::fs::write(
            dir.join(format!("{prefix}-images-idx3-ubyte")),
            idx_images(n as u32, 28, 28, &px),
        )
        .unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), idx_labels(&lb)).unwrap();
    }
}
