//! MNIST IDX and PNM loaders.

use std::fs;
use std::path::{Path, PathBuf};

use randdisc::{Dataset, Image, LabeledExample};

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: bad magic {found} (expected {expected})")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated file ({len} bytes, need {need})")]
    Truncated { path: PathBuf, len: usize, need: usize },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Invalid(#[from] randdisc::Error),
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>, DataError> {
    let truncated = |need| DataError::Truncated {
        path: path.to_owned(),
        len: bytes.len(),
        need,
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_owned(),
            found,
            expected: magic,
        });
    }
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(truncated(need));
    }
    let shape: Vec<usize> = (0..dims).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let need = need + shape.iter().product::<usize>();
    if bytes.len() < need {
        return Err(truncated(need));
    }
    Ok(shape)
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]`.
pub fn load_mnist_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let (images, labels) = (images.as_ref(), labels.as_ref());
    let img_bytes = read(images)?;
    let lbl_bytes = read(labels)?;
    let shape = header(&img_bytes, images, IMAGE_MAGIC, 3)?;
    let lshape = header(&lbl_bytes, labels, LABEL_MAGIC, 1)?;
    let (count, rows, cols) = (shape[0], shape[1], shape[2]);
    if count != lshape[0] {
        return Err(DataError::CountMismatch {
            images: count,
            labels: lshape[0],
        });
    }
    let pixels = &img_bytes[16..];
    let label_bytes = &lbl_bytes[8..8 + count];
    let classes = label_bytes.iter().copied().max().map_or(0, |m| m as usize + 1).max(10);
    let mut examples = Vec::with_capacity(count);
    for (i, &label) in label_bytes.iter().enumerate() {
        let raw = &pixels[i * rows * cols..(i + 1) * rows * cols];
        let data = raw.iter().map(|&b| b as f64 / 255.0).collect();
        examples.push(LabeledExample {
            image: Image::new(cols, rows, 1, data, 1.0)?,
            label: label as usize,
        });
    }
    Ok(Dataset::new(examples, classes)?)
}

/// Standard file names inside an MNIST directory.
pub fn mnist_paths(dir: impl AsRef<Path>, train: bool) -> (PathBuf, PathBuf) {
    let dir = dir.as_ref();
    let prefix = if train { "train" } else { "t10k" };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Reads one binary PGM (`P5`) or PPM (`P6`) with maxval ≤ 255, scaled
/// to `[0, 1]`.
pub fn load_pnm(path: impl AsRef<Path>) -> Result<Image, DataError> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let fail = |reason: &str| DataError::Format {
        path: path.to_owned(),
        reason: reason.to_owned(),
    };
    let mut at = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while at < bytes.len() && (bytes[at].is_ascii_whitespace() || bytes[at] == b'#') {
            if bytes[at] == b'#' {
                while at < bytes.len() && bytes[at] != b'\n' {
                    at += 1;
                }
            } else {
                at += 1;
            }
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(fail("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| fail("non-ASCII header"))?);
    }
    at += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(fail("expected P5 or P6")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| fail("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(fail("maxval must be in 1..=255"));
    }
    let need = at + w * h * channels;
    if bytes.len() < need {
        return Err(DataError::Truncated {
            path: path.to_owned(),
            len: bytes.len(),
            need,
        });
    }
    let data = bytes[at..need].iter().map(|&b| b as f64 / maxval as f64).collect();
    Ok(Image::new(w, h, channels, data, 1.0)?)
}

/// Every `.pgm`/`.ppm` file in `dir`, sorted by file name, all labelled
/// `label`.
pub fn load_pnm_dir(dir: impl AsRef<Path>, label: usize, classes: usize) -> Result<Dataset, DataError> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|source| DataError::Io {
            path: dir.to_owned(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .collect();
    paths.sort();
    let examples = paths
        .iter()
        .map(|p| load_pnm(p).map(|image| LabeledExample { image, label }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset::new(examples, classes)?)
}
