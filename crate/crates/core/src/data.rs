//! MNIST ingestion (IDX files, optionally gzip-compressed), label-sorted
//! non-IID sharding and per-device batch iteration.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{IMAGE_PIXELS, IMAGE_SIDE, NUM_CLASSES};
use crate::rng::RngStream;

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

/// Decoded IDX container.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxFile {
    Images {
        rows: usize,
        cols: usize,
        pixels: Vec<u8>,
    },
    Labels(Vec<u8>),
}

impl IdxFile {
    pub fn len(&self) -> usize {
        match self {
            IdxFile::Images { rows, cols, pixels } => pixels.len() / (rows * cols).max(1),
            IdxFile::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            expected: at + 4,
            actual: bytes.len(),
        })
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile> {
    let magic = read_u32(bytes, 0)?;
    let (header, payload) = match magic {
        IMAGES_MAGIC => {
            let count = read_u32(bytes, 4)? as usize;
            let rows = read_u32(bytes, 8)? as usize;
            let cols = read_u32(bytes, 12)? as usize;
            (16, (count, rows, cols))
        }
        LABELS_MAGIC => (8, (read_u32(bytes, 4)? as usize, 1, 1)),
        other => return Err(Error::UnsupportedMagic(other)),
    };
    let (count, rows, cols) = payload;
    let expected = header + count * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::IdxShape(format!(
            "{} trailing bytes after {count} items",
            bytes.len() - expected
        )));
    }
    let body = bytes[header..].to_vec();
    Ok(match magic {
        IMAGES_MAGIC => IdxFile::Images {
            rows,
            cols,
            pixels: body,
        },
        _ => IdxFile::Labels(body),
    })
}

pub fn encode_idx(file: &IdxFile) -> Vec<u8> {
    let mut out = Vec::new();
    match file {
        IdxFile::Images { rows, cols, pixels } => {
            out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
            out.extend_from_slice(&(file.len() as u32).to_be_bytes());
            out.extend_from_slice(&(*rows as u32).to_be_bytes());
            out.extend_from_slice(&(*cols as u32).to_be_bytes());
            out.extend_from_slice(pixels);
        }
        IdxFile::Labels(labels) => {
            out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
            out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            out.extend_from_slice(labels);
        }
    }
    out
}

/// Reads `path`, falling back to `path.gz`, and inflates gzip content.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let candidates = [path.to_path_buf(), {
        let mut p = path.as_os_str().to_owned();
        p.push(".gz");
        PathBuf::from(p)
    }];
    let found = candidates.iter().find(|p| p.is_file()).ok_or_else(|| {
        Error::io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("not found (also tried {})", candidates[1].display()),
            ),
        )
    })?;
    let raw = fs::read(found).map_err(|e| Error::io(found, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(found, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Images stored as bytes; [`Dataset::image`] scales them to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != labels.len() * IMAGE_PIXELS {
            return Err(Error::IdxShape(format!(
                "{} pixel bytes for {} labels",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                classes: NUM_CLASSES,
            });
        }
        Ok(Self { pixels, labels })
    }

    pub fn from_idx(images: IdxFile, labels: IdxFile) -> Result<Self> {
        match (images, labels) {
            (IdxFile::Images { rows, cols, pixels }, IdxFile::Labels(labels)) => {
                if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
                    return Err(Error::IdxShape(format!(
                        "images are {rows}x{cols}, expected {IMAGE_SIDE}x{IMAGE_SIDE}"
                    )));
                }
                if pixels.len() / IMAGE_PIXELS != labels.len() {
                    return Err(Error::IdxShape(format!(
                        "{} images but {} labels",
                        pixels.len() / IMAGE_PIXELS,
                        labels.len()
                    )));
                }
                Self::new(pixels, labels)
            }
            _ => Err(Error::IdxShape(
                "expected an image file and a label file".into(),
            )),
        }
    }

    pub fn parse(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Self> {
        Self::from_idx(parse_idx(image_bytes)?, parse_idx(label_bytes)?)
    }

    pub fn load(images: &Path, labels: &Path) -> Result<Self> {
        Self::parse(&read_maybe_gz(images)?, &read_maybe_gz(labels)?)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    pub fn image(&self, i: usize) -> Vec<f64> {
        self.raw_image(i)
            .iter()
            .map(|&p| p as f64 / 255.0)
            .collect()
    }

    pub fn to_idx(&self) -> (IdxFile, IdxFile) {
        (
            IdxFile::Images {
                rows: IMAGE_SIDE,
                cols: IMAGE_SIDE,
                pixels: self.pixels.clone(),
            },
            IdxFile::Labels(self.labels.clone()),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.raw_image(i));
            labels.push(self.labels[i]);
        }
        Self { pixels, labels }
    }

    /// The first `per_class` samples of every digit, in file order.
    pub fn desk_subset(&self, per_class: usize) -> Result<Self> {
        let mut taken = [0usize; NUM_CLASSES];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = &mut taken[self.labels[i] as usize];
                *c += 1;
                *c <= per_class
            })
            .collect();
        if let Some(short) = taken.iter().position(|&c| c < per_class) {
            return Err(Error::InvalidParam(format!(
                "class {short} has only {} samples, {per_class} requested",
                taken[short]
            )));
        }
        Ok(self.subset(&idx))
    }
}

pub fn label_histogram(labels: impl IntoIterator<Item = u8>) -> [usize; NUM_CLASSES] {
    let mut h = [0; NUM_CLASSES];
    for l in labels {
        h[l as usize] += 1;
    }
    h
}

/// Which label-sorted shards each device holds.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardAssignment {
    /// Sample indices of each shard, in label-sorted order.
    pub shards: Vec<Vec<usize>>,
    /// Shard ids held by each device.
    pub device_shards: Vec<Vec<usize>>,
}

impl ShardAssignment {
    pub fn num_devices(&self) -> usize {
        self.device_shards.len()
    }

    pub fn shard_size(&self) -> usize {
        self.shards.first().map_or(0, Vec::len)
    }

    pub fn device_indices(&self, k: usize) -> Vec<usize> {
        self.device_shards[k]
            .iter()
            .flat_map(|&s| self.shards[s].iter().copied())
            .collect()
    }
}

/// Sorts samples by label (stable), cuts them into `num_devices *
/// shards_per_device` equal shards and deals the shards out without
/// replacement in a random order.
pub fn shard_heterogeneous(
    labels: &[u8],
    num_devices: usize,
    shards_per_device: usize,
    rng: &mut RngStream,
) -> Result<ShardAssignment> {
    let num_shards = num_devices * shards_per_device;
    if num_shards == 0 || labels.is_empty() || !labels.len().is_multiple_of(num_shards) {
        return Err(Error::InvalidParam(format!(
            "{} samples cannot be split into {num_shards} equal shards",
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| labels[i]);
    let size = labels.len() / num_shards;
    let shards: Vec<Vec<usize>> = order.chunks_exact(size).map(<[usize]>::to_vec).collect();
    let mut ids: Vec<usize> = (0..num_shards).collect();
    ids.shuffle(rng);
    let device_shards = ids
        .chunks_exact(shards_per_device)
        .map(<[usize]>::to_vec)
        .collect();
    Ok(ShardAssignment {
        shards,
        device_shards,
    })
}

/// One epoch of batches for device `k`: its samples shuffled with `rng`, cut
/// into `len / batch_size` full batches (a short tail is dropped).
pub fn batches(
    assignment: &ShardAssignment,
    k: usize,
    batch_size: usize,
    rng: &mut RngStream,
) -> Vec<Vec<usize>> {
    let mut idx = assignment.device_indices(k);
    idx.shuffle(rng);
    idx.chunks_exact(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
