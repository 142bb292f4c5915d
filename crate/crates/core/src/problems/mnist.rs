//! MNIST IDX ingestion and the online Permuted MNIST stream.
//!
//! IDX files are big-endian: a 4-byte magic (`0x00000803` for 3-D unsigned
//! byte image tensors, `0x00000801` for 1-D label vectors), one 4-byte size
//! per dimension, then the raw bytes. Files ending in `.gz` are inflated
//! transparently.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;

use crate::rng::{self, Stream, StreamRng};
use crate::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";

/// Decoded images (row-major `u8` pixels) and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistDataset {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl MnistDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, k: usize) -> &[u8] {
        let n = self.image_size();
        &self.pixels[k * n..(k + 1) * n]
    }

    /// Image `k` scaled to `[0, 1]`.
    pub fn image_f64(&self, k: usize) -> Vec<f64> {
        self.image(k).iter().map(|&p| scale_pixel(p)).collect()
    }
}

#[inline]
pub fn scale_pixel(p: u8) -> f64 {
    f64::from(p) / 255.0
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                expected,
                found,
            });
        }
        Ok(())
    }
}

/// Parses an IDX image file: `(rows, cols, pixels)` with `pixels.len() =
/// n · rows · cols`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        path,
    };
    c.magic(IMAGE_MAGIC)?;
    let n = c.u32()? as usize;
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let pixels = c.take(n * rows * cols)?.to_vec();
    Ok((rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        path,
    };
    c.magic(LABEL_MAGIC)?;
    let n = c.u32()? as usize;
    Ok(c.take(n)?.to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads a matching pair of IDX image and label files.
pub fn load_mnist(image_path: &Path, label_path: &Path) -> Result<MnistDataset> {
    let (rows, cols, pixels) = parse_idx_images(&read_bytes(image_path)?, image_path)?;
    let labels = parse_idx_labels(&read_bytes(label_path)?, label_path)?;
    let images = pixels.len().checked_div(rows * cols).unwrap_or(0);
    if images != labels.len() {
        return Err(Error::CountMismatch {
            images,
            labels: labels.len(),
        });
    }
    if let Some((i, &l)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l as usize >= NUM_CLASSES)
    {
        return Err(Error::InvalidConfig(format!(
            "{}: label {l} at index {i} is not a digit",
            label_path.display()
        )));
    }
    Ok(MnistDataset {
        rows,
        cols,
        pixels,
        labels,
    })
}

fn find_file(dir: &Path, stem: &str) -> PathBuf {
    let plain = dir.join(stem);
    if plain.exists() {
        plain
    } else {
        dir.join(format!("{stem}.gz"))
    }
}

/// Loads the training split from `dir`, accepting plain or `.gz` files.
pub fn load_mnist_dir(dir: &Path) -> Result<MnistDataset> {
    load_mnist(&find_file(dir, TRAIN_IMAGES), &find_file(dir, TRAIN_LABELS))
}

/// Online Permuted MNIST.
///
/// Images are presented in a shuffled order under one pixel permutation;
/// every `period` examples a fresh permutation and a fresh presentation
/// order are drawn. If a period outlasts the dataset, the order is
/// reshuffled at the end of each pass.
#[derive(Debug, Clone)]
pub struct MnistStream {
    data: Arc<MnistDataset>,
    period: u64,
    perm: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    in_period: u64,
    permutations: u64,
    rng: StreamRng,
}

impl MnistStream {
    pub fn new(data: Arc<MnistDataset>, period: u64, seed: u64) -> Result<Self> {
        let mut s = Self::with_identity(data, period, seed)?;
        s.perm.shuffle(&mut s.rng);
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    /// Like [`MnistStream::new`] but the first period uses the identity
    /// permutation and the dataset's own order.
    pub fn with_identity(data: Arc<MnistDataset>, period: u64, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidConfig("empty MNIST dataset".into()));
        }
        if period == 0 {
            return Err(Error::InvalidConfig(
                "permutation period must be >= 1".into(),
            ));
        }
        Ok(Self {
            perm: (0..data.image_size()).collect(),
            order: (0..data.len()).collect(),
            data,
            period,
            cursor: 0,
            in_period: 0,
            permutations: 1,
            rng: rng::stream(seed, Stream::Data),
        })
    }

    pub fn input_width(&self) -> usize {
        self.data.image_size()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Permutations used so far, including the current one.
    pub fn permutations(&self) -> u64 {
        self.permutations
    }

    /// Writes the next permuted image into `x` and returns its label.
    pub fn next_into(&mut self, x: &mut [f64]) -> (u8, usize) {
        if self.in_period == self.period {
            self.perm.shuffle(&mut self.rng);
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.in_period = 0;
            self.permutations += 1;
        }
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let k = self.order[self.cursor];
        self.cursor += 1;
        self.in_period += 1;
        let img = self.data.image(k);
        for (xi, &p) in x.iter_mut().zip(&self.perm) {
            *xi = scale_pixel(img[p]);
        }
        (self.data.labels[k], k)
    }

    pub fn next_sample(&mut self) -> (Vec<f64>, u8) {
        let mut x = vec![0.0; self.input_width()];
        let (label, _) = self.next_into(&mut x);
        (x, label)
    }
}
