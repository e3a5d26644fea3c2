//! IDX (MNIST) files and normalized sample sets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::FeatureMap;
use crate::nrmf::Samples;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;
pub const MNIST_CLASSES: usize = 10;
/// Environment variable naming the directory holding the IDX files.
pub const DATA_DIR_ENV: &str = "NRMF_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Grayscale images with labels, stored as raw bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub rows: usize,
    pub cols: usize,
    /// `len × rows × cols` bytes, row-major per image.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(format!("{what} header")))
}

/// `(count, rows, cols, pixels)` from the bytes of an IDX image file.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, "image file")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "image file")? as usize;
    let rows = be_u32(bytes, 8, "image file")? as usize;
    let cols = be_u32(bytes, 12, "image file")? as usize;
    let want = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < want {
        return Err(Error::Truncated(format!("image file holds {} of {want} pixel bytes", body.len())));
    }
    Ok((n, rows, cols, body[..want].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "label file")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "label file")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated(format!("label file holds {} of {n} labels", body.len())));
    }
    Ok(body[..n].to_vec())
}

/// Load an image file and its label file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&fs::read(images)?)?;
    let labels = parse_idx_labels(&fs::read(labels)?)?;
    if labels.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= MNIST_CLASSES) {
        return Err(Error::LabelOutOfRange { label: bad as usize, classes: MNIST_CLASSES });
    }
    Ok(Dataset { rows, cols, pixels, labels })
}

/// `dir` if given, else `$NRMF_DATA_DIR`, else `fallback`.
pub fn resolve_data_dir(dir: Option<&Path>, fallback: &Path) -> PathBuf {
    match dir {
        Some(d) => d.to_path_buf(),
        None => std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| fallback.to_path_buf()),
    }
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let p = split.prefix();
    load_idx(&dir.join(format!("{p}-images-idx3-ubyte")), &dir.join(format!("{p}-labels-idx1-ubyte")))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.rows * self.cols;
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Keep `n` samples chosen by `seed`, in their original order. `n` at or
    /// above the size keeps everything.
    pub fn subsample(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        let mut pixels = Vec::with_capacity(n * self.rows * self.cols);
        for &i in &idx {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset { rows: self.rows, cols: self.cols, pixels, labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }

    /// `(v/255 − mean)/std`, one channel, after average-pooling by `factor`
    /// (1 keeps full resolution).
    pub fn to_samples(&self, factor: usize) -> Result<Samples> {
        let f = factor.max(1);
        if self.rows % f != 0 || self.cols % f != 0 {
            return Err(Error::Config(format!("{}x{} images do not pool by {f}", self.rows, self.cols)));
        }
        let (h, w) = (self.rows / f, self.cols / f);
        let mut data = Vec::with_capacity(self.len() * h * w);
        for i in 0..self.len() {
            let img = self.image(i);
            for y in 0..h {
                for x in 0..w {
                    let mut sum = 0u32;
                    for dy in 0..f {
                        for dx in 0..f {
                            sum += img[(y * f + dy) * self.cols + x * f + dx] as u32;
                        }
                    }
                    let v = sum as f64 / (f * f) as f64 / 255.0;
                    data.push((v - MNIST_MEAN) / MNIST_STD);
                }
            }
        }
        Ok(Samples {
            images: FeatureMap { n: self.len(), h, w, c: 1, data },
            labels: self.labels.iter().map(|&l| l as usize).collect(),
        })
    }
}

/// Encode images and labels as IDX files; used to build fixtures.
pub fn encode_idx(rows: usize, cols: usize, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut im = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, labels.len() as u32, rows as u32, cols as u32] {
        im.extend_from_slice(&v.to_be_bytes());
    }
    im.extend_from_slice(pixels);
    let mut lb = Vec::with_capacity(8 + labels.len());
    for v in [LABELS_MAGIC, labels.len() as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend_from_slice(labels);
    (im, lb)
}
