//! Dataset loading (IDX, CIFAR binary), synthetic blobs, normalization and
//! seeded batching.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gaussian, Tensor};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Environment variable naming the dataset root directory.
pub const DATA_ENV: &str = "INDISTILL_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Synthetic,
}

/// Per-channel statistics used to standardize images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    /// Mean and population standard deviation of each channel.
    pub fn fit(images: &Tensor) -> Self {
        let [n, c, h, w] = dims4(images);
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (idx, chunk) in images.data().chunks(plane).enumerate() {
            let ch = idx % c;
            for &v in chunk {
                mean[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
        let mut std = vec![0.0f32; c];
        for ch in 0..c {
            mean[ch] /= count;
            let var = (sq[ch] / count - mean[ch] * mean[ch]).max(0.0);
            std[ch] = var.sqrt().max(1e-6) as f32;
        }
        Normalization {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    fn map(&self, images: &Tensor, f: impl Fn(f32, f32, f32) -> f32) -> Result<Tensor> {
        let [_, c, h, w] = dims4(images);
        if c != self.mean.len() {
            return Err(Error::dim("normalize", "channels", self.mean.len(), c));
        }
        let plane = h * w;
        let mut out = images.clone();
        for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let ch = idx % c;
            for v in chunk {
                *v = f(*v, self.mean[ch], self.std[ch]);
            }
        }
        Ok(out)
    }

    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        self.map(images, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, images: &Tensor) -> Result<Tensor> {
        self.map(images, |v, m, s| v * s + m)
    }
}

fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

/// Labelled images `[n, c, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
    normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape("dataset", format!("images must be [n,c,h,w], got {:?}", images.shape())));
        }
        if images.dim(0) != labels.len() {
            return Err(Error::Format(format!(
                "{} images but {} labels",
                images.dim(0),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Format(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// `(channels, height, width)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Statistics applied by [`Dataset::normalized`], if any.
    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Standardizes the images with `stats`.
    pub fn normalized(&self, stats: &Normalization) -> Result<Self> {
        if self.normalization.is_some() {
            return Err(Error::Config("dataset is already normalized".into()));
        }
        Ok(Dataset {
            images: stats.apply(&self.images)?,
            normalization: Some(stats.clone()),
            ..self.clone()
        })
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Dataset {
            images: self.images.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        })
    }

    /// `n` samples drawn without replacement by `seed`, kept in original order.
    pub fn random_subset(&self, n: usize, seed: u64) -> Result<Self> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        self.subset(&idx)
    }

    /// Images and labels of one batch. With `flip`, each image is mirrored
    /// horizontally with probability 1/2.
    pub fn batch(&self, indices: &[usize], flip: Option<&mut ChaCha8Rng>) -> Result<(Tensor, Vec<usize>)> {
        let mut images = self.images.gather_rows(indices)?;
        if let Some(rng) = flip {
            let [n, c, h, w] = dims4(&images);
            let per = c * h * w;
            let data = images.data_mut();
            for s in 0..n {
                if rng.gen_bool(0.5) {
                    for row in data[s * per..(s + 1) * per].chunks_mut(w) {
                        row.reverse();
                    }
                }
            }
        }
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Re-encodes unnormalized images and labels as IDX files.
    pub fn to_idx_bytes(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let [c, h, w] = self.image_shape();
        if c != 1 {
            return Err(Error::Format("IDX images must have one channel".into()));
        }
        let pixels = self.raw_pixels()?;
        let mut img = Vec::with_capacity(16 + pixels.len());
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        for d in [self.len(), h, w] {
            img.extend_from_slice(&(d as u32).to_be_bytes());
        }
        img.extend_from_slice(&pixels);
        let mut lab = Vec::with_capacity(8 + self.len());
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(self.len() as u32).to_be_bytes());
        lab.extend(self.labels.iter().map(|&l| l as u8));
        Ok((img, lab))
    }

    /// Re-encodes unnormalized 3×32×32 images as CIFAR binary records.
    pub fn to_cifar_bytes(&self) -> Result<Vec<u8>> {
        if self.image_shape() != [3, 32, 32] {
            return Err(Error::Format("CIFAR records hold 3x32x32 images".into()));
        }
        let pixels = self.raw_pixels()?;
        let mut out = Vec::with_capacity(self.len() * CIFAR_RECORD);
        for (label, px) in self.labels.iter().zip(pixels.chunks(CIFAR_RECORD - 1)) {
            out.push(*label as u8);
            out.extend_from_slice(px);
        }
        Ok(out)
    }

    fn raw_pixels(&self) -> Result<Vec<u8>> {
        if self.normalization.is_some() {
            return Err(Error::Format("cannot re-encode normalized images".into()));
        }
        Ok(self
            .images
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect())
    }
}

fn pixels_to_unit(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|&b| b as f32 / 255.0).collect()
}

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses IDX image and label byte buffers.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = read_be_u32(images, 0, "IDX images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("IDX images: bad magic {magic:#010x}")));
    }
    let n = read_be_u32(images, 4, "IDX images")? as usize;
    let h = read_be_u32(images, 8, "IDX images")? as usize;
    let w = read_be_u32(images, 12, "IDX images")? as usize;
    let body = &images[16..];
    if body.len() != n * h * w {
        return Err(Error::Format(format!(
            "IDX images: expected {} pixel bytes, found {}",
            n * h * w,
            body.len()
        )));
    }
    let magic = read_be_u32(labels, 0, "IDX labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("IDX labels: bad magic {magic:#010x}")));
    }
    let m = read_be_u32(labels, 4, "IDX labels")? as usize;
    let lbody = &labels[8..];
    if lbody.len() != m {
        return Err(Error::Format(format!("IDX labels: expected {m} bytes, found {}", lbody.len())));
    }
    if m != n {
        return Err(Error::Format(format!("{n} images but {m} labels")));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Format("IDX file holds no pixels".into()));
    }
    let labels: Vec<usize> = lbody.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new(Tensor::new(vec![n, 1, h, w], pixels_to_unit(body))?, labels, classes, Split::Train)
}

/// Loads an IDX image/label file pair, pixels scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = fs::read(images_path.as_ref())?;
    let labels = fs::read(labels_path.as_ref())?;
    parse_idx(&images, &labels)
}

/// Parses concatenated CIFAR-10 binary records.
pub fn parse_cifar(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR data length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks(CIFAR_RECORD) {
        if rec[0] >= 10 {
            return Err(Error::Format(format!("CIFAR label {} outside 0..10", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10, Split::Train)
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let chunk = fs::read(p.as_ref())?;
        if chunk.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: length {} is not a multiple of {CIFAR_RECORD}",
                p.as_ref().display(),
                chunk.len()
            )));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar(&bytes)
}

/// Class-conditional Gaussian-bump images with additive noise, labels
/// assigned round-robin.
pub fn synthetic_blobs(n: usize, classes: usize, c: usize, h: usize, w: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || classes == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Config("synthetic dataset dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = (h.max(w) as f64 / 5.0).max(0.5);
    let plane = h * w;
    let prototypes: Vec<Vec<f32>> = (0..classes)
        .map(|_| {
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            let gains: Vec<f64> = (0..c).map(|_| rng.gen_range(0.3..1.0)).collect();
            let mut img = vec![0.0f32; c * plane];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        img[ch * plane + y * w + x] = (gains[ch] * (-d2 / (2.0 * sigma * sigma)).exp()) as f32;
                    }
                }
            }
            img
        })
        .collect();
    let noise = 0.15;
    let mut data = Vec::with_capacity(n * c * plane);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &label in &labels {
        data.extend(
            prototypes[label]
                .iter()
                .map(|&v| (v as f64 + noise * gaussian(&mut rng)).clamp(0.0, 1.0) as f32),
        );
    }
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, classes, Split::Synthetic)
}

/// Per-epoch shuffled partition of `0..n` into batches; the last batch may be
/// short. The permutation depends only on `(seed, epoch)`.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Generator dedicated to one epoch of a seeded run.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Supported on-disk datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    FashionMnist,
    Cifar10,
    Synthetic,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fashion-mnist" | "fmnist" => Ok(DatasetKind::FashionMnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

/// Dataset root from an explicit setting or the `INDISTILL_DATA` variable.
pub fn data_root(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
}

fn first_existing(candidates: &[PathBuf]) -> Result<PathBuf> {
    candidates
        .iter()
        .find(|p| p.is_file())
        .cloned()
        .ok_or_else(|| {
            Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("none of {candidates:?} exists"),
            ))
        })
}

/// Loads the train or test split of `kind` from `root`, pixels in `[0, 1]`.
///
/// FashionMNIST is looked up under `root/fashion-mnist/` or `root/`;
/// CIFAR-10 under `root/cifar-10-batches-bin/` or `root/`.
pub fn load_split(kind: DatasetKind, root: &Path, split: Split) -> Result<Dataset> {
    let mut ds = match kind {
        DatasetKind::FashionMnist => {
            let stem = if split == Split::Test { "t10k" } else { "train" };
            let dirs = [root.join("fashion-mnist"), root.to_path_buf()];
            let find = |suffix: &str| {
                let cands: Vec<PathBuf> = dirs.iter().map(|d| d.join(format!("{stem}-{suffix}"))).collect();
                first_existing(&cands)
            };
            load_idx(find("images-idx3-ubyte")?, find("labels-idx1-ubyte")?)?
        }
        DatasetKind::Cifar10 => {
            let names: Vec<String> = if split == Split::Test {
                vec!["test_batch.bin".into()]
            } else {
                (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
            };
            let dirs = [root.join("cifar-10-batches-bin"), root.to_path_buf()];
            let paths = names
                .iter()
                .map(|n| first_existing(&dirs.iter().map(|d| d.join(n)).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?;
            load_cifar_binary(&paths)?
        }
        DatasetKind::Synthetic => {
            return Err(Error::Config("synthetic data is generated, not loaded".into()));
        }
    };
    ds.split = split;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
        img.extend_from_slice(&[0, 17, 255, 3, 4, 5, 200, 7, 8, 9, 10, 128]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 3, 9];
        (img, lab)
    }

    #[test]
    fn idx_fixture_round_trips() {
        let (img, lab) = idx_fixture();
        let ds = parse_idx(&img, &lab).unwrap();
        assert_eq!(ds.images().shape(), &[2, 1, 2, 3]);
        assert_eq!(ds.labels(), &[3, 9]);
        assert_eq!(ds.images().data()[2], 1.0);
        assert_eq!(ds.images().data()[1], 17.0 / 255.0);
        let (img2, lab2) = ds.to_idx_bytes().unwrap();
        assert_eq!(img2, img);
        assert_eq!(lab2, lab);
    }

    #[test]
    fn idx_errors() {
        let (img, mut lab) = idx_fixture();
        let mut bad = img.clone();
        bad[3] = 4;
        assert!(matches!(parse_idx(&bad, &lab), Err(Error::Format(_))));
        assert!(matches!(parse_idx(&img[..img.len() - 1], &lab), Err(Error::Format(_))));
        lab[7] = 1;
        lab.pop();
        assert!(matches!(parse_idx(&img, &lab), Err(Error::Format(_))));
    }

    #[test]
    fn cifar_single_record() {
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i % 251) as u8));
        let ds = parse_cifar(&rec).unwrap();
        assert_eq!(ds.labels(), &[7]);
        assert_eq!(ds.images().shape(), &[1, 3, 32, 32]);
        assert_eq!(ds.images().data()[0], 0.0);
        assert_eq!(ds.images().data()[3071], (3071 % 251) as f32 / 255.0);
        assert_eq!(ds.to_cifar_bytes().unwrap(), rec);
        assert!(parse_cifar(&rec[..3000]).is_err());
    }

    #[test]
    fn synthetic_is_seeded_and_balanced() {
        let a = synthetic_blobs(101, 3, 1, 8, 8, 5).unwrap();
        let b = synthetic_blobs(101, 3, 1, 8, 8, 5).unwrap();
        assert_eq!(a, b);
        let counts: Vec<usize> = (0..3).map(|k| a.labels().iter().filter(|&&l| l == k).count()).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn batching_partitions() {
        let bs = batches(10, 4, 1, 1);
        assert_eq!(bs.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = bs.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(batches(10, 4, 1, 1), bs);
        assert_ne!(batches(10, 4, 1, 2), bs);
        assert_eq!(batches(10, 64, 1, 1).len(), 1);
    }

    #[test]
    fn normalization_inverts() {
        let ds = synthetic_blobs(20, 2, 3, 4, 4, 0).unwrap();
        let stats = Normalization::fit(ds.images());
        let normed = ds.normalized(&stats).unwrap();
        let back = stats.invert(normed.images()).unwrap();
        for (a, b) in back.data().iter().zip(ds.images().data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let refit = Normalization::fit(normed.images());
        assert!(refit.mean.iter().all(|m| m.abs() < 1e-4));
    }

    #[test]
    fn flip_mirrors_rows() {
        let ds = Dataset::new(
            Tensor::from_fn(vec![1, 1, 1, 3], |i| i as f32),
            vec![0],
            2,
            Split::Synthetic,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flips: Vec<Vec<f32>> = (0..8)
            .map(|_| ds.batch(&[0], Some(&mut rng)).unwrap().0.into_data())
            .collect();
        assert!(flips.iter().any(|f| f == &[2.0, 1.0, 0.0]));
        assert!(flips.iter().any(|f| f == &[0.0, 1.0, 2.0]));
    }
}
