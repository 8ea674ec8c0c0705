//! Datasets: a seeded synthetic image generator plus readers for MNIST-style
//! IDX files and CIFAR binary batches.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Images in `[0, 1]` shaped `[N, C, S, S]` with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: impl Into<String>,
    ) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(Error::contract(format!(
                "images must be [N, C, S, S], got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(Error::contract(format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::contract("dataset is empty"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::contract(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    fn image_len(&self) -> usize {
        self.images.numel() / self.len()
    }

    /// Gathers the given examples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::contract(format!(
                    "index {i} out of range for {} examples",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let (images, labels) = self.batch(&(0..n).collect::<Vec<_>>())?;
        Dataset::new(images, labels, self.num_classes, self.split.clone())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    /// One smooth blob per image at a class-specific position and colour.
    #[default]
    Simple,
    /// Adds class-specific oriented texture, a distractor blob and more noise.
    Complex,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(Difficulty::Simple),
            "complex" => Ok(Difficulty::Complex),
            other => Err(Error::Config(format!(
                "unknown difficulty '{other}' (expected simple or complex)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub n_per_class: usize,
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
    pub difficulty: Difficulty,
}

struct ClassLook {
    cx: f64,
    cy: f64,
    colour: Vec<f64>,
    freq: f64,
    angle: f64,
}

fn class_look(c: usize, spec: &SyntheticSpec) -> ClassLook {
    let theta = 2.0 * PI * c as f64 / spec.num_classes as f64;
    let s = spec.size as f64;
    let radius = 0.28 * s;
    ClassLook {
        cx: (s - 1.0) / 2.0 + radius * theta.cos(),
        cy: (s - 1.0) / 2.0 + radius * theta.sin(),
        colour: (0..spec.channels)
            .map(|ch| 0.6 + 0.4 * (theta + 2.0 * PI * ch as f64 / spec.channels as f64).cos())
            .collect(),
        freq: 1.0 + (c % 4) as f64,
        angle: PI * (c % 5) as f64 / 5.0,
    }
}

/// Class-conditional blob images; example `i` has class `i % num_classes`, so
/// classes are exactly balanced.
pub fn synthetic_blobs(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.size < 8 {
        return Err(Error::Config(format!(
            "synthetic images need size >= 8, got {}",
            spec.size
        )));
    }
    if spec.num_classes == 0 || spec.n_per_class == 0 || spec.channels == 0 {
        return Err(Error::Config(
            "synthetic dataset needs classes, examples and channels".into(),
        ));
    }
    let looks: Vec<ClassLook> = (0..spec.num_classes).map(|c| class_look(c, spec)).collect();
    let (s, ch) = (spec.size, spec.channels);
    let n = spec.num_classes * spec.n_per_class;
    let width = s as f64 / 8.0;
    let (noise_std, texture) = match spec.difficulty {
        Difficulty::Simple => (0.05, 0.0),
        Difficulty::Complex => (0.12, 0.25),
    };
    let noise = Normal::new(0.0, noise_std).expect("valid std");
    let mut rng = rng::derive(Stream::Data, spec.seed, &[]);
    let mut data = Vec::with_capacity(n * ch * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.num_classes;
        let look = &looks[c];
        let jx = rng.random_range(-1.0..=1.0);
        let jy = rng.random_range(-1.0..=1.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let distractor = &looks[rng.random_range(0..spec.num_classes)];
        for colour in &look.colour {
            for y in 0..s {
                for x in 0..s {
                    let (xf, yf) = (x as f64, y as f64);
                    let d2 = (xf - look.cx - jx).powi(2) + (yf - look.cy - jy).powi(2);
                    let mut v = 0.8 * colour * (-d2 / (2.0 * width * width)).exp();
                    if spec.difficulty == Difficulty::Complex {
                        let u = xf * look.angle.cos() + yf * look.angle.sin();
                        v += texture
                            * (0.5 + 0.5 * (2.0 * PI * look.freq * u / s as f64 + phase).sin());
                        let d2 = (xf - distractor.cx).powi(2) + (yf - distractor.cy).powi(2);
                        v += 0.3 * (-d2 / (2.0 * width * width)).exp();
                    }
                    v += noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(c);
    }
    Dataset::new(
        Tensor::new([n, ch, s, s], data)?,
        labels,
        spec.num_classes,
        "synthetic",
    )
}

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::io(path, source))
}

/// Decoded IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an IDX byte buffer holding unsigned bytes (type code 0x08).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(format_err(
            0,
            format!(
                "file is {} bytes, shorter than the 4-byte magic",
                bytes.len()
            ),
        ));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(format_err(
            0,
            format!(
                "bad magic {:02x}{:02x}{:02x}{:02x}: expected 0x0008 followed by the dimension count",
                bytes[0], bytes[1], bytes[2], bytes[3]
            ),
        ));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(format_err(3, "zero dimensions"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(format_err(
            bytes.len() as u64,
            format!("header declares {rank} dimensions ({header} bytes) but file ends"),
        ));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    let actual = bytes.len() - header;
    if actual != expected {
        return Err(format_err(
            bytes.len() as u64,
            format!("dimensions {dims:?} declare {expected} data bytes, found {actual}"),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

/// Builds an IDX buffer; the inverse of [`parse_idx`].
pub fn encode_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, array.dims.len() as u8];
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

/// Loads an IDX image file (`[N, S, S]`, magic 0x0803) and its label file
/// (`[N]`, magic 0x0801). Pixels are scaled by 1/255.
pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let img = parse_idx(&read_file(images)?).map_err(|e| with_path(e, images))?;
    let lab = parse_idx(&read_file(labels)?).map_err(|e| with_path(e, labels))?;
    if img.dims.len() != 3 || img.dims[1] != img.dims[2] {
        return Err(with_path(
            format_err(
                3,
                format!("expected [N, S, S] images, found dimensions {:?}", img.dims),
            ),
            images,
        ));
    }
    if lab.dims.len() != 1 {
        return Err(with_path(
            format_err(
                3,
                format!("expected [N] labels, found dimensions {:?}", lab.dims),
            ),
            labels,
        ));
    }
    if lab.dims[0] != img.dims[0] {
        return Err(Error::Config(format!(
            "{} images but {} labels",
            img.dims[0], lab.dims[0]
        )));
    }
    let (n, s) = (img.dims[0], img.dims[1]);
    let pixels = img.data.iter().map(|&b| b as f64 / 255.0).collect();
    let labels = lab.data.iter().map(|&b| b as usize).collect();
    Dataset::new(
        Tensor::new([n, 1, s, s], pixels)?,
        labels,
        num_classes,
        "idx",
    )
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

/// CIFAR binary record layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CifarLayout {
    /// One label byte then 3072 pixel bytes.
    Cifar10,
    /// Coarse and fine label bytes then 3072 pixel bytes; the fine label is used.
    Cifar100,
}

impl CifarLayout {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarLayout::Cifar10 => 1,
            CifarLayout::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarLayout::Cifar10 => 10,
            CifarLayout::Cifar100 => 100,
        }
    }
}

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Parses CIFAR records: label byte(s) then the R, G and B planes, each row-major.
pub fn parse_cifar(bytes: &[u8], layout: CifarLayout) -> Result<Dataset> {
    let rec = layout.record_len();
    if bytes.is_empty() {
        return Err(format_err(0, "empty file"));
    }
    if !bytes.len().is_multiple_of(rec) {
        let whole = bytes.len() / rec;
        return Err(format_err(
            (whole * rec) as u64,
            format!(
                "length {} is not a multiple of the {rec}-byte record: {whole} whole records then {} stray bytes",
                bytes.len(),
                bytes.len() % rec
            ),
        ));
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, record) in bytes.chunks_exact(rec).enumerate() {
        let label = record[layout.label_bytes() - 1] as usize;
        if label >= layout.num_classes() {
            return Err(format_err(
                (i * rec + layout.label_bytes() - 1) as u64,
                format!("label {label} outside [0, {})", layout.num_classes()),
            ));
        }
        labels.push(label);
        pixels.extend(
            record[layout.label_bytes()..]
                .iter()
                .map(|&b| b as f64 / 255.0),
        );
    }
    Dataset::new(
        Tensor::new([n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?,
        labels,
        layout.num_classes(),
        "cifar",
    )
}

pub fn load_cifar_bin(path: &Path, layout: CifarLayout) -> Result<Dataset> {
    parse_cifar(&read_file(path)?, layout).map_err(|e| with_path(e, path))
}

/// Encodes a 3x32x32 dataset as CIFAR records, quantising pixels to bytes.
/// For CIFAR-100 the coarse label byte is written as 0.
pub fn encode_cifar(data: &Dataset, layout: CifarLayout) -> Result<Vec<u8>> {
    if data.images.shape()[1..] != [3, CIFAR_SIDE, CIFAR_SIDE] {
        return Err(Error::contract(format!(
            "CIFAR records hold 3x32x32 images, got {:?}",
            &data.images.shape()[1..]
        )));
    }
    let mut out = Vec::with_capacity(data.len() * layout.record_len());
    for (i, &label) in data.labels.iter().enumerate() {
        if label > u8::MAX as usize || label >= layout.num_classes() {
            return Err(Error::contract(format!(
                "label {label} does not fit the layout"
            )));
        }
        if layout == CifarLayout::Cifar100 {
            out.push(0);
        }
        out.push(label as u8);
        let px = &data.images.data()[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS];
        out.extend(
            px.iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(out)
}

pub fn write_cifar_bin(path: &Path, data: &Dataset, layout: CifarLayout) -> Result<()> {
    fs::write(path, encode_cifar(data, layout)?).map_err(|source| Error::io(path, source))
}

/// Where a named dataset lives under a data directory.
pub fn standard_paths(dir: &Path, name: &str, train: bool) -> Result<Vec<PathBuf>> {
    let files: Vec<String> = match (name, train) {
        ("mnist", true) => vec![
            "train-images-idx3-ubyte".into(),
            "train-labels-idx1-ubyte".into(),
        ],
        ("mnist", false) => vec![
            "t10k-images-idx3-ubyte".into(),
            "t10k-labels-idx1-ubyte".into(),
        ],
        ("cifar10", true) => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        ("cifar10", false) => vec!["test_batch.bin".into()],
        ("cifar100", true) => vec!["train.bin".into()],
        ("cifar100", false) => vec!["test.bin".into()],
        (other, _) => {
            return Err(Error::Config(format!(
                "unknown dataset '{other}' (expected synthetic, mnist, cifar10 or cifar100)"
            )))
        }
    };
    Ok(files.into_iter().map(|f| dir.join(f)).collect())
}

/// Loads `mnist`, `cifar10` or `cifar100` from the standard file names in `dir`.
pub fn load_named(dir: &Path, name: &str, train: bool) -> Result<Dataset> {
    let paths = standard_paths(dir, name, train)?;
    let split = if train { "train" } else { "test" };
    let mut data = match name {
        "mnist" => load_idx(&paths[0], &paths[1], 10)?,
        _ => {
            let layout = if name == "cifar10" {
                CifarLayout::Cifar10
            } else {
                CifarLayout::Cifar100
            };
            let mut bytes = Vec::new();
            for p in &paths {
                bytes.extend(read_file(p)?);
            }
            parse_cifar(&bytes, layout)?
        }
    };
    data.split = format!("{name}-{split}");
    Ok(data)
}

/// Random horizontal flip (probability 1/2) and a random crop from the image
/// zero-padded by `pad` on every side, applied independently per image.
pub fn augment(images: &Tensor, pad: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let &[n, c, s, s2] = images.shape() else {
        return Err(Error::contract(format!(
            "images must be [N, C, S, S], got {:?}",
            images.shape()
        )));
    };
    debug_assert_eq!(s, s2);
    let mut out = vec![0.0; images.numel()];
    let src = images.data();
    for i in 0..n {
        let flip = rng.random_bool(0.5);
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        for ch in 0..c {
            let base = (i * c + ch) * s * s;
            for y in 0..s {
                let sy = y as isize + dy;
                if sy < 0 || sy >= s as isize {
                    continue;
                }
                for x in 0..s {
                    let sx = x as isize + dx;
                    if sx < 0 || sx >= s as isize {
                        continue;
                    }
                    let sx = if flip {
                        s - 1 - sx as usize
                    } else {
                        sx as usize
                    };
                    out[base + y * s + x] = src[base + sy as usize * s + sx];
                }
            }
        }
    }
    Tensor::new(images.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(difficulty: Difficulty) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 10,
            n_per_class: 20,
            size: 16,
            channels: 3,
            seed: 7,
            difficulty,
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        for d in [Difficulty::Simple, Difficulty::Complex] {
            let a = synthetic_blobs(&spec(d)).unwrap();
            let b = synthetic_blobs(&spec(d)).unwrap();
            assert!(a.images.bit_eq(&b.images));
            assert_eq!(a.labels, b.labels);
            for c in 0..10 {
                assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 20);
            }
            assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(synthetic_blobs(&SyntheticSpec {
            size: 7,
            ..spec(Difficulty::Simple)
        })
        .is_err());
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let arr = IdxArray {
            dims: vec![2, 2, 2],
            data: vec![0, 255, 1, 2, 3, 4, 5, 6],
        };
        let bytes = encode_idx(&arr);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(parse_idx(&bytes).unwrap(), arr);
        match parse_idx(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { message, .. }) => assert!(
                message.contains("declare 8 data bytes, found 5"),
                "{message}"
            ),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[2] = 0x09;
        assert!(matches!(
            parse_idx(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn idx_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(
            &ip,
            encode_idx(&IdxArray {
                dims: vec![1, 2, 2],
                data: vec![0, 255, 51, 102],
            }),
        )
        .unwrap();
        fs::write(
            &lp,
            encode_idx(&IdxArray {
                dims: vec![1],
                data: vec![7],
            }),
        )
        .unwrap();
        let d = load_idx(&ip, &lp, 10).unwrap();
        assert_eq!(d.images.data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.labels, vec![7]);
    }

    #[test]
    fn cifar_round_trip() {
        let mut r = rng::derive(Stream::Data, 1, &[]);
        let pixels = (0..2 * CIFAR_PIXELS)
            .map(|_| r.random_range(0..=255u8) as f64 / 255.0)
            .collect();
        let data = Dataset::new(
            Tensor::new([2, 3, 32, 32], pixels).unwrap(),
            vec![3, 9],
            10,
            "x",
        )
        .unwrap();
        for layout in [CifarLayout::Cifar10, CifarLayout::Cifar100] {
            let bytes = encode_cifar(&data, layout).unwrap();
            assert_eq!(bytes.len(), 2 * layout.record_len());
            let back = parse_cifar(&bytes, layout).unwrap();
            assert!(back.images.bit_eq(&data.images));
            assert_eq!(back.labels, data.labels);
            assert!(matches!(
                parse_cifar(&bytes[..bytes.len() - 1], layout),
                Err(Error::Format { .. })
            ));
        }
    }

    #[test]
    fn augment_without_padding_only_flips() {
        let img = Tensor::from_fn([4, 1, 3, 3], |i| i as f64);
        let mut r = rng::derive(Stream::Augment, 0, &[]);
        let out = augment(&img, 0, &mut r).unwrap();
        for i in 0..4 {
            let a = &img.data()[i * 9..i * 9 + 9];
            let b = &out.data()[i * 9..i * 9 + 9];
            let flipped: Vec<f64> = a
                .chunks(3)
                .flat_map(|row| row.iter().rev().copied())
                .collect();
            assert!(b == a || b == flipped.as_slice());
        }
    }
}
