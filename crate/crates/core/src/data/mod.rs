//! Images, datasets and the transformations every experiment starts from.

mod cifar;
mod ppm;
mod synth;

pub use cifar::{load_cifar10_binary, Split, CIFAR_RECORD_BYTES};
pub use ppm::{decode_ppm, encode_ppm, load_ppm, save_ppm};
pub use synth::{synth_complexity_graded, synth_with, SynthParams};

use std::collections::HashMap;
use std::path::PathBuf;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record count mismatch: {bytes} bytes is not a positive multiple of {record} bytes")]
    RecordCountMismatch { bytes: usize, record: usize },
    #[error("pixel buffer has {got} values, expected {expected}")]
    PixelCount { expected: usize, got: usize },
    #[error("pixel {index} = {value} is outside [0, 1]")]
    PixelRange { index: usize, value: f64 },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),
    #[error("image {index} has shape {got:?}, dataset shape is {expected:?}")]
    ShapeMismatch {
        index: usize,
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("duplicate image id {0}")]
    DuplicateId(u64),
    #[error("unknown image id {0}")]
    UnknownId(u64),
    #[error("{0} ids for {1} images")]
    IdCount(usize, usize),
    #[error("dataset is empty")]
    Empty,
    #[error("malformed PPM header: {0}")]
    MalformedHeader(String),
    #[error("truncated PPM payload: expected {expected} bytes, found {got}")]
    Truncated { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
    let path = path.into();
    move |source| DataError::Io { path, source }
}

/// Row-major image with interleaved channels, holding both a continuous view
/// in `[0, 1]` and the 8-bit quantized view `round(f * 255)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels_f: Vec<f64>,
    pixels_q: Vec<u8>,
}

pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

impl Image {
    pub fn from_f(
        width: usize,
        height: usize,
        channels: usize,
        pixels: Vec<f64>,
    ) -> Result<Self, DataError> {
        check_channels(channels)?;
        let expected = width * height * channels;
        if pixels.len() != expected {
            return Err(DataError::PixelCount {
                expected,
                got: pixels.len(),
            });
        }
        if let Some((index, &value)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(DataError::PixelRange { index, value });
        }
        let pixels_q = pixels.iter().map(|&v| quantize(v)).collect();
        Ok(Self {
            width,
            height,
            channels,
            pixels_f: pixels,
            pixels_q,
        })
    }

    pub fn from_q(
        width: usize,
        height: usize,
        channels: usize,
        pixels: Vec<u8>,
    ) -> Result<Self, DataError> {
        check_channels(channels)?;
        let expected = width * height * channels;
        if pixels.len() != expected {
            return Err(DataError::PixelCount {
                expected,
                got: pixels.len(),
            });
        }
        let pixels_f = pixels.iter().map(|&q| f64::from(q) / 255.0).collect();
        Ok(Self {
            width,
            height,
            channels,
            pixels_f,
            pixels_q: pixels,
        })
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Result<Self, DataError> {
        Self::from_f(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    /// Number of scalar values, `width * height * channels`.
    pub fn dim(&self) -> usize {
        self.pixels_f.len()
    }

    pub fn pixels_f(&self) -> &[f64] {
        &self.pixels_f
    }

    pub fn pixels_q(&self) -> &[u8] {
        &self.pixels_q
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels_f[(y * self.width + x) * self.channels + c]
    }

    pub fn at_q(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels_q[(y * self.width + x) * self.channels + c]
    }
}

fn check_channels(channels: usize) -> Result<(), DataError> {
    match channels {
        1 | 3 => Ok(()),
        c => Err(DataError::Channels(c)),
    }
}

/// `q / 255 + U[0, 1/256)` per value: the continuous input seen by flows.
pub fn dequantize<R: Rng + ?Sized>(pixels_q: &[u8], rng: &mut R) -> Vec<f64> {
    pixels_q
        .iter()
        .map(|&q| f64::from(q) / 255.0 + rng.gen::<f64>() / 256.0)
        .collect()
}

/// ITU-R BT.601 luma; single-channel images are returned unchanged.
pub fn to_grayscale(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let gray = img
        .pixels_f
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
        .collect();
    Image::from_f(img.width, img.height, 1, gray).expect("grayscale of a valid image is valid")
}

/// Evaluation sets and training splits. Ids are unique and follow the images
/// through every subset or reordering.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    images: Vec<Image>,
    ids: Vec<u64>,
    /// Class label (CIFAR-10) or complexity tier (synthetic data).
    labels: Option<Vec<u32>>,
    index: HashMap<u64, usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Vec<Image>,
        ids: Vec<u64>,
        labels: Option<Vec<u32>>,
    ) -> Result<Self, DataError> {
        if ids.len() != images.len() {
            return Err(DataError::IdCount(ids.len(), images.len()));
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(DataError::InvalidArgument(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.len()
                )));
            }
        }
        if let Some(first) = images.first() {
            let expected = first.shape();
            for (index, img) in images.iter().enumerate() {
                if img.shape() != expected {
                    return Err(DataError::ShapeMismatch {
                        index,
                        expected,
                        got: img.shape(),
                    });
                }
            }
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(DataError::DuplicateId(id));
            }
        }
        Ok(Self {
            name: name.into(),
            images,
            ids,
            labels,
            index,
        })
    }

    /// Ids `0..n` in image order.
    pub fn with_sequential_ids(name: impl Into<String>, images: Vec<Image>) -> Result<Self, DataError> {
        let ids = (0..images.len() as u64).collect();
        Self::new(name, images, ids, None)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(width, height, channels)` shared by every image, `None` when empty.
    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(Image::shape)
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn label_of(&self, id: u64) -> Option<u32> {
        let i = *self.index.get(&id)?;
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn get(&self, id: u64) -> Option<&Image> {
        self.index.get(&id).map(|&i| &self.images[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &Image)> + '_ {
        self.ids.iter().copied().zip(self.images.iter())
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Images with the given ids, in the order given.
    pub fn subset(&self, ids: &[u64]) -> Result<Dataset, DataError> {
        let mut images = Vec::with_capacity(ids.len());
        let mut labels = self.labels.as_ref().map(|_| Vec::with_capacity(ids.len()));
        for &id in ids {
            let &i = self.index.get(&id).ok_or(DataError::UnknownId(id))?;
            images.push(self.images[i].clone());
            if let (Some(out), Some(src)) = (labels.as_mut(), self.labels.as_ref()) {
                out.push(src[i]);
            }
        }
        Dataset::new(self.name.clone(), images, ids.to_vec(), labels)
    }

    /// Ids whose label satisfies `keep`; empty when the dataset has no labels.
    pub fn ids_where(&self, mut keep: impl FnMut(u32) -> bool) -> Vec<u64> {
        match &self.labels {
            Some(labels) => self
                .ids
                .iter()
                .zip(labels)
                .filter(|(_, &l)| keep(l))
                .map(|(&id, _)| id)
                .collect(),
            None => Vec::new(),
        }
    }

    pub(crate) fn map_images(&self, mut f: impl FnMut(u64, &Image) -> Image) -> Dataset {
        let images = self.iter().map(|(id, img)| f(id, img)).collect();
        Dataset {
            name: self.name.clone(),
            images,
            ids: self.ids.clone(),
            labels: self.labels.clone(),
            index: self.index.clone(),
        }
    }
}

/// Additive isotropic Gaussian noise on the `[0, 1]` pixel scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    variance: f64,
    seed: u64,
}

impl NoiseSpec {
    pub fn new(variance: f64, seed: u64) -> Result<Self, DataError> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(DataError::InvalidArgument(format!(
                "noise variance must be finite and >= 0, got {variance}"
            )));
        }
        Ok(Self { variance, seed })
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Adds i.i.d. `N(0, variance)` to every float pixel and clamps to `[0, 1]`.
/// Each image draws from its own stream keyed by id.
pub fn add_gaussian_noise(ds: &Dataset, spec: NoiseSpec) -> Dataset {
    if spec.variance == 0.0 {
        return ds.clone();
    }
    let normal = Normal::new(0.0, spec.variance.sqrt()).expect("finite std");
    ds.map_images(|id, img| {
        let mut rng = rng::stream(spec.seed, id);
        let noisy = img
            .pixels_f()
            .iter()
            .map(|&v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0))
            .collect();
        Image::from_f(img.width, img.height, img.channels, noisy).expect("clamped pixels are valid")
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PixelVariance {
    pub per_channel: Vec<f64>,
    pub pooled: f64,
}

/// Population variance of the float pixels, per channel and pooled over all
/// channels (Welford accumulation).
pub fn pixel_variance(ds: &Dataset) -> Result<PixelVariance, DataError> {
    let (_, _, channels) = ds.shape().ok_or(DataError::Empty)?;
    let mut per = vec![Welford::default(); channels];
    let mut pooled = Welford::default();
    for img in ds.images() {
        for px in img.pixels_f().chunks_exact(channels) {
            for (acc, &v) in per.iter_mut().zip(px) {
                acc.push(v);
                pooled.push(v);
            }
        }
    }
    Ok(PixelVariance {
        per_channel: per.iter().map(Welford::variance).collect(),
        pooled: pooled.variance(),
    })
}

#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.m2 / self.n as f64
        }
    }
}

/// Per-dimension mean and population variance of the float pixels; the
/// expansion point and covariance diagonals of the second-order diagnostic.
pub fn pixel_moments(ds: &Dataset) -> Result<(Vec<f64>, Vec<f64>), DataError> {
    let first = ds.images().first().ok_or(DataError::Empty)?;
    let mut acc = vec![Welford::default(); first.dim()];
    for img in ds.images() {
        for (a, &v) in acc.iter_mut().zip(img.pixels_f()) {
            a.push(v);
        }
    }
    Ok((
        acc.iter().map(|a| a.mean).collect(),
        acc.iter().map(Welford::variance).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_pass(values: &[f64]) -> f64 {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64
    }

    #[test]
    fn quantized_view_round_trips() {
        let px: Vec<f64> = (0..300).map(|i| i as f64 / 299.0).collect();
        let img = Image::from_f(10, 10, 3, px).unwrap();
        for (&f, &q) in img.pixels_f().iter().zip(img.pixels_q()) {
            assert!((f - f64::from(q) / 255.0).abs() <= 1.0 / 510.0 + 1e-15);
        }
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(matches!(
            Image::from_f(1, 1, 1, vec![1.5]),
            Err(DataError::PixelRange { .. })
        ));
        assert!(matches!(
            Image::from_f(1, 1, 2, vec![0.5, 0.5]),
            Err(DataError::Channels(2))
        ));
    }

    #[test]
    fn grayscale_weights() {
        let gray = Image::constant(3, 2, 1, 0.25).unwrap();
        assert_eq!(to_grayscale(&gray), gray);

        let uniform = Image::constant(2, 2, 3, 0.6).unwrap();
        for &g in to_grayscale(&uniform).pixels_f() {
            assert!((g - 0.6).abs() < 1e-12);
        }

        let red = Image::from_f(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((to_grayscale(&red).pixels_f()[0] - 0.299).abs() < 1e-15);
    }

    #[test]
    fn dataset_rejects_mixed_shapes_and_duplicate_ids() {
        let a = Image::constant(2, 2, 1, 0.0).unwrap();
        let b = Image::constant(3, 2, 1, 0.0).unwrap();
        assert!(matches!(
            Dataset::new("x", vec![a.clone(), b], vec![0, 1], None),
            Err(DataError::ShapeMismatch { index: 1, .. })
        ));
        assert!(matches!(
            Dataset::new("x", vec![a.clone(), a], vec![4, 4], None),
            Err(DataError::DuplicateId(4))
        ));
    }

    #[test]
    fn subset_keeps_ids_and_labels() {
        let imgs = (0..4)
            .map(|i| Image::constant(1, 1, 1, i as f64 / 4.0).unwrap())
            .collect();
        let ds = Dataset::new("d", imgs, vec![10, 11, 12, 13], Some(vec![1, 2, 3, 4])).unwrap();
        let sub = ds.subset(&[13, 10]).unwrap();
        assert_eq!(sub.ids(), &[13, 10]);
        assert_eq!(sub.labels().unwrap(), &[4, 1]);
        assert_eq!(sub.get(13).unwrap().pixels_f()[0], 0.75);
        assert!(matches!(ds.subset(&[99]), Err(DataError::UnknownId(99))));
    }

    fn mid_gray(n: usize, side: usize) -> Dataset {
        let imgs = (0..n).map(|_| Image::constant(side, side, 1, 0.5).unwrap()).collect();
        Dataset::with_sequential_ids("gray", imgs).unwrap()
    }

    #[test]
    fn zero_noise_is_identity() {
        let ds = mid_gray(3, 4);
        assert_eq!(add_gaussian_noise(&ds, NoiseSpec::new(0.0, 1).unwrap()), ds);
        assert!(NoiseSpec::new(-1e-3, 0).is_err());
    }

    #[test]
    fn noise_has_requested_spread_and_is_seeded() {
        let ds = mid_gray(10, 32); // 10240 pixels
        let spec = NoiseSpec::new(0.0064, 3).unwrap();
        let noisy = add_gaussian_noise(&ds, spec);
        let values: Vec<f64> = noisy.images().iter().flat_map(|i| i.pixels_f().to_vec()).collect();
        let std = two_pass(&values).sqrt();
        assert!((std - 0.08).abs() < 0.008, "std {std}");
        assert_eq!(noisy, add_gaussian_noise(&ds, spec));
        assert_ne!(noisy, add_gaussian_noise(&ds, NoiseSpec::new(0.0064, 4).unwrap()));
    }

    #[test]
    fn noise_shifts_mid_gray_variance_by_its_variance() {
        let ds = mid_gray(20, 16);
        let v = 0.01;
        let before = pixel_variance(&ds).unwrap().pooled;
        let after = pixel_variance(&add_gaussian_noise(&ds, NoiseSpec::new(v, 9).unwrap()))
            .unwrap()
            .pooled;
        let shift = after - before;
        assert!((shift - v).abs() <= 0.15 * v, "shift {shift}");
    }

    #[test]
    fn pixel_variance_cases() {
        assert_eq!(pixel_variance(&mid_gray(2, 3)).unwrap().pooled, 0.0);
        let two = Image::from_f(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let ds = Dataset::with_sequential_ids("two", vec![two]).unwrap();
        assert_eq!(pixel_variance(&ds).unwrap().pooled, 0.25);
        let empty = Dataset::with_sequential_ids("e", vec![]).unwrap();
        assert!(matches!(pixel_variance(&empty), Err(DataError::Empty)));
    }

    #[test]
    fn pixel_variance_matches_two_pass_formula() {
        let ds = synth_complexity_graded(5, 30, 8, 3).unwrap();
        let rgb: Vec<Image> = ds
            .images()
            .iter()
            .map(|g| {
                let px = g
                    .pixels_f()
                    .iter()
                    .flat_map(|&v| [v, (v * v).min(1.0), 1.0 - v])
                    .collect();
                Image::from_f(8, 8, 3, px).unwrap()
            })
            .collect();
        let ds = Dataset::with_sequential_ids("rgb", rgb).unwrap();
        let got = pixel_variance(&ds).unwrap();
        let all: Vec<f64> = ds.images().iter().flat_map(|i| i.pixels_f().to_vec()).collect();
        assert!((got.pooled - two_pass(&all)).abs() <= 1e-12 * two_pass(&all));
        for c in 0..3 {
            let ch: Vec<f64> = all.iter().skip(c).step_by(3).copied().collect();
            let want = two_pass(&ch);
            assert!((got.per_channel[c] - want).abs() <= 1e-12 * want);
        }
    }
}
