//! Datasets and preprocessing: the CIFAR-10 binary format, per-image
//! contrast normalization, patch ZCA whitening and synthetic generators.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Result, SimNetError};
use crate::ggm::GGMixture;
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by 32·32·3 channel-planar pixel bytes.
pub const CIFAR_RECORD: usize = 1 + CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;

/// Variance regularizer of [`normalize_image`] for pixels in `[0, 1]`.
pub const CONTRAST_REG: f64 = 10.0 / (255.0 * 255.0);

/// Images `[N, H, W, C]` with labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(SimNetError::Shape(format!(
                "{} labels for images {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(SimNetError::Validation(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(LabeledImageSet {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[H, W, C]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let [h, w, c] = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        LabeledImageSet::new(
            Tensor::new(vec![indices.len(), h, w, c], data)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    /// Images per label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Applies [`normalize_image`] to every image.
    pub fn normalized(&self, reg: f64) -> Self {
        let mut out = self.clone();
        let stride = self.images.len() / self.len().max(1);
        for img in out.images.data_mut().chunks_exact_mut(stride) {
            let n = normalize_image(img, reg);
            img.copy_from_slice(&n);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarSplit {
    Train,
    Test,
}

impl CifarSplit {
    fn files(self) -> Vec<&'static str> {
        match self {
            CifarSplit::Train => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            CifarSplit::Test => vec!["test_batch.bin"],
        }
    }
}

/// Resolves `dir` or its `cifar-10-batches-bin` child, whichever holds the
/// batch files.
fn cifar_root(dir: &Path, split: CifarSplit) -> PathBuf {
    let first = split.files()[0];
    let nested = dir.join("cifar-10-batches-bin");
    if !dir.join(first).exists() && nested.join(first).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Whether `dir` looks like a CIFAR-10 binary directory for `split`.
pub fn cifar_available(dir: &Path, split: CifarSplit) -> bool {
    let root = cifar_root(dir, split);
    split.files().iter().all(|f| root.join(f).is_file())
}

/// Decodes one batch file into HWC pixels in `[0, 1]` and labels.
pub fn decode_cifar_batch(path: &Path, bytes: &[u8]) -> Result<(Vec<f64>, Vec<usize>)> {
    let expected = CIFAR_RECORD * CIFAR_RECORDS_PER_FILE;
    if bytes.len() != expected {
        return Err(SimNetError::format(
            path,
            format!("expected {expected} bytes ({CIFAR_RECORDS_PER_FILE} records of {CIFAR_RECORD}), found {}", bytes.len()),
        ));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut pixels = Vec::with_capacity(CIFAR_RECORDS_PER_FILE * plane * CIFAR_CHANNELS);
    let mut labels = Vec::with_capacity(CIFAR_RECORDS_PER_FILE);
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(SimNetError::format(path, format!("label byte {label} out of range")));
        }
        labels.push(label);
        let body = &record[1..];
        for p in 0..plane {
            for c in 0..CIFAR_CHANNELS {
                pixels.push(body[c * plane + p] as f64 / 255.0);
            }
        }
    }
    Ok((pixels, labels))
}

/// Seeded class-balanced selection of `per_class` indices per label,
/// returned in ascending order.
pub fn balanced_subset(labels: &[usize], num_classes: usize, per_class: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(per_class * num_classes);
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < per_class {
            return Err(SimNetError::Argument(format!(
                "class {class} has {} examples, {per_class} requested",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..per_class]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Loads a CIFAR-10 split; `per_class` selects a seeded balanced subset.
pub fn load_cifar10(dir: impl AsRef<Path>, split: CifarSplit, per_class: Option<usize>, seed: u64) -> Result<LabeledImageSet> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(SimNetError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "CIFAR-10 directory not found"),
        ));
    }
    let root = cifar_root(dir, split);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in split.files() {
        let path = root.join(name);
        let bytes = fs::read(&path).map_err(|e| SimNetError::io(&path, e))?;
        let (p, l) = decode_cifar_batch(&path, &bytes)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    let set = LabeledImageSet::new(
        Tensor::new(vec![n, CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS], pixels)?,
        labels,
        CIFAR_CLASSES,
    )?;
    match per_class {
        None => Ok(set),
        Some(k) => set.select(&balanced_subset(&set.labels, CIFAR_CLASSES, k, seed)?),
    }
}

/// Brightness and contrast normalization: `(x − mean)/sqrt(var + reg)` over
/// all pixels and channels of one image.
pub fn normalize_image(image: &[f64], reg: f64) -> Vec<f64> {
    let n = image.len() as f64;
    let mean = image.iter().sum::<f64>() / n;
    let var = image.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let scale = 1.0 / (var + reg).sqrt();
    image.iter().map(|x| (x - mean) * scale).collect()
}

/// ZCA whitening `y = W·(x − mean)` with `W = E·diag((s + ε)^{−1/2})·Eᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    pub mean: Vec<f64>,
    /// `[d, d]`, symmetric.
    pub matrix: Tensor,
    pub epsilon: f64,
}

impl WhiteningTransform {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Whitens concatenated rows of length `d` in place.
    pub fn apply_rows(&self, rows: &mut [f64]) {
        let d = self.dim();
        let count = rows.len() / d;
        for row in rows.chunks_exact_mut(d) {
            row.iter_mut().zip(&self.mean).for_each(|(x, m)| *x -= m);
        }
        // row-major [count, d] is column-major [d, count]
        let x = DMatrix::from_column_slice(d, count, rows);
        let w = DMatrix::from_row_slice(d, d, self.matrix.data());
        let y = w * x;
        rows.copy_from_slice(y.as_slice());
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        self.apply_rows(&mut out);
        out
    }
}

/// Fits ZCA on the rows of `patches` (`[N, d]`) with the population
/// covariance.
pub fn zca_fit(patches: &Tensor, epsilon: f64) -> Result<WhiteningTransform> {
    if patches.rank() != 2 {
        return Err(SimNetError::Shape(format!("patches must be [N, d], got {:?}", patches.shape())));
    }
    let (n, d) = (patches.shape()[0], patches.shape()[1]);
    if n < d + 1 {
        return Err(SimNetError::Argument(format!("ZCA in dimension {d} needs at least {} patches, got {n}", d + 1)));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(SimNetError::Argument(format!("ZCA regularizer must be non-negative, got {epsilon}")));
    }
    let mut mean = vec![0.0; d];
    for row in patches.data().chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = patches.data().to_vec();
    for row in centered.chunks_exact_mut(d) {
        row.iter_mut().zip(&mean).for_each(|(x, m)| *x -= m);
    }
    let x = DMatrix::from_column_slice(d, n, &centered);
    let cov = (&x * x.transpose()) / n as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(cov, f64::EPSILON, 10_000)
        .ok_or_else(|| SimNetError::Numeric("covariance eigensolve did not converge".into()))?;
    let scale = eig.eigenvalues.map(|s| {
        let v = s.max(0.0) + epsilon;
        if v > 0.0 {
            1.0 / v.sqrt()
        } else {
            0.0
        }
    });
    let e = &eig.eigenvectors;
    let w = e * DMatrix::from_diagonal(&scale) * e.transpose();
    let w = (&w + w.transpose()) * 0.5;
    let mut data = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            data.push(w[(i, j)]);
        }
    }
    Ok(WhiteningTransform {
        mean,
        matrix: Tensor::new(vec![d, d], data)?,
        epsilon,
    })
}

pub fn zca_apply(transform: &WhiteningTransform, patches: &Tensor) -> Result<Tensor> {
    if patches.rank() != 2 || patches.shape()[1] != transform.dim() {
        return Err(SimNetError::Shape(format!(
            "patches {:?} for a transform of dimension {}",
            patches.shape(),
            transform.dim()
        )));
    }
    let mut rows = patches.data().to_vec();
    transform.apply_rows(&mut rows);
    Tensor::new(patches.shape().to_vec(), rows)
}

/// Population covariance of the rows of `x` (`[N, d]`), row-major `[d, d]`.
pub fn covariance(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0; d];
    for row in x.data().chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for row in x.data().chunks_exact(d) {
        for i in 0..d {
            let a = row[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += a * (row[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n as f64);
    cov
}

/// Patches drawn from a mixture, with their generating components.
#[derive(Debug, Clone)]
pub struct MixtureSample {
    /// `[N, d]`
    pub samples: Tensor,
    pub components: Vec<usize>,
    /// Location of each sample; all zero without per-location priors.
    pub locations: Vec<usize>,
}

/// Exact sampler for a mixture. With `location_priors`, sample `i` comes
/// from location `i mod L` using that location's priors.
pub fn synthetic_mixture_dataset(
    mixture: &GGMixture,
    location_priors: Option<&[Vec<f64>]>,
    count: usize,
    seed: u64,
) -> Result<MixtureSample> {
    mixture.validate()?;
    if count == 0 {
        return Err(SimNetError::Argument("empty synthetic sample requested".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(count * mixture.dim());
    let mut components = Vec::with_capacity(count);
    let mut locations = Vec::with_capacity(count);
    for i in 0..count {
        let (priors, loc) = match location_priors {
            Some(p) if !p.is_empty() => (Some(p[i % p.len()].as_slice()), i % p.len()),
            _ => (None, 0),
        };
        let (x, l) = mixture.sample(&mut rng, priors)?;
        rows.extend(x);
        components.push(l);
        locations.push(loc);
    }
    Ok(MixtureSample {
        samples: Tensor::new(vec![count, mixture.dim()], rows)?,
        components,
        locations,
    })
}

/// Planted-class image generator used when CIFAR-10 is unavailable.
///
/// Each image is split into four quadrants; every quadrant receives one
/// motif from a shared bank at a random position. In quadrant `q` an image
/// of class `r` shows motif `(r + shift·q) mod motifs` with probability
/// `class_prob`, otherwise a uniformly random motif. Background noise and
/// per-image brightness and contrast jitter sit on top.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticImageConfig {
    pub side: usize,
    pub channels: usize,
    pub classes: usize,
    pub motifs: usize,
    pub motif_side: usize,
    pub shift: usize,
    pub class_prob: f64,
    pub noise: f64,
    /// Seed of the motif bank, shared by train and test sets.
    pub bank_seed: u64,
}

impl Default for SyntheticImageConfig {
    fn default() -> Self {
        SyntheticImageConfig {
            side: 16,
            channels: 3,
            classes: 10,
            motifs: 12,
            motif_side: 6,
            shift: 3,
            class_prob: 0.7,
            noise: 0.08,
            bank_seed: 7,
        }
    }
}

fn motif_bank(config: &SyntheticImageConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.bank_seed);
    let m = config.motif_side;
    (0..config.motifs)
        .map(|_| {
            // coarse 3×3 random field upsampled to m×m, per channel
            let coarse: Vec<f64> = (0..9 * config.channels).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut motif = Vec::with_capacity(m * m * config.channels);
            for y in 0..m {
                for x in 0..m {
                    let cy = (y * 3 / m).min(2);
                    let cx = (x * 3 / m).min(2);
                    for c in 0..config.channels {
                        motif.push(coarse[(cy * 3 + cx) * config.channels + c]);
                    }
                }
            }
            motif
        })
        .collect()
}

pub fn synthetic_image_dataset(config: &SyntheticImageConfig, count: usize, seed: u64) -> Result<LabeledImageSet> {
    let half = config.side / 2;
    if config.motif_side == 0 || config.motif_side > half || config.classes == 0 || config.motifs == 0 {
        return Err(SimNetError::Config(format!("invalid synthetic image config {config:?}")));
    }
    if count == 0 {
        return Err(SimNetError::Argument("empty synthetic image set requested".into()));
    }
    let bank = motif_bank(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.noise.max(0.0)).map_err(|e| SimNetError::Config(e.to_string()))?;
    let (side, ch, m) = (config.side, config.channels, config.motif_side);
    let mut images = Vec::with_capacity(count * side * side * ch);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % config.classes;
        let mut img: Vec<f64> = (0..side * side * ch).map(|_| 0.5 + noise.sample(&mut rng)).collect();
        for q in 0..4 {
            let motif = if rng.gen_bool(config.class_prob) {
                (label + config.shift * q) % config.motifs
            } else {
                rng.gen_range(0..config.motifs)
            };
            let oy = (q / 2) * half + rng.gen_range(0..=half - m);
            let ox = (q % 2) * half + rng.gen_range(0..=half - m);
            for y in 0..m {
                for x in 0..m {
                    for c in 0..ch {
                        img[((oy + y) * side + ox + x) * ch + c] =
                            bank[motif][(y * m + x) * ch + c] + noise.sample(&mut rng);
                    }
                }
            }
        }
        let brightness = rng.gen_range(-0.2..0.2);
        let contrast = rng.gen_range(0.6..1.4);
        images.extend(img.iter().map(|v| ((v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0)));
        labels.push(label);
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    let set = LabeledImageSet::new(Tensor::new(vec![count, side, side, ch], images)?, labels, config.classes)?;
    set.select(&order)
}

const IMAGES_KIND: &str = "simnet_images";
const WHITENING_KIND: &str = "simnet_whitening";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImagesManifest {
    kind: String,
    shape: [usize; 4],
    num_classes: usize,
    labels: Vec<usize>,
    blobs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WhiteningManifest {
    kind: String,
    d: usize,
    epsilon: f64,
    blobs: Vec<String>,
}

impl LabeledImageSet {
    /// Labels go in the manifest, pixels in a single blob.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let s = self.images.shape();
        let manifest = ImagesManifest {
            kind: IMAGES_KIND.into(),
            shape: [s[0], s[1], s[2], s[3]],
            num_classes: self.num_classes,
            labels: self.labels.clone(),
            blobs: vec!["images".into()],
        };
        checkpoint::write(path.as_ref(), &manifest, &[self.images.data()])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (m, mut blobs): (ImagesManifest, _) = checkpoint::read(path)?;
        if m.kind != IMAGES_KIND {
            return Err(SimNetError::format(path, format!("expected a {IMAGES_KIND} file, found {}", m.kind)));
        }
        let bad = |e: SimNetError| SimNetError::format(path, e.to_string());
        let len = m.shape.iter().product();
        let images = Tensor::new(m.shape.to_vec(), blobs.blob("images", len)?).map_err(bad)?;
        blobs.finish()?;
        LabeledImageSet::new(images, m.labels, m.num_classes).map_err(bad)
    }
}

impl WhiteningTransform {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let manifest = WhiteningManifest {
            kind: WHITENING_KIND.into(),
            d: self.dim(),
            epsilon: self.epsilon,
            blobs: vec!["mean".into(), "matrix".into()],
        };
        checkpoint::write(path.as_ref(), &manifest, &[&self.mean, self.matrix.data()])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (m, mut blobs): (WhiteningManifest, _) = checkpoint::read(path)?;
        if m.kind != WHITENING_KIND {
            return Err(SimNetError::format(path, format!("expected a {WHITENING_KIND} file, found {}", m.kind)));
        }
        let mean = blobs.blob("mean", m.d)?;
        let matrix = Tensor::new(vec![m.d, m.d], blobs.blob("matrix", m.d * m.d)?)
            .map_err(|e| SimNetError::format(path, e.to_string()))?;
        blobs.finish()?;
        Ok(WhiteningTransform {
            mean,
            matrix,
            epsilon: m.epsilon,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn fake_batch(seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bytes = Vec::with_capacity(CIFAR_RECORD * CIFAR_RECORDS_PER_FILE);
        for i in 0..CIFAR_RECORDS_PER_FILE {
            bytes.push((i % 10) as u8);
            bytes.extend((0..CIFAR_RECORD - 1).map(|_| rng.gen::<u8>()));
        }
        bytes
    }

    #[test]
    fn decodes_channel_planar_records() {
        let mut bytes = fake_batch(1);
        // record 0: pixel (0, 1) has R = 255, G = 0, B = 51
        bytes[1 + 1] = 255;
        bytes[1 + 1024 + 1] = 0;
        bytes[1 + 2048 + 1] = 51;
        let (pixels, labels) = decode_cifar_batch(Path::new("x.bin"), &bytes).unwrap();
        assert_eq!(labels[..3], [0, 1, 2]);
        assert_eq!(pixels[3..6], [1.0, 0.0, 0.2]);
        assert_eq!(pixels.len(), CIFAR_RECORDS_PER_FILE * 3072);
    }

    #[test]
    fn truncated_batch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = fake_batch(2);
        fs::write(dir.path().join("test_batch.bin"), &bytes[..bytes.len() - 1]).unwrap();
        let err = load_cifar10(dir.path(), CifarSplit::Test, None, 0).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, SimNetError::Format { .. }));
        assert!(msg.contains("test_batch.bin") && msg.contains("30730000"), "{msg}");
    }

    #[test]
    fn balanced_subset_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("test_batch.bin"), fake_batch(3)).unwrap();
        let full = load_cifar10(dir.path(), CifarSplit::Test, None, 0).unwrap();
        assert_eq!(full.len(), 10_000);
        assert_eq!(full.class_counts(), vec![1000; 10]);
        let a = load_cifar10(dir.path(), CifarSplit::Test, Some(10), 42).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a.class_counts(), vec![10; 10]);
        let b = load_cifar10(dir.path(), CifarSplit::Test, Some(10), 42).unwrap();
        assert_eq!(a, b);
        assert!(load_cifar10(dir.path().join("missing"), CifarSplit::Test, None, 0).is_err());
    }

    #[test]
    fn normalization_examples() {
        assert!(normalize_image(&[0.3; 12], CONTRAST_REG).iter().all(|&v| v.abs() < 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img: Vec<f64> = (0..48).map(|_| rng.gen_range(0.0..1.0)).collect();
        let out = normalize_image(&img, CONTRAST_REG);
        let mean = out.iter().sum::<f64>() / 48.0;
        assert!(mean.abs() < 1e-10);
    }

    #[test]
    fn whitening_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let normal = Normal::new(0.0, 1.0).unwrap();
        // correlated data
        let mix = [1.0, 0.0, 0.0, 0.8, 0.6, 0.0, 0.3, -0.5, 0.2];
        let rows: Vec<f64> = (0..4000)
            .flat_map(|_| {
                let g: Vec<f64> = (0..3).map(|_| normal.sample(&mut rng)).collect();
                (0..3).map(|i| (0..3).map(|j| mix[i * 3 + j] * g[j]).sum::<f64>() + 2.0).collect::<Vec<_>>()
            })
            .collect();
        let x = Tensor::new(vec![4000, 3], rows).unwrap();
        let t = zca_fit(&x, 1e-6).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(t.matrix.get(&[i, j]).unwrap(), t.matrix.get(&[j, i]).unwrap());
            }
        }
        let cov = covariance(&zca_apply(&t, &x).unwrap());
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((cov[i * 3 + j] - want).abs() < 0.05);
            }
        }
        // already-white data: W ≈ identity, up to the ε shrinkage of the first fit
        let white = zca_apply(&t, &x).unwrap();
        let again = zca_fit(&white, 0.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((again.matrix.get(&[i, j]).unwrap() - want).abs() < 1e-4);
            }
        }
        // huge ε: pure shrinkage by 1/√ε
        let eps = 1e12;
        let shrink = zca_fit(&x, eps).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { eps.powf(-0.5) } else { 0.0 };
                assert!((shrink.matrix.get(&[i, j]).unwrap() - want).abs() < 1e-10 * eps.powf(-0.5) + 1e-15);
            }
        }
        assert!(zca_fit(&Tensor::zeros(&[3, 3]).unwrap(), 0.1).is_err());
    }

    #[test]
    fn synthetic_images_are_balanced_and_seeded() {
        let config = SyntheticImageConfig::default();
        let a = synthetic_image_dataset(&config, 200, 1).unwrap();
        assert_eq!(a.image_shape(), [16, 16, 3]);
        assert_eq!(a.class_counts(), vec![20; 10]);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, synthetic_image_dataset(&config, 200, 1).unwrap());
        assert_ne!(a, synthetic_image_dataset(&config, 200, 2).unwrap());
    }

    proptest! {
        #[test]
        fn normalized_variance_is_below_one(seed in 0u64..10_000, scale in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img: Vec<f64> = (0..75).map(|_| rng.gen_range(0.0..1.0) * scale).collect();
            let out = normalize_image(&img, CONTRAST_REG);
            let var = out.iter().map(|v| v * v).sum::<f64>() / 75.0;
            prop_assert!(var < 1.0);
            prop_assert!(out.iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn image_set_and_whitening_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = synthetic_image_dataset(&SyntheticImageConfig::default(), 20, 1).unwrap();
        set.save(dir.path().join("set.bin")).unwrap();
        assert_eq!(LabeledImageSet::load(dir.path().join("set.bin")).unwrap(), set);
        let t = WhiteningTransform {
            mean: vec![0.5, -1.0],
            matrix: Tensor::new(vec![2, 2], vec![1.0, 0.2, 0.2, 3.0]).unwrap(),
            epsilon: 0.1,
        };
        t.save(dir.path().join("w.bin")).unwrap();
        assert_eq!(WhiteningTransform::load(dir.path().join("w.bin")).unwrap(), t);
        assert!(matches!(LabeledImageSet::load(dir.path().join("w.bin")), Err(SimNetError::Format { .. })));
    }
}
