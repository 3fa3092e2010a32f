//! Dataset ingestion and patch plumbing.
//!
//! Loads MNIST-style IDX files and CIFAR-10 binary batches into column-major
//! sample matrices (`X ∈ ℝ^{n×T}`, one sample per column), extracts patch
//! grids from images, and applies the preprocessing used by the patch-based
//! pipelines (per-patch standardization, optional ZCA whitening).
//!
//! Flattening conventions are pinned once here and relied on everywhere:
//! images are channel-planar (all of channel 0, then channel 1, ...), each
//! plane row-major; patch vectors are channel-major then row-major within the
//! patch; patches are ordered row-major over the grid. The loaders' native
//! layouts (MNIST row-major, CIFAR planar RGB) already agree with this.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView1};

use crate::error::{Error, Result};
use crate::linalg;

/// Default byte-to-real scaling applied by the loaders: raw u8 → [0, 1].
pub const DEFAULT_PIXEL_SCALE: f64 = 1.0 / 255.0;

/// Small constant added to the per-column std in standardization.
const STANDARDIZE_EPS: f64 = 1e-8;

/// A dataset of column-vector samples with one-hot labels.
///
/// `label_mask[j]` marks whether sample `j`'s label may be used in training;
/// semi-supervised runs hide labels by clearing mask entries while leaving
/// the stored label columns intact.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    /// `n × T`, one sample per column.
    pub samples: Array2<f64>,
    /// `c × T`, one-hot columns.
    pub labels: Array2<f64>,
    /// Length `T`; `true` = label available to trainers.
    pub label_mask: Vec<bool>,
    pub class_count: usize,
}

impl LabeledDataset {
    /// Build and validate a dataset. `label_mask: None` means fully labeled.
    pub fn new(
        samples: Array2<f64>,
        labels: Array2<f64>,
        label_mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        let t = samples.ncols();
        let mask = label_mask.unwrap_or_else(|| vec![true; t]);
        let data = Self {
            class_count: labels.nrows(),
            samples,
            labels,
            label_mask: mask,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.samples.ncols();
        if self.labels.ncols() != t {
            return Err(Error::Consistency(format!(
                "{} samples but {} label columns",
                t,
                self.labels.ncols()
            )));
        }
        if self.label_mask.len() != t {
            return Err(Error::Consistency(format!(
                "{} samples but label mask of length {}",
                t,
                self.label_mask.len()
            )));
        }
        if self.labels.nrows() != self.class_count {
            return Err(Error::Consistency(format!(
                "label matrix has {} rows but class_count is {}",
                self.labels.nrows(),
                self.class_count
            )));
        }
        for (j, column) in self.labels.columns().into_iter().enumerate() {
            let ones = column.iter().filter(|&&v| v == 1.0).count();
            let zeros = column.iter().filter(|&&v| v == 0.0).count();
            let one_hot = ones == 1 && zeros == column.len() - 1;
            let all_zero = zeros == column.len();
            if !one_hot && !(all_zero && !self.label_mask[j]) {
                return Err(Error::Consistency(format!(
                    "label column {j} is neither one-hot nor an all-zero masked column"
                )));
            }
        }
        Ok(())
    }

    /// Number of samples `T`.
    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature dimension `n`.
    pub fn dim(&self) -> usize {
        self.samples.nrows()
    }

    /// Class index of sample `j` (argmax of its one-hot column).
    pub fn class_of(&self, j: usize) -> usize {
        let column = self.labels.column(j);
        let mut best = 0;
        for i in 1..column.len() {
            if column[i] > column[best] {
                best = i;
            }
        }
        best
    }

    /// New dataset containing the given samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "subset index {i} out of range for {} samples",
                    self.len()
                )));
            }
        }
        let n = self.dim();
        let c = self.class_count;
        let mut samples = Array2::zeros((n, indices.len()));
        let mut labels = Array2::zeros((c, indices.len()));
        let mut mask = Vec::with_capacity(indices.len());
        for (dst, &src) in indices.iter().enumerate() {
            samples.column_mut(dst).assign(&self.samples.column(src));
            labels.column_mut(dst).assign(&self.labels.column(src));
            mask.push(self.label_mask[src]);
        }
        Ok(Self {
            samples,
            labels,
            label_mask: mask,
            class_count: c,
        })
    }

    /// Same data with a new availability mask.
    pub fn with_label_mask(&self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "mask length {} does not match {} samples",
                mask.len(),
                self.len()
            )));
        }
        Ok(Self {
            label_mask: mask,
            ..self.clone()
        })
    }

    /// Content hash over dimensions, samples, labels, and mask; stable across
    /// runs and platforms (little-endian float bytes).
    pub fn fingerprint(&self) -> u64 {
        let mut bytes =
            Vec::with_capacity(16 + 8 * (self.samples.len() + self.labels.len()) + self.len());
        bytes.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.class_count as u64).to_le_bytes());
        for v in self.samples.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.labels.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &b in &self.label_mask {
            bytes.push(b as u8);
        }
        linalg::fnv1a64(&bytes)
    }
}

/// All patches of one image, flattened per the crate-wide convention.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    /// `(patch_h · patch_w · channels) × P`, one patch per column.
    pub patches: Array2<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride: usize,
}

impl PatchGrid {
    /// Number of patches `P = grid_h · grid_w`.
    pub fn patch_count(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Preprocessing switches for patch/sample matrices.
#[derive(Debug, Clone, Copy)]
pub struct PreprocessConfig {
    /// Per-column: subtract mean, divide by (std + 1e-8).
    pub per_patch_standardize: bool,
    pub zca_whiten: bool,
    pub zca_epsilon: f64,
    /// Scale applied by the loaders to raw pixel bytes.
    pub pixel_scale: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            per_patch_standardize: true,
            zca_whiten: false,
            zca_epsilon: 1e-6,
            pixel_scale: DEFAULT_PIXEL_SCALE,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.zca_epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "zca_epsilon must be positive, got {}",
                self.zca_epsilon
            )));
        }
        if !(self.pixel_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "pixel_scale must be positive, got {}",
                self.pixel_scale
            )));
        }
        Ok(())
    }
}

/// Statistics fitted by [`preprocess`] on training data, reusable at
/// evaluation time so test data goes through the identical transform.
#[derive(Debug, Clone, Default)]
pub struct PreprocessStats {
    /// Per-row mean and ZCA transform, present iff whitening was fitted.
    pub zca: Option<ZcaStats>,
}

#[derive(Debug, Clone)]
pub struct ZcaStats {
    pub mean: Array1<f64>,
    pub transform: Array2<f64>,
}

fn read_be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ])
}

/// Parse an IDX file, checking the magic number and that the payload length
/// matches the product of the header dimensions exactly.
fn parse_idx(path: &Path, expected_magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 {
        return Err(Error::format(&name, "file shorter than the 4-byte magic"));
    }
    let magic = read_be_u32(&bytes, 0);
    if magic != expected_magic {
        return Err(Error::format(
            &name,
            format!("magic number 0x{magic:08x}, expected 0x{expected_magic:08x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let header_len = 4 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(Error::format(&name, "truncated dimension header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|d| read_be_u32(&bytes, 4 + 4 * d) as usize)
        .collect();
    let expected_payload: usize = dims.iter().product();
    let payload = &bytes[header_len..];
    if payload.len() != expected_payload {
        return Err(Error::format(
            &name,
            format!(
                "payload of {} bytes does not match header dimensions {:?} ({} expected)",
                payload.len(),
                dims,
                expected_payload
            ),
        ));
    }
    Ok((dims, payload.to_vec()))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const MNIST_CLASSES: usize = 10;

/// Load an MNIST-style IDX image/label pair.
///
/// Pixels are scaled to `[0, 1]`; labels become 10-class one-hot columns.
/// Image and label counts must agree. Canonical 28×28 files yield a
/// `784 × T` sample matrix, but any IDX image geometry is accepted.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    load_mnist_with_scale(images_path, labels_path, DEFAULT_PIXEL_SCALE)
}

pub fn load_mnist_with_scale(
    images_path: &Path,
    labels_path: &Path,
    pixel_scale: f64,
) -> Result<LabeledDataset> {
    let (image_dims, pixels) = parse_idx(images_path, IDX_IMAGES_MAGIC)?;
    let (label_dims, label_bytes) = parse_idx(labels_path, IDX_LABELS_MAGIC)?;
    let [t, h, w] = image_dims[..] else {
        return Err(Error::format(
            &images_path.display().to_string(),
            format!("expected 3 dimensions (count, height, width), got {image_dims:?}"),
        ));
    };
    let t_labels = label_dims[0];
    if t != t_labels {
        return Err(Error::Consistency(format!(
            "{t} images in {} but {t_labels} labels in {}",
            images_path.display(),
            labels_path.display()
        )));
    }

    let n = h * w;
    let mut samples = Array2::zeros((n, t));
    for j in 0..t {
        let record = &pixels[j * n..(j + 1) * n];
        for (i, &px) in record.iter().enumerate() {
            samples[[i, j]] = px as f64 * pixel_scale;
        }
    }

    let labels = one_hot_from_bytes(&label_bytes, MNIST_CLASSES, labels_path)?;
    LabeledDataset::new(samples, labels, None)
}

const CIFAR_RECORD_BYTES: usize = 3073; // 1 label byte + 32*32*3 pixels
const CIFAR_PIXELS: usize = 3072;
const CIFAR_CLASSES: usize = 10;

/// Load CIFAR-10 binary batches, concatenating records in argument order.
///
/// Each record is one label byte followed by 3072 pixel bytes in
/// channel-planar R, G, B order (each plane row-major 32×32); that layout is
/// preserved in the sample columns. Pixels are scaled to `[0, 1]`.
pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P]) -> Result<LabeledDataset> {
    load_cifar10_with_scale(batch_paths, DEFAULT_PIXEL_SCALE)
}

pub fn load_cifar10_with_scale<P: AsRef<Path>>(
    batch_paths: &[P],
    pixel_scale: f64,
) -> Result<LabeledDataset> {
    if batch_paths.is_empty() {
        return Err(Error::InvalidArgument("no CIFAR batch files given".into()));
    }
    let mut records: Vec<Vec<u8>> = Vec::new();
    for path in batch_paths {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::format(
                &path.display().to_string(),
                format!(
                    "{} bytes is not a multiple of the {CIFAR_RECORD_BYTES}-byte record size",
                    bytes.len()
                ),
            ));
        }
        for chunk in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
            records.push(chunk.to_vec());
        }
    }

    let t = records.len();
    let mut samples = Array2::zeros((CIFAR_PIXELS, t));
    let mut label_bytes = Vec::with_capacity(t);
    for (j, record) in records.iter().enumerate() {
        label_bytes.push(record[0]);
        for (i, &px) in record[1..].iter().enumerate() {
            samples[[i, j]] = px as f64 * pixel_scale;
        }
    }
    let labels = one_hot_from_bytes(&label_bytes, CIFAR_CLASSES, batch_paths[0].as_ref())?;
    LabeledDataset::new(samples, labels, None)
}

fn one_hot_from_bytes(label_bytes: &[u8], classes: usize, source: &Path) -> Result<Array2<f64>> {
    let mut labels = Array2::zeros((classes, label_bytes.len()));
    for (j, &byte) in label_bytes.iter().enumerate() {
        if byte as usize >= classes {
            return Err(Error::format(
                &source.display().to_string(),
                format!("label byte {byte} at record {j} exceeds class range 0..{classes}"),
            ));
        }
        labels[[byte as usize, j]] = 1.0;
    }
    Ok(labels)
}

/// Reshape one flattened sample column into a `(channels, h, w)` image
/// tensor. Inverse of the crate's image flattening convention.
pub fn sample_to_image(sample: ArrayView1<f64>, h: usize, w: usize, ch: usize) -> Result<Array3<f64>> {
    if sample.len() != h * w * ch {
        return Err(Error::InvalidArgument(format!(
            "sample of length {} cannot be reshaped to {ch} channel(s) of {h}x{w}",
            sample.len()
        )));
    }
    Ok(Array3::from_shape_fn((ch, h, w), |(c, y, x)| {
        sample[c * h * w + y * w + x]
    }))
}

/// Extract every `patch_h × patch_w` window at the given stride.
///
/// Patch columns are flattened channel-major then row-major within the patch
/// (`index = c·ph·pw + py·pw + px`); columns are ordered row-major over the
/// grid of window positions.
pub fn extract_patches(
    image: &Array3<f64>,
    patch_h: usize,
    patch_w: usize,
    stride: usize,
) -> Result<PatchGrid> {
    let (channels, h, w) = image.dim();
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    if patch_h == 0 || patch_w == 0 {
        return Err(Error::InvalidArgument("patch dimensions must be positive".into()));
    }
    if patch_h > h || patch_w > w {
        return Err(Error::InvalidArgument(format!(
            "patch {patch_h}x{patch_w} does not fit in a {h}x{w} image"
        )));
    }
    let grid_h = (h - patch_h) / stride + 1;
    let grid_w = (w - patch_w) / stride + 1;
    let dim = patch_h * patch_w * channels;
    let mut patches = Array2::zeros((dim, grid_h * grid_w));
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let p = gy * grid_w + gx;
            for c in 0..channels {
                for py in 0..patch_h {
                    for px in 0..patch_w {
                        patches[[c * patch_h * patch_w + py * patch_w + px, p]] =
                            image[[c, gy * stride + py, gx * stride + px]];
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        patches,
        grid_h,
        grid_w,
        image_h: h,
        image_w: w,
        channels,
        patch_h,
        patch_w,
        stride,
    })
}

/// Apply preprocessing to a sample/patch matrix (`n × T`, column-per-sample).
///
/// Standardization is per-column and stateless. ZCA whitening is fitted on
/// the input when `fitted_stats` is `None` (training) and reused from
/// `fitted_stats` otherwise (evaluation), so test data never leaks into the
/// whitening transform.
pub fn preprocess(
    data: &Array2<f64>,
    config: &PreprocessConfig,
    fitted_stats: Option<&PreprocessStats>,
) -> Result<(Array2<f64>, PreprocessStats)> {
    config.validate()?;
    let mut out = data.clone();

    if config.per_patch_standardize {
        for mut column in out.columns_mut() {
            let n = column.len() as f64;
            let mean = column.sum() / n;
            let var = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let denom = var.sqrt() + STANDARDIZE_EPS;
            column.mapv_inplace(|v| (v - mean) / denom);
        }
    }

    let mut stats = PreprocessStats::default();
    if config.zca_whiten {
        let zca = match fitted_stats {
            Some(prior) => {
                let zca = prior.zca.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(
                        "zca_whiten enabled but supplied stats carry no ZCA transform".into(),
                    )
                })?;
                if zca.mean.len() != out.nrows() {
                    return Err(Error::InvalidArgument(format!(
                        "fitted ZCA stats are for dimension {} but data has {} rows",
                        zca.mean.len(),
                        out.nrows()
                    )));
                }
                zca.clone()
            }
            None => fit_zca(&out, config.zca_epsilon)?,
        };
        let t = out.ncols();
        let mut centered = out;
        for mut column in centered.columns_mut() {
            column -= &zca.mean;
        }
        out = zca.transform.dot(&centered);
        debug_assert_eq!(out.ncols(), t);
        stats.zca = Some(zca);
    } else if let Some(prior) = fitted_stats {
        // Keep evaluation symmetric with training even when whitening is off.
        stats.zca = prior.zca.clone();
    }

    Ok((out, stats))
}

/// Fit the symmetric whitening transform `U diag(1/√(λ+ε)) Uᵀ` of the
/// empirical covariance.
fn fit_zca(data: &Array2<f64>, epsilon: f64) -> Result<ZcaStats> {
    let (n, t) = data.dim();
    if t == 0 {
        return Err(Error::InvalidArgument("cannot fit ZCA on an empty matrix".into()));
    }
    let mean = data.sum_axis(ndarray::Axis(1)) / t as f64;
    let mut centered = data.clone();
    for mut column in centered.columns_mut() {
        column -= &mean;
    }
    let cov = centered.dot(&centered.t()) / t as f64;
    let (vals, vecs) = linalg::symmetric_eigen(&cov)?;
    let mut scaled = vecs.clone();
    for j in 0..n {
        let factor = 1.0 / (vals[j].max(0.0) + epsilon).sqrt();
        scaled.column_mut(j).mapv_inplace(|v| v * factor);
    }
    let transform = scaled.dot(&vecs.t());
    Ok(ZcaStats { mean, transform })
}
