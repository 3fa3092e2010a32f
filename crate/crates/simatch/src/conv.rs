//! Convolutional application of one similarity-matching layer.
//!
//! The layer's weights are shared across every patch location of an image:
//! each patch is an independent per-sample problem (lateral inhibition acts
//! only among the `m` channels at one location), so a whole image is solved
//! as a single batched dynamics problem with `P` columns. Feature maps are
//! pooled into fixed-length descriptors by quadrant or global averaging.
//!
//! Training a convolutional layer uses the same batch-averaged update as the
//! dense layer; [`conv_update`] averages over all patches of one image, and
//! [`train_conv_layer`] trains on a random sample of patches drawn across the
//! dataset (the patch distribution is what the shared weights see either
//! way, and sampling keeps desk-scale runs fast).

use ndarray::{Array1, Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{self, LabeledDataset, PreprocessConfig, PreprocessStats};
use crate::dynamics::DynamicsConfig;
use crate::error::{Error, Result};
use crate::layer::{self, NsmLayer, TrainOptions};

/// How a feature-map grid is reduced to a fixed-length vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Channel-wise mean over each of the 2×2 spatial quadrants,
    /// concatenated quadrant-major (top-left, top-right, bottom-left,
    /// bottom-right) → length `4m`.
    QuadrantAverage,
    /// Channel-wise mean over the whole grid → length `m`.
    GlobalAverage,
}

/// Geometry and preprocessing for applying a layer convolutionally.
#[derive(Debug, Clone)]
pub struct ConvNsmConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride: usize,
    pub pooling: Pooling,
    /// Applied to every patch column before the dynamics. With ZCA enabled,
    /// fitted stats must be supplied at forward time (never fitted on a
    /// single image).
    pub preprocess: PreprocessConfig,
}

impl Default for ConvNsmConfig {
    fn default() -> Self {
        Self {
            patch_h: 5,
            patch_w: 5,
            stride: 1,
            pooling: Pooling::QuadrantAverage,
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl ConvNsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_h == 0 || self.patch_w == 0 {
            return Err(Error::InvalidArgument("patch dimensions must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        self.preprocess.validate()
    }

    /// Patch vector length for `ch` input channels.
    pub fn patch_dim(&self, channels: usize) -> usize {
        self.patch_h * self.patch_w * channels
    }

    /// Pooled descriptor length for a layer with `m` filters.
    pub fn pooled_dim(&self, m: usize) -> usize {
        match self.pooling {
            Pooling::QuadrantAverage => 4 * m,
            Pooling::GlobalAverage => m,
        }
    }

    /// Feature-map grid shape for an `h × w` image.
    pub fn grid_shape(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.patch_h > h || self.patch_w > w {
            return Err(Error::InvalidArgument(format!(
                "patch {}x{} does not fit in a {h}x{w} image",
                self.patch_h, self.patch_w
            )));
        }
        Ok((
            (h - self.patch_h) / self.stride + 1,
            (w - self.patch_w) / self.stride + 1,
        ))
    }
}

/// Activities of one image under a convolutional layer.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// `grid_h × grid_w × m`, nonnegative.
    pub values: Array3<f64>,
    /// Pooled descriptor (`4m` quadrant / `m` global).
    pub pooled: Array1<f64>,
    /// The preprocessed patch matrix the activities were solved from
    /// (`patch_dim × P`); kept so the matching update needs no re-extraction.
    pub patches: Array2<f64>,
    /// Activities as an `m × P` matrix, column `p = gy·grid_w + gx`.
    pub z: Array2<f64>,
}

/// Solve the layer dynamics at every patch location of `image` (channels ×
/// h × w) and pool the result. A supervised drive `y_scaled` is shared by
/// all locations. Labels are never required: pass `None` for inference.
pub fn conv_forward(
    config: &ConvNsmConfig,
    layer: &NsmLayer,
    image: &Array3<f64>,
    y_scaled: Option<&Array1<f64>>,
    dynamics: &DynamicsConfig,
    zca: Option<&PreprocessStats>,
) -> Result<FeatureMap> {
    config.validate()?;
    let (channels, _, _) = image.dim();
    if layer.input_dim() != config.patch_dim(channels) {
        return Err(Error::InvalidArgument(format!(
            "layer expects input dimension {} but {}x{} patches over {channels} channel(s) have {}",
            layer.input_dim(),
            config.patch_h,
            config.patch_w,
            config.patch_dim(channels)
        )));
    }
    let grid = data::extract_patches(image, config.patch_h, config.patch_w, config.stride)?;
    let patches = preprocess_patches(&grid.patches, &config.preprocess, zca)?;

    let p = grid.patch_count();
    let y_block = match y_scaled {
        Some(y) => Some(replicate_column(y, p)),
        None => None,
    };
    let solved = layer.forward_batch(&patches, y_block.as_ref(), dynamics, None)?;

    let m = layer.output_dim();
    let values = Array3::from_shape_fn((grid.grid_h, grid.grid_w, m), |(gy, gx, ch)| {
        solved.z[[ch, gy * grid.grid_w + gx]]
    });
    let pooled = pool(&values, config.pooling)?;
    Ok(FeatureMap { values, pooled, patches, z: solved.z })
}

fn preprocess_patches(
    patches: &Array2<f64>,
    config: &PreprocessConfig,
    zca: Option<&PreprocessStats>,
) -> Result<Array2<f64>> {
    if config.zca_whiten && zca.is_none() {
        return Err(Error::InvalidArgument(
            "ZCA whitening requires stats fitted on training patches; none supplied".into(),
        ));
    }
    let (out, _) = data::preprocess(patches, config, zca)?;
    Ok(out)
}

fn replicate_column(y: &Array1<f64>, count: usize) -> Array2<f64> {
    let mut block = Array2::zeros((y.len(), count));
    for mut column in block.columns_mut() {
        column.assign(y);
    }
    block
}

/// Reduce a `grid_h × grid_w × m` feature map to a descriptor vector.
///
/// Quadrant averaging splits the grid at the index midpoints; odd sizes give
/// the extra row/column to the lower/right quadrants. Quadrants emptied by a
/// degenerate grid (fewer than 2 rows or columns) pool to zero.
pub fn pool(values: &Array3<f64>, mode: Pooling) -> Result<Array1<f64>> {
    let (gh, gw, m) = values.dim();
    if gh == 0 || gw == 0 || m == 0 {
        return Err(Error::InvalidArgument("cannot pool an empty feature map".into()));
    }
    match mode {
        Pooling::GlobalAverage => {
            let scale = 1.0 / (gh * gw) as f64;
            let mut pooled = Array1::zeros(m);
            for gy in 0..gh {
                for gx in 0..gw {
                    for ch in 0..m {
                        pooled[ch] += values[[gy, gx, ch]] * scale;
                    }
                }
            }
            Ok(pooled)
        }
        Pooling::QuadrantAverage => {
            let mid_h = gh / 2;
            let mid_w = gw / 2;
            let row_ranges = [(0, mid_h), (mid_h, gh)];
            let col_ranges = [(0, mid_w), (mid_w, gw)];
            let mut pooled = Array1::zeros(4 * m);
            let mut quadrant = 0;
            for &(r0, r1) in &row_ranges {
                for &(c0, c1) in &col_ranges {
                    let cells = (r1 - r0) * (c1 - c0);
                    if cells > 0 {
                        let scale = 1.0 / cells as f64;
                        for gy in r0..r1 {
                            for gx in c0..c1 {
                                for ch in 0..m {
                                    pooled[quadrant * m + ch] += values[[gy, gx, ch]] * scale;
                                }
                            }
                        }
                    }
                    quadrant += 1;
                }
            }
            Ok(pooled)
        }
    }
}

/// One shared-weight update from a feature map: the patch-mean of per-patch
/// update terms (mean, not sum, so learning rates are image-size invariant).
/// `y_scaled = None` covers both unsupervised layers and label-masked
/// samples — the label weights are then untouched.
pub fn conv_update(
    config: &ConvNsmConfig,
    layer: &mut NsmLayer,
    map: &FeatureMap,
    y_scaled: Option<&Array1<f64>>,
) -> Result<()> {
    config.validate()?;
    let y_block = y_scaled.map(|y| replicate_column(y, map.patches.ncols()));
    layer.update_batch(&map.patches, &map.z, y_block.as_ref(), None)
}

/// Draw `count` random patches (uniform over images and valid offsets) from
/// flattened images. Returns the raw patch matrix and each patch's source
/// image index. Deterministic per seed.
pub fn sample_patches(
    samples: &Array2<f64>,
    h: usize,
    w: usize,
    channels: usize,
    patch_h: usize,
    patch_w: usize,
    count: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let t = samples.ncols();
    if t == 0 || count == 0 {
        return Err(Error::InvalidArgument("patch sampling needs images and a positive count".into()));
    }
    if samples.nrows() != h * w * channels {
        return Err(Error::InvalidArgument(format!(
            "images have {} rows but geometry {channels}x{h}x{w} needs {}",
            samples.nrows(),
            h * w * channels
        )));
    }
    if patch_h > h || patch_w > w {
        return Err(Error::InvalidArgument(format!(
            "patch {patch_h}x{patch_w} does not fit in a {h}x{w} image"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = patch_h * patch_w * channels;
    let mut patches = Array2::zeros((dim, count));
    let mut sources = Vec::with_capacity(count);
    for k in 0..count {
        let img = rng.random_range(0..t);
        let y0 = rng.random_range(0..=(h - patch_h));
        let x0 = rng.random_range(0..=(w - patch_w));
        for c in 0..channels {
            for py in 0..patch_h {
                for px in 0..patch_w {
                    patches[[c * patch_h * patch_w + py * patch_w + px, k]] =
                        samples[[c * h * w + (y0 + py) * w + (x0 + px), img]];
                }
            }
        }
        sources.push(img);
    }
    Ok((patches, sources))
}

/// Outcome of [`train_conv_layer`]: the per-epoch objective trace on the
/// sampled patch set, plus fitted preprocessing stats for encode-time reuse.
#[derive(Debug)]
pub struct ConvTrainReport {
    pub trace: Vec<f64>,
    pub stats: PreprocessStats,
}

/// Train a layer on the dataset's patch distribution.
///
/// `patch_count` random patches are drawn across all images; each inherits
/// its source image's (scaled) label and mask. Preprocessing is fitted on
/// this sample and returned for encoding.
#[allow(clippy::too_many_arguments)]
pub fn train_conv_layer(
    layer: &mut NsmLayer,
    config: &ConvNsmConfig,
    data: &LabeledDataset,
    h: usize,
    w: usize,
    channels: usize,
    patch_count: usize,
    options: &TrainOptions,
) -> Result<ConvTrainReport> {
    config.validate()?;
    if layer.input_dim() != config.patch_dim(channels) {
        return Err(Error::InvalidArgument(format!(
            "layer input dimension {} does not match patch dimension {}",
            layer.input_dim(),
            config.patch_dim(channels)
        )));
    }
    let (raw_patches, sources) = sample_patches(
        &data.samples,
        h,
        w,
        channels,
        config.patch_h,
        config.patch_w,
        patch_count,
        options.seed,
    )?;
    let (patches, stats) = data::preprocess(&raw_patches, &config.preprocess, None)?;

    let (y_scaled, labeled) = if layer.is_supervised() {
        let mut y = Array2::zeros((data.class_count, patch_count));
        let mut mask = Vec::with_capacity(patch_count);
        let scaled_labels = layer::scale_labels(&data.labels, layer.alpha)?;
        for (k, &img) in sources.iter().enumerate() {
            if data.label_mask[img] {
                y.column_mut(k).assign(&scaled_labels.column(img));
                mask.push(true);
            } else {
                mask.push(false);
            }
        }
        (Some(y), Some(mask))
    } else {
        (None, None)
    };

    let trace = layer::train_dense(
        layer,
        &patches,
        y_scaled.as_ref(),
        labeled.as_deref(),
        options,
    )?;
    Ok(ConvTrainReport { trace, stats })
}

/// Encode flattened images into pooled feature vectors (`pooled_dim × T`).
/// Labels are never consulted. Images are encoded in parallel; each column
/// is computed independently, so the result does not depend on the worker
/// count.
pub fn encode_images(
    config: &ConvNsmConfig,
    layer: &NsmLayer,
    samples: &Array2<f64>,
    h: usize,
    w: usize,
    channels: usize,
    dynamics: &DynamicsConfig,
    zca: Option<&PreprocessStats>,
) -> Result<Array2<f64>> {
    let t = samples.ncols();
    let out_dim = config.pooled_dim(layer.output_dim());
    let columns: Vec<Array1<f64>> = (0..t)
        .into_par_iter()
        .map(|j| {
            let image = data::sample_to_image(samples.column(j), h, w, channels)?;
            let map = conv_forward(config, layer, &image, None, dynamics, zca)?;
            Ok(map.pooled)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut codes = Array2::zeros((out_dim, t));
    for (j, column) in columns.iter().enumerate() {
        codes.column_mut(j).assign(column);
    }
    Ok(codes)
}
