//! Pre-training a small convolutional classifier with a similarity-matching
//! layer.
//!
//! The pipeline has two steps: train an NSM layer on image patches matching
//! the classifier's first convolution (supervised when `alpha > 0`), then
//! transplant its feedforward weights `W` into the classifier — the lateral
//! and label weights are decoupled and discarded — and fine-tune the whole
//! network with minibatch SGD. While fine-tuning, the cosine similarity
//! between each current filter and its transplanted value is traced, which
//! is the quantity the experiment report aggregates.
//!
//! The classifier is a fixed minimal architecture (`conv → ReLU → 2×2 max
//! pool → dense → ReLU → dense → softmax`) with hand-derived gradients, so
//! the finite-difference check in the tests validates every parameter.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conv::{self, ConvNsmConfig, Pooling};
use crate::data::{self, LabeledDataset, PreprocessConfig};
use crate::dynamics::DynamicsConfig;
use crate::error::{Error, Result};
use crate::layer::{LearningRateSchedule, NsmLayer, TrainOptions};

/// Minimal LeNet-style classifier: one valid-convolution layer (stride 1),
/// ReLU, 2×2 max pooling (stride 2, trailing odd row/column dropped), one
/// hidden dense layer with ReLU, and a softmax output layer.
#[derive(Debug, Clone)]
pub struct MiniLeNet {
    /// `filters × (ch·kh·kw)`; each row is one filter in patch-flatten
    /// order, so row `f` applies to a flattened patch exactly as an NSM
    /// weight row does.
    pub conv_filters: Array2<f64>,
    pub conv_bias: Array1<f64>,
    /// `hidden × flat_dim`.
    pub dense1_w: Array2<f64>,
    pub dense1_b: Array1<f64>,
    /// `classes × hidden`.
    pub dense2_w: Array2<f64>,
    pub dense2_b: Array1<f64>,
    pub input_h: usize,
    pub input_w: usize,
    pub input_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

pub const LENET_FILTERS: usize = 6;
pub const LENET_KERNEL: usize = 5;
pub const LENET_HIDDEN: usize = 64;
pub const LENET_CLASSES: usize = 10;

impl MiniLeNet {
    /// Standard architecture: 6 filters of 5×5, 64 hidden units, 10 classes.
    pub fn new(input_h: usize, input_w: usize, channels: usize, seed: u64) -> Result<Self> {
        Self::custom(
            input_h,
            input_w,
            channels,
            LENET_FILTERS,
            LENET_KERNEL,
            LENET_HIDDEN,
            LENET_CLASSES,
            seed,
        )
    }

    /// Same architecture with every size configurable (used for cheap
    /// exhaustive gradient checks).
    #[allow(clippy::too_many_arguments)]
    pub fn custom(
        input_h: usize,
        input_w: usize,
        channels: usize,
        filters: usize,
        kernel: usize,
        hidden: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if filters == 0 || kernel == 0 || hidden == 0 || classes == 0 || channels == 0 {
            return Err(Error::InvalidArgument("network dimensions must be positive".into()));
        }
        if kernel > input_h || kernel > input_w {
            return Err(Error::InvalidArgument(format!(
                "kernel {kernel} does not fit in a {input_h}x{input_w} image"
            )));
        }
        let conv_h = input_h - kernel + 1;
        let conv_w = input_w - kernel + 1;
        if conv_h < 2 || conv_w < 2 {
            return Err(Error::InvalidArgument(
                "convolution output too small for 2x2 pooling".into(),
            ));
        }
        let patch_dim = channels * kernel * kernel;
        let flat_dim = filters * (conv_h / 2) * (conv_w / 2);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |rows: usize, cols: usize, fan_in: usize| {
            let std = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| std * rng.sample::<f64, _>(StandardNormal))
        };
        let conv_filters = gaussian(filters, patch_dim, patch_dim);
        let dense1_w = gaussian(hidden, flat_dim, flat_dim);
        let dense2_w = gaussian(classes, hidden, hidden);
        Ok(Self {
            conv_filters,
            conv_bias: Array1::zeros(filters),
            dense1_w,
            dense1_b: Array1::zeros(hidden),
            dense2_w,
            dense2_b: Array1::zeros(classes),
            input_h,
            input_w,
            input_channels: channels,
            kernel_h: kernel,
            kernel_w: kernel,
        })
    }

    pub fn filters(&self) -> usize {
        self.conv_filters.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.dense1_w.nrows()
    }

    pub fn classes(&self) -> usize {
        self.dense2_w.nrows()
    }

    pub fn patch_dim(&self) -> usize {
        self.input_channels * self.kernel_h * self.kernel_w
    }

    pub fn conv_h(&self) -> usize {
        self.input_h - self.kernel_h + 1
    }

    pub fn conv_w(&self) -> usize {
        self.input_w - self.kernel_w + 1
    }

    pub fn pooled_h(&self) -> usize {
        self.conv_h() / 2
    }

    pub fn pooled_w(&self) -> usize {
        self.conv_w() / 2
    }

    pub fn flat_dim(&self) -> usize {
        self.filters() * self.pooled_h() * self.pooled_w()
    }

    pub fn input_dim(&self) -> usize {
        self.input_channels * self.input_h * self.input_w
    }
}

/// Cosine similarity `⟨a,b⟩ / (‖a‖·‖b‖)`, clamped to `[-1, 1]`. Bitwise
/// identical inputs return exactly 1 (their mathematical similarity), which
/// keeps untouched-filter traces exact.
pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "cosine similarity of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let norm_a = a.dot(&a).sqrt();
    let norm_b = b.dot(&b).sqrt();
    if norm_a <= 1e-12 || norm_b <= 1e-12 {
        return Err(Error::InvalidArgument(
            "cosine similarity is undefined for (near-)zero vectors".into(),
        ));
    }
    if a.iter().zip(b.iter()).all(|(x, y)| x == y) {
        return Ok(1.0);
    }
    Ok((a.dot(&b) / (norm_a * norm_b)).clamp(-1.0, 1.0))
}

/// Build a classifier whose first layer is the NSM's feedforward weights.
///
/// Filter `f` is row `f` of `W` (already in patch-flatten order); the
/// convolution biases are zero; the lateral (`M`) and label (`V`) weights
/// are discarded. All other layers are freshly drawn with `seed`.
pub fn transplant(nsm: &NsmLayer, template: &MiniLeNet, seed: u64) -> Result<MiniLeNet> {
    if nsm.output_dim() != template.filters() || nsm.input_dim() != template.patch_dim() {
        return Err(Error::InvalidArgument(format!(
            "cannot transplant a {}x{} NSM layer into {} filters of dimension {}",
            nsm.output_dim(),
            nsm.input_dim(),
            template.filters(),
            template.patch_dim()
        )));
    }
    for (f, row) in nsm.w.rows().into_iter().enumerate() {
        if row.dot(&row).sqrt() <= 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "filter {f} of the trained layer has (near-)zero norm; its drift is undefined"
            )));
        }
    }
    let mut net = MiniLeNet::custom(
        template.input_h,
        template.input_w,
        template.input_channels,
        template.filters(),
        template.kernel_h,
        template.hidden(),
        template.classes(),
        seed,
    )?;
    net.conv_filters = nsm.w.clone();
    net.conv_bias.fill(0.0);
    Ok(net)
}

/// Gradients of the batch loss with respect to every parameter.
#[derive(Debug, Clone)]
pub struct LeNetGradients {
    pub conv_filters: Array2<f64>,
    pub conv_bias: Array1<f64>,
    pub dense1_w: Array2<f64>,
    pub dense1_b: Array1<f64>,
    pub dense2_w: Array2<f64>,
    pub dense2_b: Array1<f64>,
}

impl LeNetGradients {
    fn zeros_like(net: &MiniLeNet) -> Self {
        Self {
            conv_filters: Array2::zeros(net.conv_filters.dim()),
            conv_bias: Array1::zeros(net.conv_bias.len()),
            dense1_w: Array2::zeros(net.dense1_w.dim()),
            dense1_b: Array1::zeros(net.dense1_b.len()),
            dense2_w: Array2::zeros(net.dense2_w.dim()),
            dense2_b: Array1::zeros(net.dense2_b.len()),
        }
    }
}

struct ForwardCache {
    patches: Array2<f64>,
    conv_pre: Array2<f64>,
    /// Source position (column of `conv_pre`) of each pooled maximum; ties
    /// go to the first position in row-major block scan order.
    pool_src: Vec<usize>,
    flat: Array1<f64>,
    h1_pre: Array1<f64>,
    a1: Array1<f64>,
    probs: Array1<f64>,
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

fn forward_sample(net: &MiniLeNet, sample: ArrayView1<f64>) -> Result<ForwardCache> {
    let image =
        data::sample_to_image(sample, net.input_h, net.input_w, net.input_channels)?;
    let grid = data::extract_patches(&image, net.kernel_h, net.kernel_w, 1)?;
    let mut conv_pre = net.conv_filters.dot(&grid.patches);
    for (f, mut row) in conv_pre.rows_mut().into_iter().enumerate() {
        row += net.conv_bias[f];
    }

    let (cw, ph, pw) = (net.conv_w(), net.pooled_h(), net.pooled_w());
    let filters = net.filters();
    let mut pool_src = vec![0usize; filters * ph * pw];
    let mut flat = Array1::zeros(net.flat_dim());
    for f in 0..filters {
        for py in 0..ph {
            for px in 0..pw {
                let mut best_p = (2 * py) * cw + 2 * px;
                let mut best = conv_pre[[f, best_p]].max(0.0);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let p = (2 * py + dy) * cw + (2 * px + dx);
                    let v = conv_pre[[f, p]].max(0.0);
                    if v > best {
                        best = v;
                        best_p = p;
                    }
                }
                let idx = f * ph * pw + py * pw + px;
                pool_src[idx] = best_p;
                flat[idx] = best;
            }
        }
    }

    let h1_pre = net.dense1_w.dot(&flat) + &net.dense1_b;
    let a1 = h1_pre.mapv(|v| v.max(0.0));
    let logits = net.dense2_w.dot(&a1) + &net.dense2_b;
    let probs = softmax(&logits);
    Ok(ForwardCache { patches: grid.patches, conv_pre, pool_src, flat, h1_pre, a1, probs })
}

/// Mean cross-entropy over the batch (columns of `samples`, one-hot
/// `labels`) and its gradients with respect to every parameter.
pub fn loss_and_gradients(
    net: &MiniLeNet,
    samples: &Array2<f64>,
    labels: &Array2<f64>,
) -> Result<(f64, LeNetGradients)> {
    let b = samples.ncols();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if samples.nrows() != net.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "samples have dimension {} but the network expects {}",
            samples.nrows(),
            net.input_dim()
        )));
    }
    if labels.nrows() != net.classes() || labels.ncols() != b {
        return Err(Error::InvalidArgument("label matrix does not match the batch".into()));
    }

    let mut grads = LeNetGradients::zeros_like(net);
    let mut loss = 0.0;
    let scale = 1.0 / b as f64;
    let (ph, pw) = (net.pooled_h(), net.pooled_w());

    for j in 0..b {
        let cache = forward_sample(net, samples.column(j))?;
        if !cache.probs.iter().all(|p| p.is_finite()) {
            return Err(Error::Training(
                "network outputs became non-finite during the forward pass".into(),
            ));
        }
        for (c, &y) in labels.column(j).iter().enumerate() {
            if y > 0.0 {
                loss -= y * cache.probs[c].max(1e-300).ln() * scale;
            }
        }

        let dlogits = (&cache.probs - &labels.column(j)) * scale;
        for c in 0..net.classes() {
            grads.dense2_b[c] += dlogits[c];
            for h in 0..net.hidden() {
                grads.dense2_w[[c, h]] += dlogits[c] * cache.a1[h];
            }
        }
        let da1 = net.dense2_w.t().dot(&dlogits);
        let dh1 =
            Array1::from_shape_fn(net.hidden(), |h| {
                if cache.h1_pre[h] > 0.0 { da1[h] } else { 0.0 }
            });
        for h in 0..net.hidden() {
            if dh1[h] != 0.0 {
                grads.dense1_b[h] += dh1[h];
                for i in 0..net.flat_dim() {
                    grads.dense1_w[[h, i]] += dh1[h] * cache.flat[i];
                }
            }
        }
        let dflat = net.dense1_w.t().dot(&dh1);

        let mut dconv = Array2::zeros(cache.conv_pre.dim());
        for f in 0..net.filters() {
            for i in 0..ph * pw {
                let idx = f * ph * pw + i;
                let p = cache.pool_src[idx];
                if cache.conv_pre[[f, p]] > 0.0 {
                    dconv[[f, p]] += dflat[idx];
                }
            }
        }
        grads.conv_filters += &dconv.dot(&cache.patches.t());
        grads.conv_bias += &dconv.sum_axis(Axis(1));
    }
    Ok((loss, grads))
}

/// Predicted class per column (argmax, ties toward the lowest index).
pub fn lenet_predict(net: &MiniLeNet, samples: &Array2<f64>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.ncols());
    for j in 0..samples.ncols() {
        let cache = forward_sample(net, samples.column(j))?;
        let mut best = 0;
        for c in 1..net.classes() {
            if cache.probs[c] > cache.probs[best] {
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Fraction of argmax-correct predictions on one-hot labels.
pub fn lenet_accuracy(
    net: &MiniLeNet,
    samples: &Array2<f64>,
    labels: &Array2<f64>,
) -> Result<f64> {
    if samples.ncols() == 0 {
        return Err(Error::InvalidArgument("cannot evaluate on an empty set".into()));
    }
    let predictions = lenet_predict(net, samples)?;
    let correct = predictions
        .iter()
        .zip(labels.columns())
        .filter(|(&p, truth)| {
            let mut best = 0;
            for i in 1..truth.len() {
                if truth[i] > truth[best] {
                    best = i;
                }
            }
            p == best
        })
        .count();
    Ok(correct as f64 / samples.ncols() as f64)
}

/// Per-filter drift of the first convolution layer during fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTrace {
    /// SGD step counts at which similarities were recorded (always includes
    /// 0 and the final step).
    pub steps: Vec<usize>,
    /// `filters × len(steps)`; entry `[f, k]` is the cosine similarity of
    /// filter `f` at step `steps[k]` to its value at step 0. All entries lie
    /// in `[-1, 1]`; column 0 is exactly 1.
    pub similarities: Array2<f64>,
    /// Label weight of the NSM pre-training run, when there was one.
    pub alpha: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Record similarities every this many SGD steps (plus step 0 and the
    /// final step).
    pub trace_every: usize,
    /// Carried into the trace for reporting.
    pub alpha_tag: Option<f64>,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self { epochs: 3, lr: 0.05, batch_size: 32, seed: 0, trace_every: 10, alpha_tag: None }
    }
}

/// Minibatch SGD on softmax cross-entropy, tracing each first-layer
/// filter's cosine similarity to its value at entry. `lr = 0` is allowed
/// (weights frozen, similarities stay exactly 1); negative or non-finite
/// rates are rejected. A non-finite loss aborts with a diagnostic.
pub fn finetune(
    mut net: MiniLeNet,
    data: &LabeledDataset,
    options: &FinetuneOptions,
) -> Result<(MiniLeNet, FilterTrace)> {
    if !(options.lr >= 0.0) || !options.lr.is_finite() {
        return Err(Error::InvalidArgument(
            "fine-tuning learning rate must be finite and nonnegative".into(),
        ));
    }
    if options.epochs == 0 || options.batch_size == 0 || options.trace_every == 0 {
        return Err(Error::InvalidArgument(
            "epochs, batch size and trace cadence must be positive".into(),
        ));
    }
    if data.dim() != net.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "dataset dimension {} does not match network input {}",
            data.dim(),
            net.input_dim()
        )));
    }
    if data.class_count != net.classes() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes but the network has {}",
            data.class_count,
            net.classes()
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot fine-tune on an empty dataset".into()));
    }

    let reference = net.conv_filters.clone();
    let filters = net.filters();
    let mut steps = Vec::new();
    let mut sims: Vec<f64> = Vec::new();
    let record = |net: &MiniLeNet, step: usize, steps: &mut Vec<usize>, sims: &mut Vec<f64>| -> Result<()> {
        steps.push(step);
        for f in 0..filters {
            sims.push(cosine_similarity(reference.row(f), net.conv_filters.row(f))?);
        }
        Ok(())
    };
    record(&net, 0, &mut steps, &mut sims)?;

    let t = data.len();
    let mut order: Vec<usize> = (0..t).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut step = 0usize;
    for _ in 0..options.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(options.batch_size) {
            let mut batch = Array2::zeros((data.dim(), chunk.len()));
            let mut batch_labels = Array2::zeros((data.class_count, chunk.len()));
            for (dst, &src) in chunk.iter().enumerate() {
                batch.column_mut(dst).assign(&data.samples.column(src));
                batch_labels.column_mut(dst).assign(&data.labels.column(src));
            }
            let (loss, grads) = loss_and_gradients(&net, &batch, &batch_labels)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "fine-tuning loss became non-finite at step {step}"
                )));
            }
            net.conv_filters -= &(&grads.conv_filters * options.lr);
            net.conv_bias -= &(&grads.conv_bias * options.lr);
            net.dense1_w -= &(&grads.dense1_w * options.lr);
            net.dense1_b -= &(&grads.dense1_b * options.lr);
            net.dense2_w -= &(&grads.dense2_w * options.lr);
            net.dense2_b -= &(&grads.dense2_b * options.lr);
            step += 1;
            if step % options.trace_every == 0 {
                record(&net, step, &mut steps, &mut sims)?;
            }
        }
    }
    if *steps.last().unwrap() != step {
        record(&net, step, &mut steps, &mut sims)?;
    }

    let records = steps.len();
    let similarities =
        Array2::from_shape_fn((filters, records), |(f, k)| sims[k * filters + f]);
    let trace =
        FilterTrace { steps, similarities, alpha: options.alpha_tag, seed: options.seed };
    Ok((net, trace))
}

/// Settings for one pre-training experiment run.
#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    /// NSM pre-training: epochs over a random patch sample of this size.
    pub nsm_epochs: usize,
    pub nsm_batch: usize,
    pub nsm_patch_count: usize,
    pub nsm_lr: LearningRateSchedule,
    pub dynamics: DynamicsConfig,
    /// Standardize patches before the NSM (the convolutional default).
    pub standardize_patches: bool,
    pub finetune: FinetuneOptions,
}

impl PretrainConfig {
    /// Defaults for 28×28 grayscale images.
    pub fn mnist() -> Self {
        Self {
            image_h: 28,
            image_w: 28,
            channels: 1,
            nsm_epochs: 10,
            nsm_batch: 64,
            nsm_patch_count: 20_000,
            nsm_lr: LearningRateSchedule::default(),
            dynamics: DynamicsConfig::default(),
            standardize_patches: true,
            finetune: FinetuneOptions::default(),
        }
    }

    fn conv_config(&self, net: &MiniLeNet) -> ConvNsmConfig {
        ConvNsmConfig {
            patch_h: net.kernel_h,
            patch_w: net.kernel_w,
            stride: 1,
            pooling: Pooling::GlobalAverage,
            preprocess: PreprocessConfig {
                per_patch_standardize: self.standardize_patches,
                zca_whiten: false,
                zca_epsilon: 1e-6,
                pixel_scale: 1.0,
            },
        }
    }
}

/// Step 1: train an NSM layer on patches of the training images, matching
/// the classifier's first convolution (supervised when `alpha > 0`).
pub fn pretrain_nsm(
    alpha: f64,
    seed: u64,
    data: &LabeledDataset,
    template: &MiniLeNet,
    config: &PretrainConfig,
) -> Result<NsmLayer> {
    let class_dim = if alpha > 0.0 { data.class_count } else { 0 };
    let mut layer =
        NsmLayer::init(template.filters(), template.patch_dim(), class_dim, alpha, seed)?;
    layer.lr_schedule = config.nsm_lr.clone();
    let options = TrainOptions {
        epochs: config.nsm_epochs,
        batch_size: config.nsm_batch,
        dynamics: config.dynamics.clone(),
        shuffle: true,
        seed,
    };
    conv::train_conv_layer(
        &mut layer,
        &config.conv_config(template),
        data,
        config.image_h,
        config.image_w,
        config.channels,
        config.nsm_patch_count,
        &options,
    )?;
    Ok(layer)
}

/// Steps 1+2 for one `(alpha, seed)` pair: pre-train, transplant, fine-tune.
pub fn run_single(
    alpha: f64,
    seed: u64,
    data: &LabeledDataset,
    config: &PretrainConfig,
) -> Result<(MiniLeNet, FilterTrace)> {
    // Standard architecture, with the output layer sized to the dataset.
    let template = MiniLeNet::custom(
        config.image_h,
        config.image_w,
        config.channels,
        LENET_FILTERS,
        LENET_KERNEL,
        LENET_HIDDEN,
        data.class_count,
        seed,
    )?;
    let nsm = pretrain_nsm(alpha, seed, data, &template, config)?;
    let net = transplant(&nsm, &template, seed.wrapping_add(0x5EED))?;
    let mut options = config.finetune.clone();
    options.seed = seed;
    options.alpha_tag = Some(alpha);
    finetune(net, data, &options)
}

/// One row of the experiment report: similarity statistics across all
/// filters and seeds at one fine-tuning step for one `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReportRow {
    pub alpha: f64,
    pub step: usize,
    pub median_cos: f64,
    pub p25_cos: f64,
    pub p75_cos: f64,
    pub seed_count: usize,
}

/// Linear-interpolation percentile of a sorted slice, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Run the full grid of `(alpha, seed)` experiments and aggregate filter
/// drift into per-`(alpha, step)` median and quartile rows.
pub fn pretrain_experiment(
    alphas: &[f64],
    seeds: &[u64],
    data: &LabeledDataset,
    config: &PretrainConfig,
) -> Result<Vec<PretrainReportRow>> {
    if alphas.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "the experiment needs at least one alpha and one seed".into(),
        ));
    }
    for &alpha in alphas {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidArgument("alpha values must be finite and >= 0".into()));
        }
    }
    let mut rows = Vec::new();
    for &alpha in alphas {
        let mut traces = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let (_, trace) = run_single(alpha, seed, data, config)?;
            traces.push(trace);
        }
        let steps = traces[0].steps.clone();
        for trace in &traces[1..] {
            if trace.steps != steps {
                return Err(Error::Training(
                    "fine-tuning runs recorded different step grids; cannot aggregate".into(),
                ));
            }
        }
        for (k, &step) in steps.iter().enumerate() {
            let mut values: Vec<f64> = traces
                .iter()
                .flat_map(|t| t.similarities.column(k).to_vec())
                .collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            rows.push(PretrainReportRow {
                alpha,
                step,
                median_cos: percentile(&values, 0.5),
                p25_cos: percentile(&values, 0.25),
                p75_cos: percentile(&values, 0.75),
                seed_count: seeds.len(),
            });
        }
    }
    Ok(rows)
}

/// Render report rows as CSV with a fixed header.
pub fn report_to_csv(rows: &[PretrainReportRow]) -> String {
    let mut out = String::from("alpha,step,median_cos,p25_cos,p75_cos,seed_count\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.alpha, row.step, row.median_cos, row.p25_cos, row.p75_cos, row.seed_count
        ));
    }
    out
}
