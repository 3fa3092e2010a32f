//! Greedy layer-wise training of a stack of similarity-matching layers.
//!
//! Layer `k` consumes the converged activities of the frozen layer `k−1`
//! (recomputed with its final weights, including the supervised drive for
//! labeled samples) plus its own scaled label channel. Layers are trained
//! strictly in order; once a layer is trained its weights never change.
//!
//! Inference ([`encode`]/[`encode_batch`]) never touches labels: the label
//! drive exists only during training, so evaluation on held-out data is
//! legitimate by construction — the encode API has no label parameter.

use ndarray::{Array1, Array2};

use crate::conv::{self, ConvNsmConfig};
use crate::data::{LabeledDataset, PreprocessStats};
use crate::dynamics::DynamicsConfig;
use crate::error::{Error, Result};
use crate::layer::{self, LearningRateSchedule, NsmLayer, TrainOptions};

/// Where a layer gets its input from and how it is applied.
#[derive(Debug, Clone)]
pub enum StackLayerKind {
    /// The layer sees the previous output vector directly.
    Dense,
    /// The layer is swept over patches of its input, which is interpreted as
    /// an `input_channels × input_h × input_w` image; `patch_count` random
    /// patches are drawn across the dataset for training.
    Conv {
        config: ConvNsmConfig,
        input_h: usize,
        input_w: usize,
        input_channels: usize,
        patch_count: usize,
    },
}

/// Training recipe for one layer of the stack.
#[derive(Debug, Clone)]
pub struct StackLayerConfig {
    /// Number of output units (filters, for a convolutional layer).
    pub m: usize,
    /// Label weight; 0 disables the supervised pathway for this layer.
    pub alpha: f64,
    pub kind: StackLayerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LearningRateSchedule,
    pub dynamics: DynamicsConfig,
    /// Overrides the seed derived from the stack seed; lets one layer be
    /// re-randomized without disturbing the others.
    pub seed: Option<u64>,
}

impl StackLayerConfig {
    pub fn dense(m: usize, alpha: f64) -> Self {
        Self {
            m,
            alpha,
            kind: StackLayerKind::Dense,
            epochs: 10,
            batch_size: 32,
            lr_schedule: LearningRateSchedule::default(),
            dynamics: DynamicsConfig::default(),
            seed: None,
        }
    }

    pub fn conv(
        m: usize,
        alpha: f64,
        config: ConvNsmConfig,
        input_h: usize,
        input_w: usize,
        input_channels: usize,
        patch_count: usize,
    ) -> Self {
        Self {
            kind: StackLayerKind::Conv { config, input_h, input_w, input_channels, patch_count },
            ..Self::dense(m, alpha)
        }
    }
}

/// Full stack recipe. `input_dim` is the flattened dimension of the raw
/// inputs; the layer dimension chain is validated against it before any
/// training starts.
#[derive(Debug, Clone)]
pub struct StackConfig {
    pub layers: Vec<StackLayerConfig>,
    pub class_count: usize,
    pub input_dim: usize,
}

impl StackConfig {
    /// Checks the whole dimension chain and per-layer settings; returns the
    /// output dimension of the final layer.
    pub fn validate(&self) -> Result<usize> {
        if self.layers.is_empty() {
            return Err(Error::Config("stack needs at least one layer".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("stack input dimension must be positive".into()));
        }
        let mut dim = self.input_dim;
        for (k, lc) in self.layers.iter().enumerate() {
            if lc.m == 0 {
                return Err(Error::Config(format!("layer {k}: output dimension must be positive")));
            }
            if !(lc.alpha >= 0.0) || !lc.alpha.is_finite() {
                return Err(Error::Config(format!("layer {k}: alpha must be finite and >= 0")));
            }
            if lc.alpha > 0.0 && self.class_count == 0 {
                return Err(Error::Config(format!(
                    "layer {k}: alpha > 0 requires a positive class count"
                )));
            }
            if lc.epochs == 0 || lc.batch_size == 0 {
                return Err(Error::Config(format!(
                    "layer {k}: epochs and batch size must be positive"
                )));
            }
            lc.lr_schedule.validate()?;
            lc.dynamics.validate()?;
            dim = match &lc.kind {
                StackLayerKind::Dense => lc.m,
                StackLayerKind::Conv { config, input_h, input_w, input_channels, patch_count } => {
                    config.validate()?;
                    if input_channels * input_h * input_w != dim {
                        return Err(Error::Config(format!(
                            "layer {k}: conv geometry {input_channels}x{input_h}x{input_w} \
                             does not match input dimension {dim}"
                        )));
                    }
                    config.grid_shape(*input_h, *input_w).map_err(|e| {
                        Error::Config(format!("layer {k}: {e}"))
                    })?;
                    if *patch_count == 0 {
                        return Err(Error::Config(format!(
                            "layer {k}: conv training needs a positive patch count"
                        )));
                    }
                    config.pooled_dim(lc.m)
                }
            };
        }
        Ok(dim)
    }
}

/// One trained layer plus how to apply it.
#[derive(Debug, Clone)]
pub enum TrainedLayerKind {
    Dense,
    Conv {
        config: ConvNsmConfig,
        input_h: usize,
        input_w: usize,
        input_channels: usize,
        /// Preprocessing fitted on the training patches (present only when
        /// the conv preprocessing needs fitted state, i.e. ZCA).
        stats: Option<PreprocessStats>,
    },
}

#[derive(Debug, Clone)]
pub struct StackLayer {
    pub layer: NsmLayer,
    pub kind: TrainedLayerKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackMetadata {
    pub seed: u64,
    pub dataset_fingerprint: u64,
}

#[derive(Debug, Clone)]
pub struct TrainedStack {
    pub layers: Vec<StackLayer>,
    /// One objective trace per layer, one entry per epoch.
    pub traces: Vec<Vec<f64>>,
    /// Wall-clock seconds spent training each layer (including the
    /// re-encoding pass that produces the next layer's inputs). Not part of
    /// the model; checkpoints restore this as zeros.
    pub layer_seconds: Vec<f64>,
    pub metadata: StackMetadata,
}

impl TrainedStack {
    pub fn input_dim(&self) -> usize {
        match &self.layers[0].kind {
            TrainedLayerKind::Dense => self.layers[0].layer.input_dim(),
            TrainedLayerKind::Conv { input_h, input_w, input_channels, .. } => {
                input_channels * input_h * input_w
            }
        }
    }

    pub fn output_dim(&self) -> usize {
        let last = self.layers.last().expect("a trained stack has at least one layer");
        match &last.kind {
            TrainedLayerKind::Dense => last.layer.output_dim(),
            TrainedLayerKind::Conv { config, .. } => config.pooled_dim(last.layer.output_dim()),
        }
    }
}

fn layer_seed(stack_seed: u64, index: usize, config: &StackLayerConfig) -> u64 {
    config.seed.unwrap_or_else(|| stack_seed.wrapping_add(index as u64))
}

/// Scaled labels with masked columns zeroed, so samples without labels
/// receive no supervised drive and trigger no label-weight updates.
fn masked_scaled_labels(data: &LabeledDataset, alpha: f64) -> Result<Array2<f64>> {
    let mut y = layer::scale_labels(&data.labels, alpha)?;
    for (j, &labeled) in data.label_mask.iter().enumerate() {
        if !labeled {
            y.column_mut(j).fill(0.0);
        }
    }
    Ok(y)
}

/// Train every layer greedily. Layer `k` trains on the converged outputs of
/// the already-frozen layers below it; for supervised layers the label drive
/// uses `scale_labels(Y, alpha)` with per-sample masking, so samples without
/// labels behave exactly as in an unsupervised run.
pub fn train_stack(data: &LabeledDataset, config: &StackConfig, seed: u64) -> Result<TrainedStack> {
    config.validate()?;
    if data.dim() != config.input_dim {
        return Err(Error::InvalidArgument(format!(
            "dataset dimension {} does not match configured input dimension {}",
            data.dim(),
            config.input_dim
        )));
    }
    if data.class_count != config.class_count {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes but the stack is configured for {}",
            data.class_count, config.class_count
        )));
    }

    let mut current = data.samples.clone();
    let mut layers: Vec<StackLayer> = Vec::with_capacity(config.layers.len());
    let mut traces: Vec<Vec<f64>> = Vec::with_capacity(config.layers.len());
    let mut layer_seconds: Vec<f64> = Vec::with_capacity(config.layers.len());

    for (k, lc) in config.layers.iter().enumerate() {
        let layer_start = std::time::Instant::now();
        let seed_k = layer_seed(seed, k, lc);
        let supervised = lc.alpha > 0.0;
        let class_dim = if supervised { config.class_count } else { 0 };
        let in_dim = match &lc.kind {
            StackLayerKind::Dense => current.nrows(),
            StackLayerKind::Conv { config: cc, input_channels, .. } => {
                cc.patch_dim(*input_channels)
            }
        };
        let mut nsm = NsmLayer::init(lc.m, in_dim, class_dim, lc.alpha, seed_k)?;
        nsm.lr_schedule = lc.lr_schedule.clone();
        let options = TrainOptions {
            epochs: lc.epochs,
            batch_size: lc.batch_size,
            dynamics: lc.dynamics.clone(),
            shuffle: true,
            seed: seed_k,
        };
        let y_scaled = if supervised {
            Some(masked_scaled_labels(data, lc.alpha)?)
        } else {
            None
        };

        let (trained, trace, outputs) = match &lc.kind {
            StackLayerKind::Dense => {
                let trace = layer::train_dense(
                    &mut nsm,
                    &current,
                    y_scaled.as_ref(),
                    if supervised { Some(&data.label_mask) } else { None },
                    &options,
                )?;
                let outputs =
                    nsm.forward_batch(&current, y_scaled.as_ref(), &lc.dynamics, None)?.z;
                (StackLayer { layer: nsm, kind: TrainedLayerKind::Dense }, trace, outputs)
            }
            StackLayerKind::Conv { config: cc, input_h, input_w, input_channels, patch_count } => {
                let view = LabeledDataset::new(
                    current.clone(),
                    data.labels.clone(),
                    Some(data.label_mask.clone()),
                )?;
                let report = conv::train_conv_layer(
                    &mut nsm,
                    cc,
                    &view,
                    *input_h,
                    *input_w,
                    *input_channels,
                    *patch_count,
                    &options,
                )?;
                let stats = if cc.preprocess.zca_whiten { Some(report.stats.clone()) } else { None };
                let outputs = conv_outputs(
                    cc,
                    &nsm,
                    &current,
                    *input_h,
                    *input_w,
                    *input_channels,
                    &lc.dynamics,
                    stats.as_ref(),
                    y_scaled.as_ref(),
                )?;
                let kind = TrainedLayerKind::Conv {
                    config: cc.clone(),
                    input_h: *input_h,
                    input_w: *input_w,
                    input_channels: *input_channels,
                    stats,
                };
                (StackLayer { layer: nsm, kind }, report.trace, outputs)
            }
        };
        layers.push(trained);
        traces.push(trace);
        layer_seconds.push(layer_start.elapsed().as_secs_f64());
        current = outputs;
    }

    Ok(TrainedStack {
        layers,
        traces,
        layer_seconds,
        metadata: StackMetadata { seed, dataset_fingerprint: data.fingerprint() },
    })
}

/// Converged pooled outputs for every image, with the label drive applied
/// per column (zero label columns contribute nothing, so masked samples get
/// their unsupervised activities). Used only while training the next layer.
#[allow(clippy::too_many_arguments)]
fn conv_outputs(
    config: &ConvNsmConfig,
    nsm: &NsmLayer,
    samples: &Array2<f64>,
    h: usize,
    w: usize,
    channels: usize,
    dynamics: &DynamicsConfig,
    stats: Option<&PreprocessStats>,
    y_scaled: Option<&Array2<f64>>,
) -> Result<Array2<f64>> {
    let t = samples.ncols();
    let out_dim = config.pooled_dim(nsm.output_dim());
    let mut codes = Array2::zeros((out_dim, t));
    for j in 0..t {
        let image = crate::data::sample_to_image(samples.column(j), h, w, channels)?;
        let y = y_scaled.map(|ys| ys.column(j).to_owned());
        let map = conv::conv_forward(config, nsm, &image, y.as_ref(), dynamics, stats)?;
        codes.column_mut(j).assign(&map.pooled);
    }
    Ok(codes)
}

/// Encode a batch of raw inputs (columns) through the whole stack with the
/// label pathway inactive.
pub fn encode_batch(
    stack: &TrainedStack,
    inputs: &Array2<f64>,
    dynamics: &DynamicsConfig,
) -> Result<Array2<f64>> {
    if inputs.nrows() != stack.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "inputs have dimension {} but the stack expects {}",
            inputs.nrows(),
            stack.input_dim()
        )));
    }
    let mut current = inputs.to_owned();
    for entry in &stack.layers {
        current = match &entry.kind {
            TrainedLayerKind::Dense => {
                entry.layer.forward_batch(&current, None, dynamics, None)?.z
            }
            TrainedLayerKind::Conv { config, input_h, input_w, input_channels, stats } => {
                conv::encode_images(
                    config,
                    &entry.layer,
                    &current,
                    *input_h,
                    *input_w,
                    *input_channels,
                    dynamics,
                    stats.as_ref(),
                )?
            }
        };
    }
    Ok(current)
}

/// Encode one raw input vector; see [`encode_batch`].
pub fn encode(
    stack: &TrainedStack,
    input: &Array1<f64>,
    dynamics: &DynamicsConfig,
) -> Result<Array1<f64>> {
    let column = input.view().insert_axis(ndarray::Axis(1)).to_owned();
    let codes = encode_batch(stack, &column, dynamics)?;
    Ok(codes.column(0).to_owned())
}
