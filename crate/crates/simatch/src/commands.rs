//! The four operations behind the command-line interface: `train`, `eval`,
//! `pretrain`, and `bench`.
//!
//! Each command consumes a validated [`RunConfig`], writes its artifacts
//! under `output_dir`, and surfaces failures as [`Err`] for the binary to
//! map onto a nonzero exit status. No command writes outside its output
//! directory.
//!
//! Artifacts:
//!
//! * `train` — `model.nsm` (checkpoint) plus `train_metrics.csv` with
//!   columns `epoch,layer,objective,wall_seconds`. The objective is the
//!   layer's epoch-end training objective; timing is measured per layer, so
//!   `wall_seconds` is that layer's mean wall-clock seconds per epoch. On
//!   any failure the checkpoint is removed rather than left half-written.
//! * `eval` — `eval_metrics.csv` (`metric,value` rows) plus a single
//!   `accuracy=<test accuracy>` line on stdout.
//! * `pretrain` — `pretrain_report.csv` with filter-similarity percentiles
//!   per (label weight, fine-tuning step).
//! * `bench` — `bench.csv` with one row of throughput and per-phase wall
//!   time. The two phases (feature dynamics and weight updates) are timed
//!   directly around their calls, so their sum can be audited against the
//!   loop's total wall time.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array3, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{DataFormat, LayerKindSpec, RunConfig};
use crate::conv::{self, ConvNsmConfig, Pooling};
use crate::data::{self, LabeledDataset, PreprocessConfig};
use crate::error::{Error, Result};
use crate::layer::{LearningRateSchedule, NsmLayer};
use crate::pretrain::{self, FinetuneOptions, PretrainConfig};
use crate::readout;
use crate::stack::{self, StackConfig, StackLayerConfig, TrainedLayerKind, TrainedStack};

/// Checkpoint filename written by `train` and read back by `eval` when
/// `eval.checkpoint` is not set.
pub const CHECKPOINT_FILE: &str = "model.nsm";
pub const TRAIN_METRICS_FILE: &str = "train_metrics.csv";
pub const EVAL_METRICS_FILE: &str = "eval_metrics.csv";
pub const PRETRAIN_REPORT_FILE: &str = "pretrain_report.csv";
pub const BENCH_FILE: &str = "bench.csv";

/// Keeps the label-mask RNG stream distinct from the layer-seed streams.
const LABEL_MASK_SALT: u64 = 0x6C61_6265_6C6D_736B;
/// Likewise for synthetic benchmark inputs.
const BENCH_SALT: u64 = 0x6265_6E63_6873_796E;

/// Which half of the data configuration to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Image geometry implied by the data format. `None` when the flattened
/// samples have no (channels, height, width) interpretation — IDX images
/// are treated as single-channel squares, so a non-square dimension count
/// leaves the geometry undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

/// Cap the worker count for parallel encoding; call once at startup. A
/// pre-existing global pool (e.g. under a test harness) is left in place.
pub fn init_thread_pool(threads: Option<usize>) {
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn image_shape(format: DataFormat, dim: usize) -> Option<ImageShape> {
    match format {
        DataFormat::Cifar10 => Some(ImageShape { h: 32, w: 32, channels: 3 }),
        DataFormat::Idx => {
            let side = (dim as f64).sqrt().round() as usize;
            (side * side == dim).then_some(ImageShape { h: side, w: side, channels: 1 })
        }
    }
}

fn load_idx_pair(
    images: Option<&Path>,
    labels: Option<&Path>,
    images_key: &str,
    labels_key: &str,
    pixel_scale: f64,
) -> Result<LabeledDataset> {
    let images = images
        .ok_or_else(|| Error::Config(format!("{images_key} is required for idx data")))?;
    let labels = labels
        .ok_or_else(|| Error::Config(format!("{labels_key} is required for idx data")))?;
    data::load_mnist_with_scale(images, labels, pixel_scale)
}

fn load_cifar(batches: &[PathBuf], key: &str, pixel_scale: f64) -> Result<LabeledDataset> {
    if batches.is_empty() {
        return Err(Error::Config(format!("{key} is required for cifar10 data")));
    }
    data::load_cifar10_with_scale(batches, pixel_scale)
}

/// Keep labels on a seeded `ceil(fraction·T)`-sample subset and mask the
/// rest, so semi-supervised runs are reproducible per seed.
fn mask_unlabeled(data: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    let t = data.len();
    let keep = ((fraction * t as f64).ceil() as usize).clamp(1, t);
    let mut order: Vec<usize> = (0..t).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ LABEL_MASK_SALT));
    let mut mask = vec![false; t];
    for &j in &order[..keep] {
        mask[j] = true;
    }
    data.with_label_mask(mask)
}

/// Load one split: read the files, apply the sample limit, and (for the
/// training split) mask labels down to `data.labeled_fraction`.
pub fn load_split(
    config: &RunConfig,
    split: Split,
) -> Result<(LabeledDataset, Option<ImageShape>)> {
    let dc = &config.data;
    let format = dc
        .format
        .ok_or_else(|| Error::Config("data.format is required".into()))?;
    let mut dataset = match (format, split) {
        (DataFormat::Idx, Split::Train) => load_idx_pair(
            dc.train_images.as_deref(),
            dc.train_labels.as_deref(),
            "data.train_images",
            "data.train_labels",
            dc.pixel_scale,
        )?,
        (DataFormat::Idx, Split::Test) => load_idx_pair(
            dc.test_images.as_deref(),
            dc.test_labels.as_deref(),
            "data.test_images",
            "data.test_labels",
            dc.pixel_scale,
        )?,
        (DataFormat::Cifar10, Split::Train) => {
            load_cifar(&dc.train_batches, "data.train_batches", dc.pixel_scale)?
        }
        (DataFormat::Cifar10, Split::Test) => {
            load_cifar(&dc.test_batches, "data.test_batches", dc.pixel_scale)?
        }
    };

    let limit = match split {
        Split::Train => dc.train_limit,
        Split::Test => dc.test_limit,
    };
    if limit > 0 && limit < dataset.len() {
        let keep: Vec<usize> = (0..limit).collect();
        dataset = dataset.subset(&keep)?;
    }
    if split == Split::Train && dc.labeled_fraction < 1.0 {
        dataset = mask_unlabeled(&dataset, dc.labeled_fraction, config.seed)?;
    }
    let shape = image_shape(format, dataset.dim());
    Ok((dataset, shape))
}

/// Resolve layer specifications against the dataset. Convolutional layers
/// are only accepted in the first position: deeper codes are pooled feature
/// vectors with no image geometry to slide a patch over.
fn build_stack_config(
    config: &RunConfig,
    data: &LabeledDataset,
    shape: Option<ImageShape>,
) -> Result<StackConfig> {
    let mut layers = Vec::with_capacity(config.layers.len());
    for (k, spec) in config.layers.iter().enumerate() {
        let mut lc = match spec.kind {
            LayerKindSpec::Dense => StackLayerConfig::dense(spec.m, spec.alpha),
            LayerKindSpec::Conv => {
                if k != 0 {
                    return Err(Error::Config(format!(
                        "layer{}.kind=conv: convolutional layers are only supported in \
                         the first position",
                        k + 1
                    )));
                }
                let shape = shape.ok_or_else(|| {
                    Error::Config(
                        "convolutional layers need image geometry; idx images must be \
                         square and single-channel"
                            .into(),
                    )
                })?;
                let cc = ConvNsmConfig {
                    patch_h: spec.patch,
                    patch_w: spec.patch,
                    stride: spec.stride,
                    pooling: spec.pooling,
                    preprocess: PreprocessConfig {
                        per_patch_standardize: spec.standardize,
                        zca_whiten: spec.zca,
                        zca_epsilon: spec.zca_epsilon,
                        pixel_scale: config.data.pixel_scale,
                    },
                };
                StackLayerConfig::conv(
                    spec.m,
                    spec.alpha,
                    cc,
                    shape.h,
                    shape.w,
                    shape.channels,
                    spec.patch_count,
                )
            }
        };
        lc.epochs = spec.epochs;
        lc.batch_size = spec.batch;
        lc.lr_schedule = spec.schedule.clone();
        lc.dynamics = config.dynamics.clone();
        lc.seed = spec.seed;
        layers.push(lc);
    }
    Ok(StackConfig { layers, class_count: data.class_count, input_dim: data.dim() })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_output_dir(config: &RunConfig) -> Result<()> {
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))
}

fn train_metrics_csv(stack: &TrainedStack) -> String {
    let mut out = String::from("epoch,layer,objective,wall_seconds\n");
    for (k, trace) in stack.traces.iter().enumerate() {
        let mean_epoch_seconds = if trace.is_empty() {
            0.0
        } else {
            stack.layer_seconds[k] / trace.len() as f64
        };
        for (e, objective) in trace.iter().enumerate() {
            out.push_str(&format!("{},{},{objective},{mean_epoch_seconds:.6}\n", e + 1, k + 1));
        }
    }
    out
}

/// Train the configured stack and write the checkpoint plus per-epoch
/// metrics. A failure after training removes the partially written outputs.
pub fn cmd_train(config: &RunConfig) -> Result<()> {
    let (train, shape) = load_split(config, Split::Train)?;
    let stack_config = build_stack_config(config, &train, shape)?;
    stack_config.validate()?;
    create_output_dir(config)?;

    let started = Instant::now();
    let stack = stack::train_stack(&train, &stack_config, config.seed)?;
    let train_seconds = started.elapsed().as_secs_f64();

    let model_path = config.output_dir.join(CHECKPOINT_FILE);
    let wrote = (|| {
        write_text(&config.output_dir.join(TRAIN_METRICS_FILE), &train_metrics_csv(&stack))?;
        save_checkpoint(&model_path, &stack, config.config_hash)
    })();
    if wrote.is_err() {
        let _ = fs::remove_file(&model_path);
        return wrote;
    }

    for (k, trace) in stack.traces.iter().enumerate() {
        let first = trace.first().copied().unwrap_or(f64::NAN);
        let last = trace.last().copied().unwrap_or(f64::NAN);
        println!(
            "layer {} objective: {first:.6e} -> {last:.6e} ({} epochs, {:.2}s)",
            k + 1,
            trace.len(),
            stack.layer_seconds[k]
        );
    }
    println!(
        "trained {} layer(s) on {} samples in {train_seconds:.2}s; checkpoint at {}",
        stack.layers.len(),
        train.len(),
        model_path.display()
    );
    Ok(())
}

/// Whitening transforms are derived state and deliberately not serialized;
/// refit them from the training set exactly as training fitted them (same
/// patch sample, same seed), so evaluation reproduces the training-time
/// encoding bit for bit.
fn refit_whitening(
    stack: &mut TrainedStack,
    train: &LabeledDataset,
    config: &RunConfig,
) -> Result<()> {
    let stack_seed = stack.metadata.seed;
    for (k, entry) in stack.layers.iter_mut().enumerate() {
        let TrainedLayerKind::Conv { config: cc, input_h, input_w, input_channels, stats } =
            &mut entry.kind
        else {
            continue;
        };
        if !cc.preprocess.zca_whiten || stats.is_some() {
            continue;
        }
        if k != 0 {
            return Err(Error::Training(
                "cannot refit whitening for a non-initial convolutional layer".into(),
            ));
        }
        let spec = config.layers.get(k);
        let patch_count = spec.map_or(20_000, |s| s.patch_count);
        let seed = spec
            .and_then(|s| s.seed)
            .unwrap_or_else(|| stack_seed.wrapping_add(k as u64));
        let (raw, _sources) = conv::sample_patches(
            &train.samples,
            *input_h,
            *input_w,
            *input_channels,
            cc.patch_h,
            cc.patch_w,
            patch_count,
            seed,
        )?;
        let (_, fitted) = data::preprocess(&raw, &cc.preprocess, None)?;
        *stats = Some(fitted);
    }
    Ok(())
}

/// Encode both splits through a checkpointed stack, train the logistic
/// readout on the labeled training codes, and report test accuracy.
pub fn cmd_eval(config: &RunConfig) -> Result<()> {
    let path = config
        .eval
        .checkpoint
        .clone()
        .unwrap_or_else(|| config.output_dir.join(CHECKPOINT_FILE));
    let (mut stack, stored_hash) = load_checkpoint(&path)?;
    if stored_hash != config.config_hash {
        eprintln!(
            "note: checkpoint {} was written under a different configuration",
            path.display()
        );
    }

    let (train, _) = load_split(config, Split::Train)?;
    let (test, _) = load_split(config, Split::Test)?;
    if train.dim() != stack.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint expects inputs of dimension {} but the training data has {}",
            stack.input_dim(),
            train.dim()
        )));
    }
    if test.dim() != train.dim() {
        return Err(Error::Consistency(format!(
            "training data has dimension {} but test data has {}",
            train.dim(),
            test.dim()
        )));
    }
    if test.class_count != train.class_count {
        return Err(Error::Consistency(format!(
            "training data has {} classes but test data has {}",
            train.class_count, test.class_count
        )));
    }
    refit_whitening(&mut stack, &train, config)?;

    let codes_train = stack::encode_batch(&stack, &train.samples, &config.dynamics)?;
    let codes_test = stack::encode_batch(&stack, &test.samples, &config.dynamics)?;

    // The readout is supervised, so it only sees the labeled samples.
    let labeled: Vec<usize> = train
        .label_mask
        .iter()
        .enumerate()
        .filter_map(|(j, &keep)| keep.then_some(j))
        .collect();
    if labeled.is_empty() {
        return Err(Error::Training("no labeled training samples for the readout".into()));
    }
    let model = if labeled.len() == train.len() {
        readout::train_logreg(
            &codes_train,
            &train.labels,
            config.eval.logreg_l2,
            config.eval.logreg_epochs,
            config.eval.logreg_lr,
            config.seed,
        )?
    } else {
        readout::train_logreg(
            &codes_train.select(Axis(1), &labeled),
            &train.labels.select(Axis(1), &labeled),
            config.eval.logreg_l2,
            config.eval.logreg_epochs,
            config.eval.logreg_lr,
            config.seed,
        )?
    };
    let train_accuracy = readout::evaluate(&model, &codes_train, &train.labels)?;
    let test_accuracy = readout::evaluate(&model, &codes_test, &test.labels)?;

    create_output_dir(config)?;
    let csv = format!(
        "metric,value\ntrain_accuracy,{train_accuracy}\ntest_accuracy,{test_accuracy}\n\
         readout_final_loss,{}\n",
        model.metadata.final_loss
    );
    write_text(&config.output_dir.join(EVAL_METRICS_FILE), &csv)?;
    println!("accuracy={test_accuracy}");
    Ok(())
}

/// Run the pre-training experiment grid and write the similarity report.
pub fn cmd_pretrain(config: &RunConfig) -> Result<()> {
    let (train, shape) = load_split(config, Split::Train)?;
    let shape = shape.ok_or_else(|| {
        Error::Config(
            "pretraining needs image data; idx images must be square and single-channel".into(),
        )
    })?;
    let p = &config.pretrain;
    let pretrain_config = PretrainConfig {
        image_h: shape.h,
        image_w: shape.w,
        channels: shape.channels,
        nsm_epochs: p.nsm_epochs,
        nsm_batch: p.nsm_batch,
        nsm_patch_count: p.patch_count,
        nsm_lr: LearningRateSchedule::default(),
        dynamics: config.dynamics.clone(),
        standardize_patches: true,
        finetune: FinetuneOptions {
            epochs: p.finetune_epochs,
            lr: p.finetune_lr,
            batch_size: p.finetune_batch,
            seed: 0, // overwritten per run by the experiment driver
            trace_every: p.trace_every,
            alpha_tag: None,
        },
    };

    let started = Instant::now();
    let rows = pretrain::pretrain_experiment(&p.alphas, &p.seeds, &train, &pretrain_config)?;
    create_output_dir(config)?;
    let report_path = config.output_dir.join(PRETRAIN_REPORT_FILE);
    write_text(&report_path, &pretrain::report_to_csv(&rows))?;

    for alpha in &p.alphas {
        if let Some(row) = rows.iter().filter(|r| r.alpha == *alpha).next_back() {
            println!(
                "alpha={} final_median_cos={:.4} (step {})",
                row.alpha, row.median_cos, row.step
            );
        }
    }
    println!(
        "pretraining report for {} alpha(s) x {} seed(s) written to {} in {:.2}s",
        p.alphas.len(),
        p.seeds.len(),
        report_path.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Push seeded synthetic images through one convolutional layer, timing the
/// feature dynamics and the weight updates separately.
pub fn cmd_bench(config: &RunConfig) -> Result<()> {
    let b = &config.bench;
    create_output_dir(config)?;
    let csv_path = config.output_dir.join(BENCH_FILE);
    let header = "images,grid_patches,dynamics_seconds,update_seconds,total_seconds,\
                  images_per_second\n";
    if b.images == 0 {
        write_text(&csv_path, header)?;
        println!("benchmarked 0 images");
        return Ok(());
    }
    if b.m == 0 {
        return Err(Error::Config("bench.m must be positive".into()));
    }

    let cc = ConvNsmConfig {
        patch_h: b.patch,
        patch_w: b.patch,
        stride: b.stride,
        pooling: Pooling::QuadrantAverage,
        preprocess: PreprocessConfig {
            per_patch_standardize: true,
            zca_whiten: false,
            zca_epsilon: 1e-6,
            pixel_scale: 1.0,
        },
    };
    cc.validate()?;
    let (grid_h, grid_w) = cc.grid_shape(b.h, b.w)?;
    let mut layer = NsmLayer::init(b.m, cc.patch_dim(b.channels), 0, 0.0, config.seed)?;

    // Generate all inputs up front so synthesis is charged to neither phase.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ BENCH_SALT);
    let images: Vec<Array3<f64>> = (0..b.images)
        .map(|_| Array3::from_shape_fn((b.channels, b.h, b.w), |_| rng.random::<f64>()))
        .collect();

    let mut dynamics_seconds = 0.0;
    let mut update_seconds = 0.0;
    let run = Instant::now();
    for image in &images {
        let t0 = Instant::now();
        let map = conv::conv_forward(&cc, &layer, image, None, &config.dynamics, None)?;
        dynamics_seconds += t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        conv::conv_update(&cc, &mut layer, &map, None)?;
        update_seconds += t1.elapsed().as_secs_f64();
    }
    let total_seconds = run.elapsed().as_secs_f64();
    let throughput = b.images as f64 / total_seconds;

    let row = format!(
        "{},{},{dynamics_seconds:.6},{update_seconds:.6},{total_seconds:.6},{throughput:.3}\n",
        b.images,
        grid_h * grid_w
    );
    write_text(&csv_path, &format!("{header}{row}"))?;
    println!(
        "images={} images_per_second={throughput:.3} dynamics_seconds={dynamics_seconds:.6} \
         update_seconds={update_seconds:.6} total_seconds={total_seconds:.6}",
        b.images
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RawConfig;
    use std::io::Write;

    fn run_config(pairs: &[(&str, &str)]) -> RunConfig {
        let mut raw = RawConfig::default();
        for (key, value) in pairs {
            raw.set(key, value);
        }
        RunConfig::parse(&raw).unwrap()
    }

    /// Write a minimal IDX image/label pair: `t` images of `side`×`side`
    /// with pixel value `(i + j + label) % 251` so classes are separable.
    fn write_idx_fixture(dir: &Path, side: usize, t: usize) -> (PathBuf, PathBuf) {
        let images_path = dir.join("images.idx");
        let labels_path = dir.join("labels.idx");
        let mut images = fs::File::create(&images_path).unwrap();
        images.write_all(&0x0000_0803u32.to_be_bytes()).unwrap();
        for dim in [t, side, side] {
            images.write_all(&(dim as u32).to_be_bytes()).unwrap();
        }
        let mut labels = fs::File::create(&labels_path).unwrap();
        labels.write_all(&0x0000_0801u32.to_be_bytes()).unwrap();
        labels.write_all(&(t as u32).to_be_bytes()).unwrap();
        for j in 0..t {
            let class = (j % 2) as u8;
            for i in 0..side * side {
                // Two visually distinct patterns: ramp vs inverted ramp.
                let v = if class == 0 { (i * 7) % 251 } else { 250 - (i * 7) % 251 };
                images.write_all(&[v as u8]).unwrap();
            }
            labels.write_all(&[class]).unwrap();
        }
        (images_path, labels_path)
    }

    fn idx_config(dir: &Path, extra: &[(&str, &str)]) -> RunConfig {
        let (images, labels) = write_idx_fixture(dir, 6, 24);
        let mut pairs: Vec<(String, String)> = vec![
            ("data.format".into(), "idx".into()),
            ("data.train_images".into(), images.display().to_string()),
            ("data.train_labels".into(), labels.display().to_string()),
            ("data.test_images".into(), images.display().to_string()),
            ("data.test_labels".into(), labels.display().to_string()),
            ("output_dir".into(), dir.join("out").display().to_string()),
        ];
        for (key, value) in extra {
            pairs.push(((*key).into(), (*value).into()));
        }
        let borrowed: Vec<(&str, &str)> =
            pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        run_config(&borrowed)
    }

    #[test]
    fn image_shape_inference() {
        assert_eq!(
            image_shape(DataFormat::Idx, 784),
            Some(ImageShape { h: 28, w: 28, channels: 1 })
        );
        assert_eq!(image_shape(DataFormat::Idx, 10), None);
        assert_eq!(
            image_shape(DataFormat::Cifar10, 3072),
            Some(ImageShape { h: 32, w: 32, channels: 3 })
        );
    }

    #[test]
    fn label_masking_is_seeded_and_sized() {
        let dir = tempfile::tempdir().unwrap();
        let config = idx_config(dir.path(), &[("data.labeled_fraction", "0.5"), ("seed", "3")]);
        let (data, _) = load_split(&config, Split::Train).unwrap();
        assert_eq!(data.label_mask.iter().filter(|&&l| l).count(), 12);

        let (again, _) = load_split(&config, Split::Train).unwrap();
        assert_eq!(data.label_mask, again.label_mask);

        // The test split keeps all labels.
        let (test, _) = load_split(&config, Split::Test).unwrap();
        assert!(test.label_mask.iter().all(|&l| l));
    }

    #[test]
    fn missing_data_keys_are_config_errors() {
        let config = run_config(&[]);
        let err = load_split(&config, Split::Train).unwrap_err();
        assert!(err.to_string().contains("data.format"), "{err}");

        let config = run_config(&[("data.format", "idx")]);
        let err = load_split(&config, Split::Train).unwrap_err();
        assert!(err.to_string().contains("data.train_images"), "{err}");

        let config = run_config(&[("data.format", "cifar10")]);
        let err = load_split(&config, Split::Test).unwrap_err();
        assert!(err.to_string().contains("data.test_batches"), "{err}");
    }

    #[test]
    fn conv_layers_are_first_position_only() {
        let dir = tempfile::tempdir().unwrap();
        let config = idx_config(
            dir.path(),
            &[
                ("layers", "2"),
                ("layer1.m", "4"),
                ("layer2.m", "4"),
                ("layer2.kind", "conv"),
            ],
        );
        let (data, shape) = load_split(&config, Split::Train).unwrap();
        let err = build_stack_config(&config, &data, shape).unwrap_err();
        assert!(err.to_string().contains("first position"), "{err}");
    }

    #[test]
    fn train_then_eval_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = idx_config(
            dir.path(),
            &[
                ("layers", "1"),
                ("layer1.m", "6"),
                ("layer1.epochs", "3"),
                ("layer1.batch", "8"),
                ("readout.epochs", "200"),
                ("data.train_limit", "16"),
            ],
        );
        cmd_train(&config).unwrap();
        let model = config.output_dir.join(CHECKPOINT_FILE);
        assert!(model.exists());
        let metrics = fs::read_to_string(config.output_dir.join(TRAIN_METRICS_FILE)).unwrap();
        let rows: Vec<&str> = metrics.trim().lines().collect();
        assert_eq!(rows[0], "epoch,layer,objective,wall_seconds");
        assert_eq!(rows.len(), 1 + 3, "one row per epoch, got: {metrics}");

        cmd_eval(&config).unwrap();
        let eval = fs::read_to_string(config.output_dir.join(EVAL_METRICS_FILE)).unwrap();
        let accuracy_line = eval
            .lines()
            .find(|line| line.starts_with("test_accuracy,"))
            .expect("eval metrics include test accuracy");
        let accuracy: f64 = accuracy_line.split(',').nth(1).unwrap().parse().unwrap();
        // Two maximally distinct patterns; the readout should separate them.
        assert!(accuracy > 0.9, "accuracy {accuracy}");
    }

    #[test]
    fn training_twice_writes_identical_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx_fixture(dir.path(), 6, 12);
        let config = run_config(&[
            ("data.format", "idx"),
            ("data.train_images", &images.display().to_string()),
            ("data.train_labels", &labels.display().to_string()),
            ("output_dir", &dir.path().join("out").display().to_string()),
            ("layers", "1"),
            ("layer1.m", "4"),
            ("layer1.epochs", "2"),
            ("seed", "11"),
        ]);
        cmd_train(&config).unwrap();
        let model = config.output_dir.join(CHECKPOINT_FILE);
        let first = fs::read(&model).unwrap();
        cmd_train(&config).unwrap();
        let second = fs::read(&model).unwrap();
        assert_eq!(first, second, "same configuration and seed must reproduce the checkpoint");
    }

    #[test]
    fn bench_zero_images_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let config = run_config(&[
            ("output_dir", &dir.path().display().to_string()),
            ("bench.images", "0"),
        ]);
        cmd_bench(&config).unwrap();
        let csv = fs::read_to_string(dir.path().join(BENCH_FILE)).unwrap();
        assert_eq!(csv.trim().lines().count(), 1, "{csv}");
        assert!(csv.starts_with("images,"));
    }

    #[test]
    fn bench_accounts_phases_against_total() {
        let dir = tempfile::tempdir().unwrap();
        let config = run_config(&[
            ("output_dir", &dir.path().display().to_string()),
            ("bench.images", "3"),
            ("bench.m", "4"),
            ("bench.h", "8"),
            ("bench.w", "8"),
            ("bench.channels", "1"),
            ("bench.patch", "4"),
            ("bench.stride", "2"),
        ]);
        cmd_bench(&config).unwrap();
        let csv = fs::read_to_string(dir.path().join(BENCH_FILE)).unwrap();
        let row = csv.trim().lines().nth(1).expect("one data row");
        let fields: Vec<f64> = row.split(',').map(|f| f.parse().unwrap()).collect();
        let (images, patches, dynamics, updates, total, throughput) =
            (fields[0], fields[1], fields[2], fields[3], fields[4], fields[5]);
        assert_eq!(images, 3.0);
        assert_eq!(patches, 9.0); // (8-4)/2+1 = 3 per side
        assert!(dynamics > 0.0 && updates > 0.0);
        assert!(dynamics + updates <= total * 1.0001);
        assert!(throughput > 0.0);
    }

    #[test]
    fn eval_rejects_mismatched_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let config = idx_config(
            dir.path(),
            &[("layers", "1"), ("layer1.m", "4"), ("layer1.epochs", "1")],
        );
        cmd_train(&config).unwrap();

        // Same checkpoint, smaller images: dimension mismatch must fail.
        let (images, labels) = {
            let sub = dir.path().join("small");
            fs::create_dir_all(&sub).unwrap();
            write_idx_fixture(&sub, 4, 8)
        };
        let mismatched = run_config(&[
            ("data.format", "idx"),
            ("data.train_images", &images.display().to_string()),
            ("data.train_labels", &labels.display().to_string()),
            ("data.test_images", &images.display().to_string()),
            ("data.test_labels", &labels.display().to_string()),
            ("output_dir", &config.output_dir.display().to_string()),
        ]);
        let err = cmd_eval(&mismatched).unwrap_err();
        assert!(err.to_string().contains("dimension"), "{err}");
    }
}
