//! Binary checkpoint format for trained stacks.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes    "NSM1"
//! version          u32        currently 1; any other value refuses to load
//! layer_count      u32
//! per layer:
//!   m, n, c        u32 ×3     output, input and label dimensions (c = 0 when
//!                             the layer has no label weights)
//!   alpha          f64
//!   flags          u32        bit 0: V present, bit 1: applied convolutionally
//!   lr tag         u8         0 constant, 1 inverse-time
//!   eta0           f64
//!   decay          f64        only for the inverse-time tag
//!   update_count   u64
//!   if conv flag:
//!     patch_h, patch_w, stride          u32 ×3
//!     pooling                           u8 (0 quadrant-average, 1 global)
//!     input_h, input_w, input_channels  u32 ×3
//!     standardize, zca                  u8 ×2
//!     zca_epsilon, pixel_scale          f64 ×2
//!   W              m·n × f64  row-major
//!   M              m·m × f64  row-major
//!   V              m·c × f64  row-major, present only when bit 0 is set
//! metadata_len     u32
//! metadata         UTF-8      "seed=<hex>;fingerprint=<hex>;config_hash=<hex>"
//! ```
//!
//! Everything is stored as 64-bit floats so a save → load → save cycle is
//! byte-identical. Objective traces are training history, not part of the
//! model, and are not serialized; a loaded stack has empty traces.
//!
//! Fitted preprocessing statistics (ZCA) are likewise not serialized: they
//! are a deterministic function of the training data and configuration, and
//! evaluation refits them from the training set it is given.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::conv::{ConvNsmConfig, Pooling};
use crate::data::PreprocessConfig;
use crate::error::{Error, Result};
use crate::layer::{LearningRateSchedule, NsmLayer};
use crate::stack::{StackLayer, StackMetadata, TrainedLayerKind, TrainedStack};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NSM1";
pub const CHECKPOINT_VERSION: u32 = 1;

const FLAG_HAS_V: u32 = 1;
const FLAG_CONV: u32 = 2;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_matrix(buf: &mut Vec<u8>, m: &Array2<f64>) {
    for row in m.rows() {
        for &v in row.iter() {
            push_f64(buf, v);
        }
    }
}

/// Sequential reader over the checkpoint bytes with position-aware errors.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                &self.source,
                format!(
                    "truncated while reading {what} at byte {} (need {n} more, have {})",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((rows, cols));
        for r in 0..rows {
            for c in 0..cols {
                out[[r, c]] = self.f64(what)?;
            }
        }
        Ok(out)
    }
}

fn encode_stack(stack: &TrainedStack, config_hash: u64) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    push_u32(&mut buf, stack.layers.len() as u32);

    for entry in &stack.layers {
        let layer = &entry.layer;
        let c = layer.v.as_ref().map_or(0, |v| v.ncols());
        push_u32(&mut buf, layer.output_dim() as u32);
        push_u32(&mut buf, layer.input_dim() as u32);
        push_u32(&mut buf, c as u32);
        push_f64(&mut buf, layer.alpha);
        let mut flags = 0u32;
        if layer.v.is_some() {
            flags |= FLAG_HAS_V;
        }
        if matches!(entry.kind, TrainedLayerKind::Conv { .. }) {
            flags |= FLAG_CONV;
        }
        push_u32(&mut buf, flags);
        match &layer.lr_schedule {
            LearningRateSchedule::Constant { eta0 } => {
                buf.push(0);
                push_f64(&mut buf, *eta0);
            }
            LearningRateSchedule::InverseTime { eta0, decay } => {
                buf.push(1);
                push_f64(&mut buf, *eta0);
                push_f64(&mut buf, *decay);
            }
        }
        push_u64(&mut buf, layer.update_count);

        if let TrainedLayerKind::Conv { config, input_h, input_w, input_channels, stats: _ } =
            &entry.kind
        {
            push_u32(&mut buf, config.patch_h as u32);
            push_u32(&mut buf, config.patch_w as u32);
            push_u32(&mut buf, config.stride as u32);
            buf.push(match config.pooling {
                Pooling::QuadrantAverage => 0,
                Pooling::GlobalAverage => 1,
            });
            push_u32(&mut buf, *input_h as u32);
            push_u32(&mut buf, *input_w as u32);
            push_u32(&mut buf, *input_channels as u32);
            buf.push(config.preprocess.per_patch_standardize as u8);
            buf.push(config.preprocess.zca_whiten as u8);
            push_f64(&mut buf, config.preprocess.zca_epsilon);
            push_f64(&mut buf, config.preprocess.pixel_scale);
        }

        push_matrix(&mut buf, &layer.w);
        push_matrix(&mut buf, &layer.m);
        if let Some(v) = &layer.v {
            push_matrix(&mut buf, v);
        }
    }

    let metadata = format!(
        "seed={:016x};fingerprint={:016x};config_hash={:016x}",
        stack.metadata.seed, stack.metadata.dataset_fingerprint, config_hash
    );
    push_u32(&mut buf, metadata.len() as u32);
    buf.extend_from_slice(metadata.as_bytes());
    buf
}

/// Serialize a trained stack. The file is written to a temporary sibling
/// and renamed into place, so a crash never leaves a half-written
/// checkpoint under the target name.
pub fn save_checkpoint(path: &Path, stack: &TrainedStack, config_hash: u64) -> Result<()> {
    if stack.layers.is_empty() {
        return Err(Error::InvalidArgument("refusing to save an empty stack".into()));
    }
    let bytes = encode_stack(stack, config_hash);
    let tmp = path.with_extension("tmp");
    let write_then_rename = (|| {
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    })();
    if write_then_rename.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    write_then_rename
}

fn parse_metadata(source: &str, text: &str) -> Result<(StackMetadata, u64)> {
    let mut seed = None;
    let mut fingerprint = None;
    let mut config_hash = None;
    for part in text.split(';') {
        let (key, value) = part.split_once('=').ok_or_else(|| {
            Error::format(source, format!("metadata entry {part:?} is not key=value"))
        })?;
        let parsed = u64::from_str_radix(value, 16).map_err(|_| {
            Error::format(source, format!("metadata value {value:?} is not hexadecimal"))
        })?;
        match key {
            "seed" => seed = Some(parsed),
            "fingerprint" => fingerprint = Some(parsed),
            "config_hash" => config_hash = Some(parsed),
            other => {
                return Err(Error::format(source, format!("unknown metadata key {other:?}")));
            }
        }
    }
    match (seed, fingerprint, config_hash) {
        (Some(s), Some(f), Some(h)) => {
            Ok((StackMetadata { seed: s, dataset_fingerprint: f }, h))
        }
        _ => Err(Error::format(source, "metadata is missing seed/fingerprint/config_hash")),
    }
}

/// Load a checkpoint saved by [`save_checkpoint`]. Returns the stack (with
/// empty objective traces) and the stored configuration hash.
pub fn load_checkpoint(path: &Path) -> Result<(TrainedStack, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    let mut r = Reader { bytes: &bytes, pos: 0, source: source.clone() };

    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(
            &source,
            format!("bad magic {magic:02x?}, expected {CHECKPOINT_MAGIC:02x?}"),
        ));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &source,
            format!("unsupported version {version}, this build reads {CHECKPOINT_VERSION}"),
        ));
    }
    let layer_count = r.u32("layer count")? as usize;
    if layer_count == 0 {
        return Err(Error::format(&source, "checkpoint contains no layers"));
    }

    let mut layers = Vec::with_capacity(layer_count);
    for k in 0..layer_count {
        let what = |field: &str| format!("layer {k} {field}");
        let m = r.u32(&what("m"))? as usize;
        let n = r.u32(&what("n"))? as usize;
        let c = r.u32(&what("c"))? as usize;
        if m == 0 || n == 0 {
            return Err(Error::format(&source, format!("layer {k} has zero dimensions")));
        }
        let alpha = r.f64(&what("alpha"))?;
        let flags = r.u32(&what("flags"))?;
        if flags & !(FLAG_HAS_V | FLAG_CONV) != 0 {
            return Err(Error::format(&source, format!("layer {k}: unknown flags {flags:#x}")));
        }
        let has_v = flags & FLAG_HAS_V != 0;
        if has_v && c == 0 {
            return Err(Error::format(
                &source,
                format!("layer {k}: V marked present but label dimension is 0"),
            ));
        }
        let lr_schedule = match r.u8(&what("lr tag"))? {
            0 => LearningRateSchedule::Constant { eta0: r.f64(&what("eta0"))? },
            1 => LearningRateSchedule::InverseTime {
                eta0: r.f64(&what("eta0"))?,
                decay: r.f64(&what("decay"))?,
            },
            tag => {
                return Err(Error::format(
                    &source,
                    format!("layer {k}: unknown learning-rate tag {tag}"),
                ));
            }
        };
        let update_count = r.u64(&what("update count"))?;

        let kind = if flags & FLAG_CONV != 0 {
            let patch_h = r.u32(&what("patch_h"))? as usize;
            let patch_w = r.u32(&what("patch_w"))? as usize;
            let stride = r.u32(&what("stride"))? as usize;
            let pooling = match r.u8(&what("pooling"))? {
                0 => Pooling::QuadrantAverage,
                1 => Pooling::GlobalAverage,
                tag => {
                    return Err(Error::format(
                        &source,
                        format!("layer {k}: unknown pooling tag {tag}"),
                    ));
                }
            };
            let input_h = r.u32(&what("input_h"))? as usize;
            let input_w = r.u32(&what("input_w"))? as usize;
            let input_channels = r.u32(&what("input_channels"))? as usize;
            let per_patch_standardize = r.u8(&what("standardize flag"))? != 0;
            let zca_whiten = r.u8(&what("zca flag"))? != 0;
            let zca_epsilon = r.f64(&what("zca_epsilon"))?;
            let pixel_scale = r.f64(&what("pixel_scale"))?;
            TrainedLayerKind::Conv {
                config: ConvNsmConfig {
                    patch_h,
                    patch_w,
                    stride,
                    pooling,
                    preprocess: PreprocessConfig {
                        per_patch_standardize,
                        zca_whiten,
                        zca_epsilon,
                        pixel_scale,
                    },
                },
                input_h,
                input_w,
                input_channels,
                stats: None,
            }
        } else {
            TrainedLayerKind::Dense
        };

        let w = r.matrix(m, n, &what("W"))?;
        let m_mat = r.matrix(m, m, &what("M"))?;
        let v = if has_v { Some(r.matrix(m, c, &what("V"))?) } else { None };

        layers.push(StackLayer {
            layer: NsmLayer { w, m: m_mat, v, alpha, lr_schedule, update_count },
            kind,
        });
    }

    let metadata_len = r.u32("metadata length")? as usize;
    let metadata_bytes = r.take(metadata_len, "metadata")?;
    let metadata_text = std::str::from_utf8(metadata_bytes)
        .map_err(|_| Error::format(&source, "metadata is not valid UTF-8"))?;
    let (metadata, config_hash) = parse_metadata(&source, metadata_text)?;

    if r.pos != bytes.len() {
        return Err(Error::format(
            &source,
            format!("{} trailing bytes after the metadata block", bytes.len() - r.pos),
        ));
    }

    let traces = vec![Vec::new(); layer_count];
    let layer_seconds = vec![0.0; layer_count];
    Ok((TrainedStack { layers, traces, layer_seconds, metadata }, config_hash))
}
