//! One similarity-matching layer: synaptic state and local learning rules.
//!
//! A layer holds feedforward weights `W (m×n)`, lateral weights `M (m×m,
//! symmetric PD)`, and — when label-supervised — label weights `V (m×c)`.
//! Activities come from [`crate::dynamics`]; learning is Hebbian/anti-Hebbian:
//!
//! ```text
//! W ← W + η (z xᵀ − W)      V ← V + η (z yᵀ − V)      M ← M + η (z zᵀ − M)
//! ```
//!
//! averaged over a minibatch. These are exactly the per-matrix-scaled
//! gradients of the min-max objective evaluated by [`minmax_value`]
//! (descent in `W`, `V`; ascent in `M`), which the tests certify by finite
//! differences. A common shorthand for the same rules writes `ΔW = XẐᵀ`,
//! `ΔM = −ẐẐᵀ`; that shorthand's shapes and signs follow the opposite
//! transposition/optimization convention, so the gradient-consistent decaying
//! form above is the one implemented.
//!
//! After every update `M` is resymmetrized and, if its smallest eigenvalue
//! has fallen below the damping floor `ε_M = 1e-3 · tr(M)/m`, shifted by
//! `(ε_M − λ_min)·I` so the per-sample dynamics stay well-posed.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{self, BatchDynamicsResult, DynamicsConfig, DynamicsResult};
use crate::error::{Error, Result};
use crate::linalg;

/// Learning-rate schedule `η_t`; updates are convex combinations, so
/// `η_t ∈ (0, 1]` is enforced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LearningRateSchedule {
    Constant { eta0: f64 },
    /// `η_t = eta0 / (1 + decay·t)` with `t` the layer's update count.
    InverseTime { eta0: f64, decay: f64 },
}

impl Default for LearningRateSchedule {
    fn default() -> Self {
        LearningRateSchedule::InverseTime { eta0: 0.05, decay: 1e-3 }
    }
}

impl LearningRateSchedule {
    pub fn validate(&self) -> Result<()> {
        let (eta0, decay) = match *self {
            LearningRateSchedule::Constant { eta0 } => (eta0, 0.0),
            LearningRateSchedule::InverseTime { eta0, decay } => (eta0, decay),
        };
        if !(eta0 > 0.0 && eta0 <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "eta0 must lie in (0, 1], got {eta0}"
            )));
        }
        if !(decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "decay must be nonnegative, got {decay}"
            )));
        }
        Ok(())
    }

    /// Rate for the `t`-th update (0-based).
    pub fn eta(&self, t: u64) -> f64 {
        match *self {
            LearningRateSchedule::Constant { eta0 } => eta0,
            LearningRateSchedule::InverseTime { eta0, decay } => eta0 / (1.0 + decay * t as f64),
        }
    }
}

/// Synaptic state of one NSM/S²M layer.
#[derive(Debug, Clone)]
pub struct NsmLayer {
    /// Feedforward weights, `m × n`.
    pub w: Array2<f64>,
    /// Lateral weights, `m × m`, kept symmetric positive definite.
    pub m: Array2<f64>,
    /// Label weights, `m × c`; present iff `alpha > 0`.
    pub v: Option<Array2<f64>>,
    /// Label-similarity strength α; fixed at construction.
    pub alpha: f64,
    pub lr_schedule: LearningRateSchedule,
    pub update_count: u64,
}

impl NsmLayer {
    /// Fresh layer: `W` i.i.d. Gaussian with std `1/√n`, `M = I`, and (when
    /// `alpha > 0`) `V` Gaussian with std `1/√c`. Deterministic per seed.
    pub fn init(m: usize, n: usize, c: usize, alpha: f64, seed: u64) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::InvalidArgument(format!(
                "layer dimensions must be positive, got m={m}, n={n}"
            )));
        }
        if !(alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be nonnegative, got {alpha}"
            )));
        }
        if alpha > 0.0 && c == 0 {
            return Err(Error::InvalidArgument(
                "supervised layer (alpha > 0) requires a positive class count".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_std = 1.0 / (n as f64).sqrt();
        let w = Array2::from_shape_fn((m, n), |_| rng.sample::<f64, _>(StandardNormal) * w_std);
        let v = if alpha > 0.0 {
            let v_std = 1.0 / (c as f64).sqrt();
            Some(Array2::from_shape_fn((m, c), |_| {
                rng.sample::<f64, _>(StandardNormal) * v_std
            }))
        } else {
            None
        };
        Ok(Self {
            w,
            m: Array2::eye(m),
            v,
            alpha,
            lr_schedule: LearningRateSchedule::default(),
            update_count: 0,
        })
    }

    /// Number of neurons `m`.
    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    /// Input dimension `n`.
    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    /// Label dimension `c`, when supervised.
    pub fn label_dim(&self) -> Option<usize> {
        self.v.as_ref().map(|v| v.ncols())
    }

    pub fn is_supervised(&self) -> bool {
        self.v.is_some()
    }

    /// Current damping floor `ε_M = 1e-3 · tr(M)/m`.
    pub fn epsilon_m(&self) -> f64 {
        1e-3 * self.m.diag().sum() / self.output_dim() as f64
    }

    /// Feedforward drive `b = W x (+ V y)` for a batch (`n × B` inputs,
    /// optional `c × B` scaled labels; masked samples carry zero columns).
    pub fn drive(&self, x: &Array2<f64>, y_scaled: Option<&Array2<f64>>) -> Result<Array2<f64>> {
        if x.nrows() != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "input has {} rows but the layer expects {}",
                x.nrows(),
                self.input_dim()
            )));
        }
        let mut b = self.w.dot(x);
        if let Some(y) = y_scaled {
            let v = self.v.as_ref().ok_or_else(|| {
                Error::InvalidArgument("labels supplied to an unsupervised layer".into())
            })?;
            if y.nrows() != v.ncols() || y.ncols() != x.ncols() {
                return Err(Error::InvalidArgument(format!(
                    "label block is {}x{} but expected {}x{}",
                    y.nrows(),
                    y.ncols(),
                    v.ncols(),
                    x.ncols()
                )));
            }
            b += &v.dot(y);
        }
        Ok(b)
    }

    /// Solve the activity dynamics for one sample.
    pub fn forward(
        &self,
        x: &Array1<f64>,
        y_scaled: Option<&Array1<f64>>,
        config: &DynamicsConfig,
    ) -> Result<DynamicsResult> {
        let xb = x.clone().into_shape_with_order((x.len(), 1)).expect("vector reshape");
        let yb = y_scaled.map(|y| {
            y.clone().into_shape_with_order((y.len(), 1)).expect("vector reshape")
        });
        let b = self.drive(&xb, yb.as_ref())?;
        dynamics::solve_dynamics(&b.column(0).to_owned(), &self.m, config, None)
    }

    /// Solve the dynamics for a batch of samples sharing this layer's
    /// weights. `z0` optionally warm-starts the iteration (used together with
    /// `config.warm_start`).
    pub fn forward_batch(
        &self,
        x: &Array2<f64>,
        y_scaled: Option<&Array2<f64>>,
        config: &DynamicsConfig,
        z0: Option<&Array2<f64>>,
    ) -> Result<BatchDynamicsResult> {
        let b = self.drive(x, y_scaled)?;
        dynamics::solve_dynamics_batch(&b, &self.m, config, z0)
    }

    /// Apply one batch-averaged synaptic update given converged activities.
    ///
    /// `labeled` marks which batch columns may drive the label weights; `V`
    /// is updated with the mean over labeled columns only, and not at all
    /// when the batch has none (masked samples never touch `V`).
    pub fn update_batch(
        &mut self,
        x: &Array2<f64>,
        z: &Array2<f64>,
        y_scaled: Option<&Array2<f64>>,
        labeled: Option<&[bool]>,
    ) -> Result<()> {
        let batch = x.ncols();
        if batch == 0 {
            return Err(Error::InvalidArgument("empty update batch".into()));
        }
        if x.nrows() != self.input_dim() || z.nrows() != self.output_dim() || z.ncols() != batch {
            return Err(Error::InvalidArgument(format!(
                "update shapes x {}x{}, z {}x{} do not match layer {}x{}",
                x.nrows(),
                x.ncols(),
                z.nrows(),
                z.ncols(),
                self.output_dim(),
                self.input_dim()
            )));
        }
        if let Some(mask) = labeled {
            if mask.len() != batch {
                return Err(Error::InvalidArgument(format!(
                    "labeled mask has {} entries for a batch of {batch}",
                    mask.len()
                )));
            }
        }
        self.lr_schedule.validate()?;
        let eta = self.lr_schedule.eta(self.update_count);
        let scale = 1.0 / batch as f64;

        let w_target = z.dot(&x.t()) * scale;
        self.w = &self.w + &((&w_target - &self.w) * eta);
        check_finite(&self.w, "W")?;

        if let Some(y) = y_scaled {
            let v = self.v.as_mut().ok_or_else(|| {
                Error::InvalidArgument("label update on an unsupervised layer".into())
            })?;
            if y.nrows() != v.ncols() || y.ncols() != batch {
                return Err(Error::InvalidArgument(format!(
                    "label block is {}x{} but expected {}x{batch}",
                    y.nrows(),
                    y.ncols(),
                    v.ncols()
                )));
            }
            let columns: Vec<usize> = match labeled {
                Some(mask) => (0..batch).filter(|&j| mask[j]).collect(),
                None => (0..batch).collect(),
            };
            if !columns.is_empty() {
                let mut v_target = Array2::zeros(v.dim());
                for &j in &columns {
                    let zj = z.column(j);
                    let yj = y.column(j);
                    for a in 0..v.nrows() {
                        for b_idx in 0..v.ncols() {
                            v_target[[a, b_idx]] += zj[a] * yj[b_idx];
                        }
                    }
                }
                v_target *= 1.0 / columns.len() as f64;
                *v = &*v + &((&v_target - &*v) * eta);
                check_finite(v, "V")?;
            }
        }

        let m_target = z.dot(&z.t()) * scale;
        self.m = &self.m + &((&m_target - &self.m) * eta);
        // Resymmetrize (rounding only; the update itself is symmetric) and
        // keep the spectrum above the damping floor.
        self.m = (&self.m + &self.m.t()) * 0.5;
        check_finite(&self.m, "M")?;
        let trace = self.m.diag().sum();
        let eps_m = {
            let eps = 1e-3 * trace / self.output_dim() as f64;
            // Degenerate batches (all-zero activities at eta = 1) can zero
            // the trace; a hard floor keeps M invertible regardless.
            if eps > 0.0 { eps } else { 1e-12 }
        };
        let (eigenvalues, _) = linalg::symmetric_eigen(&self.m)?;
        let lambda_min = eigenvalues[0];
        if lambda_min < eps_m {
            let shift = eps_m - lambda_min;
            for i in 0..self.output_dim() {
                self.m[[i, i]] += shift;
            }
        }

        self.update_count += 1;
        Ok(())
    }

    /// Single-sample update (batch of one).
    pub fn update(
        &mut self,
        x: &Array1<f64>,
        z: &Array1<f64>,
        y_scaled: Option<&Array1<f64>>,
    ) -> Result<()> {
        let xb = x.clone().into_shape_with_order((x.len(), 1)).expect("vector reshape");
        let zb = z.clone().into_shape_with_order((z.len(), 1)).expect("vector reshape");
        let yb = y_scaled.map(|y| {
            y.clone().into_shape_with_order((y.len(), 1)).expect("vector reshape")
        });
        self.update_batch(&xb, &zb, yb.as_ref(), None)
    }
}

fn check_finite(mat: &Array2<f64>, name: &str) -> Result<()> {
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training(format!(
            "update produced a non-finite value in {name}"
        )));
    }
    Ok(())
}

/// `√α · Y`, so the scaled label Gram equals `α · YᵀY`.
pub fn scale_labels(y: &Array2<f64>, alpha: f64) -> Result<Array2<f64>> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be nonnegative, got {alpha}"
        )));
    }
    Ok(y * alpha.sqrt())
}

/// `‖A Bᵀ‖²_F` for matrices with a shared column count; the building block
/// for evaluating Gram-difference norms without forming `T × T` matrices.
fn cross_norm2(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let product = a.dot(&b.t());
    product.iter().map(|v| v * v).sum()
}

/// Similarity-matching objective `(1/T²)·‖XᵀX − ZᵀZ‖²_F`.
///
/// The `1/T²` normalization (not in the classical definition) makes values
/// comparable across batch sizes.
pub fn nsm_objective(x: &Array2<f64>, z: &Array2<f64>) -> Result<f64> {
    let t = x.ncols();
    if z.ncols() != t {
        return Err(Error::InvalidArgument(format!(
            "X has {t} columns but Z has {}",
            z.ncols()
        )));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("objective of an empty batch".into()));
    }
    // ‖XᵀX − ZᵀZ‖² = ‖XXᵀ‖² − 2‖ZXᵀ‖² + ‖ZZᵀ‖², all small-side products.
    let value = cross_norm2(x, x) - 2.0 * cross_norm2(z, x) + cross_norm2(z, z);
    Ok(value.max(0.0) / (t * t) as f64)
}

/// Supervised similarity-matching objective
/// `(1/T²)·‖Zᵀ_prev Z_prev + Yᵀ_s Y_s − ZᵀZ‖²_F`, with `Y_s` already scaled
/// by `√α` (see [`scale_labels`]).
pub fn s2m_objective(z_prev: &Array2<f64>, y_scaled: &Array2<f64>, z: &Array2<f64>) -> Result<f64> {
    let t = z_prev.ncols();
    if y_scaled.ncols() != t || z.ncols() != t {
        return Err(Error::InvalidArgument(format!(
            "column counts differ: Z_prev {t}, Y {}, Z {}",
            y_scaled.ncols(),
            z.ncols()
        )));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("objective of an empty batch".into()));
    }
    let value = s2m_static_term(z_prev, y_scaled) + s2m_z_term(z_prev, y_scaled, z);
    Ok(value.max(0.0) / (t * t) as f64)
}

/// Z-independent part of the unnormalized S²M objective:
/// `‖A‖² + 2Tr(AB) + ‖B‖²` with `A = Zᵀ_prev Z_prev`, `B = Yᵀ_s Y_s`.
fn s2m_static_term(z_prev: &Array2<f64>, y_scaled: &Array2<f64>) -> f64 {
    cross_norm2(z_prev, z_prev) + 2.0 * cross_norm2(y_scaled, z_prev)
        + cross_norm2(y_scaled, y_scaled)
}

/// Z-dependent part: `−2Tr(AC) − 2Tr(BC) + ‖C‖²` with `C = ZᵀZ`.
fn s2m_z_term(z_prev: &Array2<f64>, y_scaled: &Array2<f64>, z: &Array2<f64>) -> f64 {
    -2.0 * cross_norm2(z, z_prev) - 2.0 * cross_norm2(z, y_scaled) + cross_norm2(z, z)
}

/// `Tr(AᵀB)` over equal-shape matrices.
fn inner(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// The min-max functional the synaptic updates descend/ascend:
///
/// ```text
/// L = −(4/T)·Tr(XᵀWᵀZ) − (4/T)·Tr(Y_sᵀVᵀZ) + (2/T)·Tr(ZᵀMZ)
///     + 2·Tr(WᵀW) + 2·Tr(VᵀV) − Tr(MᵀM)
/// ```
///
/// Data-dependent traces are normalized by `T` (matching the `1/T²`-scaled
/// objectives); weight-only traces are not. `V` terms appear only for
/// supervised layers; a missing `y_scaled` contributes zero label drive.
pub fn minmax_value(
    layer: &NsmLayer,
    x: &Array2<f64>,
    z: &Array2<f64>,
    y_scaled: Option<&Array2<f64>>,
) -> Result<f64> {
    let t = x.ncols();
    if t == 0 || z.ncols() != t {
        return Err(Error::InvalidArgument(format!(
            "X has {t} columns but Z has {}",
            z.ncols()
        )));
    }
    if x.nrows() != layer.input_dim() || z.nrows() != layer.output_dim() {
        return Err(Error::InvalidArgument(
            "minmax_value shapes do not match the layer".into(),
        ));
    }
    let tf = t as f64;
    let wx = layer.w.dot(x);
    let mut value = -4.0 / tf * inner(&wx, z) + 2.0 / tf * inner(&layer.m.dot(z), z)
        + 2.0 * inner(&layer.w, &layer.w)
        - inner(&layer.m, &layer.m);
    if let Some(v) = &layer.v {
        value += 2.0 * inner(v, v);
        if let Some(y) = y_scaled {
            if y.nrows() != v.ncols() || y.ncols() != t {
                return Err(Error::InvalidArgument(
                    "label block shape does not match the layer".into(),
                ));
            }
            value += -4.0 / tf * inner(&v.dot(y), z);
        }
    } else if y_scaled.is_some() {
        return Err(Error::InvalidArgument(
            "labels supplied to an unsupervised layer".into(),
        ));
    }
    Ok(value)
}

/// Closed-form gradients of [`minmax_value`] with respect to the weights.
#[derive(Debug, Clone)]
pub struct MinmaxGradients {
    /// `∂L/∂W = −(4/T)·ZXᵀ + 4W`
    pub w: Array2<f64>,
    /// `∂L/∂M = (2/T)·ZZᵀ − 2M`
    pub m: Array2<f64>,
    /// `∂L/∂V = −(4/T)·ZY_sᵀ + 4V` (supervised layers)
    pub v: Option<Array2<f64>>,
}

pub fn minmax_gradients(
    layer: &NsmLayer,
    x: &Array2<f64>,
    z: &Array2<f64>,
    y_scaled: Option<&Array2<f64>>,
) -> Result<MinmaxGradients> {
    // Shape validation is shared with the value computation.
    minmax_value(layer, x, z, y_scaled)?;
    let tf = x.ncols() as f64;
    let grad_w = z.dot(&x.t()) * (-4.0 / tf) + &layer.w * 4.0;
    let grad_m = z.dot(&z.t()) * (2.0 / tf) - &layer.m * 2.0;
    let grad_v = match (&layer.v, y_scaled) {
        (Some(v), Some(y)) => Some(z.dot(&y.t()) * (-4.0 / tf) + v * 4.0),
        (Some(v), None) => Some(v * 4.0),
        _ => None,
    };
    Ok(MinmaxGradients { w: grad_w, m: grad_m, v: grad_v })
}

/// Batch-mean update directions `((1/T)ZXᵀ − W, (1/T)ZZᵀ − M, (1/T)ZY_sᵀ − V)`.
///
/// These relate to [`minmax_gradients`] by fixed per-matrix constants:
/// direction_W = −grad_W/4, direction_M = +grad_M/2, direction_V = −grad_V/4 —
/// descent in the minimized variables, ascent in `M`.
pub fn update_directions(
    layer: &NsmLayer,
    x: &Array2<f64>,
    z: &Array2<f64>,
    y_scaled: Option<&Array2<f64>>,
) -> Result<MinmaxGradients> {
    let grads = minmax_gradients(layer, x, z, y_scaled)?;
    Ok(MinmaxGradients {
        w: grads.w * -0.25,
        m: grads.m * 0.5,
        v: grads.v.map(|g| g * -0.25),
    })
}

/// Controls for [`train_dense`].
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Samples per update; updates average over the batch. Batch 1 is pure
    /// online learning.
    pub batch_size: usize,
    pub dynamics: DynamicsConfig,
    /// Reshuffle sample order each epoch (deterministic per seed).
    pub shuffle: bool,
    /// Seed for the shuffle stream.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            dynamics: DynamicsConfig::default(),
            shuffle: true,
            seed: 0,
        }
    }
}

/// Train a dense layer on column-major inputs, returning the per-epoch
/// objective trace (supervised layers: the label-augmented objective;
/// unsupervised: the plain similarity-matching objective).
///
/// `y_scaled` must already be masked: columns of unlabeled samples zero, and
/// `labeled` marking which columns may update `V`. The objective is evaluated
/// on the epoch's own converged activities, assembled in dataset order.
pub fn train_dense(
    layer: &mut NsmLayer,
    x: &Array2<f64>,
    y_scaled: Option<&Array2<f64>>,
    labeled: Option<&[bool]>,
    options: &TrainOptions,
) -> Result<Vec<f64>> {
    let t = x.ncols();
    if t == 0 {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    if options.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    if x.nrows() != layer.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "training inputs have {} rows but the layer expects {}",
            x.nrows(),
            layer.input_dim()
        )));
    }
    if let Some(mask) = labeled {
        if mask.len() != t {
            return Err(Error::InvalidArgument(format!(
                "labeled mask has {} entries for {t} samples",
                mask.len()
            )));
        }
    }
    if y_scaled.is_some() != layer.is_supervised() {
        return Err(Error::InvalidArgument(
            "labels must be provided exactly when the layer is supervised".into(),
        ));
    }

    let m_dim = layer.output_dim();
    let zero_labels = Array2::zeros((0, t));
    let y_eff = y_scaled.unwrap_or(&zero_labels);
    let static_term = s2m_static_term(x, y_eff);

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<usize> = (0..t).collect();
    let mut trace = Vec::with_capacity(options.epochs);
    let mut z_warm: Option<Array2<f64>> = None;

    for _epoch in 0..options.epochs {
        if options.shuffle {
            order.shuffle(&mut rng);
        }
        let mut z_epoch = Array2::zeros((m_dim, t));
        for chunk in order.chunks(options.batch_size) {
            let xb = gather_columns(x, chunk);
            let yb = y_scaled.map(|y| gather_columns(y, chunk));
            let labeled_b: Option<Vec<bool>> =
                labeled.map(|mask| chunk.iter().map(|&j| mask[j]).collect());
            let z0 = match (&z_warm, options.dynamics.warm_start) {
                (Some(prev), true) => Some(gather_columns(prev, chunk)),
                _ => None,
            };
            let solved = layer.forward_batch(&xb, yb.as_ref(), &options.dynamics, z0.as_ref())?;
            layer.update_batch(&xb, &solved.z, yb.as_ref(), labeled_b.as_deref())?;
            for (b_idx, &j) in chunk.iter().enumerate() {
                z_epoch.column_mut(j).assign(&solved.z.column(b_idx));
            }
        }
        let value =
            (static_term + s2m_z_term(x, y_eff, &z_epoch)).max(0.0) / (t * t) as f64;
        trace.push(value);
        if options.dynamics.warm_start {
            z_warm = Some(z_epoch);
        }
    }
    Ok(trace)
}

fn gather_columns(source: &Array2<f64>, indices: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((source.nrows(), indices.len()));
    for (dst, &src) in indices.iter().enumerate() {
        out.column_mut(dst).assign(&source.column(src));
    }
    out
}
