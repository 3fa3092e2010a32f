//! Evaluation heads for learned representations: a multinomial logistic
//! regression classifier and a K-means feature-learning baseline with
//! triangle encoding.
//!
//! Both heads treat codes as read-only inputs; nothing here mutates a
//! representation or touches the layers that produced it.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;

/// Training provenance for a logistic-regression model.
#[derive(Debug, Clone)]
pub struct LogRegMetadata {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
    pub final_loss: f64,
    /// Loss after initialization and after each committed epoch.
    pub loss_trace: Vec<f64>,
    /// Set when the training labels contain a single class; the model still
    /// trains but is degenerate.
    pub single_class_warning: bool,
}

/// Multinomial logistic regression trained by safeguarded full-batch
/// gradient descent.
#[derive(Debug, Clone)]
pub struct LogRegModel {
    /// `c × d`.
    pub weights: Array2<f64>,
    /// Length `c`; unregularized.
    pub bias: Array1<f64>,
    pub l2: f64,
    pub trained: bool,
    pub metadata: LogRegMetadata,
}

pub const DEFAULT_LOGREG_LR: f64 = 0.1;
pub const DEFAULT_LOGREG_EPOCHS: usize = 300;
pub const DEFAULT_LOGREG_L2: f64 = 1e-4;

/// Column-wise softmax with max-subtraction for stability.
fn softmax_columns(logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = logits.clone();
    for mut col in probs.columns_mut() {
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in col.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in col.iter_mut() {
            *v /= sum;
        }
    }
    probs
}

/// Cross-entropy loss with L2 on the weights, plus its analytic gradients.
fn logreg_loss_and_grads(
    weights: &Array2<f64>,
    bias: &Array1<f64>,
    codes: &Array2<f64>,
    labels: &Array2<f64>,
    l2: f64,
) -> (f64, Array2<f64>, Array1<f64>) {
    let t = codes.ncols() as f64;
    let mut logits = weights.dot(codes);
    for mut col in logits.columns_mut() {
        col += bias;
    }
    let probs = softmax_columns(&logits);

    let mut loss = 0.0;
    for (j, label_col) in labels.columns().into_iter().enumerate() {
        for (c, &y) in label_col.iter().enumerate() {
            if y > 0.0 {
                loss -= y * probs[[c, j]].max(1e-300).ln();
            }
        }
    }
    loss /= t;
    loss += 0.5 * l2 * weights.iter().map(|v| v * v).sum::<f64>();

    let residual = &probs - labels;
    let grad_w = residual.dot(&codes.t()) / t + &(weights * l2);
    let grad_b = residual.sum_axis(ndarray::Axis(1)) / t;
    (loss, grad_w, grad_b)
}

fn check_one_hot(labels: &Array2<f64>) -> Result<()> {
    for (j, col) in labels.columns().into_iter().enumerate() {
        let ones = col.iter().filter(|&&v| v == 1.0).count();
        let zeros = col.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != col.len() - 1 {
            return Err(Error::InvalidArgument(format!("label column {j} is not one-hot")));
        }
    }
    Ok(())
}

/// Train a multinomial logistic regression on `codes` (columns are samples).
///
/// Full-batch gradient descent on cross-entropy plus `(l2/2)·‖W‖²_F` (bias
/// unregularized). If a step increases the loss it is rolled back and the
/// learning rate halved, so the recorded loss trace is non-increasing;
/// training stops early once steps cannot descend.
pub fn train_logreg(
    codes: &Array2<f64>,
    labels: &Array2<f64>,
    l2: f64,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<LogRegModel> {
    let (d, t) = codes.dim();
    let c = labels.nrows();
    if labels.ncols() != t {
        return Err(Error::InvalidArgument(format!(
            "{t} code columns but {} label columns",
            labels.ncols()
        )));
    }
    if t == 0 || d == 0 || c == 0 {
        return Err(Error::InvalidArgument("codes and labels must be non-empty".into()));
    }
    if t < c {
        return Err(Error::InvalidArgument(format!(
            "need at least as many samples ({t}) as classes ({c})"
        )));
    }
    if !(l2 >= 0.0) || !l2.is_finite() {
        return Err(Error::InvalidArgument("l2 must be finite and nonnegative".into()));
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument("learning rate must be finite and positive".into()));
    }
    linalg::ensure_finite_matrix(codes, "readout codes")?;
    check_one_hot(labels)?;

    let mut class_seen = vec![false; c];
    for col in labels.columns() {
        for (k, &v) in col.iter().enumerate() {
            if v == 1.0 {
                class_seen[k] = true;
            }
        }
    }
    let single_class_warning = class_seen.iter().filter(|&&s| s).count() <= 1;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights =
        Array2::from_shape_fn((c, d), |_| 0.01 * rng.sample::<f64, _>(StandardNormal));
    let mut bias = Array1::zeros(c);

    let (mut loss, mut grad_w, mut grad_b) =
        logreg_loss_and_grads(&weights, &bias, codes, labels, l2);
    let mut trace = vec![loss];
    let mut step = lr;
    const MAX_HALVINGS: usize = 60;
    let mut halvings = 0;

    'epochs: for _ in 0..epochs {
        loop {
            let w_next = &weights - &(&grad_w * step);
            let b_next = &bias - &(&grad_b * step);
            let (loss_next, gw_next, gb_next) =
                logreg_loss_and_grads(&w_next, &b_next, codes, labels, l2);
            if loss_next <= loss {
                weights = w_next;
                bias = b_next;
                loss = loss_next;
                grad_w = gw_next;
                grad_b = gb_next;
                trace.push(loss);
                break;
            }
            halvings += 1;
            if halvings > MAX_HALVINGS {
                break 'epochs;
            }
            step *= 0.5;
        }
    }

    Ok(LogRegModel {
        weights,
        bias,
        l2,
        trained: true,
        metadata: LogRegMetadata {
            lr,
            epochs,
            l2,
            seed,
            final_loss: loss,
            loss_trace: trace,
            single_class_warning,
        },
    })
}

/// Class probabilities for each code column (`c × T`, columns sum to 1).
pub fn predict_proba(model: &LogRegModel, codes: &Array2<f64>) -> Result<Array2<f64>> {
    if !model.trained {
        return Err(Error::InvalidArgument("model has not been trained".into()));
    }
    if codes.nrows() != model.weights.ncols() {
        return Err(Error::InvalidArgument(format!(
            "codes have dimension {} but the model expects {}",
            codes.nrows(),
            model.weights.ncols()
        )));
    }
    let mut logits = model.weights.dot(codes);
    for mut col in logits.columns_mut() {
        col += &model.bias;
    }
    Ok(softmax_columns(&logits))
}

fn argmax_lowest(column: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for i in 1..column.len() {
        if column[i] > column[best] {
            best = i;
        }
    }
    best
}

/// Predicted class index per column; argmax ties break toward the lowest
/// class index.
pub fn predict(model: &LogRegModel, codes: &Array2<f64>) -> Result<Vec<usize>> {
    let probs = predict_proba(model, codes)?;
    Ok(probs.columns().into_iter().map(argmax_lowest).collect())
}

/// Fraction of argmax-correct predictions on one-hot labels.
pub fn evaluate(model: &LogRegModel, codes: &Array2<f64>, labels: &Array2<f64>) -> Result<f64> {
    if codes.ncols() == 0 {
        return Err(Error::InvalidArgument("cannot evaluate on an empty test set".into()));
    }
    if labels.ncols() != codes.ncols() {
        return Err(Error::InvalidArgument(format!(
            "{} code columns but {} label columns",
            codes.ncols(),
            labels.ncols()
        )));
    }
    if labels.nrows() != model.weights.nrows() {
        return Err(Error::InvalidArgument(format!(
            "labels have {} classes but the model expects {}",
            labels.nrows(),
            model.weights.nrows()
        )));
    }
    let predictions = predict(model, codes)?;
    let correct = predictions
        .iter()
        .zip(labels.columns())
        .filter(|(&p, truth)| p == argmax_lowest(truth.view()))
        .count();
    Ok(correct as f64 / codes.ncols() as f64)
}

/// K-means model for the feature-learning baseline.
#[derive(Debug, Clone)]
pub struct KMeansModel {
    /// `m × n`, one centroid per row.
    pub centroids: Array2<f64>,
    /// Mean squared distance after each Lloyd iteration; non-increasing.
    pub objective_trace: Vec<f64>,
    pub trained: bool,
}

fn squared_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (ties toward the lowest index) and the
/// squared distance to it.
fn nearest_centroid(centroids: &Array2<f64>, point: ndarray::ArrayView1<f64>) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = squared_distance(centroids.row(0), point);
    for k in 1..centroids.nrows() {
        let d = squared_distance(centroids.row(k), point);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    (best, best_d)
}

/// Lloyd's algorithm over the columns of `points` with farthest-point
/// seeding (first centroid drawn with the seed). Empty clusters are
/// re-seeded to the point farthest from its assigned centroid, so no
/// cluster is empty after training.
pub fn train_kmeans(
    points: &Array2<f64>,
    m: usize,
    iters: usize,
    seed: u64,
) -> Result<KMeansModel> {
    let (n, t) = points.dim();
    if m == 0 {
        return Err(Error::InvalidArgument("cluster count must be positive".into()));
    }
    if m > t {
        return Err(Error::InvalidArgument(format!(
            "cannot fit {m} clusters to {t} points"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("points must have positive dimension".into()));
    }
    linalg::ensure_finite_matrix(points, "k-means points")?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::zeros((m, n));
    let first = rng.random_range(0..t);
    centroids.row_mut(0).assign(&points.column(first));
    let mut min_d: Vec<f64> =
        (0..t).map(|j| squared_distance(centroids.row(0), points.column(j))).collect();
    for k in 1..m {
        let mut far = 0;
        for j in 1..t {
            if min_d[j] > min_d[far] {
                far = j;
            }
        }
        centroids.row_mut(k).assign(&points.column(far));
        for j in 0..t {
            let d = squared_distance(centroids.row(k), points.column(j));
            if d < min_d[j] {
                min_d[j] = d;
            }
        }
    }

    let mut assignments = vec![0usize; t];
    let mut trace = Vec::new();
    for _ in 0..iters {
        let mut changed = false;
        let mut dists = vec![0.0; t];
        for j in 0..t {
            let (k, d) = nearest_centroid(&centroids, points.column(j));
            if assignments[j] != k {
                changed = true;
            }
            assignments[j] = k;
            dists[j] = d;
        }

        let mut sums = Array2::<f64>::zeros((m, n));
        let mut counts = vec![0usize; m];
        for j in 0..t {
            let mut row = sums.row_mut(assignments[j]);
            row += &points.column(j);
            counts[assignments[j]] += 1;
        }
        for k in 0..m {
            if counts[k] > 0 {
                let mut row = centroids.row_mut(k);
                row.assign(&sums.row(k));
                row /= counts[k] as f64;
            } else {
                // Re-seed the empty cluster to the farthest point.
                let mut far = 0;
                for j in 1..t {
                    if dists[j] > dists[far] {
                        far = j;
                    }
                }
                centroids.row_mut(k).assign(&points.column(far));
                assignments[far] = k;
                dists[far] = 0.0;
                changed = true;
            }
        }

        let objective = (0..t)
            .map(|j| nearest_centroid(&centroids, points.column(j)).1)
            .sum::<f64>()
            / t as f64;
        trace.push(objective);
        if !changed {
            break;
        }
    }

    Ok(KMeansModel { centroids, objective_trace: trace, trained: true })
}

/// Triangle encoding of one point: `f_k = max(0, mean_distance − d_k)`
/// where `d_k` is the Euclidean distance to centroid `k`. Nonnegative by
/// construction and zero when the point is equidistant from all centroids.
pub fn kmeans_encode(model: &KMeansModel, point: &Array1<f64>) -> Result<Array1<f64>> {
    if !model.trained {
        return Err(Error::InvalidArgument("k-means model has not been trained".into()));
    }
    if point.len() != model.centroids.ncols() {
        return Err(Error::InvalidArgument(format!(
            "point has dimension {} but centroids have {}",
            point.len(),
            model.centroids.ncols()
        )));
    }
    let m = model.centroids.nrows();
    let distances: Vec<f64> = (0..m)
        .map(|k| squared_distance(model.centroids.row(k), point.view()).sqrt())
        .collect();
    let mean = distances.iter().sum::<f64>() / m as f64;
    Ok(Array1::from_iter(distances.iter().map(|d| (mean - d).max(0.0))))
}

/// Triangle-encode every column of `points` (`m × T`).
pub fn kmeans_encode_batch(model: &KMeansModel, points: &Array2<f64>) -> Result<Array2<f64>> {
    let t = points.ncols();
    let mut codes = Array2::zeros((model.centroids.nrows(), t));
    for j in 0..t {
        let f = kmeans_encode(model, &points.column(j).to_owned())?;
        codes.column_mut(j).assign(&f);
    }
    Ok(codes)
}
