//! Per-sample neural dynamics.
//!
//! A layer's activity for one input is the solution of a nonnegative
//! quadratic program: minimize `E(z) = zᵀ M z − 2 bᵀ z` over `z ≥ 0`, where
//! `b` is the feedforward drive (`W x`, plus `V y` when labels are present)
//! and `M` is the symmetric positive-definite lateral-weight matrix. The
//! recurrent circuit's fixed points are exactly the KKT points of this
//! energy, so we solve it by projected gradient descent
//! `z ← [z + η (b − M z)]₊` rather than integrating the circuit ODE.
//!
//! The module also ships [`oracle_active_set`], a brute-force support
//! enumeration used by the test suites to certify the iterative solver.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::linalg;

/// How the projected-gradient step size is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// `η = 1/λ_max(M)` with `λ_max` estimated by power iteration. This keeps
    /// the effective gradient step at the descent-lemma threshold, so the
    /// energy is non-increasing.
    InverseLipschitz,
    /// A caller-supplied constant `η > 0`, for reproducibility experiments.
    Fixed(f64),
}

/// Solver controls for [`solve_dynamics`] / [`solve_dynamics_batch`].
#[derive(Debug, Clone, Copy)]
pub struct DynamicsConfig {
    /// Iteration cap; hitting it yields an unconverged result, not an error.
    pub max_iters: usize,
    pub step_rule: StepRule,
    /// Convergence threshold on the complementarity residual
    /// `‖min(z, Mz − b)‖_∞`.
    pub kkt_tolerance: f64,
    /// When set, a provided `z0` seeds the iteration; otherwise iteration
    /// starts from zero and `z0` is ignored.
    pub warm_start: bool,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            step_rule: StepRule::InverseLipschitz,
            kkt_tolerance: 1e-6,
            warm_start: false,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be positive".into()));
        }
        if !(self.kkt_tolerance > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kkt_tolerance must be positive, got {}",
                self.kkt_tolerance
            )));
        }
        if let StepRule::Fixed(eta) = self.step_rule {
            if !(eta > 0.0) || !eta.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "fixed step size must be positive and finite, got {eta}"
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of a single-sample solve.
#[derive(Debug, Clone)]
pub struct DynamicsResult {
    /// The nonnegative activity vector.
    pub z: Array1<f64>,
    /// Projected-gradient steps actually taken (0 when the start point
    /// already satisfies the KKT conditions, e.g. an exact warm start).
    pub iterations: usize,
    /// `‖min(z, Mz − b)‖_∞` at the returned point.
    pub kkt_residual: f64,
    /// `zᵀ M z − 2 bᵀ z` at the returned point.
    pub energy: f64,
    /// False only when `max_iters` was exhausted above tolerance.
    pub converged: bool,
}

/// Outcome of a batched solve over `T` samples sharing one `M`.
#[derive(Debug, Clone)]
pub struct BatchDynamicsResult {
    /// `m × T` nonnegative activities, one column per sample.
    pub z: Array2<f64>,
    pub iterations: usize,
    /// Worst complementarity residual over all columns.
    pub kkt_residual: f64,
    pub converged: bool,
}

/// Per-sample energy `zᵀ M z − 2 bᵀ z`.
pub fn energy(z: &Array1<f64>, b: &Array1<f64>, m_mat: &Array2<f64>) -> Result<f64> {
    let m = z.len();
    if b.len() != m || m_mat.nrows() != m || m_mat.ncols() != m {
        return Err(Error::InvalidArgument(format!(
            "energy: inconsistent shapes (z: {m}, b: {}, M: {}x{})",
            b.len(),
            m_mat.nrows(),
            m_mat.ncols()
        )));
    }
    Ok(z.dot(&m_mat.dot(z)) - 2.0 * b.dot(z))
}

/// Complementarity residual `‖min(z, Mz − b)‖_∞`; zero exactly at the
/// constrained minimizer.
pub fn kkt_residual(z: &Array1<f64>, b: &Array1<f64>, m_mat: &Array2<f64>) -> f64 {
    let g = m_mat.dot(z) - b;
    z.iter()
        .zip(g.iter())
        .map(|(&zi, &gi)| zi.min(gi).abs())
        .fold(0.0f64, f64::max)
}

fn validate_problem(b: &Array2<f64>, m_mat: &Array2<f64>) -> Result<()> {
    let m = m_mat.nrows();
    if b.nrows() != m {
        return Err(Error::InvalidArgument(format!(
            "drive has {} rows but M is {m}x{}",
            b.nrows(),
            m_mat.ncols()
        )));
    }
    if m == 0 || b.ncols() == 0 {
        return Err(Error::InvalidArgument("dynamics problem is empty".into()));
    }
    linalg::ensure_finite_matrix(b, "drive")?;
    linalg::ensure_finite_matrix(m_mat, "lateral matrix M")?;
    linalg::ensure_symmetric(m_mat, 1e-10, "lateral matrix M")?;
    for i in 0..m {
        if m_mat[[i, i]] <= 0.0 {
            return Err(Error::Numerical(format!(
                "lateral matrix M has non-positive diagonal entry {} at index {i}",
                m_mat[[i, i]]
            )));
        }
    }
    // PD certificate. O(m^3) once per solve, negligible next to the iteration
    // cost, and it turns a silently wrong answer into a clean error.
    linalg::cholesky(m_mat)
        .map_err(|_| Error::Numerical("lateral matrix M is not positive definite".into()))?;
    Ok(())
}

fn initial_step(m_mat: &Array2<f64>, rule: StepRule) -> f64 {
    match rule {
        StepRule::Fixed(eta) => eta,
        StepRule::InverseLipschitz => {
            let lambda = linalg::power_iteration_lambda_max(m_mat, 50, 1e-8);
            // M is PD so lambda > 0; guard anyway against degenerate scales.
            1.0 / lambda.max(f64::MIN_POSITIVE)
        }
    }
}

/// `E_j` for every column, using the precomputed gradient `g = M z − b`:
/// `zᵀMz − 2bᵀz = z·g − b·z` column-wise.
fn column_energies(z: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> Array1<f64> {
    let t = z.ncols();
    let mut e = Array1::<f64>::zeros(t);
    for j in 0..t {
        let mut acc = 0.0;
        for i in 0..z.nrows() {
            acc += z[[i, j]] * g[[i, j]] - b[[i, j]] * z[[i, j]];
        }
        e[j] = acc;
    }
    e
}

fn batch_residual(z: &Array2<f64>, g: &Array2<f64>) -> f64 {
    z.iter()
        .zip(g.iter())
        .map(|(&zi, &gi)| zi.min(gi).abs())
        .fold(0.0f64, f64::max)
}

/// Solve the nonnegative QP for `T` samples at once: `b` is `m × T` with one
/// drive per column, and all columns share the same lateral matrix, step size,
/// and iteration schedule. Columns are independent problems; batching them
/// turns the per-iteration work into one `m × m × T` matrix product.
pub fn solve_dynamics_batch(
    b: &Array2<f64>,
    m_mat: &Array2<f64>,
    config: &DynamicsConfig,
    z0: Option<&Array2<f64>>,
) -> Result<BatchDynamicsResult> {
    config.validate()?;
    validate_problem(b, m_mat)?;
    let (m, t) = (b.nrows(), b.ncols());

    let mut z = match (config.warm_start, z0) {
        (true, Some(start)) => {
            if start.nrows() != m || start.ncols() != t {
                return Err(Error::InvalidArgument(format!(
                    "warm start is {}x{} but the problem is {m}x{t}",
                    start.nrows(),
                    start.ncols()
                )));
            }
            linalg::ensure_finite_matrix(start, "warm start")?;
            start.mapv(|v| v.max(0.0))
        }
        _ => Array2::zeros((m, t)),
    };

    let mut eta = initial_step(m_mat, config.step_rule);
    // The inverse-Lipschitz step sits exactly at the descent threshold, so
    // energy increases only through λ_max underestimation or rounding; the
    // halving safeguard below makes monotone descent unconditional.
    let safeguard = matches!(config.step_rule, StepRule::InverseLipschitz);

    let mut g = m_mat.dot(&z) - b;
    let mut energies = column_energies(&z, &g, b);
    let mut iterations = 0usize;
    let mut converged = false;

    loop {
        let residual = batch_residual(&z, &g);
        if residual <= config.kkt_tolerance {
            converged = true;
            break;
        }
        if iterations >= config.max_iters {
            break;
        }

        let mut halvings = 0;
        loop {
            let z_new = (&z - &(eta * &g)).mapv(|v| v.max(0.0));
            let g_new = m_mat.dot(&z_new) - b;
            let e_new = column_energies(&z_new, &g_new, b);
            let descends = !safeguard
                || e_new
                    .iter()
                    .zip(energies.iter())
                    .all(|(&en, &eo)| en <= eo + 1e-12 * eo.abs().max(1.0));
            if descends {
                z = z_new;
                g = g_new;
                energies = e_new;
                break;
            }
            eta *= 0.5;
            halvings += 1;
            if halvings > 60 {
                return Err(Error::Numerical(
                    "dynamics step safeguard exhausted: energy will not descend".into(),
                ));
            }
        }
        iterations += 1;
    }

    Ok(BatchDynamicsResult {
        kkt_residual: batch_residual(&z, &g),
        z,
        iterations,
        converged,
    })
}

/// Solve the per-sample dynamics for a single drive vector.
///
/// Returns the nonnegative minimizer of `E(z) = zᵀ M z − 2 bᵀ z` together with
/// convergence diagnostics. The returned point satisfies, within
/// `kkt_tolerance`: `(Mz)_i = b_i` wherever `z_i > 0`, and `(Mz)_i ≥ b_i`
/// wherever `z_i = 0` — the fixed-point conditions of the recurrent circuit.
pub fn solve_dynamics(
    b: &Array1<f64>,
    m_mat: &Array2<f64>,
    config: &DynamicsConfig,
    z0: Option<&Array1<f64>>,
) -> Result<DynamicsResult> {
    let m = b.len();
    let b2 = b.clone().into_shape_with_order((m, 1)).expect("vector reshape");
    let z02 = z0.map(|v| {
        v.clone()
            .into_shape_with_order((v.len(), 1))
            .expect("vector reshape")
    });
    let batch = solve_dynamics_batch(&b2, m_mat, config, z02.as_ref())?;
    let z = batch.z.column(0).to_owned();
    let e = energy(&z, b, m_mat)?;
    Ok(DynamicsResult {
        z,
        iterations: batch.iterations,
        kkt_residual: batch.kkt_residual,
        energy: e,
        converged: batch.converged,
    })
}

/// Exact reference solution of the nonnegative QP by support enumeration.
///
/// For every subset `S` of coordinates, solve the unconstrained system
/// `M_SS z_S = b_S`, keep the candidates that are primal feasible (`z_S ≥ 0`)
/// and dual feasible (`(Mz − b)_i ≥ 0` off the support), and return the one
/// with minimal energy. Exponential in `m`, so it is capped at `m ≤ 16`;
/// it exists to certify [`solve_dynamics`], not to be fast.
pub fn oracle_active_set(b: &Array1<f64>, m_mat: &Array2<f64>) -> Result<Array1<f64>> {
    let m = b.len();
    if m > 16 {
        return Err(Error::InvalidArgument(format!(
            "oracle_active_set enumerates 2^m supports; m = {m} is too large (max 16)"
        )));
    }
    let b2 = b.clone().into_shape_with_order((m, 1)).expect("vector reshape");
    validate_problem(&b2, m_mat)?;

    const FEAS_TOL: f64 = 1e-9;
    let mut best: Option<(f64, Array1<f64>)> = None;

    for mask in 0u32..(1u32 << m) {
        let support: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = support.len();

        let mut z = Array1::<f64>::zeros(m);
        if k > 0 {
            let mut sub_m = Array2::<f64>::zeros((k, k));
            let mut sub_b = Array1::<f64>::zeros(k);
            for (a, &i) in support.iter().enumerate() {
                sub_b[a] = b[i];
                for (c, &j) in support.iter().enumerate() {
                    sub_m[[a, c]] = m_mat[[i, j]];
                }
            }
            let z_s = match linalg::solve_spd(&sub_m, &sub_b) {
                Ok(z_s) => z_s,
                Err(_) => continue, // singular subsystem: skip this support
            };
            if z_s.iter().any(|&v| v < -FEAS_TOL) {
                continue;
            }
            for (a, &i) in support.iter().enumerate() {
                z[i] = z_s[a].max(0.0);
            }
        }

        let g = m_mat.dot(&z) - b;
        let dual_ok = (0..m)
            .filter(|i| mask & (1 << i) == 0)
            .all(|i| g[i] >= -FEAS_TOL);
        if !dual_ok {
            continue;
        }

        let e = energy(&z, b, m_mat)?;
        if best.as_ref().map_or(true, |(be, _)| e < *be) {
            best = Some((e, z));
        }
    }

    best.map(|(_, z)| z).ok_or_else(|| {
        Error::Numerical("active-set enumeration found no feasible support (M not PD?)".into())
    })
}
