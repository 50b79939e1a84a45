//! The `M`-sample Monte Carlo estimate of the optimal field that always keeps
//! the point `x1` which generated `x_t`.
//!
//! A batch is `b = (x1, b_2, ..., b_M)` with the companions `b_j` drawn i.i.d.
//! uniform, with replacement, from the training set. The estimate is
//!
//! ```text
//! u_M(x_t, t) = sum_j ω_j (b_j - x_t) / (1 - t),   ω = softmax_j( -|x_t - t b_j|² / (2 (1 - t)²) )
//! ```
//!
//! Averaged over `x1 ~ p(. | x_t, t)` and uniform companions it equals the
//! closed-form field exactly, and its trace variance never exceeds that of the
//! single conditional velocity. [`enumerate_expectation`] and
//! [`enumerate_variance`] compute both sides of those statements exactly on
//! small sets.
//!
//! Sums over batch rows run in ascending training-index order, so the estimate
//! is bitwise invariant to the order of the rows.

use ndarray::Array2;
use rand::Rng;

use crate::datasets::TrainingSet;
use crate::error::{Error, Result};
use crate::exact_field::{self, ExactField};
use crate::rng;

/// Largest `n^M` the enumerations accept.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct EfmBatch {
    /// `M x d`, row 0 is `x1`.
    pub b: Array2<f64>,
    /// Training indices of the rows; `indices[0]` generated `x_t`.
    pub indices: Vec<usize>,
    pub x_t: Vec<f64>,
    pub t: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfmTarget {
    pub u_hat_m: Vec<f64>,
    pub batch: EfmBatch,
}

/// `m - 1` companions drawn uniformly with replacement.
pub fn draw_companions<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize) -> Vec<usize> {
    (1..m).map(|_| rng.random_range(0..n)).collect()
}

/// Positions of `indices` sorted by training index (stable).
fn canonical_order(indices: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..indices.len()).collect();
    order.sort_by_key(|&p| indices[p]);
    order
}

/// Softmax over per-row scores, normalizer summed in `order`.
fn ordered_softmax(scores: &[f64], order: &[usize]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = order.iter().map(|&p| e[p]).sum();
    e.iter().map(|v| v / total).collect()
}

/// Core of the estimator used by [`make_target`] and the training loop.
///
/// The softmax uses `t_softmax` (which the trainer clamps below 1) while the
/// directions use the drawn `t`. The directions are written relative to the
/// anchor, `(b_j - x_t)/(1 - t) = (x1 - x0) + (b_j - x1)/(1 - t)`, which keeps
/// the anchor's own term exactly `x1 - x0` even as `t -> 1`.
pub(crate) fn anchored_estimate(
    x0: &[f64],
    x_t: &[f64],
    t: f64,
    t_softmax: f64,
    indices: &[usize],
    ts: &TrainingSet,
) -> (Vec<f64>, Vec<f64>) {
    let d = x0.len();
    let x1 = ts.row(indices[0]);
    let denom = 2.0 * (1.0 - t_softmax) * (1.0 - t_softmax);
    let scores: Vec<f64> = indices
        .iter()
        .map(|&i| {
            let row = ts.row(i);
            let mut acc = 0.0;
            for (&xj, &bj) in x_t.iter().zip(row) {
                let r = xj - t_softmax * f64::from(bj);
                acc += r * r;
            }
            -acc / denom
        })
        .collect();
    let order = canonical_order(indices);
    let weights = ordered_softmax(&scores, &order);
    let s = 1.0 - t;
    let mut u: Vec<f64> = (0..d).map(|j| f64::from(x1[j]) - x0[j]).collect();
    for &p in &order {
        let w = weights[p];
        if w == 0.0 || indices[p] == indices[0] {
            continue;
        }
        let row = ts.row(indices[p]);
        for j in 0..d {
            u[j] += w * ((f64::from(row[j]) - f64::from(x1[j])) / s);
        }
    }
    (u, weights)
}

fn build_target(x0: &[f64], indices: Vec<usize>, t: f64, ts: &TrainingSet, t_eps: f64) -> Result<EfmTarget> {
    let d = ts.dim();
    if x0.len() != d {
        return Err(Error::invalid(format!("x0 has dimension {}, data has {d}", x0.len())));
    }
    if !t.is_finite() || t < 0.0 {
        return Err(Error::invalid(format!("time must be finite and >= 0, got {t}")));
    }
    if t > 1.0 - t_eps {
        return Err(Error::Singularity { t, t_eps });
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= ts.n()) {
        return Err(Error::invalid(format!("index {bad} out of range for n = {}", ts.n())));
    }
    let x1 = ts.row(indices[0]);
    let x_t: Vec<f64> = (0..d).map(|j| (1.0 - t) * x0[j] + t * f64::from(x1[j])).collect();
    let (u_hat_m, weights) = anchored_estimate(x0, &x_t, t, t, &indices, ts);
    let b = Array2::from_shape_fn((indices.len(), d), |(r, j)| f64::from(ts.row(indices[r])[j]));
    Ok(EfmTarget {
        u_hat_m,
        batch: EfmBatch {
            b,
            indices,
            x_t,
            t,
            weights,
        },
    })
}

/// Builds `u_M` at `x_t = (1 - t) x0 + t x_{x1_index}` with `m - 1` companions
/// drawn from the `(seed, "efm/companions")` stream.
pub fn make_target(
    x0: &[f64],
    x1_index: usize,
    t: f64,
    m: usize,
    ts: &TrainingSet,
    seed: u64,
    t_eps: f64,
) -> Result<EfmTarget> {
    if m == 0 {
        return Err(Error::invalid("M must be >= 1"));
    }
    if x1_index >= ts.n() {
        return Err(Error::invalid(format!(
            "x1 index {x1_index} out of range for n = {}",
            ts.n()
        )));
    }
    let mut rng = rng::stream(seed, "efm/companions");
    let mut indices = vec![x1_index];
    indices.extend(draw_companions(&mut rng, ts.n(), m));
    build_target(x0, indices, t, ts, t_eps)
}

/// As [`make_target`] with explicit companions; `indices[0]` is the `x1` index.
pub fn make_target_with_indices(
    x0: &[f64],
    indices: &[usize],
    t: f64,
    ts: &TrainingSet,
    t_eps: f64,
) -> Result<EfmTarget> {
    if indices.is_empty() {
        return Err(Error::invalid("M must be >= 1"));
    }
    build_target(x0, indices.to_vec(), t, ts, t_eps)
}

fn check_enumeration(x: &[f64], m: usize, ts: &TrainingSet) -> Result<()> {
    if m == 0 {
        return Err(Error::invalid("M must be >= 1"));
    }
    if x.len() != ts.dim() {
        return Err(Error::invalid(format!(
            "x has dimension {}, data has {}",
            x.len(),
            ts.dim()
        )));
    }
    let size = (ts.n() as u128).checked_pow(m as u32).unwrap_or(u128::MAX);
    if size > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            size,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(())
}

/// Exact mean and trace variance of `u_M(x, t)` under `b_1 ~ λ(x, t)` and
/// uniform companions, by visiting all `n^M` index tuples.
fn enumerate_moments(x: &[f64], t: f64, m: usize, ts: &TrainingSet) -> Result<(Vec<f64>, f64)> {
    check_enumeration(x, m, ts)?;
    let n = ts.n();
    let d = ts.dim();
    let scores = exact_field::log_weights(x, t, ts)?;
    let lambda = crate::numeric::softmax(&scores).0;
    let cond: Vec<Vec<f64>> = (0..n)
        .map(|i| exact_field::cond_velocity(x, &ts.row_f64(i), t))
        .collect::<Result<_>>()?;
    let companion_mass = 1.0 / (n as f64).powi(m as i32 - 1);

    let mut tuple = vec![0usize; m];
    let mut batch_scores = vec![0.0; m];
    let visit = |tuple: &[usize], batch_scores: &mut [f64]| -> (f64, Vec<f64>) {
        for (s, &i) in batch_scores.iter_mut().zip(tuple) {
            *s = scores[i];
        }
        let order = canonical_order(tuple);
        let w = ordered_softmax(batch_scores, &order);
        let mut u = vec![0.0; d];
        for &p in &order {
            for j in 0..d {
                u[j] += w[p] * cond[tuple[p]][j];
            }
        }
        (lambda[tuple[0]] * companion_mass, u)
    };

    let advance = |tuple: &mut [usize]| -> bool {
        for slot in tuple.iter_mut() {
            *slot += 1;
            if *slot < n {
                return true;
            }
            *slot = 0;
        }
        false
    };

    let mut mean = vec![0.0; d];
    loop {
        let (p, u) = visit(&tuple, &mut batch_scores);
        for j in 0..d {
            mean[j] += p * u[j];
        }
        if !advance(&mut tuple) {
            break;
        }
    }
    tuple.iter_mut().for_each(|s| *s = 0);
    let mut var = 0.0;
    loop {
        let (p, u) = visit(&tuple, &mut batch_scores);
        let mut r2 = 0.0;
        for j in 0..d {
            let r = u[j] - mean[j];
            r2 += r * r;
        }
        var += p * r2;
        if !advance(&mut tuple) {
            break;
        }
    }
    Ok((mean, var))
}

/// Exact expectation of `u_M(x, t)`; equals the closed-form field.
pub fn enumerate_expectation(x: &[f64], t: f64, m: usize, ts: &TrainingSet) -> Result<Vec<f64>> {
    enumerate_moments(x, t, m, ts).map(|(mean, _)| mean)
}

/// `(trace variance of u_M, trace variance of the conditional velocity)`,
/// both under `b_1 ~ λ(x, t)`.
pub fn enumerate_variance(x: &[f64], t: f64, m: usize, ts: &TrainingSet) -> Result<(f64, f64)> {
    let (_, var_m) = enumerate_moments(x, t, m, ts)?;
    let (_, var_cond) = enumerate_moments(x, t, 1, ts)?;
    Ok((var_m, var_cond))
}

/// Result of one randomized unbiasedness / variance check.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyRecord {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub t: f64,
    pub unbiasedness_error: f64,
    pub var_m: f64,
    pub var_cond: f64,
}

impl VerifyRecord {
    pub fn variance_ok(&self, tol: f64) -> bool {
        self.var_m <= self.var_cond + tol
    }
}

/// Draws a random instance (standard-normal data and query, `t ~ U[0, 0.9]`)
/// and compares the enumerated expectation against the closed-form field.
pub fn verify_instance(n: usize, m: usize, d: usize, seed: u64, trial: u64) -> Result<VerifyRecord> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rng::indexed_stream(seed, "efm/verify", trial);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let ts = TrainingSet::from_rows(&rows, "verify")?;
    let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let t = rng.random::<f64>() * 0.9;
    let exact = ExactField::new(&ts, exact_field::DEFAULT_T_EPS)?.velocity(&x, t)?;
    let (mean, var_m) = enumerate_moments(&x, t, m, &ts)?;
    let (_, var_cond) = enumerate_moments(&x, t, 1, &ts)?;
    let unbiasedness_error = mean.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(VerifyRecord {
        n,
        m,
        d,
        t,
        unbiasedness_error,
        var_m,
        var_cond,
    })
}
