//! The closed-form minimizer of the flow-matching loss under the empirical
//! data distribution.
//!
//! With the Gaussian source and the linear path `x_t = (1 - t) x0 + t x1`, the
//! optimal field at `(x, t)` is a softmax-weighted average of the conditional
//! velocities toward every training point:
//!
//! ```text
//! u*(x, t) = sum_i λ_i(x, t) (x_i - x) / (1 - t)
//! λ(x, t)  = softmax_i( -|x - t x_i|² / (2 (1 - t)²) )
//! ```
//!
//! Conditioning on `z = x1` or on `z = (x0, x1)` gives the same expression, so
//! there is a single code path. Scores are kept in the log domain and
//! exponentiated after subtracting their maximum: at large `d` they span
//! thousands of nats.

use rayon::prelude::*;

use crate::datasets::TrainingSet;
use crate::error::{Error, Result};
use crate::numeric;

pub const DEFAULT_T_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct FieldQuery {
    pub x: Vec<f64>,
    pub t: f64,
}

impl FieldQuery {
    pub fn new(x: Vec<f64>, t: f64) -> Self {
        FieldQuery { x, t }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightProfile {
    pub log_weights: Vec<f64>,
    pub weights: Vec<f64>,
    /// Index of the largest weight, lowest index on ties.
    pub argmax_index: usize,
}

impl WeightProfile {
    pub fn from_log_weights(log_weights: Vec<f64>) -> Self {
        let (weights, argmax_index) = numeric::softmax(&log_weights);
        WeightProfile {
            log_weights,
            weights,
            argmax_index,
        }
    }

    pub fn max_weight(&self) -> f64 {
        self.weights[self.argmax_index]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldEval {
    pub u: Vec<f64>,
    pub query: FieldQuery,
}

fn check_time(t: f64) -> Result<()> {
    if !t.is_finite() || t < 0.0 {
        return Err(Error::invalid(format!("time must be finite and >= 0, got {t}")));
    }
    Ok(())
}

/// `(x1 - x) / (1 - t)`.
pub fn cond_velocity(x: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    if x.len() != x1.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            x.len(),
            x1.len()
        )));
    }
    check_time(t)?;
    if t >= 1.0 {
        return Err(Error::Singularity { t, t_eps: 0.0 });
    }
    let s = 1.0 - t;
    Ok(x.iter().zip(x1).map(|(a, b)| (b - a) / s).collect())
}

/// Softmax scores `-|x - t x_i|² / (2 (1 - t)²)`, one per training point.
pub fn log_weights(x: &[f64], t: f64, ts: &TrainingSet) -> Result<Vec<f64>> {
    if x.len() != ts.dim() {
        return Err(Error::invalid(format!(
            "query has dimension {}, training set has {}",
            x.len(),
            ts.dim()
        )));
    }
    check_time(t)?;
    if t >= 1.0 {
        return Err(Error::Singularity { t, t_eps: 0.0 });
    }
    Ok(log_weights_unchecked(x, t, ts))
}

pub(crate) fn log_weights_unchecked(x: &[f64], t: f64, ts: &TrainingSet) -> Vec<f64> {
    let denom = 2.0 * (1.0 - t) * (1.0 - t);
    ts.points()
        .rows()
        .into_iter()
        .map(|row| {
            let mut acc = 0.0;
            for (&xj, &pj) in x.iter().zip(row) {
                let r = xj - t * f64::from(pj);
                acc += r * r;
            }
            -acc / denom
        })
        .collect()
}

/// `sum_i w_i (x_i - x) / (1 - t)` over the rows of `ts`.
pub(crate) fn weighted_velocity(x: &[f64], t: f64, weights: &[f64], ts: &TrainingSet) -> Vec<f64> {
    let mut u = vec![0.0; x.len()];
    for (row, &w) in ts.points().rows().into_iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for ((uj, &xj), &pj) in u.iter_mut().zip(x).zip(row) {
            *uj += w * (f64::from(pj) - xj);
        }
    }
    let s = 1.0 - t;
    u.iter_mut().for_each(|v| *v /= s);
    u
}

/// The optimal field over one training set, evaluated up to `t = 1 - t_eps`.
#[derive(Debug, Clone, Copy)]
pub struct ExactField<'a> {
    ts: &'a TrainingSet,
    t_eps: f64,
}

impl<'a> ExactField<'a> {
    pub fn new(ts: &'a TrainingSet, t_eps: f64) -> Result<Self> {
        if !(t_eps > 0.0 && t_eps < 1.0) {
            return Err(Error::invalid(format!("t_eps must lie in (0, 1), got {t_eps}")));
        }
        Ok(ExactField { ts, t_eps })
    }

    pub fn training_set(&self) -> &'a TrainingSet {
        self.ts
    }

    pub fn t_eps(&self) -> f64 {
        self.t_eps
    }

    pub fn t_max(&self) -> f64 {
        1.0 - self.t_eps
    }

    fn check(&self, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.ts.dim() {
            return Err(Error::invalid(format!(
                "query has dimension {}, training set has {}",
                x.len(),
                self.ts.dim()
            )));
        }
        if let Some(j) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite query coordinate {j}")));
        }
        check_time(t)?;
        if t > self.t_max() {
            return Err(Error::Singularity { t, t_eps: self.t_eps });
        }
        Ok(())
    }

    pub fn weights(&self, x: &[f64], t: f64) -> Result<WeightProfile> {
        self.check(x, t)?;
        Ok(WeightProfile::from_log_weights(log_weights_unchecked(x, t, self.ts)))
    }

    pub fn evaluate(&self, q: &FieldQuery) -> Result<(FieldEval, WeightProfile)> {
        let profile = self.weights(&q.x, q.t)?;
        let u = weighted_velocity(&q.x, q.t, &profile.weights, self.ts);
        Ok((FieldEval { u, query: q.clone() }, profile))
    }

    /// Velocity only.
    pub fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let profile = self.weights(x, t)?;
        Ok(weighted_velocity(x, t, &profile.weights, self.ts))
    }

    /// Evaluates every query independently; the first failing query (by
    /// position) is reported with its index.
    pub fn evaluate_batch(&self, queries: &[FieldQuery]) -> Result<Vec<(FieldEval, WeightProfile)>> {
        let results: Vec<Result<(FieldEval, WeightProfile)>> = queries.par_iter().map(|q| self.evaluate(q)).collect();
        results
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| Error::at(i, e)))
            .collect()
    }
}

/// One-shot evaluation with an explicit cap.
pub fn evaluate(q: &FieldQuery, ts: &TrainingSet, t_eps: f64) -> Result<(FieldEval, WeightProfile)> {
    ExactField::new(ts, t_eps)?.evaluate(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_gaussian_mixture, gen_two_moons};
    use crate::rng;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// Unnormalized Gaussian likelihood ratios summed directly, no log domain.
    fn brute_force_field(x: &[f64], t: f64, data: &[Vec<f64>]) -> Vec<f64> {
        let s = 1.0 - t;
        let mut scores = Vec::new();
        for xi in data {
            let mut r2 = 0.0;
            for j in 0..x.len() {
                r2 += (x[j] - t * xi[j]).powi(2);
            }
            scores.push(-r2 / (2.0 * s * s));
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut num = vec![0.0; x.len()];
        let mut den = 0.0;
        for (xi, sc) in data.iter().zip(&scores) {
            let p = (sc - m).exp();
            den += p;
            for j in 0..x.len() {
                num[j] += p * (xi[j] - x[j]) / s;
            }
        }
        num.iter().map(|v| v / den).collect()
    }

    #[test]
    fn cond_velocity_cases() {
        assert_eq!(cond_velocity(&[1.5, -2.0], &[1.5, -2.0], 0.3).unwrap(), vec![0.0, 0.0]);
        assert_eq!(cond_velocity(&[0.0], &[2.0], 0.5).unwrap(), vec![4.0]);
        assert!(matches!(
            cond_velocity(&[0.0], &[1.0], 1.0),
            Err(Error::Singularity { .. })
        ));
        let mut r = rng::stream(1, "test");
        for _ in 0..100 {
            let x0 = normal_vec(&mut r, 3);
            let x1 = normal_vec(&mut r, 3);
            let t: f64 = r.random::<f64>() * 0.99;
            let xt: Vec<f64> = x0.iter().zip(&x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            let u = cond_velocity(&xt, &x1, t).unwrap();
            for j in 0..3 {
                assert!((u[j] - (x1[j] - x0[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_weights_cases() {
        let ts = gen_two_moons(10, 0.1, 2).unwrap();
        let lw = log_weights(&[0.3, -0.7], 0.0, &ts).unwrap();
        let expect = -(0.3f64 * 0.3 + 0.7 * 0.7) / 2.0;
        assert!(lw.iter().all(|&v| v == expect));

        let same = TrainingSet::from_rows(&vec![vec![0.25, 1.0]; 4], "c").unwrap();
        let lw = log_weights(&[0.1, 0.2], 0.6, &same).unwrap();
        assert!(lw.iter().all(|&v| v == lw[0]));

        // Scalar oracle for data {-1, 0, 1}, x = 0.2, t = 0.5: -(x - t x_i)² / (2 · 0.25).
        let ts = TrainingSet::from_rows(&[vec![-1.0], vec![0.0], vec![1.0]], "s").unwrap();
        let lw = log_weights(&[0.2], 0.5, &ts).unwrap();
        let oracle = [-(0.7f64 * 0.7) / 0.5, -(0.2f64 * 0.2) / 0.5, -(0.3f64 * 0.3) / 0.5];
        for (a, b) in lw.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!(matches!(log_weights(&[0.2], 1.0, &ts), Err(Error::Singularity { .. })));
    }

    #[test]
    fn single_point_and_identical_points() {
        let ts = TrainingSet::from_rows(&[vec![2.0, -1.0]], "one").unwrap();
        let f = ExactField::new(&ts, 1e-3).unwrap();
        let (e, w) = f.evaluate(&FieldQuery::new(vec![0.5, 0.5], 0.25)).unwrap();
        assert_eq!(w.weights, vec![1.0]);
        assert_eq!(e.u, vec![(2.0 - 0.5) / 0.75, (-1.0 - 0.5) / 0.75]);

        let ts = TrainingSet::from_rows(&vec![vec![0.5, 3.0]; 5], "same").unwrap();
        let f = ExactField::new(&ts, 1e-3).unwrap();
        let u = f.velocity(&[1.0, 1.0], 0.6).unwrap();
        assert!((u[0] - (0.5 - 1.0) / 0.4).abs() < 1e-12);
        assert!((u[1] - (3.0 - 1.0) / 0.4).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_on_two_moons() {
        let ts = gen_two_moons(64, 0.05, 5).unwrap();
        let data: Vec<Vec<f64>> = (0..ts.n()).map(|i| ts.row_f64(i)).collect();
        let f = ExactField::new(&ts, 1e-3).unwrap();
        let mut r = rng::stream(5, "test/query");
        for _ in 0..50 {
            let x = normal_vec(&mut r, 2);
            let u = f.velocity(&x, 0.5).unwrap();
            let o = brute_force_field(&x, 0.5, &data);
            for j in 0..2 {
                assert!((u[j] - o[j]).abs() <= 1e-9 * o[j].abs().max(1.0), "{u:?} vs {o:?}");
            }
        }
    }

    #[test]
    fn singularity_cap_and_bad_queries() {
        let ts = gen_two_moons(8, 0.05, 1).unwrap();
        let f = ExactField::new(&ts, 1e-3).unwrap();
        assert!(f.velocity(&[0.0, 0.0], 0.999).is_ok());
        match f.velocity(&[0.0, 0.0], 0.9995) {
            Err(Error::Singularity { t, t_eps }) => {
                assert_eq!(t, 0.9995);
                assert_eq!(t_eps, 1e-3);
            }
            other => panic!("expected singularity, got {other:?}"),
        }
        assert!(matches!(f.velocity(&[0.0], 0.5), Err(Error::InvalidArgument(_))));
        assert!(matches!(f.velocity(&[f64::NAN, 0.0], 0.5), Err(Error::Numeric(_))));
    }

    #[test]
    fn batch_reports_first_failing_index() {
        let ts = gen_two_moons(8, 0.05, 1).unwrap();
        let f = ExactField::new(&ts, 1e-3).unwrap();
        let qs = vec![
            FieldQuery::new(vec![0.0, 0.0], 0.1),
            FieldQuery::new(vec![0.0, 0.0], 0.9999),
            FieldQuery::new(vec![0.0, 0.0], 1.5),
        ];
        match f.evaluate_batch(&qs) {
            Err(Error::AtIndex { index, source }) => {
                assert_eq!(index, 1);
                assert!(matches!(*source, Error::Singularity { .. }));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batch_equals_sequential_bitwise() {
        let ts = gen_gaussian_mixture(1000, 3072, 10, 1.0, 3).unwrap();
        let f = ExactField::new(&ts, 1e-3).unwrap();
        let mut r = rng::stream(3, "test/batch");
        let qs: Vec<FieldQuery> = (0..256)
            .map(|_| FieldQuery::new(normal_vec(&mut r, 3072), r.random::<f64>() * 0.9))
            .collect();
        let batch = f.evaluate_batch(&qs).unwrap();
        for (q, (e, w)) in qs.iter().zip(&batch) {
            let (e2, w2) = f.evaluate(q).unwrap();
            assert_eq!(e, &e2);
            assert_eq!(w, &w2);
        }
        let one = f.evaluate_batch(&qs[..1]).unwrap();
        assert_eq!(one[0], f.evaluate(&qs[0]).unwrap());
        let rev: Vec<FieldQuery> = qs.iter().rev().cloned().collect();
        let rb = f.evaluate_batch(&rev).unwrap();
        for (a, b) in rb.iter().zip(batch.iter().rev()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn weights_normalized_and_linear() {
        let ts = gen_two_moons(50, 0.1, 9).unwrap();
        let f = ExactField::new(&ts, 1e-3).unwrap();
        let mut r = rng::stream(9, "test/lin");
        for _ in 0..200 {
            let x = normal_vec(&mut r, 2);
            let t = r.random::<f64>() * 0.999;
            let (e, w) = f.evaluate(&FieldQuery::new(x.clone(), t)).unwrap();
            assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(w.weights.iter().all(|&v| v >= 0.0));
            let g = normal_vec(&mut r, 2);
            let mut lhs = 0.0;
            for i in 0..ts.n() {
                let uc = cond_velocity(&x, &ts.row_f64(i), t).unwrap();
                lhs += w.weights[i] * numeric::dot(&g, &uc);
            }
            let rhs = numeric::dot(&g, &e.u);
            assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn max_weight_grows_along_the_path() {
        let ts = gen_two_moons(64, 0.05, 12).unwrap();
        let f = ExactField::new(&ts, 1e-3).unwrap();
        let mut r = rng::stream(12, "test/collapse");
        let mut ok = 0;
        for _ in 0..256 {
            let x0 = normal_vec(&mut r, 2);
            let j = r.random_range(0..ts.n());
            let xj = ts.row_f64(j);
            let at = |t: f64| {
                let x: Vec<f64> = x0.iter().zip(&xj).map(|(a, b)| (1.0 - t) * a + t * b).collect();
                f.weights(&x, t).unwrap().max_weight()
            };
            ok += usize::from(at(0.9) >= at(0.5));
        }
        assert!(ok as f64 >= 0.95 * 256.0, "ok = {ok}");
    }

    #[test]
    fn argmax_tracks_nearest_rescaled_point() {
        let ts = gen_two_moons(64, 0.05, 13).unwrap();
        let f = ExactField::new(&ts, 1e-3).unwrap();
        let t = f.t_max();
        let mut r = rng::stream(13, "test/nn");
        for _ in 0..200 {
            let x = normal_vec(&mut r, 2);
            let w = f.weights(&x, t).unwrap();
            let xs: Vec<f64> = x.iter().map(|v| v / t).collect();
            let mut d: Vec<(f64, usize)> = (0..ts.n())
                .map(|i| (numeric::sq_dist(&xs, &ts.row_f64(i)), i))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            if (d[1].0 - d[0].0) < 1e-12 {
                continue;
            }
            assert_eq!(w.argmax_index, d[0].1);
        }
    }
}
