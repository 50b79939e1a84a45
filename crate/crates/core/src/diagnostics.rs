//! Measurements on fields and samples: alignment between the exact field and
//! the conditional direction ("collapse"), nearest-neighbor memorization
//! distances, a Gaussian-kernel MMD (not FID), and approximation-error
//! summaries. All reductions are independent of thread scheduling.

use std::io::Write;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{gen_gaussian_mixture, subsample_dim, TrainingSet};
use crate::error::{Error, Result};
use crate::exact_field::ExactField;
use crate::numeric::{dot, fmt_sig, order_free_sum, sq_dist, sq_norm};
use crate::rng;

pub const DEFAULT_THRESHOLD: f64 = 0.9;
pub const DEFAULT_BINS: usize = 50;
pub const MMD_SCALES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// `<a, b> / (|a| |b|)` clamped to `[-1, 1]`; `None` when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = sq_norm(a).sqrt();
    let nb = sq_norm(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Uniform histogram over `[-1, 1]`. Bin `k` covers `(edge_k, edge_{k+1}]`
/// (the first bin also holds `-1`), so a threshold equal to an edge splits
/// the counts exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(bins: usize) -> Self {
        Histogram {
            edges: (0..=bins)
                .map(|k| (2 * k as i64 - bins as i64) as f64 / bins as f64)
                .collect(),
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, v: f64) {
        let interior = &self.edges[1..self.edges.len() - 1];
        let bin = interior.partition_point(|&e| e < v);
        self.counts[bin] += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseReport {
    pub t_grid: Vec<f64>,
    pub threshold: f64,
    pub n_pairs: usize,
    pub histograms: Vec<Histogram>,
    /// Fraction of pairs with similarity strictly above the threshold, per `t`.
    pub fractions: Vec<f64>,
    /// Pairs whose exact or conditional velocity was the zero vector, per `t`
    /// (counted as similarity 0).
    pub underflow: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseOptions {
    pub threshold: f64,
    pub bins: usize,
    pub t_eps: f64,
}

impl Default for CollapseOptions {
    fn default() -> Self {
        CollapseOptions {
            threshold: DEFAULT_THRESHOLD,
            bins: DEFAULT_BINS,
            t_eps: crate::exact_field::DEFAULT_T_EPS,
        }
    }
}

/// Cosine similarity between the exact field at `x_t = (1-t) x0 + t x1` and
/// the conditional direction `x1 - x0`, over `n_pairs` pairs drawn once from
/// the `(seed, "diagnostics/collapse")` stream and reused for every `t`.
pub fn cosine_collapse(
    ts: &TrainingSet,
    t_grid: &[f64],
    n_pairs: usize,
    seed: u64,
    opts: &CollapseOptions,
) -> Result<CollapseReport> {
    if n_pairs == 0 {
        return Err(Error::invalid("n_pairs must be >= 1"));
    }
    if opts.bins == 0 {
        return Err(Error::invalid("bins must be >= 1"));
    }
    let field = ExactField::new(ts, opts.t_eps)?;
    if let Some(&t) = t_grid.iter().find(|&&t| t > field.t_max()) {
        return Err(Error::Singularity { t, t_eps: opts.t_eps });
    }
    if let Some(&t) = t_grid.iter().find(|&&t| t.is_nan() || t < 0.0) {
        return Err(Error::invalid(format!("t must be >= 0, got {t}")));
    }
    let d = ts.dim();
    let mut r = rng::stream(seed, "diagnostics/collapse");
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..n_pairs)
        .map(|_| {
            let x0: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
            let x1 = ts.row_f64(r.random_range(0..ts.n()));
            (x0, x1)
        })
        .collect();
    let mut report = CollapseReport {
        t_grid: t_grid.to_vec(),
        threshold: opts.threshold,
        n_pairs,
        histograms: Vec::new(),
        fractions: Vec::new(),
        underflow: Vec::new(),
    };
    for &t in t_grid {
        let sims: Vec<Option<f64>> = pairs
            .par_iter()
            .map(|(x0, x1)| {
                let xt: Vec<f64> = x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
                let cond: Vec<f64> = x0.iter().zip(x1).map(|(a, b)| b - a).collect();
                let u = field.velocity(&xt, t)?;
                Ok(cosine_similarity(&u, &cond))
            })
            .collect::<Result<_>>()?;
        let mut hist = Histogram::new(opts.bins);
        let mut above = 0usize;
        let mut under = 0u64;
        for s in sims {
            let c = s.unwrap_or_else(|| {
                under += 1;
                0.0
            });
            hist.add(c);
            if c > opts.threshold {
                above += 1;
            }
        }
        report.histograms.push(hist);
        report.fractions.push(above as f64 / n_pairs as f64);
        report.underflow.push(under);
    }
    Ok(report)
}

/// Where the data for each dimension of [`collapse_vs_dim`] comes from.
#[derive(Debug, Clone, Copy)]
pub enum CollapseBase<'a> {
    /// Coordinates subsampled from a fixed set.
    Dataset(&'a TrainingSet),
    /// A fresh Gaussian mixture per dimension.
    Mixture { n: usize, k: usize, spread: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DimCurve {
    pub dim: usize,
    pub fractions: Vec<f64>,
}

/// One fraction-above-threshold curve per dimension.
pub fn collapse_vs_dim(
    base: CollapseBase<'_>,
    dims: &[usize],
    t_grid: &[f64],
    n_pairs: usize,
    seed: u64,
    opts: &CollapseOptions,
) -> Result<Vec<DimCurve>> {
    dims.iter()
        .map(|&dim| {
            let ts = match base {
                CollapseBase::Dataset(ts) => subsample_dim(ts, dim)?,
                CollapseBase::Mixture { n, k, spread } => gen_gaussian_mixture(n, dim, k, spread, seed)?,
            };
            let report = cosine_collapse(&ts, t_grid, n_pairs, seed, opts)?;
            Ok(DimCurve {
                dim,
                fractions: report.fractions,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnDistanceReport {
    pub distances: Vec<f64>,
    /// Index of the nearest training point (lowest index on ties).
    pub nearest: Vec<usize>,
    pub mean: f64,
    /// Mean distance from each training point to its nearest other training
    /// point; `None` for a single-point set.
    pub reference: Option<f64>,
}

fn nearest(x: &[f64], data: &Array2<f64>, skip: Option<usize>) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, row) in data.rows().into_iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        let d = sq_dist(x, row.as_slice().expect("row"));
        if d < best.1 {
            best = (i, d);
        }
    }
    (best.0, best.1.sqrt())
}

/// Exact Euclidean nearest-neighbor distance from each sample to the set.
pub fn nn_distances(samples: &Array2<f64>, ts: &TrainingSet) -> Result<NnDistanceReport> {
    if samples.nrows() == 0 {
        return Err(Error::invalid("no samples"));
    }
    if samples.ncols() != ts.dim() {
        return Err(Error::invalid(format!(
            "samples have dimension {}, training set {}",
            samples.ncols(),
            ts.dim()
        )));
    }
    let data = ts.to_f64();
    let samples = samples.as_standard_layout();
    let hits: Vec<(usize, f64)> = (0..samples.nrows())
        .into_par_iter()
        .map(|i| nearest(samples.row(i).as_slice().expect("row"), &data, None))
        .collect();
    let (nearest_idx, distances): (Vec<usize>, Vec<f64>) = hits.into_iter().unzip();
    let mean = order_free_sum(&distances) / distances.len() as f64;
    let reference = if ts.n() < 2 {
        None
    } else {
        let refs: Vec<f64> = (0..ts.n())
            .into_par_iter()
            .map(|i| nearest(data.row(i).as_slice().expect("row"), &data, Some(i)).1)
            .collect();
        Some(order_free_sum(&refs) / refs.len() as f64)
    };
    Ok(NnDistanceReport {
        distances,
        nearest: nearest_idx,
        mean,
        reference,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MmdVariant {
    /// U-statistic: diagonal terms excluded.
    Unbiased,
    /// V-statistic: diagonal terms included; exactly zero on identical sets.
    Biased,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmdReport {
    /// Median pairwise distance of the pooled samples.
    pub median: f64,
    /// `(scale, value)` for each bandwidth `scale * median`.
    pub per_scale: Vec<(f64, f64)>,
    /// Sum over the bandwidth ladder.
    pub total: f64,
}

fn pairwise_sq(a: &Array2<f64>, b: &Array2<f64>, within: bool) -> Vec<f64> {
    (0..a.nrows())
        .into_par_iter()
        .flat_map_iter(|i| {
            let start = if within { i + 1 } else { 0 };
            let ai = a.row(i).to_vec();
            (start..b.nrows()).map(move |j| sq_dist(&ai, b.row(j).as_slice().expect("row")))
        })
        .collect()
}

fn median_of(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Gaussian-kernel maximum mean discrepancy summed over the bandwidth ladder
/// [`MMD_SCALES`] times the pooled median pairwise distance. This is a
/// desk-scale distribution metric, not FID.
pub fn mmd(a: &Array2<f64>, b: &Array2<f64>, variant: MmdVariant) -> Result<MmdReport> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::invalid("mmd needs at least 2 points in each set"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::invalid(format!(
            "dimensions differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let a = a.as_standard_layout().into_owned();
    let b = b.as_standard_layout().into_owned();
    let aa = pairwise_sq(&a, &a, true);
    let bb = pairwise_sq(&b, &b, true);
    let ab = pairwise_sq(&a, &b, false);
    let pooled: Vec<f64> = aa.iter().chain(&bb).chain(&ab).map(|v| v.sqrt()).collect();
    let mut median = median_of(pooled);
    if median == 0.0 {
        median = 1.0;
    }
    let (na, nb) = (a.nrows() as f64, b.nrows() as f64);
    let per_scale: Vec<(f64, f64)> = MMD_SCALES
        .iter()
        .map(|&scale| {
            let bw = scale * median;
            let k = |d2: &f64| (-d2 / (2.0 * bw * bw)).exp();
            // Off-diagonal pairs appear twice in the full double sum.
            let saa = 2.0 * order_free_sum(&aa.iter().map(k).collect::<Vec<_>>());
            let sbb = 2.0 * order_free_sum(&bb.iter().map(k).collect::<Vec<_>>());
            let sab = order_free_sum(&ab.iter().map(k).collect::<Vec<_>>());
            let value = match variant {
                MmdVariant::Unbiased => saa / (na * (na - 1.0)) + sbb / (nb * (nb - 1.0)) - 2.0 * sab / (na * nb),
                MmdVariant::Biased => (saa + na) / (na * na) + (sbb + nb) / (nb * nb) - 2.0 * sab / (na * nb),
            };
            (scale, value)
        })
        .collect();
    let total = per_scale.iter().map(|p| p.1).sum();
    Ok(MmdReport {
        median,
        per_scale,
        total,
    })
}

/// Mean of an approximation-error curve over its (uniform) time grid.
pub fn time_averaged_error(curve: &[(f64, f64)]) -> f64 {
    curve.iter().map(|p| p.1).sum::<f64>() / curve.len() as f64
}

/// `t,bin_lo,bin_hi,count,fraction_above`, one row per bin.
pub fn write_collapse_csv(report: &CollapseReport, mut w: impl Write) -> Result<()> {
    writeln!(w, "t,bin_lo,bin_hi,count,fraction_above")?;
    for ((t, hist), frac) in report.t_grid.iter().zip(&report.histograms).zip(&report.fractions) {
        for (k, count) in hist.counts.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{count},{}",
                fmt_sig(*t),
                fmt_sig(hist.edges[k]),
                fmt_sig(hist.edges[k + 1]),
                fmt_sig(*frac)
            )?;
        }
    }
    Ok(())
}

/// `dim,t,fraction`.
pub fn write_collapse_vs_dim_csv(curves: &[DimCurve], t_grid: &[f64], mut w: impl Write) -> Result<()> {
    writeln!(w, "dim,t,fraction")?;
    for c in curves {
        for (t, f) in t_grid.iter().zip(&c.fractions) {
            writeln!(w, "{},{},{}", c.dim, fmt_sig(*t), fmt_sig(*f))?;
        }
    }
    Ok(())
}

/// `sample_id,distance`.
pub fn write_nn_csv(report: &NnDistanceReport, mut w: impl Write) -> Result<()> {
    writeln!(w, "sample_id,distance")?;
    for (i, d) in report.distances.iter().enumerate() {
        writeln!(w, "{i},{}", fmt_sig(*d))?;
    }
    Ok(())
}

/// `set_a,set_b,bandwidth_scale,value`; a final `total` row sums the ladder.
pub fn write_mmd_csv(set_a: &str, set_b: &str, report: &MmdReport, mut w: impl Write) -> Result<()> {
    writeln!(w, "set_a,set_b,bandwidth_scale,value")?;
    for (scale, v) in &report.per_scale {
        writeln!(w, "{set_a},{set_b},{},{}", fmt_sig(*scale), fmt_sig(*v))?;
    }
    writeln!(w, "{set_a},{set_b},total,{}", fmt_sig(report.total))?;
    Ok(())
}

/// `t,error`.
pub fn write_approx_error_csv(curve: &[(f64, f64)], mut w: impl Write) -> Result<()> {
    writeln!(w, "t,error")?;
    for (t, e) in curve {
        writeln!(w, "{},{}", fmt_sig(*t), fmt_sig(*e))?;
    }
    Ok(())
}
