//! Small numeric helpers shared across modules.

/// Squared Euclidean distance with 64-bit accumulation.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn sq_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sum that does not depend on the order of `values`: sorts a copy first.
pub fn order_free_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    pairwise_sum(&v)
}

/// Pairwise (cascade) summation in the given order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 16 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Max-shifted softmax. Returns `(weights, argmax)`; ties go to the lowest index.
pub fn softmax(log_weights: &[f64]) -> (Vec<f64>, usize) {
    let mut argmax = 0;
    for (i, &v) in log_weights.iter().enumerate() {
        if v > log_weights[argmax] {
            argmax = i;
        }
    }
    let max = log_weights[argmax];
    let mut weights: Vec<f64> = log_weights.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    (weights, argmax)
}

/// Nine significant digits in scientific notation, the format of every CSV output.
pub fn fmt_sig(v: f64) -> String {
    format!("{v:.8e}")
}
