//! Fixed-step integration of `dx/dt = u(x, t)` from `t = 0` to `t = 1` under
//! the exact field, a learned network, or a hybrid that follows the exact
//! field up to a switch time `tau` and the network afterwards.

use std::io::Write;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::TrainingSet;
use crate::error::{Error, Result};
use crate::exact_field::ExactField;
use crate::neural_velocity::VelocityNet;
use crate::numeric::fmt_sig;
use crate::rng;

pub const DEFAULT_STEPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Euler,
    Midpoint,
    Rk4,
}

/// The velocity field driving the ODE. To sample from an EMA shadow, pass the
/// shadow network.
#[derive(Debug, Clone, Copy)]
pub enum FieldSource<'a> {
    Exact(&'a TrainingSet),
    Learned(&'a VelocityNet),
    /// Exact field for steps starting before `tau`, network afterwards.
    Hybrid {
        ts: &'a TrainingSet,
        net: &'a VelocityNet,
        tau: f64,
    },
}

impl FieldSource<'_> {
    pub fn dim(&self) -> usize {
        match self {
            FieldSource::Exact(ts) | FieldSource::Hybrid { ts, .. } => ts.dim(),
            FieldSource::Learned(net) => net.dim(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let FieldSource::Hybrid { ts, net, tau } = self {
            if !(0.0..=1.0).contains(tau) {
                return Err(Error::invalid(format!("tau must lie in [0, 1], got {tau}")));
            }
            if ts.dim() != net.dim() {
                return Err(Error::invalid(format!(
                    "training set dimension {} differs from network dimension {}",
                    ts.dim(),
                    net.dim()
                )));
            }
        }
        Ok(())
    }

    /// Index of the first step integrated with the network.
    pub fn switch_step(&self, steps: usize) -> Option<usize> {
        match self {
            FieldSource::Hybrid { tau, .. } => Some((tau * steps as f64).round() as usize),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    /// `(t_k, x(t_k))` for `k = 0..=steps`, with `t_steps = 1`.
    pub states: Vec<(f64, Vec<f64>)>,
    pub switch_step: Option<usize>,
    pub endpoint: Vec<f64>,
}

struct Stepper<'a> {
    exact: Option<ExactField<'a>>,
    net: Option<&'a VelocityNet>,
    /// Last finite exact-field velocity, reused for stages past the cap.
    held: Option<Vec<f64>>,
}

impl<'a> Stepper<'a> {
    fn new(field: &FieldSource<'a>, t_eps: f64) -> Result<Self> {
        let (exact, net) = match *field {
            FieldSource::Exact(ts) => (Some(ExactField::new(ts, t_eps)?), None),
            FieldSource::Learned(net) => (None, Some(net)),
            FieldSource::Hybrid { ts, net, .. } => (Some(ExactField::new(ts, t_eps)?), Some(net)),
        };
        Ok(Stepper { exact, net, held: None })
    }

    fn eval(&mut self, use_exact: bool, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if !use_exact {
            return self.net.expect("network present").forward(x, t);
        }
        let field = self.exact.as_ref().expect("exact field present");
        if t > field.t_max() {
            if let Some(held) = &self.held {
                return Ok(held.clone());
            }
        }
        let evaluated = field.velocity(x, t.min(field.t_max()));
        match (evaluated, &self.held) {
            (Ok(u), _) if u.iter().all(|v| v.is_finite()) => {
                self.held = Some(u.clone());
                Ok(u)
            }
            (Ok(_) | Err(Error::Numeric(_)), Some(held)) => Ok(held.clone()),
            (Ok(_), None) => Err(Error::Numeric("non-finite exact-field velocity".into())),
            (Err(e), _) => Err(e),
        }
    }

    fn step(&mut self, use_exact: bool, method: Method, x: &[f64], t: f64, h: f64) -> Result<Vec<f64>> {
        let axpy = |a: &[f64], s: f64, b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p + s * q).collect() };
        Ok(match method {
            Method::Euler => {
                let k1 = self.eval(use_exact, x, t)?;
                axpy(x, h, &k1)
            }
            Method::Midpoint => {
                let k1 = self.eval(use_exact, x, t)?;
                let k2 = self.eval(use_exact, &axpy(x, 0.5 * h, &k1), t + 0.5 * h)?;
                axpy(x, h, &k2)
            }
            Method::Rk4 => {
                let k1 = self.eval(use_exact, x, t)?;
                let k2 = self.eval(use_exact, &axpy(x, 0.5 * h, &k1), t + 0.5 * h)?;
                let k3 = self.eval(use_exact, &axpy(x, 0.5 * h, &k2), t + 0.5 * h)?;
                let k4 = self.eval(use_exact, &axpy(x, h, &k3), t + h)?;
                x.iter()
                    .enumerate()
                    .map(|(j, &xj)| xj + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]))
                    .collect()
            }
        })
    }
}

fn integrate_impl(
    x0: &[f64],
    field: &FieldSource<'_>,
    steps: usize,
    method: Method,
    t_eps: f64,
    record: bool,
) -> Result<TrajectoryRecord> {
    if steps == 0 {
        return Err(Error::invalid("steps must be >= 1"));
    }
    field.validate()?;
    if x0.len() != field.dim() {
        return Err(Error::invalid(format!(
            "start has dimension {}, field has dimension {}",
            x0.len(),
            field.dim()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Blowup { step: 0, sample: 0 });
    }
    let switch_step = field.switch_step(steps);
    let exact_until = match field {
        FieldSource::Exact(_) => steps,
        FieldSource::Learned(_) => 0,
        FieldSource::Hybrid { .. } => switch_step.expect("hybrid switch"),
    };
    let mut stepper = Stepper::new(field, t_eps)?;
    let h = 1.0 / steps as f64;
    let mut x = x0.to_vec();
    let mut states = Vec::new();
    if record {
        states.push((0.0, x.clone()));
    }
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        x = match stepper.step(k < exact_until, method, &x, t, h) {
            Ok(next) => next,
            Err(Error::Numeric(_)) => return Err(Error::Blowup { step: k, sample: 0 }),
            Err(e) => return Err(e),
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Blowup { step: k + 1, sample: 0 });
        }
        if record {
            let t_next = if k + 1 == steps {
                1.0
            } else {
                (k + 1) as f64 / steps as f64
            };
            states.push((t_next, x.clone()));
        }
    }
    Ok(TrajectoryRecord {
        states,
        switch_step,
        endpoint: x,
    })
}

/// Integrates one trajectory with uniform step `1/steps`, recording every state.
pub fn integrate(
    x0: &[f64],
    field: &FieldSource<'_>,
    steps: usize,
    method: Method,
    t_eps: f64,
) -> Result<TrajectoryRecord> {
    integrate_impl(x0, field, steps, method, t_eps, true)
}

/// Start of sample `i`: `N(0, I)` from the `(seed, "sampler/noise", i)`
/// stream, so every field sees the same starts for a given seed.
pub fn noise(dim: usize, seed: u64, i: usize) -> Vec<f64> {
    let mut r = rng::indexed_stream(seed, "sampler/noise", i as u64);
    (0..dim).map(|_| StandardNormal.sample(&mut r)).collect()
}

fn run_batch(
    n_samples: usize,
    field: &FieldSource<'_>,
    steps: usize,
    method: Method,
    seed: u64,
    t_eps: f64,
    record: bool,
) -> Result<Vec<TrajectoryRecord>> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be >= 1"));
    }
    let dim = field.dim();
    let results: Vec<Result<TrajectoryRecord>> = (0..n_samples)
        .into_par_iter()
        .map(|i| integrate_impl(&noise(dim, seed, i), field, steps, method, t_eps, record))
        .collect();
    // Report the lowest failing sample regardless of scheduling.
    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| match e {
                Error::Blowup { step, .. } => Error::Blowup { step, sample: i },
                other => Error::at(i, other),
            })
        })
        .collect()
}

/// Endpoints of `n_samples` trajectories, one per row.
pub fn sample_batch(
    n_samples: usize,
    field: &FieldSource<'_>,
    steps: usize,
    method: Method,
    seed: u64,
    t_eps: f64,
) -> Result<Array2<f64>> {
    let recs = run_batch(n_samples, field, steps, method, seed, t_eps, false)?;
    Ok(endpoints(&recs))
}

/// Full trajectories of `n_samples` starts (same starts as [`sample_batch`]).
pub fn sample_trajectories(
    n_samples: usize,
    field: &FieldSource<'_>,
    steps: usize,
    method: Method,
    seed: u64,
    t_eps: f64,
) -> Result<Vec<TrajectoryRecord>> {
    run_batch(n_samples, field, steps, method, seed, t_eps, true)
}

fn endpoints(recs: &[TrajectoryRecord]) -> Array2<f64> {
    let d = recs[0].endpoint.len();
    let mut out = Array2::zeros((recs.len(), d));
    for (mut row, r) in out.rows_mut().into_iter().zip(recs) {
        for (dst, &v) in row.iter_mut().zip(&r.endpoint) {
            *dst = v;
        }
    }
    out
}

/// Hybrid endpoints for each `tau`, all from the same starts.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_sweep(
    taus: &[f64],
    ts: &TrainingSet,
    net: &VelocityNet,
    n_samples: usize,
    steps: usize,
    method: Method,
    seed: u64,
    t_eps: f64,
) -> Result<Vec<Array2<f64>>> {
    if taus.is_empty() {
        return Err(Error::invalid("at least one tau is required"));
    }
    taus.iter()
        .map(|&tau| {
            sample_batch(
                n_samples,
                &FieldSource::Hybrid { ts, net, tau },
                steps,
                method,
                seed,
                t_eps,
            )
        })
        .collect()
}

/// CSV with header `sample_id,t,x0,...`; one row per recorded state.
pub fn write_trajectories_csv(records: &[TrajectoryRecord], mut w: impl Write) -> Result<()> {
    let d = records.first().map_or(0, |r| r.endpoint.len());
    let mut header = String::from("sample_id,t");
    for j in 0..d {
        header.push_str(&format!(",x{j}"));
    }
    writeln!(w, "{header}")?;
    for (i, rec) in records.iter().enumerate() {
        for (t, x) in &rec.states {
            let mut line = format!("{i},{}", fmt_sig(*t));
            for v in x {
                line.push(',');
                line.push_str(&fmt_sig(*v));
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::gen_two_moons;
    use crate::neural_velocity::{Activation, NetConfig, TimeEmbedding};

    fn small_net(d: usize, seed: u64) -> VelocityNet {
        let cfg = NetConfig {
            hidden: vec![16, 16],
            activation: Activation::Silu,
            embedding: TimeEmbedding::Sinusoidal { frequencies: 4 },
        };
        VelocityNet::new(d, &cfg, seed).unwrap()
    }

    #[test]
    fn zero_field_keeps_the_start() {
        let net = VelocityNet::zeros(3, &NetConfig::default()).unwrap();
        for method in [Method::Euler, Method::Midpoint, Method::Rk4] {
            let rec = integrate(&[1.0, -2.0, 0.5], &FieldSource::Learned(&net), 10, method, 1e-3).unwrap();
            assert_eq!(rec.endpoint, vec![1.0, -2.0, 0.5]);
            assert_eq!(rec.states.len(), 11);
            assert_eq!(rec.states.last().unwrap().0, 1.0);
            assert!(rec.states.windows(2).all(|w| w[0].0 < w[1].0));
        }
    }

    #[test]
    fn single_point_follows_straight_line() {
        let c = [0.7, -1.3];
        let ts = TrainingSet::from_rows(&[c.to_vec()], "c").unwrap();
        let x0 = [2.0, 0.5];
        let rec = integrate(&x0, &FieldSource::Exact(&ts), 200, Method::Rk4, 1e-3).unwrap();
        let c32: Vec<f64> = ts.row_f64(0);
        for (t, x) in &rec.states[..rec.states.len() - 1] {
            for j in 0..2 {
                let line = c32[j] + (x0[j] - c32[j]) * (1.0 - t);
                assert!((x[j] - line).abs() < 1e-6, "t={t}: {} vs {line}", x[j]);
            }
        }
        for j in 0..2 {
            assert!((rec.endpoint[j] - c32[j]).abs() < 1e-3);
        }
    }

    #[test]
    fn hybrid_endpoints_reduce_to_pure_fields() {
        let ts = gen_two_moons(32, 0.05, 1).unwrap();
        let net = small_net(2, 3);
        let learned = sample_batch(8, &FieldSource::Learned(&net), 40, Method::Euler, 5, 1e-3).unwrap();
        let exact = sample_batch(8, &FieldSource::Exact(&ts), 40, Method::Euler, 5, 1e-3).unwrap();
        let sweep = hybrid_sweep(&[0.0, 1.0], &ts, &net, 8, 40, Method::Euler, 5, 1e-3).unwrap();
        assert_eq!(sweep[0], learned);
        assert_eq!(sweep[1], exact);
    }

    #[test]
    fn hybrid_switch_is_recorded_and_continuous() {
        let ts = gen_two_moons(32, 0.05, 1).unwrap();
        let net = small_net(2, 3);
        let x0 = noise(2, 9, 0);
        let hybrid = FieldSource::Hybrid {
            ts: &ts,
            net: &net,
            tau: 0.33,
        };
        let rec = integrate(&x0, &hybrid, 10, Method::Midpoint, 1e-3).unwrap();
        assert_eq!(rec.switch_step, Some(3));
        // The first three steps match a pure exact run; the rest continue from that state.
        let exact = integrate(&x0, &FieldSource::Exact(&ts), 10, Method::Midpoint, 1e-3).unwrap();
        assert_eq!(rec.states[..4], exact.states[..4]);
        let mut x = rec.states[3].1.clone();
        let mut stepper = Stepper::new(&FieldSource::Learned(&net), 1e-3).unwrap();
        for k in 3..10 {
            x = stepper.step(false, Method::Midpoint, &x, k as f64 / 10.0, 0.1).unwrap();
        }
        assert_eq!(x, rec.endpoint);
        let bad = FieldSource::Hybrid {
            ts: &ts,
            net: &net,
            tau: 1.5,
        };
        assert!(matches!(
            integrate(&x0, &bad, 10, Method::Euler, 1e-3),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn same_seed_same_starts_and_endpoints() {
        let ts = gen_two_moons(16, 0.05, 2).unwrap();
        let a = sample_trajectories(6, &FieldSource::Exact(&ts), 20, Method::Euler, 11, 1e-3).unwrap();
        let net = small_net(2, 1);
        let b = sample_trajectories(6, &FieldSource::Learned(&net), 20, Method::Euler, 11, 1e-3).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.states[0], rb.states[0]);
        }
        let e1 = sample_batch(6, &FieldSource::Exact(&ts), 20, Method::Euler, 11, 1e-3).unwrap();
        assert_eq!(e1, endpoints(&a));
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        let net = small_net(2, 7);
        let x0 = [0.3, -0.8];
        let end = |steps| {
            integrate(&x0, &FieldSource::Learned(&net), steps, Method::Rk4, 1e-3)
                .unwrap()
                .endpoint
        };
        let (e1, e2, e3) = (end(32), end(64), end(128));
        let d12 = crate::numeric::sq_dist(&e1, &e2).sqrt();
        let d23 = crate::numeric::sq_dist(&e2, &e3).sqrt();
        assert!(d12 > 0.0);
        assert!(d23 / d12 <= 1.0 / 8.0, "ratio {}", d23 / d12);
    }

    #[test]
    fn blowup_carries_step_and_sample() {
        let cfg = NetConfig {
            hidden: vec![],
            activation: Activation::Silu,
            embedding: TimeEmbedding::Scalar,
        };
        let mut net = VelocityNet::zeros(1, &cfg).unwrap();
        // u(x, t) = 1e200 * x: overflows after a couple of Euler steps.
        net.params.set_flat(&[1e200, 0.0, 0.0]);
        let err = sample_batch(3, &FieldSource::Learned(&net), 10, Method::Euler, 0, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Blowup { sample: 0, .. }), "{err:?}");
        assert!(matches!(
            integrate(&[1.0], &FieldSource::Learned(&net), 0, Method::Euler, 1e-3),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn trajectory_csv_layout() {
        let net = VelocityNet::zeros(2, &NetConfig::default()).unwrap();
        let recs = sample_trajectories(2, &FieldSource::Learned(&net), 2, Method::Euler, 0, 1e-3).unwrap();
        let mut buf = Vec::new();
        write_trajectories_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "sample_id,t,x0,x1");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[3].starts_with("0,1.00000000e0,"));
    }
}
