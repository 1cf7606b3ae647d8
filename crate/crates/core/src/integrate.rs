//! Numerical integration of true and learned vector fields.
//!
//! Evaluation uses an adaptive Dormand–Prince 5(4) pair with dense output.
//! Training uses fixed-step RK4 rollouts whose stage activations are recorded
//! on a tape so the window loss can be differentiated exactly through the
//! discrete steps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralfield::{ForwardCache, MlpParams, ParamGradient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rk4Fixed,
    Rk45Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub method: Method,
    /// Fixed step, only used by `Rk4Fixed`.
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk45Adaptive,
            h: 1e-3,
            rtol: 1e-7,
            atol: 1e-9,
            max_steps: 1_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.method == Method::Rk4Fixed && !(self.h > 0.0) {
            return Err(Error::InvalidParameter(format!("integrator h must be > 0, got {}", self.h)));
        }
        if !(self.rtol > 0.0 && self.rtol < 1.0) {
            return Err(Error::InvalidParameter(format!("rtol must lie in (0, 1), got {}", self.rtol)));
        }
        if !(self.atol >= 0.0) {
            return Err(Error::InvalidParameter(format!("atol must be >= 0, got {}", self.atol)));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidParameter("max_steps must be > 0".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant input signal: each breakpoint holds its value until the
/// next one. Values before the first breakpoint take the first value.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSchedule {
    breakpoints: Vec<(f64, DVector<f64>)>,
}

impl InputSchedule {
    pub fn constant(u: DVector<f64>) -> Self {
        Self {
            breakpoints: vec![(f64::NEG_INFINITY, u)],
        }
    }

    pub fn new(mut breakpoints: Vec<(f64, DVector<f64>)>) -> Result<Self> {
        if breakpoints.is_empty() {
            return Err(Error::InvalidParameter("input schedule needs at least one breakpoint".into()));
        }
        breakpoints.sort_by(|a, b| a.0.total_cmp(&b.0));
        let dim = breakpoints[0].1.len();
        if breakpoints.iter().any(|(_, u)| u.len() != dim) {
            return Err(Error::Dimension("input schedule values differ in length".into()));
        }
        Ok(Self { breakpoints })
    }

    pub fn dim(&self) -> usize {
        self.breakpoints[0].1.len()
    }

    pub fn breakpoints(&self) -> &[(f64, DVector<f64>)] {
        &self.breakpoints
    }

    pub fn value_at(&self, t: f64) -> &DVector<f64> {
        let idx = self.breakpoints.partition_point(|(tb, _)| *tb <= t);
        &self.breakpoints[idx.saturating_sub(1)].1
    }

    /// Breakpoint times strictly inside `(t0, t1)`.
    fn switch_times(&self, t0: f64, t1: f64) -> impl Iterator<Item = f64> + '_ {
        self.breakpoints.iter().map(|(t, _)| *t).filter(move |t| *t > t0 && *t < t1)
    }
}

/// One classical RK4 step with `u` held over the step.
pub fn step_rk4<F>(field: &mut F, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    let finite = |v: &DVector<f64>| v.iter().all(|e| e.is_finite());
    let k1 = field(x, u);
    let k2 = field(&(x + &k1 * (0.5 * h)), u);
    let k3 = field(&(x + &k2 * (0.5 * h)), u);
    let k4 = field(&(x + &k3 * h), u);
    if ![&k1, &k2, &k3, &k4].into_iter().all(finite) {
        return Err(Error::NonFiniteState { step: 0 });
    }
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    if !finite(&next) {
        return Err(Error::NonFiniteState { step: 0 });
    }
    Ok(next)
}

/// Uniformly sampled output of [`solve_adaptive`]. When `failure` is set the
/// samples stop at the last grid point reached before the solver gave up.
#[derive(Debug)]
pub struct SampledSolution {
    pub t0: f64,
    pub dt: f64,
    pub states: Vec<DVector<f64>>,
    pub failure: Option<Error>,
}

impl SampledSolution {
    pub fn into_result(self) -> Result<Vec<DVector<f64>>> {
        match self.failure {
            Some(e) => Err(e),
            None => Ok(self.states),
        }
    }
}

// Dormand-Prince 5(4) tableau. Fields are autonomous within a segment, so
// the nodes c_i are not needed.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Dense output coefficients (Hairer & Wanner's continuous extension).
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;

struct DenseStep {
    r1: DVector<f64>,
    r2: DVector<f64>,
    r3: DVector<f64>,
    r4: DVector<f64>,
    r5: DVector<f64>,
}

impl DenseStep {
    fn eval(&self, theta: f64) -> DVector<f64> {
        let theta1 = 1.0 - theta;
        &self.r1 + (&self.r2 + (&self.r3 + (&self.r4 + &self.r5 * theta1) * theta) * theta1) * theta
    }
}

fn error_norm(err: &DVector<f64>, y0: &DVector<f64>, y1: &DVector<f64>, rtol: f64, atol: f64) -> f64 {
    let n = err.len().max(1) as f64;
    let sum: f64 = err
        .iter()
        .zip(y0.iter().zip(y1.iter()))
        .map(|(e, (a, b))| {
            let sc = atol + rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

fn initial_step<F>(field: &mut F, x: &DVector<f64>, u: &DVector<f64>, f0: &DVector<f64>, cfg: &IntegratorConfig, span: f64) -> f64
where
    F: FnMut(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    let scale = |v: &DVector<f64>| -> f64 {
        let n = v.len().max(1) as f64;
        (v.iter()
            .zip(x.iter())
            .map(|(e, xi)| (e / (cfg.atol + cfg.rtol * xi.abs())).powi(2))
            .sum::<f64>()
            / n)
            .sqrt()
    };
    let d0 = scale(x);
    let d1 = scale(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let x1 = x + f0 * h0;
    let f1 = field(&x1, u);
    let d2 = scale(&(f1 - f0)) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    let h = (100.0 * h0).min(h1).min(span);
    if h.is_finite() && h > 0.0 {
        h
    } else {
        span.min(1e-6)
    }
}

/// Integrates `field` with the adaptive Dormand–Prince 5(4) pair and samples
/// the dense output on `t0 + k * dt_out` for `k = 0..n_samples`. Schedule
/// breakpoints are forced step boundaries.
pub fn solve_adaptive<F>(
    mut field: F,
    x0: &DVector<f64>,
    schedule: &InputSchedule,
    t0: f64,
    dt_out: f64,
    n_samples: usize,
    cfg: &IntegratorConfig,
) -> SampledSolution
where
    F: FnMut(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    let mut out = SampledSolution {
        t0,
        dt: dt_out,
        states: Vec::with_capacity(n_samples),
        failure: None,
    };
    if let Err(e) = cfg.validate() {
        out.failure = Some(e);
        return out;
    }
    if n_samples == 0 {
        return out;
    }
    out.states.push(x0.clone());
    if n_samples == 1 {
        return out;
    }
    let t_end = t0 + dt_out * (n_samples - 1) as f64;
    let sample_time = |k: usize| t0 + dt_out * k as f64;

    let mut segment_ends: Vec<f64> = schedule.switch_times(t0, t_end).collect();
    segment_ends.push(t_end);

    let mut t = t0;
    let mut x = x0.clone();
    let mut next_sample = 1usize;
    let mut steps = 0usize;
    let mut h = f64::NAN;
    let mut err_old = 1e-4_f64;

    for seg_end in segment_ends {
        let u = schedule.value_at(t).clone();
        let mut k1 = field(&x, &u);
        if !k1.iter().all(|v| v.is_finite()) {
            out.failure = Some(Error::IntegrationFailure { t, reason: "non-finite derivative".into() });
            return out;
        }
        let span = seg_end - t;
        if !h.is_finite() {
            h = initial_step(&mut field, &x, &u, &k1, cfg, span);
        }
        let mut reject = false;
        while t < seg_end {
            if steps >= cfg.max_steps {
                out.failure = Some(Error::IntegrationFailure {
                    t,
                    reason: format!("max_steps ({}) exhausted", cfg.max_steps),
                });
                return out;
            }
            let mut last = false;
            if t + h >= seg_end || (seg_end - (t + h)) <= 1e-12 * seg_end.abs().max(1.0) {
                h = seg_end - t;
                last = true;
            }
            if h <= 16.0 * f64::EPSILON * t.abs().max(1e-300) || h <= f64::MIN_POSITIVE {
                out.failure = Some(Error::IntegrationFailure { t, reason: "step size underflow".into() });
                return out;
            }
            steps += 1;

            let k2 = field(&(&x + &k1 * (h * A21)), &u);
            let k3 = field(&(&x + (&k1 * A31 + &k2 * A32) * h), &u);
            let k4 = field(&(&x + (&k1 * A41 + &k2 * A42 + &k3 * A43) * h), &u);
            let k5 = field(&(&x + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h), &u);
            let k6 = field(&(&x + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h), &u);
            let x_new = &x + (&k1 * A71 + &k3 * A73 + &k4 * A74 + &k5 * A75 + &k6 * A76) * h;
            let k7 = field(&x_new, &u);
            let err_vec = (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;
            let err = error_norm(&err_vec, &x, &x_new, cfg.rtol, cfg.atol);

            if !err.is_finite() || !x_new.iter().all(|v| v.is_finite()) {
                h *= FAC_MIN;
                reject = true;
                continue;
            }

            let fac11 = err.powf(0.2 - BETA * 0.75);
            if err <= 1.0 {
                let dense = DenseStep {
                    r1: x.clone(),
                    r2: &x_new - &x,
                    r3: &k1 * h - (&x_new - &x),
                    r4: (&x_new - &x) - &k7 * h - (&k1 * h - (&x_new - &x)),
                    r5: (&k1 * D1 + &k3 * D3 + &k4 * D4 + &k5 * D5 + &k6 * D6 + &k7 * D7) * h,
                };
                let t_new = if last { seg_end } else { t + h };
                while next_sample < n_samples && sample_time(next_sample) <= t_new + 1e-12 * dt_out {
                    let ts = sample_time(next_sample);
                    let theta = ((ts - t) / h).clamp(0.0, 1.0);
                    out.states.push(dense.eval(theta));
                    next_sample += 1;
                }
                let mut fac = fac11 / err_old.powf(BETA);
                err_old = err.max(1e-4);
                fac = (fac / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
                let mut h_new = h / fac;
                if reject {
                    h_new = h_new.min(h);
                }
                reject = false;
                t = t_new;
                x = x_new;
                k1 = k7;
                if !last {
                    h = h_new;
                } else {
                    h = h_new.max(h);
                }
            } else {
                h /= (fac11 / SAFETY).min(1.0 / FAC_MIN);
                reject = true;
            }
        }
    }
    while out.states.len() < n_samples {
        // Rounding at the final sample: the last accepted state is exact.
        out.states.push(x.clone());
    }
    out
}

/// Samples `field` on the same grid as [`solve_adaptive`], dispatching on
/// `cfg.method`. The fixed-step path splits each sample interval into
/// `ceil(dt_out / h)` equal RK4 steps with the input read at each step start.
pub fn solve<F>(
    mut field: F,
    x0: &DVector<f64>,
    schedule: &InputSchedule,
    t0: f64,
    dt_out: f64,
    n_samples: usize,
    cfg: &IntegratorConfig,
) -> SampledSolution
where
    F: FnMut(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    if cfg.method == Method::Rk45Adaptive {
        return solve_adaptive(field, x0, schedule, t0, dt_out, n_samples, cfg);
    }
    let mut out = SampledSolution {
        t0,
        dt: dt_out,
        states: Vec::with_capacity(n_samples),
        failure: None,
    };
    if let Err(e) = cfg.validate() {
        out.failure = Some(e);
        return out;
    }
    if n_samples == 0 {
        return out;
    }
    let sub = ((dt_out / cfg.h).ceil() as usize).max(1);
    let h = dt_out / sub as f64;
    let mut x = x0.clone();
    out.states.push(x.clone());
    for k in 1..n_samples {
        for j in 0..sub {
            let t = t0 + dt_out * (k - 1) as f64 + h * j as f64;
            match step_rk4(&mut field, &x, schedule.value_at(t), h) {
                Ok(next) => x = next,
                Err(_) => {
                    out.failure = Some(Error::IntegrationFailure { t, reason: "non-finite state".into() });
                    return out;
                }
            }
        }
        out.states.push(x.clone());
    }
    out
}

/// Recorded stage activations of a batched RK4 rollout.
#[derive(Debug, Clone)]
pub struct RolloutTape {
    h: f64,
    state_dim: usize,
    steps: Vec<[ForwardCache; 4]>,
}

impl RolloutTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Reverse accumulation through every RK4 stage. `seeds[k]` is the loss
    /// gradient with respect to the `k`-th predicted state (`d_x x B`).
    pub fn backward(&self, params: &MlpParams, seeds: &[DMatrix<f64>]) -> Result<ParamGradient> {
        if seeds.len() != self.steps.len() {
            return Err(Error::Dimension(format!(
                "{} gradient seeds for a {}-step rollout",
                seeds.len(),
                self.steps.len()
            )));
        }
        let h = self.h;
        let dx = self.state_dim;
        let mut grad = ParamGradient::zeros_like(params);
        let batch = seeds.first().map_or(0, |s| s.ncols());
        let mut gx = DMatrix::zeros(dx, batch);
        for (k, caches) in self.steps.iter().enumerate().rev() {
            if seeds[k].nrows() != dx || seeds[k].ncols() != batch {
                return Err(Error::Dimension(format!("gradient seed {k} has the wrong shape")));
            }
            gx += &seeds[k];
            let gk4 = &gx * (h / 6.0);
            let gx4 = params.backward_batch(&caches[3], &gk4, &mut grad).rows(0, dx).into_owned();
            let gk3 = &gx * (h / 3.0) + &gx4 * h;
            let gx3 = params.backward_batch(&caches[2], &gk3, &mut grad).rows(0, dx).into_owned();
            let gk2 = &gx * (h / 3.0) + &gx3 * (0.5 * h);
            let gx2 = params.backward_batch(&caches[1], &gk2, &mut grad).rows(0, dx).into_owned();
            let gk1 = &gx * (h / 6.0) + &gx2 * (0.5 * h);
            let gx1 = params.backward_batch(&caches[0], &gk1, &mut grad).rows(0, dx).into_owned();
            gx += gx1 + gx2 + gx3 + gx4;
        }
        Ok(grad)
    }
}

fn stack_input(x: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(x.nrows() + u.nrows(), x.ncols());
    z.rows_mut(0, x.nrows()).copy_from(x);
    z.rows_mut(x.nrows(), u.nrows()).copy_from(u);
    z
}

/// Batched RK4 rollout of the network field. `x0` is `d_x x B`, `inputs[k]`
/// is `d_u x B` and holds over step `k`. Returns the `K` predicted states
/// after each step. Non-finite columns are left in place for the caller to
/// detect; see [`non_finite_columns`].
pub fn rollout_batch(
    params: &MlpParams,
    x0: &DMatrix<f64>,
    inputs: &[DMatrix<f64>],
    h: f64,
    record_gradients: bool,
) -> Result<(Vec<DMatrix<f64>>, Option<RolloutTape>)> {
    let dx = params.state_dim();
    let du = params.input_dim();
    if x0.nrows() != dx {
        return Err(Error::Dimension(format!("x0 has {} rows, model state dim is {dx}", x0.nrows())));
    }
    if inputs.is_empty() {
        return Err(Error::InvalidParameter("rollout needs at least one step".into()));
    }
    if inputs.iter().any(|u| u.nrows() != du || u.ncols() != x0.ncols()) {
        return Err(Error::Dimension(format!("rollout inputs must be {du} x {}", x0.ncols())));
    }
    let mut x = x0.clone();
    let mut preds = Vec::with_capacity(inputs.len());
    let mut steps = Vec::with_capacity(if record_gradients { inputs.len() } else { 0 });
    for u in inputs {
        let (k1, c1) = params.forward_batch(&stack_input(&x, u), record_gradients);
        let (k2, c2) = params.forward_batch(&stack_input(&(&x + &k1 * (0.5 * h)), u), record_gradients);
        let (k3, c3) = params.forward_batch(&stack_input(&(&x + &k2 * (0.5 * h)), u), record_gradients);
        let (k4, c4) = params.forward_batch(&stack_input(&(&x + &k3 * h), u), record_gradients);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        preds.push(x.clone());
        if record_gradients {
            steps.push([c1, c2, c3, c4]);
        }
    }
    let tape = record_gradients.then(|| RolloutTape {
        h,
        state_dim: dx,
        steps,
    });
    Ok((preds, tape))
}

/// Column indices whose predictions contain a non-finite value at any step.
pub fn non_finite_columns(preds: &[DMatrix<f64>]) -> Vec<usize> {
    let Some(first) = preds.first() else {
        return Vec::new();
    };
    (0..first.ncols())
        .filter(|&c| preds.iter().any(|p| p.column(c).iter().any(|v| !v.is_finite())))
        .collect()
}

/// Single-window rollout: `inputs` is `K x d_u`, the result is `K x d_x`.
pub fn rollout_window(
    params: &MlpParams,
    x0: &DVector<f64>,
    inputs: &DMatrix<f64>,
    h: f64,
    record_gradients: bool,
) -> Result<(DMatrix<f64>, Option<RolloutTape>)> {
    let x0m = DMatrix::from_column_slice(x0.len(), 1, x0.as_slice());
    let us: Vec<DMatrix<f64>> = (0..inputs.nrows())
        .map(|k| DMatrix::from_fn(inputs.ncols(), 1, |j, _| inputs[(k, j)]))
        .collect();
    let (preds, tape) = rollout_batch(params, &x0m, &us, h, record_gradients)?;
    if let Some(step) = preds.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteState { step });
    }
    let mut out = DMatrix::zeros(preds.len(), x0.len());
    for (k, p) in preds.iter().enumerate() {
        out.row_mut(k).copy_from(&p.column(0).transpose());
    }
    Ok((out, tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn decay(x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        -x
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn rk4_zero_field_is_identity() {
        let x = v(&[1.0, -2.0]);
        let next = step_rk4(&mut |x: &DVector<f64>, _: &DVector<f64>| DVector::zeros(x.len()), &x, &v(&[]), 0.3).unwrap();
        assert_eq!(next, x);
    }

    #[test]
    fn rk4_single_step_on_exponential_decay() {
        let next = step_rk4(&mut decay, &v(&[1.0]), &v(&[]), 0.1).unwrap();
        assert_abs_diff_eq!(next[0], 0.904_837_5, epsilon = 1e-7);
        // RK4 reproduces the quartic Taylor polynomial on linear fields.
        let h = 0.1f64;
        assert_abs_diff_eq!(next[0], 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0, epsilon = 1e-15);
        assert!((next[0] - (-h).exp()).abs() <= 1e-7);
    }

    #[test]
    fn rk4_is_linear_for_linear_fields() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.5]);
        let mut f = |x: &DVector<f64>, _: &DVector<f64>| &a * x;
        let (x1, x2) = (v(&[0.3, -1.2]), v(&[2.0, 0.7]));
        let lhs = step_rk4(&mut f, &(&x1 * 2.0 + &x2 * -3.0), &v(&[]), 0.05).unwrap();
        let rhs = step_rk4(&mut f, &x1, &v(&[]), 0.05).unwrap() * 2.0 - step_rk4(&mut f, &x2, &v(&[]), 0.05).unwrap() * 3.0;
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-14);
    }

    #[test]
    fn rk4_reports_non_finite_stages() {
        let err = step_rk4(&mut |x: &DVector<f64>, _: &DVector<f64>| x.map(|v| 1.0 / (v - v)), &v(&[1.0]), &v(&[]), 0.1);
        assert!(matches!(err, Err(Error::NonFiniteState { .. })));
    }

    fn rk4_global_error(h: f64) -> f64 {
        let n = (1.0 / h).round() as usize;
        let mut x = v(&[1.0]);
        for _ in 0..n {
            x = step_rk4(&mut decay, &x, &v(&[]), h).unwrap();
        }
        (x[0] - (-1.0f64).exp()).abs()
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        let order = (rk4_global_error(0.1) / rk4_global_error(0.05)).log2();
        assert!(order >= 3.8, "observed order {order}");
    }

    #[test]
    fn adaptive_solver_tracks_exponential_decay() {
        let cfg = IntegratorConfig::default();
        let sol = solve_adaptive(decay, &v(&[1.0]), &InputSchedule::constant(v(&[])), 0.0, 0.01, 501, &cfg);
        let states = sol.into_result().unwrap();
        let max_err = states
            .iter()
            .enumerate()
            .map(|(k, s)| (s[0] - (-(k as f64) * 0.01).exp()).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1e-6, "max error {max_err}");
    }

    #[test]
    fn fixed_step_solve_subdivides_sample_intervals() {
        let cfg = IntegratorConfig { method: Method::Rk4Fixed, h: 0.02, ..IntegratorConfig::default() };
        let states = solve(decay, &v(&[1.0]), &InputSchedule::constant(v(&[])), 0.0, 0.05, 21, &cfg)
            .into_result()
            .unwrap();
        assert_eq!(states.len(), 21);
        // ceil(0.05 / 0.02) = 3 steps of h = 0.05 / 3 per sample.
        let h: f64 = 0.05 / 3.0;
        let g = 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
        for (k, s) in states.iter().enumerate() {
            assert!((s[0] - g.powi(3 * k as i32)).abs() <= 1e-14);
        }
        let adaptive = IntegratorConfig::default();
        let a = solve(decay, &v(&[1.0]), &InputSchedule::constant(v(&[])), 0.0, 0.05, 21, &adaptive).states;
        let b = solve_adaptive(decay, &v(&[1.0]), &InputSchedule::constant(v(&[])), 0.0, 0.05, 21, &adaptive).states;
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_step_solve_reports_blow_up() {
        let cfg = IntegratorConfig { method: Method::Rk4Fixed, h: 0.1, ..IntegratorConfig::default() };
        let grow = |x: &DVector<f64>, _: &DVector<f64>| x.map(|e| e * e * 1e3);
        let sol = solve(grow, &v(&[1.0]), &InputSchedule::constant(v(&[])), 0.0, 0.1, 50, &cfg);
        assert!(matches!(sol.failure, Some(Error::IntegrationFailure { .. })));
        assert!(sol.states.len() < 50);
    }

    #[test]
    fn tighter_tolerance_never_increases_error() {
        let err_at = |rtol: f64| {
            let cfg = IntegratorConfig { rtol, atol: rtol * 1e-2, ..IntegratorConfig::default() };
            let states = solve_adaptive(decay, &v(&[1.0]), &InputSchedule::constant(v(&[])), 0.0, 0.05, 101, &cfg)
                .into_result()
                .unwrap();
            states
                .iter()
                .enumerate()
                .map(|(k, s)| (s[0] - (-(k as f64) * 0.05).exp()).abs())
                .fold(0.0, f64::max)
        };
        let errors: Vec<f64> = [1e-5, 1e-6, 1e-7].iter().map(|&r| err_at(r)).collect();
        assert!(errors[1] <= errors[0] && errors[2] <= errors[1], "{errors:?}");
    }

    #[test]
    fn finite_time_blow_up_is_reported() {
        let sol = solve_adaptive(
            |x: &DVector<f64>, _: &DVector<f64>| x.map(|v| v * v),
            &v(&[1.0]),
            &InputSchedule::constant(v(&[])),
            0.0,
            0.01,
            201,
            &IntegratorConfig::default(),
        );
        match sol.failure {
            Some(Error::IntegrationFailure { t, .. }) => assert!((t - 1.0).abs() < 1e-2, "failed at {t}"),
            other => panic!("expected failure, got {other:?}"),
        }
        assert!(sol.states.len() >= 99 && sol.states.len() <= 101);
    }

    #[test]
    fn schedule_steps_are_respected() {
        // dx/dt = u with u stepping from 0 to 1 at t = 0.5
        let schedule = InputSchedule::new(vec![(0.0, v(&[0.0])), (0.5, v(&[1.0]))]).unwrap();
        let states = solve_adaptive(
            |_x: &DVector<f64>, u: &DVector<f64>| u.clone(),
            &v(&[0.0]),
            &schedule,
            0.0,
            0.1,
            11,
            &IntegratorConfig::default(),
        )
        .into_result()
        .unwrap();
        for (k, s) in states.iter().enumerate() {
            let t = k as f64 * 0.1;
            assert_abs_diff_eq!(s[0], (t - 0.5).max(0.0), epsilon = 1e-9);
        }
        assert_eq!(schedule.value_at(0.49)[0], 0.0);
        assert_eq!(schedule.value_at(0.5)[0], 1.0);
    }

    #[test]
    fn adaptive_solver_is_deterministic() {
        let run = || {
            solve_adaptive(
                |x: &DVector<f64>, _: &DVector<f64>| v(&[x[1], -x[0] - 0.1 * x[1]]),
                &v(&[1.0, 0.0]),
                &InputSchedule::constant(v(&[])),
                0.0,
                0.05,
                200,
                &IntegratorConfig::default(),
            )
            .into_result()
            .unwrap()
        };
        assert_eq!(run(), run());
    }
}
