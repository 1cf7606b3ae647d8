//! Trajectory data model and the data pipeline: simulation, sensor noise,
//! zero-phase filtering, differencing, downsampling and normalization.

mod filter;
mod io;

pub use filter::{butterworth_lowpass, zero_phase_lowpass, Biquad};
pub use io::{read_dataset, read_trajectory_csv, write_dataset, write_trajectory_csv};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{solve, InputSchedule, IntegratorConfig};
use crate::plants::PlantModel;

/// Provenance carried with each trajectory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryMeta {
    pub plant: Option<String>,
    pub noise_sigma: f64,
    pub noise_seed: Option<u64>,
    pub cutoff_hz: Option<f64>,
    pub downsample: usize,
    pub normalized: bool,
    pub truncated: bool,
    /// Integration failure message when `truncated` is set.
    pub failure: Option<String>,
}

/// Uniformly sampled states and inputs, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub t0: f64,
    pub states: DMatrix<f64>,
    pub inputs: DMatrix<f64>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn new(dt: f64, t0: f64, states: DMatrix<f64>, inputs: DMatrix<f64>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) || !t0.is_finite() {
            return Err(Error::InvalidParameter(format!("trajectory needs dt > 0 and finite t0, got dt={dt}, t0={t0}")));
        }
        if states.nrows() < 2 {
            return Err(Error::TooShort(format!("trajectory has {} samples, need at least 2", states.nrows())));
        }
        if states.nrows() != inputs.nrows() {
            return Err(Error::Dimension(format!(
                "{} state rows but {} input rows",
                states.nrows(),
                inputs.nrows()
            )));
        }
        if !states.iter().chain(inputs.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("trajectory contains non-finite values".into()));
        }
        Ok(Self {
            dt,
            t0,
            states,
            inputs,
            meta: TrajectoryMeta {
                downsample: 1,
                ..TrajectoryMeta::default()
            },
        })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + self.dt * k as f64
    }

    pub fn state(&self, k: usize) -> DVector<f64> {
        self.states.row(k).transpose()
    }

    pub fn input(&self, k: usize) -> DVector<f64> {
        self.inputs.row(k).transpose()
    }

    pub fn duration(&self) -> f64 {
        self.dt * (self.len() - 1) as f64
    }
}

/// A set of trajectories sharing state and input dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub norm: Option<NormStats>,
    /// Generation configuration, counts and failures.
    pub manifest: serde_json::Map<String, serde_json::Value>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        if let Some(first) = trajectories.first() {
            let (dx, du) = (first.state_dim(), first.input_dim());
            if let Some(i) = trajectories.iter().position(|t| t.state_dim() != dx || t.input_dim() != du) {
                return Err(Error::Dimension(format!(
                    "trajectory {i} has d_x={}, d_u={}, expected d_x={dx}, d_u={du}",
                    trajectories[i].state_dim(),
                    trajectories[i].input_dim()
                )));
            }
        }
        Ok(Self {
            trajectories,
            norm: None,
            manifest: serde_json::Map::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.trajectories.first().map_or(0, Trajectory::state_dim)
    }

    pub fn input_dim(&self) -> usize {
        self.trajectories.first().map_or(0, Trajectory::input_dim)
    }

    pub fn is_normalized(&self) -> bool {
        !self.trajectories.is_empty() && self.trajectories.iter().all(|t| t.meta.normalized)
    }

    /// Normalized copy using the stored statistics, fitting them first when
    /// absent. Already-normalized datasets are returned unchanged.
    pub fn normalized(&self) -> Result<Dataset> {
        if self.is_normalized() {
            return Ok(self.clone());
        }
        let stats = match &self.norm {
            Some(s) => s.clone(),
            None => fit_normalization(self)?,
        };
        let trajectories = self
            .trajectories
            .iter()
            .map(|t| apply_normalization(t, &stats, Direction::Forward))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            trajectories,
            norm: Some(stats),
            manifest: self.manifest.clone(),
        })
    }
}

/// Per-channel z-score statistics plus a time scale.
///
/// Normalized time is `t / time_scale`; the time scale is chosen so that the
/// normalized state derivatives have unit RMS over the fitting set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NormStatsRepr", into = "NormStatsRepr")]
pub struct NormStats {
    pub state_mean: DVector<f64>,
    pub state_std: DVector<f64>,
    pub input_mean: DVector<f64>,
    pub input_std: DVector<f64>,
    pub time_scale: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormStatsRepr {
    state_mean: Vec<f64>,
    state_std: Vec<f64>,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
    #[serde(default = "one")]
    time_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<NormStatsRepr> for NormStats {
    type Error = Error;

    fn try_from(r: NormStatsRepr) -> Result<Self> {
        NormStats::new(
            DVector::from_vec(r.state_mean),
            DVector::from_vec(r.state_std),
            DVector::from_vec(r.input_mean),
            DVector::from_vec(r.input_std),
            r.time_scale,
        )
    }
}

impl From<NormStats> for NormStatsRepr {
    fn from(s: NormStats) -> Self {
        Self {
            state_mean: s.state_mean.iter().copied().collect(),
            state_std: s.state_std.iter().copied().collect(),
            input_mean: s.input_mean.iter().copied().collect(),
            input_std: s.input_std.iter().copied().collect(),
            time_scale: s.time_scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl NormStats {
    pub fn new(
        state_mean: DVector<f64>,
        state_std: DVector<f64>,
        input_mean: DVector<f64>,
        input_std: DVector<f64>,
        time_scale: f64,
    ) -> Result<Self> {
        let s = Self {
            state_mean,
            state_std,
            input_mean,
            input_std,
            time_scale,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn identity(state_dim: usize, input_dim: usize) -> Self {
        Self {
            state_mean: DVector::zeros(state_dim),
            state_std: DVector::from_element(state_dim, 1.0),
            input_mean: DVector::zeros(input_dim),
            input_std: DVector::from_element(input_dim, 1.0),
            time_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_mean.len() != self.state_std.len() || self.input_mean.len() != self.input_std.len() {
            return Err(Error::Dimension("normalization mean/std lengths differ".into()));
        }
        let all = self
            .state_mean
            .iter()
            .chain(self.input_mean.iter())
            .chain(self.state_std.iter())
            .chain(self.input_std.iter());
        if !all.clone().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("normalization statistics must be finite".into()));
        }
        if !self.state_std.iter().chain(self.input_std.iter()).all(|v| *v > 0.0) {
            return Err(Error::InvalidParameter("normalization std entries must be > 0".into()));
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!("time scale must be > 0, got {}", self.time_scale)));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_mean.len()
    }

    pub fn normalize_state(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.state_mean).component_div(&self.state_std)
    }

    pub fn denormalize_state(&self, z: &DVector<f64>) -> DVector<f64> {
        z.component_mul(&self.state_std) + &self.state_mean
    }

    pub fn normalize_input(&self, u: &DVector<f64>) -> DVector<f64> {
        (u - &self.input_mean).component_div(&self.input_std)
    }

    pub fn denormalize_input(&self, z: &DVector<f64>) -> DVector<f64> {
        z.component_mul(&self.input_std) + &self.input_mean
    }

    /// Physical-unit Jacobian `S J S^-1 / time_scale` of a Jacobian computed
    /// in normalized state and time.
    pub fn denormalize_jacobian(&self, j: &DMatrix<f64>) -> DMatrix<f64> {
        let n = j.nrows();
        DMatrix::from_fn(n, n, |r, c| j[(r, c)] * self.state_std[r] / self.state_std[c] / self.time_scale)
    }

    /// Inverse of [`NormStats::denormalize_jacobian`].
    pub fn normalize_jacobian(&self, j: &DMatrix<f64>) -> DMatrix<f64> {
        let n = j.nrows();
        DMatrix::from_fn(n, n, |r, c| j[(r, c)] * self.state_std[c] / self.state_std[r] * self.time_scale)
    }
}

/// Integrates the plant under a piecewise-constant input schedule and samples
/// `round(duration / dt)` points starting at `t = 0`. If the solver fails the
/// partial trajectory is returned with `meta.truncated` set.
pub fn simulate(
    plant: &PlantModel,
    x0: &DVector<f64>,
    schedule: &InputSchedule,
    dt: f64,
    duration: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    if !(dt > 0.0) || !(duration >= 2.0 * dt) {
        return Err(Error::InvalidParameter(format!(
            "simulate needs dt > 0 and duration >= 2 dt, got dt={dt}, duration={duration}"
        )));
    }
    if x0.len() != plant.state_dim() || schedule.dim() != plant.input_dim() {
        return Err(Error::Dimension(format!(
            "{} plant needs x0 in R^{} and inputs in R^{}",
            plant.kind_name(),
            plant.state_dim(),
            plant.input_dim()
        )));
    }
    let n = (duration / dt).round() as usize;
    let sol = solve(|x, u| plant.derivative_unchecked(x, u), x0, schedule, 0.0, dt, n, cfg);
    let reached = sol.states.len();
    if reached < 2 {
        return Err(sol.failure.unwrap_or(Error::IntegrationFailure {
            t: 0.0,
            reason: "fewer than two samples produced".into(),
        }));
    }
    let dx = plant.state_dim();
    let du = plant.input_dim();
    let states = DMatrix::from_fn(reached, dx, |k, j| sol.states[k][j]);
    let inputs = DMatrix::from_fn(reached, du, |k, j| schedule.value_at(dt * k as f64)[j]);
    let mut traj = Trajectory::new(dt, 0.0, states, inputs)?;
    traj.meta.plant = Some(plant.kind_name().to_string());
    if let Some(e) = sol.failure {
        traj.meta.truncated = true;
        traj.meta.failure = Some(e.to_string());
    }
    Ok(traj)
}

/// Adds i.i.d. zero-mean Gaussian noise of standard deviation `sigma` to
/// every state entry. Inputs are untouched.
pub fn add_noise(traj: &Trajectory, sigma: f64, seed: u64) -> Result<Trajectory> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut out = traj.clone();
    out.meta.noise_sigma = sigma;
    out.meta.noise_seed = Some(seed);
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Row-major draw order so the noise sequence does not depend on storage.
    for k in 0..out.states.nrows() {
        for j in 0..out.states.ncols() {
            out.states[(k, j)] += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

/// Differencing rule used by [`finite_diff_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffScheme {
    /// `(x[k+1] - x[k-1]) / 2dt` inside, second-order one-sided at the ends.
    #[default]
    Central,
    /// `(x[k+1] - x[k]) / dt`, backward at the last sample.
    Forward,
}

/// Central-difference state derivatives, one row per sample.
pub fn finite_diff(traj: &Trajectory) -> Result<DMatrix<f64>> {
    finite_diff_with(traj, DiffScheme::Central)
}

pub fn finite_diff_with(traj: &Trajectory, scheme: DiffScheme) -> Result<DMatrix<f64>> {
    let n = traj.len();
    if n < 3 {
        return Err(Error::TooShort(format!("finite differences need at least 3 samples, got {n}")));
    }
    let x = &traj.states;
    let dt = traj.dt;
    let mut d = DMatrix::zeros(n, x.ncols());
    match scheme {
        DiffScheme::Central => {
            for k in 1..n - 1 {
                let row = (x.row(k + 1) - x.row(k - 1)) / (2.0 * dt);
                d.row_mut(k).copy_from(&row);
            }
            let first = (x.row(1) * 4.0 - x.row(0) * 3.0 - x.row(2)) / (2.0 * dt);
            let last = (x.row(n - 1) * 3.0 - x.row(n - 2) * 4.0 + x.row(n - 3)) / (2.0 * dt);
            d.row_mut(0).copy_from(&first);
            d.row_mut(n - 1).copy_from(&last);
        }
        DiffScheme::Forward => {
            for k in 0..n - 1 {
                let row = (x.row(k + 1) - x.row(k)) / dt;
                d.row_mut(k).copy_from(&row);
            }
            let last = d.row(n - 2).into_owned();
            d.row_mut(n - 1).copy_from(&last);
        }
    }
    Ok(d)
}

/// Keeps every `factor`-th sample; the sample period grows accordingly.
pub fn downsample(traj: &Trajectory, factor: usize) -> Result<Trajectory> {
    if factor == 0 {
        return Err(Error::InvalidParameter("downsample factor must be >= 1".into()));
    }
    let n = traj.len().div_ceil(factor);
    if n < 2 {
        return Err(Error::TooShort(format!(
            "downsampling {} samples by {factor} leaves {n}",
            traj.len()
        )));
    }
    let pick = |m: &DMatrix<f64>| DMatrix::from_fn(n, m.ncols(), |k, j| m[(k * factor, j)]);
    let mut out = Trajectory {
        dt: traj.dt * factor as f64,
        t0: traj.t0,
        states: pick(&traj.states),
        inputs: pick(&traj.inputs),
        meta: traj.meta.clone(),
    };
    out.meta.downsample = traj.meta.downsample.max(1) * factor;
    Ok(out)
}

fn pooled_mean_std(columns: impl Iterator<Item = Vec<f64>>) -> (DVector<f64>, DVector<f64>) {
    let cols: Vec<Vec<f64>> = columns.collect();
    let mean = DVector::from_iterator(
        cols.len(),
        cols.iter().map(|c| c.iter().sum::<f64>() / c.len().max(1) as f64),
    );
    let std = DVector::from_iterator(
        cols.len(),
        cols.iter().zip(mean.iter()).map(|(c, m)| {
            let var = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c.len().max(1) as f64;
            let s = var.sqrt();
            if s > 0.0 && s.is_finite() {
                s
            } else {
                1.0
            }
        }),
    );
    (mean, std)
}

/// Fits per-channel z-score statistics pooled over every sample of every
/// trajectory, plus the time scale. Zero-variance channels get std 1.
pub fn fit_normalization(dataset: &Dataset) -> Result<NormStats> {
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("cannot fit normalization on an empty dataset".into()));
    }
    let dx = dataset.state_dim();
    let du = dataset.input_dim();
    let gather = |dim: usize, pick: fn(&Trajectory) -> &DMatrix<f64>| {
        (0..dim).map(move |j| {
            dataset
                .trajectories
                .iter()
                .flat_map(|t| pick(t).column(j).iter().copied().collect::<Vec<_>>())
                .collect::<Vec<f64>>()
        })
    };
    let (state_mean, state_std) = pooled_mean_std(gather(dx, |t| &t.states));
    let (input_mean, input_std) = pooled_mean_std(gather(du, |t| &t.inputs));

    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for t in &dataset.trajectories {
        if t.len() < 3 {
            continue;
        }
        let d = finite_diff(t)?;
        for row in d.row_iter() {
            for (j, v) in row.iter().enumerate() {
                sum_sq += (v / state_std[j]).powi(2);
                count += 1;
            }
        }
    }
    let rms = (sum_sq / count.max(1) as f64).sqrt();
    let time_scale = if rms > 0.0 && rms.is_finite() { 1.0 / rms } else { 1.0 };
    NormStats::new(state_mean, state_std, input_mean, input_std, time_scale)
}

/// Applies (or removes) the z-score to states and inputs and rescales time.
pub fn apply_normalization(traj: &Trajectory, stats: &NormStats, direction: Direction) -> Result<Trajectory> {
    if traj.state_dim() != stats.state_dim() || traj.input_dim() != stats.input_dim() {
        return Err(Error::Dimension(format!(
            "normalization is for d_x={}, d_u={}, trajectory has d_x={}, d_u={}",
            stats.state_dim(),
            stats.input_dim(),
            traj.state_dim(),
            traj.input_dim()
        )));
    }
    let mut out = traj.clone();
    match direction {
        Direction::Forward => {
            for (j, mut col) in out.states.column_iter_mut().enumerate() {
                col.apply(|v| *v = (*v - stats.state_mean[j]) / stats.state_std[j]);
            }
            for (j, mut col) in out.inputs.column_iter_mut().enumerate() {
                col.apply(|v| *v = (*v - stats.input_mean[j]) / stats.input_std[j]);
            }
            out.dt = traj.dt / stats.time_scale;
            out.t0 = traj.t0 / stats.time_scale;
            out.meta.normalized = true;
        }
        Direction::Inverse => {
            for (j, mut col) in out.states.column_iter_mut().enumerate() {
                col.apply(|v| *v = *v * stats.state_std[j] + stats.state_mean[j]);
            }
            for (j, mut col) in out.inputs.column_iter_mut().enumerate() {
                col.apply(|v| *v = *v * stats.input_std[j] + stats.input_mean[j]);
            }
            out.dt = traj.dt * stats.time_scale;
            out.t0 = traj.t0 * stats.time_scale;
            out.meta.normalized = false;
        }
    }
    Ok(out)
}

/// One sweep point: the input stepped to at `t = 0` and the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub input: Vec<f64>,
    pub x0: Vec<f64>,
}

/// Everything that determines a generated dataset besides the plant and grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// Raw simulation sample period (s).
    pub dt: f64,
    pub duration: f64,
    pub sigma_x: f64,
    /// `None` disables filtering.
    pub cutoff_hz: Option<f64>,
    pub downsample: usize,
    pub seed: u64,
    #[serde(default)]
    pub integrator: IntegratorConfig,
}

/// Seed of the noise stream for grid point `index`; independent of the order
/// in which grid points are processed.
pub fn trajectory_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Simulates every grid point (input step at `t = 0`), adds sensor noise,
/// filters and downsamples. Failed grid points are recorded in the manifest
/// and skipped.
pub fn generate_dataset(plant: &PlantModel, grid: &[GridPoint], spec: &DataSpec) -> Result<Dataset> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("input grid is empty".into()));
    }
    let mut trajectories = Vec::with_capacity(grid.len());
    let mut failures = Vec::new();
    let mut truncated = Vec::new();
    for (i, point) in grid.iter().enumerate() {
        let result = (|| -> Result<Trajectory> {
            let x0 = DVector::from_column_slice(&point.x0);
            let schedule = InputSchedule::constant(DVector::from_column_slice(&point.input));
            let mut traj = simulate(plant, &x0, &schedule, spec.dt, spec.duration, &spec.integrator)?;
            if spec.sigma_x > 0.0 {
                traj = add_noise(&traj, spec.sigma_x, trajectory_seed(spec.seed, i))?;
            }
            if let Some(cutoff) = spec.cutoff_hz {
                traj = zero_phase_lowpass(&traj, cutoff)?;
            }
            downsample(&traj, spec.downsample)
        })();
        match result {
            Ok(traj) => {
                if traj.meta.truncated {
                    truncated.push(i);
                }
                trajectories.push(traj);
            }
            Err(e) => failures.push(serde_json::json!({"grid_index": i, "error": e.to_string()})),
        }
    }
    if trajectories.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "every grid point failed: {}",
            serde_json::Value::Array(failures)
        )));
    }
    let mut dataset = Dataset::new(trajectories)?;
    let manifest = &mut dataset.manifest;
    manifest.insert("plant".into(), serde_json::to_value(plant).expect("plant serializes"));
    manifest.insert("grid".into(), serde_json::to_value(grid).expect("grid serializes"));
    manifest.insert("data".into(), serde_json::to_value(spec).expect("spec serializes"));
    manifest.insert(
        "counts".into(),
        serde_json::json!({
            "grid_points": grid.len(),
            "trajectories": dataset.trajectories.len(),
            "failed": failures.len(),
            "truncated": truncated.len(),
        }),
    );
    manifest.insert("failures".into(), serde_json::Value::Array(failures));
    manifest.insert("truncated".into(), serde_json::to_value(truncated).expect("indices serialize"));
    dataset.norm = Some(fit_normalization(&dataset)?);
    Ok(dataset)
}
