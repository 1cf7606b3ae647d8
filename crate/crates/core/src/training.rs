//! Composite-loss training of the network vector field, and the discrete
//! one-step baseline.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{non_finite_columns, rollout_batch, solve, InputSchedule, IntegratorConfig};
use crate::jacest::{extract, ExtractionConfig};
use crate::neuralfield::{grad_forward_loss, read_model_file, write_model_file, Activation, MlpParams, ParamGradient};
use crate::signals::{finite_diff, Dataset, Trajectory};

const MAX_NON_FINITE_STREAK: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Lfi,
    Vanilla,
    Narx,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Lfi => "lfi",
            Mode::Vanilla => "vanilla",
            Mode::Narx => "narx",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lambda1: f64,
    pub lambda2: f64,
    pub window_len: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Latent features per iteration in the Jacobian term; `None` uses all.
    pub jac_subset: Option<usize>,
    pub extraction: ExtractionConfig,
    /// A trajectory counts as settled when the drift between its last two
    /// windows is at most this fraction of the largest such drift.
    pub settle_frac: f64,
    /// Features whose deviation matrix is worse conditioned than this are
    /// left out of the Jacobian term.
    pub max_feature_cond: f64,
    /// Wall-clock times in the log; off for byte-reproducible logs.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Lfi,
            lambda1: 1.0,
            lambda2: 0.01,
            window_len: 40,
            batch_size: 16,
            iterations: 1200,
            lr: 3e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            hidden: vec![64, 128, 128],
            activation: Activation::Tanh,
            jac_subset: None,
            extraction: ExtractionConfig::default(),
            settle_frac: 0.1,
            max_feature_cond: 100.0,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    /// Defaults for `mode`; vanilla training drops the Jacobian weight.
    pub fn for_mode(mode: Mode) -> Self {
        let mut cfg = Self { mode, ..Self::default() };
        if mode == Mode::Vanilla {
            cfg.lambda2 = 0.0;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.lambda1 > 0.0 && self.lambda1.is_finite()) {
            return bad(format!("lambda1 must be > 0, got {}", self.lambda1));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return bad(format!("lambda2 must be >= 0, got {}", self.lambda2));
        }
        if self.mode == Mode::Vanilla && self.lambda2 != 0.0 {
            return bad(format!("vanilla mode requires lambda2 = 0, got {}", self.lambda2));
        }
        if self.window_len < 2 {
            return bad(format!("window_len must be >= 2, got {}", self.window_len));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return bad("batch_size and iterations must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("hidden layers must be non-empty and positive, got {:?}", self.hidden));
        }
        if self.jac_subset == Some(0) {
            return bad("jac_subset must be >= 1 when set".into());
        }
        if !(self.settle_frac > 0.0 && self.settle_frac <= 1.0) {
            return bad(format!("settle_frac must lie in (0, 1], got {}", self.settle_frac));
        }
        if !(self.max_feature_cond >= 1.0) {
            return bad(format!("max_feature_cond must be >= 1, got {}", self.max_feature_cond));
        }
        self.extraction.validate()
    }

    fn layer_dims(&self, dx: usize, du: usize) -> Vec<usize> {
        let mut dims = vec![dx + du];
        dims.extend(&self.hidden);
        dims.push(dx);
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub l_data: f64,
    pub l_jac: f64,
    pub l_total: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    /// Windows dropped because their rollout went non-finite.
    pub skipped_windows: usize,
    pub latent_features: usize,
}

impl TrainLog {
    pub fn final_record(&self) -> Option<&TrainRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,L_data,L_jac,L_total,grad_norm,wall_ms\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iteration, r.l_data, r.l_jac, r.l_total, r.grad_norm, r.wall_ms
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// `(1/K) sum_k |pred_k - ref_k|^2` over rows.
pub fn data_loss(predicted: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<f64> {
    if predicted.shape() != reference.shape() {
        return Err(Error::Dimension(format!(
            "prediction is {:?}, reference is {:?}",
            predicted.shape(),
            reference.shape()
        )));
    }
    let k = predicted.nrows().max(1) as f64;
    Ok((predicted - reference).norm_squared() / k)
}

pub fn total_loss(l_data: f64, l_jac: f64, lambda1: f64, lambda2: f64) -> f64 {
    lambda1 * l_data + lambda2 * l_jac
}

/// `batch_size` uniform draws over every `(trajectory, start)` pair with
/// `start` in `[0, N - K - 1]`.
pub fn sample_windows<R: Rng>(dataset: &Dataset, k: usize, batch_size: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let counts: Vec<usize> = dataset
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.len() < k + 1 {
                Err(Error::TooShort(format!("trajectory {i} has {} samples, windows need {}", t.len(), k + 1)))
            } else {
                Ok(t.len() - k)
            }
        })
        .collect::<Result<_>>()?;
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::TooShort("dataset has no trajectories".into()));
    }
    Ok((0..batch_size)
        .map(|_| {
            let mut r = rng.random_range(0..total);
            let mut traj = 0;
            while r >= counts[traj] {
                r -= counts[traj];
                traj += 1;
            }
            (traj, r)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut MlpParams, grads: &ParamGradient, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    let shapes_match = params.tensors().count() == state.m.len()
        && grads.tensors().count() == state.m.len()
        && params.tensors().zip(grads.tensors()).zip(&state.m).all(|((p, g), m)| p.len() == g.len() && g.len() == m.len());
    if !shapes_match {
        return Err(Error::Dimension("parameters, gradients and optimizer state differ in shape".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.tensors_mut().zip(grads.tensors()).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFeature {
    pub trajectory: usize,
    pub x_ss: DVector<f64>,
    pub u_ss: DVector<f64>,
    pub j_ref: DMatrix<f64>,
    pub cond: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatentFeatures {
    pub features: Vec<LatentFeature>,
    /// `(trajectory, reason)` for every trajectory without a feature.
    pub excluded: Vec<(usize, String)>,
}

/// Distance between the state means of every pair of adjacent `w`-sample
/// windows, indexed by the first window's start. Averaging keeps sensor noise
/// out of the drift measure.
fn window_drift(states: &DMatrix<f64>, w: usize) -> Vec<f64> {
    let (n, d) = states.shape();
    let mut prefix = DMatrix::<f64>::zeros(n + 1, d);
    for k in 0..n {
        for j in 0..d {
            prefix[(k + 1, j)] = prefix[(k, j)] + states[(k, j)];
        }
    }
    let mean = |i: usize, j: usize| (prefix[(i + w, j)] - prefix[(i, j)]) / w as f64;
    (0..=n - 2 * w)
        .map(|i| (0..d).map(|j| (mean(i + w, j) - mean(i, j)).powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// Runs the Jacobian extraction on every trajectory once. Trajectories that
/// never settle, or whose fit fails, only contribute to the data loss.
pub fn precompute_latent_features(dataset: &Dataset, cfg: &TrainConfig) -> Result<LatentFeatures> {
    cfg.validate()?;
    let mut out = LatentFeatures::default();
    for (i, traj) in dataset.trajectories.iter().enumerate() {
        match latent_feature(traj, cfg) {
            Ok((x_ss, u_ss, est)) => out.features.push(LatentFeature {
                trajectory: i,
                x_ss,
                u_ss,
                j_ref: est.j_ref,
                cond: est.cond,
                n_samples: est.n_samples,
            }),
            Err(e) => out.excluded.push((i, e.to_string())),
        }
    }
    Ok(out)
}

fn latent_feature(
    traj: &Trajectory,
    cfg: &TrainConfig,
) -> Result<(DVector<f64>, DVector<f64>, crate::jacest::JacobianEstimate)> {
    let settle_frac = cfg.settle_frac;
    if traj.meta.truncated {
        return Err(Error::NoEquilibrium("trajectory was truncated by a solver failure".into()));
    }
    let derivs = finite_diff(traj)?;
    let w = cfg.extraction.window_for(traj.len());
    if traj.len() < 2 * w {
        return Err(Error::TooShort(format!("settling check needs {} samples, have {}", 2 * w, traj.len())));
    }
    let drift = window_drift(&traj.states, w);
    let peak = drift.iter().copied().fold(0.0, f64::max);
    let tail = drift[drift.len() - 1];
    if tail > settle_frac * peak {
        return Err(Error::NoEquilibrium(format!(
            "trajectory does not settle (final drift {tail:.3e}, largest {peak:.3e})"
        )));
    }
    let ex = extract(traj, Some(&derivs), &cfg.extraction)?;
    if ex.estimate.cond > cfg.max_feature_cond {
        return Err(Error::RankDeficient { cond: ex.estimate.cond });
    }
    let [i0, i1] = ex.equilibrium.window;
    let u_ss = traj.inputs.rows(i0, i1 - i0 + 1).row_mean().transpose();
    Ok((ex.equilibrium.state(), u_ss, ex.estimate))
}

struct WindowBatch {
    x0: DMatrix<f64>,
    inputs: Vec<DMatrix<f64>>,
    targets: Vec<DMatrix<f64>>,
}

fn gather_windows(dataset: &Dataset, windows: &[(usize, usize)], k: usize) -> WindowBatch {
    let dx = dataset.state_dim();
    let du = dataset.input_dim();
    let b = windows.len();
    let traj = |w: usize| &dataset.trajectories[windows[w].0];
    let x0 = DMatrix::from_fn(dx, b, |r, c| traj(c).states[(windows[c].1, r)]);
    let inputs = (0..k).map(|s| DMatrix::from_fn(du, b, |r, c| traj(c).inputs[(windows[c].1 + s, r)])).collect();
    let targets = (1..=k).map(|s| DMatrix::from_fn(dx, b, |r, c| traj(c).states[(windows[c].1 + s, r)])).collect();
    WindowBatch { x0, inputs, targets }
}

/// Mean window MSE and its gradient. Windows whose rollout goes non-finite
/// are dropped and the rest re-run; the count of dropped windows is returned.
fn data_term(
    params: &MlpParams,
    dataset: &Dataset,
    windows: &[(usize, usize)],
    k: usize,
    h: f64,
) -> Result<(f64, Option<ParamGradient>, usize)> {
    let mut kept = windows.to_vec();
    loop {
        if kept.is_empty() {
            return Ok((f64::NAN, None, windows.len()));
        }
        let batch = gather_windows(dataset, &kept, k);
        let (preds, tape) = rollout_batch(params, &batch.x0, &batch.inputs, h, true)?;
        let bad = non_finite_columns(&preds);
        if !bad.is_empty() {
            kept = kept.into_iter().enumerate().filter(|(i, _)| !bad.contains(i)).map(|(_, w)| w).collect();
            continue;
        }
        let residuals: Vec<DMatrix<f64>> = preds.iter().zip(&batch.targets).map(|(p, t)| p - t).collect();
        let b = kept.len() as f64;
        let loss = residuals.iter().map(|r| r.norm_squared()).sum::<f64>() / (k as f64 * b);
        let grad = grad_forward_loss(params, tape.as_ref(), &residuals)?;
        return Ok((loss, Some(grad), windows.len() - kept.len()));
    }
}

/// Mean `|J_NN(x_ss, u_ss) - J_ref|_F^2` over `features`, with its gradient
/// when requested.
fn jac_term(params: &MlpParams, features: &[&LatentFeature], with_grad: bool) -> Result<(f64, Option<ParamGradient>)> {
    if features.is_empty() {
        return Ok((0.0, with_grad.then(|| ParamGradient::zeros_like(params))));
    }
    let n = features.len() as f64;
    let mut loss = 0.0;
    if with_grad {
        let mut grad = ParamGradient::zeros_like(params);
        for f in features {
            let (l, g) = params.jac_loss_and_grad(&f.x_ss, &f.u_ss, &f.j_ref)?;
            loss += l;
            grad.add_scaled(&g, 1.0 / n);
        }
        Ok((loss / n, Some(grad)))
    } else {
        for f in features {
            loss += (params.state_jacobian(&f.x_ss, &f.u_ss)? - &f.j_ref).norm_squared();
        }
        Ok((loss / n, None))
    }
}

/// Post-hoc Jacobian loss of a model on a feature set.
pub fn jacobian_loss(params: &MlpParams, features: &LatentFeatures) -> Result<f64> {
    let refs: Vec<&LatentFeature> = features.features.iter().collect();
    Ok(jac_term(params, &refs, false)?.0)
}

/// Composite loss and gradient on an explicit batch: the building block of
/// [`train`], exposed for gradient checks.
pub fn objective(
    params: &MlpParams,
    dataset: &Dataset,
    windows: &[(usize, usize)],
    features: &[&LatentFeature],
    cfg: &TrainConfig,
) -> Result<(f64, f64, ParamGradient)> {
    let h = common_dt(dataset)?;
    let (l_data, g_data, _) = data_term(params, dataset, windows, cfg.window_len, h)?;
    let (l_jac, g_jac) = jac_term(params, features, cfg.lambda2 > 0.0)?;
    let mut grad = ParamGradient::zeros_like(params);
    if let Some(g) = g_data {
        grad.add_scaled(&g, cfg.lambda1);
    }
    if let Some(g) = g_jac {
        grad.add_scaled(&g, cfg.lambda2);
    }
    Ok((l_data, l_jac, grad))
}

fn common_dt(dataset: &Dataset) -> Result<f64> {
    let first = dataset
        .trajectories
        .first()
        .ok_or_else(|| Error::InvalidParameter("dataset has no trajectories".into()))?
        .dt;
    if dataset.trajectories.iter().any(|t| (t.dt - first).abs() > 1e-12 * first) {
        return Err(Error::InvalidParameter("trajectories must share one sample period".into()));
    }
    Ok(first)
}

fn prepared(dataset: &Dataset) -> Result<Dataset> {
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("dataset has no trajectories".into()));
    }
    let ds = dataset.normalized()?;
    if ds.norm.is_none() {
        return Err(Error::InvalidParameter("normalized dataset carries no statistics".into()));
    }
    Ok(ds)
}

/// Trains the vector field in normalized space. The dataset is normalized
/// first when it is not already.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(MlpParams, TrainLog)> {
    cfg.validate()?;
    if cfg.mode == Mode::Narx {
        return Err(Error::InvalidParameter("mode narx trains with train_narx".into()));
    }
    let ds = prepared(dataset)?;
    let norm = ds.norm.clone().expect("checked in prepared");
    let h = common_dt(&ds)?;
    let latent = precompute_latent_features(&ds, cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = cfg.layer_dims(ds.state_dim(), ds.input_dim());
    let mut params = MlpParams::init(&dims, cfg.activation, cfg.seed)?.with_norm(norm)?;
    let mut adam = AdamState::new(&params);
    let mut log = TrainLog { latent_features: latent.features.len(), ..Default::default() };
    let start = Instant::now();
    let mut streak = 0;
    let with_jac_grad = cfg.lambda2 > 0.0;

    for iteration in 1..=cfg.iterations {
        let windows = sample_windows(&ds, cfg.window_len, cfg.batch_size, &mut rng)?;
        let subset: Vec<&LatentFeature> = match cfg.jac_subset {
            Some(m) if m < latent.features.len() => {
                let mut idx = sample(&mut rng, latent.features.len(), m).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| &latent.features[i]).collect()
            }
            _ => latent.features.iter().collect(),
        };
        let (l_data, g_data, skipped) = data_term(&params, &ds, &windows, cfg.window_len, h)?;
        log.skipped_windows += skipped;
        let (l_jac, g_jac) = jac_term(&params, &subset, with_jac_grad)?;
        let l_total = total_loss(l_data, l_jac, cfg.lambda1, cfg.lambda2);

        let mut grad = ParamGradient::zeros_like(&params);
        if let Some(g) = &g_data {
            grad.add_scaled(g, cfg.lambda1);
        }
        if let Some(g) = &g_jac {
            grad.add_scaled(g, cfg.lambda2);
        }
        let grad_norm = grad.norm();
        if l_total.is_finite() && g_data.is_some() && grad.is_finite() {
            adam_step(&mut params, &grad, &mut adam, cfg)?;
            streak = 0;
        } else {
            streak += 1;
        }
        log.records.push(TrainRecord {
            iteration,
            l_data,
            l_jac,
            l_total,
            grad_norm,
            wall_ms: wall_ms(cfg, start),
        });
        if streak >= MAX_NON_FINITE_STREAK {
            return Err(Error::NonConvergence(format!(
                "non-finite loss for {MAX_NON_FINITE_STREAK} consecutive iterations (last at {iteration})"
            )));
        }
    }
    let echo = serde_json::to_value(cfg).expect("config serializes");
    Ok((params.with_train_config_echo(echo), log))
}

fn wall_ms(cfg: &TrainConfig, start: Instant) -> f64 {
    if cfg.record_wall_time {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    }
}

/// A one-step map `x_{k+1} = MLP(x_k, u_k)` in normalized space, valid only
/// at the sample period it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct NarxModel {
    pub params: MlpParams,
    /// Physical sample period.
    pub dt: f64,
}

impl NarxModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_model_file(&self.params, Some(self.dt), path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match read_model_file(path)? {
            (params, Some(dt)) => Ok(Self { params, dt }),
            (_, None) => Err(Error::format(path, "file holds a vector field, not a discrete one-step model")),
        }
    }

    /// Iterates the map from `x0` (physical units) for `round(duration/dt)`
    /// samples.
    pub fn predict(&self, x0: &DVector<f64>, schedule: &InputSchedule, dt: f64, duration: f64) -> Result<Trajectory> {
        if (dt - self.dt).abs() > 1e-9 * self.dt {
            return Err(Error::DtMismatch { model_dt: self.dt, requested_dt: dt });
        }
        let n = check_horizon(&self.params, x0, schedule, dt, duration)?;
        let norm = self.params.norm();
        let mut z = norm.normalize_state(x0);
        let mut states = vec![x0.clone()];
        let mut failure = None;
        for k in 0..n - 1 {
            let u = norm.normalize_input(schedule.value_at(dt * k as f64));
            z = self.params.forward(&z, &u)?;
            if !z.iter().all(|v| v.is_finite()) {
                failure = Some(Error::NonFiniteState { step: k + 1 });
                break;
            }
            states.push(norm.denormalize_state(&z));
        }
        assemble(states, schedule, dt, failure)
    }
}

fn check_horizon(params: &MlpParams, x0: &DVector<f64>, schedule: &InputSchedule, dt: f64, duration: f64) -> Result<usize> {
    if !(dt > 0.0) || !(duration >= 2.0 * dt) {
        return Err(Error::InvalidParameter(format!("need dt > 0 and duration >= 2 dt, got {dt} and {duration}")));
    }
    if x0.len() != params.state_dim() || schedule.dim() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "model takes d_x={}, d_u={}; got x0 of {} and inputs of {}",
            params.state_dim(),
            params.input_dim(),
            x0.len(),
            schedule.dim()
        )));
    }
    Ok((duration / dt).round() as usize)
}

fn assemble(states: Vec<DVector<f64>>, schedule: &InputSchedule, dt: f64, failure: Option<Error>) -> Result<Trajectory> {
    if states.len() < 2 {
        return Err(failure.unwrap_or(Error::IntegrationFailure { t: 0.0, reason: "fewer than two samples produced".into() }));
    }
    let n = states.len();
    let dx = states[0].len();
    let du = schedule.dim();
    let s = DMatrix::from_fn(n, dx, |k, j| states[k][j]);
    let u = DMatrix::from_fn(n, du, |k, j| schedule.value_at(dt * k as f64)[j]);
    let mut traj = Trajectory::new(dt, 0.0, s, u)?;
    if let Some(e) = failure {
        traj.meta.truncated = true;
        traj.meta.failure = Some(e.to_string());
    }
    Ok(traj)
}

/// Adaptive solve of the learned field in normalized space, returned in
/// physical units sampled every `dt` for `round(duration/dt)` samples.
pub fn predict_node(
    model: &MlpParams,
    x0: &DVector<f64>,
    schedule: &InputSchedule,
    dt: f64,
    duration: f64,
    integrator: &IntegratorConfig,
) -> Result<Trajectory> {
    integrator.validate()?;
    let n = check_horizon(model, x0, schedule, dt, duration)?;
    let norm = model.norm();
    let ts = norm.time_scale;
    let normalized_schedule = InputSchedule::new(
        schedule
            .breakpoints()
            .iter()
            .map(|(t, u)| (t / ts, norm.normalize_input(u)))
            .collect(),
    )?;
    let dx = model.state_dim();
    let du = model.input_dim();
    let mut z = DVector::zeros(dx + du);
    let field = |x: &DVector<f64>, u: &DVector<f64>| {
        z.rows_mut(0, dx).copy_from(x);
        z.rows_mut(dx, du).copy_from(u);
        model.forward_unchecked(&z)
    };
    let sol = solve(field, &norm.normalize_state(x0), &normalized_schedule, 0.0, dt / ts, n, integrator);
    let states = sol.states.iter().map(|s| norm.denormalize_state(s)).collect();
    assemble(states, schedule, dt, sol.failure)
}

/// Either kind of trained model.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Node(MlpParams),
    Narx(NarxModel),
}

impl TrainedModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(match read_model_file(path.as_ref())? {
            (params, None) => TrainedModel::Node(params),
            (params, Some(dt)) => TrainedModel::Narx(NarxModel { params, dt }),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            TrainedModel::Node(p) => write_model_file(p, None, path.as_ref()),
            TrainedModel::Narx(m) => m.save(path),
        }
    }

    pub fn params(&self) -> &MlpParams {
        match self {
            TrainedModel::Node(p) => p,
            TrainedModel::Narx(m) => &m.params,
        }
    }

    pub fn predict(
        &self,
        x0: &DVector<f64>,
        schedule: &InputSchedule,
        dt: f64,
        duration: f64,
        integrator: &IntegratorConfig,
    ) -> Result<Trajectory> {
        match self {
            TrainedModel::Node(p) => predict_node(p, x0, schedule, dt, duration, integrator),
            TrainedModel::Narx(m) => m.predict(x0, schedule, dt, duration),
        }
    }
}

/// Uniform draws over every one-step pair `(trajectory, k)`, `k <= N - 2`.
fn sample_pairs<R: Rng>(dataset: &Dataset, count: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    sample_windows(dataset, 1, count, rng)
}

/// One-step MSE and its gradient on explicit pairs.
pub fn narx_objective(params: &MlpParams, dataset: &Dataset, pairs: &[(usize, usize)]) -> Result<(f64, ParamGradient)> {
    let dx = dataset.state_dim();
    let du = dataset.input_dim();
    let m = pairs.len();
    let z = DMatrix::from_fn(dx + du, m, |r, c| {
        let t = &dataset.trajectories[pairs[c].0];
        if r < dx {
            t.states[(pairs[c].1, r)]
        } else {
            t.inputs[(pairs[c].1, r - dx)]
        }
    });
    let target = DMatrix::from_fn(dx, m, |r, c| dataset.trajectories[pairs[c].0].states[(pairs[c].1 + 1, r)]);
    let (out, cache) = params.forward_batch(&z, true);
    let resid = out - target;
    let loss = resid.norm_squared() / m as f64;
    let mut grad = ParamGradient::zeros_like(params);
    params.backward_batch(&cache, &(resid * (2.0 / m as f64)), &mut grad);
    Ok((loss, grad))
}

/// Trains the discrete baseline on `batch_size * window_len` random one-step
/// pairs per iteration, with the same network shape and optimizer.
pub fn train_narx(dataset: &Dataset, cfg: &TrainConfig) -> Result<(NarxModel, TrainLog)> {
    cfg.validate()?;
    let ds = prepared(dataset)?;
    let norm = ds.norm.clone().expect("checked in prepared");
    let h = common_dt(&ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = cfg.layer_dims(ds.state_dim(), ds.input_dim());
    let mut params = MlpParams::init(&dims, cfg.activation, cfg.seed)?.with_norm(norm.clone())?;
    let mut adam = AdamState::new(&params);
    let mut log = TrainLog::default();
    let start = Instant::now();
    let mut streak = 0;
    for iteration in 1..=cfg.iterations {
        let pairs = sample_pairs(&ds, cfg.batch_size * cfg.window_len, &mut rng)?;
        let (loss, grad) = narx_objective(&params, &ds, &pairs)?;
        let l_total = total_loss(loss, 0.0, cfg.lambda1, 0.0);
        let mut scaled = ParamGradient::zeros_like(&params);
        scaled.add_scaled(&grad, cfg.lambda1);
        let grad_norm = scaled.norm();
        if l_total.is_finite() && scaled.is_finite() {
            adam_step(&mut params, &scaled, &mut adam, cfg)?;
            streak = 0;
        } else {
            streak += 1;
        }
        log.records.push(TrainRecord {
            iteration,
            l_data: loss,
            l_jac: 0.0,
            l_total,
            grad_norm,
            wall_ms: wall_ms(cfg, start),
        });
        if streak >= MAX_NON_FINITE_STREAK {
            return Err(Error::NonConvergence(format!(
                "non-finite loss for {MAX_NON_FINITE_STREAK} consecutive iterations (last at {iteration})"
            )));
        }
    }
    let echo = serde_json::to_value(TrainConfig { mode: Mode::Narx, ..cfg.clone() }).expect("config serializes");
    let model = NarxModel {
        params: params.with_train_config_echo(echo),
        dt: h * norm.time_scale,
    };
    Ok((model, log))
}
