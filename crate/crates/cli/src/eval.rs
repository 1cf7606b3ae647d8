use lfi_core::integrate::{InputSchedule, IntegratorConfig};
use lfi_core::plants::PlantModel;
use lfi_core::signals::{simulate, Trajectory};
use lfi_core::stability::{
    continuous_eigenvalues, eig_error, eigvals, map_linearize, model_linearize, plant_linearize, EigenReport,
    EigenSource,
};
use lfi_core::training::TrainedModel;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::RunConfig;

/// Results for one test input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputEval {
    pub input: Vec<f64>,
    /// RMSE of the prediction in normalized state units.
    pub trajectory_rmse: Option<f64>,
    pub samples_compared: usize,
    pub prediction_truncated: bool,
    pub true_equilibrium: Option<Vec<f64>>,
    pub model_equilibrium: Option<Vec<f64>>,
    pub analytic: Option<EigenReport>,
    pub model: Option<EigenReport>,
    pub eig_mae: Option<f64>,
    pub verdict_match: Option<bool>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub seed: u64,
    pub model_file: String,
    pub mean_trajectory_rmse: Option<f64>,
    pub mean_eig_mae: Option<f64>,
    pub inputs: Vec<InputEval>,
    pub config: RunConfig,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for e in &self.inputs {
            out.push_str(&format!(
                "input {:?}: rmse {} eig_mae {} verdict {}\n",
                e.input,
                fmt_opt(e.trajectory_rmse),
                fmt_opt(e.eig_mae),
                e.model.as_ref().map_or("n/a".to_string(), |r| format!("{:?}", r.verdict)),
            ));
        }
        out.push_str(&format!(
            "{} seed {}: mean rmse {} mean eig_mae {}",
            self.mode,
            self.seed,
            fmt_opt(self.mean_trajectory_rmse),
            fmt_opt(self.mean_eig_mae)
        ));
        out
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".to_string(), |v| format!("{v:.4e}"))
}

/// Equilibrium and eigenvalue report of a trained model at input `u`.
/// Discrete maps report the continuous equivalents `ln(mu) / dt`.
pub fn model_eigen_report(
    model: &TrainedModel,
    u: &DVector<f64>,
    x_guess: &DVector<f64>,
    margin: f64,
) -> lfi_core::Result<(DVector<f64>, EigenReport)> {
    match model {
        TrainedModel::Node(p) => {
            let (x, j) = model_linearize(p, u, x_guess)?;
            Ok((x, EigenReport::from_matrix(&j, EigenSource::ModelJnn, margin)?))
        }
        TrainedModel::Narx(m) => {
            let (x, j) = map_linearize(&m.params, u, x_guess)?;
            let eigs = continuous_eigenvalues(&eigvals(&j)?, m.dt)?;
            Ok((x, EigenReport::from_eigenvalues(eigs, EigenSource::ModelJnn, margin)?))
        }
    }
}

/// RMSE over the common prefix, each state scaled by `scale`.
pub fn normalized_rmse(truth: &Trajectory, pred: &Trajectory, scale: &DVector<f64>) -> (f64, usize) {
    let n = truth.len().min(pred.len());
    let d = truth.state_dim();
    let mut se = 0.0;
    for k in 0..n {
        for j in 0..d {
            let e = (truth.states[(k, j)] - pred.states[(k, j)]) / scale[j];
            se += e * e;
        }
    }
    ((se / (n * d).max(1) as f64).sqrt(), n)
}

/// One test input: simulate the plant and the model from `x0`, compare
/// trajectories, then linearize both near the plant's final state.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_input(
    plant: &PlantModel,
    model: &TrainedModel,
    u: &[f64],
    x0: &[f64],
    dt: f64,
    duration: f64,
    integrator: &IntegratorConfig,
    margin: f64,
) -> (InputEval, Option<Trajectory>, Option<Trajectory>) {
    let uv = DVector::from_column_slice(u);
    let x0v = DVector::from_column_slice(x0);
    let schedule = InputSchedule::constant(uv.clone());
    let mut out = InputEval {
        input: u.to_vec(),
        trajectory_rmse: None,
        samples_compared: 0,
        prediction_truncated: false,
        true_equilibrium: None,
        model_equilibrium: None,
        analytic: None,
        model: None,
        eig_mae: None,
        verdict_match: None,
        errors: Vec::new(),
    };
    let truth = match simulate(plant, &x0v, &schedule, dt, duration, integrator) {
        Ok(t) => Some(t),
        Err(e) => {
            out.errors.push(format!("plant simulation: {e}"));
            None
        }
    };
    let pred = match model.predict(&x0v, &schedule, dt, duration, integrator) {
        Ok(p) => Some(p),
        Err(e) => {
            out.errors.push(format!("model prediction: {e}"));
            None
        }
    };
    if let (Some(t), Some(p)) = (&truth, &pred) {
        let (rmse, n) = normalized_rmse(t, p, &model.params().norm().state_std);
        out.trajectory_rmse = Some(rmse);
        out.samples_compared = n;
        out.prediction_truncated = p.meta.truncated || p.len() < t.len();
    }
    let guess = truth.as_ref().map_or(x0v.clone(), |t| t.state(t.len() - 1));
    match plant_linearize(plant, &uv, &guess)
        .and_then(|(x, j)| Ok((x, EigenReport::from_matrix(&j, EigenSource::AnalyticPlant, margin)?)))
    {
        Ok((x, r)) => {
            out.true_equilibrium = Some(x.iter().copied().collect());
            out.analytic = Some(r);
        }
        Err(e) => out.errors.push(format!("plant linearization: {e}")),
    }
    match model_eigen_report(model, &uv, &guess, margin) {
        Ok((x, r)) => {
            out.model_equilibrium = Some(x.iter().copied().collect());
            out.model = Some(r);
        }
        Err(e) => out.errors.push(format!("model linearization: {e}")),
    }
    if let (Some(a), Some(m)) = (&out.analytic, &out.model) {
        let err = eig_error(&m.eigenvalues, &a.eigenvalues);
        if err.mae.is_finite() {
            out.eig_mae = Some(err.mae);
        }
        out.verdict_match = Some(a.verdict == m.verdict);
    }
    (out, truth, pred)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluates every configured test input. Trajectories are returned
/// alongside for callers that write them out.
pub fn evaluate(
    cfg: &RunConfig,
    model: &TrainedModel,
    mode: &str,
    model_file: &str,
) -> (EvalReport, Vec<(Option<Trajectory>, Option<Trajectory>)>) {
    let x0 = cfg.eval_x0();
    let mut inputs = Vec::new();
    let mut trajs = Vec::new();
    for u in &cfg.eval.inputs {
        let (e, t, p) = evaluate_input(
            &cfg.plant,
            model,
            u,
            &x0,
            cfg.eval_dt(),
            cfg.eval_duration(),
            &cfg.eval.integrator,
            cfg.eval.margin,
        );
        inputs.push(e);
        trajs.push((t, p));
    }
    let report = EvalReport {
        mode: mode.to_string(),
        seed: cfg.train.seed,
        model_file: model_file.to_string(),
        mean_trajectory_rmse: mean(inputs.iter().map(|e| e.trajectory_rmse)),
        mean_eig_mae: mean(inputs.iter().map(|e| e.eig_mae)),
        inputs,
        config: cfg.clone(),
    };
    (report, trajs)
}

/// Median of the finite values; `None` when there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// One row of the comparison table: medians over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: String,
    pub seeds: Vec<u64>,
    pub trajectory_rmse: Option<f64>,
    pub eig_mae: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub wall_time_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Evaluation files the rows were built from.
    pub sources: Vec<String>,
    pub config: RunConfig,
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,seeds,trajectory_rmse,eig_mae,final_train_loss,wall_time_ms\n");
        let f = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.mode,
                seeds.join(";"),
                f(r.trajectory_rmse),
                f(r.eig_mae),
                f(r.final_train_loss),
                f(r.wall_time_ms)
            ));
        }
        out
    }
}

/// Final `(L_total, wall_ms)` of a training log CSV.
pub fn last_log_row(text: &str) -> Option<(f64, f64)> {
    let line = text.lines().skip(1).filter(|l| !l.trim().is_empty()).last()?;
    let cols: Vec<&str> = line.split(',').collect();
    Some((cols.get(3)?.parse().ok()?, cols.get(5)?.parse().ok()?))
}
