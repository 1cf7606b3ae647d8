use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use lfi_core::jacest::{derivative_noise_level, error_bound, extract, EquilibriumEstimate, JacobianEstimate};
use lfi_core::signals::{generate_dataset, read_dataset, read_trajectory_csv, write_dataset, write_trajectory_csv, zero_phase_lowpass};
use lfi_core::training::{train, train_narx, Mode, TrainLog, TrainedModel};
use serde::{Deserialize, Serialize};

use crate::eval::{evaluate, last_log_row, median, EvalReport, Report, ReportRow};
use crate::{CliError, RunConfig};

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerateSummary {
    pub dir: PathBuf,
    pub trajectories: usize,
    pub truncated: Vec<usize>,
    pub failed: usize,
}

impl fmt::Display for GenerateSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "wrote {} trajectories to {}", self.trajectories, self.dir.display())?;
        if !self.truncated.is_empty() {
            write!(f, "; truncated: {:?}", self.truncated)?;
        }
        if self.failed > 0 {
            write!(f, "; {} grid points failed (see manifest.json)", self.failed)?;
        }
        Ok(())
    }
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateSummary, CliError> {
    let grid = cfg.data.grid.points();
    let dataset = generate_dataset(&cfg.plant, &grid, &cfg.data.spec()).map_err(|e| CliError::from_core(e, CliError::Config))?;
    let dir = cfg.dataset_dir();
    write_dataset(&dataset, &dir).map_err(|e| CliError::from_core(e, CliError::Io))?;
    let truncated = dataset
        .trajectories
        .iter()
        .enumerate()
        .filter(|(_, t)| t.meta.truncated)
        .map(|(i, _)| i)
        .collect();
    let failed = dataset.manifest.get("failures").and_then(|v| v.as_array()).map_or(0, Vec::len);
    Ok(GenerateSummary {
        dir,
        trajectories: dataset.len(),
        truncated,
        failed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub mode: Mode,
    pub model_file: PathBuf,
    pub log_file: PathBuf,
    pub log: TrainLog,
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(r) = self.log.final_record() {
            writeln!(
                f,
                "{}: iteration {} L_data {:.4e} L_jac {:.4e} L_total {:.4e}",
                self.mode.as_str(),
                r.iteration,
                r.l_data,
                r.l_jac,
                r.l_total
            )?;
        }
        write!(
            f,
            "latent features {}, skipped windows {}\nmodel {}\nlog {}",
            self.log.latent_features,
            self.log.skipped_windows,
            self.model_file.display(),
            self.log_file.display()
        )
    }
}

/// Trains `mode` on an in-memory dataset with the config's settings.
pub fn train_model(
    cfg: &RunConfig,
    mode: Mode,
    dataset: &lfi_core::signals::Dataset,
) -> Result<(TrainedModel, TrainLog), CliError> {
    let tc = cfg.train_for(mode);
    let result = match mode {
        Mode::Narx => train_narx(dataset, &tc).map(|(m, log)| (TrainedModel::Narx(m), log)),
        _ => train(dataset, &tc).map(|(p, log)| (TrainedModel::Node(p), log)),
    };
    result.map_err(|e| CliError::from_core(e, CliError::Training))
}

pub fn cmd_train(cfg: &RunConfig, mode: Mode) -> Result<TrainSummary, CliError> {
    let dataset = read_dataset(cfg.dataset_dir()).map_err(|e| CliError::from_core(e, CliError::Io))?;
    let (model, log) = train_model(cfg, mode, &dataset)?;
    create_dir(&cfg.paths.run_dir)?;
    let model_file = cfg.model_file(mode);
    let log_file = cfg.log_file(mode);
    model.save(&model_file).map_err(|e| CliError::from_core(e, CliError::Io))?;
    write_text(&log_file, &log.to_csv())?;
    Ok(TrainSummary {
        mode,
        model_file,
        log_file,
        log,
    })
}

pub fn cmd_eval(cfg: &RunConfig, mode: Mode, model_file: Option<&Path>) -> Result<EvalReport, CliError> {
    let path = model_file.map_or_else(|| cfg.model_file(mode), Path::to_path_buf);
    if !path.is_file() {
        return Err(io_err(&path, "model file not found"));
    }
    let model = TrainedModel::load(&path).map_err(|e| CliError::from_core(e, CliError::Io))?;
    let (report, trajs) = evaluate(cfg, &model, mode.as_str(), &path.display().to_string());
    let dir = cfg.eval_dir(mode);
    create_dir(&dir)?;
    for (i, (truth, pred)) in trajs.iter().enumerate() {
        for (traj, tag) in [(truth, "true"), (pred, "pred")] {
            if let Some(t) = traj {
                write_trajectory_csv(t, dir.join(format!("input_{i}_{tag}.csv")))
                    .map_err(|e| CliError::from_core(e, CliError::Io))?;
            }
        }
    }
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&dir.join("eval.json"), &format!("{text}\n"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianOutput {
    pub trajectory: String,
    pub filter_cutoff_hz: Option<f64>,
    pub equilibrium: EquilibriumEstimate,
    pub estimate: JacobianEstimate,
    pub eps_used: f64,
}

fn extract_file(cfg: &RunConfig, path: &Path, cutoff_hz: Option<f64>) -> Result<(lfi_core::jacest::Extraction, f64), CliError> {
    let mut traj = read_trajectory_csv(path).map_err(|e| CliError::from_core(e, CliError::Io))?;
    if let Some(c) = cutoff_hz {
        traj = zero_phase_lowpass(&traj, c).map_err(|e| CliError::from_core(e, CliError::Estimation))?;
    }
    let ex = extract(&traj, None, &cfg.train.extraction).map_err(|e| CliError::from_core(e, CliError::Estimation))?;
    Ok((ex, traj.dt))
}

pub fn cmd_jacobian(cfg: &RunConfig, path: &Path, cutoff_hz: Option<f64>) -> Result<JacobianOutput, CliError> {
    if let Some(c) = cutoff_hz {
        if !(c > 0.0 && c.is_finite()) {
            return Err(CliError::Config(format!("--cutoff must be > 0, got {c}")));
        }
    }
    let (ex, _) = extract_file(cfg, path, cutoff_hz)?;
    Ok(JacobianOutput {
        trajectory: path.display().to_string(),
        filter_cutoff_hz: cutoff_hz,
        equilibrium: ex.equilibrium,
        estimate: ex.estimate,
        eps_used: ex.eps_used,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundOutput {
    pub trajectory: String,
    pub sigma_x: f64,
    pub sigma_xdot: f64,
    pub dt: f64,
    pub jstar_norm: f64,
    /// `given`, or `j_ref_spectral_norm` when the reference estimate stands in.
    pub jstar_source: String,
    pub cond: f64,
    #[serde(rename = "deltaX_norm")]
    pub delta_x_norm: f64,
    pub n_samples: usize,
    pub bound: f64,
}

pub fn cmd_bound(cfg: &RunConfig, path: &Path, sigma_x: f64, jstar_norm: Option<f64>) -> Result<BoundOutput, CliError> {
    if !(sigma_x >= 0.0 && sigma_x.is_finite()) {
        return Err(CliError::Config(format!("--sigma-x must be finite and >= 0, got {sigma_x}")));
    }
    if let Some(j) = jstar_norm {
        if !(j >= 0.0 && j.is_finite()) {
            return Err(CliError::Config(format!("--jstar-norm must be finite and >= 0, got {j}")));
        }
    }
    let (ex, dt) = extract_file(cfg, path, None)?;
    let est = ex.estimate;
    let (jstar, source) = match jstar_norm {
        Some(j) => (j, "given"),
        None => (est.j_ref.clone().svd(false, false).singular_values.max(), "j_ref_spectral_norm"),
    };
    let sigma_xdot = derivative_noise_level(sigma_x, dt).map_err(|e| CliError::from_core(e, CliError::Estimation))?;
    let b = error_bound(&est, sigma_x, sigma_xdot, jstar).map_err(|e| CliError::from_core(e, CliError::Estimation))?;
    Ok(BoundOutput {
        trajectory: path.display().to_string(),
        sigma_x,
        sigma_xdot,
        dt,
        jstar_norm: jstar,
        jstar_source: source.into(),
        cond: est.cond,
        delta_x_norm: est.delta_x_norm,
        n_samples: est.n_samples,
        bound: b.bound,
    })
}

fn mode_rank(mode: &str) -> usize {
    ["lfi", "vanilla", "narx"].iter().position(|m| *m == mode).unwrap_or(3)
}

pub fn cmd_report(cfg: &RunConfig) -> Result<Report, CliError> {
    let run_dir = &cfg.paths.run_dir;
    let mut dirs: Vec<PathBuf> = match fs::read_dir(run_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("eval_"))
                    && p.join("eval.json").is_file()
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    if dirs.is_empty() {
        return Err(CliError::Config(format!("no eval results found in {}", run_dir.display())));
    }
    dirs.sort();
    let mut evals = Vec::new();
    for d in &dirs {
        let path = d.join("eval.json");
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let report: EvalReport = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
        let log = run_dir.join(format!("train_{}_seed{}.csv", report.mode, report.seed));
        let tail = fs::read_to_string(&log).ok().and_then(|t| last_log_row(&t));
        evals.push((path, report, tail));
    }
    let mut modes: Vec<String> = evals.iter().map(|(_, r, _)| r.mode.clone()).collect();
    modes.sort_by_key(|m| (mode_rank(m), m.clone()));
    modes.dedup();
    let rows = modes
        .into_iter()
        .map(|mode| {
            let mine: Vec<_> = evals.iter().filter(|(_, r, _)| r.mode == mode).collect();
            let collect = |f: &dyn Fn(&(PathBuf, EvalReport, Option<(f64, f64)>)) -> Option<f64>| {
                median(&mine.iter().filter_map(|e| f(e)).collect::<Vec<_>>())
            };
            ReportRow {
                seeds: mine.iter().map(|(_, r, _)| r.seed).collect(),
                trajectory_rmse: collect(&|e| e.1.mean_trajectory_rmse),
                eig_mae: collect(&|e| e.1.mean_eig_mae),
                final_train_loss: collect(&|e| e.2.map(|t| t.0)),
                wall_time_ms: collect(&|e| e.2.map(|t| t.1)),
                mode,
            }
        })
        .collect();
    let report = Report {
        rows,
        sources: evals.iter().map(|(p, _, _)| p.display().to_string()).collect(),
        config: cfg.clone(),
    };
    let out = cfg.report_dir();
    write_text(&out.join("report.csv"), &report.to_csv())?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&out.join("report.json"), &format!("{text}\n"))?;
    Ok(report)
}
