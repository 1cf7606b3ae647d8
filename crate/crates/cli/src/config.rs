use std::path::{Path, PathBuf};

use lfi_core::integrate::IntegratorConfig;
use lfi_core::plants::{GfmDroopParams, PlantModel};
use lfi_core::signals::{DataSpec, GridPoint};
use lfi_core::stability::DEFAULT_MARGIN;
use lfi_core::training::{Mode, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Everything a run needs: plant, data protocol, training, evaluation and
/// output locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plant: PlantModel,
    pub data: DataSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub paths: Paths,
}

/// Input sweep: a Cartesian box or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridSpec {
    /// `counts[i]` evenly spaced values per input over `[lower[i], upper[i]]`,
    /// first input outermost. Every point starts from `x0`.
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
        counts: Vec<usize>,
        x0: Vec<f64>,
    },
    Points { points: Vec<GridPoint> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub grid: GridSpec,
    pub dt: f64,
    pub duration: f64,
    pub sigma_x: f64,
    pub cutoff_hz: Option<f64>,
    pub downsample: usize,
    pub seed: u64,
    pub integrator: IntegratorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub inputs: Vec<Vec<f64>>,
    pub margin: f64,
    /// Initial state of every test run; `None` uses the grid's first `x0`.
    pub x0: Option<Vec<f64>>,
    /// `None` uses `data.duration`.
    pub duration: Option<f64>,
    /// Sample period of the comparison; `None` uses the dataset's.
    pub dt: Option<f64>,
    pub integrator: IntegratorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub run_dir: PathBuf,
    /// `None` uses `<run_dir>/dataset`.
    pub dataset_dir: Option<PathBuf>,
    /// `None` uses `<run_dir>/model_<mode>_seed<seed>.json`.
    pub model_file: Option<PathBuf>,
    /// `None` uses `run_dir`.
    pub report_dir: Option<PathBuf>,
}

fn droop_params() -> GfmDroopParams {
    GfmDroopParams {
        omega_base: 2.0 * std::f64::consts::PI * 50.0,
        ..GfmDroopParams::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            plant: PlantModel::gfm_droop(droop_params()).expect("default plant is valid"),
            data: DataSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            paths: Paths::default(),
        }
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        let x0 = droop_params().stable_equilibrium(1.0, 1.0).expect("nominal point is stable");
        GridSpec::Box {
            lower: vec![0.5, 0.95],
            upper: vec![1.2, 1.1],
            counts: vec![8, 6],
            x0: x0.to_vec(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            dt: 2e-5,
            duration: 1.0,
            sigma_x: 0.0,
            cutoff_hz: Some(500.0),
            downsample: 10,
            seed: 1,
            integrator: IntegratorConfig::default(),
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            inputs: vec![vec![0.85, 0.97], vec![1.05, 1.03]],
            margin: DEFAULT_MARGIN,
            x0: None,
            duration: None,
            dt: None,
            integrator: IntegratorConfig::default(),
        }
    }
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("run"),
            dataset_dir: None,
            model_file: None,
            report_dir: None,
        }
    }
}

impl GridSpec {
    pub fn points(&self) -> Vec<GridPoint> {
        match self {
            GridSpec::Points { points } => points.clone(),
            GridSpec::Box { lower, upper, counts, x0 } => {
                let mut out: Vec<Vec<f64>> = vec![Vec::new()];
                for ((&lo, &hi), &n) in lower.iter().zip(upper).zip(counts) {
                    let values: Vec<f64> = (0..n)
                        .map(|k| if n == 1 { lo } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 })
                        .collect();
                    out = out
                        .into_iter()
                        .flat_map(|prefix| {
                            values.iter().map(move |&v| {
                                let mut p = prefix.clone();
                                p.push(v);
                                p
                            })
                        })
                        .collect();
                }
                out.into_iter().map(|input| GridPoint { input, x0: x0.clone() }).collect()
            }
        }
    }
}

impl DataSection {
    pub fn spec(&self) -> DataSpec {
        DataSpec {
            dt: self.dt,
            duration: self.duration,
            sigma_x: self.sigma_x,
            cutoff_hz: self.cutoff_hz,
            downsample: self.downsample,
            seed: self.seed,
            integrator: self.integrator,
        }
    }

    /// Sample period after downsampling.
    pub fn sample_dt(&self) -> f64 {
        self.dt * self.downsample as f64
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{name}: {msg}"))
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field(name, format!("must be finite and > 0, got {v}")))
    }
}

fn check_len(name: &str, v: &[f64], n: usize) -> Result<(), CliError> {
    if v.len() != n {
        return Err(field(name, format!("expected {n} values, got {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(field(name, "values must be finite"));
    }
    Ok(())
}

impl RunConfig {
    /// Default config, optionally replaced by a file, then patched with
    /// `key.path=value` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => serde_json::to_value(RunConfig::default()).expect("config serializes"),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let dx = self.plant.state_dim();
        let du = self.plant.input_dim();
        let d = &self.data;
        match &d.grid {
            GridSpec::Box { lower, upper, counts, x0 } => {
                check_len("data.grid.lower", lower, du)?;
                check_len("data.grid.upper", upper, du)?;
                if counts.len() != du {
                    return Err(field("data.grid.counts", format!("expected {du} values, got {}", counts.len())));
                }
                if counts.contains(&0) {
                    return Err(field("data.grid", "grid has 0 points"));
                }
                if lower.iter().zip(upper).any(|(l, u)| l > u) {
                    return Err(field("data.grid", "lower must not exceed upper"));
                }
                check_len("data.grid.x0", x0, dx)?;
            }
            GridSpec::Points { points } => {
                if points.is_empty() {
                    return Err(field("data.grid", "grid has 0 points"));
                }
                for (i, p) in points.iter().enumerate() {
                    check_len(&format!("data.grid.points[{i}].input"), &p.input, du)?;
                    check_len(&format!("data.grid.points[{i}].x0"), &p.x0, dx)?;
                }
            }
        }
        positive("data.dt", d.dt)?;
        positive("data.duration", d.duration)?;
        if d.duration < 2.0 * d.dt {
            return Err(field("data.duration", "must cover at least two samples"));
        }
        if !(d.sigma_x >= 0.0 && d.sigma_x.is_finite()) {
            return Err(field("data.sigma_x", format!("must be finite and >= 0, got {}", d.sigma_x)));
        }
        if let Some(c) = d.cutoff_hz {
            let nyquist = 0.5 / d.dt;
            if !(c > 0.0 && c < nyquist) {
                return Err(field("data.cutoff_hz", format!("must lie in (0, {nyquist}), got {c}")));
            }
        }
        if d.downsample == 0 {
            return Err(field("data.downsample", "must be >= 1"));
        }
        d.integrator.validate().map_err(|e| field("data.integrator", e))?;
        self.train.validate().map_err(|e| field("train", e))?;

        let e = &self.eval;
        if e.inputs.is_empty() {
            return Err(field("eval.inputs", "at least one test input is required"));
        }
        for (i, u) in e.inputs.iter().enumerate() {
            check_len(&format!("eval.inputs[{i}]"), u, du)?;
        }
        if !(e.margin >= 0.0 && e.margin.is_finite()) {
            return Err(field("eval.margin", format!("must be finite and >= 0, got {}", e.margin)));
        }
        if let Some(x0) = &e.x0 {
            check_len("eval.x0", x0, dx)?;
        }
        if let Some(v) = e.duration {
            positive("eval.duration", v)?;
        }
        if let Some(v) = e.dt {
            positive("eval.dt", v)?;
        }
        e.integrator.validate().map_err(|er| field("eval.integrator", er))?;
        if self.paths.run_dir.as_os_str().is_empty() {
            return Err(field("paths.run_dir", "must not be empty"));
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.paths.dataset_dir.clone().unwrap_or_else(|| self.paths.run_dir.join("dataset"))
    }

    fn tag(&self, mode: Mode) -> String {
        format!("{}_seed{}", mode.as_str(), self.train.seed)
    }

    pub fn model_file(&self, mode: Mode) -> PathBuf {
        self.paths
            .model_file
            .clone()
            .unwrap_or_else(|| self.paths.run_dir.join(format!("model_{}.json", self.tag(mode))))
    }

    pub fn log_file(&self, mode: Mode) -> PathBuf {
        self.paths.run_dir.join(format!("train_{}.csv", self.tag(mode)))
    }

    pub fn eval_dir(&self, mode: Mode) -> PathBuf {
        self.paths.run_dir.join(format!("eval_{}", self.tag(mode)))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.paths.report_dir.clone().unwrap_or_else(|| self.paths.run_dir.clone())
    }

    /// Training settings for `mode`: the configured values with the mode
    /// applied, and `lambda2 = 0` for vanilla.
    pub fn train_for(&self, mode: Mode) -> TrainConfig {
        let mut t = self.train.clone();
        t.mode = mode;
        if mode == Mode::Vanilla {
            t.lambda2 = 0.0;
        }
        t
    }

    pub fn eval_x0(&self) -> Vec<f64> {
        if let Some(x0) = &self.eval.x0 {
            return x0.clone();
        }
        match &self.data.grid {
            GridSpec::Box { x0, .. } => x0.clone(),
            GridSpec::Points { points } => points[0].x0.clone(),
        }
    }

    pub fn eval_duration(&self) -> f64 {
        self.eval.duration.unwrap_or(self.data.duration)
    }

    pub fn eval_dt(&self) -> f64 {
        self.eval.dt.unwrap_or_else(|| self.data.sample_dt())
    }
}

/// Sets `a.b.c=value` in a JSON tree. The value is parsed as JSON and falls
/// back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let Some((key, raw)) = assignment.split_once('=') else {
        return Err(CliError::Config(format!("override `{assignment}` is not of the form key.path=value")));
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::Config(format!("override key `{key}` has an empty segment")));
        }
        let Value::Object(map) = node else {
            return Err(CliError::Config(format!("{}: not an object", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one segment")
}
