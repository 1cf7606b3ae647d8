//! Ground-truth synthetic plants with closed-form vector fields, Jacobians and
//! equilibria. They generate training data and act as oracles for everything
//! downstream.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_STEPS: usize = 50;

/// Linear time-invariant plant `dx/dt = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Reduced grid-forming droop inverter behind a coupling reactance.
///
/// State `[delta, p_filt]`, input `[v_grid, omega_grid]`, all per-unit:
///
/// ```text
/// d(delta)/dt  = omega_base * (omega_set + m (p_ref - p_filt) - omega_grid)
/// d(p_filt)/dt = ((e * v_grid / x) sin(delta) - p_filt) / t
/// ```
///
/// `omega_base` converts the per-unit frequency mismatch into an angle rate.
/// With the default of 1 the angle equation is written directly in per-unit
/// time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GfmDroopParams {
    pub e: f64,
    pub x: f64,
    pub m: f64,
    pub t: f64,
    pub omega_set: f64,
    pub p_ref: f64,
    #[serde(default = "default_omega_base")]
    pub omega_base: f64,
}

fn default_omega_base() -> f64 {
    1.0
}

impl Default for GfmDroopParams {
    fn default() -> Self {
        Self {
            e: 1.0,
            x: 0.3,
            m: 0.05,
            t: 0.02,
            omega_set: 1.0,
            p_ref: 0.5,
            omega_base: 1.0,
        }
    }
}

impl GfmDroopParams {
    /// Maximum transferable power `E V / X` at grid voltage `v_grid`.
    pub fn pull_out_power(&self, v_grid: f64) -> f64 {
        self.e * v_grid / self.x
    }

    /// Filtered power required for frequency balance at `omega_grid`.
    pub fn required_power(&self, omega_grid: f64) -> f64 {
        self.p_ref + (self.omega_set - omega_grid) / self.m
    }

    /// Closed-form stable equilibrium (the branch with `cos(delta) > 0`), or
    /// `None` beyond pull-out.
    pub fn stable_equilibrium(&self, v_grid: f64, omega_grid: f64) -> Option<[f64; 2]> {
        let p = self.required_power(omega_grid);
        let s = p / self.pull_out_power(v_grid);
        if !(-1.0..=1.0).contains(&s) {
            return None;
        }
        Some([s.asin(), p])
    }
}

/// Which closed-form dynamics a [`PlantModel`] carries.
#[derive(Debug, Clone, PartialEq)]
pub enum PlantKind {
    Linear(LinearParams),
    /// Van der Pol oscillator with additive forcing on the second state.
    VanDerPol { mu: f64 },
    GfmDroop(GfmDroopParams),
}

/// A validated, immutable ground-truth plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlantSpec", into = "PlantSpec")]
pub struct PlantModel {
    kind: PlantKind,
}

/// Serialized form of a plant: a kind name plus its parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantSpec {
    Linear { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
    VanDerPol { mu: f64 },
    GfmDroop(GfmDroopParams),
}

impl TryFrom<PlantSpec> for PlantModel {
    type Error = Error;

    fn try_from(spec: PlantSpec) -> Result<Self> {
        match spec {
            PlantSpec::Linear { a, b } => {
                let a = rows_to_matrix(&a, "plant.a")?;
                let n = a.nrows();
                let b = if b.is_empty() || b.iter().all(|r| r.is_empty()) {
                    DMatrix::zeros(n, 0)
                } else {
                    rows_to_matrix(&b, "plant.b")?
                };
                PlantModel::linear(a, b)
            }
            PlantSpec::VanDerPol { mu } => PlantModel::van_der_pol(mu),
            PlantSpec::GfmDroop(p) => PlantModel::gfm_droop(p),
        }
    }
}

impl From<PlantModel> for PlantSpec {
    fn from(model: PlantModel) -> Self {
        match model.kind {
            PlantKind::Linear(p) => PlantSpec::Linear {
                a: matrix_to_rows(&p.a),
                b: matrix_to_rows(&p.b),
            },
            PlantKind::VanDerPol { mu } => PlantSpec::VanDerPol { mu },
            PlantKind::GfmDroop(p) => PlantSpec::GfmDroop(p),
        }
    }
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(Error::Dimension(format!("{what} is empty")));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!(
            "{what} row {bad} has {} columns, expected {ncols}",
            rows[bad].len()
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} must be finite")))
    }
}

impl PlantModel {
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::Dimension(format!(
                "B has {} rows, A has {}",
                b.nrows(),
                a.nrows()
            )));
        }
        check_finite(a.as_slice(), "A")?;
        check_finite(b.as_slice(), "B")?;
        Ok(Self {
            kind: PlantKind::Linear(LinearParams { a, b }),
        })
    }

    pub fn van_der_pol(mu: f64) -> Result<Self> {
        check_finite(&[mu], "mu")?;
        Ok(Self {
            kind: PlantKind::VanDerPol { mu },
        })
    }

    pub fn gfm_droop(p: GfmDroopParams) -> Result<Self> {
        check_finite(
            &[p.e, p.x, p.m, p.t, p.omega_set, p.p_ref, p.omega_base],
            "GfmDroop parameters",
        )?;
        for (name, v) in [("E", p.e), ("X", p.x), ("m", p.m), ("T", p.t), ("omega_base", p.omega_base)] {
            if v <= 0.0 {
                return Err(Error::InvalidParameter(format!("GfmDroop {name} must be > 0, got {v}")));
            }
        }
        Ok(Self {
            kind: PlantKind::GfmDroop(p),
        })
    }

    pub fn kind(&self) -> &PlantKind {
        &self.kind
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            PlantKind::Linear(_) => "linear",
            PlantKind::VanDerPol { .. } => "van_der_pol",
            PlantKind::GfmDroop(_) => "gfm_droop",
        }
    }

    pub fn state_dim(&self) -> usize {
        match &self.kind {
            PlantKind::Linear(p) => p.a.nrows(),
            PlantKind::VanDerPol { .. } | PlantKind::GfmDroop(_) => 2,
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.kind {
            PlantKind::Linear(p) => p.b.ncols(),
            PlantKind::VanDerPol { .. } => 1,
            PlantKind::GfmDroop(_) => 2,
        }
    }

    fn check_dims(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim() || u.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "{} plant expects x in R^{} and u in R^{}, got R^{} and R^{}",
                self.kind_name(),
                self.state_dim(),
                self.input_dim(),
                x.len(),
                u.len()
            )));
        }
        Ok(())
    }

    /// Evaluates the vector field `f(x, u)`.
    pub fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(x, u)?;
        Ok(self.derivative_unchecked(x, u))
    }

    pub(crate) fn derivative_unchecked(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            PlantKind::Linear(p) => {
                let mut dx = &p.a * x;
                if p.b.ncols() > 0 {
                    dx += &p.b * u;
                }
                dx
            }
            PlantKind::VanDerPol { mu } => DVector::from_vec(vec![
                x[1],
                mu * (1.0 - x[0] * x[0]) * x[1] - x[0] + u[0],
            ]),
            PlantKind::GfmDroop(p) => {
                let (delta, p_filt) = (x[0], x[1]);
                let (v_grid, omega_grid) = (u[0], u[1]);
                DVector::from_vec(vec![
                    p.omega_base * (p.omega_set + p.m * (p.p_ref - p_filt) - omega_grid),
                    (p.e * v_grid / p.x * delta.sin() - p_filt) / p.t,
                ])
            }
        }
    }

    /// Exact `df/dx`.
    pub fn analytic_state_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_dims(x, u)?;
        Ok(self.state_jacobian_unchecked(x, u))
    }

    pub(crate) fn state_jacobian_unchecked(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match &self.kind {
            PlantKind::Linear(p) => p.a.clone(),
            PlantKind::VanDerPol { mu } => DMatrix::from_row_slice(
                2,
                2,
                &[0.0, 1.0, -2.0 * mu * x[0] * x[1] - 1.0, mu * (1.0 - x[0] * x[0])],
            ),
            PlantKind::GfmDroop(p) => DMatrix::from_row_slice(
                2,
                2,
                &[
                    0.0,
                    -p.omega_base * p.m,
                    p.e * u[0] * x[0].cos() / (p.x * p.t),
                    -1.0 / p.t,
                ],
            ),
        }
    }

    /// Exact `df/du`.
    pub fn analytic_input_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_dims(x, u)?;
        Ok(match &self.kind {
            PlantKind::Linear(p) => p.b.clone(),
            PlantKind::VanDerPol { .. } => DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            PlantKind::GfmDroop(p) => DMatrix::from_row_slice(
                2,
                2,
                &[0.0, -p.omega_base, p.e * x[0].sin() / (p.x * p.t), 0.0],
            ),
        })
    }

    /// Newton iteration on `f(x, u) = 0` from `x_guess`.
    pub fn find_equilibrium(&self, u: &DVector<f64>, x_guess: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(x_guess, u)?;
        check_finite(x_guess.as_slice(), "equilibrium guess")?;
        let mut x = x_guess.clone();
        for _ in 0..=NEWTON_MAX_STEPS {
            let f = self.derivative_unchecked(&x, u);
            if !f.iter().all(|v| v.is_finite()) {
                break;
            }
            if f.norm() <= NEWTON_TOL {
                return Ok(x);
            }
            let jac = self.state_jacobian_unchecked(&x, u);
            let Some(step) = jac.lu().solve(&f) else {
                return Err(Error::NoEquilibrium(format!(
                    "singular Jacobian at x = {:?}",
                    x.as_slice()
                )));
            };
            x -= step;
        }
        Err(Error::NoEquilibrium(format!(
            "Newton did not reach |f| <= {NEWTON_TOL:e} within {NEWTON_MAX_STEPS} steps for u = {:?}",
            u.as_slice()
        )))
    }
}
