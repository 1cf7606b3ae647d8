//! Reference Jacobians from a single settling transient: locate the
//! operating point, collect nearby samples, and solve the deviation
//! least-squares problem with a pseudoinverse.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plants::{matrix_to_rows, rows_to_matrix};
use crate::signals::{finite_diff, Trajectory};

/// Default relative truncation for small singular values.
pub const PINV_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumEstimate {
    pub x_ss: Vec<f64>,
    /// Inclusive sample range of the steady window.
    pub window: [usize; 2],
    pub residual: f64,
}

impl EquilibriumEstimate {
    pub fn state(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x_ss)
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.window[0]..=self.window[1]).contains(&i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "JacobianEstimateRepr", into = "JacobianEstimateRepr")]
pub struct JacobianEstimate {
    pub j_ref: DMatrix<f64>,
    pub n_samples: usize,
    pub cond: f64,
    pub delta_x_norm: f64,
    pub lsq_residual: f64,
}

#[derive(Serialize, Deserialize)]
struct JacobianEstimateRepr {
    #[serde(rename = "J_ref")]
    j_ref: Vec<Vec<f64>>,
    n_samples: usize,
    cond: f64,
    #[serde(rename = "deltaX_norm")]
    delta_x_norm: f64,
    lsq_residual: f64,
}

impl TryFrom<JacobianEstimateRepr> for JacobianEstimate {
    type Error = Error;

    fn try_from(r: JacobianEstimateRepr) -> Result<Self> {
        let j_ref = rows_to_matrix(&r.j_ref, "J_ref")?;
        if j_ref.nrows() != j_ref.ncols() {
            return Err(Error::Dimension(format!("J_ref must be square, got {}x{}", j_ref.nrows(), j_ref.ncols())));
        }
        Ok(Self {
            j_ref,
            n_samples: r.n_samples,
            cond: r.cond,
            delta_x_norm: r.delta_x_norm,
            lsq_residual: r.lsq_residual,
        })
    }
}

impl From<JacobianEstimate> for JacobianEstimateRepr {
    fn from(e: JacobianEstimate) -> Self {
        Self {
            j_ref: matrix_to_rows(&e.j_ref),
            n_samples: e.n_samples,
            cond: e.cond,
            delta_x_norm: e.delta_x_norm,
            lsq_residual: e.lsq_residual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseBound {
    pub sigma_x: f64,
    pub sigma_xdot: f64,
    pub jstar_norm: f64,
    pub bound: f64,
}

/// Slides a `window_len` window over the derivative norms and returns the
/// quietest one. Ties go to the later window.
pub fn detect_equilibrium(traj: &Trajectory, window_len: usize) -> Result<EquilibriumEstimate> {
    let derivs = finite_diff(traj)?;
    detect_equilibrium_with(traj, &derivs, window_len)
}

/// As [`detect_equilibrium`] with caller-supplied derivatives (`N x d_x`).
pub fn detect_equilibrium_with(traj: &Trajectory, derivs: &DMatrix<f64>, window_len: usize) -> Result<EquilibriumEstimate> {
    let n = traj.len();
    check_derivs(traj, derivs)?;
    if window_len < 2 || window_len > n {
        return Err(Error::TooShort(format!("window of {window_len} samples on a trajectory of {n}")));
    }
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for k in 0..n {
        prefix.push(prefix[k] + derivs.row(k).norm());
    }
    let mut best = (f64::INFINITY, 0);
    for i0 in 0..=n - window_len {
        let mean = (prefix[i0 + window_len] - prefix[i0]) / window_len as f64;
        if mean <= best.0 {
            best = (mean, i0);
        }
    }
    let (residual, i0) = best;
    let i1 = i0 + window_len - 1;
    let x_ss = traj.states.rows(i0, window_len).row_mean().transpose();
    Ok(EquilibriumEstimate {
        x_ss: x_ss.as_slice().to_vec(),
        window: [i0, i1],
        residual: residual.max(0.0),
    })
}

/// RMS distance of the steady-window samples from `x_ss`; a noise floor
/// for the neighbor annulus.
pub fn steady_spread(traj: &Trajectory, eq: &EquilibriumEstimate) -> f64 {
    let x_ss = eq.state();
    let [i0, i1] = eq.window;
    let sum: f64 = (i0..=i1).map(|i| (traj.state(i) - &x_ss).norm_squared()).sum();
    (sum / (i1 - i0 + 1) as f64).sqrt()
}

/// Samples in the annulus `eps_min <= |x_i - x_ss| <= r_max` outside the
/// steady window, most recent first, at most `n_max` of them.
pub fn select_neighbors(
    traj: &Trajectory,
    eq: &EquilibriumEstimate,
    eps_min: f64,
    r_max: f64,
    n_max: usize,
) -> Result<Vec<usize>> {
    if !(eps_min >= 0.0 && eps_min < r_max) {
        return Err(Error::InvalidParameter(format!("need 0 <= eps_min < r_max, got {eps_min} and {r_max}")));
    }
    if eq.x_ss.len() != traj.state_dim() {
        return Err(Error::Dimension(format!("equilibrium has {} states, trajectory {}", eq.x_ss.len(), traj.state_dim())));
    }
    let x_ss = eq.state();
    let picked: Vec<usize> = (0..traj.len())
        .rev()
        .filter(|&i| !eq.contains(i))
        .filter(|&i| {
            let r = (traj.state(i) - &x_ss).norm();
            r >= eps_min && r <= r_max
        })
        .take(n_max)
        .collect();
    if picked.len() < traj.state_dim() {
        return Err(Error::InsufficientSamples { found: picked.len(), needed: traj.state_dim() });
    }
    Ok(picked)
}

/// Moore-Penrose pseudoinverse; singular values at or below
/// `rel_tol * sigma_max` are dropped.
pub fn pseudo_inverse(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    if m.is_empty() {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let svd = m.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    if s_max <= 0.0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let cut = rel_tol * s_max;
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cut {
            out += v_t.row(i).transpose() * u.column(i).transpose() / s;
        }
    }
    out
}

/// Fits `J_ref` from finite-difference derivatives of `traj`.
pub fn estimate_jacobian(traj: &Trajectory, eq: &EquilibriumEstimate, indices: &[usize]) -> Result<JacobianEstimate> {
    let derivs = finite_diff(traj)?;
    estimate_jacobian_with(traj, &derivs, eq, indices)
}

/// Fits `J_ref` from caller-supplied derivatives (`N x d_x`). The result
/// does not depend on the order of `indices`.
pub fn estimate_jacobian_with(
    traj: &Trajectory,
    derivs: &DMatrix<f64>,
    eq: &EquilibriumEstimate,
    indices: &[usize],
) -> Result<JacobianEstimate> {
    check_derivs(traj, derivs)?;
    let d = traj.state_dim();
    if eq.x_ss.len() != d {
        return Err(Error::Dimension(format!("equilibrium has {} states, trajectory {d}", eq.x_ss.len())));
    }
    if indices.len() < d {
        return Err(Error::InsufficientSamples { found: indices.len(), needed: d });
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= traj.len()) {
        return Err(Error::Dimension(format!("sample index {bad} out of range for {} samples", traj.len())));
    }
    let mut idx = indices.to_vec();
    idx.sort_unstable();

    let x_ss = eq.state();
    let n = idx.len();
    let dx = DMatrix::from_fn(d, n, |r, c| traj.states[(idx[c], r)] - x_ss[r]);
    // Equilibrium derivative is zero by definition.
    let dxdot = DMatrix::from_fn(d, n, |r, c| derivs[(idx[c], r)]);

    let sv = dx.singular_values();
    let s_max = sv.max();
    let s_min = sv.min();
    if !(s_max > 0.0) || s_min <= PINV_REL_TOL * s_max {
        return Err(Error::RankDeficient { cond: f64::INFINITY });
    }
    let j_ref = &dxdot * pseudo_inverse(&dx, PINV_REL_TOL);
    let lsq_residual = (&dxdot - &j_ref * &dx).norm();
    Ok(JacobianEstimate {
        j_ref,
        n_samples: n,
        cond: s_max / s_min,
        delta_x_norm: s_max,
        lsq_residual,
    })
}

/// `kappa * (sqrt(N) * sigma_xdot / |dX| + sqrt(N) * sigma_x * |J*| / |dX|)`.
pub fn error_bound(est: &JacobianEstimate, sigma_x: f64, sigma_xdot: f64, jstar_norm: f64) -> Result<NoiseBound> {
    for (name, v) in [("sigma_x", sigma_x), ("sigma_xdot", sigma_xdot), ("jstar_norm", jstar_norm)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    if !est.cond.is_finite() || !(est.delta_x_norm > 0.0) {
        return Err(Error::Unbounded);
    }
    let root_n = (est.n_samples as f64).sqrt();
    let bound = est.cond * (root_n * sigma_xdot / est.delta_x_norm + root_n * sigma_x * jstar_norm / est.delta_x_norm);
    Ok(NoiseBound { sigma_x, sigma_xdot, jstar_norm, bound })
}

/// Standard deviation of a central difference of i.i.d. noise.
pub fn derivative_noise_level(sigma_x: f64, dt: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
    }
    if !(sigma_x >= 0.0) {
        return Err(Error::InvalidParameter(format!("sigma_x must be >= 0, got {sigma_x}")));
    }
    Ok(sigma_x * std::f64::consts::SQRT_2 / (2.0 * dt))
}

/// Settings for the full extraction on one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    /// Steady-window length; `None` uses a twentieth of the trajectory.
    pub window_len: Option<usize>,
    pub eps_min: f64,
    pub r_max: f64,
    pub n_max: usize,
    /// The annulus inner radius is raised to this multiple of the
    /// steady-window spread so noise-only samples stay out.
    pub noise_floor: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            window_len: None,
            eps_min: 1e-6,
            r_max: 0.2,
            n_max: 200,
            noise_floor: 100.0,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self.window_len {
            if w < 2 {
                return Err(Error::InvalidParameter(format!("window_len must be >= 2, got {w}")));
            }
        }
        if !(self.eps_min >= 0.0 && self.eps_min < self.r_max) {
            return Err(Error::InvalidParameter(format!(
                "need 0 <= eps_min < r_max, got {} and {}",
                self.eps_min, self.r_max
            )));
        }
        if self.n_max == 0 {
            return Err(Error::InvalidParameter("n_max must be >= 1".into()));
        }
        if !(self.noise_floor >= 0.0) {
            return Err(Error::InvalidParameter(format!("noise_floor must be >= 0, got {}", self.noise_floor)));
        }
        Ok(())
    }

    pub fn window_for(&self, n: usize) -> usize {
        self.window_len.unwrap_or(n / 20).clamp(2, n.max(2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub equilibrium: EquilibriumEstimate,
    pub estimate: JacobianEstimate,
    /// Inner annulus radius actually used.
    pub eps_used: f64,
}

/// Equilibrium, neighbors and `J_ref` in one pass. `derivs` defaults to
/// central differences of the states.
pub fn extract(traj: &Trajectory, derivs: Option<&DMatrix<f64>>, cfg: &ExtractionConfig) -> Result<Extraction> {
    cfg.validate()?;
    let owned;
    let derivs = match derivs {
        Some(d) => d,
        None => {
            owned = finite_diff(traj)?;
            &owned
        }
    };
    let equilibrium = detect_equilibrium_with(traj, derivs, cfg.window_for(traj.len()))?;
    let eps_used = cfg.eps_min.max(cfg.noise_floor * steady_spread(traj, &equilibrium));
    if eps_used >= cfg.r_max {
        return Err(Error::InsufficientSamples { found: 0, needed: traj.state_dim() });
    }
    let indices = select_neighbors(traj, &equilibrium, eps_used, cfg.r_max, cfg.n_max)?;
    let estimate = estimate_jacobian_with(traj, derivs, &equilibrium, &indices)?;
    Ok(Extraction { equilibrium, estimate, eps_used })
}

fn check_derivs(traj: &Trajectory, derivs: &DMatrix<f64>) -> Result<()> {
    if derivs.shape() != traj.states.shape() {
        return Err(Error::Dimension(format!(
            "derivatives are {}x{}, states {}x{}",
            derivs.nrows(),
            derivs.ncols(),
            traj.len(),
            traj.state_dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::integrate::{InputSchedule, IntegratorConfig};
    use crate::plants::{GfmDroopParams, PlantModel};
    use crate::signals::simulate;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn linear_a() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -3.0])
    }

    fn linear_traj(dt: f64, duration: f64) -> (PlantModel, Trajectory) {
        let plant = PlantModel::linear(linear_a(), DMatrix::zeros(2, 1)).unwrap();
        let traj = simulate(&plant, &v(&[1.0, 0.5]), &InputSchedule::constant(v(&[0.0])), dt, duration, &IntegratorConfig::default()).unwrap();
        (plant, traj)
    }

    fn exact_derivs(plant: &PlantModel, traj: &Trajectory) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(traj.len(), traj.state_dim());
        for k in 0..traj.len() {
            let f = plant.derivative(&traj.state(k), &traj.input(k)).unwrap();
            d.row_mut(k).copy_from(&f.transpose());
        }
        d
    }

    fn constant_traj() -> Trajectory {
        Trajectory::new(0.01, 0.0, DMatrix::from_element(100, 2, 0.3), DMatrix::zeros(100, 1)).unwrap()
    }

    #[test]
    fn constant_trajectory_is_its_own_equilibrium() {
        let traj = constant_traj();
        let eq = detect_equilibrium(&traj, 10).unwrap();
        assert!(eq.x_ss.iter().all(|x| (x - 0.3).abs() <= 1e-15));
        assert_eq!(eq.residual, 0.0);
        assert!(eq.window[0] < eq.window[1]);
        assert!(matches!(detect_equilibrium(&traj, 1), Err(Error::TooShort(_))));
        assert!(matches!(detect_equilibrium(&traj, 101), Err(Error::TooShort(_))));
        assert!(matches!(
            select_neighbors(&traj, &eq, 1e-6, 0.1, 50),
            Err(Error::InsufficientSamples { found: 0, needed: 2 })
        ));
    }

    #[test]
    fn linear_decay_settles_at_origin() {
        let (_, traj) = linear_traj(0.01, 20.0);
        let eq = detect_equilibrium(&traj, traj.len() / 20).unwrap();
        assert!(eq.state().norm() <= 1e-4);
        assert_eq!(eq.window[1], traj.len() - 1);
    }

    #[test]
    fn gfm_droop_equilibrium_is_found() {
        let p = GfmDroopParams { omega_base: 2.0 * std::f64::consts::PI * 50.0, ..Default::default() };
        let plant = PlantModel::gfm_droop(p).unwrap();
        let traj = simulate(&plant, &v(&[0.3, 0.7]), &InputSchedule::constant(v(&[1.0, 1.0])), 2e-4, 1.0, &IntegratorConfig::default()).unwrap();
        let eq = detect_equilibrium(&traj, traj.len() / 20).unwrap();
        assert!((eq.state() - v(&[0.150_568_272_776_686, 0.5])).norm() <= 1e-3);
    }

    #[test]
    fn neighbors_respect_band_order_and_cap() {
        let (_, traj) = linear_traj(0.01, 20.0);
        let eq = detect_equilibrium(&traj, traj.len() / 20).unwrap();
        let idx = select_neighbors(&traj, &eq, 1e-6, 0.1, usize::MAX).unwrap();
        assert!(!idx.is_empty());
        assert!(idx.windows(2).all(|w| w[0] > w[1]));
        for &i in &idx {
            let r = (traj.state(i) - eq.state()).norm();
            assert!((1e-6..=0.1).contains(&r));
            assert!(!eq.contains(i));
        }
        let capped = select_neighbors(&traj, &eq, 1e-6, 0.1, 50).unwrap();
        assert_eq!(capped, idx[..50]);
        assert!(select_neighbors(&traj, &eq, 0.2, 0.1, 50).is_err());
    }

    #[test]
    fn pseudo_inverse_examples() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert_eq!(pseudo_inverse(&i3, PINV_REL_TOL), i3);
        let d = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        assert_eq!(pseudo_inverse(&d, PINV_REL_TOL), DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]));
        assert_eq!(pseudo_inverse(&DMatrix::zeros(2, 3), PINV_REL_TOL), DMatrix::zeros(3, 2));
    }

    proptest! {
        #[test]
        fn penrose_identities(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
            let p = pseudo_inverse(&m, PINV_REL_TOL);
            prop_assert!((&m * &p * &m - &m).amax() <= 1e-9);
            prop_assert!((&p * &m * &p - &p).amax() <= 1e-8);
            let mp = &m * &p;
            let pm = &p * &m;
            prop_assert!((&mp - mp.transpose()).amax() <= 1e-8);
            prop_assert!((&pm - pm.transpose()).amax() <= 1e-8);
        }

        #[test]
        fn estimate_ignores_index_order(seed in 0u64..100) {
            let (_, traj) = linear_traj(0.05, 10.0);
            let eq = detect_equilibrium(&traj, 10).unwrap();
            let mut idx = select_neighbors(&traj, &eq, 1e-6, 1.0, 60).unwrap();
            let a = estimate_jacobian(&traj, &eq, &idx).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            prop_assert_eq!(estimate_jacobian(&traj, &eq, &idx).unwrap(), a);
        }
    }

    #[test]
    fn linear_plant_with_exact_derivatives_is_recovered() {
        let (plant, traj) = linear_traj(0.01, 30.0);
        let derivs = exact_derivs(&plant, &traj);
        // The whole transient: the late tail alone lies along the slow mode.
        let cfg = ExtractionConfig { r_max: 2.0, n_max: usize::MAX, ..Default::default() };
        let ex = extract(&traj, Some(&derivs), &cfg).unwrap();
        let a = linear_a();
        assert!((&ex.estimate.j_ref - &a).norm() <= 1e-6 * a.norm());
        assert!(ex.estimate.cond >= 1.0);
        assert!(ex.estimate.n_samples >= 2);
    }

    #[test]
    fn gfm_droop_reference_jacobian_matches_analytic() {
        let p = GfmDroopParams { omega_base: 2.0 * std::f64::consts::PI * 50.0, ..Default::default() };
        let plant = PlantModel::gfm_droop(p).unwrap();
        let u = v(&[1.0, 1.0]);
        let traj = simulate(&plant, &v(&[0.3, 0.7]), &InputSchedule::constant(u.clone()), 2e-4, 1.0, &IntegratorConfig::default()).unwrap();
        let ex = extract(&traj, None, &ExtractionConfig::default()).unwrap();
        let j_star = plant.analytic_state_jacobian(&v(&[0.150_568_272_776_686, 0.5]), &u).unwrap();
        let rel = (&ex.estimate.j_ref - &j_star).norm() / j_star.norm();
        assert!(rel <= 0.05, "relative error {rel}");
    }

    #[test]
    fn one_direction_is_rank_deficient() {
        let n = 50;
        let states = DMatrix::from_fn(n, 2, |k, j| (1.0 + j as f64) * (-(k as f64) * 0.1).exp());
        let traj = Trajectory::new(0.1, 0.0, states, DMatrix::zeros(n, 0)).unwrap();
        let eq = EquilibriumEstimate { x_ss: vec![0.0, 0.0], window: [n - 2, n - 1], residual: 0.0 };
        let idx: Vec<usize> = (0..40).collect();
        assert!(matches!(estimate_jacobian(&traj, &eq, &idx), Err(Error::RankDeficient { .. })));
        assert!(matches!(estimate_jacobian(&traj, &eq, &[3]), Err(Error::InsufficientSamples { .. })));
    }

    fn est(cond: f64, norm: f64, n: usize) -> JacobianEstimate {
        JacobianEstimate { j_ref: DMatrix::zeros(2, 2), n_samples: n, cond, delta_x_norm: norm, lsq_residual: 0.0 }
    }

    #[test]
    fn bound_examples() {
        assert_eq!(error_bound(&est(5.0, 1.0, 100), 0.0, 0.0, 3.0).unwrap().bound, 0.0);
        let b = error_bound(&est(5.0, 1.0, 100), 1e-4, 2e-2, 3.0).unwrap();
        assert_abs_diff_eq!(b.bound, 1.015, epsilon = 1e-12);
        let b2 = error_bound(&est(5.0, 1.0, 200), 1e-4, 2e-2, 3.0).unwrap();
        assert_abs_diff_eq!(b2.bound / b.bound, std::f64::consts::SQRT_2, epsilon = 1e-12);
        assert!(matches!(error_bound(&est(f64::INFINITY, 1.0, 100), 1e-4, 0.0, 1.0), Err(Error::Unbounded)));
        assert!(error_bound(&est(5.0, 1.0, 100), -1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn derivative_noise_examples() {
        assert_eq!(derivative_noise_level(0.0, 1e-3).unwrap(), 0.0);
        assert_abs_diff_eq!(derivative_noise_level(1e-4, 2e-4).unwrap(), 0.353_553_390_593_273_8, epsilon = 1e-12);
        let a = derivative_noise_level(1e-4, 2e-4).unwrap();
        assert_abs_diff_eq!(derivative_noise_level(1e-4, 1e-4).unwrap(), 2.0 * a, epsilon = 1e-12);
        assert!(derivative_noise_level(1e-4, 0.0).is_err());
    }

    #[test]
    fn central_difference_noise_level_matches_simulation() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1e-3).unwrap();
        let eta: Vec<f64> = (0..200_002).map(|_| normal.sample(&mut rng)).collect();
        let dt = 1e-3;
        let d: Vec<f64> = eta.windows(3).map(|w| (w[2] - w[0]) / (2.0 * dt)).collect();
        let std = (d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64).sqrt();
        let predicted = derivative_noise_level(1e-3, dt).unwrap();
        assert!((std / predicted - 1.0).abs() < 0.02);
    }

    #[test]
    fn bound_holds_under_noise() {
        use crate::signals::add_noise;
        let (_, clean) = linear_traj(0.01, 10.0);
        let a = linear_a();
        let a_norm = a.clone().svd(false, false).singular_values[0];
        for seed in 0..20 {
            let noisy = add_noise(&clean, 5e-4, seed).unwrap();
            let derivs = finite_diff(&noisy).unwrap();
            let eq = detect_equilibrium_with(&noisy, &derivs, 50).unwrap();
            let idx = select_neighbors(&noisy, &eq, 1e-2, 1.2, 200).unwrap();
            let e = estimate_jacobian_with(&noisy, &derivs, &eq, &idx).unwrap();
            let (mut sx, mut sxd) = (0.0f64, 0.0f64);
            for &i in &idx {
                // True equilibrium is the origin.
                let eta = noisy.state(i) - eq.state() - clean.state(i);
                let eta_dot = derivs.row(i).transpose() - &a * clean.state(i);
                sx = sx.max(eta.norm());
                sxd = sxd.max(eta_dot.norm());
            }
            let b = error_bound(&e, sx, sxd, a_norm).unwrap();
            let err = (&e.j_ref - &a).svd(false, false).singular_values[0];
            assert!(err <= b.bound, "seed {seed}: {err} > {}", b.bound);
        }
    }

    #[test]
    fn serializes_with_row_major_matrix() {
        let e = JacobianEstimate {
            j_ref: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            n_samples: 10,
            cond: 2.5,
            delta_x_norm: 0.1,
            lsq_residual: 1e-3,
        };
        let json = serde_json::to_value(&e).unwrap();
        assert_eq!(json["J_ref"], serde_json::json!([[1.0, 2.0], [3.0, 4.0]]));
        assert_eq!(json["deltaX_norm"], 0.1);
        let back: JacobianEstimate = serde_json::from_value(json).unwrap();
        assert_eq!(back, e);
        let nb = NoiseBound { sigma_x: 1e-4, sigma_xdot: 0.35, jstar_norm: 3.0, bound: 1.0 };
        assert_eq!(serde_json::from_str::<NoiseBound>(&serde_json::to_string(&nb).unwrap()).unwrap(), nb);
    }
}
