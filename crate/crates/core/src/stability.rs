//! Linearization, eigenvalues and stability verdicts.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralfield::MlpParams;
use crate::plants::PlantModel;

pub const DEFAULT_MARGIN: f64 = 1e-6;
const MAX_ITS_PER_EIGENVALUE: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Stable,
    Unstable,
    Marginal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EigenSource {
    AnalyticPlant,
    DataJref,
    ModelJnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenReport {
    pub eigenvalues: Vec<Complex64>,
    pub max_real: f64,
    pub verdict: Verdict,
    pub source: EigenSource,
}

impl EigenReport {
    pub fn from_matrix(m: &DMatrix<f64>, source: EigenSource, margin: f64) -> Result<Self> {
        Self::from_eigenvalues(eigvals(m)?, source, margin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigError {
    /// Matched `(estimate, reference)` pairs.
    pub pairs: Vec<(Complex64, Complex64)>,
    pub mae: f64,
    pub unmatched_estimated: Vec<Complex64>,
    pub unmatched_reference: Vec<Complex64>,
}

/// All eigenvalues of a real square matrix, sorted by descending real part
/// then descending imaginary part.
pub fn eigvals(m: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n {
        return Err(Error::Dimension(format!("eigvals needs a non-empty square matrix, got {}x{}", m.nrows(), m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("matrix has non-finite entries".into()));
    }
    let mut a = m.clone();
    balance(&mut a);
    hessenberg(&mut a);
    let mut eigs = hqr(&mut a)?;
    eigs.sort_by(|x, y| y.re.total_cmp(&x.re).then(y.im.total_cmp(&x.im)));
    Ok(eigs)
}

/// Diagonal similarity scaling by powers of two so row and column norms
/// are comparable.
fn balance(a: &mut DMatrix<f64>) {
    const RADIX: f64 = 2.0;
    let n = a.nrows();
    let mut done = false;
    while !done {
        done = true;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[(j, i)].abs();
                    r += a[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / RADIX;
            while c < g {
                f *= RADIX;
                c *= RADIX * RADIX;
            }
            g = r * RADIX;
            while c > g {
                f /= RADIX;
                c /= RADIX * RADIX;
            }
            if (c + r) / f < 0.95 * s {
                done = false;
                for j in 0..n {
                    a[(i, j)] /= f;
                }
                for j in 0..n {
                    a[(j, i)] *= f;
                }
            }
        }
    }
}

/// Householder reduction to upper Hessenberg form, in place.
fn hessenberg(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for k in 0..n.saturating_sub(2) {
        let alpha_norm = (k + 1..n).map(|i| a[(i, k)] * a[(i, k)]).sum::<f64>().sqrt();
        if alpha_norm == 0.0 {
            continue;
        }
        let alpha = if a[(k + 1, k)] > 0.0 { -alpha_norm } else { alpha_norm };
        let mut v: Vec<f64> = (k + 1..n).map(|i| a[(i, k)]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // A <- H A with H = I - 2 v v^T / |v|^2 acting on rows k+1..n.
        for j in 0..n {
            let dot: f64 = v.iter().enumerate().map(|(t, vi)| vi * a[(k + 1 + t, j)]).sum();
            let f = 2.0 * dot / vnorm2;
            for (t, vi) in v.iter().enumerate() {
                a[(k + 1 + t, j)] -= f * vi;
            }
        }
        // A <- A H on columns k+1..n.
        for i in 0..n {
            let dot: f64 = v.iter().enumerate().map(|(t, vi)| vi * a[(i, k + 1 + t)]).sum();
            let f = 2.0 * dot / vnorm2;
            for (t, vi) in v.iter().enumerate() {
                a[(i, k + 1 + t)] -= f * vi;
            }
        }
        for i in k + 2..n {
            a[(i, k)] = 0.0;
        }
    }
}

fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix (eigenvalues only).
fn hqr(h: &mut DMatrix<f64>) -> Result<Vec<Complex64>> {
    let n = h.nrows() as isize;
    let mut wr = vec![0.0; n as usize];
    let mut wi = vec![0.0; n as usize];
    macro_rules! a {
        ($i:expr, $j:expr) => {
            h[(($i) as usize, ($j) as usize)]
        };
    }
    let mut anorm = 0.0;
    for i in 0..n {
        for j in (i - 1).max(0)..n {
            anorm += a!(i, j).abs();
        }
    }
    let mut total_its = 0usize;
    let mut nn = n - 1;
    let mut t = 0.0;
    let (mut p, mut q, mut r) = (0.0f64, 0.0f64, 0.0f64);
    let (mut s, mut w, mut x, mut y, mut z): (f64, f64, f64, f64, f64);
    while nn >= 0 {
        let mut its = 0usize;
        loop {
            let mut l = nn;
            while l > 0 {
                s = a!(l - 1, l - 1).abs() + a!(l, l).abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a!(l, l - 1).abs() <= f64::EPSILON * s {
                    a!(l, l - 1) = 0.0;
                    break;
                }
                l -= 1;
            }
            x = a!(nn, nn);
            if l == nn {
                wr[nn as usize] = x + t;
                wi[nn as usize] = 0.0;
                nn -= 1;
            } else {
                y = a!(nn - 1, nn - 1);
                w = a!(nn, nn - 1) * a!(nn - 1, nn);
                if l == nn - 1 {
                    p = 0.5 * (y - x);
                    q = p * p + w;
                    z = q.abs().sqrt();
                    x += t;
                    let (i0, i1) = ((nn - 1) as usize, nn as usize);
                    if q >= 0.0 {
                        z = p + sign(z, p);
                        wr[i0] = x + z;
                        wr[i1] = x + z;
                        if z != 0.0 {
                            wr[i1] = x - w / z;
                        }
                        wi[i0] = 0.0;
                        wi[i1] = 0.0;
                    } else {
                        wr[i0] = x + p;
                        wr[i1] = x + p;
                        wi[i0] = z;
                        wi[i1] = -z;
                    }
                    nn -= 2;
                } else {
                    if its == MAX_ITS_PER_EIGENVALUE {
                        return Err(Error::ConvergenceFailure { iterations: total_its });
                    }
                    if its == 10 || its == 20 {
                        // Exceptional shift.
                        t += x;
                        for i in 0..=nn {
                            a!(i, i) -= x;
                        }
                        s = a!(nn, nn - 1).abs() + a!(nn - 1, nn - 2).abs();
                        x = 0.75 * s;
                        y = x;
                        w = -0.4375 * s * s;
                    }
                    its += 1;
                    total_its += 1;
                    let mut m = nn - 2;
                    while m >= l {
                        z = a!(m, m);
                        r = x - z;
                        s = y - z;
                        p = (r * s - w) / a!(m + 1, m) + a!(m, m + 1);
                        q = a!(m + 1, m + 1) - z - r - s;
                        r = a!(m + 2, m + 1);
                        s = p.abs() + q.abs() + r.abs();
                        p /= s;
                        q /= s;
                        r /= s;
                        if m == l {
                            break;
                        }
                        let u = a!(m, m - 1).abs() * (q.abs() + r.abs());
                        let v = p.abs() * (a!(m - 1, m - 1).abs() + z.abs() + a!(m + 1, m + 1).abs());
                        if u <= f64::EPSILON * v {
                            break;
                        }
                        m -= 1;
                    }
                    for i in m..nn - 1 {
                        a!(i + 2, i) = 0.0;
                        if i != m {
                            a!(i + 2, i - 1) = 0.0;
                        }
                    }
                    let mut k = m;
                    while k < nn {
                        if k != m {
                            p = a!(k, k - 1);
                            q = a!(k + 1, k - 1);
                            r = 0.0;
                            if k + 1 != nn {
                                r = a!(k + 2, k - 1);
                            }
                            x = p.abs() + q.abs() + r.abs();
                            if x != 0.0 {
                                p /= x;
                                q /= x;
                                r /= x;
                            }
                        }
                        s = sign((p * p + q * q + r * r).sqrt(), p);
                        if s != 0.0 {
                            if k == m {
                                if l != m {
                                    a!(k, k - 1) = -a!(k, k - 1);
                                }
                            } else {
                                a!(k, k - 1) = -s * x;
                            }
                            p += s;
                            x = p / s;
                            y = q / s;
                            z = r / s;
                            q /= p;
                            r /= p;
                            for j in k..=nn {
                                p = a!(k, j) + q * a!(k + 1, j);
                                if k + 1 != nn {
                                    p += r * a!(k + 2, j);
                                    a!(k + 2, j) -= p * z;
                                }
                                a!(k + 1, j) -= p * y;
                                a!(k, j) -= p * x;
                            }
                            let mmin = nn.min(k + 3);
                            for i in l..=mmin {
                                p = x * a!(i, k) + y * a!(i, k + 1);
                                if k + 1 != nn {
                                    p += z * a!(i, k + 2);
                                    a!(i, k + 2) -= p * r;
                                }
                                a!(i, k + 1) -= p * q;
                                a!(i, k) -= p;
                            }
                        }
                        k += 1;
                    }
                }
            }
            if nn < 0 || l >= nn - 1 {
                break;
            }
        }
    }
    Ok(wr.into_iter().zip(wi).map(|(re, im)| Complex64::new(re, im)).collect())
}

/// Stable if every real part is below `-margin`, unstable if any exceeds
/// `+margin`, marginal otherwise.
pub fn classify(eigs: &[Complex64], margin: f64) -> Result<Verdict> {
    if eigs.is_empty() {
        return Err(Error::InvalidParameter("no eigenvalues to classify".into()));
    }
    if !(margin >= 0.0) {
        return Err(Error::InvalidParameter(format!("margin must be >= 0, got {margin}")));
    }
    let max_real = eigs.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    Ok(if max_real < -margin {
        Verdict::Stable
    } else if max_real > margin {
        Verdict::Unstable
    } else {
        Verdict::Marginal
    })
}

/// Optimal assignment between the two sets on `|est - ref|`. With unequal
/// sizes the smaller set is matched in full and the rest is listed apart.
pub fn eig_error(estimated: &[Complex64], reference: &[Complex64]) -> EigError {
    let swap = estimated.len() > reference.len();
    let (rows, cols) = if swap { (reference, estimated) } else { (estimated, reference) };
    let cost: Vec<Vec<f64>> = rows.iter().map(|a| cols.iter().map(|b| (a - b).norm()).collect()).collect();
    let assignment = hungarian(&cost, cols.len());
    let mut used = vec![false; cols.len()];
    let mut pairs = Vec::with_capacity(rows.len());
    for (i, &j) in assignment.iter().enumerate() {
        used[j] = true;
        pairs.push(if swap { (cols[j], rows[i]) } else { (rows[i], cols[j]) });
    }
    let leftover: Vec<Complex64> = cols.iter().zip(&used).filter(|(_, u)| !**u).map(|(c, _)| *c).collect();
    let mae = if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().map(|(a, b)| (a - b).norm()).sum::<f64>() / pairs.len() as f64
    };
    let (unmatched_estimated, unmatched_reference) = if swap { (leftover, Vec::new()) } else { (Vec::new(), leftover) };
    EigError { pairs, mae, unmatched_estimated, unmatched_reference }
}

/// Minimum-cost assignment of each row to a distinct column
/// (`rows <= cols`), by shortest augmenting paths with potentials.
fn hungarian(cost: &[Vec<f64>], m: usize) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays; index 0 is the virtual start column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITERS: usize = 100;

fn check_model_point(model: &MlpParams, u: &DVector<f64>, x: &DVector<f64>) -> Result<()> {
    if u.len() != model.input_dim() || x.len() != model.state_dim() {
        return Err(Error::Dimension(format!(
            "model takes d_x={}, d_u={}; got x of {} and u of {}",
            model.state_dim(),
            model.input_dim(),
            x.len(),
            u.len()
        )));
    }
    Ok(())
}

/// Damped Newton on `g(z) = 0` where `g` returns the residual and its
/// Jacobian.
fn newton<G>(mut z: DVector<f64>, mut g: G, what: &str) -> Result<DVector<f64>>
where
    G: FnMut(&DVector<f64>, bool) -> Result<(DVector<f64>, Option<DMatrix<f64>>)>,
{
    let mut f = g(&z, false)?.0;
    let mut converged = f.norm() <= NEWTON_TOL;
    for _ in 0..NEWTON_MAX_ITERS {
        if converged {
            break;
        }
        let j = g(&z, true)?.1.expect("jacobian requested");
        let Some(step) = j.lu().solve(&(-&f)) else {
            return Err(Error::NoEquilibrium(format!("singular Jacobian during Newton on the {what}")));
        };
        // Backtracking keeps the residual decreasing.
        let f0 = f.norm();
        let mut alpha = 1.0;
        loop {
            let z_try = &z + &step * alpha;
            let f_try = g(&z_try, false)?.0;
            if f_try.norm() < f0 || alpha < 1e-4 {
                z = z_try;
                f = f_try;
                break;
            }
            alpha *= 0.5;
        }
        converged = f.norm() <= NEWTON_TOL;
        if !z.iter().all(|v| v.is_finite()) {
            break;
        }
    }
    if !converged {
        return Err(Error::NoEquilibrium(format!("Newton on the {what} stalled at residual {:.3e}", f.norm())));
    }
    Ok(z)
}

/// Equilibrium of the learned field near `x_guess` and the physical-units
/// Jacobian there. Inputs and outputs are in physical units; the Newton
/// solve runs in normalized space.
pub fn model_linearize(model: &MlpParams, u: &DVector<f64>, x_guess: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_model_point(model, u, x_guess)?;
    let norm = model.norm();
    let un = norm.normalize_input(u);
    let z = newton(
        norm.normalize_state(x_guess),
        |z, jac| Ok((model.forward(z, &un)?, if jac { Some(model.state_jacobian(z, &un)?) } else { None })),
        "learned field",
    )?;
    let j = model.state_jacobian(&z, &un)?;
    Ok((norm.denormalize_state(&z), norm.denormalize_jacobian(&j)))
}

/// Fixed point `x = F(x, u)` of a one-step map near `x_guess` and the
/// physical-units Jacobian `dF/dx` there.
pub fn map_linearize(map: &MlpParams, u: &DVector<f64>, x_guess: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_model_point(map, u, x_guess)?;
    let norm = map.norm();
    let un = norm.normalize_input(u);
    let eye = DMatrix::<f64>::identity(map.state_dim(), map.state_dim());
    let z = newton(
        norm.normalize_state(x_guess),
        |z, jac| {
            let r = map.forward(z, &un)? - z;
            let j = if jac { Some(map.state_jacobian(z, &un)? - &eye) } else { None };
            Ok((r, j))
        },
        "one-step map",
    )?;
    let jn = map.state_jacobian(&z, &un)?;
    let s = &norm.state_std;
    let j = DMatrix::from_fn(jn.nrows(), jn.ncols(), |r, c| jn[(r, c)] * s[r] / s[c]);
    Ok((norm.denormalize_state(&z), j))
}

/// Continuous-time equivalents `ln(mu) / dt` of discrete eigenvalues `mu`,
/// sorted like [`eigvals`]. A zero eigenvalue maps to negative infinity.
pub fn continuous_eigenvalues(discrete: &[Complex64], dt: f64) -> Result<Vec<Complex64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
    }
    let mut out: Vec<Complex64> = discrete.iter().map(|mu| mu.ln() / dt).collect();
    out.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    Ok(out)
}

impl EigenReport {
    /// Report for eigenvalues computed elsewhere.
    pub fn from_eigenvalues(eigenvalues: Vec<Complex64>, source: EigenSource, margin: f64) -> Result<Self> {
        let max_real = eigenvalues.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            verdict: classify(&eigenvalues, margin)?,
            eigenvalues,
            max_real,
            source,
        })
    }
}

/// Analytic counterpart of [`model_linearize`].
pub fn plant_linearize(plant: &PlantModel, u: &DVector<f64>, x_guess: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let x_ss = plant.find_equilibrium(u, x_guess)?;
    let j = plant.analytic_state_jacobian(&x_ss, u)?;
    Ok((x_ss, j))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::neuralfield::Activation;
    use crate::plants::GfmDroopParams;
    use crate::signals::NormStats;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn m(rows: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, data.len() / rows, data)
    }

    /// Characteristic polynomial coefficients, highest degree first, by
    /// Faddeev-LeVerrier.
    fn char_poly(a: &DMatrix<f64>) -> Vec<f64> {
        let n = a.nrows();
        let mut coeffs = vec![1.0];
        let mut mk = DMatrix::<f64>::zeros(n, n);
        let id = DMatrix::<f64>::identity(n, n);
        for k in 1..=n {
            mk = a * &mk + &id * coeffs[k - 1];
            let ck = -(a * &mk).trace() / k as f64;
            coeffs.push(ck);
        }
        coeffs
    }

    /// Aberth-Ehrlich simultaneous root iteration.
    fn poly_roots(coeffs: &[f64]) -> Vec<Complex64> {
        let n = coeffs.len() - 1;
        let eval = |z: Complex64| {
            let mut p = c(0.0, 0.0);
            let mut dp = c(0.0, 0.0);
            for &a in coeffs {
                dp = dp * z + p;
                p = p * z + a;
            }
            (p, dp)
        };
        let radius = 1.0 + coeffs[1..].iter().map(|a| a.abs()).fold(0.0, f64::max);
        let mut z: Vec<Complex64> =
            (0..n).map(|k| Complex64::from_polar(0.5 * radius, 2.0 * std::f64::consts::PI * k as f64 / n as f64 + 0.4)).collect();
        for _ in 0..500 {
            let mut moved = 0.0f64;
            for i in 0..n {
                let (p, dp) = eval(z[i]);
                if p.norm() == 0.0 {
                    continue;
                }
                let ratio = p / dp;
                let sum: Complex64 = (0..n).filter(|&j| j != i).map(|j| 1.0 / (z[i] - z[j])).sum();
                let step = ratio / (1.0 - ratio * sum);
                z[i] -= step;
                moved = moved.max(step.norm());
            }
            if moved < 1e-15 {
                break;
            }
        }
        z
    }

    #[test]
    fn diagonal_and_companion_examples() {
        let e = eigvals(&DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 2.0, 3.0]))).unwrap();
        assert_eq!(e, vec![c(3.0, 0.0), c(2.0, 0.0), c(1.0, 0.0)]);
        let e = eigvals(&m(2, &[0.0, 1.0, -2.0, -3.0])).unwrap();
        assert_abs_diff_eq!(e[0].re, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e[1].re, -2.0, epsilon = 1e-12);
        assert!(e.iter().all(|l| l.im == 0.0));
        let e = eigvals(&m(1, &[-4.5])).unwrap();
        assert_eq!(e, vec![c(-4.5, 0.0)]);
    }

    #[test]
    fn gfm_droop_operating_point_example() {
        let e = eigvals(&m(2, &[0.0, -0.05, 164.77, -50.0])).unwrap();
        // Roots of l^2 + 50 l + 8.2385.
        let disc = (2500.0f64 - 4.0 * 8.2385).sqrt();
        assert_abs_diff_eq!(e[0].re, (-50.0 + disc) / 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(e[1].re, (-50.0 - disc) / 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(e[0].re, -0.1655, epsilon = 5e-4);
        assert_abs_diff_eq!(e[1].re, -49.835, epsilon = 1e-3);
    }

    #[test]
    fn rotation_has_imaginary_pair() {
        let e = eigvals(&m(2, &[0.0, -2.0, 2.0, 0.0])).unwrap();
        assert_eq!(e.len(), 2);
        assert_abs_diff_eq!(e[0].re, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(e[0].im, 2.0, epsilon = 1e-14);
        assert_eq!(e[1], e[0].conj());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(eigvals(&DMatrix::zeros(0, 0)).is_err());
        assert!(eigvals(&DMatrix::zeros(2, 3)).is_err());
        assert!(eigvals(&m(1, &[f64::NAN])).is_err());
    }

    #[test]
    fn random_matrices_match_polynomial_roots() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for draw in 0..100 {
            let d = 1 + draw % 5;
            let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let ours = eigvals(&a).unwrap();
            let oracle = poly_roots(&char_poly(&a));
            let err = eig_error(&ours, &oracle);
            let worst = err.pairs.iter().map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
            assert!(worst <= 1e-8, "draw {draw}: {worst}\n{a}");
        }
    }

    #[test]
    fn residuals_are_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let d = rng.random_range(2..8);
            let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-3.0..3.0));
            let ac = a.map(|v| c(v, 0.0));
            for l in eigvals(&a).unwrap() {
                // det(A - lI) via LU, scaled by |A|^d.
                let shifted = &ac - DMatrix::<Complex64>::identity(d, d) * l;
                let det = shifted.lu().determinant().norm();
                assert!(det <= 1e-9 * a.norm().powi(d as i32), "{det}");
            }
        }
    }

    proptest! {
        #[test]
        fn output_is_conjugate_symmetric(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.random_range(1..7);
            let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-2.0..2.0));
            let e = eigvals(&a).unwrap();
            prop_assert_eq!(e.len(), d);
            for l in &e {
                if l.im != 0.0 {
                    let partner = e.iter().map(|o| (o - l.conj()).norm()).fold(f64::INFINITY, f64::min);
                    prop_assert!(partner <= 1e-9);
                }
            }
        }

        #[test]
        fn eig_error_is_symmetric_and_order_free(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..6);
            let a: Vec<Complex64> = (0..n).map(|_| c(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect();
            let mut b: Vec<Complex64> = (0..n).map(|_| c(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect();
            let ab = eig_error(&a, &b).mae;
            prop_assert!((ab - eig_error(&b, &a).mae).abs() <= 1e-12);
            b.reverse();
            prop_assert!((ab - eig_error(&a, &b).mae).abs() <= 1e-12);
        }
    }

    #[test]
    fn assignment_beats_greedy() {
        let e = eig_error(&[c(-1.1, 0.0), c(-2.2, 0.0)], &[c(-1.0, 0.0), c(-2.0, 0.0)]);
        assert_abs_diff_eq!(e.mae, 0.15, epsilon = 1e-12);
        assert_eq!(e.pairs[0].1, c(-1.0, 0.0));
        // Greedy would pair 1.4 with 1.5 first and leave 0 -> 2.
        let e = eig_error(&[c(1.4, 0.0), c(2.0, 0.0)], &[c(1.5, 0.0), c(0.0, 0.0)]);
        assert_abs_diff_eq!(e.mae, (1.4 + 0.5) / 2.0, epsilon = 1e-12);
        assert_eq!(eig_error(&[c(1.0, 1.0)], &[c(1.0, 1.0)]).mae, 0.0);
    }

    #[test]
    fn assignment_against_brute_force() {
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in permutations(n - 1) {
                for i in 0..n {
                    let mut q = p.clone();
                    q.insert(i, n - 1);
                    out.push(q);
                }
            }
            out
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.random_range(1..6);
            let a: Vec<Complex64> = (0..n).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            let b: Vec<Complex64> = (0..n).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            let best = permutations(n)
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| (a[i] - b[j]).norm()).sum::<f64>() / n as f64)
                .fold(f64::INFINITY, f64::min);
            assert_abs_diff_eq!(eig_error(&a, &b).mae, best, epsilon = 1e-12);
        }
    }

    #[test]
    fn unequal_sets_report_leftovers() {
        let e = eig_error(&[c(-1.0, 0.0), c(-5.0, 0.0), c(-9.0, 0.0)], &[c(-1.1, 0.0)]);
        assert_eq!(e.pairs.len(), 1);
        assert_eq!(e.pairs[0], (c(-1.0, 0.0), c(-1.1, 0.0)));
        assert_eq!(e.unmatched_estimated.len(), 2);
        assert!(e.unmatched_reference.is_empty());
        let e = eig_error(&[c(-1.1, 0.0)], &[c(-1.0, 0.0), c(-5.0, 0.0)]);
        assert_eq!(e.unmatched_reference, vec![c(-5.0, 0.0)]);
    }

    #[test]
    fn classification_examples() {
        assert_eq!(classify(&[c(-1.0, 0.0), c(-2.0, 0.0)], 1e-6).unwrap(), Verdict::Stable);
        assert_eq!(classify(&[c(0.1, 2.0), c(0.1, -2.0)], 1e-6).unwrap(), Verdict::Unstable);
        assert_eq!(classify(&[c(0.0, 0.0)], 1e-6).unwrap(), Verdict::Marginal);
        assert!(classify(&[], 1e-6).is_err());
    }

    #[test]
    fn analytic_verdicts_follow_the_power_angle_rule() {
        let p = GfmDroopParams::default();
        let plant = PlantModel::gfm_droop(p).unwrap();
        for i in 0..8 {
            for j in 0..6 {
                let vg = 0.5 + 0.1 * i as f64;
                let wg = 0.9 + 0.04 * j as f64;
                let u = DVector::from_row_slice(&[vg, wg]);
                let ratio = p.required_power(wg) / p.pull_out_power(vg);
                if ratio.abs() >= 1.0 {
                    continue;
                }
                // Both branches of the power-angle curve.
                for delta in [ratio.asin(), std::f64::consts::PI - ratio.asin()] {
                    let x = DVector::from_row_slice(&[delta, p.required_power(wg)]);
                    assert!(plant.derivative(&x, &u).unwrap().norm() < 1e-12);
                    let j = plant.analytic_state_jacobian(&x, &u).unwrap();
                    let r = EigenReport::from_matrix(&j, EigenSource::AnalyticPlant, DEFAULT_MARGIN).unwrap();
                    let expected = if delta.cos() > 0.0 { Verdict::Stable } else { Verdict::Unstable };
                    assert_eq!(r.verdict, expected, "V={vg} w={wg} delta={delta}");
                }
            }
        }
    }

    #[test]
    fn zero_model_is_marginal_everywhere() {
        let mut model = MlpParams::init(&[3, 4, 2], Activation::Tanh, 0).unwrap();
        model.tensors_mut().for_each(|t| t.fill(0.0));
        let x = DVector::from_row_slice(&[0.4, -1.0]);
        let (x_ss, j) = model_linearize(&model, &DVector::from_row_slice(&[2.0]), &x).unwrap();
        assert_eq!(x_ss, x);
        assert_eq!(j, DMatrix::zeros(2, 2));
        let r = EigenReport::from_matrix(&j, EigenSource::ModelJnn, DEFAULT_MARGIN).unwrap();
        assert_eq!(r.verdict, Verdict::Marginal);
    }

    #[test]
    fn affine_model_linearizes_exactly() {
        // f(z) = A z + b u in normalized space.
        let a = m(2, &[-1.0, 0.5, -0.5, -2.0]);
        let w = m(2, &[-1.0, 0.5, 1.0, -0.5, -2.0, 0.0]);
        let norm = NormStats::new(
            DVector::from_row_slice(&[1.0, -1.0]),
            DVector::from_row_slice(&[2.0, 0.5]),
            DVector::from_row_slice(&[0.0]),
            DVector::from_row_slice(&[1.0]),
            4.0,
        )
        .unwrap();
        let model = MlpParams::new(vec![w], vec![DVector::zeros(2)], Activation::Tanh, norm.clone()).unwrap();
        let u = DVector::from_row_slice(&[0.3]);
        let (x_ss, j) = model_linearize(&model, &u, &DVector::from_row_slice(&[3.0, 3.0])).unwrap();
        let z = norm.normalize_state(&x_ss);
        assert!(model.forward(&z, &norm.normalize_input(&u)).unwrap().norm() <= 1e-10);
        assert!((j - norm.denormalize_jacobian(&a)).amax() <= 1e-12);
    }

    #[test]
    fn model_without_equilibrium_is_reported() {
        // f(z) = tanh(z) + 2 never vanishes.
        let w1 = m(1, &[1.0, 0.0]);
        let w2 = m(1, &[1.0]);
        let model = MlpParams::new(
            vec![w1, w2],
            vec![DVector::zeros(1), DVector::from_row_slice(&[2.0])],
            Activation::Tanh,
            NormStats::identity(1, 1),
        )
        .unwrap();
        let r = model_linearize(&model, &DVector::zeros(1), &DVector::zeros(1));
        assert!(matches!(r, Err(Error::NoEquilibrium(_))));
    }

    #[test]
    fn affine_map_fixed_point_and_jacobian() {
        // F(z) = A z + b u in normalized space.
        let a = m(2, &[0.9, 0.1, -0.2, 0.5]);
        let w = m(2, &[0.9, 0.1, 1.0, -0.2, 0.5, -1.0]);
        let norm = NormStats::new(
            DVector::from_row_slice(&[1.0, -1.0]),
            DVector::from_row_slice(&[2.0, 0.5]),
            DVector::from_row_slice(&[0.0]),
            DVector::from_row_slice(&[1.0]),
            4.0,
        )
        .unwrap();
        let map = MlpParams::new(vec![w], vec![DVector::zeros(2)], Activation::Tanh, norm.clone()).unwrap();
        let u = DVector::from_row_slice(&[0.3]);
        let (x_ss, j) = map_linearize(&map, &u, &DVector::zeros(2)).unwrap();
        let z = norm.normalize_state(&x_ss);
        let step = map.forward(&z, &norm.normalize_input(&u)).unwrap();
        assert!((step - &z).norm() <= 1e-10);
        let s = DMatrix::from_diagonal(&norm.state_std);
        let expected = &s * &a * s.try_inverse().unwrap();
        assert!((j - expected).amax() <= 1e-12);
    }

    #[test]
    fn discrete_eigenvalues_map_back_to_continuous() {
        let dt = 2e-4;
        let lambdas = [c(-3.0, 40.0), c(-3.0, -40.0), c(-250.0, 0.0)];
        let mus: Vec<Complex64> = lambdas.iter().map(|l| (l * dt).exp()).collect();
        let back = continuous_eigenvalues(&mus, dt).unwrap();
        assert_eq!(back.len(), 3);
        for l in lambdas {
            assert!(back.iter().any(|b| (b - l).norm() <= 1e-9), "{l} missing from {back:?}");
        }
        assert!(back[0].re >= back[2].re);
        assert!(continuous_eigenvalues(&mus, 0.0).is_err());
        let r = EigenReport::from_eigenvalues(back, EigenSource::ModelJnn, DEFAULT_MARGIN).unwrap();
        assert_eq!(r.verdict, Verdict::Stable);
        assert!((r.max_real + 3.0).abs() <= 1e-9);
    }

    #[test]
    fn reports_serialize() {
        let r = EigenReport::from_matrix(&m(2, &[0.0, -2.0, 2.0, -1.0]), EigenSource::DataJref, DEFAULT_MARGIN).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"DataJref\""));
        assert_eq!(serde_json::from_str::<EigenReport>(&text).unwrap(), r);
        let e = eig_error(&r.eigenvalues, &r.eigenvalues);
        let back: EigError = serde_json::from_str(&serde_json::to_string(&e).unwrap()).unwrap();
        assert_eq!(back, e);
    }
}
