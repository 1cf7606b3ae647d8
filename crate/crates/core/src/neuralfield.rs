//! The learned vector field: a fully connected network applied to the
//! stacked state and input `z = [x; u]`, with an affine last layer.
//!
//! Besides forward evaluation this module provides the exact state Jacobian
//! and closed-form parameter gradients for both training objectives. The
//! Jacobian-matching gradient differentiates through the activation slopes,
//! so it is second order in the network.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::RolloutTape;
use crate::plants::{matrix_to_rows, rows_to_matrix};
use crate::signals::NormStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// Piecewise linear; its second derivative is zero almost everywhere, so
    /// Jacobian matching gets no signal through the slopes.
    Relu,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Relu => a.max(0.0),
        }
    }

    /// First derivative expressed through the activation output.
    fn slope(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Second derivative expressed through the activation output.
    fn curvature(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * out * (1.0 - out * out),
            Activation::Relu => 0.0,
        }
    }
}

/// Network weights, biases and the normalization the network was trained in.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_dims: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    activation: Activation,
    norm: NormStats,
    train_config_echo: serde_json::Value,
}

/// Gradient with the same shapes as the weights and biases of an
/// [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl ParamGradient {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            weights: params.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: params.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.weights.iter_mut().for_each(|w| *w *= c);
        self.biases.iter_mut().for_each(|b| *b *= c);
    }

    /// `self += c * other`
    pub fn add_scaled(&mut self, other: &ParamGradient, c: f64) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            *w += o * c;
        }
        for (b, o) in self.biases.iter_mut().zip(&other.biases) {
            *b += o * c;
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors().map(|t| t.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Weight then bias slices, layer by layer.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
    }
}

/// Activations kept from a forward pass for reverse accumulation.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    input: DMatrix<f64>,
    hidden: Vec<DMatrix<f64>>,
}

fn add_bias(a: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut col in a.column_iter_mut() {
        col += b;
    }
}

fn concat(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(x.len() + u.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), u.len()).copy_from(u);
    z
}

impl MlpParams {
    /// Builds a network from explicit layers. `norm` must match the state and
    /// input dimensions implied by the first and last layer.
    pub fn new(
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        activation: Activation,
        norm: NormStats,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Dimension(format!(
                "{} weight matrices and {} bias vectors",
                weights.len(),
                biases.len()
            )));
        }
        let mut layer_dims = vec![weights[0].ncols()];
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != *layer_dims.last().unwrap() {
                return Err(Error::Dimension(format!(
                    "layer {i} weight has {} columns, previous layer width is {}",
                    w.ncols(),
                    layer_dims.last().unwrap()
                )));
            }
            if b.len() != w.nrows() {
                return Err(Error::Dimension(format!(
                    "layer {i} bias has length {}, weight has {} rows",
                    b.len(),
                    w.nrows()
                )));
            }
            if !w.iter().chain(b.iter()).all(|v| v.is_finite()) {
                return Err(Error::InvalidParameter(format!("layer {i} has non-finite parameters")));
            }
            layer_dims.push(w.nrows());
        }
        let dx = *layer_dims.last().unwrap();
        if layer_dims[0] < dx {
            return Err(Error::Dimension(format!(
                "input width {} is smaller than output width {dx}",
                layer_dims[0]
            )));
        }
        let du = layer_dims[0] - dx;
        if norm.state_dim() != dx || norm.input_dim() != du {
            return Err(Error::Dimension(format!(
                "normalization is for d_x={}, d_u={}, network needs d_x={dx}, d_u={du}",
                norm.state_dim(),
                norm.input_dim()
            )));
        }
        Ok(Self {
            layer_dims,
            weights,
            biases,
            activation,
            norm,
            train_config_echo: serde_json::Value::Null,
        })
    }

    /// Glorot-uniform weights and zero biases, deterministic per seed. The
    /// normalization is the identity until [`MlpParams::with_norm`] is used.
    pub fn init(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Dimension(format!("invalid layer dims {layer_dims:?}")));
        }
        let dx = *layer_dims.last().unwrap();
        if layer_dims[0] < dx {
            return Err(Error::Dimension(format!(
                "input width {} is smaller than state dimension {dx}",
                layer_dims[0]
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..=limit)));
            biases.push(DVector::zeros(fan_out));
        }
        let norm = NormStats::identity(dx, layer_dims[0] - dx);
        Self::new(weights, biases, activation, norm)
    }

    pub fn with_norm(mut self, norm: NormStats) -> Result<Self> {
        if norm.state_dim() != self.state_dim() || norm.input_dim() != self.input_dim() {
            return Err(Error::Dimension("normalization dimensions do not match the network".into()));
        }
        self.norm = norm;
        Ok(self)
    }

    pub fn with_train_config_echo(mut self, echo: serde_json::Value) -> Self {
        self.train_config_echo = echo;
        self
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn train_config_echo(&self) -> &serde_json::Value {
        &self.train_config_echo
    }

    pub fn state_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0] - self.state_dim()
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Mutable weight then bias slices, in the same order as
    /// [`ParamGradient::tensors`].
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
    }

    fn check_point(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim() || u.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "network expects x in R^{} and u in R^{}, got R^{} and R^{}",
                self.state_dim(),
                self.input_dim(),
                x.len(),
                u.len()
            )));
        }
        Ok(())
    }

    /// Evaluates the network at `(x, u)` (normalized coordinates).
    pub fn forward(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_point(x, u)?;
        Ok(self.forward_unchecked(&concat(x, u)))
    }

    pub(crate) fn forward_unchecked(&self, z: &DVector<f64>) -> DVector<f64> {
        let last = self.weights.len() - 1;
        let mut h = z.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut a = w * &h;
            a += b;
            if i < last {
                a.apply(|v| *v = self.activation.apply(*v));
            }
            h = a;
        }
        h
    }

    /// Batched forward pass over the columns of `z`. The cache is only
    /// populated when `record` is set.
    pub fn forward_batch(&self, z: &DMatrix<f64>, record: bool) -> (DMatrix<f64>, ForwardCache) {
        let last = self.weights.len() - 1;
        let mut cache = ForwardCache::default();
        if record {
            cache.input = z.clone();
            cache.hidden.reserve(last);
        }
        let mut prev: Option<DMatrix<f64>> = None;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let input = prev.as_ref().unwrap_or(z);
            let mut a = w * input;
            add_bias(&mut a, b);
            if i < last {
                a.apply(|v| *v = self.activation.apply(*v));
                if record {
                    cache.hidden.push(a.clone());
                }
            }
            prev = Some(a);
        }
        (prev.unwrap(), cache)
    }

    /// Reverse pass for a recorded batch: accumulates parameter gradients for
    /// the output cotangent `g_out` into `grad` and returns the cotangent of
    /// the network input.
    pub fn backward_batch(&self, cache: &ForwardCache, g_out: &DMatrix<f64>, grad: &mut ParamGradient) -> DMatrix<f64> {
        let nl = self.weights.len();
        let mut g = g_out.clone();
        for i in (0..nl).rev() {
            let input = if i == 0 { &cache.input } else { &cache.hidden[i - 1] };
            grad.weights[i].gemm(1.0, &g, &input.transpose(), 1.0);
            for col in g.column_iter() {
                grad.biases[i] += col;
            }
            let mut g_in = self.weights[i].tr_mul(&g);
            if i > 0 {
                let act = self.activation;
                g_in.zip_apply(input, |gv, h| *gv *= act.slope(h));
            }
            g = g_in;
        }
        g
    }

    fn hidden_outputs(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        let last = self.weights.len() - 1;
        let mut outs = Vec::with_capacity(last);
        let mut h = z.clone();
        for (w, b) in self.weights[..last].iter().zip(&self.biases) {
            let mut a = w * &h;
            a += b;
            a.apply(|v| *v = self.activation.apply(*v));
            outs.push(a.clone());
            h = a;
        }
        outs
    }

    /// Exact `d f / d x` by propagating the state columns through the layer
    /// recursion `W_n D_{n-1} W_{n-1} ... D_1 W_1`.
    pub fn state_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_point(x, u)?;
        let hidden = self.hidden_outputs(&concat(x, u));
        let dx = self.state_dim();
        let mut t = self.weights[0].columns(0, dx).into_owned();
        for (i, h) in hidden.iter().enumerate() {
            scale_rows(&mut t, h, |o| self.activation.slope(o));
            t = &self.weights[i + 1] * t;
        }
        Ok(t)
    }

    /// Squared Frobenius mismatch `|J_NN(x, u) - j_ref|_F^2` and its exact
    /// gradient with respect to every weight and bias.
    pub fn jac_loss_and_grad(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        j_ref: &DMatrix<f64>,
    ) -> Result<(f64, ParamGradient)> {
        self.check_point(x, u)?;
        let dx = self.state_dim();
        if j_ref.nrows() != dx || j_ref.ncols() != dx {
            return Err(Error::Dimension(format!(
                "reference Jacobian is {}x{}, expected {dx}x{dx}",
                j_ref.nrows(),
                j_ref.ncols()
            )));
        }
        let nl = self.weights.len();
        let act = self.activation;
        let mut inputs = vec![concat(x, u)];
        inputs.extend(self.hidden_outputs(&inputs[0]));
        // inputs[i] feeds layer i; inputs[i + 1] = sigma(a_i) for hidden i.
        let slopes: Vec<DVector<f64>> = inputs[1..].iter().map(|h| h.map(|o| act.slope(o))).collect();
        let curvatures: Vec<DVector<f64>> = inputs[1..].iter().map(|h| h.map(|o| act.curvature(o))).collect();

        // Tangent pass: t[i] = layer i output tangent, s[i] = D_i t[i].
        let mut t = vec![self.weights[0].columns(0, dx).into_owned()];
        let mut s = Vec::with_capacity(nl - 1);
        for i in 0..nl - 1 {
            let mut si = t[i].clone();
            scale_rows_by(&mut si, &slopes[i]);
            t.push(&self.weights[i + 1] * &si);
            s.push(si);
        }
        let diff = &t[nl - 1] - j_ref;
        let loss = diff.norm_squared();

        let mut grad = ParamGradient::zeros_like(self);
        let mut g_t = diff * 2.0;
        let mut g_pre_from_tangent: Vec<DVector<f64>> = slopes.iter().map(|d| DVector::zeros(d.len())).collect();
        for i in (1..nl).rev() {
            grad.weights[i].gemm(1.0, &g_t, &s[i - 1].transpose(), 1.0);
            let g_s = self.weights[i].tr_mul(&g_t);
            let g_slope = DVector::from_iterator(
                g_s.nrows(),
                g_s.row_iter().zip(t[i - 1].row_iter()).map(|(a, b)| a.dot(&b)),
            );
            g_pre_from_tangent[i - 1] = g_slope.component_mul(&curvatures[i - 1]);
            g_t = g_s;
            scale_rows_by(&mut g_t, &slopes[i - 1]);
        }
        let mut w0x = grad.weights[0].columns_mut(0, dx);
        w0x += &g_t;

        // Primal pass: the slopes depend on the parameters through the
        // hidden pre-activations.
        if nl >= 2 {
            let mut g_a = g_pre_from_tangent[nl - 2].clone();
            for i in (0..nl - 1).rev() {
                grad.weights[i].ger(1.0, &g_a, &inputs[i], 1.0);
                grad.biases[i] += &g_a;
                if i > 0 {
                    let mut g_prev = self.weights[i].tr_mul(&g_a);
                    g_prev.component_mul_assign(&slopes[i - 1]);
                    g_prev += &g_pre_from_tangent[i - 1];
                    g_a = g_prev;
                }
            }
        }
        Ok((loss, grad))
    }
}

fn scale_rows(m: &mut DMatrix<f64>, by: &DVector<f64>, f: impl Fn(f64) -> f64) {
    for (mut row, &o) in m.row_iter_mut().zip(by.iter()) {
        row *= f(o);
    }
}

fn scale_rows_by(m: &mut DMatrix<f64>, by: &DVector<f64>) {
    for (mut row, &c) in m.row_iter_mut().zip(by.iter()) {
        row *= c;
    }
}

/// Gradient of the mean window MSE `(1/B) sum_b (1/K) sum_k |r_kb|^2` with
/// respect to the network parameters, where `residuals[k]` holds the
/// prediction-minus-reference columns of step `k` of a recorded rollout.
pub fn grad_forward_loss(
    params: &MlpParams,
    tape: Option<&RolloutTape>,
    residuals: &[DMatrix<f64>],
) -> Result<ParamGradient> {
    let tape = tape.ok_or(Error::TapeMissing)?;
    let k = residuals.len().max(1) as f64;
    let b = residuals.first().map_or(1, |r| r.ncols()).max(1) as f64;
    let seeds: Vec<DMatrix<f64>> = residuals.iter().map(|r| r * (2.0 / (k * b))).collect();
    tape.backward(params, &seeds)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    layer_dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    norm: Option<NormStats>,
    #[serde(default)]
    train_config_echo: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    discrete_dt: Option<f64>,
}

pub(crate) fn write_model_file(params: &MlpParams, discrete_dt: Option<f64>, path: &Path) -> Result<()> {
    let file = ModelFile {
        layer_dims: params.layer_dims.clone(),
        activation: params.activation,
        weights: params.weights.iter().map(matrix_to_rows).collect(),
        biases: params.biases.iter().map(|b| b.iter().copied().collect()).collect(),
        norm: Some(params.norm.clone()),
        train_config_echo: params.train_config_echo.clone(),
        discrete_dt,
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_model_file(path: &Path) -> Result<(MlpParams, Option<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let norm = file
        .norm
        .ok_or_else(|| Error::format(path, "model has no normalization statistics (`norm`)"))?;
    norm.validate().map_err(|e| Error::format(path, e.to_string()))?;
    let n_layers = file.layer_dims.len().saturating_sub(1);
    if file.weights.len() != n_layers || file.biases.len() != n_layers {
        return Err(Error::format(
            path,
            format!(
                "layer_dims describes {n_layers} layers but file has {} weights and {} biases",
                file.weights.len(),
                file.biases.len()
            ),
        ));
    }
    let mut weights = Vec::with_capacity(n_layers);
    let mut biases = Vec::with_capacity(n_layers);
    for (i, (w, b)) in file.weights.iter().zip(&file.biases).enumerate() {
        let (rows, cols) = (file.layer_dims[i + 1], file.layer_dims[i]);
        let w = rows_to_matrix(w, &format!("layer {i} weight")).map_err(|e| Error::format(path, e.to_string()))?;
        if w.nrows() != rows || w.ncols() != cols {
            return Err(Error::format(
                path,
                format!("layer {i} weight is {}x{}, expected {rows}x{cols}", w.nrows(), w.ncols()),
            ));
        }
        if b.len() != rows {
            return Err(Error::format(path, format!("layer {i} bias has length {}, expected {rows}", b.len())));
        }
        weights.push(w);
        biases.push(DVector::from_column_slice(b));
    }
    let params = MlpParams::new(weights, biases, file.activation, norm)
        .map_err(|e| Error::format(path, e.to_string()))?
        .with_train_config_echo(file.train_config_echo);
    Ok((params, file.discrete_dt))
}

pub fn save_model(params: &MlpParams, path: impl AsRef<Path>) -> Result<()> {
    write_model_file(params, None, path.as_ref())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MlpParams> {
    let path = path.as_ref();
    let (params, discrete_dt) = read_model_file(path)?;
    if discrete_dt.is_some() {
        return Err(Error::format(path, "file holds a discrete one-step model, not a vector field"));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn random_net(dims: &[usize], seed: u64) -> MlpParams {
        // Non-zero biases so every code path is exercised.
        let mut p = MlpParams::init(dims, Activation::Tanh, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        for b in p.biases.iter_mut() {
            b.apply(|v| *v = rng.random_range(-0.5..0.5));
        }
        p
    }

    /// Straight-line evaluation of `W_n s(... s(W_1 z + b_1) ...) + b_n`
    /// with explicit loops, independent of the matrix code paths.
    fn reference_forward(p: &MlpParams, z: &[f64]) -> Vec<f64> {
        let mut h = z.to_vec();
        let nl = p.weights.len();
        for i in 0..nl {
            let w = &p.weights[i];
            let mut out = vec![0.0; w.nrows()];
            for r in 0..w.nrows() {
                let mut acc = p.biases[i][r];
                for c in 0..w.ncols() {
                    acc += w[(r, c)] * h[c];
                }
                out[r] = if i + 1 < nl { acc.tanh() } else { acc };
            }
            h = out;
        }
        h
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut p = MlpParams::init(&[3, 5, 2], Activation::Tanh, 1).unwrap();
        p.tensors_mut().for_each(|t| t.fill(0.0));
        assert_eq!(p.forward(&v(&[1.0, -2.0]), &v(&[3.0])).unwrap(), v(&[0.0, 0.0]));
        assert_eq!(p.state_jacobian(&v(&[1.0, -2.0]), &v(&[3.0])).unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn identity_affine_network() {
        let w = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let p = MlpParams::new(vec![w.clone()], vec![DVector::zeros(2)], Activation::Tanh, NormStats::identity(2, 1)).unwrap();
        assert_eq!(p.forward(&v(&[0.7, -1.3]), &v(&[5.0])).unwrap(), v(&[0.7, -1.3]));
        assert_eq!(p.state_jacobian(&v(&[0.7, -1.3]), &v(&[5.0])).unwrap(), w.columns(0, 2).into_owned());
    }

    #[test]
    fn forward_matches_straight_line_reimplementation() {
        let p = random_net(&[4, 8, 6, 2], 7);
        let z = [0.3, -0.8, 1.1, 0.05];
        let got = p.forward(&v(&z[..2]), &v(&z[2..])).unwrap();
        let want = reference_forward(&p, &z);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-14, "{g} vs {w}");
        }
        let (batch, _) = p.forward_batch(&DMatrix::from_column_slice(4, 1, &z), false);
        assert_abs_diff_eq!(batch.column(0).into_owned(), got, epsilon = 1e-15);
    }

    #[test]
    fn dimension_errors() {
        let p = MlpParams::init(&[3, 4, 2], Activation::Tanh, 0).unwrap();
        assert!(matches!(p.forward(&v(&[1.0]), &v(&[1.0])), Err(Error::Dimension(_))));
        assert!(matches!(p.state_jacobian(&v(&[1.0, 2.0]), &v(&[])), Err(Error::Dimension(_))));
        assert!(matches!(
            p.jac_loss_and_grad(&v(&[1.0, 2.0]), &v(&[1.0]), &DMatrix::zeros(3, 3)),
            Err(Error::Dimension(_))
        ));
    }

    fn fd_state_jacobian(p: &MlpParams, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let h = 1e-6;
        let n = x.len();
        let mut j = DMatrix::zeros(n, n);
        for c in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let d = (p.forward(&xp, u).unwrap() - p.forward(&xm, u).unwrap()) / (2.0 * h);
            j.set_column(c, &d);
        }
        j
    }

    #[test]
    fn state_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..50 {
            let p = random_net(&[4, 16, 12, 2], case);
            let x = v(&[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
            let u = v(&[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
            let exact = p.state_jacobian(&x, &u).unwrap();
            let fd = fd_state_jacobian(&p, &x, &u);
            let rel = (&exact - &fd).norm() / exact.norm().max(1e-12);
            assert!(rel <= 1e-5, "case {case}: relative error {rel}");
            assert!((&exact - &fd).amax() <= 1e-5);
        }
    }

    #[test]
    fn jacobian_is_continuous_in_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..20 {
            let p = random_net(&[3, 32, 32, 2], 100 + case);
            let x = v(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let u = v(&[rng.random_range(-1.0..1.0)]);
            let dx = v(&[1e-8, -1e-8]);
            let diff = p.state_jacobian(&(&x + dx), &u).unwrap() - p.state_jacobian(&x, &u).unwrap();
            assert!(diff.norm() <= 1e-5);
        }
    }

    fn numeric_grad<F: Fn(&MlpParams) -> f64>(p: &MlpParams, loss: F) -> Vec<Vec<f64>> {
        let h = 1e-6;
        let mut out = Vec::new();
        let n_tensors = p.tensors().count();
        for ti in 0..n_tensors {
            let len = p.tensors().nth(ti).unwrap().len();
            let mut g = vec![0.0; len];
            for (j, gj) in g.iter_mut().enumerate() {
                let mut plus = p.clone();
                plus.tensors_mut().nth(ti).unwrap()[j] += h;
                let mut minus = p.clone();
                minus.tensors_mut().nth(ti).unwrap()[j] -= h;
                *gj = (loss(&plus) - loss(&minus)) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    fn assert_grad_close(exact: &ParamGradient, numeric: &[Vec<f64>], rel: f64) {
        for (ti, (e, n)) in exact.tensors().zip(numeric).enumerate() {
            for (j, (a, b)) in e.iter().zip(n).enumerate() {
                let scale = a.abs().max(b.abs()).max(1e-3);
                assert!((a - b).abs() <= rel * scale, "tensor {ti} entry {j}: exact {a} vs numeric {b}");
            }
        }
    }

    #[test]
    fn jacobian_loss_single_affine_layer() {
        let w = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let p = MlpParams::new(vec![w], vec![v(&[0.1, 0.2])], Activation::Tanh, NormStats::identity(2, 1)).unwrap();
        let (loss, grad) = p.jac_loss_and_grad(&v(&[0.0, 0.0]), &v(&[0.0]), &DMatrix::zeros(2, 2)).unwrap();
        assert_abs_diff_eq!(loss, 1.0 + 4.0 + 1.0 + 0.25, epsilon = 1e-15);
        let expected = DMatrix::from_row_slice(2, 3, &[2.0, 4.0, 0.0, -2.0, 1.0, 0.0]);
        assert_eq!(grad.weights[0], expected);
        assert_eq!(grad.biases[0], DVector::zeros(2));
    }

    #[test]
    fn jacobian_loss_vanishes_at_own_jacobian() {
        let p = random_net(&[3, 10, 2], 3);
        let (x, u) = (v(&[0.2, -0.4]), v(&[0.9]));
        let j = p.state_jacobian(&x, &u).unwrap();
        let (loss, grad) = p.jac_loss_and_grad(&x, &u, &j).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.norm(), 0.0);
    }

    #[test]
    fn jacobian_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..10 {
            let p = random_net(&[3, 5, 4, 2], 20 + case);
            let x = v(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let u = v(&[rng.random_range(-1.0..1.0)]);
            let j_ref = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-2.0..2.0));
            let (_, grad) = p.jac_loss_and_grad(&x, &u, &j_ref).unwrap();
            let numeric = numeric_grad(&p, |q| q.jac_loss_and_grad(&x, &u, &j_ref).unwrap().0);
            assert_grad_close(&grad, &numeric, 1e-4);
        }
    }

    #[test]
    fn init_is_glorot_uniform_and_deterministic() {
        let a = MlpParams::init(&[4, 64, 128, 128, 2], Activation::Tanh, 42).unwrap();
        let b = MlpParams::init(&[4, 64, 128, 128, 2], Activation::Tanh, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.biases.iter().all(|b| b.iter().all(|v| *v == 0.0)));
        for w in &a.weights {
            let (fan_out, fan_in) = (w.nrows(), w.ncols());
            if fan_in < 64 || fan_out < 64 {
                continue;
            }
            let n = w.len() as f64;
            let mean = w.sum() / n;
            let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let expected = (2.0 / (fan_in + fan_out) as f64).sqrt();
            assert!((std / expected - 1.0).abs() <= 0.15, "std {std} vs {expected}");
        }
        assert_ne!(a, MlpParams::init(&[4, 64, 128, 128, 2], Activation::Tanh, 43).unwrap());
    }

    #[test]
    fn lipschitz_bound_by_spectral_norms() {
        let p = random_net(&[3, 16, 16, 2], 8);
        let bound: f64 = p.weights.iter().map(|w| w.clone().svd(false, false).singular_values[0]).product();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let z1: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let z2: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let f1 = p.forward(&v(&z1[..2]), &v(&z1[2..])).unwrap();
            let f2 = p.forward(&v(&z2[..2]), &v(&z2[2..])).unwrap();
            let dz = (v(&z1) - v(&z2)).norm();
            assert!((f1 - f2).norm() <= bound * dz * (1.0 + 1e-12));
        }
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let norm = NormStats::new(v(&[0.1, -0.2]), v(&[0.5, 2.0]), v(&[1.0]), v(&[0.25]), 0.013).unwrap();
        let p = random_net(&[3, 9, 2], 17)
            .with_norm(norm)
            .unwrap()
            .with_train_config_echo(serde_json::json!({"mode": "lfi"}));
        save_model(&p, &path).unwrap();
        let q = load_model(&path).unwrap();
        assert_eq!(p, q);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = v(&[rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]);
            let u = v(&[rng.random_range(-5.0..5.0)]);
            assert_eq!(p.forward(&x, &u).unwrap(), q.forward(&x, &u).unwrap());
        }
    }

    #[test]
    fn malformed_model_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let p = random_net(&[3, 4, 2], 2);
        save_model(&p, &path).unwrap();
        let mut json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();

        let mut bad_shape = json.clone();
        bad_shape["weights"][1][0].as_array_mut().unwrap().pop();
        fs::write(&path, bad_shape.to_string()).unwrap();
        match load_model(&path) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("layer 1"), "{reason}"),
            other => panic!("expected format error, got {other:?}"),
        }

        json.as_object_mut().unwrap().remove("norm");
        fs::write(&path, json.to_string()).unwrap();
        match load_model(&path) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("norm"), "{reason}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
