//! Pure forward primitives. The tape in [`super::tape`] records the same
//! computations and supplies their reverse-mode gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Sigmoid,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
        }
    }
}

/// Weights are stored `out × in`; bias has `out` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub kind: Activation,
}

impl LayerParams {
    pub fn new(weights: Matrix, bias: Vec<f64>, kind: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::shape(
                "LayerParams::new",
                format!("bias {} vs {} outputs", bias.len(), weights.rows()),
            ));
        }
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(LayerParams {
            weights,
            bias,
            kind,
        })
    }

    pub fn zeros(inputs: usize, outputs: usize, kind: Activation) -> Self {
        LayerParams {
            weights: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
            kind,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Uniform Glorot initialisation: `U[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_out: usize, fan_in: usize) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..=a))
        .collect();
    Matrix::from_vec(fan_out, fan_in, data).expect("sized by construction")
}

/// `activation(input · Wᵀ + bias)`, row-wise.
pub fn dense_forward(params: &LayerParams, input: &Matrix) -> Result<Matrix> {
    if input.cols() != params.input_dim() {
        return Err(Error::shape(
            "dense_forward",
            format!(
                "input is {}x{}, weights expect {} inputs ({}x{})",
                input.rows(),
                input.cols(),
                params.input_dim(),
                params.weights.rows(),
                params.weights.cols()
            ),
        ));
    }
    let mut out = input.matmul_t(&params.weights);
    for r in 0..out.rows() {
        for (v, b) in out.row_mut(r).iter_mut().zip(&params.bias) {
            *v = params.kind.apply(*v + b);
        }
    }
    Ok(out)
}

/// Row-wise layer normalisation with per-column gain and offset.
pub fn layer_norm(input: &Matrix, gain: &[f64], offset: &[f64], epsilon: f64) -> Result<Matrix> {
    let c = input.cols();
    if gain.len() != c || offset.len() != c {
        return Err(Error::shape(
            "layer_norm",
            format!("gain {} / offset {} vs {c} columns", gain.len(), offset.len()),
        ));
    }
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument("layer_norm epsilon must be >= 0".into()));
    }
    let mut out = Matrix::zeros(input.rows(), c);
    for r in 0..input.rows() {
        let row = input.row(r);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let denom = var + epsilon;
        if denom <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "layer_norm row {r} has zero variance and epsilon = 0"
            )));
        }
        let inv = 1.0 / denom.sqrt();
        for (k, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[k] - mean) * inv * gain[k] + offset[k];
        }
    }
    Ok(out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(scores: &Matrix) -> Matrix {
    let mut out = scores.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `softmax(queries · keysᵀ · scale) · values`.
pub fn cross_attention(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    scale: f64,
) -> Result<Matrix> {
    if keys.rows() == 0 {
        return Err(Error::InvalidArgument("cross_attention with no keys".into()));
    }
    if queries.cols() != keys.cols() || keys.rows() != values.rows() {
        return Err(Error::shape(
            "cross_attention",
            format!(
                "q {:?}, k {:?}, v {:?}",
                queries.shape(),
                keys.shape(),
                values.shape()
            ),
        ));
    }
    let probs = softmax_rows(&queries.matmul_t(keys).scaled(scale));
    Ok(probs.matmul(values))
}
