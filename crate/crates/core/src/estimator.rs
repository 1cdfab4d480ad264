//! Fully connected position estimator.
//!
//! Maps the two feedback features (normalized power and subcarrier index) to
//! an angle in `(-bound, bound)` through a scaled `tanh` head and a positive
//! range through a `softplus` head. Hidden layers use ReLU.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, softplus_inverse, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Layer widths used unless configured otherwise.
pub const DEFAULT_DIMS: [usize; 5] = [2, 64, 128, 64, 2];

/// Weights (`fan_in × fan_out`, row-major) and biases of every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpParams {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            weights: dims.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect(),
            biases: dims[1..].iter().map(|d| vec![0.0; *d]).collect(),
        })
    }

    /// He-uniform weights, zero biases, and the range output bias set so the
    /// initial range prediction sits at `mean_range_m`.
    pub fn init(dims: &[usize], mean_range_m: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        for (l, w) in p.weights.iter_mut().enumerate() {
            let limit = (6.0 / dims[l] as f64).sqrt();
            w.iter_mut().for_each(|v| *v = rng.random_range(-limit..limit));
        }
        if mean_range_m > 0.0 {
            let last = p.biases.last_mut().expect("at least one layer");
            last[1] = softplus_inverse(mean_range_m);
        }
        Ok(p)
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.dims[l], self.dims[l + 1]), &self.weights[l]).expect("dims checked")
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.weights.iter().chain(&self.biases).flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("estimator parameters".into()));
        }
        Ok(())
    }

    /// Validates shapes after deserialization.
    pub fn validate(&self) -> Result<()> {
        check_dims(&self.dims)?;
        let ok = self.weights.len() == self.dims.len() - 1
            && self.biases.len() == self.dims.len() - 1
            && self.dims.windows(2).zip(&self.weights).all(|(d, w)| w.len() == d[0] * d[1])
            && self.dims[1..].iter().zip(&self.biases).all(|(d, b)| b.len() == *d);
        if !ok {
            return Err(Error::Corrupt("estimator parameter shapes do not match dims".into()));
        }
        self.check_finite()
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims[0] != 2 || *dims.last().expect("len ≥ 2") != 2 || dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("estimator dims must run from 2 to 2, got {dims:?}")));
    }
    Ok(())
}

/// Estimated user position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionEstimate {
    pub angle_rad: f64,
    pub range_m: f64,
}

impl PositionEstimate {
    pub fn cartesian(&self) -> (f64, f64) {
        (self.range_m * self.angle_rad.cos(), self.range_m * self.angle_rad.sin())
    }
}

/// Affine feature scaling shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    /// Power range (dBm) mapped onto `[-1, 1]`.
    pub power_lo_dbm: f64,
    pub power_hi_dbm: f64,
    pub num_subcarriers: usize,
}

impl FeatureNorm {
    pub fn power_center(&self) -> f64 {
        0.5 * (self.power_lo_dbm + self.power_hi_dbm)
    }

    pub fn power_half_span(&self) -> f64 {
        0.5 * (self.power_hi_dbm - self.power_lo_dbm)
    }

    pub fn index_center(&self) -> f64 {
        (self.num_subcarriers as f64 + 1.0) / 2.0
    }

    pub fn index_half_span(&self) -> f64 {
        self.num_subcarriers as f64 / 2.0
    }

    pub fn power(&self, power_dbm: f64) -> f64 {
        (power_dbm - self.power_center()) / self.power_half_span()
    }

    /// One-based index to `[-1, 1]`.
    pub fn index(&self, m: f64) -> f64 {
        (m - self.index_center()) / self.index_half_span()
    }
}

/// Runs the network on a `B × 2` feature matrix.
pub fn mlp_forward(params: &MlpParams, features: &Array2<f64>, angle_bound: f64) -> Vec<PositionEstimate> {
    let mut h = features.clone();
    let last = params.num_layers() - 1;
    for l in 0..params.num_layers() {
        let z = h.dot(&params.weight(l)) + &Array1::from(params.biases[l].clone());
        h = if l < last { z.mapv(|v| v.max(0.0)) } else { z };
    }
    h.rows()
        .into_iter()
        .map(|r| PositionEstimate { angle_rad: (r[0].tanh()) * angle_bound, range_m: softplus(r[1]) })
        .collect()
}

/// Tape leaves of the estimator parameters.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl MlpVars {
    pub fn record(tape: &mut Tape, params: &MlpParams, trainable: bool) -> Self {
        let mut leaf = |t: Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        let weights = (0..params.num_layers()).map(|l| leaf(Tensor::matrix(params.weight(l).to_owned()))).collect();
        let biases = params.biases.iter().map(|b| leaf(Tensor::vector(b.clone()))).collect();
        Self { weights, biases }
    }

    /// Leaves in a fixed order: all weights, then all biases.
    pub fn all(&self) -> Vec<Var> {
        self.weights.iter().chain(&self.biases).copied().collect()
    }
}

/// Taped forward pass; returns `(angle, range)` as `B`-vectors.
pub fn taped_forward(tape: &mut Tape, vars: &MlpVars, features: Var, angle_bound: f64) -> Result<(Var, Var)> {
    let mut h = features;
    let last = vars.weights.len() - 1;
    for l in 0..vars.weights.len() {
        let z = tape.matmul(h, vars.weights[l])?;
        let z = tape.bias_add(z, vars.biases[l])?;
        h = if l < last { tape.relu(z)? } else { z };
    }
    let a = tape.column(h, 0)?;
    let a = tape.tanh(a)?;
    let angle = tape.scale(a, angle_bound);
    let r = tape.column(h, 1)?;
    let range = tape.softplus(r)?;
    Ok((angle, range))
}

/// Operation count of one forward pass.
///
/// Each layer counts `2 · N_in · N_out` for the multiply-adds and `N_out`
/// for the bias; hidden layers add `N_out` activation evaluations. Output
/// heads are not counted.
pub fn flops_count(dims: &[usize]) -> usize {
    let layers = dims.len().saturating_sub(1);
    dims.windows(2)
        .enumerate()
        .map(|(l, w)| {
            let act = if l + 1 < layers { w[1] } else { 0 };
            2 * w[0] * w[1] + w[1] + act
        })
        .sum()
}
