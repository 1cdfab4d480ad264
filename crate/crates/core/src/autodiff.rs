//! Tape-based reverse-mode differentiation over real and complex arrays.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`], so
//! node ids are already in topological order and [`Tape::backward`] is a
//! single reverse sweep.
//!
//! Complex gradients use the conjugate (Wirtinger) convention
//! `G_z = ∂L/∂x - j ∂L/∂y = 2 ∂L/∂z` for `z = x + jy`. With it the chain rule
//! through a holomorphic map `w = f(z)` is plain multiplication,
//! `G_z = G_w f'(z)`, and `|z|²` has gradient `2 z̄`. All trainable leaves in
//! this crate are real, where the convention reduces to the usual gradient.
//!
//! Forward values are produced by the free functions in this module (and in
//! [`crate::feedback`]), which the untaped code paths call as well, so taped
//! and untaped results agree bit for bit.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};
use num_complex::Complex64;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::feedback::Quantizer;

/// Real or complex array stored on the tape.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Real(ArrayD<f64>),
    Complex(ArrayD<Complex64>),
}

impl Tensor {
    pub fn scalar(v: f64) -> Self {
        Tensor::Real(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Tensor::Real(Array1::from(v).into_dyn())
    }

    pub fn matrix(m: Array2<f64>) -> Self {
        Tensor::Real(m.into_dyn())
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::Real(a) => a.shape(),
            Tensor::Complex(a) => a.shape(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_complex(&self) -> bool {
        matches!(self, Tensor::Complex(_))
    }

    pub fn as_real(&self) -> Result<&ArrayD<f64>> {
        match self {
            Tensor::Real(a) => Ok(a),
            Tensor::Complex(_) => Err(kind_error("real", "complex")),
        }
    }

    pub fn as_complex(&self) -> Result<&ArrayD<Complex64>> {
        match self {
            Tensor::Complex(a) => Ok(a),
            Tensor::Real(_) => Err(kind_error("complex", "real")),
        }
    }

    fn zeros_like(&self) -> Tensor {
        match self {
            Tensor::Real(a) => Tensor::Real(ArrayD::zeros(a.raw_dim())),
            Tensor::Complex(a) => Tensor::Complex(ArrayD::zeros(a.raw_dim())),
        }
    }

    fn accumulate(&mut self, other: Tensor) {
        match (self, other) {
            (Tensor::Real(a), Tensor::Real(b)) => *a += &b,
            (Tensor::Complex(a), Tensor::Complex(b)) => *a += &b,
            _ => unreachable!("gradient kind always matches value kind"),
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            Tensor::Real(a) => a.iter().all(|v| v.is_finite()),
            Tensor::Complex(a) => a.iter().all(|v| v.re.is_finite() && v.im.is_finite()),
        }
    }
}

fn kind_error(expected: &str, got: &str) -> Error {
    Error::DimensionMismatch { expected: format!("{expected} tensor"), got: format!("{got} tensor") }
}

fn shape_error(expected: &[usize], got: &[usize]) -> Error {
    Error::DimensionMismatch { expected: format!("{expected:?}"), got: format!("{got:?}") }
}

/// Complex-linear map `w ↦ A w` that lives outside the tape, e.g. a batch of
/// channels regenerated on demand instead of stored.
pub trait ComplexLinearMap: Send + Sync {
    fn input_shape(&self) -> Vec<usize>;
    fn apply(&self, w: &ArrayD<Complex64>) -> ArrayD<Complex64>;
    /// `Aᵀ g` (plain transpose): the gradient of `w` given the gradient of `A w`.
    fn apply_transpose(&self, w: &ArrayD<Complex64>, g: &ArrayD<Complex64>) -> ArrayD<Complex64>;
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    ComplexExp(Var),
    Conj(Var),
    InnerProduct(Var, Var),
    AbsSquared(Var),
    Tanh(Var),
    Softplus(Var),
    Relu(Var),
    Cos(Var),
    Sin(Var),
    Sqrt(Var),
    Log10(Var),
    SoftmaxScaled(Var, f64),
    ModConst(Var),
    MatMul(Var, Var),
    BiasAdd(Var, Var),
    Outer(Var, Var),
    Reshape(Var),
    SumRows(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    Column(Var, usize),
    Quantize(Var),
    Linear(Arc<dyn ComplexLinearMap>, Var),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::ComplexExp(..) => "complex_exp",
            Op::Conj(..) => "conj",
            Op::InnerProduct(..) => "inner_product",
            Op::AbsSquared(..) => "abs_squared",
            Op::Tanh(..) => "tanh",
            Op::Softplus(..) => "softplus",
            Op::Relu(..) => "relu",
            Op::Cos(..) => "cos",
            Op::Sin(..) => "sin",
            Op::Sqrt(..) => "sqrt",
            Op::Log10(..) => "log10",
            Op::SoftmaxScaled(..) => "softmax_scaled",
            Op::ModConst(..) => "mod_const",
            Op::MatMul(..) => "matmul",
            Op::BiasAdd(..) => "bias_add",
            Op::Outer(..) => "outer",
            Op::Reshape(..) => "reshape",
            Op::SumRows(..) => "sum_rows",
            Op::Mean(..) => "mean",
            Op::ConcatCols(..) => "concat_cols",
            Op::Column(..) => "column",
            Op::Quantize(..) => "quantize",
            Op::Linear(..) => "linear",
        };
        f.write_str(name)
    }
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::InnerProduct(a, b)
            | Op::MatMul(a, b)
            | Op::BiasAdd(a, b)
            | Op::Outer(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::ComplexExp(a)
            | Op::Conj(a)
            | Op::AbsSquared(a)
            | Op::Tanh(a)
            | Op::Softplus(a)
            | Op::Relu(a)
            | Op::Cos(a)
            | Op::Sin(a)
            | Op::Sqrt(a)
            | Op::Log10(a)
            | Op::SoftmaxScaled(a, _)
            | Op::ModConst(a)
            | Op::Reshape(a)
            | Op::SumRows(a)
            | Op::Mean(a)
            | Op::Column(a, _)
            | Op::Quantize(a)
            | Op::Linear(_, a) => vec![*a],
            Op::ConcatCols(vs) => vs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only record of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn real(&self, v: Var) -> Result<&ArrayD<f64>> {
        self.get(v)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient recorded for node {}", v.0)))?
            .as_real()
    }

    pub fn complex(&self, v: Var) -> Result<&ArrayD<Complex64>> {
        self.get(v)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient recorded for node {}", v.0)))?
            .as_complex()
    }
}

// ---- forward kernels shared with the untaped code paths ----

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Euclidean remainder folded into `[0, modulus)`.
pub fn mod_const(x: f64, modulus: f64) -> f64 {
    let r = x.rem_euclid(modulus);
    if r >= modulus {
        0.0
    } else {
        r
    }
}

/// `e^{jx}`.
pub fn cis(x: f64) -> Complex64 {
    let (s, c) = x.sin_cos();
    Complex64::new(c, s)
}

/// Row statistics used by [`softmax_scaled_row`]: `(argmin, argmax, min, max)`.
fn row_extrema(p: &[f64]) -> (usize, usize, f64, f64) {
    let (mut imin, mut imax) = (0, 0);
    for (i, &v) in p.iter().enumerate() {
        if v < p[imin] {
            imin = i;
        }
        if v > p[imax] {
            imax = i;
        }
    }
    (imin, imax, p[imin], p[imax])
}

/// Plain temperature-scaled softmax `w_m ∝ exp(α p_m)`, max-subtracted.
pub fn softmax_row(p: &[f64], alpha: f64) -> Vec<f64> {
    let mx = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = p.iter().map(|v| (alpha * (v - mx)).exp()).collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Softmax over a row after mapping it affinely onto `[0, 1]`
/// (`(p - min) / (max - min)`). A constant row gives uniform weights.
pub fn softmax_scaled_row(p: &[f64], alpha: f64) -> Vec<f64> {
    let (_, _, mn, mx) = row_extrema(p);
    let span = mx - mn;
    if !(span > 0.0) {
        return vec![1.0 / p.len() as f64; p.len()];
    }
    let q: Vec<f64> = p.iter().map(|v| (v - mn) / span).collect();
    softmax_row(&q, alpha)
}

/// `Σ conj(h) w` with four independent accumulators.
pub fn dot_conj(h_re: &[f64], h_im: &[f64], w_re: &[f64], w_im: &[f64]) -> Complex64 {
    let n = h_re.len();
    let mut acc_re = [0.0f64; 4];
    let mut acc_im = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        for l in 0..4 {
            let i = c * 4 + l;
            acc_re[l] += h_re[i] * w_re[i] + h_im[i] * w_im[i];
            acc_im[l] += h_re[i] * w_im[i] - h_im[i] * w_re[i];
        }
    }
    let mut re = (acc_re[0] + acc_re[1]) + (acc_re[2] + acc_re[3]);
    let mut im = (acc_im[0] + acc_im[1]) + (acc_im[2] + acc_im[3]);
    for i in chunks * 4..n {
        re += h_re[i] * w_re[i] + h_im[i] * w_im[i];
        im += h_re[i] * w_im[i] - h_im[i] * w_re[i];
    }
    Complex64::new(re, im)
}

fn as2(a: &ArrayD<f64>) -> Result<ndarray::ArrayView2<'_, f64>> {
    a.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::DimensionMismatch { expected: "2-d".into(), got: format!("{:?}", a.shape()) })
}

fn as1(a: &ArrayD<f64>) -> Result<ndarray::ArrayView1<'_, f64>> {
    a.view()
        .into_dimensionality::<Ix1>()
        .map_err(|_| Error::DimensionMismatch { expected: "1-d".into(), got: format!("{:?}", a.shape()) })
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn real(&self, v: Var) -> Result<&ArrayD<f64>> {
        self.value(v).as_real()
    }

    pub fn complex(&self, v: Var) -> Result<&ArrayD<Complex64>> {
        self.value(v).as_complex()
    }

    /// Scalar value of a size-1 real node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let a = self.real(v)?;
        if a.len() != 1 {
            return Err(shape_error(&[], a.shape()));
        }
        Ok(*a.iter().next().expect("len checked"))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_error(sa, sb));
        }
        if self.value(a).is_complex() != self.value(b).is_complex() {
            return Err(kind_error(
                if self.value(a).is_complex() { "complex" } else { "real" },
                if self.value(b).is_complex() { "complex" } else { "real" },
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = match (self.value(a), self.value(b)) {
            (Tensor::Real(x), Tensor::Real(y)) => Tensor::Real(x + y),
            (Tensor::Complex(x), Tensor::Complex(y)) => Tensor::Complex(x + y),
            _ => unreachable!(),
        };
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = match (self.value(a), self.value(b)) {
            (Tensor::Real(x), Tensor::Real(y)) => Tensor::Real(x - y),
            (Tensor::Complex(x), Tensor::Complex(y)) => Tensor::Complex(x - y),
            _ => unreachable!(),
        };
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = match (self.value(a), self.value(b)) {
            (Tensor::Real(x), Tensor::Real(y)) => Tensor::Real(x * y),
            (Tensor::Complex(x), Tensor::Complex(y)) => Tensor::Complex(x * y),
            _ => unreachable!(),
        };
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = match self.value(a) {
            Tensor::Real(x) => Tensor::Real(x.mapv(|v| v * k)),
            Tensor::Complex(x) => Tensor::Complex(x.mapv(|v| v * k)),
        };
        self.push(Op::Scale(a, k), v)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = Tensor::Real(self.real(a)?.mapv(|v| v + k));
        Ok(self.push(Op::Offset(a), v))
    }

    /// `e^{j a}` for real `a`.
    pub fn complex_exp(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::Complex(self.real(a)?.mapv(cis));
        Ok(self.push(Op::ComplexExp(a), v))
    }

    pub fn conj(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::Complex(self.complex(a)?.mapv(|z| z.conj()));
        Ok(self.push(Op::Conj(a), v))
    }

    /// `Σ_k conj(h[.., k]) w[.., k]` over the last axis.
    pub fn inner_product(&mut self, h: Var, w: Var) -> Result<Var> {
        self.same_shape(h, w)?;
        let (hv, wv) = (self.complex(h)?, self.complex(w)?);
        let k = *hv.shape().last().ok_or_else(|| shape_error(&[1], &[]))?;
        let out_shape: Vec<usize> = hv.shape()[..hv.ndim() - 1].to_vec();
        let hs = hv.as_standard_layout();
        let ws = wv.as_standard_layout();
        let hsl = hs.as_slice().expect("standard layout");
        let wsl = ws.as_slice().expect("standard layout");
        let rows = if k == 0 { 0 } else { hsl.len() / k };
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (hr, wr) = (&hsl[r * k..(r + 1) * k], &wsl[r * k..(r + 1) * k]);
            let h_re: Vec<f64> = hr.iter().map(|z| z.re).collect();
            let h_im: Vec<f64> = hr.iter().map(|z| z.im).collect();
            let w_re: Vec<f64> = wr.iter().map(|z| z.re).collect();
            let w_im: Vec<f64> = wr.iter().map(|z| z.im).collect();
            out.push(dot_conj(&h_re, &h_im, &w_re, &w_im));
        }
        let v = Tensor::Complex(ArrayD::from_shape_vec(IxDyn(&out_shape), out).expect("shape"));
        Ok(self.push(Op::InnerProduct(h, w), v))
    }

    pub fn abs_squared(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::Real(self.complex(a)?.mapv(|z| z.norm_sqr()));
        Ok(self.push(Op::AbsSquared(a), v))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let v = Tensor::Real(self.real(a)?.mapv(f));
        Ok(self.push(op, v))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn log10(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log10(a), f64::log10)
    }

    /// Reduction modulo a constant; the backward pass is the identity.
    pub fn mod_const(&mut self, a: Var, modulus: f64) -> Result<Var> {
        if !(modulus > 0.0) {
            return Err(Error::InvalidArgument(format!("modulus must be positive, got {modulus}")));
        }
        self.unary(a, Op::ModConst(a), |v| mod_const(v, modulus))
    }

    /// Row-wise softmax of `alpha * (p - min) / (max - min)` over the last
    /// axis of a 1-d or 2-d real tensor.
    pub fn softmax_scaled(&mut self, a: Var, alpha: f64) -> Result<Var> {
        let x = self.real(a)?;
        let k = *x.shape().last().ok_or_else(|| shape_error(&[1], &[]))?;
        let xs = x.as_standard_layout();
        let sl = xs.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(sl.len());
        if k > 0 {
            for row in sl.chunks(k) {
                out.extend(softmax_scaled_row(row, alpha));
            }
        }
        let v = Tensor::Real(ArrayD::from_shape_vec(x.raw_dim(), out).expect("shape"));
        Ok(self.push(Op::SoftmaxScaled(a, alpha), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (as2(self.real(a)?)?, as2(self.real(b)?)?);
        if x.ncols() != y.nrows() {
            return Err(shape_error(&[x.ncols()], &[y.nrows()]));
        }
        let v = Tensor::Real(x.dot(&y).into_dyn());
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// `a[b, k] + bias[k]`.
    pub fn bias_add(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (as2(self.real(a)?)?, as1(self.real(bias)?)?);
        if x.ncols() != b.len() {
            return Err(shape_error(&[x.ncols()], &[b.len()]));
        }
        let v = Tensor::Real((&x + &b).into_dyn());
        Ok(self.push(Op::BiasAdd(a, bias), v))
    }

    /// `out[i, j] = a[i] * b[j]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (as1(self.real(a)?)?, as1(self.real(b)?)?);
        let mut out = Array2::zeros((x.len(), y.len()));
        for (i, xi) in x.iter().enumerate() {
            for (j, yj) in y.iter().enumerate() {
                out[[i, j]] = xi * yj;
            }
        }
        Ok(self.push(Op::Outer(a, b), Tensor::Real(out.into_dyn())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = match self.value(a) {
            Tensor::Real(x) => Tensor::Real(
                x.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(shape))
                    .map_err(|_| shape_error(shape, x.shape()))?,
            ),
            Tensor::Complex(x) => Tensor::Complex(
                x.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(shape))
                    .map_err(|_| shape_error(shape, x.shape()))?,
            ),
        };
        Ok(self.push(Op::Reshape(a), v))
    }

    /// Sum over the last axis of a 2-d real tensor, giving a 1-d tensor.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let x = as2(self.real(a)?)?;
        let v = Tensor::Real(x.sum_axis(Axis(1)).into_dyn());
        Ok(self.push(Op::SumRows(a), v))
    }

    /// Mean of all entries, as a 0-d tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.real(a)?;
        if x.is_empty() {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let m = x.sum() / x.len() as f64;
        Ok(self.push(Op::Mean(a), Tensor::scalar(m)))
    }

    /// Stacks equally long 1-d tensors as the columns of a matrix.
    pub fn concat_cols(&mut self, cols: &[Var]) -> Result<Var> {
        let first = as1(self.real(cols[0])?)?.len();
        let mut out = Array2::zeros((first, cols.len()));
        for (j, c) in cols.iter().enumerate() {
            let col = as1(self.real(*c)?)?;
            if col.len() != first {
                return Err(shape_error(&[first], &[col.len()]));
            }
            out.column_mut(j).assign(&col);
        }
        Ok(self.push(Op::ConcatCols(cols.to_vec()), Tensor::Real(out.into_dyn())))
    }

    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let x = as2(self.real(a)?)?;
        if j >= x.ncols() {
            return Err(shape_error(&[x.ncols()], &[j]));
        }
        let v = Tensor::Real(x.column(j).to_owned().into_dyn());
        Ok(self.push(Op::Column(a, j), v))
    }

    /// Uniform quantization with a straight-through backward pass.
    pub fn quantize(&mut self, a: Var, q: Quantizer) -> Result<Var> {
        let v = Tensor::Real(self.real(a)?.mapv(|x| q.quantize(x)));
        Ok(self.push(Op::Quantize(a), v))
    }

    pub fn linear(&mut self, map: Arc<dyn ComplexLinearMap>, w: Var) -> Result<Var> {
        let wv = self.complex(w)?;
        let expected = map.input_shape();
        if wv.shape() != expected.as_slice() {
            return Err(shape_error(&expected, wv.shape()));
        }
        let v = Tensor::Complex(map.apply(wv));
        Ok(self.push(Op::Linear(map, w), v))
    }

    /// Reverse sweep from a real scalar `loss`.
    ///
    /// Every trainable leaf gets a gradient; leaves the loss does not depend
    /// on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.is_complex() || lv.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "loss must be a real scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(match lv {
            Tensor::Real(a) => Tensor::Real(ArrayD::ones(a.raw_dim())),
            Tensor::Complex(_) => unreachable!(),
        });
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for input in node.op.inputs() {
                assert!(input.0 < i, "tape is not topologically ordered");
            }
            let contributions = self.node_backward(node, &g)?;
            grads[i] = Some(g);
            for (input, contrib) in contributions {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.accumulate(contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[i].is_none() {
                grads[i] = Some(node.value.zeros_like());
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => {
                let neg = match g {
                    Tensor::Real(x) => Tensor::Real(-x),
                    Tensor::Complex(x) => Tensor::Complex(x.mapv(|z| -z)),
                };
                vec![(*a, g.clone()), (*b, neg)]
            }
            Op::Mul(a, b) => match (g, val(*a), val(*b)) {
                (Tensor::Real(g), Tensor::Real(x), Tensor::Real(y)) => {
                    vec![(*a, Tensor::Real(g * y)), (*b, Tensor::Real(g * x))]
                }
                (Tensor::Complex(g), Tensor::Complex(x), Tensor::Complex(y)) => {
                    vec![(*a, Tensor::Complex(g * y)), (*b, Tensor::Complex(g * x))]
                }
                _ => unreachable!(),
            },
            Op::Scale(a, k) => {
                let t = match g {
                    Tensor::Real(x) => Tensor::Real(x.mapv(|v| v * k)),
                    Tensor::Complex(x) => Tensor::Complex(x.mapv(|v| v * k)),
                };
                vec![(*a, t)]
            }
            Op::Offset(a) | Op::ModConst(a) | Op::Quantize(a) => vec![(*a, g.clone())],
            Op::ComplexExp(a) => {
                let (g, y) = (g.as_complex()?, node.value.as_complex()?);
                let mut d = ArrayD::zeros(g.raw_dim());
                ndarray::Zip::from(&mut d).and(g).and(y).for_each(|d, g, y| {
                    *d = (g * Complex64::i() * y).re;
                });
                vec![(*a, Tensor::Real(d))]
            }
            Op::Conj(a) => vec![(*a, Tensor::Complex(g.as_complex()?.mapv(|z| z.conj())))],
            Op::InnerProduct(h, w) => {
                let g = g.as_complex()?;
                let (hv, wv) = (val(*h).as_complex()?, val(*w).as_complex()?);
                let gb = g.clone().insert_axis(Axis(g.ndim()));
                let gw = hv.mapv(|z| z.conj()) * &gb;
                let gh = (wv * &gb).mapv(|z| z.conj());
                vec![(*w, Tensor::Complex(gw)), (*h, Tensor::Complex(gh))]
            }
            Op::AbsSquared(a) => {
                let (g, z) = (g.as_real()?, val(*a).as_complex()?);
                let mut d = ArrayD::zeros(z.raw_dim());
                ndarray::Zip::from(&mut d).and(g).and(z).for_each(|d, g, z| {
                    *d = z.conj() * (2.0 * g);
                });
                vec![(*a, Tensor::Complex(d))]
            }
            Op::Tanh(a) => {
                let (g, y) = (g.as_real()?, node.value.as_real()?);
                vec![(*a, Tensor::Real(g * &y.mapv(|t| 1.0 - t * t)))]
            }
            Op::Softplus(a) => {
                let (g, x) = (g.as_real()?, val(*a).as_real()?);
                vec![(*a, Tensor::Real(g * &x.mapv(sigmoid)))]
            }
            Op::Relu(a) => {
                let (g, x) = (g.as_real()?, val(*a).as_real()?);
                vec![(*a, Tensor::Real(g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })))]
            }
            Op::Cos(a) => {
                let (g, x) = (g.as_real()?, val(*a).as_real()?);
                vec![(*a, Tensor::Real(g * &x.mapv(|v| -v.sin())))]
            }
            Op::Sin(a) => {
                let (g, x) = (g.as_real()?, val(*a).as_real()?);
                vec![(*a, Tensor::Real(g * &x.mapv(f64::cos)))]
            }
            Op::Sqrt(a) => {
                let (g, y) = (g.as_real()?, node.value.as_real()?);
                vec![(*a, Tensor::Real(g * &y.mapv(|s| 0.5 / s)))]
            }
            Op::Log10(a) => {
                let (g, x) = (g.as_real()?, val(*a).as_real()?);
                let ln10 = std::f64::consts::LN_10;
                vec![(*a, Tensor::Real(g * &x.mapv(|v| 1.0 / (v * ln10))))]
            }
            Op::SoftmaxScaled(a, alpha) => {
                vec![(*a, Tensor::Real(softmax_scaled_backward(val(*a).as_real()?, node.value.as_real()?, g.as_real()?, *alpha)))]
            }
            Op::MatMul(a, b) => {
                let g2 = as2(g.as_real()?)?;
                let (x, y) = (as2(val(*a).as_real()?)?, as2(val(*b).as_real()?)?);
                vec![
                    (*a, Tensor::Real(g2.dot(&y.t()).into_dyn())),
                    (*b, Tensor::Real(x.t().dot(&g2).into_dyn())),
                ]
            }
            Op::BiasAdd(a, b) => {
                let g2 = as2(g.as_real()?)?;
                vec![(*a, g.clone()), (*b, Tensor::Real(g2.sum_axis(Axis(0)).into_dyn()))]
            }
            Op::Outer(a, b) => {
                let g2 = as2(g.as_real()?)?;
                let (x, y) = (as1(val(*a).as_real()?)?, as1(val(*b).as_real()?)?);
                vec![
                    (*a, Tensor::Real(g2.dot(&y).into_dyn())),
                    (*b, Tensor::Real(g2.t().dot(&x).into_dyn())),
                ]
            }
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                let t = match g {
                    Tensor::Real(x) => Tensor::Real(
                        x.as_standard_layout().into_owned().into_shape_with_order(IxDyn(&shape)).expect("same size"),
                    ),
                    Tensor::Complex(x) => Tensor::Complex(
                        x.as_standard_layout().into_owned().into_shape_with_order(IxDyn(&shape)).expect("same size"),
                    ),
                };
                vec![(*a, t)]
            }
            Op::SumRows(a) => {
                let g1 = as1(g.as_real()?)?;
                let shape = val(*a).shape();
                let mut d = Array2::zeros((shape[0], shape[1]));
                for (mut row, gv) in d.rows_mut().into_iter().zip(g1.iter()) {
                    row.fill(*gv);
                }
                vec![(*a, Tensor::Real(d.into_dyn()))]
            }
            Op::Mean(a) => {
                let gs = *g.as_real()?.iter().next().expect("scalar");
                let x = val(*a).as_real()?;
                let k = gs / x.len() as f64;
                vec![(*a, Tensor::Real(ArrayD::from_elem(x.raw_dim(), k)))]
            }
            Op::ConcatCols(cols) => {
                let g2 = as2(g.as_real()?)?;
                cols.iter()
                    .enumerate()
                    .map(|(j, c)| (*c, Tensor::Real(g2.column(j).to_owned().into_dyn())))
                    .collect()
            }
            Op::Column(a, j) => {
                let g1 = as1(g.as_real()?)?;
                let shape = val(*a).shape();
                let mut d = Array2::zeros((shape[0], shape[1]));
                d.column_mut(*j).assign(&g1);
                vec![(*a, Tensor::Real(d.into_dyn()))]
            }
            Op::Linear(map, w) => {
                let gw = map.apply_transpose(val(*w).as_complex()?, g.as_complex()?);
                vec![(*w, Tensor::Complex(gw))]
            }
        };
        Ok(out)
    }
}

fn softmax_scaled_backward(p: &ArrayD<f64>, w: &ArrayD<f64>, g: &ArrayD<f64>, alpha: f64) -> ArrayD<f64> {
    let k = *p.shape().last().expect("non-scalar");
    let ps = p.as_standard_layout();
    let ws = w.as_standard_layout();
    let gs = g.as_standard_layout();
    let (psl, wsl, gsl) = (
        ps.as_slice().expect("standard"),
        ws.as_slice().expect("standard"),
        gs.as_slice().expect("standard"),
    );
    let mut out = vec![0.0; psl.len()];
    for r in 0..psl.len() / k {
        let (p, w, g) = (&psl[r * k..(r + 1) * k], &wsl[r * k..(r + 1) * k], &gsl[r * k..(r + 1) * k]);
        let (imin, imax, mn, mx) = row_extrema(p);
        let span = mx - mn;
        if !(span > 0.0) {
            continue;
        }
        let dot: f64 = w.iter().zip(g).map(|(w, g)| w * g).sum();
        let o = &mut out[r * k..(r + 1) * k];
        let mut to_min = 0.0;
        let mut to_max = 0.0;
        for j in 0..k {
            let gq = alpha * w[j] * (g[j] - dot);
            let q = (p[j] - mn) / span;
            o[j] += gq / span;
            to_min += gq * (q - 1.0) / span;
            to_max -= gq * q / span;
        }
        o[imin] += to_min;
        o[imax] += to_max;
    }
    ArrayD::from_shape_vec(p.raw_dim(), out).expect("shape")
}
