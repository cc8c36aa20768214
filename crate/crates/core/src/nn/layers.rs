//! Feed-forward building blocks with hand-written backward passes.
//!
//! Backward functions accumulate parameter gradients into caller-provided
//! tensors and return the gradient with respect to the layer input.

use rand::Rng;

use super::tensor::{mat_vec_acc, outer_acc, vec_mat_acc, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// `y = x W + b` for `x: [T, in]`, `W: [in, out]`, `b: [out]`.
pub fn linear<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if w.shape().len() != 2 || x.cols() != w.shape()[0] {
        return Err(Error::shape("linear input vs weight", x.shape(), w.shape()));
    }
    let out = w.shape()[1];
    if b.len() != out {
        return Err(Error::shape("linear weight vs bias", w.shape(), b.shape()));
    }
    let rows = x.rows();
    let mut y = Tensor::zeros(&[rows, out]);
    for r in 0..rows {
        let yr = y.row_mut(r);
        yr.copy_from_slice(b.data());
        vec_mat_acc(x.row(r), w.data(), yr);
    }
    Ok(y)
}

pub fn linear_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    dw: &mut Tensor<F>,
    db: &mut Tensor<F>,
) -> Tensor<F> {
    let mut dx = Tensor::zeros(&[x.rows(), x.cols()]);
    for r in 0..x.rows() {
        let d = dy.row(r);
        outer_acc(x.row(r), d, dw.data_mut());
        for (g, &v) in db.data_mut().iter_mut().zip(d) {
            *g += v;
        }
        mat_vec_acc(w.data(), d, dx.row_mut(r));
    }
    dx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Exact form `x Φ(x)` with the Gaussian CDF via `erf`.
    Gelu,
    Relu,
    Sigmoid,
}

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            Activation::Gelu => F::lit(0.5) * x * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf()),
            Activation::Relu => x.max(F::zero()),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// `dy/dx` given the input `x` and the output `y`.
    #[inline]
    pub fn derivative<F: Scalar>(self, x: F, y: F) -> F {
        match self {
            Activation::Gelu => {
                let cdf = F::lit(0.5) * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
                let pdf = (-F::lit(0.5) * x * x).exp() * F::lit(0.398_942_280_401_432_7);
                cdf + x * pdf
            }
            Activation::Relu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Sigmoid => y * (F::one() - y),
        }
    }

    pub fn forward<F: Scalar>(self, x: &Tensor<F>) -> Tensor<F> {
        let data = x.data().iter().map(|&v| self.apply(v)).collect();
        Tensor::from_vec(x.shape(), data).expect("same shape")
    }

    pub fn backward<F: Scalar>(self, x: &Tensor<F>, y: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .zip(dy.data())
            .map(|((&xv, &yv), &d)| d * self.derivative(xv, yv))
            .collect();
        Tensor::from_vec(x.shape(), data).expect("same shape")
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<F> {
    xhat: Tensor<F>,
    inv_std: Vec<F>,
}

/// Per-row normalization over the feature axis.
pub fn layer_norm<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: f64,
) -> Result<(Tensor<F>, LayerNormCache<F>)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape("layer_norm gain/bias", x.shape(), gamma.shape()));
    }
    let n = F::from_usize(d).unwrap();
    let eps = F::lit(eps);
    let mut y = Tensor::zeros(&[x.rows(), d]);
    let mut xhat = Tensor::zeros(&[x.rows(), d]);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().fold(F::zero(), |a, &v| a + v) / n;
        let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let is = F::one() / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (h, &v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
        let yr = y.row_mut(r);
        for j in 0..d {
            yr[j] = gamma.data()[j] * xhat.row(r)[j] + beta.data()[j];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

pub fn layer_norm_backward<F: Scalar>(
    cache: &LayerNormCache<F>,
    gamma: &Tensor<F>,
    dy: &Tensor<F>,
    dgamma: &mut Tensor<F>,
    dbeta: &mut Tensor<F>,
) -> Tensor<F> {
    let d = cache.xhat.cols();
    let n = F::from_usize(d).unwrap();
    let mut dx = Tensor::zeros(&[dy.rows(), d]);
    let mut dxhat = vec![F::zero(); d];
    for r in 0..dy.rows() {
        let xh = cache.xhat.row(r);
        let g = dy.row(r);
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        for j in 0..d {
            dgamma.data_mut()[j] += g[j] * xh[j];
            dbeta.data_mut()[j] += g[j];
            dxhat[j] = g[j] * gamma.data()[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xh[j];
        }
        let scale = cache.inv_std[r] / n;
        let dr = dx.row_mut(r);
        for j in 0..d {
            dr[j] = scale * (n * dxhat[j] - sum_dxhat - xh[j] * sum_dxhat_xhat);
        }
    }
    dx
}

/// Inverted dropout. Returns the per-element multiplier for the backward pass
/// (`None` when the layer is an identity).
pub fn dropout<F: Scalar>(
    x: &Tensor<F>,
    rate: f64,
    training: bool,
    stream: Stream,
) -> Result<(Tensor<F>, Option<Vec<F>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let mut rng = stream.rng();
    let keep = F::lit(1.0 / (1.0 - rate));
    let mask: Vec<F> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::from_vec(x.shape(), data)?, Some(mask)))
}

pub fn dropout_backward<F: Scalar>(mask: Option<&[F]>, dy: &Tensor<F>) -> Tensor<F> {
    match mask {
        None => dy.clone(),
        Some(m) => {
            let data = dy.data().iter().zip(m).map(|(&d, &k)| d * k).collect();
            Tensor::from_vec(dy.shape(), data).expect("same shape")
        }
    }
}

pub fn embedding_lookup<F: Scalar>(table: &Tensor<F>, ids: &[usize]) -> Result<Tensor<F>> {
    let (v, d) = (table.rows(), table.cols());
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (t, &id) in ids.iter().enumerate() {
        if id >= v {
            return Err(Error::OutOfRange { index: id, len: v });
        }
        out.row_mut(t).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Scatters row gradients into the table gradient; repeated ids accumulate.
pub fn embedding_backward<F: Scalar>(ids: &[usize], dy: &Tensor<F>, dtable: &mut Tensor<F>) {
    for (t, &id) in ids.iter().enumerate() {
        let src = dy.row(t);
        for (g, &v) in dtable.row_mut(id).iter_mut().zip(src) {
            *g += v;
        }
    }
}
