use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type for tensors. Training runs in `f32`; gradient checks in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + 'static
{
    fn erf(self) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits scalar")
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Builds a `rows × cols` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Tensor::from_vec(&[rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Size of the trailing axis (1 for scalars).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: F) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn sum_squares(&self) -> F {
        self.data.iter().fold(F::zero(), |acc, &x| acc + x * x)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan())).collect(),
        }
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn hcat(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.rows() != b.rows() {
            return Err(Error::shape("hcat", a.shape(), b.shape()));
        }
        let (ca, cb) = (a.cols(), b.cols());
        let mut data = Vec::with_capacity(a.len() + b.len());
        for r in 0..a.rows() {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        Tensor::from_vec(&[a.rows(), ca + cb], data)
    }

    /// Splits a matrix column-wise at `at`.
    pub fn hsplit(&self, at: usize) -> (Tensor<F>, Tensor<F>) {
        let (rows, cols) = (self.rows(), self.cols());
        let mut left = Vec::with_capacity(rows * at);
        let mut right = Vec::with_capacity(rows * (cols - at));
        for r in 0..rows {
            let row = self.row(r);
            left.extend_from_slice(&row[..at]);
            right.extend_from_slice(&row[at..]);
        }
        (
            Tensor { shape: vec![rows, at], data: left },
            Tensor { shape: vec![rows, cols - at], data: right },
        )
    }
}

/// `out[j] += sum_i x[i] * w[i, j]` for a row-major `w` with `out.len()` columns.
#[inline]
pub(crate) fn vec_mat_acc<F: Scalar>(x: &[F], w: &[F], out: &mut [F]) {
    let n = out.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == F::zero() {
            continue;
        }
        let wr = &w[i * n..(i + 1) * n];
        for (o, &wv) in out.iter_mut().zip(wr) {
            *o += xi * wv;
        }
    }
}

/// `out[i] += sum_j w[i, j] * d[j]`, i.e. `out += W d`.
#[inline]
pub(crate) fn mat_vec_acc<F: Scalar>(w: &[F], d: &[F], out: &mut [F]) {
    let n = d.len();
    for (i, o) in out.iter_mut().enumerate() {
        let wr = &w[i * n..(i + 1) * n];
        let mut s = F::zero();
        for (&wv, &dv) in wr.iter().zip(d) {
            s += wv * dv;
        }
        *o += s;
    }
}

/// `g[i, j] += x[i] * d[j]`.
#[inline]
pub(crate) fn outer_acc<F: Scalar>(x: &[F], d: &[F], g: &mut [F]) {
    let n = d.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == F::zero() {
            continue;
        }
        let gr = &mut g[i * n..(i + 1) * n];
        for (gv, &dv) in gr.iter_mut().zip(d) {
            *gv += xi * dv;
        }
    }
}
