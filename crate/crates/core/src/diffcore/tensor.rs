use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor of scalars.
///
/// Values are always finite: [`Tensor::new`] rejects NaN and infinities.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let t = Self::from_parts(shape, data)?;
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(t)
    }

    /// Like [`Tensor::new`] but without the finiteness screen.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::BadShape { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(shape.to_vec(), vec![S::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self::raw(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn scalar(v: S) -> Self {
        Self::raw(vec![], vec![v])
    }

    /// Vector of shape `[n]`.
    pub fn vector(data: Vec<S>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    /// Rows and columns of a matrix; vectors count as a single row.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self::raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self::raw(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub(crate) fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    /// Matrix product of `[m, k]` and `[k, n]`, optionally transposing
    /// either operand first.
    pub fn matmul_t(&self, trans_a: bool, other: &Self, trans_b: bool) -> Result<Self> {
        let (ar, ac) = self.dims2("matmul")?;
        let (br, bc) = other.dims2("matmul")?;
        let (m, k, a_strides) = if trans_a {
            (ac, ar, (1, ac as isize))
        } else {
            (ar, ac, (ac as isize, 1))
        };
        let (k2, n, b_strides) = if trans_b {
            (bc, br, (1, bc as isize))
        } else {
            (br, bc, (bc as isize, 1))
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            &self.data,
            a_strides,
            &other.data,
            b_strides,
            S::zero(),
            &mut out,
        );
        Ok(Self::raw(vec![m, n], out))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_t(false, other, false)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::from_parts(shape, self.data.clone())
    }
}

/// Logistic sigmoid evaluated without overflow for large |z|.
pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus<S: Scalar>(z: S) -> S {
    z.max(S::zero()) + (-z.abs()).exp().ln_1p()
}

/// `ln σ(z) = -softplus(-z)`.
pub fn log_sigmoid<S: Scalar>(z: S) -> S {
    -softplus(-z)
}

pub fn silu<S: Scalar>(z: S) -> S {
    z * sigmoid(z)
}
