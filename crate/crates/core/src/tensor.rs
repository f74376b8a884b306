//! Dense multi-way arrays and the mode-wise operations the Kronecker
//! algebra is built on.
//!
//! Storage is row-major (last index fastest). The mode-`k` matricization of
//! a tensor with shape `(I_0, .., I_{K-1})` is the `I_k x prod_{j != k} I_j`
//! matrix whose column index enumerates the remaining modes in ascending
//! order, again row-major among themselves. Every identity in this crate is
//! written against that convention.

use crate::error::{Error, Result};
use crate::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {len} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        let mut idx = vec![0usize; shape.len()];
        for v in t.data.iter_mut() {
            *v = f(&idx);
            increment(&mut idx, shape);
        }
        Ok(t)
    }

    /// A matrix viewed as an order-2 tensor.
    pub fn from_matrix(m: &Matrix) -> Self {
        let (r, c) = m.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(m[(i, j)]);
            }
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// Same data, new shape with the same number of elements.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Extent of the leading (subject) mode and the product of the rest.
    pub fn split_leading(&self) -> (usize, usize) {
        let n = self.shape[0];
        (n, self.data.len() / n)
    }

    /// Row `i` of the leading mode as a tensor of the trailing shape.
    pub fn leading_slice(&self, i: usize) -> DenseTensor {
        let (_, inner) = self.split_leading();
        let shape = if self.shape.len() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        DenseTensor {
            shape,
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Select rows of the leading mode, in the given order.
    pub fn select_leading(&self, rows: &[usize]) -> Result<DenseTensor> {
        let (n, inner) = self.split_leading();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= n {
                return Err(Error::InvalidArgument(format!(
                    "row {r} out of range for leading extent {n}"
                )));
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        DenseTensor::new(shape, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseTensor {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &DenseTensor, f: impl Fn(f64, f64) -> f64) -> Result<DenseTensor> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch(format!(
                "shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(DenseTensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sub(&self, other: &DenseTensor) -> Result<DenseTensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &DenseTensor) -> Result<DenseTensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mode-`mode` matricization (see module docs for the column order).
    pub fn matricize(&self, mode: usize) -> Result<Matrix> {
        self.check_mode(mode)?;
        let rows = self.shape[mode];
        let cols = self.data.len() / rows;
        let outer: usize = self.shape[..mode].iter().product();
        let inner: usize = self.shape[mode + 1..].iter().product();
        let mut m = Matrix::zeros(rows, cols);
        for o in 0..outer {
            for r in 0..rows {
                let src = &self.data[(o * rows + r) * inner..(o * rows + r + 1) * inner];
                for (i, &v) in src.iter().enumerate() {
                    m[(r, o * inner + i)] = v;
                }
            }
        }
        Ok(m)
    }

    /// Inverse of [`DenseTensor::matricize`].
    pub fn fold(m: &Matrix, mode: usize, shape: &[usize]) -> Result<DenseTensor> {
        validate_shape(shape)?;
        if mode >= shape.len() {
            return Err(Error::ModeOutOfRange {
                mode,
                order: shape.len(),
            });
        }
        let rows = shape[mode];
        let total: usize = shape.iter().product();
        if m.nrows() != rows || m.ncols() * rows != total {
            return Err(Error::DimensionMismatch(format!(
                "cannot fold a {}x{} matrix into shape {shape:?} along mode {mode}",
                m.nrows(),
                m.ncols()
            )));
        }
        let outer: usize = shape[..mode].iter().product();
        let inner: usize = shape[mode + 1..].iter().product();
        let mut data = vec![0.0; total];
        for o in 0..outer {
            for r in 0..rows {
                let dst = &mut data[(o * rows + r) * inner..(o * rows + r + 1) * inner];
                for (i, v) in dst.iter_mut().enumerate() {
                    *v = m[(r, o * inner + i)];
                }
            }
        }
        Ok(DenseTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// `self x_mode m`: every mode-`mode` fiber is multiplied by `m`.
    pub fn mode_product(&self, m: &Matrix, mode: usize) -> Result<DenseTensor> {
        self.check_mode(mode)?;
        let n = self.shape[mode];
        if m.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "mode-{mode} product needs a matrix with {n} columns, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let rows = m.nrows();
        if rows == 0 {
            return Err(Error::DimensionMismatch(
                "mode product with an empty matrix".into(),
            ));
        }
        let outer: usize = self.shape[..mode].iter().product();
        let inner: usize = self.shape[mode + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape[mode] = rows;
        let mut out = vec![0.0; outer * rows * inner];
        for o in 0..outer {
            let src = &self.data[o * n * inner..(o + 1) * n * inner];
            let dst = &mut out[o * rows * inner..(o + 1) * rows * inner];
            for r in 0..rows {
                let d = &mut dst[r * inner..(r + 1) * inner];
                for j in 0..n {
                    let a = m[(r, j)];
                    if a == 0.0 {
                        continue;
                    }
                    let s = &src[j * inner..(j + 1) * inner];
                    for (x, &y) in d.iter_mut().zip(s) {
                        *x += a * y;
                    }
                }
            }
        }
        Ok(DenseTensor { shape, data: out })
    }

    /// Apply one matrix per mode, skipping `None` entries.
    pub fn multi_mode_product(&self, factors: &[Option<&Matrix>]) -> Result<DenseTensor> {
        if factors.len() != self.order() {
            return Err(Error::DimensionMismatch(format!(
                "{} factors for a tensor of order {}",
                factors.len(),
                self.order()
            )));
        }
        let mut out: Option<DenseTensor> = None;
        for (mode, f) in factors.iter().enumerate() {
            if let Some(m) = f {
                let next = out.as_ref().unwrap_or(self).mode_product(m, mode)?;
                out = Some(next);
            }
        }
        Ok(out.unwrap_or_else(|| self.clone()))
    }

    /// Entrywise scaling of mode-`mode` slices by `w` (a diagonal mode product).
    pub fn scale_mode(&mut self, w: &[f64], mode: usize) -> Result<()> {
        self.check_mode(mode)?;
        let n = self.shape[mode];
        if w.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for mode extent {n}",
                w.len()
            )));
        }
        let inner: usize = self.shape[mode + 1..].iter().product();
        for (k, chunk) in self.data.chunks_mut(inner).enumerate() {
            let s = w[k % n];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        Ok(())
    }

    /// Sum over every mode but `keep`, after weighting each other mode by the
    /// given vector (or 1 when `None`).
    pub fn weighted_marginal(&self, weights: &[Option<&[f64]>], keep: usize) -> Result<Vec<f64>> {
        self.check_mode(keep)?;
        if weights.len() != self.order() {
            return Err(Error::DimensionMismatch(format!(
                "{} weight vectors for order {}",
                weights.len(),
                self.order()
            )));
        }
        for (m, w) in weights.iter().enumerate() {
            if let Some(w) = w {
                if w.len() != self.shape[m] {
                    return Err(Error::DimensionMismatch(format!(
                        "mode {m}: {} weights for extent {}",
                        w.len(),
                        self.shape[m]
                    )));
                }
            }
        }
        let mut out = vec![0.0; self.shape[keep]];
        let mut idx = vec![0usize; self.order()];
        for &v in &self.data {
            let mut p = v;
            for (m, w) in weights.iter().enumerate() {
                if m != keep {
                    if let Some(w) = w {
                        p *= w[idx[m]];
                    }
                }
            }
            out[idx[keep]] += p;
            increment(&mut idx, &self.shape);
        }
        Ok(out)
    }

    /// Contract `self` with `other` over every mode except `mode`, giving
    /// `self_(mode) * other_(mode)^T`.
    pub fn mode_gram(&self, other: &DenseTensor, mode: usize) -> Result<Matrix> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch(format!(
                "shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        self.check_mode(mode)?;
        let n = self.shape[mode];
        let outer: usize = self.shape[..mode].iter().product();
        let inner: usize = self.shape[mode + 1..].iter().product();
        let mut g = Matrix::zeros(n, n);
        for o in 0..outer {
            let base = o * n * inner;
            for a in 0..n {
                let x = &self.data[base + a * inner..base + (a + 1) * inner];
                for b in 0..n {
                    let y = &other.data[base + b * inner..base + (b + 1) * inner];
                    g[(a, b)] += x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
                }
            }
        }
        Ok(g)
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.shape.len() {
            Err(Error::ModeOutOfRange {
                mode,
                order: self.shape.len(),
            })
        } else {
            Ok(())
        }
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidShape(
            "tensor order must be at least 1".into(),
        ));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape(format!(
            "all extents must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

/// Advance a row-major multi-index; wraps to zero after the last element.
pub(crate) fn increment(idx: &mut [usize], shape: &[usize]) {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return;
        }
        idx[k] = 0;
    }
}

/// `(A_1 ⊗ .. ⊗ A_K) v` through successive mode products; the Kronecker
/// product itself is never formed.
pub fn kron_matvec(factors: &[Matrix], v: &[f64]) -> Result<Vec<f64>> {
    if factors.is_empty() {
        return Err(Error::InvalidArgument("no Kronecker factors".into()));
    }
    let shape: Vec<usize> = factors.iter().map(|f| f.ncols()).collect();
    let expected: usize = shape.iter().product();
    if expected != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "Kronecker factors take a vector of length {expected}, got {}",
            v.len()
        )));
    }
    let t = DenseTensor::new(shape, v.to_vec())?;
    let refs: Vec<Option<&Matrix>> = factors.iter().map(Some).collect();
    Ok(t.multi_mode_product(&refs)?.into_data())
}

/// Dense Kronecker product; for oracles and small matrices only.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = Matrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = s * b[(k, l)];
                }
            }
        }
    }
    out
}

pub fn kron_all(factors: &[Matrix]) -> Matrix {
    let mut it = factors.iter();
    let first = it.next().cloned().unwrap_or_else(|| Matrix::identity(1, 1));
    it.fold(first, |acc, f| kron(&acc, f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize]) -> DenseTensor {
        let n: usize = shape.iter().product();
        DenseTensor::new(shape.to_vec(), (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(DenseTensor::new(vec![2, 0], vec![]).is_err());
        assert!(DenseTensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(DenseTensor::zeros(&[]).is_err());
    }

    #[test]
    fn matricize_order_two() {
        let t = seq(&[2, 3]);
        let m0 = t.matricize(0).unwrap();
        let m1 = t.matricize(1).unwrap();
        let expect = Matrix::from_row_slice(2, 3, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m0, expect);
        assert_eq!(m1, expect.transpose());
    }

    #[test]
    fn matricize_order_three_by_index_map() {
        let t = seq(&[2, 3, 2]);
        let m = t.matricize(1).unwrap();
        assert_eq!(m.shape(), (3, 4));
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..2 {
                    // remaining modes (0, 2) enumerated row-major
                    assert_eq!(m[(j, i * 2 + k)], (i * 6 + j * 2 + k) as f64);
                }
            }
        }
    }

    #[test]
    fn mode_out_of_range() {
        let t = seq(&[2, 3]);
        assert!(matches!(
            t.matricize(2),
            Err(Error::ModeOutOfRange { mode: 2, order: 2 })
        ));
        assert!(t.mode_product(&Matrix::identity(3, 3), 0).is_err());
    }

    #[test]
    fn mode_product_identity_and_composition() {
        let t = seq(&[2, 3, 2]);
        assert_eq!(t.mode_product(&Matrix::identity(3, 3), 1).unwrap(), t);
        let a = Matrix::from_row_slice(3, 3, &[0.3, -1.0, 2.0, 0.5, 0.1, 0.0, 1.5, -0.2, 0.7]);
        let b = Matrix::from_row_slice(3, 3, &[1.0, 0.2, -0.4, 0.0, 2.0, 0.3, -1.1, 0.6, 0.9]);
        let lhs = t.mode_product(&a, 1).unwrap().mode_product(&b, 1).unwrap();
        let rhs = t.mode_product(&(&b * &a), 1).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_marginal_matches_loops() {
        let t = seq(&[2, 3, 2]);
        let w0 = [2.0, -1.0];
        let w2 = [0.5, 3.0];
        let got = t
            .weighted_marginal(&[Some(&w0), None, Some(&w2)], 1)
            .unwrap();
        for j in 0..3 {
            let mut s = 0.0;
            for i in 0..2 {
                for k in 0..2 {
                    s += t.get(&[i, j, k]) * w0[i] * w2[k];
                }
            }
            assert!((got[j] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn kron_matvec_identity() {
        let v: Vec<f64> = (0..6).map(|x| x as f64 * 0.5 - 1.0).collect();
        let out = kron_matvec(&[Matrix::identity(2, 2), Matrix::identity(3, 3)], &v).unwrap();
        assert_eq!(out, v);
        assert!(kron_matvec(&[Matrix::identity(2, 2)], &v).is_err());
    }
}
