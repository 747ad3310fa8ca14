use crate::error::{Error, Result};

/// Dense row-major array of f64. The invariant `shape.product() == data.len()`
/// holds for every constructed value; constructors reject anything else.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::ShapeMismatch {
                    op: "Tensor::from_rows",
                    detail: format!("ragged rows: {} vs {}", row.len(), c),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Single scalar payload of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "Tensor::item",
                detail: format!("expected 1 element, shape is {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// Rows of a 2-D tensor (errors otherwise).
    pub fn rows(&self) -> Result<usize> {
        self.dim2().map(|(r, _)| r)
    }

    pub fn cols(&self) -> Result<usize> {
        self.dim2().map(|(_, c)| c)
    }

    pub fn dim2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch {
                op: "Tensor::dim2",
                detail: format!("expected 2-D, shape is {:?}", other),
            }),
        }
    }

    pub fn dim3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [a, b, c] => Ok((*a, *b, *c)),
            other => Err(Error::ShapeMismatch {
                op: "Tensor::dim3",
                detail: format!("expected 3-D, shape is {:?}", other),
            }),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        let cols = self.shape[1];
        self.data[r * cols + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self (m×k) · other (k×n)`, optionally reading either operand transposed
    /// in place (no copy): `ta` treats `self` as the transpose of its stored
    /// layout, likewise `tb`.
    pub fn matmul_ext(&self, ta: bool, other: &Tensor, tb: bool) -> Result<Tensor> {
        let (ar, ac) = self.dim2()?;
        let (br, bc) = other.dim2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!(
                    "inner dims differ: {:?}{} · {:?}{}",
                    self.shape,
                    if ta { "ᵀ" } else { "" },
                    other.shape,
                    if tb { "ᵀ" } else { "" }
                ),
            });
        }
        let mut out = Tensor::zeros(&[m, n]);
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                rsa,
                csa,
                other.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_ext(false, other, false)
    }

    /// `acc += self(ᵀ?) · other(ᵀ?)`, accumulating into an existing buffer.
    pub fn matmul_acc(&self, ta: bool, other: &Tensor, tb: bool, acc: &mut Tensor) -> Result<()> {
        let (ar, ac) = self.dim2()?;
        let (br, bc) = other.dim2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        let (or, oc) = acc.dim2()?;
        if k != kb || or != m || oc != n {
            return Err(Error::ShapeMismatch {
                op: "matmul_acc",
                detail: format!(
                    "{:?}{} · {:?}{} into {:?}",
                    self.shape,
                    if ta { "ᵀ" } else { "" },
                    other.shape,
                    if tb { "ᵀ" } else { "" },
                    acc.shape
                ),
            });
        }
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                rsa,
                csa,
                other.data.as_ptr(),
                rsb,
                csb,
                1.0,
                acc.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_small_known() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn matmul_transposed_views_agree_with_explicit_transpose() {
        let a = Tensor::new(vec![3, 2], vec![1., 4., 2., 5., 3., 6.]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        // aᵀ (2×3) · b (3×2)
        let c = a.matmul_ext(true, &b, false).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        // a2 (2×3) · b2ᵀ where b2 is stored 2×3
        let a2 = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b2 = Tensor::new(vec![2, 3], vec![7., 9., 11., 8., 10., 12.]).unwrap();
        let c2 = a2.matmul_ext(false, &b2, true).unwrap();
        assert_eq!(c2.shape(), &[2, 2]);
        assert_eq!(c2.data(), &[58., 64., 139., 154.]);
        // both transposed: aᵀ (2×3) · b2ᵀ (3×2)
        let c3 = a.matmul_ext(true, &b2, true).unwrap();
        assert_eq!(c3.shape(), &[2, 2]);
        assert_eq!(c3.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn matmul_acc_accumulates() {
        let a = Tensor::new(vec![1, 2], vec![1., 2.]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3., 4.]).unwrap();
        let mut acc = Tensor::filled(&[1, 1], 100.0);
        a.matmul_acc(false, &b, false, &mut acc).unwrap();
        assert_eq!(acc.data(), &[111.0]);
    }
}
