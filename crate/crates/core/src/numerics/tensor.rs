use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 || dims.contains(&0) {
            return Err(Error::InvalidShape(dims.to_vec()));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Rows and columns of a rank-2 shape.
    pub(crate) fn matrix(&self) -> Option<(usize, usize)> {
        match self.0[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }
}

/// Row-major f64 buffer with a shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if data.len() != shape.numel() {
            return Err(Error::LengthMismatch {
                len: data.len(),
                shape: dims.to_vec(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![0.0; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(data, &[rows, cols])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Tensor::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn rows(&self) -> usize {
        self.dims()[0]
    }

    /// Trailing extent: columns of a matrix, length of a vector.
    pub fn cols(&self) -> usize {
        *self.dims().last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.data.len() / self.rows();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        Tensor::new(self.data.clone(), dims)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Cosine similarity matrix between the rows of two matrices, off-tape.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d) = a
        .shape()
        .matrix()
        .ok_or_else(|| Error::ShapeMismatch(format!("expected matrix, got {:?}", a.dims())))?;
    let (p, d2) = b
        .shape()
        .matrix()
        .ok_or_else(|| Error::ShapeMismatch(format!("expected matrix, got {:?}", b.dims())))?;
    if d != d2 {
        return Err(Error::ShapeMismatch(format!(
            "cosine feature dims {d} vs {d2}"
        )));
    }
    let an = normalize_rows(a.data(), n, d)?;
    let bn = normalize_rows(b.data(), p, d)?;
    let bt = transpose_raw(&bn, p, d);
    Tensor::matrix(n, p, matmul_raw(&an, &bt, n, d, p))
}

pub(crate) fn normalize_rows(a: &[f64], n: usize, d: usize) -> Result<Vec<f64>> {
    let mut out = a.to_vec();
    for i in 0..n {
        let row = &mut out[i * d..(i + 1) * d];
        let norm = dot(row, row).sqrt();
        if !(norm > super::NORM_EPS) {
            return Err(Error::ZeroNorm { row: i, norm });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_zero_and_high_rank() {
        assert!(Shape::new(&[2, 0]).is_err());
        assert!(Shape::new(&[]).is_err());
        assert!(Shape::new(&[1, 2, 3, 4]).is_err());
        assert_eq!(Shape::new(&[2, 3, 4]).unwrap().numel(), 24);
    }

    #[test]
    fn tensor_length_must_match() {
        assert!(matches!(
            Tensor::new(vec![1.0, 2.0, 3.0], &[2, 2]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn cosine_matrix_off_tape() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let s = cosine_matrix(&a, &a).unwrap();
        assert!((s.get(0, 1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((s.get(1, 1) - 1.0).abs() < 1e-15);
    }
}
