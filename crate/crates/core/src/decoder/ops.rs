//! Dense row-major f64 kernels used by the decoder.

use super::DecoderError;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer size");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copies columns `[start, start + width)`.
    pub fn columns(&self, start: usize, width: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..start + width]);
        }
        out
    }

    /// Writes `src` into columns `[start, start + src.cols)`.
    pub fn set_columns(&mut self, start: usize, src: &Matrix) {
        for i in 0..self.rows {
            self.row_mut(i)[start..start + src.cols].copy_from_slice(src.row(i));
        }
    }

    /// Adds `src` into columns `[start, start + src.cols)`.
    pub fn add_columns(&mut self, start: usize, src: &Matrix) {
        for i in 0..self.rows {
            for (d, s) in self.row_mut(i)[start..start + src.cols].iter_mut().zip(src.row(i)) {
                *d += s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`
pub fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            for (oj, bj) in o.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *oj += s * bj;
            }
        }
    }
}

/// `out[m x n] += a[k x m]^T * b[k x n]`
pub fn mm_tn_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let s = a[p * m + i];
            if s == 0.0 {
                continue;
            }
            for (oj, bj) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *oj += s * bj;
            }
        }
    }
}

/// `out[m x n] += a[m x k] * b[n x k]^T`
pub fn mm_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "matmul shape");
    let mut out = Matrix::zeros(a.rows, b.cols);
    mm_acc(&a.data, &b.data, a.rows, a.cols, b.cols, &mut out.data);
    out
}

/// Sinusoidal position table: `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(..)`.
pub fn positional_encoding(max_len: usize, d_model: usize) -> Result<Matrix, DecoderError> {
    if !d_model.is_multiple_of(2) {
        return Err(DecoderError::Config(format!("positional encoding needs an even width, got {d_model}")));
    }
    let mut pe = Matrix::zeros(max_len, d_model);
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d_model as f64);
            pe.data[pos * d_model + 2 * i] = angle.sin();
            pe.data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Ok(pe)
}

/// Additive causal mask: 0 where the query row may see the key column (`i >= j`), `-inf` otherwise.
pub fn causal_mask(len: usize) -> Matrix {
    Matrix::from_fn(len, len, |i, j| if i >= j { 0.0 } else { f64::NEG_INFINITY })
}

/// Scaled dot-product attention for one head. `bias(i, j)` is added to the
/// score; `-inf` entries are skipped outright so that masked keys contribute
/// exactly nothing. Returns the output and the attention weights.
pub(crate) fn attend(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    bias: impl Fn(usize, usize) -> f64,
) -> Result<(Matrix, Matrix), DecoderError> {
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut probs = Matrix::zeros(q.rows, k.rows);
    let mut out = Matrix::zeros(q.rows, v.cols);
    for i in 0..q.rows {
        let qi = q.row(i);
        let row = probs.row_mut(i);
        let mut max = f64::NEG_INFINITY;
        for (j, slot) in row.iter_mut().enumerate() {
            let b = bias(i, j);
            *slot = if b == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                qi.iter().zip(k.row(j)).map(|(x, y)| x * y).sum::<f64>() * scale + b
            };
            max = max.max(*slot);
        }
        if max == f64::NEG_INFINITY {
            return Err(DecoderError::AllMasked { row: i });
        }
        let mut sum = 0.0;
        for slot in row.iter_mut() {
            if *slot == f64::NEG_INFINITY {
                *slot = 0.0;
            } else {
                *slot = (*slot - max).exp();
                sum += *slot;
            }
        }
        let o = out.row_mut(i);
        for (j, slot) in row.iter_mut().enumerate() {
            if *slot == 0.0 {
                continue;
            }
            *slot /= sum;
            for (oc, vc) in o.iter_mut().zip(v.row(j)) {
                *oc += *slot * vc;
            }
        }
    }
    Ok((out, probs))
}

/// `softmax(Q K^T / sqrt(d_k) + mask) V`.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, add_mask: &Matrix) -> Result<Matrix, DecoderError> {
    if q.cols != k.cols || k.rows != v.rows || add_mask.rows != q.rows || add_mask.cols != k.rows {
        return Err(DecoderError::Shape(format!(
            "attention q {}x{}, k {}x{}, v {}x{}, mask {}x{}",
            q.rows, q.cols, k.rows, k.cols, v.rows, v.cols, add_mask.rows, add_mask.cols
        )));
    }
    attend(q, k, v, |i, j| add_mask.get(i, j)).map(|(out, _)| out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_shape() {
        assert_eq!(causal_mask(1).data, vec![0.0]);
        let m = causal_mask(3);
        let ninf = f64::NEG_INFINITY;
        assert_eq!(m.data, vec![0.0, ninf, ninf, 0.0, 0.0, ninf, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pe_examples() {
        let pe = positional_encoding(4, 4).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        let expected = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in pe.row(1).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(positional_encoding(4, 3).is_err());
    }

    #[test]
    fn single_key_and_uniform_weights() {
        let q = Matrix::from_vec(1, 2, vec![0.3, -1.0]);
        let k = Matrix::from_vec(1, 2, vec![2.0, 5.0]);
        let v = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let out = attention(&q, &k, &v, &Matrix::zeros(1, 1)).unwrap();
        assert_eq!(out.data, v.data);

        let k = Matrix::from_vec(3, 2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let v = Matrix::from_vec(3, 1, vec![3.0, 6.0, 9.0]);
        let (out, probs) = attend(&q, &k, &v, |_, _| 0.0).unwrap();
        for p in &probs.data {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((out.data[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn all_masked_row_is_error() {
        let q = Matrix::zeros(2, 2);
        let mask = Matrix::from_vec(2, 1, vec![0.0, f64::NEG_INFINITY]);
        let r = attention(&q, &Matrix::zeros(1, 2), &Matrix::zeros(1, 2), &mask);
        assert!(matches!(r, Err(DecoderError::AllMasked { row: 1 })));
    }

    #[test]
    fn transposed_products_agree() {
        let a = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 - 5.0);
        let b = Matrix::from_fn(4, 2, |i, j| (i + 2 * j) as f64 * 0.5);
        let ab = matmul(&a, &b);
        let at = Matrix::from_fn(4, 3, |i, j| a.get(j, i));
        let mut via_tn = vec![0.0; 6];
        mm_tn_acc(&at.data, &b.data, 4, 3, 2, &mut via_tn);
        assert_eq!(via_tn, ab.data);
        let bt = Matrix::from_fn(2, 4, |i, j| b.get(j, i));
        let mut via_nt = vec![0.0; 6];
        mm_nt_acc(&a.data, &bt.data, 3, 4, 2, &mut via_nt);
        assert_eq!(via_nt, ab.data);
    }
}
