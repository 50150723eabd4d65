//! Dense row-major `f64` tensors and the handful of kernels the model needs.
//!
//! Every reduction runs sequentially over the contracted axis, so results are
//! bit-identical to a naive triple loop that accumulates left to right.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!("tensor extents must be positive, got {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("tensor data must be finite".into()));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Builds a `[rows, cols]` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the second-to-last axis (1 for vectors).
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[self.shape.len() - 2]
        } else {
            1
        }
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of bounds for extent {d}");
                acc * d + i
            })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose2(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        assert_eq!(self.rank(), 2, "transpose2 needs a matrix");
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_parts(vec![c, r], out)
    }

    /// Copies columns `start..start + width` of a matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Tensor::from_parts(vec![r, width], out)
    }

    /// Adds `block` into columns `start..` of a matrix.
    pub fn add_col_block(&mut self, start: usize, block: &Tensor) {
        let c = self.cols();
        let w = block.cols();
        for i in 0..block.rows() {
            let dst = &mut self.data[i * c + start..i * c + start + w];
            for (d, s) in dst.iter_mut().zip(block.row(i)) {
                *d += s;
            }
        }
    }
}

/// `C = A B` for row-major `A: [m,k]`, `B: [k,n]`.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    mm_acc(a, b, m, k, n, &mut c);
    c
}

/// `C += A B`.
pub(crate) fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `C = A Bᵀ` for `A: [m,k]`, `B: [n,k]`.
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// `C += Aᵀ B` for `A: [m,k]`, `B: [m,n]`, `C: [k,n]`.
pub(crate) fn mm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

fn batch_dims(shape: &[usize]) -> &[usize] {
    &shape[..shape.len().saturating_sub(2)]
}

/// Batched matrix product over the last two axes with broadcasting of the
/// leading (batch) axes from extent 1.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ba, bb) = (batch_dims(a.shape()), batch_dims(b.shape()));
    let rank = ba.len().max(bb.len());
    let pad = |d: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - d.len()];
        v.extend_from_slice(d);
        v
    };
    let (pa, pb) = (pad(ba), pad(bb));
    let mut out_batch = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            out_batch.push(x);
        } else if x == 1 {
            out_batch.push(y);
        } else {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
    }
    let count: usize = out_batch.iter().product();
    let mut data = Vec::with_capacity(count * m * n);
    let mut idx = vec![0usize; rank];
    for _ in 0..count {
        let flat = |p: &[usize]| {
            idx.iter()
                .zip(p)
                .fold(0, |acc, (&i, &d)| acc * d + if d == 1 { 0 } else { i })
        };
        let (oa, ob) = (flat(&pa), flat(&pb));
        let sa = &a.data()[oa * m * k..(oa + 1) * m * k];
        let sb = &b.data()[ob * k * n..(ob + 1) * k * n];
        data.extend(mm(sa, sb, m, k, n));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_batch[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    let mut shape = out_batch;
    shape.extend([m, n]);
    Ok(Tensor::from_parts(shape, data))
}

/// In-place numerically stable softmax of one row. `-inf` entries get weight 0.
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

/// Softmax over the last axis.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

/// Backward of a row softmax: `dx = y ⊙ (dy − ⟨dy, y⟩)` per row.
pub(crate) fn softmax_rows_backward(y: &[f64], dy: &[f64], cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let mut dot = 0.0;
        for (a, b) in yr.iter().zip(dyr) {
            dot += a * b;
        }
        for ((d, &a), &b) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = a * (b - dot);
        }
    }
    dx
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes `dy` through where the forward input was strictly positive.
pub(crate) fn relu_backward(pre: &[f64], dy: &mut [f64]) {
    for (d, &p) in dy.iter_mut().zip(pre) {
        if p <= 0.0 {
            *d = 0.0;
        }
    }
}

/// `x W (+ b)` over the last axis of `x`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if w.rank() != 2 || x.cols() != w.rows() {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    let (din, dout) = (w.rows(), w.cols());
    if let Some(b) = b {
        if b.len() != dout {
            return Err(Error::shape("linear bias", w.shape(), b.shape()));
        }
    }
    let n = x.len() / din;
    let mut data = mm(x.data(), w.data(), n, din, dout);
    if let Some(b) = b {
        for row in data.chunks_mut(dout) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Ok(Tensor::from_parts(shape, data))
}

/// Backward of [`linear`]: accumulates into `dw` (and `db`) and returns `dx`.
pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> Tensor {
    let (din, dout) = (w.rows(), w.cols());
    let n = x.len() / din;
    mm_tn_acc(x.data(), dy.data(), n, din, dout, dw);
    if let Some(db) = db {
        for row in dy.data().chunks(dout) {
            for (g, v) in db.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
    let dx = mm_nt(dy.data(), w.data(), n, dout, din);
    Tensor::from_parts(x.shape().to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let i = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);
        let r = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random(&[3, 4], &mut rng);
            let b = random(&[4, 2], &mut rng);
            assert_eq!(matmul(&a, &b).unwrap().data(), triple_loop(&a, &b).data());
        }
    }

    #[test]
    fn matmul_broadcasts_batch_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[1, 4, 5], &mut rng);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        let b2 = b.clone().reshape(&[4, 5]).unwrap();
        for s in 0..2 {
            let a2 = Tensor::new(vec![3, 4], a.data()[s * 12..(s + 1) * 12].to_vec()).unwrap();
            assert_eq!(&c.data()[s * 15..(s + 1) * 15], triple_loop(&a2, &b2).data());
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let u = softmax_rows(&Tensor::zeros(&[1, 3]));
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = softmax_rows(&Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        assert!(big.all_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-12 && big.data()[1] < 1e-300);
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.7071, 0.0]]).unwrap());
        let e = 0.7071f64.exp();
        assert!((s.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.data()[0] - 0.6698).abs() < 1e-4 && (s.data()[1] - 0.3302).abs() < 1e-4);
    }

    #[test]
    fn linear_and_relu_cases() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap();
        assert_eq!(linear(&x, &w, None).unwrap().data(), &[2.0, 3.0]);
        let b = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let z = Tensor::zeros(&[1, 2]);
        assert_eq!(linear(&z, &w, Some(&b)).unwrap().data(), &[0.5, -0.5]);
        assert_eq!(linear(&z, &w, None).unwrap().data(), &[0.0, 0.0]);
        let r = relu(&Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        assert!(relu(&Tensor::full(&[4], -2.0)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_random_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[5, 3], &mut rng);
        let w = random(&[3, 4], &mut rng);
        let b = random(&[4], &mut rng);
        let y = linear(&x, &w, Some(&b)).unwrap();
        let mut expect = triple_loop(&x, &w);
        for row in expect.data_mut().chunks_mut(4) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        assert_eq!(y, expect);
        let pre = random(&[7], &mut rng);
        let r = relu(&pre);
        for (o, p) in r.data().iter().zip(pre.data()) {
            assert_eq!(*o, if *p > 0.0 { *p } else { 0.0 });
        }
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }
}
