use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::tensor::Tensor;

/// Per-sample, per-channel statistics of an instance normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mu: Tensor,
    pub sigma2: Tensor,
}

/// Channel-wise scale and shift applied after normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub gamma: Parameter,
    pub beta: Parameter,
}

impl AffineParams {
    pub fn identity(prefix: &str, channels: usize) -> Self {
        AffineParams {
            gamma: Parameter::new(format!("{prefix}.gamma"), Tensor::ones(&[channels])),
            beta: Parameter::new(format!("{prefix}.beta"), Tensor::zeros(&[channels])),
        }
    }
}

/// Standardizes `n` values selected by `idx`; returns `(mean, variance)`.
/// A group whose values are all equal maps to exact zeros.
fn standardize_group(
    src: &[f64],
    dst: &mut [f64],
    idx: impl Iterator<Item = usize> + Clone,
    n: usize,
    eps: f64,
) -> (f64, f64, f64) {
    let first = src[idx.clone().next().unwrap()];
    let mut sum = 0.0;
    let mut constant = true;
    for i in idx.clone() {
        sum += src[i];
        constant &= src[i] == first;
    }
    let mu = sum / n as f64;
    let mut var = 0.0;
    for i in idx.clone() {
        let c = src[i] - mu;
        var += c * c;
    }
    var /= n as f64;
    let inv = 1.0 / (var + eps).sqrt();
    for i in idx {
        dst[i] = if constant { 0.0 } else { (src[i] - mu) * inv };
    }
    (mu, var, inv)
}

/// `dx = inv·(dy − mean(dy) − x̂·mean(dy·x̂))` over one group.
fn standardize_group_backward(
    xhat: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    idx: impl Iterator<Item = usize> + Clone,
    n: usize,
    inv: f64,
) {
    let (mut s1, mut s2) = (0.0, 0.0);
    for i in idx.clone() {
        s1 += dy[i];
        s2 += dy[i] * xhat[i];
    }
    let (m1, m2) = (s1 / n as f64, s2 / n as f64);
    for i in idx {
        dx[i] = inv * (dy[i] - m1 - xhat[i] * m2);
    }
}

/// Standardization of every column of a `[rows, cols]` matrix over its rows.
/// This is instance normalization for one sample, and batch normalization
/// when the rows of several samples are stacked.
#[derive(Debug, Clone)]
pub struct ColumnNorm {
    rows: usize,
    cols: usize,
    xhat: Vec<f64>,
    mu: Vec<f64>,
    var: Vec<f64>,
    inv: Vec<f64>,
}

impl ColumnNorm {
    pub fn forward(data: &[f64], rows: usize, cols: usize, eps: f64) -> (Vec<f64>, ColumnNorm) {
        let mut xhat = vec![0.0; data.len()];
        let (mut mu, mut var, mut inv) = (vec![0.0; cols], vec![0.0; cols], vec![0.0; cols]);
        for c in 0..cols {
            let idx = (0..rows).map(move |r| r * cols + c);
            let (m, v, s) = standardize_group(data, &mut xhat, idx, rows, eps);
            mu[c] = m;
            var[c] = v;
            inv[c] = s;
        }
        (
            xhat.clone(),
            ColumnNorm {
                rows,
                cols,
                xhat,
                mu,
                var,
                inv,
            },
        )
    }

    pub fn backward(&self, dy: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; dy.len()];
        let cols = self.cols;
        for c in 0..cols {
            let idx = (0..self.rows).map(move |r| r * cols + c);
            standardize_group_backward(&self.xhat, dy, &mut dx, idx, self.rows, self.inv[c]);
        }
        dx
    }

    pub fn mean(&self) -> &[f64] {
        &self.mu
    }

    pub fn variance(&self) -> &[f64] {
        &self.var
    }
}

/// Standardization of each row segment of width `seg` (per-head layer norm).
#[derive(Debug, Clone)]
pub struct RowNorm {
    seg: usize,
    xhat: Vec<f64>,
    inv: Vec<f64>,
}

impl RowNorm {
    pub fn forward(data: &[f64], seg: usize, eps: f64) -> (Vec<f64>, RowNorm) {
        let mut xhat = vec![0.0; data.len()];
        let groups = data.len() / seg;
        let mut inv = vec![0.0; groups];
        for (g, s) in inv.iter_mut().enumerate() {
            let (_, _, v) = standardize_group(data, &mut xhat, g * seg..(g + 1) * seg, seg, eps);
            *s = v;
        }
        (xhat.clone(), RowNorm { seg, xhat, inv })
    }

    pub fn backward(&self, dy: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; dy.len()];
        let seg = self.seg;
        for (g, &inv) in self.inv.iter().enumerate() {
            standardize_group_backward(&self.xhat, dy, &mut dx, g * seg..(g + 1) * seg, seg, inv);
        }
        dx
    }
}

fn btc(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [t, c] => Ok((1, t, c)),
        [b, t, c] => Ok((b, t, c)),
        _ => Err(Error::shape("normalization input", x.shape(), &[0, 0, 0])),
    }
}

/// Instance normalization of `[B,T,C]` (or `[T,C]`) over `T` per `(b, c)`,
/// with an optional `γ x̂ + β`.
pub fn instance_norm(x: &Tensor, eps: f64, affine: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
    instance_norm_with_stats(x, eps, affine).map(|(y, _)| y)
}

pub fn instance_norm_with_stats(
    x: &Tensor,
    eps: f64,
    affine: Option<(&Tensor, &Tensor)>,
) -> Result<(Tensor, NormStats)> {
    let (b, t, c) = btc(x)?;
    if t < 2 {
        return Err(Error::Contract(
            "instance normalization needs at least two positions; statistics are degenerate at length 1".into(),
        ));
    }
    if let Some((g, be)) = affine {
        if g.len() != c || be.len() != c {
            return Err(Error::shape("instance_norm affine", g.shape(), &[c]));
        }
    }
    let mut out = Vec::with_capacity(x.len());
    let (mut mus, mut vars) = (Vec::with_capacity(b * c), Vec::with_capacity(b * c));
    for s in x.data().chunks(t * c) {
        let (mut y, cache) = ColumnNorm::forward(s, t, c, eps);
        if let Some((g, be)) = affine {
            for row in y.chunks_mut(c) {
                for ((v, gv), bv) in row.iter_mut().zip(g.data()).zip(be.data()) {
                    *v = *v * gv + bv;
                }
            }
        }
        mus.extend_from_slice(cache.mean());
        vars.extend_from_slice(cache.variance());
        out.extend(y);
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        NormStats {
            mu: Tensor::from_parts(vec![b, c], mus),
            sigma2: Tensor::from_parts(vec![b, c], vars),
        },
    ))
}

/// Batch normalization with training-mode statistics over all `(b, t)`.
pub fn batch_norm_eval_style(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (b, t, c) = btc(x)?;
    if b * t < 2 {
        return Err(Error::Contract("batch normalization needs at least two positions".into()));
    }
    let (y, _) = ColumnNorm::forward(x.data(), b * t, c, eps);
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

/// Saved state of a layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    norm: RowNorm,
    xhat: Vec<f64>,
}

impl LayerNormCache {
    pub fn forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, Self)> {
        let c = x.cols();
        if gamma.len() != c || beta.len() != c {
            return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
        }
        let (xhat, norm) = RowNorm::forward(x.data(), c, eps);
        let mut y = xhat.clone();
        for row in y.chunks_mut(c) {
            for ((v, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
                *v = *v * g + b;
            }
        }
        Ok((Tensor::from_parts(x.shape().to_vec(), y), LayerNormCache { norm, xhat }))
    }

    pub fn backward(&self, dy: &Tensor, gamma: &Tensor, dgamma: &mut [f64], dbeta: &mut [f64]) -> Tensor {
        let c = gamma.len();
        let mut dxhat = dy.data().to_vec();
        for (row, xrow) in dxhat.chunks_mut(c).zip(self.xhat.chunks(c)) {
            for j in 0..c {
                dgamma[j] += row[j] * xrow[j];
                dbeta[j] += row[j];
                row[j] *= gamma.data()[j];
            }
        }
        Tensor::from_parts(dy.shape().to_vec(), self.norm.backward(&dxhat))
    }
}

/// Layer normalization over the last axis, `γ x̂ + β`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    LayerNormCache::forward(x, gamma, beta, eps).map(|(y, _)| y)
}
