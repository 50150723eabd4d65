use crate::error::{Error, Result};
use crate::param::RngState;
use crate::tensor::{mm, mm_nt, mm_tn_acc, softmax_in_place, softmax_rows_backward, Tensor};

use super::apply_dropout;

/// Boolean attention mask; `true` means the query may attend to the key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::shape("mask", &[rows, cols], &[allowed.len()]));
        }
        Ok(AttnMask { rows, cols, allowed })
    }

    /// Position `t` may attend to positions `<= t`.
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|x| x % n <= x / n).collect();
        AttnMask {
            rows: n,
            cols: n,
            allowed,
        }
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Saved state of one attention head.
#[derive(Debug, Clone)]
pub struct HeadCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    pub weights: Tensor,
    drop: Option<Vec<f64>>,
    scale: f64,
}

pub struct HeadGrads {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
    pub dbias: Tensor,
}

fn energies(
    q: &Tensor,
    k: &Tensor,
    mask: Option<&AttnMask>,
    bias: Option<&Tensor>,
) -> Result<(Tensor, f64)> {
    let (nq, d, nk) = (q.rows(), q.cols(), k.rows());
    if k.cols() != d {
        return Err(Error::shape("attention q/k", q.shape(), k.shape()));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut e = mm_nt(q.data(), k.data(), nq, d, nk);
    for v in &mut e {
        *v *= scale;
    }
    if let Some(b) = bias {
        if b.len() != nq * nk {
            return Err(Error::shape("attention bias", b.shape(), &[nq, nk]));
        }
        for (v, bv) in e.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    if let Some(m) = mask {
        if m.shape() != (nq, nk) {
            return Err(Error::shape("attention mask", &[m.rows, m.cols], &[nq, nk]));
        }
        for i in 0..nq {
            let mut any = false;
            for j in 0..nk {
                if m.allows(i, j) {
                    any = true;
                } else {
                    e[i * nk + j] = f64::NEG_INFINITY;
                }
            }
            if !any {
                return Err(Error::Contract(format!("attention row {i} is fully masked")));
            }
        }
    }
    for row in e.chunks_mut(nk) {
        softmax_in_place(row);
    }
    Ok((Tensor::from_parts(vec![nq, nk], e), scale))
}

/// One head: `softmax(q kᵀ/√d + bias, masked) v`, with optional dropout on
/// the weights.
pub(crate) fn head_forward(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: Option<&AttnMask>,
    bias: Option<&Tensor>,
    rng: Option<&mut RngState>,
    p: f64,
) -> Result<(Tensor, HeadCache)> {
    if v.rows() != k.rows() {
        return Err(Error::shape("attention k/v", k.shape(), v.shape()));
    }
    let (weights, scale) = energies(&q, &k, mask, bias)?;
    let (nq, nk, dv) = (q.rows(), k.rows(), v.cols());
    let mut used = weights.data().to_vec();
    let drop = apply_dropout(rng, p, &mut used);
    let z = mm(&used, v.data(), nq, nk, dv);
    Ok((
        Tensor::from_parts(vec![nq, dv], z),
        HeadCache {
            q,
            k,
            v,
            weights,
            drop,
            scale,
        },
    ))
}

pub(crate) fn head_backward(cache: &HeadCache, dz: &Tensor) -> HeadGrads {
    let (nq, d, nk, dv) = (cache.q.rows(), cache.q.cols(), cache.k.rows(), cache.v.cols());
    let mut used = cache.weights.data().to_vec();
    if let Some(m) = &cache.drop {
        for (u, mv) in used.iter_mut().zip(m) {
            *u *= mv;
        }
    }
    let mut dvv = vec![0.0; nk * dv];
    mm_tn_acc(&used, dz.data(), nq, nk, dv, &mut dvv);
    let mut da = mm_nt(dz.data(), cache.v.data(), nq, dv, nk);
    if let Some(m) = &cache.drop {
        for (g, mv) in da.iter_mut().zip(m) {
            *g *= mv;
        }
    }
    let de = softmax_rows_backward(cache.weights.data(), &da, nk);
    let mut dq = mm(&de, cache.k.data(), nq, nk, d);
    for g in &mut dq {
        *g *= cache.scale;
    }
    let mut dk = vec![0.0; nk * d];
    mm_tn_acc(&de, cache.q.data(), nq, nk, d, &mut dk);
    for g in &mut dk {
        *g *= cache.scale;
    }
    HeadGrads {
        dq: Tensor::from_parts(vec![nq, d], dq),
        dk: Tensor::from_parts(vec![nk, d], dk),
        dv: Tensor::from_parts(vec![nk, dv], dvv),
        dbias: Tensor::from_parts(vec![nq, nk], de),
    }
}

fn slices(t: &Tensor) -> (usize, usize, usize) {
    match t.shape() {
        [n, d] => (1, *n, *d),
        [b, n, d] => (*b, *n, *d),
        _ => (0, 0, 0),
    }
}

fn batch_slice(t: &Tensor, b: usize, rows: usize, cols: usize) -> Tensor {
    Tensor::from_parts(vec![rows, cols], t.data()[b * rows * cols..(b + 1) * rows * cols].to_vec())
}

fn run_batched<F>(q: &Tensor, k: &Tensor, v: Option<&Tensor>, bias: Option<&Tensor>, mut f: F) -> Result<Tensor>
where
    F: FnMut(Tensor, Tensor, Option<Tensor>, Option<Tensor>) -> Result<Tensor>,
{
    let (bq, nq, d) = slices(q);
    let (bk, nk, dk) = slices(k);
    if bq == 0 || bq != bk || d != dk {
        return Err(Error::shape("scaled_dot_product_attention", q.shape(), k.shape()));
    }
    let vv = v.map(|v| (v, slices(v)));
    if let Some((v, (bv, nv, _))) = vv {
        if bv != bq || nv != nk {
            return Err(Error::shape("scaled_dot_product_attention", k.shape(), v.shape()));
        }
    }
    if let Some(b) = bias {
        if b.len() != bq * nq * nk && b.len() != nq * nk {
            return Err(Error::shape("attention bias", b.shape(), &[bq, nq, nk]));
        }
    }
    let mut out = Vec::new();
    let mut out_cols = 0;
    for b in 0..bq {
        let qs = batch_slice(q, b, nq, d);
        let ks = batch_slice(k, b, nk, d);
        let vs = vv.map(|(v, (_, _, dv))| batch_slice(v, b, nk, dv));
        let bs = bias.map(|t| {
            let off = if t.len() == nq * nk { 0 } else { b };
            batch_slice(t, off, nq, nk)
        });
        let r = f(qs, ks, vs, bs)?;
        out_cols = r.cols();
        out.extend_from_slice(r.data());
    }
    let shape = if q.rank() == 2 { vec![nq, out_cols] } else { vec![bq, nq, out_cols] };
    Ok(Tensor::from_parts(shape, out))
}

/// `softmax(Q Kᵀ/√d + bias) V` over `[N,d]` or `[B,N,d]` inputs. The mask
/// is shared by every batch slice; a fully masked row is an error.
pub fn scaled_dot_product_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AttnMask>,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    run_batched(q, k, Some(v), bias, |qs, ks, vs, bs| {
        head_forward(qs, ks, vs.unwrap(), mask, bs.as_ref(), None, 0.0).map(|(z, _)| z)
    })
}

/// The post-softmax weight matrix of [`scaled_dot_product_attention`].
pub fn attention_weights(
    q: &Tensor,
    k: &Tensor,
    mask: Option<&AttnMask>,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    run_batched(q, k, None, bias, |qs, ks, _, bs| energies(&qs, &ks, mask, bs.as_ref()).map(|(w, _)| w))
}
