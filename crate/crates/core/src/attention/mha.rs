use crate::error::{Error, Result};
use crate::param::{init_parameter, GradBuffer, Init, ParamId, ParamStore, Parameter, RngState};
use crate::tensor::{linear, linear_backward, mm, Tensor};

use super::norm::{ColumnNorm, RowNorm};
use super::sdpa::{head_backward, head_forward, AttnMask, HeadCache};
use super::{AttentionConfig, NormMode};

/// Parameter handles of one multi-head attention sub-layer. The per-head
/// projections are the column blocks of `w_q`, `w_k` and `w_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaWeights {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub q_affine: Option<(ParamId, ParamId)>,
    pub k_affine: Option<(ParamId, ParamId)>,
}

/// Plain tensors for the free-function entry points.
#[derive(Debug, Clone)]
pub struct MhaTensors {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

/// Projected queries, keys and values of one example.
#[derive(Debug, Clone)]
pub struct Projection {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    xq: Tensor,
    xkv: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct AttendCache {
    q_in: Tensor,
    k_in: Tensor,
    heads: Vec<HeadCache>,
    concat: Tensor,
}

impl AttendCache {
    /// Post-softmax weights of every head.
    pub fn weights(&self) -> impl Iterator<Item = &Tensor> {
        self.heads.iter().map(|h| &h.weights)
    }
}

impl MhaWeights {
    /// Registers `prefix.W_Q`, `prefix.W_K`, `prefix.W_V`, `prefix.W_O`,
    /// `prefix.b_O` (and the affine pairs under `InAffine`).
    pub fn register(
        store: &mut ParamStore,
        rng: &mut RngState,
        prefix: &str,
        cfg: &AttentionConfig,
        normalized: bool,
    ) -> Result<Self> {
        let w = cfg.d_k;
        let mut mat = |name: &str, store: &mut ParamStore| {
            store.add(init_parameter(format!("{prefix}.{name}"), &[w, w], Init::GlorotUniform, rng))
        };
        let w_q = mat("W_Q", store)?;
        let w_k = mat("W_K", store)?;
        let w_v = mat("W_V", store)?;
        let w_o = mat("W_O", store)?;
        let b_o = store.add(Parameter::new(format!("{prefix}.b_O"), Tensor::zeros(&[w])))?;
        let affine = normalized && cfg.norm_mode == NormMode::InAffine;
        let pair = |which: &str, on: bool, store: &mut ParamStore| -> Result<Option<(ParamId, ParamId)>> {
            if !(affine && on) {
                return Ok(None);
            }
            let g = store.add(Parameter::new(format!("{prefix}.{which}_gamma"), Tensor::ones(&[w])))?;
            let b = store.add(Parameter::new(format!("{prefix}.{which}_beta"), Tensor::zeros(&[w])))?;
            Ok(Some((g, b)))
        };
        let q_affine = pair("q", cfg.normalize_q, store)?;
        let k_affine = pair("k", cfg.normalize_k, store)?;
        Ok(MhaWeights {
            w_q,
            w_k,
            w_v,
            w_o,
            b_o,
            q_affine,
            k_affine,
        })
    }

    /// `Q = X_q W_Q`, `K = X_kv W_K`, `V = X_kv W_V`; `xkv = None` means
    /// self-attention.
    pub fn project(&self, store: &ParamStore, xq: &Tensor, xkv: Option<&Tensor>) -> Result<Projection> {
        let src = xkv.unwrap_or(xq);
        Ok(Projection {
            q: linear(xq, store.value(self.w_q), None)?,
            k: linear(src, store.value(self.w_k), None)?,
            v: linear(src, store.value(self.w_v), None)?,
            xq: xq.clone(),
            xkv: xkv.cloned(),
        })
    }

    /// Returns `(dX_q, dX_kv)`; for self-attention both are summed into the
    /// first and the second is `None`.
    pub fn project_backward(
        &self,
        store: &ParamStore,
        proj: &Projection,
        dq: &Tensor,
        dk: &Tensor,
        dv: &Tensor,
        grads: &mut GradBuffer,
    ) -> (Tensor, Option<Tensor>) {
        let src = proj.xkv.as_ref().unwrap_or(&proj.xq);
        let mut dxq = linear_backward(&proj.xq, store.value(self.w_q), dq, grads.slot(self.w_q), None);
        let mut dxkv = linear_backward(src, store.value(self.w_k), dk, grads.slot(self.w_k), None);
        let dxv = linear_backward(src, store.value(self.w_v), dv, grads.slot(self.w_v), None);
        for (a, b) in dxkv.data_mut().iter_mut().zip(dxv.data()) {
            *a += b;
        }
        if proj.xkv.is_some() {
            (dxq, Some(dxkv))
        } else {
            for (a, b) in dxq.data_mut().iter_mut().zip(dxkv.data()) {
                *a += b;
            }
            (dxq, None)
        }
    }

    /// Per-head attention over (already normalized) `q`, `k`, then concat and
    /// output projection. `biases` holds one `[Nq, Nk]` matrix per head.
    #[allow(clippy::too_many_arguments)]
    pub fn attend(
        &self,
        store: &ParamStore,
        heads: usize,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        mask: Option<&AttnMask>,
        biases: Option<&[Tensor]>,
        mut rng: Option<&mut RngState>,
        p: f64,
    ) -> Result<(Tensor, AttendCache)> {
        let width = q.cols();
        if width % heads != 0 {
            return Err(Error::Config(format!("width {width} not divisible by {heads} heads")));
        }
        let d = width / heads;
        let q_in = affine(store, self.q_affine, q);
        let k_in = affine(store, self.k_affine, k);
        let mut concat = Tensor::zeros(&[q.rows(), v.cols()]);
        let mut caches = Vec::with_capacity(heads);
        for h in 0..heads {
            let bias = biases.map(|b| &b[h]);
            let (z, cache) = head_forward(
                q_in.col_block(h * d, d),
                k_in.col_block(h * d, d),
                v.col_block(h * d, d),
                mask,
                bias,
                rng.as_deref_mut(),
                p,
            )?;
            concat.add_col_block(h * d, &z);
            caches.push(cache);
        }
        let out = linear(&concat, store.value(self.w_o), Some(store.value(self.b_o)))?;
        Ok((
            out,
            AttendCache {
                q_in: q.clone(),
                k_in: k.clone(),
                heads: caches,
                concat,
            },
        ))
    }

    /// Returns `(dq, dk, dv, dbias per head)`.
    pub fn attend_backward(
        &self,
        store: &ParamStore,
        cache: &AttendCache,
        dout: &Tensor,
        grads: &mut GradBuffer,
    ) -> (Tensor, Tensor, Tensor, Vec<Tensor>) {
        let w_o = store.value(self.w_o);
        let (dw, db) = grads.slot_pair(self.w_o, self.b_o);
        let dconcat = linear_backward(&cache.concat, w_o, dout, dw, Some(db));
        let heads = cache.heads.len();
        let d = dconcat.cols() / heads;
        let mut dq = Tensor::zeros(cache.q_in.shape());
        let mut dk = Tensor::zeros(cache.k_in.shape());
        let mut dv = Tensor::zeros(&[cache.k_in.rows(), dconcat.cols()]);
        let mut dbias = Vec::with_capacity(heads);
        for (h, hc) in cache.heads.iter().enumerate() {
            let g = head_backward(hc, &dconcat.col_block(h * d, d));
            dq.add_col_block(h * d, &g.dq);
            dk.add_col_block(h * d, &g.dk);
            dv.add_col_block(h * d, &g.dv);
            dbias.push(g.dbias);
        }
        let dq = affine_backward(store, self.q_affine, &cache.q_in, dq, grads);
        let dk = affine_backward(store, self.k_affine, &cache.k_in, dk, grads);
        (dq, dk, dv, dbias)
    }
}

fn affine(store: &ParamStore, ids: Option<(ParamId, ParamId)>, x: &Tensor) -> Tensor {
    let Some((g, b)) = ids else {
        return x.clone();
    };
    let (g, b) = (store.value(g), store.value(b));
    let c = x.cols();
    let mut y = x.clone();
    for row in y.data_mut().chunks_mut(c) {
        for ((v, gv), bv) in row.iter_mut().zip(g.data()).zip(b.data()) {
            *v = *v * gv + bv;
        }
    }
    y
}

fn affine_backward(
    store: &ParamStore,
    ids: Option<(ParamId, ParamId)>,
    x: &Tensor,
    mut dy: Tensor,
    grads: &mut GradBuffer,
) -> Tensor {
    let Some((g, b)) = ids else {
        return dy;
    };
    let c = x.cols();
    let gamma = store.value(g).data().to_vec();
    {
        let dg = grads.slot(g);
        for (drow, xrow) in dy.data().chunks(c).zip(x.data().chunks(c)) {
            for j in 0..c {
                dg[j] += drow[j] * xrow[j];
            }
        }
    }
    {
        let db = grads.slot(b);
        for drow in dy.data().chunks(c) {
            for j in 0..c {
                db[j] += drow[j];
            }
        }
    }
    for row in dy.data_mut().chunks_mut(c) {
        for (v, gv) in row.iter_mut().zip(&gamma) {
            *v *= gv;
        }
    }
    dy
}

/// Saved state of one normalization applied across a batch of matrices.
#[derive(Debug, Clone)]
pub enum NormOp {
    PerExample(Vec<ColumnNorm>),
    PerRow(Vec<RowNorm>),
    Stacked { norm: ColumnNorm, rows: Vec<usize> },
}

impl NormOp {
    /// Standardizes every matrix according to `mode`. Column (instance)
    /// statistics need at least two rows per example; batch statistics need
    /// two rows in total.
    pub fn forward(mode: NormMode, eps: f64, head_width: usize, mats: &[Tensor]) -> Result<(Vec<Tensor>, NormOp)> {
        match mode {
            NormMode::In | NormMode::InAffine => {
                let mut outs = Vec::with_capacity(mats.len());
                let mut caches = Vec::with_capacity(mats.len());
                for m in mats {
                    if m.rows() < 2 {
                        return Err(Error::Contract(
                            "instance normalization needs at least two positions; statistics are degenerate at length 1"
                                .into(),
                        ));
                    }
                    let (y, c) = ColumnNorm::forward(m.data(), m.rows(), m.cols(), eps);
                    outs.push(Tensor::from_parts(m.shape().to_vec(), y));
                    caches.push(c);
                }
                Ok((outs, NormOp::PerExample(caches)))
            }
            NormMode::Ln => {
                let mut outs = Vec::with_capacity(mats.len());
                let mut caches = Vec::with_capacity(mats.len());
                for m in mats {
                    let (y, c) = RowNorm::forward(m.data(), head_width, eps);
                    outs.push(Tensor::from_parts(m.shape().to_vec(), y));
                    caches.push(c);
                }
                Ok((outs, NormOp::PerRow(caches)))
            }
            NormMode::Bn => {
                let rows: Vec<usize> = mats.iter().map(Tensor::rows).collect();
                let total: usize = rows.iter().sum();
                if total < 2 {
                    return Err(Error::Contract("batch normalization needs at least two positions".into()));
                }
                let cols = mats[0].cols();
                let stacked: Vec<f64> = mats.iter().flat_map(|m| m.data().iter().copied()).collect();
                let (y, norm) = ColumnNorm::forward(&stacked, total, cols, eps);
                let mut outs = Vec::with_capacity(mats.len());
                let mut off = 0;
                for &r in &rows {
                    outs.push(Tensor::from_parts(vec![r, cols], y[off * cols..(off + r) * cols].to_vec()));
                    off += r;
                }
                Ok((outs, NormOp::Stacked { norm, rows }))
            }
            NormMode::None => Err(Error::Contract("NormOp::forward called with norm_mode none".into())),
        }
    }

    pub fn backward(&self, grads: &[Tensor]) -> Vec<Tensor> {
        match self {
            NormOp::PerExample(cs) => cs
                .iter()
                .zip(grads)
                .map(|(c, g)| Tensor::from_parts(g.shape().to_vec(), c.backward(g.data())))
                .collect(),
            NormOp::PerRow(cs) => cs
                .iter()
                .zip(grads)
                .map(|(c, g)| Tensor::from_parts(g.shape().to_vec(), c.backward(g.data())))
                .collect(),
            NormOp::Stacked { norm, rows } => {
                let cols = grads[0].cols();
                let stacked: Vec<f64> = grads.iter().flat_map(|m| m.data().iter().copied()).collect();
                let dx = norm.backward(&stacked);
                let mut out = Vec::with_capacity(rows.len());
                let mut off = 0;
                for &r in rows {
                    out.push(Tensor::from_parts(vec![r, cols], dx[off * cols..(off + r) * cols].to_vec()));
                    off += r;
                }
                out
            }
        }
    }
}

/// Query/key normalization caches for one attention layer over a batch.
#[derive(Debug, Clone, Default)]
pub struct QkNormCache {
    q: Option<NormOp>,
    k: Option<NormOp>,
}

impl QkNormCache {
    /// Normalizes `q` and/or `k` of every projection in place according to
    /// `cfg`. A no-op when normalization is disabled.
    pub fn forward(cfg: &AttentionConfig, projections: &mut [Projection]) -> Result<Self> {
        let mut cache = QkNormCache::default();
        if !cfg.normalizes() {
            return Ok(cache);
        }
        if cfg.normalize_q {
            let mats: Vec<Tensor> = projections.iter().map(|p| p.q.clone()).collect();
            let (outs, op) = NormOp::forward(cfg.norm_mode, cfg.eps, cfg.d, &mats)?;
            for (p, o) in projections.iter_mut().zip(outs) {
                p.q = o;
            }
            cache.q = Some(op);
        }
        if cfg.normalize_k {
            let mats: Vec<Tensor> = projections.iter().map(|p| p.k.clone()).collect();
            let (outs, op) = NormOp::forward(cfg.norm_mode, cfg.eps, cfg.d, &mats)?;
            for (p, o) in projections.iter_mut().zip(outs) {
                p.k = o;
            }
            cache.k = Some(op);
        }
        Ok(cache)
    }

    /// Maps gradients w.r.t. normalized `q`/`k` back to the raw projections.
    pub fn backward(&self, dq: &mut [Tensor], dk: &mut [Tensor]) {
        if let Some(op) = &self.q {
            let g = op.backward(dq);
            dq.iter_mut().zip(g).for_each(|(a, b)| *a = b);
        }
        if let Some(op) = &self.k {
            let g = op.backward(dk);
            dk.iter_mut().zip(g).for_each(|(a, b)| *a = b);
        }
    }
}

fn single_head_cfg(cfg: &AttentionConfig, d: usize) -> AttentionConfig {
    AttentionConfig {
        d,
        h: 1,
        d_k: d,
        ..cfg.clone()
    }
}

fn nsa_common(
    x: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    cfg: &AttentionConfig,
    bias: Option<&Tensor>,
) -> Result<Vec<(Tensor, HeadCache)>> {
    let (b, n, dk) = match *x.shape() {
        [n, dk] => (1, n, dk),
        [b, n, dk] => (b, n, dk),
        _ => return Err(Error::shape("nsa_attention", x.shape(), &[0, 0, 0])),
    };
    if w_q.rows() != dk || w_k.rows() != dk || w_v.rows() != dk {
        return Err(Error::shape("nsa_attention", x.shape(), w_q.shape()));
    }
    let d = w_q.cols();
    let mut projections = Vec::with_capacity(b);
    for s in 0..b {
        let xs = Tensor::from_parts(vec![n, dk], x.data()[s * n * dk..(s + 1) * n * dk].to_vec());
        projections.push(Projection {
            q: Tensor::from_parts(vec![n, d], mm(xs.data(), w_q.data(), n, dk, d)),
            k: Tensor::from_parts(vec![n, d], mm(xs.data(), w_k.data(), n, dk, d)),
            v: Tensor::from_parts(vec![n, w_v.cols()], mm(xs.data(), w_v.data(), n, dk, w_v.cols())),
            xq: xs,
            xkv: None,
        });
    }
    let head_cfg = single_head_cfg(cfg, d);
    QkNormCache::forward(&head_cfg, &mut projections)?;
    projections
        .into_iter()
        .enumerate()
        .map(|(s, p)| {
            let bs = bias.map(|t| {
                if t.len() == n * n {
                    t.clone()
                } else {
                    Tensor::from_parts(vec![n, n], t.data()[s * n * n..(s + 1) * n * n].to_vec())
                }
            });
            head_forward(p.q, p.k, p.v, None, bs.as_ref(), None, 0.0)
        })
        .collect()
}

/// Normalized self-attention with a single head: `Q = X W_Q`, `K = X W_K`,
/// `V = X W_V`, normalization of `Q` and/or `K` per `cfg`, then scaled
/// dot-product attention with an optional additive bias.
pub fn nsa_attention(
    x: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    cfg: &AttentionConfig,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let outs = nsa_common(x, w_q, w_k, w_v, cfg, bias)?;
    let rank3 = x.rank() == 3;
    stack(outs.into_iter().map(|(z, _)| z).collect(), rank3)
}

/// The attention-weight matrices computed by [`nsa_attention`].
pub fn nsa_attention_weights(
    x: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    cfg: &AttentionConfig,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let outs = nsa_common(x, w_q, w_k, w_v, cfg, bias)?;
    let rank3 = x.rank() == 3;
    stack(outs.into_iter().map(|(_, c)| c.weights).collect(), rank3)
}

fn stack(mats: Vec<Tensor>, rank3: bool) -> Result<Tensor> {
    let (r, c) = (mats[0].rows(), mats[0].cols());
    let b = mats.len();
    let data: Vec<f64> = mats.into_iter().flat_map(Tensor::into_data).collect();
    let shape = if rank3 { vec![b, r, c] } else { vec![r, c] };
    Tensor::new(shape, data)
}

/// Multi-head attention of one example: projections, in-attention
/// normalization per `cfg`, `h` heads with optional per-head additive bias,
/// concatenation and output projection.
pub fn multi_head_attention(
    x_q: &Tensor,
    x_kv: &Tensor,
    cfg: &AttentionConfig,
    weights: &MhaTensors,
    mask: Option<&AttnMask>,
    geometric_bias: Option<&dyn Fn(usize) -> Tensor>,
) -> Result<Tensor> {
    cfg.validate()?;
    if x_q.cols() != cfg.d_k || x_kv.cols() != cfg.d_k {
        return Err(Error::shape("multi_head_attention", x_q.shape(), x_kv.shape()));
    }
    let mut store = ParamStore::new();
    let ids = MhaWeights {
        w_q: store.add(Parameter::new("W_Q", weights.w_q.clone()))?,
        w_k: store.add(Parameter::new("W_K", weights.w_k.clone()))?,
        w_v: store.add(Parameter::new("W_V", weights.w_v.clone()))?,
        w_o: store.add(Parameter::new("W_O", weights.w_o.clone()))?,
        b_o: store.add(Parameter::new("b_O", weights.b_o.clone()))?,
        q_affine: None,
        k_affine: None,
    };
    let mut proj = vec![ids.project(&store, x_q, Some(x_kv))?];
    QkNormCache::forward(cfg, &mut proj)?;
    let biases: Option<Vec<Tensor>> = geometric_bias.map(|f| (0..cfg.h).map(f).collect());
    let p = &proj[0];
    let (out, _) = ids.attend(&store, cfg.h, &p.q, &p.k, &p.v, mask, biases.as_deref(), None, 0.0)?;
    Ok(out)
}
