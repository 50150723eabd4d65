use crate::attention::{
    apply_dropout, apply_mask, AttendCache, AttentionConfig, AttnMask, LayerNormCache, MhaWeights, Projection,
};
use crate::error::Result;
use crate::geometry::{GeometryEmbedding, GsaBias, GsaCache};
use crate::param::{init_parameter, GradBuffer, Init, ParamId, ParamStore, Parameter, RngState};
use crate::tensor::{linear, linear_backward, relu, relu_backward, Tensor};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Layer normalization parameters of one residual block.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct ResidualCache {
    drop: Option<Vec<f64>>,
    ln: LayerNormCache,
}

impl Norm {
    pub fn register(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        Ok(Norm {
            gamma: store.add(Parameter::new(format!("{prefix}.gamma"), Tensor::ones(&[width])))?,
            beta: store.add(Parameter::new(format!("{prefix}.beta"), Tensor::zeros(&[width])))?,
        })
    }

    /// `LN(x + dropout(sub))`.
    pub fn add_norm(
        &self,
        store: &ParamStore,
        x: &Tensor,
        mut sub: Tensor,
        rng: Option<&mut RngState>,
        p: f64,
    ) -> Result<(Tensor, ResidualCache)> {
        let drop = apply_dropout(rng, p, sub.data_mut());
        let r = x.add(&sub)?;
        let (y, ln) = LayerNormCache::forward(&r, store.value(self.gamma), store.value(self.beta), LN_EPS)?;
        Ok((y, ResidualCache { drop, ln }))
    }

    /// Returns `(d residual input, d sub-layer output)`.
    pub fn add_norm_backward(
        &self,
        store: &ParamStore,
        cache: &ResidualCache,
        dy: &Tensor,
        grads: &mut GradBuffer,
    ) -> (Tensor, Tensor) {
        let (dg, db) = grads.slot_pair(self.gamma, self.beta);
        let dr = cache.ln.backward(dy, store.value(self.gamma), dg, db);
        let mut dsub = dr.clone();
        apply_mask(cache.drop.as_ref(), dsub.data_mut());
        (dr, dsub)
    }
}

/// Position-wise `ReLU(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Ffn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct FfnCache {
    x: Tensor,
    pre: Tensor,
    hidden: Tensor,
}

impl Ffn {
    pub fn register(store: &mut ParamStore, rng: &mut RngState, prefix: &str, width: usize, inner: usize) -> Result<Self> {
        Ok(Ffn {
            w1: store.add(init_parameter(format!("{prefix}.W1"), &[width, inner], Init::GlorotUniform, rng))?,
            b1: store.add(Parameter::new(format!("{prefix}.b1"), Tensor::zeros(&[inner])))?,
            w2: store.add(init_parameter(format!("{prefix}.W2"), &[inner, width], Init::GlorotUniform, rng))?,
            b2: store.add(Parameter::new(format!("{prefix}.b2"), Tensor::zeros(&[width])))?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, FfnCache)> {
        let pre = linear(x, store.value(self.w1), Some(store.value(self.b1)))?;
        let hidden = relu(&pre);
        let y = linear(&hidden, store.value(self.w2), Some(store.value(self.b2)))?;
        Ok((
            y,
            FfnCache {
                x: x.clone(),
                pre,
                hidden,
            },
        ))
    }

    pub fn backward(&self, store: &ParamStore, cache: &FfnCache, dy: &Tensor, grads: &mut GradBuffer) -> Tensor {
        let (dw2, db2) = grads.slot_pair(self.w2, self.b2);
        let mut dh = linear_backward(&cache.hidden, store.value(self.w2), dy, dw2, Some(db2));
        relu_backward(cache.pre.data(), dh.data_mut());
        let (dw1, db1) = grads.slot_pair(self.w1, self.b1);
        linear_backward(&cache.x, store.value(self.w1), &dh, dw1, Some(db1))
    }
}

/// Self-attention (optionally geometry-biased) and FFN, each followed by
/// add & norm.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EncoderLayer {
    pub attn: MhaWeights,
    pub gsa: Option<GsaBias>,
    norm1: Norm,
    ffn: Ffn,
    norm2: Norm,
}

/// Output of the per-example projection stage, before the batch-level
/// query/key normalization.
#[derive(Debug, Clone)]
pub(crate) struct Projected {
    pub proj: Projection,
    pub biases: Option<Vec<Tensor>>,
    pub gsa: Option<GsaCache>,
}

#[derive(Debug, Clone)]
pub(crate) struct EncLayerCache {
    proj: Projection,
    gsa: Option<GsaCache>,
    attend: AttendCache,
    res1: ResidualCache,
    ffn: FfnCache,
    res2: ResidualCache,
}

impl EncLayerCache {
    pub fn attention(&self) -> &AttendCache {
        &self.attend
    }
}

/// Gradients leaving the attention stage of one encoder layer, waiting for
/// the batch-level normalization backward.
#[derive(Debug, Clone)]
pub(crate) struct PendingGrad {
    pub dx: Tensor,
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
    pub dbias: Vec<Tensor>,
}

impl EncoderLayer {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut RngState,
        prefix: &str,
        cfg: &AttentionConfig,
        gsa: Option<crate::geometry::GsaVariant>,
        ffn_width: usize,
    ) -> Result<Self> {
        let attn = MhaWeights::register(store, rng, &format!("{prefix}.attn"), cfg, cfg.normalizes())?;
        let gsa = match gsa {
            Some(v) => Some(GsaBias::register(store, rng, &format!("{prefix}.gsa"), v, cfg.d_k, cfg.h, cfg.d_g)?),
            None => None,
        };
        Ok(EncoderLayer {
            attn,
            gsa,
            norm1: Norm::register(store, &format!("{prefix}.ln1"), cfg.d_k)?,
            ffn: Ffn::register(store, rng, &format!("{prefix}.ffn"), cfg.d_k, ffn_width)?,
            norm2: Norm::register(store, &format!("{prefix}.ln2"), cfg.d_k)?,
        })
    }

    pub fn project(&self, store: &ParamStore, x: &Tensor, emb: Option<&GeometryEmbedding>) -> Result<Projected> {
        let proj = self.attn.project(store, x, None)?;
        let (biases, gsa) = match (&self.gsa, emb) {
            (Some(g), Some(emb)) => {
                let (b, c) = g.forward(store, x, emb)?;
                (Some(b), Some(c))
            }
            _ => (None, None),
        };
        Ok(Projected { proj, biases, gsa })
    }

    /// Attention over the normalized projections, then both residual blocks.
    pub fn finish(
        &self,
        store: &ParamStore,
        cfg: &AttentionConfig,
        x: &Tensor,
        projected: Projected,
        mut rng: Option<&mut RngState>,
    ) -> Result<(Tensor, EncLayerCache)> {
        let Projected { proj, biases, gsa } = projected;
        let p = cfg.dropout_p;
        let (a, attend) = self.attn.attend(
            store,
            cfg.h,
            &proj.q,
            &proj.k,
            &proj.v,
            None,
            biases.as_deref(),
            rng.as_deref_mut(),
            p,
        )?;
        let (h1, res1) = self.norm1.add_norm(store, x, a, rng.as_deref_mut(), p)?;
        let (f, ffn) = self.ffn.forward(store, &h1)?;
        let (y, res2) = self.norm2.add_norm(store, &h1, f, rng, p)?;
        Ok((
            y,
            EncLayerCache {
                proj,
                gsa,
                attend,
                res1,
                ffn,
                res2,
            },
        ))
    }

    pub fn finish_backward(
        &self,
        store: &ParamStore,
        cache: &EncLayerCache,
        dy: &Tensor,
        grads: &mut GradBuffer,
        corrupt: bool,
    ) -> PendingGrad {
        let (dh1_res, df) = self.norm2.add_norm_backward(store, &cache.res2, dy, grads);
        let mut dh1 = self.ffn.backward(store, &cache.ffn, &df, grads);
        if corrupt {
            dh1 = dh1.map(|v| v * 0.5);
        }
        for (a, b) in dh1.data_mut().iter_mut().zip(dh1_res.data()) {
            *a += b;
        }
        let (dx, da) = self.norm1.add_norm_backward(store, &cache.res1, &dh1, grads);
        let (dq, dk, dv, dbias) = self.attn.attend_backward(store, &cache.attend, &da, grads);
        PendingGrad { dx, dq, dk, dv, dbias }
    }

    /// Completes the layer backward once `dq`/`dk` refer to the raw
    /// projections. Geometry gradients are added into `dg`.
    pub fn project_backward(
        &self,
        store: &ParamStore,
        cache: &EncLayerCache,
        pending: PendingGrad,
        emb: Option<&GeometryEmbedding>,
        dg: Option<&mut Tensor>,
        grads: &mut GradBuffer,
    ) -> Tensor {
        let PendingGrad { mut dx, dq, dk, dv, dbias } = pending;
        let (dxq, _) = self.attn.project_backward(store, &cache.proj, &dq, &dk, &dv, grads);
        for (a, b) in dx.data_mut().iter_mut().zip(dxq.data()) {
            *a += b;
        }
        if let (Some(g), Some(gc), Some(emb), Some(dg)) = (&self.gsa, &cache.gsa, emb, dg) {
            if let Some(dxg) = g.backward(store, gc, emb, &dbias, dg, grads) {
                for (a, b) in dx.data_mut().iter_mut().zip(dxg.data()) {
                    *a += b;
                }
            }
        }
        dx
    }
}

/// Causal self-attention, cross-attention over the encoder output and FFN.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DecoderLayer {
    self_attn: MhaWeights,
    norm1: Norm,
    cross: MhaWeights,
    norm2: Norm,
    ffn: Ffn,
    norm3: Norm,
}

#[derive(Debug, Clone)]
pub(crate) struct DecLayerCache {
    self_proj: Projection,
    self_att: AttendCache,
    res1: ResidualCache,
    cross_proj: Projection,
    cross_att: AttendCache,
    res2: ResidualCache,
    ffn: FfnCache,
    res3: ResidualCache,
}

impl DecoderLayer {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut RngState,
        prefix: &str,
        cfg: &AttentionConfig,
        ffn_width: usize,
    ) -> Result<Self> {
        let w = cfg.d_k;
        Ok(DecoderLayer {
            self_attn: MhaWeights::register(store, rng, &format!("{prefix}.self"), cfg, false)?,
            norm1: Norm::register(store, &format!("{prefix}.ln1"), w)?,
            cross: MhaWeights::register(store, rng, &format!("{prefix}.cross"), cfg, false)?,
            norm2: Norm::register(store, &format!("{prefix}.ln2"), w)?,
            ffn: Ffn::register(store, rng, &format!("{prefix}.ffn"), w, ffn_width)?,
            norm3: Norm::register(store, &format!("{prefix}.ln3"), w)?,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        cfg: &AttentionConfig,
        x: &Tensor,
        memory: &Tensor,
        mask: &AttnMask,
        mut rng: Option<&mut RngState>,
    ) -> Result<(Tensor, DecLayerCache)> {
        let p = cfg.dropout_p;
        let sp = self.self_attn.project(store, x, None)?;
        let (a, self_att) =
            self.self_attn
                .attend(store, cfg.h, &sp.q, &sp.k, &sp.v, Some(mask), None, rng.as_deref_mut(), p)?;
        let (h1, res1) = self.norm1.add_norm(store, x, a, rng.as_deref_mut(), p)?;
        let cp = self.cross.project(store, &h1, Some(memory))?;
        let (c, cross_att) = self
            .cross
            .attend(store, cfg.h, &cp.q, &cp.k, &cp.v, None, None, rng.as_deref_mut(), p)?;
        let (h2, res2) = self.norm2.add_norm(store, &h1, c, rng.as_deref_mut(), p)?;
        let (f, ffn) = self.ffn.forward(store, &h2)?;
        let (y, res3) = self.norm3.add_norm(store, &h2, f, rng, p)?;
        Ok((
            y,
            DecLayerCache {
                self_proj: sp,
                self_att,
                res1,
                cross_proj: cp,
                cross_att,
                res2,
                ffn,
                res3,
            },
        ))
    }

    /// Returns `(dx, d memory)`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &DecLayerCache,
        dy: &Tensor,
        grads: &mut GradBuffer,
    ) -> (Tensor, Tensor) {
        let (dh2_res, df) = self.norm3.add_norm_backward(store, &cache.res3, dy, grads);
        let mut dh2 = self.ffn.backward(store, &cache.ffn, &df, grads);
        add_into(&mut dh2, &dh2_res);
        let (dh1_res, dc) = self.norm2.add_norm_backward(store, &cache.res2, &dh2, grads);
        let (dq, dk, dv, _) = self.cross.attend_backward(store, &cache.cross_att, &dc, grads);
        let (mut dh1, dmem) = self.cross.project_backward(store, &cache.cross_proj, &dq, &dk, &dv, grads);
        add_into(&mut dh1, &dh1_res);
        let (mut dx, da) = self.norm1.add_norm_backward(store, &cache.res1, &dh1, grads);
        let (dq, dk, dv, _) = self.self_attn.attend_backward(store, &cache.self_att, &da, grads);
        let (dxs, _) = self.self_attn.project_backward(store, &cache.self_proj, &dq, &dk, &dv, grads);
        add_into(&mut dx, &dxs);
        (dx, dmem.expect("cross-attention has a separate memory input"))
    }
}

pub(crate) fn add_into(a: &mut Tensor, b: &Tensor) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}
