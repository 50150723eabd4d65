//! Pairwise box geometry and the geometric attention biases built on it.
//!
//! The relative feature of boxes `i` and `j` is
//! `(ln(|Δx|/w_i), ln(|Δy|/h_i), ln(w_i/w_j), ln(h_i/h_j))`, with `|Δx|` and
//! `|Δy|` floored at a small clamp so coincident centers stay finite. It is
//! embedded once per forward pass by a shared `FC + ReLU` into `G[N,N,d_g]`,
//! and each attention head turns `G` into an additive energy bias in one of
//! three ways (content-independent, query-dependent, key-dependent).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::sinusoid;
use crate::param::{init_parameter, GradBuffer, Init, ParamId, ParamStore, Parameter, RngState};
use crate::tensor::{linear, linear_backward, mm_nt, relu_backward, Tensor};

/// Floor applied to `|Δx|` and `|Δy|` before the log.
pub const DEFAULT_CLAMP: f64 = 1e-3;

/// Positions of normalized box scalars on the sinusoid axis.
pub const ABSOLUTE_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !x.is_finite() || !y.is_finite() || !w.is_finite() || !h.is_finite() {
            return Err(Error::Domain(format!("box ({x}, {y}, {w}, {h}) needs finite center and positive size")));
        }
        Ok(BoundingBox { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// The 4-vector relating box `i` to box `j`.
pub fn relative_feature(bi: &BoundingBox, bj: &BoundingBox, clamp: f64) -> [f64; 4] {
    let dx = (bi.x - bj.x).abs().max(clamp);
    let dy = (bi.y - bj.y).abs().max(clamp);
    [
        (dx / bi.w).ln(),
        (dy / bi.h).ln(),
        (bi.w / bj.w).ln(),
        (bi.h / bj.h).ln(),
    ]
}

/// `[N, N, 4]` tensor of pairwise relative features.
pub fn relative_geometry(boxes: &[BoundingBox], clamp: f64) -> Result<Tensor> {
    if boxes.is_empty() {
        return Err(Error::Contract("relative_geometry needs at least one box".into()));
    }
    if !(clamp > 0.0) {
        return Err(Error::Config("distance clamp must be positive".into()));
    }
    for b in boxes {
        BoundingBox::new(b.x, b.y, b.w, b.h)?;
    }
    let n = boxes.len();
    let mut data = Vec::with_capacity(n * n * 4);
    for bi in boxes {
        for bj in boxes {
            data.extend(relative_feature(bi, bj, clamp));
        }
    }
    Ok(Tensor::from_parts(vec![n, n, 4], data))
}

/// Embedded pairwise geometry, `G = ReLU(f W_g + b_g)`.
#[derive(Debug, Clone)]
pub struct GeometryEmbedding {
    pub g: Tensor,
    f: Tensor,
    pre: Tensor,
}

impl GeometryEmbedding {
    pub fn n(&self) -> usize {
        self.g.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.g.shape()[2]
    }
}

pub fn embed_geometry(f: &Tensor, w_g: &Tensor, b_g: &Tensor) -> Result<GeometryEmbedding> {
    let n = match *f.shape() {
        [n, m, 4] if n == m => n,
        _ => return Err(Error::shape("embed_geometry", f.shape(), &[0, 0, 4])),
    };
    if w_g.rows() != 4 || w_g.rank() != 2 {
        return Err(Error::shape("embed_geometry", f.shape(), w_g.shape()));
    }
    let dg = w_g.cols();
    let flat = f.clone().reshape(&[n * n, 4])?;
    let pre = linear(&flat, w_g, Some(b_g))?;
    let g = crate::tensor::relu(&pre).reshape(&[n, n, dg])?;
    Ok(GeometryEmbedding { g, f: flat, pre })
}

/// Parameters of the shared geometry FC.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryEncoder {
    pub w_g: ParamId,
    pub b_g: ParamId,
}

impl GeometryEncoder {
    pub fn register(store: &mut ParamStore, rng: &mut RngState, prefix: &str, d_g: usize) -> Result<Self> {
        let w_g = store.add(init_parameter(format!("{prefix}.W_g"), &[4, d_g], Init::GlorotUniform, rng))?;
        // Small positive bias keeps most units alive for the clamped diagonal.
        let b_g = store.add(Parameter::new(format!("{prefix}.b_g"), Tensor::full(&[d_g], 0.1)))?;
        Ok(GeometryEncoder { w_g, b_g })
    }

    pub fn forward(&self, store: &ParamStore, boxes: &[BoundingBox], clamp: f64) -> Result<GeometryEmbedding> {
        let f = relative_geometry(boxes, clamp)?;
        embed_geometry(&f, store.value(self.w_g), store.value(self.b_g))
    }

    pub fn backward(&self, store: &ParamStore, emb: &GeometryEmbedding, dg: &Tensor, grads: &mut GradBuffer) {
        let mut d = dg.data().to_vec();
        relu_backward(emb.pre.data(), &mut d);
        let d = Tensor::from_parts(emb.pre.shape().to_vec(), d);
        let (gw, gb) = grads.slot_pair(self.w_g, self.b_g);
        linear_backward(&emb.f, store.value(self.w_g), &d, gw, Some(gb));
    }
}

/// How the embedded geometry becomes an energy bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GsaVariant {
    ContentIndependent,
    #[default]
    QueryDependent,
    KeyDependent,
}

impl GsaVariant {
    pub fn short(&self) -> &'static str {
        match self {
            GsaVariant::ContentIndependent => "ci",
            GsaVariant::QueryDependent => "qd",
            GsaVariant::KeyDependent => "kd",
        }
    }

    pub fn from_short(s: &str) -> Result<Self> {
        match s {
            "ci" => Ok(GsaVariant::ContentIndependent),
            "qd" => Ok(GsaVariant::QueryDependent),
            "kd" => Ok(GsaVariant::KeyDependent),
            other => Err(Error::Config(format!("unknown geometric bias variant `{other}` (ci, qd, kd)"))),
        }
    }

    /// Scalar parameters one layer adds for this variant.
    pub fn layer_params(&self, width: usize, heads: usize, d_g: usize) -> usize {
        match self {
            GsaVariant::ContentIndependent => heads * d_g,
            GsaVariant::QueryDependent | GsaVariant::KeyDependent => width * heads * d_g,
        }
    }
}

/// `φ¹_ij = ReLU(w_gᵀ G_ij)`.
pub fn phi_content_independent(g: &Tensor, w_g: &Tensor) -> Result<Tensor> {
    let (n, dg) = square_geometry(g)?;
    if w_g.len() != dg {
        return Err(Error::shape("phi_content_independent", g.shape(), w_g.shape()));
    }
    let s = mm_nt(g.data(), w_g.data(), n * n, dg, 1);
    Ok(Tensor::from_parts(vec![n, n], s.into_iter().map(|v| v.max(0.0)).collect()))
}

/// `φ²_ij = Q′_iᵀ G_ij`.
pub fn phi_query_dependent(q_prime: &Tensor, g: &Tensor) -> Result<Tensor> {
    pairwise_dot(q_prime, g, true)
}

/// `φ³_ij = K′_jᵀ G_ij`.
pub fn phi_key_dependent(k_prime: &Tensor, g: &Tensor) -> Result<Tensor> {
    pairwise_dot(k_prime, g, false)
}

fn square_geometry(g: &Tensor) -> Result<(usize, usize)> {
    match *g.shape() {
        [n, m, dg] if n == m => Ok((n, dg)),
        _ => Err(Error::shape("geometry embedding", g.shape(), &[0, 0, 0])),
    }
}

fn pairwise_dot(rows: &Tensor, g: &Tensor, by_query: bool) -> Result<Tensor> {
    let (n, dg) = square_geometry(g)?;
    if rows.rows() != n || rows.cols() != dg {
        return Err(Error::shape("geometric bias", rows.shape(), g.shape()));
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let gij = &g.data()[(i * n + j) * dg..(i * n + j + 1) * dg];
            let r = rows.row(if by_query { i } else { j });
            let mut s = 0.0;
            for (a, b) in r.iter().zip(gij) {
                s += a * b;
            }
            out[i * n + j] = s;
        }
    }
    Ok(Tensor::from_parts(vec![n, n], out))
}

/// `E = Q Kᵀ/√d + φ`.
pub fn gsa_energy(q: &Tensor, k: &Tensor, phi: &Tensor) -> Result<Tensor> {
    let (n, d, m) = (q.rows(), q.cols(), k.rows());
    if k.cols() != d || phi.rows() != n || phi.cols() != m {
        return Err(Error::shape("gsa_energy", q.shape(), phi.shape()));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut e = mm_nt(q.data(), k.data(), n, d, m);
    for (v, p) in e.iter_mut().zip(phi.data()) {
        *v = *v * scale + p;
    }
    Ok(Tensor::from_parts(vec![n, m], e))
}

/// Per-layer parameters of the active geometric bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GsaBias {
    pub variant: GsaVariant,
    /// `[h, d_g]` for content-independent, `[width, h·d_g]` otherwise.
    pub param: ParamId,
    pub heads: usize,
    pub d_g: usize,
}

#[derive(Debug, Clone)]
pub struct GsaCache {
    x: Option<Tensor>,
    proj: Option<Tensor>,
    scores: Option<Tensor>,
}

impl GsaBias {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut RngState,
        prefix: &str,
        variant: GsaVariant,
        width: usize,
        heads: usize,
        d_g: usize,
    ) -> Result<Self> {
        let (name, shape) = match variant {
            GsaVariant::ContentIndependent => ("w_g", vec![heads, d_g]),
            GsaVariant::QueryDependent => ("W_Qg", vec![width, heads * d_g]),
            GsaVariant::KeyDependent => ("W_Kg", vec![width, heads * d_g]),
        };
        let param = store.add(init_parameter(format!("{prefix}.{name}"), &shape, Init::GlorotUniform, rng))?;
        Ok(GsaBias {
            variant,
            param,
            heads,
            d_g,
        })
    }

    /// One `[N, N]` bias per head for layer input `x`.
    pub fn forward(&self, store: &ParamStore, x: &Tensor, emb: &GeometryEmbedding) -> Result<(Vec<Tensor>, GsaCache)> {
        let (n, dg) = (emb.n(), self.d_g);
        let g = &emb.g;
        let p = store.value(self.param);
        match self.variant {
            GsaVariant::ContentIndependent => {
                let mut out = Vec::with_capacity(self.heads);
                let mut scores = Vec::with_capacity(self.heads * n * n);
                for h in 0..self.heads {
                    let w = &p.data()[h * dg..(h + 1) * dg];
                    let s = mm_nt(g.data(), w, n * n, dg, 1);
                    out.push(Tensor::from_parts(vec![n, n], s.iter().map(|v| v.max(0.0)).collect()));
                    scores.extend(s);
                }
                let scores = Tensor::from_parts(vec![self.heads, n * n], scores);
                Ok((
                    out,
                    GsaCache {
                        x: None,
                        proj: None,
                        scores: Some(scores),
                    },
                ))
            }
            GsaVariant::QueryDependent | GsaVariant::KeyDependent => {
                let proj = linear(x, p, None)?;
                let by_query = self.variant == GsaVariant::QueryDependent;
                let out = (0..self.heads)
                    .map(|h| pairwise_dot(&proj.col_block(h * dg, dg), g, by_query))
                    .collect::<Result<Vec<_>>>()?;
                Ok((
                    out,
                    GsaCache {
                        x: Some(x.clone()),
                        proj: Some(proj),
                        scores: None,
                    },
                ))
            }
        }
    }

    /// Accumulates parameter gradients and `dG`; returns `dX` for the
    /// content-dependent variants.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &GsaCache,
        emb: &GeometryEmbedding,
        dbias: &[Tensor],
        dg_out: &mut Tensor,
        grads: &mut GradBuffer,
    ) -> Option<Tensor> {
        let (n, dg) = (emb.n(), self.d_g);
        let g = emb.g.data();
        let p = store.value(self.param);
        match self.variant {
            GsaVariant::ContentIndependent => {
                let scores = cache.scores.as_ref().unwrap();
                let gw = grads.slot(self.param);
                let dgd = dg_out.data_mut();
                for (h, db) in dbias.iter().enumerate() {
                    let w = &p.data()[h * dg..(h + 1) * dg];
                    let s = &scores.data()[h * n * n..(h + 1) * n * n];
                    for pair in 0..n * n {
                        if s[pair] <= 0.0 {
                            continue;
                        }
                        let d = db.data()[pair];
                        let gij = &g[pair * dg..(pair + 1) * dg];
                        for c in 0..dg {
                            gw[h * dg + c] += d * gij[c];
                            dgd[pair * dg + c] += d * w[c];
                        }
                    }
                }
                None
            }
            GsaVariant::QueryDependent | GsaVariant::KeyDependent => {
                let by_query = self.variant == GsaVariant::QueryDependent;
                let proj = cache.proj.as_ref().unwrap();
                let x = cache.x.as_ref().unwrap();
                let width = proj.cols();
                let mut dproj = vec![0.0; n * width];
                let dgd = dg_out.data_mut();
                for (h, db) in dbias.iter().enumerate() {
                    for i in 0..n {
                        for j in 0..n {
                            let d = db.data()[i * n + j];
                            let pair = i * n + j;
                            let row = if by_query { i } else { j };
                            let gij = &g[pair * dg..(pair + 1) * dg];
                            for c in 0..dg {
                                dproj[row * width + h * dg + c] += d * gij[c];
                                dgd[pair * dg + c] += d * proj.data()[row * width + h * dg + c];
                            }
                        }
                    }
                }
                let dproj = Tensor::from_parts(vec![n, width], dproj);
                Some(linear_backward(x, p, &dproj, grads.slot(self.param), None))
            }
        }
    }
}

/// Sinusoidal embedding of normalized `(x, y, w, h)` per box, each scalar
/// taking `model_width / 4` channels.
pub fn absolute_geometry_encoding(
    boxes: &[BoundingBox],
    image_w: f64,
    image_h: f64,
    model_width: usize,
) -> Result<Tensor> {
    if model_width % 8 != 0 || model_width == 0 {
        return Err(Error::Config(format!(
            "absolute geometry needs a model width divisible by 8, got {model_width}"
        )));
    }
    if !(image_w > 0.0 && image_h > 0.0) {
        return Err(Error::Domain("image size must be positive".into()));
    }
    let block = model_width / 4;
    let mut data = Vec::with_capacity(boxes.len() * model_width);
    for b in boxes {
        for s in [b.x / image_w, b.y / image_h, b.w / image_w, b.h / image_h] {
            data.extend(sinusoid(s * ABSOLUTE_SCALE, block));
        }
    }
    Tensor::new(vec![boxes.len(), model_width], data)
}

/// One fixed slice of the geometric-weight surface.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSlice {
    /// `xy` (position varies) or `wh` (size varies).
    pub family: &'static str,
    pub fixed: f64,
    pub rows: Vec<(f64, f64, f64)>,
}

impl SweepSlice {
    pub fn file_name(&self) -> String {
        format!("sweep_{}_{}.csv", self.family, self.fixed)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("a,b,phi\n");
        for (a, b, phi) in &self.rows {
            let _ = writeln!(s, "{a:.6},{b:.6},{phi:.6}");
        }
        s
    }
}

pub const SWEEP_FIXED: [f64; 3] = [0.5, 1.0, 2.0];

/// Content-independent bias evaluated directly on a 4-vector.
pub fn phi_from_feature(f: [f64; 4], w_geo: &Tensor, b_geo: &Tensor, w_phi: &[f64]) -> f64 {
    let dg = w_geo.cols();
    let mut s = 0.0;
    for c in 0..dg {
        let mut pre = b_geo.data()[c];
        for (k, fk) in f.iter().enumerate() {
            pre += fk * w_geo.data()[k * dg + c];
        }
        s += pre.max(0.0) * w_phi[c];
    }
    s.max(0.0)
}

/// Evaluates `φ¹` over `Δx, Δy ∈ [0, 3]` with `Δw = Δh` fixed, and over
/// `Δw, Δh ∈ [0, 3]` with `Δx = Δy` fixed, for the fixed values 0.5, 1, 2.
/// Zero deltas are floored at `clamp`.
pub fn sweep_geometric_weights(
    w_geo: &Tensor,
    b_geo: &Tensor,
    w_phi: &[f64],
    step: f64,
    clamp: f64,
) -> Result<Vec<SweepSlice>> {
    if !(step > 0.0) || step > 3.0 {
        return Err(Error::Config(format!("sweep step must lie in (0, 3], got {step}")));
    }
    if w_geo.rows() != 4 || w_geo.cols() != w_phi.len() || b_geo.len() != w_phi.len() {
        return Err(Error::shape("sweep_geometric_weights", w_geo.shape(), &[w_phi.len()]));
    }
    let count = (3.0 / step + 1e-9).floor() as usize + 1;
    let grid: Vec<f64> = (0..count).map(|i| i as f64 * step).collect();
    let lg = |v: f64| v.max(clamp).ln();
    let mut slices = Vec::with_capacity(6);
    for (family, varies_position) in [("xy", true), ("wh", false)] {
        for fixed in SWEEP_FIXED {
            let mut rows = Vec::with_capacity(count * count);
            for &a in &grid {
                for &b in &grid {
                    let f = if varies_position {
                        [lg(a), lg(b), lg(fixed), lg(fixed)]
                    } else {
                        [lg(fixed), lg(fixed), lg(a), lg(b)]
                    };
                    rows.push((a, b, phi_from_feature(f, w_geo, b_geo, w_phi)));
                }
            }
            slices.push(SweepSlice { family, fixed, rows });
        }
    }
    Ok(slices)
}

pub fn write_sweep(dir: &Path, slices: &[SweepSlice]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    slices
        .iter()
        .map(|s| {
            let path = dir.join(s.file_name());
            std::fs::write(&path, s.to_csv())?;
            Ok(path)
        })
        .collect()
}
