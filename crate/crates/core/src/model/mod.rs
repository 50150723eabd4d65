//! The encoder-decoder captioner with switchable encoder self-attention.

mod checkpoint;
mod decode;
mod layers;
mod position;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttnMask, NormMode, Projection, QkNormCache};
use crate::data::{SceneExample, PAD};
use crate::error::{Error, Result};
use crate::geometry::{absolute_geometry_encoding, BoundingBox, GeometryEmbedding, GeometryEncoder, GsaVariant, DEFAULT_CLAMP};
use crate::parallel::{self, Execution};
use crate::param::{init_parameter, GradBuffer, Init, ParamId, ParamStore, Parameter, RngState};
use crate::tensor::{linear, linear_backward, relu, relu_backward, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use decode::{beam_search_with, greedy_with, Decoded, Scorer};
pub use position::{positional_encoding, sinusoid};

use layers::{add_into, DecLayerCache, DecoderLayer, EncLayerCache, EncoderLayer, Projected};

/// Which self-attention the encoder layers use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    #[default]
    Sa,
    Nsa,
    Gsa,
    Ng,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 4] = [EncoderVariant::Sa, EncoderVariant::Nsa, EncoderVariant::Gsa, EncoderVariant::Ng];

    pub fn normalized(&self) -> bool {
        matches!(self, EncoderVariant::Nsa | EncoderVariant::Ng)
    }

    pub fn geometric(&self) -> bool {
        matches!(self, EncoderVariant::Gsa | EncoderVariant::Ng)
    }

    pub fn name(&self) -> &'static str {
        match self {
            EncoderVariant::Sa => "sa",
            EncoderVariant::Nsa => "nsa",
            EncoderVariant::Gsa => "gsa",
            EncoderVariant::Ng => "ng",
        }
    }
}

impl std::str::FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sa" => Ok(EncoderVariant::Sa),
            "nsa" => Ok(EncoderVariant::Nsa),
            "gsa" => Ok(EncoderVariant::Gsa),
            "ng" => Ok(EncoderVariant::Ng),
            other => Err(Error::Config(format!("unknown encoder variant `{other}` (sa, nsa, gsa, ng)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Layers per stack.
    pub layers: usize,
    pub model_width: usize,
    pub ffn_width: usize,
    pub feat_dim: usize,
    pub vocab_size: usize,
    /// Longest decoder input, BOS included.
    pub max_len: usize,
    pub encoder_variant: EncoderVariant,
    pub gsa_variant: GsaVariant,
    pub attention: AttentionConfig,
    pub use_absolute_geometry: bool,
    pub distance_clamp: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy(64, 4, 128, 2)
    }
}

impl ModelConfig {
    pub fn toy(width: usize, heads: usize, ffn_width: usize, layers: usize) -> Self {
        let mut attention = AttentionConfig::new(width, heads);
        attention.d_g = 16;
        ModelConfig {
            layers,
            model_width: width,
            ffn_width,
            feat_dim: 8,
            vocab_size: 12,
            max_len: 16,
            encoder_variant: EncoderVariant::Sa,
            gsa_variant: GsaVariant::QueryDependent,
            attention,
            use_absolute_geometry: false,
            distance_clamp: DEFAULT_CLAMP,
        }
    }

    /// 512 wide, 8 heads, FFN 2048, four layers per stack.
    pub fn full_scale(vocab_size: usize, feat_dim: usize) -> Self {
        ModelConfig {
            layers: 4,
            model_width: 512,
            ffn_width: 2048,
            feat_dim,
            vocab_size,
            max_len: 16,
            encoder_variant: EncoderVariant::Sa,
            gsa_variant: GsaVariant::QueryDependent,
            attention: AttentionConfig::new(512, 8),
            use_absolute_geometry: false,
            distance_clamp: DEFAULT_CLAMP,
        }
    }

    pub fn with_variant(mut self, variant: EncoderVariant, gsa: GsaVariant) -> Self {
        self.encoder_variant = variant;
        self.gsa_variant = gsa;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layer count must be at least 1".into()));
        }
        if self.model_width == 0 || self.ffn_width == 0 || self.feat_dim == 0 || self.max_len == 0 {
            return Err(Error::Config("widths and max_len must be positive".into()));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("vocabulary needs at least the three reserved tokens".into()));
        }
        if self.attention.d_k != self.model_width {
            return Err(Error::Config(format!(
                "attention.d_k ({}) must equal model_width ({})",
                self.attention.d_k, self.model_width
            )));
        }
        if self.model_width % self.attention.h.max(1) != 0 {
            return Err(Error::Config(format!(
                "model_width {} is not divisible by {} heads",
                self.model_width, self.attention.h
            )));
        }
        self.attention.validate()?;
        if self.model_width % 2 != 0 {
            return Err(Error::Config("model_width must be even for positional encodings".into()));
        }
        if self.use_absolute_geometry && self.model_width % 8 != 0 {
            return Err(Error::Config("absolute geometry needs model_width divisible by 8".into()));
        }
        if !(self.distance_clamp > 0.0) {
            return Err(Error::Config("distance_clamp must be positive".into()));
        }
        Ok(())
    }

    /// Attention settings of the encoder; normalization only for NSA/NG.
    pub fn encoder_attention(&self) -> AttentionConfig {
        let mut a = self.attention.clone();
        if !self.encoder_variant.normalized() {
            a.norm_mode = NormMode::None;
        }
        a
    }

    /// The decoder never normalizes inside attention.
    pub fn decoder_attention(&self) -> AttentionConfig {
        AttentionConfig {
            norm_mode: NormMode::None,
            ..self.attention.clone()
        }
    }

    /// Closed-form count of the scalars the geometric bias adds.
    pub fn geometry_overhead(&self) -> usize {
        if !self.encoder_variant.geometric() {
            return 0;
        }
        let d_g = self.attention.d_g;
        4 * d_g + d_g + self.layers * self.gsa_variant.layer_params(self.model_width, self.attention.h, d_g)
    }
}

/// Architecture and parameter handles; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    enc_cfg: AttentionConfig,
    dec_cfg: AttentionConfig,
    adapter_w: ParamId,
    adapter_b: ParamId,
    geometry: Option<GeometryEncoder>,
    encoder: Vec<EncoderLayer>,
    embed: ParamId,
    decoder: Vec<DecoderLayer>,
    out_w: ParamId,
    out_b: ParamId,
    pe: Tensor,
    corrupt: bool,
}

/// Per-example state carried through a batched pass.
struct Lane {
    rng: Option<RngState>,
    features: Tensor,
    pre: Tensor,
    emb: Option<GeometryEmbedding>,
    x: Tensor,
    proj: Option<Projected>,
    layers: Vec<EncLayerCache>,
}

struct DecCache {
    tokens: Vec<usize>,
    drop: Option<Vec<f64>>,
    layers: Vec<DecLayerCache>,
    hidden: Tensor,
}

/// Summed token loss of a batch and the number of scored tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub tokens: usize,
}

impl BatchLoss {
    pub fn mean(&self) -> f64 {
        self.total / self.tokens as f64
    }
}

impl Network {
    pub fn build(config: ModelConfig, seed: u64) -> Result<(Network, ParamStore)> {
        config.validate()?;
        let mut rng = RngState::new(seed);
        let mut store = ParamStore::new();
        let w = config.model_width;
        let enc_cfg = config.encoder_attention();
        let dec_cfg = config.decoder_attention();
        let adapter_w = store.add(init_parameter("enc.adapter.W", &[config.feat_dim, w], Init::GlorotUniform, &mut rng))?;
        let adapter_b = store.add(Parameter::new("enc.adapter.b", Tensor::zeros(&[w])))?;
        let geometric = config.encoder_variant.geometric();
        let geometry = if geometric {
            Some(GeometryEncoder::register(&mut store, &mut rng, "enc.geometry", config.attention.d_g)?)
        } else {
            None
        };
        let gsa = geometric.then_some(config.gsa_variant);
        let encoder = (0..config.layers)
            .map(|l| EncoderLayer::register(&mut store, &mut rng, &format!("enc.{l}"), &enc_cfg, gsa, config.ffn_width))
            .collect::<Result<Vec<_>>>()?;
        let embed = store.add(init_parameter("dec.embed", &[config.vocab_size, w], Init::GlorotUniform, &mut rng))?;
        let decoder = (0..config.layers)
            .map(|l| DecoderLayer::register(&mut store, &mut rng, &format!("dec.{l}"), &dec_cfg, config.ffn_width))
            .collect::<Result<Vec<_>>>()?;
        let out_w = store.add(init_parameter("dec.out.W", &[w, config.vocab_size], Init::GlorotUniform, &mut rng))?;
        let out_b = store.add(Parameter::new("dec.out.b", Tensor::zeros(&[config.vocab_size])))?;
        let pe = positional_encoding(config.max_len, w)?;
        Ok((
            Network {
                config,
                enc_cfg,
                dec_cfg,
                adapter_w,
                adapter_b,
                geometry,
                encoder,
                embed,
                decoder,
                out_w,
                out_b,
                pe,
                corrupt: false,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Test hook: scales one intermediate gradient by one half so gradient
    /// checks must fail.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, on: bool) {
        self.corrupt = on;
    }

    fn check_scene(&self, features: &Tensor, boxes: &[BoundingBox]) -> Result<()> {
        if features.rank() != 2 || features.cols() != self.config.feat_dim {
            return Err(Error::shape("input_adapter", features.shape(), &[0, self.config.feat_dim]));
        }
        if boxes.len() != features.rows() {
            return Err(Error::Data(format!(
                "{} feature rows but {} boxes",
                features.rows(),
                boxes.len()
            )));
        }
        Ok(())
    }

    fn adapter(&self, store: &ParamStore, features: &Tensor, boxes: &[BoundingBox], rng: Option<RngState>) -> Result<Lane> {
        self.check_scene(features, boxes)?;
        let pre = linear(features, store.value(self.adapter_w), Some(store.value(self.adapter_b)))?;
        let mut x = relu(&pre);
        if self.config.use_absolute_geometry {
            let a = absolute_geometry_encoding(boxes, 1.0, 1.0, self.config.model_width)?;
            add_into(&mut x, &a);
        }
        let emb = match &self.geometry {
            Some(g) => Some(g.forward(store, boxes, self.config.distance_clamp)?),
            None => None,
        };
        Ok(Lane {
            rng,
            features: features.clone(),
            pre,
            emb,
            x,
            proj: None,
            layers: Vec::with_capacity(self.encoder.len()),
        })
    }

    fn encode_lanes(
        &self,
        store: &ParamStore,
        scenes: &[(&Tensor, &[BoundingBox])],
        rngs: Vec<Option<RngState>>,
        exec: Execution,
    ) -> Result<(Vec<Lane>, Vec<QkNormCache>)> {
        let seeded: Vec<_> = scenes.iter().zip(rngs).collect();
        let mut lanes = parallel::try_map(exec, &seeded, |_, ((f, b), rng)| self.adapter(store, f, b, rng.clone()))?;
        let mut qk_caches = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            parallel::try_map_mut(exec, &mut lanes, |_, lane| -> Result<()> {
                lane.proj = Some(layer.project(store, &lane.x, lane.emb.as_ref())?);
                Ok(())
            })?;
            let mut projs: Vec<Projection> = lanes.iter().map(|l| l.proj.as_ref().unwrap().proj.clone()).collect();
            qk_caches.push(QkNormCache::forward(&self.enc_cfg, &mut projs)?);
            for (lane, p) in lanes.iter_mut().zip(projs) {
                lane.proj.as_mut().unwrap().proj = p;
            }
            parallel::try_map_mut(exec, &mut lanes, |_, lane| -> Result<()> {
                let projected = lane.proj.take().unwrap();
                let (y, cache) = layer.finish(store, &self.enc_cfg, &lane.x, projected, lane.rng.as_mut())?;
                lane.x = y;
                lane.layers.push(cache);
                Ok(())
            })?;
        }
        Ok((lanes, qk_caches))
    }

    fn encode_backward(
        &self,
        store: &ParamStore,
        lanes: &[Lane],
        qk: &[QkNormCache],
        dmem: Vec<Tensor>,
        grads: &mut [GradBuffer],
        exec: Execution,
    ) {
        struct Back<'a> {
            lane: &'a Lane,
            grads: &'a mut GradBuffer,
            dx: Tensor,
            dg: Option<Tensor>,
            pending: Option<layers::PendingGrad>,
        }
        let mut work: Vec<Back> = lanes
            .iter()
            .zip(grads.iter_mut())
            .zip(dmem)
            .map(|((lane, grads), dx)| Back {
                dg: lane.emb.as_ref().map(|e| Tensor::zeros(e.g.shape())),
                lane,
                grads,
                dx,
                pending: None,
            })
            .collect();
        for (l, layer) in self.encoder.iter().enumerate().rev() {
            let corrupt = self.corrupt && l == 0;
            parallel::map_mut(exec, &mut work, |_, w| {
                w.pending = Some(layer.finish_backward(store, &w.lane.layers[l], &w.dx, w.grads, corrupt));
            });
            let mut dqs: Vec<Tensor> = work.iter_mut().map(|w| std::mem::replace(&mut w.pending.as_mut().unwrap().dq, Tensor::zeros(&[1]))).collect();
            let mut dks: Vec<Tensor> = work.iter_mut().map(|w| std::mem::replace(&mut w.pending.as_mut().unwrap().dk, Tensor::zeros(&[1]))).collect();
            qk[l].backward(&mut dqs, &mut dks);
            for ((w, dq), dk) in work.iter_mut().zip(dqs).zip(dks) {
                let p = w.pending.as_mut().unwrap();
                p.dq = dq;
                p.dk = dk;
            }
            parallel::map_mut(exec, &mut work, |_, w| {
                let pending = w.pending.take().unwrap();
                w.dx = layer.project_backward(store, &w.lane.layers[l], pending, w.lane.emb.as_ref(), w.dg.as_mut(), w.grads);
            });
        }
        parallel::map_mut(exec, &mut work, |_, w| {
            if let (Some(g), Some(emb), Some(dg)) = (&self.geometry, &w.lane.emb, &w.dg) {
                g.backward(store, emb, dg, w.grads);
            }
            let mut dpre = w.dx.clone();
            relu_backward(w.lane.pre.data(), dpre.data_mut());
            let (dw, db) = w.grads.slot_pair(self.adapter_w, self.adapter_b);
            linear_backward(&w.lane.features, store.value(self.adapter_w), &dpre, dw, Some(db));
        });
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Data("decoder input is empty".into()));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Data(format!(
                "decoder input of length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Data(format!("token id {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    fn decode_forward(
        &self,
        store: &ParamStore,
        memory: &Tensor,
        tokens: &[usize],
        mut rng: Option<&mut RngState>,
    ) -> Result<(Tensor, DecCache)> {
        self.check_tokens(tokens)?;
        let w = self.config.model_width;
        let t = tokens.len();
        let scale = (w as f64).sqrt();
        let table = store.value(self.embed);
        let mut x = Vec::with_capacity(t * w);
        for (pos, &tok) in tokens.iter().enumerate() {
            for (e, p) in table.row(tok).iter().zip(self.pe.row(pos)) {
                x.push(e * scale + p);
            }
        }
        let drop = crate::attention::apply_dropout(rng.as_deref_mut(), self.dec_cfg.dropout_p, &mut x);
        let mut x = Tensor::from_parts(vec![t, w], x);
        let mask = AttnMask::causal(t);
        let mut caches = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (y, c) = layer.forward(store, &self.dec_cfg, &x, memory, &mask, rng.as_deref_mut())?;
            x = y;
            caches.push(c);
        }
        let logits = linear(&x, store.value(self.out_w), Some(store.value(self.out_b)))?;
        Ok((
            logits,
            DecCache {
                tokens: tokens.to_vec(),
                drop,
                layers: caches,
                hidden: x,
            },
        ))
    }

    fn decode_backward(&self, store: &ParamStore, cache: &DecCache, dlogits: &Tensor, grads: &mut GradBuffer) -> Tensor {
        let (dw, db) = grads.slot_pair(self.out_w, self.out_b);
        let mut dx = linear_backward(&cache.hidden, store.value(self.out_w), dlogits, dw, Some(db));
        let mut dmem: Option<Tensor> = None;
        for (layer, c) in self.decoder.iter().zip(&cache.layers).rev() {
            let (d, dm) = layer.backward(store, c, &dx, grads);
            dx = d;
            match &mut dmem {
                Some(acc) => add_into(acc, &dm),
                None => dmem = Some(dm),
            }
        }
        crate::attention::apply_mask(cache.drop.as_ref(), dx.data_mut());
        let w = self.config.model_width;
        let scale = (w as f64).sqrt();
        let de = grads.slot(self.embed);
        for (pos, &tok) in cache.tokens.iter().enumerate() {
            for (g, d) in de[tok * w..(tok + 1) * w].iter_mut().zip(dx.row(pos)) {
                *g += d * scale;
            }
        }
        dmem.expect("at least one decoder layer")
    }

    /// Decoder input and targets of a caption: `caption[..n-1]` predicts
    /// `caption[1..]`.
    fn split_caption(caption: &[usize]) -> Result<(&[usize], &[usize])> {
        if caption.len() < 2 {
            return Err(Error::Data("caption needs at least BOS and one target".into()));
        }
        Ok((&caption[..caption.len() - 1], &caption[1..]))
    }

    /// Token cross-entropy of a batch and the gradient of its per-token mean.
    /// `dropout` carries `(seed, step)`; each example derives its own stream.
    pub fn loss_and_grads(
        &self,
        store: &ParamStore,
        batch: &[&SceneExample],
        dropout: Option<(u64, u64)>,
        exec: Execution,
    ) -> Result<(BatchLoss, GradBuffer)> {
        let (loss, grads) = self.run_batch(store, batch, dropout, exec, true)?;
        Ok((loss, grads.expect("gradients requested")))
    }

    /// Dropout-free summed loss of a batch.
    pub fn batch_loss(&self, store: &ParamStore, batch: &[&SceneExample], exec: Execution) -> Result<BatchLoss> {
        self.run_batch(store, batch, None, exec, false).map(|(l, _)| l)
    }

    fn run_batch(
        &self,
        store: &ParamStore,
        batch: &[&SceneExample],
        dropout: Option<(u64, u64)>,
        exec: Execution,
        backward: bool,
    ) -> Result<(BatchLoss, Option<GradBuffer>)> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut tokens = 0;
        for ex in batch {
            let (_, targets) = Self::split_caption(&ex.caption)?;
            tokens += targets.iter().filter(|&&t| t != PAD).count();
        }
        if tokens == 0 {
            return Err(Error::Data("batch has no scored tokens".into()));
        }
        let rngs: Vec<Option<RngState>> = (0..batch.len())
            .map(|i| dropout.map(|(seed, step)| RngState::derive(seed, (step << 20) | i as u64)))
            .collect();
        let scenes: Vec<(&Tensor, &[BoundingBox])> = batch.iter().map(|e| (&e.features, e.boxes.as_slice())).collect();
        let (mut lanes, qk) = self.encode_lanes(store, &scenes, rngs, exec)?;
        let inv = 1.0 / tokens as f64;
        let items: Vec<(&SceneExample, &mut Lane)> = batch.iter().copied().zip(lanes.iter_mut()).collect();
        let mut items = items;
        let per: Vec<(f64, Option<(Tensor, GradBuffer)>)> = parallel::try_map_mut(exec, &mut items, |_, (ex, lane)| {
            let (input, targets) = Self::split_caption(&ex.caption)?;
            let (logits, cache) = self.decode_forward(store, &lane.x, input, lane.rng.as_mut())?;
            let (loss, mut dlogits) = token_cross_entropy(&logits, targets);
            if !backward {
                return Ok((loss, None));
            }
            dlogits.data_mut().iter_mut().for_each(|v| *v *= inv);
            let mut grads = store.gradient_buffer();
            let dmem = self.decode_backward(store, &cache, &dlogits, &mut grads);
            Ok::<_, Error>((loss, Some((dmem, grads))))
        })?;
        let total: f64 = per.iter().map(|(l, _)| l).sum();
        let loss = BatchLoss { total, tokens };
        if !backward {
            return Ok((loss, None));
        }
        let (dmem, mut grads): (Vec<Tensor>, Vec<GradBuffer>) = per.into_iter().map(|(_, g)| g.unwrap()).unzip();
        self.encode_backward(store, &lanes, &qk, dmem, &mut grads, exec);
        let mut iter = grads.into_iter();
        let mut acc = iter.next().unwrap();
        for g in iter {
            acc.add_assign(&g);
        }
        Ok((loss, Some(acc)))
    }

    /// Encoder output of one scene (no dropout).
    pub fn encode(&self, store: &ParamStore, features: &Tensor, boxes: &[BoundingBox]) -> Result<Tensor> {
        let (mut lanes, _) = self.encode_lanes(store, &[(features, boxes)], vec![None], Execution::Sequential)?;
        Ok(lanes.pop().unwrap().x)
    }

    /// Encoder outputs of several scenes processed as one batch, which only
    /// matters for batch normalization.
    pub fn encode_batch(&self, store: &ParamStore, scenes: &[(&Tensor, &[BoundingBox])], exec: Execution) -> Result<Vec<Tensor>> {
        let (lanes, _) = self.encode_lanes(store, scenes, vec![None; scenes.len()], exec)?;
        Ok(lanes.into_iter().map(|l| l.x).collect())
    }

    /// Post-softmax attention weights of every encoder layer and head.
    pub fn encoder_attention_weights(&self, store: &ParamStore, features: &Tensor, boxes: &[BoundingBox]) -> Result<Vec<Vec<Tensor>>> {
        let (mut lanes, _) = self.encode_lanes(store, &[(features, boxes)], vec![None], Execution::Sequential)?;
        let lane = lanes.pop().unwrap();
        Ok(lane.layers.iter().map(|c| c.attention().weights().cloned().collect()).collect())
    }

    /// Vocabulary logits `[T, V]` for a decoder input given encoder output.
    pub fn decoder_logits(&self, store: &ParamStore, memory: &Tensor, tokens: &[usize]) -> Result<Tensor> {
        self.decode_forward(store, memory, tokens, None).map(|(l, _)| l)
    }
}

/// Dense layer plus ReLU applied to region features.
pub fn input_adapter(features: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(relu(&linear(features, w, Some(b))?))
}

/// Summed `-log p(target)` over non-PAD targets and its gradient w.r.t. the
/// logits.
pub fn token_cross_entropy(logits: &Tensor, targets: &[usize]) -> (f64, Tensor) {
    let v = logits.cols();
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        if y == PAD {
            continue;
        }
        let lp = log_softmax(logits.row(t));
        total -= lp[y];
        let g = &mut grad[t * v..(t + 1) * v];
        for (gi, l) in g.iter_mut().zip(&lp) {
            *gi = l.exp();
        }
        g[y] -= 1.0;
    }
    (total, Tensor::from_parts(logits.shape().to_vec(), grad))
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// A network together with its parameter values.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: Network,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (net, params) = Network::build(config, seed)?;
        Ok(Model { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn encode(&self, features: &Tensor, boxes: &[BoundingBox]) -> Result<Tensor> {
        self.net.encode(&self.params, features, boxes)
    }

    pub fn decoder_logits(&self, memory: &Tensor, tokens: &[usize]) -> Result<Tensor> {
        self.net.decoder_logits(&self.params, memory, tokens)
    }

    /// Log-probabilities of the token after `prefix`.
    pub fn next_log_probs(&self, memory: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
        let logits = self.decoder_logits(memory, prefix)?;
        Ok(log_softmax(logits.row(prefix.len() - 1)))
    }

    fn scorer<'a>(&'a self, memory: &'a Tensor) -> impl Scorer + 'a {
        move |prefix: &[usize]| self.next_log_probs(memory, prefix)
    }

    /// Generation budget: at most `max_len` tokens after BOS, EOS included,
    /// further capped by the positional table.
    fn budget(&self, max_len: usize) -> usize {
        max_len.min(self.config().max_len)
    }

    pub fn greedy_decode(&self, features: &Tensor, boxes: &[BoundingBox], max_len: usize) -> Result<Decoded> {
        let memory = self.encode(features, boxes)?;
        self.decode_memory(&memory, 1, max_len)
    }

    pub fn beam_search(&self, features: &Tensor, boxes: &[BoundingBox], width: usize, max_len: usize) -> Result<Decoded> {
        let memory = self.encode(features, boxes)?;
        let scorer = self.scorer(&memory);
        beam_search_with(&scorer, crate::data::BOS, crate::data::EOS, width, self.budget(max_len))
    }

    pub fn decode(&self, features: &Tensor, boxes: &[BoundingBox], beam: usize, max_len: usize) -> Result<Decoded> {
        let memory = self.encode(features, boxes)?;
        self.decode_memory(&memory, beam, max_len)
    }

    /// Decodes from a precomputed encoder output; `beam <= 1` is greedy.
    pub fn decode_memory(&self, memory: &Tensor, beam: usize, max_len: usize) -> Result<Decoded> {
        let scorer = self.scorer(memory);
        let (bos, eos) = (crate::data::BOS, crate::data::EOS);
        if beam <= 1 {
            greedy_with(&scorer, bos, eos, self.budget(max_len))
        } else {
            beam_search_with(&scorer, bos, eos, beam, self.budget(max_len))
        }
    }
}
