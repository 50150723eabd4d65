//! Named parameters, gradient buffers, initialization and seeded randomness.

use std::collections::HashMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Seeded deterministic generator. Identical seeds give identical streams.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream derived from this seed and a stream label.
    pub fn derive(seed: u64, stream: u64) -> Self {
        RngState::new(splitmix(seed ^ splitmix(stream.wrapping_add(0x9e37_79b9_7f4a_7c15))))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Bernoulli draw with success probability `p`.
    pub fn chance(&mut self, p: f64) -> bool {
        self.rng.random::<f64>() < p
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(rand_distr::StandardNormal)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    GlorotUniform,
    Zeros,
    Ones,
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-glorot" | "glorot" => Ok(Init::GlorotUniform),
            "zeros" => Ok(Init::Zeros),
            "ones" => Ok(Init::Ones),
            other => Err(Error::Config(format!("unknown init scheme `{other}`"))),
        }
    }
}

/// Fan-in/fan-out from the last two axes; vectors count as `[n, 1]`.
fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, 1),
        [.., a, b] => (*a, *b),
        [] => (1, 1),
    }
}

pub fn init_tensor(shape: &[usize], scheme: Init, rng: &mut RngState) -> Tensor {
    match scheme {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::GlorotUniform => {
            let (fi, fo) = fans(shape);
            let bound = (6.0 / (fi + fo) as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
            Tensor::from_parts(shape.to_vec(), data)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub gradient: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let gradient = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            gradient,
        }
    }
}

pub fn init_parameter(
    name: impl Into<String>,
    shape: &[usize],
    scheme: Init,
    rng: &mut RngState,
) -> Parameter {
    Parameter::new(name, init_tensor(shape, scheme, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Flat, ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, param: Parameter) -> Result<ParamId> {
        if self.index.contains_key(&param.name) {
            return Err(Error::Config(format!("duplicate parameter name `{}`", param.name)));
        }
        let id = self.params.len();
        self.index.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(ParamId(id))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_gradients(&mut self) {
        for p in &mut self.params {
            p.gradient.data_mut().fill(0.0);
        }
    }

    /// Adds a gradient buffer into the stored gradients (`+=`).
    pub fn accumulate(&mut self, grads: &GradBuffer) {
        for (p, g) in self.params.iter_mut().zip(&grads.slots) {
            for (a, b) in p.gradient.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    pub fn gradient_buffer(&self) -> GradBuffer {
        GradBuffer {
            slots: self.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }
}

/// Per-parameter gradient storage detached from the parameters, so several
/// examples can be differentiated independently and reduced in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    slots: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn slot(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.slots[id.0]
    }

    /// Two distinct slots borrowed mutably at once.
    pub fn slot_pair(&mut self, a: ParamId, b: ParamId) -> (&mut [f64], &mut [f64]) {
        assert_ne!(a, b, "slot_pair needs distinct parameters");
        if a.0 < b.0 {
            let (lo, hi) = self.slots.split_at_mut(b.0);
            (&mut lo[a.0], &mut hi[0])
        } else {
            let (lo, hi) = self.slots.split_at_mut(a.0);
            (&mut hi[0], &mut lo[b.0])
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.slots[id.0]
    }

    pub fn add_assign(&mut self, other: &GradBuffer) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.slots.iter_mut().flatten() {
            *v *= s;
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.slots.iter().flatten().map(|v| v * v).sum()
    }
}
