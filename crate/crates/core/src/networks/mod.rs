//! Network families: the UNet+ViT-LSA denoiser, the discriminator, the RRDB
//! super-resolution generator, and the segmentation UNet.
//!
//! Parameters live in a [`ParamStore`] (named f32 tensors). A forward pass
//! binds them onto a [`Graph`] — a tape plus lazy parameter binding — in f32
//! for training/inference or f64 for gradient checking.

mod attention;
mod denoiser;
mod discriminator;
mod rrdb;
mod segunet;

pub use attention::{lsa_attention, LsaParams, VitEncoder};
pub use denoiser::{Denoiser, DenoiserConfig};
pub use discriminator::{pair_input, Discriminator, DiscriminatorConfig};
pub use rrdb::{RrdbConfig, RrdbNet};
pub use segunet::{SegUnet, SegUnetConfig};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, VarId};
use crate::rng::Stream;

/// Handle to a named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Named parameter tensors with deterministic registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter())
    }
}

/// Seeded initializers. Every parameter gets its own substream keyed by
/// name, so init values do not depend on registration order.
pub struct ParamInit<'s> {
    store: &'s mut ParamStore,
    seed: u64,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl<'s> ParamInit<'s> {
    pub fn new(store: &'s mut ParamStore, seed: u64) -> Self {
        ParamInit { store, seed }
    }

    pub fn store(&mut self) -> &mut ParamStore {
        self.store
    }

    fn stream_for(&self, name: &str) -> Stream {
        Stream::derive(self.seed, &[name_hash(name)])
    }

    /// Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn uniform_fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut stream = self.stream_for(name);
        let t = Tensor::rand_uniform(shape, -bound, bound, &mut stream);
        self.store.add(name, t)
    }

    /// Convolution weight [out, in, kh, kw] with fan_in = in*kh*kw.
    pub fn conv_weight(&mut self, name: &str, shape: [usize; 4]) -> ParamId {
        let fan_in = shape[1] * shape[2] * shape[3];
        self.uniform_fan_in(name, &shape, fan_in)
    }

    /// Linear weight [in, out] with fan_in = in.
    pub fn linear_weight(&mut self, name: &str, shape: [usize; 2]) -> ParamId {
        self.uniform_fan_in(name, &shape, shape[0])
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(shape))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }
}

/// A tape plus lazily bound parameters from one store.
pub struct Graph<'s, T: Scalar> {
    pub tape: Tape<T>,
    store: &'s ParamStore,
    bound: Vec<Option<VarId>>,
    trainable: bool,
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Self::from_tape(Tape::new(), store, trainable)
    }

    pub fn from_tape(tape: Tape<T>, store: &'s ParamStore, trainable: bool) -> Self {
        Graph {
            tape,
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }

    /// Bind (once) and return the tape variable for a parameter.
    pub fn param(&mut self, id: ParamId) -> VarId {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t: Tensor<T> = self.store.get(id).cast();
        let v = self.tape.leaf(&t, self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: &Tensor<T>) -> VarId {
        self.tape.leaf(value, false)
    }

    /// Gradients of all bound parameters after a backward pass, in f32.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f32>)> {
        let mut out = Vec::new();
        for (i, bound) in self.bound.iter().enumerate() {
            if let Some(v) = bound {
                if let Some(g) = self.tape.grad(*v) {
                    out.push((ParamId(i), g.iter().map(|&x| x.to_f64() as f32).collect()));
                }
            }
        }
        out
    }

    /// Gradient of one bound parameter, if backward reached it.
    pub fn param_grad(&self, id: ParamId) -> Option<Vec<f32>> {
        self.bound[id.0].and_then(|v| {
            self.tape
                .grad(v)
                .map(|g| g.iter().map(|&x| x.to_f64() as f32).collect())
        })
    }
}

/// Sinusoidal position encoding of a diffusion step (1-indexed).
pub fn sinusoidal_time_embedding<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    let mut data = vec![T::ZERO; dim];
    let half = dim / 2;
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half.max(1) as f64);
        let angle = t as f64 * freq;
        data[2 * i] = T::from_f64(angle.sin());
        data[2 * i + 1] = T::from_f64(angle.cos());
    }
    if dim % 2 == 1 {
        data[dim - 1] = T::from_f64((t as f64).sin());
    }
    Tensor::new(vec![dim], data).expect("shape consistent")
}

/// Shared conv block: conv3x3 -> group norm -> GELU -> conv3x3 -> group norm.
#[derive(Debug, Clone)]
pub(crate) struct ConvBlock {
    w1: ParamId,
    b1: ParamId,
    g1: ParamId,
    be1: ParamId,
    w2: ParamId,
    b2: ParamId,
    g2: ParamId,
    be2: ParamId,
    groups: usize,
}

impl ConvBlock {
    pub fn build(init: &mut ParamInit, name: &str, c_in: usize, c_out: usize, groups: usize) -> Self {
        ConvBlock {
            w1: init.conv_weight(&format!("{name}.conv1.w"), [c_out, c_in, 3, 3]),
            b1: init.zeros(&format!("{name}.conv1.b"), &[c_out]),
            g1: init.ones(&format!("{name}.norm1.g"), &[c_out]),
            be1: init.zeros(&format!("{name}.norm1.b"), &[c_out]),
            w2: init.conv_weight(&format!("{name}.conv2.w"), [c_out, c_out, 3, 3]),
            b2: init.zeros(&format!("{name}.conv2.b"), &[c_out]),
            g2: init.ones(&format!("{name}.norm2.g"), &[c_out]),
            be2: init.zeros(&format!("{name}.norm2.b"), &[c_out]),
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: VarId) -> Result<VarId> {
        let w1 = g.param(self.w1);
        let b1 = g.param(self.b1);
        let gm1 = g.param(self.g1);
        let bt1 = g.param(self.be1);
        let w2 = g.param(self.w2);
        let b2 = g.param(self.b2);
        let gm2 = g.param(self.g2);
        let bt2 = g.param(self.be2);
        let h = g.tape.conv2d(x, w1, Some(b1), 1, 1)?;
        let h = g.tape.group_norm(h, self.groups, gm1, bt1, 1e-5)?;
        let h = g.tape.gelu(h);
        let h = g.tape.conv2d(h, w2, Some(b2), 1, 1)?;
        g.tape.group_norm(h, self.groups, gm2, bt2, 1e-5)
    }
}

/// Per-block learned map from the time embedding to a channel bias.
#[derive(Debug, Clone)]
pub(crate) struct TimeBias {
    w: ParamId,
    b: ParamId,
    time_dim: usize,
}

impl TimeBias {
    pub fn build(init: &mut ParamInit, name: &str, time_dim: usize, channels: usize) -> Self {
        TimeBias {
            w: init.linear_weight(&format!("{name}.w"), [time_dim, channels]),
            b: init.zeros(&format!("{name}.b"), &[channels]),
            time_dim,
        }
    }

    /// silu(sinusoid(t)) -> linear -> added to x as a per-channel bias.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: VarId, t: usize) -> Result<VarId> {
        let emb = sinusoidal_time_embedding::<T>(t, self.time_dim).reshape(&[1, self.time_dim])?;
        let e = g.input(&emb);
        let e = g.tape.silu(e);
        let w = g.param(self.w);
        let b = g.param(self.b);
        let bias_row = g.tape.linear(e, w, b)?;
        let channels = g.tape.shape(bias_row)[1];
        let bias = g.tape.reshape(bias_row, &[channels])?;
        g.tape.add_channel_bias(x, bias)
    }
}

pub(crate) fn check_channels(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::shape(format!(
            "{name}: expected {want} input channels, got {got}"
        )));
    }
    Ok(())
}

/// Gradient check a function that runs through a parameter store, treating
/// the parameters as constants and differentiating w.r.t. `x`.
pub fn grad_check_with_params<F>(
    store: &ParamStore,
    f: F,
    x: &Tensor<f64>,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, VarId) -> Result<VarId>,
{
    crate::numerics::grad_check(
        |tape, xid| {
            let mut g = Graph::from_tape(std::mem::take(tape), store, false);
            let out = f(&mut g, xid)?;
            *tape = g.into_tape();
            Ok(out)
        },
        x,
    )
}
