//! The separation network: an input transform, `N` attention blocks and a
//! transposed-convolution output transform producing a non-negative mask.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{AttentionScale, MaskActivation, ModelConfig};

use std::ops::Range;

use rand::Rng;

use crate::numerics::{Eager, Graph, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// `U(−√(6/fan_in), √(6/fan_in))`
    He(usize),
    Zeros,
    Ones,
}

/// Name, shape and initialiser of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct AttentionIdx {
    /// Q, K, V projections per head.
    heads: Vec<[Conv; 3]>,
    recovery: Conv,
    norm_in: Norm,
    norm_out: Option<Norm>,
}

#[derive(Clone, Debug)]
struct BlockIdx {
    attention: Option<AttentionIdx>,
    depthwise: usize,
    pointwise: Conv,
    norm_in: Norm,
    norm_out: Option<Norm>,
}

#[derive(Clone, Debug)]
struct Layout {
    specs: Vec<ParamSpec>,
    input_norm: Option<Norm>,
    input: Conv,
    blocks: Vec<BlockIdx>,
    output: Conv,
}

#[derive(Default)]
struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> Conv {
        Conv {
            w: self.push(format!("{name}.weight"), vec![cout, cin, k, k], Init::He(cin * k * k)),
            b: self.push(format!("{name}.bias"), vec![cout], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, c: usize, f: usize) -> Norm {
        Norm {
            gain: self.push(format!("{name}.gain"), vec![c, f], Init::Ones),
            bias: self.push(format!("{name}.bias"), vec![c, f], Init::Zeros),
        }
    }
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let (c, f) = (cfg.channels, cfg.freq_bins);
        let mut b = Builder::default();
        let input_norm = cfg.input_norm.then(|| b.norm("input_norm", 2, f));
        let input = b.conv("input", c, 2, cfg.input_kernel);
        let blocks = (0..cfg.blocks)
            .map(|n| {
                let attention = cfg.attention.then(|| AttentionIdx {
                    heads: (0..cfg.heads)
                        .map(|h| ["q", "k", "v"].map(|p| b.conv(&format!("block{n}.head{h}.{p}"), c, c, 1)))
                        .collect(),
                    recovery: b.conv(&format!("block{n}.recovery"), c, cfg.heads * c, cfg.recovery_kernel),
                    norm_in: b.norm(&format!("block{n}.attn_norm_in"), c, f),
                    norm_out: cfg.sublayer_output_norm.then(|| b.norm(&format!("block{n}.attn_norm_out"), c, f)),
                });
                let dw = cfg.dw_kernel;
                BlockIdx {
                    attention,
                    depthwise: b.push(format!("block{n}.depthwise.weight"), vec![c, dw, dw], Init::He(dw * dw)),
                    pointwise: b.conv(&format!("block{n}.pointwise"), c, c, 1),
                    norm_in: b.norm(&format!("block{n}.conv_norm_in"), c, f),
                    norm_out: cfg.sublayer_output_norm.then(|| b.norm(&format!("block{n}.conv_norm_out"), c, f)),
                }
            })
            .collect();
        // Transposed kernels are stored [C_in × C_out × k × k].
        let k = cfg.output_kernel;
        let output = Conv {
            w: b.push("output.weight".into(), vec![c, 2, k, k], Init::He(c * k * k)),
            b: b.push("output.bias".into(), vec![2], Init::Zeros),
        };
        Self { specs: b.specs, input_norm, input, blocks, output }
    }
}

/// Scalar parameter count implied by `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    Layout::new(cfg).specs.iter().map(ParamSpec::numel).sum()
}

/// Per-channel attention `softmax(Q Kᵀ · scale) V` over the time axis of
/// `[C × T × F]` maps.
pub fn scaled_attention<T: Scalar, G: Graph<T>>(
    g: &mut G,
    q: &G::Value,
    k: &G::Value,
    v: &G::Value,
    scale: T,
) -> Result<G::Value> {
    let (qs, ks, vs) = (g.tensor(q).shape(), g.tensor(k).shape(), g.tensor(v).shape());
    if qs.len() != 3 || qs != ks || qs != vs {
        return Err(Error::shape("scaled_attention", format!("Q {qs:?}, K {ks:?}, V {vs:?}")));
    }
    let logits = g.matmul_batched_bt(q, k)?;
    let logits = g.scale(&logits, scale)?;
    let weights = g.softmax_rows(&logits)?;
    g.matmul_batched(&weights, v)
}

/// Frame ranges of `slices` contiguous chunks of `frames`; the last chunk
/// absorbs the remainder.
pub fn slice_bounds(frames: usize, slices: usize) -> Result<Vec<Range<usize>>> {
    if slices == 0 || slices > frames {
        return Err(Error::InvalidArgument(format!("cannot cut {frames} frames into {slices} slices")));
    }
    let len = frames / slices;
    Ok((0..slices).map(|i| i * len..if i + 1 == slices { frames } else { (i + 1) * len }).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamsNet<T: Scalar = f32> {
    config: ModelConfig,
    params: Vec<Tensor<T>>,
    layout_specs: Vec<ParamSpec>,
}

/// Weight-bearing view of a [`SamsNet`] bound to a graph.
pub struct Bound<'m, T: Scalar, G: Graph<T>> {
    net: &'m SamsNet<T>,
    layout: Layout,
    params: Vec<G::Value>,
}

impl<T: Scalar> SamsNet<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = layout
            .specs
            .iter()
            .map(|s| match s.init {
                Init::He(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::uniform(&s.shape, -bound, bound, rng)
                }
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::ones(&s.shape),
            })
            .collect();
        Ok(Self { config, params, layout_specs: layout.specs })
    }

    /// Rebuilds a network from parameters in [`SamsNet::param_specs`] order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = Layout::new(&config).specs;
        if params.len() != specs.len() {
            return Err(Error::shape("samsnet", format!("{} tensors for {} parameters", params.len(), specs.len())));
        }
        if let Some((s, p)) = specs.iter().zip(&params).find(|(s, p)| s.shape != p.shape()) {
            return Err(Error::shape("samsnet", format!("{} is {:?}, expected {:?}", s.name, p.shape(), s.shape)));
        }
        Ok(Self { config, params, layout_specs: specs })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Test-time slice count; leaves the parameters untouched.
    pub fn set_slices(&mut self, slices: usize) -> Result<()> {
        if slices == 0 {
            return Err(Error::InvalidArgument("slices must be at least 1".into()));
        }
        self.config.slices = slices;
        Ok(())
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.layout_specs
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Index of the parameter called `name`.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.layout_specs.iter().position(|s| s.name == name)
    }

    pub fn cast<U: Scalar>(&self) -> SamsNet<U> {
        SamsNet {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            layout_specs: self.layout_specs.clone(),
        }
    }

    /// Registers every parameter with `g`.
    pub fn bind<G: Graph<T>>(&self, g: &mut G) -> Bound<'_, T, G> {
        Bound { net: self, layout: Layout::new(&self.config), params: self.params.iter().map(|p| g.param(p)).collect() }
    }

    /// Eager inference with `slices` test-time slices.
    pub fn infer(&self, mag: &Tensor<T>, slices: usize) -> Result<Tensor<T>> {
        let mut g = Eager;
        let bound = self.bind(&mut g);
        bound.forward(&mut g, mag, slices)
    }
}

impl<'m, T: Scalar, G: Graph<T>> Bound<'m, T, G> {
    /// Graph handles of the parameters, in [`SamsNet::param_specs`] order.
    pub fn values(&self) -> &[G::Value] {
        &self.params
    }

    fn p(&self, i: usize) -> &G::Value {
        &self.params[i]
    }

    fn conv(&self, g: &mut G, c: Conv, x: &G::Value) -> Result<G::Value> {
        g.conv2d(x, self.p(c.w), Some(self.p(c.b)))
    }

    fn norm(&self, g: &mut G, n: Norm, x: &G::Value) -> Result<G::Value> {
        g.layer_norm(x, &[0, 2], self.p(n.gain), self.p(n.bias), self.net.config.ln_eps)
    }

    fn block(&self, n: usize) -> Result<&BlockIdx> {
        self.layout.blocks.get(n).ok_or_else(|| Error::InvalidArgument(format!("no block {n}")))
    }

    fn attention_idx(&self, n: usize) -> Result<&AttentionIdx> {
        self.block(n)?
            .attention
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("block {n} has no attention sublayer")))
    }

    /// `[2 × T × F]` magnitude to `[C × T × F]` features.
    pub fn transform_in(&self, g: &mut G, mag: &G::Value) -> Result<G::Value> {
        let shape = g.tensor(mag).shape();
        if shape.len() != 3 || shape[0] != 2 {
            return Err(Error::shape("transform_in", format!("expected [2 × T × F], got {shape:?}")));
        }
        match self.layout.input_norm {
            Some(n) => {
                let x = self.norm(g, n, mag)?;
                self.conv(g, self.layout.input, &x)
            }
            None => self.conv(g, self.layout.input, mag),
        }
    }

    /// `[C × T × F]` features to the `[2 × T × F]` mask.
    pub fn transform_out(&self, g: &mut G, x: &G::Value) -> Result<G::Value> {
        let o = self.layout.output;
        let y = g.transpose_conv2d(x, self.p(o.w), Some(self.p(o.b)))?;
        match self.net.config.mask_activation {
            MaskActivation::Relu => g.relu(&y),
            MaskActivation::Sigmoid => g.sigmoid(&y),
        }
    }

    fn scale(&self, g: &G, x: &G::Value) -> T {
        let d = match self.net.config.attention_scale {
            AttentionScale::Channels => self.net.config.channels,
            AttentionScale::Bins => g.tensor(x).shape()[2],
        };
        T::one() / T::lit(d as f64).sqrt()
    }

    /// Per-head projections and attention, concatenated along channels and
    /// recovered from `H·C` to `C` channels.
    pub fn multi_head(&self, g: &mut G, block: usize, x: &G::Value) -> Result<G::Value> {
        let idx = self.attention_idx(block)?;
        let scale = self.scale(g, x);
        let mut heads = Vec::with_capacity(idx.heads.len());
        for [q, k, v] in &idx.heads {
            let q = self.conv(g, *q, x)?;
            let k = self.conv(g, *k, x)?;
            let v = self.conv(g, *v, x)?;
            heads.push(scaled_attention(g, &q, &k, &v, scale)?);
        }
        let refs: Vec<&G::Value> = heads.iter().collect();
        let cat = g.concat(&refs, 0)?;
        self.conv(g, idx.recovery, &cat)
    }

    /// [`Bound::multi_head`] applied to each of `slices` time chunks with
    /// shared weights, reassembled in time order.
    pub fn sliced_attention(&self, g: &mut G, block: usize, x: &G::Value, slices: usize) -> Result<G::Value> {
        let frames = g.tensor(x).shape()[1];
        let mut outs = Vec::with_capacity(slices);
        for r in slice_bounds(frames, slices)? {
            let chunk = g.slice(x, 1, r.start, r.end)?;
            outs.push(self.multi_head(g, block, &chunk)?);
        }
        let refs: Vec<&G::Value> = outs.iter().collect();
        g.concat(&refs, 1)
    }

    /// `y₁ = x + Attn(LN(x))`, `y₂ = y₁ + DWConv(LN(y₁))`.
    pub fn attention_block(&self, g: &mut G, block: usize, x: &G::Value, slices: usize) -> Result<G::Value> {
        let idx = self.block(block)?.clone();
        let mut y = match &idx.attention {
            Some(a) => {
                let h = self.norm(g, a.norm_in, x)?;
                let mut h = self.sliced_attention(g, block, &h, slices)?;
                if let Some(n) = a.norm_out {
                    h = self.norm(g, n, &h)?;
                }
                g.add(x, &h)?
            }
            None => g.scale(x, T::one())?,
        };
        let h = self.norm(g, idx.norm_in, &y)?;
        let h = g.depthwise_conv(&h, self.p(idx.depthwise))?;
        let mut h = self.conv(g, idx.pointwise, &h)?;
        if let Some(n) = idx.norm_out {
            h = self.norm(g, n, &h)?;
        }
        y = g.add(&y, &h)?;
        Ok(y)
    }

    /// Mask for one source from a `[2 × T × F]` magnitude spectrogram.
    /// Training uses `slices = 1` on short excerpts.
    pub fn forward_value(&self, g: &mut G, mag: &G::Value, slices: usize) -> Result<G::Value> {
        let shape = g.tensor(mag).shape();
        if shape.len() == 3 && shape[2] != self.net.config.freq_bins {
            return Err(Error::shape(
                "samsnet",
                format!("{} bins in input, model built for {}", shape[2], self.net.config.freq_bins),
            ));
        }
        let mut x = self.transform_in(g, mag)?;
        for n in 0..self.layout.blocks.len() {
            x = self.attention_block(g, n, &x, slices)?;
        }
        self.transform_out(g, &x)
    }

    pub fn forward(&self, g: &mut G, mag: &Tensor<T>, slices: usize) -> Result<Tensor<T>>
    where
        G: Graph<T, Value = Tensor<T>>,
    {
        let x = g.constant(mag.clone());
        self.forward_value(g, &x, slices)
    }
}
