//! Layers and blocks with block-local reverse-mode gradients.
//!
//! A [`Block`] is a short stack of layers with its own parameters and optimizer
//! state. `block_backward` only ever sees the block's own cache, so a gradient
//! never crosses from one block into the next.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::optim::{OptimizerKind, ParamOptimizer};
use crate::rng::{init_normal, init_uniform, Rng};
use crate::tensor::{matmul, matmul_nt, matmul_tn, relu, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out, 1]`
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(Linear),
    Relu,
}

impl Layer {
    pub fn linear(weight: Tensor, bias: Option<Tensor>) -> Result<Layer> {
        if weight.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "linear weight must be a matrix, got {:?}",
                weight.shape()
            )));
        }
        if let Some(b) = &bias {
            b.ensure_shape(&[weight.rows(), 1], "linear bias")?;
        }
        Ok(Layer::Linear(Linear { weight, bias }))
    }

    pub fn in_dim(&self) -> Option<usize> {
        match self {
            Layer::Linear(l) => Some(l.weight.cols()),
            Layer::Relu => None,
        }
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        match self {
            Layer::Linear(l) => l.weight.rows(),
            Layer::Relu => in_dim,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Linear(l) => {
                let mut out = matmul(&l.weight, x)?;
                if let Some(b) = &l.bias {
                    add_bias(&mut out, b);
                }
                Ok(out)
            }
            Layer::Relu => Ok(relu(x)),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Layer::Linear(_))
    }
}

fn add_bias(out: &mut Tensor, bias: &Tensor) {
    for i in 0..out.rows() {
        let b = bias.data()[i];
        out.row_mut(i).iter_mut().for_each(|x| *x += b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Parameter gradients for a block, aligned with its layers (`None` for ReLU).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub layers: Vec<Option<LinearGrad>>,
}

impl BlockGrads {
    pub fn zeros_like(block: &Block) -> Self {
        let layers = block
            .layers
            .iter()
            .map(|l| match l {
                Layer::Linear(lin) => Some(LinearGrad {
                    weight: Tensor::zeros(lin.weight.shape()),
                    bias: lin.bias.as_ref().map(|b| Tensor::zeros(b.shape())),
                }),
                Layer::Relu => None,
            })
            .collect();
        Self { layers }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|g| std::iter::once(&g.weight).chain(g.bias.as_ref()))
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|g| std::iter::once(&mut g.weight).chain(g.bias.as_mut()))
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.map_inplace(|x| x * s);
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &BlockGrads) -> Result<()> {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn sum_sq(&self) -> f64 {
        self.tensors().map(Tensor::sum_sq).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().all(|t| t.data().iter().all(|&x| x == 0.0))
    }
}

/// Inputs of every layer, saved by a forward pass for the matching backward.
#[derive(Debug, Clone)]
pub struct BlockCache {
    block_id: u64,
    version: u64,
    inputs: Vec<Tensor>,
}

impl BlockCache {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self) -> &Tensor {
        &self.inputs[0]
    }
}

static NEXT_BLOCK_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
struct ParamSlots {
    weight: ParamOptimizer,
    bias: Option<ParamOptimizer>,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub index: usize,
    layers: Vec<Layer>,
    optim: Vec<Option<ParamSlots>>,
    id: u64,
    version: u64,
}

impl PartialEq for Block {
    fn eq(&self, other: &Self) -> bool {
        self.index == other.index && self.layers == other.layers
    }
}

impl Block {
    pub fn new(index: usize, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a block needs at least one layer".into()));
        }
        check_chain(&layers, None)?;
        let mut block = Self {
            index,
            layers,
            optim: Vec::new(),
            id: NEXT_BLOCK_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        };
        block.set_optimizer(OptimizerKind::Adam);
        Ok(block)
    }

    /// Replaces the update rule (and clears any optimizer state).
    pub fn set_optimizer(&mut self, kind: OptimizerKind) {
        self.optim = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Linear(lin) => Some(ParamSlots {
                    weight: ParamOptimizer::new(kind, lin.weight.shape()),
                    bias: lin.bias.as_ref().map(|b| ParamOptimizer::new(kind, b.shape())),
                }),
                Layer::Relu => None,
            })
            .collect();
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        self.optim
            .iter()
            .flatten()
            .next()
            .map_or(OptimizerKind::Sgd, |s| s.weight.kind())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to the layers; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn has_params(&self) -> bool {
        self.layers.iter().any(Layer::is_linear)
    }

    pub fn is_affine(&self) -> bool {
        self.layers.iter().all(Layer::is_linear)
    }

    /// Input width fixed by the first linear layer, if any.
    pub fn input_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(Layer::in_dim)
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        self.layers.iter().fold(input_dim, |d, l| l.out_dim(d))
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| match l {
            Layer::Linear(lin) => {
                let v: Vec<&Tensor> = std::iter::once(&lin.weight).chain(lin.bias.as_ref()).collect();
                v
            }
            Layer::Relu => Vec::new(),
        })
    }

    /// Mutable parameter tensors in declaration order; invalidates caches.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.version += 1;
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let Layer::Linear(lin) = l {
                out.push(&mut lin.weight);
                if let Some(b) = lin.bias.as_mut() {
                    out.push(b);
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = self.layers[0].forward(x)?;
        for l in &self.layers[1..] {
            h = l.forward(&h)?;
        }
        Ok(h)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "block input must be [dim, samples], got {:?}",
                x.shape()
            )));
        }
        if let Some(d) = self.input_dim() {
            if x.rows() != d {
                return Err(Error::shape("block_forward", x.shape(), &[d, x.cols()]));
            }
        }
        Ok(())
    }

    fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let next = l.forward(&h)?;
            inputs.push(h);
            h = next;
        }
        Ok((
            h,
            BlockCache {
                block_id: self.id,
                version: self.version,
                inputs,
            },
        ))
    }

    /// Reverse pass. Returns parameter gradients when `want_params` and the
    /// input gradient when `want_input`.
    pub fn backward(
        &self,
        cache: &BlockCache,
        upstream: &Tensor,
        want_params: bool,
        want_input: bool,
    ) -> Result<(Option<BlockGrads>, Option<Tensor>)> {
        if cache.block_id != self.id || cache.version != self.version {
            return Err(Error::StaleCache(format!(
                "block {} has changed since the forward pass",
                self.index
            )));
        }
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache(format!(
                "cache holds {} layer inputs, block has {} layers",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        let mut grads = want_params.then(|| BlockGrads {
            layers: vec![None; self.layers.len()],
        });
        let mut g = upstream.clone();
        for (i, (layer, input)) in self.layers.iter().zip(&cache.inputs).enumerate().rev() {
            let need_below = want_input || i > 0;
            match layer {
                Layer::Linear(lin) => {
                    if g.rows() != lin.weight.rows() || g.cols() != input.cols() {
                        return Err(Error::shape(
                            "block_backward",
                            g.shape(),
                            &[lin.weight.rows(), input.cols()],
                        ));
                    }
                    if let Some(grads) = grads.as_mut() {
                        let gw = matmul_nt(&g, input)?;
                        let gb = lin
                            .bias
                            .as_ref()
                            .map(|_| Tensor::column_vector(&g.row_sums()));
                        grads.layers[i] = Some(LinearGrad { weight: gw, bias: gb });
                    }
                    if need_below {
                        g = matmul_tn(&lin.weight, &g)?;
                    }
                }
                Layer::Relu => {
                    if g.shape() != input.shape() {
                        return Err(Error::shape("block_backward", g.shape(), input.shape()));
                    }
                    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
                        if x <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
            }
            if !need_below && i == 0 {
                break;
            }
        }
        Ok((grads, want_input.then_some(g)))
    }

    /// Applies one optimizer step along `grads`; invalidates caches.
    pub fn apply_grads(&mut self, grads: &BlockGrads, lr: f64) -> Result<()> {
        self.version += 1;
        for ((layer, slots), g) in self.layers.iter_mut().zip(&mut self.optim).zip(&grads.layers) {
            if let (Layer::Linear(lin), Some(slots), Some(g)) = (layer, slots.as_mut(), g.as_ref()) {
                slots.weight.step(&mut lin.weight, &g.weight, lr)?;
                if let (Some(b), Some(opt), Some(gb)) = (lin.bias.as_mut(), slots.bias.as_mut(), g.bias.as_ref()) {
                    opt.step(b, gb, lr)?;
                }
            }
        }
        Ok(())
    }
}

fn check_chain(layers: &[Layer], mut dim: Option<usize>) -> Result<Option<usize>> {
    for l in layers {
        if let (Some(d), Some(need)) = (dim, l.in_dim()) {
            if d != need {
                return Err(Error::InvalidArgument(format!(
                    "layer expects input width {need}, previous layer produces {d}"
                )));
            }
        }
        dim = match (dim, l) {
            (_, Layer::Linear(lin)) => Some(lin.weight.rows()),
            (d, Layer::Relu) => d,
        };
    }
    Ok(dim)
}

/// Forward pass that keeps the per-layer inputs for [`block_backward`].
pub fn block_forward(block: &Block, input: &Tensor) -> Result<(Tensor, BlockCache)> {
    block.forward_cached(input)
}

/// Gradients of `⟨upstream, block(input)⟩` with respect to the block's
/// parameters and its input.
pub fn block_backward(block: &Block, cache: &BlockCache, upstream: &Tensor) -> Result<(BlockGrads, Tensor)> {
    let (g, gi) = block.backward(cache, upstream, true, true)?;
    Ok((g.expect("requested"), gi.expect("requested")))
}

/// Plain composition of all blocks; the inference path.
pub fn straight_through_forward(blocks: &[Block], x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for b in blocks {
        h = b.forward(&h)?;
    }
    Ok(h)
}

/// Cuts `layers` before every index in `boundaries`.
pub fn split_network(layers: Vec<Layer>, boundaries: &[usize]) -> Result<Vec<Block>> {
    let n = layers.len();
    let mut prev = 0;
    for &b in boundaries {
        if b <= prev || b >= n {
            return Err(Error::InvalidArgument(format!(
                "split boundaries must be strictly increasing within 1..{n}, got {boundaries:?}"
            )));
        }
        prev = b;
    }
    check_chain(&layers, None)?;
    let mut blocks = Vec::with_capacity(boundaries.len() + 1);
    let mut layers = layers.into_iter();
    let mut start = 0;
    for (t, end) in boundaries.iter().copied().chain(std::iter::once(n)).enumerate() {
        let chunk: Vec<Layer> = layers.by_ref().take(end - start).collect();
        blocks.push(Block::new(t, chunk)?);
        start = end;
    }
    Ok(blocks)
}

/// Boundaries that start a new block at every linear layer after the first,
/// so each block holds one linear layer plus the activation that follows it.
pub fn boundaries_per_linear(layers: &[Layer]) -> Vec<usize> {
    layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_linear())
        .map(|(i, _)| i)
        .skip(1)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// `N(0, std²)`
    Normal(f64),
    /// `N(0, 2/fan_in)`
    He,
    Uniform(f64, f64),
}

impl WeightInit {
    pub fn sample(&self, out: usize, inp: usize, rng: &mut Rng) -> Result<Tensor> {
        match *self {
            WeightInit::Normal(s) => init_normal(&[out, inp], s, rng),
            WeightInit::He => init_normal(&[out, inp], (2.0 / inp as f64).sqrt(), rng),
            WeightInit::Uniform(lo, hi) => init_uniform(&[out, inp], lo, hi, rng),
        }
    }
}

/// Fully connected stack `sizes[0] → … → sizes[last]` with ReLU between
/// linear layers and none after the last one.
pub fn dense_layers(sizes: &[usize], bias: bool, init: WeightInit, rng: &mut Rng) -> Result<Vec<Layer>> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "need at least two positive layer sizes, got {sizes:?}"
        )));
    }
    let mut layers = Vec::new();
    for (i, w) in sizes.windows(2).enumerate() {
        let weight = init.sample(w[1], w[0], rng)?;
        let b = bias.then(|| Tensor::zeros(&[w[1], 1]));
        layers.push(Layer::linear(weight, b)?);
        if i + 2 < sizes.len() {
            layers.push(Layer::Relu);
        }
    }
    Ok(layers)
}
