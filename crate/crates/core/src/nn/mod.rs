//! Minimal reverse-mode training engine: conv2d, ReLU, 2×2 max-pool,
//! flatten, linear, softmax cross-entropy, plain SGD with step decay.

mod checkpoint;
mod ops;

pub use checkpoint::{load_network, save_network, LayerManifest, Manifest, MANIFEST_FILE};
pub use ops::{
    conv2d_backward, conv2d_forward, linear_backward, linear_forward, maxpool2_backward, maxpool2_forward,
    softmax_cross_entropy, FeatureMap,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nrmf::RankMethod;
use crate::tensor::{DenseMatrix, Tensor4};

/// Which stage of a factorized conv triple a layer is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    First,
    Mid,
    Last,
}

/// Where a factorized conv stage came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub original_layer: usize,
    pub r3: usize,
    pub r4: usize,
    pub method: RankMethod,
    pub stage: Stage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub kernel: Tensor4,
    pub bias: Option<Vec<f64>>,
    pub stride: usize,
    pub pad: usize,
    pub provenance: Option<Provenance>,
}

impl Conv2d {
    pub fn new(kernel: Tensor4, bias: Option<Vec<f64>>, stride: usize, pad: usize) -> Self {
        Conv2d { kernel, bias, stride, pad, provenance: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in × out`.
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Relu,
    MaxPool2,
    Flatten,
    Linear(Linear),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2 => "maxpool2",
            Layer::Flatten => "flatten",
            Layer::Linear(_) => "linear",
        }
    }
}

/// `(height, width, channels)` of one sample.
pub type Shape3 = [usize; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input: Shape3,
    classes: usize,
    generation: u64,
}

impl Network {
    /// Validates that layer shapes compose from `input` to a flat `classes`-wide output.
    pub fn new(layers: Vec<Layer>, input: Shape3) -> Result<Self> {
        let mut shape = input;
        for (i, layer) in layers.iter().enumerate() {
            shape = infer_shape(layer, shape).map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
        }
        if shape[0] != 1 || shape[1] != 1 {
            return Err(Error::Shape(format!("network output must be flat, got {shape:?}")));
        }
        Ok(Network { layers, input, classes: shape[2], generation: 0 })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Bumped on every parameter mutation; used to detect stale caches.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn conv(&self, id: usize) -> Result<&Conv2d> {
        match self.layers.get(id) {
            Some(Layer::Conv2d(c)) => Ok(c),
            _ => Err(Error::UnknownLayer(id)),
        }
    }

    /// Mutable access to a parameter-bearing layer. Counts as a mutation.
    pub fn layer_mut(&mut self, id: usize) -> Result<&mut Layer> {
        self.generation += 1;
        self.layers.get_mut(id).ok_or(Error::UnknownLayer(id))
    }

    /// Ids of conv layers whose kernels are larger than 1×1: the set that is
    /// regularized, rank-selected and compressed.
    pub fn regularized_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::Conv2d(c) if c.kernel.is_spatial() => Some(i),
                _ => None,
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d(c) => c.kernel.len() + c.bias.as_ref().map_or(0, Vec::len),
                Layer::Linear(l) => l.weight.rows() * l.weight.cols() + l.bias.len(),
                _ => 0,
            })
            .sum()
    }

    /// Kernel entries of all conv layers (biases excluded).
    pub fn conv_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d(c) => c.kernel.len(),
                _ => 0,
            })
            .sum()
    }

    /// Logits for a batch.
    pub fn predict(&self, input: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv2d(c) => conv2d_forward(&c.kernel, c.bias.as_deref(), &x, c.stride, c.pad)?,
                Layer::Relu => relu(&x),
                Layer::MaxPool2 => maxpool2_forward(&x).0,
                Layer::Flatten => flatten(x),
                Layer::Linear(l) => linear_forward(&l.weight, &l.bias, &x)?,
            };
        }
        Ok(x)
    }

    fn check_input(&self, input: &FeatureMap) -> Result<()> {
        if [input.h, input.w, input.c] != self.input {
            return Err(Error::Shape(format!(
                "network expects {:?} inputs, got {:?}",
                self.input,
                [input.h, input.w, input.c]
            )));
        }
        Ok(())
    }

    pub(crate) fn replace_layers(&mut self, layers: Vec<Layer>) -> Result<()> {
        let rebuilt = Network::new(layers, self.input)?;
        if rebuilt.classes != self.classes {
            return Err(Error::Shape("class count changed".into()));
        }
        self.layers = rebuilt.layers;
        self.generation += 1;
        Ok(())
    }
}

fn infer_shape(layer: &Layer, [h, w, c]: Shape3) -> std::result::Result<Shape3, String> {
    match layer {
        Layer::Conv2d(conv) => {
            let [dh, dw, s, t] = conv.kernel.dims();
            if s != c {
                return Err(format!("conv expects {s} channels, got {c}"));
            }
            if let Some(b) = &conv.bias {
                if b.len() != t {
                    return Err(format!("bias length {} != {t}", b.len()));
                }
            }
            match (
                ops::conv_output_size(h, dh, conv.stride, conv.pad),
                ops::conv_output_size(w, dw, conv.stride, conv.pad),
            ) {
                (Some(oh), Some(ow)) => Ok([oh, ow, t]),
                _ => Err(format!("{h}x{w} input too small for {dh}x{dw} kernel")),
            }
        }
        Layer::Relu => Ok([h, w, c]),
        Layer::MaxPool2 => {
            if h < 2 || w < 2 {
                Err(format!("cannot pool {h}x{w}"))
            } else {
                Ok([h / 2, w / 2, c])
            }
        }
        Layer::Flatten => Ok([1, 1, h * w * c]),
        Layer::Linear(l) => {
            if h * w * c != l.weight.rows() {
                return Err(format!("linear expects {} features, got {}", l.weight.rows(), h * w * c));
            }
            if l.bias.len() != l.weight.cols() {
                return Err(format!("bias length {} != {}", l.bias.len(), l.weight.cols()));
            }
            Ok([1, 1, l.weight.cols()])
        }
    }
}

fn relu(x: &FeatureMap) -> FeatureMap {
    like(x, x.data.iter().map(|&v| v.max(0.0)).collect())
}

fn like(x: &FeatureMap, data: Vec<f64>) -> FeatureMap {
    FeatureMap { n: x.n, h: x.h, w: x.w, c: x.c, data }
}

fn flatten(x: FeatureMap) -> FeatureMap {
    FeatureMap { n: x.n, h: 1, w: 1, c: x.h * x.w * x.c, data: x.data }
}

/// Everything `backward` needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    generation: u64,
    inputs: Vec<FeatureMap>,
    pool_args: Vec<Option<Vec<usize>>>,
    dlogits: FeatureMap,
}

/// Per-layer parameter gradients, aligned with `Network::layers`.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad {
    Conv { kernel: Tensor4, bias: Option<Vec<f64>> },
    Linear { weight: DenseMatrix, bias: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<ParamGrad>>,
}

/// Mean cross-entropy of a batch plus the cache for `backward`.
pub fn forward(net: &Network, batch: &FeatureMap, labels: &[usize]) -> Result<(f64, ForwardCache)> {
    net.check_input(batch)?;
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut pool_args = Vec::with_capacity(net.layers.len());
    let mut x = batch.clone();
    for layer in &net.layers {
        let (next, arg) = match layer {
            Layer::Conv2d(c) => (conv2d_forward(&c.kernel, c.bias.as_deref(), &x, c.stride, c.pad)?, None),
            Layer::Relu => (relu(&x), None),
            Layer::MaxPool2 => {
                let (o, a) = maxpool2_forward(&x);
                (o, Some(a))
            }
            Layer::Flatten => (flatten(x.clone()), None),
            Layer::Linear(l) => (linear_forward(&l.weight, &l.bias, &x)?, None),
        };
        inputs.push(x);
        pool_args.push(arg);
        x = next;
    }
    let (loss, dlogits) = softmax_cross_entropy(&x, labels)?;
    Ok((loss, ForwardCache { generation: net.generation, inputs, pool_args, dlogits }))
}

/// Gradient of the mean cross-entropy w.r.t. every parameter.
pub fn backward(net: &Network, cache: &ForwardCache) -> Result<Gradients> {
    if cache.generation != net.generation || cache.inputs.len() != net.layers.len() {
        return Err(Error::StaleCache);
    }
    let mut grads: Vec<Option<ParamGrad>> = vec![None; net.layers.len()];
    let mut g = cache.dlogits.clone();
    for (i, layer) in net.layers.iter().enumerate().rev() {
        let input = &cache.inputs[i];
        g = match layer {
            Layer::Conv2d(c) => {
                let (dk, db, din) = conv2d_backward(&c.kernel, input, &g, c.stride, c.pad);
                grads[i] = Some(ParamGrad::Conv { kernel: dk, bias: c.bias.as_ref().map(|_| db) });
                din
            }
            Layer::Relu => like(
                input,
                g.data.iter().zip(&input.data).map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 }).collect(),
            ),
            Layer::MaxPool2 => {
                let arg = cache.pool_args[i].as_ref().ok_or(Error::StaleCache)?;
                maxpool2_backward(input, arg, &g)
            }
            Layer::Flatten => like(input, g.data),
            Layer::Linear(l) => {
                let (dw, db, din) = linear_backward(&l.weight, input, &g);
                grads[i] = Some(ParamGrad::Linear { weight: dw, bias: db });
                din
            }
        };
    }
    Ok(Gradients { layers: grads })
}

/// Training hyperparameters. Field names double as config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// Epochs between decays.
    pub lr_decay_every: usize,
    pub epochs: usize,
    /// Regularizer weight.
    pub alpha: f64,
    pub seed: u64,
    /// Energy threshold for rank selection.
    pub p: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 5,
            epochs: 50,
            alpha: 1e-2,
            seed: 0,
            p: 0.95,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor must be in (0, 1]");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be positive");
        }
        // alpha = 0 disables the regularizer (plain training arm)
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be finite and non-negative");
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return bad("p must be in (0, 1]");
        }
        Ok(())
    }

    /// `lr · decay^⌊epoch / decay_every⌋`, epochs counted from 0.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// One descent step `W ← W − lr(epoch) · ∂J/∂W`.
pub fn sgd_step(net: &mut Network, grads: &Gradients, cfg: &TrainConfig, epoch: usize) -> Result<()> {
    apply_update(net, grads, cfg.lr_at(epoch))
}

pub(crate) fn apply_update(net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
    if grads.layers.len() != net.layers.len() {
        return Err(Error::Shape("gradients do not match network".into()));
    }
    let axpy = |p: &mut [f64], g: &[f64]| {
        for (pv, gv) in p.iter_mut().zip(g) {
            *pv -= lr * gv;
        }
    };
    for (layer, grad) in net.layers.iter_mut().zip(&grads.layers) {
        match (layer, grad) {
            (Layer::Conv2d(c), Some(ParamGrad::Conv { kernel, bias })) => {
                if c.kernel.dims() != kernel.dims() {
                    return Err(Error::Shape("conv gradient shape mismatch".into()));
                }
                axpy(c.kernel.data_mut(), kernel.data());
                if let (Some(b), Some(gb)) = (c.bias.as_mut(), bias) {
                    axpy(b, gb);
                }
            }
            (Layer::Linear(l), Some(ParamGrad::Linear { weight, bias })) => {
                if (l.weight.rows(), l.weight.cols()) != (weight.rows(), weight.cols()) {
                    return Err(Error::Shape("linear gradient shape mismatch".into()));
                }
                axpy(l.weight.data_mut(), weight.data());
                axpy(&mut l.bias, bias);
            }
            (_, None) => {}
            _ => return Err(Error::Shape("gradient kind does not match layer".into())),
        }
    }
    net.generation += 1;
    Ok(())
}

/// Top-1 accuracy in `[0, 1]`, evaluated in chunks of `batch` samples.
pub fn accuracy(net: &Network, images: &FeatureMap, labels: &[usize], batch: usize) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let per = images.h * images.w * images.c;
    let mut correct = 0usize;
    for start in (0..labels.len()).step_by(batch.max(1)) {
        let end = (start + batch.max(1)).min(labels.len());
        let chunk = FeatureMap::from_vec(
            end - start,
            images.h,
            images.w,
            images.c,
            images.data[start * per..end * per].to_vec(),
        )?;
        let logits = net.predict(&chunk)?;
        for (i, &y) in labels[start..end].iter().enumerate() {
            let z = logits.sample(i);
            let mut best = 0;
            for (k, &v) in z.iter().enumerate() {
                if v > z[best] {
                    best = k;
                }
            }
            if best == y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Layer description used to build seeded networks.
#[derive(Clone, Copy, Debug)]
pub enum LayerSpec {
    Conv { d: usize, s: usize, t: usize, stride: usize, pad: usize },
    Relu,
    MaxPool2,
    Flatten,
    Linear { fan_in: usize, fan_out: usize },
}

/// Kaiming-uniform (fan-in) weights, zero biases.
pub fn build_network(specs: &[LayerSpec], input: Shape3, seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = specs
        .iter()
        .map(|spec| match *spec {
            LayerSpec::Conv { d, s, t, stride, pad } => {
                let bound = (6.0 / (d * d * s) as f64).sqrt();
                let kernel = Tensor4::from_fn([d, d, s, t], |_, _, _, _| rng.random_range(-bound..bound));
                Layer::Conv2d(Conv2d::new(kernel, Some(vec![0.0; t]), stride, pad))
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool2 => Layer::MaxPool2,
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Linear { fan_in, fan_out } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let weight = DenseMatrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound));
                Layer::Linear(Linear { weight, bias: vec![0.0; fan_out] })
            }
        })
        .collect();
    Network::new(layers, input)
}

/// LeNet-5 on 28×28×1 with an extra 3×3 conv of `mid → wide` channels after
/// the second conv block. `(mid, wide) = (16, 32)` is the desk-scale model,
/// `(128, 256)` the full-size one.
pub fn lenet5_with_inserted_conv(mid: usize, wide: usize) -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        Conv { d: 5, s: 1, t: 6, stride: 1, pad: 2 },
        Relu,
        MaxPool2,
        Conv { d: 5, s: 6, t: mid, stride: 1, pad: 0 },
        Relu,
        MaxPool2,
        Conv { d: 3, s: mid, t: wide, stride: 1, pad: 1 },
        Relu,
        Flatten,
        Linear { fan_in: 5 * 5 * wide, fan_out: 120 },
        Relu,
        Linear { fan_in: 120, fan_out: 84 },
        Relu,
        Linear { fan_in: 84, fan_out: 10 },
    ]
}

/// Layer id of the inserted conv in [`lenet5_with_inserted_conv`].
pub const LENET_INSERTED_CONV: usize = 6;

/// Small three-conv network on 8×8×2 inputs covering every layer kind,
/// strides and padding; used by tests and quick CLI runs.
pub fn toy_three_conv() -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        Conv { d: 3, s: 2, t: 4, stride: 1, pad: 1 },
        Relu,
        MaxPool2,
        Conv { d: 3, s: 4, t: 5, stride: 2, pad: 1 },
        Relu,
        Conv { d: 1, s: 5, t: 3, stride: 1, pad: 0 },
        Flatten,
        Linear { fan_in: 12, fan_out: 4 },
    ]
}

/// Small MNIST classifier on 14×14 (2×2 average-pooled) digits: three
/// spatial convs, one strided, and an uncompressed 1×1 conv.
pub fn toy_mnist() -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        Conv { d: 3, s: 1, t: 8, stride: 1, pad: 1 },
        Relu,
        MaxPool2,
        Conv { d: 3, s: 8, t: 16, stride: 2, pad: 1 },
        Relu,
        Conv { d: 3, s: 16, t: 16, stride: 1, pad: 1 },
        Relu,
        Conv { d: 1, s: 16, t: 8, stride: 1, pad: 0 },
        Relu,
        Flatten,
        Linear { fan_in: 4 * 4 * 8, fan_out: 10 },
    ]
}

pub const TOY_MNIST_INPUT: Shape3 = [14, 14, 1];
