//! Feature extractors producing the hidden vector `h` that every head reads.
//!
//! Two topologies are provided: a ReLU multilayer perceptron for tabular or
//! synthetic features, and a small convolutional net for 28×28-style images:
//! conv 5×5 (16) → ReLU → pool 2×2 → conv 5×5 (25) → ReLU → pool 2×2 →
//! fully connected (32) → ReLU. Convolutions use SAME padding with stride 1.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{self, affine, affine_backward};
use crate::numerics::{ParamGroup, ParamSet, Tensor};

pub const CONV_KERNEL: usize = 5;
pub const CONV1_CHANNELS: usize = 16;
pub const CONV2_CHANNELS: usize = 25;
pub const CONV_HIDDEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneSpec {
    /// Fully connected ReLU layers; the last entry of `hidden` is `H`.
    Mlp { input: usize, hidden: Vec<usize> },
    /// The small two-layer convnet; `H` is fixed at 32.
    SmallConv { height: usize, width: usize, channels: usize },
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            BackboneSpec::Mlp { input, hidden } => {
                if *input == 0 || hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::Config(format!(
                        "mlp backbone needs input ≥ 1 and non-empty positive hidden widths, got {input} / {hidden:?}"
                    )));
                }
            }
            BackboneSpec::SmallConv { height, width, channels } => {
                if *channels == 0 || *height < 4 * CONV_KERNEL / 2 || *width < 4 * CONV_KERNEL / 2 {
                    return Err(Error::Config(format!(
                        "smallconv backbone needs at least {k}×{k} inputs and one channel, got {height}×{width}×{channels}",
                        k = 4 * CONV_KERNEL / 2
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self {
            BackboneSpec::Mlp { input, .. } => *input,
            BackboneSpec::SmallConv { height, width, channels } => height * width * channels,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match self {
            BackboneSpec::Mlp { hidden, .. } => *hidden.last().unwrap_or(&0),
            BackboneSpec::SmallConv { .. } => CONV_HIDDEN,
        }
    }

    fn flat_conv_features(&self) -> usize {
        match self {
            BackboneSpec::SmallConv { height, width, .. } => (height / 2 / 2) * (width / 2 / 2) * CONV2_CHANNELS,
            BackboneSpec::Mlp { .. } => 0,
        }
    }

    /// Glorot-uniform weights and zero biases, registered under `backbone.*`.
    pub fn init_params(&self, params: &mut ParamSet, group: ParamGroup, rng: &mut impl Rng) {
        match self {
            BackboneSpec::Mlp { input, hidden } => {
                let mut fan_in = *input;
                for (i, &width) in hidden.iter().enumerate() {
                    params.insert(format!("backbone.fc{i}.w"), glorot(&[fan_in, width], fan_in, width, rng), group);
                    params.insert(format!("backbone.fc{i}.b"), Tensor::zeros(&[width]), group);
                    fan_in = width;
                }
            }
            BackboneSpec::SmallConv { channels, .. } => {
                let k2 = CONV_KERNEL * CONV_KERNEL;
                let c1 = [CONV1_CHANNELS, *channels, CONV_KERNEL, CONV_KERNEL];
                let c2 = [CONV2_CHANNELS, CONV1_CHANNELS, CONV_KERNEL, CONV_KERNEL];
                params.insert("backbone.conv1.w", glorot(&c1, channels * k2, CONV1_CHANNELS * k2, rng), group);
                params.insert("backbone.conv1.b", Tensor::zeros(&[CONV1_CHANNELS]), group);
                params.insert("backbone.conv2.w", glorot(&c2, CONV1_CHANNELS * k2, CONV2_CHANNELS * k2, rng), group);
                params.insert("backbone.conv2.b", Tensor::zeros(&[CONV2_CHANNELS]), group);
                let flat = self.flat_conv_features();
                params.insert("backbone.fc.w", glorot(&[flat, CONV_HIDDEN], flat, CONV_HIDDEN, rng), group);
                params.insert("backbone.fc.b", Tensor::zeros(&[CONV_HIDDEN]), group);
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() < 2 || x.row_len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "backbone expects rows of {} features, got {:?}",
                self.input_dim(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Evaluation-mode forward pass (no dropout): `[N × input] → [N × H]`.
    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut never = NoDropout;
        Ok(self.forward_train(params, x, 1.0, &mut never)?.0)
    }

    /// Training forward pass keeping the activations needed by `backward`.
    /// `keep` is the dropout keep-probability for intermediate activations.
    pub fn forward_train(
        &self,
        params: &ParamSet,
        x: &Tensor,
        keep: f64,
        rng: &mut impl Rng,
    ) -> Result<(Tensor, BackboneCache)> {
        self.check_input(x)?;
        let n = x.rows();
        match self {
            BackboneSpec::Mlp { hidden, .. } => {
                let mut layers = Vec::with_capacity(hidden.len());
                let mut a = x.clone().reshape(&[n, self.input_dim()])?;
                for i in 0..hidden.len() {
                    let mut mask = None;
                    if i > 0 {
                        mask = ops::dropout_mask(a.len(), keep, rng);
                        if let Some(m) = &mask {
                            ops::apply_mask(&mut a, m);
                        }
                    }
                    let z = affine(&a, params.value(&format!("backbone.fc{i}.w"))?, params.value(&format!("backbone.fc{i}.b"))?)?;
                    let out = ops::relu(&z);
                    layers.push(MlpLayer { input: a, output: out.clone(), mask });
                    a = out;
                }
                Ok((a, BackboneCache(CacheInner::Mlp(layers))))
            }
            BackboneSpec::SmallConv { height, width, channels } => {
                let img = x.clone().reshape(&[n, *channels, *height, *width])?;
                let y1 = ops::relu(&ops::conv2d_same(&img, params.value("backbone.conv1.w")?, params.value("backbone.conv1.b")?)?);
                let (p1, arg1) = ops::maxpool2x2(&y1)?;
                let y2 = ops::relu(&ops::conv2d_same(&p1, params.value("backbone.conv2.w")?, params.value("backbone.conv2.b")?)?);
                let (p2, arg2) = ops::maxpool2x2(&y2)?;
                let mut flat = p2.reshape(&[n, self.flat_conv_features()])?;
                let mask = ops::dropout_mask(flat.len(), keep, rng);
                if let Some(m) = &mask {
                    ops::apply_mask(&mut flat, m);
                }
                let h = ops::relu(&affine(&flat, params.value("backbone.fc.w")?, params.value("backbone.fc.b")?)?);
                let cache = ConvCache {
                    img,
                    y1_shape: y1.shape().to_vec(),
                    y1,
                    arg1,
                    p1,
                    y2_shape: y2.shape().to_vec(),
                    y2,
                    arg2,
                    flat,
                    mask,
                    h: h.clone(),
                };
                Ok((h, BackboneCache(CacheInner::Conv(Box::new(cache)))))
            }
        }
    }

    /// Accumulates parameter gradients given `dL/dh`.
    pub fn backward(&self, params: &mut ParamSet, cache: &BackboneCache, dhidden: &Tensor) -> Result<()> {
        match (self, &cache.0) {
            (BackboneSpec::Mlp { .. }, CacheInner::Mlp(layers)) => {
                let mut grad = dhidden.clone();
                for (i, layer) in layers.iter().enumerate().rev() {
                    let dz = ops::relu_backward(&layer.output, &grad)?;
                    let w = params.value(&format!("backbone.fc{i}.w"))?.clone();
                    let g = affine_backward(&layer.input, &w, &dz)?;
                    params.accumulate_grad(&format!("backbone.fc{i}.w"), &g.w)?;
                    params.accumulate_grad(&format!("backbone.fc{i}.b"), &g.b)?;
                    grad = g.x;
                    if let Some(m) = &layer.mask {
                        ops::apply_mask(&mut grad, m);
                    }
                }
                Ok(())
            }
            (BackboneSpec::SmallConv { .. }, CacheInner::Conv(c)) => {
                let dz = ops::relu_backward(&c.h, dhidden)?;
                let w = params.value("backbone.fc.w")?.clone();
                let g = affine_backward(&c.flat, &w, &dz)?;
                params.accumulate_grad("backbone.fc.w", &g.w)?;
                params.accumulate_grad("backbone.fc.b", &g.b)?;
                let mut dflat = g.x;
                if let Some(m) = &c.mask {
                    ops::apply_mask(&mut dflat, m);
                }
                let dp2 = dflat.reshape(&pooled_shape(&c.y2_shape))?;
                let dy2 = ops::maxpool2x2_backward(&dp2, &c.arg2, &c.y2_shape)?;
                let dz2 = ops::relu_backward(&c.y2, &dy2)?;
                let w2 = params.value("backbone.conv2.w")?.clone();
                let g2 = ops::conv2d_same_backward(&c.p1, &w2, &dz2)?;
                params.accumulate_grad("backbone.conv2.w", &g2.filters)?;
                params.accumulate_grad("backbone.conv2.b", &g2.bias)?;
                let dy1 = ops::maxpool2x2_backward(&g2.x, &c.arg1, &c.y1_shape)?;
                let dz1 = ops::relu_backward(&c.y1, &dy1)?;
                let w1 = params.value("backbone.conv1.w")?.clone();
                let g1 = ops::conv2d_same_backward(&c.img, &w1, &dz1)?;
                params.accumulate_grad("backbone.conv1.w", &g1.filters)?;
                params.accumulate_grad("backbone.conv1.b", &g1.bias)?;
                Ok(())
            }
            _ => Err(Error::Contract("backbone cache does not match spec".into())),
        }
    }
}

fn pooled_shape(s: &[usize]) -> Vec<usize> {
    vec![s[0], s[1], s[2] / 2, s[3] / 2]
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-a..a)).collect())
        .expect("glorot shape")
}

pub(crate) fn glorot_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    glorot(&[rows, cols], rows, cols, rng)
}

struct MlpLayer {
    input: Tensor,
    output: Tensor,
    mask: Option<Vec<f64>>,
}

struct ConvCache {
    img: Tensor,
    y1: Tensor,
    y1_shape: Vec<usize>,
    arg1: Vec<usize>,
    p1: Tensor,
    y2: Tensor,
    y2_shape: Vec<usize>,
    arg2: Vec<usize>,
    flat: Tensor,
    mask: Option<Vec<f64>>,
    h: Tensor,
}

/// Activations saved by a training forward pass.
pub struct BackboneCache(CacheInner);

enum CacheInner {
    Mlp(Vec<MlpLayer>),
    Conv(Box<ConvCache>),
}

/// An `Rng` that is never consulted; evaluation passes use keep = 1.
struct NoDropout;

impl rand::RngCore for NoDropout {
    fn next_u32(&mut self) -> u32 {
        unreachable!("dropout disabled")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("dropout disabled")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("dropout disabled")
    }
}
