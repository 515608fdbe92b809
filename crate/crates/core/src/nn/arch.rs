use std::sync::Arc;

use rand::Rng as _;

use crate::autodiff::Var;
use crate::rng::{rng_from, stream};
use crate::tensor::{numel, Tensor};
use crate::{Error, Result, Scalar};

use super::params::{ParamVars, ParameterSet, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        width: usize,
        activation: Activation,
    },
    /// Valid (unpadded) 2-D convolution over `[height, width, channels]` inputs.
    Conv {
        channels: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
    },
}

/// Backbone layer chain plus the width of the linear classification head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    /// Per-example input shape; `[height, width, channels]` when convolutions are used.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub n_way: usize,
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

fn weight_name(layer: usize) -> String {
    format!("backbone.{layer}.weight")
}

fn bias_name(layer: usize) -> String {
    format!("backbone.{layer}.bias")
}

/// Spatial state tracked through convolution layers.
#[derive(Debug, Clone, Copy)]
struct Spatial {
    h: usize,
    w: usize,
    c: usize,
}

impl Architecture {
    /// Dense ReLU layers of the given widths.
    pub fn mlp(input_dim: usize, widths: &[usize], n_way: usize) -> Self {
        Self {
            input_shape: vec![input_dim],
            layers: widths
                .iter()
                .map(|&width| LayerSpec::Dense {
                    width,
                    activation: Activation::Relu,
                })
                .collect(),
            n_way,
        }
    }

    /// 2 x 64 ReLU MLP.
    pub fn default_for(input_dim: usize, n_way: usize) -> Self {
        Self::mlp(input_dim, &[64, 64], n_way)
    }

    pub fn input_dim(&self) -> usize {
        numel(&self.input_shape)
    }

    /// Per-layer (weight shape, fan_in, fan_out) and the final embedding width.
    fn layout(&self) -> Result<(Vec<(Vec<usize>, usize, usize)>, usize)> {
        if self.input_shape.is_empty() || self.input_dim() == 0 {
            return Err(Error::InvalidArchitecture("input shape must be non-empty".into()));
        }
        if self.n_way == 0 {
            return Err(Error::InvalidArchitecture("n_way must be positive".into()));
        }
        let mut spatial = match self.input_shape.as_slice() {
            &[h, w, c] => Some(Spatial { h, w, c }),
            _ => None,
        };
        let mut flat = self.input_dim();
        let mut seen_dense = false;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { width, .. } => {
                    if width == 0 {
                        return Err(Error::InvalidArchitecture(format!("layer {i} has zero width")));
                    }
                    seen_dense = true;
                    out.push((vec![width, flat], flat, width));
                    flat = width;
                    spatial = None;
                }
                LayerSpec::Conv {
                    channels,
                    kernel,
                    stride,
                    ..
                } => {
                    let Some(sp) = spatial.filter(|_| !seen_dense) else {
                        return Err(Error::InvalidArchitecture(format!(
                            "conv layer {i} needs a [height, width, channels] input ahead of any dense layer"
                        )));
                    };
                    if channels == 0 || kernel == 0 || stride == 0 || kernel > sp.h || kernel > sp.w {
                        return Err(Error::InvalidArchitecture(format!(
                            "conv layer {i}: kernel {kernel} stride {stride} channels {channels} on {}x{}",
                            sp.h, sp.w
                        )));
                    }
                    let next = Spatial {
                        h: (sp.h - kernel) / stride + 1,
                        w: (sp.w - kernel) / stride + 1,
                        c: channels,
                    };
                    let patch = kernel * kernel * sp.c;
                    out.push((vec![channels, kernel, kernel, sp.c], patch, channels * kernel * kernel));
                    flat = next.h * next.w * next.c;
                    spatial = Some(next);
                }
            }
        }
        Ok((out, flat))
    }

    pub fn validate(&self) -> Result<()> {
        self.layout().map(|_| ())
    }

    /// Width of the backbone output.
    pub fn embedding_dim(&self) -> Result<usize> {
        self.layout().map(|(_, e)| e)
    }

    /// Glorot-uniform weights and zero biases, deterministic in `seed`.
    pub fn init_params<S: Scalar>(&self, seed: u64) -> Result<ParameterSet<S>> {
        let (layers, emb) = self.layout()?;
        let mut rng = rng_from(seed, &[stream::INIT]);
        let mut glorot = |shape: &[usize], fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..numel(shape))
                .map(|_| S::lit(rng.random_range(-bound..=bound)))
                .collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches data")
        };
        let mut params = ParameterSet::new();
        for (i, (shape, fan_in, fan_out)) in layers.iter().enumerate() {
            params.insert(weight_name(i), Scope::Backbone, glorot(shape, *fan_in, *fan_out));
            params.insert(bias_name(i), Scope::Backbone, Tensor::zeros(vec![shape[0]]));
        }
        params.insert(HEAD_WEIGHT, Scope::Head, glorot(&[self.n_way, emb], emb, self.n_way));
        params.insert(HEAD_BIAS, Scope::Head, Tensor::zeros(vec![self.n_way]));
        Ok(params)
    }

    /// Checks that `params` carries every entry this architecture needs with the
    /// expected shape.
    pub fn check_params<S: Scalar>(&self, params: &ParameterSet<S>, with_head: bool) -> Result<()> {
        let expected: ParameterSet<S> = self.init_params(0)?;
        for (name, p) in expected.iter() {
            if p.scope == Scope::Head && !with_head {
                continue;
            }
            match params.get(name) {
                None => return Err(Error::InvalidArchitecture(format!("missing parameter '{name}'"))),
                Some(q) if q.value.shape() != p.value.shape() => {
                    return Err(Error::InvalidArchitecture(format!(
                        "parameter '{name}' has shape {:?}, architecture expects {:?}",
                        q.value.shape(),
                        p.value.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Maps a batch `[batch, ..input_shape]` to features `[batch, embedding_dim]`.
    pub fn forward_backbone<'g, S: Scalar>(&self, params: &ParamVars<'g, S>, batch: Var<'g, S>) -> Result<Var<'g, S>> {
        let shape = batch.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::InvalidArchitecture(format!(
                "batch shape {:?} does not match input shape {:?}",
                shape, self.input_shape
            )));
        }
        let b = shape[0];
        let mut spatial = match self.input_shape.as_slice() {
            &[h, w, c] => Some(Spatial { h, w, c }),
            _ => None,
        };
        let mut x = batch.reshape(&[b, self.input_dim()])?;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = lookup(params, &weight_name(i))?;
            let bias = lookup(params, &bias_name(i))?;
            let act = match *layer {
                LayerSpec::Dense { activation, .. } => {
                    x = x.matmul(&w.t()?)?.add(&bias)?;
                    spatial = None;
                    activation
                }
                LayerSpec::Conv {
                    channels,
                    kernel,
                    stride,
                    activation,
                } => {
                    let sp = spatial.expect("validated conv input");
                    let (oh, ow) = ((sp.h - kernel) / stride + 1, (sp.w - kernel) / stride + 1);
                    let patch = kernel * kernel * sp.c;
                    let index = im2col_index(b, sp, kernel, stride, oh, ow);
                    let cols = x.gather(index, &[b * oh * ow, patch])?;
                    let wm = w.reshape(&[channels, patch])?;
                    let y = cols.matmul(&wm.t()?)?.add(&bias)?;
                    x = y.reshape(&[b, oh * ow * channels])?;
                    spatial = Some(Spatial {
                        h: oh,
                        w: ow,
                        c: channels,
                    });
                    activation
                }
            };
            if act == Activation::Relu {
                x = x.relu()?;
            }
        }
        Ok(x)
    }

    /// Backbone followed by the linear head stored under `head.*`.
    pub fn forward<'g, S: Scalar>(&self, params: &ParamVars<'g, S>, batch: Var<'g, S>) -> Result<Var<'g, S>> {
        let f = self.forward_backbone(params, batch)?;
        forward_linear_head(lookup(params, HEAD_WEIGHT)?, lookup(params, HEAD_BIAS)?, f)
    }
}

fn lookup<'g, S: Scalar>(params: &ParamVars<'g, S>, name: &str) -> Result<Var<'g, S>> {
    params
        .get(name)
        .ok_or_else(|| Error::InvalidArchitecture(format!("missing parameter '{name}'")))
}

/// `features * weight^T + bias` with `weight: [n_way, dim]`, `bias: [n_way]`.
pub fn forward_linear_head<'g, S: Scalar>(
    weight: Var<'g, S>,
    bias: Var<'g, S>,
    features: Var<'g, S>,
) -> Result<Var<'g, S>> {
    let (ws, fs) = (weight.shape(), features.shape());
    if ws.len() != 2 || fs.len() != 2 || ws[1] != fs[1] || bias.shape() != [ws[0]] {
        return Err(Error::InvalidArchitecture(format!(
            "head weight {:?} / bias {:?} incompatible with features {:?}",
            ws,
            bias.shape(),
            fs
        )));
    }
    Ok(features.matmul(&weight.t()?)?.add(&bias)?)
}

fn im2col_index(b: usize, sp: Spatial, k: usize, s: usize, oh: usize, ow: usize) -> Arc<[usize]> {
    let mut index = Vec::with_capacity(b * oh * ow * k * k * sp.c);
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    for kx in 0..k {
                        let base = ((n * sp.h + oy * s + ky) * sp.w + ox * s + kx) * sp.c;
                        index.extend(base..base + sp.c);
                    }
                }
            }
        }
    }
    index.into()
}
