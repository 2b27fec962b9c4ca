//! Named parameter storage and the handful of layers the model is built from.
//!
//! Parameters are candle [`Var`]s kept in insertion order under dotted names
//! (`mgca.l2.s1.ca_rain.q_proj.weight`). Initial values come from a seeded
//! ChaCha stream so a model is reproducible from its config and seed alone.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_mismatch, Result};
use crate::imaging::Image;

/// A copy of a module whose weights share storage with the original but are
/// not autograd variables, so a forward pass through it records no graph.
pub trait Detach {
    fn detached(&self) -> Self;
}

impl<T: Detach> Detach for Vec<T> {
    fn detached(&self) -> Self {
        self.iter().map(Detach::detached).collect()
    }
}

/// One named learnable array.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
}

/// All learnable parameters of a model, in construction order.
#[derive(Debug)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    params: Vec<Param>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            params: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.params[i].var)
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    /// Number of learnable scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.var.elem_count())
            .sum()
    }

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        assert!(
            !self.index.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, var });
        Ok(tensor)
    }
}

/// A name prefix inside a [`ParamStore`].
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn sub(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        let prefix = self.name(name.as_ref());
        Scope {
            store: self.store,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| self.store.rng.random_range(-bound..=bound))
            .collect();
        let name = self.name(leaf);
        self.store.insert(name, values, shape)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let name = self.name(leaf);
        self.store.insert(name, vec![value; n], shape)
    }
}

/// 2-D convolution with optional bias. 1×1 dense convolutions run as a
/// matrix product.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride 1, "same" padding, dense, with bias.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: true,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self {
            groups: channels,
            ..Self::same(channels, channels, kernel)
        }
    }

    pub fn strided(self, stride: usize, padding: usize) -> Self {
        Self { stride, padding, ..self }
    }

    pub fn no_bias(self) -> Self {
        Self { bias: false, ..self }
    }

    fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.fan_in() + if self.bias { self.out_channels } else { 0 }
    }
}

impl Detach for Conv2d {
    fn detached(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.as_ref().map(Tensor::detach),
            ..*self
        }
    }
}

impl Conv2d {
    /// Default init: uniform in `±1/sqrt(fan_in)` for weights and bias.
    pub fn new(scope: &mut Scope, name: &str, spec: ConvSpec) -> Result<Self> {
        let bound = 1.0 / (spec.fan_in() as f64).sqrt();
        Self::with_init(scope, name, spec, Some(bound))
    }

    /// All-zero weights and bias.
    pub fn zeros(scope: &mut Scope, name: &str, spec: ConvSpec) -> Result<Self> {
        Self::with_init(scope, name, spec, None)
    }

    fn with_init(scope: &mut Scope, name: &str, spec: ConvSpec, bound: Option<f64>) -> Result<Self> {
        let mut s = scope.sub(name);
        let shape = [
            spec.out_channels,
            spec.in_channels / spec.groups,
            spec.kernel,
            spec.kernel,
        ];
        let weight = match bound {
            Some(b) => s.uniform("weight", &shape, b)?,
            None => s.constant("weight", &shape, 0.0)?,
        };
        let bias = if spec.bias {
            Some(match bound {
                Some(b) => s.uniform("bias", &[spec.out_channels], b)?,
                None => s.constant("bias", &[spec.out_channels], 0.0)?,
            })
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c_out, c_in_g, kh, kw) = self.weight.dims4()?;
        let (b, c, h, w) = x.dims4()?;
        if c != c_in_g * self.groups {
            return Err(shape_mismatch(c_in_g * self.groups, c));
        }
        let y = if kh == 1 && kw == 1 && self.groups == 1 && self.stride == 1 && self.padding == 0 {
            let w2 = self.weight.reshape((c_out, c_in_g))?;
            w2.broadcast_matmul(&x.reshape((b, c, h * w))?)?
                .reshape((b, c_out, h, w))?
        } else if self.groups == 1 && kh == self.stride && kw == self.stride && self.padding == 0 {
            // Non-overlapping patches: space-to-depth, then a matrix product.
            let k = self.stride;
            let (oh, ow) = (h / k, w / k);
            let x = x
                .narrow(2, 0, oh * k)?
                .narrow(3, 0, ow * k)?
                .reshape(&[b, c, oh, k, ow, k][..])?
                .permute(&[0, 1, 3, 5, 2, 4][..])?
                .contiguous()?
                .reshape((b, c * k * k, oh * ow))?;
            self.weight
                .reshape((c_out, c * k * k))?
                .broadcast_matmul(&x)?
                .reshape((b, c_out, oh, ow))?
        } else if self.groups == c && c_in_g == 1 && c_out == c && self.stride == 1 && kh == kw && kh % 2 == 1 && self.padding == kh / 2 {
            crate::kernels::depthwise_conv2d(x, &self.weight)?
        } else if self.groups == 1 && self.stride == 1 && kh == kw && self.padding == kh / 2 && kh % 2 == 1 {
            // Dense "same" convolution as patch extraction and one matrix product.
            let cols = crate::kernels::unfold(x, kh)?;
            self.weight
                .reshape((c_out, c * kh * kw))?
                .broadcast_matmul(&cols)?
                .reshape((b, c_out, h, w))?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, self.groups)?
        };
        match &self.bias {
            Some(b) => crate::kernels::add_channel_bias(&y, b),
            None => Ok(y),
        }
    }
}

/// Layer normalization over the channel axis of an `(B, C, H, W)` tensor.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    weight: Tensor,
    bias: Tensor,
}

impl Detach for ChannelNorm {
    fn detached(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.detach(),
        }
    }
}

impl ChannelNorm {
    const EPS: f64 = 1e-5;

    pub fn new(scope: &mut Scope, name: &str, channels: usize) -> Result<Self> {
        let mut s = scope.sub(name);
        Ok(Self {
            weight: s.constant("weight", &[channels], 1.0)?,
            bias: s.constant("bias", &[channels], 0.0)?,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        crate::kernels::channel_norm(x, &self.weight, &self.bias, Self::EPS)
    }
}

/// Stacks images into a `(B, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = images
        .first()
        .map(|i| i.dims())
        .ok_or_else(|| shape_mismatch("at least one image", 0))?;
    let mut buf = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dims() != (h, w) {
            return Err(shape_mismatch((h, w), img.dims()));
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    buf.push(img.get(y, x, c));
                }
            }
        }
    }
    Ok(Tensor::from_vec(buf, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Converts batch element `index` of a `(B, 3, H, W)` tensor back to an
/// image, clamping into `[0, 1]`.
pub fn tensor_to_image(t: &Tensor, index: usize) -> Result<Image> {
    let (_, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(shape_mismatch(3, c));
    }
    let v: Vec<f32> = t.get(index)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Image::new(Array3::from_shape_fn((h, w, 3), |(y, x, ch)| v[ch * h * w + y * w + x]))
}

/// Stacks 2-D masks into a `(B, 1, H, W)` tensor.
pub fn masks_to_tensor(masks: &[&Array2<f32>], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = masks
        .first()
        .map(|m| m.dim())
        .ok_or_else(|| shape_mismatch("at least one mask", 0))?;
    let mut buf = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.dim() != (h, w) {
            return Err(shape_mismatch((h, w), m.dim()));
        }
        buf.extend(m.iter().copied());
    }
    Ok(Tensor::from_vec(buf, (masks.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// Batch element `index` of a `(B, 1, H, W)` tensor as a 2-D array.
pub fn tensor_to_mask(t: &Tensor, index: usize) -> Result<Array2<f32>> {
    let (_, _, h, w) = t.dims4()?;
    let v: Vec<f32> = t.get(index)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(Array2::from_shape_vec((h, w), v).map_err(|e| shape_mismatch((h, w), e.to_string()))?)
}

/// Softmax over the last axis, built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?;
    let e = x.broadcast_sub(&max.detach())?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}
