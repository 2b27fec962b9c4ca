//! Hand-written CPU kernels for operations that are slow when composed from
//! generic tensor primitives: depthwise convolution, exact GELU, per-channel
//! bias, channel normalization, plane masking and patch extraction. Each
//! carries its own backward pass.

use candle_core::cpu::erf::{erf_f32, erf_f64};
use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

use crate::error::{shape_mismatch, Result};

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => Err(candle_core::Error::RequiresContiguous { op: "kernel" }),
    }
}

trait Real: Copy + Default + std::ops::Mul<Output = Self> + std::ops::AddAssign {}
impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Copy)]
struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: isize,
}

impl Geometry {
    /// Calls `f(tap, dst, src)` for every output index `dst` of a plane and
    /// in-bounds source index `src` that kernel tap `tap` connects.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w, k) = (self.h as isize, self.w as isize, self.k);
        for dy in 0..k {
            let oy = dy as isize - self.pad;
            let (y0, y1) = ((-oy).max(0), (h - oy).min(h));
            for dx in 0..k {
                let ox = dx as isize - self.pad;
                let (x0, x1) = ((-ox).max(0), (w - ox).min(w));
                let tap = dy * k + dx;
                for y in y0..y1 {
                    let row = (y * w) as usize;
                    let src_row = ((y + oy) * w) as usize;
                    for x in x0..x1 {
                        f(tap, row + x as usize, src_row + (x + ox) as usize);
                    }
                }
            }
        }
    }
}

fn dw_forward<T: Real>(x: &[T], wt: &[T], g: Geometry) -> Vec<T> {
    let plane = g.h * g.w;
    let kk = g.k * g.k;
    let mut out = vec![T::default(); g.b * g.c * plane];
    for bc in 0..g.b * g.c {
        let c = bc % g.c;
        let (xs, ys) = (&x[bc * plane..(bc + 1) * plane], &mut out[bc * plane..(bc + 1) * plane]);
        let taps = &wt[c * kk..(c + 1) * kk];
        g.for_each(|tap, dst, src| ys[dst] += xs[src] * taps[tap]);
    }
    out
}

fn dw_grad_input<T: Real>(grad: &[T], wt: &[T], g: Geometry) -> Vec<T> {
    let plane = g.h * g.w;
    let kk = g.k * g.k;
    let mut out = vec![T::default(); g.b * g.c * plane];
    for bc in 0..g.b * g.c {
        let c = bc % g.c;
        let (gs, xs) = (&grad[bc * plane..(bc + 1) * plane], &mut out[bc * plane..(bc + 1) * plane]);
        let taps = &wt[c * kk..(c + 1) * kk];
        g.for_each(|tap, dst, src| xs[src] += gs[dst] * taps[tap]);
    }
    out
}

fn dw_grad_weight<T: Real>(x: &[T], grad: &[T], g: Geometry) -> Vec<T> {
    let plane = g.h * g.w;
    let kk = g.k * g.k;
    let mut out = vec![T::default(); g.c * kk];
    for bc in 0..g.b * g.c {
        let c = bc % g.c;
        let (xs, gs) = (&x[bc * plane..(bc + 1) * plane], &grad[bc * plane..(bc + 1) * plane]);
        let taps = &mut out[c * kk..(c + 1) * kk];
        g.for_each(|tap, dst, src| taps[tap] += gs[dst] * xs[src]);
    }
    out
}

#[derive(Clone, Copy, PartialEq)]
enum DwPass {
    Forward,
    GradInput,
    GradWeight,
}

/// Depthwise convolution with stride 1 and "same" padding.
struct Depthwise {
    pass: DwPass,
    k: usize,
}

impl Depthwise {
    fn geometry(&self, planes: &Layout) -> candle_core::Result<Geometry> {
        let (b, c, h, w) = planes.shape().dims4()?;
        Ok(Geometry {
            b,
            c,
            h,
            w,
            k: self.k,
            pad: (self.k / 2) as isize,
        })
    }
}

impl CustomOp2 for Depthwise {
    fn name(&self) -> &'static str {
        "depthwise-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry(l1)?;
        let out_shape = match self.pass {
            DwPass::GradWeight => Shape::from((g.c, 1, g.k, g.k)),
            _ => l1.shape().clone(),
        };
        macro_rules! run {
            ($variant:ident, $a:expr, $b:expr) => {{
                let (a, b) = (contiguous($a, l1)?, contiguous($b, l2)?);
                CpuStorage::$variant(match self.pass {
                    DwPass::Forward => dw_forward(a, b, g),
                    DwPass::GradInput => dw_grad_input(a, b, g),
                    DwPass::GradWeight => dw_grad_weight(a, b, g),
                })
            }};
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => run!(F32, a, b),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => run!(F64, a, b),
            _ => return Err(candle_core::Error::Msg("depthwise kernel supports f32 and f64".into())),
        };
        Ok((out, out_shape))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        debug_assert!(self.pass == DwPass::Forward);
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(w, &Depthwise { pass: DwPass::GradInput, k: self.k })?;
        let gw = x.apply_op2_no_bwd(&grad, &Depthwise { pass: DwPass::GradWeight, k: self.k })?;
        Ok((Some(gx), Some(gw)))
    }
}

/// `(B, C, H, W)` input and `(C, 1, k, k)` kernels, odd `k`, zero padding
/// `k / 2`, stride 1, no bias.
pub fn depthwise_conv2d(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    let (wc, one, k, k2) = weight.dims4()?;
    if wc != c || one != 1 || k != k2 || k % 2 == 0 {
        return Err(shape_mismatch((c, 1, "odd k", "k"), weight.dims()));
    }
    Ok(x.contiguous()?.apply_op2(&weight.contiguous()?, Depthwise { pass: DwPass::Forward, k })?)
}

/// Exact GELU, `x·Φ(x)`.
struct Gelu;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-erf"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(
                contiguous(v, l)?
                    .iter()
                    .map(|&x| 0.5 * x * (1.0 + erf_f32(x * std::f32::consts::FRAC_1_SQRT_2)))
                    .collect(),
            ),
            CpuStorage::F64(v) => CpuStorage::F64(
                contiguous(v, l)?
                    .iter()
                    .map(|&x| 0.5 * x * (1.0 + erf_f64(x * std::f64::consts::FRAC_1_SQRT_2)))
                    .collect(),
            ),
            _ => return Err(candle_core::Error::Msg("gelu kernel supports f32 and f64".into())),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let d = x.apply_op1_no_bwd(&GeluDerivative)?;
        Ok(Some(grad.mul(&d)?))
    }
}

/// `Φ(x) + x·φ(x)`.
struct GeluDerivative;

impl CustomOp1 for GeluDerivative {
    fn name(&self) -> &'static str {
        "gelu-erf-derivative"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(
                contiguous(v, l)?
                    .iter()
                    .map(|&x| {
                        let cdf = 0.5 * (1.0 + erf_f32(x * std::f32::consts::FRAC_1_SQRT_2));
                        cdf + x * FRAC_1_SQRT_2PI as f32 * (-0.5 * x * x).exp()
                    })
                    .collect(),
            ),
            CpuStorage::F64(v) => CpuStorage::F64(
                contiguous(v, l)?
                    .iter()
                    .map(|&x| {
                        let cdf = 0.5 * (1.0 + erf_f64(x * std::f64::consts::FRAC_1_SQRT_2));
                        cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
                    })
                    .collect(),
            ),
            _ => return Err(candle_core::Error::Msg("gelu kernel supports f32 and f64".into())),
        };
        Ok((out, l.shape().clone()))
    }
}

/// Exact (erf-based) GELU with an analytic backward pass.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}

/// Runs `$body` on the contiguous slices of same-typed f32 or f64 storages.
macro_rules! dispatch {
    ($name:expr, [$($s:ident, $l:ident),+], |$($v:ident),+| $body:expr) => {{
        #[allow(unused_parens)]
        match ($($s),+) {
            ($(CpuStorage::F32($v)),+) => {
                $(let $v = contiguous($v, $l)?;)+
                CpuStorage::F32($body)
            }
            ($(CpuStorage::F64($v)),+) => {
                $(let $v = contiguous($v, $l)?;)+
                CpuStorage::F64($body)
            }
            _ => return Err(candle_core::Error::Msg(format!("{} supports matching f32 or f64 inputs", $name))),
        }
    }};
}

trait Float: Real + std::ops::Add<Output = Self> + std::ops::Sub<Output = Self> + std::ops::Div<Output = Self> + std::ops::Neg<Output = Self> {
    fn from_f64(v: f64) -> Self;
    fn sqrt(self) -> Self;
}

impl Float for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
}

impl Float for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

fn dims4(l: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    let (b, c, h, w) = l.shape().dims4()?;
    Ok((b, c, h * w))
}

/// `x + bias` with one bias value per channel.
struct ChannelBias;

fn channel_sum<T: Float>(g: &[T], b: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::default(); c];
    for bi in 0..b {
        for (ci, o) in out.iter_mut().enumerate() {
            let start = (bi * c + ci) * plane;
            for &v in &g[start..start + plane] {
                *o += v;
            }
        }
    }
    out
}

fn add_bias<T: Float>(x: &[T], bias: &[T], c: usize, plane: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let v = bias[i % c];
        for o in chunk {
            *o += v;
        }
    }
    out
}

impl CustomOp2 for ChannelBias {
    fn name(&self) -> &'static str {
        "channel-bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, plane) = dims4(l1)?;
        let out = dispatch!(self.name(), [s1, l1, s2, l2], |x, b| add_bias(x, b, c, plane));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, _b: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let gb = grad.contiguous()?.apply_op1_no_bwd(&ChannelSum)?;
        Ok((Some(grad.clone()), Some(gb)))
    }
}

/// Sums a `(B, C, H, W)` tensor to `(C,)`.
struct ChannelSum;

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, plane) = dims4(l)?;
        let out = dispatch!(self.name(), [s, l], |g| channel_sum(g, b, c, plane));
        Ok((out, Shape::from(c)))
    }
}

/// Adds a per-channel bias to a `(B, C, H, W)` tensor.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if bias.dims() != [c] {
        return Err(shape_mismatch([c], bias.dims()));
    }
    Ok(x.contiguous()?.apply_op2(&bias.contiguous()?, ChannelBias)?)
}

/// Layer normalization across channels at every pixel, with a per-channel
/// affine map.
struct ChannelNormOp {
    eps: f64,
}

/// Normalized values and the reciprocal standard deviation of each pixel.
fn normalize<T: Float>(x: &[T], b: usize, c: usize, plane: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::default(); x.len()];
    let mut rstd = vec![T::default(); b * plane];
    let inv_c = T::from_f64(1.0 / c as f64);
    for bi in 0..b {
        let base = bi * c * plane;
        for p in 0..plane {
            let mut mean = T::default();
            for ci in 0..c {
                mean += x[base + ci * plane + p];
            }
            mean = mean * inv_c;
            let mut var = T::default();
            for ci in 0..c {
                let d = x[base + ci * plane + p] - mean;
                var += d * d;
            }
            let r = T::from_f64(1.0) / (var * inv_c + T::from_f64(eps)).sqrt();
            rstd[bi * plane + p] = r;
            for ci in 0..c {
                let i = base + ci * plane + p;
                xhat[i] = (x[i] - mean) * r;
            }
        }
    }
    (xhat, rstd)
}

fn norm_forward<T: Float>(x: &[T], gamma: &[T], beta: &[T], b: usize, c: usize, plane: usize, eps: f64) -> Vec<T> {
    let (mut y, _) = normalize(x, b, c, plane, eps);
    for (i, chunk) in y.chunks_mut(plane).enumerate() {
        let (g, bt) = (gamma[i % c], beta[i % c]);
        for v in chunk {
            *v = *v * g + bt;
        }
    }
    y
}

fn norm_grad_input<T: Float>(x: &[T], gamma: &[T], gy: &[T], b: usize, c: usize, plane: usize, eps: f64) -> Vec<T> {
    let (xhat, rstd) = normalize(x, b, c, plane, eps);
    let mut gx = vec![T::default(); x.len()];
    let inv_c = T::from_f64(1.0 / c as f64);
    for bi in 0..b {
        let base = bi * c * plane;
        for p in 0..plane {
            let (mut m1, mut m2) = (T::default(), T::default());
            for ci in 0..c {
                let i = base + ci * plane + p;
                let gh = gy[i] * gamma[ci];
                m1 += gh;
                m2 += gh * xhat[i];
            }
            let (m1, m2) = (m1 * inv_c, m2 * inv_c);
            let r = rstd[bi * plane + p];
            for ci in 0..c {
                let i = base + ci * plane + p;
                gx[i] = r * (gy[i] * gamma[ci] - m1 - xhat[i] * m2);
            }
        }
    }
    gx
}

/// `(2, C)`: gradients of the scale (row 0) and shift (row 1).
fn norm_grad_affine<T: Float>(x: &[T], gy: &[T], b: usize, c: usize, plane: usize, eps: f64) -> Vec<T> {
    let (xhat, _) = normalize(x, b, c, plane, eps);
    let mut out = vec![T::default(); 2 * c];
    for bi in 0..b {
        for ci in 0..c {
            let start = (bi * c + ci) * plane;
            let (mut sg, mut sb) = (T::default(), T::default());
            for i in start..start + plane {
                sg += gy[i] * xhat[i];
                sb += gy[i];
            }
            out[ci] += sg;
            out[c + ci] += sb;
        }
    }
    out
}

impl candle_core::CustomOp3 for ChannelNormOp {
    fn name(&self) -> &'static str {
        "channel-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, plane) = dims4(l1)?;
        let eps = self.eps;
        let out = dispatch!(self.name(), [s1, l1, s2, l2, s3, l3], |x, g, bt| norm_forward(x, g, bt, b, c, plane, eps));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = x.apply_op3_no_bwd(gamma, &grad, &NormGradInput { eps: self.eps })?;
        let affine = x.apply_op2_no_bwd(&grad, &NormGradAffine { eps: self.eps })?;
        Ok((Some(gx), Some(affine.get(0)?), Some(affine.get(1)?)))
    }
}

struct NormGradInput {
    eps: f64,
}

impl candle_core::CustomOp3 for NormGradInput {
    fn name(&self) -> &'static str {
        "channel-norm-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, plane) = dims4(l1)?;
        let eps = self.eps;
        let out = dispatch!(self.name(), [s1, l1, s2, l2, s3, l3], |x, g, gy| norm_grad_input(x, g, gy, b, c, plane, eps));
        Ok((out, l1.shape().clone()))
    }
}

struct NormGradAffine {
    eps: f64,
}

impl CustomOp2 for NormGradAffine {
    fn name(&self) -> &'static str {
        "channel-norm-grad-affine"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, plane) = dims4(l1)?;
        let eps = self.eps;
        let out = dispatch!(self.name(), [s1, l1, s2, l2], |x, gy| norm_grad_affine(x, gy, b, c, plane, eps));
        Ok((out, Shape::from((2, c))))
    }
}

/// Normalizes a `(B, C, H, W)` tensor across channels at every pixel, then
/// applies `gamma · x̂ + beta` per channel.
pub fn channel_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(shape_mismatch([c], (gamma.dims(), beta.dims())));
    }
    Ok(x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, ChannelNormOp { eps })?)
}

/// `x ⊙ m` for `(B, C, H, W)` features and a `(B, 1, H, W)` plane.
struct MulPlane;

fn mul_plane_fwd<T: Float>(x: &[T], m: &[T], c: usize, plane: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let mp = &m[(i / c) * plane..(i / c + 1) * plane];
        for (o, &v) in chunk.iter_mut().zip(mp) {
            *o = *o * v;
        }
    }
    out
}

/// `Σ_c g ⊙ x` → `(B, 1, H, W)`.
fn plane_grad<T: Float>(x: &[T], g: &[T], b: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::default(); b * plane];
    for (i, (xc, gc)) in x.chunks(plane).zip(g.chunks(plane)).enumerate() {
        let o = &mut out[(i / c) * plane..(i / c + 1) * plane];
        for ((o, &xv), &gv) in o.iter_mut().zip(xc).zip(gc) {
            *o += xv * gv;
        }
    }
    out
}

impl CustomOp2 for MulPlane {
    fn name(&self) -> &'static str {
        "mul-plane"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, plane) = dims4(l1)?;
        let out = dispatch!(self.name(), [s1, l1, s2, l2], |x, m| mul_plane_fwd(x, m, c, plane));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, m: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(m, &MulPlane)?;
        let gm = x.apply_op2_no_bwd(&grad, &PlaneGrad)?;
        Ok((Some(gx), Some(gm)))
    }
}

struct PlaneGrad;

impl CustomOp2 for PlaneGrad {
    fn name(&self) -> &'static str {
        "mul-plane-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, plane) = dims4(l1)?;
        let (_, _, h, w) = l1.shape().dims4()?;
        let out = dispatch!(self.name(), [s1, l1, s2, l2], |x, g| plane_grad(x, g, b, c, plane));
        Ok((out, Shape::from((b, 1, h, w))))
    }
}

/// Multiplies every channel of `x` by the single-channel map `m`.
pub fn mul_plane(x: &Tensor, m: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = x.dims4()?;
    if m.dims() != [b, 1, h, w] {
        return Err(shape_mismatch([b, 1, h, w], m.dims()));
    }
    Ok(x.contiguous()?.apply_op2(&m.contiguous()?, MulPlane)?)
}

/// Patch extraction for "same" convolutions: `(B, C, H, W)` →
/// `(B, C·k², H·W)` with zero padding `k / 2`.
struct Im2Col {
    k: usize,
    h: usize,
    w: usize,
}

fn im2col<T: Float>(x: &[T], b: usize, c: usize, g: Geometry) -> Vec<T> {
    let plane = g.h * g.w;
    let kk = g.k * g.k;
    let mut out = vec![T::default(); b * c * kk * plane];
    for bc in 0..b * c {
        let xs = &x[bc * plane..(bc + 1) * plane];
        let dst = &mut out[bc * kk * plane..(bc + 1) * kk * plane];
        g.for_each(|tap, o, src| dst[tap * plane + o] = xs[src]);
    }
    out
}

fn col2im<T: Float>(cols: &[T], b: usize, c: usize, g: Geometry) -> Vec<T> {
    let plane = g.h * g.w;
    let kk = g.k * g.k;
    let mut out = vec![T::default(); b * c * plane];
    for bc in 0..b * c {
        let src = &cols[bc * kk * plane..(bc + 1) * kk * plane];
        let xs = &mut out[bc * plane..(bc + 1) * plane];
        g.for_each(|tap, o, s| xs[s] += src[tap * plane + o]);
    }
    out
}

impl Im2Col {
    fn geometry(&self) -> Geometry {
        Geometry {
            b: 0,
            c: 0,
            h: self.h,
            w: self.w,
            k: self.k,
            pad: (self.k / 2) as isize,
        }
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, _) = dims4(l)?;
        let g = self.geometry();
        let out = dispatch!(self.name(), [s, l], |x| im2col(x, b, c, g));
        Ok((out, Shape::from((b, c * self.k * self.k, self.h * self.w))))
    }

    fn bwd(&self, _x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let gx = grad.contiguous()?.apply_op1_no_bwd(&Col2Im { k: self.k, h: self.h, w: self.w })?;
        Ok(Some(gx))
    }
}

struct Col2Im {
    k: usize,
    h: usize,
    w: usize,
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, ckk, _) = l.shape().dims3()?;
        let c = ckk / (self.k * self.k);
        let g = Im2Col { k: self.k, h: self.h, w: self.w }.geometry();
        let out = dispatch!(self.name(), [s, l], |cols| col2im(cols, b, c, g));
        Ok((out, Shape::from((b, c, self.h, self.w))))
    }
}

/// `(B, C, H, W)` → `(B, C·k², H·W)` patches, channel-major, for an odd
/// kernel size `k` with zero padding `k / 2`.
pub fn unfold(x: &Tensor, k: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if k % 2 == 0 {
        return Err(shape_mismatch("odd kernel", k));
    }
    Ok(x.contiguous()?.apply_op1(Im2Col { k, h, w })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        for k in [3, 7] {
            let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 5, 6, 9), &Device::Cpu).unwrap()).unwrap();
            let w = Var::from_tensor(&Tensor::randn(0f64, 1.0, (5, 1, k, k), &Device::Cpu).unwrap()).unwrap();
            let probe = Tensor::randn(0f64, 1.0, (2, 5, 6, 9), &Device::Cpu).unwrap();
            let ours = depthwise_conv2d(x.as_tensor(), w.as_tensor()).unwrap();
            let reference = x.as_tensor().conv2d(w.as_tensor(), k / 2, 1, 1, 5).unwrap();
            assert!(max_diff(&ours, &reference) < 1e-12);
            let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w] {
                assert!(max_diff(g1.get(v.as_tensor()).unwrap(), g2.get(v.as_tensor()).unwrap()) < 1e-10);
            }
        }
    }

    #[test]
    fn gelu_matches_builtin_and_finite_differences() {
        let x = Var::from_tensor(&(Tensor::randn(0f64, 2.0, (64,), &Device::Cpu).unwrap())).unwrap();
        let ours = gelu(x.as_tensor()).unwrap();
        let reference = x.as_tensor().gelu_erf().unwrap();
        assert!(max_diff(&ours, &reference) < 1e-12);
        let g: Vec<f64> = ours.sum_all().unwrap().backward().unwrap().get(x.as_tensor()).unwrap().to_vec1().unwrap();
        let xs: Vec<f64> = x.as_tensor().to_vec1().unwrap();
        let f = |v: f64| 0.5 * v * (1.0 + erf_f64(v / std::f64::consts::SQRT_2));
        for (xi, gi) in xs.iter().zip(&g) {
            let h = 1e-6;
            let fd = (f(xi + h) - f(xi - h)) / (2.0 * h);
            assert!((fd - gi).abs() < 1e-7, "x {xi}: {fd} vs {gi}");
        }
    }

    fn grads_match(ours: &Tensor, reference: &Tensor, vars: &[&Var], probe: &Tensor) {
        assert!(max_diff(ours, reference) < 1e-12);
        let g1 = (ours * probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in vars {
            let d = max_diff(g1.get(v.as_tensor()).unwrap(), g2.get(v.as_tensor()).unwrap());
            assert!(d < 1e-10, "{d}");
        }
    }

    fn var(shape: &[usize], scale: f64) -> Var {
        Var::from_tensor(&Tensor::randn(0f64, scale, shape, &Device::Cpu).unwrap()).unwrap()
    }

    #[test]
    fn channel_bias_matches_broadcast() {
        let (x, b) = (var(&[2, 3, 4, 5], 1.0), var(&[3], 1.0));
        let probe = Tensor::randn(0f64, 1.0, (2, 3, 4, 5), &Device::Cpu).unwrap();
        let ours = add_channel_bias(x.as_tensor(), b.as_tensor()).unwrap();
        let reference = x.as_tensor().broadcast_add(&b.as_tensor().reshape((1, 3, 1, 1)).unwrap()).unwrap();
        grads_match(&ours, &reference, &[&x, &b], &probe);
    }

    #[test]
    fn channel_norm_matches_composition() {
        let (x, g, b) = (var(&[2, 6, 3, 4], 2.0), var(&[6], 1.0), var(&[6], 1.0));
        let probe = Tensor::randn(0f64, 1.0, (2, 6, 3, 4), &Device::Cpu).unwrap();
        let ours = channel_norm(x.as_tensor(), g.as_tensor(), b.as_tensor(), 1e-5).unwrap();
        let xt = x.as_tensor();
        let centered = xt.broadcast_sub(&xt.mean_keepdim(1).unwrap()).unwrap();
        let var_ = centered.sqr().unwrap().mean_keepdim(1).unwrap();
        let reference = centered
            .broadcast_div(&(var_ + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&g.as_tensor().reshape((1, 6, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&b.as_tensor().reshape((1, 6, 1, 1)).unwrap())
            .unwrap();
        grads_match(&ours, &reference, &[&x, &g, &b], &probe);
    }

    #[test]
    fn mul_plane_matches_broadcast() {
        let (x, m) = (var(&[2, 3, 4, 5], 1.0), var(&[2, 1, 4, 5], 1.0));
        let probe = Tensor::randn(0f64, 1.0, (2, 3, 4, 5), &Device::Cpu).unwrap();
        let ours = mul_plane(x.as_tensor(), m.as_tensor()).unwrap();
        let reference = x.as_tensor().broadcast_mul(m.as_tensor()).unwrap();
        grads_match(&ours, &reference, &[&x, &m], &probe);
    }

    #[test]
    fn unfold_matches_shifted_copies() {
        for k in [3, 7] {
            let x = var(&[2, 3, 5, 6], 1.0);
            let p = k / 2;
            let xp = x.as_tensor().pad_with_zeros(2, p, p).unwrap().pad_with_zeros(3, p, p).unwrap();
            let mut taps = Vec::new();
            for dy in 0..k {
                for dx in 0..k {
                    taps.push(xp.narrow(2, dy, 5).unwrap().narrow(3, dx, 6).unwrap());
                }
            }
            let reference = Tensor::stack(&taps, 2).unwrap().reshape((2, 3 * k * k, 30)).unwrap();
            let ours = unfold(x.as_tensor(), k).unwrap();
            let probe = Tensor::randn(0f64, 1.0, (2, 3 * k * k, 30), &Device::Cpu).unwrap();
            grads_match(&ours, &reference, &[&x], &probe);
        }
    }
}
