//! Mask-guided cross-attention.
//!
//! A feature map is split into rainy and non-rainy parts by a soft mask. Each
//! part queries the full features through its own transposed (channel-wise)
//! cross-attention. The two results then gate each other: a spatial gate
//! computed from the rainy branch scales the non-rainy branch, and a channel
//! gate computed from the (gated) non-rainy branch scales the rainy branch.
//! Their sum is refined by a last cross-attention whose queries come from the
//! original features.

use candle_core::{Tensor, D};

use crate::error::{shape_mismatch, Result};
use crate::nn::{self, Conv2d, ConvSpec, Detach, Scope};

/// Channel reduction of the channel-gate MLPs.
pub const CHANNEL_GATE_REDUCTION: usize = 8;

const SPATIAL_GATE_KERNEL: usize = 7;
const QK_NORM_EPS: f64 = 1e-12;

/// Splits features into rainy (`F ⊙ M`) and non-rainy (`F ⊙ (1 − M)`) parts.
/// `mask` is `(B, 1, H, W)` and broadcasts over channels.
pub fn split_regions(f: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, _, h, w) = f.dims4()?;
    if mask.dims() != [b, 1, h, w] {
        return Err(shape_mismatch([b, 1, h, w], mask.dims()));
    }
    let rainy = crate::kernels::mul_plane(f, mask)?;
    let clear = (f - &rainy)?;
    Ok((rainy, clear))
}

/// Channel attention between already-projected tensors of shape
/// `(B, heads, C_head, N)`: `softmax(Q̂ K̂ᵀ / α) V`, where `Q̂`, `K̂` are
/// L2-normalized along `N` and `alpha` has one entry per head.
///
/// Returns the output and the `(B, heads, C_head, C_head)` attention matrix.
pub fn transposed_attention(q: &Tensor, k: &Tensor, v: &Tensor, alpha: &Tensor) -> Result<(Tensor, Tensor)> {
    if q.dims() != k.dims() || q.dims() != v.dims() {
        return Err(shape_mismatch(q.dims(), (k.dims(), v.dims())));
    }
    let heads = q.dim(1)?;
    let unit = |t: &Tensor| -> Result<Tensor> {
        let norm = (t.sqr()?.sum_keepdim(D::Minus1)? + QK_NORM_EPS)?.sqrt()?;
        Ok(t.broadcast_div(&norm)?)
    };
    let logits = unit(q)?.matmul(&unit(k)?.t()?.contiguous()?)?;
    let logits = logits.broadcast_div(&alpha.reshape((1, heads, 1, 1))?)?;
    let attn = nn::softmax_last(&logits)?;
    let out = attn.matmul(&v.contiguous()?)?;
    Ok((out, attn))
}

/// Multi-dconv-head transposed cross-attention: 1×1 then 3×3 depthwise
/// projections for Q, K and V, channel attention per head, 1×1 output
/// projection.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    q_proj: Conv2d,
    k_proj: Conv2d,
    v_proj: Conv2d,
    q_dw: Conv2d,
    k_dw: Conv2d,
    v_dw: Conv2d,
    log_alpha: Tensor,
    out_proj: Conv2d,
    heads: usize,
}

impl Detach for CrossAttention {
    fn detached(&self) -> Self {
        Self {
            q_proj: self.q_proj.detached(),
            k_proj: self.k_proj.detached(),
            v_proj: self.v_proj.detached(),
            q_dw: self.q_dw.detached(),
            k_dw: self.k_dw.detached(),
            v_dw: self.v_dw.detached(),
            log_alpha: self.log_alpha.detach(),
            out_proj: self.out_proj.detached(),
            heads: self.heads,
        }
    }
}

impl CrossAttention {
    pub fn new(scope: &mut Scope, channels: usize, heads: usize) -> Result<Self> {
        assert!(heads > 0 && channels % heads == 0, "{channels} channels over {heads} heads");
        let pw = ConvSpec::same(channels, channels, 1);
        let dw = ConvSpec::depthwise(channels, 3);
        Ok(Self {
            q_proj: Conv2d::new(scope, "q_proj", pw)?,
            k_proj: Conv2d::new(scope, "k_proj", pw)?,
            v_proj: Conv2d::new(scope, "v_proj", pw)?,
            q_dw: Conv2d::new(scope, "q_dw", dw)?,
            k_dw: Conv2d::new(scope, "k_dw", dw)?,
            v_dw: Conv2d::new(scope, "v_dw", dw)?,
            // α = exp(log_alpha) stays positive; starts at 1.
            log_alpha: scope.constant("log_alpha", &[heads], 0.0)?,
            out_proj: Conv2d::new(scope, "out_proj", pw)?,
            heads,
        })
    }

    pub fn param_count(channels: usize, heads: usize) -> usize {
        4 * ConvSpec::same(channels, channels, 1).param_count()
            + 3 * ConvSpec::depthwise(channels, 3).param_count()
            + heads
    }

    pub fn alpha(&self) -> Result<Tensor> {
        Ok(self.log_alpha.exp()?)
    }

    pub fn log_alpha(&self) -> &Tensor {
        &self.log_alpha
    }

    fn heads_view(&self, t: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = t.dims4()?;
        Ok(t.reshape((b, self.heads, c / self.heads, h * w))?)
    }

    /// Returns the output features and the attention matrix.
    pub fn forward_with_attention(&self, q_src: &Tensor, k_src: &Tensor, v_src: &Tensor) -> Result<(Tensor, Tensor)> {
        let dims = q_src.dims4()?;
        if k_src.dims4()? != dims || v_src.dims4()? != dims {
            return Err(shape_mismatch(dims, (k_src.dims(), v_src.dims())));
        }
        let (b, c, h, w) = dims;
        let q = self.q_dw.forward(&self.q_proj.forward(q_src)?)?;
        let k = self.k_dw.forward(&self.k_proj.forward(k_src)?)?;
        let v = self.v_dw.forward(&self.v_proj.forward(v_src)?)?;
        let (out, attn) = transposed_attention(
            &self.heads_view(&q)?,
            &self.heads_view(&k)?,
            &self.heads_view(&v)?,
            &self.alpha()?,
        )?;
        let out = self.out_proj.forward(&out.reshape((b, c, h, w))?)?;
        Ok((out, attn))
    }

    pub fn forward(&self, q_src: &Tensor, k_src: &Tensor, v_src: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_attention(q_src, k_src, v_src)?.0)
    }
}

/// Spatial importance: channel-wise mean and max maps, 7×7 conv to one
/// channel, sigmoid. Output `(B, 1, H, W)`.
#[derive(Debug, Clone)]
pub struct SpatialGate {
    conv: Conv2d,
}

impl Detach for SpatialGate {
    fn detached(&self) -> Self {
        Self { conv: self.conv.detached() }
    }
}

impl SpatialGate {
    pub fn new(scope: &mut Scope) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(scope, "conv", ConvSpec::same(2, 1, SPATIAL_GATE_KERNEL))?,
        })
    }

    pub fn param_count() -> usize {
        ConvSpec::same(2, 1, SPATIAL_GATE_KERNEL).param_count()
    }

    /// The `(B, 2, H, W)` stack of channel-mean and channel-max maps.
    pub fn pooled(f: &Tensor) -> Result<Tensor> {
        Ok(Tensor::cat(&[&f.mean_keepdim(1)?, &f.max_keepdim(1)?], 1)?)
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        nn::sigmoid(&self.conv.forward(&Self::pooled(f)?)?)
    }
}

/// Channel importance: global mean and max pooling, each through its own
/// two-layer 1×1 MLP with ReLU, summed, sigmoid. Output `(B, C, 1, 1)`.
#[derive(Debug, Clone)]
pub struct ChannelGate {
    avg_down: Conv2d,
    avg_up: Conv2d,
    max_down: Conv2d,
    max_up: Conv2d,
}

impl Detach for ChannelGate {
    fn detached(&self) -> Self {
        Self {
            avg_down: self.avg_down.detached(),
            avg_up: self.avg_up.detached(),
            max_down: self.max_down.detached(),
            max_up: self.max_up.detached(),
        }
    }
}

impl ChannelGate {
    pub fn hidden(channels: usize) -> usize {
        (channels / CHANNEL_GATE_REDUCTION).max(1)
    }

    pub fn new(scope: &mut Scope, channels: usize) -> Result<Self> {
        let hid = Self::hidden(channels);
        Ok(Self {
            avg_down: Conv2d::new(scope, "avg_down", ConvSpec::same(channels, hid, 1))?,
            avg_up: Conv2d::new(scope, "avg_up", ConvSpec::same(hid, channels, 1))?,
            max_down: Conv2d::new(scope, "max_down", ConvSpec::same(channels, hid, 1))?,
            max_up: Conv2d::new(scope, "max_up", ConvSpec::same(hid, channels, 1))?,
        })
    }

    /// Same layout with all weights and biases zero.
    pub fn zeros(scope: &mut Scope, channels: usize) -> Result<Self> {
        let hid = Self::hidden(channels);
        Ok(Self {
            avg_down: Conv2d::zeros(scope, "avg_down", ConvSpec::same(channels, hid, 1))?,
            avg_up: Conv2d::zeros(scope, "avg_up", ConvSpec::same(hid, channels, 1))?,
            max_down: Conv2d::zeros(scope, "max_down", ConvSpec::same(channels, hid, 1))?,
            max_up: Conv2d::zeros(scope, "max_up", ConvSpec::same(hid, channels, 1))?,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        let hid = Self::hidden(channels);
        2 * (ConvSpec::same(channels, hid, 1).param_count() + ConvSpec::same(hid, channels, 1).param_count())
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = f.dims4()?;
        let flat = f.reshape((b, c, h * w))?;
        let avg = flat.mean_keepdim(2)?.reshape((b, c, 1, 1))?;
        let max = flat.max_keepdim(2)?.reshape((b, c, 1, 1))?;
        let a = self.avg_up.forward(&self.avg_down.forward(&avg)?.relu()?)?;
        let m = self.max_up.forward(&self.max_down.forward(&max)?.relu()?)?;
        nn::sigmoid(&(a + m)?)
    }
}

/// Intermediate tensors of one MGCA pass, for inspection and tests.
#[derive(Debug, Clone)]
pub struct MgcaTrace {
    pub rainy: Tensor,
    pub clear: Tensor,
    pub spatial_gate: Tensor,
    pub channel_gate: Tensor,
    pub fused: Tensor,
    pub output: Tensor,
}

/// One mask-guided cross-attention sub-network.
#[derive(Debug, Clone)]
pub struct Mgca {
    rain_attn: CrossAttention,
    clear_attn: CrossAttention,
    refine_attn: CrossAttention,
    spatial_gate: SpatialGate,
    channel_gate: ChannelGate,
}

impl Detach for Mgca {
    fn detached(&self) -> Self {
        Self {
            rain_attn: self.rain_attn.detached(),
            clear_attn: self.clear_attn.detached(),
            refine_attn: self.refine_attn.detached(),
            spatial_gate: self.spatial_gate.detached(),
            channel_gate: self.channel_gate.detached(),
        }
    }
}

impl Mgca {
    pub fn new(scope: &mut Scope, channels: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            rain_attn: CrossAttention::new(&mut scope.sub("rain_attn"), channels, heads)?,
            clear_attn: CrossAttention::new(&mut scope.sub("clear_attn"), channels, heads)?,
            refine_attn: CrossAttention::new(&mut scope.sub("refine_attn"), channels, heads)?,
            spatial_gate: SpatialGate::new(&mut scope.sub("spatial_gate"))?,
            channel_gate: ChannelGate::new(&mut scope.sub("channel_gate"), channels)?,
        })
    }

    pub fn param_count(channels: usize, heads: usize) -> usize {
        3 * CrossAttention::param_count(channels, heads)
            + SpatialGate::param_count()
            + ChannelGate::param_count(channels)
    }

    pub fn attentions(&self) -> [&CrossAttention; 3] {
        [&self.rain_attn, &self.clear_attn, &self.refine_attn]
    }

    pub fn trace(&self, f: &Tensor, mask: &Tensor) -> Result<MgcaTrace> {
        let (rainy, clear) = split_regions(f, mask)?;
        let rain_ca = self.rain_attn.forward(&rainy, f, f)?;
        let clear_ca = self.clear_attn.forward(&clear, f, f)?;
        let spatial_gate = self.spatial_gate.forward(&rain_ca)?;
        let clear_ca = crate::kernels::mul_plane(&clear_ca, &spatial_gate)?;
        let channel_gate = self.channel_gate.forward(&clear_ca)?;
        let rain_ca = rain_ca.broadcast_mul(&channel_gate)?;
        let fused = (rain_ca + clear_ca)?;
        let output = self.refine_attn.forward(f, &fused, &fused)?;
        Ok(MgcaTrace {
            rainy,
            clear,
            spatial_gate,
            channel_gate,
            fused,
            output,
        })
    }

    /// `(B, C, H, W)` features and `(B, 1, H, W)` mask → refined features of
    /// the same shape.
    pub fn forward(&self, f: &Tensor, mask: &Tensor) -> Result<Tensor> {
        Ok(self.trace(f, mask)?.output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device, Var};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs(t: &Tensor) -> f64 {
        t.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn split_cases() {
        let f = randn(&[1, 4, 5, 5], 1);
        let ones = Tensor::ones((1, 1, 5, 5), DType::F64, &Device::Cpu).unwrap();
        let (r, n) = split_regions(&f, &ones).unwrap();
        assert_eq!(max_abs(&(r - &f).unwrap()), 0.0);
        assert_eq!(max_abs(&n), 0.0);

        let half = (ones.clone() * 0.5).unwrap();
        let (r, n) = split_regions(&f, &half).unwrap();
        assert_eq!(max_abs(&(&r - &n).unwrap()), 0.0);
        assert!(max_abs(&(r - (&f * 0.5).unwrap()).unwrap()) < 1e-15);

        let bad = Tensor::ones((1, 1, 4, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(split_regions(&f, &bad).is_err());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (q, k, v) = (randn(&[2, 2, 3, 16], 1), randn(&[2, 2, 3, 16], 2), randn(&[2, 2, 3, 16], 3));
        let alpha = Tensor::new(&[0.3f64, 2.0], &Device::Cpu).unwrap();
        let (_, attn) = transposed_attention(&q, &k, &v, &alpha).unwrap();
        assert_eq!(attn.dims(), &[2, 2, 3, 3]);
        let sums: Vec<f64> = attn.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn identical_value_rows_pass_through() {
        let (q, k) = (randn(&[1, 2, 4, 10], 4), randn(&[1, 2, 4, 10], 5));
        let row = randn(&[1, 2, 1, 10], 6);
        let v = row.broadcast_as((1, 2, 4, 10)).unwrap().contiguous().unwrap();
        let alpha = Tensor::new(&[1.0f64, 0.5], &Device::Cpu).unwrap();
        let (out, _) = transposed_attention(&q, &k, &v, &alpha).unwrap();
        assert!(max_abs(&(out - v).unwrap()) < 1e-12);
    }

    #[test]
    fn spatial_gate_behaviour() {
        let mut store = ParamStore::new(DType::F64, 2);
        let gate = SpatialGate::new(&mut store.root()).unwrap();
        let c = (Tensor::ones((1, 3, 9, 9), DType::F64, &Device::Cpu).unwrap() * 0.7).unwrap();
        let pooled = SpatialGate::pooled(&c).unwrap();
        let p: Vec<f64> = pooled.flatten_all().unwrap().to_vec1().unwrap();
        assert!(p.iter().all(|v| (v - 0.7).abs() < 1e-15));
        let g = gate.forward(&randn(&[2, 3, 9, 9], 8)).unwrap();
        assert_eq!(g.dims(), &[2, 1, 9, 9]);
        let gv: Vec<f64> = g.flatten_all().unwrap().to_vec1().unwrap();
        assert!(gv.iter().all(|&v| v > 0.0 && v < 1.0));
        // Constant input: the gate is constant away from the zero-padded border.
        let gc = gate.forward(&c).unwrap().squeeze(0).unwrap().squeeze(0).unwrap();
        let inner: f64 = gc.get(4).unwrap().get(4).unwrap().to_scalar().unwrap();
        let same: f64 = gc.get(3).unwrap().get(4).unwrap().to_scalar().unwrap();
        assert!(gc.dims() == [9, 9] && (inner - same).abs() < 1e-15);
    }

    #[test]
    fn doubling_a_location_never_lowers_its_max() {
        let f = randn(&[1, 4, 5, 5], 9).abs().unwrap();
        let before: Vec<f64> = SpatialGate::pooled(&f).unwrap().get(0).unwrap().get(1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mut data: Vec<f64> = f.flatten_all().unwrap().to_vec1().unwrap();
        let loc = 12;
        for c in 0..4 {
            data[c * 25 + loc] *= 2.0;
        }
        let g = Tensor::from_vec(data.clone(), (1, 4, 5, 5), &Device::Cpu).unwrap();
        let after: Vec<f64> = SpatialGate::pooled(&g).unwrap().get(0).unwrap().get(1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        // Brute-force channel max at the doubled location.
        let brute = (0..4).map(|c| data[c * 25 + loc]).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(after[loc], brute);
        assert!(after[loc] >= before[loc]);
    }

    #[test]
    fn zero_channel_gate_is_half() {
        let mut store = ParamStore::new(DType::F64, 0);
        let gate = ChannelGate::zeros(&mut store.root(), 16).unwrap();
        let g = gate.forward(&Tensor::zeros((1, 16, 4, 4), DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(g.dims(), &[1, 16, 1, 1]);
        let v: Vec<f64> = g.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn channel_gate_is_permutation_equivariant() {
        let c = 8;
        let mut store = ParamStore::new(DType::F64, 4);
        let gate = ChannelGate::new(&mut store.root(), c).unwrap();
        let perm: Vec<usize> = vec![3, 0, 7, 1, 6, 2, 5, 4];
        let x = randn(&[1, c, 3, 3], 10);
        let base: Vec<f64> = gate.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();

        // Permute input channels, the input columns of the down projections and
        // the output rows of the up projections.
        let idx = Tensor::new(perm.iter().map(|&p| p as u32).collect::<Vec<_>>(), &Device::Cpu).unwrap();
        let mut store2 = ParamStore::new(DType::F64, 4);
        let permuted = ChannelGate::new(&mut store2.root(), c).unwrap();
        for p in store.params() {
            let t = p.var.as_tensor();
            let new = if p.name.ends_with("down.weight") {
                t.index_select(&idx, 1).unwrap()
            } else if p.name.ends_with("up.weight") || p.name.ends_with("up.bias") {
                t.index_select(&idx, 0).unwrap()
            } else {
                t.clone()
            };
            store2.get(&p.name).unwrap().set(&new).unwrap();
        }
        let px = x.index_select(&idx, 1).unwrap();
        let out: Vec<f64> = permuted.forward(&px).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert!((out[i] - base[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn output_shape_and_mask_sensitivity() {
        let mut store = ParamStore::new(DType::F64, 5);
        let m = Mgca::new(&mut store.root(), 8, 2).unwrap();
        assert_eq!(store.count(), Mgca::param_count(8, 2));
        for s in [4usize, 8] {
            let f = randn(&[2, 8, s, s], 11);
            let mask_a = nn::sigmoid(&randn(&[2, 1, s, s], 12)).unwrap();
            let mask_b = nn::sigmoid(&randn(&[2, 1, s, s], 13)).unwrap();
            let ya = m.forward(&f, &mask_a).unwrap();
            let yb = m.forward(&f, &mask_b).unwrap();
            assert_eq!(ya.dims(), f.dims());
            assert!(max_abs(&(&ya - &yb).unwrap()) > 0.0);
            assert_eq!(max_abs(&(&ya - m.forward(&f, &mask_a).unwrap()).unwrap()), 0.0);
        }
    }

    /// Relative error `‖fd − analytic‖ / ‖fd‖` for one parameter tensor.
    fn fd_check(var: &Var, loss: &dyn Fn() -> f64, analytic: &Tensor, h: f64) -> f64 {
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let an: Vec<f64> = analytic.flatten_all().unwrap().to_vec1().unwrap();
        let shape = var.shape().clone();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..base.len() {
            let eval = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
                loss()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            num += (fd - an[i]).powi(2);
            den += fd.powi(2);
        }
        var.set(&Tensor::from_vec(base, shape, &Device::Cpu).unwrap()).unwrap();
        (num / den.max(1e-30)).sqrt()
    }

    #[test]
    fn alpha_gradient_matches_finite_differences() {
        let mut store = ParamStore::new(DType::F64, 21);
        let ca = CrossAttention::new(&mut store.root(), 4, 2).unwrap();
        let (q, kv) = (randn(&[1, 4, 8, 8], 22), randn(&[1, 4, 8, 8], 23));
        let probe = randn(&[1, 4, 8, 8], 24);
        let loss_t = || (ca.forward(&q, &kv, &kv).unwrap() * &probe).unwrap().sum_all().unwrap();
        let grads = loss_t().backward().unwrap();
        let var = store.get("log_alpha").unwrap();
        // Gradient w.r.t. α itself: dL/dα = dL/dlogα / α.
        let alpha = ca.alpha().unwrap();
        let g_alpha = (grads.get(var.as_tensor()).unwrap() / &alpha).unwrap();
        let a0: Vec<f64> = alpha.to_vec1().unwrap();
        let h = 1e-6;
        for head in 0..2 {
            let eval = |a: f64| {
                let mut la: Vec<f64> = a0.iter().map(|v| v.ln()).collect();
                la[head] = a.ln();
                var.set(&Tensor::new(la, &Device::Cpu).unwrap()).unwrap();
                loss_t().to_scalar::<f64>().unwrap()
            };
            let fd = (eval(a0[head] + h) - eval(a0[head] - h)) / (2.0 * h);
            let an: f64 = g_alpha.get(head).unwrap().to_scalar().unwrap();
            let rel = (fd - an).abs() / fd.abs().max(an.abs());
            assert!(rel <= 1e-4, "head {head}: fd {fd}, analytic {an}");
        }
        var.set(&Tensor::new(a0.iter().map(|v| v.ln()).collect::<Vec<_>>(), &Device::Cpu).unwrap()).unwrap();
    }

    #[test]
    fn full_forward_gradient_matches_finite_differences() {
        let mut store = ParamStore::new(DType::F64, 31);
        let m = Mgca::new(&mut store.root(), 4, 2).unwrap();
        let f = Var::from_tensor(&randn(&[1, 4, 8, 8], 32)).unwrap();
        let mask = nn::sigmoid(&randn(&[1, 1, 8, 8], 33)).unwrap();
        let probe = randn(&[1, 4, 8, 8], 34);
        let loss_t = || (m.forward(f.as_tensor(), &mask).unwrap() * &probe).unwrap().sum_all().unwrap();
        let grads = loss_t().backward().unwrap();
        let loss = || loss_t().to_scalar::<f64>().unwrap();

        let rel = fd_check(&f, &loss, grads.get(f.as_tensor()).unwrap(), 1e-6);
        assert!(rel <= 1e-3, "input: {rel}");
        for p in store.params() {
            let g = grads.get(p.var.as_tensor()).unwrap_or_else(|| panic!("no gradient for {}", p.name));
            let rel = fd_check(&p.var, &loss, g, 1e-6);
            assert!(rel <= 1e-3, "{}: {rel}", p.name);
        }
    }
}
