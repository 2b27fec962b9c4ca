//! The four-level encoder-decoder that hosts mask prediction and the routed
//! MGCA sub-networks, and predicts a residual added to the rainy input.
//!
//! Level 1 runs at full resolution; each deeper level halves the spatial size.
//! On the way back up, every decoder level (3, 2, 1) predicts a rain mask and
//! refines its features with the MGCA sub-network chosen by the route.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::RainMask;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::mgca::Mgca;
use crate::nn::{self, ChannelNorm, Conv2d, ConvSpec, Detach, ParamStore, Scope};
use crate::rpn::MaskPredictor;

/// Number of encoder/decoder levels.
pub const LEVELS: usize = 4;

/// Levels that carry a mask predictor and MGCA sub-networks.
pub const MGCA_LEVELS: usize = 3;

/// Input sides must be multiples of this (three halvings).
pub const DIVISOR: usize = 1 << (LEVELS - 1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub level_channels: Vec<usize>,
    pub blocks_per_level: Vec<usize>,
    pub heads_per_level: Vec<usize>,
    /// Attention heads of the MGCA sub-networks at levels 1, 2, 3.
    pub mgca_heads: Vec<usize>,
    pub n_subnets: usize,
    /// Hidden width of the block MLPs as a multiple of the level width.
    pub mlp_ratio: usize,
    /// Upper bound on the side of the square self-attention windows.
    pub max_window: usize,
}

impl BackboneConfig {
    /// Small enough to train on a laptop CPU.
    pub fn desk(n_subnets: usize) -> Self {
        Self {
            level_channels: vec![32, 64, 128, 256],
            blocks_per_level: vec![2, 2, 2, 2],
            heads_per_level: vec![1, 2, 4, 8],
            mgca_heads: vec![1, 2, 4],
            n_subnets,
            mlp_ratio: 2,
            max_window: 8,
        }
    }

    /// Full-size model.
    pub fn full(n_subnets: usize) -> Self {
        Self {
            level_channels: vec![64, 128, 256, 512],
            blocks_per_level: vec![4, 6, 8, 9],
            heads_per_level: vec![1, 2, 4, 8],
            mgca_heads: vec![1, 2, 4],
            n_subnets,
            mlp_ratio: 2,
            max_window: 8,
        }
    }

    /// Tiny widths for fast tests.
    pub fn toy(n_subnets: usize) -> Self {
        Self {
            level_channels: vec![8, 16, 32, 64],
            blocks_per_level: vec![1, 1, 1, 1],
            heads_per_level: vec![1, 2, 4, 8],
            mgca_heads: vec![1, 2, 4],
            n_subnets,
            mlp_ratio: 2,
            max_window: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.level_channels.len() != LEVELS {
            return bad(format!("expected {LEVELS} levels, got {}", self.level_channels.len()));
        }
        if self.blocks_per_level.len() != LEVELS || self.heads_per_level.len() != LEVELS {
            return bad("blocks_per_level and heads_per_level need one entry per level".into());
        }
        if self.mgca_heads.len() != MGCA_LEVELS {
            return bad(format!("mgca_heads needs {MGCA_LEVELS} entries"));
        }
        if self.level_channels.windows(2).any(|w| w[1] < w[0]) || self.level_channels[0] == 0 {
            return bad("channels must be positive and non-decreasing with depth".into());
        }
        for (k, (&c, &h)) in self.level_channels.iter().zip(&self.heads_per_level).enumerate() {
            if h == 0 || c % h != 0 {
                return bad(format!("level {} width {c} not divisible into {h} heads", k + 1));
            }
        }
        for (k, &h) in self.mgca_heads.iter().enumerate() {
            if h == 0 || self.level_channels[k] % h != 0 {
                return bad(format!("level {} width not divisible into {h} MGCA heads", k + 1));
            }
        }
        if self.n_subnets == 0 {
            return bad("n_subnets must be at least 1".into());
        }
        if self.mlp_ratio == 0 || self.max_window == 0 {
            return bad("mlp_ratio and max_window must be positive".into());
        }
        Ok(())
    }

    /// Short hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex16(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Learnable scalars of a model built from this config.
    pub fn param_count(&self, ablation: Ablation) -> usize {
        let c = &self.level_channels;
        let mut n = ConvSpec::same(3, c[0], 3).param_count() + ConvSpec::same(c[0], 3, 3).param_count();
        for k in 0..LEVELS {
            n += self.blocks_per_level[k] * Block::param_count(c[k], self.mlp_ratio);
        }
        for k in 0..LEVELS - 1 {
            n += down_spec(c[k], c[k + 1]).param_count();
            n += ConvSpec::same(c[k + 1], 4 * c[k], 1).param_count();
            n += ConvSpec::same(2 * c[k], c[k], 1).param_count();
            n += self.blocks_per_level[k] * Block::param_count(c[k], self.mlp_ratio);
            if ablation.mgca_on {
                n += MaskPredictor::param_count(c[k], mask_hidden(c[k]));
                n += self.n_subnets * Mgca::param_count(c[k], self.mgca_heads[k]);
            }
        }
        n
    }
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Route by prompt matching; when off every image goes to sub-network 0.
    pub rpn_on: bool,
    /// Mask prediction and MGCA; when off the decoder skips both.
    pub mgca_on: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            rpn_on: true,
            mgca_on: true,
        }
    }
}

pub(crate) fn hex16(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..16].iter().map(|b| format!("{b:02x}")).collect()
}

fn down_spec(c_in: usize, c_out: usize) -> ConvSpec {
    ConvSpec::same(c_in, c_out, 2).strided(2, 0)
}

fn mask_hidden(c: usize) -> usize {
    (c / 2).max(4)
}

/// Largest power of two not above `max` that divides both sides.
pub fn window_size(h: usize, w: usize, max: usize) -> usize {
    let mut win = 1;
    while win * 2 <= max && h % (win * 2) == 0 && w % (win * 2) == 0 {
        win *= 2;
    }
    win
}

/// Pre-norm transformer block: windowed multi-head self-attention and a
/// pointwise MLP, both residual.
#[derive(Debug, Clone)]
struct Block {
    norm1: ChannelNorm,
    qkv: Conv2d,
    proj: Conv2d,
    norm2: ChannelNorm,
    fc1: Conv2d,
    fc2: Conv2d,
    heads: usize,
    max_window: usize,
}

impl Detach for Block {
    fn detached(&self) -> Self {
        Self {
            norm1: self.norm1.detached(),
            qkv: self.qkv.detached(),
            proj: self.proj.detached(),
            norm2: self.norm2.detached(),
            fc1: self.fc1.detached(),
            fc2: self.fc2.detached(),
            ..*self
        }
    }
}

impl Block {
    fn new(scope: &mut Scope, c: usize, heads: usize, mlp_ratio: usize, max_window: usize) -> Result<Self> {
        Ok(Self {
            norm1: ChannelNorm::new(scope, "norm1", c)?,
            qkv: Conv2d::new(scope, "qkv", ConvSpec::same(c, 3 * c, 1))?,
            proj: Conv2d::new(scope, "proj", ConvSpec::same(c, c, 1))?,
            norm2: ChannelNorm::new(scope, "norm2", c)?,
            fc1: Conv2d::new(scope, "fc1", ConvSpec::same(c, mlp_ratio * c, 1))?,
            fc2: Conv2d::new(scope, "fc2", ConvSpec::same(mlp_ratio * c, c, 1))?,
            heads,
            max_window,
        })
    }

    fn param_count(c: usize, mlp_ratio: usize) -> usize {
        2 * ChannelNorm::param_count(c)
            + ConvSpec::same(c, 3 * c, 1).param_count()
            + ConvSpec::same(c, c, 1).param_count()
            + ConvSpec::same(c, mlp_ratio * c, 1).param_count()
            + ConvSpec::same(mlp_ratio * c, c, 1).param_count()
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let win = window_size(h, w, self.max_window);
        let (nh, nw, heads) = (h / win, w / win, self.heads);
        let ch = c / heads;
        let windows = b * nh * nw;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape(&[b, 3, heads, ch, nh, win, nw, win][..])?
            .permute(&[1, 0, 4, 6, 2, 5, 7, 3][..])?
            .contiguous()?
            .reshape((3, windows, heads, win * win, ch))?;
        let (q, k, v) = (qkv.get(0)?, qkv.get(1)?, qkv.get(2)?);
        let scale = 1.0 / (ch as f64).sqrt();
        let attn = nn::softmax_last(&(q.matmul(&k.t()?.contiguous()?)? * scale)?)?;
        let out = attn
            .matmul(&v)?
            .reshape(&[b, nh, nw, heads, win, win, ch][..])?
            .permute(&[0, 3, 6, 1, 4, 2, 5][..])?
            .contiguous()?
            .reshape((b, c, h, w))?;
        self.proj.forward(&out)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attention(&self.norm1.forward(x)?)?)?;
        let hidden = crate::kernels::gelu(&self.fc1.forward(&self.norm2.forward(&x)?)?)?;
        let m = self.fc2.forward(&hidden)?;
        Ok((x + m)?)
    }
}

/// `(B, 4C, H, W)` → `(B, C, 2H, 2W)`.
pub fn pixel_shuffle(x: &Tensor) -> Result<Tensor> {
    let (b, c4, h, w) = x.dims4()?;
    let c = c4 / 4;
    Ok(x.reshape(&[b, c, 2, 2, h, w][..])?
        .permute(&[0, 1, 4, 2, 5, 3][..])?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

#[derive(Debug, Clone)]
struct MgcaLevel {
    predictor: MaskPredictor,
    subnets: Vec<Mgca>,
}

impl Detach for MgcaLevel {
    fn detached(&self) -> Self {
        Self {
            predictor: self.predictor.detached(),
            subnets: self.subnets.detached(),
        }
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `img + residual`, not clamped.
    pub output: Tensor,
    /// `(B, 1, H/2^k, W/2^k)` mask predictions for k = 0, 1, 2; empty when MGCA
    /// is ablated.
    pub masks: Vec<Tensor>,
}

/// Learnable parameters plus the module graph that uses them.
#[derive(Debug)]
pub struct Model {
    config: BackboneConfig,
    ablation: Ablation,
    store: ParamStore,
    net: Network,
}

/// The module graph, without the parameter registry.
#[derive(Debug, Clone)]
struct Network {
    embed: Conv2d,
    encoder: Vec<Vec<Block>>,
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    reduce: Vec<Conv2d>,
    decoder: Vec<Vec<Block>>,
    mgca: Vec<MgcaLevel>,
    head: Conv2d,
}

impl Model {
    /// Builds a model with seeded initial weights. The output head starts at
    /// zero so the untrained model is the identity.
    pub fn new(config: &BackboneConfig, ablation: Ablation, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let c = config.level_channels.clone();
        let (embed, encoder, down, up, reduce, decoder, mgca, head) = {
            let mut root = store.root();
            let embed = Conv2d::new(&mut root, "embed", ConvSpec::same(3, c[0], 3))?;
            let blocks = |scope: &mut Scope, name: String, k: usize| -> Result<Vec<Block>> {
                let mut s = scope.sub(name);
                (0..config.blocks_per_level[k])
                    .map(|i| {
                        Block::new(
                            &mut s.sub(format!("b{i}")),
                            c[k],
                            config.heads_per_level[k],
                            config.mlp_ratio,
                            config.max_window,
                        )
                    })
                    .collect()
            };
            let mut encoder = Vec::new();
            let mut down = Vec::new();
            for k in 0..LEVELS {
                encoder.push(blocks(&mut root, format!("enc{}", k + 1), k)?);
                if k + 1 < LEVELS {
                    down.push(Conv2d::new(&mut root, &format!("down{}", k + 1), down_spec(c[k], c[k + 1]))?);
                }
            }
            let (mut up, mut reduce, mut decoder, mut mgca) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for k in 0..LEVELS - 1 {
                let l = k + 1;
                up.push(Conv2d::new(&mut root, &format!("up{l}"), ConvSpec::same(c[k + 1], 4 * c[k], 1))?);
                reduce.push(Conv2d::new(&mut root, &format!("reduce{l}"), ConvSpec::same(2 * c[k], c[k], 1))?);
                decoder.push(blocks(&mut root, format!("dec{l}"), k)?);
                if ablation.mgca_on {
                    let predictor = MaskPredictor::new(&mut root.sub(format!("mask{l}")), c[k], mask_hidden(c[k]))?;
                    let subnets = (0..config.n_subnets)
                        .map(|s| Mgca::new(&mut root.sub(subnet_prefix(l, s)), c[k], config.mgca_heads[k]))
                        .collect::<Result<_>>()?;
                    mgca.push(MgcaLevel { predictor, subnets });
                }
            }
            let head = Conv2d::zeros(&mut root, "head", ConvSpec::same(c[0], 3, 3))?;
            (embed, encoder, down, up, reduce, decoder, mgca, head)
        };
        Ok(Self {
            config: config.clone(),
            ablation,
            store,
            net: Network {
                embed,
                encoder,
                down,
                up,
                reduce,
                decoder,
                mgca,
                head,
            },
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Exact number of learnable scalars.
    pub fn count_params(&self) -> usize {
        self.store.count()
    }

    /// Digest of the config and ablation switches.
    pub fn config_hash(&self) -> String {
        let v = serde_json::json!({ "backbone": self.config, "ablation": self.ablation });
        hex16(&serde_json::to_vec(&v).expect("config serializes"))
    }

    /// The sub-network a route index actually uses.
    pub fn effective_route(&self, route: usize) -> usize {
        if self.ablation.rpn_on {
            route
        } else {
            0
        }
    }

    /// Validates an input batch and returns the effective route.
    fn check_input(&self, x: &Tensor, route: usize) -> Result<usize> {
        if route >= self.config.n_subnets {
            return Err(Error::InvalidRoute {
                index: route,
                n_subnets: self.config.n_subnets,
            });
        }
        let route = self.effective_route(route);
        let (_, ch, h, w) = x.dims4()?;
        if ch != 3 {
            return Err(crate::error::shape_mismatch(3, ch));
        }
        for (what, v) in [("input height", h), ("input width", w)] {
            if v % DIVISOR != 0 {
                return Err(Error::NotDivisible {
                    what: what.into(),
                    value: v,
                    factor: DIVISOR,
                });
            }
        }
        Ok(route)
    }

    /// `(B, 3, H, W)` images → residual-corrected output and per-level masks.
    pub fn forward(&self, x: &Tensor, route: usize) -> Result<ForwardOutput> {
        let route = self.check_input(x, route)?;
        self.net.forward(x, route)
    }

    /// Same as [`Model::forward`] but records no autograd graph, so memory
    /// stays flat in the image size.
    pub fn infer(&self, x: &Tensor, route: usize) -> Result<ForwardOutput> {
        let route = self.check_input(x, route)?;
        self.net.detached().forward(x, route)
    }

    /// Derains one image of any size: reflect-pads to a multiple of 8, runs
    /// the network, clamps to `[0, 1]` and crops back. Masks are cropped to
    /// the matching region at their own resolution.
    pub fn derain(&self, img: &Image, route: usize) -> Result<(Image, Vec<RainMask>)> {
        let (h, w) = img.dims();
        let padded = img.reflect_pad_to_multiple(DIVISOR)?;
        let x = nn::images_to_tensor(&[&padded], self.dtype(), &Device::Cpu)?;
        let out = self.infer(&x, route)?;
        let y = out.output.clamp(0.0, 1.0)?;
        let y = y.narrow(2, 0, h)?.narrow(3, 0, w)?;
        let restored = nn::tensor_to_image(&y, 0)?;
        let masks = out
            .masks
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let f = 1 << k;
                let m = m.narrow(2, 0, h.div_ceil(f))?.narrow(3, 0, w.div_ceil(f))?;
                Ok(RainMask::predicted(nn::tensor_to_mask(&m, 0)?, k))
            })
            .collect::<Result<_>>()?;
        Ok((restored, masks))
    }
}

impl Detach for Network {
    fn detached(&self) -> Self {
        Self {
            embed: self.embed.detached(),
            encoder: self.encoder.detached(),
            down: self.down.detached(),
            up: self.up.detached(),
            reduce: self.reduce.detached(),
            decoder: self.decoder.detached(),
            mgca: self.mgca.detached(),
            head: self.head.detached(),
        }
    }
}

impl Network {
    fn forward(&self, x: &Tensor, route: usize) -> Result<ForwardOutput> {
        let mut f = self.embed.forward(x)?;
        let mut skips = Vec::with_capacity(LEVELS - 1);
        for k in 0..LEVELS {
            for block in &self.encoder[k] {
                f = block.forward(&f)?;
            }
            if k + 1 < LEVELS {
                skips.push(f.clone());
                f = self.down[k].forward(&f)?;
            }
        }
        let mut masks = Vec::new();
        for k in (0..LEVELS - 1).rev() {
            f = pixel_shuffle(&self.up[k].forward(&f)?)?;
            f = self.reduce[k].forward(&Tensor::cat(&[&f, &skips[k]], 1)?)?;
            for block in &self.decoder[k] {
                f = block.forward(&f)?;
            }
            if let Some(level) = self.mgca.get(k) {
                let mask = level.predictor.forward(&f)?;
                f = (&f + level.subnets[route].forward(&f, &mask)?)?;
                masks.push(mask);
            }
        }
        masks.reverse();
        let output = (x + self.head.forward(&f)?)?;
        Ok(ForwardOutput { output, masks })
    }
}

/// Parameter-name prefix of sub-network `s` at MGCA level `level` (1-based).
pub fn subnet_prefix(level: usize, s: usize) -> String {
    format!("mgca{level}.s{s}")
}

/// Parameter-name prefix of the mask predictor at `level` (1-based).
pub fn mask_prefix(level: usize) -> String {
    format!("mask{level}")
}
