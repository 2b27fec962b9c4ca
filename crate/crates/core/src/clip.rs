//! CLIP image and text towers for the `real` gateway backend.
//!
//! Loads a Hugging Face CLIP checkpoint directory holding `model.safetensors`
//! and `tokenizer.json`. Layer counts and widths are read from the tensor
//! shapes, so ViT-B/32, B/16 and L/14 all load. Attention heads are assumed to
//! be 64 wide, as in every released CLIP.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{layer_norm, linear, linear_no_bias, LayerNorm, LayerNormConfig, Linear, VarBuilder};
use image::{imageops, ImageBuffer, Rgb};
use tokenizers::Tokenizer;

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::vlm::{Embedding, Modality, VisionLanguageEncoder};

const HEAD_DIM: usize = 64;
const MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

fn unavailable(e: impl std::fmt::Display) -> Error {
    Error::WeightsUnavailable(e.to_string())
}

fn dims(tensors: &HashMap<String, Tensor>, name: &str) -> Result<Vec<usize>> {
    tensors
        .get(name)
        .map(|t| t.dims().to_vec())
        .ok_or_else(|| unavailable(format!("tensor `{name}` is missing")))
}

fn count_layers(tensors: &HashMap<String, Tensor>, prefix: &str) -> usize {
    (0..)
        .take_while(|i| tensors.contains_key(&format!("{prefix}.encoder.layers.{i}.layer_norm1.weight")))
        .count()
}

fn quick_gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    x * candle_nn::ops::sigmoid(&(x * 1.702)?)?
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn new(vb: VarBuilder, width: usize) -> candle_core::Result<Self> {
        Ok(Self {
            q: linear(width, width, vb.pp("q_proj"))?,
            k: linear(width, width, vb.pp("k_proj"))?,
            v: linear(width, width, vb.pp("v_proj"))?,
            out: linear(width, width, vb.pp("out_proj"))?,
            heads: width / HEAD_DIM,
        })
    }

    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let split = |y: Tensor| y.reshape((b, t, self.heads, HEAD_DIM))?.transpose(1, 2)?.contiguous();
        let q = (split(self.q.forward(x)?)? * (HEAD_DIM as f64).powf(-0.5))?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let mut scores = q.matmul(&k.t()?)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let y = candle_nn::ops::softmax_last_dim(&scores)?.matmul(&v)?;
        self.out.forward(&y.transpose(1, 2)?.reshape((b, t, c))?)
    }
}

struct Layer {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Layer {
    fn new(vb: VarBuilder, width: usize, hidden: usize) -> candle_core::Result<Self> {
        let ln = LayerNormConfig::from(1e-5);
        Ok(Self {
            norm1: layer_norm(width, ln, vb.pp("layer_norm1"))?,
            attn: Attention::new(vb.pp("self_attn"), width)?,
            norm2: layer_norm(width, ln, vb.pp("layer_norm2"))?,
            fc1: linear(width, hidden, vb.pp("mlp.fc1"))?,
            fc2: linear(hidden, width, vb.pp("mlp.fc2"))?,
        })
    }

    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, mask)?)?;
        let h = quick_gelu(&self.fc1.forward(&self.norm2.forward(&x)?)?)?;
        &x + self.fc2.forward(&h)?
    }
}

struct Encoder {
    layers: Vec<Layer>,
}

impl Encoder {
    fn new(vb: VarBuilder, n: usize, width: usize, hidden: usize) -> candle_core::Result<Self> {
        let layers = (0..n)
            .map(|i| Layer::new(vb.pp(format!("layers.{i}")), width, hidden))
            .collect::<candle_core::Result<_>>()?;
        Ok(Self { layers })
    }

    fn forward(&self, mut x: Tensor, mask: Option<&Tensor>) -> candle_core::Result<Tensor> {
        for layer in &self.layers {
            x = layer.forward(&x, mask)?;
        }
        Ok(x)
    }
}

/// A pretrained CLIP model with its tokenizer.
pub struct ClipEncoder {
    tokenizer: Tokenizer,
    token_embedding: Tensor,
    text_positions: Tensor,
    text_encoder: Encoder,
    text_norm: LayerNorm,
    text_projection: Linear,
    patch: candle_nn::Conv2d,
    image_size: usize,
    class_embedding: Tensor,
    vision_positions: Tensor,
    pre_norm: LayerNorm,
    vision_encoder: Encoder,
    post_norm: LayerNorm,
    visual_projection: Linear,
    dim: usize,
    name: String,
}

impl ClipEncoder {
    pub fn load(dir: &Path) -> Result<Self> {
        let weights = dir.join("model.safetensors");
        let tokenizer = dir.join("tokenizer.json");
        for f in [&weights, &tokenizer] {
            if !f.is_file() {
                return Err(unavailable(format!("{} not found", f.display())));
            }
        }
        let tokenizer = Tokenizer::from_file(&tokenizer).map_err(unavailable)?;
        let tensors = candle_core::safetensors::load(&weights, &Device::Cpu)?;

        let [vw, _, ps, _] = dims(&tensors, "vision_model.embeddings.patch_embedding.weight")?[..] else {
            return Err(unavailable("patch embedding is not 4-d"));
        };
        let n_pos = dims(&tensors, "vision_model.embeddings.position_embedding.weight")?[0];
        let grid = ((n_pos - 1) as f64).sqrt().round() as usize;
        let vh = dims(&tensors, "vision_model.encoder.layers.0.mlp.fc1.weight")?[0];
        let [vocab, tw] = dims(&tensors, "text_model.embeddings.token_embedding.weight")?[..] else {
            return Err(unavailable("token embedding is not 2-d"));
        };
        let th = dims(&tensors, "text_model.encoder.layers.0.mlp.fc1.weight")?[0];
        let max_len = dims(&tensors, "text_model.embeddings.position_embedding.weight")?[0];
        let dim = dims(&tensors, "visual_projection.weight")?[0];
        let (vl, tl) = (count_layers(&tensors, "vision_model"), count_layers(&tensors, "text_model"));

        let vb = VarBuilder::from_tensors(tensors, DType::F32, &Device::Cpu);
        let ln = LayerNormConfig::from(1e-5);
        let (v, t) = (vb.pp("vision_model"), vb.pp("text_model"));
        let patch_cfg = candle_nn::Conv2dConfig {
            stride: ps,
            ..Default::default()
        };
        Ok(Self {
            tokenizer,
            token_embedding: t.get((vocab, tw), "embeddings.token_embedding.weight")?,
            text_positions: t.get((max_len, tw), "embeddings.position_embedding.weight")?,
            text_encoder: Encoder::new(t.pp("encoder"), tl, tw, th)?,
            text_norm: layer_norm(tw, ln, t.pp("final_layer_norm"))?,
            text_projection: linear_no_bias(tw, dim, vb.pp("text_projection"))?,
            patch: candle_nn::conv2d_no_bias(3, vw, ps, patch_cfg, v.pp("embeddings.patch_embedding"))?,
            image_size: grid * ps,
            class_embedding: v.get(vw, "embeddings.class_embedding")?,
            vision_positions: v.get((n_pos, vw), "embeddings.position_embedding.weight")?,
            pre_norm: layer_norm(vw, ln, v.pp("pre_layrnorm"))?,
            vision_encoder: Encoder::new(v.pp("encoder"), vl, vw, vh)?,
            post_norm: layer_norm(vw, ln, v.pp("post_layernorm"))?,
            visual_projection: linear_no_bias(vw, dim, vb.pp("visual_projection"))?,
            dim,
            name: format!("clip-vit-{}px/{ps}", grid * ps),
        })
    }

    /// Shorter side resized to the model resolution (Catmull-Rom), centre
    /// crop, per-channel standardization; returns `(1, 3, S, S)`.
    fn preprocess(&self, img: &Image) -> Result<Tensor> {
        let s = self.image_size;
        let (h, w) = img.dims();
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Rgb(std::array::from_fn(|c| img.get(y as usize, x as usize, c)))
            });
        let scale = s as f64 / h.min(w) as f64;
        let (nh, nw) = (
            ((h as f64 * scale).round() as usize).max(s),
            ((w as f64 * scale).round() as usize).max(s),
        );
        let resized = imageops::resize(&buf, nw as u32, nh as u32, imageops::FilterType::CatmullRom);
        let (top, left) = ((nh - s) / 2, (nw - s) / 2);
        let mut data = vec![0f32; 3 * s * s];
        for y in 0..s {
            for x in 0..s {
                let p = resized.get_pixel((left + x) as u32, (top + y) as u32);
                for c in 0..3 {
                    data[c * s * s + y * s + x] = (p[c] - MEAN[c]) / STD[c];
                }
            }
        }
        Ok(Tensor::from_vec(data, (1, 3, s, s), &Device::Cpu)?)
    }

    fn embed_image(&self, img: &Image) -> candle_core::Result<Tensor> {
        let x = self.preprocess(img).map_err(candle_core::Error::wrap)?;
        let patches = self.patch.forward(&x)?.flatten_from(2)?.transpose(1, 2)?;
        let cls = self.class_embedding.reshape((1, 1, ()))?;
        let tokens = Tensor::cat(&[&cls, &patches], 1)?.broadcast_add(&self.vision_positions)?;
        let h = self.vision_encoder.forward(self.pre_norm.forward(&tokens)?, None)?;
        let pooled = self.post_norm.forward(&h.narrow(1, 0, 1)?.squeeze(1)?)?;
        self.visual_projection.forward(&pooled)?.squeeze(0)
    }

    fn embed_text(&self, text: &str) -> Result<Tensor> {
        let enc = self.tokenizer.encode(text, true).map_err(unavailable)?;
        let max = self.text_positions.dim(0)?;
        let mut ids = enc.get_ids().to_vec();
        if ids.len() > max {
            let eos = *ids.last().unwrap_or(&0);
            ids.truncate(max);
            ids[max - 1] = eos;
        }
        let t = ids.len();
        let tokens = Tensor::new(ids.as_slice(), &Device::Cpu)?;
        let x = self
            .token_embedding
            .index_select(&tokens, 0)?
            .add(&self.text_positions.narrow(0, 0, t)?)?
            .unsqueeze(0)?;
        let causal: Vec<f32> = (0..t * t)
            .map(|i| if i % t > i / t { f32::NEG_INFINITY } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(causal, (t, t), &Device::Cpu)?;
        let h = self.text_norm.forward(&self.text_encoder.forward(x, Some(&mask))?)?;
        Ok(self.text_projection.forward(&h.narrow(1, t - 1, 1)?.squeeze(1)?)?.squeeze(0)?)
    }
}

impl VisionLanguageEncoder for ClipEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_image(&self, img: &Image) -> Result<Embedding> {
        Embedding::new(self.embed_image(img)?.to_vec1()?, Modality::Image)
    }

    fn encode_text(&self, text: &str) -> Result<Embedding> {
        Embedding::new(self.embed_text(text)?.to_vec1()?, Modality::Text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOKENIZER: &str = r#"{"version": "1.0", "truncation": null, "padding": null, "added_tokens": [],
        "normalizer": null, "pre_tokenizer": {"type": "Whitespace"}, "post_processor": null, "decoder": null,
        "model": {"type": "WordLevel", "vocab": {"<unk>": 0, "a": 1, "rainy": 2, "clear": 3, "photo": 4},
        "unk_token": "<unk>"}}"#;

    fn random_checkpoint(dir: &Path) {
        let (w, hidden, dim) = (64, 128, 16);
        let mut t = HashMap::new();
        let mut put = |name: String, shape: &[usize]| {
            t.insert(name, Tensor::randn(0f32, 0.05, shape, &Device::Cpu).unwrap());
        };
        for tower in ["vision_model", "text_model"] {
            let l = format!("{tower}.encoder.layers.0");
            for p in ["q_proj", "k_proj", "v_proj", "out_proj"] {
                put(format!("{l}.self_attn.{p}.weight"), &[w, w]);
                put(format!("{l}.self_attn.{p}.bias"), &[w]);
            }
            for n in ["layer_norm1", "layer_norm2"] {
                put(format!("{l}.{n}.weight"), &[w]);
                put(format!("{l}.{n}.bias"), &[w]);
            }
            put(format!("{l}.mlp.fc1.weight"), &[hidden, w]);
            put(format!("{l}.mlp.fc1.bias"), &[hidden]);
            put(format!("{l}.mlp.fc2.weight"), &[w, hidden]);
            put(format!("{l}.mlp.fc2.bias"), &[w]);
        }
        for n in ["vision_model.pre_layrnorm", "vision_model.post_layernorm", "text_model.final_layer_norm"] {
            put(format!("{n}.weight"), &[w]);
            put(format!("{n}.bias"), &[w]);
        }
        put("vision_model.embeddings.patch_embedding.weight".into(), &[w, 3, 4, 4]);
        put("vision_model.embeddings.class_embedding".into(), &[w]);
        put("vision_model.embeddings.position_embedding.weight".into(), &[5, w]);
        put("text_model.embeddings.token_embedding.weight".into(), &[5, w]);
        put("text_model.embeddings.position_embedding.weight".into(), &[8, w]);
        put("visual_projection.weight".into(), &[dim, w]);
        put("text_projection.weight".into(), &[dim, w]);
        candle_core::safetensors::save(&t, dir.join("model.safetensors")).unwrap();
        std::fs::write(dir.join("tokenizer.json"), TOKENIZER).unwrap();
    }

    #[test]
    fn missing_weights_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ClipEncoder::load(dir.path()), Err(Error::WeightsUnavailable(_))));
    }

    #[test]
    fn random_weights_produce_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        random_checkpoint(dir.path());
        let enc = ClipEncoder::load(dir.path()).unwrap();
        assert_eq!((enc.dim(), enc.image_size), (16, 8));
        let img = Image::filled(12, 20, [0.3, 0.5, 0.7]).unwrap();
        let a = enc.encode_image(&img).unwrap();
        assert_eq!(a.dim(), 16);
        assert_eq!(a, enc.encode_image(&img).unwrap());
        let t = enc.encode_text("a rainy photo").unwrap();
        assert_eq!(t.dim(), 16);
        assert_ne!(t, enc.encode_text("a clear photo").unwrap());
        let long = vec!["rainy"; 20].join(" ");
        assert_eq!(enc.encode_text(&long).unwrap().dim(), 16);
    }
}
