//! Adapter around a contrastive vision-language encoder.
//!
//! The [`Gateway`] wraps an encoder backend, L2-normalizes embeddings (on by
//! default), caches prompt embeddings and turns image/prompt similarities into
//! softmax scores. Two backends exist: [`StubEncoder`], a deterministic offline
//! stand-in, and a CLIP ViT-B/32 encoder behind the `clip` cargo feature.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_mismatch, Error, Result};
use crate::imaging::Image;

/// Embedding width of the ViT-B/32 encoder.
pub const EMBED_DIM: usize = 512;

/// Environment variable pointing at real encoder weights.
pub const WEIGHTS_ENV: &str = "CLIP_RPN_WEIGHTS";

/// An ordered set of routing prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub name: String,
    pub prompts: Vec<String>,
}

impl PromptSet {
    /// Validates that there are at least two distinct, non-empty prompts.
    pub fn new(name: impl Into<String>, prompts: Vec<String>) -> Result<Self> {
        let set = Self {
            name: name.into(),
            prompts,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "prompt set `{}` has {} prompt(s); at least 2 are required",
                self.name,
                self.prompts.len()
            )));
        }
        for (i, p) in self.prompts.iter().enumerate() {
            if p.trim().is_empty() {
                return Err(Error::InvalidConfig(format!("prompt {i} is empty")));
            }
            if self.prompts[..i].contains(p) {
                return Err(Error::InvalidConfig(format!("prompt {i} is a duplicate")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: Self = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Content hash of the prompt texts (name excluded), hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.prompts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p.as_bytes());
        }
        hex(&h.finalize()[..16])
    }

    /// The three built-in sets; `index` is 1-based.
    pub fn builtin(index: usize) -> Result<Self> {
        let text = match index {
            1 => include_str!("../../../prompts/p1.json"),
            2 => include_str!("../../../prompts/p2.json"),
            3 => include_str!("../../../prompts/p3.json"),
            _ => return Err(Error::InvalidConfig(format!("no built-in prompt set {index}"))),
        };
        Self::from_json(text)
    }

    /// The default routing prompts (set 3, two classes).
    pub fn default_set() -> Self {
        Self::builtin(3).expect("built-in prompt set parses")
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f32>,
    pub modality: Modality,
}

impl Embedding {
    pub fn new(vector: Vec<f32>, modality: Modality) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::OutOfRange {
                what: "embedding",
                detail: "non-finite entry".into(),
            });
        }
        Ok(Self { vector, modality })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(shape_mismatch(self.dim(), other.dim()));
        }
        Ok(self
            .vector
            .iter()
            .zip(&other.vector)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n == 0.0 {
            return self.clone();
        }
        Self {
            vector: self.vector.iter().map(|v| (*v as f64 / n) as f32).collect(),
            modality: self.modality,
        }
    }

    pub fn cosine(&self, other: &Embedding) -> Result<f64> {
        let d = self.dot(other)?;
        Ok(d / (self.norm() * other.norm()).max(f64::MIN_POSITIVE))
    }
}

/// A frozen image/text encoder.
pub trait VisionLanguageEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode_image(&self, img: &Image) -> Result<Embedding>;
    fn encode_text(&self, text: &str) -> Result<Embedding>;
}

/// Offline stand-in encoder.
///
/// Images map through a seeded Gaussian projection of their centred
/// per-channel mean and standard deviation; texts map to a Gaussian vector seeded by
/// a keyed SHA-256 of the prompt. Everything is reproducible bit-for-bit.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    key: u64,
    projection: Vec<[f32; Self::FEATURES]>,
}

impl StubEncoder {
    const FEATURES: usize = 6;
    pub const DEFAULT_KEY: u64 = 0xC11F_5EED;

    pub fn new(key: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let projection = (0..EMBED_DIM)
            .map(|_| {
                let mut row = [0f32; Self::FEATURES];
                for v in &mut row {
                    *v = StandardNormal.sample(&mut rng);
                }
                row
            })
            .collect();
        Self { key, projection }
    }

    /// `2·mean_c − 1` then `4·std_c − 1` for c in r, g, b; both roughly span
    /// `[−1, 1]` on natural images.
    pub fn image_features(img: &Image) -> [f64; Self::FEATURES] {
        let n = (img.height() * img.width()) as f64;
        let mut f = [0f64; Self::FEATURES];
        for c in 0..3 {
            let ch = img.data().index_axis(ndarray::Axis(2), c);
            let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            f[c] = 2.0 * mean - 1.0;
            f[3 + c] = 4.0 * var.sqrt() - 1.0;
        }
        f
    }
}

impl Default for StubEncoder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_KEY)
    }
}

impl VisionLanguageEncoder for StubEncoder {
    fn name(&self) -> &str {
        "stub"
    }

    fn dim(&self) -> usize {
        EMBED_DIM
    }

    fn encode_image(&self, img: &Image) -> Result<Embedding> {
        let f = Self::image_features(img);
        let vector = self
            .projection
            .iter()
            .map(|row| row.iter().zip(&f).map(|(w, x)| *w as f64 * x).sum::<f64>() as f32)
            .collect();
        Embedding::new(vector, Modality::Image)
    }

    fn encode_text(&self, text: &str) -> Result<Embedding> {
        let mut h = Sha256::new();
        h.update(self.key.to_le_bytes());
        h.update(text.as_bytes());
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let vector = (0..EMBED_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
        Embedding::new(vector, Modality::Text)
    }
}

/// An encoder with fixed embeddings, handy for fixtures: every image maps to
/// the embedding registered under its `(h, w)` or to `default_image`.
#[derive(Debug, Clone, Default)]
pub struct FixedEncoder {
    pub default_image: Vec<f32>,
    pub images: HashMap<(usize, usize), Vec<f32>>,
    pub texts: HashMap<String, Vec<f32>>,
}

impl VisionLanguageEncoder for FixedEncoder {
    fn name(&self) -> &str {
        "fixed"
    }

    fn dim(&self) -> usize {
        self.default_image.len()
    }

    fn encode_image(&self, img: &Image) -> Result<Embedding> {
        let v = self.images.get(&img.dims()).unwrap_or(&self.default_image);
        Embedding::new(v.clone(), Modality::Image)
    }

    fn encode_text(&self, text: &str) -> Result<Embedding> {
        let v = self
            .texts
            .get(text)
            .ok_or_else(|| Error::WeightsUnavailable(format!("no fixed embedding for `{text}`")))?;
        Embedding::new(v.clone(), Modality::Text)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Real,
    #[default]
    Stub,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Self::Real),
            "stub" => Ok(Self::Stub),
            other => Err(Error::InvalidConfig(format!("unknown backend `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub backend: Backend,
    /// Directory holding `model.safetensors` and `tokenizer.json` for the real
    /// backend. Falls back to `CLIP_RPN_WEIGHTS`.
    pub weights: Option<PathBuf>,
    pub normalize: bool,
    pub temperature: f64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Stub,
            weights: None,
            normalize: true,
            temperature: 1.0,
        }
    }
}

/// Encoder plus normalization, temperature and a prompt cache.
pub struct Gateway {
    encoder: Box<dyn VisionLanguageEncoder>,
    normalize: bool,
    temperature: f64,
    cache: RwLock<HashMap<String, Embedding>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("encoder", &self.encoder.name())
            .field("normalize", &self.normalize)
            .field("temperature", &self.temperature)
            .finish()
    }
}

impl Gateway {
    pub fn new(encoder: Box<dyn VisionLanguageEncoder>) -> Self {
        Self {
            encoder,
            normalize: true,
            temperature: 1.0,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn stub() -> Self {
        Self::new(Box::new(StubEncoder::default()))
    }

    pub fn with_normalize(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self.cache.get_mut().expect("cache lock").clear();
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature {temperature}")));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn from_config(cfg: &GatewayConfig) -> Result<Self> {
        let encoder: Box<dyn VisionLanguageEncoder> = match cfg.backend {
            Backend::Stub => Box::new(StubEncoder::default()),
            Backend::Real => {
                let dir = cfg
                    .weights
                    .clone()
                    .or_else(|| std::env::var_os(WEIGHTS_ENV).map(PathBuf::from))
                    .ok_or_else(|| {
                        Error::WeightsUnavailable(format!("no weights path given and {WEIGHTS_ENV} is unset"))
                    })?;
                real_encoder(&dir)?
            }
        };
        Self::new(encoder)
            .with_normalize(cfg.normalize)
            .with_temperature(cfg.temperature)
    }

    pub fn encoder_name(&self) -> &str {
        self.encoder.name()
    }

    fn post(&self, e: Embedding) -> Embedding {
        if self.normalize {
            e.normalized()
        } else {
            e
        }
    }

    pub fn encode_image(&self, img: &Image) -> Result<Embedding> {
        Ok(self.post(self.encoder.encode_image(img)?))
    }

    pub fn encode_text(&self, text: &str) -> Result<Embedding> {
        if let Some(e) = self.cache.read().expect("cache lock").get(text) {
            return Ok(e.clone());
        }
        let e = self.post(self.encoder.encode_text(text)?);
        self.cache
            .write()
            .expect("cache lock")
            .insert(text.to_string(), e.clone());
        Ok(e)
    }

    /// One embedding per prompt, in prompt order.
    pub fn encode_prompts(&self, prompts: &PromptSet) -> Result<Vec<Embedding>> {
        prompts.prompts.iter().map(|p| self.encode_text(p)).collect()
    }

    /// Softmax over `img · txt_i / temperature`.
    pub fn match_scores(&self, img_emb: &Embedding, txt_embs: &[Embedding]) -> Result<Vec<f64>> {
        let logits = txt_embs
            .iter()
            .map(|t| Ok(img_emb.dot(t)? / self.temperature))
            .collect::<Result<Vec<_>>>()?;
        Ok(softmax(&logits))
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(feature = "clip")]
fn real_encoder(dir: &Path) -> Result<Box<dyn VisionLanguageEncoder>> {
    Ok(Box::new(crate::clip::ClipEncoder::load(dir)?))
}

#[cfg(not(feature = "clip"))]
fn real_encoder(dir: &Path) -> Result<Box<dyn VisionLanguageEncoder>> {
    Err(Error::WeightsUnavailable(format!(
        "built without the `clip` feature; cannot load {}",
        dir.display()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(prompts: &[&str]) -> PromptSet {
        PromptSet::new("t", prompts.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn prompt_set_validation() {
        assert!(PromptSet::new("x", vec!["only".into()]).is_err());
        assert!(PromptSet::new("x", vec!["a".into(), "a".into()]).is_err());
        assert!(PromptSet::new("x", vec!["a".into(), " ".into()]).is_err());
        for i in 1..=3 {
            let p = PromptSet::builtin(i).unwrap();
            assert_eq!(p.len(), if i == 3 { 2 } else { 3 });
        }
        assert_eq!(PromptSet::default_set(), PromptSet::builtin(3).unwrap());
        assert_ne!(PromptSet::builtin(1).unwrap().hash(), PromptSet::builtin(2).unwrap().hash());
    }

    #[test]
    fn stub_is_deterministic() {
        let g = Gateway::stub();
        let img = crate::dataset::synthetic_scene(16, 16, 5).unwrap();
        let a = g.encode_image(&img).unwrap();
        assert_eq!(a, g.encode_image(&img).unwrap());
        assert_eq!(a.dim(), EMBED_DIM);
        assert!((a.norm() - 1.0).abs() < 1e-6);
        let other = Gateway::stub();
        assert_eq!(a, other.encode_image(&img).unwrap());
    }

    #[test]
    fn stub_embedding_fixture() {
        // Frozen output of the stub for a constant image, unnormalized.
        let img = Image::filled(4, 4, [0.5, 0.25, 0.75]).unwrap();
        let e = StubEncoder::default().encode_image(&img).unwrap();
        let features = StubEncoder::image_features(&img);
        assert_eq!(features, [0.0, -0.5, 0.5, -1.0, -1.0, -1.0]);
        let head: Vec<f32> = e.vector[..4].to_vec();
        let expected = STUB_FIXTURE;
        for (a, b) in head.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{head:?}");
        }
    }

    const STUB_FIXTURE: [f32; 4] = [1.9984384, 2.2806096, -1.5665923, 2.6505485];

    #[test]
    fn prompt_encoding_and_cache() {
        let g = Gateway::stub();
        let p = set(&["rain", "no rain", "haze"]);
        let e = g.encode_prompts(&p).unwrap();
        assert_eq!(e.len(), 3);
        assert!(e.iter().all(|x| x.dim() == EMBED_DIM));
        assert_ne!(e[0], e[1]);
        assert_eq!(e[2], g.encode_text("haze").unwrap());
        let hit = g.encode_text("rain").unwrap();
        assert_eq!(hit.vector, e[0].vector);
    }

    #[test]
    fn softmax_reference_values() {
        let s = softmax(&[2.0, 0.0, 0.0]);
        let expected = [0.786_986_374_1, 0.106_506_812_9, 0.106_506_812_9];
        for (a, b) in s.iter().zip(expected) {
            assert!((a - b).abs() < 1e-5);
        }
        let u = softmax(&[0.3, 0.3, 0.3, 0.3]);
        assert!(u.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let shifted = softmax(&[102.0, 100.0, 100.0]);
        for (a, b) in s.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn match_scores_dimension_mismatch() {
        let g = Gateway::stub();
        let a = Embedding::new(vec![1.0; 4], Modality::Image).unwrap();
        let b = Embedding::new(vec![1.0; 3], Modality::Text).unwrap();
        assert!(matches!(g.match_scores(&a, &[b]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn real_backend_without_weights_errors() {
        let cfg = GatewayConfig {
            backend: Backend::Real,
            weights: Some("/nonexistent/clip".into()),
            ..Default::default()
        };
        assert!(matches!(Gateway::from_config(&cfg), Err(Error::WeightsUnavailable(_))));
    }

    proptest::proptest! {
        #[test]
        fn scores_form_a_distribution(logits in proptest::collection::vec(-50.0f64..50.0, 2..12), shift in -100.0f64..100.0) {
            let s = softmax(&logits);
            proptest::prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            proptest::prop_assert!(s.iter().all(|&v| v > 0.0 && v <= 1.0));
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let argmax = |v: &[f64]| crate::rpn::argmax_lowest(v);
            proptest::prop_assert_eq!(argmax(&softmax(&shifted)), argmax(&logits));
            proptest::prop_assert_eq!(argmax(&s), argmax(&logits));
        }
    }
}
