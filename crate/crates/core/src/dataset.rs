//! Paired rainy/clean data: manifests, ground-truth rain masks and a
//! synthetic streak generator.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::imaging::{CropWindow, Flips, Image};

/// Environment variable naming the default dataset root.
pub const DATA_ROOT_ENV: &str = "CLIP_RPN_DATA_ROOT";

/// Default ground-truth mask threshold on the channel-mean absolute difference.
pub const MASK_THRESHOLD: f32 = 0.1;

/// A rainy image and its clean reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub rainy: Image,
    pub clean: Image,
    pub id: String,
}

impl ImagePair {
    pub fn new(rainy: Image, clean: Image, id: impl Into<String>) -> Result<Self> {
        if rainy.dims() != clean.dims() {
            return Err(shape_mismatch(rainy.dims(), clean.dims()));
        }
        Ok(Self {
            rainy,
            clean,
            id: id.into(),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.rainy.dims()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Rain100l,
    Rain100h,
    Rain800,
    Mixed,
    Synthetic,
}

impl SourceTag {
    /// Best-effort guess from a directory name; unknown names count as synthetic.
    pub fn from_name(name: &str) -> Self {
        match name.to_ascii_lowercase().as_str() {
            "rain100l" => Self::Rain100l,
            "rain100h" => Self::Rain100h,
            "rain800" => Self::Rain800,
            "mixed" => Self::Mixed,
            _ => Self::Synthetic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub rainy: PathBuf,
    pub clean: PathBuf,
}

/// A named list of rainy/clean file pairs with unique ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub source_tag: SourceTag,
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Builds a manifest, rejecting duplicate ids.
    pub fn new(name: impl Into<String>, source_tag: SourceTag, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            source_tag,
            entries,
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scans `<root>/rain/<id>.png` and `<root>/norain/<id>.png`, pairing by id.
    /// Rainy files without a clean counterpart are skipped with a warning.
    pub fn scan(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let rain_dir = root.join("rain");
        let clean_dir = root.join("norain");
        for d in [&rain_dir, &clean_dir] {
            if !d.is_dir() {
                return Err(Error::MissingFile(d.clone()));
            }
        }
        let mut entries = Vec::new();
        for item in std::fs::read_dir(&rain_dir)? {
            let path = item?.path();
            let is_image = path
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false);
            if !is_image {
                continue;
            }
            let Some(file_name) = path.file_name() else { continue };
            let clean = clean_dir.join(file_name);
            if !clean.exists() {
                log::warn!("no clean counterpart for {}", path.display());
                continue;
            }
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            entries.push(ManifestEntry { id, rainy: path, clean });
        }
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        let name = root
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("dataset")
            .to_string();
        let tag = SourceTag::from_name(&name);
        Self::new(name, tag, entries)
    }

    /// Reads a JSON-lines manifest (`{"id":…, "rainy":…, "clean":…}` per line).
    /// Relative paths resolve against the manifest's directory.
    pub fn read_jsonl(path: impl AsRef<Path>, name: impl Into<String>, source_tag: SourceTag) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut entries = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut e: ManifestEntry = serde_json::from_str(&line)?;
            if e.rainy.is_relative() {
                e.rainy = base.join(&e.rainy);
            }
            if e.clean.is_relative() {
                e.clean = base.join(&e.clean);
            }
            entries.push(e);
        }
        let m = Self::new(name, source_tag, entries)?;
        m.check_paths()?;
        Ok(m)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for e in &self.entries {
            writeln!(f, "{}", serde_json::to_string(e)?)?;
        }
        Ok(())
    }

    pub fn check_paths(&self) -> Result<()> {
        for e in &self.entries {
            for p in [&e.rainy, &e.clean] {
                if !p.exists() {
                    return Err(Error::MissingFile(p.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn load_pair(&self, index: usize) -> Result<ImagePair> {
        let e = &self.entries[index];
        ImagePair::new(Image::load(&e.rainy)?, Image::load(&e.clean)?, e.id.clone())
    }

    pub fn load_all(&self) -> Result<Vec<ImagePair>> {
        (0..self.len()).map(|i| self.load_pair(i)).collect()
    }
}

/// Concatenates manifests into one mixed manifest. Ids are prefixed with the
/// source manifest's name; order is source order, then id.
pub fn build_mixed(manifests: &[DatasetManifest]) -> Result<DatasetManifest> {
    if manifests.is_empty() {
        return Err(Error::InvalidConfig("build_mixed needs at least one manifest".into()));
    }
    let mut entries = Vec::new();
    for m in manifests {
        let mut part: Vec<ManifestEntry> = m
            .entries
            .iter()
            .map(|e| ManifestEntry {
                id: format!("{}/{}", m.name, e.id),
                ..e.clone()
            })
            .collect();
        part.sort_by(|a, b| a.id.cmp(&b.id));
        entries.extend(part);
    }
    DatasetManifest::new("mixed", SourceTag::Mixed, entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    BinaryGt,
    Predicted,
}

/// A per-pixel rain indicator or confidence map at one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct RainMask {
    pub values: Array2<f32>,
    pub kind: MaskKind,
    pub level: usize,
}

impl RainMask {
    pub fn binary(values: Array2<f32>, level: usize) -> Self {
        debug_assert!(values.iter().all(|&v| v == 0.0 || v == 1.0));
        Self {
            values,
            kind: MaskKind::BinaryGt,
            level,
        }
    }

    pub fn predicted(values: Array2<f32>, level: usize) -> Self {
        Self {
            values,
            kind: MaskKind::Predicted,
            level,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn rainy_count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn crop(&self, win: CropWindow) -> Self {
        Self {
            values: self
                .values
                .slice(s![win.top..win.top + win.size, win.left..win.left + win.size])
                .to_owned(),
            ..self.clone()
        }
    }

    pub fn flip(&self, flips: Flips) -> Self {
        let mut v = self.values.clone();
        if flips.horizontal {
            v = v.slice(s![.., ..;-1]).to_owned();
        }
        if flips.vertical {
            v = v.slice(s![..;-1, ..]).to_owned();
        }
        Self { values: v, ..self.clone() }
    }
}

/// Ground-truth rain mask: 1 where the channel-mean of `|rainy − clean|` is
/// strictly greater than `threshold`.
pub fn gt_mask(pair: &ImagePair, threshold: f32) -> Result<RainMask> {
    let (h, w) = pair.rainy.dims();
    if pair.clean.dims() != (h, w) {
        return Err(shape_mismatch((h, w), pair.clean.dims()));
    }
    let (r, c) = (pair.rainy.data(), pair.clean.data());
    // f32 differences and their three-term sum are exact in f64, so comparing
    // the sum against 3·threshold decides `mean > threshold` exactly.
    let limit = 3.0 * threshold as f64;
    let values = Array2::from_shape_fn((h, w), |(y, x)| {
        let sum: f64 = (0..3)
            .map(|k| (r[[y, x, k]] as f64 - c[[y, x, k]] as f64).abs())
            .sum();
        if sum > limit {
            1.0
        } else {
            0.0
        }
    });
    Ok(RainMask::binary(values, 0))
}

/// Max-pools a mask by `factor` (2 or 4), so a coarse cell is rainy when any
/// covered pixel is.
pub fn downsample_mask(mask: &RainMask, factor: usize) -> Result<RainMask> {
    if !matches!(factor, 1 | 2 | 4) {
        return Err(Error::InvalidConfig(format!("mask downsampling factor {factor}")));
    }
    let (h, w) = mask.dims();
    for (what, v) in [("mask height", h), ("mask width", w)] {
        if v % factor != 0 {
            return Err(Error::NotDivisible {
                what: what.into(),
                value: v,
                factor,
            });
        }
    }
    let values = Array2::from_shape_fn((h / factor, w / factor), |(y, x)| {
        mask.values
            .slice(s![y * factor..(y + 1) * factor, x * factor..(x + 1) * factor])
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max)
    });
    let level = mask.level + factor.trailing_zeros() as usize;
    Ok(RainMask {
        values,
        kind: mask.kind,
        level,
    })
}

/// Ground-truth masks at full, half and quarter resolution.
pub fn gt_pyramid(pair: &ImagePair, threshold: f32) -> Result<[RainMask; 3]> {
    let full = gt_mask(pair, threshold)?;
    Ok([full.clone(), downsample_mask(&full, 2)?, downsample_mask(&full, 4)?])
}

/// Parameters of the synthetic rain generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRainParams {
    pub streak_count: usize,
    /// Streak direction in degrees, measured from vertical.
    pub angle: f32,
    /// Streak length in pixels.
    pub length: f32,
    /// Brightness added along a streak, in `(0, 1]`.
    pub intensity: f32,
    pub seed: u64,
}

impl Default for SynthRainParams {
    fn default() -> Self {
        Self {
            streak_count: 40,
            angle: 10.0,
            length: 12.0,
            intensity: 0.6,
            seed: 0,
        }
    }
}

impl fmt::Display for SynthRainParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} streaks, angle {}°, length {}px, intensity {}, seed {}",
            self.streak_count, self.angle, self.length, self.intensity, self.seed
        )
    }
}

/// The additive streak layer (single channel, values in `[0, 1]`).
pub fn streak_layer(height: usize, width: usize, params: &SynthRainParams) -> Result<Array2<f32>> {
    if !(params.intensity > 0.0 && params.intensity <= 1.0) {
        return Err(Error::OutOfRange {
            what: "rain intensity",
            detail: format!("{}", params.intensity),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut layer = Array2::<f32>::zeros((height, width));
    let theta = params.angle.to_radians();
    let (dx, dy) = (theta.sin(), theta.cos());
    let half = params.length.max(1.0) / 2.0;
    for _ in 0..params.streak_count {
        // Centres are drawn on pixel centres so a vertical streak stays in one column.
        let cy = rng.random_range(0..height) as f32 + 0.5;
        let cx = rng.random_range(0..width) as f32 + 0.5;
        let steps = (2.0 * half).ceil() as i64;
        let mut visited = HashSet::new();
        for i in 0..=steps {
            let t = -half + i as f32 * (2.0 * half) / steps as f32;
            let (px, py) = ((cx + t * dx).floor(), (cy + t * dy).floor());
            if px < 0.0 || py < 0.0 || px >= width as f32 || py >= height as f32 {
                continue;
            }
            let (x, y) = (px as usize, py as usize);
            if visited.insert((y, x)) {
                layer[[y, x]] = (layer[[y, x]] + params.intensity).min(1.0);
            }
        }
    }
    Ok(layer)
}

/// Adds oriented synthetic streaks to `clean`, returning `(rainy, clean)`.
pub fn synth_rain(clean: &Image, params: &SynthRainParams) -> Result<ImagePair> {
    let (h, w) = clean.dims();
    let layer = streak_layer(h, w, params)?;
    let data = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        (clean.get(y, x, c) + layer[[y, x]]).min(1.0)
    });
    ImagePair::new(Image::new(data)?, clean.clone(), "synthetic")
}

/// A deterministic smooth "scene" used as the clean side of synthetic pairs.
pub fn synthetic_scene(height: usize, width: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ce7e);
    let mut waves = Vec::new();
    for c in 0..3 {
        for _ in 0..3 {
            let fy: f32 = rng.random_range(0.5..3.0);
            let fx: f32 = rng.random_range(0.5..3.0);
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let amp: f32 = rng.random_range(0.05..0.15);
            waves.push((c, fy, fx, phase, amp));
        }
    }
    let base: [f32; 3] = [rng.random_range(0.25..0.55), rng.random_range(0.25..0.55), rng.random_range(0.25..0.55)];
    Image::from_fn(height, width, |y, x, c| {
        let (u, v) = (y as f32 / height as f32, x as f32 / width as f32);
        let mut val = base[c];
        for &(wc, fy, fx, phase, amp) in &waves {
            if wc == c {
                val += amp * (std::f32::consts::TAU * (fy * u + fx * v) + phase).sin();
            }
        }
        val.clamp(0.0, 1.0)
    })
}

/// Writes `count` synthetic pairs under `<root>/rain` and `<root>/norain` and
/// returns their manifest.
pub fn write_synthetic_dataset(
    root: impl AsRef<Path>,
    count: usize,
    size: usize,
    base: &SynthRainParams,
) -> Result<DatasetManifest> {
    let root = root.as_ref();
    std::fs::create_dir_all(root.join("rain"))?;
    std::fs::create_dir_all(root.join("norain"))?;
    for (i, pair) in synthetic_pairs(count, size, base)?.into_iter().enumerate() {
        let name = format!("{i:04}.png");
        pair.rainy.save_png(root.join("rain").join(&name))?;
        pair.clean.save_png(root.join("norain").join(&name))?;
    }
    DatasetManifest::scan(root)
}

/// In-memory synthetic pairs; pair `i` uses seed `base.seed + i` and a
/// slightly varied angle.
pub fn synthetic_pairs(count: usize, size: usize, base: &SynthRainParams) -> Result<Vec<ImagePair>> {
    (0..count)
        .map(|i| {
            let seed = base.seed.wrapping_add(i as u64);
            let clean = synthetic_scene(size, size, seed)?;
            let params = SynthRainParams {
                seed,
                angle: base.angle + (i % 5) as f32 * 4.0 - 8.0,
                ..base.clone()
            };
            let mut pair = synth_rain(&clean, &params)?;
            pair.id = format!("{i:04}");
            Ok(pair)
        })
        .collect()
}
