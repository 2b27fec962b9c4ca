//! Image containers, file I/O, luma conversion, augmentation and the
//! PSNR/SSIM quality metrics.
//!
//! Images live in memory as `H×W×3` arrays of `f32` in `[0, 1]`. Conversion to
//! 8-bit happens only when reading or writing files. Metrics are computed on
//! the BT.601 luma plane using the studio-swing convention, so black maps to
//! 16 and white to 235 on the 0–255 scale.

use std::io::Write as _;
use std::path::Path;

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImagePair;
use crate::error::{shape_mismatch, Error, Result};

/// Default PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak value of the luma plane used by PSNR/SSIM.
const LUMA_PEAK: f64 = 255.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// An RGB image with values in `[0, 1]`, stored height × width × channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f32>,
}

impl Image {
    /// Wraps an `H×W×3` array. Values are clamped into `[0, 1]`; non-finite
    /// values are rejected.
    pub fn new(mut data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(shape_mismatch("H×W×3 with H,W ≥ 1", data.dim()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::OutOfRange {
                what: "pixel value",
                detail: "non-finite entry".into(),
            });
        }
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(Self { data })
    }

    /// A constant-colour image.
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::new(Array3::from_shape_fn((height, width, 3), |(_, _, c)| rgb[c]))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Result<Self> {
        Self::new(Array3::from_shape_fn((height, width, 3), |(y, x, c)| f(y, x, c)))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[[y, x, c]]
    }

    /// Reads a PNG or JPEG file as 8-bit RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let rgb = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&rgb))
    }

    pub fn from_rgb8(rgb: &image::RgbImage) -> Self {
        let (w, h) = rgb.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        });
        Self { data }
    }

    /// Quantizes to 8 bits, rounding half up.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = self.dims();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| quantize(self.data[[y as usize, x as usize, c]]);
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Writes an 8-bit RGB PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        let (h, w) = self.dims();
        if top + height > h || left + width > w || height == 0 || width == 0 {
            return Err(shape_mismatch(
                format!("window inside {h}x{w}"),
                (top, left, height, width),
            ));
        }
        Ok(Self {
            data: self
                .data
                .slice(s![top..top + height, left..left + width, ..])
                .to_owned(),
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            data: self.data.slice(s![.., ..;-1, ..]).to_owned(),
        }
    }

    pub fn flip_vertical(&self) -> Self {
        Self {
            data: self.data.slice(s![..;-1, .., ..]).to_owned(),
        }
    }

    /// Pads bottom/right edges by mirroring (without repeating the edge pixel)
    /// so both dimensions become multiples of `multiple`.
    pub fn reflect_pad_to_multiple(&self, multiple: usize) -> Result<Self> {
        let (h, w) = self.dims();
        let ph = h.div_ceil(multiple) * multiple;
        let pw = w.div_ceil(multiple) * multiple;
        if ph == h && pw == w {
            return Ok(self.clone());
        }
        if ph - h >= h.max(2) || pw - w >= w.max(2) {
            return Err(Error::ImageTooSmall {
                height: h,
                width: w,
                min: multiple,
            });
        }
        let data = Array3::from_shape_fn((ph, pw, 3), |(y, x, c)| {
            self.data[[reflect_index(y, h), reflect_index(x, w), c]]
        });
        Ok(Self { data })
    }
}

fn reflect_index(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * (n - 1) - i
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

/// BT.601 luma on the 0–255 scale with 16/235 footroom/headroom.
pub fn to_luma(img: &Image) -> Array2<f64> {
    img.data.map_axis(Axis(2), |px| {
        16.0 + 65.481 * px[0] as f64 + 128.553 * px[1] as f64 + 24.966 * px[2] as f64
    })
}

fn check_same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_mismatch(a.dims(), b.dims()));
    }
    Ok(())
}

/// PSNR between two luma planes on the 0–255 scale; `cap` is returned when the
/// planes are identical.
pub fn psnr_luma(a: &Array2<f64>, b: &Array2<f64>, cap: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(shape_mismatch(a.dim(), b.dim()));
    }
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok(10.0 * (LUMA_PEAK * LUMA_PEAK / mse).log10())
}

/// PSNR in decibels on the luma channel, capped at [`PSNR_CAP_DB`] for
/// identical inputs.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    psnr_with_cap(a, b, PSNR_CAP_DB)
}

pub fn psnr_with_cap(a: &Image, b: &Image, cap: f64) -> Result<f64> {
    check_same_dims(a, b)?;
    psnr_luma(&to_luma(a), &to_luma(b), cap)
}

/// Mean SSIM on the luma channel (11×11 Gaussian window, σ = 1.5).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_dims(a, b)?;
    ssim_luma(&to_luma(a), &to_luma(b))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable "valid" filtering: output is `(H-10)×(W-10)`.
fn filter_valid(plane: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = (0..SSIM_WINDOW).map(|i| k[i] * plane[[y, x + i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..SSIM_WINDOW).map(|i| k[i] * rows[[y + i, x]]).sum();
        }
    }
    out
}

/// Mean SSIM between two luma planes on the 0–255 scale.
pub fn ssim_luma(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(shape_mismatch(a.dim(), b.dim()));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min: SSIM_WINDOW,
        });
    }
    let c1 = (0.01 * LUMA_PEAK).powi(2);
    let c2 = (0.03 * LUMA_PEAK).powi(2);
    let k = gaussian_window();
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let aa = filter_valid(&(a * a), &k);
    let bb = filter_valid(&(b * b), &k);
    let ab = filter_valid(&(a * b), &k);
    let mut total = 0.0;
    for (((&ma, &mb), (&saa, &sbb)), &sab) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(aa.iter().zip(bb.iter()))
        .zip(ab.iter())
    {
        let var_a = saa - ma * ma;
        let var_b = sbb - mb * mb;
        let cov = sab - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Top-left corner and size of a square crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

/// Flips chosen by [`random_flip_pair`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flips {
    pub horizontal: bool,
    pub vertical: bool,
}

/// Draws a crop window of `size` for an image of the given dimensions.
pub fn sample_crop<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    size: usize,
    rng: &mut R,
) -> Result<CropWindow> {
    if size == 0 || size > height || size > width {
        return Err(Error::CropTooLarge { size, height, width });
    }
    Ok(CropWindow {
        top: rng.random_range(0..=height - size),
        left: rng.random_range(0..=width - size),
        size,
    })
}

/// Crops the same random window out of both images of a pair.
pub fn random_crop_pair<R: Rng + ?Sized>(
    pair: &ImagePair,
    size: usize,
    rng: &mut R,
) -> Result<(ImagePair, CropWindow)> {
    let (h, w) = pair.rainy.dims();
    let win = sample_crop(h, w, size, rng)?;
    Ok((crop_pair(pair, win)?, win))
}

pub fn crop_pair(pair: &ImagePair, win: CropWindow) -> Result<ImagePair> {
    Ok(ImagePair {
        rainy: pair.rainy.crop(win.top, win.left, win.size, win.size)?,
        clean: pair.clean.crop(win.top, win.left, win.size, win.size)?,
        id: pair.id.clone(),
    })
}

/// Draws independent horizontal and vertical flips, each with probability `p`.
pub fn sample_flips<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Result<Flips> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::OutOfRange {
            what: "flip probability",
            detail: format!("{p}"),
        });
    }
    // Two draws even when p is 0 or 1 so the stream position never depends on p.
    let h: f64 = rng.random();
    let v: f64 = rng.random();
    Ok(Flips {
        horizontal: h < p,
        vertical: v < p,
    })
}

/// Applies the same random horizontal/vertical flips to both images.
pub fn random_flip_pair<R: Rng + ?Sized>(
    pair: &ImagePair,
    p: f64,
    rng: &mut R,
) -> Result<(ImagePair, Flips)> {
    let flips = sample_flips(p, rng)?;
    Ok((flip_pair(pair, flips), flips))
}

pub fn flip_pair(pair: &ImagePair, flips: Flips) -> ImagePair {
    let apply = |img: &Image| {
        let img = if flips.horizontal {
            img.flip_horizontal()
        } else {
            img.clone()
        };
        if flips.vertical {
            img.flip_vertical()
        } else {
            img
        }
    };
    ImagePair {
        rainy: apply(&pair.rainy),
        clean: apply(&pair.clean),
        id: pair.id.clone(),
    }
}

/// One evaluated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image PSNR/SSIM table with dataset means.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub count: usize,
}

impl MetricsReport {
    pub fn push(&mut self, image: impl Into<String>, psnr: f64, ssim: f64) {
        self.rows.push(MetricsRow {
            image: image.into(),
            psnr,
            ssim,
        });
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn summary(&self) -> MetricsSummary {
        let n = self.rows.len();
        let mean = |f: fn(&MetricsRow) -> f64| {
            if n == 0 {
                0.0
            } else {
                self.rows.iter().map(f).sum::<f64>() / n as f64
            }
        };
        MetricsSummary {
            psnr_mean: mean(|r| r.psnr),
            ssim_mean: mean(|r| r.ssim),
            count: n,
        }
    }

    /// `image,psnr,ssim` with a header row.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "image,psnr,ssim")?;
        for r in &self.rows {
            writeln!(out, "{},{:.6},{:.6}", r.image, r.psnr, r.ssim)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string(&self.summary()).expect("summary serializes")
    }

    /// Writes `metrics.csv` and `summary.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("metrics.csv"))?)?;
        let mut f = std::fs::File::create(dir.join("summary.json"))?;
        f.write_all(self.summary_json().as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x, c| ((y * 7 + x * 3 + c * 11) % 97) as f32 / 96.0).unwrap()
    }

    #[test]
    fn luma_of_black_white_and_gray() {
        let black = Image::filled(2, 2, [0.0; 3]).unwrap();
        let white = Image::filled(2, 2, [1.0; 3]).unwrap();
        assert!(to_luma(&black).iter().all(|&y| (y - 16.0).abs() < 1e-9));
        assert!(to_luma(&white).iter().all(|&y| (y - 235.0).abs() < 1e-9));
        for g in [0.25f32, 0.5, 0.8] {
            let gray = Image::filled(1, 1, [g; 3]).unwrap();
            let expected = 16.0 + 219.0 * g as f64;
            assert!((to_luma(&gray)[[0, 0]] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn psnr_reference_values() {
        let a = gradient_image(16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);

        let la = Array2::from_elem((4, 4), 100.0);
        let lb = Array2::from_elem((4, 4), 101.0);
        let p = psnr_luma(&la, &lb, PSNR_CAP_DB).unwrap();
        assert!((p - 48.130_803_608_679_1).abs() < 1e-9, "{p}");

        let lo = Array2::from_elem((4, 4), 0.0);
        let hi = Array2::from_elem((4, 4), 255.0);
        assert!(psnr_luma(&lo, &hi, PSNR_CAP_DB).unwrap().abs() < 1e-12);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = gradient_image(8, 8);
        let b = gradient_image(8, 9);
        assert!(matches!(psnr(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn ssim_reference_values() {
        let a = gradient_image(24, 24);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);

        let zeros = Array2::from_elem((16, 16), 0.0);
        let full = Array2::from_elem((16, 16), 255.0);
        let v = ssim_luma(&zeros, &full).unwrap();
        assert!(v >= 0.0 && v < 0.01, "{v}");

        let small = gradient_image(10, 32);
        assert!(matches!(ssim(&small, &small), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn ssim_of_slightly_noisy_copy() {
        use rand_distr::{Distribution, Normal};
        let a = gradient_image(32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = Normal::new(0.0f32, 1e-4).unwrap();
        let b = Image::new(a.data().mapv(|v| v + noise.sample(&mut rng))).unwrap();
        assert!(ssim(&a, &b).unwrap() > 0.999);
    }

    #[test]
    fn full_frame_crop_is_identity() {
        let pair = ImagePair::new(gradient_image(16, 16), gradient_image(16, 16), "a").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, win) = random_crop_pair(&pair, 16, &mut rng).unwrap();
        assert_eq!(win, CropWindow { top: 0, left: 0, size: 16 });
        assert_eq!(out, pair);
        assert!(matches!(
            random_crop_pair(&pair, 17, &mut rng),
            Err(Error::CropTooLarge { .. })
        ));
    }

    #[test]
    fn crops_replay_from_seed() {
        let img = gradient_image(256, 256);
        let pair = ImagePair::new(img.clone(), img, "a").unwrap();
        for seed in [3u64, 4] {
            let (a, wa) = random_crop_pair(&pair, 128, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let (b, wb) = random_crop_pair(&pair, 128, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(wa, wb);
            assert_eq!(a, b);
            assert_eq!(crop_pair(&pair, wa).unwrap(), a);
        }
    }

    #[test]
    fn flips_probability_extremes() {
        let pair = ImagePair::new(gradient_image(5, 7), gradient_image(5, 7), "a").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (same, f) = random_flip_pair(&pair, 0.0, &mut rng).unwrap();
        assert_eq!(f, Flips::default());
        assert_eq!(same, pair);
        let (once, f) = random_flip_pair(&pair, 1.0, &mut rng).unwrap();
        assert!(f.horizontal && f.vertical);
        assert_ne!(once, pair);
        let (twice, _) = random_flip_pair(&once, 1.0, &mut rng).unwrap();
        assert_eq!(twice, pair);
        assert!(random_flip_pair(&pair, 1.5, &mut rng).is_err());
    }

    #[test]
    fn flip_rate_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 10_000;
        let mut h = 0;
        let mut v = 0;
        for _ in 0..trials {
            let f = sample_flips(0.5, &mut rng).unwrap();
            h += f.horizontal as usize;
            v += f.vertical as usize;
        }
        for count in [h, v] {
            let rate = count as f64 / trials as f64;
            assert!((rate - 0.5).abs() <= 0.02, "{rate}");
        }
    }

    #[test]
    fn reflect_padding() {
        let img = gradient_image(5, 6);
        let padded = img.reflect_pad_to_multiple(4).unwrap();
        assert_eq!(padded.dims(), (8, 8));
        assert_eq!(padded.get(5, 0, 0), img.get(3, 0, 0));
        assert_eq!(padded.get(0, 7, 1), img.get(0, 3, 1));
        assert_eq!(padded.crop(0, 0, 5, 6).unwrap(), img);
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let img = Image::from_fn(6, 4, |y, x, c| ((y * 31 + x * 17 + c * 5) % 256) as f32 / 255.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
        assert!(back.data().iter().zip(img.data().iter()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 0);
    }

    #[test]
    fn report_serialization() {
        let mut r = MetricsReport::default();
        r.push("a", 30.0, 0.9);
        r.push("b", 32.0, 0.8);
        assert_eq!(r.to_csv(), "image,psnr,ssim\na,30.000000,0.900000\nb,32.000000,0.800000\n");
        let s: serde_json::Value = serde_json::from_str(&r.summary_json()).unwrap();
        assert_eq!(s["count"], 2);
        assert!((s["psnr_mean"].as_f64().unwrap() - 31.0).abs() < 1e-12);
    }

    fn rand_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
        Image::new(Array3::from_shape_simple_fn((h, w, 3), || rng.random::<f32>()))
    }

    proptest::proptest! {
        #[test]
        fn luma_is_affine(t in 0.0f32..=1.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_image(3, 3, &mut rng).unwrap();
            let b = Image::from_fn(3, 3, |y, x, c| a.get(y, x, c) * 0.3 + 0.1 * c as f32).unwrap();
            let mix = Image::new(a.data().mapv(|v| v * t) + &b.data().mapv(|v| v * (1.0 - t))).unwrap();
            let expected = to_luma(&a) * t as f64 + to_luma(&b) * (1.0 - t as f64);
            for (x, y) in to_luma(&mix).iter().zip(expected.iter()) {
                proptest::prop_assert!((x - y).abs() < 1e-4);
            }
        }

        #[test]
        fn metrics_are_symmetric(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_image(12, 12, &mut rng).unwrap();
            let b = rand_image(12, 12, &mut rng).unwrap();
            proptest::prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            proptest::prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn psnr_decreases_with_noise(seed in 0u64..200, small in 0.01f32..0.1, extra in 0.01f32..0.1) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = Image::filled(8, 8, [0.5; 3]).unwrap();
            let signs: Vec<f32> = (0..8 * 8 * 3).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let noisy = |m: f32| {
                let mut d = base.data().clone();
                d.iter_mut().zip(&signs).for_each(|(v, s)| *v += s * m);
                Image::new(d).unwrap()
            };
            let p1 = psnr(&base, &noisy(small)).unwrap();
            let p2 = psnr(&base, &noisy(small + extra)).unwrap();
            proptest::prop_assert!(p2 < p1);
        }
    }
}
