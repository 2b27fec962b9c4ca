//! Mask heatmaps and side-by-side panels.

use ndarray::Array3;

use crate::dataset::RainMask;
use crate::error::{Error, Result};
use crate::imaging::Image;

/// Maps a confidence in `[0, 1]` from black (no rain) to pure red.
pub fn colormap(v: f32) -> [f32; 3] {
    [v.clamp(0.0, 1.0), 0.0, 0.0]
}

/// Renders a mask at `height × width` with nearest-neighbour upsampling.
pub fn heatmap(mask: &RainMask, height: usize, width: usize) -> Result<Image> {
    let (mh, mw) = mask.dims();
    if mh == 0 || mw == 0 || height == 0 || width == 0 {
        return Err(Error::ImageTooSmall { height: mh, width: mw, min: 1 });
    }
    Image::from_fn(height, width, |y, x, c| {
        colormap(mask.values[[y * mh / height, x * mw / width]])[c]
    })
}

/// Places images left to right, top-aligned, on a black canvas.
pub fn side_by_side(images: &[&Image]) -> Result<Image> {
    if images.is_empty() {
        return Err(Error::ImageTooSmall { height: 0, width: 0, min: 1 });
    }
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let w: usize = images.iter().map(|i| i.width()).sum();
    let mut data = Array3::<f32>::zeros((h, w, 3));
    let mut left = 0;
    for img in images {
        let (ih, iw) = img.dims();
        data.slice_mut(ndarray::s![..ih, left..left + iw, ..]).assign(img.data());
        left += iw;
    }
    Image::new(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 0.0]);
        assert_eq!(colormap(1.0), [1.0, 0.0, 0.0]);
        assert_eq!(colormap(2.0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn heatmap_upsamples_nearest() {
        let m = RainMask::predicted(array![[0.0, 1.0], [0.5, 0.25]], 1);
        let img = heatmap(&m, 4, 4).unwrap();
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert_eq!(img.get(1, 3, 0), 1.0);
        assert_eq!(img.get(3, 1, 0), 0.5);
        assert_eq!(img.get(2, 2, 0), 0.25);
        assert!((0..4).all(|y| (0..4).all(|x| img.get(y, x, 1) == 0.0)));
    }

    #[test]
    fn panel_width_is_the_sum() {
        let a = Image::filled(3, 2, [1.0, 1.0, 1.0]).unwrap();
        let b = Image::filled(5, 4, [0.5, 0.5, 0.5]).unwrap();
        let p = side_by_side(&[&a, &b]).unwrap();
        assert_eq!(p.dims(), (5, 6));
        assert_eq!(p.get(4, 0, 0), 0.0);
        assert_eq!(p.get(4, 5, 0), 0.5);
    }
}
