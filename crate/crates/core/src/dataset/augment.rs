use ndarray::{s, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Orientation;

/// Training-time augmentation switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Random horizontal flip with probability 0.5. Mirrors the orientation label.
    pub flip: bool,
    /// Zero-pad by this many pixels on every side, then crop back at a random
    /// offset. 0 disables.
    pub crop_padding: usize,
    /// Random erasing probability; 0 disables.
    pub erase_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip: true, crop_padding: 10, erase_prob: 0.5 }
    }
}

impl AugmentConfig {
    pub const NONE: Self = Self { flip: false, crop_padding: 0, erase_prob: 0.0 };

    pub fn apply<R: Rng + ?Sized>(&self, img: &Array3<f32>, orientation: Orientation, rng: &mut R) -> (Array3<f32>, Orientation) {
        let mut out = img.clone();
        let mut orientation = orientation;
        if self.flip && rng.random_bool(0.5) {
            out.invert_axis(ndarray::Axis(2));
            out = out.as_standard_layout().into_owned();
            orientation = orientation.mirrored();
        }
        if self.crop_padding > 0 {
            let p = self.crop_padding as i64;
            let dy = rng.random_range(-p..=p) as isize;
            let dx = rng.random_range(-p..=p) as isize;
            out = shift(&out, dy, dx);
        }
        if self.erase_prob > 0.0 && rng.random_bool(self.erase_prob.min(1.0)) {
            erase(&mut out, rng);
        }
        (out, orientation)
    }
}

/// `out[y, x] = img[y + dy, x + dx]`, zero outside the source.
fn shift(img: &Array3<f32>, dy: isize, dx: isize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let mut out = Array3::zeros((c, h, w));
    let span = |d: isize, n: usize| {
        let lo = (-d).max(0) as usize;
        let hi = (n as isize - d).min(n as isize).max(0) as usize;
        (lo, hi.max(lo))
    };
    let (y0, y1) = span(dy, h);
    let (x0, x1) = span(dx, w);
    if y0 < y1 && x0 < x1 {
        let src = img.slice(s![.., (y0 as isize + dy) as usize..(y1 as isize + dy) as usize, (x0 as isize + dx) as usize..(x1 as isize + dx) as usize]);
        out.slice_mut(s![.., y0..y1, x0..x1]).assign(&src);
    }
    out
}

/// Blanks a random rectangle covering 2-40% of the image with aspect ratio
/// in [0.3, 3.3]. Zero is the normalized mean pixel.
fn erase<R: Rng + ?Sized>(img: &mut Array3<f32>, rng: &mut R) {
    let (_, h, w) = img.dim();
    let area = (h * w) as f64;
    for _ in 0..100 {
        let target = area * rng.random_range(0.02..0.4);
        let aspect = rng.random_range(0.3f64.ln()..3.3f64.ln()).exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let y = rng.random_range(0..=h - eh);
        let x = rng.random_range(0..=w - ew);
        img.slice_mut(s![.., y..y + eh, x..x + ew]).fill(0.0);
        return;
    }
}
