//! Procedural paired RGB/IR vehicle images.
//!
//! Each identity is a top-down vehicle glyph: a rounded body with its own
//! size, nose taper, paint, roof panel, windows and stripes. The RGB render
//! carries hue; the IR render keeps only luminance, passed through a fixed
//! monotone curve, with engine heat and independent noise added. Shape and
//! luminance layout are shared across modalities, color is not.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetIndex, Modality, Orientation, SampleRecord, Split, LABELS_FILE, NUM_ORIENTATIONS};
use crate::{Error, Result};

/// Generator parameters. Output is a pure function of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    /// Training identities.
    pub num_ids: usize,
    /// Images per identity per modality.
    pub samples_per_id_per_modality: usize,
    pub seed: u64,
    /// Extra identities labeled for testing: IR images as queries, RGB as gallery.
    pub test_ids: usize,
    pub height: usize,
    pub width: usize,
}

impl SynthSpec {
    pub fn new(num_ids: usize, samples_per_id_per_modality: usize, seed: u64) -> Self {
        Self { num_ids, samples_per_id_per_modality, seed, test_ids: 0, height: 64, width: 48 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 {
            return Err(Error::Validation(format!("synthetic dataset needs at least 2 identities, got {}", self.num_ids)));
        }
        if self.samples_per_id_per_modality == 0 {
            return Err(Error::Validation("samples per identity per modality must be at least 1".into()));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Validation(format!("synthetic images must be at least 16x16, got {}x{}", self.height, self.width)));
        }
        Ok(())
    }

    /// Writes `rgb/`, `ir/` and `labels.tsv` under `out` and returns the index.
    pub fn generate(&self, out: &Path) -> Result<DatasetIndex> {
        self.validate()?;
        for m in Modality::ALL {
            let dir = out.join(m.dir_name());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let mut records = Vec::new();
        for id in 0..self.num_ids + self.test_ids {
            let vehicle = Vehicle::draw(&mut self.stream(id, 0));
            let test = id >= self.num_ids;
            for (mi, m) in Modality::ALL.into_iter().enumerate() {
                let mut rng = self.stream(id, 1 + mi as u64);
                let orientations = orientation_cycle(self.samples_per_id_per_modality, &mut rng);
                for (n, &orientation) in orientations.iter().enumerate() {
                    let camera = rng.random_range(1..=4u32);
                    let pose = Pose::draw(orientation, &mut rng);
                    let rel = PathBuf::from(m.dir_name()).join(SampleRecord::file_name(camera, id, n as u32, "png"));
                    let path = out.join(&rel);
                    let pixels = render(&vehicle, &pose, m, self.height, self.width, &mut rng);
                    save(&pixels, m, self.height, self.width, &path)?;
                    let split = match (test, m) {
                        (false, _) => Split::Train,
                        (true, Modality::Ir) => Split::Query,
                        (true, Modality::Rgb) => Split::Gallery,
                    };
                    records.push(SampleRecord { path: rel, identity: id, modality: m, orientation, camera, image_num: n as u32, split });
                }
            }
        }
        let index = DatasetIndex::from_records(out, records)?;
        index.write_labels(&out.join(LABELS_FILE))?;
        Ok(index)
    }

    fn stream(&self, id: usize, sub: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id as u64 * 4 + sub);
        rng
    }
}

/// Training-only synthetic dataset with default image size.
pub fn generate_synthetic_dataset(num_ids: usize, samples_per_id_per_modality: usize, seed: u64, out: &Path) -> Result<DatasetIndex> {
    SynthSpec::new(num_ids, samples_per_id_per_modality, seed).generate(out)
}

/// Concatenated shuffled permutations of the eight classes, so every class
/// appears once per eight samples.
fn orientation_cycle<R: Rng>(count: usize, rng: &mut R) -> Vec<Orientation> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut cycle: Vec<u8> = (0..NUM_ORIENTATIONS as u8).collect();
        cycle.shuffle(rng);
        out.extend(cycle.into_iter().map(|c| Orientation::new(c).expect("class < 8")));
    }
    out.truncate(count);
    out
}

#[derive(Debug, Clone, Copy)]
enum Stripes {
    None,
    Center(f64),
    Twin(f64),
    Band(f64, f64),
}

#[derive(Debug, Clone)]
struct Vehicle {
    /// Length and width in pixels at the 48-pixel reference width.
    length: f64,
    width: f64,
    radius: f64,
    /// Nose half-width as a fraction of the body half-width.
    taper: f64,
    paint: [f64; 3],
    lum: f64,
    roof: (f64, f64, f64, f64),
    windshield: f64,
    rear_window: bool,
    stripes: Stripes,
    stripe_paint: [f64; 3],
    stripe_lum: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// `chroma` rescaled to luminance `l`.
fn tint(chroma: [f64; 3], l: f64) -> [f64; 3] {
    let k = l / luma(chroma).max(1e-3);
    chroma.map(|c| (c * k).clamp(0.0, 1.0))
}

impl Vehicle {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        let length = rng.random_range(26.0..37.0);
        let width = length * rng.random_range(0.38..0.58);
        let stripes = match rng.random_range(0..4) {
            0 => Stripes::None,
            1 => Stripes::Center(rng.random_range(0.15..0.3)),
            2 => Stripes::Twin(rng.random_range(0.1..0.18)),
            _ => Stripes::Band(rng.random_range(-0.5..0.3), rng.random_range(0.1..0.2)),
        };
        let lum: f64 = rng.random_range(0.15..0.9);
        // Stripes always contrast with the body in luminance, so they survive
        // the loss of hue.
        let contrast = rng.random_range(0.3..0.55);
        let stripe_lum = if lum + contrast <= 0.95 && (lum - contrast < 0.08 || rng.random_bool(0.5)) { lum + contrast } else { (lum - contrast).max(0.05) };
        Self {
            length,
            width,
            radius: rng.random_range(1.5..4.5),
            taper: rng.random_range(0.65..1.0),
            paint: hsv(rng.random(), rng.random_range(0.35..0.95), 1.0),
            lum,
            roof: (
                rng.random_range(-0.45..-0.1),
                rng.random_range(0.05..0.3),
                rng.random_range(0.55..0.85),
                rng.random_range(-0.35..0.35),
            ),
            windshield: rng.random_range(0.25..0.5),
            rear_window: rng.random_bool(0.5),
            stripes,
            stripe_paint: hsv(rng.random(), rng.random_range(0.3..1.0), 1.0),
            stripe_lum,
        }
    }

    /// Luminance and stripe mask at normalized body coordinates
    /// (`u` towards the nose, `v` across), both in [-1, 1].
    fn surface(&self, u: f64, v: f64) -> (f64, bool) {
        let av = v.abs();
        let stripe = match self.stripes {
            Stripes::None => false,
            Stripes::Center(w) => av < w,
            Stripes::Twin(w) => (av - 0.5).abs() < w,
            Stripes::Band(at, w) => (u - at).abs() < w,
        };
        let mut l = if stripe { self.stripe_lum } else { self.lum };
        let (r0, r1, rw, rd) = self.roof;
        if u > r0 && u < r1 && av < rw {
            l = (l + rd).clamp(0.05, 1.0);
        }
        if u > self.windshield && u < self.windshield + 0.14 && av < 0.85 {
            l *= 0.3;
        }
        if self.rear_window && u > -0.78 && u < -0.68 && av < 0.8 {
            l *= 0.45;
        }
        l *= 1.0 - 0.3 * av.powi(4);
        (l, stripe)
    }
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    heading: f64,
    scale: f64,
    dx: f64,
    dy: f64,
}

impl Pose {
    fn draw<R: Rng>(orientation: Orientation, rng: &mut R) -> Self {
        Self {
            heading: (orientation.degrees() + rng.random_range(-8.0..8.0)) * PI / 180.0,
            scale: rng.random_range(0.88..1.12),
            dx: rng.random_range(-3.0..3.0),
            dy: rng.random_range(-3.0..3.0),
        }
    }
}

/// Signed distance to a rounded rectangle with half extents `(a, b)`.
fn rounded_rect(u: f64, v: f64, a: f64, b: f64, r: f64) -> f64 {
    let qx = u.abs() - a + r;
    let qy = v.abs() - b + r;
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0) - r
}

struct Background {
    base: [f64; 3],
    grad: (f64, f64),
    lane: Option<(f64, f64, f64)>,
}

impl Background {
    fn draw<R: Rng>(modality: Modality, rng: &mut R) -> Self {
        let base = match modality {
            Modality::Rgb => {
                let g = rng.random_range(0.3..0.6);
                [g + rng.random_range(-0.05..0.05), g + rng.random_range(-0.05..0.05), g + rng.random_range(-0.05..0.05)]
            }
            Modality::Ir => [rng.random_range(0.15..0.4); 3],
        };
        let lane = rng.random_bool(0.5).then(|| (rng.random_range(0.0..PI), rng.random_range(-20.0..20.0), rng.random_range(0.15..0.35)));
        Self { base, grad: (rng.random_range(-0.004..0.004), rng.random_range(-0.004..0.004)), lane }
    }

    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let g = self.grad.0 * x + self.grad.1 * y;
        let mut c = self.base.map(|b| b + g);
        if let Some((angle, offset, bright)) = self.lane {
            let d = (x * angle.cos() + y * angle.sin() - offset).abs();
            let cover = (1.2 - d).clamp(0.0, 1.0);
            c = c.map(|b| b + bright * cover);
        }
        c
    }
}

/// Identity-independent IR response to visible luminance.
fn ir_curve(l: f64) -> f64 {
    0.08 + 0.82 * l.clamp(0.0, 1.0).powf(0.6)
}

/// Row-major pixels in [0, 1]: three channels for RGB, one for IR.
fn render<R: Rng>(vehicle: &Vehicle, pose: &Pose, modality: Modality, height: usize, width: usize, rng: &mut R) -> Vec<f64> {
    let bg = Background::draw(modality, rng);
    let noise = Normal::new(0.0, if modality == Modality::Ir { 0.05 } else { 0.025 }).expect("positive sigma");
    let px = width.min(height * 3 / 4) as f64 / 48.0 * pose.scale;
    let (a, b) = (vehicle.length * px / 2.0, vehicle.width * px / 2.0);
    let r = vehicle.radius * px;
    let (sin, cos) = pose.heading.sin_cos();
    let (cx, cy) = (width as f64 / 2.0 + pose.dx, height as f64 / 2.0 + pose.dy);
    let shadow = 2.0 * px;
    let channels = if modality == Modality::Rgb { 3 } else { 1 };
    let mut out = Vec::with_capacity(height * width * channels);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let body = |fx: f64, fy: f64| {
                let u = -fx * sin + fy * cos;
                let v = fx * cos + fy * sin;
                let narrow = 1.0 - (1.0 - vehicle.taper) * (u / a).max(0.0).powi(2);
                (u, v, rounded_rect(u, v / narrow, a, b, r))
            };
            let (u, v, sd) = body(fx, fy);
            let cover = (0.5 - sd).clamp(0.0, 1.0);
            let shade = if body(fx - shadow, fy - shadow).2 < 0.0 { 0.6 } else { 1.0 };
            let ground = bg.at(fx, fy).map(|c| c * shade);
            let (l, stripe) = vehicle.surface((u / a).clamp(-1.0, 1.0), (v / b).clamp(-1.0, 1.0));
            match modality {
                Modality::Rgb => {
                    let paint = tint(if stripe { vehicle.stripe_paint } else { vehicle.paint }, l);
                    for c in 0..3 {
                        let p = cover * paint[c] + (1.0 - cover) * ground[c];
                        out.push((p + noise.sample(rng)).clamp(0.0, 1.0));
                    }
                }
                Modality::Ir => {
                    let heat = if u / a > 0.6 { 0.12 } else { 0.0 };
                    let p = cover * (ir_curve(l) + heat) + (1.0 - cover) * ground[0];
                    out.push((p + noise.sample(rng)).clamp(0.0, 1.0));
                }
            }
        }
    }
    out
}

fn save(pixels: &[f64], modality: Modality, height: usize, width: usize, path: &Path) -> Result<()> {
    let q = |v: f64| (v * 255.0).round() as u8;
    let (w, h) = (width as u32, height as u32);
    let result = match modality {
        Modality::Rgb => RgbImage::from_fn(w, h, |x, y| {
            let i = (y as usize * width + x as usize) * 3;
            Rgb([q(pixels[i]), q(pixels[i + 1]), q(pixels[i + 2])])
        })
        .save(path),
        Modality::Ir => GrayImage::from_fn(w, h, |x, y| Luma([q(pixels[y as usize * width + x as usize])])).save(path),
    };
    result.map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orientation_cycle_covers_every_class_per_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let o = orientation_cycle(16, &mut rng);
        for chunk in o.chunks(8) {
            let mut c: Vec<u8> = chunk.iter().map(|o| o.class()).collect();
            c.sort();
            assert_eq!(c, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn rounded_rect_sign() {
        assert!(rounded_rect(0.0, 0.0, 10.0, 5.0, 2.0) < 0.0);
        assert!(rounded_rect(11.0, 0.0, 10.0, 5.0, 2.0) > 0.0);
        assert!((rounded_rect(10.0, 0.0, 10.0, 5.0, 2.0)).abs() < 1e-12);
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv(1.0 / 3.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert!((luma(tint([1.0, 0.0, 0.0], 0.2)) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn too_few_identities_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic_dataset(1, 1, 0, dir.path()).unwrap_err().is_validation());
    }
}
