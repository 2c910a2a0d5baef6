use ndarray::{s, Array4};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AugmentConfig, DatasetIndex, ImageCache, Modality, Orientation};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub ids_per_batch: usize,
    pub images_per_id_per_modality: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self { ids_per_batch: 12, images_per_id_per_modality: 4, image_height: 256, image_width: 180 }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.ids_per_batch, self.images_per_id_per_modality, self.image_height, self.image_width];
        if counts.contains(&0) {
            return Err(Error::Config(format!("batch counts and image size must be at least 1: {self:?}")));
        }
        Ok(())
    }

    /// Images per modality per batch.
    pub fn per_modality(&self) -> usize {
        self.ids_per_batch * self.images_per_id_per_modality
    }
}

/// Which records make up a batch, before any pixels are touched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub identities: Vec<usize>,
    /// Record indices, identity-major: `P` per identity in `identities` order.
    pub rgb: Vec<usize>,
    pub ir: Vec<usize>,
}

/// Identity- and modality-balanced mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rgb_images: Array4<f32>,
    pub ir_images: Array4<f32>,
    pub rgb_labels: Vec<usize>,
    pub ir_labels: Vec<usize>,
    pub rgb_orient: Vec<Orientation>,
    pub ir_orient: Vec<Orientation>,
    pub p: usize,
    pub q: usize,
}

/// `count` picks from `pool`: a random subset when the pool is large enough,
/// otherwise every item once plus uniform repeats.
fn pick<R: Rng + ?Sized>(pool: &[usize], count: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() >= count {
        index::sample(rng, pool.len(), count).into_iter().map(|i| pool[i]).collect()
    } else {
        let mut out = pool.to_vec();
        out.shuffle(rng);
        while out.len() < count {
            out.push(pool[rng.random_range(0..pool.len())]);
        }
        out
    }
}

impl BatchPlan {
    pub fn draw<R: Rng + ?Sized>(index: &DatasetIndex, spec: &BatchSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let candidates: Vec<usize> = index
            .train_identities()
            .into_iter()
            .filter(|&id| Modality::ALL.iter().all(|&m| !index.train_records(id, m).is_empty()))
            .collect();
        if candidates.len() < spec.ids_per_batch {
            return Err(Error::Sampling(format!(
                "need {} training identities with both modalities, index has {}",
                spec.ids_per_batch,
                candidates.len()
            )));
        }
        let identities: Vec<usize> = index::sample(rng, candidates.len(), spec.ids_per_batch).into_iter().map(|i| candidates[i]).collect();
        let n = spec.images_per_id_per_modality;
        let mut rgb = Vec::with_capacity(spec.per_modality());
        let mut ir = Vec::with_capacity(spec.per_modality());
        for &id in &identities {
            rgb.extend(pick(&index.train_records(id, Modality::Rgb), n, rng));
            ir.extend(pick(&index.train_records(id, Modality::Ir), n, rng));
        }
        Ok(Self { identities, rgb, ir })
    }
}

/// Draws a balanced batch and materializes its augmented images.
pub fn sample_balanced_batch<R: Rng + ?Sized>(
    index: &DatasetIndex,
    spec: &BatchSpec,
    augment: &AugmentConfig,
    cache: &mut ImageCache,
    rng: &mut R,
) -> Result<Batch> {
    if cache.dims() != (spec.image_height, spec.image_width) {
        return Err(Error::Dimension(format!(
            "image cache holds {:?} images, batch wants {:?}",
            cache.dims(),
            (spec.image_height, spec.image_width)
        )));
    }
    let plan = BatchPlan::draw(index, spec, rng)?;
    let mut build = |records: &[usize]| -> Result<(Array4<f32>, Vec<usize>, Vec<Orientation>)> {
        let mut images = Array4::zeros((records.len(), 3, spec.image_height, spec.image_width));
        let mut labels = Vec::with_capacity(records.len());
        let mut orient = Vec::with_capacity(records.len());
        for (k, &r) in records.iter().enumerate() {
            let rec = index.record(r);
            let (img, o) = augment.apply(cache.get(index, r)?, rec.orientation, rng);
            images.slice_mut(s![k, .., .., ..]).assign(&img);
            labels.push(rec.identity);
            orient.push(o);
        }
        Ok((images, labels, orient))
    };
    let (rgb_images, rgb_labels, rgb_orient) = build(&plan.rgb)?;
    let (ir_images, ir_labels, ir_orient) = build(&plan.ir)?;
    let p = spec.images_per_id_per_modality;
    Ok(Batch { rgb_images, ir_images, rgb_labels, ir_labels, rgb_orient, ir_orient, p, q: p })
}
