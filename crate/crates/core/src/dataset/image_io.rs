use std::collections::HashMap;
use std::path::Path;

use image::imageops::FilterType;
use ndarray::Array3;

use super::DatasetIndex;
use crate::{Error, Result};

/// Per-channel normalization applied after scaling pixels to `[0, 1]`.
pub const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Reads an image as a normalized `[3, height, width]` array, resizing if
/// needed. Grayscale images are replicated across the three channels.
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let mut rgb = img.to_rgb8();
    if rgb.height() as usize != height || rgb.width() as usize != width {
        rgb = image::imageops::resize(&rgb, width as u32, height as u32, FilterType::Triangle);
    }
    Ok(Array3::from_shape_fn((3, height, width), |(c, y, x)| {
        let v = rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0;
        (v - PIXEL_MEAN[c]) / PIXEL_STD[c]
    }))
}

/// Decoded, resized images keyed by record index.
#[derive(Debug, Clone, Default)]
pub struct ImageCache {
    height: usize,
    width: usize,
    images: HashMap<usize, Array3<f32>>,
}

impl ImageCache {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, images: HashMap::new() }
    }

    /// Decodes every listed record up front.
    pub fn preload(index: &DatasetIndex, records: &[usize], height: usize, width: usize) -> Result<Self> {
        let mut cache = Self::new(height, width);
        for &i in records {
            cache.get(index, i)?;
        }
        Ok(cache)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&mut self, index: &DatasetIndex, record: usize) -> Result<&Array3<f32>> {
        if !self.images.contains_key(&record) {
            let img = load_image(&index.image_path(record), self.height, self.width)?;
            self.images.insert(record, img);
        }
        Ok(&self.images[&record])
    }
}
