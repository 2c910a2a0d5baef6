use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Ir,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Rgb, Modality::Ir];

    pub fn other(self) -> Self {
        match self {
            Self::Rgb => Self::Ir,
            Self::Ir => Self::Rgb,
        }
    }

    /// Subdirectory holding this modality's images.
    pub fn dir_name(self) -> &'static str {
        match self {
            Self::Rgb => "rgb",
            Self::Ir => "ir",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Self::Rgb),
            "ir" => Ok(Self::Ir),
            other => Err(Error::Validation(format!("unknown modality `{other}`"))),
        }
    }
}

/// Number of discrete orientation classes.
pub const NUM_ORIENTATIONS: usize = 8;

/// Heading class in `0..8`: 0 is front (vehicle nose towards the bottom of
/// the frame), then clockwise in 45° steps.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Orientation(u8);

impl Orientation {
    pub fn new(class: u8) -> Result<Self> {
        if (class as usize) < NUM_ORIENTATIONS {
            Ok(Self(class))
        } else {
            Err(Error::Validation(format!("orientation {class} outside 0..{NUM_ORIENTATIONS}")))
        }
    }

    pub fn class(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Heading in degrees, clockwise from front.
    pub fn degrees(self) -> f64 {
        self.0 as f64 * 360.0 / NUM_ORIENTATIONS as f64
    }

    /// Class after a left-right mirror of the image.
    pub fn mirrored(self) -> Self {
        Self(((NUM_ORIENTATIONS - self.index()) % NUM_ORIENTATIONS) as u8)
    }
}

impl TryFrom<u8> for Orientation {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Orientation> for u8 {
    fn from(o: Orientation) -> u8 {
        o.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn is_test(self) -> bool {
        !matches!(self, Split::Train)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Query => "query",
            Self::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "query" => Ok(Self::Query),
            "gallery" => Ok(Self::Gallery),
            other => Err(Error::Validation(format!("unknown split `{other}`"))),
        }
    }
}

/// One image with its labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Path relative to the dataset root, e.g. `rgb/1_7_0.png`.
    pub path: PathBuf,
    pub identity: usize,
    pub modality: Modality,
    pub orientation: Orientation,
    pub camera: u32,
    pub image_num: u32,
    pub split: Split,
}

impl SampleRecord {
    /// Canonical file name `<camera>_<identity>_<imagenum>.<ext>`.
    pub fn file_name(camera: u32, identity: usize, image_num: u32, ext: &str) -> String {
        format!("{camera}_{identity}_{image_num}.{ext}")
    }

    /// Parses `<camera>_<identity>_<imagenum>.<ext>`.
    pub fn parse_file_name(name: &str) -> Option<(u32, usize, u32)> {
        let (stem, ext) = name.rsplit_once('.')?;
        if ext.is_empty() {
            return None;
        }
        let mut parts = stem.split('_');
        let camera = parts.next()?.parse().ok()?;
        let identity = parts.next()?.parse().ok()?;
        let image_num = parts.next()?.parse().ok()?;
        parts.next().is_none().then_some((camera, identity, image_num))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_names_parse() {
        assert_eq!(SampleRecord::parse_file_name("1_7_0.png"), Some((1, 7, 0)));
        assert_eq!(SampleRecord::parse_file_name("1_7.png"), None);
        assert_eq!(SampleRecord::parse_file_name("1_7_0_2.png"), None);
        assert_eq!(SampleRecord::parse_file_name("a_7_0.png"), None);
        assert_eq!(SampleRecord::parse_file_name("1_7_0"), None);
    }

    #[test]
    fn orientation_bounds_and_mirror() {
        assert!(Orientation::new(8).is_err());
        let o = Orientation::new(1).unwrap();
        assert_eq!(o.mirrored().class(), 7);
        assert_eq!(Orientation::new(0).unwrap().mirrored().class(), 0);
        assert_eq!(Orientation::new(4).unwrap().mirrored().class(), 4);
        for c in 0..8 {
            let o = Orientation::new(c).unwrap();
            assert_eq!(o.mirrored().mirrored(), o);
        }
    }
}
