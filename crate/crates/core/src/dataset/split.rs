use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetIndex, Modality};
use crate::{Error, Result};

/// Retrieval direction: query modality to gallery modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Ir2rgb,
    Rgb2ir,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::Ir2rgb, Direction::Rgb2ir];

    pub fn query_modality(self) -> Modality {
        match self {
            Self::Ir2rgb => Modality::Ir,
            Self::Rgb2ir => Modality::Rgb,
        }
    }

    pub fn gallery_modality(self) -> Modality {
        self.query_modality().other()
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ir2rgb => "ir2rgb",
            Self::Rgb2ir => "rgb2ir",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ir2rgb" => Ok(Self::Ir2rgb),
            "rgb2ir" => Ok(Self::Rgb2ir),
            other => Err(Error::Validation(format!("unknown direction `{other}` (expected ir2rgb or rgb2ir)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shot {
    Single,
    Multi,
}

impl Shot {
    pub const ALL: [Shot; 2] = [Shot::Single, Shot::Multi];
}

impl fmt::Display for Shot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Single => "single",
            Self::Multi => "multi",
        })
    }
}

impl FromStr for Shot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(Self::Single),
            "multi" => Ok(Self::Multi),
            other => Err(Error::Validation(format!("unknown shot `{other}` (expected single or multi)"))),
        }
    }
}

/// Record indices of the query and gallery sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryGallery {
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

/// Splits the test records of `index` for one protocol.
///
/// Roles follow modality only: every test record of the query modality is a
/// query; the gallery is every test record of the other modality (multi-shot)
/// or one random record per identity (single-shot), drawn in identity order.
pub fn split_query_gallery<R: Rng + ?Sized>(index: &DatasetIndex, direction: Direction, shot: Shot, rng: &mut R) -> Result<QueryGallery> {
    let (qm, gm) = (direction.query_modality(), direction.gallery_modality());
    let test = |list: &[usize]| -> Vec<usize> { list.iter().copied().filter(|&i| index.record(i).split.is_test()).collect() };
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    let mut missing = Vec::new();
    for (&id, recs) in index.id_to_records() {
        let q = test(recs.of(qm));
        let g = test(recs.of(gm));
        if q.is_empty() && g.is_empty() {
            continue;
        }
        if g.is_empty() {
            missing.push(id);
            continue;
        }
        query.extend(q);
        match shot {
            Shot::Multi => gallery.extend(g),
            Shot::Single => gallery.push(g[rng.random_range(0..g.len())]),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Validation(format!("test identities without {gm} gallery records: {missing:?}")));
    }
    if query.is_empty() {
        return Err(Error::Validation(format!("index has no {qm} test records to query with")));
    }
    Ok(QueryGallery { query, gallery })
}
