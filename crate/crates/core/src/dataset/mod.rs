//! Paired RGB/IR image datasets: indexing, synthetic generation, balanced
//! batch sampling and query/gallery protocols.
//!
//! On disk a dataset is a root directory with `rgb/` and `ir/` subdirectories
//! of `<camera>_<identity>_<imagenum>.<ext>` images plus an optional
//! `labels.tsv` sidecar carrying orientation and split labels.

mod augment;
mod image_io;
mod record;
mod sampler;
mod split;
mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub use augment::AugmentConfig;
pub use image_io::{load_image, ImageCache, PIXEL_MEAN, PIXEL_STD};
pub use record::{Modality, Orientation, SampleRecord, Split, NUM_ORIENTATIONS};
pub use sampler::{sample_balanced_batch, Batch, BatchPlan, BatchSpec};
pub use split::{split_query_gallery, Direction, QueryGallery, Shot};
pub use synth::{generate_synthetic_dataset, SynthSpec};

use crate::{Error, Result};

pub const LABELS_FILE: &str = "labels.tsv";
const LABELS_HEADER: [&str; 6] = ["path", "identity", "modality", "orientation", "camera", "split"];

/// Record indices of one identity, by modality.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdentityRecords {
    pub rgb: Vec<usize>,
    pub ir: Vec<usize>,
}

impl IdentityRecords {
    pub fn of(&self, modality: Modality) -> &[usize] {
        match modality {
            Modality::Rgb => &self.rgb,
            Modality::Ir => &self.ir,
        }
    }

    fn push(&mut self, modality: Modality, i: usize) {
        match modality {
            Modality::Rgb => self.rgb.push(i),
            Modality::Ir => self.ir.push(i),
        }
    }
}

/// Validated, immutable set of records.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    root: PathBuf,
    records: Vec<SampleRecord>,
    id_to_records: BTreeMap<usize, IdentityRecords>,
}

impl DatasetIndex {
    /// Sorts records by (identity, modality, imagenum, camera) and checks that
    /// every training identity has both modalities.
    pub fn from_records(root: impl Into<PathBuf>, mut records: Vec<SampleRecord>) -> Result<Self> {
        records.sort_by(|a, b| {
            (a.identity, a.modality, a.image_num, a.camera, &a.path).cmp(&(b.identity, b.modality, b.image_num, b.camera, &b.path))
        });
        let mut id_to_records: BTreeMap<usize, IdentityRecords> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            id_to_records.entry(r.identity).or_default().push(r.modality, i);
        }
        let mut incomplete: Vec<usize> = Vec::new();
        for (&id, recs) in &id_to_records {
            let train = |list: &[usize]| list.iter().filter(|&&i| records[i].split == Split::Train).count();
            let (rgb, ir) = (train(&recs.rgb), train(&recs.ir));
            if (rgb == 0) != (ir == 0) {
                incomplete.push(id);
            }
        }
        if !incomplete.is_empty() {
            return Err(Error::Validation(format!("training identities missing a modality: {incomplete:?}")));
        }
        Ok(Self { root: root.into(), records, id_to_records })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &SampleRecord {
        &self.records[i]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn id_to_records(&self) -> &BTreeMap<usize, IdentityRecords> {
        &self.id_to_records
    }

    /// Number of distinct identities (K).
    pub fn num_identities(&self) -> usize {
        self.id_to_records.len()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].path)
    }

    /// Record indices in `split`, in index order.
    pub fn indices_in(&self, split: impl Fn(Split) -> bool) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| split(self.records[i].split)).collect()
    }

    /// Training identities in ascending order; position is the class index
    /// used by the identity classifier.
    pub fn train_identities(&self) -> Vec<usize> {
        self.id_to_records
            .iter()
            .filter(|(_, r)| r.rgb.iter().chain(&r.ir).any(|&i| self.records[i].split == Split::Train))
            .map(|(&id, _)| id)
            .collect()
    }

    /// Identity → class index over [`train_identities`](Self::train_identities).
    pub fn train_classes(&self) -> HashMap<usize, usize> {
        self.train_identities().into_iter().enumerate().map(|(c, id)| (id, c)).collect()
    }

    /// Training record indices of `identity` in `modality`.
    pub fn train_records(&self, identity: usize, modality: Modality) -> Vec<usize> {
        self.id_to_records
            .get(&identity)
            .map(|r| r.of(modality).iter().copied().filter(|&i| self.records[i].split == Split::Train).collect())
            .unwrap_or_default()
    }

    /// Writes the `labels.tsv` sidecar for the current records.
    pub fn write_labels(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "{}", LABELS_HEADER.join("\t")).expect("write to Vec");
        for r in &self.records {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                path_key(&r.path),
                r.identity,
                r.modality,
                r.orientation.class(),
                r.camera,
                r.split
            )
            .expect("write to Vec");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Forward-slash form of a relative path, used as the labels key.
fn path_key(p: &Path) -> String {
    p.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

struct LabelRow {
    identity: usize,
    modality: Modality,
    orientation: Orientation,
    camera: u32,
    split: Split,
}

fn parse_labels(path: &Path) -> Result<BTreeMap<String, LabelRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, reason: String| Error::Parse { path: path.to_path_buf(), reason: format!("line {line}: {reason}") };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end().split('\t').eq(LABELS_HEADER) => {}
        _ => return Err(bad(1, format!("expected header `{}`", LABELS_HEADER.join("\\t")))),
    }
    let mut rows = BTreeMap::new();
    for (n, line) in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != LABELS_HEADER.len() {
            return Err(bad(n + 1, format!("expected {} columns, found {}", LABELS_HEADER.len(), cols.len())));
        }
        let num = |i: usize| cols[i].parse::<u64>().map_err(|_| bad(n + 1, format!("{} `{}` is not a number", LABELS_HEADER[i], cols[i])));
        let orientation = u8::try_from(num(3)?).ok().and_then(|o| Orientation::new(o).ok());
        let row = LabelRow {
            identity: num(1)? as usize,
            modality: cols[2].parse().map_err(|e: Error| bad(n + 1, e.to_string()))?,
            orientation: orientation.ok_or_else(|| bad(n + 1, format!("orientation `{}` outside 0..8", cols[3])))?,
            camera: u32::try_from(num(4)?).map_err(|_| bad(n + 1, "camera out of range".into()))?,
            split: cols[5].parse().map_err(|e: Error| bad(n + 1, e.to_string()))?,
        };
        if rows.insert(cols[0].to_string(), row).is_some() {
            return Err(bad(n + 1, format!("duplicate path `{}`", cols[0])));
        }
    }
    Ok(rows)
}

/// Indexes a dataset directory.
///
/// Labels come from `split_file` when given, else from `<root>/labels.tsv` if
/// present. Without a labels file every record is a training record with
/// orientation 0. With one, every image must have a row and every row must
/// name an existing image whose file name agrees with it.
pub fn load_ucm_veid_index(root: &Path, split_file: Option<&Path>) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Validation(format!("dataset root {} is not a directory", root.display())));
    }
    let mut records = Vec::new();
    for modality in Modality::ALL {
        let dir = root.join(modality.dir_name());
        if !dir.is_dir() {
            continue;
        }
        let mut names = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            if !entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_file() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            if !name.starts_with('.') {
                names.push(name);
            }
        }
        names.sort();
        for name in names {
            let (camera, identity, image_num) = SampleRecord::parse_file_name(&name).ok_or_else(|| Error::Parse {
                path: dir.join(&name),
                reason: "expected `<camera>_<identity>_<imagenum>.<ext>`".into(),
            })?;
            records.push(SampleRecord {
                path: PathBuf::from(modality.dir_name()).join(&name),
                identity,
                modality,
                orientation: Orientation::default(),
                camera,
                image_num,
                split: Split::Train,
            });
        }
    }

    let labels_path = split_file.map(Path::to_path_buf).or_else(|| Some(root.join(LABELS_FILE)).filter(|p| p.is_file()));
    if let Some(lp) = labels_path {
        let mut rows = parse_labels(&lp)?;
        let mut unlabeled = Vec::new();
        for r in &mut records {
            let key = path_key(&r.path);
            let Some(row) = rows.remove(&key) else {
                unlabeled.push(key);
                continue;
            };
            if row.identity != r.identity || row.modality != r.modality || row.camera != r.camera {
                return Err(Error::Validation(format!("{}: labels disagree with file name `{key}`", lp.display())));
            }
            r.orientation = row.orientation;
            r.split = row.split;
        }
        if !unlabeled.is_empty() {
            return Err(Error::Validation(format!("{}: no labels for {unlabeled:?}", lp.display())));
        }
        if let Some(missing) = rows.keys().next() {
            return Err(Error::Validation(format!("{}: labels name missing image `{missing}`", lp.display())));
        }
    }
    DatasetIndex::from_records(root, records)
}
