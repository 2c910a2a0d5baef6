//! Retrieval evaluation: distances, CMC, mAP and the shot × direction
//! protocol grid.

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{split_query_gallery, DatasetIndex, Direction, Shot};
use crate::{Error, Result};

/// Euclidean distances `[nq, ng]`, accumulated in f64.
pub fn pairwise_distances(query: ArrayView2<'_, f32>, gallery: ArrayView2<'_, f32>) -> Result<Array2<f64>> {
    if query.ncols() != gallery.ncols() {
        return Err(Error::Dimension(format!("query features are {}-d, gallery {}-d", query.ncols(), gallery.ncols())));
    }
    let mut out = Array2::zeros((query.nrows(), gallery.nrows()));
    for (i, q) in query.rows().into_iter().enumerate() {
        for (j, g) in gallery.rows().into_iter().enumerate() {
            let s: f64 = q.iter().zip(g).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            out[[i, j]] = s.sqrt();
        }
    }
    Ok(out)
}

/// Gallery order for one query: ascending distance, ties by gallery index.
fn ranking(row: ndarray::ArrayView1<'_, f64>, keep: &[bool]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).filter(|&j| keep[j]).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    order
}

fn check(dist: &Array2<f64>, query_ids: &[usize], gallery_ids: &[usize]) -> Result<()> {
    if dist.dim() != (query_ids.len(), gallery_ids.len()) {
        return Err(Error::Dimension(format!(
            "distance matrix {:?} for {} queries and {} gallery items",
            dist.dim(),
            query_ids.len(),
            gallery_ids.len()
        )));
    }
    if query_ids.is_empty() {
        return Err(Error::Validation("no queries".into()));
    }
    Ok(())
}

/// Positive flags of each query's ranked gallery, honouring `mask[q][j]`.
fn ranked_hits(dist: &Array2<f64>, query_ids: &[usize], gallery_ids: &[usize], mask: Option<&Array2<bool>>) -> Result<Vec<Vec<bool>>> {
    check(dist, query_ids, gallery_ids)?;
    let all = vec![true; gallery_ids.len()];
    let mut out = Vec::with_capacity(query_ids.len());
    for (q, &qid) in query_ids.iter().enumerate() {
        let keep: Vec<bool> = match mask {
            Some(m) => m.row(q).to_vec(),
            None => all.clone(),
        };
        let hits: Vec<bool> = ranking(dist.row(q), &keep).into_iter().map(|j| gallery_ids[j] == qid).collect();
        if !hits.contains(&true) {
            return Err(Error::Validation(format!("query {q} (identity {qid}) has no match in the gallery")));
        }
        out.push(hits);
    }
    Ok(out)
}

fn cmc_from_hits(hits: &[Vec<bool>], max_rank: usize) -> Vec<f64> {
    let mut cmc = vec![0.0; max_rank];
    for h in hits {
        let first = h.iter().position(|&x| x).expect("checked: every query has a match");
        for c in cmc.iter_mut().skip(first) {
            *c += 1.0;
        }
    }
    cmc.iter().map(|c| c / hits.len() as f64).collect()
}

fn ap_from_hits(hits: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (p, &h) in hits.iter().enumerate() {
        if h {
            found += 1;
            sum += found as f64 / (p + 1) as f64;
        }
    }
    sum / found as f64
}

/// Fraction of queries with a correct match within the first `k` results,
/// for `k = 1..=max_rank`.
pub fn cmc_curve(dist: &Array2<f64>, query_ids: &[usize], gallery_ids: &[usize], max_rank: usize) -> Result<Vec<f64>> {
    Ok(cmc_from_hits(&ranked_hits(dist, query_ids, gallery_ids, None)?, max_rank))
}

/// Mean over queries of average precision.
pub fn mean_average_precision(dist: &Array2<f64>, query_ids: &[usize], gallery_ids: &[usize]) -> Result<f64> {
    let hits = ranked_hits(dist, query_ids, gallery_ids, None)?;
    Ok(hits.iter().map(|h| ap_from_hits(h)).sum::<f64>() / hits.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub max_rank: usize,
    /// Drop gallery items sharing both identity and camera with the query.
    pub exclude_same_camera: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { max_rank: 20, exclude_same_camera: false }
    }
}

/// Default single-shot gallery seeds.
pub fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub cmc: Vec<f64>,
    pub map: f64,
}

/// Result of one (direction, shot) protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub direction: Direction,
    pub shot: Shot,
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_queries: usize,
    pub num_gallery: usize,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_seed: Option<Vec<SeedResult>>,
}

fn fixed(out: &mut String, v: f64) {
    write!(out, "{v:.6}").expect("write to String");
}

fn fixed_list(out: &mut String, vs: &[f64]) {
    out.push('[');
    for (i, &v) in vs.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        fixed(out, v);
    }
    out.push(']');
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[k - 1]
    }

    /// JSON with a fixed key order and every float printed to 6 decimals.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{\n");
        write!(s, "  \"direction\": \"{}\",\n  \"shot\": \"{}\",\n  \"cmc\": ", self.direction, self.shot).unwrap();
        fixed_list(&mut s, &self.cmc);
        s.push_str(",\n  \"map\": ");
        fixed(&mut s, self.map);
        write!(s, ",\n  \"num_queries\": {},\n  \"num_gallery\": {},\n  \"seeds\": {:?}", self.num_queries, self.num_gallery, self.seeds).unwrap();
        if let Some(per) = &self.per_seed {
            s.push_str(",\n  \"per_seed\": [");
            for (i, r) in per.iter().enumerate() {
                s.push_str(if i == 0 { "\n    " } else { ",\n    " });
                write!(s, "{{\"seed\": {}, \"cmc\": ", r.seed).unwrap();
                fixed_list(&mut s, &r.cmc);
                s.push_str(", \"map\": ");
                fixed(&mut s, r.map);
                s.push('}');
            }
            s.push_str("\n  ]");
        }
        s.push_str("\n}\n");
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Features for a set of records, one row per record.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    pub features: Array2<f32>,
    row_of: HashMap<usize, usize>,
}

impl FeatureBank {
    pub fn new(records: &[usize], features: Array2<f32>) -> Result<Self> {
        if records.len() != features.nrows() {
            return Err(Error::Dimension(format!("{} records for {} feature rows", records.len(), features.nrows())));
        }
        Ok(Self { row_of: records.iter().enumerate().map(|(r, &i)| (i, r)).collect(), features })
    }

    fn select(&self, records: &[usize]) -> Result<Array2<f32>> {
        let rows: Vec<usize> = records
            .iter()
            .map(|i| self.row_of.get(i).copied().ok_or_else(|| Error::Validation(format!("no feature for record {i}"))))
            .collect::<Result<_>>()?;
        Ok(self.features.select(ndarray::Axis(0), &rows))
    }
}

/// Anything that maps dataset records to retrieval features.
pub trait Embedder {
    fn embed(&mut self, index: &DatasetIndex, records: &[usize]) -> Result<Array2<f32>>;
}

fn evaluate_once(index: &DatasetIndex, bank: &FeatureBank, query: &[usize], gallery: &[usize], opts: &EvalOptions) -> Result<(Vec<f64>, f64)> {
    let dist = pairwise_distances(bank.select(query)?.view(), bank.select(gallery)?.view())?;
    let qids: Vec<usize> = query.iter().map(|&i| index.record(i).identity).collect();
    let gids: Vec<usize> = gallery.iter().map(|&i| index.record(i).identity).collect();
    let mask = opts.exclude_same_camera.then(|| {
        Array2::from_shape_fn((query.len(), gallery.len()), |(q, g)| {
            let (a, b) = (index.record(query[q]), index.record(gallery[g]));
            !(a.identity == b.identity && a.camera == b.camera)
        })
    });
    let hits = ranked_hits(&dist, &qids, &gids, mask.as_ref())?;
    let map = hits.iter().map(|h| ap_from_hits(h)).sum::<f64>() / hits.len() as f64;
    Ok((cmc_from_hits(&hits, opts.max_rank), map))
}

/// Runs one protocol on precomputed features. Single-shot draws one gallery
/// per seed and averages; multi-shot runs once and records no seeds.
pub fn evaluate_features(
    index: &DatasetIndex,
    bank: &FeatureBank,
    direction: Direction,
    shot: Shot,
    seeds: &[u64],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if opts.max_rank == 0 {
        return Err(Error::Config("max_rank must be at least 1".into()));
    }
    match shot {
        Shot::Multi => {
            let split = split_query_gallery(index, direction, shot, &mut ChaCha8Rng::seed_from_u64(0))?;
            let (cmc, map) = evaluate_once(index, bank, &split.query, &split.gallery, opts)?;
            Ok(EvalReport {
                direction,
                shot,
                cmc,
                map,
                num_queries: split.query.len(),
                num_gallery: split.gallery.len(),
                seeds: Vec::new(),
                per_seed: None,
            })
        }
        Shot::Single => {
            if seeds.is_empty() {
                return Err(Error::Config("single-shot evaluation needs at least one seed".into()));
            }
            let mut per = Vec::with_capacity(seeds.len());
            let (mut nq, mut ng) = (0, 0);
            for &seed in seeds {
                let split = split_query_gallery(index, direction, shot, &mut ChaCha8Rng::seed_from_u64(seed))?;
                let (cmc, map) = evaluate_once(index, bank, &split.query, &split.gallery, opts)?;
                (nq, ng) = (split.query.len(), split.gallery.len());
                per.push(SeedResult { seed, cmc, map });
            }
            let n = per.len() as f64;
            let cmc = (0..opts.max_rank).map(|k| per.iter().map(|r| r.cmc[k]).sum::<f64>() / n).collect();
            let map = per.iter().map(|r| r.map).sum::<f64>() / n;
            Ok(EvalReport { direction, shot, cmc, map, num_queries: nq, num_gallery: ng, seeds: seeds.to_vec(), per_seed: Some(per) })
        }
    }
}

/// Test records of `index` (query and gallery splits).
pub fn test_records(index: &DatasetIndex) -> Vec<usize> {
    index.indices_in(|s| s.is_test())
}

/// Embeds every test record once, then evaluates one protocol.
pub fn evaluate_protocol<E: Embedder + ?Sized>(
    embedder: &mut E,
    index: &DatasetIndex,
    direction: Direction,
    shot: Shot,
    seeds: &[u64],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let records = test_records(index);
    let bank = FeatureBank::new(&records, embedder.embed(index, &records)?)?;
    evaluate_features(index, &bank, direction, shot, seeds, opts)
}
