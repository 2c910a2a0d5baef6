use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ablation_grid, run_dir, train, TrainConfig};
use crate::dataset::{DatasetIndex, Direction, Shot};
use crate::decouple::DecoupleVariant;
use crate::losses::PerTerm;
use crate::metrics::{default_seeds, EvalOptions};
use crate::Result;

/// Rank-1/10/20 and mAP of one protocol, averaged over training seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolScores {
    pub rank1: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub enable: PerTerm<bool>,
    pub single: ProtocolScores,
    pub multi: ProtocolScores,
    /// Single-shot mAP of each training seed.
    pub per_seed_map: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub direction: Direction,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Fixed-width text rendering, percentages with two decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mark = |b: bool| if b { "x" } else { " " };
        let _ = writeln!(s, "{} over training seeds {:?}", self.direction, self.seeds);
        let _ = writeln!(
            s,
            "{:<9}{:^5}{:^5}{:^5}| {:>7}{:>7}{:>7}{:>7} | {:>7}{:>7}{:>7}{:>7}",
            "config", "Lwr", "LR", "LC'", "r1", "r10", "r20", "mAP", "r1", "r10", "r20", "mAP"
        );
        for r in &self.rows {
            let p = |x: f64| format!("{:>7.2}", 100.0 * x);
            let _ = writeln!(
                s,
                "{:<9}{:^5}{:^5}{:^5}| {}{}{}{} | {}{}{}{}",
                r.name,
                mark(r.enable.wr),
                mark(r.enable.orient),
                mark(r.enable.centroid),
                p(r.single.rank1),
                p(r.single.rank10),
                p(r.single.rank20),
                p(r.single.map),
                p(r.multi.rank1),
                p(r.multi.rank10),
                p(r.multi.rank20),
                p(r.multi.map)
            );
        }
        s
    }
}

/// Config of one grid row. Rows without the orientation task do not
/// decouple, so `μ` is the whole feature.
pub fn ablation_config(base: &TrainConfig, enable: PerTerm<bool>, seed: u64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.loss.enable = enable;
    cfg.seed = seed;
    if !enable.orient {
        cfg.decouple.variant = DecoupleVariant::None;
    }
    cfg
}

fn scores(cmc: &[f64], map: f64) -> ProtocolScores {
    let at = |k: usize| cmc.get(k - 1).or(cmc.last()).copied().unwrap_or(0.0);
    ProtocolScores { rank1: at(1), rank10: at(10), rank20: at(20), map }
}

fn mean_scores(v: &[ProtocolScores]) -> ProtocolScores {
    let n = v.len().max(1) as f64;
    let avg = |f: fn(&ProtocolScores) -> f64| v.iter().map(f).sum::<f64>() / n;
    ProtocolScores { rank1: avg(|s| s.rank1), rank10: avg(|s| s.rank10), rank20: avg(|s| s.rank20), map: avg(|s| s.map) }
}

/// Trains every grid row for every seed under `out_dir` and evaluates
/// single- and multi-shot retrieval in `direction`.
pub fn run_ablation(base: &TrainConfig, index: &DatasetIndex, out_dir: &Path, seeds: &[u64], direction: Direction) -> Result<AblationTable> {
    let opts = EvalOptions::default();
    let mut rows = Vec::new();
    for (name, enable) in ablation_grid() {
        let (mut single, mut multi, mut per_seed_map) = (Vec::new(), Vec::new(), Vec::new());
        for &seed in seeds {
            let cfg = ablation_config(base, enable, seed);
            log::info!("ablation row {name}, seed {seed}");
            let mut t = train(cfg, index, &run_dir(out_dir, name, seed))?;
            let s = t.evaluate(index, direction, Shot::Single, &default_seeds(), &opts)?;
            let m = t.evaluate(index, direction, Shot::Multi, &[], &opts)?;
            per_seed_map.push(s.map);
            single.push(scores(&s.cmc, s.map));
            multi.push(scores(&m.cmc, m.map));
        }
        rows.push(AblationRow { name: name.to_string(), enable, single: mean_scores(&single), multi: mean_scores(&multi), per_seed_map });
    }
    Ok(AblationTable { direction, seeds: seeds.to_vec(), rows })
}
