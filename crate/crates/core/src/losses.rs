//! Training objectives and their composition.
//!
//! Every loss takes graph variables and returns a scalar variable, so the
//! same code serves f32 training and f64 gradient checks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};

use crate::dataset::NUM_ORIENTATIONS;
use crate::nn::{Linear, Session};
use crate::tensor::{Graph, Real, Var};
use crate::{Error, Result};

macro_rules! string_enum {
    ($name:ident, $key:literal { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", $key, " `{}` (expected ", $($text, " "),+, ")"),
                        other
                    ))),
                }
            }
        }
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text,)+ })
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}
string_enum!(Reduction, "loss.reduction" { Sum => "sum", Mean => "mean" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidMode {
    /// Each sample is pulled to its own modality's centroid.
    SingleModality,
    /// Samples of both modalities are pulled to the averaged centroid.
    CrossModality,
}
string_enum!(CentroidMode, "loss.centroid_mode" { SingleModality => "single_modality", CrossModality => "cross_modality" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    SquaredEuclidean,
    Euclidean,
}
string_enum!(Similarity, "loss.similarity" { SquaredEuclidean => "squared_euclidean", Euclidean => "euclidean" });

/// Which feature the triplet term compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletInput {
    Z,
    Mu,
}
string_enum!(TripletInput, "loss.triplet_input" { Z => "z", Mu => "mu" });

/// How positives and negatives are chosen per anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletMining {
    /// Nearest cross-modality positive, farthest negative.
    Paper,
    /// Farthest positive, nearest negative (batch-hard).
    Hard,
}
string_enum!(TripletMining, "loss.triplet_mining" { Paper => "paper", Hard => "hard" });

/// The five terms of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Wr,
    Id,
    Tri,
    Orient,
    Centroid,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [LossTerm::Wr, LossTerm::Id, LossTerm::Tri, LossTerm::Orient, LossTerm::Centroid];

    pub fn name(self) -> &'static str {
        match self {
            Self::Wr => "wr",
            Self::Id => "id",
            Self::Tri => "tri",
            Self::Orient => "orient",
            Self::Centroid => "centroid",
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| Error::Config(format!("unknown loss term `{s}`")))
    }
}

/// Per-term flag or coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerTerm<T> {
    pub wr: T,
    pub id: T,
    pub tri: T,
    pub orient: T,
    pub centroid: T,
}

impl<T: Copy> PerTerm<T> {
    pub fn splat(v: T) -> Self {
        Self { wr: v, id: v, tri: v, orient: v, centroid: v }
    }

    pub fn get(&self, t: LossTerm) -> T {
        match t {
            LossTerm::Wr => self.wr,
            LossTerm::Id => self.id,
            LossTerm::Tri => self.tri,
            LossTerm::Orient => self.orient,
            LossTerm::Centroid => self.centroid,
        }
    }

    pub fn set(&mut self, t: LossTerm, v: T) {
        match t {
            LossTerm::Wr => self.wr = v,
            LossTerm::Id => self.id = v,
            LossTerm::Tri => self.tri = v,
            LossTerm::Orient => self.orient = v,
            LossTerm::Centroid => self.centroid = v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub weights: PerTerm<f64>,
    pub enable: PerTerm<bool>,
    pub centroid_mode: CentroidMode,
    pub similarity: Similarity,
    pub reduction: Reduction,
    pub triplet_input: TripletInput,
    pub triplet_mining: TripletMining,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.5,
            weights: PerTerm::splat(1.0),
            enable: PerTerm::splat(true),
            centroid_mode: CentroidMode::CrossModality,
            similarity: Similarity::SquaredEuclidean,
            reduction: Reduction::Sum,
            triplet_input: TripletInput::Mu,
            triplet_mining: TripletMining::Paper,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("loss.margin must be a finite value >= 0, got {}", self.margin)));
        }
        for t in LossTerm::ALL {
            let w = self.weights.get(t);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss.weight.{t} must be a finite value >= 0, got {w}")));
            }
        }
        Ok(())
    }

    /// Baseline objective: identity and triplet terms only.
    pub fn baseline() -> Self {
        Self { enable: PerTerm { wr: false, id: true, tri: true, orient: false, centroid: false }, ..Self::default() }
    }

    pub fn enabled_terms(&self) -> Vec<LossTerm> {
        LossTerm::ALL.into_iter().filter(|&t| self.enable.get(t)).collect()
    }
}

fn reduce<'g, F: Real>(per_item: Var<'g, F>, reduction: Reduction) -> Var<'g, F> {
    match reduction {
        Reduction::Sum => per_item.sum(),
        Reduction::Mean => per_item.mean(),
    }
}

fn check_labels(labels: &[usize], classes: usize, what: &str) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(l) => Err(Error::Validation(format!("{what} label {l} outside 0..{classes}"))),
        None => Ok(()),
    }
}

fn rows<F: Real>(x: &Var<'_, F>, what: &str) -> Result<(usize, usize)> {
    match x.shape()[..] {
        [n, d] => Ok((n, d)),
        ref other => Err(Error::Dimension(format!("{what}: expected [n, d], got {other:?}"))),
    }
}

/// Softmax cross entropy of `logits` `[n, k]` against `labels`.
pub fn cross_entropy_loss<'g, F: Real>(logits: Var<'g, F>, labels: &[usize], reduction: Reduction) -> Result<Var<'g, F>> {
    let (n, k) = rows(&logits, "cross entropy logits")?;
    if n != labels.len() {
        return Err(Error::Dimension(format!("{n} logit rows for {} labels", labels.len())));
    }
    check_labels(labels, k, "class")?;
    Ok(reduce(logits.cross_entropy(labels), reduction))
}

/// `L_ID`: identity cross entropy over the `[rgb; ir]` batch of `μ` features.
pub fn id_loss<'g, F: Real>(s: &Session<'g, '_, F>, head: &Linear, mu: Var<'g, F>, labels: &[usize], reduction: Reduction) -> Result<Var<'g, F>> {
    check_labels(labels, head.out_features(s.store()), "identity")?;
    cross_entropy_loss(head.forward(s, mu), labels, reduction)
}

/// `L_R`: orientation cross entropy over the `[rgb; ir]` batch of `υ` features.
pub fn orientation_loss<'g, F: Real>(
    s: &Session<'g, '_, F>,
    head: &Linear,
    upsilon: Var<'g, F>,
    orient: &[usize],
    reduction: Reduction,
) -> Result<Var<'g, F>> {
    check_labels(orient, NUM_ORIENTATIONS, "orientation")?;
    cross_entropy_loss(head.forward(s, upsilon), orient, reduction)
}

/// Per-anchor positive and negative columns of a distance matrix.
fn mine<F: Real>(dist: &Array2<F>, anchors: &[usize], others: &[usize], mining: TripletMining) -> Result<(Vec<usize>, Vec<usize>)> {
    let (mut pos, mut neg) = (Vec::with_capacity(anchors.len()), Vec::with_capacity(anchors.len()));
    for (a, &la) in anchors.iter().enumerate() {
        let mut best_pos: Option<usize> = None;
        let mut best_neg: Option<usize> = None;
        for (j, &lj) in others.iter().enumerate() {
            let d = dist[[a, j]];
            if lj == la {
                let better = match (best_pos, mining) {
                    (None, _) => true,
                    (Some(p), TripletMining::Paper) => d < dist[[a, p]],
                    (Some(p), TripletMining::Hard) => d > dist[[a, p]],
                };
                if better {
                    best_pos = Some(j);
                }
            } else {
                let better = match (best_neg, mining) {
                    (None, _) => true,
                    (Some(n), TripletMining::Paper) => d > dist[[a, n]],
                    (Some(n), TripletMining::Hard) => d < dist[[a, n]],
                };
                if better {
                    best_neg = Some(j);
                }
            }
        }
        match (best_pos, best_neg) {
            (Some(p), Some(n)) => {
                pos.push(a * others.len() + p);
                neg.push(a * others.len() + n);
            }
            (None, _) => return Err(Error::Validation(format!("identity {la} has no cross-modality positive"))),
            (_, None) => return Err(Error::Validation(format!("identity {la} has no cross-modality negative"))),
        }
    }
    Ok((pos, neg))
}

/// `L_tri`: for each anchor in either modality,
/// `[ρ + d(anchor, positive) − d(anchor, negative)]₊` against the other
/// modality. Ties pick the first index.
pub fn cross_modality_triplet<'g, F: Real>(
    z_rgb: Var<'g, F>,
    z_ir: Var<'g, F>,
    labels_rgb: &[usize],
    labels_ir: &[usize],
    margin: f64,
    mining: TripletMining,
    reduction: Reduction,
) -> Result<Var<'g, F>> {
    let (m, d1) = rows(&z_rgb, "triplet rgb features")?;
    let (n, d2) = rows(&z_ir, "triplet ir features")?;
    if d1 != d2 || m != labels_rgb.len() || n != labels_ir.len() {
        return Err(Error::Dimension(format!(
            "triplet: rgb [{m}, {d1}] with {} labels, ir [{n}, {d2}] with {} labels",
            labels_rgb.len(),
            labels_ir.len()
        )));
    }
    let mut hinges = Vec::with_capacity(2);
    for (a, b, la, lb) in [(z_rgb, z_ir, labels_rgb, labels_ir), (z_ir, z_rgb, labels_ir, labels_rgb)] {
        let dist = a.pairwise_dist(b);
        let values = dist.value().view().into_dimensionality::<ndarray::Ix2>().expect("2-d distances").to_owned();
        let (pos, neg) = mine(&values, la, lb, mining)?;
        let flat = dist.reshape(&[values.len()]);
        let h = flat.gather(pos).sub(flat.gather(neg)).add_scalar(F::lit(margin)).relu();
        hinges.push(h);
    }
    Ok(reduce(Var::concat(&hinges, 0), reduction))
}

/// Per-identity means of a feature block, in ascending identity order.
#[derive(Debug, Clone)]
pub struct Centroids<'g, F: Real> {
    pub identities: Vec<usize>,
    /// `[identities.len(), d]`.
    pub values: Var<'g, F>,
}

impl<F: Real> Centroids<'_, F> {
    pub fn position(&self, identity: usize) -> Option<usize> {
        self.identities.binary_search(&identity).ok()
    }
}

/// Membership matrix `[k, n]` with `1/count` in the cells of each identity.
fn averaging_matrix<F: Real>(identities: &[usize], labels: &[usize]) -> ArrayD<F> {
    let mut a = Array2::<F>::zeros((identities.len(), labels.len()));
    for (k, &id) in identities.iter().enumerate() {
        let count = labels.iter().filter(|&&l| l == id).count();
        for (i, &l) in labels.iter().enumerate() {
            if l == id {
                a[[k, i]] = F::one() / F::lit(count as f64);
            }
        }
    }
    a.into_dyn()
}

/// Per-identity arithmetic means of one modality's `μ` features.
pub fn modality_centroids<'g, F: Real>(mu: Var<'g, F>, labels: &[usize]) -> Result<Centroids<'g, F>> {
    let (n, _) = rows(&mu, "centroid features")?;
    if n != labels.len() {
        return Err(Error::Dimension(format!("{n} feature rows for {} labels", labels.len())));
    }
    let mut identities = labels.to_vec();
    identities.sort_unstable();
    identities.dedup();
    let avg = mu.graph.constant(averaging_matrix(&identities, labels));
    Ok(Centroids { values: avg.matmul(mu), identities })
}

/// `½(μ̄_rgb + μ̄_ir)` per identity; both inputs must cover the same identities.
pub fn cross_modality_centroid<'g, F: Real>(rgb: &Centroids<'g, F>, ir: &Centroids<'g, F>) -> Result<Centroids<'g, F>> {
    if rgb.identities != ir.identities {
        let missing: Vec<_> = rgb
            .identities
            .iter()
            .filter(|id| ir.position(**id).is_none())
            .chain(ir.identities.iter().filter(|id| rgb.position(**id).is_none()))
            .collect();
        return Err(Error::Validation(format!("identities missing one modality's centroid: {missing:?}")));
    }
    Ok(Centroids { identities: rgb.identities.clone(), values: rgb.values.add(ir.values).scale(F::lit(0.5)) })
}

/// `Σ s(μ_i, centroid of label_i)` with `s` the chosen similarity.
pub fn centroid_similarity_loss<'g, F: Real>(
    mu: Var<'g, F>,
    labels: &[usize],
    centroids: &Centroids<'g, F>,
    similarity: Similarity,
    reduction: Reduction,
) -> Result<Var<'g, F>> {
    let (n, _) = rows(&mu, "similarity features")?;
    if n != labels.len() {
        return Err(Error::Dimension(format!("{n} feature rows for {} labels", labels.len())));
    }
    let mut assign = Array2::<F>::zeros((n, centroids.identities.len()));
    for (i, &l) in labels.iter().enumerate() {
        let k = centroids.position(l).ok_or_else(|| Error::Validation(format!("no centroid for identity {l}")))?;
        assign[[i, k]] = F::one();
    }
    let target = mu.graph.constant(assign.into_dyn()).matmul(centroids.values);
    let diff = mu.sub(target);
    let per = match similarity {
        Similarity::SquaredEuclidean => diff.row_sum_sq(),
        Similarity::Euclidean => diff.row_norms(),
    };
    Ok(reduce(per, reduction))
}

/// `L_C` (single-modality centroids) or `L_C′` (cross-modality centroid).
pub fn centroid_loss<'g, F: Real>(
    mu_rgb: Var<'g, F>,
    labels_rgb: &[usize],
    mu_ir: Var<'g, F>,
    labels_ir: &[usize],
    mode: CentroidMode,
    similarity: Similarity,
    reduction: Reduction,
) -> Result<Var<'g, F>> {
    let c_rgb = modality_centroids(mu_rgb, labels_rgb)?;
    let c_ir = modality_centroids(mu_ir, labels_ir)?;
    let (t_rgb, t_ir) = match mode {
        CentroidMode::SingleModality => (c_rgb, c_ir),
        CentroidMode::CrossModality => {
            let both = cross_modality_centroid(&c_rgb, &c_ir)?;
            (both.clone(), both)
        }
    };
    let per = |mu, labels, c| centroid_similarity_loss(mu, labels, c, similarity, Reduction::Sum);
    let total = per(mu_rgb, labels_rgb, &t_rgb)?.add(per(mu_ir, labels_ir, &t_ir)?);
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total.scale(F::lit(1.0 / (labels_rgb.len() + labels_ir.len()) as f64)),
    })
}

/// Evaluated loss terms; `None` for disabled ones.
#[derive(Debug, Clone, Copy)]
pub struct LossParts<'g, F: Real> {
    pub wr: Option<Var<'g, F>>,
    pub id: Option<Var<'g, F>>,
    pub tri: Option<Var<'g, F>>,
    pub orient: Option<Var<'g, F>>,
    pub centroid: Option<Var<'g, F>>,
}

impl<'g, F: Real> LossParts<'g, F> {
    pub fn empty() -> Self {
        Self { wr: None, id: None, tri: None, orient: None, centroid: None }
    }

    pub fn get(&self, t: LossTerm) -> Option<Var<'g, F>> {
        match t {
            LossTerm::Wr => self.wr,
            LossTerm::Id => self.id,
            LossTerm::Tri => self.tri,
            LossTerm::Orient => self.orient,
            LossTerm::Centroid => self.centroid,
        }
    }
}

/// Weighted value of each present term, in [`LossTerm::ALL`] order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: BTreeMap<LossTerm, f64>,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.terms.values().sum()
    }
}

/// Weighted sum of the present terms. A non-finite term aborts with a
/// divergence error naming it and `step`.
pub fn total_loss<'g, F: Real>(graph: &'g Graph<F>, parts: &LossParts<'g, F>, weights: &PerTerm<f64>, step: u64) -> Result<(Var<'g, F>, LossBreakdown)> {
    let mut total: Option<Var<'g, F>> = None;
    let mut breakdown = LossBreakdown::default();
    for t in LossTerm::ALL {
        let Some(v) = parts.get(t) else { continue };
        let raw = v.item().to_f64().unwrap_or(f64::NAN);
        if !raw.is_finite() {
            return Err(Error::Divergence { term: t.name().into(), step });
        }
        let w = weights.get(t);
        let term = if w == 1.0 { v } else { v.scale(F::lit(w)) };
        breakdown.terms.insert(t, term.item().to_f64().unwrap_or(f64::NAN));
        total = Some(match total {
            Some(acc) => acc.add(term),
            None => term,
        });
    }
    Ok((total.unwrap_or_else(|| graph.scalar(F::zero())), breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cross_entropy_examples() {
        let g = Graph::<f64>::new();
        let l = cross_entropy_loss(g.constant(array![[0.0, 0.0]].into_dyn()), &[0], Reduction::Sum).unwrap();
        assert!((l.item() - 2f64.ln()).abs() < 1e-12);
        let l = cross_entropy_loss(g.constant(array![[3f64.ln(), 0.0]].into_dyn()), &[0], Reduction::Sum).unwrap();
        assert!((l.item() - 0.287682).abs() < 1e-6);
        assert!(cross_entropy_loss(g.constant(array![[0.0, 0.0]].into_dyn()), &[2], Reduction::Sum).unwrap_err().is_validation());
    }

    #[test]
    fn triplet_mining_and_hinge_by_hand() {
        let hinge = |d: &Array2<f64>| {
            let (p, n) = mine(d, &[0], &[0, 1], TripletMining::Paper).unwrap();
            (0.5 + d[[0, p[0] % 2]] - d[[0, n[0] % 2]]).max(0.0)
        };
        assert!((hinge(&array![[1.0, 0.4]]) - 1.1).abs() < 1e-12);
        assert_eq!(hinge(&array![[0.2, 1.0]]), 0.0);
        let (p, n) = mine(&array![[1.0, 3.0, 0.5, 2.0]], &[0], &[0, 1, 0, 1], TripletMining::Paper).unwrap();
        assert_eq!((p, n), (vec![2], vec![1]));
        let (p, n) = mine(&array![[1.0, 3.0, 0.5, 2.0]], &[0], &[0, 1, 0, 1], TripletMining::Hard).unwrap();
        assert_eq!((p, n), (vec![0], vec![3]));
        assert!(mine(&array![[1.0]], &[0], &[0], TripletMining::Paper).unwrap_err().is_validation());
    }

    #[test]
    fn triplet_identical_features_give_margin_per_anchor() {
        let g = Graph::<f64>::new();
        let z = g.constant(ArrayD::from_elem(ndarray::IxDyn(&[4, 3]), 0.7));
        let l = cross_modality_triplet(z, z, &[0, 0, 1, 1], &[0, 0, 1, 1], 0.5, TripletMining::Paper, Reduction::Sum).unwrap();
        assert_eq!(l.item(), 0.5 * 8.0);
    }

    #[test]
    fn centroid_examples() {
        let g = Graph::<f64>::new();
        let rgb = g.constant(array![[0.0, 0.0]].into_dyn());
        let ir = g.constant(array![[2.0, 0.0], [4.0, 0.0]].into_dyn());
        let c = cross_modality_centroid(&modality_centroids(rgb, &[0]).unwrap(), &modality_centroids(ir, &[0, 0]).unwrap()).unwrap();
        assert_eq!(*c.values.value(), array![[1.5, 0.0]].into_dyn());

        let ir = g.constant(array![[2.0, 0.0]].into_dyn());
        let l = centroid_loss(rgb, &[0], ir, &[0], CentroidMode::CrossModality, Similarity::SquaredEuclidean, Reduction::Sum).unwrap();
        assert_eq!(l.item(), 2.0);
    }

    #[test]
    fn missing_modality_centroid_is_rejected() {
        let g = Graph::<f64>::new();
        let rgb = g.constant(array![[0.0], [1.0]].into_dyn());
        let ir = g.constant(array![[0.0]].into_dyn());
        let err = centroid_loss(rgb, &[0, 1], ir, &[0], CentroidMode::CrossModality, Similarity::SquaredEuclidean, Reduction::Sum).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn total_sums_and_flags_divergence() {
        let g = Graph::<f64>::new();
        let mut parts = LossParts::empty();
        let (t, b) = total_loss(&g, &parts, &PerTerm::splat(1.0), 0).unwrap();
        assert_eq!((t.item(), b.terms.len()), (0.0, 0));
        parts.id = Some(g.scalar(1.25));
        parts.tri = Some(g.scalar(0.5));
        let (t, b) = total_loss(&g, &parts, &PerTerm::splat(1.0), 0).unwrap();
        assert_eq!(t.item(), 1.75);
        assert_eq!(b.total(), 1.75);
        parts.orient = Some(g.scalar(f64::NAN));
        match total_loss(&g, &parts, &PerTerm::splat(1.0), 7) {
            Err(Error::Divergence { term, step }) => assert_eq!((term.as_str(), step), ("orient", 7)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_strings_round_trip() {
        for m in [CentroidMode::SingleModality, CentroidMode::CrossModality] {
            assert_eq!(m.to_string().parse::<CentroidMode>().unwrap(), m);
        }
        assert!("bogus".parse::<Reduction>().is_err());
        assert_eq!(LossConfig::baseline().enabled_terms(), vec![LossTerm::Id, LossTerm::Tri]);
    }
}
