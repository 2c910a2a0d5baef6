//! Weight restrainer: a learned affine map `a * W_rgb + b` per related
//! parameter tensor, pulled towards the IR stream's weights by a Frobenius
//! distance penalty.

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::arch::Stage;
use super::RelationPlan;
use crate::nn::{ParamId, ParamKind, ParamStore, Session};
use crate::tensor::{Real, Var};
use crate::{Error, Result};

/// How many `(a, b)` pairs a related stage gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// One pair shared by every tensor of the stage; the stage's tensors are
    /// compared jointly as one flattened weight.
    Stage,
    /// One pair per parameter tensor.
    Tensor,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage" => Ok(Self::Stage),
            "tensor" => Ok(Self::Tensor),
            other => Err(Error::Config(format!("unknown restrainer.granularity `{other}` (expected stage or tensor)"))),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Stage => "stage",
            Self::Tensor => "tensor",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestrainerConfig {
    pub init_a: f64,
    pub init_b: f64,
    pub granularity: Granularity,
}

impl Default for RestrainerConfig {
    fn default() -> Self {
        Self { init_a: 1.0, init_b: 0.0, granularity: Granularity::Tensor }
    }
}

/// One `(a, b)` pair and the RGB/IR tensor pairs it couples.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrainerGroup {
    pub stage: usize,
    pub a: ParamId,
    pub b: ParamId,
    /// `(rgb, ir)` tensor ids, in the stage's parameter order.
    pub pairs: Vec<(ParamId, ParamId)>,
}

/// All restrainer scalars of an encoder. Empty when no stage is related.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Restrainer {
    pub granularity: Option<Granularity>,
    groups: Vec<RestrainerGroup>,
}

fn scalar<F: Real>(v: f64) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(&[]), F::lit(v))
}

impl Restrainer {
    pub(crate) fn build<F: Real>(
        store: &mut ParamStore<F>,
        rgb: &[Stage],
        ir: &[Stage],
        plan: &RelationPlan,
        cfg: &RestrainerConfig,
    ) -> Self {
        let mut groups = Vec::new();
        for (rs, is) in rgb.iter().zip(ir).filter(|(rs, _)| plan.is_related(rs.index)) {
            let pairs: Vec<_> = rs.params().iter().copied().zip(is.params().iter().copied()).collect();
            let mut add = |label: String, pairs: Vec<(ParamId, ParamId)>| {
                let a = store.add(format!("restrainer.stage{}.{label}.a", rs.index), ParamKind::NoDecay, scalar(cfg.init_a));
                let b = store.add(format!("restrainer.stage{}.{label}.b", rs.index), ParamKind::NoDecay, scalar(cfg.init_b));
                groups.push(RestrainerGroup { stage: rs.index, a, b, pairs });
            };
            match cfg.granularity {
                Granularity::Stage => add("all".into(), pairs),
                Granularity::Tensor => {
                    for (t, p) in pairs.into_iter().enumerate() {
                        add(format!("t{t}"), vec![p]);
                    }
                }
            }
        }
        Self { granularity: Some(cfg.granularity), groups }
    }

    pub fn groups(&self) -> &[RestrainerGroup] {
        &self.groups
    }

    pub fn scalar_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.groups.iter().flat_map(|g| [g.a, g.b])
    }

    /// `Ŵ = a·W_rgb + b` for tensor `tensor` of `stage`.
    pub fn transform<'g, F: Real>(&self, s: &Session<'g, '_, F>, stage: usize, tensor: usize) -> Result<Var<'g, F>> {
        let (group, pair) = self.locate(stage, tensor)?;
        Ok(restrainer_transform(s.param(group.a), s.param(group.b), s.param(pair.0)))
    }

    fn locate(&self, stage: usize, tensor: usize) -> Result<(&RestrainerGroup, (ParamId, ParamId))> {
        let in_stage: Vec<_> = self.groups.iter().filter(|g| g.stage == stage).collect();
        if in_stage.is_empty() {
            return Err(Error::Contract(format!("stage {stage} is not weight-related; it has no restrainer")));
        }
        let mut seen = 0;
        for g in in_stage {
            if tensor < seen + g.pairs.len() {
                return Ok((g, g.pairs[tensor - seen]));
            }
            seen += g.pairs.len();
        }
        Err(Error::Contract(format!("stage {stage} has {seen} tensors, asked for {tensor}")))
    }

    /// `L_wr`: sum over groups of the Frobenius distance between the
    /// transformed RGB weights and the IR weights. Zero when nothing is related.
    pub fn loss<'g, F: Real>(&self, s: &Session<'g, '_, F>) -> Var<'g, F> {
        let mut total: Option<Var<'g, F>> = None;
        for g in &self.groups {
            let (a, b) = (s.param(g.a), s.param(g.b));
            let term = if g.pairs.len() == 1 {
                let (r, i) = g.pairs[0];
                restrainer_transform(a, b, s.param(r)).sub(s.param(i)).frobenius()
            } else {
                let diffs: Vec<_> = g
                    .pairs
                    .iter()
                    .map(|&(r, i)| {
                        let d = restrainer_transform(a, b, s.param(r)).sub(s.param(i));
                        let n = d.value().len();
                        d.reshape(&[n])
                    })
                    .collect();
                Var::concat(&diffs, 0).frobenius()
            };
            total = Some(match total {
                Some(t) => t.add(term),
                None => term,
            });
        }
        total.unwrap_or_else(|| s.graph.scalar(F::zero()))
    }
}

/// `a·W + b` elementwise with scalar `a`, `b`.
pub fn restrainer_transform<'g, F: Real>(a: Var<'g, F>, b: Var<'g, F>, w_rgb: Var<'g, F>) -> Var<'g, F> {
    w_rgb.mul_scalar_var(a).add_scalar_var(b)
}

/// Frobenius distance `‖Ŵ − W_ir‖`.
pub fn weight_distance<'g, F: Real>(w_hat: Var<'g, F>, w_ir: Var<'g, F>) -> Result<Var<'g, F>> {
    let (a, b) = (w_hat.shape(), w_ir.shape());
    if a != b {
        return Err(Error::Dimension(format!("weight_distance: {a:?} vs {b:?}")));
    }
    Ok(w_hat.sub(w_ir).frobenius())
}
