//! Hybrid-weights two-stream encoder.
//!
//! Both modalities run the same staged architecture. Stages named related by
//! the [`RelationPlan`] keep separate RGB and IR parameters coupled through a
//! [`Restrainer`]; the remaining stages are one set of parameters used by both
//! streams.

mod arch;
mod restrainer;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use arch::{EncoderArch, Stage};
pub use restrainer::{restrainer_transform, weight_distance, Granularity, Restrainer, RestrainerConfig, RestrainerGroup};

use crate::dataset::Modality;
use crate::nn::{ParamId, ParamStore, Session};
use crate::tensor::{Real, Var};
use crate::{Error, Result};

/// Which stages are weight-related (`true`) rather than weight-shared.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RelationPlan {
    alpha: Vec<bool>,
}

impl RelationPlan {
    /// Validates that related stages form a prefix.
    pub fn new(alpha: Vec<bool>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Config("relation plan needs at least one stage".into()));
        }
        if let Some(pos) = alpha.windows(2).position(|w| !w[0] && w[1]) {
            return Err(Error::Config(format!(
                "relation plan {alpha:?}: stage {} is related but follows shared stage {pos}",
                pos + 1
            )));
        }
        Ok(Self { alpha })
    }

    /// The first `related` of `stages` stages are related.
    pub fn prefix(related: usize, stages: usize) -> Result<Self> {
        if related > stages {
            return Err(Error::Config(format!("cannot relate {related} of {stages} stages")));
        }
        Self::new((0..stages).map(|i| i < related).collect())
    }

    pub fn alpha(&self) -> &[bool] {
        &self.alpha
    }

    pub fn num_stages(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_related(&self, stage: usize) -> bool {
        self.alpha.get(stage).copied().unwrap_or(false)
    }

    pub fn related_count(&self) -> usize {
        self.alpha.iter().filter(|&&a| a).count()
    }

    pub fn shared_stages(&self) -> Vec<usize> {
        (0..self.alpha.len()).filter(|&i| !self.alpha[i]).collect()
    }

    /// Preset label `s<k>`, k = number of related stages.
    pub fn label(&self) -> String {
        format!("s{}", self.related_count())
    }
}

impl Default for RelationPlan {
    fn default() -> Self {
        Self::prefix(2, arch::NUM_STAGES).expect("s2 is a valid plan")
    }
}

/// Parses `s0`..`s5` for the five-stage encoder.
impl FromStr for RelationPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let k = s
            .strip_prefix('s')
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k <= arch::NUM_STAGES)
            .ok_or_else(|| Error::Config(format!("unknown plan.stage `{s}` (expected s0..s5)")))?;
        Self::prefix(k, arch::NUM_STAGES)
    }
}

impl TryFrom<String> for RelationPlan {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RelationPlan> for String {
    fn from(p: RelationPlan) -> String {
        p.label()
    }
}

impl fmt::Display for RelationPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub arch: EncoderArch,
    pub dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { arch: EncoderArch::Desk, dim: 128 }
    }
}

/// Names of the tensors a stage owns in one stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSpec {
    pub stage_index: usize,
    pub parameter_tensors: Vec<(String, ParamId)>,
}

/// Two-stream staged encoder with restrainers on related stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub plan: RelationPlan,
    rgb: Vec<Stage>,
    ir: Vec<Stage>,
    pub restrainer: Restrainer,
}

impl Encoder {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        config: EncoderConfig,
        plan: RelationPlan,
        restrainer: &RestrainerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (layouts, _) = config.arch.layout(config.dim)?;
        if plan.num_stages() != layouts.len() {
            return Err(Error::Config(format!(
                "relation plan covers {} stages, encoder has {}",
                plan.num_stages(),
                layouts.len()
            )));
        }
        let mut rgb = Vec::with_capacity(layouts.len());
        let mut ir = Vec::with_capacity(layouts.len());
        let mut c_in = 3;
        for (i, layout) in layouts.iter().enumerate() {
            if plan.is_related(i) {
                let (r, c_out) = Stage::new(store, "rgb", i, layout, c_in, rng);
                let (m, _) = Stage::new(store, "ir", i, layout, c_in, rng);
                // Both streams start from identical weights.
                for (&src, &dst) in r.params().iter().zip(m.params()) {
                    let v = store.get(src).clone();
                    *store.get_mut(dst) = v;
                }
                rgb.push(r);
                ir.push(m);
                c_in = c_out;
            } else {
                let (sh, c_out) = Stage::new(store, "shared", i, layout, c_in, rng);
                rgb.push(sh.clone());
                ir.push(sh);
                c_in = c_out;
            }
        }
        let restrainer = Restrainer::build(store, &rgb, &ir, &plan, restrainer);
        Ok(Self { config, plan, rgb, ir, restrainer })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn stages(&self, modality: Modality) -> &[Stage] {
        match modality {
            Modality::Rgb => &self.rgb,
            Modality::Ir => &self.ir,
        }
    }

    pub fn stage_specs<F: Real>(&self, store: &ParamStore<F>, modality: Modality) -> Vec<StageSpec> {
        self.stages(modality)
            .iter()
            .map(|st| StageSpec {
                stage_index: st.index,
                parameter_tensors: st.params().iter().map(|&id| (store.name(id).to_string(), id)).collect(),
            })
            .collect()
    }

    /// Every learnable tensor and buffer of the encoder, each once.
    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .rgb
            .iter()
            .chain(&self.ir)
            .flat_map(|s| s.params().iter().chain(s.buffers()).copied())
            .chain(self.restrainer.scalar_ids())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    fn check_input<F: Real>(x: &Var<'_, F>) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Dimension(format!("encoder expects [N, 3, H, W] images, got {shape:?}")));
        }
        Ok(())
    }

    /// Feature maps of one modality's images through its stream.
    pub fn forward<'g, F: Real>(&self, s: &Session<'g, '_, F>, x: Var<'g, F>, modality: Modality) -> Result<Var<'g, F>> {
        Self::check_input(&x)?;
        Ok(self.stages(modality).iter().fold(x, |y, st| st.forward(s, y)))
    }

    /// Runs related stages per stream, then the shared stages once on the
    /// concatenated `[rgb; ir]` batch. Returns `[M + N, C, h, w]`.
    pub fn forward_pair<'g, F: Real>(&self, s: &Session<'g, '_, F>, rgb: Var<'g, F>, ir: Var<'g, F>) -> Result<Var<'g, F>> {
        Self::check_input(&rgb)?;
        Self::check_input(&ir)?;
        let split = self.plan.related_count();
        let (mut r, mut i) = (rgb, ir);
        for k in 0..split {
            r = self.rgb[k].forward(s, r);
            i = self.ir[k].forward(s, i);
        }
        let joint = Var::concat(&[r, i], 0);
        Ok(self.rgb[split..].iter().fold(joint, |y, st| st.forward(s, y)))
    }
}
