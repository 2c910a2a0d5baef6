//! The full network: two-stream encoder, BN neck, decoupler and the identity
//! and orientation heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Encoder, EncoderConfig, RelationPlan, RestrainerConfig};
use crate::dataset::{Modality, NUM_ORIENTATIONS};
use crate::decouple::{DecoupleConfig, DecoupledFeatures, Decoupler};
use crate::nn::{BatchNorm, Linear, LinearInit, ParamId, ParamStore, Session};
use crate::tensor::{Real, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub plan: RelationPlan,
    pub restrainer: RestrainerConfig,
    pub decouple: DecoupleConfig,
    /// Number of training identities (K).
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            encoder: EncoderConfig::default(),
            plan: RelationPlan::default(),
            restrainer: RestrainerConfig::default(),
            decouple: DecoupleConfig::default(),
            num_classes,
        }
    }
}

/// Pooled features before and after the BN neck, `[batch, d]`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput<'g, F: Real> {
    pub pre_bn: Var<'g, F>,
    pub z: Var<'g, F>,
}

/// Everything a training step needs from one paired forward pass. Rows are
/// the RGB batch followed by the IR batch.
#[derive(Debug, Clone, Copy)]
pub struct PairOutput<'g, F: Real> {
    pub encoded: EncoderOutput<'g, F>,
    pub features: DecoupledFeatures<'g, F>,
    /// Number of RGB rows.
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HwdNet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub neck: BatchNorm,
    pub decoupler: Decoupler,
    pub id_head: Linear,
    pub orient_head: Linear,
}

impl HwdNet {
    pub fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, config: ModelConfig, rng: &mut R) -> Result<Self> {
        if config.num_classes == 0 {
            return Err(Error::Config("model needs at least one identity class".into()));
        }
        let encoder = Encoder::new(store, config.encoder, config.plan.clone(), &config.restrainer, rng)?;
        let d = encoder.dim();
        let neck = BatchNorm::new(store, "neck.bn", d);
        let decoupler = Decoupler::new(store, config.decouple, d, rng)?;
        let (d_upsilon, d_mu) = decoupler.output_dims();
        let id_head = Linear::new(store, "head.id", (d_mu, config.num_classes), false, LinearInit::Normal(0.001), rng);
        let orient_head = Linear::new(store, "head.orient", (d_upsilon, NUM_ORIENTATIONS), false, LinearInit::Normal(0.001), rng);
        Ok(Self { config, encoder, neck, decoupler, id_head, orient_head })
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    /// Encoder, neck, decoupler and heads: every tensor the model owns.
    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.all_ids();
        ids.extend(self.neck.params());
        ids.extend(self.neck.buffers());
        ids.extend(self.decoupler.params());
        ids.extend(self.id_head.params());
        ids.extend(self.orient_head.params());
        ids.sort();
        ids.dedup();
        ids
    }

    fn pool_and_neck<'g, F: Real>(&self, s: &Session<'g, '_, F>, maps: Var<'g, F>) -> EncoderOutput<'g, F> {
        let pre_bn = maps.global_avg_pool();
        EncoderOutput { pre_bn, z: self.neck.forward(s, pre_bn) }
    }

    /// One modality's images through its stream, pooling and the neck.
    pub fn encode<'g, F: Real>(&self, s: &Session<'g, '_, F>, images: Var<'g, F>, modality: Modality) -> Result<EncoderOutput<'g, F>> {
        let maps = self.encoder.forward(s, images, modality)?;
        Ok(self.pool_and_neck(s, maps))
    }

    /// Both batches through their streams; shared layers and the neck see
    /// the joint `[rgb; ir]` batch.
    pub fn forward_pair<'g, F: Real>(&self, s: &Session<'g, '_, F>, rgb: Var<'g, F>, ir: Var<'g, F>) -> Result<PairOutput<'g, F>> {
        let m = rgb.shape()[0];
        let maps = self.encoder.forward_pair(s, rgb, ir)?;
        let encoded = self.pool_and_neck(s, maps);
        let features = self.decoupler.forward(s, encoded.z)?;
        Ok(PairOutput { encoded, features, m })
    }

    /// Retrieval feature `μ` for one modality's images.
    pub fn embed<'g, F: Real>(&self, s: &Session<'g, '_, F>, images: Var<'g, F>, modality: Modality) -> Result<Var<'g, F>> {
        let enc = self.encode(s, images, modality)?;
        Ok(self.decoupler.forward(s, enc.z)?.mu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::Graph;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn shapes_through_the_pair_forward() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = HwdNet::new(&mut store, ModelConfig::new(5), &mut rng).unwrap();
        let g = Graph::new();
        let s = Session::new(&g, &store, Mode::Train);
        let mut img = |n| g.constant(ArrayD::from_shape_fn(IxDyn(&[n, 3, 32, 24]), |_| StandardNormal.sample(&mut rng)));
        let out = model.forward_pair(&s, img(4), img(2)).unwrap();
        assert_eq!(out.m, 4);
        assert_eq!(out.encoded.z.shape(), vec![6, 128]);
        assert_eq!(out.features.mu.shape(), vec![6, 64]);
        assert_eq!(out.features.upsilon.shape(), vec![6, 64]);
        assert!(out.encoded.z.value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn all_ids_cover_the_store() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = ModelConfig::new(3);
        cfg.decouple.variant = crate::decouple::DecoupleVariant::Prediction;
        let model = HwdNet::new(&mut store, cfg, &mut rng).unwrap();
        assert_eq!(model.all_ids(), store.ids().collect::<Vec<_>>());
    }
}
