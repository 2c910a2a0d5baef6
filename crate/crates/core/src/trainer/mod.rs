//! Training loop, optimizer, checkpoints and the component ablation.

mod ablation;
mod checkpoint;
mod config;
mod optim;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{ablation_config, run_ablation, AblationRow, AblationTable, ProtocolScores};
pub use checkpoint::{Checkpoint, RngState, FORMAT_VERSION, MAGIC};
pub use config::{ablation_grid, LrSchedule, Preset, TrainConfig};
pub use optim::Sgd;

use crate::dataset::{sample_balanced_batch, Batch, DatasetIndex, Direction, ImageCache, Modality, Shot, Split};
use crate::losses::{
    centroid_loss, cross_modality_triplet, id_loss, orientation_loss, total_loss, LossBreakdown, LossConfig, LossParts, LossTerm,
    TripletInput,
};
use crate::metrics::{default_seeds, evaluate_protocol, Embedder, EvalOptions, EvalReport};
use crate::model::{HwdNet, PairOutput};
use crate::nn::{Mode, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::{Graph, Real, Var};
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_LOG_FILE: &str = "eval.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint.bin";

/// Stream of the data RNG; stream 0 initializes the model.
const DATA_STREAM: u64 = 1;

/// Class-space labels of one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLabels {
    pub rgb: Vec<usize>,
    pub ir: Vec<usize>,
    pub rgb_orient: Vec<usize>,
    pub ir_orient: Vec<usize>,
}

impl BatchLabels {
    /// Maps raw identities through `classes` (identity → class index).
    pub fn from_batch(batch: &Batch, classes: &HashMap<usize, usize>) -> Result<Self> {
        let map = |ids: &[usize]| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| classes.get(id).copied().ok_or_else(|| Error::Validation(format!("identity {id} is not a training class"))))
                .collect()
        };
        Ok(Self {
            rgb: map(&batch.rgb_labels)?,
            ir: map(&batch.ir_labels)?,
            rgb_orient: batch.rgb_orient.iter().map(|o| o.index()).collect(),
            ir_orient: batch.ir_orient.iter().map(|o| o.index()).collect(),
        })
    }

    fn joint(&self) -> (Vec<usize>, Vec<usize>) {
        (
            self.rgb.iter().chain(&self.ir).copied().collect(),
            self.rgb_orient.iter().chain(&self.ir_orient).copied().collect(),
        )
    }
}

/// Evaluates the enabled loss terms on one paired forward pass.
pub fn loss_parts<'g, F: Real>(
    model: &HwdNet,
    s: &Session<'g, '_, F>,
    out: &PairOutput<'g, F>,
    labels: &BatchLabels,
    cfg: &LossConfig,
) -> Result<LossParts<'g, F>> {
    let (m, n) = (out.m, out.encoded.z.shape()[0]);
    let split = |x: Var<'g, F>| (x.slice(0, 0, m), x.slice(0, m, n));
    let (ids, orients) = labels.joint();
    let mut parts = LossParts::empty();
    if cfg.enable.wr {
        parts.wr = Some(model.encoder.restrainer.loss(s));
    }
    if cfg.enable.id {
        parts.id = Some(id_loss(s, &model.id_head, out.features.mu, &ids, cfg.reduction)?);
    }
    if cfg.enable.tri {
        let feats = match cfg.triplet_input {
            TripletInput::Z => out.encoded.z,
            TripletInput::Mu => out.features.mu,
        };
        let (a, b) = split(feats);
        parts.tri = Some(cross_modality_triplet(a, b, &labels.rgb, &labels.ir, cfg.margin, cfg.triplet_mining, cfg.reduction)?);
    }
    if cfg.enable.orient {
        parts.orient = Some(orientation_loss(s, &model.orient_head, out.features.upsilon, &orients, cfg.reduction)?);
    }
    if cfg.enable.centroid {
        let (a, b) = split(out.features.mu);
        parts.centroid = Some(centroid_loss(a, &labels.rgb, b, &labels.ir, cfg.centroid_mode, cfg.similarity, cfg.reduction)?);
    }
    Ok(parts)
}

/// Forward, loss and gradients for one batch. Returns the loss breakdown,
/// the gradient of every trainable tensor that took part, and the BN
/// statistics the pass produced.
pub fn batch_gradients<F: Real>(
    model: &HwdNet,
    store: &ParamStore<F>,
    rgb: ndarray::ArrayD<F>,
    ir: ndarray::ArrayD<F>,
    labels: &BatchLabels,
    cfg: &LossConfig,
    step: u64,
) -> Result<(LossBreakdown, Vec<(ParamId, ndarray::ArrayD<F>)>, Vec<crate::nn::StatUpdate<F>>)> {
    let g = Graph::new();
    let s = Session::new(&g, store, Mode::Train);
    let out = model.forward_pair(&s, g.constant(rgb), g.constant(ir))?;
    let parts = loss_parts(model, &s, &out, labels, cfg)?;
    let (total, breakdown) = total_loss(&g, &parts, &cfg.weights, step)?;
    let mut grads = g.backward(total);
    let mut out = Vec::new();
    for id in store.ids() {
        if store.kind(id) == ParamKind::Buffer {
            continue;
        }
        if let Some(v) = s.bound(id) {
            if let Some(gr) = grads.take(v) {
                out.push((id, gr));
            }
        }
    }
    Ok((breakdown, out, s.take_stat_updates()))
}

/// Loss of one batch in train mode without touching any state.
pub fn batch_loss<F: Real>(model: &HwdNet, store: &ParamStore<F>, rgb: ndarray::ArrayD<F>, ir: ndarray::ArrayD<F>, labels: &BatchLabels, cfg: &LossConfig) -> Result<f64> {
    let g = Graph::new();
    let s = Session::new(&g, store, Mode::Train);
    let out = model.forward_pair(&s, g.constant(rgb), g.constant(ir))?;
    let parts = loss_parts(model, &s, &out, labels, cfg)?;
    Ok(total_loss(&g, &parts, &cfg.weights, 0)?.1.total())
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub losses: std::collections::BTreeMap<LossTerm, f64>,
    pub total: f64,
}

/// Retrieval features from a model in eval mode, computed in chunks per
/// modality.
pub struct ModelEmbedder<'a> {
    pub model: &'a HwdNet,
    pub store: &'a ParamStore<f32>,
    pub cache: &'a mut ImageCache,
    pub chunk: usize,
}

impl Embedder for ModelEmbedder<'_> {
    fn embed(&mut self, index: &DatasetIndex, records: &[usize]) -> Result<Array2<f32>> {
        let (h, w) = self.cache.dims();
        let mut out = Array2::zeros((records.len(), self.model.decoupler.output_dims().1));
        for modality in Modality::ALL {
            let rows: Vec<usize> = (0..records.len()).filter(|&k| index.record(records[k]).modality == modality).collect();
            for chunk in rows.chunks(self.chunk.max(1)) {
                let mut images = Array4::<f32>::zeros((chunk.len(), 3, h, w));
                for (k, &row) in chunk.iter().enumerate() {
                    images.slice_mut(s![k, .., .., ..]).assign(self.cache.get(index, records[row])?);
                }
                let g = Graph::new();
                let s = Session::new(&g, self.store, Mode::Eval);
                let mu = self.model.embed(&s, g.constant(images.into_dyn()), modality)?;
                let mu = mu.value();
                for (k, &row) in chunk.iter().enumerate() {
                    out.row_mut(row).assign(&mu.index_axis(Axis(0), k));
                }
            }
        }
        Ok(out)
    }
}

/// Live training state.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: HwdNet,
    pub store: ParamStore<f32>,
    pub optimizer: Sgd<f32>,
    rng: ChaCha8Rng,
    classes: HashMap<usize, usize>,
    train_cache: ImageCache,
    eval_cache: ImageCache,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("epoch", &self.epoch)
            .field("step", &self.step)
            .field("params", &self.store.len())
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Trainer {
    /// Fresh model and optimizer for the training identities of `index`.
    pub fn new(config: TrainConfig, index: &DatasetIndex) -> Result<Self> {
        config.validate()?;
        let classes = index.train_classes();
        if classes.is_empty() {
            return Err(Error::Validation("dataset has no training identities".into()));
        }
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = HwdNet::new(&mut store, config.model_config(classes.len()), &mut init_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DATA_STREAM);
        let mut optimizer = Sgd::new(store.len(), config.momentum, config.weight_decay);
        optimizer.no_decay_lr_scale = config.restrainer_lr_scale;
        let (h, w) = (config.batch.image_height, config.batch.image_width);
        Ok(Self {
            config,
            model,
            store,
            optimizer,
            rng,
            classes,
            train_cache: ImageCache::new(h, w),
            eval_cache: ImageCache::new(h, w),
            epoch: 0,
            step: 0,
        })
    }

    /// Rebuilds the state stored in `ckpt`, with `overrides` applied to its
    /// config. Nothing is returned unless every tensor matches the model the
    /// config describes.
    pub fn from_checkpoint(ckpt: &Checkpoint, overrides: &[(String, String)], index: &DatasetIndex) -> Result<Self> {
        let mut config = ckpt.config.clone();
        for (k, v) in overrides {
            config.set(k, v)?;
        }
        if !config.same_architecture(&ckpt.config) {
            return Err(Error::Config("overrides change the model architecture stored in the checkpoint".into()));
        }
        let mut t = Self::new(config, index)?;
        if t.classes.len() != ckpt.num_classes {
            return Err(Error::Validation(format!(
                "checkpoint was trained on {} identities, dataset has {}",
                ckpt.num_classes,
                t.classes.len()
            )));
        }
        t.load_tensors(ckpt)?;
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        t.rng = rng;
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        Ok(t)
    }

    fn load_tensors(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.params.len() != self.store.len() || ckpt.momentum.len() != self.store.len() {
            return Err(Error::Dimension(format!("checkpoint holds {} tensors, model has {}", ckpt.params.len(), self.store.len())));
        }
        for (id, p) in self.store.ids().zip(&ckpt.params) {
            let e = self.store.entry(id);
            if e.name != p.name || e.kind != p.kind || e.value.shape() != p.value.shape() {
                return Err(Error::Dimension(format!(
                    "checkpoint tensor `{}` {:?} does not match model tensor `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    e.name,
                    e.value.shape()
                )));
            }
        }
        for (p, m) in ckpt.params.iter().zip(&ckpt.momentum) {
            if m.as_ref().is_some_and(|m| m.shape() != p.value.shape()) {
                return Err(Error::Dimension(format!("momentum buffer of `{}` has the wrong shape", p.name)));
            }
        }
        let ids: Vec<ParamId> = self.store.ids().collect();
        for (id, p) in ids.into_iter().zip(&ckpt.params) {
            *self.store.get_mut(id) = p.value.clone();
        }
        self.optimizer.set_buffers(ckpt.momentum.clone());
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            num_classes: self.classes.len(),
            epoch: self.epoch,
            step: self.step,
            rng: RngState { seed: self.rng.get_seed(), stream: self.rng.get_stream(), word_pos: self.rng.get_word_pos() },
            params: self.store.entries().to_vec(),
            momentum: self.optimizer.buffers().to_vec(),
        }
    }

    /// `⌊train images / (M + N)⌋`, at least 1.
    pub fn steps_per_epoch(&self, index: &DatasetIndex) -> usize {
        let train = index.indices_in(|s| s == Split::Train).len();
        (train / (2 * self.config.batch.per_modality())).max(1)
    }

    /// Learning rate during the next epoch.
    pub fn current_lr(&self) -> f64 {
        self.config.lr_schedule.rate(self.config.lr, self.epoch + 1)
    }

    /// Samples a batch and applies one optimizer update.
    pub fn train_step(&mut self, index: &DatasetIndex) -> Result<StepLog> {
        let lr = self.current_lr();
        let batch = sample_balanced_batch(index, &self.config.batch, &self.config.augment, &mut self.train_cache, &mut self.rng)?;
        let labels = BatchLabels::from_batch(&batch, &self.classes)?;
        let step = self.step + 1;
        let (breakdown, grads, stats) =
            batch_gradients(&self.model, &self.store, batch.rgb_images.into_dyn(), batch.ir_images.into_dyn(), &labels, &self.config.loss, step)?;
        self.optimizer.step(&mut self.store, grads, lr);
        self.store.apply_stat_updates(stats, self.config.bn_momentum as f32);
        self.step = step;
        let total = breakdown.total();
        Ok(StepLog { step, epoch: self.epoch + 1, lr, losses: breakdown.terms, total })
    }

    /// Evaluates the current parameters on the test split.
    pub fn evaluate(&mut self, index: &DatasetIndex, direction: Direction, shot: Shot, seeds: &[u64], opts: &EvalOptions) -> Result<EvalReport> {
        let mut emb = ModelEmbedder { model: &self.model, store: &self.store, cache: &mut self.eval_cache, chunk: 64 };
        evaluate_protocol(&mut emb, index, direction, shot, seeds, opts)
    }

    /// Trains until `config.epochs` epochs are complete, appending to the
    /// metric log in `out_dir` and leaving the final checkpoint there.
    pub fn run(&mut self, index: &DatasetIndex, out_dir: &Path) -> Result<Checkpoint> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join(METRICS_FILE);
        let mut log = open_log(&log_path, self.step > 0)?;
        let spe = self.steps_per_epoch(index);
        while self.epoch < self.config.epochs {
            for _ in 0..spe {
                let entry = self.train_step(index)?;
                writeln!(log, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&log_path, e))?;
            }
            self.epoch += 1;
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            log::info!("epoch {}/{} done ({} steps)", self.epoch, self.config.epochs, self.step);
            if self.config.eval_every > 0 && self.epoch.is_multiple_of(self.config.eval_every) {
                self.log_eval(index, out_dir)?;
            }
            if self.config.checkpoint_every > 0 && self.epoch.is_multiple_of(self.config.checkpoint_every) && self.epoch < self.config.epochs {
                self.checkpoint().save(&out_dir.join(format!("checkpoint_epoch{}.bin", self.epoch)))?;
            }
        }
        let ckpt = self.checkpoint();
        ckpt.save(&out_dir.join(FINAL_CHECKPOINT))?;
        Ok(ckpt)
    }

    fn log_eval(&mut self, index: &DatasetIndex, out_dir: &Path) -> Result<()> {
        if index.indices_in(|s| s.is_test()).is_empty() {
            return Ok(());
        }
        let report = self.evaluate(index, Direction::Ir2rgb, Shot::Single, &default_seeds(), &EvalOptions::default())?;
        let path = out_dir.join(EVAL_LOG_FILE);
        let mut f = open_log(&path, true)?;
        let line = serde_json::json!({ "epoch": self.epoch, "step": self.step, "rank1": report.rank(1), "map": report.map });
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = if append { OpenOptions::new().create(true).append(true).open(path) } else { File::create(path) };
    f.map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Trains a fresh model and returns its final checkpoint.
pub fn train(config: TrainConfig, index: &DatasetIndex, out_dir: &Path) -> Result<Trainer> {
    let mut t = Trainer::new(config, index)?;
    t.run(index, out_dir)?;
    Ok(t)
}

/// Continues the run stored at `checkpoint` up to its (possibly overridden)
/// epoch budget.
pub fn resume(checkpoint: &Path, overrides: &[(String, String)], index: &DatasetIndex, out_dir: &Path) -> Result<Trainer> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut t = Trainer::from_checkpoint(&ckpt, overrides, index)?;
    t.run(index, out_dir)?;
    Ok(t)
}

/// Rebuilds a model from a checkpoint for evaluation.
pub fn load_model(path: &Path) -> Result<(HwdNet, ParamStore<f32>, TrainConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(ckpt.config.seed);
    let model = HwdNet::new(&mut store, ckpt.config.model_config(ckpt.num_classes), &mut rng)?;
    if store.len() != ckpt.params.len() {
        return Err(Error::Dimension(format!("checkpoint holds {} tensors, model has {}", ckpt.params.len(), store.len())));
    }
    let ids: Vec<ParamId> = store.ids().collect();
    for (id, p) in ids.into_iter().zip(&ckpt.params) {
        let e = store.entry(id);
        if e.name != p.name || e.value.shape() != p.value.shape() {
            return Err(Error::Dimension(format!("checkpoint tensor `{}` {:?} does not match model tensor `{}` {:?}", p.name, p.value.shape(), e.name, e.value.shape())));
        }
        *store.get_mut(id) = p.value.clone();
    }
    Ok((model, store, ckpt.config))
}

/// Per-run output directory used by the ablation driver.
pub(crate) fn run_dir(root: &Path, row: &str, seed: u64) -> PathBuf {
    let slug: String = row.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    root.join(format!("{slug}_seed{seed}"))
}
