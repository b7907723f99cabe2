//! Two-stage training: stage 1 fits the scene encoder and class-token
//! transformer on target presence, stage 2 fine-tunes everything together with
//! the interaction graph on pseudo instance labels.

use std::collections::HashMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::image_to_tensor;
use crate::config::{OptimizerKind, RunConfig, StageConfig};
use crate::data::Detection;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    stack_target_logits, ParamStore, TripletModel, GROUP_BACKBONE, GROUP_BASE, GROUP_FUSION, GROUP_IG,
    GROUP_MCIT,
};
use crate::supervision::{class_weights, graph_losses, load_class_weights, pseudo_labels, target_bce, LossBundle, LossValues};
use crate::vocab::LabelVocabulary;

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const DTYPE: DType = DType::F32;

pub fn checkpoint_path(dir: impl AsRef<Path>, stage: u8) -> PathBuf {
    dir.as_ref().join(format!("stage{stage}.ckpt"))
}

/// One row of the epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub l_t: f64,
    pub l_e: f64,
    pub l_v: f64,
    pub total: f64,
    pub lr_scale: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub vocab_hash: String,
    pub seed: u64,
    pub stage: u8,
    pub epochs_completed: usize,
    pub optimizer_step: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub config: RunConfig,
    pub vocab: LabelVocabulary,
    pub weights: HashMap<String, Tensor>,
    pub optimizer: HashMap<String, Tensor>,
    pub epochs: Vec<EpochRecord>,
}

fn append(builder: &mut tar::Builder<Vec<u8>>, name: &str, bytes: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    builder
        .append_data(&mut header, name, bytes)
        .map_err(|e| Error::Checkpoint(format!("writing `{name}`: {e}")))
}

fn safetensors_bytes(tensors: &HashMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut items: Vec<(&String, &Tensor)> = tensors.iter().collect();
    items.sort_by(|a, b| a.0.cmp(b.0));
    safetensors::tensor::serialize(items, None).map_err(|e| Error::Checkpoint(e.to_string()))
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut b = tar::Builder::new(Vec::new());
        append(&mut b, "meta.json", &serde_json::to_vec_pretty(&self.meta)?)?;
        append(&mut b, "config.toml", self.config.to_toml_string()?.as_bytes())?;
        append(&mut b, "vocab.json", &serde_json::to_vec_pretty(&self.vocab)?)?;
        append(&mut b, "weights.safetensors", &safetensors_bytes(&self.weights)?)?;
        append(&mut b, "optimizer.safetensors", &safetensors_bytes(&self.optimizer)?)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.epochs {
            w.serialize(r)?;
        }
        let log = w.into_inner().map_err(|e| Error::Checkpoint(e.to_string()))?;
        append(&mut b, "epochs.csv", &log)?;
        let bytes = b.into_inner().map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut archive = tar::Archive::new(file);
        let mut files: HashMap<String, Vec<u8>> = HashMap::new();
        let bad = |e: std::io::Error| Error::Checkpoint(format!("{}: {e}", path.display()));
        for entry in archive.entries().map_err(bad)? {
            let mut entry = entry.map_err(bad)?;
            let name = entry.path().map_err(bad)?.to_string_lossy().into_owned();
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf).map_err(bad)?;
            files.insert(name, buf);
        }
        let take = |name: &str| -> Result<&Vec<u8>> {
            files
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{name}`", path.display())))
        };
        let meta: CheckpointMeta = serde_json::from_slice(take("meta.json")?)?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", meta.format)));
        }
        let config = RunConfig::from_toml_str(
            std::str::from_utf8(take("config.toml")?).map_err(|e| Error::Checkpoint(e.to_string()))?,
        )?;
        let vocab: LabelVocabulary = serde_json::from_slice(take("vocab.json")?)?;
        if vocab.content_hash() != meta.vocab_hash {
            return Err(Error::Checkpoint("vocabulary does not match its recorded hash".into()));
        }
        let weights = candle_core::safetensors::load_buffer(take("weights.safetensors")?, &Device::Cpu)?;
        let optimizer = candle_core::safetensors::load_buffer(take("optimizer.safetensors")?, &Device::Cpu)?;
        let mut epochs = Vec::new();
        for r in csv::Reader::from_reader(take("epochs.csv")?.as_slice()).deserialize() {
            epochs.push(r?);
        }
        Ok(Self {
            meta,
            config,
            vocab,
            weights,
            optimizer,
            epochs,
        })
    }

    pub fn ensure_vocab(&self, vocab: &LabelVocabulary) -> Result<()> {
        if self.meta.vocab_hash != vocab.content_hash() {
            return Err(Error::Checkpoint(
                "checkpoint vocabulary differs from the dataset vocabulary".into(),
            ));
        }
        Ok(())
    }

    /// Rebuilds the model with these weights.
    pub fn model(&self) -> Result<(TripletModel, ParamStore)> {
        let store = ParamStore::new(self.meta.seed);
        let model = TripletModel::new(&self.config.model, &self.vocab, store.var_builder(DTYPE, &Device::Cpu))?;
        store.load(&self.weights, None)?;
        Ok((model, store))
    }
}

fn group_lr(name: &str, s: &StageConfig) -> f64 {
    let group = name.split('.').next().unwrap_or_default();
    match group {
        GROUP_BACKBONE => s.lr_backbone,
        GROUP_BASE | GROUP_FUSION => s.lr_base,
        GROUP_MCIT => s.lr_mcit,
        GROUP_IG => s.lr_ig,
        _ => s.lr_base,
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Slot {
    name: String,
    var: Var,
    lr: f64,
    m: Option<Tensor>,
    v: Option<Tensor>,
}

/// SGD with momentum or Adam, with per-parameter-group learning rates and
/// L2 weight decay added to the gradient.
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    slots: Vec<Slot>,
    step: usize,
}

impl Optimizer {
    pub fn new(store: &ParamStore, stage: &StageConfig, groups: &[&str]) -> Self {
        let slots = store
            .vars()
            .into_iter()
            .filter(|(n, _)| groups.iter().any(|g| n.starts_with(&format!("{g}."))))
            .map(|(name, var)| Slot {
                lr: group_lr(&name, stage),
                name,
                var,
                m: None,
                v: None,
            })
            .collect();
        Self {
            kind: stage.optimizer,
            momentum: stage.momentum,
            weight_decay: stage.weight_decay,
            slots,
            step: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore, lr_scale: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        for s in &mut self.slots {
            let Some(g) = grads.get(s.var.as_tensor()) else {
                continue;
            };
            let theta = s.var.as_tensor().detach();
            let g = g.detach();
            let g = if self.weight_decay > 0.0 {
                (g + (&theta * self.weight_decay)?)?
            } else {
                g
            };
            let lr = s.lr * lr_scale;
            let update = match self.kind {
                OptimizerKind::Sgd => {
                    let buf = match &s.m {
                        Some(m) if self.momentum > 0.0 => ((m * self.momentum)? + &g)?,
                        _ => g,
                    };
                    let u = (&buf * lr)?;
                    s.m = Some(buf);
                    u
                }
                OptimizerKind::Adam => {
                    let m = match &s.m {
                        Some(m) => ((m * ADAM_BETA1)? + (&g * (1.0 - ADAM_BETA1))?)?,
                        None => (&g * (1.0 - ADAM_BETA1))?,
                    };
                    let g2 = g.sqr()?;
                    let v = match &s.v {
                        Some(v) => ((v * ADAM_BETA2)? + (&g2 * (1.0 - ADAM_BETA2))?)?,
                        None => (&g2 * (1.0 - ADAM_BETA2))?,
                    };
                    let m_hat = (&m / (1.0 - ADAM_BETA1.powi(t)))?;
                    let v_hat = (&v / (1.0 - ADAM_BETA2.powi(t)))?;
                    let u = ((m_hat / (v_hat.sqrt()? + ADAM_EPS)?)? * lr)?;
                    s.m = Some(m);
                    s.v = Some(v);
                    u
                }
            };
            s.var.set(&(theta - update)?.detach())?;
        }
        Ok(())
    }

    pub fn state(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for s in &self.slots {
            if let Some(m) = &s.m {
                out.insert(format!("m/{}", s.name), m.clone());
            }
            if let Some(v) = &s.v {
                out.insert(format!("v/{}", s.name), v.clone());
            }
        }
        out
    }

    pub fn load_state(&mut self, state: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        for s in &mut self.slots {
            let dev = s.var.device().clone();
            let dt = s.var.dtype();
            s.m = state.get(&format!("m/{}", s.name)).map(|t| t.to_dtype(dt)?.to_device(&dev)).transpose()?;
            s.v = state.get(&format!("v/{}", s.name)).map(|t| t.to_dtype(dt)?.to_device(&dev)).transpose()?;
        }
        self.step = step;
        Ok(())
    }
}

fn epoch_seed(seed: u64, stage: u8, epoch: usize) -> u64 {
    seed ^ (u64::from(stage) << 56) ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Images `(B, 3, H, W)` and detections for a batch, with optional flips.
pub fn make_batch(
    data: &Dataset,
    indices: &[usize],
    flips: &[bool],
    height: usize,
    width: usize,
    dtype: DType,
) -> Result<(Tensor, Vec<Vec<Detection>>)> {
    let mut images = Vec::with_capacity(indices.len());
    let mut dets = Vec::with_capacity(indices.len());
    for (&k, &flip) in indices.iter().zip(flips) {
        let s = &data.samples[k];
        images.push(image_to_tensor(&s.image, height, width, flip, dtype, &Device::Cpu)?);
        dets.push(
            s.detections
                .iter()
                .map(|d| Detection {
                    bbox: if flip { d.bbox.hflip() } else { d.bbox },
                    ..d.clone()
                })
                .collect(),
        );
    }
    Ok((Tensor::stack(&images, 0)?, dets))
}

/// Computes the stage loss on one batch.
pub fn batch_loss(
    model: &TripletModel,
    data: &Dataset,
    indices: &[usize],
    flips: &[bool],
    weights: &[f64],
    stage: u8,
    cfg: &RunConfig,
    epoch: usize,
) -> Result<LossBundle> {
    let m = &cfg.model;
    let (images, dets) = make_batch(data, indices, flips, m.image_height, m.image_width, DTYPE)?;
    let outputs = model.forward(&images, &dets, stage == 2)?;
    let labels: Vec<Vec<u8>> = indices
        .iter()
        .map(|&k| data.samples[k].annotation.target_presence.clone())
        .collect();
    let l_t = target_bce(&stack_target_logits(&outputs)?, &labels, weights)?;
    if stage == 1 {
        let zero = l_t.zeros_like()?;
        return LossBundle::new(l_t, zero.clone(), zero, 0.0, 0.0);
    }
    let mut pseudo = Vec::with_capacity(indices.len());
    for (&k, d) in indices.iter().zip(&dets) {
        pseudo.push(pseudo_labels(
            d,
            &data.samples[k].annotation,
            &data.vocab,
            cfg.seed,
            epoch,
            cfg.train.pseudo_labels,
        )?);
    }
    let frames: Vec<_> = outputs
        .iter()
        .zip(&pseudo)
        .map(|(o, p)| (o.edges.as_ref().expect("stage 2 runs the graph"), p.as_slice()))
        .collect();
    let (l_e, l_v) = graph_losses(&frames)?;
    LossBundle::new(l_t, l_e, l_v, cfg.train.alpha, cfg.train.beta)
}

fn snapshot(
    cfg: &RunConfig,
    data: &Dataset,
    store: &ParamStore,
    opt: &Optimizer,
    stage: u8,
    records: &[EpochRecord],
) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            format: CHECKPOINT_FORMAT,
            vocab_hash: data.vocab.content_hash(),
            seed: cfg.seed,
            stage,
            epochs_completed: records.len(),
            optimizer_step: opt.steps(),
        },
        config: cfg.clone(),
        vocab: data.vocab.clone(),
        weights: store.tensors().into_iter().collect(),
        optimizer: opt.state(),
        epochs: records.to_vec(),
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub epochs: Vec<EpochRecord>,
}

fn target_weights(data: &Dataset, cfg: &RunConfig) -> Result<Vec<f64>> {
    match &cfg.train.class_weights_file {
        Some(p) => load_class_weights(p, data.vocab.num_targets()),
        None => class_weights(&data.annotations(), data.vocab.num_targets()),
    }
}

/// Runs (or resumes) one training stage and writes `stage{N}.ckpt` into `out_dir`.
/// Stage 2 starts from `stage1.ckpt` in the same directory.
pub fn train(stage: u8, data: &Dataset, cfg: &RunConfig, out_dir: impl AsRef<Path>) -> Result<TrainOutcome> {
    train_with(stage, data, cfg, out_dir, |_| {})
}

/// As [`train`], calling `on_epoch` after every completed epoch.
pub fn train_with(
    stage: u8,
    data: &Dataset,
    cfg: &RunConfig,
    out_dir: impl AsRef<Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let out_dir = out_dir.as_ref();
    let stage_cfg = match stage {
        1 => &cfg.train.stage1,
        2 => &cfg.train.stage2,
        _ => return Err(Error::Config(format!("unknown stage {stage}"))),
    };
    let store = ParamStore::new(cfg.seed);
    let model = TripletModel::new(&cfg.model, &data.vocab, store.var_builder(DTYPE, &Device::Cpu))?;
    let groups: &[&str] = if stage == 1 {
        &[GROUP_BACKBONE, GROUP_BASE, GROUP_FUSION, GROUP_MCIT]
    } else {
        &[GROUP_BACKBONE, GROUP_BASE, GROUP_FUSION, GROUP_MCIT, GROUP_IG]
    };
    let mut opt = Optimizer::new(&store, stage_cfg, groups);
    let mut records = Vec::new();
    let path = checkpoint_path(out_dir, stage);

    if path.exists() {
        let ck = Checkpoint::load(&path)?;
        ck.ensure_vocab(&data.vocab)?;
        if ck.meta.stage != stage {
            return Err(Error::Checkpoint(format!("{} holds stage {}", path.display(), ck.meta.stage)));
        }
        store.load(&ck.weights, None)?;
        opt.load_state(&ck.optimizer, ck.meta.optimizer_step)?;
        records = ck.epochs;
        log::info!("resuming stage {stage} after epoch {}", ck.meta.epochs_completed);
    } else if stage == 2 {
        let prev = checkpoint_path(out_dir, 1);
        if !prev.exists() {
            return Err(Error::Checkpoint(format!(
                "stage 2 needs a stage-1 checkpoint at {}",
                prev.display()
            )));
        }
        let ck = Checkpoint::load(&prev)?;
        ck.ensure_vocab(&data.vocab)?;
        store.load(&ck.weights, Some(&[GROUP_BACKBONE, GROUP_BASE, GROUP_FUSION, GROUP_MCIT]))?;
    }

    let weights = target_weights(data, cfg)?;
    let n = data.len();
    let start = records.len();
    for epoch in start..stage_cfg.epochs {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, stage, epoch));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = (0..n).map(|_| cfg.train.hflip && rng.random_bool(0.5)).collect();
        let lr_scale = stage_cfg.lr_decay.powi(epoch as i32);
        let mut sum = LossValues::default();
        let mut batches = 0usize;
        for chunk in order.chunks(stage_cfg.batch_size) {
            let f: Vec<bool> = chunk.iter().map(|&k| flips[k]).collect();
            let loss = batch_loss(&model, data, chunk, &f, &weights, stage, cfg, epoch)?;
            let v = loss.values()?;
            if !v.total.is_finite() {
                return Err(Error::Numeric { layer: "loss".into() });
            }
            let grads = loss.total.backward()?;
            opt.step(&grads, lr_scale)?;
            sum.l_t += v.l_t;
            sum.l_e += v.l_e;
            sum.l_v += v.l_v;
            sum.total += v.total;
            batches += 1;
        }
        let b = batches as f64;
        let rec = EpochRecord {
            stage,
            epoch,
            l_t: sum.l_t / b,
            l_e: sum.l_e / b,
            l_v: sum.l_v / b,
            total: sum.total / b,
            lr_scale,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "stage {stage} epoch {epoch}: L_t {:.4} L_e {:.4} L_v {:.4} total {:.4} ({:.1}s)",
            rec.l_t,
            rec.l_e,
            rec.l_v,
            rec.total,
            rec.seconds
        );
        on_epoch(&rec);
        records.push(rec);
        snapshot(cfg, data, &store, &opt, stage, &records).save(&path)?;
    }
    if !path.exists() {
        snapshot(cfg, data, &store, &opt, stage, &records).save(&path)?;
    }
    Ok(TrainOutcome {
        checkpoint: path,
        epochs: records,
    })
}
