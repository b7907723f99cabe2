//! End-to-end runs: inference over a frame set, chance-level baseline,
//! train-then-evaluate experiments and the message-passing ablation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Device;
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::image_to_tensor;
use crate::config::{DecodeConfig, MessagePassing, RunConfig};
use crate::data::{Detection, DetectionFile, FramePredictions, PredictionFile};
use crate::dataset::{Dataset, IMAGES_DIR};
use crate::decoder::decode;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::graph::EdgeLogits;
use crate::model::TripletModel;
use crate::train::{checkpoint_path, train, Checkpoint, DTYPE};
use crate::vocab::LabelVocabulary;

/// One frame to run inference on.
#[derive(Clone, Debug)]
pub struct FrameInput {
    pub frame_id: String,
    pub image: RgbImage,
    pub detections: Vec<Detection>,
}

impl FrameInput {
    pub fn from_dataset(data: &Dataset) -> Vec<FrameInput> {
        data.samples
            .iter()
            .map(|s| FrameInput {
                frame_id: s.annotation.frame_id.clone(),
                image: s.image.clone(),
                detections: s.detections.clone(),
            })
            .collect()
    }
}

/// Reads `detections.json` and the matching `{frame_id}.png` images from `images_dir`.
pub fn load_inputs(detections: impl AsRef<Path>, images_dir: impl AsRef<Path>, vocab: &LabelVocabulary) -> Result<Vec<FrameInput>> {
    let dets = DetectionFile::load(detections, vocab)?;
    let dir = images_dir.as_ref();
    dets.frames
        .into_iter()
        .map(|f| {
            let path = dir.join(format!("{}.png", f.frame_id));
            let image = image::open(&path)
                .map_err(|e| Error::schema(&f.frame_id, "image", format!("{}: {e}", path.display())))?
                .to_rgb8();
            Ok(FrameInput {
                frame_id: f.frame_id,
                image,
                detections: f.detections,
            })
        })
        .collect()
}

/// Images directory of a dataset directory.
pub fn images_dir(dataset: impl AsRef<Path>) -> PathBuf {
    dataset.as_ref().join(IMAGES_DIR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictSummary {
    pub frames: usize,
    pub seconds: f64,
    pub frames_per_second: f64,
}

pub fn predict_frames(
    model: &TripletModel,
    vocab: &LabelVocabulary,
    frames: &[FrameInput],
    cfg: &DecodeConfig,
) -> Result<(PredictionFile, PredictSummary)> {
    let m = model.config();
    let t0 = Instant::now();
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let image = image_to_tensor(&f.image, m.image_height, m.image_width, false, DTYPE, &Device::Cpu)?;
        let res = model.infer(&image, &f.detections)?;
        let edges = res.edges.expect("inference runs the graph").logits()?;
        out.push(FramePredictions {
            frame_id: f.frame_id.clone(),
            triplet_detections: decode(&edges, &f.detections, vocab, cfg)?,
            instrument_detections: f.detections.clone(),
        });
    }
    let seconds = t0.elapsed().as_secs_f64();
    let summary = PredictSummary {
        frames: frames.len(),
        seconds,
        frames_per_second: if seconds > 0.0 { frames.len() as f64 / seconds } else { 0.0 },
    };
    log::info!(
        "predicted {} frames in {:.2}s ({:.1} frames/s)",
        summary.frames,
        summary.seconds,
        summary.frames_per_second
    );
    Ok((PredictionFile::new(out), summary))
}

pub fn predict(ck: &Checkpoint, frames: &[FrameInput], cfg: &DecodeConfig) -> Result<(PredictionFile, PredictSummary)> {
    let (model, _store) = ck.model()?;
    predict_frames(&model, &ck.vocab, frames, cfg)
}

/// Decodes standard-normal edge and verb logits: what the decoder produces
/// from an untrained, uninformative graph.
pub fn chance_predictions(data: &Dataset, cfg: &DecodeConfig, seed: u64) -> Result<PredictionFile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.vocab.num_targets();
    let v1 = data.vocab.num_verbs() + 1;
    let mut frames = Vec::with_capacity(data.len());
    for s in &data.samples {
        let o = s.detections.len();
        let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let logits = EdgeLogits {
            num_instruments: o,
            num_targets: n,
            num_verb_classes: v1,
            scores: draw(o * n),
            verbs: draw(o * n * v1),
        };
        frames.push(FramePredictions {
            frame_id: s.annotation.frame_id.clone(),
            triplet_detections: decode(&logits, &s.detections, &data.vocab, cfg)?,
            instrument_detections: s.detections.clone(),
        });
    }
    Ok(PredictionFile::new(frames))
}

/// Trains both stages in `out_dir`, then predicts and scores the test split.
pub fn run_experiment(cfg: &RunConfig, train_set: &Dataset, test_set: &Dataset, out_dir: impl AsRef<Path>) -> Result<EvalReport> {
    let out_dir = out_dir.as_ref();
    train(1, train_set, cfg, out_dir)?;
    let outcome = train(2, train_set, cfg, out_dir)?;
    evaluate_checkpoint(&outcome.checkpoint, test_set, cfg)
}

pub fn evaluate_checkpoint(path: impl AsRef<Path>, test_set: &Dataset, cfg: &RunConfig) -> Result<EvalReport> {
    let ck = Checkpoint::load(path)?;
    ck.ensure_vocab(&test_set.vocab)?;
    let (preds, _) = predict(&ck, &FrameInput::from_dataset(test_set), &cfg.decode)?;
    evaluate(&preds, &test_set.annotations(), &test_set.vocab, &cfg.eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub layers: usize,
    pub feature_dim: usize,
    pub heads: usize,
    pub ap_i: f64,
    pub ap_ivt: f64,
    pub ar_ivt: f64,
}

/// Trains stage 1 once, then stage 2 once per message-passing variant from the
/// same stage-1 weights, and scores each on the test split.
pub fn ablate(cfg: &RunConfig, train_set: &Dataset, test_set: &Dataset, out_dir: impl AsRef<Path>) -> Result<Vec<AblationRow>> {
    let out_dir = out_dir.as_ref();
    let shared = out_dir.join("stage1");
    let stage1 = train(1, train_set, cfg, &shared)?.checkpoint;
    let mut rows = Vec::new();
    for variant in MessagePassing::ALL {
        let dir = out_dir.join(variant.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let target = checkpoint_path(&dir, 1);
        if !target.exists() {
            std::fs::copy(&stage1, &target).map_err(|e| Error::io(&target, e))?;
        }
        let mut c = cfg.clone();
        c.model.mp_variant = variant;
        let out = train(2, train_set, &c, &dir)?;
        let report = evaluate_checkpoint(&out.checkpoint, test_set, &c)?;
        rows.push(AblationRow {
            variant: variant.name().to_uppercase(),
            layers: c.model.mp_layers,
            feature_dim: c.model.d_prime,
            heads: if variant == MessagePassing::Gat { c.model.mp_heads } else { 1 },
            ap_i: report.ap_i,
            ap_ivt: report.ap_ivt,
            ar_ivt: report.ar_ivt,
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<8} {:>7} {:>8} {:>6} {:>8} {:>8} {:>8}", "method", "layers", "feat.dim", "heads", "AP_I", "AP_IVT", "AR_IVT");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<8} {:>7} {:>8} {:>6} {:>8.2} {:>8.2} {:>8.2}",
            r.variant, r.layers, r.feature_dim, r.heads, r.ap_i, r.ap_ivt, r.ar_ivt
        );
    }
    s
}
