//! Turns edge scores and verb logits into triplet detections.
//!
//! Each instrument instance yields at most one association: first the target
//! with the highest edge probability, then the verb with the highest
//! probability on that edge. Ties go to the lowest index.

use std::path::Path;

use crate::config::DecodeConfig;
use crate::data::{Detection, FramePredictions, PredictionFile, TripletDetection};
use crate::error::{Error, Result};
use crate::graph::EdgeLogits;
use crate::vocab::{LabelVocabulary, TripletComponents};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedAssociation {
    pub instrument_index: usize,
    pub target: usize,
    pub verb: usize,
    pub edge_prob: f64,
    pub verb_prob: f64,
    pub score: f64,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

pub fn decode_associations(logits: &EdgeLogits) -> Vec<DecodedAssociation> {
    if logits.num_targets == 0 {
        return Vec::new();
    }
    (0..logits.num_instruments)
        .map(|i| {
            let edge = softmax(logits.instrument_scores(i));
            let j = argmax(&edge);
            let verb = softmax(logits.verb_row(i, j));
            let k = argmax(&verb);
            DecodedAssociation {
                instrument_index: i,
                target: j,
                verb: k,
                edge_prob: edge[j],
                verb_prob: verb[k],
                score: edge[j] * verb[k],
            }
        })
        .collect()
}

/// Decodes one frame. `detections[i]` is the instrument instance behind row `i`
/// of the edge logits.
pub fn decode(
    logits: &EdgeLogits,
    detections: &[Detection],
    vocab: &LabelVocabulary,
    cfg: &DecodeConfig,
) -> Result<Vec<TripletDetection>> {
    if detections.len() != logits.num_instruments {
        return Err(Error::Validation(format!(
            "{} detections but edge logits for {} instruments",
            detections.len(),
            logits.num_instruments
        )));
    }
    let background = vocab.background_verb();
    let mut out = Vec::with_capacity(detections.len());
    for a in decode_associations(logits) {
        if a.verb == background && cfg.suppress_background {
            continue;
        }
        let det = &detections[a.instrument_index];
        let triplet = if a.verb == background {
            None
        } else {
            vocab.triplet_id(TripletComponents::new(det.instrument, a.verb, a.target))
        };
        if triplet.is_none() && cfg.drop_invalid_triplets {
            continue;
        }
        out.push(TripletDetection {
            bbox: det.bbox,
            instrument: det.instrument,
            verb: a.verb,
            target: a.target,
            triplet,
            score: a.score,
        });
    }
    Ok(out)
}

pub fn export_predictions(frames: &[FramePredictions], path: impl AsRef<Path>) -> Result<()> {
    PredictionFile::new(frames.to_vec()).save(path)
}
