//! Pseudo instance labels, class-balancing weights and the training losses.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::PseudoLabelChoice;
use crate::data::{Detection, FrameAnnotation};
use crate::decoder::argmax;
use crate::error::{Error, Result};
use crate::graph::EdgeSet;
use crate::nn::{log_softmax_last, softplus};
use crate::vocab::LabelVocabulary;

/// Per-instance supervision for the interaction graph. `target == None` marks
/// an instrument with no matching triplet in the frame; its verb is then the
/// background class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PseudoInstanceLabel {
    pub instrument_index: usize,
    pub target: Option<usize>,
    pub verb: usize,
}

/// Inverse-frequency weights over target classes, normalized to mean 1 over the
/// classes that occur. Absent classes get weight 0.
pub fn class_weights(annotations: &[FrameAnnotation], num_targets: usize) -> Result<Vec<f64>> {
    if annotations.is_empty() {
        return Err(Error::Config("class weights need at least one training frame".into()));
    }
    let mut counts = vec![0usize; num_targets];
    for a in annotations {
        if a.target_presence.len() != num_targets {
            return Err(Error::Vocabulary(format!(
                "frame `{}` has {} target labels, expected {num_targets}",
                a.frame_id,
                a.target_presence.len()
            )));
        }
        for (c, &y) in a.target_presence.iter().enumerate() {
            counts[c] += usize::from(y == 1);
        }
    }
    weights_from_counts(&counts)
}

pub fn weights_from_counts(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Config("no target class is ever present in the training set".into()));
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { total as f64 / n as f64 })
        .collect();
    let present = counts.iter().filter(|&&n| n > 0).count() as f64;
    let mean = raw.iter().sum::<f64>() / present;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

/// Reads a JSON array of per-class weights.
pub fn load_class_weights(path: impl AsRef<Path>, num_targets: usize) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let w: Vec<f64> = serde_json::from_str(&text)?;
    if w.len() != num_targets || w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Config(format!(
            "{}: expected {num_targets} non-negative weights",
            path.display()
        )));
    }
    Ok(w)
}

/// Weighted binary cross entropy over a batch of target logits `(B, N)`.
/// The weight scales only the positive term; classes with weight 0 are left
/// out entirely. Each frame's sum is divided by `N`, then frames are averaged.
pub fn target_bce(logits: &Tensor, labels: &[Vec<u8>], weights: &[f64]) -> Result<Tensor> {
    let logits = if logits.rank() == 1 {
        logits.unsqueeze(0)?
    } else {
        logits.clone()
    };
    let (b, n) = logits.dims2()?;
    if labels.len() != b || weights.len() != n || labels.iter().any(|l| l.len() != n) {
        return Err(Error::Validation(format!(
            "target loss expects {b} label rows and {n} weights matching {n} logits"
        )));
    }
    if labels.iter().flatten().any(|&y| y > 1) {
        return Err(Error::Validation("target labels must be 0 or 1".into()));
    }
    let mut pos = Vec::with_capacity(b * n);
    let mut neg = Vec::with_capacity(b * n);
    for row in labels {
        for (c, &y) in row.iter().enumerate() {
            let mask = if weights[c] > 0.0 { 1.0 } else { 0.0 };
            pos.push(weights[c] * f64::from(y));
            neg.push(mask * f64::from(1 - y));
        }
    }
    let (dev, dt) = (logits.device(), logits.dtype());
    let pos = Tensor::from_vec(pos, (b, n), dev)?.to_dtype(dt)?;
    let neg = Tensor::from_vec(neg, (b, n), dev)?.to_dtype(dt)?;
    // -log sigma(x) = softplus(-x), -log(1 - sigma(x)) = softplus(x)
    let per = ((softplus(&logits.neg()?)? * pos)? + (softplus(&logits)? * neg)?)?;
    Ok((per.sum_all()? / (b * n) as f64)?)
}

fn instance_seed(seed: u64, epoch: usize, frame_id: &str, instance: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.update(frame_id.as_bytes());
    h.update((instance as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Assigns each detection a (target, verb) from the frame's present triplets
/// whose instrument matches the detection's class.
pub fn pseudo_labels(
    detections: &[Detection],
    frame: &FrameAnnotation,
    vocab: &LabelVocabulary,
    seed: u64,
    epoch: usize,
    choice: PseudoLabelChoice,
) -> Result<Vec<PseudoInstanceLabel>> {
    let mut present = Vec::new();
    for t in frame.present_triplets() {
        present.push(vocab.triplet_components(t)?);
    }
    Ok(detections
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let matching: Vec<_> = present.iter().filter(|c| c.instrument == d.instrument).collect();
            let pick = match (matching.len(), choice) {
                (0, _) => None,
                (1, _) | (_, PseudoLabelChoice::First) => Some(matching[0]),
                (m, PseudoLabelChoice::Random) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(seed, epoch, &frame.frame_id, i));
                    Some(matching[rng.random_range(0..m)])
                }
            };
            match pick {
                Some(c) => PseudoInstanceLabel {
                    instrument_index: i,
                    target: Some(c.target),
                    verb: c.verb,
                },
                None => PseudoInstanceLabel {
                    instrument_index: i,
                    target: None,
                    verb: vocab.background_verb(),
                },
            }
        })
        .collect())
}

/// Edge and verb cross entropies, each averaged over the instances that
/// contribute to it across all frames of the batch. Zero when none do.
pub fn graph_losses(frames: &[(&EdgeSet, &[PseudoInstanceLabel])]) -> Result<(Tensor, Tensor)> {
    let (dev, dt) = frames
        .first()
        .map(|(e, _)| (e.edge_scores.device().clone(), e.edge_scores.dtype()))
        .unwrap_or((Device::Cpu, DType::F64));
    let mut edge_terms = Vec::new();
    let mut verb_terms = Vec::new();
    for (edges, labels) in frames {
        let (o, n) = (edges.num_instruments, edges.num_targets);
        if labels.len() != o {
            return Err(Error::Validation(format!(
                "{} pseudo labels for {o} instruments",
                labels.len()
            )));
        }
        if o == 0 {
            continue;
        }
        let scores = edges.edge_scores.reshape((o, n))?;
        let edge_logp = log_softmax_last(&scores)?.flatten_all()?;
        let verb_logp = log_softmax_last(&edges.verb_logits)?;
        let v1 = verb_logp.dim(1)?;
        let verb_logp = verb_logp.flatten_all()?;
        let host_scores: Vec<f64> = scores.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;

        let mut edge_idx = Vec::new();
        let mut verb_idx = Vec::new();
        for l in labels.iter() {
            let i = l.instrument_index;
            if i >= o || l.verb >= v1 || l.target.is_some_and(|j| j >= n) {
                return Err(Error::Validation(format!("pseudo label {l:?} out of range")));
            }
            let j = match l.target {
                Some(j) => {
                    edge_idx.push((i * n + j) as u32);
                    j
                }
                None => argmax(&host_scores[i * n..(i + 1) * n]),
            };
            verb_idx.push(((i * n + j) * v1 + l.verb) as u32);
        }
        if !edge_idx.is_empty() {
            let idx = Tensor::new(edge_idx.as_slice(), &dev)?;
            edge_terms.push(edge_logp.index_select(&idx, 0)?);
        }
        let idx = Tensor::new(verb_idx.as_slice(), &dev)?;
        verb_terms.push(verb_logp.index_select(&idx, 0)?);
    }
    let mean_nll = |terms: Vec<Tensor>| -> Result<Tensor> {
        if terms.is_empty() {
            return Ok(Tensor::zeros((), dt, &dev)?);
        }
        Ok(Tensor::cat(&terms, 0)?.mean_all()?.neg()?)
    };
    Ok((mean_nll(edge_terms)?, mean_nll(verb_terms)?))
}

/// The three loss terms and their weighted sum.
#[derive(Clone, Debug)]
pub struct LossBundle {
    pub l_t: Tensor,
    pub l_e: Tensor,
    pub l_v: Tensor,
    pub total: Tensor,
}

impl LossBundle {
    pub fn new(l_t: Tensor, l_e: Tensor, l_v: Tensor, alpha: f64, beta: f64) -> Result<Self> {
        let total = ((&l_t + (&l_e * alpha)?)? + (&l_v * beta)?)?;
        Ok(Self { l_t, l_e, l_v, total })
    }

    pub fn values(&self) -> Result<LossValues> {
        let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossValues {
            l_t: s(&self.l_t)?,
            l_e: s(&self.l_e)?,
            l_v: s(&self.l_v)?,
            total: s(&self.total)?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub l_t: f64,
    pub l_e: f64,
    pub l_v: f64,
    pub total: f64,
}
