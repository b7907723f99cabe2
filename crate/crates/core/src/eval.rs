//! Instrument localization and triplet detection AP/AR.
//!
//! Predictions of one class within one video are ranked by score and matched
//! greedily: each takes the unclaimed ground truth of the same class and frame
//! with the highest IoU, provided it reaches the threshold. AP is the area under
//! the monotone precision envelope; AR is the recall after the whole list.
//! Per-class values are averaged over the videos in which the class occurs, and
//! headline values over the classes that occur at all.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::data::{AnnotationFile, BoxXYXY, FrameAnnotation, PredictionFile};
use crate::error::{Error, Result};
use crate::vocab::LabelVocabulary;

pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let w = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let h = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = w * h;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// A box with a class and, for predictions, a score. `frame` groups boxes
/// that can match each other.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Instance {
    pub frame: usize,
    pub class: usize,
    pub bbox: BoxXYXY,
    pub score: f64,
}

/// Per prediction the ground truth it claimed; per ground truth whether it was claimed.
/// Indices refer to the slices passed to [`match_and_pr`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    pub matched: Vec<Option<usize>>,
    pub covered: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassCurve {
    pub num_gt: usize,
    /// Prediction indices in ranked order.
    pub ranking: Vec<usize>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Fractions in `[0, 1]`.
    pub ap: f64,
    pub ar: f64,
}

/// All-points interpolated AP from a ranked list of TP flags.
pub fn average_precision(tp: &[bool], num_gt: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    let mut envelope = precision.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    // each true positive lifts recall by 1/num_gt
    let mut sum = 0.0;
    for (t, p) in tp.iter().zip(&envelope) {
        if *t {
            sum += p;
        }
    }
    let ap = if num_gt == 0 { 0.0 } else { sum / num_gt as f64 };
    (precision, recall, ap)
}

/// Matches the predictions of one video against its ground truth, class by
/// class. Classes without ground truth are omitted from the result.
pub fn match_and_pr(
    predictions: &[Instance],
    ground_truth: &[Instance],
    iou_threshold: f64,
) -> (MatchResult, BTreeMap<usize, ClassCurve>) {
    let mut result = MatchResult {
        matched: vec![None; predictions.len()],
        covered: vec![false; ground_truth.len()],
    };
    let mut gt_by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (g, inst) in ground_truth.iter().enumerate() {
        gt_by_class.entry(inst.class).or_default().push(g);
    }
    let mut curves = BTreeMap::new();
    for (&class, gts) in &gt_by_class {
        let mut ranking: Vec<usize> = (0..predictions.len())
            .filter(|&p| predictions[p].class == class)
            .collect();
        ranking.sort_by(|&a, &b| predictions[b].score.total_cmp(&predictions[a].score));
        let mut tp = Vec::with_capacity(ranking.len());
        for &p in &ranking {
            let pred = &predictions[p];
            let mut best: Option<(usize, f64)> = None;
            for &g in gts {
                let gt = &ground_truth[g];
                if result.covered[g] || gt.frame != pred.frame {
                    continue;
                }
                let o = iou(&pred.bbox, &gt.bbox);
                if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            if let Some((g, _)) = best {
                result.covered[g] = true;
                result.matched[p] = Some(g);
            }
            tp.push(best.is_some());
        }
        let (precision, recall, ap) = average_precision(&tp, gts.len());
        let ar = recall.last().copied().unwrap_or(0.0);
        curves.insert(
            class,
            ClassCurve {
                num_gt: gts.len(),
                ranking,
                precision,
                recall,
                ap,
                ar,
            },
        );
    }
    (result, curves)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: usize,
    pub name: String,
    pub num_gt: usize,
    /// Videos in which the class has ground truth.
    pub videos: usize,
    pub ap: f64,
    pub ar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRow {
    pub video: String,
    pub ap_i: f64,
    pub ar_i: f64,
    pub ap_ivt: f64,
    pub ar_ivt: f64,
}

/// Percentages in `[0, 100]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_i: f64,
    pub ar_i: f64,
    pub ap_ivt: f64,
    pub ar_ivt: f64,
    pub iou_threshold: f64,
    pub num_frames: usize,
    pub num_videos: usize,
    /// Triplet predictions whose tuple is not in the dictionary.
    pub invalid_predictions: usize,
    pub instruments: Vec<ClassRow>,
    pub triplets: Vec<ClassRow>,
    pub videos: Vec<VideoRow>,
}

#[derive(Default)]
struct VideoLists {
    inst_pred: Vec<Instance>,
    inst_gt: Vec<Instance>,
    trip_pred: Vec<Instance>,
    trip_gt: Vec<Instance>,
}

fn top_k(mut v: Vec<Instance>, k: Option<usize>) -> Vec<Instance> {
    if let Some(k) = k {
        v.sort_by(|a, b| b.score.total_cmp(&a.score));
        v.truncate(k);
    }
    v
}

struct Aggregate {
    sums: BTreeMap<usize, (f64, f64, usize, usize)>,
}

impl Aggregate {
    fn new() -> Self {
        Self { sums: BTreeMap::new() }
    }

    fn add(&mut self, curves: &BTreeMap<usize, ClassCurve>) {
        for (&c, curve) in curves {
            let e = self.sums.entry(c).or_insert((0.0, 0.0, 0, 0));
            e.0 += curve.ap;
            e.1 += curve.ar;
            e.2 += 1;
            e.3 += curve.num_gt;
        }
    }

    fn rows(&self, names: &dyn Fn(usize) -> String) -> Vec<ClassRow> {
        self.sums
            .iter()
            .map(|(&c, &(ap, ar, videos, num_gt))| ClassRow {
                class: c,
                name: names(c),
                num_gt,
                videos,
                ap: 100.0 * ap / videos as f64,
                ar: 100.0 * ar / videos as f64,
            })
            .collect()
    }
}

fn mean<I: Iterator<Item = f64>>(it: I) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn curve_means(curves: &BTreeMap<usize, ClassCurve>) -> (f64, f64) {
    (
        100.0 * mean(curves.values().map(|c| c.ap)),
        100.0 * mean(curves.values().map(|c| c.ar)),
    )
}

/// Scores predictions against annotations.
pub fn evaluate(
    predictions: &PredictionFile,
    annotations: &[FrameAnnotation],
    vocab: &LabelVocabulary,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let index: HashMap<&str, usize> = annotations
        .iter()
        .enumerate()
        .map(|(k, a)| (a.frame_id.as_str(), k))
        .collect();
    let mut videos: BTreeMap<&str, VideoLists> = BTreeMap::new();
    for (k, a) in annotations.iter().enumerate() {
        let v = videos.entry(a.video_id.as_str()).or_default();
        for g in &a.gt_instances {
            v.inst_gt.push(Instance {
                frame: k,
                class: g.instrument,
                bbox: g.bbox,
                score: 1.0,
            });
            if let Some(t) = g.triplet {
                v.trip_gt.push(Instance {
                    frame: k,
                    class: t,
                    bbox: g.bbox,
                    score: 1.0,
                });
            }
        }
    }
    let mut invalid = 0;
    for f in &predictions.frames {
        let &k = index.get(f.frame_id.as_str()).ok_or_else(|| {
            Error::Evaluation(format!("predicted frame `{}` has no annotation", f.frame_id))
        })?;
        let v = videos
            .get_mut(annotations[k].video_id.as_str())
            .expect("every annotated video is registered");
        let inst: Vec<Instance> = if f.instrument_detections.is_empty() {
            f.triplet_detections
                .iter()
                .map(|t| Instance {
                    frame: k,
                    class: t.instrument,
                    bbox: t.bbox,
                    score: t.score,
                })
                .collect()
        } else {
            f.instrument_detections
                .iter()
                .map(|d| Instance {
                    frame: k,
                    class: d.instrument,
                    bbox: d.bbox,
                    score: d.confidence,
                })
                .collect()
        };
        v.inst_pred.extend(top_k(inst, cfg.max_dets));
        let mut trip = Vec::new();
        for t in &f.triplet_detections {
            match t.triplet {
                Some(c) => trip.push(Instance {
                    frame: k,
                    class: c,
                    bbox: t.bbox,
                    score: t.score,
                }),
                None => invalid += 1,
            }
        }
        v.trip_pred.extend(top_k(trip, cfg.max_dets));
    }

    let mut inst_agg = Aggregate::new();
    let mut trip_agg = Aggregate::new();
    let mut video_rows = Vec::new();
    for (name, v) in &videos {
        let (_, ci) = match_and_pr(&v.inst_pred, &v.inst_gt, cfg.iou_threshold);
        let (_, ct) = match_and_pr(&v.trip_pred, &v.trip_gt, cfg.iou_threshold);
        inst_agg.add(&ci);
        trip_agg.add(&ct);
        let (ap_i, ar_i) = curve_means(&ci);
        let (ap_ivt, ar_ivt) = curve_means(&ct);
        video_rows.push(VideoRow {
            video: name.to_string(),
            ap_i,
            ar_i,
            ap_ivt,
            ar_ivt,
        });
    }
    let instruments = inst_agg.rows(&|c| vocab.instruments().get(c).cloned().unwrap_or_default());
    let triplets = trip_agg.rows(&|c| {
        vocab
            .triplet_components(c)
            .map(|t| {
                format!(
                    "{},{},{}",
                    vocab.instruments()[t.instrument],
                    vocab.verbs()[t.verb],
                    vocab.targets()[t.target]
                )
            })
            .unwrap_or_default()
    });
    Ok(EvalReport {
        ap_i: mean(instruments.iter().map(|r| r.ap)),
        ar_i: mean(instruments.iter().map(|r| r.ar)),
        ap_ivt: mean(triplets.iter().map(|r| r.ap)),
        ar_ivt: mean(triplets.iter().map(|r| r.ar)),
        iou_threshold: cfg.iou_threshold,
        num_frames: annotations.len(),
        num_videos: videos.len(),
        invalid_predictions: invalid,
        instruments,
        triplets,
        videos: video_rows,
    })
}

/// Loads both files, checking the predictions against the annotation vocabulary.
pub fn evaluate_files(
    predictions_path: impl AsRef<Path>,
    annotations_path: impl AsRef<Path>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let ann = AnnotationFile::load(annotations_path)?;
    let preds = PredictionFile::load(predictions_path, &ann.vocab)?;
    evaluate(&preds, &ann.frames, &ann.vocab, cfg)
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "IoU threshold {:.2}, {} frames in {} videos", self.iou_threshold, self.num_frames, self.num_videos);
        let _ = writeln!(s, "{:<8} {:>8} {:>8}", "", "AP", "AR");
        let _ = writeln!(s, "{:<8} {:>8.2} {:>8.2}", "I", self.ap_i, self.ar_i);
        let _ = writeln!(s, "{:<8} {:>8.2} {:>8.2}", "IVT", self.ap_ivt, self.ar_ivt);
        if self.invalid_predictions > 0 {
            let _ = writeln!(s, "out-of-dictionary triplet predictions: {}", self.invalid_predictions);
        }
        for (title, rows) in [("instrument", &self.instruments), ("triplet", &self.triplets)] {
            let _ = writeln!(s, "\n{:<40} {:>6} {:>8} {:>8}", title, "GT", "AP", "AR");
            for r in rows {
                let _ = writeln!(s, "{:<40} {:>6} {:>8.2} {:>8.2}", r.name, r.num_gt, r.ap, r.ar);
            }
        }
        let _ = writeln!(s, "\n{:<12} {:>8} {:>8} {:>8} {:>8}", "video", "AP_I", "AR_I", "AP_IVT", "AR_IVT");
        for v in &self.videos {
            let _ = writeln!(s, "{:<12} {:>8.2} {:>8.2} {:>8.2} {:>8.2}", v.video, v.ap_i, v.ar_i, v.ap_ivt, v.ar_ivt);
        }
        s
    }
}
