//! Scalar reference implementations and fixtures shared by the integration
//! tests and the acceptance runner.

#![allow(dead_code)]

pub mod criteria;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use triplet_core::backbone::{InstrumentFeatures, SceneFeatures};
use triplet_core::config::{MessagePassing, ModelConfig};
use triplet_core::data::{BoxXYXY, Detection};
use triplet_core::eval::Instance;
use triplet_core::graph::{EdgeLogits, InteractionGraph};
use triplet_core::mcit::Mcit;
use triplet_core::model::ParamStore;
use triplet_core::supervision::PseudoInstanceLabel;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Weighted target BCE, one scalar at a time.
pub fn bce_loop(logits: &[Vec<f64>], labels: &[Vec<u8>], weights: &[f64]) -> f64 {
    let b = logits.len();
    let n = weights.len();
    let mut total = 0.0;
    for f in 0..b {
        for c in 0..n {
            if weights[c] == 0.0 {
                continue;
            }
            let x = logits[f][c];
            let y = f64::from(labels[f][c]);
            total -= weights[c] * y * log_sigmoid(x) + (1.0 - y) * log_sigmoid(-x);
        }
    }
    total / (b * n) as f64
}

fn log_softmax_at(row: &[f64], k: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in row {
        if x > m {
            m = x;
        }
    }
    let mut z = 0.0;
    for &x in row {
        z += (x - m).exp();
    }
    row[k] - m - z.ln()
}

/// One frame's raw edge scores `(O*N)`, verb logits `(O*N*(V+1))` and labels.
pub struct LossFrame {
    pub o: usize,
    pub n: usize,
    pub v1: usize,
    pub scores: Vec<f64>,
    pub verbs: Vec<f64>,
    pub labels: Vec<PseudoInstanceLabel>,
}

/// Edge and verb cross entropies by explicit loops over frames and instances.
pub fn graph_losses_loop(frames: &[LossFrame]) -> (f64, f64) {
    let (mut le, mut ne, mut lv, mut nv) = (0.0, 0usize, 0.0, 0usize);
    for f in frames {
        for l in &f.labels {
            let i = l.instrument_index;
            let row = &f.scores[i * f.n..(i + 1) * f.n];
            let j = match l.target {
                Some(j) => {
                    le -= log_softmax_at(row, j);
                    ne += 1;
                    j
                }
                None => {
                    let mut best = 0;
                    for k in 1..f.n {
                        if row[k] > row[best] {
                            best = k;
                        }
                    }
                    best
                }
            };
            let e = i * f.n + j;
            lv -= log_softmax_at(&f.verbs[e * f.v1..(e + 1) * f.v1], l.verb);
            nv += 1;
        }
    }
    (
        if ne == 0 { 0.0 } else { le / ne as f64 },
        if nv == 0 { 0.0 } else { lv / nv as f64 },
    )
}

pub fn random_loss_frame(r: &mut impl Rng, max_o: usize, n: usize, v1: usize) -> LossFrame {
    let o = r.random_range(0..=max_o);
    let scores = (0..o * n).map(|_| r.random_range(-6.0..6.0)).collect();
    let verbs = (0..o * n * v1).map(|_| r.random_range(-6.0..6.0)).collect();
    let labels = (0..o)
        .map(|i| {
            if r.random_bool(0.3) {
                PseudoInstanceLabel {
                    instrument_index: i,
                    target: None,
                    verb: v1 - 1,
                }
            } else {
                PseudoInstanceLabel {
                    instrument_index: i,
                    target: Some(r.random_range(0..n)),
                    verb: r.random_range(0..v1 - 1),
                }
            }
        })
        .collect();
    LossFrame {
        o,
        n,
        v1,
        scores,
        verbs,
        labels,
    }
}

/// `(target, verb, score)` per instrument, from a plain sequential argmax.
pub fn decode_oracle(l: &EdgeLogits) -> Vec<(usize, usize, f64)> {
    let probs = |row: &[f64]| -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        row.iter().map(|x| (x - m).exp() / z).collect()
    };
    let mut out = Vec::new();
    for i in 0..l.num_instruments {
        let p = probs(&l.scores[i * l.num_targets..(i + 1) * l.num_targets]);
        let mut j = 0;
        for k in 0..p.len() {
            if p[k] > p[j] {
                j = k;
            }
        }
        let e = i * l.num_targets + j;
        let q = probs(&l.verbs[e * l.num_verb_classes..(e + 1) * l.num_verb_classes]);
        let mut v = 0;
        for k in 0..q.len() {
            if q[k] > q[v] {
                v = k;
            }
        }
        out.push((j, v, p[j] * q[v]));
    }
    out
}

pub fn random_edge_logits(r: &mut impl Rng, o: usize, n: usize, v1: usize, integer: bool) -> EdgeLogits {
    let mut draw = |k: usize| -> Vec<f64> {
        (0..k)
            .map(|_| {
                if integer {
                    f64::from(r.random_range(-2i32..=2))
                } else {
                    r.random_range(-5.0..5.0)
                }
            })
            .collect()
    };
    EdgeLogits {
        num_instruments: o,
        num_targets: n,
        num_verb_classes: v1,
        scores: draw(o * n),
        verbs: draw(o * n * v1),
    }
}

fn oracle_iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let ix1 = if a.x1() > b.x1() { a.x1() } else { b.x1() };
    let iy1 = if a.y1() > b.y1() { a.y1() } else { b.y1() };
    let ix2 = if a.x2() < b.x2() { a.x2() } else { b.x2() };
    let iy2 = if a.y2() < b.y2() { a.y2() } else { b.y2() };
    if ix2 <= ix1 || iy2 <= iy1 {
        return 0.0;
    }
    let inter = (ix2 - ix1) * (iy2 - iy1);
    inter / (a.area() + b.area() - inter)
}

/// Per-class `(ap, ar)` of one video by nested loops: selection-order ranking
/// (earlier index first among equal scores), greedy matching, a precision
/// envelope taken as the max over later ranks, and one envelope term per hit.
pub fn nested_ap(preds: &[Instance], gts: &[Instance], threshold: f64) -> BTreeMap<usize, (f64, f64)> {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort();
    classes.dedup();
    let mut out = BTreeMap::new();
    for c in classes {
        let num_gt = gts.iter().filter(|g| g.class == c).count();
        let mut left: Vec<usize> = (0..preds.len()).filter(|&p| preds[p].class == c).collect();
        let mut order = Vec::new();
        while !left.is_empty() {
            let mut best = 0;
            for k in 1..left.len() {
                if preds[left[k]].score > preds[left[best]].score {
                    best = k;
                }
            }
            order.push(left.remove(best));
        }
        let mut claimed = vec![false; gts.len()];
        let mut hit = Vec::new();
        for &p in &order {
            let mut pick: Option<usize> = None;
            let mut pick_iou = 0.0;
            for g in 0..gts.len() {
                if gts[g].class != c || gts[g].frame != preds[p].frame || claimed[g] {
                    continue;
                }
                let o = oracle_iou(&preds[p].bbox, &gts[g].bbox);
                if o >= threshold && (pick.is_none() || o > pick_iou) {
                    pick = Some(g);
                    pick_iou = o;
                }
            }
            if let Some(g) = pick {
                claimed[g] = true;
            }
            hit.push(pick.is_some());
        }
        let mut precision = Vec::new();
        let mut tp = 0usize;
        for (k, &h) in hit.iter().enumerate() {
            if h {
                tp += 1;
            }
            precision.push(tp as f64 / (k + 1) as f64);
        }
        let mut sum = 0.0;
        for k in 0..hit.len() {
            if !hit[k] {
                continue;
            }
            let mut env = precision[k];
            for q in k + 1..hit.len() {
                if precision[q] > env {
                    env = precision[q];
                }
            }
            sum += env;
        }
        out.insert(c, (sum / num_gt as f64, tp as f64 / num_gt as f64));
    }
    out
}

/// Boxes on a coarse lattice so that exact overlaps and IoU ties occur often.
pub fn lattice_box(r: &mut impl Rng) -> BoxXYXY {
    let x = f64::from(r.random_range(0..6u32)) * 0.125;
    let y = f64::from(r.random_range(0..6u32)) * 0.125;
    let w = f64::from(r.random_range(1..=3u32)) * 0.125;
    let h = f64::from(r.random_range(1..=3u32)) * 0.125;
    BoxXYXY::new(x, y, x + w, y + h).unwrap()
}

pub struct EvalFixture {
    pub preds: Vec<Instance>,
    pub gts: Vec<Instance>,
}

pub fn random_eval_fixture(r: &mut impl Rng) -> EvalFixture {
    let frames = r.random_range(1..=4);
    let classes = r.random_range(1..=3);
    let mut gts = Vec::new();
    for _ in 0..r.random_range(1..=12) {
        gts.push(Instance {
            frame: r.random_range(0..frames),
            class: r.random_range(0..classes),
            bbox: lattice_box(r),
            score: 1.0,
        });
    }
    let mut preds = Vec::new();
    for _ in 0..r.random_range(0..=16) {
        let bbox = if !gts.is_empty() && r.random_bool(0.6) {
            gts[r.random_range(0..gts.len())].bbox
        } else {
            lattice_box(r)
        };
        preds.push(Instance {
            frame: r.random_range(0..frames),
            class: r.random_range(0..classes),
            bbox,
            // coarse scores so that ties exercise the ranking order
            score: f64::from(r.random_range(0..5u32)) * 0.25,
        });
    }
    EvalFixture { preds, gts }
}

pub fn random_detections(r: &mut impl Rng, o: usize, num_instruments: usize) -> Vec<Detection> {
    (0..o)
        .map(|_| {
            let x = r.random_range(0.0..0.7);
            let y = r.random_range(0.0..0.7);
            Detection {
                bbox: BoxXYXY::new(x, y, x + r.random_range(0.05..0.3), y + r.random_range(0.05..0.3)).unwrap(),
                instrument: r.random_range(0..num_instruments),
                confidence: r.random_range(0.1..1.0),
            }
        })
        .collect()
}

/// Class-token transformer and interaction graph at gradient-check size.
pub struct TinyHeads {
    pub store: ParamStore,
    pub mcit: Mcit,
    pub graph: InteractionGraph,
    pub scene: SceneFeatures,
    pub instruments: InstrumentFeatures,
}

pub fn tiny_cfg(variant: MessagePassing) -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        ffn_dim: 16,
        t_l: 1,
        d_prime: 8,
        mp_variant: variant,
        mp_layers: 2,
        mp_heads: 2,
        edge_hidden: 8,
        ..ModelConfig::default()
    }
}

pub fn tiny_heads(seed: u64, n: usize, v: usize, o: usize, variant: MessagePassing) -> TinyHeads {
    let cfg = tiny_cfg(variant);
    let store = ParamStore::new(seed);
    let vb = store.var_builder(DType::F64, &Device::Cpu);
    let mcit = Mcit::new(&cfg, n, vb.pp("mcit")).unwrap();
    let graph = InteractionGraph::new(&cfg, v, vb.pp("ig")).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let (h, w) = (2, 3);
    let grid: Vec<f64> = (0..h * w * cfg.d).map(|_| r.random_range(-1.0..1.0)).collect();
    let inst: Vec<f64> = (0..o * cfg.d).map(|_| r.random_range(-1.0..1.0)).collect();
    TinyHeads {
        store,
        mcit,
        graph,
        scene: SceneFeatures {
            grid: Tensor::from_vec(grid, (h * w, cfg.d), &Device::Cpu).unwrap(),
            h,
            w,
        },
        instruments: InstrumentFeatures(Tensor::from_vec(inst, (o, cfg.d), &Device::Cpu).unwrap()),
    }
}

/// Largest relative error between autodiff and central differences over every
/// scalar parameter. `loss` must rebuild the graph from the current variables.
/// The denominator is floored at 1e-4 so that gradients which are exactly zero
/// (key biases under softmax) are not judged by difference rounding noise.
pub fn max_grad_error(vars: &[(String, Var)], loss: &dyn Fn() -> Tensor, eps: f64) -> (f64, String) {
    let l = loss();
    let grads = l.backward().unwrap();
    let mut worst = (0.0, String::new());
    for (name, var) in vars {
        let Some(g) = grads.get(var.as_tensor()) else {
            continue;
        };
        let analytic: Vec<f64> = g.flatten_all().unwrap().to_vec1().unwrap();
        let shape = var.as_tensor().shape().clone();
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        for k in 0..base.len() {
            let probe = |delta: f64| -> f64 {
                let mut p = base.clone();
                p[k] += delta;
                var.set(&Tensor::from_vec(p, shape.clone(), &Device::Cpu).unwrap()).unwrap();
                loss().to_scalar::<f64>().unwrap()
            };
            let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
            let a = analytic[k];
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            let err = (a - numeric).abs() / denom;
            if err > worst.0 {
                worst = (err, format!("{name}[{k}]: autodiff {a:.6e} numeric {numeric:.6e}"));
            }
        }
        var.set(&Tensor::from_vec(base, shape, &Device::Cpu).unwrap()).unwrap();
    }
    worst
}
