//! The acceptance checks. Each returns whether it passed and a one-line detail.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use triplet_core::config::{DecodeConfig, EvalConfig, MessagePassing, RunConfig};
use triplet_core::data::{BoxXYXY, Detection, FrameAnnotation, FramePredictions, GtInstance, PredictionFile, TripletDetection};
use triplet_core::dataset::Dataset;
use triplet_core::decoder::{decode, decode_associations};
use triplet_core::eval::{evaluate, match_and_pr};
use triplet_core::graph::EdgeSet;
use triplet_core::model::{ParamStore, TripletModel};
use triplet_core::pipeline::{ablate, chance_predictions, evaluate_checkpoint};
use triplet_core::supervision::{graph_losses, target_bce, LossBundle, PseudoInstanceLabel};
use triplet_core::synth::generate_synthetic_dataset;
use triplet_core::train::{checkpoint_path, train};
use triplet_core::vocab::{LabelVocabulary, TripletComponents};

use super::*;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

pub fn edge_set(f: &LossFrame) -> EdgeSet {
    let dev = Device::Cpu;
    EdgeSet {
        edge_features: Tensor::zeros((f.o * f.n, 1), DType::F64, &dev).unwrap(),
        edge_scores: Tensor::from_vec(f.scores.clone(), f.o * f.n, &dev).unwrap(),
        verb_logits: Tensor::from_vec(f.verbs.clone(), (f.o * f.n, f.v1), &dev).unwrap(),
        num_instruments: f.o,
        num_targets: f.n,
    }
}

/// Loss values against scalar loops on 100 random inputs each.
pub fn loss_oracles(seed: u64) -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let b = r.random_range(1..=4);
        let n = r.random_range(1..=15);
        let logits: Vec<Vec<f64>> = (0..b).map(|_| (0..n).map(|_| r.random_range(-8.0..8.0)).collect()).collect();
        let labels: Vec<Vec<u8>> = (0..b).map(|_| (0..n).map(|_| r.random_range(0..=1u8)).collect()).collect();
        let weights: Vec<f64> = (0..n)
            .map(|_| if r.random_bool(0.2) { 0.0 } else { r.random_range(0.1..3.0) })
            .collect();
        let t = Tensor::from_vec(logits.concat(), (b, n), &Device::Cpu).unwrap();
        let got = target_bce(&t, &labels, &weights).unwrap().to_scalar::<f64>().unwrap();
        worst = worst.max((got - bce_loop(&logits, &labels, &weights)).abs());

        let n = r.random_range(1..=6);
        let v1 = r.random_range(2..=5);
        let frames: Vec<LossFrame> = (0..r.random_range(1..=4)).map(|_| random_loss_frame(&mut r, 5, n, v1)).collect();
        let sets: Vec<EdgeSet> = frames.iter().map(edge_set).collect();
        let pairs: Vec<(&EdgeSet, &[PseudoInstanceLabel])> =
            sets.iter().zip(&frames).map(|(s, f)| (s, f.labels.as_slice())).collect();
        let (le, lv) = graph_losses(&pairs).unwrap();
        let (we, wv) = graph_losses_loop(&frames);
        worst = worst.max((le.to_scalar::<f64>().unwrap() - we).abs());
        worst = worst.max((lv.to_scalar::<f64>().unwrap() - wv).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-10 && secs < 5.0,
        format!("max abs deviation {worst:.2e} over 100 inputs per loss"),
    )
}

/// Central differences against autodiff through the target loss alone and the
/// weighted three-term total.
pub fn gradient_checks(seed: u64) -> Outcome {
    let t0 = Instant::now();
    let (n, v, o) = (3, 2, 2);
    let h = tiny_heads(seed, n, v, o, MessagePassing::Gat);
    let weights = [1.0, 0.5, 2.0];
    let labels = vec![vec![1u8, 0, 1]];
    let pseudo = [
        PseudoInstanceLabel {
            instrument_index: 0,
            target: Some(1),
            verb: 0,
        },
        PseudoInstanceLabel {
            instrument_index: 1,
            target: None,
            verb: v,
        },
    ];
    let l_t = || {
        let out = h.mcit.forward(&h.scene, &h.instruments).unwrap();
        target_bce(&out.target_logits, &labels, &weights).unwrap()
    };
    let total = || {
        let out = h.mcit.forward(&h.scene, &h.instruments).unwrap();
        let lt = target_bce(&out.target_logits, &labels, &weights).unwrap();
        let edges = h.graph.forward(&h.instruments, &out.embeddings.output_tokens).unwrap();
        let (le, lv) = graph_losses(&[(&edges, &pseudo[..])]).unwrap();
        LossBundle::new(lt, le, lv, 1.0, 0.5).unwrap().total
    };
    let vars = h.store.vars();
    let mcit_vars: Vec<_> = vars.iter().filter(|(k, _)| k.starts_with("mcit")).cloned().collect();
    let (e1, w1) = max_grad_error(&mcit_vars, &l_t, 1e-6);
    let (e2, w2) = max_grad_error(&vars, &total, 1e-6);
    let secs = t0.elapsed().as_secs_f64();
    let (worst, at) = if e1 >= e2 { (e1, w1) } else { (e2, w2) };
    outcome(
        worst < 1e-4 && secs < 30.0,
        format!("max relative error {worst:.2e} ({at})"),
    )
}

/// Closed-form score of the hand example: edge logits [2, 0], verb logits [0, 3, 0].
pub fn hand_example_score() -> f64 {
    let (e2, e3) = (2f64.exp(), 3f64.exp());
    e2 / (e2 + 1.0) * (e3 / (e3 + 2.0))
}

pub fn decoder_oracle(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let vocab = LabelVocabulary::new(
        (0..3).map(|k| format!("i{k}")).collect(),
        (0..4).map(|k| format!("v{k}")).collect(),
        (0..5).map(|k| format!("t{k}")).collect(),
        (0..3)
            .flat_map(|i| (0..5).map(move |t| TripletComponents::new(i, (i + t) % 4, t)))
            .filter(|c| (c.instrument + c.target) % 3 != 0)
            .collect(),
    )
    .unwrap();
    let keep_all = DecodeConfig {
        suppress_background: false,
        drop_invalid_triplets: false,
        ..DecodeConfig::default()
    };
    let mut failures = 0;
    for k in 0..1000 {
        let o = r.random_range(0..=5);
        let l = random_edge_logits(&mut r, o, 5, 5, k % 2 == 0);
        let dets = random_detections(&mut r, o, 3);
        let want = decode_oracle(&l);
        let assoc = decode_associations(&l);
        let out = decode(&l, &dets, &vocab, &keep_all).unwrap();
        let ok = assoc.len() == o
            && out.len() == o
            && want.iter().zip(&assoc).zip(&out).enumerate().all(|(i, ((w, a), t))| {
                let triplet = if w.1 == vocab.background_verb() {
                    None
                } else {
                    vocab.triplet_id(TripletComponents::new(dets[i].instrument, w.1, w.0))
                };
                (a.target, a.verb) == (w.0, w.1)
                    && (t.target, t.verb, t.instrument, t.triplet) == (w.0, w.1, dets[i].instrument, triplet)
                    && t.bbox == dets[i].bbox
                    && (a.score - a.edge_prob * a.verb_prob).abs() <= 1e-9
                    && (t.score - w.2).abs() <= 1e-9
            });
        failures += usize::from(!ok);
    }
    let hand = triplet_core::graph::EdgeLogits {
        num_instruments: 1,
        num_targets: 2,
        num_verb_classes: 3,
        scores: vec![2.0, 0.0],
        verbs: vec![0.0, 3.0, 0.0, 0.0, 0.0, 0.0],
    };
    let score = decode_associations(&hand)[0].score;
    let want = hand_example_score();
    let hand_ok = (score - want).abs() <= 1e-4;
    outcome(
        failures == 0 && hand_ok,
        format!(
            "{failures}/1000 disagreements; hand example {score:.5} vs closed form e^2/(e^2+1)*e^3/(e^3+2) = {want:.5}"
        ),
    )
}

fn frame_annotation(frame_id: &str, video: &str, vocab: &LabelVocabulary, gts: Vec<GtInstance>) -> FrameAnnotation {
    let mut target_presence = vec![0u8; vocab.num_targets()];
    let mut triplet_presence = vec![0u8; vocab.num_triplets()];
    for g in &gts {
        if let Some(t) = g.triplet {
            triplet_presence[t] = 1;
            target_presence[vocab.triplet_components(t).unwrap().target] = 1;
        }
    }
    FrameAnnotation {
        frame_id: frame_id.into(),
        video_id: video.into(),
        target_presence,
        triplet_presence,
        gt_instances: gts,
    }
}

/// Evaluation of the single-class fixture: an unmatched prediction at 0.9
/// above a matched one at 0.8.
pub fn crafted_ap() -> f64 {
    let vocab = LabelVocabulary::new(
        vec!["i".into()],
        vec!["v".into()],
        vec!["t".into()],
        vec![TripletComponents::new(0, 0, 0)],
    )
    .unwrap();
    let gt = BoxXYXY::new(0.1, 0.1, 0.4, 0.4).unwrap();
    let miss = BoxXYXY::new(0.6, 0.6, 0.9, 0.9).unwrap();
    let ann = frame_annotation(
        "f0",
        "v0",
        &vocab,
        vec![GtInstance {
            bbox: gt,
            instrument: 0,
            triplet: Some(0),
        }],
    );
    let td = |bbox, score| TripletDetection {
        bbox,
        instrument: 0,
        verb: 0,
        target: 0,
        triplet: Some(0),
        score,
    };
    let preds = PredictionFile::new(vec![FramePredictions {
        frame_id: "f0".into(),
        triplet_detections: vec![td(miss, 0.9), td(gt, 0.8)],
        instrument_detections: vec![],
    }]);
    evaluate(&preds, &[ann], &vocab, &EvalConfig::default()).unwrap().ap_ivt
}

/// Ground truth echoed back as predictions with score 1.
pub fn oracle_predictions(data: &Dataset) -> PredictionFile {
    PredictionFile::new(
        data.samples
            .iter()
            .map(|s| {
                let a = &s.annotation;
                FramePredictions {
                    frame_id: a.frame_id.clone(),
                    triplet_detections: a
                        .gt_instances
                        .iter()
                        .filter_map(|g| {
                            let t = g.triplet?;
                            let c = data.vocab.triplet_components(t).ok()?;
                            Some(TripletDetection {
                                bbox: g.bbox,
                                instrument: g.instrument,
                                verb: c.verb,
                                target: c.target,
                                triplet: Some(t),
                                score: 1.0,
                            })
                        })
                        .collect(),
                    instrument_detections: s.detections.clone(),
                }
            })
            .collect(),
    )
}

pub fn evaluator_oracle(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut mismatches = 0;
    for _ in 0..50 {
        let fx = random_eval_fixture(&mut r);
        let (_, curves) = match_and_pr(&fx.preds, &fx.gts, 0.5);
        let want = nested_ap(&fx.preds, &fx.gts, 0.5);
        let got: BTreeMap<usize, (f64, f64)> = curves.iter().map(|(&c, v)| (c, (v.ap, v.ar))).collect();
        mismatches += usize::from(got != want);
    }
    let crafted = crafted_ap();
    let synth = generate_synthetic_dataset(
        &triplet_core::synth::SynthSpec {
            frames: 60,
            frames_per_video: 20,
            ..Default::default()
        },
        seed,
    )
    .unwrap();
    let report = evaluate(
        &oracle_predictions(&synth),
        &synth.annotations(),
        &synth.vocab,
        &EvalConfig::default(),
    )
    .unwrap();
    outcome(
        mismatches == 0 && crafted == 50.0 && report.ap_i == 100.0 && report.ap_ivt == 100.0,
        format!(
            "{mismatches}/50 fixtures differ; crafted AP {crafted}; oracle detections AP_I {} AP_IVT {}",
            report.ap_i, report.ap_ivt
        ),
    )
}

pub fn toy_model_cfg() -> triplet_core::config::ModelConfig {
    triplet_core::config::ModelConfig {
        image_height: 32,
        image_width: 48,
        backbone: triplet_core::config::BackboneKind::Toy,
        toy_channels: [8, 8, 16, 16],
        toy_strides: [2, 2, 2, 1],
        d: 16,
        heads: 2,
        ffn_dim: 32,
        b_l: 1,
        t_l: 2,
        d_prime: 8,
        edge_hidden: 8,
        ..Default::default()
    }
}

pub fn toy_model(seed: u64, vocab: &LabelVocabulary, dtype: DType) -> (TripletModel, ParamStore) {
    let store = ParamStore::new(seed);
    let model = TripletModel::new(&toy_model_cfg(), vocab, store.var_builder(dtype, &Device::Cpu)).unwrap();
    (model, store)
}

pub fn random_image(r: &mut impl Rng, dtype: DType) -> Tensor {
    let cfg = toy_model_cfg();
    let n = 3 * cfg.image_height * cfg.image_width;
    let v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, (3, cfg.image_height, cfg.image_width), &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

pub fn degeneracy(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let vocab = LabelVocabulary::with_sizes(3, 3, 4, 12).unwrap();
    let (model, _) = toy_model(seed, &vocab, DType::F32);
    let (h, w) = model.config().grid_size();
    let n = vocab.num_targets();
    let mut problems = Vec::new();
    for o in [0usize, 1, 5] {
        let image = random_image(&mut r, DType::F32);
        let dets = random_detections(&mut r, o, 3);
        let out = match model.infer(&image, &dets) {
            Ok(x) => x,
            Err(e) => {
                problems.push(format!("O={o}: forward failed: {e}"));
                continue;
            }
        };
        let len = out.mcit.sequence.dims()[0];
        if len != h * w + n {
            problems.push(format!("O={o}: sequence length {len}, expected {}", h * w + n));
        }
        let edges = out.edges.expect("inference builds edges");
        if edges.edge_scores.dims() != [o * n] || edges.verb_logits.dims() != [o * n, vocab.num_verbs() + 1] {
            problems.push(format!("O={o}: edge tensors {:?} {:?}", edges.edge_scores.dims(), edges.verb_logits.dims()));
        }
        let labels: Vec<PseudoInstanceLabel> = (0..o)
            .map(|i| PseudoInstanceLabel {
                instrument_index: i,
                target: Some(i % n),
                verb: 0,
            })
            .collect();
        let lt = target_bce(&out.mcit.target_logits, &[vec![1, 0, 0, 1]], &[1.0; 4]);
        let gl = graph_losses(&[(&edges, &labels[..])]);
        match (lt, gl) {
            (Ok(_), Ok((le, lv))) => {
                if o == 0 && (le.to_scalar::<f32>().unwrap() != 0.0 || lv.to_scalar::<f32>().unwrap() != 0.0) {
                    problems.push("O=0: graph losses not zero".into());
                }
            }
            (a, b) => problems.push(format!("O={o}: losses failed: {:?} {:?}", a.err(), b.err())),
        }
        let decoded = edges
            .logits()
            .map_err(|e| e.to_string())
            .and_then(|l| decode(&l, &dets, &vocab, &DecodeConfig::default()).map_err(|e| e.to_string()));
        match decoded {
            Ok(t) if t.len() <= o => {
                let ann = frame_annotation("f", "v", &vocab, vec![]);
                let preds = PredictionFile::new(vec![FramePredictions {
                    frame_id: "f".into(),
                    triplet_detections: t,
                    instrument_detections: dets.clone(),
                }]);
                if let Err(e) = evaluate(&preds, &[ann], &vocab, &EvalConfig::default()) {
                    problems.push(format!("O={o}: evaluation failed: {e}"));
                }
            }
            Ok(t) => problems.push(format!("O={o}: {} detections decoded", t.len())),
            Err(e) => problems.push(format!("O={o}: decoding failed: {e}")),
        }
    }
    let detail = if problems.is_empty() {
        format!("O in {{0, 1, 5}}: sequence length {}+{n}, edge count O*{n}", h * w)
    } else {
        problems.join("; ")
    };
    outcome(problems.is_empty(), detail)
}

fn host(t: &Tensor) -> Vec<Vec<f64>> {
    let t = t.to_dtype(DType::F64).unwrap();
    if t.rank() == 1 {
        vec![t.to_vec1().unwrap()]
    } else {
        t.to_vec2().unwrap()
    }
}

/// Runs one frame and a permuted copy of its detections; every per-instance
/// output must move with its instance and everything else must be unchanged,
/// bit for bit.
pub fn permutation_mismatches(model: &TripletModel, vocab: &LabelVocabulary, image: &Tensor, dets: &[Detection], perm: &[usize]) -> Vec<String> {
    let permuted: Vec<Detection> = perm.iter().map(|&k| dets[k].clone()).collect();
    let a = model.infer(image, dets).unwrap();
    let b = model.infer(image, &permuted).unwrap();
    let n = vocab.num_targets();
    let mut bad = Vec::new();
    let (fa, fb) = (host(&a.instruments.0), host(&b.instruments.0));
    if perm.iter().enumerate().any(|(k, &p)| fb[k] != fa[p]) {
        bad.push("instrument features".to_string());
    }
    if host(&a.mcit.sequence) != host(&b.mcit.sequence) {
        bad.push("class-token sequence".into());
    }
    let (ea, eb) = (a.edges.unwrap(), b.edges.unwrap());
    let (sa, sb) = (host(&ea.edge_scores)[0].clone(), host(&eb.edge_scores)[0].clone());
    let (va, vb) = (host(&ea.verb_logits), host(&eb.verb_logits));
    for (k, &p) in perm.iter().enumerate() {
        for j in 0..n {
            if sb[k * n + j] != sa[p * n + j] {
                bad.push(format!("edge score ({k},{j})"));
            }
            if vb[k * n + j] != va[p * n + j] {
                bad.push(format!("verb logits ({k},{j})"));
            }
        }
    }
    let cfg = DecodeConfig {
        suppress_background: false,
        ..DecodeConfig::default()
    };
    let da = decode(&ea.logits().unwrap(), dets, vocab, &cfg).unwrap();
    let db = decode(&eb.logits().unwrap(), &permuted, vocab, &cfg).unwrap();
    if perm.iter().enumerate().any(|(k, &p)| db[k] != da[p]) {
        bad.push("decoded triplets".into());
    }
    bad
}

pub fn equivariance(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let vocab = LabelVocabulary::with_sizes(3, 3, 4, 12).unwrap();
    let mut failures = Vec::new();
    let mut cases = 0;
    for variant in MessagePassing::ALL {
        let store = ParamStore::new(seed);
        let cfg = triplet_core::config::ModelConfig {
            mp_variant: variant,
            ..toy_model_cfg()
        };
        let model = TripletModel::new(&cfg, &vocab, store.var_builder(DType::F32, &Device::Cpu)).unwrap();
        for _ in 0..4 {
            let o = r.random_range(2..=6);
            let image = random_image(&mut r, DType::F32);
            let dets = random_detections(&mut r, o, 3);
            let mut perm: Vec<usize> = (0..o).collect();
            perm.shuffle(&mut r);
            let bad = permutation_mismatches(&model, &vocab, &image, &dets, &perm);
            cases += 1;
            if !bad.is_empty() {
                failures.push(format!("{}: {}", variant.name(), bad.join(", ")));
            }
        }
    }
    let detail = if failures.is_empty() {
        format!("{cases} permuted frames over GAT/GCN/SAGE, all outputs bit-identical")
    } else {
        failures.join("; ")
    };
    outcome(failures.is_empty(), detail)
}

/// Gradients of edge scores and verb logits under each loss term, as host rows.
pub fn loss_gradients(f: &LossFrame) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let dev = Device::Cpu;
    let scores = candle_core::Var::from_vec(f.scores.clone(), f.o * f.n, &dev).unwrap();
    let verbs = candle_core::Var::from_vec(f.verbs.clone(), (f.o * f.n, f.v1), &dev).unwrap();
    let set = EdgeSet {
        edge_features: Tensor::zeros((f.o * f.n, 1), DType::F64, &dev).unwrap(),
        edge_scores: scores.as_tensor().clone(),
        verb_logits: verbs.as_tensor().clone(),
        num_instruments: f.o,
        num_targets: f.n,
    };
    let (le, lv) = graph_losses(&[(&set, &f.labels[..])]).unwrap();
    let grab = |loss: &Tensor, v: &candle_core::Var| -> Vec<f64> {
        match loss.backward().unwrap().get(v.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; v.as_tensor().elem_count()],
        }
    };
    (grab(&le, &scores), grab(&le, &verbs), grab(&lv, &scores), grab(&lv, &verbs))
}

/// Zero-gradient conditions for one frame; returns the violated ones.
pub fn masking_violations(f: &LossFrame) -> Vec<String> {
    let (le_s, le_v, lv_s, lv_v) = loss_gradients(f);
    let mut bad = Vec::new();
    if le_v.iter().any(|&g| g != 0.0) {
        bad.push("edge loss reaches verb logits".to_string());
    }
    if lv_s.iter().any(|&g| g != 0.0) {
        bad.push("verb loss reaches edge scores".to_string());
    }
    for l in &f.labels {
        let i = l.instrument_index;
        let row = i * f.n..(i + 1) * f.n;
        if l.target.is_none() {
            if le_s[row.clone()].iter().any(|&g| g != 0.0) {
                bad.push(format!("unlabeled instance {i} has edge-loss gradient"));
            }
            let scores = &f.scores[row.clone()];
            let mut best = 0;
            for k in 1..f.n {
                if scores[k] > scores[best] {
                    best = k;
                }
            }
            for j in 0..f.n {
                let e = i * f.n + j;
                let touched = lv_v[e * f.v1..(e + 1) * f.v1].iter().any(|&g| g != 0.0);
                if touched != (j == best) {
                    bad.push(format!("background instance {i} verb gradient on edge {j}"));
                }
            }
        } else if le_s[row].iter().all(|&g| g == 0.0) {
            bad.push(format!("labeled instance {i} has no edge-loss gradient"));
        }
    }
    bad
}

pub fn masking(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut bad = Vec::new();
    let mut instances = 0;
    for _ in 0..200 {
        let (n, v1) = (r.random_range(2..=6), r.random_range(2..=5));
        let f = random_loss_frame(&mut r, 5, n, v1);
        instances += f.o;
        bad.extend(masking_violations(&f));
    }
    let detail = if bad.is_empty() {
        format!("200 frames, {instances} instances: unlabeled rows carry no edge gradient, background rows only reach verb logits on their argmax edge")
    } else {
        bad.into_iter().take(3).collect::<Vec<_>>().join("; ")
    };
    outcome(detail.starts_with("200"), detail)
}

pub struct EndToEnd {
    pub seeds: Vec<(u64, f64)>,
    pub chance: f64,
    pub seconds: f64,
}

/// Trains both stages for each seed and scores the held-out videos.
pub fn end_to_end(cfg: &RunConfig, seeds: &[u64], work: &Path) -> EndToEnd {
    let t0 = Instant::now();
    let data = generate_synthetic_dataset(&cfg.synth, cfg.seed).unwrap();
    let (train_set, test_set) = data.split_by_video(cfg.data.held_out_videos).unwrap();
    let mut out = Vec::new();
    for &s in seeds {
        let c = RunConfig { seed: s, ..cfg.clone() };
        let dir = work.join(format!("seed{s}"));
        train(1, &train_set, &c, &dir).unwrap();
        let ck = train(2, &train_set, &c, &dir).unwrap().checkpoint;
        let report = evaluate_checkpoint(&ck, &test_set, &c).unwrap();
        out.push((s, report.ap_ivt));
    }
    let chance = chance_predictions(&test_set, &cfg.decode, cfg.seed).unwrap();
    let chance = evaluate(&chance, &test_set.annotations(), &test_set.vocab, &cfg.eval).unwrap().ap_ivt;
    EndToEnd {
        seeds: out,
        chance,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

pub fn end_to_end_outcome(r: &EndToEnd) -> Outcome {
    let passing = r.seeds.iter().filter(|(_, ap)| *ap >= 60.0).count();
    let per: Vec<String> = r.seeds.iter().map(|(s, ap)| format!("seed {s} {ap:.2}")).collect();
    outcome(
        passing >= 2 && r.chance < 15.0 && r.seconds < 900.0,
        format!(
            "AP_IVT {} ({passing}/3 >= 60); chance {:.2}; limit 900s",
            per.join(", "),
            r.chance
        ),
    )
}

/// Ablation over message-passing variants, averaged over `seeds`. Reuses each
/// seed's stage-1 and GAT stage-2 checkpoints from `trained/seed{s}` when present.
pub fn ablation(cfg: &RunConfig, seeds: &[u64], trained: Option<&Path>, work: &Path) -> Outcome {
    let data = generate_synthetic_dataset(&cfg.synth, cfg.seed).unwrap();
    let (train_set, test_set) = data.split_by_video(cfg.data.held_out_videos).unwrap();
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut per = Vec::new();
    for &s in seeds {
        let dir = work.join(format!("seed{s}"));
        if let Some(t) = trained {
            let from = t.join(format!("seed{s}"));
            let gat = dir.join(MessagePassing::Gat.name());
            let copies = [
                (checkpoint_path(&from, 1), checkpoint_path(dir.join("stage1"), 1)),
                (checkpoint_path(&from, 1), checkpoint_path(&gat, 1)),
                (checkpoint_path(&from, 2), checkpoint_path(&gat, 2)),
            ];
            for (from, to) in copies {
                if from.exists() {
                    std::fs::create_dir_all(to.parent().unwrap()).unwrap();
                    std::fs::copy(&from, &to).unwrap();
                }
            }
        }
        let c = RunConfig { seed: s, ..cfg.clone() };
        let rows = ablate(&c, &train_set, &test_set, &dir).unwrap();
        let row: Vec<String> = rows.iter().map(|r| format!("{} {:.2}", r.variant, r.ap_ivt)).collect();
        per.push(format!("seed {s}: {}", row.join(" ")));
        for r in rows {
            *sums.entry(r.variant).or_default() += r.ap_ivt / seeds.len() as f64;
        }
    }
    let ap = |name: &str| sums.get(name).copied().unwrap_or(f64::NAN);
    let (gat, gcn, sage) = (ap("GAT"), ap("GCN"), ap("SAGE"));
    outcome(
        gat >= gcn - 2.0 && gat >= sage - 2.0,
        format!("mean AP_IVT GAT {gat:.2}, GCN {gcn:.2}, SAGE {sage:.2}; {}", per.join("; ")),
    )
}

pub fn eq4_linearity(seed: u64) -> bool {
    let mut r = rng(seed);
    (0..200).all(|_| {
        let (lt, le, lv): (f64, f64, f64) = (r.random_range(0.0..5.0), r.random_range(0.0..5.0), r.random_range(0.0..5.0));
        let (a, b): (f64, f64) = (r.random_range(0.0..3.0), r.random_range(0.0..3.0));
        let s = |x: f64| Tensor::new(x, &Device::Cpu).unwrap();
        let total = LossBundle::new(s(lt), s(le), s(lv), a, b).unwrap().total.to_scalar::<f64>().unwrap();
        total == lt + a * le + b * lv
    })
}
