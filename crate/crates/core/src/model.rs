//! The full detector head: scene encoder, instrument fusion, class-token
//! transformer and interaction graph, plus a seeded parameter store.

use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::init::NormalOrUniform;
use candle_nn::{Init, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::{roi_features, InstrumentFeatures, InstrumentFusion, SceneEncoder, SceneFeatures};
use crate::config::{ModelConfig, TargetSource};
use crate::data::Detection;
use crate::error::{Error, Result};
use crate::graph::{EdgeSet, InteractionGraph};
use crate::mcit::{Mcit, McitOutput};
use crate::nn::ensure_finite;
use crate::vocab::LabelVocabulary;

/// Parameter name prefixes, one per learning-rate group.
pub const GROUP_BACKBONE: &str = "backbone";
pub const GROUP_BASE: &str = "base";
pub const GROUP_FUSION: &str = "fusion";
pub const GROUP_MCIT: &str = "mcit";
pub const GROUP_IG: &str = "ig";

/// Variable storage whose random initializations come from a seeded generator,
/// so that the same seed and construction order give the same weights.
#[derive(Clone)]
pub struct ParamStore {
    varmap: VarMap,
    rng: Arc<Mutex<ChaCha8Rng>>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore").field("vars", &self.names().len()).finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            varmap: VarMap::new(),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    /// Reseeds the generator used for variables created from now on.
    pub fn reseed(&self, seed: u64) {
        *self.rng.lock().expect("rng lock") = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.varmap.data().lock().expect("varmap lock").keys().cloned().collect();
        names.sort();
        names
    }

    /// All variables sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("varmap lock");
        let mut vars: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.vars().into_iter().map(|(k, v)| (k, v.as_tensor().clone())).collect()
    }

    /// Overwrites the named variables; every name must exist with the same shape.
    pub fn load(&self, tensors: &std::collections::HashMap<String, Tensor>, prefixes: Option<&[&str]>) -> Result<()> {
        let data = self.varmap.data().lock().expect("varmap lock");
        for (name, var) in data.iter() {
            if let Some(p) = prefixes {
                if !p.iter().any(|p| name.starts_with(&format!("{p}."))) {
                    continue;
                }
            }
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?.to_device(var.device())?)?;
        }
        Ok(())
    }

    fn sample(&self, shape: &Shape, init: Init) -> Vec<f64> {
        let n = shape.elem_count();
        let mut rng = self.rng.lock().expect("rng lock");
        let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> Vec<f64> {
            let dist = Normal::new(mean, std).expect("finite standard deviation");
            (0..n).map(|_| dist.sample(rng)).collect()
        };
        let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| -> Vec<f64> {
            (0..n).map(|_| if lo < up { rng.random_range(lo..up) } else { lo }).collect()
        };
        match init {
            Init::Const(v) => vec![v; n],
            Init::Randn { mean, stdev } => normal(&mut rng, mean, stdev),
            Init::Uniform { lo, up } => uniform(&mut rng, lo, up),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    NormalOrUniform::Normal => normal(&mut rng, 0.0, std),
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        uniform(&mut rng, -bound, bound)
                    }
                }
            }
        }
    }
}

impl SimpleBackend for ParamStore {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        if let Some(v) = self.varmap.data().lock().expect("varmap lock").get(name) {
            if v.shape() != &s {
                candle_core::bail!("shape mismatch on {name}: {s:?} <> {:?}", v.shape());
            }
            return Ok(v.as_tensor().clone());
        }
        let values = self.sample(&s, h);
        let var = Var::from_tensor(&Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?)?;
        let t = var.as_tensor().clone();
        self.varmap.data().lock().expect("varmap lock").insert(name.to_string(), var);
        Ok(t)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.varmap.data().lock().expect("varmap lock").get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("unknown variable {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.varmap.data().lock().expect("varmap lock").contains_key(name)
    }
}

/// Per-frame forward results.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub scene: SceneFeatures,
    pub instruments: InstrumentFeatures,
    pub mcit: McitOutput,
    pub edges: Option<EdgeSet>,
}

#[derive(Clone, Debug)]
pub struct TripletModel {
    cfg: ModelConfig,
    encoder: SceneEncoder,
    fusion: InstrumentFusion,
    mcit: Mcit,
    graph: InteractionGraph,
}

impl TripletModel {
    pub fn new(cfg: &ModelConfig, vocab: &LabelVocabulary, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder: SceneEncoder::new(cfg, vb.pp(GROUP_BACKBONE), vb.pp(GROUP_BASE))?,
            fusion: InstrumentFusion::new(cfg, vocab.num_instruments(), vb.pp(GROUP_FUSION))?,
            mcit: Mcit::new(cfg, vocab.num_targets(), vb.pp(GROUP_MCIT))?,
            graph: InteractionGraph::new(cfg, vocab.num_verbs(), vb.pp(GROUP_IG))?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &SceneEncoder {
        &self.encoder
    }

    pub fn fusion(&self) -> &InstrumentFusion {
        &self.fusion
    }

    pub fn mcit(&self) -> &Mcit {
        &self.mcit
    }

    pub fn graph(&self) -> &InteractionGraph {
        &self.graph
    }

    /// Destination node features for the interaction graph.
    pub fn graph_targets(&self, out: &McitOutput) -> Tensor {
        match self.cfg.ig_target_source {
            TargetSource::Output => out.embeddings.output_tokens.clone(),
            TargetSource::Input => out.embeddings.input_tokens.clone(),
        }
    }

    /// Everything downstream of the scene features for one frame.
    pub fn forward_scene(&self, scene: SceneFeatures, detections: &[Detection], with_graph: bool) -> Result<FrameOutput> {
        let roi = roi_features(&scene, detections, self.cfg.roi_grid)?;
        let instruments = self.fusion.forward(&roi, detections)?;
        let mcit = self.mcit.forward(&scene, &instruments)?;
        let edges = if with_graph {
            Some(self.graph.forward(&instruments, &self.graph_targets(&mcit))?)
        } else {
            None
        };
        Ok(FrameOutput {
            scene,
            instruments,
            mcit,
            edges,
        })
    }

    /// Batched training forward over `(B, 3, H, W)` images.
    pub fn forward(&self, images: &Tensor, detections: &[Vec<Detection>], with_graph: bool) -> Result<Vec<FrameOutput>> {
        let scenes = self.encoder.forward_batch(images)?;
        if scenes.len() != detections.len() {
            return Err(Error::Validation(format!(
                "{} images but {} detection lists",
                scenes.len(),
                detections.len()
            )));
        }
        scenes
            .into_iter()
            .zip(detections)
            .map(|(s, d)| self.forward_scene(s, d, with_graph))
            .collect()
    }

    /// Single-frame inference on a `(3, H, W)` image with finiteness checks.
    pub fn infer(&self, image: &Tensor, detections: &[Detection]) -> Result<FrameOutput> {
        let scene = self.encoder.extract_scene_features(image)?;
        let out = self.forward_scene(scene, detections, true)?;
        ensure_finite(&out.instruments.0, "instrument_fusion")?;
        ensure_finite(&out.mcit.sequence, "mcit")?;
        if let Some(e) = &out.edges {
            ensure_finite(&e.edge_scores, "edge_head")?;
            ensure_finite(&e.verb_logits, "verb_head")?;
        }
        Ok(out)
    }
}

/// Stacks per-frame target logits into `(B, N)`.
pub fn stack_target_logits(outputs: &[FrameOutput]) -> Result<Tensor> {
    let rows: Vec<&Tensor> = outputs.iter().map(|o| &o.mcit.target_logits).collect();
    Ok(Tensor::stack(&rows, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BackboneKind;

    fn toy() -> ModelConfig {
        ModelConfig {
            image_height: 64,
            image_width: 112,
            backbone: BackboneKind::Toy,
            d: 16,
            heads: 2,
            ffn_dim: 32,
            b_l: 1,
            t_l: 1,
            d_prime: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let vocab = LabelVocabulary::with_sizes(3, 3, 4, 12).unwrap();
        let build = |seed| {
            let store = ParamStore::new(seed);
            TripletModel::new(&toy(), &vocab, store.var_builder(DType::F64, &Device::Cpu)).unwrap();
            store
                .tensors()
                .into_iter()
                .map(|(k, t)| (k, t.flatten_all().unwrap().to_vec1::<f64>().unwrap()))
                .collect::<Vec<_>>()
        };
        let a = build(1);
        assert_eq!(a, build(1));
        assert_ne!(a, build(2));
        for group in [GROUP_BACKBONE, GROUP_BASE, GROUP_FUSION, GROUP_MCIT, GROUP_IG] {
            assert!(a.iter().any(|(k, _)| k.starts_with(&format!("{group}."))));
        }
    }

    #[test]
    fn batched_forward_shapes() {
        let vocab = LabelVocabulary::with_sizes(3, 3, 4, 12).unwrap();
        let store = ParamStore::new(0);
        let m = TripletModel::new(&toy(), &vocab, store.var_builder(DType::F64, &Device::Cpu)).unwrap();
        let images = Tensor::zeros((2, 3, 64, 112), DType::F64, &Device::Cpu).unwrap();
        let det = Detection {
            bbox: crate::data::BoxXYXY::new(0.1, 0.1, 0.4, 0.5).unwrap(),
            instrument: 2,
            confidence: 1.0,
        };
        let outs = m.forward(&images, &[vec![], vec![det.clone(), det]], true).unwrap();
        assert_eq!(outs[0].edges.as_ref().unwrap().num_instruments, 0);
        assert_eq!(outs[1].edges.as_ref().unwrap().verb_logits.dims(), &[8, 4]);
        assert_eq!(stack_target_logits(&outs).unwrap().dims(), &[2, 4]);
    }
}
