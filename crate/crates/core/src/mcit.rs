//! Instrument-aware class-token transformer.
//!
//! Queries are the scene grid followed by one token per target class. Keys and
//! values additionally include the fused instrument features, which are read
//! but never updated. Target presence logits come from one linear head applied
//! to the mean of the output class tokens.

use candle_core::Tensor;
use candle_nn::{Init, Linear, Module, VarBuilder};

use crate::backbone::{InstrumentFeatures, SceneFeatures};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{canonical_rows, linear, sine_position_encoding_1d, AttentionBlock};

/// Class-token states: the learnable inputs and their contextualized outputs.
#[derive(Clone, Debug)]
pub struct TargetEmbeddings {
    pub input_tokens: Tensor,
    pub output_tokens: Tensor,
}

#[derive(Clone, Debug)]
pub struct McitOutput {
    /// `(h*w + N, d)`.
    pub sequence: Tensor,
    /// `(N,)`.
    pub target_logits: Tensor,
    pub embeddings: TargetEmbeddings,
}

/// Mean of the last `n` rows of `sequence` mapped through `head`.
pub fn target_logits(sequence: &Tensor, n: usize, head: &Linear) -> Result<Tensor> {
    let rows = sequence.dim(0)?;
    if n == 0 || n > rows {
        return Err(Error::Validation(format!("cannot average {n} tokens of {rows}")));
    }
    let mean = sequence.narrow(0, rows - n, n)?.mean_keepdim(0)?;
    Ok(head.forward(&mean)?.squeeze(0)?)
}

#[derive(Clone, Debug)]
pub struct Mcit {
    tokens: Tensor,
    // fixed per-class offset so that zero-initialized tokens are distinguishable
    token_identity: Tensor,
    layers: Vec<AttentionBlock>,
    head: Linear,
    n: usize,
    d: usize,
}

impl Mcit {
    pub fn new(cfg: &ModelConfig, num_targets: usize, vb: VarBuilder) -> Result<Self> {
        let n = if cfg.num_target_tokens == 0 {
            num_targets
        } else {
            cfg.num_target_tokens
        };
        if n != num_targets {
            return Err(Error::Config(format!(
                "{n} class tokens configured but the vocabulary has {num_targets} targets"
            )));
        }
        let tokens = vb.get_with_hints((n, cfg.d), "tokens", Init::Const(0.0))?;
        let token_identity =
            sine_position_encoding_1d(n, cfg.d, vb.device())?.to_dtype(vb.dtype())?;
        let layers = (0..cfg.t_l)
            .map(|k| {
                AttentionBlock::new(
                    cfg.d,
                    cfg.mcit_heads(),
                    cfg.ffn_dim,
                    cfg.pre_norm,
                    vb.pp(format!("layer{k}")),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tokens,
            token_identity,
            layers,
            head: linear(cfg.d, n, vb.pp("target_head"))?,
            n,
            d: cfg.d,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.n
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Class tokens as fed to the first layer.
    pub fn input_tokens(&self) -> Result<Tensor> {
        Ok((&self.tokens + &self.token_identity)?)
    }

    pub fn forward(&self, scene: &SceneFeatures, instruments: &InstrumentFeatures) -> Result<McitOutput> {
        let hw = scene.h * scene.w;
        if scene.grid.dims() != [hw, self.d] {
            return Err(Error::Validation(format!(
                "scene grid has shape {:?}, expected ({hw}, {})",
                scene.grid.dims(),
                self.d
            )));
        }
        let input_tokens = self.input_tokens()?;
        let mut x = Tensor::cat(&[&scene.grid, &input_tokens], 0)?;
        // instrument keys in a fixed order so that detection order cannot leak into the sums
        let extra = canonical_rows(&instruments.0)?;
        for l in &self.layers {
            x = l.forward(&x, Some(&extra))?;
        }
        let output_tokens = x.narrow(0, hw, self.n)?;
        let target_logits = target_logits(&x, self.n, &self.head)?;
        Ok(McitOutput {
            sequence: x,
            target_logits,
            embeddings: TargetEmbeddings {
                input_tokens,
                output_tokens,
            },
        })
    }
}

/// `sigmoid` of target logits, for reporting.
pub fn target_probabilities(logits: &Tensor) -> Result<Vec<f64>> {
    Ok(candle_nn::ops::sigmoid(&logits.to_dtype(candle_core::DType::F64)?)?
        .flatten_all()?
        .to_vec1()?)
}
