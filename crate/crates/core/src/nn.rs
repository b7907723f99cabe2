//! Small layers shared by the backbone, the class-token transformer and the graph.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Init, Linear, Module, VarBuilder};

use crate::error::{Error, Result};

pub fn linear(in_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Linear> {
    Ok(candle_nn::linear(in_dim, out_dim, vb)?)
}

/// Softmax over the last dimension. The max shift is detached; it cancels
/// analytically and only guards `exp` against overflow.
pub fn softmax_last(xs: &Tensor) -> Result<Tensor> {
    let max = xs.max_keepdim(D::Minus1)?.detach();
    let e = xs.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(xs: &Tensor) -> Result<Tensor> {
    let max = xs.max_keepdim(D::Minus1)?.detach();
    let shifted = xs.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(xs: &Tensor) -> Result<Tensor> {
    let tail = (xs.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((xs.relu()? + tail)?)
}

/// Fails with [`Error::Numeric`] when `t` holds a NaN or infinity.
pub fn ensure_finite(t: &Tensor, layer: &str) -> Result<()> {
    let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer: layer.to_string(),
        })
    }
}

/// Rows of a `(n, d)` tensor in lexicographic order of their values. Sums over
/// the result are then independent of the order the rows came in.
pub fn canonical_rows(t: &Tensor) -> Result<Tensor> {
    let n = t.dim(0)?;
    if n < 2 {
        return Ok(t.clone());
    }
    let rows = t.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&a, &b| {
        rows[a as usize]
            .iter()
            .zip(&rows[b as usize])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    if order.iter().enumerate().all(|(k, &v)| k as u32 == v) {
        return Ok(t.clone());
    }
    Ok(t.index_select(&Tensor::new(order.as_slice(), t.device())?, 0)?)
}

/// Layer normalization over the last dimension, built from differentiable primitives.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let centered = xs.broadcast_sub(&xs.mean_keepdim(D::Minus1)?)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(dims: &[usize], vb: VarBuilder) -> Result<Self> {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| linear(w[0], w[1], vb.pp(k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }
}

impl Module for Mlp {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = xs.clone();
        for (k, l) in self.layers.iter().enumerate() {
            x = l.forward(&x)?;
            if k + 1 < self.layers.len() {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

/// Multi-head scaled dot-product attention over unbatched `(len, d)` sequences.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(d: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: linear(d, d, vb.pp("q"))?,
            k: linear(d, d, vb.pp("k"))?,
            v: linear(d, d, vb.pp("v"))?,
            o: linear(d, d, vb.pp("o"))?,
            heads,
            head_dim: d / heads,
        })
    }

    fn split(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let len = x.dim(0)?;
        x.reshape((len, self.heads, self.head_dim))?
            .transpose(0, 1)?
            .contiguous()
    }

    /// Queries `(lq, d)` attend over keys/values `(lk, d)`; returns `(lq, d)`.
    pub fn forward(&self, queries: &Tensor, keys: &Tensor) -> Result<Tensor> {
        let (lq, d) = queries.dims2()?;
        let q = self.split(&self.q.forward(queries)?)?;
        let k = self.split(&self.k.forward(keys)?)?;
        let v = self.split(&self.v.forward(keys)?)?;
        let scores = (q.matmul(&k.t()?)? / (self.head_dim as f64).sqrt())?;
        let weights = softmax_last(&scores)?;
        let out = weights
            .matmul(&v)?
            .transpose(0, 1)?
            .contiguous()?
            .reshape((lq, d))?;
        Ok(self.o.forward(&out)?)
    }
}

/// Transformer layer whose keys/values are the queries optionally extended by
/// extra read-only rows.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff: Mlp,
    norm2: LayerNorm,
    pre_norm: bool,
}

impl AttentionBlock {
    pub fn new(d: usize, heads: usize, ffn: usize, pre_norm: bool, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(d, heads, vb.pp("attn"))?,
            norm1: LayerNorm::new(d, vb.pp("norm1"))?,
            ff: Mlp::new(&[d, ffn, d], vb.pp("ff"))?,
            norm2: LayerNorm::new(d, vb.pp("norm2"))?,
            pre_norm,
        })
    }

    pub fn forward(&self, x: &Tensor, extra_kv: Option<&Tensor>) -> Result<Tensor> {
        let with_extra = |rows: &Tensor| -> Result<Tensor> {
            Ok(match extra_kv {
                Some(e) if e.dim(0)? > 0 => Tensor::cat(&[rows, e], 0)?,
                _ => rows.clone(),
            })
        };
        if self.pre_norm {
            let xn = self.norm1.forward(x)?;
            let x = (x + self.attn.forward(&xn, &with_extra(&xn)?)?)?;
            Ok((&x + self.ff.forward(&self.norm2.forward(&x)?)?)?)
        } else {
            let x = self
                .norm1
                .forward(&(x + self.attn.forward(x, &with_extra(x)?)?)?)?;
            Ok(self.norm2.forward(&(&x + self.ff.forward(&x)?)?)?)
        }
    }
}

/// Fixed 2D sine/cosine encoding for an `h x w` grid, shape `(h*w, d)`, row-major.
/// The first `d/2` channels encode the row, the rest the column.
pub fn sine_position_encoding_2d(h: usize, w: usize, d: usize, device: &Device) -> Result<Tensor> {
    let half = d / 2;
    let freq = |k: usize| 10000f64.powf((2 * (k / 2)) as f64 / half as f64);
    let scale = 2.0 * std::f64::consts::PI;
    let mut data = Vec::with_capacity(h * w * d);
    for i in 0..h {
        for j in 0..w {
            let y = (i + 1) as f64 / h as f64 * scale;
            let x = (j + 1) as f64 / w as f64 * scale;
            for (pos, _) in [(y, 0), (x, 1)] {
                for k in 0..half {
                    let a = pos / freq(k);
                    data.push(if k % 2 == 0 { a.sin() } else { a.cos() });
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (h * w, d), device)?)
}

/// Fixed 1D sine/cosine encoding of positions `0..n`, shape `(n, d)`.
pub fn sine_position_encoding_1d(n: usize, d: usize, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n * d);
    for p in 0..n {
        for k in 0..d {
            let a = p as f64 / 10000f64.powf((2 * (k / 2)) as f64 / d as f64);
            data.push(if k % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Ok(Tensor::from_vec(data, (n, d), device)?)
}
