//! Scene features (convolutional backbone, 1x1 reduction, base encoder) and
//! per-instance instrument features (ROI pooling fused with box and class embeddings).

use candle_core::{DType, Device, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Embedding, Module, VarBuilder};
use image::RgbImage;

use crate::config::{BackboneKind, ModelConfig};
use crate::data::{BoxXYXY, Detection};
use crate::error::{Error, Result};
use crate::nn::{ensure_finite, sine_position_encoding_2d, AttentionBlock, Mlp};

/// Flattened global scene features, `(h*w, d)` in row-major grid order.
#[derive(Clone, Debug)]
pub struct SceneFeatures {
    pub grid: Tensor,
    pub h: usize,
    pub w: usize,
}

impl SceneFeatures {
    pub fn d(&self) -> Result<usize> {
        Ok(self.grid.dim(1)?)
    }
}

/// Fused instrument features `(O, d)`, row `k` belongs to detection `k`.
#[derive(Clone, Debug)]
pub struct InstrumentFeatures(pub Tensor);

impl InstrumentFeatures {
    pub fn len(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn conv(in_c: usize, out_c: usize, k: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: k / 2,
        stride,
        ..Default::default()
    };
    Ok(candle_nn::conv2d(in_c, out_c, k, cfg, vb)?)
}

#[derive(Clone, Debug)]
struct ToyCnn {
    blocks: Vec<Conv2d>,
}

impl ToyCnn {
    fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let mut in_c = 3;
        let mut blocks = Vec::with_capacity(4);
        for (k, (&c, &s)) in cfg.toy_channels.iter().zip(&cfg.toy_strides).enumerate() {
            blocks.push(conv(in_c, c, 3, s, vb.pp(k))?);
            in_c = c;
        }
        Ok(Self { blocks })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for b in &self.blocks {
            x = b.forward(&x)?.relu()?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: Conv2d,
    spatial: Conv2d,
    expand: Conv2d,
    shortcut: Option<Conv2d>,
}

impl Bottleneck {
    fn new(in_c: usize, width: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let out_c = width * 4;
        let shortcut = if stride != 1 || in_c != out_c {
            Some(conv(in_c, out_c, 1, stride, vb.pp("shortcut"))?)
        } else {
            None
        };
        Ok(Self {
            reduce: conv(in_c, width, 1, 1, vb.pp("reduce"))?,
            spatial: conv(width, width, 3, stride, vb.pp("spatial"))?,
            expand: conv(width, out_c, 1, 1, vb.pp("expand"))?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.reduce.forward(x)?.relu()?;
        let y = self.spatial.forward(&y)?.relu()?;
        let y = self.expand.forward(&y)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// Bottleneck residual network with 2048 output channels at stride 32.
#[derive(Clone, Debug)]
struct ResnetLike {
    stem: Conv2d,
    stages: Vec<Vec<Bottleneck>>,
}

impl ResnetLike {
    const WIDTHS: [usize; 4] = [64, 128, 256, 512];

    fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let stem = conv(3, 64, 7, 2, vb.pp("stem"))?;
        let mut in_c = 64;
        let mut stages = Vec::new();
        for (s, (&n, &width)) in cfg.resnet_blocks.iter().zip(&Self::WIDTHS).enumerate() {
            let mut blocks = Vec::new();
            for b in 0..n {
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                blocks.push(Bottleneck::new(in_c, width, stride, vb.pp(format!("stage{s}.{b}")))?);
                in_c = width * 4;
            }
            stages.push(blocks);
        }
        Ok(Self { stem, stages })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.stem.forward(x)?.relu()?;
        // 3x3/2 max pool with one pixel of padding; inputs are post-ReLU so zero padding is neutral
        let mut x = x
            .pad_with_zeros(2, 1, 1)?
            .pad_with_zeros(3, 1, 1)?
            .max_pool2d_with_stride(3, 2)?;
        for stage in &self.stages {
            for b in stage {
                x = b.forward(&x)?;
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
enum Backbone {
    Toy(ToyCnn),
    Resnet(ResnetLike),
}

impl Backbone {
    fn out_channels(cfg: &ModelConfig) -> usize {
        match cfg.backbone {
            BackboneKind::Toy => cfg.toy_channels[3],
            BackboneKind::ResnetLike => 2048,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Backbone::Toy(b) => b.forward(x),
            Backbone::Resnet(b) => b.forward(x),
        }
    }
}

/// Converts an RGB image to a `(3, H, W)` tensor in `[-0.5, 0.5]`, resizing if needed.
pub fn image_to_tensor(
    img: &RgbImage,
    height: usize,
    width: usize,
    hflip: bool,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let resized;
    let img = if img.height() as usize != height || img.width() as usize != width {
        resized = image::imageops::resize(
            img,
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        &resized
    } else {
        img
    };
    let mut data = vec![0f32; 3 * height * width];
    for (x, y, px) in img.enumerate_pixels() {
        let col = if hflip { width - 1 - x as usize } else { x as usize };
        for c in 0..3 {
            data[c * height * width + y as usize * width + col] = px[c] as f32 / 255.0 - 0.5;
        }
    }
    Ok(Tensor::from_vec(data, (3, height, width), device)?.to_dtype(dtype)?)
}

/// Backbone, 1x1 channel reduction to `d`, and the base encoder.
#[derive(Clone, Debug)]
pub struct SceneEncoder {
    backbone: Backbone,
    reduce: Conv2d,
    layers: Vec<AttentionBlock>,
    pos: Tensor,
    h: usize,
    w: usize,
}

impl SceneEncoder {
    /// `vb_backbone` owns the convolutional trunk, `vb_base` the reduction and encoder.
    pub fn new(cfg: &ModelConfig, vb_backbone: VarBuilder, vb_base: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let backbone = match cfg.backbone {
            BackboneKind::Toy => Backbone::Toy(ToyCnn::new(cfg, vb_backbone)?),
            BackboneKind::ResnetLike => Backbone::Resnet(ResnetLike::new(cfg, vb_backbone)?),
        };
        let reduce = conv(Backbone::out_channels(cfg), cfg.d, 1, 1, vb_base.pp("reduce"))?;
        let layers = (0..cfg.b_l)
            .map(|k| {
                AttentionBlock::new(cfg.d, cfg.heads, cfg.ffn_dim, cfg.pre_norm, vb_base.pp(format!("layer{k}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let (h, w) = cfg.grid_size();
        let pos = sine_position_encoding_2d(h, w, cfg.d, vb_base.device())?.to_dtype(vb_base.dtype())?;
        Ok(Self {
            backbone,
            reduce,
            layers,
            pos,
            h,
            w,
        })
    }

    pub fn grid_size(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Backbone and reduction on a `(B, 3, H, W)` batch, giving `(B, d, h, w)`.
    pub fn reduced_maps(&self, images: &Tensor) -> Result<Tensor> {
        let maps = self.reduce.forward(&self.backbone.forward(images)?)?;
        let (_, _, h, w) = maps.dims4()?;
        if (h, w) != (self.h, self.w) {
            return Err(Error::Config(format!(
                "backbone produced a {h}x{w} grid, expected {}x{}",
                self.h, self.w
            )));
        }
        Ok(maps)
    }

    /// Base encoder over one flattened `(h*w, d)` map.
    pub fn encode(&self, flat: &Tensor) -> Result<SceneFeatures> {
        let mut x = flat.broadcast_add(&self.pos)?;
        for l in &self.layers {
            x = l.forward(&x, None)?;
        }
        Ok(SceneFeatures {
            grid: x,
            h: self.h,
            w: self.w,
        })
    }

    /// Scene features for a batch of images `(B, 3, H, W)`.
    pub fn forward_batch(&self, images: &Tensor) -> Result<Vec<SceneFeatures>> {
        let maps = self.reduced_maps(images)?;
        let (b, d, h, w) = maps.dims4()?;
        let flat = maps.reshape((b, d, h * w))?.transpose(1, 2)?.contiguous()?;
        (0..b).map(|k| self.encode(&flat.get(k)?)).collect()
    }

    /// Single-image inference with finiteness checks after every stage.
    pub fn extract_scene_features(&self, image: &Tensor) -> Result<SceneFeatures> {
        let images = image.unsqueeze(0)?;
        let trunk = self.backbone.forward(&images)?;
        ensure_finite(&trunk, "backbone")?;
        let maps = self.reduce.forward(&trunk)?;
        ensure_finite(&maps, "reduce_1x1")?;
        let (_, d, h, w) = maps.dims4()?;
        let flat = maps.reshape((d, h * w))?.t()?.contiguous()?;
        let scene = self.encode(&flat)?;
        ensure_finite(&scene.grid, "base_encoder")?;
        Ok(scene)
    }
}

const SAMPLES_PER_BIN: usize = 2;

/// ROI-align sampling weights, `(O, h*w)`, one row per box. Each box is split into
/// `grid x grid` bins sampled bilinearly at 2x2 points per bin; the row averages all
/// samples, so `weights @ grid_features` is the mean-pooled aligned ROI feature.
/// Boxes narrower than one grid cell are widened to one cell around their center.
pub fn roi_align_weights(boxes: &[BoxXYXY], h: usize, w: usize, grid: usize) -> Vec<f64> {
    let mut out = vec![0f64; boxes.len() * h * w];
    let n_samples = (grid * SAMPLES_PER_BIN) as f64;
    for (r, b) in boxes.iter().enumerate() {
        let row = &mut out[r * h * w..(r + 1) * h * w];
        let span = |lo: f64, hi: f64, cells: usize| {
            let (mut lo, mut hi) = (lo * cells as f64, hi * cells as f64);
            if hi - lo < 1.0 {
                let c = ((lo + hi) / 2.0).clamp(0.5, cells as f64 - 0.5);
                lo = c - 0.5;
                hi = c + 0.5;
            }
            (lo, hi)
        };
        let (x1, x2) = span(b.x1(), b.x2(), w);
        let (y1, y2) = span(b.y1(), b.y2(), h);
        let bilinear = |p: f64, cells: usize| {
            let c = (p - 0.5).clamp(0.0, (cells - 1) as f64);
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(cells - 1);
            let f = c - i0 as f64;
            [(i0, 1.0 - f), (i1, f)]
        };
        let coords = |lo: f64, hi: f64| {
            (0..grid * SAMPLES_PER_BIN)
                .map(move |k| lo + (hi - lo) * (k as f64 + 0.5) / n_samples)
        };
        let norm = 1.0 / (n_samples * n_samples);
        for y in coords(y1, y2) {
            let ys = bilinear(y, h);
            for x in coords(x1, x2) {
                let xs = bilinear(x, w);
                for &(yi, wy) in &ys {
                    for &(xi, wx) in &xs {
                        row[yi * w + xi] += wy * wx * norm;
                    }
                }
            }
        }
    }
    out
}

/// Mean-pooled ROI-aligned features `(O, d)` for each detection box.
pub fn roi_features(scene: &SceneFeatures, detections: &[Detection], grid: usize) -> Result<Tensor> {
    let d = scene.d()?;
    let device = scene.grid.device();
    if detections.is_empty() {
        return Ok(Tensor::zeros((0, d), scene.grid.dtype(), device)?);
    }
    let boxes: Vec<BoxXYXY> = detections.iter().map(|x| x.bbox).collect();
    let weights = roi_align_weights(&boxes, scene.h, scene.w, grid);
    let weights = Tensor::from_vec(weights, (boxes.len(), scene.h * scene.w), device)?
        .to_dtype(scene.grid.dtype())?;
    Ok(weights.matmul(&scene.grid)?)
}

/// Box MLP, instrument class embedding, and the fusion MLP.
#[derive(Clone, Debug)]
pub struct InstrumentFusion {
    class_embedding: Embedding,
    box_mlp: Mlp,
    fuse: Mlp,
    d: usize,
}

impl InstrumentFusion {
    pub fn new(cfg: &ModelConfig, num_instruments: usize, vb: VarBuilder) -> Result<Self> {
        let (d, d_cls, hidden) = (cfg.d, cfg.d_cls(), cfg.fusion_hidden());
        Ok(Self {
            class_embedding: candle_nn::embedding(num_instruments, d_cls, vb.pp("class_embedding"))?,
            box_mlp: Mlp::new(&[4, hidden, d - d_cls], vb.pp("box_mlp"))?,
            fuse: Mlp::new(&[2 * d, hidden, d], vb.pp("fuse"))?,
            d,
        })
    }

    pub fn forward(&self, roi: &Tensor, detections: &[Detection]) -> Result<InstrumentFeatures> {
        let o = detections.len();
        if roi.dims() != [o, self.d] {
            return Err(Error::Validation(format!(
                "ROI features have shape {:?}, expected ({o}, {})",
                roi.dims(),
                self.d
            )));
        }
        if o == 0 {
            return Ok(InstrumentFeatures(roi.clone()));
        }
        let device = roi.device();
        let coords: Vec<f64> = detections.iter().flat_map(|x| x.bbox.to_array()).collect();
        let coords = Tensor::from_vec(coords, (o, 4), device)?.to_dtype(roi.dtype())?;
        let ids: Vec<u32> = detections.iter().map(|x| x.instrument as u32).collect();
        let ids = Tensor::from_vec(ids, o, device)?;
        let boxes = self.box_mlp.forward(&coords)?;
        let classes = self.class_embedding.forward(&ids)?;
        let joint = Tensor::cat(&[&boxes, &classes, roi], 1)?;
        Ok(InstrumentFeatures(self.fuse.forward(&joint)?))
    }
}
