//! Synthetic scene generator.
//!
//! Targets are large colored shapes, instruments are small shapes with their own
//! color. An instrument whose box center lies inside a target box interacts with
//! it, and the verb is read from the rule table. Instruments placed away from
//! every target interact with nothing. Oracle detections are the ground-truth
//! boxes with confidence 1.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BoxXYXY, Detection, FrameAnnotation, GtInstance};
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::vocab::{LabelVocabulary, TripletComponents};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rect,
    Ellipse,
    Diamond,
    Cross,
    Ring,
    Triangle,
}

impl Shape {
    /// Membership test in box-local coordinates `u, v` in `[0, 1]`.
    fn contains(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self {
            Shape::Rect => true,
            Shape::Ellipse => r2 <= 0.25,
            Shape::Diamond => du.abs() + dv.abs() <= 0.5,
            Shape::Cross => du.abs() < 0.18 || dv.abs() < 0.18,
            Shape::Ring => r2 <= 0.25 && r2 >= 0.06,
            Shape::Triangle => v >= (2.0 * u - 1.0).abs(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstrumentClass {
    pub name: String,
    pub color: [u8; 3],
    pub shape: Shape,
    /// Probability that a frame contains this instrument.
    pub prior: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetClass {
    pub name: String,
    pub color: [u8; 3],
    pub shape: Shape,
}

/// `(instrument near target) -> verb`. Every rule is one triplet class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionRule {
    pub instrument: String,
    pub target: String,
    pub verb: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub image_height: u32,
    pub image_width: u32,
    pub frames: usize,
    pub frames_per_video: usize,
    pub instruments: Vec<InstrumentClass>,
    pub targets: Vec<TargetClass>,
    pub verbs: Vec<String>,
    pub rules: Vec<InteractionRule>,
    pub min_targets: usize,
    pub max_targets: usize,
    /// Probability that a present instrument is placed on a target.
    pub interact_prob: f64,
    /// Target box side range in pixels, inclusive.
    pub target_size: [u32; 2],
    /// Instrument box side range in pixels, inclusive.
    pub instrument_size: [u32; 2],
    pub background: [u8; 3],
    /// Uniform per-channel pixel noise amplitude.
    pub noise: u8,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let inst = |name: &str, color, shape, prior| InstrumentClass {
            name: name.into(),
            color,
            shape,
            prior,
        };
        let tgt = |name: &str, color, shape| TargetClass {
            name: name.into(),
            color,
            shape,
        };
        let table = [
            ("grasper", ["retract", "dissect", "clip", "retract"]),
            ("hook", ["dissect", "clip", "retract", "dissect"]),
            ("clipper", ["clip", "retract", "dissect", "clip"]),
        ];
        let targets = ["gallbladder", "liver", "cystic_duct", "omentum"];
        let rules = table
            .iter()
            .flat_map(|(i, verbs)| {
                targets.iter().zip(verbs).map(move |(t, v)| InteractionRule {
                    instrument: (*i).into(),
                    target: (*t).into(),
                    verb: (*v).into(),
                })
            })
            .collect();
        Self {
            image_height: 64,
            image_width: 112,
            frames: 500,
            frames_per_video: 50,
            instruments: vec![
                inst("grasper", [40, 90, 235], Shape::Cross, 0.6),
                inst("hook", [30, 225, 225], Shape::Diamond, 0.5),
                inst("clipper", [225, 40, 205], Shape::Ring, 0.4),
            ],
            targets: vec![
                tgt("gallbladder", [60, 190, 60], Shape::Ellipse),
                tgt("liver", [150, 85, 35], Shape::Rect),
                tgt("cystic_duct", [235, 215, 60], Shape::Triangle),
                tgt("omentum", [235, 235, 235], Shape::Ellipse),
            ],
            verbs: vec!["retract".into(), "dissect".into(), "clip".into()],
            rules,
            min_targets: 1,
            max_targets: 3,
            interact_prob: 0.85,
            target_size: [20, 28],
            instrument_size: [10, 14],
            background: [95, 30, 30],
            noise: 12,
        }
    }
}

impl SynthSpec {
    pub fn vocabulary(&self) -> Result<LabelVocabulary> {
        let instruments: Vec<String> = self.instruments.iter().map(|c| c.name.clone()).collect();
        let targets: Vec<String> = self.targets.iter().map(|c| c.name.clone()).collect();
        let find = |names: &[String], n: &str, kind: &str| {
            names
                .iter()
                .position(|x| x == n)
                .ok_or_else(|| Error::Config(format!("rule references unknown {kind} `{n}`")))
        };
        let triplets = self
            .rules
            .iter()
            .map(|r| {
                Ok(TripletComponents::new(
                    find(&instruments, &r.instrument, "instrument")?,
                    find(&self.verbs, &r.verb, "verb")?,
                    find(&targets, &r.target, "target")?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        LabelVocabulary::new(instruments, self.verbs.clone(), targets, triplets)
            .map_err(|e| Error::Config(e.to_string()))
    }

    fn validate(&self) -> Result<()> {
        if self.instruments.is_empty() || self.targets.is_empty() || self.verbs.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one class of each kind".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("synthetic spec needs at least one frame".into()));
        }
        if self.frames_per_video == 0 {
            return Err(Error::Config("frames_per_video must be positive".into()));
        }
        if self.min_targets == 0 || self.min_targets > self.max_targets {
            return Err(Error::Config("need 1 <= min_targets <= max_targets".into()));
        }
        if self.max_targets > self.targets.len() {
            return Err(Error::Config("max_targets exceeds the number of target classes".into()));
        }
        if self.instruments.iter().any(|c| !(0.0..=1.0).contains(&c.prior)) {
            return Err(Error::Config("instrument priors must lie in [0, 1]".into()));
        }
        let [lo, hi] = self.target_size;
        let [ilo, ihi] = self.instrument_size;
        if lo == 0 || lo > hi || ilo == 0 || ilo > ihi || hi >= self.image_width.min(self.image_height) {
            return Err(Error::Config("invalid shape size ranges for the image size".into()));
        }
        Ok(())
    }
}

/// Pixel-space box `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug)]
struct PixBox {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl PixBox {
    fn overlaps(&self, o: &PixBox, gap: u32) -> bool {
        self.x0 < o.x1 + gap && o.x0 < self.x1 + gap && self.y0 < o.y1 + gap && o.y0 < self.y1 + gap
    }

    fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }

    fn center(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1) as f64 / 2.0,
            (self.y0 + self.y1) as f64 / 2.0,
        )
    }

    fn normalized(&self, w: u32, h: u32) -> BoxXYXY {
        BoxXYXY::new(
            self.x0 as f64 / w as f64,
            self.y0 as f64 / h as f64,
            self.x1 as f64 / w as f64,
            self.y1 as f64 / h as f64,
        )
        .expect("pixel boxes are non-empty and inside the image")
    }
}

fn paint(img: &mut RgbImage, b: &PixBox, shape: Shape, color: [u8; 3]) {
    let (w, h) = ((b.x1 - b.x0) as f64, (b.y1 - b.y0) as f64);
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            let u = (x - b.x0) as f64 / (w - 1.0).max(1.0);
            let v = (y - b.y0) as f64 / (h - 1.0).max(1.0);
            if shape.contains(u, v) {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
}

const PLACEMENT_TRIES: usize = 64;

struct Frame {
    targets: Vec<(usize, PixBox)>,
    instruments: Vec<(usize, PixBox, Option<usize>)>,
}

fn random_box(rng: &mut ChaCha8Rng, size: [u32; 2], w: u32, h: u32) -> PixBox {
    let bw = rng.random_range(size[0]..=size[1]);
    let bh = rng.random_range(size[0]..=size[1]);
    let x0 = rng.random_range(0..=w - bw);
    let y0 = rng.random_range(0..=h - bh);
    PixBox {
        x0,
        y0,
        x1: x0 + bw,
        y1: y0 + bh,
    }
}

fn layout(spec: &SynthSpec, vocab: &LabelVocabulary, rng: &mut ChaCha8Rng) -> Frame {
    let (w, h) = (spec.image_width, spec.image_height);
    let n_targets = rng.random_range(spec.min_targets..=spec.max_targets);
    let mut classes: Vec<usize> = (0..spec.targets.len()).collect();
    let mut targets: Vec<(usize, PixBox)> = Vec::new();
    for _ in 0..n_targets {
        let pick = rng.random_range(0..classes.len());
        let class = classes.swap_remove(pick);
        for _ in 0..PLACEMENT_TRIES {
            let b = random_box(rng, spec.target_size, w, h);
            if targets.iter().all(|(_, o)| !b.overlaps(o, 2)) {
                targets.push((class, b));
                break;
            }
        }
    }

    let mut instruments: Vec<(usize, PixBox, Option<usize>)> = Vec::new();
    for (class, ic) in spec.instruments.iter().enumerate() {
        if !rng.random_bool(ic.prior) {
            continue;
        }
        let partners: Vec<&(usize, PixBox)> = targets
            .iter()
            .filter(|(t, _)| {
                vocab
                    .triplets()
                    .iter()
                    .any(|c| c.instrument == class && c.target == *t)
            })
            .collect();
        let interacting = !partners.is_empty() && rng.random_bool(spec.interact_prob);
        let chosen = interacting.then(|| *partners[rng.random_range(0..partners.len())]);
        for _ in 0..PLACEMENT_TRIES {
            let bw = rng.random_range(spec.instrument_size[0]..=spec.instrument_size[1]);
            let bh = rng.random_range(spec.instrument_size[0]..=spec.instrument_size[1]);
            let b = match chosen {
                Some((_, tb)) => {
                    // center in the inner 60% of the target box
                    let (tw, th) = ((tb.x1 - tb.x0) as f64, (tb.y1 - tb.y0) as f64);
                    let cx = tb.x0 as f64 + tw * rng.random_range(0.2..0.8);
                    let cy = tb.y0 as f64 + th * rng.random_range(0.2..0.8);
                    let x0 = (cx - bw as f64 / 2.0).round().clamp(0.0, (w - bw) as f64) as u32;
                    let y0 = (cy - bh as f64 / 2.0).round().clamp(0.0, (h - bh) as f64) as u32;
                    PixBox {
                        x0,
                        y0,
                        x1: x0 + bw,
                        y1: y0 + bh,
                    }
                }
                None => {
                    let x0 = rng.random_range(0..=w - bw);
                    let y0 = rng.random_range(0..=h - bh);
                    PixBox {
                        x0,
                        y0,
                        x1: x0 + bw,
                        y1: y0 + bh,
                    }
                }
            };
            let clear_of_instruments = instruments.iter().all(|(_, o, _)| !b.overlaps(o, 0));
            let (cx, cy) = b.center();
            let ok = match chosen {
                Some((t, tb)) => {
                    tb.contains_point(cx, cy)
                        && targets
                            .iter()
                            .filter(|(o, _)| *o != t)
                            .all(|(_, ob)| !b.overlaps(ob, 0))
                }
                None => targets.iter().all(|(_, ob)| !b.overlaps(ob, 1)),
            };
            if ok && clear_of_instruments {
                let triplet = chosen.map(|(t, _)| {
                    vocab
                        .triplets()
                        .iter()
                        .position(|c| c.instrument == class && c.target == t)
                        .expect("partner targets have a rule")
                });
                instruments.push((class, b, triplet));
                break;
            }
        }
    }
    Frame {
        targets,
        instruments,
    }
}

/// Generates a dataset deterministically from `(spec, seed)`.
pub fn generate_synthetic_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let vocab = spec.vocabulary()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.image_width, spec.image_height);
    let mut samples = Vec::with_capacity(spec.frames);
    for k in 0..spec.frames {
        let video = k / spec.frames_per_video;
        let frame = layout(spec, &vocab, &mut rng);

        let mut img = RgbImage::new(w, h);
        let amp = spec.noise as i32;
        for px in img.pixels_mut() {
            let mut c = spec.background;
            for ch in c.iter_mut() {
                let n = if amp > 0 { rng.random_range(-amp..=amp) } else { 0 };
                *ch = (*ch as i32 + n).clamp(0, 255) as u8;
            }
            *px = Rgb(c);
        }
        for (t, b) in &frame.targets {
            let tc = &spec.targets[*t];
            paint(&mut img, b, tc.shape, tc.color);
        }
        for (i, b, _) in &frame.instruments {
            let ic = &spec.instruments[*i];
            paint(&mut img, b, ic.shape, ic.color);
        }

        let mut target_presence = vec![0u8; vocab.num_targets()];
        for (t, _) in &frame.targets {
            target_presence[*t] = 1;
        }
        let mut triplet_presence = vec![0u8; vocab.num_triplets()];
        let mut gt_instances = Vec::new();
        let mut detections = Vec::new();
        for (i, b, triplet) in &frame.instruments {
            if let Some(t) = triplet {
                triplet_presence[*t] = 1;
            }
            let bbox = b.normalized(w, h);
            gt_instances.push(GtInstance {
                bbox,
                instrument: *i,
                triplet: *triplet,
            });
            detections.push(Detection {
                bbox,
                instrument: *i,
                confidence: 1.0,
            });
        }
        let annotation = FrameAnnotation {
            frame_id: format!("v{video:03}_f{k:05}"),
            video_id: format!("v{video:03}"),
            target_presence,
            triplet_presence,
            gt_instances,
        };
        debug_assert!(annotation.validate(&vocab).is_ok());
        samples.push(Sample {
            annotation,
            detections,
            image: img,
        });
    }
    Ok(Dataset { vocab, samples })
}
