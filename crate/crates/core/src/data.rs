//! Annotation, detection and prediction records and their JSON file formats.
//!
//! All three files carry a `version` field. Boxes are normalized `[x1, y1, x2, y2]`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::vocab::{LabelVocabulary, TripletComponents};

pub const SCHEMA_VERSION: u64 = 1;

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxXYXY {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoxXYXY {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        if !(inside(x1) && inside(y1) && inside(x2) && inside(y2)) {
            return Err(Error::Validation(format!(
                "box [{x1}, {y1}, {x2}, {y2}] has coordinates outside [0, 1]"
            )));
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::Validation(format!(
                "box [{x1}, {y1}, {x2}, {y2}] is empty or inverted"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Mirror around the vertical image axis.
    pub fn hflip(&self) -> Self {
        Self {
            x1: 1.0 - self.x2,
            y1: self.y1,
            x2: 1.0 - self.x1,
            y2: self.y2,
        }
    }
}

impl TryFrom<[f64; 4]> for BoxXYXY {
    type Error = Error;

    fn try_from(a: [f64; 4]) -> Result<Self> {
        BoxXYXY::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BoxXYXY> for [f64; 4] {
    fn from(b: BoxXYXY) -> Self {
        b.to_array()
    }
}

/// A ground-truth instrument instance. `triplet` is `None` for an instrument
/// that interacts with nothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    pub instrument: usize,
    pub triplet: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub frame_id: String,
    pub video_id: String,
    pub target_presence: Vec<u8>,
    pub triplet_presence: Vec<u8>,
    #[serde(default)]
    pub gt_instances: Vec<GtInstance>,
}

impl FrameAnnotation {
    pub fn present_triplets(&self) -> impl Iterator<Item = usize> + '_ {
        self.triplet_presence
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == 1)
            .map(|(k, _)| k)
    }

    /// Checks presence-vector sizes, binary values, target/triplet consistency and
    /// instance ids against `vocab`.
    pub fn validate(&self, vocab: &LabelVocabulary) -> Result<()> {
        let fid = self.frame_id.as_str();
        if self.target_presence.len() != vocab.num_targets() {
            return Err(Error::Vocabulary(format!(
                "frame `{fid}`: target_presence has length {} but the vocabulary has {} targets",
                self.target_presence.len(),
                vocab.num_targets()
            )));
        }
        if self.triplet_presence.len() != vocab.num_triplets() {
            return Err(Error::Vocabulary(format!(
                "frame `{fid}`: triplet_presence has length {} but the dictionary has {} triplets",
                self.triplet_presence.len(),
                vocab.num_triplets()
            )));
        }
        for (field, vector) in [
            ("target_presence", &self.target_presence),
            ("triplet_presence", &self.triplet_presence),
        ] {
            if let Some(bad) = vector.iter().find(|&&v| v > 1) {
                return Err(Error::schema(fid, field, format!("value {bad} is not 0 or 1")));
            }
        }
        for t in self.present_triplets() {
            let c = vocab.triplet_components(t)?;
            if self.target_presence[c.target] != 1 {
                return Err(Error::schema(
                    fid,
                    "target_presence",
                    format!("triplet {t} is present but its target {} is not", c.target),
                ));
            }
        }
        for inst in &self.gt_instances {
            if inst.instrument >= vocab.num_instruments() {
                return Err(Error::Vocabulary(format!(
                    "frame `{fid}`: instrument id {} out of range",
                    inst.instrument
                )));
            }
            if let Some(t) = inst.triplet {
                let c = vocab.triplet_components(t)?;
                if c.instrument != inst.instrument {
                    return Err(Error::schema(
                        fid,
                        "gt_instances.triplet",
                        format!("triplet {t} does not belong to instrument {}", inst.instrument),
                    ));
                }
                if self.triplet_presence[t] != 1 {
                    return Err(Error::schema(
                        fid,
                        "gt_instances.triplet",
                        format!("instance triplet {t} is not marked in triplet_presence"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One detected instrument instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    pub instrument: usize,
    pub confidence: f64,
}

impl Detection {
    pub fn validate(&self, vocab: &LabelVocabulary) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Validation(format!(
                "detection confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        if self.instrument >= vocab.num_instruments() {
            return Err(Error::Vocabulary(format!(
                "detection instrument id {} out of range",
                self.instrument
            )));
        }
        Ok(())
    }
}

/// A localized triplet prediction. `triplet` is `None` when the decoded
/// (instrument, verb, target) tuple is not in the dictionary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletDetection {
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    pub instrument: usize,
    pub verb: usize,
    pub target: usize,
    pub triplet: Option<usize>,
    pub score: f64,
}

impl TripletDetection {
    pub fn components(&self) -> TripletComponents {
        TripletComponents::new(self.instrument, self.verb, self.target)
    }

    pub fn validate(&self, vocab: &LabelVocabulary) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Validation(format!("score {} outside [0, 1]", self.score)));
        }
        if let Some(t) = self.triplet {
            if vocab.triplet_components(t)? != self.components() {
                return Err(Error::Validation(format!(
                    "triplet id {t} disagrees with components ({}, {}, {})",
                    self.instrument, self.verb, self.target
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame_id: String,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FramePredictions {
    pub frame_id: String,
    pub triplet_detections: Vec<TripletDetection>,
    /// Pass-through of the instrument detections the triplets were decoded from.
    /// Instrument localization is scored on these when present.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instrument_detections: Vec<Detection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub version: u64,
    pub vocab: LabelVocabulary,
    pub frames: Vec<FrameAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub version: u64,
    pub frames: Vec<FrameDetections>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub version: u64,
    pub frames: Vec<FramePredictions>,
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn check_version(root: &Map<String, Value>) -> Result<()> {
    match root.get("version").and_then(Value::as_u64) {
        Some(SCHEMA_VERSION) => Ok(()),
        Some(v) => Err(Error::schema("-", "version", format!("unsupported version {v}"))),
        None => Err(Error::schema("-", "version", "missing or not an integer")),
    }
}

fn root_object(value: &Value) -> Result<&Map<String, Value>> {
    value
        .as_object()
        .ok_or_else(|| Error::schema("-", "<root>", "expected a JSON object"))
}

fn frames_array(root: &Map<String, Value>) -> Result<&Vec<Value>> {
    root.get("frames")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::schema("-", "frames", "missing or not an array"))
}

/// Field accessor that names the frame and field in every error.
struct Record<'a> {
    frame_id: String,
    obj: &'a Map<String, Value>,
}

impl<'a> Record<'a> {
    fn new(value: &'a Value, index: usize) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::schema(&format!("#{index}"), "<frame>", "expected an object"))?;
        let frame_id = obj
            .get("frame_id")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::schema(&format!("#{index}"), "frame_id", "missing or not a string"))?
            .to_string();
        Ok(Self { frame_id, obj })
    }

    fn field(&self, name: &str) -> Result<&'a Value> {
        self.obj
            .get(name)
            .ok_or_else(|| Error::schema(&self.frame_id, name, "missing"))
    }

    fn parse<T: serde::de::DeserializeOwned>(&self, name: &str, value: &Value) -> Result<T> {
        serde_json::from_value(value.clone())
            .map_err(|e| Error::schema(&self.frame_id, name, e.to_string()))
    }

    fn array(&self, name: &str) -> Result<&'a Vec<Value>> {
        self.field(name)?
            .as_array()
            .ok_or_else(|| Error::schema(&self.frame_id, name, "expected an array"))
    }
}

/// Class reference that may be given as an integer id or a class name.
fn class_id(
    rec: &Record,
    field: &str,
    value: &Value,
    lookup: impl Fn(&str) -> Result<usize>,
    len: usize,
) -> Result<usize> {
    match value {
        Value::Number(n) => {
            let id = n
                .as_u64()
                .ok_or_else(|| Error::schema(&rec.frame_id, field, "class id must be a non-negative integer"))?
                as usize;
            if id >= len {
                return Err(Error::Vocabulary(format!(
                    "frame `{}`: {field} id {id} out of range (len {len})",
                    rec.frame_id
                )));
            }
            Ok(id)
        }
        Value::String(name) => lookup(name)
            .map_err(|e| Error::Vocabulary(format!("frame `{}`: {field}: {e}", rec.frame_id))),
        _ => Err(Error::schema(&rec.frame_id, field, "expected a class id or name")),
    }
}

fn parse_box(rec: &Record, field: &str, value: &Value) -> Result<BoxXYXY> {
    let coords: [f64; 4] = rec.parse(field, value)?;
    BoxXYXY::try_from(coords).map_err(|e| Error::schema(&rec.frame_id, field, e.to_string()))
}

fn parse_annotation_frame(
    value: &Value,
    index: usize,
    vocab: &LabelVocabulary,
) -> Result<FrameAnnotation> {
    let rec = Record::new(value, index)?;
    let video_id = rec
        .field("video_id")?
        .as_str()
        .ok_or_else(|| Error::schema(&rec.frame_id, "video_id", "expected a string"))?
        .to_string();
    let target_presence: Vec<u8> = rec.parse("target_presence", rec.field("target_presence")?)?;
    let triplet_presence: Vec<u8> =
        rec.parse("triplet_presence", rec.field("triplet_presence")?)?;
    let mut gt_instances = Vec::new();
    if rec.obj.contains_key("gt_instances") {
        for inst in rec.array("gt_instances")? {
            let obj = inst
                .as_object()
                .ok_or_else(|| Error::schema(&rec.frame_id, "gt_instances", "expected objects"))?;
            let get = |k: &str| {
                obj.get(k).ok_or_else(|| {
                    Error::schema(&rec.frame_id, &format!("gt_instances.{k}"), "missing")
                })
            };
            let bbox = parse_box(&rec, "gt_instances.box", get("box")?)?;
            let instrument = class_id(
                &rec,
                "gt_instances.instrument",
                get("instrument")?,
                |n| vocab.instrument_id(n),
                vocab.num_instruments(),
            )?;
            let triplet = match obj.get("triplet") {
                None | Some(Value::Null) => None,
                Some(v) => Some(class_id(
                    &rec,
                    "gt_instances.triplet",
                    v,
                    |_| Err(Error::Vocabulary("triplets are referenced by id".into())),
                    vocab.num_triplets(),
                )?),
            };
            gt_instances.push(GtInstance {
                bbox,
                instrument,
                triplet,
            });
        }
    }
    let frame = FrameAnnotation {
        frame_id: rec.frame_id.clone(),
        video_id,
        target_presence,
        triplet_presence,
        gt_instances,
    };
    frame.validate(vocab)?;
    Ok(frame)
}

impl AnnotationFile {
    pub fn new(vocab: LabelVocabulary, frames: Vec<FrameAnnotation>) -> Self {
        Self {
            version: SCHEMA_VERSION,
            vocab,
            frames,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let value = read_json(path.as_ref())?;
        let root = root_object(&value)?;
        check_version(root)?;
        let vocab: LabelVocabulary = serde_json::from_value(
            root.get("vocab")
                .cloned()
                .ok_or_else(|| Error::schema("-", "vocab", "missing"))?,
        )
        .map_err(|e| Error::Vocabulary(e.to_string()))?;
        let frames = frames_array(root)?
            .iter()
            .enumerate()
            .map(|(k, f)| parse_annotation_frame(f, k, &vocab))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(vocab, frames))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }
}

/// Loads `annotations.json`, requiring the file's vocabulary to equal `vocab`.
pub fn load_annotations(path: impl AsRef<Path>, vocab: &LabelVocabulary) -> Result<Vec<FrameAnnotation>> {
    let file = AnnotationFile::load(path)?;
    if &file.vocab != vocab {
        return Err(Error::Vocabulary(
            "annotation file vocabulary differs from the expected vocabulary".into(),
        ));
    }
    Ok(file.frames)
}

impl DetectionFile {
    pub fn new(frames: Vec<FrameDetections>) -> Self {
        Self {
            version: SCHEMA_VERSION,
            frames,
        }
    }

    pub fn load(path: impl AsRef<Path>, vocab: &LabelVocabulary) -> Result<Self> {
        let value = read_json(path.as_ref())?;
        let root = root_object(&value)?;
        check_version(root)?;
        let mut frames = Vec::new();
        for (k, f) in frames_array(root)?.iter().enumerate() {
            let rec = Record::new(f, k)?;
            let mut detections = Vec::new();
            for d in rec.array("detections")? {
                let obj = d
                    .as_object()
                    .ok_or_else(|| Error::schema(&rec.frame_id, "detections", "expected objects"))?;
                let get = |key: &str| {
                    obj.get(key).ok_or_else(|| {
                        Error::schema(&rec.frame_id, &format!("detections.{key}"), "missing")
                    })
                };
                let det = Detection {
                    bbox: parse_box(&rec, "detections.box", get("box")?)?,
                    instrument: class_id(
                        &rec,
                        "detections.instrument",
                        get("instrument")?,
                        |n| vocab.instrument_id(n),
                        vocab.num_instruments(),
                    )?,
                    confidence: rec.parse("detections.confidence", get("confidence")?)?,
                };
                det.validate(vocab)
                    .map_err(|e| Error::schema(&rec.frame_id, "detections", e.to_string()))?;
                detections.push(det);
            }
            frames.push(FrameDetections {
                frame_id: rec.frame_id,
                detections,
            });
        }
        Ok(Self::new(frames))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }
}

impl PredictionFile {
    pub fn new(frames: Vec<FramePredictions>) -> Self {
        Self {
            version: SCHEMA_VERSION,
            frames,
        }
    }

    pub fn load(path: impl AsRef<Path>, vocab: &LabelVocabulary) -> Result<Self> {
        let value = read_json(path.as_ref())?;
        let root = root_object(&value)?;
        check_version(root)?;
        let mut frames = Vec::new();
        for (k, f) in frames_array(root)?.iter().enumerate() {
            let rec = Record::new(f, k)?;
            let mut frame: FramePredictions = rec.parse("<frame>", f)?;
            for td in &frame.triplet_detections {
                td.validate(vocab)
                    .map_err(|e| Error::schema(&rec.frame_id, "triplet_detections", e.to_string()))?;
                if td.instrument >= vocab.num_instruments()
                    || td.verb > vocab.background_verb()
                    || td.target >= vocab.num_targets()
                {
                    return Err(Error::Vocabulary(format!(
                        "frame `{}`: prediction component ids out of range",
                        rec.frame_id
                    )));
                }
            }
            for d in &frame.instrument_detections {
                d.validate(vocab).map_err(|e| {
                    Error::schema(&rec.frame_id, "instrument_detections", e.to_string())
                })?;
            }
            frame.frame_id = rec.frame_id;
            frames.push(frame);
        }
        Ok(Self::new(frames))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }
}
