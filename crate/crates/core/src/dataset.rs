//! In-memory dataset: annotations, per-frame detections and images, with
//! directory-level persistence (`images/`, `annotations.json`, `detections.json`).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use image::RgbImage;

use crate::data::{
    AnnotationFile, Detection, DetectionFile, FrameAnnotation, FrameDetections,
};
use crate::error::{Error, Result};
use crate::vocab::LabelVocabulary;

#[derive(Clone, Debug)]
pub struct Sample {
    pub annotation: FrameAnnotation,
    pub detections: Vec<Detection>,
    pub image: RgbImage,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: LabelVocabulary,
    pub samples: Vec<Sample>,
}

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const DETECTIONS_FILE: &str = "detections.json";
pub const IMAGES_DIR: &str = "images";

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn annotations(&self) -> Vec<FrameAnnotation> {
        self.samples.iter().map(|s| s.annotation.clone()).collect()
    }

    pub fn annotation_file(&self) -> AnnotationFile {
        AnnotationFile::new(self.vocab.clone(), self.annotations())
    }

    pub fn detection_file(&self) -> DetectionFile {
        DetectionFile::new(
            self.samples
                .iter()
                .map(|s| FrameDetections {
                    frame_id: s.annotation.frame_id.clone(),
                    detections: s.detections.clone(),
                })
                .collect(),
        )
    }

    /// Video ids in first-appearance order.
    pub fn videos(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.samples {
            if out.last() != Some(&s.annotation.video_id) && !out.contains(&s.annotation.video_id) {
                out.push(s.annotation.video_id.clone());
            }
        }
        out
    }

    /// Splits by whole videos: the last `held_out` videos form the second part.
    pub fn split_by_video(&self, held_out: usize) -> Result<(Dataset, Dataset)> {
        let videos = self.videos();
        if held_out == 0 || held_out >= videos.len() {
            return Err(Error::Config(format!(
                "cannot hold out {held_out} of {} videos",
                videos.len()
            )));
        }
        let test_videos = &videos[videos.len() - held_out..];
        let (test, train): (Vec<Sample>, Vec<Sample>) = self
            .samples
            .iter()
            .cloned()
            .partition(|s| test_videos.contains(&s.annotation.video_id));
        Ok((
            Dataset {
                vocab: self.vocab.clone(),
                samples: train,
            },
            Dataset {
                vocab: self.vocab.clone(),
                samples: test,
            },
        ))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let images = dir.join(IMAGES_DIR);
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for s in &self.samples {
            let p = images.join(format!("{}.png", s.annotation.frame_id));
            s.image.save(&p)?;
        }
        self.annotation_file().save(dir.join(ANNOTATIONS_FILE))?;
        self.detection_file().save(dir.join(DETECTIONS_FILE))
    }

    /// Loads a dataset directory. Frames without an entry in `detections.json`
    /// get an empty detection list.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let ann = AnnotationFile::load(dir.join(ANNOTATIONS_FILE))?;
        let det_path = dir.join(DETECTIONS_FILE);
        let dets = if det_path.exists() {
            Some(DetectionFile::load(&det_path, &ann.vocab)?)
        } else {
            None
        };
        Self::from_parts(dir, ann, dets)
    }

    /// Assembles a dataset from parsed files, reading images from `dir/images`.
    pub fn from_parts(
        dir: &Path,
        ann: AnnotationFile,
        dets: Option<DetectionFile>,
    ) -> Result<Self> {
        let mut by_frame: HashMap<String, Vec<Detection>> = HashMap::new();
        if let Some(d) = dets {
            for f in d.frames {
                by_frame.insert(f.frame_id, f.detections);
            }
        }
        let mut samples = Vec::with_capacity(ann.frames.len());
        for a in ann.frames {
            let p = dir.join(IMAGES_DIR).join(format!("{}.png", a.frame_id));
            let image = image::open(&p)
                .map_err(|e| Error::schema(&a.frame_id, "image", format!("{}: {e}", p.display())))?
                .to_rgb8();
            let detections = by_frame.remove(&a.frame_id).unwrap_or_default();
            samples.push(Sample {
                annotation: a,
                detections,
                image,
            });
        }
        Ok(Self {
            vocab: ann.vocab,
            samples,
        })
    }
}
