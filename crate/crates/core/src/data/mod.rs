//! Video samples, the synthetic layered-scene generator, and on-disk datasets.

mod io;
mod synth;

use std::collections::BTreeSet;

pub use io::{frame_name, load_dataset, load_mask, save_dataset, save_mask, LoadOptions, Manifest, ManifestVideo};
pub use synth::{
    generate_dataset, generate_video, render_frame, sample_scene_specs, split_domains, DomainShift, ObjectSpec,
    PhotometricRegime, SceneSpec, Shape, SplitConfig, BACKGROUND_DEPTH,
};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// One frame. Images are channel-first `3×H×W` in `[0, 1]`; flow is
/// `2×H×W` holding `(dx, dy)` in pixels per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub frame_index: usize,
    pub image: Tensor,
    pub flow: Tensor,
    /// Row-major `H×W`, strictly positive.
    pub depth: Vec<f64>,
    /// False when `depth` is a constant placeholder for a missing file.
    pub has_depth: bool,
    /// Row-major `H×W`; `None` for unannotated frames.
    pub mask: Option<Vec<bool>>,
}

impl VideoSample {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn mask_f64(&self) -> Option<Vec<f64>> {
        self.mask.as_ref().map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let ctx = |what: &str| format!("frame {}: {what}", self.frame_index);
        if self.image.channels() != 3 {
            return Err(Error::Shape(ctx("image must have 3 channels")));
        }
        if self.flow.shape() != [2, h, w] {
            return Err(Error::Shape(ctx("flow size differs from image")));
        }
        if self.depth.len() != h * w {
            return Err(Error::Shape(ctx("depth size differs from image")));
        }
        if let Some(m) = &self.mask {
            if m.len() != h * w {
                return Err(Error::Shape(ctx("mask size differs from image")));
            }
        }
        let bad = self.depth.iter().filter(|&&d| !(d > 0.0 && d.is_finite())).count();
        if bad > 0 {
            return Err(Error::Dataset(ctx(&format!("{bad} non-positive depth values"))));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub video_id: String,
    pub samples: Vec<VideoSample>,
    pub annotated: BTreeSet<usize>,
}

impl VideoSequence {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn height(&self) -> usize {
        self.samples.first().map_or(0, |s| s.height())
    }

    pub fn width(&self) -> usize {
        self.samples.first().map_or(0, |s| s.width())
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Dataset(format!("video `{}` has no frames", self.video_id)));
        }
        let (h, w) = (self.height(), self.width());
        for (i, s) in self.samples.iter().enumerate() {
            if s.frame_index != i {
                return Err(Error::Dataset(format!(
                    "video `{}`: frame indices must be contiguous from 0 (found {} at position {i})",
                    self.video_id, s.frame_index
                )));
            }
            if (s.height(), s.width()) != (h, w) {
                return Err(Error::Shape(format!(
                    "video `{}`: frame {i} is {}x{}, expected {h}x{w}",
                    self.video_id,
                    s.height(),
                    s.width()
                )));
            }
            s.validate()?;
            if s.mask.is_some() != self.annotated.contains(&i) {
                return Err(Error::Dataset(format!(
                    "video `{}`: annotation set disagrees with mask presence at frame {i}",
                    self.video_id
                )));
            }
        }
        Ok(())
    }
}
