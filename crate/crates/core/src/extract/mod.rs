//! Data-pipeline stages that run without pretrained models, plus a synthetic
//! moving-shapes source with exact annotations.

use crate::codec::VideoTensor;

mod borders;
mod canny;
mod scenes;
mod synth;

pub use borders::{apply_crop, detect_borders, CropBox};
pub use canny::{canny_edges, canny_video};
pub use scenes::{average_hash, hamming, segment_scenes};
pub use synth::{
    render_skeleton, synth_dataset, synth_dataset_with, ClipMeta, ClipRecord, KeypointFrame,
    Motion, ShapeKind, SynthParams, NUM_CLASSES, NUM_KEYPOINTS, SKELETON,
};

/// A keep/drop predicate over clips. Stages that need pretrained scorers
/// (aesthetics, caption similarity) plug in here.
pub trait ClipFilter {
    fn name(&self) -> &str;
    fn keep(&self, video: &VideoTensor, caption_class: usize) -> bool;
}

/// Keeps everything; stands in for a scorer-backed filter.
#[derive(Debug, Clone)]
pub struct AcceptAll {
    pub label: &'static str,
}

impl ClipFilter for AcceptAll {
    fn name(&self) -> &str {
        self.label
    }

    fn keep(&self, _video: &VideoTensor, _caption_class: usize) -> bool {
        true
    }
}
