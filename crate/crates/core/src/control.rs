//! Unified control-signal encoding: control video plus task-aware mask into
//! the conditioning latent `z_m = E(v_c) ⊕ M_c`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::codec::{encode, LatentShape, LatentTensor, PatchSpec, VideoTensor};
use crate::error::{dim_err, Error, Result};
use crate::extract::{render_skeleton, ClipRecord, KeypointFrame};
use crate::tensor::BinaryVideo;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ControlKind {
    Canny,
    Mask,
    Pose,
}

impl ControlKind {
    pub const ALL: [ControlKind; 3] = [ControlKind::Canny, ControlKind::Mask, ControlKind::Pose];

    pub fn name(self) -> &'static str {
        match self {
            ControlKind::Canny => "canny",
            ControlKind::Mask => "mask",
            ControlKind::Pose => "pose",
        }
    }
}

/// A control signal rendered as a video with the target's dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVideo {
    pub video: VideoTensor,
    pub kind: ControlKind,
}

impl ControlVideo {
    /// Replicates a binary map (edges or segmentation) across the three
    /// colour channels.
    pub fn from_binary(map: &BinaryVideo, kind: ControlKind) -> Result<Self> {
        let gray: Vec<f64> = map.data.iter().map(|&v| v as f64).collect();
        Ok(Self {
            video: VideoTensor::from_gray(map.frames, map.height, map.width, &gray)?,
            kind,
        })
    }
}

/// Binary mask on the latent grid, `f × h × w`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskMask {
    pub data: Vec<u8>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl TaskMask {
    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
}

/// `z_m`: the encoded control latent with the task mask as its last channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBundle {
    pub latent: LatentTensor,
}

impl ControlBundle {
    /// Channels contributed by the encoded control video (excluding the mask).
    pub fn control_channels(&self) -> usize {
        self.latent.channels - 1
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        self.latent.grid()
    }
}

/// Builds `M_c` on the latent grid of an `F×H×W` video.
///
/// Canny and pose masks flag conditioned frames (a latent frame is set when
/// any of its source frames is conditioned). Mask-task masks max-pool the
/// segmentation onto the latent grid.
pub fn build_task_mask(
    kind: ControlKind,
    dims: (usize, usize, usize),
    patch: PatchSpec,
    conditioned_frames: Option<&[bool]>,
    seg_masks: Option<&BinaryVideo>,
) -> Result<TaskMask> {
    let (frames, height, width) = dims;
    let shape = LatentShape::for_video(frames, height, width, patch)?;
    let (pt, ps) = (patch.temporal, patch.spatial);
    let mut data = vec![0u8; shape.n_tokens()];
    match kind {
        ControlKind::Canny | ControlKind::Pose => {
            let flags = conditioned_frames.ok_or_else(|| {
                Error::Parameter(format!(
                    "{} mask needs per-frame conditioning flags",
                    kind.name()
                ))
            })?;
            if flags.len() != frames {
                return Err(dim_err(
                    "frames",
                    format!("{} flags for {frames} frames", flags.len()),
                ));
            }
            let cell = shape.height * shape.width;
            for lf in 0..shape.frames {
                if flags[lf * pt..(lf + 1) * pt].iter().any(|&b| b) {
                    data[lf * cell..(lf + 1) * cell].fill(1);
                }
            }
        }
        ControlKind::Mask => {
            let seg = seg_masks
                .ok_or_else(|| Error::Parameter("mask task needs segmentation masks".into()))?;
            if (seg.frames, seg.height, seg.width) != dims {
                return Err(dim_err("segmentation", "mask dims differ from video dims"));
            }
            if !seg.is_binary() {
                return Err(Error::Validation("segmentation mask is not binary".into()));
            }
            for t in 0..frames {
                for y in 0..height {
                    for x in 0..width {
                        if seg.at(t, y, x) == 1 {
                            data[((t / pt) * shape.height + y / ps) * shape.width + x / ps] = 1;
                        }
                    }
                }
            }
        }
    }
    Ok(TaskMask {
        data,
        frames: shape.frames,
        height: shape.height,
        width: shape.width,
    })
}

/// Encodes the control video and appends the task mask as one channel.
pub fn encode_control(
    control: &ControlVideo,
    mask: &TaskMask,
    patch: PatchSpec,
) -> Result<ControlBundle> {
    let z_c = encode(&control.video, patch)?;
    if (mask.frames, mask.height, mask.width) != z_c.grid() {
        return Err(dim_err(
            "grid",
            format!(
                "task mask {}x{}x{} vs latent {}x{}x{}",
                mask.frames, mask.height, mask.width, z_c.frames, z_c.height, z_c.width
            ),
        ));
    }
    let ch = z_c.channels;
    let mut data = Vec::with_capacity(z_c.n_tokens() * (ch + 1));
    for (cell, &m) in z_c.data.chunks_exact(ch).zip(&mask.data) {
        data.extend_from_slice(cell);
        data.push(m as f64);
    }
    Ok(ControlBundle {
        latent: LatentTensor::from_data(z_c.frames, z_c.height, z_c.width, ch + 1, patch, data)?,
    })
}

/// Builds the conditioning bundle of `kind` from a clip's annotations: edge
/// maps, segmentation masks, or skeletons rendered from keypoints. Every
/// frame counts as conditioned except pose frames without visible keypoints.
pub fn clip_control(
    kind: ControlKind,
    edges: &BinaryVideo,
    masks: &BinaryVideo,
    keypoints: Option<&[KeypointFrame]>,
    patch: PatchSpec,
) -> Result<ControlBundle> {
    let (f, h, w) = (edges.frames, edges.height, edges.width);
    let (control, flags, seg) = match kind {
        ControlKind::Canny => (
            ControlVideo::from_binary(edges, kind)?,
            Some(vec![true; f]),
            None,
        ),
        ControlKind::Mask => (ControlVideo::from_binary(masks, kind)?, None, Some(masks)),
        ControlKind::Pose => {
            let kps = keypoints.ok_or_else(|| {
                Error::Conditioning("clip has no keypoints for pose control".into())
            })?;
            if kps.len() != f {
                return Err(dim_err(
                    "frames",
                    format!("{} keypoint frames for {f} frames", kps.len()),
                ));
            }
            let gray: Vec<f64> = kps.iter().flat_map(|k| render_skeleton(k, h, w)).collect();
            let flags = kps.iter().map(|k| k.visible.iter().any(|&v| v)).collect();
            let video = VideoTensor::from_gray(f, h, w, &gray)?;
            (ControlVideo { video, kind }, Some(flags), None)
        }
    };
    let mask = build_task_mask(kind, (f, h, w), patch, flags.as_deref(), seg)?;
    encode_control(&control, &mask, patch)
}

/// [`clip_control`] on a synthetic clip.
pub fn record_control(
    clip: &ClipRecord,
    kind: ControlKind,
    patch: PatchSpec,
) -> Result<ControlBundle> {
    clip_control(
        kind,
        &clip.edges,
        &clip.masks,
        clip.keypoints.as_deref(),
        patch,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::decode;

    #[test]
    fn canny_and_pose_frame_flags() {
        let patch = PatchSpec::new(2, 4);
        let all = build_task_mask(
            ControlKind::Canny,
            (8, 16, 16),
            patch,
            Some(&[true; 8]),
            None,
        )
        .unwrap();
        assert_eq!((all.frames, all.height, all.width), (4, 4, 4));
        assert!(all.data.iter().all(|&v| v == 1));
        let none = build_task_mask(
            ControlKind::Pose,
            (8, 16, 16),
            patch,
            Some(&[false; 8]),
            None,
        )
        .unwrap();
        assert!(none.data.iter().all(|&v| v == 0));
        // frame 3 belongs to latent frame 1
        let mut flags = [false; 8];
        flags[3] = true;
        let one =
            build_task_mask(ControlKind::Pose, (8, 16, 16), patch, Some(&flags), None).unwrap();
        for lf in 0..4 {
            let expect = u8::from(lf == 1);
            assert!(one.data[lf * 16..(lf + 1) * 16]
                .iter()
                .all(|&v| v == expect));
        }
    }

    #[test]
    fn segmentation_pools_to_single_cell() {
        let patch = PatchSpec::new(2, 4);
        let mut seg = BinaryVideo::zeros(8, 16, 16);
        // the patch at latent (row 1, col 2) in both source frames of latent frame 2
        for t in 4..6 {
            for y in 4..8 {
                for x in 8..12 {
                    seg.data[(t * 16 + y) * 16 + x] = 1;
                }
            }
        }
        let m = build_task_mask(ControlKind::Mask, (8, 16, 16), patch, None, Some(&seg)).unwrap();
        assert_eq!(m.count(), 1);
        assert_eq!(m.data[(2 * 4 + 1) * 4 + 2], 1);
        // a single pixel still marks its cell
        let mut dot = BinaryVideo::zeros(8, 16, 16);
        dot.data[(7 * 16 + 15) * 16 + 15] = 1;
        let m = build_task_mask(ControlKind::Mask, (8, 16, 16), patch, None, Some(&dot)).unwrap();
        assert_eq!(m.count(), 1);
        assert_eq!(m.data[(3 * 4 + 3) * 4 + 3], 1);
    }

    #[test]
    fn missing_arguments_are_parameter_errors() {
        let patch = PatchSpec::new(2, 4);
        assert!(matches!(
            build_task_mask(
                ControlKind::Mask,
                (8, 16, 16),
                patch,
                Some(&[true; 8]),
                None
            ),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            build_task_mask(ControlKind::Canny, (8, 16, 16), patch, None, None),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn bundle_layout() {
        let patch = PatchSpec::new(2, 4);
        let zero = ControlVideo {
            video: VideoTensor::zeros(8, 16, 16),
            kind: ControlKind::Canny,
        };
        let mask = build_task_mask(
            ControlKind::Canny,
            (8, 16, 16),
            patch,
            Some(&[true; 8]),
            None,
        )
        .unwrap();
        let b = encode_control(&zero, &mask, patch).unwrap();
        assert_eq!(b.latent.channels, 97);
        for cell in b.latent.data.chunks_exact(97) {
            assert!(cell[..96].iter().all(|&v| v == 0.0));
            assert_eq!(cell[96], 1.0);
        }
    }

    #[test]
    fn bundle_channel_slice_decodes_to_control() {
        let patch = PatchSpec::new(2, 4);
        let n = 8 * 16 * 16 * 3;
        let data = (0..n).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let v = ControlVideo {
            video: VideoTensor::new(8, 16, 16, data).unwrap(),
            kind: ControlKind::Pose,
        };
        let mask = build_task_mask(
            ControlKind::Pose,
            (8, 16, 16),
            patch,
            Some(&[true; 8]),
            None,
        )
        .unwrap();
        let b = encode_control(&v, &mask, patch).unwrap();
        let z_c = encode(&v.video, patch).unwrap();
        let sliced: Vec<f64> = b
            .latent
            .data
            .chunks_exact(97)
            .flat_map(|c| c[..96].to_vec())
            .collect();
        assert!(sliced
            .iter()
            .zip(&z_c.data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let mut lat = z_c.clone();
        lat.data = sliced;
        assert_eq!(decode(&lat).unwrap().data, v.video.data);
    }

    #[test]
    fn grid_mismatch_is_dimension_error() {
        let patch = PatchSpec::new(2, 4);
        let v = ControlVideo {
            video: VideoTensor::zeros(8, 16, 16),
            kind: ControlKind::Canny,
        };
        let mask = build_task_mask(
            ControlKind::Canny,
            (4, 16, 16),
            patch,
            Some(&[true; 4]),
            None,
        )
        .unwrap();
        assert!(matches!(
            encode_control(&v, &mask, patch),
            Err(Error::DimensionMismatch { .. })
        ));
    }
    proptest::proptest! {
        #[test]
        fn mask_pooling_never_loses_coverage(
            pixels in proptest::collection::vec((0usize..8, 0usize..16, 0usize..16), 1..12),
        ) {
            let patch = PatchSpec::new(2, 4);
            let mut seg = BinaryVideo::zeros(8, 16, 16);
            for &(t, y, x) in &pixels {
                seg.data[(t * 16 + y) * 16 + x] = 1;
            }
            let m = build_task_mask(ControlKind::Mask, (8, 16, 16), patch, None, Some(&seg)).unwrap();
            proptest::prop_assert!(m.count() >= 1 && m.count() <= pixels.len());
            for &(t, y, x) in &pixels {
                proptest::prop_assert_eq!(m.data[((t / 2) * 4 + y / 4) * 4 + x / 4], 1);
            }
        }
    }
}
