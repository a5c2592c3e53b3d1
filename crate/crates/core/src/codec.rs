//! Exact space-to-channel patch codec standing in for a pretrained video VAE.
//!
//! A video `F×H×W×3` folds into a latent `f×h×w×ch` with `f = F/p_t`,
//! `h = H/p_s`, `w = W/p_s` and `ch = 3·p_t·p_s²`. Inside a latent cell the
//! channel axis is row-major over `(p_t, p_s, p_s, 3)`. Folding only permutes
//! values, so `decode(encode(v)) == v` bit for bit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PatchSpec {
    pub temporal: usize,
    pub spatial: usize,
}

impl PatchSpec {
    pub const fn new(temporal: usize, spatial: usize) -> Self {
        Self { temporal, spatial }
    }

    pub fn channels(&self) -> usize {
        3 * self.temporal * self.spatial * self.spatial
    }
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self::new(2, 4)
    }
}

/// Pixel-space video, `frames × height × width × 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    pub data: Vec<f64>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
}

impl VideoTensor {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Parameter(format!(
                "video dims must be positive, got {frames}x{height}x{width}"
            )));
        }
        if data.len() != frames * height * width * 3 {
            return Err(dim_err(
                "data",
                format!(
                    "expected {} values, got {}",
                    frames * height * width * 3,
                    data.len()
                ),
            ));
        }
        if let Some(i) = data
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::Validation(format!(
                "video value {} at index {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self {
            data,
            frames,
            height,
            width,
            fps: 8.0,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            data: vec![0.0; frames * height * width * 3],
            frames,
            height,
            width,
            fps: 8.0,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[((t * self.height + y) * self.width + x) * 3 + c]
    }

    /// Rec. 601 luma of frame `t`, `height × width`.
    pub fn gray_frame(&self, t: usize) -> Vec<f64> {
        self.frame(t)
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Builds a 3-channel video by replicating a single-channel `F×H×W` map.
    pub fn from_gray(frames: usize, height: usize, width: usize, gray: &[f64]) -> Result<Self> {
        if gray.len() != frames * height * width {
            return Err(dim_err("data", "gray map length does not match dims"));
        }
        let data = gray.iter().flat_map(|&g| [g, g, g]).collect();
        Self::new(frames, height, width, data)
    }
}

/// Compressed representation `f × h × w × ch` produced by the codec (or by
/// the sampler, in which case values are unconstrained).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub data: Vec<f64>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: PatchSpec,
}

impl LatentTensor {
    pub fn zeros(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        patch: PatchSpec,
    ) -> Self {
        Self {
            data: vec![0.0; frames * height * width * channels],
            frames,
            height,
            width,
            channels,
            patch,
        }
    }

    pub fn from_data(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        patch: PatchSpec,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != frames * height * width * channels {
            return Err(dim_err(
                "data",
                format!(
                    "expected {} values, got {}",
                    frames * height * width * channels,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            data,
            frames,
            height,
            width,
            channels,
            patch,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }

    pub fn same_shape(&self, other: &LatentTensor) -> bool {
        self.frames == other.frames
            && self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
    }

    pub fn shape(&self) -> LatentShape {
        LatentShape {
            frames: self.frames,
            height: self.height,
            width: self.width,
            channels: self.channels,
            patch: self.patch,
        }
    }
}

/// Shape-only description of a latent, used to size sampler output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: PatchSpec,
}

impl LatentShape {
    /// Latent shape produced by encoding an `F×H×W` video.
    pub fn for_video(frames: usize, height: usize, width: usize, patch: PatchSpec) -> Result<Self> {
        check_divisible(frames, height, width, patch)?;
        Ok(Self {
            frames: frames / patch.temporal,
            height: height / patch.spatial,
            width: width / patch.spatial,
            channels: patch.channels(),
            patch,
        })
    }

    pub fn numel(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }

    pub fn n_tokens(&self) -> usize {
        self.frames * self.height * self.width
    }
}

fn check_divisible(frames: usize, height: usize, width: usize, patch: PatchSpec) -> Result<()> {
    if patch.temporal == 0 || patch.spatial == 0 {
        return Err(Error::Parameter("patch sizes must be positive".into()));
    }
    if frames % patch.temporal != 0 {
        return Err(dim_err(
            "frames",
            format!(
                "{frames} not divisible by temporal patch {}",
                patch.temporal
            ),
        ));
    }
    if height % patch.spatial != 0 {
        return Err(dim_err(
            "height",
            format!("{height} not divisible by spatial patch {}", patch.spatial),
        ));
    }
    if width % patch.spatial != 0 {
        return Err(dim_err(
            "width",
            format!("{width} not divisible by spatial patch {}", patch.spatial),
        ));
    }
    Ok(())
}

#[inline]
fn fold_index(
    shape: &LatentShape,
    (pf, py, px, c): (usize, usize, usize, usize),
    (lf, ly, lx): (usize, usize, usize),
) -> usize {
    let ps = shape.patch.spatial;
    let channel = ((pf * ps + py) * ps + px) * 3 + c;
    ((lf * shape.height + ly) * shape.width + lx) * shape.channels + channel
}

pub fn encode(video: &VideoTensor, patch: PatchSpec) -> Result<LatentTensor> {
    let shape = LatentShape::for_video(video.frames, video.height, video.width, patch)?;
    let mut out = vec![0.0; shape.numel()];
    let (pt, ps) = (patch.temporal, patch.spatial);
    for t in 0..video.frames {
        for y in 0..video.height {
            for x in 0..video.width {
                let src = ((t * video.height + y) * video.width + x) * 3;
                for c in 0..3 {
                    let dst = fold_index(
                        &shape,
                        (t % pt, y % ps, x % ps, c),
                        (t / pt, y / ps, x / ps),
                    );
                    out[dst] = video.data[src + c];
                }
            }
        }
    }
    LatentTensor::from_data(
        shape.frames,
        shape.height,
        shape.width,
        shape.channels,
        patch,
        out,
    )
}

/// Unfolds a latent back to pixel space, clamping to `[0, 1]`.
pub fn decode(latent: &LatentTensor) -> Result<VideoTensor> {
    let patch = latent.patch;
    if patch.temporal == 0 || patch.spatial == 0 || latent.channels != patch.channels() {
        return Err(dim_err(
            "channels",
            format!(
                "{} channels inconsistent with patch ({}, {})",
                latent.channels, patch.temporal, patch.spatial
            ),
        ));
    }
    let shape = latent.shape();
    let (pt, ps) = (patch.temporal, patch.spatial);
    let (frames, height, width) = (latent.frames * pt, latent.height * ps, latent.width * ps);
    let mut data = vec![0.0; frames * height * width * 3];
    for t in 0..frames {
        for y in 0..height {
            for x in 0..width {
                let dst = ((t * height + y) * width + x) * 3;
                for c in 0..3 {
                    let src = fold_index(
                        &shape,
                        (t % pt, y % ps, x % ps, c),
                        (t / pt, y / ps, x / ps),
                    );
                    data[dst + c] = latent.data[src].clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(VideoTensor {
        data,
        frames,
        height,
        width,
        fps: 8.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_video(frames: usize, height: usize, width: usize) -> VideoTensor {
        let n = frames * height * width * 3;
        let data = (0..n).map(|i| i as f64 / n as f64).collect();
        VideoTensor::new(frames, height, width, data).unwrap()
    }

    #[test]
    fn encode_shape_arithmetic() {
        let v = ramp_video(8, 16, 16);
        let z = encode(&v, PatchSpec::new(2, 4)).unwrap();
        assert_eq!((z.frames, z.height, z.width, z.channels), (4, 4, 4, 96));
        let back = decode(&z).unwrap();
        assert_eq!((back.frames, back.height, back.width), (8, 16, 16));
    }

    #[test]
    fn constant_video_gives_constant_latent() {
        let v = VideoTensor::new(8, 16, 16, vec![0.5; 8 * 16 * 16 * 3]).unwrap();
        let z = encode(&v, PatchSpec::default()).unwrap();
        assert!(z.data.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn channel_layout_is_row_major_over_patch_then_rgb() {
        let v = ramp_video(2, 4, 4);
        let z = encode(&v, PatchSpec::new(2, 2)).unwrap();
        // latent cell (0, 1, 0), channel for (pt=1, py=0, px=1, c=2)
        let ch = ((1 * 2 + 0) * 2 + 1) * 3 + 2;
        let idx = ((0 * z.height + 1) * z.width + 0) * z.channels + ch;
        assert_eq!(z.data[idx], v.at(1, 2, 1, 2));
    }

    #[test]
    fn non_divisible_dims_name_the_axis() {
        let v = ramp_video(3, 16, 16);
        match encode(&v, PatchSpec::new(2, 4)) {
            Err(Error::DimensionMismatch { axis, .. }) => assert_eq!(axis, "frames"),
            other => panic!("unexpected {other:?}"),
        }
        let v = ramp_video(2, 16, 10);
        match encode(&v, PatchSpec::new(2, 4)) {
            Err(Error::DimensionMismatch { axis, .. }) => assert_eq!(axis, "width"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decode_clamps_and_checks_patch() {
        let mut z = LatentTensor::zeros(1, 1, 1, 12, PatchSpec::new(1, 2));
        assert!(decode(&z).unwrap().data.iter().all(|&x| x == 0.0));
        z.data[0] = 1.7;
        z.data[1] = -0.3;
        let v = decode(&z).unwrap();
        assert_eq!(v.data[0], 1.0);
        assert_eq!(v.data[1], 0.0);
        z.channels = 11;
        assert!(matches!(decode(&z), Err(Error::DimensionMismatch { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            spec in prop::sample::select(vec![(1usize, 2usize), (2, 4), (4, 4), (1, 1)]),
            fm in 1usize..3, hm in 1usize..3, wm in 1usize..3,
            seed in any::<u64>(),
        ) {
            let patch = PatchSpec::new(spec.0, spec.1);
            let (f, h, w) = (fm * spec.0, hm * spec.1, wm * spec.1);
            let mut s = seed;
            let data = (0..f * h * w * 3).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            }).collect();
            let v = VideoTensor::new(f, h, w, data).unwrap();
            let z = encode(&v, patch).unwrap();
            prop_assert_eq!(z.data.len(), v.data.len());
            let back = decode(&z).unwrap();
            prop_assert!(back.data.iter().zip(&v.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
