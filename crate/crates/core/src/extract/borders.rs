use crate::codec::VideoTensor;
use crate::error::{Error, Result};

/// Interior rectangle `[top, bottom) × [left, right)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CropBox {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

const BINS: usize = 16;
const BLACK_MEAN: f64 = 0.1;

/// Accumulates a 16-bin luma histogram and reports whether its spread and
/// level mark a black border line.
#[derive(Default)]
struct LineHistogram {
    counts: [usize; BINS],
}

impl LineHistogram {
    fn add(&mut self, v: f64) {
        let b = ((v * BINS as f64) as usize).min(BINS - 1);
        self.counts[b] += 1;
    }

    fn is_border(&self, std_threshold: f64) -> bool {
        let total: usize = self.counts.iter().sum();
        if total == 0 {
            return false;
        }
        let center = |b: usize| (b as f64 + 0.5) / BINS as f64;
        let mean = self
            .counts
            .iter()
            .enumerate()
            .map(|(b, &c)| c as f64 * center(b))
            .sum::<f64>()
            / total as f64;
        let var = self
            .counts
            .iter()
            .enumerate()
            .map(|(b, &c)| c as f64 * (center(b) - mean) * (center(b) - mean))
            .sum::<f64>()
            / total as f64;
        crate::math::sqrt(var) < std_threshold && mean < BLACK_MEAN
    }
}

/// Finds black letterbox/pillarbox borders shared by every frame.
pub fn detect_borders(video: &VideoTensor, std_threshold: f64) -> Result<CropBox> {
    if !(std_threshold >= 0.0) {
        return Err(Error::Parameter(
            "std threshold must be non-negative".into(),
        ));
    }
    let (h, w) = (video.height, video.width);
    let grays: alloc::vec::Vec<_> = (0..video.frames).map(|t| video.gray_frame(t)).collect();
    let row_border = |y: usize| {
        let mut hist = LineHistogram::default();
        for g in &grays {
            g[y * w..(y + 1) * w].iter().for_each(|&v| hist.add(v));
        }
        hist.is_border(std_threshold)
    };
    let top = (0..h).find(|&y| !row_border(y));
    let Some(top) = top else {
        return Err(Error::DegenerateInput("every row is black border".into()));
    };
    let bottom = (0..h).rev().find(|&y| !row_border(y)).unwrap() + 1;
    let col_border = |x: usize| {
        let mut hist = LineHistogram::default();
        for g in &grays {
            (top..bottom).for_each(|y| hist.add(g[y * w + x]));
        }
        hist.is_border(std_threshold)
    };
    let Some(left) = (0..w).find(|&x| !col_border(x)) else {
        return Err(Error::DegenerateInput(
            "every column is black border".into(),
        ));
    };
    let right = (0..w).rev().find(|&x| !col_border(x)).unwrap() + 1;
    Ok(CropBox {
        top,
        bottom,
        left,
        right,
    })
}

/// Crops every frame to `bx`.
pub fn apply_crop(video: &VideoTensor, bx: CropBox) -> VideoTensor {
    let (ch, cw) = (bx.bottom - bx.top, bx.right - bx.left);
    let mut data = alloc::vec::Vec::with_capacity(video.frames * ch * cw * 3);
    for t in 0..video.frames {
        for y in bx.top..bx.bottom {
            let s = ((t * video.height + y) * video.width + bx.left) * 3;
            data.extend_from_slice(&video.data[s..s + cw * 3]);
        }
    }
    VideoTensor {
        data,
        frames: video.frames,
        height: ch,
        width: cw,
        fps: video.fps,
    }
}
