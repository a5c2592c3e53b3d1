use alloc::vec::Vec;

use crate::adapter::pool_bins;
use crate::codec::VideoTensor;

/// 64-bit average hash: box-downscale the luma to 8×8, set bit `r·8 + c`
/// where the cell exceeds the cell mean.
pub fn average_hash(gray: &[f64], height: usize, width: usize) -> u64 {
    let rows = pool_bins(height, 8);
    let cols = pool_bins(width, 8);
    let mut cells = [0.0f64; 64];
    for (r, &(y0, y1)) in rows.iter().enumerate() {
        for (c, &(x0, x1)) in cols.iter().enumerate() {
            let mut sum = 0.0;
            for y in y0..y1 {
                sum += gray[y * width + x0..y * width + x1].iter().sum::<f64>();
            }
            cells[r * 8 + c] = sum / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    let mean = cells.iter().sum::<f64>() / 64.0;
    cells
        .iter()
        .enumerate()
        .fold(0u64, |h, (i, &v)| if v > mean { h | (1 << i) } else { h })
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

/// Splits `[0, F)` wherever consecutive frame hashes differ in more than
/// `threshold` bits.
pub fn segment_scenes(video: &VideoTensor, threshold: u32) -> Vec<(usize, usize)> {
    let hashes: Vec<u64> = (0..video.frames)
        .map(|t| average_hash(&video.gray_frame(t), video.height, video.width))
        .collect();
    let mut out = Vec::new();
    let mut start = 0;
    for t in 1..video.frames {
        if hamming(hashes[t - 1], hashes[t]) > threshold {
            out.push((start, t));
            start = t;
        }
    }
    out.push((start, video.frames));
    out
}
