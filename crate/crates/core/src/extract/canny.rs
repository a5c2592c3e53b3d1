use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::codec::VideoTensor;
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::BinaryVideo;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = math::ceil(3.0 * sigma) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| math::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn blur(frame: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; frame.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(i, w)| w * frame[y * width + clamp_idx(x as isize + i as isize - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; frame.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(i, w)| w * tmp[clamp_idx(y as isize + i as isize - r, height) * width + x])
                .sum();
        }
    }
    out
}

/// Sobel gradients scaled by 1/8, and their magnitude.
fn sobel(img: &[f64], height: usize, width: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| img[clamp_idx(y, height) * width + clamp_idx(x, width)];
    let mut gx = vec![0.0; img.len()];
    let mut gy = vec![0.0; img.len()];
    let mut mag = vec![0.0; img.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let dx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let dy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let i = y as usize * width + x as usize;
            gx[i] = dx / 8.0;
            gy[i] = dy / 8.0;
            mag[i] = math::sqrt(gx[i] * gx[i] + gy[i] * gy[i]);
        }
    }
    (gx, gy, mag)
}

/// Pixel step `(dy, dx)` along the gradient, snapped to 0, 45, 90 or 135 degrees.
fn quantised_direction(gx: f64, gy: f64) -> (isize, isize) {
    let mut angle = math::atan2(gy, gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        (0, 1)
    } else if angle < 67.5 {
        (1, 1)
    } else if angle < 112.5 {
        (1, 0)
    } else {
        (1, -1)
    }
}

/// Canny edges of one `height × width` grayscale frame.
///
/// Gaussian blur (radius `⌈3σ⌉`, replicated borders), Sobel gradients scaled
/// by 1/8 so magnitudes are in intensity-per-pixel units, 4-direction
/// non-maximum suppression, then hysteresis: weak pixels (`≥ low`) survive
/// only when 8-connected to a strong pixel (`≥ high`).
pub fn canny_edges(
    frame: &[f64],
    height: usize,
    width: usize,
    low: f64,
    high: f64,
    sigma: f64,
) -> Result<Vec<u8>> {
    if height < 3 || width < 3 {
        return Err(Error::Parameter(format!(
            "frame {height}x{width} too small for Canny"
        )));
    }
    if frame.len() != height * width {
        return Err(Error::Parameter("frame length does not match dims".into()));
    }
    if !(0.0 <= low && low <= high) || !(sigma > 0.0) {
        return Err(Error::Parameter(format!(
            "need 0 <= low <= high and sigma > 0, got low={low} high={high} sigma={sigma}"
        )));
    }
    let img = blur(frame, height, width, sigma);
    let (gx, gy, mag) = sobel(&img, height, width);
    let m_at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= height as isize || x >= width as isize {
            0.0
        } else {
            mag[y as usize * width + x as usize]
        }
    };
    // 0 = suppressed, 1 = weak, 2 = strong
    let mut class = vec![0u8; img.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let i = y as usize * width + x as usize;
            let m = mag[i];
            if m <= 0.0 || m < low {
                continue;
            }
            let (oy, ox) = quantised_direction(gx[i], gy[i]);
            // on an exact tie the first pixel along the quantised direction survives
            let forward = m_at(y + oy, x + ox);
            let backward = m_at(y - oy, x - ox);
            if m > backward && m >= forward {
                class[i] = if m >= high { 2 } else { 1 };
            }
        }
    }

    let mut out = vec![0u8; img.len()];
    let mut stack: Vec<usize> = (0..img.len()).filter(|&i| class[i] == 2).collect();
    for &i in &stack {
        out[i] = 1;
    }
    while let Some(i) = stack.pop() {
        let (y, x) = ((i / width) as isize, (i % width) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if class[j] > 0 && out[j] == 0 {
                    out[j] = 1;
                    stack.push(j);
                }
            }
        }
    }
    Ok(out)
}

/// Canny on the luma of every frame.
pub fn canny_video(video: &VideoTensor, low: f64, high: f64, sigma: f64) -> Result<BinaryVideo> {
    let mut out = BinaryVideo::zeros(video.frames, video.height, video.width);
    for t in 0..video.frames {
        let edges = canny_edges(
            &video.gray_frame(t),
            video.height,
            video.width,
            low,
            high,
            sigma,
        )?;
        out.frame_mut(t).copy_from_slice(&edges);
    }
    Ok(out)
}
