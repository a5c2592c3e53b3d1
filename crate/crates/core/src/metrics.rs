//! Control-precision metrics and Gaussian Fréchet distance.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::codec::VideoTensor;
use crate::error::{dim_err, Error, Result};
use crate::extract::{KeypointFrame, NUM_KEYPOINTS};
use crate::math;
use crate::tensor::BinaryVideo;

pub const DICE_EPS: f64 = 1e-5;

/// Per-keypoint OKS tolerances in COCO order.
pub const COCO_SIGMAS: [f64; NUM_KEYPOINTS] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

/// Flag raised when a frame has no edges in either map.
pub const FLAG_EMPTY_PAIR: &str = "empty_empty_frame";

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(untagged))]
pub enum ParamValue {
    Int(i64),
    Real(f64),
    Reals(Vec<f64>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub name: String,
    pub score: f64,
    pub per_frame: Vec<f64>,
    pub params: BTreeMap<String, ParamValue>,
    pub flags: Vec<String>,
}

impl MetricReport {
    fn new(name: &str, score: f64, per_frame: Vec<f64>) -> Self {
        Self {
            name: name.to_string(),
            score,
            per_frame,
            params: BTreeMap::new(),
            flags: Vec::new(),
        }
    }

    fn param(mut self, key: &str, value: ParamValue) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }
}

/// Adaptive Dice over binary edge maps, with the single-epsilon smoothing
/// applied as written. Frames where both maps are empty score 1 each (2 after
/// scaling) and are listed in the flags.
pub fn canny_matching(pred: &BinaryVideo, gt: &BinaryVideo) -> Result<MetricReport> {
    if !pred.same_dims(gt) {
        return Err(dim_err(
            "edges",
            format!(
                "pred {}x{}x{} vs gt {}x{}x{}",
                pred.frames, pred.height, pred.width, gt.frames, gt.height, gt.width
            ),
        ));
    }
    if !pred.is_binary() || !gt.is_binary() {
        return Err(Error::Validation("edge maps must be binary".into()));
    }
    let mut per_frame = Vec::with_capacity(pred.frames);
    let mut empty = Vec::new();
    for t in 0..pred.frames {
        let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
        for (&p, &g) in pred.frame(t).iter().zip(gt.frame(t)) {
            inter += (p & g) as usize;
            np += p as usize;
            ng += g as usize;
        }
        if np == 0 && ng == 0 {
            empty.push(t);
        }
        per_frame.push((inter as f64 + DICE_EPS) / ((np + ng) as f64 + DICE_EPS));
    }
    let score = 2.0 * per_frame.iter().sum::<f64>() / pred.frames.max(1) as f64;
    let mut report = MetricReport::new("canny_matching", score, per_frame)
        .param("epsilon", ParamValue::Real(DICE_EPS));
    for t in empty {
        report.flags.push(format!("{FLAG_EMPTY_PAIR}:{t}"));
    }
    Ok(report)
}

/// Mask-restricted RGB L1 distance, summed over frames. Lower is closer.
pub fn ms_consistency(
    pred: &VideoTensor,
    gt: &VideoTensor,
    masks: &BinaryVideo,
) -> Result<MetricReport> {
    if (pred.frames, pred.height, pred.width) != (gt.frames, gt.height, gt.width) {
        return Err(dim_err("video", "pred and gt shapes differ"));
    }
    if (masks.frames, masks.height, masks.width) != (gt.frames, gt.height, gt.width) {
        return Err(dim_err("mask", "mask shape differs from video"));
    }
    if !masks.is_binary() {
        return Err(Error::Validation("masks must be binary".into()));
    }
    let mut per_frame = Vec::with_capacity(gt.frames);
    for t in 0..gt.frames {
        let m = masks.frame(t);
        let area: usize = m.iter().map(|&v| v as usize).sum();
        if area == 0 {
            return Err(Error::DegenerateMask { frame: t });
        }
        let (p, g) = (pred.frame(t), gt.frame(t));
        let mut l1 = 0.0;
        for (i, &mv) in m.iter().enumerate() {
            if mv == 1 {
                for c in 0..3 {
                    l1 += math::abs(p[i * 3 + c] - g[i * 3 + c]);
                }
            }
        }
        per_frame.push(l1 / area as f64);
    }
    let score = per_frame.iter().sum();
    Ok(MetricReport::new("ms_consistency", score, per_frame)
        .param("direction", ParamValue::Text("lower_is_better".into())))
}

/// Object keypoint similarity averaged over frames. Visibility and the box
/// area come from the ground truth.
pub fn pose_similarity(
    pred: &[KeypointFrame],
    gt: &[KeypointFrame],
    sigmas: &[f64],
) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return Err(dim_err(
            "frames",
            format!("{} predicted vs {} reference", pred.len(), gt.len()),
        ));
    }
    if sigmas.len() != NUM_KEYPOINTS {
        return Err(dim_err(
            "keypoints",
            format!("expected {NUM_KEYPOINTS} sigmas, got {}", sigmas.len()),
        ));
    }
    if sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Validation("sigmas must be positive".into()));
    }
    let mut per_frame = Vec::with_capacity(gt.len());
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.points.len() != NUM_KEYPOINTS
            || g.points.len() != NUM_KEYPOINTS
            || g.visible.len() != NUM_KEYPOINTS
        {
            return Err(dim_err(
                "keypoints",
                format!("frame {i} does not carry {NUM_KEYPOINTS} keypoints"),
            ));
        }
        if !(g.bbox_area > 0.0) {
            return Err(Error::Validation(format!(
                "frame {i}: box area must be positive"
            )));
        }
        let (mut sum, mut count) = (0.0, 0usize);
        for k in 0..NUM_KEYPOINTS {
            if !g.visible[k] {
                continue;
            }
            let dx = p.points[k][0] - g.points[k][0];
            let dy = p.points[k][1] - g.points[k][1];
            sum += math::exp(-(dx * dx + dy * dy) / (2.0 * sigmas[k] * sigmas[k] * g.bbox_area));
            count += 1;
        }
        if count == 0 {
            return Err(Error::DegenerateFrame { frame: i });
        }
        per_frame.push(sum / count as f64);
    }
    let score = per_frame.iter().sum::<f64>() / per_frame.len().max(1) as f64;
    Ok(MetricReport::new("pose_similarity", score, per_frame)
        .param("k", ParamValue::Int(NUM_KEYPOINTS as i64))
        .param("sigmas", ParamValue::Reals(sigmas.to_vec())))
}

/// Mean and covariance of a Gaussian over `dim` features, row-major.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance (biased when there is one sample).
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n == 0 {
        return Err(Error::DegenerateInput("no feature vectors".into()));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(dim_err("features", "feature vectors differ in length"));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for f in features {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (f[i] - mean[i]) * (f[j] - mean[j]);
            }
        }
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    cov.iter_mut().for_each(|c| *c /= denom);
    Ok(GaussianStats { mean, cov })
}

/// Eigenvalues and eigenvectors (columns of `v`) of a symmetric matrix by
/// cyclic Jacobi rotations.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off <= 1e-30 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (math::abs(theta) + math::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

const NEG_EIG_TOL: f64 = -1e-8;

fn check_cov(cov: &[f64], d: usize, which: &str) -> Result<()> {
    if cov.len() != d * d {
        return Err(dim_err("covariance", format!("{which}: expected {d}x{d}")));
    }
    if cov.iter().any(|c| !c.is_finite()) {
        return Err(Error::Validation(format!("{which}: non-finite covariance")));
    }
    let scale = cov.iter().fold(1.0f64, |m, c| m.max(math::abs(*c)));
    for i in 0..d {
        for j in i + 1..d {
            if math::abs(cov[i * d + j] - cov[j * d + i]) > 1e-9 * scale {
                return Err(Error::Validation(format!(
                    "{which}: covariance is not symmetric"
                )));
            }
        }
    }
    let (eig, _) = symmetric_eigen(cov, d);
    if eig.iter().any(|&l| l < NEG_EIG_TOL * scale) {
        return Err(Error::Validation(format!(
            "{which}: covariance is indefinite"
        )));
    }
    Ok(())
}

fn symmetrize(m: &mut [f64], d: usize) {
    for i in 0..d {
        for j in i + 1..d {
            let avg = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = avg;
            m[j * d + i] = avg;
        }
    }
}

fn psd_sqrt(m: &[f64], d: usize) -> Vec<f64> {
    let (eig, v) = symmetric_eigen(m, d);
    let roots: Vec<f64> = eig.iter().map(|&l| math::sqrt(l.max(0.0))).collect();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| v[i * d + k] * roots[k] * v[j * d + k]).sum();
        }
    }
    symmetrize(&mut out, d);
    out
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^{1/2})`. The trace of the product root is
/// taken as the trace of `(Σa^{1/2} Σb Σa^{1/2})^{1/2}`, which shares its
/// spectrum and stays symmetric.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(dim_err("features", format!("{d} vs {}", b.dim())));
    }
    check_cov(&a.cov, d, "first")?;
    check_cov(&b.cov, d, "second")?;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sa = psd_sqrt(&a.cov, d);
    let mut inner =
        crate::tensor::matmul(&crate::tensor::matmul(&sa, &b.cov, d, d, d), &sa, d, d, d);
    symmetrize(&mut inner, d);
    let (eig, _) = symmetric_eigen(&inner, d);
    let tr_root: f64 = eig.iter().map(|&l| math::sqrt(l.max(0.0))).sum();
    let tr_a: f64 = (0..d).map(|i| a.cov[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| b.cov[i * d + i]).sum();
    Ok(mean_term + tr_a + tr_b - 2.0 * tr_root)
}

/// Maps a whole video to a fixed-length feature vector.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn features(&self, video: &VideoTensor) -> Vec<f64>;
}

/// Hand-made appearance and motion statistics standing in for a pretrained
/// video network: mean RGB, luma spread, mean spatial gradient along each
/// axis, mean temporal change and the fraction of bright pixels.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyVideoFeatures;

impl FeatureExtractor for ToyVideoFeatures {
    fn name(&self) -> &str {
        "toy_video_features"
    }

    fn dim(&self) -> usize {
        8
    }

    fn features(&self, video: &VideoTensor) -> Vec<f64> {
        let (f, h, w) = (video.frames, video.height, video.width);
        let n = (f * h * w) as f64;
        let mut out = vec![0.0; 8];
        for px in video.data.chunks_exact(3) {
            for c in 0..3 {
                out[c] += px[c] / n;
            }
        }
        let grays: Vec<Vec<f64>> = (0..f).map(|t| video.gray_frame(t)).collect();
        let mean_l = grays.iter().flatten().sum::<f64>() / n;
        out[3] = math::sqrt(
            grays
                .iter()
                .flatten()
                .map(|g| (g - mean_l) * (g - mean_l))
                .sum::<f64>()
                / n,
        );
        let (mut gx, mut gy, mut gt) = (0.0, 0.0, 0.0);
        for (t, g) in grays.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let v = g[y * w + x];
                    if x + 1 < w {
                        gx += math::abs(g[y * w + x + 1] - v);
                    }
                    if y + 1 < h {
                        gy += math::abs(g[(y + 1) * w + x] - v);
                    }
                    if t + 1 < f {
                        gt += math::abs(grays[t + 1][y * w + x] - v);
                    }
                }
            }
        }
        out[4] = gx / n;
        out[5] = gy / n;
        out[6] = gt / n;
        out[7] = grays.iter().flatten().filter(|&&g| g > 0.5).count() as f64 / n;
        out
    }
}

/// Fréchet distance between two sets of videos under `extractor`.
pub fn video_frechet<E: FeatureExtractor + ?Sized>(
    extractor: &E,
    a: &[VideoTensor],
    b: &[VideoTensor],
) -> Result<MetricReport> {
    let fa: Vec<Vec<f64>> = a.iter().map(|v| extractor.features(v)).collect();
    let fb: Vec<Vec<f64>> = b.iter().map(|v| extractor.features(v)).collect();
    let score = frechet_distance(&gaussian_stats(&fa)?, &gaussian_stats(&fb)?)?;
    Ok(MetricReport::new("frechet_distance", score, Vec::new())
        .param("features", ParamValue::Text(extractor.name().to_string()))
        .param("dim", ParamValue::Int(extractor.dim() as i64)))
}
