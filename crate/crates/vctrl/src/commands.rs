//! The six pipeline commands. Inputs come from the paths in the config; each
//! command writes to `out` when given, else to its configured directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vctrl_core::extract::{
    apply_crop, canny_video, detect_borders, segment_scenes, synth_dataset_with, AcceptAll,
    ClipFilter, CropBox, KeypointFrame, SynthParams,
};
use vctrl_core::metrics::{
    canny_matching, ms_consistency, pose_similarity, video_frechet, MetricReport, ParamValue,
    ToyVideoFeatures, COCO_SIGMAS,
};
use vctrl_core::train::{pretrain_base, train_vctrl, CurvePoint, TrainOutcome, TrainSample};
use vctrl_core::{
    clip_control, decode, encode, sample, AdapterConfig, BaseConfig, BaseParams, BinaryVideo,
    ControlBundle, ControlledModel, Error as CoreError, Layout, NetworkSpec, VCtrlParams,
    VideoTensor,
};

use crate::archive;
use crate::config::RunConfig;
use crate::container::{Container, TensorKind};
use crate::dataset::{
    clip_dir_name, create_dir, load_dataset, read_json, write_clip, write_json, ClipEntry,
    ClipMetaFile, DatasetManifest, FilterRecord, StoredClip, MANIFEST,
};
use crate::error::{CliError, CliResult};

pub const BASE_ARCHIVE: &str = "base.vcnt";
pub const ADAPTER_ARCHIVE: &str = "adapter.vcnt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Preprocess,
    Pretrain,
    TrainControl,
    Sample,
    Evaluate,
    AblateLayout,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Preprocess,
        Command::Pretrain,
        Command::TrainControl,
        Command::Sample,
        Command::Evaluate,
        Command::AblateLayout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Preprocess => "preprocess",
            Command::Pretrain => "pretrain",
            Command::TrainControl => "train-control",
            Command::Sample => "sample",
            Command::Evaluate => "evaluate",
            Command::AblateLayout => "ablate-layout",
        }
    }

    /// Directory the command writes to unless overridden.
    pub fn default_out(self, cfg: &RunConfig) -> PathBuf {
        match self {
            Command::Preprocess => cfg.paths.dataset_dir.clone(),
            Command::Pretrain | Command::TrainControl => cfg.paths.ckpt_dir.clone(),
            Command::Sample | Command::Evaluate | Command::AblateLayout => {
                cfg.paths.report_dir.clone()
            }
        }
    }
}

/// Runs `cmd` and returns a one-line summary.
pub fn run(cmd: Command, cfg: &RunConfig, out: Option<&Path>) -> CliResult<String> {
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cmd.default_out(cfg));
    create_dir(&out)?;
    match cmd {
        Command::Preprocess => preprocess(cfg, &out),
        Command::Pretrain => pretrain(cfg, &out),
        Command::TrainControl => train_control(cfg, &out),
        Command::Sample => sample_cmd(cfg, &out),
        Command::Evaluate => evaluate(cfg, &out),
        Command::AblateLayout => ablate_layout(cfg, &out),
    }
}

fn crop_binary(b: &BinaryVideo, bx: CropBox) -> BinaryVideo {
    let mut out = BinaryVideo::zeros(b.frames, bx.bottom - bx.top, bx.right - bx.left);
    for t in 0..b.frames {
        for y in bx.top..bx.bottom {
            for x in bx.left..bx.right {
                out.data[(t * out.height + y - bx.top) * out.width + x - bx.left] = b.at(t, y, x);
            }
        }
    }
    out
}

fn crop_keypoints(kps: &[KeypointFrame], bx: CropBox) -> Vec<KeypointFrame> {
    kps.iter()
        .map(|k| {
            let pts = k
                .points
                .iter()
                .map(|p| [p[0] - bx.left as f64, p[1] - bx.top as f64])
                .collect();
            KeypointFrame::from_points(pts, bx.bottom - bx.top, bx.right - bx.left)
        })
        .collect()
}

fn raw_videos(dir: &Path) -> CliResult<Vec<(String, VideoTensor)>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "vclt"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let v = Container::read(&p)?.to_video()?;
            Ok((p.file_name().unwrap().to_string_lossy().into_owned(), v))
        })
        .collect()
}

fn preprocess(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let d = &cfg.data;
    let synth = SynthParams::default();
    let canny = (synth.canny_low, synth.canny_high, synth.canny_sigma);
    let filters: [AcceptAll; 2] = [
        AcceptAll { label: "aesthetic" },
        AcceptAll {
            label: "clip_score",
        },
    ];

    let mut pending: Vec<StoredClip> =
        synth_dataset_with(d.n_clips, d.frames, d.height, d.width, d.seed, &synth)?
            .into_iter()
            .map(|c| StoredClip {
                meta: ClipMetaFile {
                    caption_class: c.caption_class,
                    source: "synth".into(),
                    seed: Some(d.seed),
                    generator: Some(c.meta),
                },
                video: c.video,
                edges: c.edges,
                masks: c.masks,
                keypoints: c.keypoints,
            })
            .collect();
    if let Some(raw) = &d.raw_dir {
        for (name, video) in raw_videos(raw)? {
            let edges = canny_video(&video, canny.0, canny.1, canny.2)?;
            pending.push(StoredClip {
                masks: BinaryVideo::zeros(video.frames, video.height, video.width),
                edges,
                video,
                keypoints: None,
                meta: ClipMetaFile {
                    caption_class: 0,
                    source: format!("raw:{name}"),
                    seed: None,
                    generator: None,
                },
            });
        }
    }

    let mut entries = Vec::new();
    let mut dropped = 0;
    for mut clip in pending {
        let segments = segment_scenes(&clip.video, d.scene_threshold);
        let crop = detect_borders(&clip.video, d.border_std)?;
        let full = CropBox {
            top: 0,
            bottom: clip.video.height,
            left: 0,
            right: clip.video.width,
        };
        if crop != full {
            clip.video = apply_crop(&clip.video, crop);
            clip.edges = canny_video(&clip.video, canny.0, canny.1, canny.2)?;
            clip.masks = crop_binary(&clip.masks, crop);
            clip.keypoints = clip.keypoints.map(|k| crop_keypoints(&k, crop));
        }
        let verdicts: Vec<FilterRecord> = filters
            .iter()
            .map(|f| FilterRecord {
                name: f.name().to_string(),
                kept: f.keep(&clip.video, clip.meta.caption_class),
            })
            .collect();
        if verdicts.iter().any(|v| !v.kept) {
            dropped += 1;
            continue;
        }
        let dir = clip_dir_name(entries.len());
        let files = write_clip(&out.join(&dir), &clip)?;
        entries.push(ClipEntry {
            dir,
            source: clip.meta.source.clone(),
            caption_class: clip.meta.caption_class,
            frames: clip.video.frames,
            height: clip.video.height,
            width: clip.video.width,
            segments: segments.iter().map(|&(s, e)| [s, e]).collect(),
            crop,
            filters: verdicts,
            files,
        });
    }
    let manifest = DatasetManifest {
        format: "vctrl-dataset/1".into(),
        config_sha256: cfg.digest(),
        canny: [canny.0, canny.1, canny.2],
        clips: entries,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(format!(
        "preprocess: wrote {} clips ({dropped} dropped) to {}",
        manifest.clips.len(),
        out.display()
    ))
}

/// Dataset clips matching the configured geometry, split into training and
/// held-out parts.
struct Split {
    canny: [f64; 3],
    train: Vec<(String, StoredClip)>,
    held_out: Vec<(String, StoredClip)>,
}

fn load_split(cfg: &RunConfig) -> CliResult<Split> {
    let (manifest, clips) = load_dataset(&cfg.paths.dataset_dir)?;
    let d = &cfg.data;
    let mut usable: Vec<(String, StoredClip)> = clips
        .into_iter()
        .filter(|(_, c)| {
            (c.video.frames, c.video.height, c.video.width) == (d.frames, d.height, d.width)
        })
        .map(|(p, c)| (p.file_name().unwrap().to_string_lossy().into_owned(), c))
        .collect();
    if usable.len() <= d.val_clips {
        return Err(CliError::Missing(format!(
            "dataset has {} clips of {}x{}x{}, need more than val_clips={}",
            usable.len(),
            d.frames,
            d.height,
            d.width,
            d.val_clips
        )));
    }
    let held_out = usable.split_off(usable.len() - d.val_clips);
    Ok(Split {
        canny: manifest.canny,
        train: usable,
        held_out,
    })
}

impl Split {
    /// Held-out clips if any, else the training clips.
    fn eval_clips(&self) -> &[(String, StoredClip)] {
        if self.held_out.is_empty() {
            &self.train
        } else {
            &self.held_out
        }
    }
}

fn bundle(cfg: &RunConfig, clip: &StoredClip) -> CliResult<ControlBundle> {
    Ok(clip_control(
        cfg.data.task,
        &clip.edges,
        &clip.masks,
        clip.keypoints.as_deref(),
        cfg.patch(),
    )?)
}

fn train_samples(
    cfg: &RunConfig,
    clips: &[(String, StoredClip)],
    with_control: bool,
) -> CliResult<Vec<TrainSample>> {
    clips
        .iter()
        .map(|(_, c)| {
            Ok(TrainSample {
                latent: encode(&c.video, cfg.patch())?,
                class: c.meta.caption_class,
                control: if with_control {
                    Some(bundle(cfg, c)?)
                } else {
                    None
                },
            })
        })
        .collect()
}

fn write_curve(path: &Path, curve: &[CurvePoint]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Format(e.to_string()))?;
    let err = |e: csv::Error| CliError::Format(e.to_string());
    w.write_record(["step", "loss", "grad_norm"]).map_err(err)?;
    for p in curve {
        w.write_record([
            p.step.to_string(),
            p.loss.to_string(),
            p.grad_norm.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseRecord {
    pub config: BaseConfig,
    pub config_sha256: String,
    pub archive_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterRecord {
    pub config: AdapterConfig,
    pub base_sha256: String,
    pub config_sha256: String,
    pub archive_sha256: String,
}

/// The `{M, N, layout, ratio, d_c, indices}` record stored beside the adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecRecord {
    #[serde(flatten)]
    pub spec: NetworkSpec,
    pub d_c: usize,
}

fn pretrain(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let split = load_split(cfg)?;
    let samples = train_samples(cfg, &split.train, false)?;
    let sched = cfg.schedule()?;
    let init = BaseParams::init(
        cfg.base_config(),
        &mut ChaCha8Rng::seed_from_u64(cfg.train.seed),
    )?;
    let TrainOutcome { mut params, curve } = pretrain_base(&samples, init, &sched, &cfg.train)?;
    archive::quantize(&mut params);
    let manifest = archive::write(&params, &out.join(BASE_ARCHIVE))?;
    write_json(&out.join("base.manifest.json"), &manifest)?;
    write_json(
        &out.join("base.json"),
        &BaseRecord {
            config: params.config,
            config_sha256: cfg.digest(),
            archive_sha256: manifest.sha256.clone(),
        },
    )?;
    write_curve(&out.join("base_loss.csv"), &curve)?;
    let last = curve.last().map_or(f64::NAN, |p| p.loss);
    Ok(format!(
        "pretrain: {} steps on {} clips, final loss {last:.5}, {} params",
        curve.len(),
        samples.len(),
        manifest.num_params
    ))
}

/// Loads the base checkpoint from the configured checkpoint directory.
pub fn load_base(cfg: &RunConfig) -> CliResult<(BaseParams, String)> {
    let dir = &cfg.paths.ckpt_dir;
    let path = dir.join(BASE_ARCHIVE);
    if !path.exists() {
        return Err(CliError::Missing(format!(
            "no base checkpoint at {} (run pretrain)",
            path.display()
        )));
    }
    let record: BaseRecord = read_json(&dir.join("base.json"))?;
    if record.config != cfg.base_config() {
        return Err(CliError::Config(
            "base checkpoint was trained with a different model config".into(),
        ));
    }
    let mut base = BaseParams::init(record.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    archive::read_into(&mut base, &path)?;
    let sha = archive::sha256_hex(&archive::to_bytes(&base));
    if sha != record.archive_sha256 {
        return Err(CliError::Format(
            "base archive does not match its record".into(),
        ));
    }
    Ok((base, sha))
}

fn fit_adapter(
    cfg: &RunConfig,
    base: &BaseParams,
    samples: &[TrainSample],
    layout: Layout,
) -> CliResult<(NetworkSpec, TrainOutcome<VCtrlParams>)> {
    let spec = cfg.network_spec(layout)?;
    let tc = cfg.control_train();
    let init = VCtrlParams::init(
        cfg.adapter_config(&spec),
        &mut ChaCha8Rng::seed_from_u64(tc.seed),
    )?;
    let mut outcome = train_vctrl(samples, base, &spec, init, &cfg.schedule()?, tc)?;
    archive::quantize(&mut outcome.params);
    Ok((spec, outcome))
}

fn train_control(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let (base, base_sha) = load_base(cfg)?;
    let split = load_split(cfg)?;
    let samples = train_samples(cfg, &split.train, true)?;
    let (spec, TrainOutcome { params, curve }) =
        fit_adapter(cfg, &base, &samples, cfg.model.layout)?;
    if archive::sha256_hex(&archive::to_bytes(&base)) != base_sha {
        return Err(CliError::Format(
            "base parameters changed during adapter training".into(),
        ));
    }
    let manifest = archive::write(&params, &out.join(ADAPTER_ARCHIVE))?;
    write_json(&out.join("adapter.manifest.json"), &manifest)?;
    write_json(
        &out.join("adapter.spec.json"),
        &SpecRecord {
            d_c: params.config.width,
            spec: spec.clone(),
        },
    )?;
    write_json(
        &out.join("adapter.json"),
        &AdapterRecord {
            config: params.config,
            base_sha256: base_sha,
            config_sha256: cfg.digest(),
            archive_sha256: manifest.sha256.clone(),
        },
    )?;
    write_curve(&out.join("control_loss.csv"), &curve)?;
    let last = curve.last().map_or(f64::NAN, |p| p.loss);
    Ok(format!(
        "train-control: {} layout, indices {:?}, {} steps, final loss {last:.5}",
        spec.layout.name(),
        spec.indices,
        curve.len()
    ))
}

pub fn load_adapter(
    cfg: &RunConfig,
    base: &BaseParams,
    base_sha: &str,
) -> CliResult<(VCtrlParams, NetworkSpec)> {
    let dir = &cfg.paths.ckpt_dir;
    let path = dir.join(ADAPTER_ARCHIVE);
    if !path.exists() {
        return Err(CliError::Missing(format!(
            "no adapter checkpoint at {} (run train-control)",
            path.display()
        )));
    }
    let record: AdapterRecord = read_json(&dir.join("adapter.json"))?;
    let spec: SpecRecord = read_json(&dir.join("adapter.spec.json"))?;
    if record.base_sha256 != base_sha {
        return Err(CliError::Config(
            "adapter was trained against a different base checkpoint".into(),
        ));
    }
    spec.spec.validate()?;
    let mut adapter = VCtrlParams::init(record.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    archive::read_into(&mut adapter, &path)?;
    if spec.spec.m != base.blocks.len() {
        return Err(CliError::Config(
            "adapter spec does not match the base depth".into(),
        ));
    }
    Ok((adapter, spec.spec))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub dir: String,
    pub source_clip: String,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub config_sha256: String,
    pub base_sha256: String,
    pub samples: Vec<SampleEntry>,
}

/// Generates one controlled sample per clip, seeded `seed + i`.
fn generate(
    cfg: &RunConfig,
    model: &ControlledModel,
    clips: &[(String, StoredClip)],
    seed: u64,
) -> CliResult<Vec<VideoTensor>> {
    let sched = cfg.schedule()?;
    clips
        .iter()
        .enumerate()
        .map(|(i, (_, c))| {
            let b = bundle(cfg, c)?;
            let shape = encode(&c.video, cfg.patch())?.shape();
            let z = sample(
                model,
                &sched,
                shape,
                c.meta.caption_class,
                Some(&b),
                seed + i as u64,
            )?;
            Ok(decode(&z)?)
        })
        .collect()
}

fn sample_cmd(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let (base, base_sha) = load_base(cfg)?;
    let (adapter, spec) = load_adapter(cfg, &base, &base_sha)?;
    let split = load_split(cfg)?;
    let clips: Vec<_> = split
        .eval_clips()
        .iter()
        .take(cfg.sample.count)
        .cloned()
        .collect();
    let model = ControlledModel::new(&base, &adapter, &spec);
    let videos = generate(cfg, &model, &clips, cfg.sample.seed)?;
    let root = out.join("samples");
    create_dir(&root)?;
    let mut entries = Vec::new();
    for (i, ((name, _), v)) in clips.iter().zip(&videos).enumerate() {
        let dir = root.join(clip_dir_name(i));
        create_dir(&dir)?;
        let bytes = Container::from_video(v, TensorKind::Generated).to_bytes();
        let path = dir.join("video.vclt");
        fs::write(&path, &bytes).map_err(|e| CliError::io(&path, e))?;
        entries.push(SampleEntry {
            dir: clip_dir_name(i),
            source_clip: name.clone(),
            seed: cfg.sample.seed + i as u64,
            sha256: archive::sha256_hex(&bytes),
        });
    }
    write_json(
        &root.join(MANIFEST),
        &SampleManifest {
            config_sha256: cfg.digest(),
            base_sha256: base_sha,
            samples: entries,
        },
    )?;
    Ok(format!(
        "sample: wrote {} videos to {}",
        videos.len(),
        root.display()
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub sample: String,
    pub source_clip: String,
    pub reports: Vec<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_sha256: String,
    /// per metric: mean over clips; `per_frame` holds the per-clip scores.
    /// Metrics no clip could be scored on are left out.
    pub summary: Vec<MetricReport>,
    pub frechet: MetricReport,
    pub clips: Vec<ClipMetrics>,
}

/// Mean over the clips that could be scored; `None` when none could.
fn summarize(name: &str, scores: Vec<f64>, skipped: usize) -> Option<MetricReport> {
    if scores.is_empty() {
        return None;
    }
    let score = scores.iter().sum::<f64>() / scores.len() as f64;
    let mut params = std::collections::BTreeMap::new();
    params.insert(
        "aggregation".into(),
        ParamValue::Text("mean_over_clips".into()),
    );
    params.insert("clips".into(), ParamValue::Int(scores.len() as i64));
    let flags = if skipped > 0 {
        vec![format!("skipped_clips:{skipped}")]
    } else {
        Vec::new()
    };
    Some(MetricReport {
        name: name.into(),
        score,
        per_frame: scores,
        params,
        flags,
    })
}

fn evaluate(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let root = cfg.paths.report_dir.join("samples");
    let manifest_path = root.join(MANIFEST);
    if !manifest_path.exists() {
        return Err(CliError::Missing(format!(
            "no samples at {} (run sample)",
            root.display()
        )));
    }
    let samples: SampleManifest = read_json(&manifest_path)?;
    let (ds, _) = load_dataset(&cfg.paths.dataset_dir)?;
    let [low, high, sigma] = ds.canny;
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    let mut per_clip = Vec::new();
    let (mut cm, mut ms, mut pose) = (Vec::new(), Vec::new(), Vec::new());
    let (mut ms_skipped, mut pose_skipped) = (0, 0);
    for e in &samples.samples {
        let dir = root.join(&e.dir);
        let pred = Container::read(&dir.join("video.vclt"))?.to_video()?;
        let gt = crate::dataset::read_clip(&cfg.paths.dataset_dir.join(&e.source_clip))?;
        if (pred.frames, pred.height, pred.width)
            != (gt.video.frames, gt.video.height, gt.video.width)
        {
            return Err(CliError::Format(format!(
                "{}: sample dims differ from {}",
                e.dir, e.source_clip
            )));
        }
        let mut reports = Vec::new();
        let edges = canny_video(&pred, low, high, sigma)?;
        let r = canny_matching(&edges, &gt.edges)?;
        cm.push(r.score);
        reports.push(r);
        match ms_consistency(&pred, &gt.video, &gt.masks) {
            Ok(r) => {
                ms.push(r.score);
                reports.push(r);
            }
            Err(CoreError::DegenerateMask { .. }) => ms_skipped += 1,
            Err(e) => return Err(e.into()),
        }
        let kp_path = dir.join("keypoints.json");
        let pred_kp: Option<Vec<KeypointFrame>> = if kp_path.exists() {
            read_json(&kp_path)?
        } else {
            None
        };
        match (pred_kp, &gt.keypoints) {
            (Some(p), Some(g)) => match pose_similarity(&p, g, &COCO_SIGMAS) {
                Ok(r) => {
                    pose.push(r.score);
                    reports.push(r);
                }
                Err(CoreError::DegenerateFrame { .. }) => pose_skipped += 1,
                Err(e) => return Err(e.into()),
            },
            _ => pose_skipped += 1,
        }
        per_clip.push(ClipMetrics {
            sample: e.dir.clone(),
            source_clip: e.source_clip.clone(),
            reports,
        });
        preds.push(pred);
        gts.push(gt.video);
    }
    if preds.is_empty() {
        return Err(CliError::Missing("sample manifest lists no videos".into()));
    }
    let frechet = video_frechet(&ToyVideoFeatures, &preds, &gts)?;
    let report = EvaluationReport {
        config_sha256: cfg.digest(),
        summary: [
            summarize("canny_matching", cm, 0),
            summarize("ms_consistency", ms, ms_skipped),
            summarize("pose_similarity", pose, pose_skipped),
        ]
        .into_iter()
        .flatten()
        .collect(),
        frechet,
        clips: per_clip,
    };
    write_json(&out.join("metrics.json"), &report)?;
    let scores: Vec<String> = report
        .summary
        .iter()
        .map(|r| format!("{} {:.4}", r.name, r.score))
        .collect();
    Ok(format!(
        "evaluate: {} clips, {}, frechet {:.5}",
        preds.len(),
        scores.join(", "),
        report.frechet.score
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub layout: Layout,
    #[serde(rename = "N")]
    pub n: usize,
    pub indices: Vec<usize>,
    pub adapter_params: usize,
    pub final_loss: f64,
    pub canny_matching: f64,
    pub frechet_toy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_sha256: String,
    pub steps: usize,
    pub seed: u64,
    pub samples: usize,
    pub rows: Vec<AblationRow>,
}

fn ablate_layout(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let (base, _) = load_base(cfg)?;
    let split = load_split(cfg)?;
    let samples = train_samples(cfg, &split.train, true)?;
    let clips: Vec<_> = split
        .eval_clips()
        .iter()
        .take(cfg.sample.count)
        .cloned()
        .collect();
    let gts: Vec<VideoTensor> = clips.iter().map(|(_, c)| c.video.clone()).collect();
    let [low, high, sigma] = split.canny;
    let mut rows = Vec::new();
    for layout in Layout::ALL {
        let (spec, outcome) = fit_adapter(cfg, &base, &samples, layout)?;
        write_curve(
            &out.join(format!("ablation_{}_loss.csv", layout.name())),
            &outcome.curve,
        )?;
        let model = ControlledModel::new(&base, &outcome.params, &spec);
        let videos = generate(cfg, &model, &clips, cfg.sample.seed)?;
        let mut cm = 0.0;
        for (v, (_, c)) in videos.iter().zip(&clips) {
            cm += canny_matching(&canny_video(v, low, high, sigma)?, &c.edges)?.score;
        }
        rows.push(AblationRow {
            layout,
            n: spec.n,
            indices: spec.indices.clone(),
            adapter_params: vctrl_core::ParamSet::num_params(&outcome.params),
            final_loss: outcome.curve.last().map_or(f64::NAN, |p| p.loss),
            canny_matching: cm / clips.len() as f64,
            frechet_toy: video_frechet(&ToyVideoFeatures, &videos, &gts)?.score,
        });
    }
    let report = AblationReport {
        config_sha256: cfg.digest(),
        steps: cfg.control_train().steps,
        seed: cfg.control_train().seed,
        samples: clips.len(),
        rows,
    };
    write_json(&out.join("ablation.json"), &report)?;
    let path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Format(e.to_string()))?;
    let err = |e: csv::Error| CliError::Format(e.to_string());
    w.write_record([
        "layout",
        "N",
        "indices",
        "final_loss",
        "canny_matching",
        "frechet_toy",
    ])
    .map_err(err)?;
    for r in &report.rows {
        let idx: Vec<String> = r.indices.iter().map(|i| i.to_string()).collect();
        w.write_record([
            r.layout.name().to_string(),
            r.n.to_string(),
            idx.join(" "),
            r.final_loss.to_string(),
            r.canny_matching.to_string(),
            r.frechet_toy.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    let line: Vec<String> = report
        .rows
        .iter()
        .map(|r| {
            format!(
                "{} cm={:.4} fd={:.5}",
                r.layout.name(),
                r.canny_matching,
                r.frechet_toy
            )
        })
        .collect();
    Ok(format!("ablate-layout: {}", line.join(", ")))
}
