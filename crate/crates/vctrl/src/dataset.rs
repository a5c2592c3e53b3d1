//! On-disk dataset: one directory per clip plus a manifest.
//!
//! ```text
//! <dataset>/manifest.json
//! <dataset>/clip_0000/{video,edges,masks}.vclt
//! <dataset>/clip_0000/keypoints.json   per-frame points/visible/bbox_area, or null
//! <dataset>/clip_0000/meta.json        caption class, source, generator parameters
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vctrl_core::extract::{ClipMeta, CropBox, KeypointFrame};
use vctrl_core::{BinaryVideo, VideoTensor};

use crate::archive::sha256_hex;
use crate::container::{Container, TensorKind};
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

/// A clip as stored on disk. Synthetic clips carry their generator metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredClip {
    pub video: VideoTensor,
    pub edges: BinaryVideo,
    pub masks: BinaryVideo,
    pub keypoints: Option<Vec<KeypointFrame>>,
    pub meta: ClipMetaFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetaFile {
    pub caption_class: usize,
    /// `synth` or `raw:<file name>`
    pub source: String,
    pub seed: Option<u64>,
    pub generator: Option<ClipMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    pub name: String,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub dir: String,
    pub source: String,
    pub caption_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// scene ranges `[start, end)` found in the source clip
    pub segments: Vec<[usize; 2]>,
    pub crop: CropBox,
    pub filters: Vec<FilterRecord>,
    /// sha256 of each stored file
    pub files: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub config_sha256: String,
    pub canny: [f64; 3],
    pub clips: Vec<ClipEntry>,
}

impl DatasetManifest {
    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(CliError::Missing(format!(
                "no dataset manifest at {}",
                path.display()
            )));
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn clip_dir_name(i: usize) -> String {
    format!("clip_{i:04}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Writes the clip files and returns `(file, sha256)` pairs in write order.
pub fn write_clip(dir: &Path, clip: &StoredClip) -> CliResult<Vec<(String, String)>> {
    create_dir(dir)?;
    let mut files = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> CliResult<()> {
        let path = dir.join(name);
        fs::write(&path, &bytes).map_err(|e| CliError::io(&path, e))?;
        files.push((name.to_string(), sha256_hex(&bytes)));
        Ok(())
    };
    put(
        "video.vclt",
        Container::from_video(&clip.video, TensorKind::Video).to_bytes(),
    )?;
    put(
        "edges.vclt",
        Container::from_binary(&clip.edges, TensorKind::Edges).to_bytes(),
    )?;
    put(
        "masks.vclt",
        Container::from_binary(&clip.masks, TensorKind::Masks).to_bytes(),
    )?;
    let mut kp = serde_json::to_string_pretty(&clip.keypoints)?;
    kp.push('\n');
    put("keypoints.json", kp.into_bytes())?;
    let mut meta = serde_json::to_string_pretty(&clip.meta)?;
    meta.push('\n');
    put("meta.json", meta.into_bytes())?;
    Ok(files)
}

pub fn read_clip(dir: &Path) -> CliResult<StoredClip> {
    let video = Container::read(&dir.join("video.vclt"))?.to_video()?;
    let edges = Container::read(&dir.join("edges.vclt"))?.to_binary()?;
    let masks = Container::read(&dir.join("masks.vclt"))?.to_binary()?;
    let keypoints: Option<Vec<KeypointFrame>> = read_json(&dir.join("keypoints.json"))?;
    let meta: ClipMetaFile = read_json(&dir.join("meta.json"))?;
    let dims = (video.frames, video.height, video.width);
    for (name, b) in [("edges", &edges), ("masks", &masks)] {
        if (b.frames, b.height, b.width) != dims {
            return Err(CliError::Format(format!(
                "{}: {name} dims differ from video",
                dir.display()
            )));
        }
    }
    Ok(StoredClip {
        video,
        edges,
        masks,
        keypoints,
        meta,
    })
}

/// Clips listed in the manifest, in manifest order, with their directories.
pub fn load_dataset(dir: &Path) -> CliResult<(DatasetManifest, Vec<(PathBuf, StoredClip)>)> {
    let manifest = DatasetManifest::read(dir)?;
    let clips = manifest
        .clips
        .iter()
        .map(|e| {
            let d = dir.join(&e.dir);
            read_clip(&d).map(|c| (d, c))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok((manifest, clips))
}
