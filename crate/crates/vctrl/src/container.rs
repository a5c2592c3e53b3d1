//! `VCLT` flat tensor container.
//!
//! Layout, little endian: magic `VCLT`, `u16` version, then (version 2 only) a
//! `u16` kind tag, dims `f, h, w, ch` as `u32`, patch `p_t, p_s` as `u16`, then
//! `f·h·w·ch` row-major `f32` values. Version 1 holds latents; version 2 tags
//! dataset tensors (videos use `ch = 3`, binary maps `ch = 1`, patch `1, 1`).

use std::fs;
use std::path::Path;

use vctrl_core::{BinaryVideo, LatentTensor, PatchSpec, VideoTensor};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"VCLT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Latent = 0,
    Video = 1,
    Edges = 2,
    Masks = 3,
    Generated = 4,
}

impl TensorKind {
    fn from_tag(tag: u16) -> Option<Self> {
        [
            Self::Latent,
            Self::Video,
            Self::Edges,
            Self::Masks,
            Self::Generated,
        ]
        .into_iter()
        .find(|k| *k as u16 == tag)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: TensorKind,
    /// `f, h, w, ch`
    pub dims: [u32; 4],
    pub patch: [u16; 2],
    pub data: Vec<f32>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        if self.kind == TensorKind::Latent {
            out.extend_from_slice(&1u16.to_le_bytes());
        } else {
            out.extend_from_slice(&2u16.to_le_bytes());
            out.extend_from_slice(&(self.kind as u16).to_le_bytes());
        }
        for d in self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for p in self.patch {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        let bad = |msg: &str| CliError::Format(format!("VCLT: {msg}"));
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u16().ok_or_else(|| bad("truncated header"))?;
        let kind = match version {
            1 => TensorKind::Latent,
            2 => {
                let tag = r.u16().ok_or_else(|| bad("truncated header"))?;
                TensorKind::from_tag(tag).ok_or_else(|| bad("unknown kind tag"))?
            }
            v => return Err(bad(&format!("unsupported version {v}"))),
        };
        let mut dims = [0u32; 4];
        for d in &mut dims {
            *d = r.u32().ok_or_else(|| bad("truncated dims"))?;
        }
        let patch = [
            r.u16().ok_or_else(|| bad("truncated patch"))?,
            r.u16().ok_or_else(|| bad("truncated patch"))?,
        ];
        let n = dims.iter().map(|&d| d as usize).product::<usize>();
        let payload = r.take(4 * n).ok_or_else(|| bad("truncated payload"))?;
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            kind,
            dims,
            patch,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| CliError::io(path, e))?)
    }

    fn expect(&self, kinds: &[TensorKind], channels: Option<u32>) -> CliResult<()> {
        if !kinds.contains(&self.kind) {
            return Err(CliError::Format(format!(
                "VCLT: unexpected kind {:?}",
                self.kind
            )));
        }
        if let Some(c) = channels {
            if self.dims[3] != c {
                return Err(CliError::Format(format!(
                    "VCLT: expected {c} channels, got {}",
                    self.dims[3]
                )));
            }
        }
        Ok(())
    }

    pub fn from_latent(z: &LatentTensor) -> Self {
        Self {
            kind: TensorKind::Latent,
            dims: [z.frames, z.height, z.width, z.channels].map(|d| d as u32),
            patch: [z.patch.temporal as u16, z.patch.spatial as u16],
            data: z.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_latent(&self) -> CliResult<LatentTensor> {
        self.expect(&[TensorKind::Latent], None)?;
        let [f, h, w, c] = self.dims.map(|d| d as usize);
        let patch = PatchSpec::new(self.patch[0] as usize, self.patch[1] as usize);
        Ok(LatentTensor::from_data(f, h, w, c, patch, self.widen())?)
    }

    pub fn from_video(v: &VideoTensor, kind: TensorKind) -> Self {
        Self {
            kind,
            dims: [v.frames as u32, v.height as u32, v.width as u32, 3],
            patch: [1, 1],
            data: v.data.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_video(&self) -> CliResult<VideoTensor> {
        self.expect(&[TensorKind::Video, TensorKind::Generated], Some(3))?;
        let [f, h, w, _] = self.dims.map(|d| d as usize);
        Ok(VideoTensor::new(f, h, w, self.widen())?)
    }

    pub fn from_binary(b: &BinaryVideo, kind: TensorKind) -> Self {
        Self {
            kind,
            dims: [b.frames as u32, b.height as u32, b.width as u32, 1],
            patch: [1, 1],
            data: b.data.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_binary(&self) -> CliResult<BinaryVideo> {
        self.expect(&[TensorKind::Edges, TensorKind::Masks], Some(1))?;
        let [f, h, w, _] = self.dims.map(|d| d as usize);
        let mut b = BinaryVideo::zeros(f, h, w);
        for (dst, &v) in b.data.iter_mut().zip(&self.data) {
            *dst = match v {
                0.0 => 0,
                1.0 => 1,
                _ => {
                    return Err(CliError::Format(
                        "VCLT: binary map holds a non-binary value".into(),
                    ))
                }
            };
        }
        Ok(b)
    }

    fn widen(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    pub fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}
