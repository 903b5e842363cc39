//! GVID video container, leak-class table and dataset manifest.
//!
//! Container layout (all integers little-endian u32):
//!
//! ```text
//! "GVID" | version=1 | width | height | frame_count | fps_millihz | payload
//! ```
//!
//! The payload is `frame_count` frames of `width * height` bytes each,
//! row-major from the top-left pixel, with no padding or compression.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GVID";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

pub const DEFAULT_WIDTH: usize = 320;
pub const DEFAULT_HEIGHT: usize = 240;

/// Imaging distances of the reference recordings, in meters.
pub const DISTANCES_M: [f64; 5] = [4.6, 6.9, 9.8, 12.6, 15.6];

/// One 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    /// Ordinal within the containing video.
    pub index: u32,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, index: u32) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "frame {index}: {} pixels for {width}x{height}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            index,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8, index: u32) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
            index,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn same_dims(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub width: usize,
    pub height: usize,
    pub fps_millihz: u32,
}

impl VideoMeta {
    pub fn fps(&self) -> f64 {
        self.fps_millihz as f64 / 1000.0
    }
}

/// A rate with its 95% confidence half-width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub ci95: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakClass {
    pub label: u8,
    pub rate_scfh: Rate,
    pub rate_g_per_h: Rate,
}

const fn leak(label: u8, scfh: f64, scfh_ci: f64, gph: f64, gph_ci: f64) -> LeakClass {
    LeakClass {
        label,
        rate_scfh: Rate {
            value: scfh,
            ci95: scfh_ci,
        },
        rate_g_per_h: Rate {
            value: gph,
            ci95: gph_ci,
        },
    }
}

/// The eight controlled release rates. Class 0 is the near-zero reference.
pub const LEAK_CLASSES: [LeakClass; 8] = [
    leak(0, 0.3, 0.0, 5.3, 0.1),
    leak(1, 16.8, 0.1, 277.7, 1.1),
    leak(2, 43.2, 0.2, 713.1, 2.6),
    leak(3, 58.1, 0.2, 958.8, 3.1),
    leak(4, 68.1, 0.3, 1124.3, 4.3),
    leak(5, 84.2, 0.3, 1389.8, 4.8),
    leak(6, 109.5, 2.5, 1806.1, 41.4),
    leak(7, 124.3, 2.9, 2051.6, 48.0),
];

pub fn class_rate(label: u8) -> Result<LeakClass> {
    LEAK_CLASSES
        .get(label as usize)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("leak class {label} outside 0..=7")))
}

pub fn write_container(frames: &[Frame], meta: &VideoMeta) -> Result<Vec<u8>> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("container needs at least one frame".into()));
    }
    if let Some(f) = frames
        .iter()
        .find(|f| f.width != meta.width || f.height != meta.height)
    {
        return Err(Error::Shape(format!(
            "frame {} is {}x{}, container is {}x{}",
            f.index, f.width, f.height, meta.width, meta.height
        )));
    }
    let area = meta.width * meta.height;
    let mut out = Vec::with_capacity(HEADER_LEN + frames.len() * area);
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        dim_u32(meta.width)?,
        dim_u32(meta.height)?,
        dim_u32(frames.len())?,
        meta.fps_millihz,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for f in frames {
        if f.pixels.len() != area {
            return Err(Error::Shape(format!("frame {} pixel count", f.index)));
        }
        out.extend_from_slice(&f.pixels);
    }
    Ok(out)
}

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))
}

pub fn read_container(bytes: &[u8]) -> Result<(Vec<Frame>, VideoMeta)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected \"GVID\"".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("truncated header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let (width, height, count, fps_millihz) =
        (word(1) as usize, word(2) as usize, word(3) as usize, word(4));
    let area = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format("frame area overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    let needed = area
        .checked_mul(count)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    if needed > payload.len() {
        return Err(Error::Format(format!(
            "truncated payload: header declares {count} frames of {width}x{height} \
             ({needed} bytes), {} bytes present",
            payload.len()
        )));
    }
    let frames = (0..count)
        .map(|i| Frame {
            width,
            height,
            pixels: payload[i * area..(i + 1) * area].to_vec(),
            index: i as u32,
        })
        .collect();
    Ok((
        frames,
        VideoMeta {
            width,
            height,
            fps_millihz,
        },
    ))
}

pub fn save_container(path: &Path, frames: &[Frame], meta: &VideoMeta) -> Result<()> {
    let bytes = write_container(frames, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_container(path: &Path) -> Result<(Vec<Frame>, VideoMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_container(&bytes)
}

mod leak_label {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::LeakClass;

    pub fn serialize<S: Serializer>(c: &LeakClass, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(c.label)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<LeakClass, D::Error> {
        let label = u8::deserialize(d)?;
        super::class_rate(label).map_err(serde::de::Error::custom)
    }
}

/// A labeled span of frames `[start_frame, end_frame)` inside one container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSegment {
    #[serde(rename = "file")]
    pub file_id: PathBuf,
    pub equipment_id: String,
    pub distance_m: f64,
    #[serde(with = "leak_label")]
    pub leak_class: LeakClass,
    pub start_frame: u32,
    pub end_frame: u32,
    pub fps: f64,
}

impl VideoSegment {
    pub fn len(&self) -> u32 {
        self.end_frame.saturating_sub(self.start_frame)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self) -> u8 {
        self.leak_class.label
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub distances_m: Vec<f64>,
    pub equipment_ids: Vec<String>,
    #[serde(default = "default_trim_head")]
    pub trim_head_s: f64,
    #[serde(default = "default_trim_tail")]
    pub trim_tail_s: f64,
    pub segments: Vec<VideoSegment>,
}

fn default_trim_head() -> f64 {
    15.0
}

fn default_trim_tail() -> f64 {
    5.0
}

/// Two distances compare equal when they agree to a millimeter.
pub fn same_distance(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-3
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.end_frame <= seg.start_frame {
                return Err(Error::Data(format!("segment {i}: end_frame <= start_frame")));
            }
            if !self.distances_m.iter().any(|&d| same_distance(d, seg.distance_m)) {
                return Err(Error::Data(format!(
                    "segment {i}: distance {} m not declared in manifest",
                    seg.distance_m
                )));
            }
            if !self.equipment_ids.contains(&seg.equipment_id) {
                return Err(Error::Data(format!(
                    "segment {i}: equipment '{}' not declared in manifest",
                    seg.equipment_id
                )));
            }
            trim_with(seg, self.trim_head_s, self.trim_tail_s)
                .map_err(|e| Error::Data(format!("segment {i}: {e}")))?;
            for (j, other) in self.segments.iter().enumerate().skip(i + 1) {
                if other.file_id == seg.file_id
                    && other.start_frame < seg.end_frame
                    && seg.start_frame < other.end_frame
                {
                    return Err(Error::Data(format!(
                        "segments {i} and {j} overlap in {}",
                        seg.file_id.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Distinct container files in first-appearance order.
    pub fn files(&self) -> Vec<PathBuf> {
        let mut out: Vec<PathBuf> = Vec::new();
        for s in &self.segments {
            if !out.contains(&s.file_id) {
                out.push(s.file_id.clone());
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Drops the unsteady head and tail of a segment using the manifest's trim
/// durations.
pub fn trim_segment(seg: &VideoSegment, manifest: &DatasetManifest) -> Result<VideoSegment> {
    if !manifest.segments.iter().any(|s| s == seg) {
        return Err(Error::InvalidArgument(format!(
            "segment {}[{}..{}) is not part of the manifest",
            seg.file_id.display(),
            seg.start_frame,
            seg.end_frame
        )));
    }
    trim_with(seg, manifest.trim_head_s, manifest.trim_tail_s)
}

/// Trim with explicit durations (per-run override of the manifest defaults).
pub fn trim_with(seg: &VideoSegment, head_s: f64, tail_s: f64) -> Result<VideoSegment> {
    if head_s < 0.0 || tail_s < 0.0 {
        return Err(Error::InvalidArgument("negative trim".into()));
    }
    let head = (head_s * seg.fps).round() as u64;
    let tail = (tail_s * seg.fps).round() as u64;
    let start = seg.start_frame as u64 + head;
    let end = (seg.end_frame as u64).saturating_sub(tail);
    if end <= start {
        return Err(Error::Data(format!(
            "trimming {head_s} s + {tail_s} s consumes the whole {}-frame segment",
            seg.len()
        )));
    }
    Ok(VideoSegment {
        start_frame: start as u32,
        end_frame: end as u32,
        ..seg.clone()
    })
}
