//! Background subtraction: pass-through, fixed mean, moving median and an
//! adaptive Gaussian mixture.

mod fixed;
mod median;
mod mog;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Video};
use crate::error::{Error, Result};
use crate::gvid::Frame;

pub use fixed::{fit_fixed_background, subtract_fixed, FixedBackground};
pub use median::{
    median_rank, moving_median_background, subtract_moving, MedianBackground, MovingMedian,
    DEFAULT_WINDOW,
};
pub use mog::{MogParams, MogState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    /// 128 is zero residual; values are clamped to `[0, 255]`.
    SignedOffset128,
    /// 0 background, 255 foreground.
    BinaryMask,
    /// Untouched input intensities.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualFrame {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
    pub encoding: Encoding,
}

impl ResidualFrame {
    pub fn into_frame(self, index: u32) -> Frame {
        Frame {
            width: self.width,
            height: self.height,
            pixels: self.values,
            index,
        }
    }
}

pub fn passthrough(frame: &Frame) -> ResidualFrame {
    ResidualFrame {
        width: frame.width,
        height: frame.height,
        values: frame.pixels.clone(),
        encoding: Encoding::Raw,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum BgMethod {
    None,
    Fixed,
    Moving { window: usize },
    Mog(MogParams),
}

impl BgMethod {
    pub fn name(&self) -> &'static str {
        match self {
            BgMethod::None => "none",
            BgMethod::Fixed => "fixed",
            BgMethod::Moving { .. } => "moving",
            BgMethod::Mog(_) => "mog",
        }
    }

    pub fn encoding(&self) -> Encoding {
        match self {
            BgMethod::None => Encoding::Raw,
            BgMethod::Fixed | BgMethod::Moving { .. } => Encoding::SignedOffset128,
            BgMethod::Mog(_) => Encoding::BinaryMask,
        }
    }

    /// Parses `none|fixed|moving|mog`; `moving` uses `window`.
    pub fn parse(name: &str, window: usize) -> Result<Self> {
        match name {
            "none" => Ok(BgMethod::None),
            "fixed" => Ok(BgMethod::Fixed),
            "moving" => Ok(BgMethod::Moving { window }),
            "mog" => Ok(BgMethod::Mog(MogParams::default())),
            other => Err(Error::InvalidArgument(format!(
                "unknown background method '{other}' (none|fixed|moving|mog)"
            ))),
        }
    }
}

/// Preprocessing record carried by every residual corpus and every model
/// trained on one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: BgMethod,
    pub encoding: Encoding,
    /// Leading frames of each container without a valid background.
    pub warmup_frames: usize,
}

pub const SIDECAR_FILE: &str = "preprocess.json";

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualCorpus {
    /// Same manifest and files as the source; frames hold residual values.
    pub corpus: Corpus,
    pub provenance: Provenance,
}

impl ResidualCorpus {
    /// True when frame `index` of video `video` has a usable background.
    pub fn is_valid(&self, index: usize) -> bool {
        index >= self.provenance.warmup_frames
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.corpus.save(dir)?;
        let path = dir.join(SIDECAR_FILE);
        let text = serde_json::to_string_pretty(&self.provenance)?;
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SIDECAR_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            corpus: Corpus::load(dir)?,
            provenance: serde_json::from_str(&text)?,
        })
    }
}

/// Frames of the (untrimmed) class-0 segment of `video`.
fn class0_frames<'a>(corpus: &Corpus, video: &'a Video) -> Result<&'a [Frame]> {
    let seg = corpus
        .manifest
        .segments
        .iter()
        .find(|s| s.file_id == video.file && s.label() == 0)
        .ok_or_else(|| {
            Error::Data(format!(
                "fixed background needs a class-0 (non-leak) segment in {}, none found",
                video.file.display()
            ))
        })?;
    Ok(&video.frames[seg.start_frame as usize..seg.end_frame as usize])
}

/// Applies `method` to one video. Warmup frames (moving median) are emitted
/// as zero residual and flagged through the provenance.
pub fn preprocess_video(corpus: &Corpus, video: &Video, method: &BgMethod) -> Result<Video> {
    let frames = match method {
        BgMethod::None => video.frames.clone(),
        BgMethod::Fixed => {
            let bg = fit_fixed_background(class0_frames(corpus, video)?)?;
            video
                .frames
                .iter()
                .map(|f| Ok(subtract_fixed(f, &bg)?.into_frame(f.index)))
                .collect::<Result<_>>()?
        }
        BgMethod::Moving { window } => {
            let mut mm = MovingMedian::new(video.meta.width, video.meta.height, *window)?;
            let mut out = Vec::with_capacity(video.frames.len());
            for f in &video.frames {
                let r = match mm.next(f)? {
                    MedianBackground::Warmup => Frame::filled(f.width, f.height, 128, f.index),
                    MedianBackground::Ready(bg) => subtract_moving(f, &bg)?.into_frame(f.index),
                };
                out.push(r);
            }
            out
        }
        BgMethod::Mog(params) => {
            let mut st = MogState::new(video.meta.width, video.meta.height, *params)?;
            video
                .frames
                .iter()
                .map(|f| Ok(st.update_and_subtract(f)?.into_frame(f.index)))
                .collect::<Result<_>>()?
        }
    };
    Ok(Video {
        file: video.file.clone(),
        meta: video.meta,
        frames,
    })
}

pub fn preprocess_corpus(corpus: &Corpus, method: &BgMethod) -> Result<ResidualCorpus> {
    let videos = corpus
        .videos
        .par_iter()
        .map(|v| preprocess_video(corpus, v, method))
        .collect::<Result<Vec<_>>>()?;
    let warmup_frames = match method {
        BgMethod::Moving { window } => *window,
        _ => 0,
    };
    Ok(ResidualCorpus {
        corpus: Corpus::new(corpus.manifest.clone(), videos)?,
        provenance: Provenance {
            method: method.clone(),
            encoding: method.encoding(),
            warmup_frames,
        },
    })
}
