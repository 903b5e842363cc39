use crate::error::{Error, Result};
use crate::gvid::Frame;

use super::{Encoding, ResidualFrame};

/// Per-pixel mean of a leak-free reference segment.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedBackground {
    pub width: usize,
    pub height: usize,
    pub mean_image: Vec<f64>,
}

pub fn fit_fixed_background(class0_frames: &[Frame]) -> Result<FixedBackground> {
    let first = class0_frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("fixed background needs at least one frame".into()))?;
    let mut sums = vec![0u64; first.pixels.len()];
    for f in class0_frames {
        if !f.same_dims(first) {
            return Err(Error::Shape(format!("frame {} differs in size", f.index)));
        }
        for (s, &p) in sums.iter_mut().zip(&f.pixels) {
            *s += p as u64;
        }
    }
    let n = class0_frames.len() as f64;
    Ok(FixedBackground {
        width: first.width,
        height: first.height,
        mean_image: sums.into_iter().map(|s| s as f64 / n).collect(),
    })
}

/// `clamp(round(frame - mean) + 128, 0, 255)`, rounding half away from zero.
pub fn subtract_fixed(frame: &Frame, bg: &FixedBackground) -> Result<ResidualFrame> {
    if frame.width != bg.width || frame.height != bg.height {
        return Err(Error::Shape(format!(
            "frame {}x{} vs background {}x{}",
            frame.width, frame.height, bg.width, bg.height
        )));
    }
    let values = frame
        .pixels
        .iter()
        .zip(&bg.mean_image)
        .map(|(&p, &m)| offset128((p as f64 - m).round()))
        .collect();
    Ok(ResidualFrame {
        width: frame.width,
        height: frame.height,
        values,
        encoding: Encoding::SignedOffset128,
    })
}

#[inline]
pub(crate) fn offset128(diff: f64) -> u8 {
    (diff + 128.0).clamp(0.0, 255.0) as u8
}
