use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::gvid::Frame;

use super::fixed::offset128;
use super::{Encoding, ResidualFrame};

pub const DEFAULT_WINDOW: usize = 210;

/// Rank of the reported median inside a sorted window of `w` values: the
/// middle for odd `w`, the lower of the two middle values for even `w`.
#[inline]
pub fn median_rank(w: usize) -> usize {
    (w - 1) / 2
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MedianBackground {
    /// Fewer than `window` earlier frames exist.
    Warmup,
    Ready(Vec<u8>),
}

/// Per-pixel median of frames `t - window .. t`. Direct evaluation; see
/// [`MovingMedian`] for streaming use.
pub fn moving_median_background(stream: &[Frame], t: usize, window: usize) -> Result<MedianBackground> {
    if window == 0 {
        return Err(Error::InvalidArgument("median window must be >= 1".into()));
    }
    if t < window {
        return Ok(MedianBackground::Warmup);
    }
    if t > stream.len() {
        return Err(Error::InvalidArgument(format!("t={t} beyond {} frames", stream.len())));
    }
    let past = &stream[t - window..t];
    let area = past[0].pixels.len();
    let k = median_rank(window);
    let mut column = vec![0u8; window];
    let mut out = Vec::with_capacity(area);
    for p in 0..area {
        for (c, f) in column.iter_mut().zip(past) {
            *c = f.pixels[p];
        }
        out.push(*column.select_nth_unstable(k).1);
    }
    Ok(MedianBackground::Ready(out))
}

/// Streaming moving median with per-pixel 256-bin histograms. Each pixel
/// keeps its current median and the count of window values below it, so an
/// update moves the median by a few bins instead of re-sorting.
#[derive(Clone, Debug)]
pub struct MovingMedian {
    width: usize,
    height: usize,
    window: usize,
    frames: VecDeque<Vec<u8>>,
    hist: Vec<u16>,
    median: Vec<u8>,
    below: Vec<u16>,
}

impl MovingMedian {
    pub fn new(width: usize, height: usize, window: usize) -> Result<Self> {
        if window == 0 || window > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("median window {window} out of range")));
        }
        let area = width * height;
        Ok(Self {
            width,
            height,
            window,
            frames: VecDeque::with_capacity(window + 1),
            hist: vec![0; area * 256],
            median: vec![0; area],
            below: vec![0; area],
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Returns the background for `frame` (built only from earlier frames),
    /// then adds `frame` to the window.
    pub fn next(&mut self, frame: &Frame) -> Result<MedianBackground> {
        if frame.width != self.width || frame.height != self.height {
            return Err(Error::Shape("frame size differs from stream".into()));
        }
        let out = if self.frames.len() == self.window {
            MedianBackground::Ready(self.median.clone())
        } else {
            MedianBackground::Warmup
        };
        self.push(&frame.pixels);
        Ok(out)
    }

    fn push(&mut self, pixels: &[u8]) {
        let evicted = if self.frames.len() == self.window {
            self.frames.pop_front()
        } else {
            None
        };
        let k = median_rank(self.window) as u16;
        let full = self.frames.len() + 1 == self.window;
        for p in 0..pixels.len() {
            let h = &mut self.hist[p * 256..(p + 1) * 256];
            let v = pixels[p];
            h[v as usize] += 1;
            let mut m = self.median[p];
            let mut below = self.below[p];
            if v < m {
                below += 1;
            }
            if let Some(old) = &evicted {
                let u = old[p];
                h[u as usize] -= 1;
                if u < m {
                    below -= 1;
                }
            }
            if full || evicted.is_some() {
                // Restore below <= k < below + h[m].
                while below > k {
                    m -= 1;
                    below -= h[m as usize];
                }
                while below + h[m as usize] <= k {
                    below += h[m as usize];
                    m += 1;
                }
            }
            self.median[p] = m;
            self.below[p] = below;
        }
        self.frames.push_back(pixels.to_vec());
    }
}

pub fn subtract_moving(frame: &Frame, background: &[u8]) -> Result<ResidualFrame> {
    if frame.pixels.len() != background.len() {
        return Err(Error::Shape(format!(
            "frame has {} pixels, background {}",
            frame.pixels.len(),
            background.len()
        )));
    }
    let values = frame
        .pixels
        .iter()
        .zip(background)
        .map(|(&p, &b)| offset128(p as f64 - b as f64))
        .collect();
    Ok(ResidualFrame {
        width: frame.width,
        height: frame.height,
        values,
        encoding: Encoding::SignedOffset128,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sorted_oracle(stream: &[Frame], t: usize, w: usize) -> Vec<u8> {
        (0..stream[0].pixels.len())
            .map(|p| {
                let mut col: Vec<u8> = stream[t - w..t].iter().map(|f| f.pixels[p]).collect();
                col.sort();
                col[w / 2 - (1 - w % 2)]
            })
            .collect()
    }

    fn random_stream(n: usize, seed: u64) -> Vec<Frame> {
        let mut r = Rng::new(seed);
        (0..n)
            .map(|i| Frame::new(5, 4, (0..20).map(|_| r.below(256) as u8).collect(), i as u32).unwrap())
            .collect()
    }

    #[test]
    fn constant_stream() {
        let s: Vec<Frame> = (0..211).map(|i| Frame::filled(4, 3, 7, i)).collect();
        assert_eq!(
            moving_median_background(&s, 210, 210).unwrap(),
            MedianBackground::Ready(vec![7; 12])
        );
    }

    #[test]
    fn spike_rejected() {
        let mut s: Vec<Frame> = (0..211).map(|i| Frame::filled(2, 2, 0, i)).collect();
        s[57] = Frame::filled(2, 2, 255, 57);
        assert_eq!(
            moving_median_background(&s, 210, 210).unwrap(),
            MedianBackground::Ready(vec![0; 4])
        );
    }

    #[test]
    fn warmup_boundary() {
        let s = random_stream(220, 1);
        assert_eq!(moving_median_background(&s, 100, 210).unwrap(), MedianBackground::Warmup);
        assert_eq!(moving_median_background(&s, 209, 210).unwrap(), MedianBackground::Warmup);
        assert!(matches!(
            moving_median_background(&s, 210, 210).unwrap(),
            MedianBackground::Ready(_)
        ));
    }

    #[test]
    fn even_window_takes_lower_middle() {
        let s: Vec<Frame> = [1u8, 9, 3, 7]
            .iter()
            .enumerate()
            .map(|(i, &v)| Frame::filled(1, 1, v, i as u32))
            .chain(std::iter::once(Frame::filled(1, 1, 0, 4)))
            .collect();
        assert_eq!(
            moving_median_background(&s, 4, 4).unwrap(),
            MedianBackground::Ready(vec![3])
        );
    }

    #[test]
    fn streaming_matches_direct() {
        for &w in &[1usize, 2, 5, 30, 210] {
            let s = random_stream(250, w as u64);
            let mut mm = MovingMedian::new(5, 4, w).unwrap();
            for t in 0..s.len() {
                let got = mm.next(&s[t]).unwrap();
                assert_eq!(got, moving_median_background(&s, t, w).unwrap(), "w={w} t={t}");
                if t >= w {
                    assert_eq!(got, MedianBackground::Ready(sorted_oracle(&s, t, w)));
                }
                assert!(mm.len() <= w);
            }
        }
    }

    #[test]
    fn causal() {
        let s = random_stream(240, 9);
        let mut poisoned = s.clone();
        poisoned[230] = Frame::filled(5, 4, 255, 230);
        assert_eq!(
            moving_median_background(&s, 230, 210).unwrap(),
            moving_median_background(&poisoned, 230, 210).unwrap()
        );
        let mut m1 = MovingMedian::new(5, 4, 210).unwrap();
        let mut m2 = MovingMedian::new(5, 4, 210).unwrap();
        for t in 0..=230 {
            let a = m1.next(&s[t]).unwrap();
            let b = m2.next(&poisoned[t]).unwrap();
            assert_eq!(a, b, "t={t}");
        }
    }

    #[test]
    fn static_scene_residual_is_zero() {
        let s: Vec<Frame> = (0..40).map(|i| Frame::filled(3, 3, 90, i)).collect();
        let mut mm = MovingMedian::new(3, 3, 30).unwrap();
        for f in &s {
            if let MedianBackground::Ready(bg) = mm.next(f).unwrap() {
                assert!(subtract_moving(f, &bg).unwrap().values.iter().all(|&v| v == 128));
            }
        }
    }
}
