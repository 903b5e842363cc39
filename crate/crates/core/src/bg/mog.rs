//! Adaptive Gaussian mixture background model with a per-pixel component
//! count. Components whose weight decays to zero under the complexity prior
//! are dropped, so each pixel keeps only as many modes as its history needs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gvid::Frame;

use super::{Encoding, ResidualFrame};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MogParams {
    /// Maximum components per pixel.
    pub k: usize,
    /// Learning rate.
    pub alpha: f64,
    /// Complexity-reduction prior.
    pub c_t: f64,
    /// Weight fraction treated as background.
    pub t_b: f64,
    /// Match distance in standard deviations.
    pub d: f64,
    pub var_init: f64,
    pub var_min: f64,
}

impl Default for MogParams {
    fn default() -> Self {
        Self {
            k: 5,
            alpha: 0.005,
            c_t: 0.01,
            t_b: 0.9,
            d: 3.0,
            var_init: 225.0,
            var_min: 4.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Component {
    weight: f64,
    mean: f64,
    var: f64,
}

#[derive(Clone, Debug)]
pub struct MogState {
    pub params: MogParams,
    width: usize,
    height: usize,
    comps: Vec<Component>,
    counts: Vec<u8>,
}

impl MogState {
    pub fn new(width: usize, height: usize, params: MogParams) -> Result<Self> {
        if params.k == 0 || params.k > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!("mixture size {} out of range", params.k)));
        }
        if !(params.alpha > 0.0 && params.alpha < 1.0) {
            return Err(Error::InvalidArgument("alpha must lie in (0, 1)".into()));
        }
        Ok(Self {
            params,
            width,
            height,
            comps: vec![Component::default(); width * height * params.k],
            counts: vec![0; width * height],
        })
    }

    pub fn component_count(&self, pixel: usize) -> usize {
        self.counts[pixel] as usize
    }

    /// Weights of the live components at `pixel`.
    pub fn weights(&self, pixel: usize) -> Vec<f64> {
        let k = self.params.k;
        self.comps[pixel * k..pixel * k + self.counts[pixel] as usize]
            .iter()
            .map(|c| c.weight)
            .collect()
    }

    /// Updates the model with `frame` and returns its foreground mask
    /// (255 = foreground).
    pub fn update_and_subtract(&mut self, frame: &Frame) -> Result<ResidualFrame> {
        if frame.width != self.width || frame.height != self.height {
            return Err(Error::Shape("frame size differs from model".into()));
        }
        let p = self.params;
        let k = p.k;
        let mut values = Vec::with_capacity(frame.pixels.len());
        for (i, &px) in frame.pixels.iter().enumerate() {
            let comps = &mut self.comps[i * k..(i + 1) * k];
            let fg = update_pixel(comps, &mut self.counts[i], px as f64, &p);
            values.push(if fg { 255 } else { 0 });
        }
        Ok(ResidualFrame {
            width: frame.width,
            height: frame.height,
            values,
            encoding: Encoding::BinaryMask,
        })
    }
}

/// Returns true if `x` is foreground after the update. A value that matches
/// no existing component is always foreground.
fn update_pixel(comps: &mut [Component], count: &mut u8, x: f64, p: &MogParams) -> bool {
    let n = *count as usize;
    let mut matched: Option<usize> = None;
    let mut best = f64::INFINITY;
    for (m, c) in comps[..n].iter().enumerate() {
        let z = (x - c.mean).abs() / c.var.sqrt();
        if z <= p.d && z < best {
            best = z;
            matched = Some(m);
        }
    }

    for (m, c) in comps[..n].iter_mut().enumerate() {
        let o = if Some(m) == matched { 1.0 } else { 0.0 };
        c.weight += p.alpha * (o - c.weight) - p.alpha * p.c_t;
    }
    if let Some(m) = matched {
        let c = &mut comps[m];
        if c.weight > 0.0 {
            let rho = (p.alpha / c.weight).min(1.0);
            let diff = x - c.mean;
            c.mean += rho * diff;
            c.var = (c.var + rho * (diff * diff - c.var)).max(p.var_min);
        }
    }

    // Drop components whose weight reached zero, tracking the match.
    let mut live = 0;
    let mut target = None;
    for m in 0..n {
        if comps[m].weight > 0.0 {
            if Some(m) == matched {
                target = Some(live);
            }
            comps[live] = comps[m];
            live += 1;
        }
    }
    let mut n = live;
    let foreground_by_novelty = target.is_none();
    if target.is_none() {
        let fresh = Component {
            weight: p.alpha,
            mean: x,
            var: p.var_init,
        };
        let slot = if n < comps.len() {
            n += 1;
            n - 1
        } else {
            (0..n)
                .min_by(|&a, &b| comps[a].weight.total_cmp(&comps[b].weight))
                .unwrap()
        };
        comps[slot] = fresh;
        target = Some(slot);
    }
    let mut target = target.unwrap();

    let total: f64 = comps[..n].iter().map(|c| c.weight).sum();
    for c in &mut comps[..n] {
        c.weight /= total;
    }
    // Insertion sort by descending weight so the background set is a prefix.
    for i in 1..n {
        let mut j = i;
        while j > 0 && comps[j].weight > comps[j - 1].weight {
            comps.swap(j, j - 1);
            if target == j {
                target = j - 1;
            } else if target == j - 1 {
                target = j;
            }
            j -= 1;
        }
    }
    *count = n as u8;

    if foreground_by_novelty {
        return true;
    }
    let before: f64 = comps[..target].iter().map(|c| c.weight).sum();
    before >= p.t_b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn noisy_static(r: &mut Rng, base: &[u8], sigma: f64, idx: u32) -> Frame {
        let pixels = base
            .iter()
            .map(|&b| (b as f64 + sigma * r.normal()).round().clamp(0.0, 255.0) as u8)
            .collect();
        Frame::new(8, 6, pixels, idx).unwrap()
    }

    #[test]
    fn static_scene_becomes_background() {
        let mut r = Rng::new(2);
        let base: Vec<u8> = (0..48).map(|_| r.below(200) as u8 + 20).collect();
        let mut st = MogState::new(8, 6, MogParams::default()).unwrap();
        let horizon = (2.0 / st.params.alpha) as u32;
        let mut last = None;
        for t in 0..horizon {
            let f = noisy_static(&mut r, &base, 2.0, t);
            last = Some(st.update_and_subtract(&f).unwrap());
            for i in 0..48 {
                let s: f64 = st.weights(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!((1..=5).contains(&st.component_count(i)));
            }
        }
        assert!(last.unwrap().values.iter().all(|&v| v == 0));
    }

    #[test]
    fn novel_object_is_foreground() {
        let mut st = MogState::new(8, 6, MogParams::default()).unwrap();
        let base = Frame::filled(8, 6, 60, 0);
        for _ in 0..50 {
            st.update_and_subtract(&base).unwrap();
        }
        let mut obj = base.clone();
        obj.pixels[10] = 250;
        let mask = st.update_and_subtract(&obj).unwrap();
        assert_eq!(mask.values[10], 255);
        assert_eq!(mask.values.iter().filter(|&&v| v == 255).count(), 1);
        assert_eq!(mask.encoding, Encoding::BinaryMask);
    }

    #[test]
    fn persistent_change_is_absorbed() {
        let p = MogParams::default();
        let mut st = MogState::new(8, 6, p).unwrap();
        let before = Frame::filled(8, 6, 60, 0);
        let after = Frame::filled(8, 6, 160, 0);
        for _ in 0..400 {
            st.update_and_subtract(&before).unwrap();
        }
        let first = st.update_and_subtract(&after).unwrap();
        assert!(first.values.iter().all(|&v| v == 255));
        let mut flipped_at = None;
        for t in 1..(5.0 / p.alpha) as usize {
            let m = st.update_and_subtract(&after).unwrap();
            if m.values.iter().all(|&v| v == 0) {
                flipped_at = Some(t);
                break;
            }
        }
        let t = flipped_at.expect("step change never absorbed");
        assert!(t > 1, "absorbed immediately");
    }

    #[test]
    fn component_cap_respected() {
        let p = MogParams {
            k: 3,
            ..MogParams::default()
        };
        let mut st = MogState::new(8, 6, p).unwrap();
        for t in 0..40u32 {
            let v = ((t * 47) % 256) as u8;
            st.update_and_subtract(&Frame::filled(8, 6, v, t)).unwrap();
            for i in 0..48 {
                assert!(st.component_count(i) <= 3);
                let s: f64 = st.weights(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
