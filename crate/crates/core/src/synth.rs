//! Synthetic plume videos with the structure of a multi-distance,
//! multi-rate leak campaign.
//!
//! A frame is composed from four layers, clamped to `[0, 255]`:
//!
//! * a static scene (sky/ground texture plus an equipment silhouette),
//! * drifting clouds behind the equipment, a rigid translation over time,
//! * a plume made of Gaussian puffs emitted at the leak origin that drift
//!   with a gusty, meandering wind and spread as they age,
//! * a global gain wobble and per-pixel sensor noise.
//!
//! Distance enters only through an apparent scale (`reference / distance`)
//! applied to scene geometry and plume size, and a power-law attenuation of
//! plume contrast.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Video};
use crate::error::{Error, Result};
use crate::gvid::{DatasetManifest, Frame, LeakClass, VideoMeta, VideoSegment, LEAK_CLASSES};
use crate::rng::{mix, Rng};

/// Geometry below is authored for 320-pixel-wide frames and rescaled.
const AUTHORED_WIDTH: f64 = 320.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub equipment_id: String,
    pub width: usize,
    pub height: usize,
    pub background_texture_seed: u64,
    /// (x, y) in pixels.
    pub leak_origin: (f64, f64),
    /// True where the equipment silhouette occludes the sky.
    pub structure_mask: Vec<bool>,
    structure_level: f64,
    horizon: f64,
}

impl SceneSpec {
    /// Builds an equipment scene. `layout_seed` fixes the silhouette and leak
    /// position, `texture_seed` the background; `apparent_scale` shrinks the
    /// equipment for longer imaging distances.
    pub fn generate(
        equipment_id: &str,
        width: usize,
        height: usize,
        layout_seed: u64,
        texture_seed: u64,
        apparent_scale: f64,
    ) -> Self {
        let mut r = Rng::new(layout_seed);
        let w = width as f64;
        let h = height as f64;
        let s = apparent_scale;
        let horizon = h * r.uniform_range(0.60, 0.64);

        // Horizontal separator vessel resting slightly above the horizon,
        // two support legs, one riser pipe.
        let cx = w * (0.5 + r.uniform_range(-0.03, 0.03));
        let tank_w = w * r.uniform_range(0.30, 0.40) * s;
        let tank_h = h * r.uniform_range(0.10, 0.14) * s;
        let cy = horizon - tank_h * 0.2;
        let leg_h = h * 0.10 * s;
        let pipe_x = cx + tank_w * r.uniform_range(-0.35, 0.35);
        let pipe_h = tank_h * r.uniform_range(1.2, 2.0);
        let pipe_w = (w * 0.015 * s).max(1.0);
        let leak_dx = tank_w * r.uniform_range(-0.08, 0.08);

        let mut mask = vec![false; width * height];
        for y in 0..height {
            for x in 0..width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                // Capsule-shaped vessel.
                let half_len = (tank_w - tank_h).max(0.0) / 2.0;
                let dx = ((px - cx).abs() - half_len).max(0.0);
                let dy = py - cy;
                let in_tank = dx * dx + dy * dy <= (tank_h / 2.0) * (tank_h / 2.0);
                let in_leg = [cx - tank_w * 0.3, cx + tank_w * 0.3]
                    .iter()
                    .any(|&lx| (px - lx).abs() <= pipe_w && py >= cy && py <= cy + tank_h / 2.0 + leg_h);
                let in_pipe =
                    (px - pipe_x).abs() <= pipe_w / 2.0 && py <= cy && py >= cy - tank_h / 2.0 - pipe_h;
                mask[y * width + x] = in_tank || in_leg || in_pipe;
            }
        }
        let leak_origin = (
            (cx + leak_dx).clamp(0.0, w - 1.0),
            (cy - tank_h / 2.0).clamp(0.0, h - 1.0),
        );
        Self {
            equipment_id: equipment_id.to_string(),
            width,
            height,
            background_texture_seed: texture_seed,
            leak_origin,
            structure_mask: mask,
            structure_level: r.uniform_range(135.0, 160.0),
            horizon,
        }
    }

    /// Static background composite (texture plus silhouette), real-valued.
    pub fn background(&self) -> Vec<f64> {
        let mut r = Rng::new(self.background_texture_seed);
        let res = self.width as f64 / AUTHORED_WIDTH;
        let waves: Vec<(f64, f64, f64, f64)> = (0..10)
            .map(|_| {
                let wavelength = r.uniform_range(25.0, 110.0) * res;
                let theta = r.uniform_range(0.0, std::f64::consts::TAU);
                let k = std::f64::consts::TAU / wavelength;
                (k * theta.cos(), k * theta.sin(), r.uniform_range(0.0, std::f64::consts::TAU), r.uniform_range(1.0, 3.5))
            })
            .collect();
        let sky_base = r.uniform_range(55.0, 75.0);
        let ground_base = r.uniform_range(100.0, 120.0);
        let mut out = vec![0.0; self.width * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                let (px, py) = (x as f64, y as f64);
                let texture: f64 = waves.iter().map(|&(kx, ky, ph, a)| a * (kx * px + ky * py + ph).sin()).sum();
                let i = y * self.width + x;
                out[i] = if self.structure_mask[i] {
                    self.structure_level + 0.6 * texture
                } else if py < self.horizon {
                    sky_base + 18.0 * py / self.horizon + 0.5 * texture
                } else {
                    ground_base + texture
                };
            }
        }
        out
    }

    pub fn background_frame(&self) -> Frame {
        let pixels = self.background().iter().map(|&v| quantize(v)).collect();
        Frame {
            width: self.width,
            height: self.height,
            pixels,
            index: 0,
        }
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Class/distance to appearance mapping shared by a whole dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlumeModel {
    /// Contrast of the largest class at the reference distance (intensity units).
    pub peak_contrast: f64,
    pub reference_distance_m: f64,
    pub distance_exponent: f64,
    /// Dark plume instead of bright.
    pub absorptive: bool,
    /// Optional per-class relative contrast in `[0, 1]`, overriding the
    /// square-root rate law.
    pub contrast_table: Option<Vec<f64>>,
    pub emission_rate: f64,
    /// Authored-resolution pixel sizes at the reference distance.
    pub puff_sigma_px: f64,
    pub puff_growth_px: f64,
    pub wind_speed_px: f64,
    pub wind_jitter_px: f64,
    pub max_age: u32,
}

impl Default for PlumeModel {
    fn default() -> Self {
        Self {
            peak_contrast: 40.0,
            reference_distance_m: 4.6,
            distance_exponent: 1.0,
            absorptive: false,
            contrast_table: None,
            emission_rate: 0.5,
            puff_sigma_px: 6.0,
            puff_growth_px: 0.35,
            wind_speed_px: 1.6,
            wind_jitter_px: 0.35,
            max_age: 45,
        }
    }
}

impl PlumeModel {
    /// Relative contrast in `[0, 1]`: square root of the rate in excess of
    /// the class-0 reference, normalized by the largest class.
    pub fn relative_contrast(&self, class: &LeakClass) -> f64 {
        if let Some(t) = &self.contrast_table {
            return t.get(class.label as usize).copied().unwrap_or(0.0);
        }
        let base = LEAK_CLASSES[0].rate_g_per_h.value;
        let top = LEAK_CLASSES[7].rate_g_per_h.value - base;
        ((class.rate_g_per_h.value - base).max(0.0) / top).sqrt()
    }

    pub fn apparent_scale(&self, distance_m: f64) -> f64 {
        self.reference_distance_m / distance_m
    }

    pub fn params(&self, class: LeakClass, distance_m: f64, width: usize) -> PlumeParams {
        let res = width as f64 / AUTHORED_WIDTH;
        let scale = self.apparent_scale(distance_m);
        let rel = self.relative_contrast(&class);
        let sign = if self.absorptive { -1.0 } else { 1.0 };
        PlumeParams {
            leak_class: class,
            distance_m,
            emission_rate: self.emission_rate,
            puff_sigma0: self.puff_sigma_px * res * scale * (0.5 + 0.5 * rel),
            puff_growth: self.puff_growth_px * res * scale,
            wind_speed: self.wind_speed_px * res * scale,
            wind_jitter: self.wind_jitter_px * res * scale,
            contrast: sign * self.peak_contrast * rel * scale.powf(self.distance_exponent),
            apparent_scale: scale,
            max_age: self.max_age,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlumeParams {
    pub leak_class: LeakClass,
    pub distance_m: f64,
    /// Puffs per frame (fractional rates accumulate).
    pub emission_rate: f64,
    pub puff_sigma0: f64,
    /// Std-dev growth per frame of age, pixels.
    pub puff_growth: f64,
    /// Mean drift speed, pixels/frame; direction comes from the plume seed.
    pub wind_speed: f64,
    /// Std-dev of the gust and turbulence perturbations, pixels/frame.
    pub wind_jitter: f64,
    /// Signed peak intensity offset.
    pub contrast: f64,
    pub apparent_scale: f64,
    pub max_age: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudPass {
    /// Absolute frame at which the cloud bank starts entering from the left.
    pub entry_frame: f64,
    pub seed: u64,
    /// Signed intensity offset at full coverage.
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceParams {
    pub cloud_enabled: bool,
    /// Pixels/frame.
    pub cloud_velocity: (f64, f64),
    pub clouds: Vec<CloudPass>,
    pub sensor_noise_sigma: f64,
    /// Relative amplitude of the global gain wobble.
    pub flicker_amp: f64,
    pub flicker_period: f64,
    /// Radians; shared by the segments of one container.
    pub flicker_phase: f64,
    /// Absolute frame number of the first rendered frame, so that clouds and
    /// flicker continue smoothly across consecutive segments.
    pub time_offset: u32,
}

impl NuisanceParams {
    pub fn quiet() -> Self {
        Self {
            cloud_enabled: false,
            cloud_velocity: (0.0, 0.0),
            clouds: Vec::new(),
            sensor_noise_sigma: 0.0,
            flicker_amp: 0.0,
            flicker_period: 150.0,
            flicker_phase: 0.0,
            time_offset: 0,
        }
    }
}

struct Blob {
    dx: f64,
    dy: f64,
    sigma: f64,
    weight: f64,
}

/// Cloud bank geometry relative to its leading edge.
struct CloudBank {
    blobs: Vec<Blob>,
    extent: f64,
    intensity: f64,
    entry: f64,
}

impl CloudBank {
    fn new(pass: &CloudPass, width: usize, horizon: f64) -> Self {
        let mut r = Rng::new(pass.seed);
        let w = width as f64;
        let extent = w * r.uniform_range(0.6, 0.9);
        let blobs = (0..7)
            .map(|_| Blob {
                dx: -r.uniform_range(0.1, 0.9) * extent,
                dy: r.uniform_range(0.1, 0.8) * horizon,
                sigma: w * r.uniform_range(0.07, 0.13),
                weight: r.uniform_range(0.6, 1.4),
            })
            .collect();
        Self {
            blobs,
            extent,
            intensity: pass.intensity,
            entry: pass.entry_frame,
        }
    }

    /// Leading-edge position at absolute time `t`.
    fn anchor(&self, t: f64, velocity: (f64, f64)) -> (f64, f64) {
        let dt = t - self.entry;
        (velocity.0 * dt, velocity.1 * dt)
    }

    fn visible(&self, t: f64, velocity: (f64, f64), width: usize) -> bool {
        let (ax, _) = self.anchor(t, velocity);
        let margin = 3.0 * width as f64 * 0.13;
        ax + margin > 0.0 && ax - self.extent - margin < width as f64
    }

    /// Adds the bank's density at time `t` into `density`.
    fn accumulate(&self, t: f64, velocity: (f64, f64), width: usize, height: usize, density: &mut [f64]) {
        let (ax, ay) = self.anchor(t, velocity);
        let mut gx = vec![0.0; width];
        let mut gy = vec![0.0; height];
        for b in &self.blobs {
            let (bx, by) = (ax + b.dx, ay + b.dy);
            let inv = 1.0 / (2.0 * b.sigma * b.sigma);
            for (x, g) in gx.iter_mut().enumerate() {
                let d = x as f64 - bx;
                *g = (-d * d * inv).exp();
            }
            for (y, g) in gy.iter_mut().enumerate() {
                let d = y as f64 - by;
                *g = b.weight * (-d * d * inv).exp();
            }
            for y in 0..height {
                if gy[y] < 1e-6 {
                    continue;
                }
                let row = &mut density[y * width..(y + 1) * width];
                for (v, g) in row.iter_mut().zip(&gx) {
                    *v += gy[y] * g;
                }
            }
        }
    }
}

/// Cloud layer (before occlusion by the structure) at absolute time `t`.
pub fn cloud_layer(scene: &SceneSpec, nuisance: &NuisanceParams, t: f64) -> Vec<f64> {
    let banks: Vec<CloudBank> = nuisance
        .clouds
        .iter()
        .map(|p| CloudBank::new(p, scene.width, scene.horizon))
        .collect();
    cloud_layer_from(&banks, scene, nuisance.cloud_velocity, t)
}

fn cloud_layer_from(banks: &[CloudBank], scene: &SceneSpec, velocity: (f64, f64), t: f64) -> Vec<f64> {
    let mut layer = vec![0.0; scene.width * scene.height];
    let mut density = vec![0.0; scene.width * scene.height];
    for bank in banks {
        if !bank.visible(t, velocity, scene.width) {
            continue;
        }
        density.iter_mut().for_each(|d| *d = 0.0);
        bank.accumulate(t, velocity, scene.width, scene.height, &mut density);
        for (l, &d) in layer.iter_mut().zip(&density) {
            *l += bank.intensity * (1.0 - (-d).exp());
        }
    }
    layer
}

struct Puff {
    x: f64,
    y: f64,
    age: u32,
}

/// Puff simulation. Positions are tracked relative to the leak origin in
/// units of the apparent scale so that the same seed gives geometrically
/// similar plumes at every distance and leak rate.
struct PlumeSim {
    rng: Rng,
    /// Mean wind direction and its slowly meandering deviation, radians.
    base_angle: f64,
    meander: f64,
    gust: (f64, f64),
    puffs: Vec<Puff>,
    emitted: f64,
}

/// Per-frame correlation and stationary spread of the wind meander.
const MEANDER_RHO: f64 = 0.98;
const MEANDER_SD: f64 = 0.6;

impl PlumeSim {
    fn new(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        // Mostly upward with a random lateral lean.
        let base_angle = rng.uniform_range(-110f64.to_radians(), -70f64.to_radians());
        let meander = MEANDER_SD * rng.normal();
        Self {
            base_angle,
            meander,
            rng,
            gust: (0.0, 0.0),
            puffs: Vec::new(),
            emitted: 0.0,
        }
    }

    /// Advances one frame in normalized units (speed 1, jitter 1 relative to
    /// the model's wind speed and jitter).
    fn step(&mut self, emission_rate: f64, jitter_ratio: f64, max_age: u32) {
        let r = &mut self.rng;
        self.meander = MEANDER_RHO * self.meander + MEANDER_SD * (1.0 - MEANDER_RHO * MEANDER_RHO).sqrt() * r.normal();
        let angle = self.base_angle + self.meander;
        let heading = (angle.cos(), angle.sin());
        self.gust.0 = 0.9 * self.gust.0 + jitter_ratio * r.normal();
        self.gust.1 = 0.9 * self.gust.1 + jitter_ratio * r.normal();
        for p in &mut self.puffs {
            p.x += heading.0 + self.gust.0 + 0.5 * jitter_ratio * r.normal();
            p.y += heading.1 + self.gust.1 + 0.5 * jitter_ratio * r.normal();
            p.age += 1;
        }
        self.puffs.retain(|p| p.age <= max_age);
        self.emitted += emission_rate;
        while self.emitted >= 1.0 {
            self.emitted -= 1.0;
            self.puffs.push(Puff { x: 0.0, y: 0.0, age: 0 });
        }
    }
}

/// Renders `n_frames` frames. Deterministic in all arguments. The plume
/// trajectory stream is keyed by `seed` alone, so two calls that differ only
/// in leak class or distance share geometry up to scale.
pub fn render_segment(
    scene: &SceneSpec,
    plume: &PlumeParams,
    nuisance: &NuisanceParams,
    n_frames: usize,
    seed: u64,
) -> Result<Vec<Frame>> {
    render_frames(scene, plume, nuisance, n_frames, seed, mix(seed ^ PLUME_TAG))
}

const PLUME_TAG: u64 = 0x706c_756d_65;

/// `seed` drives noise and flicker phase, `plume_seed` the puff trajectories.
fn render_frames(
    scene: &SceneSpec,
    plume: &PlumeParams,
    nuisance: &NuisanceParams,
    n_frames: usize,
    seed: u64,
    plume_seed: u64,
) -> Result<Vec<Frame>> {
    if n_frames == 0 {
        return Err(Error::InvalidArgument("n_frames must be >= 1".into()));
    }
    let (w, h) = (scene.width, scene.height);
    let background = scene.background();
    let banks: Vec<CloudBank> = if nuisance.cloud_enabled {
        nuisance
            .clouds
            .iter()
            .map(|p| CloudBank::new(p, w, scene.horizon))
            .collect()
    } else {
        Vec::new()
    };
    let mut sim = PlumeSim::new(plume_seed);
    let mut noise = Rng::derive(seed, 2);
    let jitter_ratio = if plume.wind_speed > 0.0 {
        plume.wind_jitter / plume.wind_speed
    } else {
        0.0
    };

    let mut density = vec![0.0f64; w * h];
    let mut gx = vec![0.0f64; w];
    let mut gy = vec![0.0f64; h];
    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let t_abs = nuisance.time_offset as f64 + t as f64;
        sim.step(plume.emission_rate, jitter_ratio, plume.max_age);

        density.iter_mut().for_each(|d| *d = 0.0);
        if plume.contrast != 0.0 {
            for p in &sim.puffs {
                let sigma = plume.puff_sigma0 + plume.puff_growth * p.age as f64;
                let amp = 1.5 * (plume.puff_sigma0 / sigma).powi(2);
                let cx = scene.leak_origin.0 + p.x * plume.wind_speed;
                let cy = scene.leak_origin.1 + p.y * plume.wind_speed;
                splat(&mut density, w, h, cx, cy, sigma, amp, &mut gx, &mut gy);
            }
        }

        let clouds = if banks.is_empty() {
            None
        } else {
            Some(cloud_layer_from(&banks, scene, nuisance.cloud_velocity, t_abs))
        };
        let gain = 1.0
            + nuisance.flicker_amp
                * (std::f64::consts::TAU * t_abs / nuisance.flicker_period + nuisance.flicker_phase).sin();


        let mut pixels = Vec::with_capacity(w * h);
        for i in 0..w * h {
            let mut v = background[i];
            if let Some(c) = &clouds {
                if !scene.structure_mask[i] {
                    v += c[i];
                }
            }
            v *= gain;
            if density[i] > 0.0 {
                v += plume.contrast * (1.0 - (-density[i]).exp());
            }
            if nuisance.sensor_noise_sigma > 0.0 {
                v += nuisance.sensor_noise_sigma * noise.approx_normal();
            }
            pixels.push(quantize(v));
        }
        frames.push(Frame {
            width: w,
            height: h,
            pixels,
            index: nuisance.time_offset + t as u32,
        });
    }
    Ok(frames)
}

/// Adds an isotropic Gaussian of peak `amp` truncated at 3 sigma.
#[allow(clippy::too_many_arguments)]
fn splat(
    density: &mut [f64],
    w: usize,
    h: usize,
    cx: f64,
    cy: f64,
    sigma: f64,
    amp: f64,
    gx: &mut [f64],
    gy: &mut [f64],
) {
    let reach = 3.0 * sigma;
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil() + 1.0).min(w as f64).max(0.0) as usize;
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let y1 = ((cy + reach).ceil() + 1.0).min(h as f64).max(0.0) as usize;
    if x0 >= x1 || y0 >= y1 {
        return;
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    for x in x0..x1 {
        let d = x as f64 - cx;
        gx[x] = (-d * d * inv).exp();
    }
    for y in y0..y1 {
        let d = y as f64 - cy;
        gy[y] = amp * (-d * d * inv).exp();
    }
    for y in y0..y1 {
        let row = &mut density[y * w..(y + 1) * w];
        for x in x0..x1 {
            row[x] += gy[y] * gx[x];
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceConfig {
    /// Off in the presets: a cloud pass spans several class segments and
    /// its residual becomes a per-segment signature that small training
    /// sets latch onto.
    pub clouds: bool,
    /// Cloud passes per container.
    pub cloud_passes: usize,
    /// Authored-resolution pixels/frame.
    pub cloud_speed_px: f64,
    pub cloud_intensity: f64,
    pub sensor_noise_sigma: f64,
    pub flicker_amp: f64,
    pub flicker_period: f64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            clouds: false,
            cloud_passes: 2,
            cloud_speed_px: 0.6,
            cloud_intensity: 20.0,
            sensor_noise_sigma: 2.0,
            flicker_amp: 0.02,
            flicker_period: 180.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquipmentConfig {
    pub id: String,
    pub layout_seed: u64,
    pub texture_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub frames_per_class: usize,
    pub classes: Vec<u8>,
    pub distances_m: Vec<f64>,
    pub equipment: Vec<EquipmentConfig>,
    pub trim_head_s: f64,
    pub trim_tail_s: f64,
    pub plume: PlumeModel,
    pub nuisance: NuisanceConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::desk(7)
    }
}

impl SynthConfig {
    /// Laptop-scale corpus: 160x120, 300 frames per class segment.
    pub fn desk(seed: u64) -> Self {
        Self {
            width: 160,
            height: 120,
            fps: 15.0,
            frames_per_class: 300,
            classes: (0..8).collect(),
            distances_m: crate::gvid::DISTANCES_M.to_vec(),
            equipment: vec![
                EquipmentConfig {
                    id: "sep1".into(),
                    layout_seed: 101,
                    texture_seed: 1001,
                },
                EquipmentConfig {
                    id: "sep2".into(),
                    layout_seed: 202,
                    texture_seed: 2002,
                },
            ],
            trim_head_s: 4.0,
            trim_tail_s: 1.0,
            plume: PlumeModel::default(),
            nuisance: NuisanceConfig::default(),
            seed,
        }
    }

    /// Full-resolution corpus with 3-minute class segments.
    pub fn paper_scale(seed: u64) -> Self {
        Self {
            width: 320,
            height: 240,
            frames_per_class: 2700,
            trim_head_s: 15.0,
            trim_tail_s: 5.0,
            ..Self::desk(seed)
        }
    }

    pub fn container_name(equipment: &str, distance_m: f64) -> PathBuf {
        PathBuf::from(format!("{equipment}_{distance_m:.1}m.gvid"))
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames_per_class == 0 {
            return Err(Error::InvalidArgument("empty frame geometry or segment length".into()));
        }
        if self.classes.is_empty() || self.distances_m.is_empty() || self.equipment.is_empty() {
            return Err(Error::InvalidArgument("config needs classes, distances and equipment".into()));
        }
        if self.fps <= 0.0 {
            return Err(Error::InvalidArgument("fps must be positive".into()));
        }
        Ok(())
    }
}

fn render_container(config: &SynthConfig, eq_idx: usize, dist_idx: usize) -> Result<(Video, Vec<VideoSegment>)> {
    let eq = &config.equipment[eq_idx];
    let distance = config.distances_m[dist_idx];
    let scale = config.plume.apparent_scale(distance);
    let scene = SceneSpec::generate(
        &eq.id,
        config.width,
        config.height,
        mix(config.seed ^ mix(eq.layout_seed)),
        mix(config.seed ^ mix(eq.texture_seed) ^ mix(dist_idx as u64 + 1)),
        scale,
    );
    let n = config.frames_per_class;
    let total = n * config.classes.len();
    let res = config.width as f64 / AUTHORED_WIDTH;

    let container_key = mix(config.seed ^ mix(eq.layout_seed) ^ mix(0xC0 + dist_idx as u64));
    let mut cr = Rng::new(container_key);
    let cloud_speed = config.nuisance.cloud_speed_px * res;
    // Entries are stratified over the container so that cloud cover is
    // spread across class segments rather than tied to a few of them.
    let passes = config.nuisance.cloud_passes;
    let clouds: Vec<CloudPass> = (0..passes)
        .map(|i| {
            let crossing = (config.width as f64 * 1.9) / cloud_speed.max(1e-9);
            let stratum = total as f64 / passes as f64;
            CloudPass {
                entry_frame: cr.uniform_range(i as f64 * stratum, (i + 1) as f64 * stratum) - 0.5 * crossing,
                seed: cr.next_u64(),
                intensity: if cr.bernoulli(0.5) { 1.0 } else { -1.0 } * config.nuisance.cloud_intensity,
            }
        })
        .collect();
    let flicker_phase = cr.uniform_range(0.0, std::f64::consts::TAU);
    // One plume stream per equipment: class segments and distances differ
    // only in scale and contrast.
    let plume_seed = mix(config.seed ^ mix(eq.layout_seed) ^ 0x504c);

    let file = SynthConfig::container_name(&eq.id, distance);
    let mut frames = Vec::with_capacity(total);
    let mut segments = Vec::with_capacity(config.classes.len());
    for (k, &label) in config.classes.iter().enumerate() {
        let class = crate::gvid::class_rate(label)?;
        let plume = config.plume.params(class, distance, config.width);
        let nuisance = NuisanceParams {
            cloud_enabled: config.nuisance.clouds,
            cloud_velocity: (cloud_speed, 0.0),
            clouds: clouds.clone(),
            sensor_noise_sigma: config.nuisance.sensor_noise_sigma,
            flicker_amp: config.nuisance.flicker_amp,
            flicker_period: config.nuisance.flicker_period,
            flicker_phase,
            time_offset: (k * n) as u32,
        };
        let seg_seed = mix(container_key ^ mix(label as u64 + 17));
        let seg_frames = render_frames(&scene, &plume, &nuisance, n, seg_seed, plume_seed)?;
        frames.extend(seg_frames);
        segments.push(VideoSegment {
            file_id: file.clone(),
            equipment_id: eq.id.clone(),
            distance_m: distance,
            leak_class: class,
            start_frame: (k * n) as u32,
            end_frame: ((k + 1) * n) as u32,
            fps: config.fps,
        });
    }
    let meta = VideoMeta {
        width: config.width,
        height: config.height,
        fps_millihz: (config.fps * 1000.0).round() as u32,
    };
    Ok((Video { file, meta, frames }, segments))
}

/// Renders every (equipment, distance) container in memory. Containers are
/// rendered in parallel; the result does not depend on scheduling.
pub fn render_corpus(config: &SynthConfig) -> Result<Corpus> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> = (0..config.equipment.len())
        .flat_map(|e| (0..config.distances_m.len()).map(move |d| (e, d)))
        .collect();
    let rendered = jobs
        .par_iter()
        .map(|&(e, d)| render_container(config, e, d))
        .collect::<Result<Vec<_>>>()?;
    let mut videos = Vec::with_capacity(rendered.len());
    let mut segments = Vec::new();
    for (video, segs) in rendered {
        videos.push(video);
        segments.extend(segs);
    }
    let manifest = DatasetManifest {
        distances_m: config.distances_m.clone(),
        equipment_ids: config.equipment.iter().map(|e| e.id.clone()).collect(),
        trim_head_s: config.trim_head_s,
        trim_tail_s: config.trim_tail_s,
        segments,
    };
    Corpus::new(manifest, videos)
}

/// Renders the corpus and writes the containers plus `manifest.json` to `dir`.
pub fn render_dataset(config: &SynthConfig, dir: &Path) -> Result<DatasetManifest> {
    let corpus = render_corpus(config)?;
    corpus.save(dir)?;
    Ok(corpus.manifest)
}

/// Mean absolute deviation of `frames` from a reference image.
pub fn residual_energy(frames: &[Frame], reference: &Frame) -> f64 {
    let total: u64 = frames
        .iter()
        .map(|f| {
            f.pixels
                .iter()
                .zip(&reference.pixels)
                .map(|(&a, &b)| (a as i32 - b as i32).unsigned_abs() as u64)
                .sum::<u64>()
        })
        .sum();
    total as f64 / (frames.len() * reference.pixels.len()).max(1) as f64
}

/// Mean number of pixels per frame deviating from the reference by more
/// than `threshold`.
pub fn plume_area(frames: &[Frame], reference: &Frame, threshold: u8) -> f64 {
    let total: usize = frames
        .iter()
        .map(|f| {
            f.pixels
                .iter()
                .zip(&reference.pixels)
                .filter(|(&a, &b)| (a as i32 - b as i32).unsigned_abs() > threshold as u32)
                .count()
        })
        .sum();
    total as f64 / frames.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gvid::class_rate;

    fn scene() -> SceneSpec {
        SceneSpec::generate("sep2", 80, 60, 3, 4, 1.0)
    }

    #[test]
    fn scene_invariants() {
        let s = scene();
        assert_eq!(s.structure_mask.len(), 80 * 60);
        assert!(s.structure_mask.iter().any(|&m| m));
        let (x, y) = s.leak_origin;
        assert!((0.0..80.0).contains(&x) && (0.0..60.0).contains(&y));
        let other = SceneSpec::generate("sep1", 80, 60, 5, 6, 1.0);
        assert_ne!(s.structure_mask, other.structure_mask);
        assert_ne!(s.leak_origin, other.leak_origin);
    }

    #[test]
    fn quiet_class0_equals_background() {
        let s = scene();
        let plume = PlumeModel::default().params(class_rate(0).unwrap(), 4.6, 80);
        assert_eq!(plume.contrast, 0.0);
        let frames = render_segment(&s, &plume, &NuisanceParams::quiet(), 12, 9).unwrap();
        let bg = s.background_frame();
        for f in &frames {
            assert_eq!(f.pixels, bg.pixels);
        }
    }

    #[test]
    fn zero_frames_rejected() {
        let s = scene();
        let plume = PlumeModel::default().params(class_rate(3).unwrap(), 4.6, 80);
        assert!(render_segment(&s, &plume, &NuisanceParams::quiet(), 0, 1).is_err());
    }

    #[test]
    fn deterministic() {
        let s = scene();
        let plume = PlumeModel::default().params(class_rate(5).unwrap(), 6.9, 80);
        let mut nz = NuisanceParams::quiet();
        nz.sensor_noise_sigma = 2.0;
        nz.flicker_amp = 0.02;
        let a = render_segment(&s, &plume, &nz, 20, 77).unwrap();
        let b = render_segment(&s, &plume, &nz, 20, 77).unwrap();
        assert_eq!(a, b);
        let c = render_segment(&s, &plume, &nz, 20, 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn larger_class_has_more_residual_energy() {
        let s = scene();
        let bg = s.background_frame();
        let model = PlumeModel::default();
        let mut nz = NuisanceParams::quiet();
        nz.sensor_noise_sigma = 1.0;
        let mut last = -1.0;
        for label in 0..8 {
            let p = model.params(class_rate(label).unwrap(), 4.6, 80);
            let e = residual_energy(&render_segment(&s, &p, &nz, 60, 5).unwrap(), &bg);
            assert!(e > last, "class {label}: {e} <= {last}");
            last = e;
        }
    }

    #[test]
    fn plume_params_monotone() {
        let m = PlumeModel::default();
        let mut last = -1.0;
        for c in LEAK_CLASSES {
            let p = m.params(c, 4.6, 320);
            assert!(p.contrast > last || (c.label == 0 && p.contrast == 0.0));
            last = p.contrast;
        }
        let near = m.params(LEAK_CLASSES[4], 4.6, 320);
        let far = m.params(LEAK_CLASSES[4], 15.6, 320);
        assert!(far.apparent_scale < near.apparent_scale);
        assert!(far.contrast < near.contrast);
        let dark = PlumeModel {
            absorptive: true,
            ..PlumeModel::default()
        };
        assert!(dark.params(LEAK_CLASSES[4], 4.6, 320).contrast < 0.0);
    }

    #[test]
    fn clouds_translate_rigidly() {
        let s = SceneSpec::generate("sep1", 64, 48, 1, 2, 1.0);
        let nz = NuisanceParams {
            cloud_enabled: true,
            cloud_velocity: (1.0, 0.0),
            clouds: vec![CloudPass {
                entry_frame: -20.0,
                seed: 5,
                intensity: 25.0,
            }],
            ..NuisanceParams::quiet()
        };
        let a = cloud_layer(&s, &nz, 10.0);
        let b = cloud_layer(&s, &nz, 11.0);
        assert!(a.iter().any(|&v| v.abs() > 1.0), "cloud should be visible");
        for y in 0..48 {
            for x in 0..63 {
                let va = a[y * 64 + x];
                let vb = b[y * 64 + x + 1];
                assert!((va - vb).abs() < 1e-9, "({x},{y}) {va} vs {vb}");
            }
        }
    }

    #[test]
    fn small_corpus_layout() {
        let cfg = SynthConfig {
            width: 32,
            height: 24,
            frames_per_class: 20,
            distances_m: vec![4.6, 9.8],
            trim_head_s: 0.2,
            trim_tail_s: 0.1,
            ..SynthConfig::desk(3)
        };
        let c = render_corpus(&cfg).unwrap();
        assert_eq!(c.videos.len(), 4);
        assert_eq!(c.manifest.segments.len(), 32);
        for v in &c.videos {
            let segs: Vec<_> = c.manifest.segments.iter().filter(|s| s.file_id == v.file).collect();
            assert_eq!(segs.len(), 8);
            assert_eq!(segs[0].label(), 0);
            assert_eq!(v.frames.len(), 160);
        }
        assert_eq!(render_corpus(&cfg).unwrap(), c);
    }
}
