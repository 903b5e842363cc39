//! Dense two-frame optical flow by polynomial expansion.
//!
//! Each frame is approximated per pixel by a quadratic
//! `f(p) ~ p^T A p + b^T p + c`, fitted by weighted least squares under a
//! Gaussian applicability window. A displacement `d` turns `b` into
//! `b - 2 A d`, so each pixel yields the linear constraint
//! `A d = -(b2 - b1) / 2`. Constraints are pooled over a square window
//! and solved, iterating over an image pyramid from coarse to fine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gvid::Frame;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FarnebackParams {
    pub pyramid_scale: f64,
    pub levels: usize,
    pub window_size: usize,
    pub iterations: usize,
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        Self {
            pyramid_scale: 0.5,
            levels: 3,
            window_size: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

impl FarnebackParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(Error::InvalidArgument("pyramid_scale must be in (0, 1)".into()));
        }
        if self.poly_n < 3 || self.poly_n.is_multiple_of(2) {
            return Err(Error::InvalidArgument("poly_n must be odd and >= 3".into()));
        }
        if self.levels == 0 || self.window_size == 0 || self.iterations == 0 || !(self.poly_sigma > 0.0) {
            return Err(Error::InvalidArgument(
                "levels, window_size, iterations and poly_sigma must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-pixel displacement from the first frame to the second, pixels/frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn speed(&self) -> Vec<f32> {
        self.u.iter().zip(&self.v).map(|(u, v)| (u * u + v * v).sqrt()).collect()
    }
}

#[derive(Clone, Debug)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Plane {
    fn at(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.data[y * self.w + x]
    }
}

/// Separable correlation with replicated borders.
fn convolve_sep(src: &Plane, kx: &[f32], ky: &[f32]) -> Plane {
    let (w, h) = (src.w, src.h);
    let rx = (kx.len() / 2) as isize;
    let ry = (ky.len() / 2) as isize;
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kx.iter().enumerate() {
                acc += k * src.at(x as isize + i as isize - rx, y as isize);
            }
            tmp[y * w + x] = acc;
        }
    }
    let t = Plane { w, h, data: tmp };
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in ky.iter().enumerate() {
                acc += k * t.at(x as isize, y as isize + i as isize - ry);
            }
            out[y * w + x] = acc;
        }
    }
    Plane { w, h, data: out }
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f32> {
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter().map(|v| (v / s) as f32).collect()
}

/// Blurs and resamples `src` to `(w, h)` with bilinear interpolation.
fn downsample(src: &Plane, w: usize, h: usize, scale: f64) -> Plane {
    let sigma = (1.0 / scale - 1.0) * 0.5;
    let blurred = if sigma > 0.0 {
        let radius = (3.0 * sigma).ceil().max(1.0) as usize;
        let k = gaussian_kernel(sigma, radius);
        convolve_sep(src, &k, &k)
    } else {
        src.clone()
    };
    let fx = src.w as f64 / w as f64;
    let fy = src.h as f64 / h as f64;
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let sx = (x as f64 + 0.5) * fx - 0.5;
            let sy = (y as f64 + 0.5) * fy - 0.5;
            out[y * w + x] = bilinear(&blurred, sx, sy);
        }
    }
    Plane { w, h, data: out }
}

fn bilinear(p: &Plane, x: f64, y: f64) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let ax = (x - x0) as f32;
    let ay = (y - y0) as f32;
    let (xi, yi) = (x0 as isize, y0 as isize);
    let a = p.at(xi, yi);
    let b = p.at(xi + 1, yi);
    let c = p.at(xi, yi + 1);
    let d = p.at(xi + 1, yi + 1);
    (a * (1.0 - ax) + b * ax) * (1.0 - ay) + (c * (1.0 - ax) + d * ax) * ay
}

/// Quadratic model coefficients per pixel, in the basis
/// `1, x, y, x^2, y^2, xy`.
#[derive(Clone, Debug)]
pub struct PolyExpansion {
    w: usize,
    h: usize,
    /// `[b_x, b_y, a_xx, a_yy, a_xy]` per pixel, with `A = [[a_xx, a_xy/2], [a_xy/2, a_yy]]`.
    coef: Vec<[f32; 5]>,
}

fn invert6(m: [[f64; 6]; 6]) -> [[f64; 6]; 6] {
    let mut a = m;
    let mut inv = [[0.0; 6]; 6];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..6 {
        let piv = (col..6).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        inv.swap(col, piv);
        let d = a[col][col];
        for k in 0..6 {
            a[col][k] /= d;
            inv[col][k] /= d;
        }
        for r in 0..6 {
            if r != col {
                let f = a[r][col];
                for k in 0..6 {
                    a[r][k] -= f * a[col][k];
                    inv[r][k] -= f * inv[col][k];
                }
            }
        }
    }
    inv
}

fn poly_expand(img: &Plane, n: usize, sigma: f64) -> PolyExpansion {
    let r = (n / 2) as isize;
    let g: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    // Gram matrix of the basis under the applicability window.
    let basis = |x: f64, y: f64| [1.0, x, y, x * x, y * y, x * y];
    let mut gram = [[0.0f64; 6]; 6];
    for (iy, wy) in g.iter().enumerate() {
        for (ix, wx) in g.iter().enumerate() {
            let b = basis(ix as f64 - r as f64, iy as f64 - r as f64);
            for i in 0..6 {
                for j in 0..6 {
                    gram[i][j] += wx * wy * b[i] * b[j];
                }
            }
        }
    }
    let ginv = invert6(gram);
    // Separable moments: kernels g * x^p along each axis.
    let k = |p: i32| -> Vec<f32> { (-r..=r).zip(&g).map(|(x, w)| (w * (x as f64).powi(p)) as f32).collect() };
    let (k0, k1, k2) = (k(0), k(1), k(2));
    let m1 = convolve_sep(img, &k0, &k0);
    let mx = convolve_sep(img, &k1, &k0);
    let my = convolve_sep(img, &k0, &k1);
    let mxx = convolve_sep(img, &k2, &k0);
    let myy = convolve_sep(img, &k0, &k2);
    let mxy = convolve_sep(img, &k1, &k1);
    let mut coef = Vec::with_capacity(img.w * img.h);
    for i in 0..img.w * img.h {
        let m = [m1.data[i], mx.data[i], my.data[i], mxx.data[i], myy.data[i], mxy.data[i]].map(|v| v as f64);
        let c = |row: usize| -> f32 { ginv[row].iter().zip(&m).map(|(a, b)| a * b).sum::<f64>() as f32 };
        coef.push([c(1), c(2), c(3), c(4), c(5)]);
    }
    PolyExpansion {
        w: img.w,
        h: img.h,
        coef,
    }
}

impl PolyExpansion {
    fn sample(&self, x: f64, y: f64) -> [f32; 5] {
        let x0 = x.floor();
        let y0 = y.floor();
        let ax = (x - x0) as f32;
        let ay = (y - y0) as f32;
        let at = |xi: isize, yi: isize| {
            let xi = xi.clamp(0, self.w as isize - 1) as usize;
            let yi = yi.clamp(0, self.h as isize - 1) as usize;
            self.coef[yi * self.w + xi]
        };
        let (xi, yi) = (x0 as isize, y0 as isize);
        let (a, b, c, d) = (at(xi, yi), at(xi + 1, yi), at(xi, yi + 1), at(xi + 1, yi + 1));
        let mut out = [0.0f32; 5];
        for k in 0..5 {
            out[k] = (a[k] * (1.0 - ax) + b[k] * ax) * (1.0 - ay) + (c[k] * (1.0 - ax) + d[k] * ax) * ay;
        }
        out
    }
}

/// Box mean over a `size x size` window with replicated borders, applied
/// to each of the five constraint planes.
fn box_blur(planes: &mut [Vec<f32>; 5], w: usize, h: usize, size: usize) {
    let ones = vec![1.0 / size as f32; size];
    for p in planes.iter_mut() {
        let src = Plane {
            w,
            h,
            data: std::mem::take(p),
        };
        *p = convolve_sep(&src, &ones, &ones).data;
    }
}

fn refine(r0: &PolyExpansion, r1: &PolyExpansion, flow: &mut FlowField, window: usize) {
    let (w, h) = (r0.w, r0.h);
    // G = A^T A (symmetric: g11, g12, g22) and h = A^T db.
    let mut planes: [Vec<f32>; 5] = std::array::from_fn(|_| vec![0.0f32; w * h]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (dx, dy) = (flow.u[i], flow.v[i]);
            let c0 = r0.coef[i];
            let c1 = r1.sample(x as f64 + dx as f64, y as f64 + dy as f64);
            let a11 = 0.5 * (c0[2] + c1[2]);
            let a22 = 0.5 * (c0[3] + c1[3]);
            let a12 = 0.25 * (c0[4] + c1[4]);
            let bx = -0.5 * (c1[0] - c0[0]) + a11 * dx + a12 * dy;
            let by = -0.5 * (c1[1] - c0[1]) + a12 * dx + a22 * dy;
            planes[0][i] = a11 * a11 + a12 * a12;
            planes[1][i] = a12 * (a11 + a22);
            planes[2][i] = a12 * a12 + a22 * a22;
            planes[3][i] = a11 * bx + a12 * by;
            planes[4][i] = a12 * bx + a22 * by;
        }
    }
    box_blur(&mut planes, w, h, window);
    for i in 0..w * h {
        let (g11, g12, g22, h1, h2) = (planes[0][i], planes[1][i], planes[2][i], planes[3][i], planes[4][i]);
        // Small ridge keeps textureless regions at zero flow.
        let det = g11 * g22 - g12 * g12 + 1e-3;
        flow.u[i] = (g22 * h1 - g12 * h2) / det;
        flow.v[i] = (g11 * h2 - g12 * h1) / det;
    }
}

fn to_plane(f: &Frame) -> Plane {
    Plane {
        w: f.width,
        h: f.height,
        data: f.pixels.iter().map(|&p| p as f32).collect(),
    }
}

/// Pyramid level sizes, finest first.
fn level_sizes(w: usize, h: usize, params: &FarnebackParams) -> Vec<(usize, usize)> {
    let mut out = vec![(w, h)];
    for l in 1..params.levels {
        let s = params.pyramid_scale.powi(l as i32);
        let (lw, lh) = ((w as f64 * s).round() as usize, (h as f64 * s).round() as usize);
        // Stop before the polynomial window outgrows the image.
        if lw < params.poly_n * 2 || lh < params.poly_n * 2 {
            break;
        }
        out.push((lw, lh));
    }
    out
}

/// Polynomial expansions of one frame at every pyramid level, reusable
/// across the two flow computations a frame takes part in.
#[derive(Clone, Debug)]
pub struct FramePyramid {
    levels: Vec<PolyExpansion>,
}

impl FramePyramid {
    pub fn new(frame: &Frame, params: &FarnebackParams) -> Result<Self> {
        params.validate()?;
        let base = to_plane(frame);
        let levels = level_sizes(frame.width, frame.height, params)
            .into_iter()
            .enumerate()
            .map(|(l, (w, h))| {
                let img = if l == 0 {
                    base.clone()
                } else {
                    downsample(&base, w, h, params.pyramid_scale.powi(l as i32))
                };
                poly_expand(&img, params.poly_n, params.poly_sigma)
            })
            .collect();
        Ok(Self { levels })
    }
}

/// Flow between two precomputed pyramids built with the same parameters.
pub fn flow_between(prev: &FramePyramid, next: &FramePyramid, params: &FarnebackParams) -> Result<FlowField> {
    let (p0, n0) = (&prev.levels[0], &next.levels[0]);
    if p0.w != n0.w || p0.h != n0.h || prev.levels.len() != next.levels.len() {
        return Err(Error::Shape("flow frames differ in size".into()));
    }
    let mut flow: Option<FlowField> = None;
    for l in (0..prev.levels.len()).rev() {
        let (r0, r1) = (&prev.levels[l], &next.levels[l]);
        let mut f = match flow.take() {
            None => FlowField::zeros(r0.w, r0.h),
            Some(coarse) => upsample_flow(&coarse, r0.w, r0.h),
        };
        for _ in 0..params.iterations {
            refine(r0, r1, &mut f, params.window_size);
        }
        flow = Some(f);
    }
    Ok(flow.expect("at least one level"))
}

fn upsample_flow(coarse: &FlowField, w: usize, h: usize) -> FlowField {
    let fx = coarse.width as f64 / w as f64;
    let fy = coarse.height as f64 / h as f64;
    let pu = Plane {
        w: coarse.width,
        h: coarse.height,
        data: coarse.u.clone(),
    };
    let pv = Plane {
        w: coarse.width,
        h: coarse.height,
        data: coarse.v.clone(),
    };
    let mut out = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let sx = (x as f64 + 0.5) * fx - 0.5;
            let sy = (y as f64 + 0.5) * fy - 0.5;
            out.u[y * w + x] = bilinear(&pu, sx, sy) / fx as f32;
            out.v[y * w + x] = bilinear(&pv, sx, sy) / fy as f32;
        }
    }
    out
}

/// Dense flow from `prev` to `next`.
pub fn farneback_flow(prev: &Frame, next: &Frame, params: &FarnebackParams) -> Result<FlowField> {
    if !prev.same_dims(next) {
        return Err(Error::Shape(format!(
            "flow frames differ: {}x{} vs {}x{}",
            prev.width, prev.height, next.width, next.height
        )));
    }
    flow_between(&FramePyramid::new(prev, params)?, &FramePyramid::new(next, params)?, params)
}
