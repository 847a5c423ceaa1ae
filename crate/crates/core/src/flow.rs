//! Dense optical flow by polynomial expansion (Farnebäck's two-frame method).
//!
//! Each image neighbourhood is approximated by a quadratic polynomial
//! `f(u) = uᵀAu + bᵀu + c`, fitted by Gaussian-weighted least squares. A
//! translation `d` between frames changes the linear term as
//! `b₂ = b₁ - 2Ad`, so the displacement is recovered from the expansion
//! coefficients of both frames. Estimates are averaged over a box window,
//! refined iteratively, and propagated coarse-to-fine through an image
//! pyramid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timebase::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    pub pyramid_levels: usize,
    /// Side of the box window averaging the displacement constraints.
    pub window_size: usize,
    /// Side of the (square, odd) polynomial-expansion neighbourhood.
    pub poly_n: usize,
    pub poly_sigma: f64,
    pub iterations: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams { pyramid_levels: 2, window_size: 9, poly_n: 5, poly_sigma: 1.1, iterations: 3 }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0
            || self.window_size == 0
            || self.iterations == 0
            || self.poly_n == 0
            || self.poly_n.is_multiple_of(2)
            || !(self.poly_sigma > 0.0)
        {
            return Err(Error::InvalidParameter(format!("invalid flow parameters {self:?}")));
        }
        Ok(())
    }
}

/// Per-pixel displacement in pixels/frame; `vy` is positive downward.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
}

impl FlowField {
    fn zeros(width: usize, height: usize) -> Self {
        FlowField { width, height, vx: vec![0.0; width * height], vy: vec![0.0; width * height] }
    }

    /// Vertical velocity in pixels/second for a frame interval of `dt`.
    pub fn vertical_velocities(&self, dt: f64) -> Result<Vec<f64>> {
        vertical_velocities(self, dt)
    }
}

pub fn vertical_velocities(field: &FlowField, dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidTimestep(dt));
    }
    Ok(field.vy.iter().map(|v| v / dt).collect())
}

/// Least-squares projector from a neighbourhood to `(bx, by, axx, ayy, axy)`.
///
/// The Gaussian applicability and the basis `1, x, y, x², y², xy` are both
/// separable, so the weighted moments are computed with one row pass and one
/// column pass before the normal-equation inverse combines them.
struct Expansion {
    half: isize,
    /// `w(t)·t^k` for `k = 0, 1, 2` over `t = -half..=half`.
    kernels: [Vec<f64>; 3],
    /// Rows of the inverse normal matrix for the five returned coefficients.
    ginv: [[f64; 6]; 5],
}

/// `(row power, column power)` of each basis function.
const MOMENTS: [(usize, usize); 6] = [(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)];

impl Expansion {
    fn new(poly_n: usize, sigma: f64) -> Self {
        let half = (poly_n / 2) as isize;
        let taps: Vec<f64> = (-half..=half).map(|t| t as f64).collect();
        let weight = |t: f64| (-(t * t) / (2.0 * sigma * sigma)).exp();
        let kernels = std::array::from_fn(|k| taps.iter().map(|&t| weight(t) * t.powi(k as i32)).collect());
        // Normal matrix BᵀWB.
        let mut g = [[0.0f64; 6]; 6];
        for &y in &taps {
            for &x in &taps {
                let basis = [1.0, x, y, x * x, y * y, x * y];
                let w = weight(x) * weight(y);
                for i in 0..6 {
                    for j in 0..6 {
                        g[i][j] += w * basis[i] * basis[j];
                    }
                }
            }
        }
        let inv = invert6(g);
        Expansion { half, kernels, ginv: std::array::from_fn(|r| inv[r + 1]) }
    }

    /// Coefficient planes `[bx, by, axx, ayy, axy]` for every pixel, with
    /// replicate-edge padding.
    fn expand(&self, img: &Frame) -> [Vec<f64>; 5] {
        let (w, h) = (img.width, img.height);
        let n = w * h;
        let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
        let mut rows: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n]);
        for y in 0..h {
            let line = &img.data[y * w..(y + 1) * w];
            for x in 0..w {
                for (k, dx) in (-self.half..=self.half).enumerate() {
                    let v = line[clamp(x as isize + dx, w)];
                    for (plane, kernel) in rows.iter_mut().zip(&self.kernels) {
                        plane[y * w + x] += kernel[k] * v;
                    }
                }
            }
        }
        let mut moments: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; n]);
        for y in 0..h {
            for (k, dy) in (-self.half..=self.half).enumerate() {
                let src = clamp(y as isize + dy, h) * w;
                for (m, &(p, q)) in MOMENTS.iter().enumerate() {
                    let c = self.kernels[q][k];
                    let from = &rows[p][src..src + w];
                    for (out, v) in moments[m][y * w..(y + 1) * w].iter_mut().zip(from) {
                        *out += c * v;
                    }
                }
            }
        }
        std::array::from_fn(|r| {
            let g = &self.ginv[r];
            (0..n).map(|i| (0..6).map(|j| g[j] * moments[j][i]).sum()).collect()
        })
    }
}

fn invert6(mut a: [[f64; 6]; 6]) -> [[f64; 6]; 6] {
    let mut inv = [[0.0; 6]; 6];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..6 {
        let pivot = (col..6)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col];
        for j in 0..6 {
            a[col][j] /= p;
            inv[col][j] /= p;
        }
        for i in 0..6 {
            if i != col {
                let f = a[i][col];
                if f != 0.0 {
                    for j in 0..6 {
                        a[i][j] -= f * a[col][j];
                        inv[i][j] -= f * inv[col][j];
                    }
                }
            }
        }
    }
    inv
}

fn bilinear(plane: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Sliding mean of `len` samples spaced `stride` apart, with replicate
/// padding of `2 * half + 1` taps.
fn running_mean(src: &[f64], dst: &mut [f64], start: usize, len: usize, stride: usize, half: usize) {
    let at = |i: isize| src[start + i.clamp(0, len as isize - 1) as usize * stride];
    let norm = 1.0 / (2 * half + 1) as f64;
    let h = half as isize;
    let mut sum: f64 = (-h..=h).map(at).sum();
    for i in 0..len as isize {
        dst[start + i as usize * stride] = sum * norm;
        sum += at(i + h + 1) - at(i - h);
    }
}

/// Indices and weights of the four pixels `bilinear` would blend.
fn bilinear_taps(w: usize, h: usize, x: f64, y: f64) -> ([usize; 4], [f64; 4]) {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    (
        [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    )
}

fn box_blur(plane: &[f64], w: usize, h: usize, size: usize) -> Vec<f64> {
    let half = size / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        running_mean(plane, &mut tmp, y * w, w, 1, half);
    }
    let mut out = vec![0.0; w * h];
    for x in 0..w {
        running_mean(&tmp, &mut out, x, h, w, half);
    }
    out
}

/// Binomial blur followed by 2x decimation.
fn pyr_down(img: &Frame) -> Frame {
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (w, h) = (img.width as isize, img.height as isize);
    let mut tmp = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[(y * w + x) as usize] = (0..5)
                .map(|k| K[k] * img.data[(y * w + (x + k as isize - 2).clamp(0, w - 1)) as usize])
                .sum();
        }
    }
    let nw = img.width.div_ceil(2);
    let nh = img.height.div_ceil(2);
    let mut data = vec![0.0; nw * nh];
    for y in 0..nh as isize {
        for x in 0..nw as isize {
            let (sx, sy) = (2 * x, 2 * y);
            data[(y * nw as isize + x) as usize] = (0..5)
                .map(|k| K[k] * tmp[((sy + k as isize - 2).clamp(0, h - 1) * w + sx) as usize])
                .sum();
        }
    }
    Frame { width: nw, height: nh, data }
}

fn upsample_flow(coarse: &FlowField, w: usize, h: usize) -> FlowField {
    let mut f = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let (cx, cy) = (x as f64 / 2.0, y as f64 / 2.0);
            f.vx[y * w + x] = 2.0 * bilinear(&coarse.vx, coarse.width, coarse.height, cx, cy);
            f.vy[y * w + x] = 2.0 * bilinear(&coarse.vy, coarse.width, coarse.height, cx, cy);
        }
    }
    f
}

fn refine(r0: &[Vec<f64>; 5], r1: &[Vec<f64>; 5], flow: &mut FlowField, params: &FlowParams) {
    let (w, h) = (flow.width, flow.height);
    let n = w * h;
    for _ in 0..params.iterations {
        let mut m: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (dx, dy) = (flow.vx[i], flow.vy[i]);
                let (idx, wt) = bilinear_taps(w, h, x as f64 + dx, y as f64 + dy);
                let s = |p: usize| (0..4).map(|k| wt[k] * r1[p][idx[k]]).sum::<f64>();
                let a11 = 0.5 * (r0[2][i] + s(2));
                let a22 = 0.5 * (r0[3][i] + s(3));
                let a12 = 0.25 * (r0[4][i] + s(4));
                let b1 = -0.5 * (s(0) - r0[0][i]) + a11 * dx + a12 * dy;
                let b2 = -0.5 * (s(1) - r0[1][i]) + a12 * dx + a22 * dy;
                m[0][i] = a11 * a11 + a12 * a12;
                m[1][i] = a12 * (a11 + a22);
                m[2][i] = a12 * a12 + a22 * a22;
                m[3][i] = a11 * b1 + a12 * b2;
                m[4][i] = a12 * b1 + a22 * b2;
            }
        }
        let m: Vec<Vec<f64>> = m.iter().map(|p| box_blur(p, w, h, params.window_size)).collect();
        let scale = m[0].iter().zip(&m[2]).map(|(a, b)| a + b).sum::<f64>() / (2 * n) as f64;
        let eps = 1e-6 * scale * scale + f64::MIN_POSITIVE;
        for i in 0..n {
            let (g11, g12, g22, h1, h2) = (m[0][i], m[1][i], m[2][i], m[3][i], m[4][i]);
            let det = g11 * g22 - g12 * g12 + eps;
            flow.vx[i] = (g22 * h1 - g12 * h2) / det;
            flow.vy[i] = (g11 * h2 - g12 * h1) / det;
        }
    }
}

/// Polynomial expansion of one frame at every pyramid level, finest first.
/// Expanding each frame once lets consecutive pairs share the work.
#[derive(Debug, Clone)]
pub struct ExpandedPyramid {
    levels: Vec<(usize, usize, [Vec<f64>; 5])>,
}

impl ExpandedPyramid {
    pub fn new(frame: &Frame, params: &FlowParams) -> Result<Self> {
        params.validate()?;
        if frame.width < params.poly_n || frame.height < params.poly_n {
            return Err(Error::PatchTooSmall { width: frame.width, height: frame.height, min: params.poly_n });
        }
        let expansion = Expansion::new(params.poly_n, params.poly_sigma);
        let mut images = vec![frame.clone()];
        while images.len() < params.pyramid_levels {
            let last = images.last().unwrap();
            if last.width.div_ceil(2) < params.poly_n || last.height.div_ceil(2) < params.poly_n {
                break;
            }
            images.push(pyr_down(last));
        }
        let levels = images.iter().map(|img| (img.width, img.height, expansion.expand(img))).collect();
        Ok(ExpandedPyramid { levels })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.levels[0].0, self.levels[0].1)
    }
}

/// Dense displacement between two expanded frames of the same size.
pub fn flow_between(prev: &ExpandedPyramid, curr: &ExpandedPyramid, params: &FlowParams) -> Result<FlowField> {
    if prev.dims() != curr.dims() || prev.levels.len() != curr.levels.len() {
        return Err(Error::InvalidParameter("flow patches differ in size".into()));
    }
    let mut flow: Option<FlowField> = None;
    for ((w, h, r0), (_, _, r1)) in prev.levels.iter().zip(&curr.levels).rev() {
        let mut f = match flow.take() {
            None => FlowField::zeros(*w, *h),
            Some(c) => upsample_flow(&c, *w, *h),
        };
        refine(r0, r1, &mut f, params);
        flow = Some(f);
    }
    Ok(flow.expect("at least one pyramid level"))
}

/// Dense displacement from `prev` to `curr` (same-sized patches).
pub fn dense_flow(prev: &Frame, curr: &Frame, params: &FlowParams) -> Result<FlowField> {
    if prev.width != curr.width || prev.height != curr.height {
        return Err(Error::InvalidParameter("flow patches differ in size".into()));
    }
    flow_between(&ExpandedPyramid::new(prev, params)?, &ExpandedPyramid::new(curr, params)?, params)
}
