//! Orientation assignment and the 128-component gradient-histogram descriptor.

use std::f32::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::detector::Keypoint;
use crate::imgio::GrayImage;

pub const DESCRIPTOR_LEN: usize = 128;
pub const ORIENTATION_BINS: usize = 36;

/// Sub-blocks per side of the descriptor window.
const BLOCKS: usize = 4;
/// Grid samples per side of the descriptor window.
const GRID: usize = 16;
const ANGLE_BINS: usize = 8;
/// Width of one sub-block, in units of the keypoint scale.
const BLOCK_WIDTH_SIGMAS: f64 = 3.0;
const ORIENTATION_SIGMA_FACTOR: f64 = 1.5;
const ORIENTATION_RADIUS_FACTOR: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorParams {
    /// Per-component cap applied between the two normalizations.
    pub clamp: f32,
    /// Emit an extra keypoint for every secondary histogram peak within
    /// `peak_ratio` of the maximum.
    pub multi_orientation: bool,
    pub peak_ratio: f64,
}

impl Default for DescriptorParams {
    fn default() -> Self {
        Self {
            clamp: 0.2,
            multi_orientation: false,
            peak_ratio: 0.8,
        }
    }
}

/// Gradient magnitude and direction of a Gaussian level.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    width: usize,
    height: usize,
    dx: Vec<f32>,
    dy: Vec<f32>,
    magnitude: Vec<f32>,
    orientation: Vec<f32>,
}

impl GradientField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn magnitude(&self, x: usize, y: usize) -> f32 {
        self.magnitude[y * self.width + x]
    }

    #[inline]
    pub fn orientation(&self, x: usize, y: usize) -> f32 {
        self.orientation[y * self.width + x]
    }

    /// Bilinearly interpolated gradient vector; `None` outside the raster.
    fn vector_at(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64) {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let lerp = |buf: &[f32]| {
            let at = |xx: usize, yy: usize| buf[yy * self.width + xx] as f64;
            let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
            let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
            top * (1.0 - fy) + bot * fy
        };
        Some((lerp(&self.dx), lerp(&self.dy)))
    }
}

/// Maps an angle into `[0, 2pi)`.
#[inline]
pub fn wrap_angle(a: f32) -> f32 {
    let w = a.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Central differences inside, one-sided differences on the border.
pub fn compute_gradients(level: &GrayImage) -> GradientField {
    let (w, h) = (level.width(), level.height());
    let diff = |lo: f32, hi: f32, central: bool| if central { (hi - lo) / 2.0 } else { hi - lo };
    let mut dx = vec![0.0f32; w * h];
    let mut dy = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            if w > 1 {
                let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
                dx[y * w + x] = diff(level.get(xl, y), level.get(xr, y), xr - xl == 2);
            }
            if h > 1 {
                let (yt, yb) = (y.saturating_sub(1), (y + 1).min(h - 1));
                dy[y * w + x] = diff(level.get(x, yt), level.get(x, yb), yb - yt == 2);
            }
        }
    }
    let magnitude: Vec<f32> = dx.iter().zip(&dy).map(|(a, b)| a.hypot(*b)).collect();
    let orientation = dx
        .iter()
        .zip(&dy)
        .zip(&magnitude)
        .map(|((a, b), m)| if *m == 0.0 { 0.0 } else { wrap_angle(b.atan2(*a)) })
        .collect();
    GradientField {
        width: w,
        height: h,
        dx,
        dy,
        magnitude,
        orientation,
    }
}

/// Keypoint geometry in the pixel grid of its octave.
#[derive(Debug, Clone, Copy)]
struct OctaveFrame {
    x: f64,
    y: f64,
    sigma: f64,
}

impl OctaveFrame {
    fn new(kp: &Keypoint, octave_scale: f64) -> Self {
        Self {
            x: kp.x as f64 / octave_scale,
            y: kp.y as f64 / octave_scale,
            sigma: kp.sigma as f64 / octave_scale,
        }
    }
}

/// 36-bin histogram of gradient directions around the keypoint, each pixel
/// contributing its magnitude times a Gaussian window of `1.5 * scale`.
/// `None` when the patch misses the raster entirely.
pub fn orientation_histogram(
    kp: &Keypoint,
    field: &GradientField,
    octave_scale: f64,
) -> Option<[f64; ORIENTATION_BINS]> {
    let frame = OctaveFrame::new(kp, octave_scale);
    let sigma_w = ORIENTATION_SIGMA_FACTOR * frame.sigma;
    let radius = (ORIENTATION_RADIUS_FACTOR * sigma_w).ceil() as i64;
    let (cx, cy) = (frame.x.round() as i64, frame.y.round() as i64);
    let denom = 2.0 * sigma_w * sigma_w;
    let mut hist = [0.0f64; ORIENTATION_BINS];
    let mut touched = false;
    for dy in -radius..=radius {
        let y = cy + dy;
        if y < 0 || y >= field.height as i64 {
            continue;
        }
        for dx in -radius..=radius {
            let x = cx + dx;
            if dx * dx + dy * dy > radius * radius || x < 0 || x >= field.width as i64 {
                continue;
            }
            touched = true;
            let (xu, yu) = (x as usize, y as usize);
            let m = field.magnitude(xu, yu) as f64;
            if m == 0.0 {
                continue;
            }
            let ox = x as f64 - frame.x;
            let oy = y as f64 - frame.y;
            let weight = (-(ox * ox + oy * oy) / denom).exp();
            let bin = orientation_bin(field.orientation(xu, yu), ORIENTATION_BINS);
            hist[bin] += m * weight;
        }
    }
    touched.then_some(hist)
}

#[inline]
fn orientation_bin(phi: f32, bins: usize) -> usize {
    ((phi as f64 * bins as f64 / std::f64::consts::TAU).floor() as usize).min(bins - 1)
}

/// Peak angle with parabolic refinement over the bin and its two circular neighbours.
fn peak_angle(hist: &[f64; ORIENTATION_BINS], bin: usize) -> f32 {
    let n = ORIENTATION_BINS;
    let left = hist[(bin + n - 1) % n];
    let right = hist[(bin + 1) % n];
    let c = hist[bin];
    let denom = left - 2.0 * c + right;
    let shift = if denom != 0.0 {
        (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let angle = (bin as f64 + 0.5 + shift) * std::f64::consts::TAU / n as f64;
    wrap_angle(angle as f32)
}

/// Dominant orientation; `None` for a patch outside the raster or a flat patch.
pub fn assign_orientation(kp: &Keypoint, field: &GradientField, octave_scale: f64) -> Option<Keypoint> {
    let hist = orientation_histogram(kp, field, octave_scale)?;
    let (best, &peak) = hist
        .iter()
        .enumerate()
        .fold((0, &hist[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
    if peak.is_nan() || peak <= 0.0 {
        return None;
    }
    Some(Keypoint {
        orientation: peak_angle(&hist, best),
        ..*kp
    })
}

/// Like [`assign_orientation`], additionally returning one keypoint per
/// secondary local peak that reaches `peak_ratio` of the maximum. The
/// dominant orientation always comes first.
pub fn assign_orientations(
    kp: &Keypoint,
    field: &GradientField,
    octave_scale: f64,
    peak_ratio: f64,
) -> Vec<Keypoint> {
    let Some(primary) = assign_orientation(kp, field, octave_scale) else {
        return Vec::new();
    };
    let hist = orientation_histogram(kp, field, octave_scale).expect("histogram exists");
    let n = ORIENTATION_BINS;
    let peak = hist.iter().cloned().fold(0.0, f64::max);
    let best = hist.iter().position(|v| *v == peak).expect("peak present");
    let mut out = vec![primary];
    for i in 0..n {
        if i == best {
            continue;
        }
        let v = hist[i];
        if v >= peak_ratio * peak && v > hist[(i + n - 1) % n] && v > hist[(i + 1) % n] {
            out.push(Keypoint {
                orientation: peak_angle(&hist, i),
                ..*kp
            });
        }
    }
    out
}

/// Unit-norm 128-component descriptor. The all-zero vector marks a
/// degenerate (gradient-free) window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Descriptor {
    values: [f32; DESCRIPTOR_LEN],
}

impl Descriptor {
    pub fn from_values(values: [f32; DESCRIPTOR_LEN]) -> Self {
        Self { values }
    }

    pub fn zeros() -> Self {
        Self {
            values: [0.0; DESCRIPTOR_LEN],
        }
    }

    #[inline]
    pub fn values(&self) -> &[f32; DESCRIPTOR_LEN] {
        &self.values
    }

    pub fn is_degenerate(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

/// Intermediate vectors of the normalize / clamp / renormalize chain.
#[derive(Debug, Clone, Copy)]
pub struct NormalizationTrace {
    pub normalized: [f32; DESCRIPTOR_LEN],
    pub clamped: [f32; DESCRIPTOR_LEN],
    pub descriptor: Descriptor,
}

fn l2_normalize(v: &[f64; DESCRIPTOR_LEN]) -> [f64; DESCRIPTOR_LEN] {
    let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm == 0.0 {
        return *v;
    }
    v.map(|c| c / norm)
}

pub fn normalize_descriptor(raw: &[f32; DESCRIPTOR_LEN], clamp: f32) -> NormalizationTrace {
    let wide = raw.map(|c| c as f64);
    let normalized = l2_normalize(&wide);
    let clamped = normalized.map(|c| c.min(clamp as f64));
    let renormalized = l2_normalize(&clamped);
    NormalizationTrace {
        normalized: normalized.map(|c| c as f32),
        clamped: clamped.map(|c| c as f32),
        descriptor: Descriptor::from_values(renormalized.map(|c| c as f32)),
    }
}

/// Accumulates the raw (unnormalized) 4x4x8 histogram over a rotated 16x16
/// sample grid. `None` when any sample falls outside the raster.
pub fn raw_descriptor(
    kp: &Keypoint,
    field: &GradientField,
    octave_scale: f64,
) -> Option<[f32; DESCRIPTOR_LEN]> {
    let frame = OctaveFrame::new(kp, octave_scale);
    let spacing = BLOCK_WIDTH_SIGMAS * frame.sigma / (GRID / BLOCKS) as f64;
    let theta = kp.orientation as f64;
    let (sin_t, cos_t) = theta.sin_cos();
    let half = (GRID as f64 - 1.0) / 2.0;
    let weight_sigma = GRID as f64 / 2.0;
    let mut hist = [0.0f64; DESCRIPTOR_LEN];

    for i in 0..GRID {
        for j in 0..GRID {
            let gu = j as f64 - half;
            let gv = i as f64 - half;
            let (u, v) = (gu * spacing, gv * spacing);
            let sx = frame.x + cos_t * u - sin_t * v;
            let sy = frame.y + sin_t * u + cos_t * v;
            let (gx, gy) = field.vector_at(sx, sy)?;
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let rel = (gy.atan2(gx) - theta).rem_euclid(std::f64::consts::TAU);
            let weight = (-(gu * gu + gv * gv) / (2.0 * weight_sigma * weight_sigma)).exp();
            let contribution = mag * weight;

            let bx = (j as f64 + 0.5) / (GRID / BLOCKS) as f64 - 0.5;
            let by = (i as f64 + 0.5) / (GRID / BLOCKS) as f64 - 0.5;
            let bo = rel * ANGLE_BINS as f64 / std::f64::consts::TAU;
            let (x0, y0, o0) = (bx.floor(), by.floor(), bo.floor());
            let (fx, fy, fo) = (bx - x0, by - y0, bo - o0);
            for (yy, wy) in [(y0 as i64, 1.0 - fy), (y0 as i64 + 1, fy)] {
                if yy < 0 || yy >= BLOCKS as i64 || wy == 0.0 {
                    continue;
                }
                for (xx, wx) in [(x0 as i64, 1.0 - fx), (x0 as i64 + 1, fx)] {
                    if xx < 0 || xx >= BLOCKS as i64 || wx == 0.0 {
                        continue;
                    }
                    for (oo, wo) in [(o0 as i64, 1.0 - fo), (o0 as i64 + 1, fo)] {
                        let ob = oo.rem_euclid(ANGLE_BINS as i64) as usize;
                        let idx = (yy as usize * BLOCKS + xx as usize) * ANGLE_BINS + ob;
                        hist[idx] += contribution * wy * wx * wo;
                    }
                }
            }
        }
    }
    Some(hist.map(|c| c as f32))
}

pub fn compute_descriptor(
    kp: &Keypoint,
    field: &GradientField,
    octave_scale: f64,
    clamp: f32,
) -> Option<Descriptor> {
    raw_descriptor(kp, field, octave_scale).map(|raw| normalize_descriptor(&raw, clamp).descriptor)
}

/// L1-normalize then take square roots, so Euclidean distance between
/// results is the Hellinger distance of the inputs. Zero vectors pass through.
pub fn root_normalize(d: &Descriptor) -> Descriptor {
    let sum: f64 = d.values.iter().map(|v| v.abs() as f64).sum();
    if sum == 0.0 {
        return *d;
    }
    Descriptor::from_values(d.values.map(|v| ((v.abs() as f64) / sum).sqrt() as f32))
}
