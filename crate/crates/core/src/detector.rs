//! Scale-space extrema detection with subpixel refinement, contrast and edge filtering.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imgio::{GrayImage, Plane};
use crate::scalespace::{
    build_dog_pyramid, build_gaussian_pyramid, DogPyramid, GaussianPyramid, PyramidParams,
};

/// Refinement gives up after this many re-centerings.
pub const MAX_REFINE_STEPS: usize = 5;
/// Hessians with a smaller determinant are treated as singular.
pub const SINGULAR_DET: f64 = 1e-10;

/// Integer-position scale-space extremum of a DoG octave.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RawExtremum {
    pub octave: usize,
    pub level: usize,
    pub x: usize,
    pub y: usize,
    pub is_max: bool,
}

/// Extremum after Newton refinement. `extremum` holds the sample the
/// iteration settled on; `offset` is `(dx, dy, dlevel)` from that sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refined {
    pub extremum: RawExtremum,
    pub offset: [f64; 3],
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    Singular,
    OutOfBounds,
    NotConverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    /// Position in input-image pixels.
    pub x: f32,
    pub y: f32,
    /// Absolute scale in input-image pixels.
    pub sigma: f32,
    pub octave: usize,
    /// Refined, real-valued DoG level within the octave.
    pub level: f32,
    pub response: f32,
    /// Radians in `[0, 2pi)`; zero until assigned.
    pub orientation: f32,
}

/// All interior samples strictly above or strictly below their 26 neighbours.
pub fn scan_extrema(dog: &DogPyramid) -> Vec<RawExtremum> {
    dog.octaves
        .par_iter()
        .enumerate()
        .map(|(o, levels)| scan_octave(o, levels))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

fn scan_octave(octave: usize, levels: &[Plane]) -> Vec<RawExtremum> {
    let mut out = Vec::new();
    if levels.len() < 3 {
        return out;
    }
    let (w, h) = (levels[0].width(), levels[0].height());
    if w < 3 || h < 3 {
        return out;
    }
    for l in 1..levels.len() - 1 {
        let stack = [&levels[l - 1], &levels[l], &levels[l + 1]];
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let v = levels[l].get(x, y);
                if let Some(is_max) = strict_extremum(&stack, x, y, v) {
                    out.push(RawExtremum {
                        octave,
                        level: l,
                        x,
                        y,
                        is_max,
                    });
                }
            }
        }
    }
    out
}

#[inline]
fn strict_extremum(stack: &[&Plane; 3], x: usize, y: usize, v: f32) -> Option<bool> {
    // decide direction from one neighbour, then confirm against the rest
    let probe = stack[1].get(x - 1, y);
    let is_max = if v > probe {
        true
    } else if v < probe {
        false
    } else {
        return None;
    };
    for (li, plane) in stack.iter().enumerate() {
        for ny in y - 1..=y + 1 {
            for nx in x - 1..=x + 1 {
                if li == 1 && nx == x && ny == y {
                    continue;
                }
                let n = plane.get(nx, ny);
                if (is_max && v <= n) || (!is_max && v >= n) {
                    return None;
                }
            }
        }
    }
    Some(is_max)
}

/// Central-difference gradient and Hessian over `(x, y, level)`.
fn derivatives(levels: &[Plane], x: usize, y: usize, l: usize) -> ([f64; 3], [[f64; 3]; 3], f64) {
    let at = |dl: isize, dx: isize, dy: isize| -> f64 {
        levels[(l as isize + dl) as usize].get((x as isize + dx) as usize, (y as isize + dy) as usize)
            as f64
    };
    let v = at(0, 0, 0);
    let gx = (at(0, 1, 0) - at(0, -1, 0)) / 2.0;
    let gy = (at(0, 0, 1) - at(0, 0, -1)) / 2.0;
    let gl = (at(1, 0, 0) - at(-1, 0, 0)) / 2.0;
    let dxx = at(0, 1, 0) + at(0, -1, 0) - 2.0 * v;
    let dyy = at(0, 0, 1) + at(0, 0, -1) - 2.0 * v;
    let dll = at(1, 0, 0) + at(-1, 0, 0) - 2.0 * v;
    let dxy = (at(0, 1, 1) - at(0, 1, -1) - at(0, -1, 1) + at(0, -1, -1)) / 4.0;
    let dxl = (at(1, 1, 0) - at(1, -1, 0) - at(-1, 1, 0) + at(-1, -1, 0)) / 4.0;
    let dyl = (at(1, 0, 1) - at(1, 0, -1) - at(-1, 0, 1) + at(-1, 0, -1)) / 4.0;
    (
        [gx, gy, gl],
        [[dxx, dxy, dxl], [dxy, dyy, dyl], [dxl, dyl, dll]],
        v,
    )
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Solves `m x = rhs` by Cramer's rule; `None` when `|det| < SINGULAR_DET`.
fn solve3(m: &[[f64; 3]; 3], rhs: [f64; 3]) -> Option<[f64; 3]> {
    let det = det3(m);
    if det.is_nan() || det.abs() < SINGULAR_DET {
        return None;
    }
    let mut out = [0.0; 3];
    for (col, slot) in out.iter_mut().enumerate() {
        let mut mc = *m;
        for row in 0..3 {
            mc[row][col] = rhs[row];
        }
        *slot = det3(&mc) / det;
    }
    Some(out)
}

/// Newton refinement of an extremum, re-centering onto the adjacent sample
/// while any offset component exceeds one half.
pub fn refine_subpixel(dog: &DogPyramid, e: &RawExtremum) -> std::result::Result<Refined, Rejection> {
    let levels = &dog.octaves[e.octave];
    let (w, h) = (levels[0].width(), levels[0].height());
    let (mut x, mut y, mut l) = (e.x, e.y, e.level);
    for _ in 0..MAX_REFINE_STEPS {
        if l < 1 || l + 2 > levels.len() || x < 1 || y < 1 || x + 2 > w || y + 2 > h {
            return Err(Rejection::OutOfBounds);
        }
        let (g, hess, v) = derivatives(levels, x, y, l);
        let offset = solve3(&hess, [-g[0], -g[1], -g[2]]).ok_or(Rejection::Singular)?;
        if offset.iter().all(|c| c.abs() <= 0.5) {
            let value = v + 0.5 * (g[0] * offset[0] + g[1] * offset[1] + g[2] * offset[2]);
            return Ok(Refined {
                extremum: RawExtremum {
                    octave: e.octave,
                    level: l,
                    x,
                    y,
                    is_max: e.is_max,
                },
                offset,
                value,
            });
        }
        let step = |pos: usize, c: f64| -> Option<usize> {
            if c > 0.5 {
                Some(pos + 1)
            } else if c < -0.5 {
                pos.checked_sub(1)
            } else {
                Some(pos)
            }
        };
        match (step(x, offset[0]), step(y, offset[1]), step(l, offset[2])) {
            (Some(nx), Some(ny), Some(nl)) => {
                x = nx;
                y = ny;
                l = nl;
            }
            _ => return Err(Rejection::OutOfBounds),
        }
    }
    Err(Rejection::NotConverged)
}

/// Keeps candidates whose interpolated response magnitude reaches `threshold`.
pub fn filter_contrast(candidates: Vec<Refined>, threshold: f64) -> Vec<Refined> {
    candidates
        .into_iter()
        .filter(|c| c.value.abs() >= threshold)
        .collect()
}

/// 2x2 spatial Hessian test: `det > 0` and `tr^2 / det < (r + 1)^2 / r`.
pub fn passes_edge_test(dog: &DogPyramid, e: &RawExtremum, r: f64) -> bool {
    let plane = &dog.octaves[e.octave][e.level];
    let (x, y) = (e.x, e.y);
    let v = plane.get(x, y) as f64;
    let at = |dx: isize, dy: isize| {
        plane.get((x as isize + dx) as usize, (y as isize + dy) as usize) as f64
    };
    let dxx = at(1, 0) + at(-1, 0) - 2.0 * v;
    let dyy = at(0, 1) + at(0, -1) - 2.0 * v;
    let dxy = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / 4.0;
    edge_ratio_ok(dxx, dxy, dyy, r)
}

#[inline]
pub fn edge_ratio_ok(dxx: f64, dxy: f64, dyy: f64, r: f64) -> bool {
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    det > 0.0 && tr * tr / det < (r + 1.0) * (r + 1.0) / r
}

pub fn filter_edges(dog: &DogPyramid, candidates: Vec<Refined>, r: f64) -> Vec<Refined> {
    candidates
        .into_iter()
        .filter(|c| passes_edge_test(dog, &c.extremum, r))
        .collect()
}

/// Full detection on an image.
pub fn detect(img: &GrayImage, p: &PyramidParams, max_keypoints: Option<usize>) -> Result<Vec<Keypoint>> {
    let gp = build_gaussian_pyramid(img, p)?;
    let dog = build_dog_pyramid(&gp);
    Ok(detect_in_pyramid(&gp, &dog, p, max_keypoints))
}

/// Detection on prebuilt pyramids; output sorted by descending response.
pub fn detect_in_pyramid(
    gp: &GaussianPyramid,
    dog: &DogPyramid,
    p: &PyramidParams,
    max_keypoints: Option<usize>,
) -> Vec<Keypoint> {
    let raw = scan_extrema(dog);
    let refined: Vec<Refined> = raw
        .par_iter()
        .filter_map(|e| refine_subpixel(dog, e).ok())
        .collect();
    let refined = filter_contrast(refined, p.contrast_threshold);
    let refined = filter_edges(dog, refined, p.edge_r);

    let s = gp.intervals as f64;
    let mut kps: Vec<Keypoint> = refined
        .iter()
        .map(|c| {
            let e = &c.extremum;
            let scale = dog.octave_scale(e.octave);
            let level = e.level as f64 + c.offset[2];
            Keypoint {
                x: ((e.x as f64 + c.offset[0]) * scale) as f32,
                y: ((e.y as f64 + c.offset[1]) * scale) as f32,
                sigma: (p.base_sigma * scale * (level / s).exp2()) as f32,
                octave: e.octave,
                level: level as f32,
                response: c.value.abs() as f32,
                orientation: 0.0,
            }
        })
        .collect();
    // stable: equal responses keep scan order
    kps.sort_by(|a, b| b.response.total_cmp(&a.response));
    if let Some(cap) = max_keypoints {
        kps.truncate(cap);
    }
    kps
}
