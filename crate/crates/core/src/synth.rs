//! Seeded synthetic images: noise, blobs, step edges and blob textures, plus
//! the similarity warp used to build probe corpora.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imgio::{sample_bilinear, GrayImage};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform noise in `[lo, hi]`.
pub fn noise_image(width: usize, height: usize, lo: f32, hi: f32, seed: u64) -> GrayImage {
    let mut r = rng(seed);
    GrayImage::from_fn(width, height, |_, _| r.gen_range(lo..=hi))
}

/// Isotropic Gaussian bump of peak `amplitude` over `background`.
pub fn gaussian_blob(
    width: usize,
    height: usize,
    cx: f64,
    cy: f64,
    sigma: f64,
    amplitude: f64,
    background: f64,
) -> GrayImage {
    GrayImage::from_fn(width, height, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        (background + amplitude * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()) as f32
    })
}

/// Vertical step: `lo` left of column `edge_x`, `hi` from it onwards.
pub fn step_edge(width: usize, height: usize, edge_x: usize, lo: f32, hi: f32) -> GrayImage {
    GrayImage::from_fn(width, height, |x, _| if x < edge_x { lo } else { hi })
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    // inverse covariance entries
    a: f64,
    b: f64,
    c: f64,
    amplitude: f64,
}

/// Random elliptical Gaussian blobs on a mid-gray background, kept inside a
/// central disk so that moderate rotations and scalings stay in frame.
pub fn blob_texture(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut r = rng(seed ^ 0x9E37_79B9_7F4A_7C15);
    let side = width.min(height) as f64;
    let (mx, my) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let count = ((width * height) as f64 / 450.0).round().max(8.0) as usize;
    let blobs: Vec<Ellipse> = (0..count)
        .map(|_| {
            let rad = 0.36 * side * r.gen::<f64>().sqrt();
            let ang = r.gen_range(0.0..std::f64::consts::TAU);
            let major: f64 = r.gen_range(1.8..5.5);
            let minor = major / r.gen_range(1.0..2.2);
            let theta = r.gen_range(0.0..std::f64::consts::PI);
            let (st, ct) = theta.sin_cos();
            let (ia, ib) = (1.0 / (major * major), 1.0 / (minor * minor));
            let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            Ellipse {
                cx: mx + rad * ang.cos(),
                cy: my + rad * ang.sin(),
                a: ct * ct * ia + st * st * ib,
                b: ct * st * (ia - ib),
                c: st * st * ia + ct * ct * ib,
                amplitude: sign * r.gen_range(0.18..0.42),
            }
        })
        .collect();
    GrayImage::from_fn(width, height, |x, y| {
        let mut v = 0.5;
        for e in &blobs {
            let dx = x as f64 - e.cx;
            let dy = y as f64 - e.cy;
            let q = e.a * dx * dx + 2.0 * e.b * dx * dy + e.c * dy * dy;
            if q < 50.0 {
                v += e.amplitude * (-0.5 * q).exp();
            }
        }
        v as f32
    })
}

/// Rotation by `angle` (radians) and isotropic `scale` about the image
/// center, resampled bilinearly; uncovered pixels take `fill`.
pub fn warp_similarity(img: &GrayImage, angle: f64, scale: f64, fill: f32) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sa, ca) = angle.sin_cos();
    GrayImage::from_fn(w, h, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        // inverse map: rotate by -angle, divide by scale
        let sx = (ca * dx + sa * dy) / scale + cx;
        let sy = (-sa * dx + ca * dy) / scale + cy;
        if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
            fill
        } else {
            sample_bilinear(img, sx as f32, sy as f32)
        }
    })
}

/// Integer translation; uncovered pixels take `fill`.
pub fn shift(img: &GrayImage, dx: i64, dy: i64, fill: f32) -> GrayImage {
    let (w, h) = (img.width() as i64, img.height() as i64);
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        let sx = x as i64 - dx;
        let sy = y as i64 - dy;
        if sx < 0 || sy < 0 || sx >= w || sy >= h {
            fill
        } else {
            img.get(sx as usize, sy as usize)
        }
    })
}

/// Random unit-norm nonnegative 128-vectors.
pub fn random_descriptors(n: usize, seed: u64) -> Vec<crate::descriptor::Descriptor> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let mut v = [0.0f32; crate::descriptor::DESCRIPTOR_LEN];
            for c in v.iter_mut() {
                *c = r.gen::<f32>();
            }
            let norm = v.iter().map(|c| (*c as f64).powi(2)).sum::<f64>().sqrt();
            for c in v.iter_mut() {
                *c = (*c as f64 / norm) as f32;
            }
            crate::descriptor::Descriptor::from_values(v)
        })
        .collect()
}
