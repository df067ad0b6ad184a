//! Gaussian scale space: separable blur, octave pyramid and difference-of-Gaussians.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::{downsample_half, upsample_double, GrayImage, Plane};

/// Smallest side length allowed for the coarsest octave.
pub const MIN_OCTAVE_SIDE: usize = 8;

/// Which Gaussian level seeds the next octave.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleSource {
    /// The last level of the octave (index `s + 2`).
    TopLevel,
    /// The level whose blur is exactly twice the octave base (index `s`).
    DoubledLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidParams {
    pub num_octaves: usize,
    /// Intervals per octave (`s`); each octave holds `s + 3` Gaussian levels.
    pub intervals: usize,
    pub base_sigma: f64,
    pub contrast_threshold: f64,
    /// Bound on the principal-curvature ratio used by the edge filter.
    pub edge_r: f64,
    pub upsample_input: bool,
    pub downsample_source: DownsampleSource,
}

impl Default for PyramidParams {
    fn default() -> Self {
        Self {
            num_octaves: 4,
            intervals: 3,
            base_sigma: 1.6,
            contrast_threshold: 0.03,
            edge_r: 10.0,
            upsample_input: false,
            downsample_source: DownsampleSource::TopLevel,
        }
    }
}

impl PyramidParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_octaves < 1 {
            return Err(Error::Parameter("num_octaves must be >= 1".into()));
        }
        if self.intervals < 1 {
            return Err(Error::Parameter("intervals must be >= 1".into()));
        }
        if !self.base_sigma.is_finite() || self.base_sigma <= 0.0 {
            return Err(Error::Parameter(format!(
                "base_sigma must be positive, got {}",
                self.base_sigma
            )));
        }
        if self.edge_r.is_nan() || self.edge_r < 1.0 {
            return Err(Error::Parameter(format!(
                "edge_r must be >= 1, got {}",
                self.edge_r
            )));
        }
        if self.contrast_threshold.is_nan() || self.contrast_threshold < 0.0 {
            return Err(Error::Parameter(format!(
                "contrast_threshold must be >= 0, got {}",
                self.contrast_threshold
            )));
        }
        Ok(())
    }

    /// Nominal blur of Gaussian level `i` relative to its octave: `base_sigma * 2^(i/s)`.
    pub fn level_sigma(&self, level: f64) -> f64 {
        self.base_sigma * (level / self.intervals as f64).exp2()
    }
}

/// Sampled, truncated (radius `ceil(4 sigma)`) and normalized 1-D Gaussian.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (4.0 * sigma).ceil() as i64;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = weights.iter().sum();
    weights.into_iter().map(|w| (w / sum) as f32).collect()
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge sample.
#[inline]
pub fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    if m < n as i64 {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Separable Gaussian blur, rows then columns, reflected borders.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<GrayImage> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::Parameter(format!(
            "blur sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let (w, h) = (img.width(), img.height());
    let rows = convolve_rows(img.data(), w, h, &kernel);
    let out = convolve_cols(&rows, w, h, &kernel);
    Ok(GrayImage::from_clamped(w, h, out))
}

fn convolve_rows(src: &[f32], w: usize, h: usize, kernel: &[f32]) -> Vec<f32> {
    let radius = (kernel.len() / 2) as i64;
    let mut out = vec![0.0f32; w * h];
    // Indices of the padded row, reused for every row.
    let taps: Vec<usize> = (-radius..w as i64 + radius)
        .map(|i| reflect_index(i, w))
        .collect();
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let dst = &mut out[y * w..(y + 1) * w];
        for (x, d) in dst.iter_mut().enumerate() {
            let window = &taps[x..x + kernel.len()];
            *d = window
                .iter()
                .zip(kernel)
                .map(|(&i, &k)| row[i] * k)
                .sum();
        }
    }
    out
}

fn convolve_cols(src: &[f32], w: usize, h: usize, kernel: &[f32]) -> Vec<f32> {
    let radius = (kernel.len() / 2) as i64;
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        let dst = &mut out[y * w..(y + 1) * w];
        for (t, &k) in kernel.iter().enumerate() {
            let sy = reflect_index(y as i64 + t as i64 - radius, h);
            let row = &src[sy * w..(sy + 1) * w];
            for (d, &s) in dst.iter_mut().zip(row) {
                *d += s * k;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOctave {
    pub levels: Vec<GrayImage>,
    /// Nominal blur of each level, in this octave's pixels.
    pub sigmas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPyramid {
    pub octaves: Vec<GaussianOctave>,
    pub intervals: usize,
    /// Size of one pixel of octave 0, in input-image pixels.
    pub base_scale: f64,
}

impl GaussianPyramid {
    /// Input-image pixels per pixel of octave `o`.
    pub fn octave_scale(&self, octave: usize) -> f64 {
        self.base_scale * (1u64 << octave) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DogPyramid {
    pub octaves: Vec<Vec<Plane>>,
    pub base_scale: f64,
}

impl DogPyramid {
    /// Wraps externally built DoG octaves (one pixel of octave 0 = one image pixel).
    pub fn from_octaves(octaves: Vec<Vec<Plane>>) -> Self {
        Self {
            octaves,
            base_scale: 1.0,
        }
    }

    pub fn octave_scale(&self, octave: usize) -> f64 {
        self.base_scale * (1u64 << octave) as f64
    }
}

/// How many octaves fit while keeping the coarsest side >= [`MIN_OCTAVE_SIDE`].
fn max_octaves(width: usize, height: usize) -> usize {
    let mut n = 0;
    let (mut w, mut h) = (width, height);
    while w >= MIN_OCTAVE_SIDE && h >= MIN_OCTAVE_SIDE {
        n += 1;
        w /= 2;
        h /= 2;
    }
    n
}

pub fn build_gaussian_pyramid(img: &GrayImage, p: &PyramidParams) -> Result<GaussianPyramid> {
    p.validate()?;
    if img.width() < MIN_OCTAVE_SIDE || img.height() < MIN_OCTAVE_SIDE {
        return Err(Error::Dimension(format!(
            "image {}x{} is smaller than {MIN_OCTAVE_SIDE}x{MIN_OCTAVE_SIDE}",
            img.width(),
            img.height()
        )));
    }

    let (seed, base_scale) = if p.upsample_input {
        (upsample_double(img), 0.5)
    } else {
        (img.clone(), 1.0)
    };

    let fit = max_octaves(seed.width(), seed.height());
    let num_octaves = if p.num_octaves > fit {
        warn!(
            "{}x{} input only supports {fit} octaves, clamping from {}",
            img.width(),
            img.height(),
            p.num_octaves
        );
        fit
    } else {
        p.num_octaves
    };

    let s = p.intervals;
    let sigmas: Vec<f64> = (0..s + 3).map(|i| p.level_sigma(i as f64)).collect();
    // sigma_{i+1}^2 - sigma_i^2 = (base 2^{i/s})^2 (2^{2/s} - 1)
    let step = ((2.0 / s as f64).exp2() - 1.0).sqrt();
    let increments: Vec<f64> = (0..s + 2).map(|i| sigmas[i] * step).collect();
    let seed_index = match p.downsample_source {
        DownsampleSource::TopLevel => s + 2,
        DownsampleSource::DoubledLevel => s,
    };

    let mut octaves: Vec<GaussianOctave> = Vec::with_capacity(num_octaves);
    let mut base = gaussian_blur(&seed, p.base_sigma)?;
    for o in 0..num_octaves {
        if o > 0 {
            base = downsample_half(&octaves[o - 1].levels[seed_index])?;
        }
        let mut levels = Vec::with_capacity(s + 3);
        levels.push(base.clone());
        for inc in &increments {
            let next = gaussian_blur(levels.last().expect("non-empty"), *inc)?;
            levels.push(next);
        }
        octaves.push(GaussianOctave {
            levels,
            sigmas: sigmas.clone(),
        });
    }

    Ok(GaussianPyramid {
        octaves,
        intervals: s,
        base_scale,
    })
}

pub fn build_dog_pyramid(gp: &GaussianPyramid) -> DogPyramid {
    let octaves = gp
        .octaves
        .iter()
        .map(|oct| {
            oct.levels
                .windows(2)
                .map(|pair| {
                    let (lo, hi) = (&pair[0], &pair[1]);
                    let data = hi
                        .data()
                        .iter()
                        .zip(lo.data())
                        .map(|(b, a)| b - a)
                        .collect();
                    Plane::new(lo.width(), lo.height(), data).expect("matching shapes")
                })
                .collect()
        })
        .collect();
    DogPyramid {
        octaves,
        base_scale: gp.base_scale,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    /// Dense 2-D convolution with the same sampled kernel and reflected borders.
    fn dense_blur(img: &GrayImage, sigma: f64) -> Vec<f64> {
        let radius = (4.0 * sigma).ceil() as i64;
        let mut k2 = Vec::new();
        let mut sum = 0.0;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let g = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                k2.push(g);
                sum += g;
            }
        }
        let side = (2 * radius + 1) as usize;
        let (w, h) = (img.width(), img.height());
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let sx = reflect_index(x as i64 + dx, w);
                        let sy = reflect_index(y as i64 + dy, h);
                        let k = k2[(dy + radius) as usize * side + (dx + radius) as usize];
                        acc += img.get(sx, sy) as f64 * k / sum;
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    #[test]
    fn reflect_is_mirror_101() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_index(-7, 1), 0);
        assert_eq!(reflect_index(9, 2), 1);
    }

    #[test]
    fn kernel_is_normalized_with_expected_radius() {
        for sigma in [0.3, 1.0, 1.6, 3.2] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (4.0 * sigma).ceil() as usize + 1);
            let s: f32 = k.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_image_survives_blur() {
        let img = GrayImage::constant(20, 11, 0.37);
        for sigma in [0.5, 2.0, 6.0] {
            let b = gaussian_blur(&img, sigma).unwrap();
            assert!(b.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
        }
    }

    #[test]
    fn zero_sigma_is_identity_and_negative_rejected() {
        let img = synth::noise_image(12, 9, 0.0, 1.0, 5);
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
        assert!(matches!(gaussian_blur(&img, -0.1), Err(Error::Parameter(_))));
    }

    #[test]
    fn impulse_matches_dense_convolution() {
        let img = GrayImage::from_fn(33, 33, |x, y| if x == 16 && y == 16 { 1.0 } else { 0.0 });
        let fast = gaussian_blur(&img, 2.0).unwrap();
        let slow = dense_blur(&img, 2.0);
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn tiny_image_blur_uses_repeated_reflection() {
        let img = GrayImage::from_fn(3, 2, |x, y| (x + y) as f32 / 4.0);
        let fast = gaussian_blur(&img, 2.5).unwrap();
        let slow = dense_blur(&img, 2.5);
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn octave_blur_schedule() {
        let p = PyramidParams::default();
        let img = synth::noise_image(64, 64, 0.0, 1.0, 1);
        let gp = build_gaussian_pyramid(&img, &p).unwrap();
        let expected = [1.6, 2.016, 2.540, 3.2, 4.032, 5.080];
        for (got, want) in gp.octaves[0].sigmas.iter().zip(expected) {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
        let sig = &gp.octaves[0].sigmas;
        assert!((sig[p.intervals] - 2.0 * sig[0]).abs() < 1e-12);
    }

    #[test]
    fn octave_dims_halve() {
        let img = GrayImage::constant(512, 512, 0.5);
        let gp = build_gaussian_pyramid(&img, &PyramidParams::default()).unwrap();
        let dims: Vec<usize> = gp.octaves.iter().map(|o| o.levels[0].width()).collect();
        assert_eq!(dims, vec![512, 256, 128, 64]);
    }

    #[test]
    fn octaves_clamped_for_small_images() {
        let img = GrayImage::constant(20, 40, 0.5);
        let p = PyramidParams {
            num_octaves: 6,
            ..Default::default()
        };
        let gp = build_gaussian_pyramid(&img, &p).unwrap();
        assert_eq!(gp.octaves.len(), 2);
        assert!(matches!(
            build_gaussian_pyramid(&GrayImage::constant(7, 30, 0.0), &p),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn dog_of_constant_is_zero() {
        let img = GrayImage::constant(32, 32, 0.8);
        let gp = build_gaussian_pyramid(&img, &PyramidParams::default()).unwrap();
        let dog = build_dog_pyramid(&gp);
        for oct in &dog.octaves {
            assert_eq!(oct.len(), 5);
            for lvl in oct {
                assert!(lvl.data().iter().all(|&v| v.abs() < 1e-6));
            }
        }
    }

    #[test]
    fn dog_of_impulse_matches_sampled_gaussians() {
        // Level 0 of the first octave is the impulse blurred by base_sigma;
        // every later level adds blur in quadrature, so DoG level i is close
        // to G(sigma_{i+1}) - G(sigma_i) sampled on the grid.
        let n = 65;
        let c = 32usize;
        let img = GrayImage::from_fn(n, n, |x, y| if x == c && y == c { 1.0 } else { 0.0 });
        let p = PyramidParams {
            num_octaves: 1,
            ..Default::default()
        };
        let gp = build_gaussian_pyramid(&img, &p).unwrap();
        let dog = build_dog_pyramid(&gp);
        let sampled = |sigma: f64, x: usize, y: usize| {
            let r = (4.0 * sigma).ceil() as i64;
            let norm: f64 = (-r..=r)
                .map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp())
                .sum();
            let dx = x as f64 - c as f64;
            let dy = y as f64 - c as f64;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp() / (norm * norm)
        };
        for (i, lvl) in dog.octaves[0].iter().enumerate() {
            let (s0, s1) = (gp.octaves[0].sigmas[i], gp.octaves[0].sigmas[i + 1]);
            let mut worst = 0.0f64;
            for y in 0..n {
                for x in 0..n {
                    let want = sampled(s1, x, y) - sampled(s0, x, y);
                    worst = worst.max((lvl.get(x, y) as f64 - want).abs());
                }
            }
            assert!(worst < 2e-4, "level {i}: {worst}");
        }
    }
}
