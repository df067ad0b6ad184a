//! Grayscale rasters, decoding, resampling and PNG annotation output.
//!
//! Every image entering the pipeline is a [`GrayImage`] with samples in
//! `[0, 1]`. Signed intermediate rasters (difference-of-Gaussian levels,
//! gradient components) use [`Plane`], which carries no range invariant.

use std::path::Path;

use image::{DynamicImage, ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Row-major luminance raster with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} image needs {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Parameter(format!(
                "sample {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image from a sampling function; results are clamped into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(width > 0 && height > 0, "image must be at least 1x1");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(clamp_unit(f(x, y)));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Self::from_fn(width, height, |_, _| value)
    }

    /// Clamps every sample into `[0, 1]`; used for outputs of convex filters
    /// whose rounding can step a hair outside the range.
    pub(crate) fn from_clamped(width: usize, height: usize, mut data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        for s in &mut data {
            *s = clamp_unit(*s);
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn to_plane(&self) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.clone(),
        }
    }
}

#[inline]
fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Row-major signed raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Dimension(format!(
                "plane {width}x{height} with {} samples",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }
}

/// Rec.601 luma.
#[inline]
pub fn to_grayscale(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

/// Decodes PGM (P5) or PNG bytes. `path` is only used for error messages.
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let decode_err = |message: String| Error::Decode {
        path: path.to_path_buf(),
        message,
    };
    let format = image::guess_format(bytes).map_err(|e| decode_err(e.to_string()))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return Err(decode_err(format!("unsupported format {format:?}")));
    }
    let dynamic = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| decode_err(e.to_string()))?;
    let (width, height) = (dynamic.width() as usize, dynamic.height() as usize);
    if width == 0 || height == 0 {
        return Err(decode_err("zero-sized image".into()));
    }

    let data: Vec<f32> = match dynamic {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect(),
        DynamicImage::ImageLumaA16(buf) => buf.pixels().map(|p| p.0[0] as f32 / 65535.0).collect(),
        DynamicImage::ImageRgb8(buf) => buf
            .pixels()
            .map(|p| rgb8_luma(p.0[0], p.0[1], p.0[2]))
            .collect(),
        DynamicImage::ImageRgba8(buf) => buf
            .pixels()
            .map(|p| rgb8_luma(p.0[0], p.0[1], p.0[2]))
            .collect(),
        other => other
            .to_rgb32f()
            .pixels()
            .map(|p| to_grayscale(p.0[0], p.0[1], p.0[2]))
            .collect(),
    };
    Ok(GrayImage::from_clamped(width, height, data))
}

#[inline]
fn rgb8_luma(r: u8, g: u8, b: u8) -> f32 {
    to_grayscale(r as f32 / 255.0, g as f32 / 255.0, b as f32 / 255.0)
}

/// Keeps every second sample starting at index 0 along both axes.
pub fn downsample_half(img: &GrayImage) -> Result<GrayImage> {
    if img.width < 2 || img.height < 2 {
        return Err(Error::Dimension(format!(
            "cannot halve a {}x{} image",
            img.width, img.height
        )));
    }
    let (w, h) = (img.width / 2, img.height / 2);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &img.data[2 * y * img.width..];
        data.extend((0..w).map(|x| row[2 * x]));
    }
    Ok(GrayImage {
        width: w,
        height: h,
        data,
    })
}

/// Bilinear 2x upsampling; output sample `(2i, 2j)` coincides with input `(i, j)`.
pub fn upsample_double(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width * 2, img.height * 2);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(sample_bilinear(img, x as f32 / 2.0, y as f32 / 2.0));
        }
    }
    GrayImage::from_clamped(w, h, data)
}

/// Bilinear sample with coordinates clamped to the image.
pub fn sample_bilinear(img: &GrayImage, x: f32, y: f32) -> f32 {
    let x = x.clamp(0.0, (img.width - 1) as f32);
    let y = y.clamp(0.0, (img.height - 1) as f32);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
    let bottom = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Quarter turn clockwise (y axis pointing down): `(x, y) -> (h - 1 - y, x)`.
pub fn rotate90(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.height, img.width);
    let mut data = vec![0.0; w * h];
    for y in 0..img.height {
        for x in 0..img.width {
            let nx = img.height - 1 - y;
            let ny = x;
            data[ny * w + nx] = img.get(x, y);
        }
    }
    GrayImage {
        width: w,
        height: h,
        data,
    }
}

pub type Color = [u8; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Overlay {
    Circle {
        cx: i64,
        cy: i64,
        radius: i64,
        color: Color,
    },
    Line {
        x0: i64,
        y0: i64,
        x1: i64,
        y1: i64,
        color: Color,
    },
}

/// 8-bit RGB drawing surface. Drawing outside the bounds is clipped.
#[derive(Debug, Clone)]
pub struct Canvas {
    buf: RgbImage,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            buf: RgbImage::new(width as u32, height as u32),
        }
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        let mut canvas = Self::new(img.width, img.height);
        canvas.blit_gray(img, 0, 0);
        canvas
    }

    pub fn width(&self) -> usize {
        self.buf.width() as usize
    }

    pub fn height(&self) -> usize {
        self.buf.height() as usize
    }

    pub fn pixel(&self, x: usize, y: usize) -> Color {
        self.buf.get_pixel(x as u32, y as u32).0
    }

    pub fn blit_gray(&mut self, img: &GrayImage, ox: usize, oy: usize) {
        for y in 0..img.height {
            for x in 0..img.width {
                let v = quantize(img.get(x, y));
                self.put(ox as i64 + x as i64, oy as i64 + y as i64, [v, v, v]);
            }
        }
    }

    #[inline]
    pub fn put(&mut self, x: i64, y: i64, color: Color) {
        if x >= 0 && y >= 0 && (x as u32) < self.buf.width() && (y as u32) < self.buf.height() {
            self.buf.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }

    pub fn draw(&mut self, overlay: &Overlay) {
        match *overlay {
            Overlay::Circle {
                cx,
                cy,
                radius,
                color,
            } => {
                for (x, y) in circle_points(radius) {
                    self.put(cx + x, cy + y, color);
                }
            }
            Overlay::Line {
                x0,
                y0,
                x1,
                y1,
                color,
            } => {
                for (x, y) in line_points(x0, y0, x1, y1) {
                    self.put(x, y, color);
                }
            }
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.buf
            .save_with_format(path, ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::io(path, std::io::Error::other(other.to_string())),
            })
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `img` as an 8-bit RGB PNG with `overlays` drawn on top.
pub fn encode_png(img: &GrayImage, overlays: &[Overlay], path: impl AsRef<Path>) -> Result<()> {
    let mut canvas = Canvas::from_gray(img);
    for overlay in overlays {
        canvas.draw(overlay);
    }
    canvas.save_png(path)
}

/// Midpoint circle offsets relative to the center, deduplicated.
pub fn circle_points(radius: i64) -> Vec<(i64, i64)> {
    if radius <= 0 {
        return vec![(0, 0)];
    }
    let mut pts = Vec::new();
    let mut x = 0i64;
    let mut y = radius;
    let mut d = 1 - radius;
    while x <= y {
        for (px, py) in [
            (x, y),
            (y, x),
            (-x, y),
            (-y, x),
            (x, -y),
            (y, -x),
            (-x, -y),
            (-y, -x),
        ] {
            pts.push((px, py));
        }
        if d < 0 {
            d += 2 * x + 3;
        } else {
            d += 2 * (x - y) + 5;
            y -= 1;
        }
        x += 1;
    }
    pts.sort_unstable();
    pts.dedup();
    pts
}

/// Bresenham line including both end points.
pub fn line_points(x0: i64, y0: i64, x1: i64, y1: i64) -> Vec<(i64, i64)> {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y) = (x0, y0);
    let mut err = dx + dy;
    let mut pts = Vec::with_capacity((dx - dy) as usize + 1);
    loop {
        pts.push((x, y));
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    pts
}
