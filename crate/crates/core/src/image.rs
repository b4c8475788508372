//! Image representation, multi-scale pyramids, camera response curves, and
//! full-reference / no-reference quality metrics.
//!
//! Intensities live in `[0,1]`, three channels, planar layout. Clamping is
//! always explicit; no public operation silently clips values.

use std::path::Path;

use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 8;

/// BT.601 luminance weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// H x W x 3 intensity array in [0,1], planar channel layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(
            height >= MIN_SIDE && width >= MIN_SIDE,
            "image sides must be >= {MIN_SIDE}"
        );
        ImageBuffer {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        let mut img = Self::zeros(height, width);
        img.data.fill(value);
        img
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut img = Self::zeros(height, width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    img.data[c * height * width + y * width + x] = f(c, y, x);
                }
            }
        }
        img
    }

    /// Build from planar data (c-major). Length must be `h*w*3`.
    pub fn from_planar(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * 3);
        assert!(height >= MIN_SIDE && width >= MIN_SIDE);
        ImageBuffer {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[c * self.height * self.width + y * self.width + x] = v;
    }

    /// One planar channel as a slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn is_in_range(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// BT.601 luminance plane, row-major H x W.
    pub fn luminance(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; n];
        for c in 0..3 {
            let w = LUMA_WEIGHTS[c];
            for (o, v) in out.iter_mut().zip(&self.data[c * n..(c + 1) * n]) {
                *o += w * v;
            }
        }
        out
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn check_same_shape(&self, other: &ImageBuffer) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// Half-sample symmetric reflection: index -1 maps to 0, n maps to n-1.
#[inline]
pub fn reflect_idx(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

// ---------------------------------------------------------------------------
// Pyramids
// ---------------------------------------------------------------------------

/// Ordered list of images; level 1 is the source, each further level the
/// area-average half-resolution of the previous.
#[derive(Debug, Clone)]
pub struct ImagePyramid {
    levels: Vec<ImageBuffer>,
}

impl ImagePyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, i: usize) -> &ImageBuffer {
        &self.levels[i]
    }

    pub fn levels(&self) -> &[ImageBuffer] {
        &self.levels
    }
}

/// Area-average downsampling by 2. Odd trailing rows/columns average over the
/// pixels that actually exist.
pub fn downsample_half(img: &ImageBuffer) -> ImageBuffer {
    let (h, w) = (img.height(), img.width());
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; oh * ow * 3];
    for c in 0..3 {
        let src = img.channel(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let y0 = oy * 2;
                let x0 = ox * 2;
                let y1 = (y0 + 2).min(h);
                let x1 = (x0 + 2).min(w);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += src[y * w + x];
                    }
                }
                out[c * oh * ow + oy * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    ImageBuffer::from_planar(oh, ow, out)
}

pub fn build_pyramid(img: &ImageBuffer, m: usize) -> Result<ImagePyramid> {
    assert!(m >= 1, "pyramid needs at least one level");
    let mut levels = vec![img.clone()];
    for i in 1..m {
        let prev = &levels[i - 1];
        if prev.height() / 2 < MIN_SIDE || prev.width() / 2 < MIN_SIDE {
            return Err(Error::PyramidTooDeep(format!(
                "level {} of {} would be {}x{}",
                i + 1,
                m,
                prev.height().div_ceil(2),
                prev.width().div_ceil(2)
            )));
        }
        levels.push(downsample_half(prev));
    }
    Ok(ImagePyramid { levels })
}

// ---------------------------------------------------------------------------
// Camera response
// ---------------------------------------------------------------------------

/// Gamma-curve camera response; `apply` maps linear radiance to pixel values.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraResponse {
    pub gamma: f64,
}

impl CameraResponse {
    pub fn identity() -> Self {
        CameraResponse { gamma: 1.0 }
    }

    pub fn new(gamma: f64) -> Self {
        assert!(gamma > 0.0, "gamma must be positive");
        CameraResponse { gamma }
    }

    /// Radiance -> pixel value: v^(1/gamma).
    pub fn apply_value(&self, v: f64) -> f64 {
        v.powf(1.0 / self.gamma)
    }

    /// Pixel value -> radiance: v^gamma.
    pub fn invert_value(&self, v: f64) -> f64 {
        v.powf(self.gamma)
    }
}

pub fn crf_apply(img: &ImageBuffer, crf: &CameraResponse) -> ImageBuffer {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = crf.apply_value(*v);
    }
    out
}

pub fn crf_invert(img: &ImageBuffer, crf: &CameraResponse) -> ImageBuffer {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = crf.invert_value(*v);
    }
    out
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

pub const PSNR_CAP_DB: f64 = 100.0;

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_same_shape(b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.data().len() as f64)
}

/// PSNR in dB with peak 1.0, capped at 100 dB.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean local SSIM over 11x11 Gaussian windows (sigma 1.5) on the BT.601
/// luminance plane, constants K1=0.01, K2=0.03, dynamic range 1.0. Windows are
/// evaluated only where they fit entirely inside the image.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_same_shape(b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall(format!(
            "ssim needs min side {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let la = a.luminance();
    let lb = b.luminance();
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut acc = 0.0;
    let mut count = 0usize;
    for oy in 0..=(h - SSIM_WINDOW) {
        for ox in 0..=(w - SSIM_WINDOW) {
            let (mut ma, mut mb) = (0.0, 0.0);
            let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let g = win[wy * SSIM_WINDOW + wx];
                    let va = la[(oy + wy) * w + ox + wx];
                    let vb = lb[(oy + wy) * w + ox + wx];
                    ma += g * va;
                    mb += g * vb;
                    saa += g * va * va;
                    sbb += g * vb * vb;
                    sab += g * va * vb;
                }
            }
            let var_a = saa - ma * ma;
            let var_b = sbb - mb * mb;
            let cov = sab - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
            acc += s;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Variance of the 4-neighbor Laplacian response on the luminance plane,
/// reflect-padded.
pub fn laplacian_variance(img: &ImageBuffer) -> Result<f64> {
    let (h, w) = (img.height(), img.width());
    if h < 3 || w < 3 {
        return Err(Error::TooSmall(format!(
            "laplacian needs at least 3x3, got {h}x{w}"
        )));
    }
    let lum = img.luminance();
    let at = |y: isize, x: isize| lum[reflect_idx(y, h) * w + reflect_idx(x, w)];
    let n = h * w;
    let mut responses = Vec::with_capacity(n);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let r = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
            responses.push(r);
        }
    }
    let mean = responses.iter().sum::<f64>() / n as f64;
    Ok(responses.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64)
}

// ---------------------------------------------------------------------------
// PNG I/O
// ---------------------------------------------------------------------------

/// Decode an 8-bit PNG; values map [0,255] -> [0,1] by division by 255.
pub fn read_png(path: &Path) -> Result<ImageBuffer> {
    let dynimg = image::open(path).map_err(|e| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = dynimg.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::TooSmall(format!("png {h}x{w} at {}", path.display())));
    }
    let mut img = ImageBuffer::zeros(h, w);
    for (y, x, p) in rgb.enumerate_pixels().map(|(x, y, p)| (y as usize, x as usize, p)) {
        for c in 0..3 {
            img.set(c, y, x, p.0[c] as f64 / 255.0);
        }
    }
    Ok(img)
}

/// Encode to 8-bit PNG; rounds half-up after scaling by 255.
pub fn write_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = (img.get(c, y, x) * 255.0 + 0.5).floor().clamp(0.0, 255.0);
                px[c] = v as u8;
            }
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save(path).map_err(|e| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
