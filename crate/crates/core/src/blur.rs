//! Parametric blur domains, the forward blur model, frame-averaging
//! synthesis, and kernel estimation/transfer.
//!
//! A blur domain is a distribution over convolution kernels plus a noise
//! level and camera response. Two synthetic domains stand in for the unknown
//! and known camera domains; kernels are always exactly known in synthetic
//! mode, which gives every downstream stage an oracle.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{reflect_idx, CameraResponse, ImageBuffer};

/// Odd-sided 2-D convolution kernel; nonnegative weights summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
}

impl BlurKernel {
    pub fn from_weights(size: usize, mut weights: Vec<f64>) -> Self {
        assert!(size % 2 == 1, "kernel side must be odd");
        assert_eq!(weights.len(), size * size);
        assert!(weights.iter().all(|w| *w >= 0.0));
        let sum: f64 = weights.iter().sum();
        assert!(sum > 0.0, "kernel must have positive mass");
        for w in &mut weights {
            *w /= sum;
        }
        BlurKernel { size, weights }
    }

    pub fn delta() -> Self {
        BlurKernel {
            size: 1,
            weights: vec![1.0],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.weights[p * self.size + q]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Truncated discrete Gaussian; sigma 0 gives the delta kernel.
    pub fn gaussian(sigma: f64) -> Self {
        if sigma <= 0.0 {
            return Self::delta();
        }
        let radius = (3.0 * sigma).ceil() as usize;
        Self::gaussian_with_size(2 * radius + 1, sigma)
    }

    pub fn gaussian_with_size(size: usize, sigma: f64) -> Self {
        assert!(size % 2 == 1);
        if sigma <= 0.0 {
            let mut w = vec![0.0; size * size];
            w[(size / 2) * size + size / 2] = 1.0;
            return BlurKernel { size, weights: w };
        }
        let c = (size / 2) as f64;
        let mut w = vec![0.0; size * size];
        for p in 0..size {
            for q in 0..size {
                let dy = p as f64 - c;
                let dx = q as f64 - c;
                w[p * size + q] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
        Self::from_weights(size, w)
    }

    /// Linear motion kernel: `length` unit-weight samples at integer spacing
    /// along the direction `angle_deg`, bilinearly splatted. Length 1 is the
    /// delta kernel; length 5 at angle 0 is a 1x5 box embedded in the grid.
    pub fn linear_motion(length: usize, angle_deg: f64) -> Self {
        assert!(length >= 1);
        if length == 1 {
            return Self::delta();
        }
        let half = (length - 1) as f64 / 2.0;
        let radius = half.ceil() as usize + 1;
        let size = 2 * radius + 1;
        let theta = angle_deg.to_radians();
        let (dy, dx) = (theta.sin(), theta.cos());
        let mut w = vec![0.0; size * size];
        for i in 0..length {
            let t = i as f64 - half;
            splat_bilinear(&mut w, size, t * dy, t * dx, 1.0 / length as f64);
        }
        Self::from_weights(size, w)
    }

    /// Random-walk trajectory kernel: `steps` points of a centered walk, each
    /// splatted with equal mass.
    pub fn trajectory(steps: usize, step_sigma: f64, rng: &mut ChaCha8Rng) -> Self {
        assert!(steps >= 1);
        let normal = Normal::new(0.0, step_sigma).unwrap();
        let mut ys = vec![0.0f64];
        let mut xs = vec![0.0f64];
        for _ in 1..steps {
            ys.push(ys.last().unwrap() + normal.sample(rng));
            xs.push(xs.last().unwrap() + normal.sample(rng));
        }
        let my = ys.iter().sum::<f64>() / steps as f64;
        let mx = xs.iter().sum::<f64>() / steps as f64;
        for v in &mut ys {
            *v -= my;
        }
        for v in &mut xs {
            *v -= mx;
        }
        let extent = ys
            .iter()
            .chain(xs.iter())
            .fold(0.0f64, |a, v| a.max(v.abs()));
        let radius = extent.ceil() as usize + 1;
        let size = 2 * radius + 1;
        let mut w = vec![0.0; size * size];
        for i in 0..steps {
            splat_bilinear(&mut w, size, ys[i], xs[i], 1.0 / steps as f64);
        }
        Self::from_weights(size, w)
    }

    /// Zero-pad to a larger odd side, keeping the center fixed.
    pub fn embedded(&self, size: usize) -> Self {
        assert!(size % 2 == 1 && size >= self.size);
        let off = (size - self.size) / 2;
        let mut w = vec![0.0; size * size];
        for p in 0..self.size {
            for q in 0..self.size {
                w[(p + off) * size + q + off] = self.get(p, q);
            }
        }
        BlurKernel { size, weights: w }
    }

    /// L2 distance between kernels after embedding both in a common side.
    pub fn l2_distance(&self, other: &BlurKernel) -> f64 {
        let size = self.size.max(other.size);
        let a = self.embedded(size);
        let b = other.embedded(size);
        a.weights
            .iter()
            .zip(&b.weights)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}

fn splat_bilinear(w: &mut [f64], size: usize, y: f64, x: f64, mass: f64) {
    let c = (size / 2) as f64;
    let fy = y + c;
    let fx = x + c;
    let y0 = fy.floor() as isize;
    let x0 = fx.floor() as isize;
    let wy = fy - y0 as f64;
    let wx = fx - x0 as f64;
    for (dy, dx, frac) in [
        (0, 0, (1.0 - wy) * (1.0 - wx)),
        (0, 1, (1.0 - wy) * wx),
        (1, 0, wy * (1.0 - wx)),
        (1, 1, wy * wx),
    ] {
        let yy = y0 + dy;
        let xx = x0 + dx;
        assert!(
            yy >= 0 && yy < size as isize && xx >= 0 && xx < size as isize,
            "splat outside kernel support"
        );
        w[yy as usize * size + xx as usize] += mass * frac;
    }
}

// ---------------------------------------------------------------------------
// Domain specs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BlurFamily {
    LinearMotion {
        length_range: (usize, usize),
        angle_range_deg: (f64, f64),
    },
    Gaussian {
        sigma_range: (f64, f64),
    },
    FrameAverageTrajectory {
        steps_range: (usize, usize),
        step_sigma: f64,
    },
}

/// A parametric blur domain: kernel family plus noise level and camera
/// response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurDomainSpec {
    pub family: BlurFamily,
    pub noise_sigma: f64,
    pub crf: CameraResponse,
}

impl BlurDomainSpec {
    /// Default unknown domain C: linear motion, length 7-15 px, any angle.
    pub fn default_unknown() -> Self {
        BlurDomainSpec {
            family: BlurFamily::LinearMotion {
                length_range: (7, 15),
                angle_range_deg: (0.0, 180.0),
            },
            noise_sigma: 0.01,
            crf: CameraResponse::identity(),
        }
    }

    /// Default known domain C': Gaussian, sigma 1.0-2.0.
    pub fn default_known() -> Self {
        BlurDomainSpec {
            family: BlurFamily::Gaussian {
                sigma_range: (1.0, 2.0),
            },
            noise_sigma: 0.01,
            crf: CameraResponse::identity(),
        }
    }

    fn validate(&self) -> Result<()> {
        match &self.family {
            BlurFamily::LinearMotion {
                length_range: (lo, hi),
                angle_range_deg: (alo, ahi),
            } => {
                if lo > hi || *lo == 0 {
                    return Err(Error::InvalidRange(format!("motion length {lo}..{hi}")));
                }
                if alo > ahi {
                    return Err(Error::InvalidRange(format!("motion angle {alo}..{ahi}")));
                }
            }
            BlurFamily::Gaussian {
                sigma_range: (lo, hi),
            } => {
                if lo > hi || *lo < 0.0 {
                    return Err(Error::InvalidRange(format!("gaussian sigma {lo}..{hi}")));
                }
            }
            BlurFamily::FrameAverageTrajectory {
                steps_range: (lo, hi),
                step_sigma,
            } => {
                if lo > hi || *lo == 0 {
                    return Err(Error::InvalidRange(format!("trajectory steps {lo}..{hi}")));
                }
                if *step_sigma < 0.0 {
                    return Err(Error::InvalidRange("negative step sigma".into()));
                }
            }
        }
        Ok(())
    }

    /// A single kernel representative of the family, used to configure the
    /// Wiener deblurrer: parameters at the midpoint of their ranges (angle 0
    /// for motion).
    pub fn representative_kernel(&self) -> Result<BlurKernel> {
        self.validate()?;
        Ok(match &self.family {
            BlurFamily::LinearMotion {
                length_range: (lo, hi),
                ..
            } => BlurKernel::linear_motion((lo + hi) / 2, 0.0),
            BlurFamily::Gaussian {
                sigma_range: (lo, hi),
            } => BlurKernel::gaussian((lo + hi) / 2.0),
            BlurFamily::FrameAverageTrajectory { steps_range, .. } => {
                // a gaussian of comparable footprint; trajectories have no
                // canonical mean kernel
                BlurKernel::gaussian((steps_range.0 + steps_range.1) as f64 / 8.0)
            }
        })
    }
}

pub fn sample_kernel_with(spec: &BlurDomainSpec, rng: &mut ChaCha8Rng) -> Result<BlurKernel> {
    spec.validate()?;
    Ok(match &spec.family {
        BlurFamily::LinearMotion {
            length_range: (lo, hi),
            angle_range_deg: (alo, ahi),
        } => {
            let length = rng.gen_range(*lo..=*hi);
            let angle = if alo == ahi {
                *alo
            } else {
                rng.gen_range(*alo..*ahi)
            };
            BlurKernel::linear_motion(length, angle)
        }
        BlurFamily::Gaussian {
            sigma_range: (lo, hi),
        } => {
            let sigma = if lo == hi { *lo } else { rng.gen_range(*lo..*hi) };
            BlurKernel::gaussian(sigma)
        }
        BlurFamily::FrameAverageTrajectory {
            steps_range: (lo, hi),
            step_sigma,
        } => {
            let steps = rng.gen_range(*lo..=*hi);
            BlurKernel::trajectory(steps, *step_sigma, rng)
        }
    })
}

/// Deterministic kernel draw from a seed.
pub fn sample_kernel(spec: &BlurDomainSpec, seed: u64) -> Result<BlurKernel> {
    sample_kernel_with(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Mean pairwise kernel L2 between two domains, a domain-distance
/// diagnostic computed over `n` sampled kernels per domain.
pub fn domain_distance(a: &BlurDomainSpec, b: &BlurDomainSpec, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ka: Vec<_> = (0..n)
        .map(|_| sample_kernel_with(a, &mut rng))
        .collect::<Result<_>>()?;
    let kb: Vec<_> = (0..n)
        .map(|_| sample_kernel_with(b, &mut rng))
        .collect::<Result<_>>()?;
    let mut acc = 0.0;
    for x in &ka {
        for y in &kb {
            acc += x.l2_distance(y);
        }
    }
    Ok(acc / (n * n) as f64)
}

// ---------------------------------------------------------------------------
// Forward model
// ---------------------------------------------------------------------------

/// 2-D correlation-style convolution with reflect (half-sample symmetric)
/// padding, plus i.i.d. Gaussian noise, clamped to [0,1]. Deterministic for a
/// given seed.
pub fn apply_blur(
    x: &ImageBuffer,
    kernel: &BlurKernel,
    noise_sigma: f64,
    seed: u64,
) -> Result<ImageBuffer> {
    let (h, w) = (x.height(), x.width());
    let k = kernel.size();
    if k > h || k > w {
        return Err(Error::KernelTooLarge {
            kernel: k,
            height: h,
            width: w,
        });
    }
    let c0 = (k / 2) as isize;
    let mut out = ImageBuffer::zeros(h, w);
    for c in 0..3 {
        let src = x.channel(c);
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for p in 0..k {
                    let sy = reflect_idx(y as isize + p as isize - c0, h);
                    let row = &src[sy * w..(sy + 1) * w];
                    for q in 0..k {
                        let sx = reflect_idx(xx as isize + q as isize - c0, w);
                        acc += kernel.get(p, q) * row[sx];
                    }
                }
                out.set(c, y, xx, acc);
            }
        }
    }
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).unwrap();
        for v in out.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    out.clamp01();
    Ok(out)
}

/// Average frames in inverse-CRF (linear radiance) space, then re-apply the
/// CRF: `crf(mean(crf^-1(frame_i)))`.
pub fn frame_average_blur(frames: &[ImageBuffer], crf: &CameraResponse) -> Result<ImageBuffer> {
    let first = frames
        .first()
        .ok_or_else(|| Error::EmptyInput("frame_average_blur".into()))?;
    let mut acc = vec![0.0f64; first.data().len()];
    for f in frames {
        if !f.same_shape(first) {
            return Err(Error::ShapeMismatch("frame dims differ".into()));
        }
        for (a, v) in acc.iter_mut().zip(f.data()) {
            *a += crf.invert_value(*v);
        }
    }
    let n = frames.len() as f64;
    let mut out = first.clone();
    for (o, a) in out.data_mut().iter_mut().zip(&acc) {
        *o = crf.apply_value(a / n);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Pairs, estimation, transfer
// ---------------------------------------------------------------------------

/// A blurry/sharp pair; in synthetic mode the ground-truth kernel rides
/// along.
#[derive(Debug, Clone)]
pub struct BlurPair {
    pub blurry: ImageBuffer,
    pub sharp: ImageBuffer,
    pub kernel: Option<BlurKernel>,
}

impl BlurPair {
    pub fn synthetic(
        sharp: ImageBuffer,
        kernel: BlurKernel,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        let blurry = apply_blur(&sharp, &kernel, noise_sigma, seed)?;
        Ok(BlurPair {
            blurry,
            sharp,
            kernel: Some(kernel),
        })
    }
}

/// Tikhonov-regularized least-squares kernel estimate:
/// `argmin ||x * k - y||^2 + lambda ||k||^2` over the interior region where
/// the kernel support fits, then projected to nonnegative weights and
/// renormalized to sum 1.
pub fn estimate_kernel(pair: &BlurPair, support: usize, ridge: f64) -> Result<BlurKernel> {
    assert!(support % 2 == 1, "support must be odd");
    let x = &pair.sharp;
    let y = &pair.blurry;
    if !x.same_shape(y) {
        return Err(Error::ShapeMismatch("pair images differ in size".into()));
    }
    let (h, w) = (x.height(), x.width());
    assert!(
        support <= h.min(w) / 2,
        "support {support} too large for {h}x{w}"
    );
    let mean = x.mean();
    let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.data().len() as f64;
    if var < 1e-10 {
        return Err(Error::DegenerateSharpImage);
    }
    let s = support;
    let c = s / 2;
    let n = s * s;
    // normal equations over all three channels, interior pixels only
    let mut ata = DMatrix::<f64>::zeros(n, n);
    let mut aty = DVector::<f64>::zeros(n);
    let mut patch = vec![0.0f64; n];
    for ch in 0..3 {
        let xs = x.channel(ch);
        let ys = y.channel(ch);
        for iy in c..h - c {
            for ix in c..w - c {
                for p in 0..s {
                    let row = &xs[(iy + p - c) * w..(iy + p - c + 1) * w];
                    for q in 0..s {
                        patch[p * s + q] = row[ix + q - c];
                    }
                }
                let target = ys[iy * w + ix];
                for a in 0..n {
                    let pa = patch[a];
                    aty[a] += pa * target;
                    // symmetric; fill upper triangle
                    for b in a..n {
                        ata[(a, b)] += pa * patch[b];
                    }
                }
            }
        }
    }
    for a in 0..n {
        for b in 0..a {
            ata[(a, b)] = ata[(b, a)];
        }
        ata[(a, a)] += ridge;
    }
    let sol = ata
        .cholesky()
        .ok_or_else(|| Error::NonFinite("kernel normal equations not SPD".into()))?
        .solve(&aty);
    let weights: Vec<f64> = sol.iter().map(|v| v.max(0.0)).collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::NonFinite("estimated kernel has no positive mass".into()));
    }
    Ok(BlurKernel::from_weights(s, weights))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMode {
    /// Reuse the ground-truth kernel carried by the source pair.
    Exact,
    /// Estimate the kernel from the pair by regularized least squares.
    Estimated,
}

pub const DEFAULT_ESTIMATE_SUPPORT: usize = 9;
pub const DEFAULT_ESTIMATE_RIDGE: f64 = 1e-6;

/// Re-blur `sharp` with the kernel of `source_pair`, carrying the known
/// domain's blur onto the sharp image's content.
pub fn transfer_kernel(
    sharp: &ImageBuffer,
    source_pair: &BlurPair,
    mode: TransferMode,
    noise_sigma: f64,
    seed: u64,
) -> Result<ImageBuffer> {
    let kernel = match mode {
        TransferMode::Exact => source_pair
            .kernel
            .clone()
            .ok_or_else(|| Error::UnconfiguredModel("exact transfer needs a ground-truth kernel".into()))?,
        TransferMode::Estimated => {
            estimate_kernel(source_pair, DEFAULT_ESTIMATE_SUPPORT, DEFAULT_ESTIMATE_RIDGE)?
        }
    };
    apply_blur(sharp, &kernel, noise_sigma, seed)
}

/// Plain-text kernel matrix: first line the side length, then rows of
/// weights. Used to store ground-truth kernels alongside datasets.
pub fn kernel_to_text(k: &BlurKernel) -> String {
    let mut out = format!("{}\n", k.size());
    for p in 0..k.size() {
        let row: Vec<String> = (0..k.size()).map(|q| format!("{:.17e}", k.get(p, q))).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn kernel_from_text(text: &str) -> Result<BlurKernel> {
    let mut lines = text.lines();
    let size: usize = lines
        .next()
        .and_then(|l| l.trim().parse().ok())
        .ok_or_else(|| Error::Serde("kernel text: missing size".into()))?;
    let mut weights = Vec::with_capacity(size * size);
    for line in lines.take(size) {
        for tok in line.split_whitespace() {
            weights.push(
                tok.parse::<f64>()
                    .map_err(|e| Error::Serde(format!("kernel text: {e}")))?,
            );
        }
    }
    if weights.len() != size * size {
        return Err(Error::Serde("kernel text: wrong element count".into()));
    }
    Ok(BlurKernel::from_weights(size, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{build_pyramid, laplacian_variance};
    use approx::assert_abs_diff_eq;

    fn texture(h: usize, w: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = ImageBuffer::zeros(h, w);
        for v in img.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        // mild smoothing keeps the texture natural while leaving a rich
        // spectrum for kernel identification
        let smooth = apply_blur(&img, &BlurKernel::gaussian_with_size(3, 0.6), 0.0, 0).unwrap();
        smooth
    }

    #[test]
    fn gaussian_sigma_zero_is_delta() {
        let spec = BlurDomainSpec {
            family: BlurFamily::Gaussian {
                sigma_range: (0.0, 0.0),
            },
            noise_sigma: 0.0,
            crf: CameraResponse::identity(),
        };
        let k = sample_kernel(&spec, 7).unwrap();
        assert_eq!(k, BlurKernel::delta());
    }

    #[test]
    fn motion_length_one_is_delta() {
        assert_eq!(BlurKernel::linear_motion(1, 37.0), BlurKernel::delta());
    }

    #[test]
    fn motion_length_five_horizontal_is_box() {
        let k = BlurKernel::linear_motion(5, 0.0);
        let c = k.size() / 2;
        for p in 0..k.size() {
            for q in 0..k.size() {
                let expected = if p == c && q >= c - 2 && q <= c + 2 {
                    0.2
                } else {
                    0.0
                };
                assert_abs_diff_eq!(k.get(p, q), expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sampled_kernels_are_normalized() {
        let specs = [
            BlurDomainSpec::default_unknown(),
            BlurDomainSpec::default_known(),
            BlurDomainSpec {
                family: BlurFamily::FrameAverageTrajectory {
                    steps_range: (4, 16),
                    step_sigma: 0.8,
                },
                noise_sigma: 0.0,
                crf: CameraResponse::identity(),
            },
        ];
        for spec in &specs {
            for seed in 0..1000 {
                let k = sample_kernel(spec, seed).unwrap();
                assert!(k.weights().iter().all(|w| *w >= 0.0));
                assert_abs_diff_eq!(k.sum(), 1.0, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn invalid_range_rejected() {
        let spec = BlurDomainSpec {
            family: BlurFamily::LinearMotion {
                length_range: (9, 3),
                angle_range_deg: (0.0, 90.0),
            },
            noise_sigma: 0.0,
            crf: CameraResponse::identity(),
        };
        assert!(matches!(sample_kernel(&spec, 0), Err(Error::InvalidRange(_))));
    }

    #[test]
    fn delta_blur_is_identity() {
        let img = texture(16, 16, 1);
        let out = apply_blur(&img, &BlurKernel::delta(), 0.0, 0).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn constant_image_unchanged_by_any_kernel() {
        let img = ImageBuffer::constant(16, 16, 0.42);
        let k = BlurKernel::gaussian(1.5);
        let out = apply_blur(&img, &k, 0.0, 0).unwrap();
        for v in out.data() {
            assert_abs_diff_eq!(*v, 0.42, epsilon = 1e-9);
        }
    }

    #[test]
    fn box_blur_matches_nested_loop_oracle() {
        let img = ImageBuffer::from_fn(8, 8, |c, y, x| ((c + 1) * (y * 8 + x)) as f64 / 192.0);
        let k = BlurKernel::from_weights(3, vec![1.0; 9]);
        let out = apply_blur(&img, &k, 0.0, 0).unwrap();
        for c in 0..3 {
            for y in 0..8isize {
                for x in 0..8isize {
                    let mut acc = 0.0;
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            acc += img.get(c, reflect_idx(y + dy, 8), reflect_idx(x + dx, 8)) / 9.0;
                        }
                    }
                    assert_abs_diff_eq!(out.get(c, y as usize, x as usize), acc, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn kernel_too_large_rejected() {
        let img = ImageBuffer::zeros(8, 8);
        let k = BlurKernel::gaussian_with_size(9, 2.0);
        assert!(matches!(
            apply_blur(&img, &k, 0.0, 0),
            Err(Error::KernelTooLarge { .. })
        ));
    }

    #[test]
    fn blur_is_linear_in_image() {
        let a = texture(16, 16, 2);
        let b = texture(16, 16, 3);
        let k = BlurKernel::linear_motion(5, 30.0);
        let alpha = 0.3;
        let mix = ImageBuffer::from_fn(16, 16, |c, y, x| {
            alpha * a.get(c, y, x) + (1.0 - alpha) * b.get(c, y, x)
        });
        let lhs = apply_blur(&mix, &k, 0.0, 0).unwrap();
        let ba = apply_blur(&a, &k, 0.0, 0).unwrap();
        let bb = apply_blur(&b, &k, 0.0, 0).unwrap();
        for i in 0..lhs.data().len() {
            assert_abs_diff_eq!(
                lhs.data()[i],
                alpha * ba.data()[i] + (1.0 - alpha) * bb.data()[i],
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn frame_average_identity_and_linear_mean() {
        let f = texture(8, 8, 4);
        let avg = frame_average_blur(&[f.clone()], &CameraResponse::new(2.2)).unwrap();
        for (a, b) in avg.data().iter().zip(f.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
        let zeros = ImageBuffer::constant(8, 8, 0.0);
        let ones = ImageBuffer::constant(8, 8, 1.0);
        let mid = frame_average_blur(&[zeros, ones], &CameraResponse::identity()).unwrap();
        for v in mid.data() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn frame_average_crf_weighted_mean() {
        let a = ImageBuffer::constant(8, 8, 0.2);
        let b = ImageBuffer::constant(8, 8, 0.8);
        let crf = CameraResponse::new(2.2);
        let out = frame_average_blur(&[a, b], &crf).unwrap();
        let expected = ((0.2f64.powf(2.2) + 0.8f64.powf(2.2)) / 2.0).powf(1.0 / 2.2);
        for v in out.data() {
            assert_abs_diff_eq!(*v, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn frame_average_rejects_empty_and_mismatched() {
        assert!(matches!(
            frame_average_blur(&[], &CameraResponse::identity()),
            Err(Error::EmptyInput(_))
        ));
        let a = ImageBuffer::zeros(8, 8);
        let b = ImageBuffer::zeros(8, 10);
        assert!(matches!(
            frame_average_blur(&[a, b], &CameraResponse::identity()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn estimate_recovers_delta() {
        let sharp = texture(32, 32, 5);
        let pair = BlurPair::synthetic(sharp, BlurKernel::delta(), 0.0, 0).unwrap();
        let est = estimate_kernel(&pair, 5, 1e-8).unwrap();
        assert!(est.l2_distance(&BlurKernel::delta()) < 1e-3);
    }

    #[test]
    fn estimate_recovers_gaussian() {
        let sharp = texture(48, 48, 6);
        let truth = BlurKernel::gaussian_with_size(5, 1.0);
        let pair = BlurPair::synthetic(sharp, truth.clone(), 0.0, 0).unwrap();
        let est = estimate_kernel(&pair, 5, 1e-6).unwrap();
        assert!(est.l2_distance(&truth) < 1e-3, "err {}", est.l2_distance(&truth));
    }

    #[test]
    fn estimate_recovers_all_families() {
        let sharp = texture(64, 64, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let kernels = vec![
            BlurKernel::linear_motion(7, 63.0),
            BlurKernel::gaussian_with_size(7, 1.3),
            BlurKernel::trajectory(8, 0.7, &mut rng),
        ];
        for truth in kernels {
            let support = truth.size().max(7);
            let pair = BlurPair::synthetic(sharp.clone(), truth.clone(), 0.0, 0).unwrap();
            let est = estimate_kernel(&pair, support, 1e-8).unwrap();
            let truth_emb = truth.embedded(support);
            assert!(
                est.l2_distance(&truth_emb) < 1e-3,
                "family kernel err {}",
                est.l2_distance(&truth_emb)
            );
        }
    }

    #[test]
    fn estimate_rejects_constant_sharp() {
        let sharp = ImageBuffer::constant(32, 32, 0.5);
        let blurry = sharp.clone();
        let pair = BlurPair {
            blurry,
            sharp,
            kernel: None,
        };
        assert!(matches!(
            estimate_kernel(&pair, 5, 1e-6),
            Err(Error::DegenerateSharpImage)
        ));
    }

    #[test]
    fn transfer_exact_delta_is_identity() {
        let sharp = texture(16, 16, 8);
        let src = BlurPair::synthetic(texture(16, 16, 9), BlurKernel::delta(), 0.0, 0).unwrap();
        let out = transfer_kernel(&sharp, &src, TransferMode::Exact, 0.0, 0).unwrap();
        assert_eq!(out, sharp);
    }

    #[test]
    fn transfer_exact_matches_direct_blur() {
        let sharp = texture(24, 24, 10);
        let k = BlurKernel::gaussian_with_size(5, 1.2);
        let src = BlurPair::synthetic(texture(24, 24, 11), k.clone(), 0.0, 0).unwrap();
        let out = transfer_kernel(&sharp, &src, TransferMode::Exact, 0.0, 0).unwrap();
        let direct = apply_blur(&sharp, &k, 0.0, 0).unwrap();
        assert_eq!(crate::image::psnr(&out, &direct).unwrap(), 100.0);
    }

    #[test]
    fn transfer_estimated_close_to_exact() {
        let sharp = texture(48, 48, 12);
        let k = BlurKernel::gaussian_with_size(5, 1.1);
        let src = BlurPair::synthetic(texture(48, 48, 13), k, 0.0, 0).unwrap();
        let exact = transfer_kernel(&sharp, &src, TransferMode::Exact, 0.0, 0).unwrap();
        let est = transfer_kernel(&sharp, &src, TransferMode::Estimated, 0.0, 0).unwrap();
        assert!(crate::image::psnr(&est, &exact).unwrap() >= 40.0);
    }

    #[test]
    fn blur_lowers_laplacian_variance() {
        let mut ok = 0;
        let total = 40;
        for seed in 0..total {
            let img = texture(24, 24, 100 + seed);
            let spec = BlurDomainSpec::default_unknown();
            let k = sample_kernel(&spec, seed).unwrap();
            let blurred = apply_blur(&img, &k, 0.0, 0).unwrap();
            if laplacian_variance(&blurred).unwrap() < laplacian_variance(&img).unwrap() {
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.95 * total as f64, "only {ok}/{total} trials");
    }

    #[test]
    fn pyramid_of_blurred_image_stays_in_range() {
        let img = texture(32, 32, 14);
        let k = BlurKernel::linear_motion(9, 120.0);
        let blurred = apply_blur(&img, &k, 0.02, 99).unwrap();
        assert!(blurred.is_in_range());
        let pyr = build_pyramid(&blurred, 2).unwrap();
        assert!(pyr.level(1).is_in_range());
    }

    #[test]
    fn kernel_text_roundtrip() {
        let k = BlurKernel::linear_motion(7, 45.0);
        let back = kernel_from_text(&kernel_to_text(&k)).unwrap();
        assert!(k.l2_distance(&back) < 1e-12);
    }

    #[test]
    fn domain_distance_positive_between_defaults() {
        let d = domain_distance(
            &BlurDomainSpec::default_unknown(),
            &BlurDomainSpec::default_known(),
            8,
            0,
        )
        .unwrap();
        assert!(d > 0.0);
    }
}
