//! Wiener deconvolution for a known blur kernel.
//!
//! The forward blur uses reflect (half-sample symmetric) padding, so the
//! deconvolution runs on the 2Hx2W symmetric extension of the image, where
//! reflect-padded convolution coincides with circular convolution. For
//! symmetric kernels the match is exact, which makes this a closed-form
//! deblurring oracle for the Gaussian known domain.

use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::blur::BlurKernel;
use crate::error::Result;
use crate::image::ImageBuffer;

/// Closed-form frequency-domain deblurrer for a fixed kernel and
/// noise-to-signal ratio.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WienerDeblurrer {
    pub kernel: BlurKernel,
    /// Noise-to-signal ratio; 0 is the exact inverse filter.
    pub nsr: f64,
}

impl WienerDeblurrer {
    pub fn new(kernel: BlurKernel, nsr: f64) -> Self {
        assert!(nsr >= 0.0);
        WienerDeblurrer { kernel, nsr }
    }

    pub fn deblur(&self, img: &ImageBuffer) -> Result<ImageBuffer> {
        let (h, w) = (img.height(), img.width());
        let (eh, ew) = (2 * h, 2 * w);
        let kfreq = kernel_spectrum(&self.kernel, eh, ew);
        let mut out = ImageBuffer::zeros(h, w);
        for c in 0..3 {
            let ext = symmetric_extension(img.channel(c), h, w);
            let mut spec: Vec<Complex64> =
                ext.iter().map(|v| Complex64::new(*v, 0.0)).collect();
            fft2(&mut spec, eh, ew, false);
            for (s, k) in spec.iter_mut().zip(&kfreq) {
                let denom = k.norm_sqr() + self.nsr;
                *s = if denom > 0.0 {
                    *s * k / denom
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            fft2(&mut spec, eh, ew, true);
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x, spec[y * ew + x].re);
                }
            }
        }
        out.clamp01();
        Ok(out)
    }
}

/// Half-sample symmetric extension to 2h x 2w.
fn symmetric_extension(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (eh, ew) = (2 * h, 2 * w);
    let mut out = vec![0.0; eh * ew];
    for y in 0..eh {
        let sy = if y < h { y } else { eh - 1 - y };
        for x in 0..ew {
            let sx = if x < w { x } else { ew - 1 - x };
            out[y * ew + x] = plane[sy * w + sx];
        }
    }
    out
}

/// DFT of the kernel laid out for correlation: tap (p,q) goes to index
/// ((p-c) mod eh, (q-c) mod ew), then conjugated so that multiplication in
/// frequency space matches the spatial correlation used by the forward blur.
fn kernel_spectrum(kernel: &BlurKernel, eh: usize, ew: usize) -> Vec<Complex64> {
    let k = kernel.size();
    let c = (k / 2) as isize;
    let mut grid = vec![Complex64::new(0.0, 0.0); eh * ew];
    for p in 0..k {
        for q in 0..k {
            let y = (p as isize - c).rem_euclid(eh as isize) as usize;
            let x = (q as isize - c).rem_euclid(ew as isize) as usize;
            grid[y * ew + x] += Complex64::new(kernel.get(p, q), 0.0);
        }
    }
    fft2(&mut grid, eh, ew, false);
    for v in &mut grid {
        *v = v.conj();
    }
    grid
}

/// In-place 2-D FFT via row/column 1-D passes. The inverse pass includes the
/// 1/(h*w) normalization.
pub fn fft2(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    assert_eq!(data.len(), h * w);
    let mut planner = FftPlanner::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
    if inverse {
        let scale = 1.0 / (h * w) as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
}
