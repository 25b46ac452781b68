//! Image quality metrics: PSNR and SSIM over [0,1] float images.

use crate::imgio::ImageRgbF;
use crate::{Error, Result};

/// PSNR ceiling reported when the MSE underflows 1e-10.
pub const PSNR_CLAMP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio in dB for images in [0,1].
pub fn psnr(a: &ImageRgbF, b: &ImageRgbF) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch(format!(
            "psnr inputs {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mut mse = 0.0;
    for (pa, pb) in a.data.iter().zip(b.data.iter()) {
        for ch in 0..3 {
            let d = pa[ch] - pb[ch];
            mse += d * d;
        }
    }
    mse /= (a.data.len() * 3) as f64;
    if mse < 1e-10 {
        Ok(PSNR_CLAMP_DB)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// evaluated where the window fits entirely, averaged over RGB channels.
pub fn ssim(a: &ImageRgbF, b: &ImageRgbF) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch(format!(
            "ssim inputs {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!(
            "ssim needs at least {0}x{0} images",
            SSIM_WINDOW
        )));
    }
    let kernel = ssim_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let half = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        for row in half..a.height - half {
            for col in half..a.width - half {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for (ki, kv_i) in kernel.iter().enumerate() {
                    let r = row + ki - half;
                    for (kj, kv_j) in kernel.iter().enumerate() {
                        let c = col + kj - half;
                        let w = kv_i * kv_j;
                        let va = a.get(r, c)[ch];
                        let vb = b.get(r, c)[ch];
                        mu_a += w * va;
                        mu_b += w * vb;
                        aa += w * va * va;
                        bb += w * vb * vb;
                        ab += w * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
