//! Y-channel PSNR and SSIM.

use dpm_tensor::{Element, Tensor};

use crate::error::{Error, Result};
use crate::image_ops::{rgb_to_y, LumaConvention};

/// SSIM window side.
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

/// Per-image luma planes of a `[N, 3, H, W]` batch in f64, values clipped to
/// [0, 1] first.
fn luma_planes<T: Element>(
    x: &Tensor<T>,
    conv: LumaConvention,
) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    let (n, _, h, w) = x.dims4()?;
    let y = rgb_to_y(&x.clamp_detached(0.0, 1.0), conv)?;
    let data = y.to_f64_vec();
    Ok((
        data.chunks(h * w).take(n).map(<[f64]>::to_vec).collect(),
        h,
        w,
    ))
}

fn check_pair<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// PSNR in dB on a pair of luma planes with peak 1; `+∞` when identical.
pub fn psnr_plane(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Mean over the batch of per-image Y-channel PSNR.
pub fn psnr_y<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    psnr_y_with(pred, target, LumaConvention::Studio)
}

pub fn psnr_y_with<T: Element>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    conv: LumaConvention,
) -> Result<f64> {
    check_pair("psnr_y", pred, target)?;
    let (a, _, _) = luma_planes(pred, conv)?;
    let (b, _, _) = luma_planes(target, conv)?;
    let vals: Vec<f64> = a.iter().zip(&b).map(|(x, y)| psnr_plane(x, y)).collect();
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Normalized 1-D Gaussian taps for the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-mode separable filtering of an `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..k).map(|i| g[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..k).map(|i| g[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean SSIM over every fully-contained window of two planes.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "ssim: image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let g = gaussian_taps();
    let f = |v: &[f64]| filter_valid(v, h, w, &g);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mu_a, mu_b) = (f(a), f(b));
    let (aa, bb, ab) = (f(&prod(a, a)), f(&prod(b, b)), f(&prod(a, b)));
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean over the batch of per-image Y-channel SSIM.
pub fn ssim_y<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    ssim_y_with(pred, target, LumaConvention::Studio)
}

pub fn ssim_y_with<T: Element>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    conv: LumaConvention,
) -> Result<f64> {
    check_pair("ssim_y", pred, target)?;
    let (a, h, w) = luma_planes(pred, conv)?;
    let (b, _, _) = luma_planes(target, conv)?;
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(&b) {
        acc += ssim_plane(x, y, h, w)?;
    }
    Ok(acc / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_rgb(v: f64) -> Tensor<f64> {
        Tensor::full(&[1, 3, 8, 8], v)
    }

    #[test]
    fn psnr_fixtures() {
        // A uniform RGB step of s moves studio luma by 219·s/255.
        let s = |dy: f64| dy * 255.0 / 219.0;
        let base = uniform_rgb(0.0);
        let p = psnr_y(&uniform_rgb(s(0.5)), &base).unwrap();
        assert!((p - 6.0206).abs() < 1e-3, "{p}");
        let q = psnr_y(&uniform_rgb(s(0.25)), &base).unwrap();
        assert!((q - 12.0412).abs() < 1e-3, "{q}");
        assert_eq!(psnr_y(&base, &base).unwrap(), f64::INFINITY);
        assert!(psnr_y(&base, &Tensor::zeros(&[1, 3, 8, 9])).is_err());
    }

    #[test]
    fn ssim_identity_and_size_contract() {
        let x: Vec<f64> = (0..3 * 16 * 16)
            .map(|i| ((i * 7919) % 97) as f64 / 97.0)
            .collect();
        let x = Tensor::from_vec(x, &[1, 3, 16, 16]).unwrap();
        assert!((ssim_y(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let small = Tensor::<f64>::zeros(&[1, 3, 10, 16]);
        assert!(ssim_y(&small, &small).is_err());
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let g = gaussian_taps();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(g[i], g[SSIM_WINDOW - 1 - i]);
        }
    }
}
