//! Independent reference implementations shared by the integration tests and
//! the acceptance suite. Each is the most literal loop form of its quantity.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::PathBuf;

use dpm::data::ImagePair;
use dpm::init::{InitScheme, ParamInit};
use dpm::model::{DpmFormer, ModelConfig};
use dpm::unet::UNetConfig;
use dpm_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

pub fn rand_vec(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64_slice(&rand_vec(n, 0.0, 1.0, seed), shape).unwrap()
}

/// Direct O(N²) 2-D DFT with the `e^{-2πi(uy/H + vx/W)}` kernel.
pub fn brute_dft(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            for y in 0..h {
                for xx in 0..w {
                    let phase =
                        -2.0 * PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                    re[u * w + v] += x[y * w + xx] * phase.cos();
                    im[u * w + v] += x[y * w + xx] * phase.sin();
                }
            }
        }
    }
    (re, im)
}

/// Blur-and-decimate of one plane: 5×5 binomial weights, reflect borders,
/// output pixel (i, j) centred on input (2i, 2j).
pub fn naive_downsample(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let b = [1.0, 4.0, 6.0, 4.0, 1.0];
    let mut out = Vec::with_capacity(h / 2 * w / 2);
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            let mut acc = 0.0;
            for dy in 0..5 {
                for dx in 0..5 {
                    let y = reflect(2 * i as isize + dy as isize - 2, h);
                    let xx = reflect(2 * j as isize + dx as isize - 2, w);
                    acc += b[dy] * b[dx] / 256.0 * x[y * w + xx];
                }
            }
            out.push(acc);
        }
    }
    out
}

/// Four-neighbour Laplacian of one plane with reflect borders.
pub fn naive_laplacian(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, xx: isize| x[reflect(y, h) * w + reflect(xx, w)];
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for xx in 0..w as isize {
            out[y as usize * w + xx as usize] =
                at(y - 1, xx) + at(y + 1, xx) + at(y, xx - 1) + at(y, xx + 1) - 4.0 * at(y, xx);
        }
    }
    out
}

/// Mean SSIM over all 11×11 windows, each evaluated with its own explicit
/// 2-D Gaussian (σ = 1.5) weighted statistics.
pub fn ssim_windows(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = 11usize;
    let mut g = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let d2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
            g[i * k + j] = (-d2 / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for oy in 0..=h - k {
        for ox in 0..=w - k {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let idx = (oy + i) * w + ox + j;
                    ma += g[i * k + j] * a[idx];
                    mb += g[i * k + j] * b[idx];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let idx = (oy + i) * w + ox + j;
                    va += g[i * k + j] * (a[idx] - ma).powi(2);
                    vb += g[i * k + j] * (b[idx] - mb).powi(2);
                    cov += g[i * k + j] * (a[idx] - ma) * (b[idx] - mb);
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Studio-swing BT.601 luma of one RGB pixel in [0, 1].
pub fn studio_luma(r: f64, g: f64, b: f64) -> f64 {
    (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Repository fixture directory.
pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// A very narrow model for fast end-to-end tests.
pub fn tiny_model_config(c: usize) -> ModelConfig {
    ModelConfig {
        backbone: UNetConfig {
            base_channels: c,
            blocks_per_level: [1, 1, 1],
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn model(cfg: &ModelConfig, seed: u64) -> DpmFormer<f32> {
    DpmFormer::new(&ParamInit::new(seed, InitScheme::default()), cfg).unwrap()
}

/// Procedural pairs of side `size` with default rain.
pub fn synthetic_pairs(count: usize, size: usize) -> Vec<ImagePair> {
    dpm::config::SyntheticData {
        count,
        size,
        ..Default::default()
    }
    .generate()
    .unwrap()
}

/// Bitwise snapshot of every parameter.
pub fn param_bits(m: &DpmFormer<f32>) -> Vec<(String, Vec<u32>)> {
    use dpm_tensor::Module;
    m.parameters()
        .iter()
        .map(|p| {
            (
                p.name().to_string(),
                p.value().data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}
