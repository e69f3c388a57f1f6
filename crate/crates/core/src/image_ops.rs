//! Image-structured operations: pyramids, resampling, edge maps, tiling and luma.

use dpm_tensor::{Element, PadMode, Tensor};

use crate::error::{Error, Result};

/// One-dimensional binomial taps; their outer product is the blur kernel.
const BINOMIAL: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];

/// Five-point Laplacian stencil.
const LAPLACIAN: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];

fn depthwise_kernel<T: Element>(taps: &[f64], k: usize, channels: usize) -> Tensor<T> {
    let data: Vec<f64> = (0..channels).flat_map(|_| taps.iter().copied()).collect();
    Tensor::from_f64_slice(&data, &[channels, 1, k, k]).expect("kernel shape")
}

/// The normalized 5×5 binomial blur, row-major.
pub fn binomial_kernel() -> [f64; 25] {
    let mut k = [0.0; 25];
    for (i, a) in BINOMIAL.iter().enumerate() {
        for (j, b) in BINOMIAL.iter().enumerate() {
            k[i * 5 + j] = a * b / 256.0;
        }
    }
    k
}

/// Blur with the 5×5 binomial kernel under reflect padding, then keep every
/// second pixel starting at index 0.
pub fn gaussian_downsample<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Invalid(format!(
            "gaussian_downsample: extents {h}x{w} must be even"
        )));
    }
    let padded = x.pad2d((2, 2, 2, 2), PadMode::Reflect)?;
    let k = depthwise_kernel::<T>(&binomial_kernel(), 5, c);
    Ok(padded.conv2d(&k, None, 2, 0, c)?)
}

/// Row-stochastic bilinear interpolation matrix `[n*factor, n]` using
/// half-pixel centers (`align_corners = false`).
pub fn bilinear_matrix(n: usize, factor: usize) -> Vec<f64> {
    let m = n * factor;
    let mut u = vec![0.0; m * n];
    for i in 0..m {
        let src = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let l = src - i0 as f64;
        u[i * n + i0] += 1.0 - l;
        u[i * n + i1] += l;
    }
    u
}

/// Separable bilinear upsampling by an integer factor, evaluated as
/// `U_h · x · U_wᵀ` so it differentiates through matmul.
pub fn upsample_bilinear<T: Element>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    if factor == 0 {
        return Err(Error::Invalid(
            "upsample_bilinear: factor must be positive".into(),
        ));
    }
    let uh = Tensor::from_f64_slice(&bilinear_matrix(h, factor), &[h * factor, h])?;
    let uw = Tensor::from_f64_slice(&bilinear_matrix(w, factor), &[w * factor, w])?;
    Ok(uh.matmul(&x.matmul_t(&uw)?)?)
}

/// Per-channel Laplacian under reflect padding.
pub fn laplacian<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4()?;
    let padded = x.pad2d((1, 1, 1, 1), PadMode::Reflect)?;
    let k = depthwise_kernel::<T>(&LAPLACIAN, 3, c);
    Ok(padded.conv2d(&k, None, 1, 0, c)?)
}

/// Non-overlapping tiles of an image tensor in row-major order.
#[derive(Clone, Debug)]
pub struct PatchGrid<T: Element> {
    pub rows: usize,
    pub cols: usize,
    pub patches: Vec<Tensor<T>>,
}

impl<T: Element> PatchGrid<T> {
    pub fn get(&self, row: usize, col: usize) -> &Tensor<T> {
        &self.patches[row * self.cols + col]
    }
}

pub fn split_patches<T: Element>(x: &Tensor<T>, rows: usize, cols: usize) -> Result<PatchGrid<T>> {
    let (_, _, h, w) = x.dims4()?;
    if rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0 {
        return Err(Error::Invalid(format!(
            "split_patches: {h}x{w} is not divisible into {rows}x{cols} tiles"
        )));
    }
    let (ph, pw) = (h / rows, w / cols);
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let band = x.narrow(2, r * ph, ph)?;
        for c in 0..cols {
            patches.push(band.narrow(3, c * pw, pw)?);
        }
    }
    Ok(PatchGrid {
        rows,
        cols,
        patches,
    })
}

pub fn merge_patches<T: Element>(g: &PatchGrid<T>) -> Result<Tensor<T>> {
    if g.rows * g.cols != g.patches.len() || g.patches.is_empty() {
        return Err(Error::Invalid(format!(
            "merge_patches: {} patches for a {}x{} grid",
            g.patches.len(),
            g.rows,
            g.cols
        )));
    }
    let first = g.patches[0].shape();
    if let Some(bad) = g.patches.iter().find(|p| p.shape() != first) {
        return Err(Error::Contract {
            op: "merge_patches",
            lhs: first.to_vec(),
            rhs: bad.shape().to_vec(),
        });
    }
    let bands = g
        .patches
        .chunks(g.cols)
        .map(|row| Tensor::concat(row, 3))
        .collect::<dpm_tensor::Result<Vec<_>>>()?;
    Ok(Tensor::concat(&bands, 2)?)
}

/// Gaussian pyramid; level 0 is the input.
#[derive(Clone, Debug)]
pub struct Pyramid<T: Element> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Element> Pyramid<T> {
    pub fn build(x: &Tensor<T>, depth: usize) -> Result<Self> {
        let mut levels = vec![x.clone()];
        for _ in 0..depth {
            let next = gaussian_downsample(levels.last().expect("non-empty"))?;
            levels.push(next);
        }
        Ok(Pyramid { levels })
    }
}

/// Which luma definition to use for Y-channel metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LumaConvention {
    /// BT.601 mapped to [16, 235]/255, the usual restoration-benchmark plane.
    #[default]
    Studio,
    /// BT.601 weights over the full [0, 1] range.
    Full,
}

impl LumaConvention {
    fn weights(self) -> ([f64; 3], f64) {
        match self {
            LumaConvention::Studio => (
                [65.481 / 255.0, 128.553 / 255.0, 24.966 / 255.0],
                16.0 / 255.0,
            ),
            LumaConvention::Full => ([0.299, 0.587, 0.114], 0.0),
        }
    }
}

/// RGB in [0, 1] to a single luma channel.
pub fn rgb_to_y<T: Element>(x: &Tensor<T>, conv: LumaConvention) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4()?;
    if c != 3 {
        return Err(Error::Invalid(format!(
            "rgb_to_y: expected 3 channels, got {c}"
        )));
    }
    let (w, offset) = conv.weights();
    let k = Tensor::from_f64_slice(&w, &[1, 3, 1, 1])?;
    Ok(x.conv2d(&k, None, 1, 0, 1)?.add_scalar(offset))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, 0.0, 1.0, &mut rng)
    }

    fn reflect(i: isize, n: usize) -> usize {
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

    #[test]
    fn downsample_matches_weighted_sum() {
        let x = rand(&[1, 1, 8, 8], 1);
        let y = gaussian_downsample(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        let k = binomial_kernel();
        for oy in 0..4 {
            for ox in 0..4 {
                let mut acc = 0.0;
                for dy in 0..5 {
                    for dx in 0..5 {
                        let sy = reflect(2 * oy as isize + dy as isize - 2, 8);
                        let sx = reflect(2 * ox as isize + dx as isize - 2, 8);
                        acc += k[dy * 5 + dx] * x.data()[sy * 8 + sx];
                    }
                }
                assert!((y.data()[oy * 4 + ox] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn downsample_preserves_constants_and_rejects_odd() {
        let x = Tensor::<f32>::full(&[1, 3, 64, 64], 0.3);
        let y = gaussian_downsample(&x).unwrap();
        assert_eq!(y.shape(), &[1, 3, 32, 32]);
        assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
        assert!(gaussian_downsample(&Tensor::<f32>::zeros(&[1, 1, 7, 8])).is_err());
    }

    #[test]
    fn upsample_constant_and_ramp() {
        let c = Tensor::<f64>::full(&[1, 3, 16, 16], 0.7);
        let u = upsample_bilinear(&c, 2).unwrap();
        assert_eq!(u.shape(), &[1, 3, 32, 32]);
        assert!(u.data().iter().all(|v| (v - 0.7).abs() < 1e-12));

        // Ramp r(x) = x at sample centers; the ×2 upsample samples it at
        // (i + 0.5)/2 − 0.5 away from the clamped border.
        let ramp: Vec<f64> = (0..8 * 8).map(|i| (i % 8) as f64).collect();
        let r = Tensor::from_vec(ramp, &[1, 1, 8, 8]).unwrap();
        let u = upsample_bilinear(&r, 2).unwrap();
        for y in 0..16 {
            for x in 1..15 {
                let expect = (x as f64 + 0.5) / 2.0 - 0.5;
                assert!((u.data()[y * 16 + x] - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn laplacian_of_affine_and_impulse() {
        let a: Vec<f64> = (0..10 * 12)
            .map(|i| 0.2 + 0.03 * (i / 12) as f64 - 0.05 * (i % 12) as f64)
            .collect();
        let l = laplacian(&Tensor::from_vec(a, &[1, 1, 10, 12]).unwrap()).unwrap();
        for y in 1..9 {
            for x in 1..11 {
                assert!(l.data()[y * 12 + x].abs() < 1e-5);
            }
        }
        let mut imp = vec![0.0; 49];
        imp[3 * 7 + 3] = 1.0;
        let l = laplacian(&Tensor::from_vec(imp, &[1, 1, 7, 7]).unwrap()).unwrap();
        for y in 0..7 {
            for x in 0..7 {
                let (dy, dx) = (y as isize - 3, x as isize - 3);
                let expect = if dy.abs() <= 1 && dx.abs() <= 1 {
                    LAPLACIAN[((dy + 1) * 3 + dx + 1) as usize]
                } else {
                    0.0
                };
                assert_eq!(l.data()[y * 7 + x], expect);
            }
        }
        let c = laplacian(&Tensor::<f32>::full(&[1, 2, 5, 5], 0.4)).unwrap();
        assert!(c.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn patches_round_trip() {
        let x = rand(&[1, 3, 64, 64], 2);
        for (r, c) in [(1, 1), (2, 1), (2, 2)] {
            let g = split_patches(&x, r, c).unwrap();
            assert_eq!(g.patches.len(), r * c);
            assert_eq!(g.patches[0].shape(), &[1, 3, 64 / r, 64 / c]);
            assert_eq!(merge_patches(&g).unwrap().to_vec(), x.to_vec());
        }
        assert!(split_patches(&x, 3, 1).is_err());
        let pair = Tensor::concat(
            &[x.narrow(3, 0, 32).unwrap(), x.narrow(3, 32, 32).unwrap()],
            3,
        );
        assert_eq!(pair.unwrap().shape(), &[1, 3, 64, 64]);
    }

    #[test]
    fn merge_rejects_inconsistent_shapes() {
        let g = PatchGrid {
            rows: 2,
            cols: 1,
            patches: vec![
                Tensor::<f32>::zeros(&[1, 1, 2, 2]),
                Tensor::zeros(&[1, 1, 2, 3]),
            ],
        };
        assert!(merge_patches(&g).is_err());
    }

    #[test]
    fn luma_endpoints_and_gray() {
        let y = |v: f64| {
            let x = Tensor::<f64>::full(&[1, 3, 1, 1], v);
            rgb_to_y(&x, LumaConvention::Studio).unwrap().item()
        };
        assert!((y(0.0) - 16.0 / 255.0).abs() < 1e-6);
        assert!((y(1.0) - 235.0 / 255.0).abs() < 1e-6);
        assert!((y(0.5) - (219.0 * 0.5 + 16.0) / 255.0).abs() < 1e-6);
        assert!(rgb_to_y(&Tensor::<f32>::zeros(&[1, 1, 2, 2]), LumaConvention::Full).is_err());
    }

    #[test]
    fn pyramid_levels_halve() {
        let x = rand(&[1, 3, 32, 32], 3);
        let p = Pyramid::build(&x, 2).unwrap();
        assert_eq!(p.levels[2].shape(), &[1, 3, 8, 8]);
        let direct = gaussian_downsample(&gaussian_downsample(&x).unwrap()).unwrap();
        assert_eq!(p.levels[2].to_vec(), direct.to_vec());
    }
}
