//! 2-D cross-correlation over NCHW tensors.
//!
//! Dense and grouped convolutions lower to im2col + GEMM; depth-wise
//! convolutions (one input channel per group) use direct loops. Padding is
//! zero padding; callers wanting reflect padding pad explicitly first.

use crate::element::{gemm, Element, MatRef};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn col_rows(&self) -> usize {
        self.cin_g() * self.k * self.k
    }
    fn pixels(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
    fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.cout == self.cin
    }
}

/// Output index range `[lo, hi)` along one axis for which the input
/// coordinate `o * stride + kk - pad` lands inside `[0, len)`.
#[inline]
fn valid_range(kk: usize, pad: usize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    // o * stride >= pad - kk
    let lo = if kk >= pad {
        0
    } else {
        (pad - kk).div_ceil(stride)
    };
    // o * stride + kk - pad <= len - 1
    let hi = if len + pad > kk {
        ((len + pad - kk - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Fills `cols` (`cin_g*k*k` x `ho*wo`) from one group of one sample.
fn im2col<T: Element>(g: &Geom, x: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let (ho, wo) = (g.ho, g.wo);
    for c in 0..g.cin_g() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let (ylo, yhi) = valid_range(ky, p, s, g.h, ho);
            for kx in 0..k {
                let (xlo, xhi) = valid_range(kx, p, s, g.w, wo);
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                dst.fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * s + ky - p;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if s == 1 {
                        let ix0 = xlo + kx - p;
                        drow[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            drow[ox] = src[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into one group of one sample's input gradient.
fn col2im<T: Element>(g: &Geom, cols: &[T], gx: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let (ho, wo) = (g.ho, g.wo);
    for c in 0..g.cin_g() {
        let plane = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let (ylo, yhi) = valid_range(ky, p, s, g.h, ho);
            for kx in 0..k {
                let (xlo, xhi) = valid_range(kx, p, s, g.w, wo);
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in ylo..yhi {
                    let iy = oy * s + ky - p;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for ox in xlo..xhi {
                        let ix = ox * s + kx - p;
                        dst[ix] = dst[ix] + srow[ox];
                    }
                }
            }
        }
    }
}

fn dense_forward<T: Element>(g: &Geom, x: &[T], w: &[T]) -> Vec<T> {
    let (cin_g, cout_g, kk, px) = (g.cin_g(), g.cout_g(), g.col_rows(), g.pixels());
    let mut out = vec![T::zero(); g.n * g.cout * px];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * px]
    };
    for n in 0..g.n {
        for gi in 0..g.groups {
            let xs = &x[(n * g.cin + gi * cin_g) * g.h * g.w..][..cin_g * g.h * g.w];
            let colm = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut cols);
                &cols[..]
            };
            let ws = &w[gi * cout_g * kk..(gi + 1) * cout_g * kk];
            let dst = &mut out[(n * g.cout + gi * cout_g) * px..][..cout_g * px];
            gemm(
                cout_g,
                kk,
                px,
                T::one(),
                MatRef::rows(ws, kk),
                MatRef::rows(colm, px),
                T::zero(),
                dst,
            );
        }
    }
    out
}

fn dense_backward<T: Element>(
    g: &Geom,
    x: &[T],
    w: &[T],
    gy: &[T],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (cin_g, cout_g, kk, px) = (g.cin_g(), g.cout_g(), g.col_rows(), g.pixels());
    let mut gx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = want_w.then(|| vec![T::zero(); w.len()]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * px]
    };
    let mut gcols = if g.is_pointwise() || !want_x {
        Vec::new()
    } else {
        vec![T::zero(); kk * px]
    };
    for n in 0..g.n {
        for gi in 0..g.groups {
            let xoff = (n * g.cin + gi * cin_g) * g.h * g.w;
            let xs = &x[xoff..xoff + cin_g * g.h * g.w];
            let ws = &w[gi * cout_g * kk..(gi + 1) * cout_g * kk];
            let gys = &gy[(n * g.cout + gi * cout_g) * px..][..cout_g * px];
            if let Some(gw) = gw.as_mut() {
                let colm = if g.is_pointwise() {
                    xs
                } else {
                    im2col(g, xs, &mut cols);
                    &cols[..]
                };
                // dW += dY cols^T
                gemm(
                    cout_g,
                    px,
                    kk,
                    T::one(),
                    MatRef::rows(gys, px),
                    MatRef::transposed(colm, px),
                    T::one(),
                    &mut gw[gi * cout_g * kk..(gi + 1) * cout_g * kk],
                );
            }
            if let Some(gx) = gx.as_mut() {
                let gxs = &mut gx[xoff..xoff + cin_g * g.h * g.w];
                if g.is_pointwise() {
                    gemm(
                        kk,
                        cout_g,
                        px,
                        T::one(),
                        MatRef::transposed(ws, kk),
                        MatRef::rows(gys, px),
                        T::zero(),
                        gxs,
                    );
                } else {
                    gemm(
                        kk,
                        cout_g,
                        px,
                        T::one(),
                        MatRef::transposed(ws, kk),
                        MatRef::rows(gys, px),
                        T::zero(),
                        &mut gcols,
                    );
                    col2im(g, &gcols, gxs);
                }
            }
        }
    }
    (gx, gw)
}

fn depthwise_forward<T: Element>(g: &Geom, x: &[T], w: &[T]) -> Vec<T> {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let (ho, wo) = (g.ho, g.wo);
    let mut out = vec![T::zero(); g.n * g.cout * ho * wo];
    for n in 0..g.n {
        for c in 0..g.cin {
            let plane = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let dst = &mut out[(n * g.cout + c) * ho * wo..][..ho * wo];
            let wk = &w[c * k * k..(c + 1) * k * k];
            for ky in 0..k {
                let (ylo, yhi) = valid_range(ky, p, s, g.h, ho);
                for kx in 0..k {
                    let (xlo, xhi) = valid_range(kx, p, s, g.w, wo);
                    let wv = wk[ky * k + kx];
                    for oy in ylo..yhi {
                        let iy = oy * s + ky - p;
                        let src = &plane[iy * g.w..(iy + 1) * g.w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            let off = kx as isize - p as isize;
                            for ox in xlo..xhi {
                                drow[ox] = drow[ox] + wv * src[(ox as isize + off) as usize];
                            }
                        } else {
                            for ox in xlo..xhi {
                                drow[ox] = drow[ox] + wv * src[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn depthwise_backward<T: Element>(
    g: &Geom,
    x: &[T],
    w: &[T],
    gy: &[T],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let (ho, wo) = (g.ho, g.wo);
    let mut gx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = want_w.then(|| vec![T::zero(); w.len()]);
    for n in 0..g.n {
        for c in 0..g.cin {
            let poff = (n * g.cin + c) * g.h * g.w;
            let gplane = &gy[(n * g.cout + c) * ho * wo..][..ho * wo];
            for ky in 0..k {
                let (ylo, yhi) = valid_range(ky, p, s, g.h, ho);
                for kx in 0..k {
                    let (xlo, xhi) = valid_range(kx, p, s, g.w, wo);
                    let widx = c * k * k + ky * k + kx;
                    let wv = w[widx];
                    let mut acc = T::zero();
                    for oy in ylo..yhi {
                        let iy = oy * s + ky - p;
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        if want_w {
                            let src = &x[poff + iy * g.w..poff + (iy + 1) * g.w];
                            for ox in xlo..xhi {
                                acc = acc + grow[ox] * src[ox * s + kx - p];
                            }
                        }
                        if let Some(gx) = gx.as_mut() {
                            let dst = &mut gx[poff + iy * g.w..poff + (iy + 1) * g.w];
                            for ox in xlo..xhi {
                                let ix = ox * s + kx - p;
                                dst[ix] = dst[ix] + wv * grow[ox];
                            }
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[widx] = gw[widx] + acc;
                    }
                }
            }
        }
    }
    (gx, gw)
}

impl<T: Element> Tensor<T> {
    /// Cross-correlation of `self` (`[N, Cin, H, W]`) with `weight`
    /// (`[Cout, Cin/groups, k, k]`), optional `bias` (`[Cout]`), zero padding.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor<T>> {
        let (n, cin, h, w) = self.dims4()?;
        let param_err = || TensorError::ParamShape {
            op: "conv2d",
            param: weight.shape().to_vec(),
            input: self.shape().to_vec(),
        };
        let [cout, cin_g, kh, kw] = *weight.shape() else {
            return Err(param_err());
        };
        if groups == 0
            || stride == 0
            || cin % groups != 0
            || cout % groups != 0
            || cin_g * groups != cin
            || kh != kw
        {
            return Err(param_err());
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(TensorError::ParamShape {
                    op: "conv2d",
                    param: b.shape().to_vec(),
                    input: self.shape().to_vec(),
                });
            }
        }
        let k = kh;
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(crate::error::shape_err(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{w}"),
            ));
        }
        let g = Geom {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad: padding,
            groups,
            ho: (h + 2 * padding - k) / stride + 1,
            wo: (w + 2 * padding - k) / stride + 1,
        };
        let mut data = if g.is_depthwise() {
            depthwise_forward(&g, self.data(), weight.data())
        } else {
            dense_forward(&g, self.data(), weight.data())
        };
        let px = g.pixels();
        if let Some(b) = bias {
            for (i, chunk) in data.chunks_mut(px).enumerate() {
                let bv = b.data()[i % cout];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Ok(Tensor::from_op(
            data,
            vec![n, cout, g.ho, g.wo],
            inputs,
            move |args| {
                let (x, w) = (&args.inputs[0], &args.inputs[1]);
                let (gx, gw) = if g.is_depthwise() {
                    depthwise_backward(
                        &g,
                        x.data(),
                        w.data(),
                        args.grad,
                        x.requires_grad(),
                        w.requires_grad(),
                    )
                } else {
                    dense_backward(
                        &g,
                        x.data(),
                        w.data(),
                        args.grad,
                        x.requires_grad(),
                        w.requires_grad(),
                    )
                };
                let mut out = vec![gx, gw];
                if let Some(b) = args.inputs.get(2) {
                    let gb = b.requires_grad().then(|| {
                        let mut gb = vec![T::zero(); g.cout];
                        for (i, chunk) in args.grad.chunks(px).enumerate() {
                            gb[i % g.cout] = gb[i % g.cout] + chunk.iter().copied().sum::<T>();
                        }
                        gb
                    });
                    out.push(gb);
                }
                out
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop reference.
    fn naive(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Vec<f64> {
        let (n, cin, h, wd) = x.dims4().unwrap();
        let [cout, cin_g, k, _] = *w.shape() else {
            unreachable!()
        };
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let cout_g = cout / groups;
        let mut out = vec![0.0; n * cout * ho * wo];
        for b in 0..n {
            for co in 0..cout {
                let gi = co / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            let c = gi * cin_g + ci;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((b * cin + c) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((co * cin_g + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((b * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn matches_naive_reference() {
        let cases = [
            // (cin, cout, k, stride, pad, groups, h, w)
            (3, 5, 3, 1, 1, 1, 6, 7),
            (4, 4, 3, 1, 1, 4, 5, 5),
            (4, 4, 5, 2, 2, 4, 8, 8),
            (4, 6, 1, 1, 0, 1, 3, 4),
            (4, 6, 3, 2, 0, 2, 7, 9),
            (2, 2, 3, 1, 0, 1, 3, 3),
        ];
        for (i, &(cin, cout, k, s, p, g, h, w)) in cases.iter().enumerate() {
            let x = rand(&[2, cin, h, w], i as u64);
            let wt = rand(&[cout, cin / g, k, k], 100 + i as u64);
            let y = x.conv2d(&wt, None, s, p, g).unwrap();
            let r = naive(&x, &wt, s, p, g);
            for (a, b) in y.data().iter().zip(&r) {
                assert!((a - b).abs() < 1e-12, "case {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn impulse_reproduces_kernel_unflipped() {
        let mut xv = vec![0.0; 9];
        xv[4] = 1.0;
        let x = Tensor::<f64>::from_vec(xv, &[1, 1, 3, 3]).unwrap();
        let kernel: Vec<f64> = (1..=9).map(f64::from).collect();
        let w = Tensor::from_vec(kernel, &[1, 1, 3, 3]).unwrap();
        let y = x.conv2d(&w, None, 1, 1, 1).unwrap();
        // Cross-correlation of a centred impulse gives the kernel rotated by 180 degrees.
        assert_eq!(y.to_vec(), vec![9., 8., 7., 6., 5., 4., 3., 2., 1.]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
        let w = Tensor::<f32>::ones(&[7, 3, 3, 3]);
        let b = Tensor::<f32>::zeros(&[7]);
        let y = x.conv2d(&w, Some(&b), 1, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 7, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_param_error() {
        let x = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
        let w = Tensor::<f32>::zeros(&[4, 2, 3, 3]);
        assert!(matches!(
            x.conv2d(&w, None, 1, 1, 1),
            Err(TensorError::ParamShape { .. })
        ));
    }

    #[test]
    fn bias_adds_per_channel() {
        let x = Tensor::<f64>::zeros(&[2, 1, 2, 2]);
        let w = Tensor::<f64>::zeros(&[2, 1, 1, 1]);
        let b = Tensor::from_vec(vec![1.5, -2.0], &[2]).unwrap();
        let y = x.conv2d(&w, Some(&b), 1, 0, 1).unwrap();
        assert_eq!(
            y.to_vec()[..8],
            [1.5, 1.5, 1.5, 1.5, -2.0, -2.0, -2.0, -2.0]
        );
    }
}
