use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// `(outer, len, inner)` decomposition around `axis`.
fn split_at_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

impl<T: Element> Tensor<T> {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = split_at_axis(self.shape(), axis, "softmax")?;
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let m = (0..len).map(|a| x[at(a)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for a in 0..len {
                    let e = (x[at(a)] - m).exp();
                    y[at(a)] = e;
                    s = s + e;
                }
                for a in 0..len {
                    y[at(a)] = y[at(a)] / s;
                }
            }
        }
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            move |args| {
                let (g, y) = (args.grad, args.output);
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot = (0..len).map(|a| g[at(a)] * y[at(a)]).sum::<T>();
                        for a in 0..len {
                            gx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// `x / max(||x||_2, eps)` along `axis`.
    pub fn l2_normalize(&self, axis: usize, eps: f64) -> Result<Tensor<T>> {
        let (outer, len, inner) = split_at_axis(self.shape(), axis, "l2_normalize")?;
        let eps = T::from_f64(eps);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let nrm = (0..len).map(|a| x[at(a)] * x[at(a)]).sum::<T>().sqrt();
                norms[o * inner + i] = nrm;
                let d = nrm.max(eps);
                for a in 0..len {
                    y[at(a)] = x[at(a)] / d;
                }
            }
        }
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            move |args| {
                let (g, y) = (args.grad, args.output);
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let nrm = norms[o * inner + i];
                        if nrm > eps {
                            let dot = (0..len).map(|a| g[at(a)] * y[at(a)]).sum::<T>();
                            for a in 0..len {
                                gx[at(a)] = (g[at(a)] - y[at(a)] * dot) / nrm;
                            }
                        } else {
                            for a in 0..len {
                                gx[at(a)] = g[at(a)] / eps;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Bias-free layer norm across the channel axis of an NCHW tensor:
    /// each spatial location is normalized to zero mean and unit variance
    /// over channels (variance floored by `eps`), then scaled by `gamma[c]`.
    pub fn layer_norm_channel(&self, gamma: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        if gamma.shape() != [c] {
            return Err(TensorError::ParamShape {
                op: "layer_norm_channel",
                param: gamma.shape().to_vec(),
                input: self.shape().to_vec(),
            });
        }
        let hw = h * w;
        let eps = T::from_f64(eps);
        let inv_c = T::from_f64(1.0 / c as f64);
        let x = self.data();
        let gm = gamma.data();
        let mut y = vec![T::zero(); x.len()];
        // Per-location mean and reciprocal std, kept for the backward pass.
        let mut mean = vec![T::zero(); n * hw];
        let mut rstd = vec![T::zero(); n * hw];
        for b in 0..n {
            let xb = &x[b * c * hw..(b + 1) * c * hw];
            let mu = &mut mean[b * hw..(b + 1) * hw];
            for ch in 0..c {
                for (m, &v) in mu.iter_mut().zip(&xb[ch * hw..(ch + 1) * hw]) {
                    *m = *m + v;
                }
            }
            mu.iter_mut().for_each(|m| *m = *m * inv_c);
            let rs = &mut rstd[b * hw..(b + 1) * hw];
            for ch in 0..c {
                for ((r, &v), &m) in rs
                    .iter_mut()
                    .zip(&xb[ch * hw..(ch + 1) * hw])
                    .zip(mu.iter())
                {
                    let d = v - m;
                    *r = *r + d * d;
                }
            }
            rs.iter_mut()
                .for_each(|r| *r = T::one() / (*r * inv_c + eps).sqrt());
            let yb = &mut y[b * c * hw..(b + 1) * c * hw];
            for ch in 0..c {
                let gv = gm[ch];
                let src = &xb[ch * hw..(ch + 1) * hw];
                let dst = &mut yb[ch * hw..(ch + 1) * hw];
                for p in 0..hw {
                    dst[p] = (src[p] - mu[p]) * rs[p] * gv;
                }
            }
        }
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone()],
            move |args| {
                let (xt, gt) = (&args.inputs[0], &args.inputs[1]);
                let (x, gm, g) = (xt.data(), gt.data(), args.grad);
                let mut gx = xt.requires_grad().then(|| vec![T::zero(); x.len()]);
                let mut ggamma = vec![T::zero(); c];
                let mut s1 = vec![T::zero(); hw];
                let mut s2 = vec![T::zero(); hw];
                for b in 0..n {
                    let mu = &mean[b * hw..(b + 1) * hw];
                    let rs = &rstd[b * hw..(b + 1) * hw];
                    s1.fill(T::zero());
                    s2.fill(T::zero());
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        let gv = gm[ch];
                        let mut acc = T::zero();
                        for p in 0..hw {
                            let xhat = (x[off + p] - mu[p]) * rs[p];
                            let gy = g[off + p];
                            acc = acc + gy * xhat;
                            let gh = gy * gv;
                            s1[p] = s1[p] + gh;
                            s2[p] = s2[p] + gh * xhat;
                        }
                        ggamma[ch] = ggamma[ch] + acc;
                    }
                    if let Some(gx) = gx.as_mut() {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let gv = gm[ch];
                            for p in 0..hw {
                                let xhat = (x[off + p] - mu[p]) * rs[p];
                                let gh = g[off + p] * gv;
                                gx[off + p] = rs[p] * (gh - s1[p] * inv_c - xhat * s2[p] * inv_c);
                            }
                        }
                    }
                }
                vec![gx, gt.requires_grad().then_some(ggamma)]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_hand_case() {
        let x = Tensor::<f64>::full(&[2, 4], 3.0);
        assert!(x
            .softmax(1)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-15));
        let y = Tensor::<f64>::from_vec(vec![0.0, 3f64.ln()], &[2])
            .unwrap()
            .softmax(0)
            .unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_inputs_stay_finite() {
        let x = Tensor::<f32>::from_vec(vec![1000.0, 1000.0], &[2]).unwrap();
        assert_eq!(x.softmax(0).unwrap().to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn l2_normalize_unit_norm_and_zero_vector() {
        let x = Tensor::<f64>::from_vec(vec![3.0, 4.0, 0.0, 0.0], &[2, 2]).unwrap();
        let y = x.l2_normalize(1, 1e-12).unwrap().to_vec();
        assert_eq!(y, vec![0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_constant_channels_is_zero() {
        let x = Tensor::<f64>::full(&[1, 5, 2, 2], 7.0);
        let g = Tensor::ones(&[5]);
        let y = x.layer_norm_channel(&g, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_rejects_wrong_gamma() {
        let x = Tensor::<f32>::zeros(&[1, 5, 2, 2]);
        assert!(x.layer_norm_channel(&Tensor::ones(&[4]), 1e-5).is_err());
    }
}
