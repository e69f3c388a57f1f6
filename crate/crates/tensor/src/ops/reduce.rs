use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

impl<T: Element> Tensor<T> {
    /// Sum of all elements as a rank-0 tensor, accumulated in compensated
    /// f64 arithmetic.
    pub fn sum(&self) -> Tensor<T> {
        let s = T::from_f64(accumulate(self.data()));
        let n = self.numel();
        Tensor::from_op(vec![s], vec![], vec![self.clone()], move |args| {
            vec![Some(vec![args.grad[0]; n])]
        })
    }

    /// Mean of all elements. The division happens in f64 before rounding, so
    /// a constant f32 tensor has a mean exactly equal to its value.
    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        let m = T::from_f64(accumulate(self.data()) / n as f64);
        let numel = self.numel();
        Tensor::from_op(vec![m], vec![], vec![self.clone()], move |args| {
            let g = T::from_f64(args.grad[0].as_f64() / n as f64);
            vec![Some(vec![g; numel])]
        })
    }

    /// Sum along `axis`; the axis is kept with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "sum_axis",
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            move |args| {
                let mut g = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        g[(o * len + a) * inner..(o * len + a + 1) * inner]
                            .copy_from_slice(&args.grad[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(g)]
            },
        ))
    }
}

/// Neumaier-compensated sum in f64.
fn accumulate<T: Element>(xs: &[T]) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for &x in xs {
        let x = x.as_f64();
        let t = s + x;
        c += if s.abs() >= x.abs() {
            (s - t) + x
        } else {
            (x - t) + s
        };
        s = t;
    }
    s + c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_grad_is_ones() {
        let x = Tensor::<f64>::from_vec((0..6).map(f64::from).collect(), &[2, 3])
            .unwrap()
            .to_leaf();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().to_vec(), vec![1.0; 6]);
    }

    #[test]
    fn sum_axis_values() {
        let x = Tensor::<f64>::from_vec((0..6).map(f64::from).collect(), &[2, 3]).unwrap();
        assert_eq!(x.sum_axis(0).unwrap().to_vec(), vec![3., 5., 7.]);
        assert_eq!(x.sum_axis(1).unwrap().to_vec(), vec![3., 12.]);
        assert_eq!(x.sum_axis(1).unwrap().shape(), &[2, 1]);
        assert!(x.sum_axis(2).is_err());
    }
}
