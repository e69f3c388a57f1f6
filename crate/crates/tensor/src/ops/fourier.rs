use std::f64::consts::PI;

use crate::element::Element;
use crate::error::Result;
use crate::tensor::Tensor;

/// `cos(2 pi u t / n)` and `sin(2 pi u t / n)` as symmetric `n x n` matrices.
fn twiddles<T: Element>(n: usize) -> (Tensor<T>, Tensor<T>) {
    let mut c = Vec::with_capacity(n * n);
    let mut s = Vec::with_capacity(n * n);
    for u in 0..n {
        for t in 0..n {
            // Reduce the phase index first so large products stay exact.
            let phase = 2.0 * PI * ((u * t) % n) as f64 / n as f64;
            c.push(T::from_f64(phase.cos()));
            s.push(T::from_f64(phase.sin()));
        }
    }
    (
        Tensor::from_vec(c, &[n, n]).expect("square"),
        Tensor::from_vec(s, &[n, n]).expect("square"),
    )
}

impl<T: Element> Tensor<T> {
    /// 2-D DFT over the last two axes, `X[u,v] = sum x[h,w] e^{-2 pi i (uh/H + vw/W)}`,
    /// returned as `(re, im)`.
    ///
    /// Built from products with constant cosine/sine matrices, so gradients
    /// come from the matmul backward.
    pub fn dft2(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let r = self.rank();
        if r < 2 {
            return Err(crate::error::shape_err("dft2", "rank < 2"));
        }
        let (h, w) = (self.shape()[r - 2], self.shape()[r - 1]);
        let (ch, sh) = twiddles::<T>(h);
        let (cw, sw) = twiddles::<T>(w);
        let a = self.matmul(&cw)?;
        let b = self.matmul(&sw)?;
        let re = ch.matmul(&a)?.sub(&sh.matmul(&b)?)?;
        let im = sh.matmul(&a)?.add(&ch.matmul(&b)?)?.neg();
        Ok((re, im))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_dc_only() {
        let x = Tensor::<f64>::full(&[1, 1, 4, 6], 0.5);
        let (re, im) = x.dft2().unwrap();
        assert!((re.data()[0] - 0.5 * 24.0).abs() < 1e-12);
        assert!(re.data()[1..].iter().all(|v| v.abs() < 1e-12));
        assert!(im.data().iter().all(|v| v.abs() < 1e-12));
    }
}
