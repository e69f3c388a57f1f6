//! Batched matrix products over the two trailing axes.

use crate::element::{gemm, Element, MatRef};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Geometry of a batched product. A rank-2 operand is broadcast over the
/// other operand's batch axes.
#[derive(Clone, Debug)]
struct Plan {
    batch: usize,
    batch_shape: Vec<usize>,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
    /// `b` is stored as `[.., n, k]` and used transposed.
    b_t: bool,
}

fn plan(a: &[usize], b: &[usize], b_t: bool) -> Result<Plan> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = if b_t {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != kb {
        return Err(mismatch());
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch_shape = if ab == bb || bb.is_empty() {
        ab.to_vec()
    } else if ab.is_empty() {
        bb.to_vec()
    } else {
        return Err(mismatch());
    };
    Ok(Plan {
        batch: batch_shape.iter().product(),
        a_batched: !ab.is_empty(),
        b_batched: !bb.is_empty(),
        batch_shape,
        m,
        k,
        n,
        b_t,
    })
}

fn forward<T: Element>(p: &Plan, a: &[T], b: &[T]) -> Vec<T> {
    let (m, k, n) = (p.m, p.k, p.n);
    let mut out = vec![T::zero(); p.batch * m * n];
    for i in 0..p.batch {
        let ai = if p.a_batched {
            &a[i * m * k..(i + 1) * m * k]
        } else {
            a
        };
        let bi = if p.b_batched {
            &b[i * k * n..(i + 1) * k * n]
        } else {
            b
        };
        let bm = if p.b_t {
            MatRef::transposed(bi, k)
        } else {
            MatRef::rows(bi, n)
        };
        gemm(
            m,
            k,
            n,
            T::one(),
            MatRef::rows(ai, k),
            bm,
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    out
}

fn backward<T: Element>(p: &Plan, g: &[T], a: &Tensor<T>, b: &Tensor<T>) -> Vec<Option<Vec<T>>> {
    let (m, k, n) = (p.m, p.k, p.n);
    let (ad, bd) = (a.data(), b.data());
    let ga = a.requires_grad().then(|| {
        let mut ga = vec![T::zero(); ad.len()];
        for i in 0..p.batch {
            let gi = &g[i * m * n..(i + 1) * m * n];
            let bi = if p.b_batched {
                &bd[i * k * n..(i + 1) * k * n]
            } else {
                bd
            };
            // dA = G B^T  (B^T of the effective right operand).
            let bt = if p.b_t {
                MatRef::rows(bi, k)
            } else {
                MatRef::transposed(bi, n)
            };
            let (dst, beta) = if p.a_batched {
                (&mut ga[i * m * k..(i + 1) * m * k], T::zero())
            } else {
                (&mut ga[..], T::one())
            };
            gemm(m, n, k, T::one(), MatRef::rows(gi, n), bt, beta, dst);
        }
        ga
    });
    let gb = b.requires_grad().then(|| {
        let mut gb = vec![T::zero(); bd.len()];
        for i in 0..p.batch {
            let gi = &g[i * m * n..(i + 1) * m * n];
            let ai = if p.a_batched {
                &ad[i * m * k..(i + 1) * m * k]
            } else {
                ad
            };
            let beta = if p.b_batched { T::zero() } else { T::one() };
            let range = if p.b_batched {
                i * k * n..(i + 1) * k * n
            } else {
                0..k * n
            };
            if p.b_t {
                // B stored [n, k]: dB = G^T A.
                gemm(
                    n,
                    m,
                    k,
                    T::one(),
                    MatRef::transposed(gi, n),
                    MatRef::rows(ai, k),
                    beta,
                    &mut gb[range],
                );
            } else {
                // dB = A^T G.
                gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    MatRef::transposed(ai, k),
                    MatRef::rows(gi, n),
                    beta,
                    &mut gb[range],
                );
            }
        }
        gb
    });
    vec![ga, gb]
}

fn matmul_impl<T: Element>(a: &Tensor<T>, b: &Tensor<T>, b_t: bool) -> Result<Tensor<T>> {
    let p = plan(a.shape(), b.shape(), b_t)?;
    let data = forward(&p, a.data(), b.data());
    let mut shape = p.batch_shape.clone();
    shape.extend([p.m, p.n]);
    Ok(Tensor::from_op(
        data,
        shape,
        vec![a.clone(), b.clone()],
        move |args| backward(&p, args.grad, &args.inputs[0], &args.inputs[1]),
    ))
}

impl<T: Element> Tensor<T> {
    /// `self @ other` over the trailing two axes.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        matmul_impl(self, other, false)
    }

    /// `self @ other^T` over the trailing two axes, without materializing
    /// the transpose.
    pub fn matmul_t(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        matmul_impl(self, other, true)
    }
}
