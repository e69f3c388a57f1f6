//! Elementwise unary and (broadcasting) binary ops.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` expressed in the index space of `out`, zero along
/// broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Source offsets of each output element for a broadcast input.
fn broadcast_index(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = broadcast_strides(shape, out);
    let total: usize = out.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; out.len()];
    let mut offset = 0usize;
    for _ in 0..total {
        idx.push(offset);
        for d in (0..out.len()).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out[d] {
                break;
            }
            offset -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// Sums a gradient laid out like `out` back down to `shape`.
fn reduce_to<T: Element>(g: &[T], shape: &[usize], out: &[usize]) -> Vec<T> {
    if shape == out {
        return g.to_vec();
    }
    let n: usize = shape.iter().product();
    let mut acc = vec![T::zero(); n];
    for (gi, src) in g.iter().zip(broadcast_index(shape, out)) {
        acc[src] = acc[src] + *gi;
    }
    acc
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

fn binary<T: Element>(a: &Tensor<T>, b: &Tensor<T>, op: BinOp) -> Result<Tensor<T>> {
    let out_shape = if a.shape() == b.shape() {
        a.shape().to_vec()
    } else {
        broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: op.name(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?
    };
    let same = a.shape() == b.shape();
    let data: Vec<T> = if same {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| op.apply(x, y))
            .collect()
    } else {
        let ia = broadcast_index(a.shape(), &out_shape);
        let ib = broadcast_index(b.shape(), &out_shape);
        let (da, db) = (a.data(), b.data());
        ia.iter()
            .zip(&ib)
            .map(|(&i, &j)| op.apply(da[i], db[j]))
            .collect()
    };
    let os = out_shape.clone();
    Ok(Tensor::from_op(
        data,
        out_shape,
        vec![a.clone(), b.clone()],
        move |args| {
            let (a, b) = (&args.inputs[0], &args.inputs[1]);
            let g = args.grad;
            // Per-output-element partials, then reduced to each input shape.
            let (ga, gb): (Option<Vec<T>>, Option<Vec<T>>) = match op {
                BinOp::Add => (Some(g.to_vec()), Some(g.to_vec())),
                BinOp::Sub => (Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())),
                BinOp::Mul | BinOp::Div => {
                    let ia = broadcast_index(a.shape(), &os);
                    let ib = broadcast_index(b.shape(), &os);
                    let (da, db) = (a.data(), b.data());
                    let ga = a.requires_grad().then(|| {
                        g.iter()
                            .zip(&ib)
                            .map(|(&gv, &j)| match op {
                                BinOp::Mul => gv * db[j],
                                _ => gv / db[j],
                            })
                            .collect()
                    });
                    let gb = b.requires_grad().then(|| {
                        g.iter()
                            .zip(ia.iter().zip(&ib))
                            .map(|(&gv, (&i, &j))| match op {
                                BinOp::Mul => gv * da[i],
                                _ => -gv * da[i] / (db[j] * db[j]),
                            })
                            .collect()
                    });
                    (ga, gb)
                }
            };
            vec![
                ga.filter(|_| a.requires_grad())
                    .map(|g| reduce_to(&g, a.shape(), &os)),
                gb.filter(|_| b.requires_grad())
                    .map(|g| reduce_to(&g, b.shape(), &os)),
            ]
        },
    ))
}

fn unary<T: Element>(
    x: &Tensor<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + Send + Sync + 'static,
) -> Tensor<T> {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(data, x.shape().to_vec(), vec![x.clone()], move |args| {
        let xs = args.inputs[0].data();
        let g = args
            .grad
            .iter()
            .zip(xs.iter().zip(args.output))
            .map(|(&g, (&x, &y))| g * df(x, y))
            .collect();
        vec![Some(g)]
    })
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Div)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<T> {
        let s = T::from_f64(s);
        unary(self, move |v| v + s, |_, _| T::one())
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor<T> {
        let s = T::from_f64(s);
        unary(self, move |v| v * s, move |_, _| s)
    }

    pub fn neg(&self) -> Tensor<T> {
        unary(self, |v| -v, |_, _| -T::one())
    }

    pub fn sqr(&self) -> Tensor<T> {
        unary(self, |v| v * v, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        let half = T::from_f64(0.5);
        unary(self, |v| v.sqrt(), move |_, y| half / y)
    }

    /// Subgradient 0 at the kink.
    pub fn abs(&self) -> Tensor<T> {
        unary(
            self,
            |v| v.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        unary(self, |v| v.exp(), |_, y| y)
    }

    /// Gaussian error linear unit, exact erf form.
    pub fn gelu(&self) -> Tensor<T> {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        unary(
            self,
            move |x| half * x * (T::one() + (x * inv_sqrt2).erf()),
            move |x, _| {
                let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                cdf + x * pdf
            },
        )
    }

    /// Clamps values without gradient flow (used for metric inputs and I/O).
    pub fn clamp_detached(&self, lo: f64, hi: f64) -> Tensor<T> {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        let data = self.data().iter().map(|&v| v.max(lo).min(hi)).collect();
        Tensor::from_vec(data, self.shape()).expect("same shape")
    }
}
