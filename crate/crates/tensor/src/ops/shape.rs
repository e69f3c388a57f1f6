//! Reshape, permutation, slicing, concatenation, padding and depth/space
//! rearrangement.

use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::tensor::Tensor;

/// Border handling for [`Tensor::pad2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge sample (`-1 -> 1`).
    Reflect,
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[i] = x[src[i]]` for a permutation of axes.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..total {
        idx.push(offset);
        for d in (0..out_shape.len()).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// Index map for one padded axis; `None` marks a zero sample.
fn pad_axis(len: usize, before: usize, after: usize, mode: PadMode) -> Vec<Option<usize>> {
    (0..len + before + after)
        .map(|o| {
            let i = o as isize - before as isize;
            if (0..len as isize).contains(&i) {
                return Some(i as usize);
            }
            match mode {
                PadMode::Zero => None,
                PadMode::Reflect => {
                    let n = len as isize;
                    let period = 2 * (n - 1);
                    let mut j = i.rem_euclid(period.max(1));
                    if j >= n {
                        j = period - j;
                    }
                    Some(j as usize)
                }
            }
        })
        .collect()
}

impl<T: Element> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(TensorError::ElementCount {
                shape: shape.to_vec(),
                expected: n,
                actual: self.numel(),
            });
        }
        Ok(self.share_with_shape(shape.to_vec()))
    }

    /// Reorders axes; `perm[i]` is the input axis that becomes output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        let idx = permute_index(self.shape(), perm);
        let x = self.data();
        let data = idx.iter().map(|&i| x[i]).collect();
        let out_shape = perm.iter().map(|&p| self.shape()[p]).collect();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            move |args| {
                let mut g = vec![T::zero(); idx.len()];
                for (gv, &i) in args.grad.iter().zip(&idx) {
                    g[i] = *gv;
                }
                vec![Some(g)]
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(shape_err("transpose_last", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(shape_err(
                "narrow",
                format!(
                    "range {start}..{} exceeds extent {}",
                    start + len,
                    shape[axis]
                ),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            move |args| {
                let mut g = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    g[base..base + len * inner]
                        .copy_from_slice(&args.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            },
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank,
            });
        }
        for p in parts {
            let ok = p.rank() == rank
                && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        Ok(Tensor::from_op(
            data,
            out_shape,
            parts.to_vec(),
            move |args| {
                let mut grads: Vec<Vec<T>> = lens
                    .iter()
                    .map(|&l| Vec::with_capacity(outer * l * inner))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (g, &l) in grads.iter_mut().zip(&lens) {
                        g.extend_from_slice(&args.grad[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            },
        ))
    }

    /// Pads the last two axes by `(top, bottom, left, right)`.
    pub fn pad2d(&self, pad: (usize, usize, usize, usize), mode: PadMode) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(shape_err("pad2d", "rank < 2"));
        }
        let (top, bottom, left, right) = pad;
        let h = self.shape()[r - 2];
        let w = self.shape()[r - 1];
        if mode == PadMode::Reflect && (top.max(bottom) >= h || left.max(right) >= w) {
            return Err(shape_err(
                "pad2d",
                format!("reflect padding {pad:?} too large for {h}x{w}"),
            ));
        }
        let rows = pad_axis(h, top, bottom, mode);
        let cols = pad_axis(w, left, right, mode);
        let (ho, wo) = (rows.len(), cols.len());
        let planes = self.numel() / (h * w).max(1);
        let x = self.data();
        let mut data = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * ho * wo..(p + 1) * ho * wo];
            for (oy, ry) in rows.iter().enumerate() {
                let Some(iy) = ry else { continue };
                for (ox, rx) in cols.iter().enumerate() {
                    if let Some(ix) = rx {
                        dst[oy * wo + ox] = src[iy * w + ix];
                    }
                }
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            move |args| {
                let mut g = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    let src = &args.grad[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut g[p * h * w..(p + 1) * h * w];
                    for (oy, ry) in rows.iter().enumerate() {
                        let Some(iy) = ry else { continue };
                        for (ox, rx) in cols.iter().enumerate() {
                            if let Some(ix) = rx {
                                dst[iy * w + ix] = dst[iy * w + ix] + src[oy * wo + ox];
                            }
                        }
                    }
                }
                vec![Some(g)]
            },
        ))
    }

    /// Space-to-depth: `[N, C, H, W] -> [N, C*r*r, H/r, W/r]`.
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(shape_err(
                "pixel_unshuffle",
                format!("{h}x{w} not divisible by {r}"),
            ));
        }
        self.reshape(&[n, c, h / r, r, w / r, r])?
            .permute(&[0, 1, 3, 5, 2, 4])?
            .reshape(&[n, c * r * r, h / r, w / r])
    }

    /// Depth-to-space: `[N, C, H, W] -> [N, C/(r*r), H*r, W*r]`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        if r == 0 || c % (r * r) != 0 {
            return Err(shape_err(
                "pixel_shuffle",
                format!("{c} channels not divisible by {}", r * r),
            ));
        }
        let co = c / (r * r);
        self.reshape(&[n, co, r, r, h, w])?
            .permute(&[0, 1, 4, 2, 5, 3])?
            .reshape(&[n, co, h * r, w * r])
    }
}
