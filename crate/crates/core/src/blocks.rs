//! Channel-attention transformer block: transposed multi-head attention and a
//! gated depth-wise feed-forward, both pre-normalized with residuals.

use dpm_tensor::{impl_module, Element, Parameter, Tensor};

use crate::error::{Error, Result};
use crate::init::ParamInit;

/// Bias-free convolution with "same" padding for odd kernels.
#[derive(Clone, Debug)]
pub struct Conv<T: Element> {
    pub weight: Parameter<T>,
    groups: usize,
}
impl_module!(Conv { weight });

impl<T: Element> Conv<T> {
    pub fn new(init: &ParamInit, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Conv {
            weight: init.conv(name, cout, cin, k),
            groups: 1,
        }
    }

    pub fn depthwise(init: &ParamInit, name: &str, channels: usize, k: usize) -> Self {
        Conv {
            weight: init.conv(name, channels, 1, k),
            groups: channels,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let k = self.weight.shape()[2];
        Ok(x.conv2d(self.weight.value(), None, 1, k / 2, self.groups)?)
    }
}

/// Sphere-normalization floor for queries and keys.
const QK_EPS: f64 = 1e-12;
/// Variance floor of the channel layer norm.
pub const NORM_EPS: f64 = 1e-5;

/// Multi-head attention across channels: each head attends over its
/// `C/heads` channels, so the map is `(C/heads)²` regardless of image size.
#[derive(Clone, Debug)]
pub struct Mdta<T: Element> {
    pub qkv: Conv<T>,
    pub qkv_dw: Conv<T>,
    pub alpha: Parameter<T>,
    pub out: Conv<T>,
    heads: usize,
    qk_l2_normalize: bool,
}
impl_module!(Mdta {
    qkv,
    qkv_dw,
    alpha,
    out
});

impl<T: Element> Mdta<T> {
    pub fn new(
        init: &ParamInit,
        channels: usize,
        heads: usize,
        qk_l2_normalize: bool,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(vec![format!(
                "{channels} channels are not divisible into {heads} heads"
            )]));
        }
        Ok(Mdta {
            qkv: Conv::new(init, "qkv", channels, 3 * channels, 1),
            qkv_dw: Conv::depthwise(init, "qkv_dw", 3 * channels, 3),
            alpha: init.ones("alpha", &[1, heads, 1, 1]),
            out: Conv::new(init, "out", channels, channels, 1),
            heads,
            qk_l2_normalize,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_attention(x)?.0)
    }

    /// Also returns the attention maps, shape `(N, heads, C/heads, C/heads)`.
    pub fn forward_with_attention(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (n, c, h, w) = x.dims4()?;
        let qkv = self.qkv_dw.forward(&self.qkv.forward(x)?)?;
        let ch = c / self.heads;
        let split = |i: usize| -> Result<Tensor<T>> {
            Ok(qkv
                .narrow(1, i * c, c)?
                .reshape(&[n, self.heads, ch, h * w])?)
        };
        let (mut q, mut k, v) = (split(0)?, split(1)?, split(2)?);
        if self.qk_l2_normalize {
            q = q.l2_normalize(3, QK_EPS)?;
            k = k.l2_normalize(3, QK_EPS)?;
        }
        let attn = k.matmul_t(&q)?.div(self.alpha.value())?.softmax(3)?;
        let mixed = attn.matmul(&v)?.reshape(&[n, c, h, w])?;
        Ok((self.out.forward(&mixed)?, attn))
    }
}

/// Gated feed-forward: two expanded depth-wise branches, one GELU-activated,
/// multiplied together and projected back.
#[derive(Clone, Debug)]
pub struct Gdfn<T: Element> {
    pub expand: Conv<T>,
    pub expand_dw: Conv<T>,
    pub project: Conv<T>,
    hidden: usize,
}
impl_module!(Gdfn {
    expand,
    expand_dw,
    project
});

/// Hidden width of the gated feed-forward for a given expansion factor.
pub fn gdfn_hidden(channels: usize, gamma: f64) -> usize {
    ((channels as f64 * gamma).round() as usize).max(1)
}

impl<T: Element> Gdfn<T> {
    pub fn new(init: &ParamInit, channels: usize, gamma: f64) -> Self {
        let hidden = gdfn_hidden(channels, gamma);
        Gdfn {
            expand: Conv::new(init, "expand", channels, 2 * hidden, 1),
            expand_dw: Conv::depthwise(init, "expand_dw", 2 * hidden, 3),
            project: Conv::new(init, "project", hidden, channels, 1),
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let e = self.expand_dw.forward(&self.expand.forward(x)?)?;
        let gate = e.narrow(1, 0, self.hidden)?.gelu();
        let value = e.narrow(1, self.hidden, self.hidden)?;
        self.project.forward(&gate.mul(&value)?)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlock<T: Element> {
    pub norm1: Parameter<T>,
    pub mdta: Mdta<T>,
    pub norm2: Parameter<T>,
    pub gdfn: Gdfn<T>,
}
impl_module!(TransformerBlock {
    norm1,
    mdta,
    norm2,
    gdfn
});

impl<T: Element> TransformerBlock<T> {
    pub fn new(
        init: &ParamInit,
        channels: usize,
        heads: usize,
        gamma: f64,
        qk_l2_normalize: bool,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: init.ones("norm1", &[channels]),
            mdta: Mdta::new(&init.pp("mdta"), channels, heads, qk_l2_normalize)?,
            norm2: init.ones("norm2", &[channels]),
            gdfn: Gdfn::new(&init.pp("gdfn"), channels, gamma),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.add(
            &self
                .mdta
                .forward(&x.layer_norm_channel(self.norm1.value(), NORM_EPS)?)?,
        )?;
        let z = y.add(
            &self
                .gdfn
                .forward(&y.layer_norm_channel(self.norm2.value(), NORM_EPS)?)?,
        )?;
        Ok(z)
    }
}
