//! Composite training objective with deep supervision.

use dpm_tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_ops::{gaussian_downsample, laplacian, split_patches};
use crate::model::ModelOutput;

/// Term weights and the Charbonnier smoothing constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Pixel Charbonnier weight.
    pub lambda1: f64,
    /// Laplacian edge weight.
    pub lambda2: f64,
    /// Frequency-domain L1 weight.
    pub lambda3: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.05,
            lambda3: 0.01,
            epsilon: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn violations(&self, ctx: &str) -> Vec<String> {
        let mut v = Vec::new();
        for (name, val) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(val.is_finite() && val >= 0.0) {
                v.push(format!(
                    "{ctx}.{name} must be finite and non-negative, got {val}"
                ));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            v.push(format!(
                "{ctx}.epsilon must be positive, got {}",
                self.epsilon
            ));
        }
        v
    }
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean of `sqrt(d² + ε²)` over all elements.
pub fn charbonnier<T: Element>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    same_shape("charbonnier", pred, target)?;
    Ok(pred.sub(target)?.sqr().add_scalar(eps * eps).sqrt().mean())
}

/// Charbonnier distance between Laplacian edge maps.
pub fn edge_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    same_shape("edge_loss", pred, target)?;
    charbonnier(&laplacian(target)?, &laplacian(pred)?, eps)
}

/// L1 distance between 2-D spectra over real and imaginary parts jointly,
/// divided by the number of real scalars in the spectrum (`2·N·C·H·W`).
pub fn fft_distance<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("fft_loss", pred, target)?;
    // The transform is linear, so transforming the difference is equivalent
    // to differencing the two spectra.
    let (re, im) = pred.sub(target)?.dft2()?;
    let l1 = re.abs().sum().add(&im.abs().sum())?;
    Ok(l1.mul_scalar(1.0 / (2 * pred.numel()) as f64))
}

/// One supervised (prediction, target) pair.
#[derive(Clone, Debug)]
pub struct SupervisionPair<T: Element> {
    pub label: String,
    pub pred: Tensor<T>,
    pub target: Tensor<T>,
    pub weight: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SupervisionSet<T: Element> {
    pub pairs: Vec<SupervisionPair<T>>,
}

impl<T: Element> SupervisionSet<T> {
    pub fn push(
        &mut self,
        label: impl Into<String>,
        pred: Tensor<T>,
        target: Tensor<T>,
        weight: f64,
    ) -> Result<()> {
        same_shape("supervision pair", &pred, &target)?;
        self.pairs.push(SupervisionPair {
            label: label.into(),
            pred,
            target,
            weight,
        });
        Ok(())
    }

    /// Final output against the clean image with weight 1, plus every
    /// enabled branch output against the clean image, its tiles, or its
    /// pyramid levels with `branch_weight`.
    pub fn from_output(
        out: &ModelOutput<T>,
        clean: &Tensor<T>,
        branch_weight: f64,
    ) -> Result<Self> {
        let mut set = SupervisionSet::default();
        set.push("derained", out.derained.clone(), clean.clone(), 1.0)?;
        if let Some(h2) = &out.mp_level2 {
            set.push("mp_level2", h2.clone(), clean.clone(), branch_weight)?;
        }
        if let Some(h3) = &out.mp_level3 {
            let tiles = split_patches(clean, h3.rows, h3.cols)?;
            for (j, (p, t)) in h3.patches.iter().zip(tiles.patches).enumerate() {
                set.push(format!("mp_level3[{j}]"), p.clone(), t, branch_weight)?;
            }
        }
        if out.c2f_half.is_some() || out.c2f_quarter.is_some() {
            let half = gaussian_downsample(clean)?;
            let quarter = gaussian_downsample(&half)?;
            if let Some(p) = &out.c2f_half {
                set.push("c2f_half", p.clone(), half, branch_weight)?;
            }
            if let Some(p) = &out.c2f_quarter {
                set.push("c2f_quarter", p.clone(), quarter, branch_weight)?;
            }
        }
        Ok(set)
    }
}

/// Weighted sum over pairs of [`fft_distance`].
pub fn fft_loss<T: Element>(set: &SupervisionSet<T>) -> Result<Tensor<T>> {
    let mut acc = Tensor::scalar(T::zero());
    for p in &set.pairs {
        acc = acc.add(&fft_distance(&p.pred, &p.target)?.mul_scalar(p.weight))?;
    }
    Ok(acc)
}

/// The differentiable total plus the unweighted per-term sums for logging.
#[derive(Clone, Debug)]
pub struct LossBreakdown<T: Element> {
    pub total: Tensor<T>,
    pub charbonnier: f64,
    pub edge: f64,
    pub fft: f64,
}

/// `λ₁·Σ w_k char_k + λ₂·Σ w_k edge_k + λ₃·Σ w_k fft_k`.
pub fn total_loss<T: Element>(
    set: &SupervisionSet<T>,
    w: &LossWeights,
) -> Result<LossBreakdown<T>> {
    let zero = || Tensor::scalar(T::zero());
    let (mut ch, mut ed) = (zero(), zero());
    for p in &set.pairs {
        ch = ch.add(&charbonnier(&p.pred, &p.target, w.epsilon)?.mul_scalar(p.weight))?;
        ed = ed.add(&edge_loss(&p.pred, &p.target, w.epsilon)?.mul_scalar(p.weight))?;
    }
    let ff = fft_loss(set)?;
    let total = ch
        .mul_scalar(w.lambda1)
        .add(&ed.mul_scalar(w.lambda2))?
        .add(&ff.mul_scalar(w.lambda3))?;
    Ok(LossBreakdown {
        total,
        charbonnier: ch.item().as_f64(),
        edge: ed.item().as_f64(),
        fft: ff.item().as_f64(),
    })
}
