//! Whole-image inference for arbitrary extents.

use dpm_tensor::{no_grad, Element, PadMode, Tensor};

use crate::error::{Error, Result};
use crate::model::{DpmFormer, SPATIAL_MULTIPLE};

/// Bottom/right padding that brings `n` up to the next multiple of `m`.
pub fn pad_to_multiple(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m - n
}

/// Outcome of one [`derain`] call.
#[derive(Clone, Debug)]
pub struct Derained<T: Element> {
    /// Restored image clipped to [0, 1], same extents as the input.
    pub image: Tensor<T>,
    /// Extents actually processed after reflect padding.
    pub padded_extent: (usize, usize),
}

/// Runs the model without recording gradients. Inputs whose extents are not
/// multiples of 16 are reflect-padded at the bottom/right and cropped back.
pub fn derain<T: Element>(model: &DpmFormer<T>, x: &Tensor<T>) -> Result<Derained<T>> {
    let (_, _, h, w) = x.dims4()?;
    let (ph, pw) = (
        pad_to_multiple(h, SPATIAL_MULTIPLE),
        pad_to_multiple(w, SPATIAL_MULTIPLE),
    );
    if ph >= h || pw >= w {
        return Err(Error::Invalid(format!(
            "derain: a {h}x{w} image is too small to reflect-pad to a multiple of {SPATIAL_MULTIPLE}"
        )));
    }
    no_grad(|| -> Result<Derained<T>> {
        let padded = if ph + pw > 0 {
            x.pad2d((0, ph, 0, pw), PadMode::Reflect)?
        } else {
            x.clone()
        };
        let out = model.forward(&padded)?.derained;
        let cropped = if ph + pw > 0 {
            out.narrow(2, 0, h)?.narrow(3, 0, w)?
        } else {
            out
        };
        Ok(Derained {
            image: cropped.clamp_detached(0.0, 1.0),
            padded_extent: (h + ph, w + pw),
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{InitScheme, ParamInit};
    use crate::model::ModelConfig;
    use crate::unet::UNetConfig;

    #[test]
    fn pads_and_crops() {
        assert_eq!(pad_to_multiple(100, 16), 12);
        assert_eq!(pad_to_multiple(64, 16), 0);
        let cfg = ModelConfig {
            backbone: UNetConfig {
                base_channels: 4,
                blocks_per_level: [1, 1, 1],
                ..Default::default()
            },
            ..Default::default()
        };
        let m = DpmFormer::<f32>::new(&ParamInit::new(0, InitScheme::ZeroWeights), &cfg).unwrap();
        let x: Vec<f32> = (0..3 * 20 * 18).map(|i| (i % 17) as f32 / 17.0).collect();
        let x = Tensor::from_vec(x, &[1, 3, 20, 18]).unwrap();
        let d = derain(&m, &x).unwrap();
        assert_eq!(d.padded_extent, (32, 32));
        assert_eq!(d.image.to_vec(), x.to_vec());
        assert!(derain(&m, &Tensor::<f32>::zeros(&[1, 3, 5, 16])).is_err());
    }
}
