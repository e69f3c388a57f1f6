//! Symmetric three-level encoder-decoder over transformer blocks.

use dpm_tensor::{impl_module, Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::blocks::{Conv, TransformerBlock};
use crate::error::{Error, Result};
use crate::init::ParamInit;

/// Channel width of the shallowest decoder stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinalWidth {
    /// Fuse the shallow skip with a halving 1×1 conv; the output has `C` channels.
    #[default]
    #[serde(rename = "C")]
    Base,
    /// Keep the concatenated skip at `2C`; the output has `2C` channels.
    #[serde(rename = "2C")]
    Double,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub blocks_per_level: [usize; 3],
    pub heads_per_level: [usize; 3],
    pub gdfn_gamma: f64,
    pub final_width: FinalWidth,
    pub qk_l2_normalize: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_channels: 48,
            blocks_per_level: [2, 2, 2],
            heads_per_level: [1, 2, 4],
            gdfn_gamma: 2.66,
            final_width: FinalWidth::Base,
            qk_l2_normalize: true,
        }
    }
}

impl UNetConfig {
    /// Narrow desk-scale variant.
    pub fn slim() -> Self {
        UNetConfig {
            base_channels: 16,
            blocks_per_level: [1, 1, 1],
            ..Default::default()
        }
    }

    /// Width of the returned feature map.
    pub fn out_channels(&self) -> usize {
        match self.final_width {
            FinalWidth::Base => self.base_channels,
            FinalWidth::Double => 2 * self.base_channels,
        }
    }

    /// Every violated constraint, prefixed with `ctx`.
    pub fn violations(&self, ctx: &str) -> Vec<String> {
        let mut v = Vec::new();
        let c = self.base_channels;
        if c < 2 || !c.is_multiple_of(2) {
            v.push(format!(
                "{ctx}.base_channels must be a positive even number, got {c}"
            ));
        }
        if !(self.gdfn_gamma.is_finite() && self.gdfn_gamma > 0.0) {
            v.push(format!(
                "{ctx}.gdfn_gamma must be positive, got {}",
                self.gdfn_gamma
            ));
        }
        for (l, &b) in self.blocks_per_level.iter().enumerate() {
            if b == 0 {
                v.push(format!("{ctx}.blocks_per_level[{l}] must be at least 1"));
            }
        }
        let widths = [c, 2 * c, 4 * c];
        for (l, (&h, &w)) in self.heads_per_level.iter().zip(&widths).enumerate() {
            if h == 0 || w % h != 0 {
                v.push(format!(
                    "{ctx}.heads_per_level[{l}] = {h} does not divide level width {w}"
                ));
            }
        }
        let h0 = self.heads_per_level[0];
        if h0 != 0 && !self.out_channels().is_multiple_of(h0) {
            v.push(format!(
                "{ctx}.heads_per_level[0] = {h0} does not divide decoder width {}",
                self.out_channels()
            ));
        }
        v
    }
}

fn stack<T: Element>(
    init: &ParamInit,
    n: usize,
    channels: usize,
    heads: usize,
    cfg: &UNetConfig,
) -> Result<Vec<TransformerBlock<T>>> {
    (0..n)
        .map(|i| {
            TransformerBlock::new(
                &init.pp(format!("block{i}")),
                channels,
                heads,
                cfg.gdfn_gamma,
                cfg.qk_l2_normalize,
            )
        })
        .collect()
}

fn run<T: Element>(blocks: &[TransformerBlock<T>], x: Tensor<T>) -> Result<Tensor<T>> {
    blocks.iter().try_fold(x, |x, b| b.forward(&x))
}

/// 3×3 conv `c → c/2`, then space-to-depth: `(c, H, W) → (2c, H/2, W/2)`.
#[derive(Clone, Debug)]
pub struct Downsample<T: Element> {
    pub conv: Conv<T>,
}
impl_module!(Downsample { conv });

impl<T: Element> Downsample<T> {
    pub fn new(init: &ParamInit, channels: usize) -> Self {
        Downsample {
            conv: Conv::new(init, "conv", channels, channels / 2, 3),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.conv.forward(x)?.pixel_unshuffle(2)?)
    }
}

/// 3×3 conv `c → 2c`, then depth-to-space: `(c, h, w) → (c/2, 2h, 2w)`.
#[derive(Clone, Debug)]
pub struct Upsample<T: Element> {
    pub conv: Conv<T>,
}
impl_module!(Upsample { conv });

impl<T: Element> Upsample<T> {
    pub fn new(init: &ParamInit, channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "upsample: channel count {channels} must be even"
            )));
        }
        Ok(Upsample {
            conv: Conv::new(init, "conv", channels, 2 * channels, 3),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.conv.forward(x)?.pixel_shuffle(2)?)
    }
}

#[derive(Clone, Debug)]
pub struct UNet<T: Element> {
    pub enc1: Vec<TransformerBlock<T>>,
    pub down1: Downsample<T>,
    pub enc2: Vec<TransformerBlock<T>>,
    pub down2: Downsample<T>,
    pub bottleneck: Vec<TransformerBlock<T>>,
    pub up2: Upsample<T>,
    pub fuse2: Conv<T>,
    pub dec2: Vec<TransformerBlock<T>>,
    pub up1: Upsample<T>,
    pub fuse1: Option<Conv<T>>,
    pub dec1: Vec<TransformerBlock<T>>,
    cfg: UNetConfig,
}
impl_module!(UNet {
    enc1,
    down1,
    enc2,
    down2,
    bottleneck,
    up2,
    fuse2,
    dec2,
    up1,
    fuse1,
    dec1
});

impl<T: Element> UNet<T> {
    pub fn new(init: &ParamInit, cfg: &UNetConfig) -> Result<Self> {
        let errs = cfg.violations("unet");
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let c = cfg.base_channels;
        let [b1, b2, b3] = cfg.blocks_per_level;
        let [h1, h2, h3] = cfg.heads_per_level;
        let fuse1 = match cfg.final_width {
            FinalWidth::Base => Some(Conv::new(init, "fuse1", 2 * c, c, 1)),
            FinalWidth::Double => None,
        };
        Ok(UNet {
            enc1: stack(&init.pp("enc1"), b1, c, h1, cfg)?,
            down1: Downsample::new(&init.pp("down1"), c),
            enc2: stack(&init.pp("enc2"), b2, 2 * c, h2, cfg)?,
            down2: Downsample::new(&init.pp("down2"), 2 * c),
            bottleneck: stack(&init.pp("bottleneck"), b3, 4 * c, h3, cfg)?,
            up2: Upsample::new(&init.pp("up2"), 4 * c)?,
            fuse2: Conv::new(init, "fuse2", 4 * c, 2 * c, 1),
            dec2: stack(&init.pp("dec2"), b2, 2 * c, h2, cfg)?,
            up1: Upsample::new(&init.pp("up1"), 2 * c)?,
            fuse1,
            dec1: stack(&init.pp("dec1"), b1, cfg.out_channels(), h1, cfg)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_traced(x)?.0)
    }

    /// Also returns the stage outputs: encoder 1, encoder 2, bottleneck,
    /// decoder 2, decoder 1.
    pub fn forward_traced(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let (_, c, h, w) = x.dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Invalid(format!(
                "unet: spatial extents {h}x{w} must be divisible by 4"
            )));
        }
        if c != self.cfg.base_channels {
            return Err(Error::Invalid(format!(
                "unet: expected {} input channels, got {c}",
                self.cfg.base_channels
            )));
        }
        let e1 = run(&self.enc1, x.clone())?;
        let e2 = run(&self.enc2, self.down1.forward(&e1)?)?;
        let e3 = run(&self.bottleneck, self.down2.forward(&e2)?)?;
        let u2 = Tensor::concat(&[self.up2.forward(&e3)?, e2.clone()], 1)?;
        let d2 = run(&self.dec2, self.fuse2.forward(&u2)?)?;
        let mut u1 = Tensor::concat(&[self.up1.forward(&d2)?, e1.clone()], 1)?;
        if let Some(f) = &self.fuse1 {
            u1 = f.forward(&u1)?;
        }
        let d1 = run(&self.dec1, u1)?;
        Ok((d1.clone(), vec![e1, e2, e3, d2, d1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::InitScheme;
    use dpm_tensor::Module;

    fn tiny(c: usize) -> UNetConfig {
        UNetConfig {
            base_channels: c,
            blocks_per_level: [1, 1, 1],
            heads_per_level: [1, 2, 4],
            ..Default::default()
        }
    }

    #[test]
    fn down_and_up_shapes() {
        let init = ParamInit::new(0, InitScheme::default());
        let d = Downsample::<f32>::new(&init, 4);
        assert_eq!(
            d.forward(&Tensor::zeros(&[1, 4, 2, 2])).unwrap().shape(),
            &[1, 8, 1, 1]
        );
        let u = Upsample::<f32>::new(&init, 8).unwrap();
        assert_eq!(
            u.forward(&Tensor::zeros(&[1, 8, 1, 1])).unwrap().shape(),
            &[1, 4, 2, 2]
        );
        assert!(Upsample::<f32>::new(&init, 3).is_err());
        assert!(d.forward(&Tensor::zeros(&[1, 4, 3, 2])).is_err());
    }

    #[test]
    fn ladder_and_resolution_round_trip() {
        let u = UNet::<f32>::new(&ParamInit::new(1, InitScheme::default()), &tiny(8)).unwrap();
        let x = Tensor::<f32>::full(&[1, 8, 12, 20], 0.1);
        let (y, trace) = u.forward_traced(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        let widths: Vec<usize> = trace.iter().map(|t| t.shape()[1]).collect();
        assert_eq!(widths, vec![8, 16, 32, 16, 8]);
        assert_eq!(trace[2].shape(), &[1, 32, 3, 5]);
        assert!(u.forward(&Tensor::zeros(&[1, 8, 10, 12])).is_err());
    }

    #[test]
    fn double_final_width() {
        let cfg = UNetConfig {
            final_width: FinalWidth::Double,
            ..tiny(8)
        };
        let u = UNet::<f32>::new(&ParamInit::new(1, InitScheme::default()), &cfg).unwrap();
        let y = u.forward(&Tensor::zeros(&[1, 8, 8, 8])).unwrap();
        assert_eq!(y.shape(), &[1, 16, 8, 8]);
    }

    #[test]
    fn invalid_configs_list_every_violation() {
        let cfg = UNetConfig {
            base_channels: 7,
            heads_per_level: [0, 5, 4],
            ..Default::default()
        };
        let v = cfg.violations("model.backbone");
        assert!(v.len() >= 3, "{v:?}");
        assert!(v[0].starts_with("model.backbone.base_channels"));
    }

    #[test]
    fn more_blocks_more_parameters() {
        let init = || ParamInit::new(0, InitScheme::ZeroWeights);
        let a = UNet::<f32>::new(&init(), &tiny(8))
            .unwrap()
            .parameter_count();
        let cfg = UNetConfig {
            blocks_per_level: [2, 2, 2],
            ..tiny(8)
        };
        let b = UNet::<f32>::new(&init(), &cfg).unwrap().parameter_count();
        assert!(b > a);
    }
}
