//! The full restorer: a backbone encoder-decoder fed by a multi-patch branch
//! and a coarse-to-fine pyramid branch, with a global residual.

use dpm_tensor::{impl_module, Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::blocks::Conv;
use crate::error::{Error, Result};
use crate::image_ops::{gaussian_downsample, split_patches, upsample_bilinear, PatchGrid};
use crate::init::ParamInit;
use crate::unet::{UNet, UNetConfig};

/// Required divisor of input height and width.
pub const SPATIAL_MULTIPLE: usize = 16;

/// Direction of the two-way split at the middle patch level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchAxis {
    /// Top and bottom halves; finest-level tiles pair up left-to-right.
    #[default]
    Height,
    /// Left and right halves; finest-level tiles pair up top-to-bottom.
    Width,
}

impl PatchAxis {
    /// Grid `(rows, cols)` of the two-patch level.
    fn halves(self) -> (usize, usize) {
        match self {
            PatchAxis::Height => (2, 1),
            PatchAxis::Width => (1, 2),
        }
    }

    /// Tensor axis along which the two halves are joined.
    fn join_axis(self) -> usize {
        match self {
            PatchAxis::Height => 2,
            PatchAxis::Width => 3,
        }
    }

    /// Indices into the row-major 2×2 grid of the tiles making up half `j`,
    /// in the order they are joined.
    fn quarter_pair(self, j: usize) -> [usize; 2] {
        match self {
            PatchAxis::Height => [2 * j, 2 * j + 1],
            PatchAxis::Width => [j, j + 2],
        }
    }

    /// Axis along which a pair of quarter tiles is joined into a half.
    fn pair_axis(self) -> usize {
        match self {
            PatchAxis::Height => 3,
            PatchAxis::Width => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: UNetConfig,
    /// Encoder-decoder used by every branch sub-network; `None` reuses the
    /// backbone configuration.
    pub branch: Option<UNetConfig>,
    pub enable_multipatch: bool,
    pub enable_coarse2fine: bool,
    pub patch_axis: PatchAxis,
    /// One encoder-decoder per patch level instead of one per patch.
    pub share_level_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: UNetConfig::default(),
            branch: None,
            enable_multipatch: true,
            enable_coarse2fine: true,
            patch_axis: PatchAxis::Height,
            share_level_weights: true,
        }
    }
}

impl ModelConfig {
    pub fn slim() -> Self {
        ModelConfig {
            backbone: UNetConfig::slim(),
            ..Default::default()
        }
    }

    pub fn branch_config(&self) -> &UNetConfig {
        self.branch.as_ref().unwrap_or(&self.backbone)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.backbone.violations("model.backbone");
        if let Some(b) = &self.branch {
            v.extend(b.violations("model.branch"));
        }
        v
    }
}

/// Image-to-image restorer: 3×3 embed, encoder-decoder, 3×3 projection to
/// an RGB residual added back onto the input.
#[derive(Clone, Debug)]
pub struct Restorer<T: Element> {
    pub conv_in: Conv<T>,
    pub unet: UNet<T>,
    pub conv_out: Conv<T>,
}
impl_module!(Restorer {
    conv_in,
    unet,
    conv_out
});

impl<T: Element> Restorer<T> {
    pub fn new(init: &ParamInit, cfg: &UNetConfig) -> Result<Self> {
        Ok(Restorer {
            conv_in: Conv::new(init, "conv_in", 3, cfg.base_channels, 3),
            unet: UNet::new(&init.pp("unet"), cfg)?,
            conv_out: Conv::new(init, "conv_out", cfg.out_channels(), 3, 3),
        })
    }

    /// The predicted residual image.
    pub fn residual(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv_out
            .forward(&self.unet.forward(&self.conv_in.forward(x)?)?)
    }

    /// `x + residual(x)`.
    pub fn restore(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.add(&self.residual(x)?)?)
    }
}

/// Per-patch feature extractor of one multi-patch level.
#[derive(Clone, Debug)]
pub struct PatchStage<T: Element> {
    pub conv_in: Conv<T>,
    /// Channel fusion of the finer level's features (middle level only).
    pub fuse: Option<Conv<T>>,
    pub unet: UNet<T>,
}
impl_module!(PatchStage {
    conv_in,
    fuse,
    unet
});

impl<T: Element> PatchStage<T> {
    fn new(init: &ParamInit, cfg: &UNetConfig, fuse_from: Option<usize>) -> Result<Self> {
        let c = cfg.base_channels;
        Ok(PatchStage {
            conv_in: Conv::new(init, "conv_in", 3, c, 3),
            fuse: fuse_from.map(|extra| Conv::new(init, "fuse", c + extra, c, 1)),
            unet: UNet::new(&init.pp("unet"), cfg)?,
        })
    }

    fn forward(&self, patch: &Tensor<T>, finer: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut t = self.conv_in.forward(patch)?;
        if let (Some(fuse), Some(f)) = (&self.fuse, finer) {
            t = fuse.forward(&Tensor::concat(&[t, f.clone()], 1)?)?;
        }
        self.unet.forward(&t)
    }
}

fn stages<T: Element>(
    init: &ParamInit,
    cfg: &UNetConfig,
    shared: bool,
    count: usize,
    fuse_from: Option<usize>,
) -> Result<Vec<PatchStage<T>>> {
    if shared {
        Ok(vec![PatchStage::new(&init.pp("shared"), cfg, fuse_from)?])
    } else {
        (0..count)
            .map(|j| PatchStage::new(&init.pp(format!("patch{j}")), cfg, fuse_from))
            .collect()
    }
}

/// Hierarchical patch branch: a 2×2 tiling feeding a two-way tiling.
#[derive(Clone, Debug)]
pub struct MultiPatch<T: Element> {
    pub level3: Vec<PatchStage<T>>,
    pub out3: Conv<T>,
    pub level2: Vec<PatchStage<T>>,
    pub out2: Conv<T>,
    axis: PatchAxis,
}
impl_module!(MultiPatch {
    level3,
    out3,
    level2,
    out2
});

/// Results of the patch branch.
#[derive(Clone, Debug)]
pub struct MultiPatchOutput<T: Element> {
    /// Full-resolution image estimate.
    pub h2: Tensor<T>,
    /// Image estimates for the 2×2 tiles, row-major.
    pub h3: PatchGrid<T>,
    /// Joined middle-level features.
    pub w2_features: Tensor<T>,
}

impl<T: Element> MultiPatch<T> {
    fn new(init: &ParamInit, cfg: &UNetConfig, shared: bool, axis: PatchAxis) -> Result<Self> {
        let out = cfg.out_channels();
        let l3 = init.pp("level3");
        let l2 = init.pp("level2");
        Ok(MultiPatch {
            level3: stages(&l3, cfg, shared, 4, None)?,
            out3: Conv::new(&l3, "conv_out", out, 3, 3),
            level2: stages(&l2, cfg, shared, 2, Some(out))?,
            out2: Conv::new(&l2, "conv_out", out, 3, 3),
            axis,
        })
    }

    pub fn forward(&self, t1: &Tensor<T>) -> Result<MultiPatchOutput<T>> {
        let (rows, cols) = self.axis.halves();
        let quarters = split_patches(t1, 2, 2)?;
        let halves = split_patches(t1, rows, cols)?;

        let w3: Vec<Tensor<T>> = quarters
            .patches
            .iter()
            .enumerate()
            .map(|(j, p)| self.level3[j % self.level3.len()].forward(p, None))
            .collect::<Result<_>>()?;

        let mut h3 = vec![None; 4];
        let mut w2 = Vec::with_capacity(2);
        for j in 0..2 {
            let pair = self.axis.quarter_pair(j);
            let joined = Tensor::concat(
                &[w3[pair[0]].clone(), w3[pair[1]].clone()],
                self.axis.pair_axis(),
            )?;
            let image = self.out3.forward(&joined)?.add(&halves.patches[j])?;
            let ext = image.shape()[self.axis.pair_axis()] / 2;
            for (k, &q) in pair.iter().enumerate() {
                h3[q] = Some(image.narrow(self.axis.pair_axis(), k * ext, ext)?);
            }
            let stage = &self.level2[j % self.level2.len()];
            w2.push(stage.forward(&halves.patches[j], Some(&joined))?);
        }
        let w2_features = Tensor::concat(&w2, self.axis.join_axis())?;
        let h2 = self.out2.forward(&w2_features)?.add(t1)?;
        Ok(MultiPatchOutput {
            h2,
            h3: PatchGrid {
                rows: 2,
                cols: 2,
                patches: h3
                    .into_iter()
                    .map(|p| p.expect("every tile filled"))
                    .collect(),
            },
            w2_features,
        })
    }
}

/// Pyramid branch: restore at quarter scale, upsample into the half-scale
/// input, restore again.
#[derive(Clone, Debug)]
pub struct CoarseToFine<T: Element> {
    pub quarter: Restorer<T>,
    pub half: Restorer<T>,
}
impl_module!(CoarseToFine { quarter, half });

impl<T: Element> CoarseToFine<T> {
    /// Returns `(half_out, quarter_out)`.
    pub fn forward(&self, t1: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let f2 = gaussian_downsample(t1)?;
        let f4 = gaussian_downsample(&f2)?;
        let s4 = self.quarter.restore(&f4)?;
        let f2_star = f2.add(&upsample_bilinear(&s4, 2)?)?;
        let half = self.half.restore(&f2_star)?;
        Ok((half, s4))
    }
}

#[derive(Clone, Debug)]
pub struct DpmFormer<T: Element> {
    pub backbone: Restorer<T>,
    pub multipatch: Option<MultiPatch<T>>,
    pub coarse2fine: Option<CoarseToFine<T>>,
    cfg: ModelConfig,
}
impl_module!(DpmFormer {
    backbone,
    multipatch,
    coarse2fine
});

/// Everything a forward pass produces; branch fields are `None` when the
/// branch is disabled.
#[derive(Clone, Debug)]
pub struct ModelOutput<T: Element> {
    pub derained: Tensor<T>,
    /// The backbone's predicted residual: `derained = rainy + residual`.
    pub residual: Tensor<T>,
    /// Backbone input after branch fusion.
    pub fused_input: Tensor<T>,
    pub mp_level2: Option<Tensor<T>>,
    pub mp_level3: Option<PatchGrid<T>>,
    pub c2f_half: Option<Tensor<T>>,
    pub c2f_quarter: Option<Tensor<T>>,
}

impl<T: Element> DpmFormer<T> {
    pub fn new(init: &ParamInit, cfg: &ModelConfig) -> Result<Self> {
        let errs = cfg.violations();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let branch = cfg.branch_config();
        let backbone = Restorer::new(&init.pp("backbone"), &cfg.backbone)?;
        let multipatch = if cfg.enable_multipatch {
            Some(MultiPatch::new(
                &init.pp("mp"),
                branch,
                cfg.share_level_weights,
                cfg.patch_axis,
            )?)
        } else {
            None
        };
        let coarse2fine = if cfg.enable_coarse2fine {
            Some(CoarseToFine {
                quarter: Restorer::new(&init.pp("c2f.quarter"), branch)?,
                half: Restorer::new(&init.pp("c2f.half"), branch)?,
            })
        } else {
            None
        };
        Ok(DpmFormer {
            backbone,
            multipatch,
            coarse2fine,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(&self, rainy: &Tensor<T>) -> Result<ModelOutput<T>> {
        let (_, c, h, w) = rainy.dims4()?;
        if c != 3 || h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::Invalid(format!(
                "model input must be RGB with extents divisible by {SPATIAL_MULTIPLE}, got {:?}",
                rainy.shape()
            )));
        }
        let mut x0 = rainy.clone();
        let mut out_mp = None;
        if let Some(mp) = &self.multipatch {
            let o = mp.forward(rainy)?;
            x0 = x0.add(&o.h2)?;
            out_mp = Some(o);
        }
        let mut out_c2f = None;
        if let Some(c2f) = &self.coarse2fine {
            let (half, quarter) = c2f.forward(rainy)?;
            x0 = x0.add(&upsample_bilinear(&half, 2)?)?;
            out_c2f = Some((half, quarter));
        }
        let residual = self.backbone.residual(&x0)?;
        let derained = rainy.add(&residual)?;
        let (mp_level2, mp_level3) = match out_mp {
            Some(o) => (Some(o.h2), Some(o.h3)),
            None => (None, None),
        };
        let (c2f_half, c2f_quarter) = match out_c2f {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        Ok(ModelOutput {
            derained,
            residual,
            fused_input: x0,
            mp_level2,
            mp_level3,
            c2f_half,
            c2f_quarter,
        })
    }
}
