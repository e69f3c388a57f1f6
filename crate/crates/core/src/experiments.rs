//! Multi-run experiments: path ablation and parameter-budget reports.

use std::fmt::Write as _;
use std::path::Path;

use dpm_tensor::Module;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::ImagePair;
use crate::error::Result;
use crate::init::{InitScheme, ParamInit};
use crate::model::{DpmFormer, ModelConfig};
use crate::trainer::{evaluate, Trainer};
use crate::unet::FinalWidth;

/// One arm of the path ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub slug: &'static str,
    pub multipatch: bool,
    pub coarse2fine: bool,
}

pub const VARIANTS: [Variant; 3] = [
    Variant {
        name: "multi-patch only",
        slug: "multipatch_only",
        multipatch: true,
        coarse2fine: false,
    },
    Variant {
        name: "coarse-to-fine only",
        slug: "coarse2fine_only",
        multipatch: false,
        coarse2fine: true,
    },
    Variant {
        name: "dual path",
        slug: "dual_path",
        multipatch: true,
        coarse2fine: true,
    },
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub enable_multipatch: bool,
    pub enable_coarse2fine: bool,
    pub parameters: usize,
    /// Mean training loss over the last epoch.
    pub final_loss: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Whether the dual-path arm scores the highest PSNR (reported, not enforced).
    pub fn dual_path_best(&self) -> bool {
        let dual = self
            .rows
            .iter()
            .find(|r| r.enable_multipatch && r.enable_coarse2fine);
        match dual {
            Some(d) => self.rows.iter().all(|r| r.psnr <= d.psnr),
            None => false,
        }
    }

    /// Markdown comparison table.
    pub fn table(&self) -> String {
        let mut s = String::from(
            "| variant | multi-patch | coarse-to-fine | parameters | final loss | PSNR (dB) | SSIM |\n\
             |---|---|---|---:|---:|---:|---:|\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.5} | {:.3} | {:.4} |",
                r.variant,
                if r.enable_multipatch { "on" } else { "off" },
                if r.enable_coarse2fine { "on" } else { "off" },
                r.parameters,
                r.final_loss,
                r.psnr,
                r.ssim
            );
        }
        s
    }
}

/// Trains one model per [`VARIANTS`] arm from the same seed and data, and
/// scores each on `eval` (or on `train` when `eval` is empty). With
/// `out_dir`, each arm writes its run into a subdirectory named by its slug.
pub fn run_ablation(
    cfg: &RunConfig,
    train: &[ImagePair],
    eval: &[ImagePair],
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    let eval_set = if eval.is_empty() { train } else { eval };
    let mut rows = Vec::new();
    for v in VARIANTS {
        let model_cfg = ModelConfig {
            enable_multipatch: v.multipatch,
            enable_coarse2fine: v.coarse2fine,
            ..cfg.model.clone()
        };
        let model = DpmFormer::new(
            &ParamInit::new(cfg.train.seed, InitScheme::default()),
            &model_cfg,
        )?;
        let parameters = model.parameter_count();
        let mut trainer = Trainer::new(model, cfg.train.clone(), train.len())?;
        log::info!("ablation arm: {}", v.name);
        let dir = out_dir.map(|d| d.join(v.slug));
        let report = trainer.fit(train, eval, dir.as_deref())?;
        let final_loss = report.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
        let ev = evaluate(&trainer.model, eval_set)?;
        rows.push(AblationRow {
            variant: v.name.to_string(),
            enable_multipatch: v.multipatch,
            enable_coarse2fine: v.coarse2fine,
            parameters,
            final_loss,
            psnr: ev.psnr,
            ssim: ev.ssim,
        });
    }
    Ok(AblationReport { rows })
}

/// Published parameter budget of the full-size model.
pub const REFERENCE_PARAMETERS: usize = 9_090_000;
/// Relative band around [`REFERENCE_PARAMETERS`] considered consistent.
pub const PARAMETER_BAND: f64 = 0.30;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub final_width: FinalWidth,
    pub parameters: usize,
    /// Signed deviation from the reference budget, as a fraction.
    pub deviation: f64,
    pub within_band: bool,
}

/// Counts parameters of `cfg` under both final decoder widths.
pub fn parameter_report(cfg: &ModelConfig) -> Result<Vec<ParamCount>> {
    [FinalWidth::Base, FinalWidth::Double]
        .into_iter()
        .map(|fw| {
            let mut c = cfg.clone();
            c.backbone.final_width = fw;
            if let Some(b) = c.branch.as_mut() {
                b.final_width = fw;
            }
            let m = DpmFormer::<f32>::new(&ParamInit::new(0, InitScheme::ZeroWeights), &c)?;
            let parameters = m.parameter_count();
            let deviation = parameters as f64 / REFERENCE_PARAMETERS as f64 - 1.0;
            Ok(ParamCount {
                final_width: fw,
                parameters,
                deviation,
                within_band: deviation.abs() <= PARAMETER_BAND,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_lists_every_arm() {
        let rows = VARIANTS
            .iter()
            .enumerate()
            .map(|(i, v)| AblationRow {
                variant: v.name.into(),
                enable_multipatch: v.multipatch,
                enable_coarse2fine: v.coarse2fine,
                parameters: 10 + i,
                final_loss: 0.1,
                psnr: 20.0 + i as f64,
                ssim: 0.5,
            })
            .collect();
        let r = AblationReport { rows };
        assert!(r.dual_path_best());
        let t = r.table();
        assert_eq!(t.lines().count(), 5);
        assert!(t.contains("| dual path | on | on | 12 |"));
    }

    #[test]
    fn wider_final_stage_adds_parameters() {
        let r = parameter_report(&ModelConfig::slim()).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r[1].parameters > r[0].parameters);
        assert!(!r[0].within_band);
    }
}
