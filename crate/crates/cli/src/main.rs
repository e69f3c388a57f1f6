//! `dpmformer`: synthesize data, train, derain, evaluate, check gradients,
//! run the path ablation and report parameter counts.
//!
//! Exit codes: 0 success, 1 runtime failure (including failed gradient
//! checks), 2 invalid configuration or mismatched inputs, 3 non-finite loss.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dpm::checkpoint;
use dpm::config::RunConfig;
use dpm::data::{
    list_pngs, load_png, match_names, procedural_scene, save_png, write_synthetic_set, ImagePair,
    RainParams,
};
use dpm::experiments::{parameter_report, run_ablation, REFERENCE_PARAMETERS};
use dpm::gradsuite::{run_suite, Suite};
use dpm::image_ops::LumaConvention;
use dpm::inference::derain;
use dpm::init::{InitScheme, ParamInit};
use dpm::metrics::{psnr_y_with, ssim_y_with};
use dpm::model::{DpmFormer, ModelConfig};
use dpm::trainer::{evaluate, Trainer};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "dpmformer",
    version,
    about = "Dual-path multi-scale deraining transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize rainy/clean pairs and a manifest.
    MakeData(MakeDataArgs),
    /// Train from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Restore one image or every PNG in a directory.
    Derain {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input PNG file or directory.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output PNG file or directory.
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Score predictions against ground truth by file name (Y-channel PSNR/SSIM).
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Luma::Studio)]
        luma: Luma,
        /// Also write the JSON report here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Train multi-patch-only, coarse-to-fine-only and dual-path variants.
    Ablation {
        #[arg(long)]
        config: PathBuf,
    },
    /// Report parameter counts under both final decoder widths.
    Params {
        /// Run configuration whose model section to count (default model otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct MakeDataArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Directory of clean PNGs; procedural scenes are generated when absent.
    #[arg(long)]
    clean_dir: Option<PathBuf>,
    /// Number of pairs (default: one per clean image, or 16 procedural scenes).
    #[arg(long)]
    count: Option<usize>,
    /// Side of procedural scenes.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Base seed of the rain layers (pair i uses seed + i).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = RainParams::default().streak_density)]
    density: f64,
    #[arg(long, default_value_t = RainParams::default().streak_length)]
    length: usize,
    #[arg(long, default_value_t = RainParams::default().angle_deg)]
    angle: f64,
    #[arg(long, default_value_t = RainParams::default().intensity)]
    intensity: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Luma {
    Studio,
    Full,
}

/// Inputs that do not line up (unmatched files, bad arguments): exit code 2.
#[derive(Debug)]
struct InputMismatch(String);

impl std::fmt::Display for InputMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputMismatch {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeData(a) => make_data(a),
        Command::Train { config, resume } => train(&config, resume.as_deref()),
        Command::Derain {
            checkpoint,
            input,
            output,
        } => derain_cmd(&checkpoint, &input, &output),
        Command::Eval {
            pred_dir,
            gt_dir,
            luma,
            output,
        } => eval_cmd(&pred_dir, &gt_dir, luma, output.as_deref()),
        Command::Gradcheck { module } => gradcheck(&module),
        Command::Ablation { config } => ablation(&config),
        Command::Params { config } => params(config.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => report(&e),
    }
}

fn report(e: &anyhow::Error) -> ExitCode {
    if let Some(dpm::Error::Config(list)) = e.downcast_ref::<dpm::Error>() {
        eprintln!("error: invalid configuration ({} problem(s)):", list.len());
        for v in list {
            eprintln!("  - {v}");
        }
        return ExitCode::from(2);
    }
    eprintln!("error: {e:#}");
    let code = match e.downcast_ref::<dpm::Error>() {
        Some(dpm::Error::NonFinite { .. }) => 3,
        Some(
            dpm::Error::Contract { .. }
            | dpm::Error::PairExtent { .. }
            | dpm::Error::CheckpointMismatch { .. },
        ) => 2,
        _ if e.downcast_ref::<InputMismatch>().is_some() => 2,
        _ => 1,
    };
    ExitCode::from(code)
}

fn make_data(a: MakeDataArgs) -> Result<ExitCode> {
    let params = RainParams {
        seed: a.seed,
        streak_density: a.density,
        streak_length: a.length,
        angle_deg: a.angle,
        intensity: a.intensity,
    };
    let errs = params.violations("rain");
    if !errs.is_empty() {
        return Err(dpm::Error::Config(errs).into());
    }
    let cleans: Vec<(String, _)> = match &a.clean_dir {
        Some(dir) => list_pngs(dir)?
            .into_iter()
            .map(|(name, path)| {
                let id = name
                    .trim_end_matches(".png")
                    .trim_end_matches(".PNG")
                    .to_string();
                Ok((id, load_png(&path)?))
            })
            .collect::<Result<_>>()?,
        None => (0..a.count.unwrap_or(16))
            .map(|i| {
                (
                    format!("scene_{i:02}"),
                    procedural_scene(i as u64, a.size, a.size),
                )
            })
            .collect(),
    };
    if cleans.is_empty() {
        bail!(InputMismatch("no clean images found".into()));
    }
    let count = a.count.unwrap_or(cleans.len());
    let manifest = write_synthetic_set(&cleans, &params, count, &a.out_dir)?;
    println!(
        "wrote {} pairs to {}",
        manifest.pairs.len(),
        a.out_dir.join("manifest.json").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn finite_or_inf(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x > 0.0 {
        json!("inf")
    } else {
        json!(x.to_string())
    }
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn train(config: &Path, resume: Option<&Path>) -> Result<ExitCode> {
    let cfg = RunConfig::from_file(config)?;
    let (train, eval) = cfg.data.load()?;
    let resolved = cfg.write_resolved()?;
    log::info!("resolved configuration: {}", resolved.display());
    log::info!(
        "{} training pairs, {} evaluation pairs",
        train.len(),
        eval.len()
    );
    let mut trainer = match resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            if ck.model != cfg.model {
                bail!(dpm::Error::CheckpointMismatch {
                    name: "model".into(),
                    msg: "checkpoint architecture differs from the configuration".into(),
                });
            }
            Trainer::resume(&ck, cfg.train.clone(), train.len())?
        }
        None => {
            let model = DpmFormer::new(
                &ParamInit::new(cfg.train.seed, InitScheme::default()),
                &cfg.model,
            )?;
            Trainer::new(model, cfg.train.clone(), train.len())?
        }
    };
    let report = trainer.fit(&train, &eval, Some(&cfg.output_dir))?;
    let eval_set: &[ImagePair] = if eval.is_empty() { &train } else { &eval };
    let ev = evaluate(&trainer.model, eval_set)?;
    let summary = json!({
        "steps": trainer.progress().step,
        "epochs": trainer.progress().epoch,
        "final_loss": report.epochs.last().map(|e| e.mean_loss),
        "eval_set": if eval.is_empty() { "train" } else { "held-out" },
        "psnr": finite_or_inf(ev.psnr),
        "ssim": ev.ssim,
        "images": ev.images.iter().map(|s| json!({"id": s.id, "psnr": finite_or_inf(s.psnr), "ssim": s.ssim})).collect::<Vec<_>>(),
        "checkpoint": report.final_checkpoint,
    });
    write_json(&cfg.output_dir.join("metrics.json"), &summary)?;
    println!(
        "trained {} steps; PSNR {:.3} dB, SSIM {:.4}; outputs in {}",
        trainer.progress().step,
        ev.psnr,
        ev.ssim,
        cfg.output_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn derain_cmd(ckpt: &Path, input: &Path, output: &Path) -> Result<ExitCode> {
    let model = checkpoint::load(ckpt)?.build_model()?;
    let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
        list_pngs(input)?
            .into_iter()
            .map(|(name, path)| (path, output.join(name)))
            .collect()
    } else {
        vec![(input.to_path_buf(), output.to_path_buf())]
    };
    for (src, dst) in &jobs {
        let x = load_png(src)?;
        let (_, _, h, w) = x.dims4()?;
        let out = derain(&model, &x)?;
        if out.padded_extent != (h, w) {
            log::info!(
                "{}: reflect-padded {h}x{w} to {}x{} and cropped back",
                src.display(),
                out.padded_extent.0,
                out.padded_extent.1
            );
        }
        save_png(dst, &out.image)?;
    }
    println!("restored {} image(s)", jobs.len());
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(pred_dir: &Path, gt_dir: &Path, luma: Luma, output: Option<&Path>) -> Result<ExitCode> {
    let conv = match luma {
        Luma::Studio => LumaConvention::Studio,
        Luma::Full => LumaConvention::Full,
    };
    let (matched, skip) = match_names(pred_dir, gt_dir)?;
    if !skip.is_empty() {
        bail!(InputMismatch(skip.to_string()));
    }
    if matched.is_empty() {
        bail!(InputMismatch("no PNG files to compare".into()));
    }
    let mut images = Vec::new();
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for (name, pp, pg) in &matched {
        let pair = ImagePair::new(name.clone(), load_png(pp)?, load_png(pg)?)?;
        let psnr = psnr_y_with(&pair.rainy, &pair.clean, conv)?;
        let ssim = ssim_y_with(&pair.rainy, &pair.clean, conv)?;
        psnr_sum += psnr;
        ssim_sum += ssim;
        images.push(json!({"id": name, "psnr": finite_or_inf(psnr), "ssim": ssim}));
    }
    let n = matched.len() as f64;
    let out = json!({
        "count": matched.len(),
        "psnr": finite_or_inf(psnr_sum / n),
        "ssim": ssim_sum / n,
        "images": images,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    if let Some(path) = output {
        write_json(path, &out)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(module: &str) -> Result<ExitCode> {
    let suites: Vec<Suite> = if module == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![module.parse().map_err(|e: dpm::Error| {
            InputMismatch(format!(
                "{e}; expected all, ops, mdta, gdfn, unet, losses or model"
            ))
        })?]
    };
    let mut failed = 0usize;
    for s in suites {
        for r in run_suite(s)? {
            let verdict = if r.passed() { "PASS" } else { "FAIL" };
            println!(
                "{verdict} {}/{}: max rel err {:.3e} over {} entries (tol {:.0e})",
                r.suite, r.case, r.report.max_rel_err, r.report.checked, r.tolerance
            );
            failed += usize::from(!r.passed());
        }
    }
    if failed > 0 {
        println!("{failed} case(s) failed");
        return Ok(ExitCode::from(1));
    }
    println!("all gradient checks passed");
    Ok(ExitCode::SUCCESS)
}

fn ablation(config: &Path) -> Result<ExitCode> {
    let cfg = RunConfig::from_file(config)?;
    let (train, eval) = cfg.data.load()?;
    cfg.write_resolved()?;
    let dir = cfg.output_dir.join("ablation");
    let report = run_ablation(&cfg, &train, &eval, Some(&dir))?;
    let table = report.table();
    fs::write(dir.join("ablation.md"), &table)?;
    write_json(&dir.join("ablation.json"), &serde_json::to_value(&report)?)?;
    print!("{table}");
    println!(
        "dual path has the best PSNR: {}",
        if report.dual_path_best() { "yes" } else { "no" }
    );
    Ok(ExitCode::SUCCESS)
}

fn params(config: Option<&Path>) -> Result<ExitCode> {
    let model = match config {
        Some(p) => RunConfig::from_file(p)?.model,
        None => ModelConfig::default(),
    };
    println!("reference budget: {REFERENCE_PARAMETERS} parameters");
    for c in parameter_report(&model)? {
        println!(
            "final width {:?}: {} parameters ({:+.1}% vs reference, {})",
            c.final_width,
            c.parameters,
            100.0 * c.deviation,
            if c.within_band {
                "within ±30%"
            } else {
                "outside ±30%"
            }
        );
    }
    Ok(ExitCode::SUCCESS)
}
