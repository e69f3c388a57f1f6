//! Double-precision finite-difference suites over every differentiable
//! building block, grouped the way the command line exposes them.

use std::fmt;
use std::str::FromStr;

use dpm_tensor::gradcheck::{check_inputs, check_module, GradCheckReport};
use dpm_tensor::{Module, PadMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Gdfn, Mdta, TransformerBlock};
use crate::error::{Error, Result};
use crate::image_ops::{
    gaussian_downsample, laplacian, merge_patches, rgb_to_y, split_patches, upsample_bilinear,
    LumaConvention,
};
use crate::init::{InitScheme, ParamInit};
use crate::losses::{
    charbonnier, edge_loss, fft_distance, total_loss, LossWeights, SupervisionSet,
};
use crate::model::{DpmFormer, ModelConfig};
use crate::unet::{Downsample, UNet, UNetConfig, Upsample};

/// Tolerance for primitive operations and losses.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Tolerance for composite modules.
pub const COMPOSITE_TOL: f64 = 1e-3;
/// Fraction of model parameters probed by the narrow whole-model check.
pub const MODEL_SAMPLE_FRACTION: f64 = 0.01;
/// Parameter entries probed in the slim whole-model check.
pub const SLIM_SAMPLE_COUNT: usize = 96;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    /// Tensor primitives and image operations.
    Ops,
    Mdta,
    Gdfn,
    /// Transformer block, resampling units and the encoder-decoder.
    Unet,
    Losses,
    Model,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Ops,
        Suite::Mdta,
        Suite::Gdfn,
        Suite::Unet,
        Suite::Losses,
        Suite::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Ops => "ops",
            Suite::Mdta => "mdta",
            Suite::Gdfn => "gdfn",
            Suite::Unet => "unet",
            Suite::Losses => "losses",
            Suite::Model => "model",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Suite::Ops | Suite::Losses => PRIMITIVE_TOL,
            _ => COMPOSITE_TOL,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown gradient suite {s:?}")))
    }
}

/// Outcome of one checked case.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub suite: Suite,
    pub case: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

type F64 = Tensor<f64>;

fn rand(shape: &[usize], seed: u64) -> F64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
}

/// Random projection to a scalar so every output entry matters.
fn project(y: &F64, seed: u64) -> dpm_tensor::Result<F64> {
    Ok(y.mul(&rand(y.shape(), seed))?.sum())
}

fn init(seed: u64) -> ParamInit {
    ParamInit::new(seed, InitScheme::TruncatedNormal { std: 0.2 })
}

/// Every element of every parameter.
fn all_entries<M: Module<f64>>(m: &M) -> Vec<(usize, usize)> {
    m.parameters()
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.numel()).map(move |e| (i, e)))
        .collect()
}

struct Collector {
    suite: Suite,
    out: Vec<CaseResult>,
}

impl Collector {
    fn push(&mut self, case: impl Into<String>, report: GradCheckReport, tolerance: f64) {
        self.out.push(CaseResult {
            suite: self.suite,
            case: case.into(),
            report,
            tolerance,
        });
    }

    fn inputs<F>(&mut self, case: &str, f: F, inputs: &[F64]) -> Result<()>
    where
        F: Fn(&[F64]) -> dpm_tensor::Result<F64>,
    {
        let tol = self.suite.tolerance();
        self.push(case, check_inputs(f, inputs)?, tol);
        Ok(())
    }

    /// Like [`Collector::inputs`] for closures returning the crate's result.
    fn inputs_c<F>(&mut self, case: &str, f: F, inputs: &[F64]) -> Result<()>
    where
        F: Fn(&[F64]) -> Result<F64>,
    {
        let wrapped = |t: &[F64]| -> dpm_tensor::Result<F64> {
            f(t).map_err(|e| match e {
                Error::Tensor(t) => t,
                other => dpm_tensor::TensorError::Shape {
                    op: "gradient suite",
                    msg: other.to_string(),
                },
            })
        };
        self.inputs(case, wrapped, inputs)
    }

    fn module<M, F>(
        &mut self,
        case: &str,
        m: &mut M,
        loss: F,
        entries: &[(usize, usize)],
    ) -> Result<()>
    where
        M: Module<f64>,
        F: Fn(&M) -> Result<F64>,
    {
        let wrapped = |m: &M| -> dpm_tensor::Result<F64> {
            loss(m).map_err(|e| dpm_tensor::TensorError::Shape {
                op: "gradient suite",
                msg: e.to_string(),
            })
        };
        let tol = self.suite.tolerance();
        self.push(case, check_module(m, wrapped, entries)?, tol);
        Ok(())
    }
}

fn ops(c: &mut Collector) -> Result<()> {
    let x = rand(&[1, 2, 5, 5], 1);
    c.inputs(
        "conv2d",
        |t| project(&t[0].conv2d(&t[1], Some(&t[2]), 1, 1, 1)?, 2),
        &[x.clone(), rand(&[3, 2, 3, 3], 3), rand(&[3], 4)],
    )?;
    c.inputs(
        "sum(conv2d)",
        |t| Ok(t[0].conv2d(&t[1], None, 1, 1, 1)?.sum()),
        &[x.clone(), rand(&[2, 2, 3, 3], 5)],
    )?;
    c.inputs(
        "conv2d depthwise stride 2",
        |t| project(&t[0].conv2d(&t[1], None, 2, 1, 2)?, 6),
        &[x.clone(), rand(&[2, 1, 3, 3], 7)],
    )?;
    c.inputs(
        "pixel_unshuffle",
        |t| project(&t[0].pixel_unshuffle(2)?, 8),
        &[rand(&[1, 2, 4, 4], 9)],
    )?;
    c.inputs(
        "pixel_shuffle",
        |t| project(&t[0].pixel_shuffle(2)?, 10),
        &[rand(&[1, 8, 2, 2], 11)],
    )?;
    let s = rand(&[2, 3, 4], 12);
    c.inputs(
        "softmax",
        |t| project(&t[0].softmax(2)?, 13),
        std::slice::from_ref(&s),
    )?;
    c.inputs(
        "l2_normalize",
        |t| project(&t[0].l2_normalize(2, 1e-12)?, 14),
        std::slice::from_ref(&s),
    )?;
    let g = Tensor::from_vec(vec![-1.0, 0.5, 2.0], &[3])?;
    c.push("gelu", check_inputs(|t| Ok(t[0].gelu().sum()), &[g])?, 1e-5);
    c.inputs(
        "layer_norm_channel",
        |t| project(&t[0].layer_norm_channel(&t[1], 1e-5)?, 15),
        &[rand(&[2, 4, 3, 3], 16), rand(&[4], 17)],
    )?;
    c.inputs(
        "matmul",
        |t| project(&t[0].matmul(&t[1])?, 18),
        &[rand(&[2, 3, 4], 19), rand(&[4, 5], 20)],
    )?;
    c.inputs(
        "matmul_t",
        |t| project(&t[0].matmul_t(&t[1])?, 21),
        &[rand(&[2, 3, 4], 22), rand(&[2, 5, 4], 23)],
    )?;
    let a = rand(&[2, 3, 2, 2], 24);
    let b = rand(&[1, 3, 1, 1], 25).add_scalar(3.0);
    c.inputs(
        "add/sub/mul/div broadcast",
        |t| {
            let y = t[0].add(&t[1])?.mul(&t[0])?.sub(&t[1])?.div(&t[1])?;
            project(&y, 26)
        },
        &[a.clone(), b],
    )?;
    let pos = rand(&[3, 4], 27).add_scalar(2.5);
    c.inputs(
        "sqrt/exp/sqr/abs/scalar",
        |t| {
            let y = t[0]
                .sqrt()
                .add(&t[0].exp())?
                .add(&t[0].sqr())?
                .add(&t[0].abs().mul_scalar(0.5))?;
            project(&y.add_scalar(1.0).neg(), 28)
        },
        std::slice::from_ref(&pos),
    )?;
    c.inputs("mean", |t| Ok(t[0].mean()), std::slice::from_ref(&pos))?;
    c.inputs("sum_axis", |t| project(&t[0].sum_axis(1)?, 29), &[pos])?;
    let img = rand(&[1, 2, 4, 6], 30);
    c.inputs(
        "narrow/concat/reshape/permute",
        |t| {
            let l = t[0].narrow(3, 0, 3)?;
            let r = t[0].narrow(3, 3, 3)?;
            let y = Tensor::concat(&[r, l], 1)?
                .reshape(&[1, 4, 6, 2])?
                .permute(&[0, 3, 1, 2])?;
            project(&y, 31)
        },
        std::slice::from_ref(&img),
    )?;
    c.inputs(
        "pad2d reflect",
        |t| project(&t[0].pad2d((2, 1, 2, 3), PadMode::Reflect)?, 32),
        std::slice::from_ref(&img),
    )?;
    c.inputs(
        "dft2",
        |t| {
            let (re, im) = t[0].dft2()?;
            project(&re, 33)?.add(&project(&im, 34)?)
        },
        &[rand(&[1, 2, 4, 5], 35)],
    )?;
    let im8 = rand(&[1, 3, 8, 8], 36);
    c.inputs_c(
        "gaussian_downsample",
        |t| Ok(project(&gaussian_downsample(&t[0])?, 37)?),
        std::slice::from_ref(&im8),
    )?;
    c.inputs_c(
        "upsample_bilinear",
        |t| Ok(project(&upsample_bilinear(&t[0], 2)?, 38)?),
        &[rand(&[1, 2, 3, 4], 39)],
    )?;
    c.inputs_c(
        "laplacian",
        |t| Ok(project(&laplacian(&t[0])?, 40)?),
        std::slice::from_ref(&im8),
    )?;
    c.inputs_c(
        "rgb_to_y",
        |t| Ok(project(&rgb_to_y(&t[0], LumaConvention::Studio)?, 41)?),
        std::slice::from_ref(&im8),
    )?;
    c.inputs_c(
        "split/merge patches",
        |t| {
            let mut g = split_patches(&t[0], 2, 2)?;
            g.patches.swap(0, 3);
            Ok(project(&merge_patches(&g)?, 42)?)
        },
        &[im8],
    )?;
    Ok(())
}

fn mdta(c: &mut Collector) -> Result<()> {
    let mut m = Mdta::<f64>::new(&init(50), 4, 2, true)?;
    let x = rand(&[1, 4, 5, 5], 51);
    c.inputs_c(
        "mdta wrt input",
        |t| Ok(project(&m.forward(&t[0])?, 52)?),
        std::slice::from_ref(&x),
    )?;
    let entries = all_entries(&m);
    c.module(
        "mdta wrt parameters",
        &mut m,
        |m| Ok(project(&m.forward(&x)?, 52)?),
        &entries,
    )?;
    let mut plain = Mdta::<f64>::new(&init(53), 4, 1, false)?;
    let entries = all_entries(&plain);
    c.module(
        "mdta without q/k normalization",
        &mut plain,
        |m| Ok(project(&m.forward(&x)?, 54)?),
        &entries,
    )?;
    let g = Gdfn::<f64>::new(&init(55), 4, 2.66);
    c.inputs_c(
        "mdta then gdfn",
        |t| Ok(project(&g.forward(&m.forward(&t[0])?)?, 56)?),
        &[x],
    )?;
    Ok(())
}

fn gdfn(c: &mut Collector) -> Result<()> {
    let mut g = Gdfn::<f64>::new(&init(60), 4, 2.66);
    let x = rand(&[1, 4, 5, 5], 61);
    c.inputs_c(
        "gdfn wrt input",
        |t| Ok(project(&g.forward(&t[0])?, 62)?),
        std::slice::from_ref(&x),
    )?;
    let entries = all_entries(&g);
    c.module(
        "gdfn wrt parameters",
        &mut g,
        |m| Ok(project(&m.forward(&x)?, 62)?),
        &entries,
    )?;
    Ok(())
}

fn unet(c: &mut Collector) -> Result<()> {
    let mut b = TransformerBlock::<f64>::new(&init(70), 4, 2, 2.66, true)?;
    let x = rand(&[1, 4, 5, 5], 71);
    c.inputs_c(
        "block wrt input",
        |t| Ok(project(&b.forward(&t[0])?, 72)?),
        std::slice::from_ref(&x),
    )?;
    let entries = all_entries(&b);
    c.module(
        "block wrt parameters",
        &mut b,
        |m| Ok(project(&m.forward(&x)?, 72)?),
        &entries,
    )?;

    let d = Downsample::<f64>::new(&init(73), 4);
    c.inputs_c(
        "downsample",
        |t| Ok(project(&d.forward(&t[0])?, 74)?),
        &[rand(&[1, 4, 4, 4], 75)],
    )?;
    let u = Upsample::<f64>::new(&init(76), 8)?;
    c.inputs_c(
        "upsample",
        |t| Ok(project(&u.forward(&t[0])?, 77)?),
        &[rand(&[1, 8, 2, 2], 78)],
    )?;

    let cfg = UNetConfig {
        base_channels: 4,
        blocks_per_level: [1, 1, 1],
        ..Default::default()
    };
    let mut net = UNet::<f64>::new(&init(79), &cfg)?;
    let x8 = rand(&[1, 4, 8, 8], 80);
    c.inputs_c(
        "unet wrt input",
        |t| Ok(project(&net.forward(&t[0])?, 81)?),
        std::slice::from_ref(&x8),
    )?;
    let entries = sample_entries(&net, 0.05, 82);
    c.module(
        "unet wrt sampled parameters",
        &mut net,
        |m| Ok(project(&m.forward(&x8)?, 81)?),
        &entries,
    )?;
    Ok(())
}

fn losses(c: &mut Collector) -> Result<()> {
    let p = rand(&[1, 1, 4, 4], 90);
    let t = rand(&[1, 1, 4, 4], 91);
    c.inputs_c(
        "charbonnier",
        |x| charbonnier(&x[0], &t, 1e-3),
        std::slice::from_ref(&p),
    )?;
    c.inputs_c(
        "charbonnier at zero difference",
        |x| charbonnier(&x[0], &t, 1e-3),
        std::slice::from_ref(&t),
    )?;
    c.inputs_c(
        "edge_loss",
        |x| edge_loss(&x[0], &t, 1e-3),
        std::slice::from_ref(&p),
    )?;
    c.inputs_c(
        "fft_loss",
        |x| fft_distance(&x[0], &t),
        std::slice::from_ref(&p),
    )?;
    let p2 = rand(&[1, 1, 4, 4], 92);
    let t2 = rand(&[1, 1, 4, 4], 93);
    c.inputs_c(
        "total_loss",
        |x| {
            let mut set = SupervisionSet::default();
            set.push("a", x[0].clone(), t.clone(), 1.0)?;
            set.push("b", x[1].clone(), t2.clone(), 0.5)?;
            Ok(total_loss(&set, &LossWeights::default())?.total)
        },
        &[p, p2],
    )?;
    Ok(())
}

/// Deterministic uniform sample of parameter entries; at least one.
pub fn sample_entries<M: Module<f64>>(m: &M, fraction: f64, seed: u64) -> Vec<(usize, usize)> {
    let all = all_entries(m);
    let want = ((all.len() as f64 * fraction).ceil() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<(usize, usize)> = (0..want)
        .map(|_| all[rng.random_range(0..all.len())])
        .collect();
    picked.sort_unstable();
    picked.dedup();
    picked
}

/// The narrow whole-model configuration used for the model check.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        backbone: UNetConfig {
            base_channels: 4,
            blocks_per_level: [1, 1, 1],
            ..Default::default()
        },
        ..Default::default()
    }
}

fn model(c: &mut Collector) -> Result<()> {
    let mut m = DpmFormer::<f64>::new(&init(100), &gradcheck_model_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let x = Tensor::<f64>::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let entries = sample_entries(&m, MODEL_SAMPLE_FRACTION, 102);
    let case = format!("model wrt {} sampled parameters", entries.len());
    c.module(
        &case,
        &mut m,
        |m| Ok(project(&m.forward(&x)?.derained, 103)?),
        &entries,
    )?;

    let mut slim = DpmFormer::<f64>::new(&init(104), &ModelConfig::slim())?;
    let x = Tensor::<f64>::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
    let total = slim.parameter_count() as f64;
    let entries = sample_entries(&slim, SLIM_SAMPLE_COUNT as f64 / total, 105);
    let case = format!("slim model wrt {} sampled parameters", entries.len());
    c.module(
        &case,
        &mut slim,
        |m| Ok(project(&m.forward(&x)?.derained, 106)?),
        &entries,
    )?;
    c.inputs_c(
        "slim model wrt input",
        |xs| Ok(project(&slim.forward(&xs[0])?.derained, 107)?),
        &[x],
    )?;
    Ok(())
}

/// Runs one suite and returns every case, passing or not.
pub fn run_suite(suite: Suite) -> Result<Vec<CaseResult>> {
    let mut c = Collector {
        suite,
        out: Vec::new(),
    };
    match suite {
        Suite::Ops => ops(&mut c)?,
        Suite::Mdta => mdta(&mut c)?,
        Suite::Gdfn => gdfn(&mut c)?,
        Suite::Unet => unet(&mut c)?,
        Suite::Losses => losses(&mut c)?,
        Suite::Model => model(&mut c)?,
    }
    Ok(c.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_nonempty() {
        let m = Gdfn::<f64>::new(&init(0), 4, 2.66);
        let a = sample_entries(&m, 0.01, 1);
        assert!(!a.is_empty());
        assert_eq!(a, sample_entries(&m, 0.01, 1));
    }
}
