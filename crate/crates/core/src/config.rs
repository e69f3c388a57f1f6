//! Run configuration: one JSON document for model, training, data and output.
//!
//! Parsing is strict: every unknown key anywhere in the document is reported
//! (not just the first), missing keys take their defaults, and semantic
//! constraints are collected across all sections before failing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{load_pairs, procedural_scene, synthesize_rain, ImagePair, Manifest, RainParams};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SPATIAL_MULTIPLE};
use crate::trainer::TrainConfig;
use crate::unet::UNetConfig;

/// In-memory procedural pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticData {
    pub count: usize,
    /// Side of the square scenes.
    pub size: usize,
    pub rain: RainParams,
}

impl Default for SyntheticData {
    fn default() -> Self {
        SyntheticData {
            count: 4,
            size: 64,
            rain: RainParams::default(),
        }
    }
}

impl SyntheticData {
    pub fn generate(&self) -> Result<Vec<ImagePair>> {
        (0..self.count)
            .map(|i| {
                let clean = procedural_scene(i as u64, self.size, self.size);
                let rainy = synthesize_rain(&clean, &self.rain.for_index(i))?;
                ImagePair::new(format!("scene_{i:02}"), rainy, clean)
            })
            .collect()
    }
}

/// Where training (and optional held-out evaluation) pairs come from.
/// Exactly one training source must be given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub rainy_dir: Option<PathBuf>,
    pub clean_dir: Option<PathBuf>,
    pub synthetic: Option<SyntheticData>,
    /// Use only the first `limit` training pairs (after sorting).
    pub limit: Option<usize>,
    /// Held-out pairs for evaluation; the training set is used when absent.
    pub eval_manifest: Option<PathBuf>,
}

impl DataConfig {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let dirs = self.rainy_dir.is_some() || self.clean_dir.is_some();
        let sources = [self.manifest.is_some(), dirs, self.synthetic.is_some()]
            .iter()
            .filter(|&&b| b)
            .count();
        if sources != 1 {
            v.push("data: give exactly one of manifest, rainy_dir+clean_dir, synthetic".into());
        }
        if dirs && (self.rainy_dir.is_none() || self.clean_dir.is_none()) {
            v.push("data: rainy_dir and clean_dir must be given together".into());
        }
        if let Some(s) = &self.synthetic {
            if s.count == 0 {
                v.push("data.synthetic.count must be at least 1".into());
            }
            if s.size == 0 || s.size % SPATIAL_MULTIPLE != 0 {
                v.push(format!(
                    "data.synthetic.size must be a positive multiple of {SPATIAL_MULTIPLE}, got {}",
                    s.size
                ));
            }
            v.extend(s.rain.violations("data.synthetic.rain"));
        }
        if self.limit == Some(0) {
            v.push("data.limit must be at least 1".into());
        }
        v
    }

    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.manifest,
            &mut self.rainy_dir,
            &mut self.clean_dir,
            &mut self.eval_manifest,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Loads the training pairs (honouring `limit`) and the evaluation pairs.
    pub fn load(&self) -> Result<(Vec<ImagePair>, Vec<ImagePair>)> {
        let mut train = if let Some(m) = &self.manifest {
            Manifest::load(m)?
        } else if let (Some(r), Some(c)) = (&self.rainy_dir, &self.clean_dir) {
            let (pairs, skip) = load_pairs(r, c)?;
            if !skip.is_empty() {
                log::warn!("{skip}");
            }
            pairs
        } else if let Some(s) = &self.synthetic {
            s.generate()?
        } else {
            return Err(Error::Config(self.violations()));
        };
        if let Some(n) = self.limit {
            train.truncate(n);
        }
        if train.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        let eval = match &self.eval_manifest {
            Some(m) => Manifest::load(m)?,
            None => Vec::new(),
        };
        Ok((train, eval))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// A value with every optional section filled, used to enumerate valid keys.
fn schema() -> Value {
    let cfg = RunConfig {
        model: ModelConfig {
            branch: Some(UNetConfig::default()),
            ..Default::default()
        },
        data: DataConfig {
            manifest: Some(PathBuf::new()),
            rainy_dir: Some(PathBuf::new()),
            clean_dir: Some(PathBuf::new()),
            synthetic: Some(SyntheticData::default()),
            limit: Some(1),
            eval_manifest: Some(PathBuf::new()),
        },
        ..Default::default()
    };
    serde_json::to_value(cfg).expect("config serializes")
}

/// Removes keys absent from `schema`, recording each one's dotted path.
fn strip_unknown_keys(doc: &mut Value, schema: &Value, path: &str, out: &mut Vec<String>) {
    if let (Value::Object(d), Value::Object(s)) = (doc, schema) {
        d.retain(|k, v| {
            let p = if path.is_empty() {
                k.clone()
            } else {
                format!("{path}.{k}")
            };
            match s.get(k) {
                Some(sv) => {
                    strip_unknown_keys(v, sv, &p, out);
                    true
                }
                None => {
                    out.push(format!("unknown key {p}"));
                    false
                }
            }
        });
    }
}

impl RunConfig {
    /// Desk-scale preset: narrow model, four procedural 64×64 pairs.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::slim(),
            train: TrainConfig {
                epochs: 125,
                batch_size: 1,
                crop: 64,
                lr_max: 1e-3,
                eval_every: 25,
                checkpoint_every: 25,
                ..Default::default()
            },
            data: DataConfig {
                synthetic: Some(SyntheticData::default()),
                ..Default::default()
            },
            output_dir: PathBuf::from("runs/desk"),
        }
    }

    /// Parses and validates; relative paths resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(vec![format!("malformed JSON: {e}")]))?;
        if !doc.is_object() {
            return Err(Error::Config(vec![
                "the configuration must be a JSON object".into(),
            ]));
        }
        let mut errs = Vec::new();
        strip_unknown_keys(&mut doc, &schema(), "", &mut errs);
        let mut cfg: RunConfig = match serde_json::from_value(doc) {
            Ok(c) => c,
            Err(e) => {
                errs.push(e.to_string());
                return Err(Error::Config(errs));
            }
        };
        errs.extend(cfg.violations());
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        cfg.data.resolve(base);
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model.violations();
        v.extend(self.train.violations());
        v.extend(self.data.violations());
        if self.output_dir.as_os_str().is_empty() {
            v.push("output_dir must not be empty".into());
        }
        v
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes `output_dir/config.resolved.json` and returns its path.
    pub fn write_resolved(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))?;
        let path = self.output_dir.join("config.resolved.json");
        std::fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
