//! Paired-image ingestion, PNG I/O, synthetic rain and procedural scenes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dpm_tensor::Tensor;
use image::{DynamicImage, ImageReader, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aligned rainy/clean RGB images `[1, 3, H, W]` in [0, 1].
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub rainy: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub id: String,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, rainy: Tensor<f32>, clean: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        if rainy.shape() != clean.shape() || rainy.rank() != 4 || rainy.shape()[..2] != [1, 3] {
            return Err(Error::PairExtent {
                id,
                rainy: rainy.shape().to_vec(),
                clean: clean.shape().to_vec(),
            });
        }
        Ok(ImagePair { rainy, clean, id })
    }

    /// `(height, width)`.
    pub fn extent(&self) -> (usize, usize) {
        (self.clean.shape()[2], self.clean.shape()[3])
    }
}

/// Parameters of the streak generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RainParams {
    pub seed: u64,
    /// Fraction of pixels that seed a streak, in [0, 1).
    pub streak_density: f64,
    /// Streak length in pixels.
    pub streak_length: usize,
    /// Streak direction, degrees counter-clockwise from the x axis.
    pub angle_deg: f64,
    /// Brightness multiplier of the streak layer, in [0, 1].
    pub intensity: f64,
}

impl Default for RainParams {
    fn default() -> Self {
        RainParams {
            seed: 0,
            streak_density: 0.05,
            streak_length: 9,
            angle_deg: 75.0,
            intensity: 0.8,
        }
    }
}

impl RainParams {
    pub fn violations(&self, ctx: &str) -> Vec<String> {
        let mut v = Vec::new();
        if !(0.0..1.0).contains(&self.streak_density) {
            v.push(format!(
                "{ctx}.streak_density must lie in [0, 1), got {}",
                self.streak_density
            ));
        }
        if self.streak_length == 0 {
            v.push(format!("{ctx}.streak_length must be at least 1"));
        }
        if !self.angle_deg.is_finite() {
            v.push(format!("{ctx}.angle_deg must be finite"));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            v.push(format!(
                "{ctx}.intensity must lie in [0, 1], got {}",
                self.intensity
            ));
        }
        v
    }

    /// The same parameters with the seed offset for the `i`-th image.
    pub fn for_index(&self, i: usize) -> Self {
        RainParams {
            seed: self.seed.wrapping_add(i as u64),
            ..self.clone()
        }
    }
}

/// Unit-sum line kernel of odd side `k ≥ length`, point-symmetric about the
/// center.
pub fn line_kernel(length: usize, angle_deg: f64) -> (Vec<f64>, usize) {
    let k = if length % 2 == 1 { length } else { length + 1 };
    let c = (k / 2) as f64;
    let (s, co) = angle_deg.to_radians().sin_cos();
    let mut ker = vec![0.0; k * k];
    let half = (length as f64 - 1.0) / 2.0;
    let steps = 4 * length.max(1);
    for i in 0..=steps {
        let t = if steps == 0 {
            0.0
        } else {
            -half + 2.0 * half * i as f64 / steps as f64
        };
        for t in [t, -t] {
            // Rounding the offset (not the position) keeps the stamp
            // point-symmetric, since round(-v) = -round(v).
            let x = (c + (t * co).round()) as usize;
            let y = (c - (t * s).round()) as usize;
            ker[y.min(k - 1) * k + x.min(k - 1)] = 1.0;
        }
    }
    let sum: f64 = ker.iter().sum();
    ker.iter_mut().for_each(|v| *v /= sum);
    (ker, k)
}

/// The additive streak layer for an `h×w` image.
pub fn streak_layer(h: usize, w: usize, p: &RainParams) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let threshold = 1.0 - p.streak_density;
    let seeds: Vec<f64> = (0..h * w)
        .map(|_| {
            if rng.random::<f64>() > threshold {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let (ker, k) = line_kernel(p.streak_length, p.angle_deg);
    let r = (k / 2) as isize;
    let mut layer = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                let sy = y + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let sx = x + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let kv = ker[((dy + r) * k as isize + dx + r) as usize];
                    if kv != 0.0 {
                        acc += kv * seeds[(sy * w as isize + sx) as usize];
                    }
                }
            }
            layer[(y * w as isize + x) as usize] = acc * p.intensity;
        }
    }
    layer
}

/// `clip(clean + streaks)` with the same streak layer on every channel.
pub fn synthesize_rain(clean: &Tensor<f32>, p: &RainParams) -> Result<Tensor<f32>> {
    let (n, c, h, w) = clean.dims4()?;
    let layer = streak_layer(h, w, p);
    let data: Vec<f32> = clean
        .data()
        .chunks(h * w)
        .flat_map(|plane| {
            plane
                .iter()
                .zip(&layer)
                .map(|(&v, &s)| (v as f64 + s).clamp(0.0, 1.0) as f32)
        })
        .collect();
    Ok(Tensor::from_vec(data, &[n, c, h, w])?)
}

/// Deterministic smooth synthetic scene: a colour gradient with a few
/// overlapping discs, rectangles and a sinusoidal texture band.
pub fn procedural_scene(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ce0e);
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        [
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
        ]
    };
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let mut img = vec![[0.0f64; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let t = (x + y) as f64 / (h + w) as f64;
            for ch in 0..3 {
                img[y * w + x][ch] = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
        }
    }
    for _ in 0..rng.random_range(2..5) {
        let col = color(&mut rng);
        let (cy, cx) = (
            rng.random_range(0.0..h as f64),
            rng.random_range(0.0..w as f64),
        );
        let rad = rng.random_range(0.1..0.35) * h.min(w) as f64;
        let rect = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if rect {
                    dy.abs() < rad && dx.abs() < 0.7 * rad
                } else {
                    dy * dy + dx * dx < rad * rad
                };
                if inside {
                    img[y * w + x] = col;
                }
            }
        }
    }
    let freq = rng.random_range(0.2..0.6);
    let amp = rng.random_range(0.03..0.08);
    for y in 0..h {
        for x in 0..w {
            let s = amp * (freq * x as f64 + 0.5 * freq * y as f64).sin();
            for ch in 0..3 {
                img[y * w + x][ch] = (img[y * w + x][ch] + s).clamp(0.0, 1.0);
            }
        }
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in img.iter().enumerate() {
        for ch in 0..3 {
            data[ch * h * w + i] = px[ch] as f32;
        }
    }
    Tensor::from_vec(data, &[1, 3, h, w]).expect("scene shape")
}

/// Decodes an 8- or 16-bit PNG into `[1, 3, H, W]` in [0, 1].
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let wide = matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    let interleaved: Vec<f32> = if wide {
        img.to_rgb16()
            .into_raw()
            .iter()
            .map(|&v| v as f32 / 65535.0)
            .collect()
    } else {
        img.to_rgb8()
            .into_raw()
            .iter()
            .map(|&v| v as f32 / 255.0)
            .collect()
    };
    let mut planar = vec![0.0f32; 3 * h * w];
    for (i, px) in interleaved.chunks(3).enumerate() {
        for ch in 0..3 {
            planar[ch * h * w + i] = px[ch];
        }
    }
    Ok(Tensor::from_vec(planar, &[1, 3, h, w])?)
}

/// Encodes the first image of an RGB batch as an 8-bit PNG, clipping to [0, 1].
pub fn save_png(path: &Path, x: &Tensor<f32>) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(Error::Invalid(format!(
            "save_png: expected 3 channels, got {c}"
        )));
    }
    let d = x.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |px, py| {
        let i = py as usize * w + px as usize;
        let q = |ch: usize| (d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}

/// PNG files in a directory keyed by file name.
pub fn list_pngs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Files present in only one of two directories.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SkipReport {
    pub only_in_first: Vec<String>,
    pub only_in_second: Vec<String>,
}

impl SkipReport {
    pub fn is_empty(&self) -> bool {
        self.only_in_first.is_empty() && self.only_in_second.is_empty()
    }
}

impl std::fmt::Display for SkipReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "unmatched files: first dir {:?}, second dir {:?}",
            self.only_in_first, self.only_in_second
        )
    }
}

/// Names present in both directories (sorted) and the leftovers.
pub fn match_names(a: &Path, b: &Path) -> Result<(Vec<(String, PathBuf, PathBuf)>, SkipReport)> {
    let (fa, fb) = (list_pngs(a)?, list_pngs(b)?);
    let mut matched = Vec::new();
    let mut skip = SkipReport::default();
    for (name, pa) in &fa {
        match fb.get(name) {
            Some(pb) => matched.push((name.clone(), pa.clone(), pb.clone())),
            None => skip.only_in_first.push(name.clone()),
        }
    }
    skip.only_in_second = fb
        .keys()
        .filter(|n| !fa.contains_key(*n))
        .cloned()
        .collect();
    Ok((matched, skip))
}

/// Pairs same-named PNGs from a rainy and a clean directory, sorted by name.
pub fn load_pairs(rainy_dir: &Path, clean_dir: &Path) -> Result<(Vec<ImagePair>, SkipReport)> {
    let (matched, skip) = match_names(rainy_dir, clean_dir)?;
    let pairs = matched
        .into_iter()
        .map(|(name, pr, pc)| {
            let id = name
                .trim_end_matches(".png")
                .trim_end_matches(".PNG")
                .to_string();
            ImagePair::new(id, load_png(&pr)?, load_png(&pc)?)
        })
        .collect::<Result<_>>()?;
    Ok((pairs, skip))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub rainy: PathBuf,
    pub clean: PathBuf,
    pub id: String,
}

/// Dataset listing; relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub pairs: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<RainParams>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vec<ImagePair>> {
        let m = Self::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.pairs
            .iter()
            .map(|e| {
                ImagePair::new(
                    e.id.clone(),
                    load_png(&base.join(&e.rainy))?,
                    load_png(&base.join(&e.clean))?,
                )
            })
            .collect()
    }
}

/// Synthesizes `count` pairs from `cleans` (cycled in order, each with its
/// own seed offset) and writes `rainy/`, `clean/` and `manifest.json`.
pub fn write_synthetic_set(
    cleans: &[(String, Tensor<f32>)],
    params: &RainParams,
    count: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    if cleans.is_empty() {
        return Err(Error::Invalid("no clean images to synthesize from".into()));
    }
    for sub in ["rainy", "clean"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let (name, clean) = &cleans[i % cleans.len()];
        let id = if count > cleans.len() {
            format!("{name}_{i:04}")
        } else {
            name.clone()
        };
        let rainy = synthesize_rain(clean, &params.for_index(i))?;
        let file = format!("{id}.png");
        save_png(&out_dir.join("rainy").join(&file), &rainy)?;
        save_png(&out_dir.join("clean").join(&file), clean)?;
        pairs.push(ManifestEntry {
            rainy: PathBuf::from("rainy").join(&file),
            clean: PathBuf::from("clean").join(&file),
            id,
        });
    }
    let manifest = Manifest {
        pairs,
        generator: Some(params.clone()),
    };
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_kernel_sums_to_one_and_is_symmetric() {
        for (len, ang) in [(9, 75.0), (4, 0.0), (1, 30.0)] {
            let (k, side) = line_kernel(len, ang);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..side * side {
                assert_eq!(k[i], k[side * side - 1 - i]);
            }
        }
    }

    #[test]
    fn rain_contracts() {
        let clean = Tensor::<f32>::full(&[1, 3, 32, 32], 0.5);
        let off = RainParams {
            intensity: 0.0,
            ..Default::default()
        };
        assert_eq!(
            synthesize_rain(&clean, &off).unwrap().to_vec(),
            clean.to_vec()
        );
        let p = RainParams {
            streak_density: 0.05,
            intensity: 0.5,
            ..Default::default()
        };
        let a = synthesize_rain(&clean, &p).unwrap();
        assert_eq!(a.to_vec(), synthesize_rain(&clean, &p).unwrap().to_vec());
        assert!(a.mean().item() > clean.mean().item());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let a = procedural_scene(3, 24, 40);
        assert_eq!(a.shape(), &[1, 3, 24, 40]);
        assert_eq!(a.to_vec(), procedural_scene(3, 24, 40).to_vec());
        assert_ne!(a.to_vec(), procedural_scene(4, 24, 40).to_vec());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pair_extent_mismatch() {
        let r = ImagePair::new(
            "x",
            Tensor::zeros(&[1, 3, 8, 8]),
            Tensor::zeros(&[1, 3, 8, 16]),
        );
        assert!(matches!(r, Err(Error::PairExtent { .. })));
    }
}
