//! Synthetic texture datasets with exact defect masks, written in the same
//! directory layout the loader expects.

use crate::dense::{DenseArray, Shape};
use crate::error::{Error, Result};
use crate::feat::gaussian_blur;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    /// Gaussian-smoothed uniform noise.
    SmoothNoise,
    /// Periodic grid with mild noise.
    Grid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    /// Connected blob grown from a seed pixel.
    Blob,
    /// Thin stroke along a random walk.
    Scratch,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub category: String,
    pub image_size: usize,
    pub train_normal: usize,
    pub test_normal: usize,
    pub test_defective: usize,
    pub texture: TextureKind,
    pub defect: DefectKind,
    /// Additive intensity offset applied on defect pixels, clamped to [0, 1].
    pub defect_intensity: f64,
    /// Inclusive pixel-area range for the defect mask of each image.
    pub defect_area: [usize; 2],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            category: "synthetic".to_string(),
            image_size: 256,
            train_normal: 40,
            test_normal: 10,
            test_defective: 10,
            texture: TextureKind::SmoothNoise,
            defect: DefectKind::Blob,
            defect_intensity: 0.3,
            defect_area: [200, 800],
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let spec: SynthSpec =
            toml::from_str(&text).map_err(|e| Error::config(format!("synth spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::config("image_size must be at least 32".to_string()));
        }
        let [lo, hi] = self.defect_area;
        if lo == 0 || lo > hi {
            return Err(Error::config(format!(
                "defect_area range [{lo}, {hi}] is unsatisfiable (need 0 < min <= max)"
            )));
        }
        // defects stay away from a small border margin
        let usable = (self.image_size - 2 * self.margin()).pow(2);
        if hi > usable {
            return Err(Error::config(format!(
                "defect_area max {hi} exceeds usable interior of {usable} pixels"
            )));
        }
        if !(0.0..=1.0).contains(&self.defect_intensity) || self.defect_intensity == 0.0 {
            return Err(Error::config(
                "defect_intensity must be in (0, 1]".to_string(),
            ));
        }
        Ok(())
    }

    fn margin(&self) -> usize {
        4
    }
}

fn texture_image(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<DenseArray<f32>> {
    let n = spec.image_size;
    let gray: DenseArray<f32> = match spec.texture {
        TextureKind::SmoothNoise => {
            let noise = DenseArray::from_fn(Shape::d2(n, n), |_| rng.gen::<f32>());
            let blurred = gaussian_blur(&noise, 3.0)?;
            let lo = blurred.min_value();
            let hi = blurred.max_value();
            let span = (hi - lo).max(1e-6);
            blurred.map(|v| 0.25 + 0.5 * (v - lo) / span)
        }
        TextureKind::Grid => {
            let period = 16.0f32;
            let phase_y = rng.gen::<f32>() * period;
            let phase_x = rng.gen::<f32>() * period;
            let base = DenseArray::from_fn(Shape::d2(n, n), |i| {
                let (y, x) = ((i / n) as f32, (i % n) as f32);
                let gy = ((y + phase_y) * std::f32::consts::TAU / period).sin();
                let gx = ((x + phase_x) * std::f32::consts::TAU / period).sin();
                0.5 + 0.12 * (gy + gx)
            });
            let noise = DenseArray::from_fn(Shape::d2(n, n), |_| rng.gen::<f32>() * 0.04);
            DenseArray::new(
                Shape::d2(n, n),
                base.data()
                    .iter()
                    .zip(noise.data())
                    .map(|(a, b)| a + b)
                    .collect(),
            )?
        }
    };
    let mut rgb = DenseArray::zeros(Shape::d3(3, n, n));
    for c in 0..3 {
        rgb.data_mut()[c * n * n..(c + 1) * n * n].copy_from_slice(gray.data());
    }
    Ok(rgb)
}

/// Grow a connected pixel set of exactly `target` cells inside the margin.
fn grow_blob(
    n: usize,
    margin: usize,
    target: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let lo = margin;
    let hi = n - margin;
    let start = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
    let mut cells = HashSet::new();
    let mut chosen = Vec::with_capacity(target);
    let mut frontier = vec![start];
    cells.insert(start);
    while chosen.len() < target && !frontier.is_empty() {
        let pick = rng.gen_range(0..frontier.len());
        let (y, x) = frontier.swap_remove(pick);
        chosen.push((y, x));
        for (dy, dx) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
            let (ny, nx) = ((y as i64 + dy) as usize, (x as i64 + dx) as usize);
            if ny >= lo && ny < hi && nx >= lo && nx < hi && cells.insert((ny, nx)) {
                frontier.push((ny, nx));
            }
        }
    }
    chosen
}

/// Stamp a thin stroke along a random walk, stopping exactly at `target`.
fn grow_scratch(
    n: usize,
    margin: usize,
    target: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let lo = margin as f64;
    let hi = (n - margin) as f64;
    let mut y = rng.gen_range(lo..hi);
    let mut x = rng.gen_range(lo..hi);
    let mut angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut cells: HashSet<(usize, usize)> = HashSet::new();
    let mut chosen = Vec::with_capacity(target);
    while chosen.len() < target {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (py, px) = (y as i64 + dy, x as i64 + dx);
                if py >= lo as i64 && (py as f64) < hi && px >= lo as i64 && (px as f64) < hi {
                    let cell = (py as usize, px as usize);
                    if cells.insert(cell) {
                        chosen.push(cell);
                        if chosen.len() == target {
                            return chosen;
                        }
                    }
                }
            }
        }
        angle += rng.gen_range(-0.35..0.35);
        y = (y + angle.sin()).clamp(lo, hi - 1.0);
        x = (x + angle.cos()).clamp(lo, hi - 1.0);
    }
    chosen
}

fn save_rgb(path: &Path, img: &DenseArray<f32>) -> Result<()> {
    let s = img.shape();
    let (h, w) = (s.at(1), s.at(2));
    let mut bytes = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push((img.data()[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let im = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::internal("rgb buffer size mismatch".to_string()))?;
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))
        .map_err(|e| Error::data(format!("mkdir: {e}")))?;
    im.save(path)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn save_mask(path: &Path, cells: &[(usize, usize)], n: usize) -> Result<()> {
    let mut bytes = vec![0u8; n * n];
    for &(y, x) in cells {
        bytes[y * n + x] = 255;
    }
    let im = image::GrayImage::from_raw(n as u32, n as u32, bytes)
        .ok_or_else(|| Error::internal("mask buffer size mismatch".to_string()))?;
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))
        .map_err(|e| Error::data(format!("mkdir: {e}")))?;
    im.save(path)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Materialize the dataset under `out_root/<category>/...`.
pub fn synth_generate(spec: &SynthSpec, out_root: &Path) -> Result<()> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = out_root.join(&spec.category);
    let n = spec.image_size;
    let group = match spec.defect {
        DefectKind::Blob => "blob",
        DefectKind::Scratch => "scratch",
    };

    for i in 0..spec.train_normal {
        let img = texture_image(spec, &mut rng)?;
        save_rgb(&base.join(format!("train/good/{i:03}.png")), &img)?;
    }
    for i in 0..spec.test_normal {
        let img = texture_image(spec, &mut rng)?;
        save_rgb(&base.join(format!("test/good/{i:03}.png")), &img)?;
    }
    for i in 0..spec.test_defective {
        let mut img = texture_image(spec, &mut rng)?;
        let target = rng.gen_range(spec.defect_area[0]..=spec.defect_area[1]);
        let cells = match spec.defect {
            DefectKind::Blob => grow_blob(n, spec.margin(), target, &mut rng),
            DefectKind::Scratch => grow_scratch(n, spec.margin(), target, &mut rng),
        };
        let offset = spec.defect_intensity as f32;
        for &(y, x) in &cells {
            for c in 0..3 {
                let v = &mut img.data_mut()[c * n * n + y * n + x];
                *v = (*v + offset).min(1.0);
            }
        }
        save_rgb(&base.join(format!("test/{group}/{i:03}.png")), &img)?;
        save_mask(
            &base.join(format!("ground_truth/{group}/{i:03}_mask.png")),
            &cells,
            n,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, preprocess_mask};

    #[test]
    fn generated_dataset_loads_with_exact_mask_areas() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            category: "t".to_string(),
            image_size: 64,
            train_normal: 2,
            test_normal: 1,
            test_defective: 3,
            defect_area: [40, 80],
            seed: 5,
            ..SynthSpec::default()
        };
        synth_generate(&spec, dir.path()).unwrap();
        let idx = load_dataset(dir.path(), "t").unwrap();
        assert_eq!(idx.train_good().len(), 2);
        assert_eq!(idx.test_good().len(), 1);
        assert_eq!(idx.test_defect().len(), 3);
        for i in idx.test_defect() {
            let mask = preprocess_mask(idx.entries[i].mask.as_ref().unwrap(), 64).unwrap();
            let area = mask.data().iter().filter(|&&v| v == 1.0).count();
            assert!((40..=80).contains(&area), "area {area}");
        }
    }

    #[test]
    fn generation_is_bit_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            category: "t".to_string(),
            image_size: 48,
            train_normal: 1,
            test_normal: 1,
            test_defective: 1,
            defect_area: [30, 60],
            texture: TextureKind::Grid,
            defect: DefectKind::Scratch,
            seed: 11,
            ..SynthSpec::default()
        };
        synth_generate(&spec, d1.path()).unwrap();
        synth_generate(&spec, d2.path()).unwrap();
        for rel in [
            "t/train/good/000.png",
            "t/test/good/000.png",
            "t/test/scratch/000.png",
            "t/ground_truth/scratch/000_mask.png",
        ] {
            let a = std::fs::read(d1.path().join(rel)).unwrap();
            let b = std::fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel}");
        }
    }

    #[test]
    fn unsatisfiable_area_is_config_error() {
        let bad = SynthSpec {
            defect_area: [500, 100],
            ..SynthSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad2 = SynthSpec {
            image_size: 32,
            defect_area: [100, 10000],
            ..SynthSpec::default()
        };
        assert!(bad2.validate().is_err());
    }
}
