//! Dataset ingestion and preprocessing for MVTec-AD-style directory layouts,
//! plus persistence of arrays, checkpoints, and prediction masks.
//!
//! Layout per category:
//!   `<root>/<category>/train/good/*.png`
//!   `<root>/<category>/test/<group>/*.png`
//!   `<root>/<category>/ground_truth/<group>/<stem>_mask.png`

pub mod container;
pub mod synth;

use crate::dense::{DenseArray, Shape};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

pub use container::{load_array, load_checkpoint, save_array, save_checkpoint, Checkpoint};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    TrainGood,
    TestGood,
    TestDefect,
}

#[derive(Clone, Debug)]
pub struct ImageEntry {
    pub path: PathBuf,
    pub split: Split,
    /// Defect group name for defective test images.
    pub group: Option<String>,
    pub mask: Option<PathBuf>,
}

impl ImageEntry {
    pub fn id(&self) -> String {
        let stem = self
            .path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_default();
        match (&self.split, &self.group) {
            (Split::TrainGood, _) => format!("train/good/{stem}"),
            (Split::TestGood, _) => format!("test/good/{stem}"),
            (Split::TestDefect, Some(g)) => format!("test/{g}/{stem}"),
            (Split::TestDefect, None) => format!("test/?/{stem}"),
        }
    }
}

/// Sorted, fully-resolved index of one category.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub category: String,
    pub root: PathBuf,
    pub entries: Vec<ImageEntry>,
}

impl DatasetIndex {
    pub fn train_good(&self) -> Vec<usize> {
        self.filter(Split::TrainGood)
    }
    pub fn test_good(&self) -> Vec<usize> {
        self.filter(Split::TestGood)
    }
    pub fn test_defect(&self) -> Vec<usize> {
        self.filter(Split::TestDefect)
    }
    fn filter(&self, s: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == s)
            .map(|(i, _)| i)
            .collect()
    }
    /// Sorted unique defect group names.
    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self
            .entries
            .iter()
            .filter_map(|e| e.group.clone())
            .collect();
        g.sort();
        g.dedup();
        g
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let rd = std::fs::read_dir(dir)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", dir.display())))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::data(format!("read_dir: {e}")))?;
        let p = entry.path();
        if p.is_file() && is_image(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let rd = std::fs::read_dir(dir)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", dir.display())))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::data(format!("read_dir: {e}")))?;
        let p = entry.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Build a dataset index, pairing every defective test image with its mask.
pub fn load_dataset(root: &Path, category: &str) -> Result<DatasetIndex> {
    let base = root.join(category);
    let train_good = base.join("train").join("good");
    let test = base.join("test");
    if !train_good.is_dir() || !test.is_dir() {
        return Err(Error::data(format!(
            "{} does not follow the expected layout (need train/good and test)",
            base.display()
        )));
    }
    let mut entries = Vec::new();
    for p in sorted_images(&train_good)? {
        entries.push(ImageEntry {
            path: p,
            split: Split::TrainGood,
            group: None,
            mask: None,
        });
    }
    for group_dir in sorted_subdirs(&test)? {
        let group = group_dir
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_default();
        for p in sorted_images(&group_dir)? {
            if group == "good" {
                entries.push(ImageEntry {
                    path: p,
                    split: Split::TestGood,
                    group: None,
                    mask: None,
                });
            } else {
                let stem = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().to_string())
                    .unwrap_or_default();
                let mask = base
                    .join("ground_truth")
                    .join(&group)
                    .join(format!("{stem}_mask.png"));
                if !mask.is_file() {
                    return Err(Error::data(format!(
                        "defective image {} has no mask at {}",
                        p.display(),
                        mask.display()
                    )));
                }
                entries.push(ImageEntry {
                    path: p,
                    split: Split::TestDefect,
                    group: Some(group.clone()),
                    mask: Some(mask),
                });
            }
        }
    }
    Ok(DatasetIndex {
        category: category.to_string(),
        root: root.to_path_buf(),
        entries,
    })
}

/// Bilinear resize of a (c, h, w) array; the mapping aligns pixel centers so
/// a same-size resize is the identity.
pub fn bilinear_resize(src: &DenseArray<f32>, out_h: usize, out_w: usize) -> DenseArray<f32> {
    let s = src.shape();
    let (c, h, w) = (s.at(0), s.at(1), s.at(2));
    if h == out_h && w == out_w {
        return src.clone();
    }
    let mut out = DenseArray::zeros(Shape::d3(c, out_h, out_w));
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    for ci in 0..c {
        let plane = &src.data()[ci * h * w..(ci + 1) * h * w];
        for oy in 0..out_h {
            let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f32;
            for ox in 0..out_w {
                let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f32;
                let v = plane[y0 * w + x0] * (1.0 - wy) * (1.0 - wx)
                    + plane[y0 * w + x1] * (1.0 - wy) * wx
                    + plane[y1 * w + x0] * wy * (1.0 - wx)
                    + plane[y1 * w + x1] * wy * wx;
                out.data_mut()[(ci * out_h + oy) * out_w + ox] = v;
            }
        }
    }
    out
}

/// Nearest-neighbor resize of a single-channel (h, w) map.
pub fn nearest_resize(src: &DenseArray<f32>, out_h: usize, out_w: usize) -> DenseArray<f32> {
    let s = src.shape();
    let (h, w) = (s.at(0), s.at(1));
    if h == out_h && w == out_w {
        return src.clone();
    }
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    DenseArray::from_fn(Shape::d2(out_h, out_w), |i| {
        let (oy, ox) = (i / out_w, i % out_w);
        let y = (((oy as f32 + 0.5) * sy) as usize).min(h - 1);
        let x = (((ox as f32 + 0.5) * sx) as usize).min(w - 1);
        src.data()[y * w + x]
    })
}

/// Decode, replicate grayscale to RGB, scale to [0,1], bilinear-resize.
pub fn preprocess(path: &Path, target: usize) -> Result<DenseArray<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut arr = DenseArray::zeros(Shape::d3(3, h, w));
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            arr.data_mut()[c * h * w + i] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(bilinear_resize(&arr, target, target))
}

/// Decode a ground-truth mask to a binary (target x target) map using
/// nearest-neighbor resize and re-binarization at one half.
pub fn preprocess_mask(path: &Path, target: usize) -> Result<DenseArray<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot decode {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let arr = DenseArray::new(
        Shape::d2(h, w),
        img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
    )?;
    let resized = nearest_resize(&arr, target, target);
    Ok(resized.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

/// Write a probability map as an 8-bit grayscale PNG (value x 255, rounded).
pub fn export_mask_png(path: &Path, map: &DenseArray<f32>) -> Result<()> {
    let s = map.shape();
    let (h, w) = (s.at(0), s.at(1));
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::internal("mask buffer size mismatch".to_string()))?;
    img.save(path)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Per-group random labeled-anomaly selection, reproducible from the seed.
#[derive(Clone, Debug)]
pub struct LabeledSubset {
    pub seed: u64,
    /// (group name, sorted entry indices into the index)
    pub groups: Vec<(String, Vec<usize>)>,
}

impl LabeledSubset {
    pub fn all_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.groups.iter().flat_map(|(_, g)| g.clone()).collect();
        v.sort_unstable();
        v
    }
}

/// Choose up to `per_group` defective test images per defect group, uniformly
/// without replacement.
pub fn select_labeled(index: &DatasetIndex, per_group: usize, seed: u64) -> LabeledSubset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    for group in index.groups() {
        let candidates: Vec<usize> = index
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.group.as_deref() == Some(group.as_str()))
            .map(|(i, _)| i)
            .collect();
        let mut chosen: Vec<usize> = candidates
            .choose_multiple(&mut rng, per_group.min(candidates.len()))
            .copied()
            .collect();
        chosen.sort_unstable();
        groups.push((group, chosen));
    }
    LabeledSubset { seed, groups }
}

/// Choose a fixed-size subset of normal training images by seed.
pub fn select_normal_subset(index: &DatasetIndex, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates = index.train_good();
    let mut chosen: Vec<usize> = candidates
        .choose_multiple(&mut rng, count.min(candidates.len()))
        .copied()
        .collect();
    chosen.sort_unstable();
    chosen
}
