//! Synthetic fine-grained benchmark: coarse shapes shared by pairs of classes
//! that differ only in a faint 3-pixel mark, plus real/synthetic mixing.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contour::{ContourError, GrayImage};
use crate::tensor::Tensor;

pub const SIDE: usize = 16;
pub const SHAPES: [&str; 4] = ["disc", "slab", "diamond", "pillar"];
pub const MAX_CLASSES: usize = 2 * SHAPES.len();
pub const STYLES: usize = 4;
/// (background, foreground) intensities per style.
pub const PALETTES: [(u8, u8); STYLES] = [(30, 200), (60, 225), (15, 175), (45, 210)];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark: {0}")]
    Invalid(String),
    #[error("mix at ratio {ratio} needs {needed} synthetic images, pool has {available}")]
    InsufficientPool {
        ratio: f64,
        needed: usize,
        available: usize,
    },
    #[error(transparent)]
    Contour(#[from] ContourError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub classes: usize,
    pub per_class: usize,
    /// Std of additive pixel noise, in 8-bit units.
    pub noise: f64,
    pub seed: u64,
    /// Random translation bound in pixels.
    pub max_shift: i32,
    /// Random intensity jitter of foreground/background.
    pub jitter: bool,
    /// How much darker than the foreground the mark pixels are.
    pub mark_depth: u8,
    /// Per-class share of images in the train and val splits; the rest is
    /// test.
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 64,
            noise: 8.0,
            seed: 7,
            max_shift: 1,
            jitter: true,
            mark_depth: 130,
            train_fraction: 0.5,
            val_fraction: 0.125,
        }
    }
}

impl BenchmarkSpec {
    pub fn train_count(&self) -> usize {
        (self.per_class as f64 * self.train_fraction).round() as usize
    }

    pub fn val_count(&self) -> usize {
        (self.per_class as f64 * self.val_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.classes < 2 || self.classes % 2 != 0 || self.classes > MAX_CLASSES {
            return Err(BenchError::Invalid(format!(
                "classes must be even and in 2..={MAX_CLASSES}, got {}",
                self.classes
            )));
        }
        if self.per_class < 8 {
            return Err(BenchError::Invalid(format!(
                "per_class must be at least 8, got {}",
                self.per_class
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(BenchError::Invalid(format!("noise {} must be finite and >= 0", self.noise)));
        }
        let (tr, va) = (self.train_fraction, self.val_fraction);
        let n_train = (self.per_class as f64 * tr).round() as usize;
        if !(tr > 0.0 && va >= 0.0 && tr + va < 1.0) || n_train == 0 || n_train + self.val_count() >= self.per_class {
            return Err(BenchError::Invalid(format!(
                "split fractions train {tr}, val {va} leave an empty train or test split"
            )));
        }
        if !(0..=1).contains(&self.max_shift) {
            return Err(BenchError::Invalid(format!("max_shift {} not in 0..=1", self.max_shift)));
        }
        Ok(())
    }
}

/// Per-image rendering parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderParams {
    pub class: usize,
    pub style: usize,
    pub dx: i32,
    pub dy: i32,
    pub fg_jitter: i32,
    pub bg_jitter: i32,
    pub mark: bool,
}

pub fn coarse_of(class: usize) -> usize {
    class / 2
}

fn inside(shape: usize, u: i32, v: i32) -> bool {
    match shape {
        0 => u * u + v * v <= 40,
        1 => u.abs() <= 6 && v.abs() <= 5,
        2 => u.abs() + v.abs() <= 6,
        _ => u.abs() <= 5 && v.abs() <= 6,
    }
}

/// Row offset of the mark from the shape centre; the two classes of a shape
/// mirror each other vertically. Every shape keeps at least four pixels of
/// flat interior around the mark so the edge detector never sees it.
pub fn mark_row(class: usize) -> i32 {
    if class % 2 == 0 {
        -1
    } else {
        1
    }
}

/// Noise-free rendering.
pub fn render(p: &RenderParams, mark_depth: u8) -> GrayImage {
    let (bg, fg) = PALETTES[p.style];
    let bg = (bg as i32 + p.bg_jitter).clamp(0, 255);
    let fg = (fg as i32 + p.fg_jitter).clamp(0, 255);
    let (cx, cy) = (8 + p.dx, 8 + p.dy);
    let shape = coarse_of(p.class);
    let mv = mark_row(p.class);
    GrayImage::from_fn(SIDE, SIDE, |x, y| {
        let (u, v) = (x as i32 - cx, y as i32 - cy);
        if !inside(shape, u, v) {
            bg as u8
        } else if p.mark && v == mv && u.abs() <= 1 {
            (fg - mark_depth as i32).clamp(0, 255) as u8
        } else {
            fg as u8
        }
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub images: Vec<GrayImage>,
    pub labels: Vec<usize>,
    pub coarse_ids: Vec<usize>,
    pub styles: Vec<usize>,
    pub splits: Splits,
    pub spec: BenchmarkSpec,
}

/// Renders `classes × per_class` images. Per class, the first
/// `train_fraction` of images go to train, the next `val_fraction` to val and
/// the rest to test.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<SyntheticDataset, BenchError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite std");
    let mut ds = SyntheticDataset {
        images: Vec::new(),
        labels: Vec::new(),
        coarse_ids: Vec::new(),
        styles: Vec::new(),
        splits: Splits::default(),
        spec: spec.clone(),
    };
    let n_train = spec.train_count();
    let n_val = spec.val_count();
    for class in 0..spec.classes {
        for k in 0..spec.per_class {
            let s = spec.max_shift;
            let (fj, bj) = if spec.jitter {
                (rng.gen_range(-10..=10), rng.gen_range(-8..=8))
            } else {
                (0, 0)
            };
            let p = RenderParams {
                class,
                style: rng.gen_range(0..STYLES),
                dx: rng.gen_range(-s..=s),
                dy: rng.gen_range(-s..=s),
                fg_jitter: fj,
                bg_jitter: bj,
                mark: true,
            };
            let mut img = render(&p, spec.mark_depth);
            if spec.noise > 0.0 {
                let px: Vec<u8> = img
                    .pixels()
                    .iter()
                    .map(|&v| (v as f64 + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
                    .collect();
                img = GrayImage::new(SIDE, SIDE, px)?;
            }
            let idx = ds.images.len();
            ds.images.push(img);
            ds.labels.push(class);
            ds.coarse_ids.push(coarse_of(class));
            ds.styles.push(p.style);
            let split = if k < n_train {
                &mut ds.splits.train
            } else if k < n_train + n_val {
                &mut ds.splits.val
            } else {
                &mut ds.splits.test
            };
            split.push(idx);
        }
    }
    Ok(ds)
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn coarse_classes(&self) -> usize {
        self.spec.classes / 2
    }

    /// `[n, 256]` unit-range rows of the given indices.
    pub fn tensor(&self, indices: &[usize]) -> Tensor {
        images_tensor(indices.iter().map(|&i| &self.images[i]))
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// First `k` training images of every class.
    pub fn few_shot_train(&self, k: usize) -> Vec<usize> {
        let mut seen = vec![0usize; self.classes()];
        self.splits
            .train
            .iter()
            .copied()
            .filter(|&i| {
                let c = &mut seen[self.labels[i]];
                *c += 1;
                *c <= k
            })
            .collect()
    }

    /// Writes `{split}/{class}/{index}.pgm` and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<(), BenchError> {
        for (name, idx) in [
            ("train", &self.splits.train),
            ("val", &self.splits.val),
            ("test", &self.splits.test),
        ] {
            for &i in idx {
                let sub = dir.join(name).join(self.labels[i].to_string());
                std::fs::create_dir_all(&sub)?;
                self.images[i].save_pgm(&sub.join(format!("{i}.pgm")))?;
            }
        }
        let manifest = Manifest {
            spec: self.spec.clone(),
            labels: self.labels.clone(),
            coarse_ids: self.coarse_ids.clone(),
            styles: self.styles.clone(),
            splits: self.splits.clone(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, BenchError> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let n = manifest.labels.len();
        let mut images = vec![None; n];
        for (name, idx) in [
            ("train", &manifest.splits.train),
            ("val", &manifest.splits.val),
            ("test", &manifest.splits.test),
        ] {
            for &i in idx {
                let label = *manifest
                    .labels
                    .get(i)
                    .ok_or_else(|| BenchError::Invalid(format!("split index {i} out of range")))?;
                let path = dir.join(name).join(label.to_string()).join(format!("{i}.pgm"));
                images[i] = Some(GrayImage::load_pgm(&path)?);
            }
        }
        let images = images
            .into_iter()
            .enumerate()
            .map(|(i, im)| im.ok_or_else(|| BenchError::Invalid(format!("image {i} is in no split"))))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            images,
            labels: manifest.labels,
            coarse_ids: manifest.coarse_ids,
            styles: manifest.styles,
            splits: manifest.splits,
            spec: manifest.spec,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: BenchmarkSpec,
    labels: Vec<usize>,
    coarse_ids: Vec<usize>,
    styles: Vec<usize>,
    splits: Splits,
}

pub fn images_tensor<'a>(images: impl IntoIterator<Item = &'a GrayImage>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for im in images {
        data.extend(im.to_unit_range());
        n += 1;
    }
    Tensor::new(&[n, SIDE * SIDE], data).expect("16x16 images")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
}

/// One generated image, linked to its sampling trace by `sample_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: GrayImage,
    pub label: usize,
    pub sample_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixEntry {
    pub image: GrayImage,
    pub label: usize,
    pub origin: Origin,
    pub sample_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedTrainSet {
    pub entries: Vec<MixEntry>,
    pub ratio: f64,
}

impl MixedTrainSet {
    pub fn synthetic_count(&self) -> usize {
        self.entries.iter().filter(|e| e.origin == Origin::Synthetic).count()
    }

    pub fn tensor(&self) -> Tensor {
        images_tensor(self.entries.iter().map(|e| &e.image))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }
}

/// Synthetic images needed so they make up `ratio` of the mixture:
/// `round(n_real·r/(1−r))`, and `n_real` when `r = 1` (the mixture is then
/// all synthetic and the same size as the real split).
pub fn synthetic_needed(n_real: usize, ratio: f64) -> usize {
    if ratio >= 1.0 {
        n_real
    } else {
        (n_real as f64 * ratio / (1.0 - ratio)).round() as usize
    }
}

/// Mixes the real split with a seeded draw from the synthetic pool so the
/// synthetic share is `ratio`, then shuffles. `ratio = 0` returns the real
/// split unchanged and in order.
pub fn mix(
    real: &[(GrayImage, usize)],
    synthetic: &[SyntheticSample],
    ratio: f64,
    seed: u64,
) -> Result<MixedTrainSet, BenchError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(BenchError::Invalid(format!("ratio {ratio} not in [0,1]")));
    }
    let real_entries = real.iter().map(|(im, l)| MixEntry {
        image: im.clone(),
        label: *l,
        origin: Origin::Real,
        sample_id: None,
    });
    if ratio == 0.0 {
        return Ok(MixedTrainSet {
            entries: real_entries.collect(),
            ratio,
        });
    }
    let needed = synthetic_needed(real.len(), ratio);
    if needed > synthetic.len() {
        return Err(BenchError::InsufficientPool {
            ratio,
            needed,
            available: synthetic.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick: Vec<usize> = (0..synthetic.len()).collect();
    pick.shuffle(&mut rng);
    pick.truncate(needed);
    pick.sort_unstable();
    let mut entries: Vec<MixEntry> = if ratio >= 1.0 {
        Vec::new()
    } else {
        real_entries.collect()
    };
    entries.extend(pick.into_iter().map(|i| MixEntry {
        image: synthetic[i].image.clone(),
        label: synthetic[i].label,
        origin: Origin::Synthetic,
        sample_id: Some(synthetic[i].sample_id),
    }));
    entries.shuffle(&mut rng);
    Ok(MixedTrainSet { entries, ratio })
}
