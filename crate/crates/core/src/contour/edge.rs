use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ContourError, GrayImage};
use crate::tensor::Tensor;

/// One transform applied to an edge map, in application order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Canny { low: u8, high: u8 },
    FlipRotate { flipped: bool, rotation_deg: f64 },
    Tps {
        source_points: Vec<(f64, f64)>,
        target_points: Vec<(f64, f64)>,
    },
    TpsSkipped { reason: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub steps: Vec<Transform>,
}

impl Provenance {
    pub fn flipped(&self) -> bool {
        self.steps
            .iter()
            .any(|s| matches!(s, Transform::FlipRotate { flipped: true, .. }))
    }

    pub fn rotation_deg(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| match s {
                Transform::FlipRotate { rotation_deg, .. } => *rotation_deg,
                _ => 0.0,
            })
            .sum()
    }

    /// Control and target points of the TPS warp, if one was applied.
    pub fn tps(&self) -> Option<(&[(f64, f64)], &[(f64, f64)])> {
        self.steps.iter().find_map(|s| match s {
            Transform::Tps {
                source_points,
                target_points,
            } => Some((source_points.as_slice(), target_points.as_slice())),
            _ => None,
        })
    }

    pub fn tps_skipped(&self) -> Option<&str> {
        self.steps.iter().find_map(|s| match s {
            Transform::TpsSkipped { reason } => Some(reason.as_str()),
            _ => None,
        })
    }
}

/// Binary contour raster plus the transforms that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    width: usize,
    height: usize,
    bits: Vec<u8>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Sidecar<P> {
    width: usize,
    height: usize,
    edge_pixels: usize,
    provenance: P,
}

impl EdgeMap {
    pub fn new(width: usize, height: usize, bits: Vec<u8>) -> Result<Self, ContourError> {
        if width * height != bits.len() {
            return Err(ContourError::Dimensions {
                width,
                height,
                len: bits.len(),
            });
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(ContourError::Format("edge bits must be 0 or 1".into()));
        }
        Ok(Self {
            width,
            height,
            bits,
            provenance: Provenance::default(),
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![0; width * height],
            provenance: Provenance::default(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.bits[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn edge_pixels(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|&(x, y)| self.get(x, y))
            .collect()
    }

    pub(crate) fn with_bits(&self, bits: Vec<u8>, step: Transform) -> Self {
        let mut provenance = self.provenance.clone();
        provenance.steps.push(step);
        Self {
            width: self.width,
            height: self.height,
            bits,
            provenance,
        }
    }

    pub(crate) fn push_step(&mut self, step: Transform) {
        self.provenance.steps.push(step);
    }

    /// 0/255 raster.
    pub fn to_image(&self) -> GrayImage {
        GrayImage::new(
            self.width,
            self.height,
            self.bits.iter().map(|&b| b * 255).collect(),
        )
        .expect("dimensions already validated")
    }

    /// Any pixel above 127 counts as an edge.
    pub fn from_image(img: &GrayImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            bits: img.pixels().iter().map(|&p| (p > 127) as u8).collect(),
            provenance: Provenance::default(),
        }
    }

    /// `[1, width*height]` row of 0.0/1.0 values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[1, self.bits.len()],
            self.bits.iter().map(|&b| b as f64).collect(),
        )
        .expect("length matches")
    }

    pub fn provenance_json(&self) -> String {
        serde_json::to_string_pretty(&Sidecar {
            width: self.width,
            height: self.height,
            edge_pixels: self.count(),
            provenance: &self.provenance,
        })
        .expect("provenance serializes")
    }

    /// Writes `<stem>.pgm` and the `<stem>.json` provenance sidecar.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), ContourError> {
        self.to_image().save_pgm(&dir.join(format!("{stem}.pgm")))?;
        std::fs::write(dir.join(format!("{stem}.json")), self.provenance_json())?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, ContourError> {
        let img = GrayImage::load_pgm(&dir.join(format!("{stem}.pgm")))?;
        let mut em = Self::from_image(&img);
        let json = std::fs::read_to_string(dir.join(format!("{stem}.json")))?;
        let side: Sidecar<Provenance> =
            serde_json::from_str(&json).map_err(|e| ContourError::Format(e.to_string()))?;
        em.provenance = side.provenance;
        Ok(em)
    }
}
