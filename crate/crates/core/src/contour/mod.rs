//! Contour extraction and augmentation: Canny edges, flip/rotation,
//! corner-based control points and thin-plate-spline warps of edge maps.

mod canny;
mod corners;
mod edge;
mod geometry;
mod image;
mod tps;

use rand::Rng;
use thiserror::Error;

pub use canny::{canny, DEFAULT_HIGH, DEFAULT_LOW};
pub use corners::{
    farthest_point_selection, harris_corners, select_control_points, DEFAULT_CONTROL_POINTS,
    DEFAULT_PATCH_GRID,
};
pub use edge::{EdgeMap, Provenance, Transform};
pub use geometry::{flip_rotate, rotate_point, MAX_ROTATION_DEG};
pub use image::GrayImage;
pub use tps::{fit_tps, warp_edge_map, TpsWarp, DEFAULT_BINARIZE_THRESHOLD};

#[derive(Debug, Error)]
pub enum ContourError {
    #[error("{width}x{height} raster needs {} values, got {len}", width * height)]
    Dimensions {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("canny thresholds must satisfy low <= high (got {low}, {high})")]
    Thresholds { low: u8, high: u8 },
    #[error("rotation {0} deg outside +-{MAX_ROTATION_DEG}")]
    Rotation(f64),
    #[error("tps: {0}")]
    Tps(String),
    #[error("control points: {0}")]
    ControlPoints(String),
    #[error("invalid contour parameter: {0}")]
    Params(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rigidity {
    Rigid,
    NonRigid,
}

impl std::str::FromStr for Rigidity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rigid" => Ok(Self::Rigid),
            "nonrigid" | "non_rigid" | "non-rigid" => Ok(Self::NonRigid),
            other => Err(format!("unknown rigidity {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContourParams {
    pub canny_low: u8,
    pub canny_high: u8,
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub patch_grid: usize,
    pub control_points: usize,
    /// Per-coordinate bound on the TPS target offsets. `None` means half a
    /// patch.
    pub perturbation: Option<f64>,
    pub tps_regularization: f64,
    pub binarize_threshold: u8,
}

impl Default for ContourParams {
    fn default() -> Self {
        Self {
            canny_low: DEFAULT_LOW,
            canny_high: DEFAULT_HIGH,
            flip_prob: 0.5,
            max_rotation_deg: 15.0,
            patch_grid: DEFAULT_PATCH_GRID,
            control_points: DEFAULT_CONTROL_POINTS,
            perturbation: None,
            tps_regularization: 0.0,
            binarize_threshold: DEFAULT_BINARIZE_THRESHOLD,
        }
    }
}

impl ContourParams {
    /// Parameters that make `augment_contour` reduce to plain Canny.
    pub fn no_randomness() -> Self {
        Self {
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
            perturbation: Some(0.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ContourError> {
        let bad = |m: String| Err(ContourError::Params(m));
        if self.canny_low > self.canny_high {
            return Err(ContourError::Thresholds {
                low: self.canny_low,
                high: self.canny_high,
            });
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob {} not in [0,1]", self.flip_prob));
        }
        if !(0.0..=MAX_ROTATION_DEG).contains(&self.max_rotation_deg) {
            return bad(format!("max_rotation_deg {} not in [0,{MAX_ROTATION_DEG}]", self.max_rotation_deg));
        }
        if self.patch_grid == 0 {
            return bad("patch_grid must be positive".into());
        }
        if self.control_points < 3 {
            return bad(format!("control_points {} < 3", self.control_points));
        }
        if matches!(self.perturbation, Some(p) if !(p >= 0.0 && p.is_finite())) {
            return bad("perturbation must be finite and >= 0".into());
        }
        if !(self.tps_regularization >= 0.0 && self.tps_regularization.is_finite()) {
            return bad("tps_regularization must be finite and >= 0".into());
        }
        Ok(())
    }
}

/// Canny, then a random flip/rotation and, for non-rigid content, a TPS warp
/// through perturbed control points. A failed TPS stage leaves the
/// flip/rotate result and records why in the provenance.
pub fn augment_contour<R: Rng + ?Sized>(
    img: &GrayImage,
    rigidity: Rigidity,
    params: &ContourParams,
    rng: &mut R,
) -> Result<EdgeMap, ContourError> {
    params.validate()?;
    let edges = canny(img, params.canny_low, params.canny_high)?;
    let flip = rng.gen::<f64>() < params.flip_prob;
    let u: f64 = rng.gen();
    let angle = params.max_rotation_deg * (2.0 * u - 1.0);
    let mut out = flip_rotate(&edges, flip, angle)?;
    if rigidity == Rigidity::Rigid {
        return Ok(out);
    }

    let patch = out.width().max(out.height()) as f64 / params.patch_grid as f64;
    let bound = params.perturbation.unwrap_or(patch / 2.0);
    let warped = select_control_points(&out, params.patch_grid, params.control_points, rng)
        .and_then(|source| {
            let target: Vec<(f64, f64)> = source
                .iter()
                .map(|&(x, y)| {
                    let dx = (2.0 * rng.gen::<f64>() - 1.0) * bound;
                    let dy = (2.0 * rng.gen::<f64>() - 1.0) * bound;
                    (x + dx, y + dy)
                })
                .collect();
            let warp = fit_tps(&source, &target, params.tps_regularization)?;
            warp_edge_map(&out, &warp, params.binarize_threshold)
        });
    match warped {
        Ok(em) => Ok(em),
        Err(e) => {
            out.push_step(Transform::TpsSkipped {
                reason: e.to_string(),
            });
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ring() -> GrayImage {
        GrayImage::from_fn(16, 16, |x, y| {
            let d = ((x as f64 - 7.5).powi(2) + (y as f64 - 7.5).powi(2)).sqrt();
            if (3.0..6.0).contains(&d) {
                230
            } else {
                20
            }
        })
    }

    #[test]
    fn rigid_path_has_no_tps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let em = augment_contour(&ring(), Rigidity::Rigid, &ContourParams::default(), &mut rng).unwrap();
            assert!(em.provenance.tps().is_none());
            assert!(em.provenance.tps_skipped().is_none());
        }
    }

    #[test]
    fn zero_randomness_equals_canny() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plain = canny(&ring(), DEFAULT_LOW, DEFAULT_HIGH).unwrap();
        for rigidity in [Rigidity::Rigid, Rigidity::NonRigid] {
            let em = augment_contour(&ring(), rigidity, &ContourParams::no_randomness(), &mut rng).unwrap();
            assert_eq!(em.bits(), plain.bits());
        }
    }

    #[test]
    fn nonrigid_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            augment_contour(&ring(), Rigidity::NonRigid, &ContourParams::default(), &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.provenance.tps().is_some());
    }

    #[test]
    fn tps_skip_is_recorded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let blank = GrayImage::filled(16, 16, 0);
        let em = augment_contour(&blank, Rigidity::NonRigid, &ContourParams::default(), &mut rng).unwrap();
        assert_eq!(em.count(), 0);
        assert!(em.provenance.tps_skipped().is_some());
    }

    #[test]
    fn params_validated() {
        let p = ContourParams {
            flip_prob: 1.5,
            ..ContourParams::default()
        };
        assert!(p.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn augmentation_is_seeded_binary_and_size_preserving(
            pixels in proptest::collection::vec(any::<u8>(), 256),
            seed in any::<u64>(),
            nonrigid in any::<bool>(),
        ) {
            let img = GrayImage::new(16, 16, pixels).unwrap();
            let rigidity = if nonrigid { Rigidity::NonRigid } else { Rigidity::Rigid };
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                augment_contour(&img, rigidity, &ContourParams::default(), &mut rng).unwrap()
            };
            let em = run();
            prop_assert_eq!(&em, &run());
            prop_assert_eq!((em.width(), em.height()), (16, 16));
            prop_assert!(em.to_image().pixels().iter().all(|&v| v == 0 || v == 255));
        }

        #[test]
        fn constant_images_have_no_edges(v in any::<u8>(), w in 3usize..24, h in 3usize..24) {
            prop_assert_eq!(canny(&GrayImage::filled(w, h, v), DEFAULT_LOW, DEFAULT_HIGH).unwrap().count(), 0);
        }
    }
}
