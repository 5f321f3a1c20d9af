use nalgebra::DMatrix;

use super::{ContourError, EdgeMap, Transform};

pub const DEFAULT_BINARIZE_THRESHOLD: u8 = 100;

/// Thin-plate radial kernel `r² log r²`, zero at the origin.
fn kernel(dx: f64, dy: f64) -> f64 {
    let r2 = dx * dx + dy * dy;
    if r2 == 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// Fitted thin-plate spline mapping source control points onto targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsWarp {
    source_points: Vec<(f64, f64)>,
    target_points: Vec<(f64, f64)>,
    /// Radial coefficients, one `(wx, wy)` per control point.
    weights: Vec<(f64, f64)>,
    /// Rows `[c, a_x, a_y]` for the x and y outputs.
    affine: [[f64; 3]; 2],
    regularization: f64,
}

impl TpsWarp {
    pub fn source_points(&self) -> &[(f64, f64)] {
        &self.source_points
    }

    pub fn target_points(&self) -> &[(f64, f64)] {
        &self.target_points
    }

    pub fn weights(&self) -> &[(f64, f64)] {
        &self.weights
    }

    pub fn affine(&self) -> &[[f64; 3]; 2] {
        &self.affine
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let [ax, ay] = self.affine;
        let mut out = (
            ax[0] + ax[1] * x + ax[2] * y,
            ay[0] + ay[1] * x + ay[2] * y,
        );
        for (&(sx, sy), &(wx, wy)) in self.source_points.iter().zip(&self.weights) {
            let u = kernel(x - sx, y - sy);
            out.0 += wx * u;
            out.1 += wy * u;
        }
        out
    }

    /// Spline fitted in the opposite direction, target → source.
    pub fn inverse(&self) -> Result<TpsWarp, ContourError> {
        fit_tps(&self.target_points, &self.source_points, self.regularization)
    }
}

fn collinear(points: &[(f64, f64)]) -> bool {
    let (x0, y0) = points[0];
    let scale = points
        .iter()
        .map(|&(x, y)| (x - x0).abs().max((y - y0).abs()))
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return true;
    }
    !points.iter().enumerate().any(|(i, &(xi, yi))| {
        points[i + 1..].iter().any(|&(xj, yj)| {
            let cross = (xi - x0) * (yj - y0) - (yi - y0) * (xj - x0);
            cross.abs() > 1e-9 * scale * scale
        })
    })
}

/// Solves the standard TPS system `[K+λI P; Pᵀ 0]·[w; a] = [v; 0]` for both
/// output coordinates. `regularization = 0` interpolates exactly.
pub fn fit_tps(
    source: &[(f64, f64)],
    target: &[(f64, f64)],
    regularization: f64,
) -> Result<TpsWarp, ContourError> {
    let n = source.len();
    if n != target.len() {
        return Err(ContourError::Tps(format!(
            "{n} source points but {} targets",
            target.len()
        )));
    }
    if n < 3 {
        return Err(ContourError::Tps(format!("need at least 3 points, got {n}")));
    }
    if collinear(source) {
        return Err(ContourError::Tps("source points are collinear".into()));
    }
    let size = n + 3;
    let mut l = DMatrix::<f64>::zeros(size, size);
    for i in 0..n {
        for j in 0..n {
            l[(i, j)] = kernel(source[i].0 - source[j].0, source[i].1 - source[j].1);
        }
        l[(i, i)] += regularization;
        let row = [1.0, source[i].0, source[i].1];
        for (k, v) in row.into_iter().enumerate() {
            l[(i, n + k)] = v;
            l[(n + k, i)] = v;
        }
    }
    let mut rhs = DMatrix::<f64>::zeros(size, 2);
    for (i, &(tx, ty)) in target.iter().enumerate() {
        rhs[(i, 0)] = tx;
        rhs[(i, 1)] = ty;
    }
    let lu = l.clone().lu();
    let mut sol = lu
        .solve(&rhs)
        .ok_or_else(|| ContourError::Tps("singular system (duplicate points?)".into()))?;
    // one step of iterative refinement
    let residual = &rhs - &l * &sol;
    if let Some(corr) = lu.solve(&residual) {
        sol += corr;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(ContourError::Tps("singular system".into()));
    }
    let weights = (0..n).map(|i| (sol[(i, 0)], sol[(i, 1)])).collect();
    let col = |c: usize| -> [f64; 3] { [sol[(n, c)], sol[(n + 1, c)], sol[(n + 2, c)]] };
    Ok(TpsWarp {
        source_points: source.to_vec(),
        target_points: target.to_vec(),
        weights,
        affine: [col(0), col(1)],
        regularization,
    })
}

fn bilinear(raster: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let at = |xi: isize, yi: isize| -> f64 {
        if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize {
            0.0
        } else {
            raster[yi as usize * w + xi as usize]
        }
    };
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as isize, y0 as isize);
    (1.0 - fx) * (1.0 - fy) * at(xi, yi)
        + fx * (1.0 - fy) * at(xi + 1, yi)
        + (1.0 - fx) * fy * at(xi, yi + 1)
        + fx * fy * at(xi + 1, yi + 1)
}

/// Warps an edge map so that content at each source point moves to its
/// target. Every output pixel is pulled back through the inverse spline,
/// sampled bilinearly from the 0/255 raster and binarized at `threshold`.
pub fn warp_edge_map(em: &EdgeMap, warp: &TpsWarp, threshold: u8) -> Result<EdgeMap, ContourError> {
    let inverse = warp.inverse()?;
    let (w, h) = (em.width(), em.height());
    let raster: Vec<f64> = em.bits().iter().map(|&b| b as f64 * 255.0).collect();
    let mut bits = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inverse.apply(x as f64, y as f64);
            if bilinear(&raster, w, h, sx, sy) > threshold as f64 {
                bits[y * w + x] = 1;
            }
        }
    }
    Ok(em.with_bits(
        bits,
        Transform::Tps {
            source_points: warp.source_points.clone(),
            target_points: warp.target_points.clone(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pentagon() -> Vec<(f64, f64)> {
        vec![(2.0, 3.0), (12.0, 2.5), (13.0, 11.0), (7.0, 14.0), (1.5, 10.0)]
    }

    #[test]
    fn identity_warp() {
        let src = pentagon();
        let warp = fit_tps(&src, &src, 0.0).unwrap();
        for &(wx, wy) in warp.weights() {
            assert!(wx.abs() < 1e-12 && wy.abs() < 1e-12);
        }
        let expect = [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for (row, erow) in warp.affine().iter().zip(&expect) {
            for (a, e) in row.iter().zip(erow) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn translation_is_reproduced_everywhere() {
        let src = pentagon();
        let dst: Vec<_> = src.iter().map(|&(x, y)| (x + 2.0, y + 3.0)).collect();
        let warp = fit_tps(&src, &dst, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (x, y) = (rng.gen_range(-5.0..20.0), rng.gen_range(-5.0..20.0));
            let (u, v) = warp.apply(x, y);
            assert!((u - x - 2.0).abs() < 1e-9 && (v - y - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn random_warp_interpolates_control_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let src = pentagon();
        let dst: Vec<_> = src
            .iter()
            .map(|&(x, y)| (x + rng.gen_range(-2.0..2.0), y + rng.gen_range(-2.0..2.0)))
            .collect();
        let warp = fit_tps(&src, &dst, 0.0).unwrap();
        for (s, t) in src.iter().zip(&dst) {
            let (u, v) = warp.apply(s.0, s.1);
            assert!((u - t.0).abs() < 1e-9 && (v - t.1).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_sources_rejected() {
        let line = vec![(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)];
        assert!(fit_tps(&line, &line, 0.0).is_err());
        let dup = vec![(0.0, 0.0), (0.0, 0.0), (4.0, 1.0), (1.0, 5.0)];
        assert!(fit_tps(&dup, &dup, 0.0).is_err());
        assert!(fit_tps(&pentagon(), &pentagon()[..4], 0.0).is_err());
    }

    #[test]
    fn identity_warp_keeps_edge_map() {
        let mut em = EdgeMap::empty(16, 16);
        for i in 3..13 {
            em.set(i, 5, true);
            em.set(9, i, true);
        }
        let warp = fit_tps(&pentagon(), &pentagon(), 0.0).unwrap();
        let out = warp_edge_map(&em, &warp, DEFAULT_BINARIZE_THRESHOLD).unwrap();
        assert_eq!(out.bits(), em.bits());
        assert!(out.provenance.tps().is_some());
    }

    #[test]
    fn translation_moves_single_pixel() {
        let mut em = EdgeMap::empty(16, 16);
        em.set(5, 6, true);
        let src = pentagon();
        let dst: Vec<_> = src.iter().map(|&(x, y)| (x + 2.0, y + 3.0)).collect();
        let warp = fit_tps(&src, &dst, 0.0).unwrap();
        let out = warp_edge_map(&em, &warp, DEFAULT_BINARIZE_THRESHOLD).unwrap();
        assert_eq!(out.edge_pixels(), vec![(7, 9)]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn affine_targets_are_reproduced_with_zero_bending(
            m in proptest::array::uniform6(-1.5f64..1.5),
            jitter in proptest::array::uniform10(-0.5f64..0.5),
            seed in any::<u64>(),
        ) {
            let src: Vec<(f64, f64)> = pentagon()
                .iter()
                .enumerate()
                .map(|(k, &(x, y))| (x + jitter[2 * k], y + jitter[2 * k + 1]))
                .collect();
            let affine = |x: f64, y: f64| (m[0] * x + m[1] * y + 3.0 * m[2], m[3] * x + m[4] * y + 3.0 * m[5]);
            let dst: Vec<_> = src.iter().map(|&(x, y)| affine(x, y)).collect();
            let warp = fit_tps(&src, &dst, 0.0).unwrap();
            for &(wx, wy) in warp.weights() {
                prop_assert!(wx.abs() < 1e-9 && wy.abs() < 1e-9);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..20 {
                let (x, y) = (rng.gen_range(-5.0..20.0), rng.gen_range(-5.0..20.0));
                let ((u, v), (eu, ev)) = (warp.apply(x, y), affine(x, y));
                prop_assert!((u - eu).abs() < 1e-9 && (v - ev).abs() < 1e-9);
            }
        }

        #[test]
        fn control_points_are_interpolated(offsets in proptest::array::uniform10(-3.0f64..3.0)) {
            let src = pentagon();
            let dst: Vec<_> = src.iter().enumerate().map(|(k, &(x, y))| (x + offsets[2 * k], y + offsets[2 * k + 1])).collect();
            let warp = fit_tps(&src, &dst, 0.0).unwrap();
            for (s, t) in src.iter().zip(&dst) {
                let (u, v) = warp.apply(s.0, s.1);
                prop_assert!((u - t.0).abs() < 1e-9 && (v - t.1).abs() < 1e-9);
            }
        }
    }
}
