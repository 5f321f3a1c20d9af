use rand::seq::index::sample;
use rand::Rng;

use super::canny::{blur, gaussian_kernel, sobel};
use super::{ContourError, EdgeMap};

pub const DEFAULT_PATCH_GRID: usize = 8;
pub const DEFAULT_CONTROL_POINTS: usize = 5;

const HARRIS_SIGMA: f64 = 1.0;
const HARRIS_K: f64 = 0.04;
const HARRIS_REL_THRESHOLD: f64 = 0.01;

/// Harris corners of the binary map, restricted to edge pixels: edge pixels
/// whose response exceeds 1% of the maximum edge-pixel response and is not
/// beaten by any edge pixel in their 3×3 neighbourhood. Row-major order.
pub fn harris_corners(em: &EdgeMap) -> Vec<(usize, usize)> {
    let (w, h) = (em.width(), em.height());
    let values: Vec<f64> = em.bits().iter().map(|&b| b as f64).collect();
    let (gx, gy) = sobel(&values, w, h, false);
    let kernel = gaussian_kernel(HARRIS_SIGMA, 3);
    let sxx = blur(&gx.iter().map(|v| v * v).collect::<Vec<_>>(), w, h, &kernel);
    let syy = blur(&gy.iter().map(|v| v * v).collect::<Vec<_>>(), w, h, &kernel);
    let sxy = blur(
        &gx.iter().zip(&gy).map(|(a, b)| a * b).collect::<Vec<_>>(),
        w,
        h,
        &kernel,
    );
    let response: Vec<f64> = (0..w * h)
        .map(|i| {
            let tr = sxx[i] + syy[i];
            sxx[i] * syy[i] - sxy[i] * sxy[i] - HARRIS_K * tr * tr
        })
        .collect();
    let max = (0..w * h)
        .filter(|&i| em.bits()[i] == 1)
        .map(|i| response[i])
        .fold(0.0, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let cut = HARRIS_REL_THRESHOLD * max;
    let mut corners = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let r = response[y * w + x];
            if !em.get(x, y) || r <= cut {
                continue;
            }
            let is_peak = (-1isize..=1).all(|dy| {
                (-1isize..=1).all(|dx| {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if (dx == 0 && dy == 0) || nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        return true;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    !em.get(nx, ny) || response[ny * w + nx] <= r
                })
            });
            if is_peak {
                corners.push((x, y));
            }
        }
    }
    corners
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// Greedy farthest-point selection seeded from the farthest pair. Returns
/// indices into `points`; ties go to the lower index.
pub fn farthest_point_selection(points: &[(f64, f64)], k: usize) -> Vec<usize> {
    if points.len() <= k {
        return (0..points.len()).collect();
    }
    if k == 0 {
        return Vec::new();
    }
    let mut best = (0, 0, -1.0);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = dist2(points[i], points[j]);
            if d > best.2 {
                best = (i, j, d);
            }
        }
    }
    let mut chosen = if k == 1 { vec![best.0] } else { vec![best.0, best.1] };
    while chosen.len() < k {
        let mut pick = (usize::MAX, -1.0);
        for (i, &p) in points.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&c| dist2(p, points[c]))
                .fold(f64::INFINITY, f64::min);
            if d > pick.1 {
                pick = (i, d);
            }
        }
        chosen.push(pick.0);
    }
    chosen
}

/// Picks `k` control points for a TPS warp: samples `k` edge-containing
/// patches of a `grid`×`grid` partition, pools the Harris corners inside
/// them (topped up with their edge pixels when fewer than `k`) and keeps
/// the `k` mutually farthest.
pub fn select_control_points<R: Rng + ?Sized>(
    em: &EdgeMap,
    grid: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<(f64, f64)>, ContourError> {
    if k < 3 {
        return Err(ContourError::ControlPoints(format!("k must be >= 3, got {k}")));
    }
    let grid = grid.max(1);
    let (w, h) = (em.width(), em.height());
    let (pw, ph) = (w.div_ceil(grid).max(1), h.div_ceil(grid).max(1));
    let patch_of = |x: usize, y: usize| (y / ph) * grid + x / pw;

    let mut has_edge = vec![false; grid * grid];
    for (x, y) in em.edge_pixels() {
        has_edge[patch_of(x, y)] = true;
    }
    let candidates: Vec<usize> = (0..grid * grid).filter(|&p| has_edge[p]).collect();
    if candidates.len() < k {
        return Err(ContourError::ControlPoints(format!(
            "only {} edge-containing patches, need {k}; skip TPS for this map",
            candidates.len()
        )));
    }
    let mut chosen: Vec<usize> = sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    chosen.sort_unstable();

    let in_chosen = |&(x, y): &(usize, usize)| chosen.binary_search(&patch_of(x, y)).is_ok();
    let mut pool: Vec<(usize, usize)> = harris_corners(em).into_iter().filter(in_chosen).collect();
    if pool.len() < k {
        for p in em.edge_pixels().into_iter().filter(in_chosen) {
            if !pool.contains(&p) {
                pool.push(p);
            }
        }
    }
    let pts: Vec<(f64, f64)> = pool.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
    Ok(farthest_point_selection(&pts, k)
        .into_iter()
        .map(|i| pts[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Largest achievable minimum pairwise distance over all k-subsets.
    fn brute_force_max_min(points: &[(f64, f64)], k: usize) -> f64 {
        fn rec(points: &[(f64, f64)], k: usize, start: usize, cur: &mut Vec<usize>, best: &mut f64) {
            if cur.len() == k {
                let mut m = f64::INFINITY;
                for i in 0..k {
                    for j in i + 1..k {
                        m = m.min(dist2(points[cur[i]], points[cur[j]]).sqrt());
                    }
                }
                *best = best.max(m);
                return;
            }
            for i in start..points.len() {
                cur.push(i);
                rec(points, k, i + 1, cur, best);
                cur.pop();
            }
        }
        let mut best = 0.0;
        rec(points, k, 0, &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn collinear_farthest_points() {
        let pts: Vec<(f64, f64)> = (0..10).map(|x| (x as f64, 0.0)).collect();
        let mut sel = farthest_point_selection(&pts, 3);
        sel.sort_unstable();
        assert_eq!(sel[0], 0);
        assert_eq!(sel[2], 9);
        assert!(sel[1] == 4 || sel[1] == 5);
        let achieved = {
            let p: Vec<f64> = sel.iter().map(|&i| pts[i].0).collect();
            (p[1] - p[0]).min(p[2] - p[1])
        };
        assert_eq!(achieved, brute_force_max_min(&pts, 3));
    }

    #[test]
    fn exactly_k_candidates_are_all_returned() {
        let mut em = EdgeMap::empty(16, 16);
        let spots = [(1, 1), (14, 1), (8, 8), (1, 14), (14, 14)];
        for &(x, y) in &spots {
            em.set(x, y, true);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut got = select_control_points(&em, 8, 5, &mut rng).unwrap();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<(f64, f64)> = spots.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn isolated_pixels_are_corners() {
        let mut em = EdgeMap::empty(16, 16);
        em.set(4, 4, true);
        em.set(11, 10, true);
        assert_eq!(harris_corners(&em), vec![(4, 4), (11, 10)]);
    }

    #[test]
    fn too_few_patches_is_an_error() {
        let mut em = EdgeMap::empty(16, 16);
        em.set(3, 3, true);
        em.set(12, 12, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = select_control_points(&em, 8, 5, &mut rng).unwrap_err();
        assert!(err.to_string().contains("skip TPS"));
    }

    #[test]
    fn square_outline_yields_spread_points() {
        let mut em = EdgeMap::empty(16, 16);
        for i in 3..13 {
            em.set(i, 3, true);
            em.set(i, 12, true);
            em.set(3, i, true);
            em.set(12, i, true);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = select_control_points(&em, 8, 5, &mut rng).unwrap();
        assert_eq!(pts.len(), 5);
        for p in &pts {
            assert!(em.get(p.0 as usize, p.1 as usize));
        }
    }
}
