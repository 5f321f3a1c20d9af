use super::{ContourError, EdgeMap, Transform};

pub const MAX_ROTATION_DEG: f64 = 90.0;

/// Image-space position of `(x, y)` after a counter-clockwise (as displayed)
/// rotation by `angle_deg` about the raster centre.
pub fn rotate_point(x: f64, y: f64, width: usize, height: usize, angle_deg: f64) -> (f64, f64) {
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (dx, dy) = (x - cx, y - cy);
    (cx + dx * c + dy * s, cy - dx * s + dy * c)
}

/// Horizontal mirror (optional) followed by a rotation about the centre.
/// Nearest-neighbour sampling; pixels mapped from outside the frame are off.
pub fn flip_rotate(em: &EdgeMap, flip: bool, angle_deg: f64) -> Result<EdgeMap, ContourError> {
    if !angle_deg.is_finite() || angle_deg.abs() > MAX_ROTATION_DEG {
        return Err(ContourError::Rotation(angle_deg));
    }
    let (w, h) = (em.width(), em.height());
    let mut bits = em.bits().to_vec();
    if flip {
        for row in bits.chunks_mut(w) {
            row.reverse();
        }
    }
    if angle_deg != 0.0 {
        let src = bits;
        bits = vec![0u8; w * h];
        for y in 0..h {
            for x in 0..w {
                // inverse rotation pulls each output pixel from the source
                let (sx, sy) = rotate_point(x as f64, y as f64, w, h, -angle_deg);
                let (sx, sy) = (sx.round(), sy.round());
                if sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64 {
                    bits[y * w + x] = src[sy as usize * w + sx as usize];
                }
            }
        }
    }
    Ok(em.with_bits(
        bits,
        Transform::FlipRotate {
            flipped: flip,
            rotation_deg: angle_deg,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_map() -> EdgeMap {
        let mut em = EdgeMap::empty(16, 16);
        for i in 2..12 {
            em.set(i, 4, true);
            em.set(3, i, true);
        }
        em.set(13, 13, true);
        em
    }

    #[test]
    fn identity_transform() {
        let em = sample_map();
        assert_eq!(flip_rotate(&em, false, 0.0).unwrap().bits(), em.bits());
    }

    #[test]
    fn flip_twice_is_identity() {
        let em = sample_map();
        let once = flip_rotate(&em, true, 0.0).unwrap();
        assert_ne!(once.bits(), em.bits());
        let twice = flip_rotate(&once, true, 0.0).unwrap();
        assert_eq!(twice.bits(), em.bits());
        assert_eq!(twice.provenance.steps.len(), 2);
    }

    #[test]
    fn quarter_turn_of_single_pixel() {
        let (ex, ey) = rotate_point(10.0, 0.0, 21, 21, 90.0);
        assert!(ex.abs() < 1e-12 && (ey - 10.0).abs() < 1e-12);
        let mut em = EdgeMap::empty(21, 21);
        em.set(10, 0, true);
        let out = flip_rotate(&em, false, 90.0).unwrap();
        assert_eq!(out.edge_pixels(), vec![(ex.round() as usize, ey.round() as usize)]);
    }

    #[test]
    fn out_of_range_angle_rejected() {
        let em = EdgeMap::empty(8, 8);
        assert!(flip_rotate(&em, false, 120.0).is_err());
        assert!(flip_rotate(&em, false, f64::NAN).is_err());
    }

    #[test]
    fn small_rotation_preserves_binarity_and_centre() {
        let mut em = EdgeMap::empty(15, 15);
        em.set(7, 7, true);
        let out = flip_rotate(&em, true, 13.0).unwrap();
        assert!(out.bits().iter().all(|&b| b <= 1));
        assert!(out.get(7, 7));
        assert_eq!(out.count(), 1);
    }
}
