use std::collections::VecDeque;

use super::{ContourError, EdgeMap, GrayImage, Transform};

pub const DEFAULT_LOW: u8 = 120;
pub const DEFAULT_HIGH: u8 = 200;

const BLUR_SIGMA: f64 = 1.4;
const BLUR_RADIUS: usize = 2;

/// Normalized 1-D Gaussian taps of radius `radius`.
pub(crate) fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / total).collect()
}

/// Separable convolution with replicated borders.
pub(crate) fn blur(values: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * values[y * w + clamp(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Unnormalized 3×3 Sobel responses `(gx, gy)`; `replicate` selects the
/// border mode (otherwise out-of-frame reads are zero).
pub(crate) fn sobel(values: &[f64], w: usize, h: usize, replicate: bool) -> (Vec<f64>, Vec<f64>) {
    let at = |x: isize, y: isize| -> f64 {
        if replicate {
            let cx = x.clamp(0, w as isize - 1) as usize;
            let cy = y.clamp(0, h as isize - 1) as usize;
            values[cy * w + cx]
        } else if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            values[y as usize * w + x as usize]
        }
    };
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            gy[i] = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        }
    }
    (gx, gy)
}

/// Canny edge detector: 5×5 Gaussian (σ=1.4), Sobel gradients, non-maximum
/// suppression and hysteresis on the 0–255 magnitude scale.
pub fn canny(img: &GrayImage, low: u8, high: u8) -> Result<EdgeMap, ContourError> {
    if low > high {
        return Err(ContourError::Thresholds { low, high });
    }
    let (w, h) = (img.width(), img.height());
    let raw: Vec<f64> = img.pixels().iter().map(|&p| p as f64).collect();
    let smooth = blur(&raw, w, h, &gaussian_kernel(BLUR_SIGMA, BLUR_RADIUS));
    let (gx, gy) = sobel(&smooth, w, h, true);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();

    let m = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    // Thinned magnitudes, clamped to the 8-bit scale for thresholding.
    let mut thin = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = mag[i];
            if v == 0.0 {
                continue;
            }
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (xi, yi) = (x as isize, y as isize);
            // "before" neighbour sits on the previous row/column
            let (before, after) = if !(22.5..157.5).contains(&angle) {
                (m(xi - 1, yi), m(xi + 1, yi))
            } else if angle < 67.5 {
                (m(xi - 1, yi - 1), m(xi + 1, yi + 1))
            } else if angle < 112.5 {
                (m(xi, yi - 1), m(xi, yi + 1))
            } else {
                (m(xi + 1, yi - 1), m(xi - 1, yi + 1))
            };
            if v > before && v >= after {
                thin[i] = v.min(255.0);
            }
        }
    }

    let (low, high) = (low as f64, high as f64);
    let mut bits = vec![0u8; w * h];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &v) in thin.iter().enumerate() {
        if v > high {
            bits[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if bits[j] == 0 && thin[j] > low {
                    bits[j] = 1;
                    queue.push_back(j);
                }
            }
        }
    }
    let mut em = EdgeMap::new(w, h, bits)?;
    em.push_step(Transform::Canny {
        low: low as u8,
        high: high as u8,
    });
    Ok(em)
}
