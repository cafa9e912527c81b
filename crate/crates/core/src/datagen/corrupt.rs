//! Simulated instance-segmentation errors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::types::BinaryMask;

fn morph(mask: &BinaryMask, radius: usize, dilate: bool) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height(), mask.width());
    let r = radius as isize;
    BinaryMask::from_fn(h, w, |y, x| {
        let mut any = false;
        let mut all = true;
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                let v = yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && mask.get(yy as usize, xx as usize);
                any |= v;
                all &= v;
            }
        }
        if dilate {
            any
        } else {
            all
        }
    })
}

fn is_boundary(mask: &BinaryMask, y: usize, x: usize) -> bool {
    let (h, w) = (mask.height(), mask.width());
    let v = mask.get(y, x);
    let nb = [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)];
    nb.iter().any(|&(dy, dx)| {
        let (yy, xx) = (y as isize + dy, x as isize + dx);
        let n = yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && mask.get(yy as usize, xx as usize);
        n != v
    })
}

/// Degrades a modal mask the way an off-the-shelf segmenter might.
///
/// Severity in `[0, 1]` scales three effects: a square erosion or dilation
/// (kernel 3–7 px), flipping of boundary pixels, and up to three punched
/// holes. Severity 0 returns the input unchanged.
pub fn corrupt_modal_mask(mask: &BinaryMask, severity: f64, rng_seed: u64) -> BinaryMask {
    let severity = if severity.is_finite() { severity.clamp(0.0, 1.0) } else { 0.0 };
    if severity == 0.0 {
        return mask.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let radius = (severity * 3.0).round().max(1.0) as usize;
    let dilate = rng.gen_bool(0.5);
    let mut out = morph(mask, radius, dilate);

    let (h, w) = (mask.height(), mask.width());
    let flip_p = 0.3 * severity;
    let boundary: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| is_boundary(&out, y, x))
        .collect();
    for (y, x) in boundary {
        if rng.gen_bool(flip_p) {
            let v = out.get(y, x);
            out.set(y, x, !v);
        }
    }

    let holes = (severity * 3.0).round() as usize;
    let hole_r = 1.0 + (severity * 3.0).round();
    let inside: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| out.get(y, x))
        .collect();
    for _ in 0..holes {
        if inside.is_empty() {
            break;
        }
        let (cy, cx) = inside[rng.gen_range(0..inside.len())];
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy as f64, x as f64 - cx as f64);
                if dy * dy + dx * dx <= hole_r * hole_r {
                    out.set(y, x, false);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_human;
    use crate::evalkit::iou;

    #[test]
    fn zero_severity_is_identity() {
        let m = generate_human(1, (64, 64), 7).unwrap().amodal;
        assert_eq!(corrupt_modal_mask(&m, 0.0, 42), m);
    }

    #[test]
    fn full_severity_changes_small_mask() {
        let m = BinaryMask::from_fn(32, 32, |y, x| (10..20).contains(&y) && (10..20).contains(&x));
        assert_eq!(m.area(), 100);
        for seed in 0..10 {
            assert!(iou(&corrupt_modal_mask(&m, 1.0, seed), &m).unwrap() < 1.0);
        }
    }

    #[test]
    fn monte_carlo_iou_decreases_with_severity() {
        let mean_iou = |severity: f64| {
            let mut total = 0.0;
            for seed in 0..100u64 {
                let m = generate_human(seed, (64, 64), 7).unwrap().amodal;
                total += iou(&corrupt_modal_mask(&m, severity, seed + 1000), &m).unwrap();
            }
            total / 100.0
        };
        let (low, high) = (mean_iou(0.3), mean_iou(0.6));
        assert!(low > high, "{low} vs {high}");
        assert!((0.6..0.9).contains(&low), "severity 0.3 mean IoU {low}");
    }
}
