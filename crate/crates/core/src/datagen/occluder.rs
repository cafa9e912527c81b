//! Textured blob occluders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{BinaryMask, ImageTensor};

/// Smallest occluder bounding box side.
pub const MIN_OCCLUDER: usize = 8;

/// An occluder patch and its support mask, both `h×w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Occluder {
    pub patch: ImageTensor,
    pub mask: BinaryMask,
}

impl Occluder {
    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

/// Generates an occluder no larger than `max_size = (h, w)`.
///
/// The support is a union of two to four ellipses, one of them always
/// centred, so the mask is never empty.
pub fn generate_occluder(seed: u64, max_size: (usize, usize)) -> Result<Occluder> {
    let (mh, mw) = max_size;
    if mh < MIN_OCCLUDER || mw < MIN_OCCLUDER {
        return Err(Error::Sizing {
            height: mh,
            width: mw,
            reason: format!("occluders need at least {MIN_OCCLUDER}×{MIN_OCCLUDER}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.gen_range((mh / 2).max(MIN_OCCLUDER)..=mh);
    let w = rng.gen_range((mw / 2).max(MIN_OCCLUDER)..=mw);
    let (hf, wf) = (h as f64, w as f64);

    let mut blobs = vec![(
        wf / 2.0,
        hf / 2.0,
        rng.gen_range(0.3..0.5) * wf,
        rng.gen_range(0.3..0.5) * hf,
    )];
    for _ in 0..rng.gen_range(1..=3) {
        blobs.push((
            rng.gen_range(0.2..0.8) * wf,
            rng.gen_range(0.2..0.8) * hf,
            rng.gen_range(0.15..0.35) * wf,
            rng.gen_range(0.15..0.35) * hf,
        ));
    }
    let mask = BinaryMask::from_fn(h, w, |y, x| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        blobs.iter().any(|&(cx, cy, rx, ry)| {
            let (dx, dy) = ((px - cx) / rx, (py - cy) / ry);
            dx * dx + dy * dy <= 1.0
        })
    });

    let base = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
    let stripe_amp = rng.gen_range(0.0..0.15);
    let stripe_freq = rng.gen_range(0.2..0.9);
    let stripe_dir = rng.gen_range(0.0..std::f64::consts::PI);
    let (sd, cd) = stripe_dir.sin_cos();
    let mut patch = ImageTensor::filled(h, w, base);
    for y in 0..h {
        for x in 0..w {
            let phase = (x as f64 * cd + y as f64 * sd) * stripe_freq;
            for c in 0..3 {
                let v = base[c] + stripe_amp * phase.sin() + rng.gen_range(-0.02..0.02);
                patch.set(c, y, x, v);
            }
        }
    }
    Ok(Occluder { patch, mask })
}
