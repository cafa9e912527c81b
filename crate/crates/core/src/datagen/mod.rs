//! Occlusion-sample synthesis: procedural humans, occluders, compositing,
//! simulated segmenter noise and dataset persistence.

mod compose;
mod corrupt;
mod human;
mod ingest;
mod occluder;
mod ratio;
pub mod storage;

pub use compose::{compose_occlusion, occlusion_ratio, OcclusionSample, Split, RATIO_TOLERANCE};
pub use corrupt::corrupt_modal_mask;
pub use human::{generate_human, HumanRecord, BORDER_MARGIN};
pub use ingest::{ingest_external, ExternalHuman, Ingested};
pub use occluder::{generate_occluder, Occluder};
pub use ratio::{sample_ratio, RatioBin, RatioDistribution};
pub use storage::{load_dataset, save_dataset};

use crate::error::{Error, Result};

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from a master seed and a path of indices.
///
/// Every sample's randomness comes from `(master, split, index, ...)`, so a
/// dataset is identical whatever order its samples are generated in.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

/// Recipe for one dataset split.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub split: Split,
    pub canvas: (usize, usize),
    pub part_count: usize,
    pub humans: usize,
    pub occluders_per_human: usize,
    pub distribution: RatioDistribution,
    /// Initial-mask corruption severity in `[0, 1]`.
    pub corruption: f64,
    /// Occluder bounding box as a fraction of the canvas side.
    pub occluder_scale: f64,
    pub master_seed: u64,
}

impl SynthSpec {
    /// The 297 humans × 3 occluders validation recipe.
    pub fn validation(canvas: (usize, usize), master_seed: u64) -> Self {
        Self {
            split: Split::Val,
            canvas,
            part_count: 7,
            humans: 297,
            occluders_per_human: 3,
            distribution: RatioDistribution::val_default(),
            corruption: 0.3,
            occluder_scale: 0.6,
            master_seed,
        }
    }

    pub fn training(canvas: (usize, usize), humans: usize, master_seed: u64) -> Self {
        Self {
            split: Split::Train,
            canvas,
            part_count: 7,
            humans,
            occluders_per_human: 1,
            distribution: RatioDistribution::train_default(),
            corruption: 0.3,
            occluder_scale: 0.6,
            master_seed,
        }
    }

    pub fn len(&self) -> usize {
        self.humans * self.occluders_per_human
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const ATTEMPTS: u64 = 32;

/// Synthesizes sample `index` of `spec`.
///
/// Occluders are redrawn until one lands the requested ratio inside the
/// requested bin; the target ratio itself is fixed per sample.
pub fn synthesize_sample(spec: &SynthSpec, index: usize) -> Result<OcclusionSample> {
    let human_idx = (index / spec.occluders_per_human.max(1)) as u64;
    let tag = spec.split.tag();
    let human = generate_human(
        derive_seed(spec.master_seed, &[tag, 0, human_idx]),
        spec.canvas,
        spec.part_count,
    )?;
    let index = index as u64;
    let target = sample_ratio(&spec.distribution, derive_seed(spec.master_seed, &[tag, 1, index]));
    let bin = spec.distribution.bin_of(target);
    let max_h = ((spec.canvas.0 as f64 * spec.occluder_scale) as usize).max(8);
    let max_w = ((spec.canvas.1 as f64 * spec.occluder_scale) as usize).max(8);
    let mut last_err = None;
    for attempt in 0..ATTEMPTS {
        let occ = generate_occluder(derive_seed(spec.master_seed, &[tag, 2, index, attempt]), (max_h, max_w))?;
        let seed = derive_seed(spec.master_seed, &[tag, 3, index, attempt]);
        match compose_occlusion(&human, &occ, target, seed) {
            Ok(mut s) if spec.distribution.bin_of(s.occlusion_ratio) == bin => {
                s.initial_mask = corrupt_modal_mask(
                    &s.modal_mask,
                    spec.corruption,
                    derive_seed(spec.master_seed, &[tag, 4, index]),
                );
                s.split = spec.split;
                return Ok(s);
            }
            Ok(s) => {
                last_err = Some(Error::Placement {
                    target,
                    best: (s.occlusion_ratio - target).abs(),
                    tolerance: RATIO_TOLERANCE,
                })
            }
            Err(e @ Error::Placement { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt was made"))
}

/// Synthesizes every sample of `spec`, in index order.
pub fn synthesize_split(spec: &SynthSpec) -> Result<Vec<OcclusionSample>> {
    (0..spec.len()).map(|i| synthesize_sample(spec, i)).collect()
}
