//! Occluder placement and ground-truth derivation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::human::HumanRecord;
use super::occluder::Occluder;
use crate::error::{Error, Result};
use crate::types::{BinaryMask, ImageTensor, ParsingLogits};

/// Accepted distance between achieved and requested occlusion ratio.
pub const RATIO_TOLERANCE: f64 = 0.02;
/// Stride of the coarse placement grid, in pixels.
pub const GRID_STRIDE: usize = 4;
/// Half-width of the refinement window around the coarse pick.
pub const REFINE_RADIUS: isize = 3;
/// Upper bound on evaluated placements per call.
pub const MAX_TRIALS: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub(crate) fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split `{other}`"))),
        }
    }
}

/// One synthesized occlusion case with every ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionSample {
    /// `I_s`: the human with the occluder pasted on top.
    pub occluded_image: ImageTensor,
    /// `I_o`: the unoccluded human.
    pub full_image: ImageTensor,
    /// `M_i`: the (possibly corrupted) instance mask fed to stage one.
    pub initial_mask: BinaryMask,
    pub modal_mask: BinaryMask,
    pub amodal_mask: BinaryMask,
    /// Support of the pasted occluder on the canvas.
    pub occluder_mask: BinaryMask,
    pub modal_parsing: ParsingLogits,
    pub amodal_parsing: ParsingLogits,
    pub occlusion_ratio: f64,
    pub seed: u64,
    pub split: Split,
}

impl OcclusionSample {
    pub fn height(&self) -> usize {
        self.amodal_mask.height()
    }

    pub fn width(&self) -> usize {
        self.amodal_mask.width()
    }

    pub fn part_count(&self) -> usize {
        self.amodal_parsing.part_count()
    }

    /// Ground-truth invisible region `M_a ∧ ¬M_m`.
    pub fn invisible_mask(&self) -> BinaryMask {
        self.amodal_mask
            .and_not(&self.modal_mask)
            .expect("sample masks share a shape")
    }

    /// Checks every structural invariant of the sample.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let masks = [
            &self.initial_mask,
            &self.modal_mask,
            &self.occluder_mask,
        ];
        if masks.iter().any(|m| m.height() != h || m.width() != w)
            || self.occluded_image.height() != h
            || self.occluded_image.width() != w
            || self.full_image.height() != h
            || self.full_image.width() != w
            || [&self.modal_parsing, &self.amodal_parsing]
                .iter()
                .any(|p| p.height() != h || p.width() != w)
        {
            return Err(Error::Shape("sample components differ in size".into()));
        }
        if self.modal_parsing.part_count() != self.amodal_parsing.part_count() {
            return Err(Error::Validation("parsing part counts differ".into()));
        }
        if !self.modal_mask.is_subset_of(&self.amodal_mask) {
            return Err(Error::Validation("modal mask is not inside the amodal mask".into()));
        }
        if self.amodal_parsing.foreground() != self.amodal_mask {
            return Err(Error::Validation("amodal parsing does not partition the amodal mask".into()));
        }
        if self.modal_parsing.foreground() != self.modal_mask {
            return Err(Error::Validation("modal parsing does not partition the modal mask".into()));
        }
        for y in 0..h {
            for x in 0..w {
                if !self.occluder_mask.get(y, x) && self.occluded_image.pixel(y, x) != self.full_image.pixel(y, x) {
                    return Err(Error::Validation(format!("occluded image differs from the full image at ({y},{x})")));
                }
            }
        }
        let ratio = occlusion_ratio(&self.amodal_mask, &self.modal_mask)?;
        if (ratio - self.occlusion_ratio).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "stored ratio {} disagrees with masks ({ratio})",
                self.occlusion_ratio
            )));
        }
        Ok(())
    }
}

/// Fraction of the amodal mask hidden: `(|M_a| − |M_m|) / |M_a|`.
pub fn occlusion_ratio(amodal: &BinaryMask, modal: &BinaryMask) -> Result<f64> {
    if !amodal.same_shape(modal) {
        return Err(Error::Shape("amodal and modal masks differ in size".into()));
    }
    let a = amodal.area();
    if a == 0 {
        return Err(Error::Validation("amodal mask is empty".into()));
    }
    if !modal.is_subset_of(amodal) {
        return Err(Error::Validation("modal mask is not inside the amodal mask".into()));
    }
    Ok((a - modal.area()) as f64 / a as f64)
}

struct Placer<'a> {
    amodal: &'a BinaryMask,
    support: Vec<(usize, usize)>,
    area: f64,
    max_y: usize,
    max_x: usize,
    trials: usize,
}

impl Placer<'_> {
    fn ratio_at(&mut self, y: usize, x: usize) -> f64 {
        self.trials += 1;
        let covered = self
            .support
            .iter()
            .filter(|&&(dy, dx)| self.amodal.get(y + dy, x + dx))
            .count();
        covered as f64 / self.area
    }
}

/// Pastes `occluder` onto `human` so the hidden fraction of the figure lands
/// within [`RATIO_TOLERANCE`] of `target_ratio`.
///
/// Placement is a coarse grid scan (random phase, stride [`GRID_STRIDE`])
/// followed by a local refinement. The returned sample's `initial_mask` is
/// the exact modal mask; corrupt it separately to simulate a segmenter.
pub fn compose_occlusion(
    human: &HumanRecord,
    occluder: &Occluder,
    target_ratio: f64,
    rng_seed: u64,
) -> Result<OcclusionSample> {
    if !(0.0..1.0).contains(&target_ratio) {
        return Err(Error::Validation(format!("target ratio {target_ratio} outside [0,1)")));
    }
    let (h, w) = (human.amodal.height(), human.amodal.width());
    let (oh, ow) = (occluder.height(), occluder.width());
    if oh > h || ow > w {
        return Err(Error::Sizing {
            height: h,
            width: w,
            reason: format!("occluder {oh}×{ow} does not fit"),
        });
    }
    if human.image.height() != h || human.image.width() != w || human.parsing.height() != h || human.parsing.width() != w {
        return Err(Error::Shape("human image, mask and parsing differ in size".into()));
    }
    let area = human.amodal.area();
    if area == 0 {
        return Err(Error::Validation("human has an empty amodal mask".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let support: Vec<(usize, usize)> = (0..oh)
        .flat_map(|y| (0..ow).map(move |x| (y, x)))
        .filter(|&(y, x)| occluder.mask.get(y, x))
        .collect();
    let mut placer = Placer {
        amodal: &human.amodal,
        support,
        area: area as f64,
        max_y: h - oh,
        max_x: w - ow,
        trials: 0,
    };

    // keep the coarse grid inside the trial budget, leaving room to refine
    let refine_trials = ((2 * REFINE_RADIUS + 1) * (2 * REFINE_RADIUS + 1)) as usize;
    let mut stride = GRID_STRIDE;
    while (placer.max_y / stride + 1) * (placer.max_x / stride + 1) + refine_trials > MAX_TRIALS {
        stride += 1;
    }
    let phase_y = rng.gen_range(0..stride).min(placer.max_y);
    let phase_x = rng.gen_range(0..stride).min(placer.max_x);

    let mut coarse = Vec::new();
    for y in (phase_y..=placer.max_y).step_by(stride) {
        for x in (phase_x..=placer.max_x).step_by(stride) {
            let r = placer.ratio_at(y, x);
            coarse.push((y, x, (r - target_ratio).abs()));
        }
    }
    let within: Vec<_> = coarse.iter().filter(|c| c.2 <= RATIO_TOLERANCE).copied().collect();
    let (mut by, mut bx, mut best) = match within.choose(&mut rng) {
        Some(&c) => c,
        None => coarse
            .iter()
            .copied()
            .min_by(|a, b| a.2.total_cmp(&b.2))
            .expect("grid has at least one position"),
    };
    let (cy, cx) = (by as isize, bx as isize);
    for dy in -REFINE_RADIUS..=REFINE_RADIUS {
        for dx in -REFINE_RADIUS..=REFINE_RADIUS {
            let (y, x) = (cy + dy, cx + dx);
            if (dy, dx) == (0, 0) || y < 0 || x < 0 || y as usize > placer.max_y || x as usize > placer.max_x {
                continue;
            }
            let err = (placer.ratio_at(y as usize, x as usize) - target_ratio).abs();
            if err < best {
                (by, bx, best) = (y as usize, x as usize, err);
            }
        }
    }
    debug_assert!(placer.trials <= MAX_TRIALS);
    if best > RATIO_TOLERANCE {
        return Err(Error::Placement {
            target: target_ratio,
            best,
            tolerance: RATIO_TOLERANCE,
        });
    }

    let occluder_mask = BinaryMask::from_fn(h, w, |y, x| {
        y >= by && x >= bx && y < by + oh && x < bx + ow && occluder.mask.get(y - by, x - bx)
    });
    let mut occluded = human.image.clone();
    for y in by..by + oh {
        for x in bx..bx + ow {
            if occluder.mask.get(y - by, x - bx) {
                for c in 0..3 {
                    occluded.set(c, y, x, occluder.patch.get(c, y - by, x - bx));
                }
            }
        }
    }
    let modal = human.amodal.and_not(&occluder_mask)?;
    let modal_parsing = human.parsing.restrict_to(&modal)?;
    let ratio = occlusion_ratio(&human.amodal, &modal)?;
    Ok(OcclusionSample {
        occluded_image: occluded,
        full_image: human.image.clone(),
        initial_mask: modal.clone(),
        modal_mask: modal,
        amodal_mask: human.amodal.clone(),
        occluder_mask,
        modal_parsing,
        amodal_parsing: human.parsing.clone(),
        occlusion_ratio: ratio,
        seed: rng_seed,
        split: Split::Train,
    })
}
