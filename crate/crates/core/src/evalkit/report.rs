//! End-to-end cascade, metric reports and qualitative grids.

use std::path::Path;

use deocc_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::frechet::frechet_distance;
use super::metrics::{iou_triplet, l1_error, l1_in_region};
use crate::datagen::OcclusionSample;
use crate::error::{Error, Result};
use crate::losses::{Embedding, EMBEDDING_SEED};
use crate::maskcomp::{invisible_mask, Stage1Model};
use crate::recovery::{composite, RecoveryInputs, RecoveryModel};
use crate::types::{binarize, stack, BinaryMask, ImageTensor, ParsingLogits};

pub const FRECHET_NOTE: &str = "frechet uses a fixed, randomly initialised convolutional embedding; \
values are comparable between runs of this tool only and are not Inception-based FID";

/// Threshold used to binarize soft masks.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Everything the two stages produce for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutput {
    /// `1×1×H×W` soft masks.
    pub modal_soft: Tensor,
    pub amodal_soft: Tensor,
    /// Binarized modal mask after intersection with the amodal mask.
    pub modal: BinaryMask,
    pub amodal: BinaryMask,
    pub invisible: BinaryMask,
    /// Pixels where the binarized modal mask exceeded the amodal one.
    pub violations: usize,
    pub modal_parsing: ParsingLogits,
    pub amodal_parsing: ParsingLogits,
    pub recovered: ImageTensor,
    /// `recovered` with the visible region copied from the input.
    pub composite: ImageTensor,
}

impl CascadeOutput {
    pub fn violation_fraction(&self) -> f64 {
        self.violations as f64 / (self.amodal.height() * self.amodal.width()) as f64
    }
}

fn plane(t: &Tensor, n: usize) -> Tensor {
    let (_, c, h, w) = t.dims4();
    Tensor::new([1, c, h, w], t.data()[n * c * h * w..(n + 1) * c * h * w].to_vec())
}

/// Runs stage one, derives the invisible region, then stage two, for a
/// batch of inputs.
pub fn run_cascade(
    stage1: &Stage1Model,
    stage2: &RecoveryModel,
    images: &[&ImageTensor],
    initial_masks: &[&BinaryMask],
) -> Result<Vec<CascadeOutput>> {
    if images.len() != initial_masks.len() {
        return Err(Error::Shape("image and mask counts differ".into()));
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let parts = stage1.config.part_count;
    if stage2.config.part_count != parts {
        return Err(Error::Config(format!(
            "stage one predicts {parts} parts but stage two expects {}",
            stage2.config.part_count
        )));
    }
    let image = stack(&images.iter().map(|i| i.to_tensor()).collect::<Vec<_>>());
    let initial = stack(&initial_masks.iter().map(|m| m.to_tensor()).collect::<Vec<_>>());
    let p1 = stage1.predict(&image, &initial)?;

    let mut partial = Vec::with_capacity(images.len());
    for n in 0..images.len() {
        let amodal = binarize(&p1.amodal, n, MASK_THRESHOLD);
        let raw_modal = binarize(&p1.refined_modal, n, MASK_THRESHOLD);
        let violations = raw_modal.and_not(&amodal)?.area();
        let modal = raw_modal.and(&amodal)?;
        let invisible = invisible_mask(&amodal, &modal)?;
        partial.push((
            modal,
            amodal,
            invisible,
            violations,
            ParsingLogits::from_scores(&p1.modal_parsing, n)?,
            ParsingLogits::from_scores(&p1.amodal_parsing, n)?,
        ));
    }
    let visible = stack(&partial.iter().map(|p| p.0.to_tensor()).collect::<Vec<_>>());
    let amodal = stack(&partial.iter().map(|p| p.1.to_tensor()).collect::<Vec<_>>());
    let modal_parsing = stack(&partial.iter().map(|p| p.4.to_tensor()).collect::<Vec<_>>());
    let amodal_parsing = stack(&partial.iter().map(|p| p.5.to_tensor()).collect::<Vec<_>>());
    let recovered = stage2.predict(&RecoveryInputs {
        image: &image,
        visible: &visible,
        amodal: &amodal,
        modal_parsing: &modal_parsing,
        amodal_parsing: &amodal_parsing,
    })?;

    partial
        .into_iter()
        .enumerate()
        .map(|(n, (modal, amodal, invisible, violations, mp, ap))| {
            let rec = ImageTensor::from_tensor(&recovered, n)?;
            let comp = composite(&rec, images[n], &modal)?;
            Ok(CascadeOutput {
                modal_soft: plane(&p1.refined_modal, n),
                amodal_soft: plane(&p1.amodal, n),
                modal,
                amodal,
                invisible,
                violations,
                modal_parsing: mp,
                amodal_parsing: ap,
                recovered: rec,
                composite: comp,
            })
        })
        .collect()
}

/// Metrics of one evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub occlusion_ratio: f64,
    /// Soft amodal mask against ground truth, over the full map.
    pub l1_amodal_mask: f64,
    /// The same, restricted to the ground-truth amodal region.
    pub l1_amodal_mask_region: Option<f64>,
    pub iou_modal: f64,
    pub iou_amodal: f64,
    pub iou_invisible: f64,
    /// Recovered (or composited) image against the unoccluded one.
    pub l1_image: f64,
    /// The same, restricted to the ground-truth invisible region.
    pub l1_image_invisible: Option<f64>,
    pub violations: usize,
}

/// Means of the per-sample values plus the set-level Fréchet distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub l1_amodal_mask: f64,
    pub l1_amodal_mask_region: Option<f64>,
    pub iou_modal: f64,
    pub iou_amodal: f64,
    pub iou_invisible: f64,
    pub l1_image: f64,
    pub l1_image_invisible: Option<f64>,
    pub violations: usize,
    /// Between recovered and unoccluded images; absent with fewer than two samples.
    pub frechet: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub note: String,
    pub embedding_seed: u64,
    pub config_fingerprint: String,
    pub split: String,
    /// Whether image metrics were computed on the composite.
    pub composite: bool,
    pub count: usize,
    pub aggregate: Aggregate,
    pub samples: Vec<SampleMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Recomputes every per-sample mean from `samples` in order.
pub fn aggregate(samples: &[SampleMetrics], frechet: Option<f64>) -> Aggregate {
    let m = |f: fn(&SampleMetrics) -> f64| mean(samples.iter().map(f)).unwrap_or(f64::NAN);
    Aggregate {
        l1_amodal_mask: m(|s| s.l1_amodal_mask),
        l1_amodal_mask_region: mean(samples.iter().filter_map(|s| s.l1_amodal_mask_region)),
        iou_modal: m(|s| s.iou_modal),
        iou_amodal: m(|s| s.iou_amodal),
        iou_invisible: m(|s| s.iou_invisible),
        l1_image: m(|s| s.l1_image),
        l1_image_invisible: mean(samples.iter().filter_map(|s| s.l1_image_invisible)),
        violations: samples.iter().map(|s| s.violations).sum(),
        frechet,
    }
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Score the composite instead of the raw recovery.
    pub composite: bool,
    pub config_fingerprint: String,
    pub split: String,
    /// Where to write qualitative grids, and how many samples to draw.
    pub grid_dir: Option<std::path::PathBuf>,
    pub grids: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 8,
            composite: false,
            config_fingerprint: String::new(),
            split: "val".into(),
            grid_dir: None,
            grids: 0,
        }
    }
}

/// Runs the cascade over `samples` and scores every output.
pub fn evaluate(
    samples: &[OcclusionSample],
    stage1: &Stage1Model,
    stage2: &RecoveryModel,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Validation("nothing to evaluate".into()));
    }
    let embedding = Embedding::new(EMBEDDING_SEED);
    let mut metrics = Vec::with_capacity(samples.len());
    let (mut feats_pred, mut feats_gt) = (Vec::new(), Vec::new());
    let mut grid_rows = Vec::new();
    for (chunk_idx, chunk) in samples.chunks(opts.batch_size.max(1)).enumerate() {
        let images: Vec<&ImageTensor> = chunk.iter().map(|s| &s.occluded_image).collect();
        let initial: Vec<&BinaryMask> = chunk.iter().map(|s| &s.initial_mask).collect();
        let outs = run_cascade(stage1, stage2, &images, &initial)?;
        let mut preds = Vec::with_capacity(chunk.len());
        for (k, (s, out)) in chunk.iter().zip(&outs).enumerate() {
            let index = chunk_idx * opts.batch_size.max(1) + k;
            let tri = iou_triplet(&out.modal, &out.amodal, &s.modal_mask, &s.amodal_mask)?;
            let gt_amodal = s.amodal_mask.to_tensor();
            let shown = if opts.composite { &out.composite } else { &out.recovered };
            let pred_img = shown.to_tensor();
            let gt_img = s.full_image.to_tensor();
            metrics.push(SampleMetrics {
                index,
                occlusion_ratio: s.occlusion_ratio,
                l1_amodal_mask: l1_error(&out.amodal_soft, &gt_amodal)?,
                l1_amodal_mask_region: l1_in_region(&out.amodal_soft, &gt_amodal, &s.amodal_mask)?,
                iou_modal: tri.modal,
                iou_amodal: tri.amodal,
                iou_invisible: tri.invisible,
                l1_image: l1_error(&pred_img, &gt_img)?,
                l1_image_invisible: l1_in_region(&pred_img, &gt_img, &s.invisible_mask())?,
                violations: out.violations,
            });
            preds.push(pred_img);
            if grid_rows.len() < opts.grids {
                grid_rows.push(grid_row(s, out));
            }
        }
        feats_pred.extend(embedding.pooled(&stack(&preds)));
        feats_gt.extend(embedding.pooled(&stack(&chunk.iter().map(|s| s.full_image.to_tensor()).collect::<Vec<_>>())));
    }
    let frechet = if samples.len() >= 2 {
        Some(frechet_distance(&feats_pred, &feats_gt)?)
    } else {
        log::warn!("fewer than two samples; frechet distance omitted");
        None
    };
    if let Some(dir) = &opts.grid_dir {
        write_grids(&grid_rows, dir)?;
    }
    Ok(MetricReport {
        note: FRECHET_NOTE.into(),
        embedding_seed: EMBEDDING_SEED,
        config_fingerprint: opts.config_fingerprint.clone(),
        split: opts.split.clone(),
        composite: opts.composite,
        count: metrics.len(),
        aggregate: aggregate(&metrics, frechet),
        samples: metrics,
    })
}

/// Stage-two scores with ground-truth masks and parsings as inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScores {
    pub count: usize,
    pub l1_image: f64,
    pub l1_image_invisible: Option<f64>,
    pub frechet: Option<f64>,
}

/// Scores stage two alone, isolating it from stage-one errors.
pub fn evaluate_recovery(
    samples: &[OcclusionSample],
    stage2: &RecoveryModel,
    batch_size: usize,
    use_composite: bool,
) -> Result<RecoveryScores> {
    if samples.is_empty() {
        return Err(Error::Validation("nothing to evaluate".into()));
    }
    let embedding = Embedding::new(EMBEDDING_SEED);
    let (mut l1, mut l1_inv) = (Vec::new(), Vec::new());
    let (mut feats_pred, mut feats_gt) = (Vec::new(), Vec::new());
    for chunk in samples.chunks(batch_size.max(1)) {
        let col = |f: &dyn Fn(&OcclusionSample) -> Tensor| stack(&chunk.iter().map(f).collect::<Vec<_>>());
        let image = col(&|s| s.occluded_image.to_tensor());
        let full = col(&|s| s.full_image.to_tensor());
        let out = stage2.predict(&RecoveryInputs {
            image: &image,
            visible: &col(&|s| s.modal_mask.to_tensor()),
            amodal: &col(&|s| s.amodal_mask.to_tensor()),
            modal_parsing: &col(&|s| s.modal_parsing.to_tensor()),
            amodal_parsing: &col(&|s| s.amodal_parsing.to_tensor()),
        })?;
        let mut preds = Vec::with_capacity(chunk.len());
        for (n, s) in chunk.iter().enumerate() {
            let mut rec = ImageTensor::from_tensor(&out, n)?;
            if use_composite {
                rec = composite(&rec, &s.occluded_image, &s.modal_mask)?;
            }
            let (p, g) = (rec.to_tensor(), s.full_image.to_tensor());
            l1.push(l1_error(&p, &g)?);
            if let Some(v) = l1_in_region(&p, &g, &s.invisible_mask())? {
                l1_inv.push(v);
            }
            preds.push(p);
        }
        feats_pred.extend(embedding.pooled(&stack(&preds)));
        feats_gt.extend(embedding.pooled(&full));
    }
    let frechet = if samples.len() >= 2 {
        Some(frechet_distance(&feats_pred, &feats_gt)?)
    } else {
        None
    };
    Ok(RecoveryScores {
        count: samples.len(),
        l1_image: mean(l1.into_iter()).expect("non-empty"),
        l1_image_invisible: mean(l1_inv.into_iter()),
        frechet,
    })
}

fn mask_panel(m: &BinaryMask) -> ImageTensor {
    ImageTensor::from_fn(m.height(), m.width(), |_, y, x| m.get(y, x) as u8 as f64)
}

/// Side-by-side panels: input, initial mask, predicted amodal, predicted
/// invisible, recovery, composite, ground truth.
pub fn grid_row(s: &OcclusionSample, out: &CascadeOutput) -> Vec<ImageTensor> {
    vec![
        s.occluded_image.clone(),
        mask_panel(&s.initial_mask),
        mask_panel(&out.amodal),
        mask_panel(&out.invisible),
        out.recovered.clone(),
        out.composite.clone(),
        s.full_image.clone(),
    ]
}

/// Writes one lossless PNG per row of panels, separated by 2-pixel gutters.
pub fn write_grids(rows: &[Vec<ImageTensor>], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    const GAP: u32 = 2;
    for (i, row) in rows.iter().enumerate() {
        let Some(first) = row.first() else { continue };
        let (h, w) = (first.height() as u32, first.width() as u32);
        let cols = row.len() as u32;
        let mut canvas = image::RgbImage::from_pixel(cols * w + (cols - 1) * GAP, h, image::Rgb([255, 255, 255]));
        for (c, panel) in row.iter().enumerate() {
            image::imageops::replace(&mut canvas, &panel.to_rgb8(), (c as u32 * (w + GAP)) as i64, 0);
        }
        let path = dir.join(format!("grid_{i:04}.png"));
        canvas
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
    }
    Ok(())
}
