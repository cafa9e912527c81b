use deocc_tensor::Tensor;

use crate::error::{Error, Result};
use crate::maskcomp::invisible_mask;
use crate::types::BinaryMask;

/// Intersection over union; two empty masks score 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("iou of masks with different sizes".into()));
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Modal, amodal and invisible IoU of one prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IouTriplet {
    pub modal: f64,
    pub amodal: f64,
    pub invisible: f64,
}

/// Scores binarized predictions against ground truth; invisible regions
/// are derived on both sides as `amodal ∧ ¬modal`.
pub fn iou_triplet(
    pred_modal: &BinaryMask,
    pred_amodal: &BinaryMask,
    gt_modal: &BinaryMask,
    gt_amodal: &BinaryMask,
) -> Result<IouTriplet> {
    let pred_inv = invisible_mask(pred_amodal, pred_modal)?;
    let gt_inv = invisible_mask(gt_amodal, gt_modal)?;
    Ok(IouTriplet {
        modal: iou(pred_modal, gt_modal)?,
        amodal: iou(pred_amodal, gt_amodal)?,
        invisible: iou(&pred_inv, &gt_inv)?,
    })
}

/// Mean absolute difference over every element.
pub fn l1_error(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    if pred.numel() == 0 {
        return Err(Error::Validation("l1 of empty tensors".into()));
    }
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / pred.numel() as f64)
}

/// Mean absolute difference restricted to pixels inside `region`.
///
/// `pred` and `gt` are `1×C×H×W`; returns `None` for an empty region.
pub fn l1_in_region(pred: &Tensor, gt: &Tensor, region: &BinaryMask) -> Result<Option<f64>> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let (_, c, h, w) = pred.dims4();
    if region.height() != h || region.width() != w {
        return Err(Error::Shape("region does not match the map".into()));
    }
    let area = region.area();
    if area == 0 {
        return Ok(None);
    }
    let mut total = 0.0;
    for ch in 0..c {
        for (i, &m) in region.data().iter().enumerate() {
            if m == 1 {
                let k = ch * h * w + i;
                total += (pred.data()[k] - gt.data()[k]).abs();
            }
        }
    }
    Ok(Some(total / (area * c) as f64))
}
