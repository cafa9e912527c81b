//! Bringing external (photographed) humans onto the working canvas.

use super::human::{HumanRecord, BORDER_MARGIN};
use crate::error::{Error, Result};
use crate::types::{BinaryMask, ImageTensor, ParsingLogits};

/// An externally supplied, unoccluded human.
#[derive(Clone, Debug)]
pub struct ExternalHuman {
    pub image: image::RgbImage,
    /// Foreground mask; every pixel must be 0/1 or 0/255 (one convention per mask).
    pub mask: image::GrayImage,
    /// Optional part labels, one byte per pixel.
    pub parsing: Option<image::GrayImage>,
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub human: HumanRecord,
    pub warnings: Vec<String>,
}

fn binary_levels(mask: &image::GrayImage) -> Result<u8> {
    let mut high = None;
    for p in mask.pixels() {
        match (p[0], high) {
            (0, _) => {}
            (v @ (1 | 255), None) => high = Some(v),
            (v, Some(h)) if v == h => {}
            (v, _) => return Err(Error::Validation(format!("mask value {v} is not binary"))),
        }
    }
    high.ok_or_else(|| Error::Validation("mask is empty".into()))
}

/// Validates `ext` and fits it onto an `H×W` canvas.
///
/// The figure is scaled (nearest neighbour, aspect preserved) to fit inside
/// the border margin and centred; padding is black background. Missing
/// parsing defaults to a single foreground part.
pub fn ingest_external(ext: &ExternalHuman, canvas: (usize, usize), part_count: usize) -> Result<Ingested> {
    let (iw, ih) = ext.image.dimensions();
    if ext.mask.dimensions() != (iw, ih) {
        return Err(Error::Validation(format!(
            "mask {:?} does not match image {iw}×{ih}",
            ext.mask.dimensions()
        )));
    }
    if let Some(p) = &ext.parsing {
        if p.dimensions() != (iw, ih) {
            return Err(Error::Validation("parsing does not match image size".into()));
        }
        if let Some(l) = p.pixels().find(|l| l[0] as usize >= part_count) {
            return Err(Error::Validation(format!("parsing label {} ≥ part count {part_count}", l[0])));
        }
    }
    if part_count < 2 {
        return Err(Error::Validation("part count must be at least 2".into()));
    }
    if iw == 0 || ih == 0 {
        return Err(Error::Validation("empty image".into()));
    }
    let high = binary_levels(&ext.mask)?;
    let mut warnings = Vec::new();
    if ext.mask.pixels().all(|p| p[0] == high) {
        let msg = "mask covers the whole image; no background context".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let (h, w) = canvas;
    if h <= 2 * BORDER_MARGIN || w <= 2 * BORDER_MARGIN {
        return Err(Error::Sizing {
            height: h,
            width: w,
            reason: "canvas leaves no room inside the margin".into(),
        });
    }
    let (ah, aw) = ((h - 2 * BORDER_MARGIN) as f64, (w - 2 * BORDER_MARGIN) as f64);
    let scale = (ah / ih as f64).min(aw / iw as f64);
    let (sh, sw) = (((ih as f64 * scale).floor() as usize).max(1), ((iw as f64 * scale).floor() as usize).max(1));
    let (oy, ox) = ((h - sh) / 2, (w - sw) / 2);
    let src = |y: usize, x: usize| -> Option<(u32, u32)> {
        if y < oy || x < ox || y >= oy + sh || x >= ox + sw {
            return None;
        }
        let sy = ((y - oy) * ih as usize / sh).min(ih as usize - 1);
        let sx = ((x - ox) * iw as usize / sw).min(iw as usize - 1);
        Some((sx as u32, sy as u32))
    };

    let image = ImageTensor::from_fn(h, w, |c, y, x| match src(y, x) {
        Some((sx, sy)) => ext.image.get_pixel(sx, sy)[c] as f64 / 255.0,
        None => 0.0,
    });
    let amodal = BinaryMask::from_fn(h, w, |y, x| {
        src(y, x).is_some_and(|(sx, sy)| ext.mask.get_pixel(sx, sy)[0] == high)
    });
    if amodal.is_empty() {
        return Err(Error::Validation("mask vanished when fitted to the canvas".into()));
    }
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let l = match (src(y, x), &ext.parsing) {
                _ if !amodal.get(y, x) => 0,
                (Some((sx, sy)), Some(p)) => p.get_pixel(sx, sy)[0].max(1),
                _ => 1,
            };
            labels.push(l);
        }
    }
    let parsing = ParsingLogits::new(part_count, h, w, labels)?;
    Ok(Ingested {
        human: HumanRecord {
            image,
            amodal,
            parsing,
        },
        warnings,
    })
}
