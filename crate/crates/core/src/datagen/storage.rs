//! On-disk dataset layout.
//!
//! ```text
//! <root>/dataset.json            {"format":"deocc-dataset","version":1,"samples":["00000",...]}
//! <root>/<id>/meta.json          seed, occlusion_ratio, part_count, split, height, width
//! <root>/<id>/occluded.png       I_s, 8-bit RGB
//! <root>/<id>/full.png           I_o, 8-bit RGB
//! <root>/<id>/initial_mask.png   masks: 8-bit gray, 0 or 255
//! <root>/<id>/modal_mask.png
//! <root>/<id>/amodal_mask.png
//! <root>/<id>/occluder_mask.png
//! <root>/<id>/modal_parsing.png  labels: 8-bit gray, value = part index
//! <root>/<id>/amodal_parsing.png
//! ```
//!
//! Masks and labels round-trip bit-exactly; images are quantised to 1/255.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::compose::{occlusion_ratio, OcclusionSample, Split};
use crate::error::{Error, Result};
use crate::types::{BinaryMask, ImageTensor, ParsingLogits};

pub const DATASET_FORMAT: &str = "deocc-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub format: String,
    pub version: u32,
    pub samples: Vec<String>,
}

/// Per-sample `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleManifest {
    pub seed: u64,
    pub occlusion_ratio: f64,
    pub part_count: usize,
    pub split: Split,
    pub height: usize,
    pub width: usize,
}

impl SampleManifest {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let m: SampleManifest = serde_json::from_slice(bytes)
            .map_err(|e| Error::Validation(format!("bad sample manifest: {e}")))?;
        if !(2..=256).contains(&m.part_count) {
            return Err(Error::Validation(format!("part_count {} outside 2..=256", m.part_count)));
        }
        if !(0.0..=1.0).contains(&m.occlusion_ratio) {
            return Err(Error::Validation(format!("occlusion_ratio {} outside [0,1]", m.occlusion_ratio)));
        }
        if m.height == 0 || m.width == 0 || m.height > 4096 || m.width > 4096 {
            return Err(Error::Validation(format!("implausible size {}×{}", m.height, m.width)));
        }
        Ok(m)
    }
}

impl DatasetIndex {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let idx: DatasetIndex = serde_json::from_slice(bytes)
            .map_err(|e| Error::Validation(format!("bad dataset index: {e}")))?;
        if idx.format != DATASET_FORMAT {
            return Err(Error::Validation(format!("unexpected format `{}`", idx.format)));
        }
        if idx.version != DATASET_VERSION {
            return Err(Error::Validation(format!("unsupported dataset version {}", idx.version)));
        }
        for id in &idx.samples {
            if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Validation(format!("sample id `{id}` is not a plain directory name")));
            }
        }
        Ok(idx)
    }
}

fn encode_png(img: image::DynamicImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .expect("in-memory png encoding cannot fail");
    buf.into_inner()
}

fn decode_gray(bytes: &[u8]) -> Result<image::GrayImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Validation(format!("bad png: {e}")))?;
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(Error::Validation(format!("expected 8-bit gray png, got {:?}", other.color()))),
    }
}

/// Decodes an 8-bit gray PNG whose pixels are all 0 or 255.
pub fn decode_mask_png(bytes: &[u8]) -> Result<BinaryMask> {
    let g = decode_gray(bytes)?;
    let data = g
        .pixels()
        .map(|p| match p[0] {
            0 => Ok(0),
            255 => Ok(1),
            v => Err(Error::Validation(format!("mask pixel {v} is neither 0 nor 255"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    BinaryMask::new(g.height() as usize, g.width() as usize, data)
}

/// Decodes an 8-bit gray PNG of part labels below `part_count`.
pub fn decode_label_png(bytes: &[u8], part_count: usize) -> Result<ParsingLogits> {
    let g = decode_gray(bytes)?;
    ParsingLogits::new(part_count, g.height() as usize, g.width() as usize, g.into_raw())
}

/// Decodes an 8-bit RGB PNG.
pub fn decode_image_png(bytes: &[u8]) -> Result<ImageTensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Validation(format!("bad png: {e}")))?;
    match img {
        image::DynamicImage::ImageRgb8(rgb) => Ok(ImageTensor::from_rgb8(&rgb)),
        other => Err(Error::Validation(format!("expected 8-bit RGB png, got {:?}", other.color()))),
    }
}

pub fn encode_mask_png(mask: &BinaryMask) -> Vec<u8> {
    encode_png(image::DynamicImage::ImageLuma8(mask.to_gray8()))
}

pub fn encode_label_png(p: &ParsingLogits) -> Vec<u8> {
    let g = image::GrayImage::from_raw(p.width() as u32, p.height() as u32, p.labels().to_vec())
        .expect("label buffer matches its size");
    encode_png(image::DynamicImage::ImageLuma8(g))
}

pub fn encode_image_png(img: &ImageTensor) -> Vec<u8> {
    encode_png(image::DynamicImage::ImageRgb8(img.to_rgb8()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::dataset(path, format!("cannot read: {e}")))
}

/// Writes one sample into `dir`, creating it.
pub fn save_sample(sample: &OcclusionSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = SampleManifest {
        seed: sample.seed,
        occlusion_ratio: sample.occlusion_ratio,
        part_count: sample.part_count(),
        split: sample.split,
        height: sample.height(),
        width: sample.width(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
    write(&dir.join("meta.json"), &json)?;
    write(&dir.join("occluded.png"), &encode_image_png(&sample.occluded_image))?;
    write(&dir.join("full.png"), &encode_image_png(&sample.full_image))?;
    for (name, m) in [
        ("initial_mask.png", &sample.initial_mask),
        ("modal_mask.png", &sample.modal_mask),
        ("amodal_mask.png", &sample.amodal_mask),
        ("occluder_mask.png", &sample.occluder_mask),
    ] {
        write(&dir.join(name), &encode_mask_png(m))?;
    }
    write(&dir.join("modal_parsing.png"), &encode_label_png(&sample.modal_parsing))?;
    write(&dir.join("amodal_parsing.png"), &encode_label_png(&sample.amodal_parsing))?;
    Ok(())
}

/// Reads one sample back from `dir`, checking its invariants.
pub fn load_sample(dir: &Path) -> Result<OcclusionSample> {
    let meta_path = dir.join("meta.json");
    let manifest = SampleManifest::parse(&read(&meta_path)?)
        .map_err(|e| Error::dataset(&meta_path, e.to_string()))?;
    let ctx = |name: &str| dir.join(name);
    let img = |name: &str| -> Result<ImageTensor> {
        decode_image_png(&read(&ctx(name))?).map_err(|e| Error::dataset(ctx(name), e.to_string()))
    };
    let mask = |name: &str| -> Result<BinaryMask> {
        decode_mask_png(&read(&ctx(name))?).map_err(|e| Error::dataset(ctx(name), e.to_string()))
    };
    let labels = |name: &str| -> Result<ParsingLogits> {
        decode_label_png(&read(&ctx(name))?, manifest.part_count)
            .map_err(|e| Error::dataset(ctx(name), e.to_string()))
    };
    let sample = OcclusionSample {
        occluded_image: img("occluded.png")?,
        full_image: img("full.png")?,
        initial_mask: mask("initial_mask.png")?,
        modal_mask: mask("modal_mask.png")?,
        amodal_mask: mask("amodal_mask.png")?,
        occluder_mask: mask("occluder_mask.png")?,
        modal_parsing: labels("modal_parsing.png")?,
        amodal_parsing: labels("amodal_parsing.png")?,
        occlusion_ratio: manifest.occlusion_ratio,
        seed: manifest.seed,
        split: manifest.split,
    };
    if sample.height() != manifest.height || sample.width() != manifest.width {
        return Err(Error::dataset(dir, "image size disagrees with meta.json"));
    }
    sample
        .validate()
        .map_err(|e| Error::dataset(dir, e.to_string()))?;
    // the ratio recomputed from masks must agree with the manifest
    occlusion_ratio(&sample.amodal_mask, &sample.modal_mask)?;
    Ok(sample)
}

/// Saves `samples` under `root` as numbered sample directories.
pub fn save_dataset(samples: &[OcclusionSample], root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let ids: Vec<String> = (0..samples.len()).map(|i| format!("{i:05}")).collect();
    for (s, id) in samples.iter().zip(&ids) {
        save_sample(s, &root.join(id))?;
    }
    let index = DatasetIndex {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        samples: ids,
    };
    write(
        &root.join("dataset.json"),
        &serde_json::to_vec_pretty(&index).expect("index serialises"),
    )
}

/// Loads every sample listed in `<root>/dataset.json`.
pub fn load_dataset(root: &Path) -> Result<Vec<OcclusionSample>> {
    let index_path = root.join("dataset.json");
    let bytes = fs::read(&index_path)
        .map_err(|e| Error::dataset(&index_path, format!("missing dataset index: {e}")))?;
    let index = DatasetIndex::parse(&bytes).map_err(|e| Error::dataset(&index_path, e.to_string()))?;
    index
        .samples
        .iter()
        .map(|id| load_sample(&root.join(id)))
        .collect()
}
