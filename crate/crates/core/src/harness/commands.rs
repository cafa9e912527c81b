//! Subcommand implementations shared by the binary and the tests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{ParsingSource, TrainConfig};
use super::train::{init_stage1, init_stage2, train_stage1, train_stage2};
use crate::datagen::{
    corrupt_modal_mask, derive_seed, load_dataset, save_dataset, synthesize_split, OcclusionSample,
    RatioDistribution, Split,
};
use crate::datagen::storage::{decode_image_png, decode_mask_png, encode_image_png, encode_mask_png};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, evaluate_recovery, run_cascade, CascadeOutput, EvalOptions, MetricReport, RecoveryScores};
use crate::maskcomp::Stage1Model;
use crate::recovery::{Assembly, RecoveryModel};

pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const STAGE2_CHECKPOINT: &str = "stage2.ckpt";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn split_dir(cfg: &TrainConfig, split: Split) -> PathBuf {
    cfg.data_dir.join(split.as_str())
}

/// Loads a split from disk, or synthesizes it in memory when absent.
pub fn dataset(cfg: &TrainConfig, split: Split) -> Result<Vec<OcclusionSample>> {
    let dir = split_dir(cfg, split);
    if dir.join("dataset.json").exists() {
        load_dataset(&dir)
    } else {
        log::info!("{} not found; synthesizing the {} split in memory", dir.display(), split.as_str());
        synthesize_split(&cfg.synth_spec(split))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub target_probability: f64,
    pub count: usize,
    pub fraction: f64,
}

/// Occlusion ratios counted against the bins they were drawn from.
pub fn ratio_histogram(samples: &[OcclusionSample], dist: &RatioDistribution) -> Vec<HistogramBin> {
    let mut counts = vec![0usize; dist.bins().len()];
    for s in samples {
        if let Some(b) = dist.bin_of(s.occlusion_ratio) {
            counts[b] += 1;
        }
    }
    dist.bins()
        .iter()
        .zip(counts)
        .map(|(b, count)| HistogramBin {
            low: b.low,
            high: b.high,
            target_probability: b.probability,
            count,
            fraction: if samples.is_empty() { 0.0 } else { count as f64 / samples.len() as f64 },
        })
        .collect()
}

/// Bar chart of achieved fractions (dark) over targets (light outline).
pub fn histogram_png(bins: &[HistogramBin]) -> Vec<u8> {
    const BAR: u32 = 40;
    const GAP: u32 = 10;
    const H: u32 = 200;
    let width = GAP + bins.len() as u32 * (BAR + GAP);
    let mut img = image::RgbImage::from_pixel(width.max(1), H + 2 * GAP, image::Rgb([255, 255, 255]));
    let y_of = |f: f64| GAP + H - (f.clamp(0.0, 1.0) * H as f64).round() as u32;
    for (i, b) in bins.iter().enumerate() {
        let x0 = GAP + i as u32 * (BAR + GAP);
        for x in x0..x0 + BAR {
            for y in y_of(b.fraction)..GAP + H {
                img.put_pixel(x, y, image::Rgb([40, 70, 140]));
            }
            img.put_pixel(x, y_of(b.target_probability).min(GAP + H - 1), image::Rgb([220, 60, 60]));
        }
    }
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .expect("in-memory png encoding cannot fail");
    buf.into_inner()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub count: usize,
    pub histogram: Vec<HistogramBin>,
}

/// Synthesizes the training and validation splits under `data_dir`.
pub fn cmd_synth(cfg: &TrainConfig) -> Result<Vec<SplitSummary>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for split in [Split::Train, Split::Val] {
        let spec = cfg.synth_spec(split);
        let samples = synthesize_split(&spec)?;
        let dir = split_dir(cfg, split);
        save_dataset(&samples, &dir)?;
        let histogram = ratio_histogram(&samples, &spec.distribution);
        write_file(
            &dir.join("ratio_histogram.json"),
            &serde_json::to_vec_pretty(&histogram).expect("histogram serialises"),
        )?;
        write_file(&dir.join("ratio_histogram.png"), &histogram_png(&histogram))?;
        log::info!("wrote {} {} samples to {}", samples.len(), split.as_str(), dir.display());
        out.push(SplitSummary {
            split: split.as_str().into(),
            count: samples.len(),
            histogram,
        });
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).expect("record serialises");
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

fn save_run_config(cfg: &TrainConfig, name: &str) -> Result<()> {
    let mut text = Vec::new();
    writeln!(text, "# fingerprint {}", cfg.fingerprint()).expect("vec write");
    text.extend_from_slice(cfg.to_text().as_bytes());
    write_file(&cfg.run_dir.join(name), &text)
}

pub fn load_stage1(path: &Path) -> Result<Stage1Model> {
    Stage1Model::from_checkpoint(&Checkpoint::load(path)?)
}

pub fn load_stage2(path: &Path) -> Result<RecoveryModel> {
    RecoveryModel::from_checkpoint(&Checkpoint::load(path)?)
}

/// Trains stage one on the training split; writes the checkpoint and loss log.
pub fn cmd_train_mask(cfg: &TrainConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let samples = dataset(cfg, Split::Train)?;
    let model = init_stage1(cfg, &samples)?;
    let (model, history) = train_stage1(cfg, &samples, model, |_, _| true)?;
    let path = cfg.run_dir.join(STAGE1_CHECKPOINT);
    model.to_checkpoint().save(&path)?;
    write_jsonl(&cfg.run_dir.join("stage1_losses.jsonl"), &history)?;
    save_run_config(cfg, "stage1_config.txt")?;
    Ok(path)
}

/// Trains stage two; `stage1` is needed only for predicted parsing guides.
pub fn cmd_train_recover(cfg: &TrainConfig, stage1: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let samples = dataset(cfg, Split::Train)?;
    let s1 = match (cfg.recover_parsing, stage1) {
        (ParsingSource::Predicted, Some(p)) => Some(load_stage1(p)?),
        (ParsingSource::Predicted, None) => Some(load_stage1(&cfg.run_dir.join(STAGE1_CHECKPOINT))?),
        (ParsingSource::GroundTruth, _) => None,
    };
    let model = init_stage2(cfg)?;
    let (model, history) = train_stage2(cfg, &samples, model, s1.as_ref(), |_, _| true)?;
    let path = cfg.run_dir.join(STAGE2_CHECKPOINT);
    model.to_checkpoint().save(&path)?;
    write_jsonl(&cfg.run_dir.join("stage2_losses.jsonl"), &history)?;
    save_run_config(cfg, "stage2_config.txt")?;
    Ok(path)
}

/// Runs the cascade over the validation split and writes `report.json`.
pub fn cmd_eval(cfg: &TrainConfig, stage1: &Path, stage2: &Path) -> Result<MetricReport> {
    cfg.validate()?;
    let s1 = load_stage1(stage1)?;
    let s2 = load_stage2(stage2)?;
    let samples = dataset(cfg, Split::Val)?;
    let opts = EvalOptions {
        batch_size: cfg.batch_size,
        composite: cfg.composite,
        config_fingerprint: cfg.fingerprint(),
        split: Split::Val.as_str().into(),
        grid_dir: (cfg.grids > 0).then(|| cfg.run_dir.join("grids")),
        grids: cfg.grids,
    };
    let report = evaluate(&samples, &s1, &s2, &opts)?;
    report.write(&cfg.run_dir.join("report.json"))?;
    Ok(report)
}

/// Inputs of a single-image inference.
#[derive(Clone, Debug)]
pub struct InferRequest {
    pub image: PathBuf,
    pub mask: PathBuf,
    /// Corrupt the provided mask with this severity before stage one.
    pub corrupt: Option<f64>,
    pub out_dir: PathBuf,
}

/// Full cascade on one image; writes every intermediate as PNG.
pub fn cmd_infer(cfg: &TrainConfig, stage1: &Path, stage2: &Path, req: &InferRequest) -> Result<CascadeOutput> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::io(p, e));
    let image = decode_image_png(&read(&req.image)?)?;
    let mut mask = decode_mask_png(&read(&req.mask)?)?;
    if mask.height() != image.height() || mask.width() != image.width() {
        return Err(Error::Shape("mask and image differ in size".into()));
    }
    if let Some(severity) = req.corrupt {
        if !(0.0..=1.0).contains(&severity) {
            return Err(Error::Validation(format!("corruption {severity} outside [0, 1]")));
        }
        mask = corrupt_modal_mask(&mask, severity, derive_seed(cfg.seed, &[30]));
    }
    let s1 = load_stage1(stage1)?;
    let s2 = load_stage2(stage2)?;
    let out = run_cascade(&s1, &s2, &[&image], &[&mask])?
        .pop()
        .expect("one output per input");
    if !out.modal.is_subset_of(&out.amodal) {
        return Err(Error::Numerical("modal mask escaped the amodal mask".into()));
    }
    let d = &req.out_dir;
    write_file(&d.join("initial_mask.png"), &encode_mask_png(&mask))?;
    write_file(&d.join("modal_mask.png"), &encode_mask_png(&out.modal))?;
    write_file(&d.join("amodal_mask.png"), &encode_mask_png(&out.amodal))?;
    write_file(&d.join("invisible_mask.png"), &encode_mask_png(&out.invisible))?;
    write_file(&d.join("recovered.png"), &encode_image_png(&out.recovered))?;
    write_file(&d.join("composite.png"), &encode_image_png(&out.composite))?;
    log::info!(
        "violations before intersection: {} ({:.3}% of pixels)",
        out.violations,
        100.0 * out.violation_fraction()
    );
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub background_weight: f64,
    pub body_stream: bool,
    pub relation_stream: bool,
    pub assembly: Assembly,
    pub scores: RecoveryScores,
}

/// Stage-two variants swept by `cmd_ablate`.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut out = Vec::new();
    for w in [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
        let mut c = base.clone();
        c.background_weight = w;
        out.push((format!("w={w}"), c));
    }
    for (name, body, rel) in [("no_pga", false, false), ("body_only", true, false), ("relation_only", false, true)] {
        let mut c = base.clone();
        c.pga_body = body;
        c.pga_relation = rel;
        out.push((name.into(), c));
    }
    for a in [Assembly::Fusion, Assembly::Cascade] {
        let mut c = base.clone();
        c.pga_body = true;
        c.pga_relation = true;
        c.pga_assembly = a;
        out.push((format!("assembly={}", a.as_str()), c));
    }
    out
}

/// Trains and scores each stage-two variant; writes `ablation.json` and a
/// plain-text table.
pub fn cmd_ablate(cfg: &TrainConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let train = dataset(cfg, Split::Train)?;
    let val = dataset(cfg, Split::Val)?;
    let mut rows = Vec::new();
    for (name, c) in ablation_variants(cfg) {
        log::info!("ablation variant {name}");
        let c = TrainConfig {
            recover_parsing: ParsingSource::GroundTruth,
            ..c
        };
        let (model, _) = train_stage2(&c, &train, init_stage2(&c)?, None, |_, _| true)?;
        let scores = evaluate_recovery(&val, &model, c.batch_size, c.composite)?;
        rows.push(AblationRow {
            name,
            background_weight: c.background_weight,
            body_stream: c.pga_body,
            relation_stream: c.pga_relation,
            assembly: c.pga_assembly,
            scores,
        });
    }
    write_file(
        &cfg.run_dir.join("ablation.json"),
        &serde_json::to_vec_pretty(&rows).expect("rows serialise"),
    )?;
    write_file(&cfg.run_dir.join("ablation.txt"), ablation_table(&rows).as_bytes())?;
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    let mut s = format!("{:<22} {:>8} {:>12} {:>10}\n", "variant", "l1", "l1_invisible", "frechet");
    for r in rows {
        s.push_str(&format!(
            "{:<22} {:>8.4} {:>12} {:>10}\n",
            r.name,
            r.scores.l1_image,
            opt(r.scores.l1_image_invisible),
            opt(r.scores.frechet)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_grid_covers_requested_weights() {
        let v = ablation_variants(&TrainConfig::default());
        let ws: Vec<f64> = v.iter().take(7).map(|(_, c)| c.background_weight).collect();
        assert_eq!(ws, vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0]);
        assert!(v.iter().any(|(_, c)| !c.pga_body && !c.pga_relation));
        assert!(v.iter().any(|(_, c)| c.pga_assembly == Assembly::Cascade));
    }
}
