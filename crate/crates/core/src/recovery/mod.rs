//! Stage two: partial-convolution U-Net with parsing guided attention.

mod pconv;
mod pga;

pub use pconv::{partial_conv, partial_conv_eval};
pub use pga::{
    pga_body_stream, pga_relation_logits, pga_relation_matrix, pga_relation_stream, Assembly, PgaConfig, PgaGuide,
};

use deocc_tensor::{Binding, Graph, Init, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::datagen::derive_seed;
use crate::error::{Error, Result};
use crate::losses::{self, AdversarialMode, Embedding};
use crate::nn::{add_conv, PatchDiscriminator, LEAK};
use crate::types::{BinaryMask, ImageTensor};

/// Default background proportion `w`.
pub const DEFAULT_BACKGROUND_WEIGHT: f64 = 0.3;

/// `I_s·M_a + I_s·(1 − M_a)·w`, for `N×3×H×W` images and `N×1×H×W` masks.
pub fn apply_background_proportion(image: &Tensor, amodal: &Tensor, w: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Config(format!("background proportion {w} outside [0,1]")));
    }
    let (n, c, h, wd) = image.dims4();
    if amodal.shape() != [n, 1, h, wd] {
        return Err(Error::Shape(format!("amodal mask {:?} vs image {:?}", amodal.shape(), image.shape())));
    }
    let hw = h * wd;
    let mut out = image.clone();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..hw {
                let m = amodal.data()[b * hw + i];
                let v = &mut out.data_mut()[(b * c + ch) * hw + i];
                *v = *v * m + *v * (1.0 - m) * w;
            }
        }
    }
    Ok(out)
}

/// `I_s⊙M_v + Î_o⊙(1 − M_v)`, selecting rather than blending so visible
/// pixels are copied bit for bit.
pub fn composite(recovered: &ImageTensor, occluded: &ImageTensor, visible: &BinaryMask) -> Result<ImageTensor> {
    let (h, w) = (occluded.height(), occluded.width());
    if recovered.height() != h || recovered.width() != w || visible.height() != h || visible.width() != w {
        return Err(Error::Shape("composite inputs differ in size".into()));
    }
    Ok(ImageTensor::from_fn(h, w, |c, y, x| {
        if visible.get(y, x) {
            occluded.get(c, y, x)
        } else {
            recovered.get(c, y, x)
        }
    }))
}

/// Architecture and input options for stage two.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub part_count: usize,
    pub base_channels: usize,
    /// Number of stride-2 encoder levels.
    pub levels: usize,
    pub disc_channels: usize,
    /// How many of the coarsest decoder scales carry a PGA block.
    pub pga_scales: usize,
    /// PGA is skipped at scales with more pixels than this.
    pub pga_max_pixels: usize,
    pub body_stream: bool,
    pub relation_stream: bool,
    pub assembly: Assembly,
    /// Background proportion `w`.
    pub background_weight: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            part_count: 7,
            base_channels: 16,
            levels: 4,
            disc_channels: 16,
            pga_scales: 3,
            pga_max_pixels: 4096,
            body_stream: true,
            relation_stream: true,
            assembly: Assembly::Fusion,
            background_weight: DEFAULT_BACKGROUND_WEIGHT,
        }
    }
}

const IN_CHANNELS: usize = 5;

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.background_weight) {
            return Err(Error::Config(format!(
                "background proportion {} outside [0,1]",
                self.background_weight
            )));
        }
        if self.levels == 0 || self.base_channels == 0 || self.part_count < 2 {
            return Err(Error::Config("stage-two network needs levels, channels and P ≥ 2".into()));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level.min(2)
    }

    /// Decoder level `i` (output at encoder level `i − 1`) carries PGA.
    pub fn has_pga(&self, level: usize) -> bool {
        level + self.pga_scales > self.levels && !self.pga(level).is_identity()
    }

    fn pga(&self, level: usize) -> PgaConfig {
        let c = self.channels(level - 1);
        PgaConfig {
            channels: c,
            part_count: self.part_count,
            key_channels: c,
            body: self.body_stream,
            relation: self.relation_stream,
            assembly: self.assembly,
        }
    }

    pub fn discriminator(&self) -> PatchDiscriminator {
        PatchDiscriminator {
            in_channels: 3,
            base_channels: self.disc_channels,
        }
    }

    pub fn init_generator(&self, seed: u64) -> ParamStore {
        let mut init = Init::new(derive_seed(seed, &[1]));
        let mut s = ParamStore::new();
        add_conv(&mut s, &mut init, "enc0", self.channels(0), IN_CHANNELS, 3);
        for i in 1..=self.levels {
            add_conv(&mut s, &mut init, &format!("enc{i}"), self.channels(i), self.channels(i - 1), 3);
        }
        for i in (1..=self.levels).rev() {
            let cin = self.channels(i) + self.channels(i - 1);
            add_conv(&mut s, &mut init, &format!("dec{i}"), self.channels(i - 1), cin, 3);
            if self.has_pga(i) {
                s.merge_prefixed(&format!("pga{i}."), self.pga(i).init(derive_seed(seed, &[2, i as u64])));
            }
        }
        add_conv(&mut s, &mut init, "head", 3, self.channels(0), 1);
        s
    }
}

/// Repeats a single-channel mask to `c` channels.
fn repeat_channels(mask: &Tensor, c: usize) -> Tensor {
    let reps = vec![mask; c];
    Tensor::concat(&reps, 1)
}

/// Stage-two inputs, `N×C×H×W` each.
#[derive(Clone, Copy, Debug)]
pub struct RecoveryInputs<'a> {
    pub image: &'a Tensor,
    pub visible: &'a Tensor,
    pub amodal: &'a Tensor,
    pub modal_parsing: &'a Tensor,
    pub amodal_parsing: &'a Tensor,
}

impl RecoveryInputs<'_> {
    fn check(&self, part_count: usize) -> Result<(usize, usize, usize)> {
        let s = self.image.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("image must be N×3×H×W, got {s:?}")));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        for (what, t, c) in [
            ("visible mask", self.visible, 1),
            ("amodal mask", self.amodal, 1),
            ("modal parsing", self.modal_parsing, part_count),
            ("amodal parsing", self.amodal_parsing, part_count),
        ] {
            if t.shape() != [n, c, h, w] {
                return Err(Error::Shape(format!("{what}: expected {:?}, got {:?}", [n, c, h, w], t.shape())));
            }
        }
        Ok((n, h, w))
    }
}

/// Initial validity: `M_v ∨ (1 − M_a)` when `w > 0`, `M_v` otherwise.
pub fn initial_validity(visible: &Tensor, amodal: &Tensor, w: f64) -> Tensor {
    if w > 0.0 {
        visible.zip_map(amodal, |v, a| if v > 0.5 || a < 0.5 { 1.0 } else { 0.0 })
    } else {
        visible.clone()
    }
}

/// `Î_o` on the graph: `N×3×H×W` in `[0, 1]`.
pub fn recovery_forward<'g>(cfg: &RecoveryConfig, params: &Binding<'g>, inputs: &RecoveryInputs<'_>) -> Result<Var<'g>> {
    cfg.validate()?;
    inputs.check(cfg.part_count)?;
    let g = params.var("head.w").graph();
    let scope = params.scope("");
    let image = apply_background_proportion(inputs.image, inputs.amodal, cfg.background_weight)?;
    let x = Var::concat(
        &[g.input(image), g.input(inputs.visible.clone()), g.input(inputs.amodal.clone())],
        1,
    );
    let guide = PgaGuide {
        modal_parsing: g.input(inputs.modal_parsing.clone()),
        amodal_parsing: g.input(inputs.amodal_parsing.clone()),
        visible: g.input(inputs.visible.clone()),
    };
    let pconv = |name: &str, x: Var<'g>, mask: &Tensor, stride: usize| {
        let (y, m) = partial_conv(
            x,
            mask,
            scope.var(&format!("{name}.w")),
            scope.var(&format!("{name}.b")),
            stride,
            1,
        );
        (y.leaky_relu(LEAK), m)
    };

    let valid = initial_validity(inputs.visible, inputs.amodal, cfg.background_weight);
    let mut skips = Vec::with_capacity(cfg.levels + 1);
    let (mut h, mut m) = pconv("enc0", x, &valid, 1);
    skips.push((h, m.clone()));
    for i in 1..=cfg.levels {
        (h, m) = pconv(&format!("enc{i}"), h, &m, 2);
        skips.push((h, m.clone()));
    }
    for i in (1..=cfg.levels).rev() {
        let (skip, skip_mask) = &skips[i - 1];
        let s = skip.shape();
        let up = h.resize_nearest(s[2], s[3]);
        let up_mask = m.resize_nearest(s[2], s[3]);
        let mask = Tensor::concat(
            &[
                &repeat_channels(&up_mask, cfg.channels(i)),
                &repeat_channels(skip_mask, cfg.channels(i - 1)),
            ],
            1,
        );
        (h, m) = pconv(&format!("dec{i}"), Var::concat(&[up, *skip], 1), &mask, 1);
        if cfg.has_pga(i) && s[2] * s[3] <= cfg.pga_max_pixels {
            h = cfg.pga(i).forward(&scope.scope(&format!("pga{i}.")), h, &guide.at(s[2], s[3]));
        }
    }
    Ok(crate::nn::conv(&scope, "head", h, 1, 0).sigmoid())
}

/// PatchGAN logits for an image batch.
pub fn image_discriminator_forward<'g>(cfg: &RecoveryConfig, params: &Binding<'g>, image: Var<'g>) -> Result<Var<'g>> {
    let d = cfg.discriminator();
    d.check_input(&image.shape())?;
    Ok(d.forward(&params.scope(""), image))
}

/// Trainable stage-two state.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryModel {
    pub config: RecoveryConfig,
    pub generator: ParamStore,
    pub discriminator: ParamStore,
}

impl RecoveryModel {
    pub fn new(config: RecoveryConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            generator: config.init_generator(seed),
            discriminator: config.discriminator().init(derive_seed(seed, &[3])),
            config,
        })
    }

    /// `Î_o` without recording gradients.
    pub fn predict(&self, inputs: &RecoveryInputs<'_>) -> Result<Tensor> {
        let g = Graph::new();
        let b = self.generator.bind(&g, false);
        let out = recovery_forward(&self.config, &b, inputs)?;
        Ok((*out.value()).clone())
    }
}

/// `β1..β4` of the stage-two objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Weights {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Self {
            beta1: 0.1,
            beta2: 1.0,
            beta3: 1.0,
            beta4: 40.0,
        }
    }
}

impl Stage2Weights {
    pub fn new(beta1: f64, beta2: f64, beta3: f64, beta4: f64) -> Result<Self> {
        for (name, v) in [("beta1", beta1), ("beta2", beta2), ("beta3", beta3), ("beta4", beta4)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be a finite value ≥ 0, got {v}")));
            }
        }
        Ok(Self { beta1, beta2, beta3, beta4 })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.beta1, self.beta2, self.beta3, self.beta4).map(|_| ())
    }

    /// `[β1·adv, β2·ℓ1, β3·perceptual, β4·style]`.
    pub fn contributions(&self, adv: f64, l1: f64, perceptual: f64, style: f64) -> [f64; 4] {
        [self.beta1 * adv, self.beta2 * l1, self.beta3 * perceptual, self.beta4 * style]
    }
}

/// The stage-two objective on the graph.
#[derive(Clone, Copy, Debug)]
pub struct Stage2Loss<'g> {
    pub adv: Var<'g>,
    pub l1: Var<'g>,
    pub perceptual: Var<'g>,
    pub style: Var<'g>,
    pub total: Var<'g>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Terms {
    pub adv: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub style: f64,
    pub contributions: [f64; 4],
    pub total: f64,
}

impl Stage2Loss<'_> {
    pub fn terms(&self, weights: &Stage2Weights) -> Stage2Terms {
        let v = |x: Var<'_>| x.value().item();
        let (adv, l1, perceptual, style) = (v(self.adv), v(self.l1), v(self.perceptual), v(self.style));
        Stage2Terms {
            adv,
            l1,
            perceptual,
            style,
            contributions: weights.contributions(adv, l1, perceptual, style),
            total: v(self.total),
        }
    }
}

/// `β1·L_adv + β2·ℓ1(Î_o, I_o) + β3·L_prec(Î_o, I_o) + β4·L_style(Î_o, I_o)`.
pub fn stage2_loss<'g>(
    recovered: Var<'g>,
    target: Var<'g>,
    fake_logits: Var<'g>,
    weights: &Stage2Weights,
    mode: AdversarialMode,
    embedding: &Embedding,
) -> Stage2Loss<'g> {
    let adv = losses::generator_adv_loss(fake_logits, mode);
    let l1 = losses::l1(recovered, target);
    let perceptual = losses::perceptual(recovered, target, embedding);
    let style = losses::style(recovered, target, embedding);
    let total = adv.scale(weights.beta1) + l1.scale(weights.beta2) + perceptual.scale(weights.beta3) + style.scale(weights.beta4);
    Stage2Loss {
        adv,
        l1,
        perceptual,
        style,
        total,
    }
}
