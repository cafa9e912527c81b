//! Stage one: modal refinement and amodal completion with template priors.

mod hourglass;
mod templates;

pub use hourglass::{HourglassConfig, HourglassOutput};
pub use templates::{
    build_template_bank, flatten_resized, kmeans, template_attention, template_weights, KMeansFit, TemplateBank,
    KMEANS_MAX_ITERS, KMEANS_REL_TOL, WEIGHT_EPS,
};

use deocc_tensor::{Binding, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, AdversarialMode, Embedding};
use crate::nn::PatchDiscriminator;
use crate::types::BinaryMask;

/// Architecture knobs for stage one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub part_count: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub disc_channels: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            part_count: 7,
            depth: 3,
            base_channels: 32,
            disc_channels: 16,
        }
    }
}

impl Stage1Config {
    /// `N_m^hg`: image and initial mask in.
    pub fn modal(&self) -> HourglassConfig {
        HourglassConfig {
            in_channels: 4,
            base_channels: self.base_channels,
            depth: self.depth,
            part_count: self.part_count,
        }
    }

    /// `N_a^hg`: feature, refined modal mask and template feature in.
    pub fn amodal(&self) -> HourglassConfig {
        HourglassConfig {
            in_channels: self.base_channels + 2,
            ..self.modal()
        }
    }

    pub fn discriminator(&self) -> PatchDiscriminator {
        PatchDiscriminator {
            in_channels: 1,
            base_channels: self.disc_channels,
        }
    }

    /// Generator weights, names prefixed `modal.`, `amodal.` and `combine.`.
    pub fn init_generator(&self, templates: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        store.merge_prefixed("modal.", self.modal().init(crate::datagen::derive_seed(seed, &[1])));
        store.merge_prefixed("amodal.", self.amodal().init(crate::datagen::derive_seed(seed, &[2])));
        let mut init = deocc_tensor::Init::new(crate::datagen::derive_seed(seed, &[3]));
        crate::nn::add_conv(&mut store, &mut init, "combine", 1, templates, 1);
        store
    }
}

/// Trainable stage-one state plus its frozen template bank.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Model {
    pub config: Stage1Config,
    pub generator: ParamStore,
    pub discriminator: ParamStore,
    pub bank: TemplateBank,
}

impl Stage1Model {
    pub fn new(config: Stage1Config, bank: TemplateBank, seed: u64) -> Self {
        Self {
            generator: config.init_generator(bank.len(), seed),
            discriminator: config.discriminator().init(crate::datagen::derive_seed(seed, &[4])),
            config,
            bank,
        }
    }

    /// Runs the cascade's first stage on a batch without recording gradients.
    pub fn predict(&self, image: &Tensor, initial_mask: &Tensor) -> Result<Stage1Prediction> {
        let g = Graph::new();
        let b = self.generator.bind(&g, false);
        let t = g.input(self.bank.to_tensor());
        let out = stage1_forward(&self.config, &b, t, g.input(image.clone()), g.input(initial_mask.clone()))?;
        Ok(Stage1Prediction {
            refined_modal: (*out.refined_modal.value()).clone(),
            modal_parsing: (*out.modal_parsing.value()).clone(),
            amodal: (*out.amodal.value()).clone(),
            amodal_parsing: (*out.amodal_parsing.value()).clone(),
        })
    }
}

/// Graph-level stage-one outputs; all spatial sizes equal the input's.
#[derive(Clone, Copy, Debug)]
pub struct StageOneOutput<'g> {
    pub refined_modal: Var<'g>,
    pub modal_parsing: Var<'g>,
    pub amodal: Var<'g>,
    pub amodal_parsing: Var<'g>,
    pub feature: Var<'g>,
}

/// Detached stage-one outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Prediction {
    pub refined_modal: Tensor,
    pub modal_parsing: Tensor,
    pub amodal: Tensor,
    pub amodal_parsing: Tensor,
}

fn expect_shape(what: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: expected {want:?}, got {got:?}")));
    }
    Ok(())
}

/// Refines the initial modal mask: `(M̂_m, M̂_m^p, F_m)`.
pub fn modal_forward<'g>(
    cfg: &Stage1Config,
    params: &Binding<'g>,
    image: Var<'g>,
    initial_mask: Var<'g>,
) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
    let s = image.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Shape(format!("image must be N×3×H×W, got {s:?}")));
    }
    expect_shape("initial mask", &initial_mask.shape(), &[s[0], 1, s[2], s[3]])?;
    let x = Var::concat(&[image, initial_mask], 1);
    let out = cfg.modal().forward(&params.scope("modal."), x);
    Ok((out.mask, out.parsing, out.feature))
}

/// Completes the amodal mask from `F_m ⊕ M̂_m ⊕ template feature`.
pub fn amodal_forward<'g>(
    cfg: &Stage1Config,
    params: &Binding<'g>,
    feature: Var<'g>,
    soft_modal: Var<'g>,
    template_feature: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let s = feature.shape();
    expect_shape("feature", &s, &[s[0], cfg.base_channels, s[2], s[3]])?;
    expect_shape("refined modal", &soft_modal.shape(), &[s[0], 1, s[2], s[3]])?;
    expect_shape("template feature", &template_feature.shape(), &[s[0], 1, s[2], s[3]])?;
    let x = Var::concat(&[feature, soft_modal, template_feature], 1);
    let out = cfg.amodal().forward(&params.scope("amodal."), x);
    Ok((out.mask, out.parsing))
}

/// Both hourglasses with template attention in between.
pub fn stage1_forward<'g>(
    cfg: &Stage1Config,
    params: &Binding<'g>,
    templates: Var<'g>,
    image: Var<'g>,
    initial_mask: Var<'g>,
) -> Result<StageOneOutput<'g>> {
    let (refined_modal, modal_parsing, feature) = modal_forward(cfg, params, image, initial_mask)?;
    let s = image.shape();
    let tf = template_attention(&params.scope(""), refined_modal, templates, (s[2], s[3]));
    let (amodal, amodal_parsing) = amodal_forward(cfg, params, feature, refined_modal, tf)?;
    Ok(StageOneOutput {
        refined_modal,
        modal_parsing,
        amodal,
        amodal_parsing,
        feature,
    })
}

/// `M̂_a ∧ ¬M̂_m`: the region stage two has to paint.
pub fn invisible_mask(amodal: &BinaryMask, modal: &BinaryMask) -> Result<BinaryMask> {
    amodal.and_not(modal)
}

/// PatchGAN logits for a soft or binary mask batch.
pub fn mask_discriminator_forward<'g>(cfg: &Stage1Config, params: &Binding<'g>, mask: Var<'g>) -> Result<Var<'g>> {
    let d = cfg.discriminator();
    d.check_input(&mask.shape())?;
    Ok(d.forward(&params.scope(""), mask))
}

/// `λ1, λ2, λ3` of the stage-one objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Weights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.1,
        }
    }
}

fn check_coeff(name: &str, v: f64) -> Result<f64> {
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Config(format!("{name} must be a finite value ≥ 0, got {v}")));
    }
    Ok(v)
}

impl Stage1Weights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        Ok(Self {
            lambda1: check_coeff("lambda1", lambda1)?,
            lambda2: check_coeff("lambda2", lambda2)?,
            lambda3: check_coeff("lambda3", lambda3)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.lambda1, self.lambda2, self.lambda3).map(|_| ())
    }

    /// Weighted contributions `[λ1·seg, λ2·adv, λ3·gen]`.
    pub fn contributions(&self, seg: f64, adv: f64, gen: f64) -> [f64; 3] {
        [self.lambda1 * seg, self.lambda2 * adv, self.lambda3 * gen]
    }
}

/// Ground truths for one batch, all `N×C×H×W`.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Targets<'g> {
    pub modal: Var<'g>,
    pub amodal: Var<'g>,
    pub modal_parsing: Var<'g>,
    pub amodal_parsing: Var<'g>,
}

/// The stage-one objective on the graph.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Loss<'g> {
    pub seg: Var<'g>,
    pub adv: Var<'g>,
    pub gen: Var<'g>,
    pub total: Var<'g>,
}

/// Scalar view of a [`Stage1Loss`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Terms {
    pub seg: f64,
    pub adv: f64,
    pub gen: f64,
    pub contributions: [f64; 3],
    pub total: f64,
}

impl Stage1Loss<'_> {
    pub fn terms(&self, weights: &Stage1Weights) -> Stage1Terms {
        let (seg, adv, gen) = (self.seg.value().item(), self.adv.value().item(), self.gen.value().item());
        Stage1Terms {
            seg,
            adv,
            gen,
            contributions: weights.contributions(seg, adv, gen),
            total: self.total.value().item(),
        }
    }
}

/// `λ1·L_seg + λ2·L_adv + λ3·L_gen`.
///
/// `L_seg` sums binary CE on both mask heads and categorical CE on both
/// parsing heads; `L_adv` is the generator's term on `fake_logits`, the
/// discriminator's view of `M̂_a`; `L_gen = ℓ1(M̂_a, M_a) + L_prec(M̂_a, M_a)`.
pub fn stage1_loss<'g>(
    out: &StageOneOutput<'g>,
    gt: &Stage1Targets<'g>,
    fake_logits: Var<'g>,
    weights: &Stage1Weights,
    mode: AdversarialMode,
    embedding: &Embedding,
) -> Stage1Loss<'g> {
    let seg = losses::bce(out.refined_modal, gt.modal)
        + losses::bce(out.amodal, gt.amodal)
        + losses::categorical_ce(out.modal_parsing, gt.modal_parsing)
        + losses::categorical_ce(out.amodal_parsing, gt.amodal_parsing);
    let adv = losses::generator_adv_loss(fake_logits, mode);
    let gen = losses::l1(out.amodal, gt.amodal) + losses::perceptual(out.amodal, gt.amodal, embedding);
    let total = seg.scale(weights.lambda1) + adv.scale(weights.lambda2) + gen.scale(weights.lambda3);
    Stage1Loss { seg, adv, gen, total }
}
