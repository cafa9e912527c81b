//! Alternating generator/discriminator training for both stages.

use deocc_tensor::{Adam, Graph, Optimizer, ParamStore, Sgd, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{OptimizerConfig, OptimizerKind, ParsingSource, TrainConfig};
use crate::datagen::{derive_seed, OcclusionSample};
use crate::error::{Error, Result};
use crate::losses::{discriminator_loss, Embedding, EMBEDDING_SEED};
use crate::maskcomp::{
    build_template_bank, mask_discriminator_forward, stage1_forward, stage1_loss, Stage1Model, Stage1Targets,
    Stage1Terms, TemplateBank,
};
use crate::recovery::{
    image_discriminator_forward, recovery_forward, stage2_loss, RecoveryInputs, RecoveryModel, Stage2Terms,
};
use crate::types::{stack, ParsingLogits};

pub fn make_optimizer(o: &OptimizerConfig) -> Box<dyn Optimizer> {
    match o.kind {
        OptimizerKind::Sgd => Box::new(Sgd::new(o.lr, o.momentum)),
        OptimizerKind::Adam => Box::new(Adam::new(o.lr, o.beta1, o.beta2)),
    }
}

/// Stage-one tensors for a set of samples, stacked along the batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Batch {
    pub image: Tensor,
    pub initial_mask: Tensor,
    pub modal: Tensor,
    pub amodal: Tensor,
    pub modal_parsing: Tensor,
    pub amodal_parsing: Tensor,
}

impl Stage1Batch {
    pub fn new(samples: &[&OcclusionSample]) -> Self {
        let col = |f: &dyn Fn(&OcclusionSample) -> Tensor| stack(&samples.iter().map(|s| f(s)).collect::<Vec<_>>());
        Self {
            image: col(&|s| s.occluded_image.to_tensor()),
            initial_mask: col(&|s| s.initial_mask.to_tensor()),
            modal: col(&|s| s.modal_mask.to_tensor()),
            amodal: col(&|s| s.amodal_mask.to_tensor()),
            modal_parsing: col(&|s| s.modal_parsing.to_tensor()),
            amodal_parsing: col(&|s| s.amodal_parsing.to_tensor()),
        }
    }
}

/// Stage-two tensors; `visible` is the ground-truth modal mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Batch {
    pub image: Tensor,
    pub full: Tensor,
    pub visible: Tensor,
    pub amodal: Tensor,
    pub modal_parsing: Tensor,
    pub amodal_parsing: Tensor,
}

impl Stage2Batch {
    pub fn new(samples: &[&OcclusionSample]) -> Self {
        let col = |f: &dyn Fn(&OcclusionSample) -> Tensor| stack(&samples.iter().map(|s| f(s)).collect::<Vec<_>>());
        Self {
            image: col(&|s| s.occluded_image.to_tensor()),
            full: col(&|s| s.full_image.to_tensor()),
            visible: col(&|s| s.modal_mask.to_tensor()),
            amodal: col(&|s| s.amodal_mask.to_tensor()),
            modal_parsing: col(&|s| s.modal_parsing.to_tensor()),
            amodal_parsing: col(&|s| s.amodal_parsing.to_tensor()),
        }
    }

    pub fn inputs(&self) -> RecoveryInputs<'_> {
        RecoveryInputs {
            image: &self.image,
            visible: &self.visible,
            amodal: &self.amodal,
            modal_parsing: &self.modal_parsing,
            amodal_parsing: &self.amodal_parsing,
        }
    }

    /// Swaps the parsing guides for stage-one predictions (argmax one-hot).
    pub fn use_predicted_parsing(&mut self, stage1: &Stage1Model, samples: &[&OcclusionSample]) -> Result<()> {
        let b1 = Stage1Batch::new(samples);
        let pred = stage1.predict(&b1.image, &b1.initial_mask)?;
        let onehot = |scores: &Tensor| -> Result<Tensor> {
            let per: Vec<Tensor> = (0..samples.len())
                .map(|n| ParsingLogits::from_scores(scores, n).map(|p| p.to_tensor()))
                .collect::<Result<_>>()?;
            Ok(stack(&per))
        };
        self.modal_parsing = onehot(&pred.modal_parsing)?;
        self.amodal_parsing = onehot(&pred.amodal_parsing)?;
        Ok(())
    }
}

/// Deterministic epoch-shuffled minibatches.
struct Batches {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl Batches {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            n,
            batch: batch.min(n),
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: n,
        }
    }

    fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.cursor >= self.n {
                self.order = (0..self.n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[self.epoch]));
                self.order.shuffle(&mut rng);
                self.epoch += 1;
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn check_finite(what: &str, store: &ParamStore) -> Result<()> {
    if store.all_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} parameters became non-finite")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub iteration: usize,
    pub generator: Stage1Terms,
    pub discriminator: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Record {
    pub iteration: usize,
    pub generator: Stage2Terms,
    pub discriminator: f64,
}

/// Clusters the training amodal masks into the configured template bank.
pub fn template_bank_for(cfg: &TrainConfig, samples: &[OcclusionSample]) -> Result<TemplateBank> {
    let masks: Vec<_> = samples.iter().map(|s| s.amodal_mask.clone()).collect();
    let (bank, fit) = build_template_bank(
        &masks,
        cfg.templates,
        (cfg.template_size, cfg.template_size),
        derive_seed(cfg.seed, &[20]),
    )?;
    log::info!(
        "template bank: k = {}, {} Lloyd iterations, objective {:.4}",
        bank.len(),
        fit.history.len(),
        fit.objective()
    );
    Ok(bank)
}

/// A freshly initialised stage-one model for `cfg`.
pub fn init_stage1(cfg: &TrainConfig, samples: &[OcclusionSample]) -> Result<Stage1Model> {
    Ok(Stage1Model::new(
        cfg.stage1_config(),
        template_bank_for(cfg, samples)?,
        derive_seed(cfg.seed, &[21]),
    ))
}

pub fn init_stage2(cfg: &TrainConfig) -> Result<RecoveryModel> {
    RecoveryModel::new(cfg.recovery_config(), derive_seed(cfg.seed, &[22]))
}

/// Trains stage one for `cfg.iterations` steps.
///
/// `observe` sees every record and the updated model; returning `false`
/// stops training early.
pub fn train_stage1(
    cfg: &TrainConfig,
    samples: &[OcclusionSample],
    mut model: Stage1Model,
    mut observe: impl FnMut(&Stage1Record, &Stage1Model) -> bool,
) -> Result<(Stage1Model, Vec<Stage1Record>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Validation("no training samples".into()));
    }
    let weights = cfg.stage1_weights()?;
    let embedding = Embedding::new(EMBEDDING_SEED);
    let mut opt_g = make_optimizer(&cfg.mask_optimizer);
    let mut opt_d = make_optimizer(&cfg.mask_optimizer);
    let mut batches = Batches::new(samples.len(), cfg.batch_size, derive_seed(cfg.seed, &[23]));
    let templates = model.bank.to_tensor();
    let mut history = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let chosen: Vec<&OcclusionSample> = batches.next_indices().into_iter().map(|i| &samples[i]).collect();
        let batch = Stage1Batch::new(&chosen);
        let lr = cfg.lr_at(cfg.mask_optimizer.lr, iteration);
        opt_g.set_lr(lr);
        opt_d.set_lr(lr);

        let (terms, fake) = {
            let g = Graph::new();
            let gen = model.generator.bind(&g, true);
            let disc = model.discriminator.bind(&g, false);
            let out = stage1_forward(
                &model.config,
                &gen,
                g.input(templates.clone()),
                g.input(batch.image.clone()),
                g.input(batch.initial_mask.clone()),
            )?;
            let fake_logits = mask_discriminator_forward(&model.config, &disc, out.amodal)?;
            let targets = Stage1Targets {
                modal: g.input(batch.modal.clone()),
                amodal: g.input(batch.amodal.clone()),
                modal_parsing: g.input(batch.modal_parsing.clone()),
                amodal_parsing: g.input(batch.amodal_parsing.clone()),
            };
            let loss = stage1_loss(&out, &targets, fake_logits, &weights, cfg.adversarial, &embedding);
            let grads = g.backward(loss.total);
            opt_g.step(&mut model.generator, &gen.gradients(&grads));
            (loss.terms(&weights), (*out.amodal.value()).clone())
        };
        check_finite("stage-one generator", &model.generator)?;

        let d_loss = {
            let g = Graph::new();
            let disc = model.discriminator.bind(&g, true);
            let real = mask_discriminator_forward(&model.config, &disc, g.input(batch.amodal.clone()))?;
            let fake = mask_discriminator_forward(&model.config, &disc, g.input(fake))?;
            let loss = discriminator_loss(real, fake);
            let grads = g.backward(loss);
            opt_d.step(&mut model.discriminator, &disc.gradients(&grads));
            loss.value().item()
        };
        check_finite("stage-one discriminator", &model.discriminator)?;

        let record = Stage1Record {
            iteration,
            generator: terms,
            discriminator: d_loss,
        };
        if cfg.log_every > 0 && iteration % cfg.log_every == 0 {
            log::info!(
                "stage1 it {iteration}: total {:.4} seg {:.4} adv {:.4} gen {:.4} d {:.4}",
                terms.total,
                terms.seg,
                terms.adv,
                terms.gen,
                d_loss
            );
        }
        history.push(record);
        if !observe(&record, &model) {
            break;
        }
    }
    Ok((model, history))
}

/// Trains stage two for `cfg.iterations` steps.
///
/// With [`ParsingSource::Predicted`] the parsing guides come from `stage1`,
/// which must then be supplied.
pub fn train_stage2(
    cfg: &TrainConfig,
    samples: &[OcclusionSample],
    mut model: RecoveryModel,
    stage1: Option<&Stage1Model>,
    mut observe: impl FnMut(&Stage2Record, &RecoveryModel) -> bool,
) -> Result<(RecoveryModel, Vec<Stage2Record>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Validation("no training samples".into()));
    }
    let predicted = match (cfg.recover_parsing, stage1) {
        (ParsingSource::GroundTruth, _) => None,
        (ParsingSource::Predicted, Some(m)) => Some(m),
        (ParsingSource::Predicted, None) => {
            return Err(Error::Config("recover_parsing = predicted needs a stage-one checkpoint".into()))
        }
    };
    let weights = cfg.stage2_weights()?;
    let embedding = Embedding::new(EMBEDDING_SEED);
    let mut opt_g = make_optimizer(&cfg.recover_optimizer);
    let mut opt_d = make_optimizer(&cfg.recover_optimizer);
    let mut batches = Batches::new(samples.len(), cfg.batch_size, derive_seed(cfg.seed, &[24]));
    let mut history = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let chosen: Vec<&OcclusionSample> = batches.next_indices().into_iter().map(|i| &samples[i]).collect();
        let mut batch = Stage2Batch::new(&chosen);
        let lr = cfg.lr_at(cfg.recover_optimizer.lr, iteration);
        opt_g.set_lr(lr);
        opt_d.set_lr(lr);
        if let Some(m) = predicted {
            batch.use_predicted_parsing(m, &chosen)?;
        }

        let (terms, fake) = {
            let g = Graph::new();
            let gen = model.generator.bind(&g, true);
            let disc = model.discriminator.bind(&g, false);
            let out = recovery_forward(&model.config, &gen, &batch.inputs())?;
            let fake_logits = image_discriminator_forward(&model.config, &disc, out)?;
            let loss = stage2_loss(
                out,
                g.input(batch.full.clone()),
                fake_logits,
                &weights,
                cfg.adversarial,
                &embedding,
            );
            let grads = g.backward(loss.total);
            opt_g.step(&mut model.generator, &gen.gradients(&grads));
            (loss.terms(&weights), (*out.value()).clone())
        };
        check_finite("stage-two generator", &model.generator)?;

        let d_loss = {
            let g = Graph::new();
            let disc = model.discriminator.bind(&g, true);
            let real = image_discriminator_forward(&model.config, &disc, g.input(batch.full.clone()))?;
            let fake = image_discriminator_forward(&model.config, &disc, g.input(fake))?;
            let loss = discriminator_loss(real, fake);
            let grads = g.backward(loss);
            opt_d.step(&mut model.discriminator, &disc.gradients(&grads));
            loss.value().item()
        };
        check_finite("stage-two discriminator", &model.discriminator)?;

        let record = Stage2Record {
            iteration,
            generator: terms,
            discriminator: d_loss,
        };
        if cfg.log_every > 0 && iteration % cfg.log_every == 0 {
            log::info!(
                "stage2 it {iteration}: total {:.4} adv {:.4} l1 {:.4} prec {:.4} style {:.4} d {:.4}",
                terms.total,
                terms.adv,
                terms.l1,
                terms.perceptual,
                terms.style,
                d_loss
            );
        }
        history.push(record);
        if !observe(&record, &model) {
            break;
        }
    }
    Ok((model, history))
}
