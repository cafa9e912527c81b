//! Finite-difference cases covering every differentiable component.

use deocc_core::losses::{
    bce, categorical_ce, discriminator_loss, generator_adv_loss, l1, perceptual, style, AdversarialMode, Embedding,
};
use deocc_core::maskcomp::{
    mask_discriminator_forward, modal_forward, stage1_forward, stage1_loss, template_attention, Stage1Config,
    Stage1Targets, Stage1Weights,
};
use deocc_core::recovery::{
    image_discriminator_forward, recovery_forward, stage2_loss, Assembly, PgaConfig, PgaGuide, RecoveryConfig,
    RecoveryInputs, Stage2Weights,
};
use deocc_tensor::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use deocc_tensor::{Binding, Graph, Init, ParamStore, Tensor, Var};

/// Maximum relative error accepted by the suite.
pub const GRAD_TOL: f64 = 1e-3;

/// Analytic gradients of `f` over every tensor in `store`, checked against
/// central differences.
pub fn check<F>(store: &ParamStore, f: F) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph, &Binding<'g>) -> Var<'g>,
{
    let g = Graph::new();
    let b = store.bind(&g, true);
    let loss = f(&g, &b);
    let grads = g.backward(loss);
    let analytic = b.gradients(&grads);
    assert_eq!(analytic.len(), store.len(), "every tensor should receive a gradient");
    let cfg = GradCheckConfig {
        samples_per_tensor: 6,
        // Central differences at step 1e-6 carry ~1e-9 of round-off on these
        // losses, so tensors whose gradient norm is below 1e-5 are judged on
        // an absolute error of 1e-8.
        abs_floor: 1e-5,
        ..GradCheckConfig::default()
    };
    check_gradients(store, &analytic, cfg, |s| {
        let g = Graph::new();
        let b = s.bind(&g, false);
        f(&g, &b).value().item()
    })
}

/// Projects `x` onto a fixed random tensor so every output entry matters.
fn project<'g>(g: &'g Graph, x: Var<'g>, seed: u64) -> Var<'g> {
    let r = Init::new(seed).uniform(x.shape(), -1.0, 1.0);
    (x * g.input(r)).sum()
}

fn one_hot(p: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let labels = Init::new(seed).uniform([h * w], 0.0, p as f64);
    let mut t = Tensor::zeros([1, p, h, w]);
    for (i, &l) in labels.data().iter().enumerate() {
        t.data_mut()[(l as usize).min(p - 1) * h * w + i] = 1.0;
    }
    t
}

fn binary(h: usize, w: usize, seed: u64, density: f64) -> Tensor {
    Init::new(seed).uniform([1, 1, h, w], 0.0, 1.0).map(|v| (v < density) as u8 as f64)
}

fn stage1_cfg() -> Stage1Config {
    Stage1Config {
        part_count: 3,
        depth: 2,
        base_channels: 3,
        disc_channels: 2,
    }
}

fn templates() -> Tensor {
    Init::new(90).uniform([1, 3, 8, 8], 0.0, 1.0)
}

fn hourglass_case() -> GradCheckReport {
    let cfg = stage1_cfg();
    let store = cfg.init_generator(3, 1).sub_store("modal.");
    let image = Init::new(2).uniform([1, 3, 16, 16], 0.0, 1.0);
    let mask = binary(16, 16, 3, 0.5);
    let mut wrapped = ParamStore::new();
    wrapped.merge_prefixed("modal.", store);
    check(&wrapped, |g, b| {
        let (m, p, f) = modal_forward(&cfg, b, g.input(image.clone()), g.input(mask.clone())).unwrap();
        project(g, m, 4) + project(g, p, 5) + project(g, f, 6)
    })
}

fn stage1_case() -> GradCheckReport {
    let cfg = stage1_cfg();
    let store = cfg.init_generator(3, 7);
    let image = Init::new(8).uniform([1, 3, 16, 16], 0.0, 1.0);
    let mask = binary(16, 16, 9, 0.5);
    let t = templates();
    check(&store, |g, b| {
        let out = stage1_forward(&cfg, b, g.input(t.clone()), g.input(image.clone()), g.input(mask.clone())).unwrap();
        project(g, out.amodal, 10) + project(g, out.amodal_parsing, 11) + project(g, out.refined_modal, 12)
    })
}

fn template_attention_case() -> GradCheckReport {
    let mut init = Init::new(13);
    let mut store = ParamStore::new();
    let (w, bias) = init.conv(1, 3, 1);
    store.insert("combine.w", w);
    store.insert("combine.b", bias);
    store.insert("modal", init.uniform([1, 1, 16, 16], 0.05, 0.95));
    store.insert("templates", templates());
    check(&store, |g, b| {
        let out = template_attention(&b.scope(""), b.var("modal"), b.var("templates"), (16, 16));
        project(g, out, 14)
    })
}

fn pga_case(body: bool, relation: bool, assembly: Assembly, seed: u64) -> GradCheckReport {
    let cfg = PgaConfig {
        channels: 3,
        part_count: 3,
        key_channels: 2,
        body,
        relation,
        assembly,
    };
    let mut store = cfg.init(seed);
    store.insert("x", Init::new(seed + 1).uniform([1, 3, 8, 8], -1.0, 1.0));
    let (mp, ap) = (one_hot(3, 8, 8, seed + 2), one_hot(3, 8, 8, seed + 3));
    let vis = binary(8, 8, seed + 4, 0.5);
    check(&store, |g, b| {
        let guide = PgaGuide {
            modal_parsing: g.input(mp.clone()),
            amodal_parsing: g.input(ap.clone()),
            visible: g.input(vis.clone()),
        };
        let out = cfg.forward(&b.scope(""), b.var("x"), &guide);
        project(g, out, seed + 5)
    })
}

fn recovery_cfg() -> RecoveryConfig {
    RecoveryConfig {
        part_count: 3,
        base_channels: 3,
        levels: 2,
        disc_channels: 2,
        pga_scales: 2,
        ..RecoveryConfig::default()
    }
}

struct Stage2Fixture {
    image: Tensor,
    visible: Tensor,
    amodal: Tensor,
    mp: Tensor,
    ap: Tensor,
}

fn stage2_fixture() -> Stage2Fixture {
    let amodal = binary(16, 16, 20, 0.7);
    let visible = amodal.zip_map(&binary(16, 16, 21, 0.6), |a, b| a * b);
    Stage2Fixture {
        image: Init::new(22).uniform([1, 3, 16, 16], 0.0, 1.0),
        visible,
        amodal,
        mp: one_hot(3, 16, 16, 23),
        ap: one_hot(3, 16, 16, 24),
    }
}

impl Stage2Fixture {
    fn inputs(&self) -> RecoveryInputs<'_> {
        RecoveryInputs {
            image: &self.image,
            visible: &self.visible,
            amodal: &self.amodal,
            modal_parsing: &self.mp,
            amodal_parsing: &self.ap,
        }
    }
}

fn pconv_net_case() -> GradCheckReport {
    let cfg = recovery_cfg();
    let mut store = cfg.init_generator(25);
    assert!(store.names().any(|n| n.starts_with("pga")), "the checked network should include attention");
    // Deeper key projections start with gradients near finite-difference
    // round-off; larger keys lift them clear of it.
    let keys: Vec<String> = store.names().filter(|n| n.contains(".phi.") || n.contains(".psi.")).map(String::from).collect();
    for k in keys {
        let t = store.get_mut(&k).unwrap();
        *t = t.map(|v| v * 8.0);
    }
    let fx = stage2_fixture();
    check(&store, |g, b| project(g, recovery_forward(&cfg, b, &fx.inputs()).unwrap(), 26))
}

fn input_store(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(*n, t.clone());
    }
    s
}

fn loss_cases() -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    let prob = Init::new(30).uniform([2, 1, 8, 8], 0.05, 0.95);
    let target = Init::new(31).uniform([2, 1, 8, 8], 0.0, 1.0).map(|v| (v > 0.5) as u8 as f64);
    out.push((
        "loss/bce".to_string(),
        check(&input_store(&[("p", prob.clone())]), |g, b| bce(b.var("p"), g.input(target.clone()))),
    ));
    let scores = Init::new(32).uniform([1, 3, 8, 8], -2.0, 2.0);
    let labels = one_hot(3, 8, 8, 33);
    out.push((
        "loss/categorical_ce".into(),
        check(&input_store(&[("s", scores)]), |g, b| categorical_ce(b.var("s"), g.input(labels.clone()))),
    ));
    let a = Init::new(34).uniform([1, 3, 8, 8], 0.0, 1.0);
    let c = Init::new(35).uniform([1, 3, 8, 8], 0.0, 1.0);
    out.push((
        "loss/l1".into(),
        check(&input_store(&[("a", a.clone())]), |g, b| l1(b.var("a"), g.input(c.clone()))),
    ));
    let real = Init::new(36).uniform([2, 1, 2, 2], -2.0, 2.0);
    let fake = Init::new(37).uniform([2, 1, 2, 2], -2.0, 2.0);
    out.push((
        "loss/discriminator".into(),
        check(&input_store(&[("r", real), ("f", fake.clone())]), |_, b| {
            discriminator_loss(b.var("r"), b.var("f"))
        }),
    ));
    for mode in [AdversarialMode::NonSaturating, AdversarialMode::Minimax] {
        out.push((
            format!("loss/generator_adv/{}", mode.as_str()),
            check(&input_store(&[("f", fake.clone())]), move |_, b| generator_adv_loss(b.var("f"), mode)),
        ));
    }
    let emb = Embedding::new(0);
    let x = Init::new(38).uniform([1, 3, 16, 16], 0.0, 1.0);
    let y = Init::new(39).uniform([1, 3, 16, 16], 0.0, 1.0);
    out.push((
        "loss/perceptual".into(),
        check(&input_store(&[("x", x.clone())]), |g, b| perceptual(b.var("x"), g.input(y.clone()), &emb)),
    ));
    out.push((
        "loss/style".into(),
        check(&input_store(&[("x", x.clone())]), |g, b| style(b.var("x"), g.input(y.clone()), &emb)),
    ));
    let m = Init::new(40).uniform([1, 1, 16, 16], 0.05, 0.95);
    out.push((
        "loss/perceptual_mask".into(),
        check(&input_store(&[("m", m)]), |g, b| perceptual(b.var("m"), g.input(binary(16, 16, 41, 0.5)), &emb)),
    ));

    // Full objectives, differentiated through the generators.
    let cfg = stage1_cfg();
    let gen = cfg.init_generator(3, 42);
    let disc = cfg.discriminator().init(43);
    let image = Init::new(44).uniform([1, 3, 16, 16], 0.0, 1.0);
    let initial = binary(16, 16, 45, 0.5);
    let t = templates();
    out.push((
        "loss/stage1_total".into(),
        check(&gen, |g, b| {
            let d = disc.bind(g, false);
            let o = stage1_forward(&cfg, b, g.input(t.clone()), g.input(image.clone()), g.input(initial.clone())).unwrap();
            let fake = mask_discriminator_forward(&cfg, &d, o.amodal).unwrap();
            let targets = Stage1Targets {
                modal: g.input(binary(16, 16, 46, 0.4)),
                amodal: g.input(binary(16, 16, 47, 0.6)),
                modal_parsing: g.input(one_hot(3, 16, 16, 48)),
                amodal_parsing: g.input(one_hot(3, 16, 16, 49)),
            };
            stage1_loss(&o, &targets, fake, &Stage1Weights::default(), AdversarialMode::NonSaturating, &emb).total
        }),
    ));
    let rcfg = recovery_cfg();
    let rgen = rcfg.init_generator(50);
    let rdisc = rcfg.discriminator().init(51);
    let fx = stage2_fixture();
    let full = Init::new(52).uniform([1, 3, 16, 16], 0.0, 1.0);
    out.push((
        "loss/stage2_total".into(),
        check(&rgen, |g, b| {
            let d = rdisc.bind(g, false);
            let rec = recovery_forward(&rcfg, b, &fx.inputs()).unwrap();
            let fake = image_discriminator_forward(&rcfg, &d, rec).unwrap();
            stage2_loss(rec, g.input(full.clone()), fake, &Stage2Weights::default(), AdversarialMode::NonSaturating, &emb)
                .total
        }),
    ));
    out.push((
        "discriminator/patch".into(),
        check(&rdisc, |g, b| {
            let real = image_discriminator_forward(&rcfg, b, g.input(full.clone())).unwrap();
            let fake = image_discriminator_forward(&rcfg, b, g.input(fx.image.clone())).unwrap();
            discriminator_loss(real, fake)
        }),
    ));
    out
}

/// Every named case with its report.
pub fn all_cases() -> Vec<(String, GradCheckReport)> {
    let mut out = vec![
        ("stage1/modal_hourglass".to_string(), hourglass_case()),
        ("stage1/full_forward".into(), stage1_case()),
        ("stage1/template_attention".into(), template_attention_case()),
        ("pga/body".into(), pga_case(true, false, Assembly::Fusion, 60)),
        ("pga/relation".into(), pga_case(false, true, Assembly::Fusion, 70)),
        ("pga/fusion".into(), pga_case(true, true, Assembly::Fusion, 80)),
        ("pga/cascade".into(), pga_case(true, true, Assembly::Cascade, 90)),
        ("stage2/pconv_network".into(), pconv_net_case()),
    ];
    out.extend(loss_cases());
    out
}
