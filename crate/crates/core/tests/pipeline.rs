use deocc_core::datagen::{load_dataset, save_dataset, synthesize_sample, synthesize_split, Split, SynthSpec};
use deocc_core::harness::{init_stage1, init_stage2, Checkpoint, Stage1Batch, Stage2Batch, TrainConfig};
use deocc_core::maskcomp::Stage1Model;
use deocc_core::recovery::RecoveryModel;

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    for kv in [
        "canvas_height=32",
        "canvas_width=32",
        "train_humans=4",
        "templates=2",
        "template_size=16",
        "hg_channels=4",
        "disc_channels=4",
        "rec_channels=4",
        "rec_levels=2",
        "pga_scales=1",
    ] {
        cfg.set_pair(kv).unwrap();
    }
    cfg
}

#[test]
fn validation_split_is_reproducible() {
    let spec = SynthSpec::validation((48, 48), 11);
    let a = synthesize_split(&spec).unwrap();
    assert_eq!(a.len(), 297 * 3);
    for i in [0, 1, 2, 445, 890] {
        assert_eq!(synthesize_sample(&spec, i).unwrap(), a[i], "sample {i}");
    }
    let b = synthesize_split(&spec).unwrap();
    assert!(a == b, "replayed split differs");
    // Three occluders share each human.
    assert_eq!(a[3].full_image, a[5].full_image);
    assert_ne!(a[0].full_image, a[3].full_image);
    assert!(a.iter().all(|s| s.split == Split::Val));
}

#[test]
fn checkpoints_reproduce_predictions_bit_exactly() {
    let cfg = small_config();
    let samples = synthesize_split(&cfg.synth_spec(Split::Train)).unwrap();
    let refs: Vec<_> = samples.iter().collect();

    let s1 = init_stage1(&cfg, &samples).unwrap();
    let back = Stage1Model::from_checkpoint(&Checkpoint::decode(&s1.to_checkpoint().encode()).unwrap()).unwrap();
    let b1 = Stage1Batch::new(&refs);
    let (p, q) = (
        s1.predict(&b1.image, &b1.initial_mask).unwrap(),
        back.predict(&b1.image, &b1.initial_mask).unwrap(),
    );
    for (x, y) in [(&p.amodal, &q.amodal), (&p.refined_modal, &q.refined_modal), (&p.amodal_parsing, &q.amodal_parsing)] {
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    let s2 = init_stage2(&cfg).unwrap();
    let back = RecoveryModel::from_checkpoint(&Checkpoint::decode(&s2.to_checkpoint().encode()).unwrap()).unwrap();
    let b2 = Stage2Batch::new(&refs);
    let (p, q) = (s2.predict(&b2.inputs()).unwrap(), back.predict(&b2.inputs()).unwrap());
    assert!(p.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn datasets_survive_disk() {
    let spec = SynthSpec::training((32, 32), 3, 5);
    let samples = synthesize_split(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&samples, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), samples.len());
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.modal_mask, b.modal_mask);
        assert_eq!(a.amodal_mask, b.amodal_mask);
        assert_eq!(a.amodal_parsing, b.amodal_parsing);
        assert_eq!(a.occlusion_ratio, b.occlusion_ratio);
        // Images go through 8-bit PNG.
        for (x, y) in a.occluded_image.data().iter().zip(b.occluded_image.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
