use deocc_core::datagen::storage::{decode_image_png, decode_mask_png};
use deocc_core::datagen::{corrupt_modal_mask, synthesize_sample, SynthSpec};
use deocc_core::evalkit::iou;
use deocc_core::harness::{Checkpoint, TrainConfig};
use deocc_core::maskcomp::invisible_mask;
use deocc_core::recovery::composite;
use deocc_core::{BinaryMask, ImageTensor};
use proptest::prelude::*;

fn mask(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), h * w)
        .prop_map(move |bits| BinaryMask::new(h, w, bits.into_iter().map(u8::from).collect()).unwrap())
}

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1usize..10, 1usize..10).prop_flat_map(|(h, w)| (mask(h, w), mask(h, w)))
}

fn image(h: usize, w: usize) -> impl Strategy<Value = ImageTensor> {
    prop::collection::vec(0.0f64..=1.0, 3 * h * w).prop_map(move |d| ImageTensor::new(h, w, d).unwrap())
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded((a, b) in mask_pair()) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn invisible_mask_partitions_amodal((amodal, modal) in mask_pair()) {
        let inv = invisible_mask(&amodal, &modal).unwrap();
        prop_assert!(inv.is_subset_of(&amodal));
        prop_assert_eq!(inv.intersection_area(&modal), 0);
        let visible = amodal.and(&modal).unwrap();
        prop_assert_eq!(inv.area() + visible.area(), amodal.area());
    }

    #[test]
    fn composite_takes_input_exactly_where_visible(
        (rec, occ, vis) in (1usize..8, 1usize..8).prop_flat_map(|(h, w)| (image(h, w), image(h, w), mask(h, w)))
    ) {
        let out = composite(&rec, &occ, &vis).unwrap();
        for y in 0..vis.height() {
            for x in 0..vis.width() {
                let want = if vis.get(y, x) { occ.pixel(y, x) } else { rec.pixel(y, x) };
                prop_assert_eq!(out.pixel(y, x), want);
            }
        }
    }

    #[test]
    fn corruption_is_seeded_and_zero_severity_is_identity(
        m in (4usize..20, 4usize..20).prop_flat_map(|(h, w)| mask(h, w)),
        severity in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        prop_assert_eq!(corrupt_modal_mask(&m, 0.0, seed), m.clone());
        let a = corrupt_modal_mask(&m, severity, seed);
        prop_assert_eq!(&a, &corrupt_modal_mask(&m, severity, seed));
        prop_assert!(a.same_shape(&m));
    }

    #[test]
    fn checkpoint_decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = Checkpoint::decode(&bytes);
    }

    #[test]
    fn png_decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_mask_png(&bytes);
        let _ = decode_image_png(&bytes);
    }

    #[test]
    fn config_text_round_trips(
        seed in any::<u64>(),
        iters in 1usize..10_000,
        lr in 1e-6f64..1.0,
        w in 0.0f64..=1.0,
    ) {
        let mut cfg = TrainConfig::default();
        cfg.seed = seed;
        cfg.iterations = iters;
        cfg.mask_optimizer.lr = lr;
        cfg.background_weight = w;
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.fingerprint(), cfg.fingerprint());
        prop_assert_eq!(back.mask_optimizer.lr, lr);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthesized_samples_are_consistent(seed in any::<u64>(), index in 0usize..16) {
        let spec = SynthSpec::training((48, 48), 16, seed);
        let s = synthesize_sample(&spec, index).unwrap();
        s.validate().unwrap();
        prop_assert!(s.modal_mask.is_subset_of(&s.amodal_mask));
        prop_assert!(spec.distribution.bin_of(s.occlusion_ratio).is_some());
        for y in 0..s.height() {
            for x in 0..s.width() {
                if !s.occluder_mask.get(y, x) {
                    prop_assert_eq!(s.occluded_image.pixel(y, x), s.full_image.pixel(y, x));
                }
            }
        }
    }
}
