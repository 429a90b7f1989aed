//! Model-level properties: output layout, the D/C relationship under severed fusion, and loss
//! switching on pose-stripped data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shaftpose::datagen::{generate_dataset, Dataset, GenerationConfig};
use shaftpose::detector::{
    build_targets, images_to_tensor, is_pose_branch_param, total_loss, Detector, DetectorConfig,
    GroundTruth, LossConfig, Variant,
};
use shaftpose::geometry::PoseRanges;
use shaftpose::gradsuite::{random_tensor, tiny_detector_config};
use shaftpose::nn::{zero_grads, HasParams, Mode, Tensor};

fn model<T: shaftpose::nn::Scalar>(config: &DetectorConfig, seed: u64) -> Detector<T> {
    Detector::new(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn output_maps_follow_anchor_layout_and_pose_is_bounded() {
    for variant in [Variant::C, Variant::D] {
        let config = DetectorConfig {
            variant,
            ..DetectorConfig::default()
        };
        let mut m = model::<f32>(&config, 1);
        let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(2), &[2, 64, 64, 3]).cast::<f32>();
        let out = m.forward(&x, Mode::Eval).unwrap();
        let n = config.anchors.boxes_per_location();
        assert_eq!(n, 4);
        for (lv, &s) in out.levels.iter().zip(&config.level_sizes) {
            assert_eq!(lv.cls.shape(), [2, s, s, 2 * n]);
            assert_eq!(lv.boxes.shape(), [2, s, s, 4 * n]);
            assert_eq!(lv.pose.shape(), [2, s, s, 5 * n]);
            assert!(lv.pose.data().iter().all(|v| v.abs() < 1.0));
        }
    }
}

#[test]
fn input_size_mismatch_is_an_error() {
    let mut m = model::<f32>(&DetectorConfig::default(), 1);
    assert!(m.forward(&Tensor::zeros(&[1, 32, 32, 3]), Mode::Eval).is_err());
}

/// Copies C's weights into D (D's pose input weights get C's feature rows, zeros elsewhere).
/// The two networks must then compute the same maps.
#[test]
fn severed_fusion_reproduces_variant_c() {
    let cc = tiny_detector_config(Variant::C);
    let cd = tiny_detector_config(Variant::D);
    let mut c = model::<f64>(&cc, 5);
    let mut d = model::<f64>(&cd, 6);
    {
        let mut pc = Vec::new();
        c.named_params("", &mut pc);
        let mut pd = Vec::new();
        d.named_params("", &mut pd);
        assert_eq!(pc.len(), pd.len());
        for ((nc, src), (nd, dst)) in pc.into_iter().zip(pd) {
            assert_eq!(nc, nd);
            if src.value.shape() == dst.value.shape() {
                dst.value = src.value.clone();
                continue;
            }
            // [k, k, c_in, c_out] with C's inputs being the leading channels of D's
            let (ci_c, ci_d, co) = (src.value.shape()[2], dst.value.shape()[2], src.value.shape()[3]);
            let taps = src.value.shape()[0] * src.value.shape()[1];
            dst.value.fill(f64::NAN);
            for t in 0..taps {
                for i in 0..ci_c {
                    for o in 0..co {
                        dst.value.data_mut()[(t * ci_d + i) * co + o] =
                            src.value.data()[(t * ci_c + i) * co + o];
                    }
                }
            }
        }
    }
    d.sever_fusion();
    let mut pd = Vec::new();
    d.named_params("", &mut pd);
    assert!(pd.iter().all(|(_, p)| p.value.data().iter().all(|v| v.is_finite())));

    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(7), &[2, 16, 16, 3]);
    for mode in [Mode::Train, Mode::Eval] {
        let oc = c.forward(&x, mode).unwrap();
        let od = d.forward(&x, mode).unwrap();
        for (a, b) in oc.levels.iter().zip(&od.levels) {
            assert_eq!(a.cls, b.cls);
            assert_eq!(a.boxes, b.boxes);
            assert_eq!(a.pose.shape(), b.pose.shape());
            for (u, v) in a.pose.data().iter().zip(b.pose.data()) {
                assert!((u - v).abs() < 1e-12, "{u} vs {v}");
            }
        }
    }
}

fn stripped_batch(config: &DetectorConfig) -> (Dataset, Vec<shaftpose::detector::ImageTargets>) {
    let gen = GenerationConfig {
        fraction_pose_stripped: 1.0,
        ..GenerationConfig::default()
    };
    let ds = Dataset::from_samples(generate_dataset(11, 0, 4, &gen).unwrap());
    let anchors = config.build_anchors().unwrap();
    let targets = ds
        .records
        .iter()
        .map(|r| {
            build_targets(&anchors, &GroundTruth::from_record(r).unwrap(), &PoseRanges::default(), 0.5)
                .unwrap()
        })
        .collect();
    (ds, targets)
}

#[test]
fn pose_unlabeled_batch_gives_exactly_zero_pose_gradient() {
    for variant in [Variant::C, Variant::D] {
        let config = DetectorConfig {
            variant,
            ..DetectorConfig::default()
        };
        let (ds, targets) = stripped_batch(&config);
        assert!(targets.iter().all(|t| !t.pose_labeled && !t.positives.is_empty()));
        let mut m = model::<f32>(&config, 9);
        let imgs: Vec<_> = ds.images.iter().collect();
        let x = images_to_tensor(&imgs, 64).unwrap();
        zero_grads(&mut m);
        let out = m.forward(&x, Mode::Train).unwrap();
        let anchors = config.build_anchors().unwrap();
        let (loss, grads) = total_loss(&out, &anchors, &targets, &LossConfig::default()).unwrap();
        assert_eq!(loss.pose, 0.0);
        m.backward(&grads).unwrap();
        let mut params = Vec::new();
        m.named_params("", &mut params);
        let mut pose_params = 0;
        let (mut cls_moved, mut box_moved, mut stem_moved) = (false, false, false);
        for (name, p) in &params {
            let nonzero = p.grad.data().iter().any(|&g| g != 0.0);
            if is_pose_branch_param(name) {
                pose_params += 1;
                assert!(!nonzero, "{variant:?} {name} has gradient");
            }
            // levels without a matched anchor legitimately get no box gradient
            cls_moved |= name.contains(".cls.") && nonzero;
            box_moved |= name.contains(".box.") && nonzero;
            stem_moved |= name.starts_with("stem") && nonzero;
        }
        assert!(cls_moved && box_moved && stem_moved, "{variant:?}");
        // pose_in conv (2) + batchnorm (2) + pose_out conv (2) per level
        assert_eq!(pose_params, 6 * config.level_sizes.len());
    }
}
