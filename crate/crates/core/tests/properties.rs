use distill_core::checkpoint::{decode, encode, CheckpointMeta};
use distill_core::data::{batch_indices, resize_image, synth_blobs, SynthSpec};
use distill_core::layers::{Layer, LayerSpec, Mode};
use distill_core::loss::{kd_loss, KdLossConfig, OneHotLabels};
use distill_core::metrics::{auc_pairwise_oracle, auc_trapezoid, confusion, f1, precision, recall, roc_curve};
use distill_core::optim::{Adam, AdamConfig};
use distill_core::softmax::{argmax, entropy, softmax_with_temperature, Logits};
use distill_core::tensor::Fill;
use distill_core::{ExperimentConfig, Model, ModelConfig, RngState, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;

fn logits_of(rows: &[Vec<f64>]) -> Logits {
    let classes = rows[0].len();
    let data = rows.iter().flatten().copied().collect();
    Logits::new(Tensor::from_vec(&[rows.len(), classes], data).unwrap()).unwrap()
}

fn row(classes: std::ops::Range<usize>, bound: f64) -> impl Strategy<Value = Vec<f64>> {
    vec(-bound..bound, classes)
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    (2usize..=200).prop_flat_map(|n| {
        let coarse = prop_oneof![Just(0u32), 1u32..8];
        (vec(0.0..=1.0f64, n), vec(0usize..2, n), coarse).prop_map(|(scores, mut labels, levels)| {
            labels[0] = 0;
            labels[1] = 1;
            let scores = if levels == 0 {
                scores
            } else {
                scores.iter().map(|s| (s * f64::from(levels)).round() / f64::from(levels)).collect()
            };
            (scores, labels)
        })
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(a in row(2..8, 1e3), log_t in -3.0..3.0f64) {
        let p = softmax_with_temperature(&logits_of(&[a]), 10f64.powf(log_t)).unwrap();
        prop_assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn softmax_keeps_a_unique_argmax(a in row(2..8, 50.0), log_t in -3.0..3.0f64) {
        let mut sorted = a.clone();
        sorted.sort_by(|x, y| y.total_cmp(x));
        prop_assume!(sorted[0] > sorted[1]);
        let p = softmax_with_temperature(&logits_of(std::slice::from_ref(&a)), 10f64.powf(log_t)).unwrap();
        prop_assert_eq!(argmax(p.row(0)), argmax(&a));
    }

    #[test]
    fn softmax_ignores_constant_shifts(a in row(2..8, 10.0), c in -10.0..10.0f64, log_t in -2.0..3.0f64) {
        let t = 10f64.powf(log_t);
        let shifted: Vec<f64> = a.iter().map(|v| v + c).collect();
        let p = softmax_with_temperature(&logits_of(&[a]), t).unwrap();
        let q = softmax_with_temperature(&logits_of(&[shifted]), t).unwrap();
        for (x, y) in p.row(0).iter().zip(q.row(0)) {
            prop_assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn entropy_grows_with_temperature(a in row(2..8, 20.0), t1 in 0.01..50.0f64, t2 in 0.01..50.0f64) {
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let z = logits_of(&[a]);
        let h_lo = entropy(softmax_with_temperature(&z, lo).unwrap().row(0));
        let h_hi = entropy(softmax_with_temperature(&z, hi).unwrap().row(0));
        prop_assert!(h_lo <= h_hi + 1e-12, "{h_lo} at T = {lo} vs {h_hi} at T = {hi}");
    }

    #[test]
    fn huge_temperature_is_uniform(a in row(2..8, 10.0)) {
        let k = a.len() as f64;
        let p = softmax_with_temperature(&logits_of(&[a]), 1e6).unwrap();
        prop_assert!(p.row(0).iter().all(|q| (q - 1.0 / k).abs() <= 1e-5));
    }

    #[test]
    fn kd_loss_is_affine_in_alpha_and_nonnegative(
        pair in (2usize..6).prop_flat_map(|k| (vec(row(k..k + 1, 10.0), 1..5), 0.0..1.0f64)).prop_flat_map(|(student, alpha)| {
            let (rows, k) = (student.len(), student[0].len());
            (Just(student), vec(row(k..k + 1, 10.0), rows), vec(0..k, rows), Just(alpha))
        }),
        temperature in 0.5..100.0f64,
    ) {
        let (student, teacher, labels, alpha) = pair;
        let classes = student[0].len();
        let (student, teacher) = (logits_of(&student), logits_of(&teacher));
        let labels = OneHotLabels::from_indices(&labels, classes).unwrap();
        let at = |alpha: f64| kd_loss(&student, &teacher, &labels, &KdLossConfig { alpha, temperature, ..KdLossConfig::default() }).unwrap();
        let (mid, one, zero) = (at(alpha), at(1.0), at(0.0));
        prop_assert!((mid.loss - (alpha * one.loss + (1.0 - alpha) * zero.loss)).abs() <= 1e-9);
        prop_assert!(mid.hard >= 0.0 && mid.soft >= 0.0);
    }

    #[test]
    fn adam_first_step_opposes_the_gradient(grad in vec(-5.0..5.0f64, 1..20), lr in 1e-4..1e-1f64) {
        let mut adam = Adam::new(AdamConfig { lr, ..AdamConfig::default() }).unwrap();
        let n = grad.len();
        let mut value = Tensor::zeros(&[n]).unwrap();
        let g = Tensor::from_vec(&[n], grad.clone()).unwrap();
        adam.step([("w", &mut value, &g)]).unwrap();
        for (theta, gi) in value.data().iter().zip(&grad) {
            if *gi != 0.0 {
                prop_assert_eq!(theta.signum(), -gi.signum());
            }
        }
    }

    #[test]
    fn trapezoid_auc_matches_pairwise_oracle((scores, labels) in scored_labels()) {
        let trapezoid = auc_trapezoid(&roc_curve(&scores, &labels, 1).unwrap());
        let oracle = auc_pairwise_oracle(&scores, &labels, 1).unwrap();
        prop_assert!((trapezoid - oracle).abs() <= 1e-12, "{trapezoid} vs {oracle}");
    }

    #[test]
    fn auc_survives_flipping_labels_and_scores((scores, labels) in scored_labels()) {
        let auc = auc_trapezoid(&roc_curve(&scores, &labels, 1).unwrap());
        let flipped_scores: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        let flipped_labels: Vec<usize> = labels.iter().map(|y| 1 - y).collect();
        let flipped = auc_trapezoid(&roc_curve(&flipped_scores, &flipped_labels, 1).unwrap());
        prop_assert!((auc - flipped).abs() <= 1e-12, "{auc} vs {flipped}");
    }

    #[test]
    fn metrics_are_bounded_and_f1_is_harmonic(pairs in vec((0usize..2, 0usize..2), 1..100)) {
        let (predicted, actual): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let cm = confusion(&predicted, &actual, 1).unwrap();
        let (p, r, f) = (precision(&cm), recall(&cm), f1(&cm));
        for m in [p, r, f] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
        let expected = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        prop_assert!((f - expected).abs() <= 1e-12);
    }

    #[test]
    fn batches_partition_the_dataset(n in 1usize..300, batch in 1usize..100, seed in any::<u64>(), epoch in 0u64..50) {
        let batches = batch_indices(n, batch, seed, epoch, true).unwrap();
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= batch));
    }

    #[test]
    fn zeroed_residual_block_is_relu(channels in 1usize..4, side in 2usize..6, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let mut block = Layer::new(LayerSpec::ResidualBlock { channels, kernel: 3 }, &mut rng).unwrap();
        for (_, p) in block.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::create(&[2, side, side, channels], Fill::Normal { mean: 0.0, std: 1.0, rng: &mut rng }).unwrap();
        let y = block.forward(&x, Mode::Eval, None).unwrap();
        prop_assert_eq!(y, x.max_with(0.0).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn inference_rows_do_not_depend_on_the_batch(seed in any::<u64>(), rows in 1usize..5) {
        let mut rng = RngState::new(seed);
        let model = Model::build(&ModelConfig::dsnet_desk(), &mut rng).unwrap();
        let images = Tensor::create(&[rows, 16, 16, 1], Fill::Uniform { lo: 0.0, hi: 1.0, rng: &mut rng }).unwrap();
        let batched = model.infer(&images).unwrap();
        for i in 0..rows {
            let single = model.infer(&images.slice_rows(i, i + 1).unwrap()).unwrap();
            let bits = |r: &[f64]| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(single.row(0)), bits(batched.row(i)));
        }
    }

    #[test]
    fn checkpoints_roundtrip_bitwise(seed in any::<u64>(), widths in vec(1usize..6, 3), blocks in 1usize..4, teacher in any::<bool>()) {
        let cfg = if teacher {
            ModelConfig { conv_widths: widths[..1].to_vec(), residual_blocks: blocks, ..ModelConfig::teacher_desk() }
        } else {
            ModelConfig { conv_widths: widths, ..ModelConfig::dsnet_desk() }
        };
        let model = Model::build(&cfg, &mut RngState::new(seed)).unwrap();
        let meta = CheckpointMeta { epochs: 3, seed, config_hash: "abc".into() };
        let bytes = encode(&model, &meta);
        let (loaded, loaded_meta) = decode(&bytes).unwrap();
        prop_assert_eq!(loaded_meta, meta.clone());
        prop_assert_eq!(encode(&loaded, &meta), bytes);
    }

    #[test]
    fn synthetic_pixels_stay_in_unit_range(seed in any::<u64>(), noise in 0.0..1.0f64, size in 4usize..20, out in 1usize..24) {
        let ds = synth_blobs(&SynthSpec::new(3, size, noise, seed)).unwrap();
        prop_assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let first = ds.images.slice_rows(0, 1).unwrap().reshape(&[size, size, 1]).unwrap();
        let resized = resize_image(&first, out, out + 1).unwrap();
        prop_assert!(resized.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn experiment_config_roundtrips(seed in any::<u64>(), batch in 1usize..200, alpha in 0.0..=1.0f64, t in 0.1..100.0f64) {
        let cfg = ExperimentConfig::load(None, &[
            format!("seed={seed}"),
            format!("batch_size={batch}"),
            format!("distill.alpha={alpha}"),
            format!("distill.temperature={t}"),
        ]).unwrap();
        prop_assert_eq!(ExperimentConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }
}
