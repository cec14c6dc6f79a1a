use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toot_core::masking::{mask_pair, normalize_mask, GridPoint, LayerMask, Polarity};
use toot_core::nn::*;

fn random_image(side: usize, seed: u64) -> InputImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    InputImage::new(
        side,
        (0..3 * side * side).map(|_| rng.gen::<f32>()).collect(),
    )
    .unwrap()
}

fn small_arch() -> ArchConfig {
    ArchConfig {
        input_side: 32,
        grid_side: 4,
        block_channels: vec![3, 4, 5],
        head_channels: 6,
        leaky_slope: 0.1,
    }
}

/// Straight-line reimplementation: direct convolution loops, no im2col or
/// GEMM, returning logits for one image.
fn reference_logits(model: &ModelState, image: &InputImage, mask: Option<&[f64]>) -> [f64; 2] {
    let arch = model.arch();
    let p = model.params();
    let mut side = arch.input_side;
    let mut channels = 3;
    let mut x: Vec<f64> = image.data().iter().map(|v| *v as f64).collect();
    let mut outs: Vec<(usize, usize)> = arch.block_channels.iter().map(|c| (*c, 2)).collect();
    outs.push((arch.head_channels, 1));
    for (l, (out_c, stride)) in outs.into_iter().enumerate() {
        let out_side = side / stride;
        let w = &p[2 * l];
        let b = &p[2 * l + 1];
        let mut y = vec![0.0; out_c * out_side * out_side];
        for o in 0..out_c {
            for oy in 0..out_side {
                for ox in 0..out_side {
                    let mut acc = b[o];
                    for c in 0..channels {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - 1;
                                let ix = (ox * stride + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= side as isize || ix >= side as isize {
                                    continue;
                                }
                                acc += w[((o * channels + c) * 3 + ky) * 3 + kx]
                                    * x[(c * side + iy as usize) * side + ix as usize];
                            }
                        }
                    }
                    y[(o * out_side + oy) * out_side + ox] = if acc > 0.0 {
                        acc
                    } else {
                        arch.leaky_slope * acc
                    };
                }
            }
        }
        x = y;
        side = out_side;
        channels = out_c;
    }
    let area = side * side;
    let gap: Vec<f64> = (0..channels)
        .map(|c| {
            (0..area)
                .map(|i| x[c * area + i] * mask.map_or(1.0, |m| m[i]))
                .sum::<f64>()
                / area as f64
        })
        .collect();
    let fw = &p[p.len() - 2];
    let fb = &p[p.len() - 1];
    let mut z = [0.0; 2];
    for j in 0..2 {
        z[j] = fb[j]
            + (0..channels)
                .map(|c| fw[j * channels + c] * gap[c])
                .sum::<f64>();
    }
    z
}

#[test]
fn init_is_seed_deterministic() {
    let a = init_model(&ArchConfig::default(), 7).unwrap();
    let b = init_model(&ArchConfig::default(), 7).unwrap();
    let c = init_model(&ArchConfig::default(), 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params(), c.params());
    assert_eq!(a.version(), 0);
    assert!(a.grad_sq().iter().flatten().all(|v| *v == 0.0));
    // biases start at zero
    for (name, t) in a.tensor_names().iter().zip(a.params()) {
        if name.ends_with("bias") {
            assert!(t.iter().all(|v| *v == 0.0), "{name}");
        }
    }
}

#[test]
fn incompatible_arch_rejected() {
    let bad = ArchConfig {
        input_side: 60,
        ..ArchConfig::default()
    };
    assert!(matches!(
        init_model(&bad, 1),
        Err(toot_core::Error::Config(_))
    ));
    let tiny_grid = ArchConfig {
        input_side: 24,
        grid_side: 3,
        ..ArchConfig::default()
    };
    assert!(init_model(&tiny_grid, 1).is_err());
    let slope = ArchConfig {
        leaky_slope: 1.0,
        ..ArchConfig::default()
    };
    assert!(init_model(&slope, 1).is_err());
    assert!(init_model(&ArchConfig::grid14(), 1).is_ok());
}

#[test]
fn logits_match_direct_convolution() {
    for (arch, seed) in [(small_arch(), 3u64), (ArchConfig::default(), 7)] {
        let model = init_model(&arch, seed).unwrap();
        let image = random_image(arch.input_side, seed + 100);
        let rec = forward(
            &model,
            &TrainingExample::new(image.clone(), Label::Positive),
        )
        .unwrap();
        let want = reference_logits(&model, &image, None);
        for j in 0..2 {
            assert!(
                (rec.logits[j] - want[j]).abs() < 1e-10,
                "{} vs {}",
                rec.logits[j],
                want[j]
            );
        }
        assert!((rec.probs[0] + rec.probs[1] - 1.0).abs() < 1e-9);

        let (pos, _) = mask_pair(GridPoint::new(1, 2), 2.0, arch.grid_side).unwrap();
        let masked = forward(
            &model,
            &TrainingExample::with_mask(image.clone(), Label::Positive, Arc::new(pos.clone())),
        )
        .unwrap();
        let want = reference_logits(&model, &image, Some(pos.values()));
        for j in 0..2 {
            assert!((masked.logits[j] - want[j]).abs() < 1e-10);
        }
    }
}

#[test]
fn golden_logits_for_seeded_model() {
    // frozen from the direct-convolution reference above
    let model = init_model(&ArchConfig::default(), 7).unwrap();
    let image = random_image(56, 2024);
    let rec = forward(
        &model,
        &TrainingExample::new(image.clone(), Label::Negative),
    )
    .unwrap();
    let reference = reference_logits(&model, &image, None);
    assert!((rec.logits[0] - reference[0]).abs() < 1e-10);
    assert!((rec.logits[1] - reference[1]).abs() < 1e-10);
    // recorded from the reference path
    assert!((rec.logits[0] - 9.369641261701087e-2).abs() < 1e-12);
    assert!((rec.logits[1] - 1.1895874049894005e-1).abs() < 1e-12);
    let (label, confidence) = predict(&model, &image).unwrap();
    assert_eq!(label, Label::Positive);
    // single-precision inference agrees with the double-precision softmax
    assert!((confidence - 0.5063152461159989).abs() < 1e-6);
    assert!((confidence - rec.probs[1]).abs() < 1e-6);
}

#[test]
fn all_ones_mask_is_identity() {
    let arch = ArchConfig::default();
    let model = init_model(&arch, 5).unwrap();
    let image = random_image(56, 9);
    let ones = normalize_mask(vec![1.0; 49], 7, Polarity::Positive, GridPoint::new(0, 0)).unwrap();
    let plain = TrainingExample::new(image.clone(), Label::Positive);
    let masked = TrainingExample::with_mask(image, Label::Positive, Arc::new(ones));
    let a = forward(&model, &plain).unwrap();
    let b = forward(&model, &masked).unwrap();
    assert_eq!(a.logits, b.logits);
    let ga = backward(&model, &[plain]).unwrap();
    let gb = backward(&model, &[masked]).unwrap();
    assert_eq!(ga, gb);
}

#[test]
fn zero_mask_leaves_head_bias() {
    let mut model = init_model(&ArchConfig::default(), 5).unwrap();
    let n = model.params().len();
    model.params_mut()[n - 1] = vec![0.3, -0.7];
    let zero = LayerMask::unnormalized(7, vec![0.0; 49], Polarity::Positive, GridPoint::new(0, 0))
        .unwrap();
    let ex = TrainingExample::with_mask(random_image(56, 4), Label::Positive, Arc::new(zero));
    let rec = forward(&model, &ex).unwrap();
    assert!(rec.gap.iter().all(|g| *g == 0.0));
    assert_eq!(rec.logits, [0.3, -0.7]);
}

#[test]
fn binary_mask_blocks_gradient_outside_roi() {
    let arch = ArchConfig::default();
    let model = init_model(&arch, 12).unwrap();
    let mut raw = vec![0.0; 49];
    for y in 2..5 {
        for x in 1..4 {
            raw[y * 7 + x] = 1.0;
        }
    }
    let mask = normalize_mask(raw.clone(), 7, Polarity::Positive, GridPoint::new(2, 3)).unwrap();
    let batch = vec![
        TrainingExample::with_mask(random_image(56, 1), Label::Positive, Arc::new(mask)),
        TrainingExample::new(random_image(56, 2), Label::Negative),
    ];
    let grads = activation_gradients(&model, &batch).unwrap();
    let c = arch.head_channels;
    let mut nonzero_inside = 0;
    for ch in 0..c {
        for cell in 0..49 {
            let g = grads[0][ch * 49 + cell];
            if raw[cell] == 0.0 {
                assert_eq!(g, 0.0);
            } else if g != 0.0 {
                nonzero_inside += 1;
            }
        }
    }
    assert!(nonzero_inside > 0);
    // gradient scales with the mask value
    assert!(grads[1].iter().all(|g| *g != 0.0));
}

#[test]
fn duplicated_batch_gives_same_mean_gradient() {
    let arch = small_arch();
    let model = init_model(&arch, 2).unwrap();
    let batch: Vec<TrainingExample> = (0..3)
        .map(|i| TrainingExample::new(random_image(32, i), Label::from_index(i as usize % 2)))
        .collect();
    let doubled: Vec<TrainingExample> = batch.iter().chain(batch.iter()).cloned().collect();
    let a = backward(&model, &batch).unwrap();
    let b = backward(&model, &doubled).unwrap();
    for (x, y) in a.tensors.iter().flatten().zip(b.tensors.iter().flatten()) {
        assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
    }
    assert!(matches!(
        backward(&model, &[]),
        Err(toot_core::Error::Usage(_))
    ));
}

#[test]
fn finite_difference_gradient_check() {
    let arch = small_arch();
    let model = init_model(&arch, 21).unwrap();
    let (pos, neg) = mask_pair(GridPoint::new(1, 2), 2.0 * 4.0 / 7.0, 4).unwrap();
    let image = random_image(32, 5);
    let batch = vec![
        TrainingExample::with_mask(image.clone(), Label::Positive, Arc::new(pos)),
        TrainingExample::with_mask(image, Label::Negative, Arc::new(neg)),
        TrainingExample::new(random_image(32, 6), Label::Negative),
    ];
    let grads = backward(&model, &batch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for t in 0..model.params().len() {
        for _ in 0..12 {
            let i = rng.gen_range(0..model.params()[t].len());
            let mut plus = model.clone();
            plus.params_mut()[t][i] += h;
            let mut minus = model.clone();
            minus.params_mut()[t][i] -= h;
            let numeric =
                (loss(&plus, &batch).unwrap() - loss(&minus, &batch).unwrap()) / (2.0 * h);
            let analytic = grads.tensors[t][i];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn predict_breaks_ties_toward_negative() {
    let mut model = init_model(&ArchConfig::default(), 1).unwrap();
    let n = model.params().len();
    model.params_mut()[n - 2].iter_mut().for_each(|w| *w = 0.0);
    model.params_mut()[n - 1] = vec![2.0, 2.0];
    let (label, conf) = predict(&model, &random_image(56, 3)).unwrap();
    assert_eq!(label, Label::Negative);
    assert_eq!(conf, 0.5);
}

#[test]
fn cam_properties() {
    let mut model = init_model(&ArchConfig::default(), 4).unwrap();
    let image = random_image(56, 8);
    let rec = forward(
        &model,
        &TrainingExample::new(image.clone(), Label::Positive),
    )
    .unwrap();
    let n = model.params().len();
    model.params_mut()[n - 1] = vec![0.25, -0.5];
    let rec2 = forward(
        &model,
        &TrainingExample::new(image.clone(), Label::Positive),
    )
    .unwrap();
    assert_eq!(rec.gap, rec2.gap);
    for class in 0..2 {
        let cam = cam_map(&model, &image, class).unwrap();
        let mean = cam.iter().sum::<f64>() / cam.len() as f64;
        let bias = model.params()[n - 1][class];
        assert!((mean - (rec2.logits[class] - bias)).abs() < 1e-12);
    }
    assert!(cam_map(&model, &image, 2).is_err());
    model.params_mut()[n - 2].iter_mut().for_each(|w| *w = 0.0);
    assert!(cam_map(&model, &image, 1)
        .unwrap()
        .iter()
        .all(|v| *v == 0.0));
}

#[test]
fn bad_inputs_rejected() {
    let model = init_model(&ArchConfig::default(), 1).unwrap();
    let wrong = random_image(32, 1);
    assert!(predict(&model, &wrong).is_err());
    let mut data = vec![0.5f32; 3 * 56 * 56];
    data[17] = f32::NAN;
    let nan = InputImage::new(56, data).unwrap();
    assert!(matches!(
        predict(&model, &nan),
        Err(toot_core::Error::Numeric(_))
    ));
    let (pos, _) = mask_pair(GridPoint::new(0, 0), 4.0, 14).unwrap();
    let ex = TrainingExample::with_mask(random_image(56, 1), Label::Positive, Arc::new(pos));
    assert!(forward(&model, &ex).is_err());
}

#[test]
fn batched_prediction_matches_single() {
    let model = init_model(&ArchConfig::default(), 6).unwrap();
    let images: Vec<InputImage> = (0..45).map(|i| random_image(56, i)).collect();
    let batched = predict_batch(&model, &images).unwrap();
    for (img, got) in images.iter().zip(&batched) {
        let single = predict(&model, img).unwrap();
        assert_eq!(single.0, got.0);
        assert!((single.1 - got.1).abs() < 1e-12);
    }
}
