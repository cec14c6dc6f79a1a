use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toot_core::metrics::{
    accuracy, aggregate_runs, select_a_f, summarize, write_trace_csv, ItbStream, MetricsTrace,
};
use toot_core::nn::{forward, init_model, predict, ArchConfig, InputImage, Label, TrainingExample};
use toot_core::Error;

fn trace(u: &[u8], a: &[f64]) -> MetricsTrace {
    let mut t = MetricsTrace::new("test", 8, 0, 0, a[0]);
    for (i, ui) in u.iter().enumerate() {
        t.push(*ui == 1, 0, true, a[i + 1]);
    }
    t
}

// Straight transcription of the definitions, sharing no code with the
// library.
mod oracle {
    pub fn next_k(u: &[u8], i: usize) -> usize {
        let n = u.len();
        let mut k = i + 1;
        while k <= n && u[k - 1] == 0 {
            k += 1;
        }
        k
    }

    pub fn ctb(a: &[f64], i: usize) -> f64 {
        a[i] - a[0]
    }

    pub fn ctb_u(u: &[u8], a: &[f64], i: usize) -> f64 {
        a[next_k(u, i) - 1] - a[0]
    }

    pub fn itb(u: &[u8], a: &[f64], i: usize) -> f64 {
        a[next_k(u, i) - 1] - a[i - 1]
    }

    pub fn mean_itb(u: &[u8], a: &[f64], i: usize, j: usize) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0u32;
        for x in i..=j {
            let ix = if u[x - 1] == 1 { itb(u, a, x) } else { 0.0 };
            num += ix;
            den += u[x - 1] as u32;
        }
        (den > 0).then(|| num / den as f64)
    }
}

fn random_trace(rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<f64>) {
    let n = rng.gen_range(1..60);
    let density = rng.gen::<f64>();
    let u: Vec<u8> = (0..n).map(|_| (rng.gen::<f64>() < density) as u8).collect();
    let mut a = vec![rng.gen_range(0..=200) as f64 / 200.0];
    for _ in 0..n {
        let prev = *a.last().unwrap();
        let next = if rng.gen::<bool>() {
            prev
        } else {
            rng.gen_range(0..=200) as f64 / 200.0
        };
        a.push(next);
    }
    (u, a)
}

#[test]
fn hand_computed_examples() {
    let t = trace(&[1, 0, 1], &[0.5, 0.6, 0.6, 0.8]);
    assert_eq!(t.itb_interaction(1).unwrap(), 0.6 - 0.5);
    assert_eq!(t.itb_interaction(3).unwrap(), 0.8 - 0.6);
    assert!((t.itb_interaction(1).unwrap() - 0.1).abs() < 1e-15);
    assert!((t.itb_interaction(3).unwrap() - 0.2).abs() < 1e-15);
    assert!((t.ctb_interaction(1).unwrap() - 0.1).abs() < 1e-15);
    assert!((t.mean_itb(1, 3).unwrap() - 0.15).abs() < 1e-15);
    assert!(matches!(t.itb_interaction(2), Err(Error::Undefined(_))));
    assert!(matches!(t.ctb_interaction(2), Err(Error::Undefined(_))));

    let t = trace(&[0, 0], &[0.5, 0.6, 0.8]);
    assert!((t.ctb_frame(2).unwrap() - 0.3).abs() < 1e-15);
    assert!(matches!(t.ctb_frame(0), Err(Error::Undefined(_))));
    assert!(matches!(t.ctb_frame(3), Err(Error::Undefined(_))));
    assert!(matches!(t.mean_itb(1, 2), Err(Error::Undefined(_))));

    let flat = trace(&[1, 1, 0], &[0.5, 0.5, 0.5, 0.5]);
    assert_eq!(flat.itb_interaction(1).unwrap(), 0.0);
    assert_eq!(flat.ctb_frame(3).unwrap(), 0.0);

    let single = trace(&[0, 1, 0], &[0.5, 0.5, 0.7, 0.9]);
    assert_eq!(
        single.mean_itb(1, 3).unwrap(),
        single.itb_interaction(2).unwrap()
    );
}

#[test]
fn a_max_and_find_f() {
    let t = trace(&[1, 1], &[0.5, 0.9, 0.7]);
    assert_eq!(t.a_max().unwrap(), 0.9);
    assert_eq!(t.find_f(0.8), Some(1));
    assert_eq!(t.find_f(0.9), Some(1));
    assert_eq!(t.find_f(0.95), None);
    let mono = trace(&[1, 0, 1], &[0.5, 0.6, 0.7, 0.75]);
    assert_eq!(mono.a_max().unwrap(), 0.75);
    assert_eq!(mono.find_f(0.7), Some(2));
    // A_0 does not count as reaching A_f
    assert_eq!(trace(&[0], &[0.9, 0.8]).find_f(0.85), None);
    assert!(trace(&[], &[0.5]).a_max().is_err());
}

#[test]
fn streaming_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let start = std::time::Instant::now();
    for _ in 0..100 {
        let (u, a) = random_trace(&mut rng);
        let n = u.len();
        let mut stream = ItbStream::new(a[0]);
        for i in 1..=n {
            stream.push(u[i - 1] == 1, a[i]);
        }
        let s = stream.finish();
        let t = trace(&u, &a);
        for i in 1..=n {
            assert_eq!(s.ctb[i - 1].to_bits(), oracle::ctb(&a, i).to_bits());
            assert_eq!(
                t.ctb_frame(i).unwrap().to_bits(),
                oracle::ctb(&a, i).to_bits()
            );
            if u[i - 1] == 1 {
                let want = oracle::itb(&u, &a, i);
                assert_eq!(s.itb_interaction(i).unwrap().to_bits(), want.to_bits());
                assert_eq!(t.itb_interaction(i).unwrap().to_bits(), want.to_bits());
                let want = oracle::ctb_u(&u, &a, i);
                assert_eq!(s.ctb_interaction(i).unwrap().to_bits(), want.to_bits());
                assert_eq!(t.ctb_interaction(i).unwrap().to_bits(), want.to_bits());
            } else {
                assert!(s.itb_interaction(i).is_none());
            }
        }
        for _ in 0..5 {
            let i = rng.gen_range(1..=n);
            let j = rng.gen_range(i..=n);
            match oracle::mean_itb(&u, &a, i, j) {
                Some(want) => {
                    assert!((s.mean_itb(i, j).unwrap() - want).abs() <= 1e-12);
                    assert!((t.mean_itb(i, j).unwrap() - want).abs() <= 1e-12);
                }
                None => {
                    assert!(s.mean_itb(i, j).is_err());
                    assert!(t.mean_itb(i, j).is_err());
                }
            }
        }
    }
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

proptest! {
    #[test]
    fn itb_telescopes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (u, a) = random_trace(&mut rng);
        let t = trace(&u, &a);
        if let Some(i0) = (1..=u.len()).find(|i| u[i - 1] == 1) {
            let (sum, _) = t.itb_total(1, u.len()).unwrap();
            prop_assert!((sum - (a[u.len()] - a[i0 - 1])).abs() <= 1e-12);
        }
    }

    #[test]
    fn ctb_and_itb_are_consistent(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (u, a) = random_trace(&mut rng);
        let t = trace(&u, &a);
        let hits: Vec<usize> = (1..=u.len()).filter(|i| u[i - 1] == 1).collect();
        for w in hits.windows(2) {
            // CTB of an interaction minus CTB of the previous one is its ITB
            let diff = t.ctb_interaction(w[1]).unwrap() - t.ctb_interaction(w[0]).unwrap();
            prop_assert!((diff - t.itb_interaction(w[1]).unwrap()).abs() <= 1e-12);
        }
        if let Some(&first) = hits.first() {
            let before = if first == 1 { 0.0 } else { t.ctb_frame(first - 1).unwrap() };
            let diff = t.ctb_interaction(first).unwrap() - before;
            prop_assert!((diff - t.itb_interaction(first).unwrap()).abs() <= 1e-12);
        }
    }
}

#[test]
fn validation_rules() {
    assert!(trace(&[1, 0], &[0.5, 0.6, 0.6]).validate().is_ok());
    let mut t = MetricsTrace::new("x", 2, 0, 0, 0.5);
    t.push(false, 0, false, 0.6);
    assert!(matches!(t.validate(), Err(Error::Validation(_))));
    let mut t = MetricsTrace::new("x", 2, 0, 0, 0.5);
    t.push(true, 0, true, 1.5);
    assert!(t.validate().is_err());
}

#[test]
fn aggregation() {
    let t = trace(&[1, 0, 1], &[0.5, 0.6, 0.6, 0.8]);
    let many = vec![t.clone(); 10];
    let agg = aggregate_runs(&many).unwrap();
    for (x, y) in agg.accuracy.iter().zip(&t.accuracy) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!((agg.a_max - 0.8).abs() < 1e-12);
    assert_eq!(agg.runs, 10);

    let a = trace(&[1], &[0.5, 0.6]);
    let b = trace(&[1], &[0.5, 0.8]);
    let agg = aggregate_runs(&[a.clone(), b]).unwrap();
    assert!((agg.accuracy[1] - 0.7).abs() < 1e-15);

    let longer = trace(&[1, 1], &[0.5, 0.6, 0.7]);
    assert!(matches!(
        aggregate_runs(&[a.clone(), longer]),
        Err(Error::Validation(_))
    ));
    let mut other = a.clone();
    other.strategy = "other".into();
    assert!(matches!(
        aggregate_runs(&[a, other]),
        Err(Error::Validation(_))
    ));
    assert!(aggregate_runs(&[]).is_err());
}

#[test]
fn summary_truncates_each_run_at_its_f() {
    // run 0 reaches 0.7 at frame 2; run 1 never does
    let r0 = trace(&[1, 1, 1, 1], &[0.5, 0.6, 0.7, 0.9, 0.9]);
    let mut r1 = trace(&[1, 0, 1, 0], &[0.5, 0.55, 0.55, 0.6, 0.65]);
    r1.run = 1;
    let s = summarize(&[r0.clone(), r1.clone()], 0.7).unwrap();
    assert_eq!(s.runs_reaching_f, 1);
    assert_eq!(s.f, (2.0 + 4.0) / 2.0);
    assert_eq!(s.interactions_to_f, (2.0 + 2.0) / 2.0);
    // r0 cut at 2: ITBs 0.1, 0.1; r1 whole: 0.05, 0.1
    let want = ((0.6 - 0.5) + (0.7 - 0.6) + (0.55 - 0.5) + (0.65 - 0.55)) / 4.0;
    assert!((s.mean_itb.unwrap() - want).abs() < 1e-15);
    assert!((s.a_max - (0.9 + 0.65) / 2.0).abs() < 1e-15);

    let aggs = [
        aggregate_runs(&[r0]).unwrap(),
        aggregate_runs(&[r1]).unwrap(),
    ];
    assert_eq!(select_a_f(&aggs).unwrap(), 0.65);

    let none = summarize(&[trace(&[0, 0], &[0.5, 0.5, 0.5])], 0.6).unwrap();
    assert_eq!(none.mean_itb, None);
    assert_eq!(none.interactions_to_f, 0.0);
}

#[test]
fn trace_csv_layout() {
    let mut t = MetricsTrace::new("semi_online", 8, 3, 99, 0.5);
    t.push(true, 0, true, 0.625);
    t.push(false, 2, true, 0.75);
    t.push(false, 0, false, 0.75);
    let mut out = Vec::new();
    write_trace_csv(&t, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(
        text,
        "run,frame,u,of_events,trained,A,CTB\n\
         3,0,0,0,0,0.5,\n\
         3,1,1,0,1,0.625,0.125\n\
         3,2,0,2,1,0.75,0.25\n\
         3,3,0,0,0,0.75,0.25\n"
    );
}

fn random_image(seed: u64) -> InputImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    InputImage::new(56, (0..3 * 56 * 56).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

#[test]
fn accuracy_oracles() {
    let mut model = init_model(&ArchConfig::default(), 3).unwrap();
    let images: Vec<InputImage> = (0..20).map(random_image).collect();

    // shift the positive bias so that exactly half the images are positive
    let mut margins: Vec<f64> = images
        .iter()
        .map(|im| {
            let r = forward(&model, &TrainingExample::new(im.clone(), Label::Negative)).unwrap();
            r.logits[1] - r.logits[0]
        })
        .collect();
    margins.sort_by(f64::total_cmp);
    let cut = 0.5 * (margins[9] + margins[10]);
    let last = model.params().len() - 1;
    model.params_mut()[last][1] -= cut;

    let predicted: Vec<Label> = images
        .iter()
        .map(|im| predict(&model, im).unwrap().0)
        .collect();
    assert_eq!(
        predicted.iter().filter(|l| **l == Label::Positive).count(),
        10
    );
    let perfect: Vec<(InputImage, Label)> = images
        .iter()
        .cloned()
        .zip(predicted.iter().copied())
        .collect();
    assert_eq!(accuracy(&model, &perfect).unwrap(), 1.0);
    let flipped: Vec<(InputImage, Label)> = perfect
        .iter()
        .map(|(im, l)| (im.clone(), Label::from_present(*l == Label::Negative)))
        .collect();
    assert_eq!(accuracy(&model, &flipped).unwrap(), 0.0);

    // independent recount on an arbitrary balanced labeling
    let mixed: Vec<(InputImage, Label)> = images
        .iter()
        .enumerate()
        .map(|(i, im)| (im.clone(), Label::from_present(i % 2 == 0)))
        .collect();
    let correct = mixed
        .iter()
        .filter(|(im, l)| predict(&model, im).unwrap().0 == *l)
        .count();
    assert_eq!(accuracy(&model, &mixed).unwrap(), correct as f64 / 20.0);

    // a constant predictor scores one half
    let mut constant = model.clone();
    let fc_w = last - 1;
    constant.params_mut()[fc_w]
        .iter_mut()
        .for_each(|w| *w = 0.0);
    constant.params_mut()[last] = vec![1.0, 0.0];
    assert_eq!(accuracy(&constant, &mixed).unwrap(), 0.5);

    assert!(matches!(
        accuracy(&model, &mixed[..3]),
        Err(Error::Validation(_))
    ));
    assert!(matches!(accuracy(&model, &[]), Err(Error::Validation(_))));
}
