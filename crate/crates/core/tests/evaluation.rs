use crossgan_core::data::{AbnormalityMap, GroundTruth, Mask};
use crossgan_core::evaluation::{
    auc, eer, evaluate, frame_level_eval, pixel_level_eval, pixel_thresholds, thresholds, Protocol, RocCurve,
    RocPoint, OVERLAP_FRACTION,
};
use crossgan_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar_map(index: usize, v: f64) -> AbnormalityMap {
    AbnormalityMap::new("v", index, 1, 1, vec![v]).unwrap()
}

fn scalar_maps(scores: &[f64]) -> Vec<AbnormalityMap> {
    scores.iter().enumerate().map(|(i, &v)| scalar_map(i, v)).collect()
}

fn frame_curve(scores: &[f64], labels: &[bool]) -> RocCurve {
    frame_level_eval(&scalar_maps(scores), labels, &thresholds(scores.iter().copied())).unwrap()
}

/// Probability that a random positive outranks a random negative, ties counting half.
fn rank_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &a) in scores.iter().enumerate() {
        for (j, &b) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if a > b {
                    wins += 1.0;
                } else if a == b {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    loop {
        let l: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        if l.iter().any(|&b| b) && l.iter().any(|&b| !b) {
            return l;
        }
    }
}

#[test]
fn auc_matches_rank_statistic() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..20 {
        let labels = random_labels(&mut rng, 100);
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| {
                let v = rng.random::<f64>() * 0.8 + if l { 0.2 } else { 0.0 };
                // Every other trial quantizes scores to force ties.
                if trial % 2 == 0 { (v * 20.0).round() / 20.0 } else { v }
            })
            .collect();
        let a = auc(&frame_curve(&scores, &labels)).unwrap();
        assert!((a - rank_auc(&scores, &labels)).abs() < 1e-6, "trial {trial}: {a}");
    }
}

#[test]
fn perfect_and_inverted_separation() {
    let scores = [0.1, 0.2, 0.3, 0.7, 0.8, 0.9];
    let labels = [false, false, false, true, true, true];
    let c = frame_curve(&scores, &labels);
    assert_eq!(auc(&c).unwrap(), 1.0);
    assert_eq!(eer(&c).unwrap(), 0.0);
    let inverted: Vec<bool> = labels.iter().map(|l| !l).collect();
    assert_eq!(auc(&frame_curve(&scores, &inverted)).unwrap(), 0.0);
}

#[test]
fn curve_endpoints_and_extreme_thresholds() {
    let c = frame_curve(&[0.0, 0.4, 1.0], &[false, true, true]);
    let first = c.points.first().unwrap();
    let last = c.points.last().unwrap();
    assert!(first.threshold > 1.0);
    assert_eq!((first.tpr, first.fpr), (0.0, 0.0));
    assert_eq!(last.threshold, 0.0);
    assert_eq!((last.tpr, last.fpr), (1.0, 1.0));
}

#[test]
fn eer_of_uninformative_scores_is_one_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 10_000;
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let e = eer(&frame_curve(&scores, &labels)).unwrap();
    assert!((e - 0.5).abs() < 0.05, "{e}");
}

#[test]
fn eer_interpolates_between_bracketing_points() {
    let p = |fpr, tpr| RocPoint { threshold: 0.0, tpr, fpr, mislocalized: None };
    // gap = fpr + tpr - 1 is -0.5 at (0.2, 0.3) and 0.1 at (0.4, 0.7): t = 5/6.
    let curve = RocCurve { points: vec![p(0.0, 0.0), p(0.2, 0.3), p(0.4, 0.7), p(1.0, 1.0)] };
    assert!((eer(&curve).unwrap() - (0.2 + 5.0 / 6.0 * 0.2)).abs() < 1e-15);
}

fn random_map(rng: &mut ChaCha8Rng, index: usize, side: usize) -> AbnormalityMap {
    let values = (0..side * side)
        .map(|_| if rng.random::<f64>() < 0.3 { 0.0 } else { (rng.random::<f64>() * 10.0).round() / 10.0 })
        .collect();
    AbnormalityMap::new("v", index, side, side, values).unwrap()
}

#[test]
fn frame_level_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let maps: Vec<AbnormalityMap> = (0..20).map(|i| random_map(&mut rng, i, 4)).collect();
        let labels = random_labels(&mut rng, 20);
        let t = thresholds(maps.iter().map(|m| m.max()));
        let curve = frame_level_eval(&maps, &labels, &t).unwrap();
        let (pos, neg) = (labels.iter().filter(|&&l| l).count(), labels.iter().filter(|&&l| !l).count());
        for p in &curve.points {
            let (mut tp, mut fp) = (0, 0);
            for (m, &l) in maps.iter().zip(&labels) {
                let flagged = m.values.iter().any(|&v| v >= p.threshold);
                if flagged && l {
                    tp += 1;
                }
                if flagged && !l {
                    fp += 1;
                }
            }
            assert_eq!(p.tpr, tp as f64 / pos as f64);
            assert_eq!(p.fpr, fp as f64 / neg as f64);
        }
    }
}

fn random_truth(rng: &mut ChaCha8Rng, side: usize, abnormal: bool) -> GroundTruth {
    if !abnormal {
        return GroundTruth::from_mask(Mask::empty(side, side));
    }
    let mut mask = Mask::empty(side, side);
    let (y0, x0) = (rng.random_range(0..side - 2), rng.random_range(0..side - 2));
    let (h, w) = (rng.random_range(1..=side - y0), rng.random_range(1..=side - x0));
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            mask.data[y * side + x] = true;
        }
    }
    GroundTruth::from_mask(mask)
}

#[test]
fn pixel_level_matches_overlap_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..20 {
        let labels = random_labels(&mut rng, 10);
        let maps: Vec<AbnormalityMap> = (0..10).map(|i| random_map(&mut rng, i, 6)).collect();
        let truth: Vec<GroundTruth> = labels.iter().map(|&l| random_truth(&mut rng, 6, l)).collect();
        let t = pixel_thresholds(&maps, &truth).unwrap();
        let curve = pixel_level_eval(&maps, &truth, &t).unwrap();
        let (pos, neg) = (labels.iter().filter(|&&l| l).count(), labels.iter().filter(|&&l| !l).count());
        for p in &curve.points {
            let (mut tp, mut fp, mut missed) = (0, 0, 0);
            for (m, g) in maps.iter().zip(&truth) {
                let predicted = m.values.iter().filter(|&&v| v >= p.threshold).count();
                if let Some(mask) = g.mask().filter(|_| g.is_abnormal()) {
                    let hit = m.values.iter().zip(&mask.data).filter(|(&v, &in_gt)| in_gt && v >= p.threshold).count();
                    if hit as f64 / mask.count() as f64 >= OVERLAP_FRACTION {
                        tp += 1;
                    } else if predicted > 0 {
                        missed += 1;
                    }
                } else if predicted > 0 {
                    fp += 1;
                }
            }
            assert_eq!(p.tpr, tp as f64 / pos as f64, "θ = {}", p.threshold);
            assert_eq!(p.fpr, fp as f64 / neg as f64, "θ = {}", p.threshold);
            assert_eq!(p.mislocalized, Some(missed), "θ = {}", p.threshold);
        }
    }
}

fn square_mask(side: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Mask {
    let mut m = Mask::empty(side, side);
    for y in rows {
        for x in cols.clone() {
            m.data[y * side + x] = true;
        }
    }
    m
}

fn values_on(mask: &Mask, v: f64) -> Vec<f64> {
    mask.data.iter().map(|&b| if b { v } else { 0.0 }).collect()
}

#[test]
fn exact_and_disjoint_predictions() {
    let gt = square_mask(8, 2..5, 2..5);
    let elsewhere = square_mask(8, 5..8, 5..8);
    let normal = GroundTruth::from_mask(Mask::empty(8, 8));
    let maps = vec![
        AbnormalityMap::new("v", 0, 8, 8, values_on(&gt, 0.6)).unwrap(),
        AbnormalityMap::new("v", 1, 8, 8, values_on(&elsewhere, 0.9)).unwrap(),
        AbnormalityMap::new("v", 2, 8, 8, vec![0.0; 64]).unwrap(),
    ];
    let truth = vec![GroundTruth::from_mask(gt.clone()), GroundTruth::from_mask(gt), normal];
    let curve = pixel_level_eval(&maps, &truth, &thresholds([])).unwrap();
    for p in &curve.points {
        // Frame 0 is detected at every θ up to its value; frame 1 never is.
        let expected_tp = if p.threshold <= 0.6 { 1 } else { 0 } + usize::from(p.threshold == 0.0);
        assert_eq!(p.tpr, expected_tp as f64 / 2.0, "θ = {}", p.threshold);
        if p.threshold > 0.0 && p.threshold <= 0.9 {
            assert_eq!(p.mislocalized, Some(1));
        }
    }
}

#[test]
fn input_errors() {
    let maps = scalar_maps(&[0.1, 0.9]);
    assert!(matches!(frame_level_eval(&maps, &[true], &thresholds([])), Err(Error::Input(_))));
    assert!(matches!(frame_level_eval(&maps, &[true, true], &thresholds([])), Err(Error::Input(_))));
    let unmasked = [GroundTruth::unmasked(true), GroundTruth::unmasked(false)];
    assert!(matches!(pixel_level_eval(&maps, &unmasked, &thresholds([])), Err(Error::Input(_))));
    assert!(matches!(evaluate(Protocol::Pixel, &maps, &unmasked), Err(Error::Input(_))));
    let report = evaluate(Protocol::Frame, &maps, &unmasked).unwrap();
    assert_eq!(report.auc, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rates_fall_as_threshold_rises(seed in any::<u64>(), n in 4usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = random_labels(&mut rng, n);
        let maps: Vec<AbnormalityMap> = (0..n).map(|i| random_map(&mut rng, i, 4)).collect();
        let truth: Vec<GroundTruth> = labels.iter().map(|&l| random_truth(&mut rng, 4, l)).collect();
        let frame = frame_level_eval(&maps, &labels, &thresholds(maps.iter().map(|m| m.max()))).unwrap();
        let pixel = pixel_level_eval(&maps, &truth, &pixel_thresholds(&maps, &truth).unwrap()).unwrap();
        for c in [&frame, &pixel] {
            for w in c.points.windows(2) {
                prop_assert!(w[0].threshold > w[1].threshold);
                prop_assert!(w[0].tpr <= w[1].tpr && w[0].fpr <= w[1].fpr);
            }
            prop_assert_eq!((c.points[0].tpr, c.points[0].fpr), (0.0, 0.0));
            let last = c.points.last().unwrap();
            prop_assert_eq!((last.tpr, last.fpr), (1.0, 1.0));
        }
    }

    #[test]
    fn auc_ignores_increasing_transforms(seed in any::<u64>(), n in 4usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = random_labels(&mut rng, n);
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let squashed: Vec<f64> = scores.iter().map(|v| v.powi(3)).collect();
        let a = auc(&frame_curve(&scores, &labels)).unwrap();
        let b = auc(&frame_curve(&squashed, &labels)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn zero_maps_never_fire(n in 2usize..20) {
        let maps = scalar_maps(&vec![0.0; n]);
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let c = frame_level_eval(&maps, &labels, &thresholds([])).unwrap();
        for p in c.points.iter().filter(|p| p.threshold > 0.0) {
            prop_assert_eq!((p.tpr, p.fpr), (0.0, 0.0));
        }
    }
}
