use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn pair<'a>(pred: &'a [f64], gt: &'a [bool], h: usize, w: usize) -> MaskPair<'a> {
    MaskPair::new(pred, gt, h, w).unwrap()
}

fn case_a() -> (Vec<f64>, Vec<bool>, usize, usize) {
    let (h, w) = (16, 12);
    let mut pred = vec![0.0; h * w];
    let mut gt = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as i64, y as i64);
            gt[y * w + x] = (xi - 5).pow(2) + (yi - 7).pow(2) <= 16 || (x == 10 && (2..6).contains(&y));
            pred[y * w + x] = ((x * 37 + y * 11 + 3 * x * y) % 256) as f64;
        }
    }
    pred[0] = 0.0;
    pred[h * w - 1] = 255.0;
    (pred.iter().map(|v| v / 255.0).collect(), gt, h, w)
}

fn case_b() -> (Vec<f64>, Vec<bool>, usize, usize) {
    let (h, w) = (16, 16);
    let mut pred = vec![0.0; h * w];
    let mut gt = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let g = (x as i64 - y as i64).abs() <= 2 || (y >= 12 && x <= 3);
            gt[y * w + x] = g;
            pred[y * w + x] = if g { 230.0 - ((x + y) % 7) as f64 * 10.0 } else { ((x * y) % 40) as f64 };
        }
    }
    pred[0] = 255.0;
    pred[15 * w] = 0.0;
    (pred.iter().map(|v| v / 255.0).collect(), gt, h, w)
}

// reference values from the PySODMetrics implementation (S, weighted F)
// and a numpy brute-force threshold sweep (mean E)
#[test]
fn matches_reference_implementation() {
    let refs = [
        (case_a(), 0.33492467350951105, 0.3877969700259998, 0.4006734471611608),
        (case_b(), 0.9365633766118115, 0.8490590460447538, 0.798954081621371),
    ];
    for ((pred, gt, h, w), s, f, e) in refs {
        let p = pair(&pred, &gt, h, w);
        assert!((s_measure(&p, 0.5) - s).abs() < 1e-10, "S {} vs {s}", s_measure(&p, 0.5));
        assert!((weighted_f(&p, 1.0) - f).abs() < 1e-10, "wF {} vs {f}", weighted_f(&p, 1.0));
        assert!((e_measure_mean(&p) - e).abs() < 1e-10, "E {} vs {e}", e_measure_mean(&p));
    }
}

#[test]
fn half_overlap_example() {
    let gt_a: Vec<bool> = (0..16).map(|i| i % 4 < 2).collect();
    let pred_b: Vec<f64> = (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
    let p = pair(&pred_b, &gt_a, 4, 4);
    assert!((jaccard(&p) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(dice(&p), 0.5);
}

#[test]
fn perfect_and_disjoint() {
    let gt: Vec<bool> = (0..64).map(|i| (i / 8 + i % 8) % 5 == 0).collect();
    let pred: Vec<f64> = gt.iter().map(|&g| g as u8 as f64).collect();
    let p = pair(&pred, &gt, 8, 8);
    assert_eq!(jaccard(&p), 1.0);
    assert_eq!(dice(&p), 1.0);
    assert!((s_measure(&p, 0.5) - 1.0).abs() < 1e-9);
    assert!((weighted_f(&p, 1.0) - 1.0).abs() < 1e-9);
    assert!((e_measure_mean(&p) - 1.0).abs() < 1e-9);
    let inv: Vec<f64> = pred.iter().map(|v| 1.0 - v).collect();
    let q = pair(&inv, &gt, 8, 8);
    assert_eq!(jaccard(&q), 0.0);
    assert_eq!(dice(&q), 0.0);
}

#[test]
fn empty_conventions() {
    let gt = vec![false; 16];
    let zero = vec![0.0; 16];
    let p = pair(&zero, &gt, 4, 4);
    for v in [jaccard(&p), dice(&p), s_measure(&p, 0.5), weighted_f(&p, 1.0), e_measure_mean(&p)] {
        assert_eq!(v, 1.0);
    }
    // foreground away from the border, where the smoothing kernel is complete
    let gt1: Vec<bool> = (0..256).map(|i| (6..10).contains(&(i / 16)) && (6..10).contains(&(i % 16))).collect();
    let zero = vec![0.0; 256];
    let q = pair(&zero, &gt1, 16, 16);
    assert!(weighted_f(&q, 1.0) < 1e-12);
    assert_eq!(dice(&q), 0.0);
}

#[test]
fn inverted_half_split_scores_lower() {
    let gt: Vec<bool> = (0..64).map(|i| i % 8 < 4).collect();
    let same: Vec<f64> = gt.iter().map(|&g| g as u8 as f64).collect();
    let inv: Vec<f64> = same.iter().map(|v| 1.0 - v).collect();
    assert!(s_measure(&pair(&inv, &gt, 8, 8), 0.5) < s_measure(&pair(&same, &gt, 8, 8), 0.5));
}

#[test]
fn constant_half_is_threshold_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let gt: Vec<bool> = (0..100).map(|_| rng.gen_bool(0.3)).collect();
        let pred = vec![0.5; 100];
        let p = pair(&pred, &gt, 10, 10);
        assert!((e_measure_mean(&p) - e_measure(&p)).abs() < 1e-12);
    }
    let pred = vec![0.5; 100];
    for gt in [vec![false; 100], vec![true; 100]] {
        let p = pair(&pred, &gt, 10, 10);
        assert!((e_measure_mean(&p) - e_measure(&p)).abs() < 1e-12);
    }
}

#[test]
fn shape_mismatch_is_rejected() {
    assert!(MaskPair::new(&[0.0; 15], &[false; 16], 4, 4).is_err());
    assert!(MaskPair::new(&[1.5; 16], &[false; 16], 4, 4).is_err());
}

fn brute_counts(pred: &[f64], gt: &[bool], w: usize) -> (f64, f64) {
    let a: HashSet<(usize, usize)> = pred.iter().enumerate().filter(|(_, &p)| p >= 0.5).map(|(i, _)| (i / w, i % w)).collect();
    let b: HashSet<(usize, usize)> = gt.iter().enumerate().filter(|(_, &g)| g).map(|(i, _)| (i / w, i % w)).collect();
    let inter = a.intersection(&b).count() as f64;
    let union = a.union(&b).count() as f64;
    if union == 0.0 {
        return (1.0, 1.0);
    }
    (inter / union, 2.0 * inter / (a.len() + b.len()) as f64)
}

#[test]
fn jaccard_dice_match_set_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let density = rng.gen_range(0.05..0.6);
        let gt: Vec<bool> = (0..256).map(|_| rng.gen_bool(density)).collect();
        let pred: Vec<f64> = (0..256).map(|_| rng.gen::<f64>()).collect();
        let p = pair(&pred, &gt, 16, 16);
        let (j, d) = brute_counts(&pred, &gt, 16);
        assert_eq!(jaccard(&p), j);
        assert_eq!(dice(&p), d);
    }
}

fn masks() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (prop::collection::vec(0.0f64..=1.0, 144), prop::collection::vec(prop::bool::weighted(0.3), 144))
}

proptest! {
    #[test]
    fn all_measures_in_unit_range((pred, gt) in masks()) {
        let p = pair(&pred, &gt, 12, 12);
        for v in [jaccard(&p), dice(&p), s_measure(&p, 0.5), weighted_f(&p, 1.0), e_measure_mean(&p), e_measure(&p)] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn jaccard_is_dice_identity((pred, gt) in masks()) {
        let p = pair(&pred, &gt, 12, 12);
        let (j, d) = (jaccard(&p), dice(&p));
        prop_assert!(j <= d + 1e-15);
        prop_assert!((j - d / (2.0 - d)).abs() < 1e-12);
    }
}

#[test]
fn aggregation_means_videos_then_dataset() {
    let s = |v: f64| Scores { jaccard: v, dice: v, s_alpha: v, f_beta_w: v, e_phi_mn: v };
    let rec = |video: &str, frame, v| FrameRecord { video: video.into(), frame, per_class: vec![s(v), s(v)] };
    let one = aggregate(&[rec("a", 0, 0.3)]).unwrap();
    assert_eq!(one.mean, s(0.3));
    let recs = vec![rec("b", 0, 0.6), rec("a", 0, 0.2), rec("a", 1, 0.6), rec("b", 1, 0.6)];
    let r = aggregate(&recs).unwrap();
    assert!((r.mean.dice - 0.5).abs() < 1e-15);
    assert_eq!(r.videos[0].video, "a");
    let mut rev = recs.clone();
    rev.reverse();
    assert_eq!(aggregate(&rev).unwrap(), r);
    assert!(aggregate(&[]).is_err());
    assert!(r.to_csv().starts_with("video,Jaccard,Dice,S_alpha,F_beta_w,E_phi_mn\n"));
}

#[test]
fn class_scores_shapes() {
    let labels: Vec<u8> = (0..64).map(|i| (i % 3) as u8).collect();
    let probs: Vec<f64> = (0..192).map(|i| if labels[i % 64] as usize == i / 64 { 1.0 } else { 0.0 }).collect();
    let per = class_scores(&probs, &labels, 3, 8, 8, EvalMode::PerClass).unwrap();
    assert_eq!(per.len(), 2);
    assert!(per.iter().all(|s| s.dice == 1.0));
    let uni = class_scores(&probs, &labels, 3, 8, 8, EvalMode::Union).unwrap();
    assert_eq!(uni.len(), 1);
    assert_eq!(uni[0].jaccard, 1.0);
}
