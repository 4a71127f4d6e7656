use gfnact::acquisition::top_k;
use gfnact::grid::{Action, GridEnv, GridState, MaskConfig, Transition};
use gfnact::nn::softmax;
use gfnact::oracle::{compute_threshold, label, Label};
use gfnact::rng::RngStream;
use gfnact::stats::spearman;
use gfnact::surrogate::{augment, bald_mi, mixup, EnsemblePrediction, MixupConfig};
use proptest::prelude::*;

fn rows(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, k).prop_map(|ps| ps.into_iter().flat_map(|p| [p, 1.0 - p]).collect())
}

fn mask_config() -> impl Strategy<Value = MaskConfig> {
    (1usize..8, 0usize..12, 0.0f64..=1.0, any::<bool>(), any::<bool>()).prop_map(|(min, extra, eps, fb, da)| MaskConfig {
        min_length: min,
        max_length: min + extra,
        eps_stop: eps,
        forbid_backtrack: fb,
        depth_aware_stop: da,
    })
}

proptest! {
    #[test]
    fn bald_within_bounds(probs in (1usize..9).prop_flat_map(rows)) {
        let mi = bald_mi(&EnsemblePrediction::new(2, probs).unwrap());
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&mi));
    }

    #[test]
    fn bald_ignores_row_order(probs in (2usize..9).prop_flat_map(rows), shift in 0usize..8) {
        let k = probs.len() / 2;
        let mut rotated = probs.clone();
        rotated.rotate_left(2 * (shift % k));
        let a = bald_mi(&EnsemblePrediction::new(2, probs).unwrap());
        let b = bald_mi(&EnsemblePrediction::new(2, rotated).unwrap());
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn bald_zero_for_identical_rows(p in 0.0f64..=1.0, k in 1usize..9) {
        let probs: Vec<f64> = (0..k).flat_map(|_| [p, 1.0 - p]).collect();
        prop_assert!(bald_mi(&EnsemblePrediction::new(2, probs).unwrap()) <= 1e-12);
    }

    #[test]
    fn mixup_stays_on_segment(
        pair in (1usize..8).prop_flat_map(|d| (prop::collection::vec(-5.0f64..5.0, d), prop::collection::vec(-5.0f64..5.0, d))),
        lambda in 0.0f64..=1.0,
    ) {
        let (a, b) = pair;
        let m = mixup(&a, Label::Positive, &b, Label::Positive, lambda).unwrap();
        for ((x, y), v) in a.iter().zip(&b).zip(&m) {
            prop_assert!(*v >= x.min(*y) - 1e-12 && *v <= x.max(*y) + 1e-12);
        }
    }

    #[test]
    fn augment_balances_and_keeps_originals(n_pos in 1usize..6, n_neg in 1usize..40, seed in any::<u64>()) {
        let xs: Vec<Vec<f64>> = (0..n_pos + n_neg).map(|i| vec![i as f64, -(i as f64)]).collect();
        let ys: Vec<Label> = (0..n_pos + n_neg).map(|i| if i < n_pos { Label::Positive } else { Label::Negative }).collect();
        let cfg = MixupConfig { enabled: true, ratio: 1.0 };
        let (ax, ay) = augment(&xs, &ys, &cfg, &mut RngStream::new(seed, 1)).unwrap();
        prop_assert_eq!(&ax[..xs.len()], &xs[..]);
        let pos = ay.iter().filter(|&&l| l == Label::Positive).count();
        let neg = ay.iter().filter(|&&l| l == Label::Negative).count();
        prop_assert_eq!(pos.min(neg), pos.max(neg));
        // Synthetic points stay inside the minority class's bounding box.
        let (minority, lo, hi) = if n_pos <= n_neg { (Label::Positive, 0.0, (n_pos - 1) as f64) } else { (Label::Negative, n_pos as f64, (n_pos + n_neg - 1) as f64) };
        for (x, y) in ax.iter().zip(&ay).skip(xs.len()) {
            prop_assert_eq!(*y, minority);
            prop_assert!(x[0] >= lo - 1e-12 && x[0] <= hi + 1e-12);
        }
    }

    #[test]
    fn masks_are_sound(cfg in mask_config(), n in 2usize..8, x in 0usize..8, y in 0usize..8, t in 0usize..25, seed in any::<u64>()) {
        let (x, y) = (x % n, y % n);
        let env = GridEnv::new(n, cfg).unwrap();
        let state = GridState::new(x, y, t);
        let mask = env.valid_actions(&state, None, &mut RngStream::new(seed, 0)).unwrap();
        prop_assert!(mask.count() >= 1);
        if t >= cfg.max_length {
            prop_assert_eq!(mask.count(), 1);
            prop_assert!(mask.allows(Action::Stop));
        }
        for a in mask.allowed() {
            match env.step(&state, a).unwrap() {
                Transition::Moved(next) => {
                    prop_assert!(next.x < n && next.y < n);
                    prop_assert_eq!(next.t, t + 1);
                }
                Transition::Terminal { x: tx, y: ty } => prop_assert_eq!((tx, ty), (x, y)),
            }
        }
    }

    #[test]
    fn walks_stay_on_the_parent_dag(n in 2usize..7, moves in prop::collection::vec(0usize..4, 1..20)) {
        let env = GridEnv::new(n, MaskConfig { min_length: 1, max_length: 40, eps_stop: 0.5, forbid_backtrack: false, depth_aware_stop: false }).unwrap();
        let mut s = GridState::new(0, 0, 0);
        for m in moves {
            let a = Action::MOVES[m];
            if let Ok(Transition::Moved(next)) = env.step(&s, a) {
                let parents = env.dag_parents(&next).unwrap();
                prop_assert!(parents.iter().any(|(p, pa)| *p == s && *pa == a));
                s = next;
            }
        }
    }

    #[test]
    fn threshold_leaves_top_share_positive(values in prop::collection::vec(-10.0f64..10.0, 100..400)) {
        let th = compute_threshold(&values, 0.01).unwrap();
        let pos = values.iter().filter(|&&v| label(v, th) == Label::Positive).count();
        prop_assert!(pos <= values.len() / 100 + 1);
        let bigger = values.iter().map(|v| v + 1.0).collect::<Vec<_>>();
        prop_assert!((compute_threshold(&bigger, 0.01).unwrap() - th - 1.0).abs() < 1e-9);
    }

    #[test]
    fn top_k_dominates_the_rest(scores in prop::collection::vec(0.0f64..1.0, 1..60), k in 1usize..60) {
        let pool: Vec<(usize, usize)> = (0..scores.len()).map(|i| (i / 7, i % 7)).collect();
        let k = k.min(pool.len());
        let picked = top_k(&pool, &scores, k);
        prop_assert_eq!(picked.len(), k);
        let score = |p: &(usize, usize)| scores[pool.iter().position(|q| q == p).unwrap()];
        let worst_picked = picked.iter().map(score).fold(f64::INFINITY, f64::min);
        for p in pool.iter().filter(|p| !picked.contains(p)) {
            prop_assert!(score(p) <= worst_picked);
        }
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-30.0f64..30.0, 1..8)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn spearman_ignores_monotone_maps(a in prop::collection::vec(-3.0f64..3.0, 3..40), b in prop::collection::vec(-3.0f64..3.0, 3..40)) {
        let n = a.len().min(b.len());
        let (a, b) = (&a[..n], &b[..n]);
        let r = spearman(a, b).unwrap();
        let mapped: Vec<f64> = a.iter().map(|x| x.exp() * 2.0 + 1.0).collect();
        prop_assert!((spearman(&mapped, b).unwrap() - r).abs() <= 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
    }
}
