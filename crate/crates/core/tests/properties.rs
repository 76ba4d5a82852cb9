use algm_core::merge::{
    clap_merge, compose, gbm_merge, unmerge, ClapParams, GbmParams, MergeOp, MergeRecord,
};
use algm_core::numkernel::{cosine_sim, pairwise_cosine, softmax_rows, COSINE_EPS};
use algm_core::vit::{
    encoder_forward, mlp_block, EncoderConfig, Image, Mode, TokenSet, WeightBundle, Window,
};
use algm_core::{exec, Matrix, Rng};
use proptest::prelude::*;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
}

/// Tokens drawn around a few shared directions, so thresholds in (0, 1) bite.
fn clustered_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    let centers = random_matrix(3, cols, seed ^ 0x9e37);
    Matrix::from_fn(rows, cols, |i, j| centers.get(i % 3, j) + 0.3 * rng.uniform(-1.0, 1.0))
}

fn random_image(cfg: &EncoderConfig, seed: u64) -> Image {
    let mut rng = Rng::new(seed);
    let n = cfg.image_h * cfg.image_w * 3;
    Image::new(cfg.image_h, cfg.image_w, (0..n).map(|_| rng.next_f32()).collect()).unwrap()
}

/// Mean of the original rows each surviving token stands for.
fn constituent_means(original: &Matrix, ts: &TokenSet) -> Matrix {
    let d = original.cols();
    let mut sums = vec![vec![0.0f64; d]; ts.len()];
    let mut counts = vec![0usize; ts.len()];
    for (i, &t) in ts.record.assignment.iter().enumerate() {
        counts[t] += 1;
        for (s, &v) in sums[t].iter_mut().zip(original.row(i)) {
            *s += v as f64;
        }
    }
    Matrix::from_fn(ts.len(), d, |t, j| (sums[t][j] / counts[t] as f64) as f32)
}

fn windows() -> impl Strategy<Value = Window> {
    prop_oneof![
        Just(Window::square(2)),
        Just(Window { h: 2, w: 1 }),
        Just(Window { h: 2, w: 4 }),
        Just(Window::square(4)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_symmetric_and_scale_invariant(
        seed in any::<u64>(),
        d in 1usize..24,
        alpha in 0.01f32..100.0,
        beta in 0.01f32..100.0,
    ) {
        let m = random_matrix(2, d, seed);
        let (u, v) = (m.row(0), m.row(1));
        prop_assert_eq!(cosine_sim(u, v, COSINE_EPS).unwrap(), cosine_sim(v, u, COSINE_EPS).unwrap());
        let su: Vec<f32> = u.iter().map(|x| x * alpha).collect();
        let sv: Vec<f32> = v.iter().map(|x| x * beta).collect();
        let a = cosine_sim(u, v, COSINE_EPS).unwrap();
        let b = cosine_sim(&su, &sv, COSINE_EPS).unwrap();
        prop_assert!((a - b).abs() <= 1e-6);
    }

    #[test]
    fn pairwise_matches_single_and_softmax_sums(seed in any::<u64>(), n in 1usize..12, d in 1usize..16) {
        let t = random_matrix(n, d, seed);
        let p = pairwise_cosine(&t);
        for i in 0..n {
            for j in 0..n {
                prop_assert!((p.get(i, j) - cosine_sim(t.row(i), t.row(j), COSINE_EPS).unwrap()).abs() <= 1e-7);
            }
        }
        let s = softmax_rows(&Matrix::from_fn(n, d, |i, j| t.get(i, j) * 50.0));
        for r in s.row_iter() {
            let sum: f64 = r.iter().map(|&x| x as f64).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn rng_streams_repeat(seed in any::<u64>()) {
        let mut a = Rng::new(seed);
        let mut b = Rng::new(seed);
        for _ in 0..32 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn merges_conserve_sizes_and_means(
        seed in any::<u64>(),
        window in windows(),
        gh_mul in 1usize..4,
        gw_mul in 1usize..4,
        d in 2usize..12,
        tau_clap in -1.0f32..1.0,
        tau_gbm in -1.0f32..1.0,
    ) {
        let (gh, gw) = (window.h * gh_mul, window.w * gw_mul);
        let x = clustered_matrix(gh * gw, d, seed);
        let ts = TokenSet::from_grid(x.clone(), gh, gw).unwrap();
        let mut rng = Rng::new(seed);
        let after_clap = clap_merge(&ts, &ClapParams::new(window, tau_clap, MergeOp::Average), &mut rng)
            .unwrap()
            .into_token_set(gh, gw);
        let after_gbm = gbm_merge(&after_clap, &GbmParams::new(tau_gbm, MergeOp::Average), &mut rng)
            .unwrap()
            .into_token_set(gh, gw);
        for step in [&after_clap, &after_gbm] {
            step.validate().unwrap();
            prop_assert_eq!(step.cluster_sizes.iter().map(|&s| s as usize).sum::<usize>(), gh * gw);
            prop_assert!(step.tokens.max_abs_diff(&constituent_means(&x, step)) <= 1e-5);
        }
        prop_assert!(after_gbm.len() <= after_clap.len() && after_clap.len() <= ts.len());
    }

    #[test]
    fn lower_threshold_never_merges_less(
        seed in any::<u64>(),
        window in windows(),
        d in 2usize..10,
        t1 in -1.0f32..1.01,
        t2 in -1.0f32..1.01,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (gh, gw) = (window.h * 2, window.w * 2);
        let ts = TokenSet::from_grid(clustered_matrix(gh * gw, d, seed), gh, gw).unwrap();
        let rng = Rng::new(0);
        let c = |t| clap_merge(&ts, &ClapParams::new(window, t, MergeOp::Average), &mut rng.clone()).unwrap().merged;
        prop_assert!(c(lo) >= c(hi));
        let g = |t| gbm_merge(&ts, &GbmParams::new(t, MergeOp::Average), &mut rng.clone()).unwrap().merged;
        prop_assert!(g(lo) >= g(hi));
    }

    #[test]
    fn duplicate_groups_round_trip_bit_exact(seed in any::<u64>(), gh_mul in 1usize..4, gw_mul in 1usize..4, d in 1usize..10) {
        // Every 2x2 window holds four copies of one vector.
        let (gh, gw) = (2 * gh_mul, 2 * gw_mul);
        let base = random_matrix(gh_mul * gw_mul, d, seed);
        let x = Matrix::from_fn(gh * gw, d, |i, j| base.get((i / gw / 2) * gw_mul + (i % gw) / 2, j));
        let ts = TokenSet::from_grid(x.clone(), gh, gw).unwrap();
        let mut rng = Rng::new(1);
        let merged = clap_merge(&ts, &ClapParams::new(Window::square(2), 0.999, MergeOp::Average), &mut rng)
            .unwrap()
            .into_token_set(gh, gw);
        prop_assert_eq!(merged.len(), gh_mul * gw_mul);
        prop_assert_eq!(unmerge(&merged).unwrap(), x.clone());

        // Adjacent pairs are copies; bipartite matching pairs each copy with its twin.
        let scales = random_matrix(4, 1, seed ^ 1);
        let y = Matrix::from_fn(8, d + 4, |i, j| if j == i / 2 { 1.0 + scales.get(i / 2, 0).abs() } else { 0.0 });
        let ts = TokenSet::from_grid(y.clone(), 2, 4).unwrap();
        let out = gbm_merge(&ts, &GbmParams::new(0.9999, MergeOp::Average), &mut rng).unwrap().into_token_set(2, 4);
        prop_assert_eq!(unmerge(&out).unwrap(), y);
    }

    #[test]
    fn replicate_keeps_counts(seed in any::<u64>(), d in 2usize..8, tau in -1.0f32..1.0) {
        let ts = TokenSet::from_grid(clustered_matrix(16, d, seed), 4, 4).unwrap();
        let mut rng = Rng::new(0);
        let a = clap_merge(&ts, &ClapParams::new(Window::square(2), tau, MergeOp::Replicate), &mut rng).unwrap();
        prop_assert_eq!(a.tokens.rows(), 16);
        prop_assert_eq!(&a.cluster_sizes, &ts.cluster_sizes);
        let g = gbm_merge(&a.into_token_set(4, 4), &GbmParams::new(tau, MergeOp::Replicate), &mut rng).unwrap();
        prop_assert_eq!(g.tokens.rows(), 16);
        prop_assert_eq!(g.cluster_sizes.iter().sum::<u32>(), 16);
    }

    #[test]
    fn unmerge_ignores_history(seed in any::<u64>(), tau in -1.0f32..0.9) {
        let ts = TokenSet::from_grid(clustered_matrix(16, 4, seed), 4, 4).unwrap();
        let mut out = clap_merge(&ts, &ClapParams::new(Window::square(2), tau, MergeOp::Average), &mut Rng::new(0))
            .unwrap()
            .into_token_set(4, 4);
        let with_history = unmerge(&out).unwrap();
        out.record.history.clear();
        prop_assert_eq!(unmerge(&out).unwrap(), with_history);
    }

    #[test]
    fn compose_is_associative(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = Rng::new(seed);
        let mut shrink = |len: usize| {
            let next = 1 + rng.below(len);
            // Surjective: the first `next` positions cover every target.
            let assignment = (0..len).map(|i| if i < next { i } else { rng.below(next) }).collect();
            (MergeRecord { assignment, history: Vec::new() }, next)
        };
        let (a, na) = shrink(n);
        let (b, nb) = shrink(na);
        let (c, _) = shrink(nb);
        let left = compose(&compose(&a, &b).unwrap(), &c).unwrap();
        let right = compose(&a, &compose(&b, &c).unwrap()).unwrap();
        prop_assert_eq!(left, right);
    }
}

fn small_cfg() -> EncoderConfig {
    EncoderConfig::new(32, 32, 4, 4, 16, 2, vec![3], 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn token_counts_never_increase(seed in any::<u64>(), tc in -1.0f32..1.0, tg in -1.0f32..1.0) {
        let cfg = small_cfg().with_thresholds(tc, tg);
        let w = WeightBundle::init_random(&cfg, seed).unwrap();
        let out = encoder_forward(&random_image(&cfg, seed), &cfg, &w, Mode::Algm).unwrap();
        let mut prev = cfg.num_tokens();
        for l in &out.schedule.layers {
            prop_assert!(l.mhsa <= prev && l.mlp <= l.mhsa && l.out <= l.mlp);
            prev = l.out;
        }
        out.tokens.validate().unwrap();
    }

    #[test]
    fn baseline_ignores_merge_settings(seed in any::<u64>(), tc in -1.0f32..1.0, k in prop_oneof![Just(2usize), Just(4)]) {
        let cfg = small_cfg();
        let w = WeightBundle::init_random(&cfg, seed).unwrap();
        let img = random_image(&cfg, seed ^ 5);
        let mut other = cfg.clone().with_thresholds(tc, -tc);
        other.clap_window = Window::square(k);
        other.gbm_layers = vec![2, 4];
        other.merge_op = MergeOp::RandomPick;
        let a = encoder_forward(&img, &cfg, &w, Mode::Baseline).unwrap();
        let b = encoder_forward(&img, &other, &w, Mode::Baseline).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mlp_commutes_with_unmerge(seed in any::<u64>(), tau in -1.0f32..0.8) {
        let cfg = small_cfg();
        let w = WeightBundle::init_random(&cfg, seed).unwrap();
        let ts = TokenSet::from_grid(clustered_matrix(64, 16, seed), 8, 8).unwrap();
        let merged = clap_merge(&ts, &ClapParams::new(Window::square(2), tau, MergeOp::Average), &mut Rng::new(0))
            .unwrap()
            .into_token_set(8, 8);
        let a = unmerge(&mlp_block(&merged, 2, &cfg, &w).unwrap()).unwrap();
        let full = TokenSet::from_grid(unmerge(&merged).unwrap(), 8, 8).unwrap();
        let b = mlp_block(&full, 2, &cfg, &w).unwrap().tokens;
        prop_assert!(a.max_abs_diff(&b) <= 1e-6);
    }
}

#[test]
fn forward_is_deterministic_and_thread_count_independent() {
    let cfg = small_cfg().with_thresholds(0.2, 0.1);
    let w = WeightBundle::init_random(&cfg, 3).unwrap();
    let img = random_image(&cfg, 4);
    let one = exec::with_threads(1, || encoder_forward(&img, &cfg, &w, Mode::Algm)).unwrap().unwrap();
    let again = exec::with_threads(1, || encoder_forward(&img, &cfg, &w, Mode::Algm)).unwrap().unwrap();
    let four = exec::with_threads(4, || encoder_forward(&img, &cfg, &w, Mode::Algm)).unwrap().unwrap();
    assert_eq!(one, again);
    assert_eq!(one, four);
}
