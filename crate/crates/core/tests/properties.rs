use kvsvd::bounds::{
    random_chain, theorem1_bound, theorem2_bound, theorem3_bound, verify_theorem1,
    verify_theorem3, Activation, ChainNetwork, ChainSpec, SILU_LIPSCHITZ,
};
use kvsvd::compressor::{compress_model, CompressedModel, LayerKind};
use kvsvd::densemat::{
    condition_number, low_rank_approx, random_orthonormal, svd, with_spectrum, Matrix,
};
use kvsvd::model::{generate_synthetic, preset, ModelConfig, SpectrumSpec};
use kvsvd::rng::Rng;
use kvsvd::runtime::{cache_bytes, decode};
use kvsvd::sensitivity::{
    layer_sensitivities, normalized_terms, plan_progressive, plan_uniform,
    sensitivities_from_conditions, solve_dmin, CompressionPlan,
};
use proptest::prelude::*;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    let mut rng = Rng::new(seed);
    Matrix::new(rows, cols, rng.gaussian_vec(rows * cols)).unwrap()
}

fn small_model(layers: usize, seed: u64, decay: f64) -> kvsvd::Model64 {
    let cfg = ModelConfig {
        num_layers: layers,
        ..preset("toy-small").unwrap()
    };
    generate_synthetic(&cfg, &SpectrumSpec::uniform(1.0, decay), seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_round_trip(rows in 1usize..14, cols in 1usize..14, seed in any::<u64>()) {
        let m = gaussian(rows, cols, seed);
        let s = svd(&m).unwrap();
        let rel = m.sub(&s.reconstruct()).unwrap().frobenius_norm() / m.frobenius_norm();
        prop_assert!(rel < 1e-10);
        prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.sigma.iter().all(|&x| x >= 0.0));
        let r = rows.min(cols);
        let utu = s.u.transpose().matmul(&s.u).unwrap();
        prop_assert!(utu.max_abs_diff(&Matrix::identity(r)).unwrap() < 1e-10);
    }

    #[test]
    fn eckart_young_every_k(rows in 2usize..12, cols in 2usize..12, seed in any::<u64>()) {
        let m = gaussian(rows, cols, seed);
        let s = svd(&m).unwrap();
        let total = m.frobenius_norm().powi(2);
        for k in 1..=rows.min(cols) {
            let err2 = m.sub(&low_rank_approx(&m, k).unwrap()).unwrap().frobenius_norm().powi(2);
            let tail: f64 = s.sigma[k..].iter().map(|x| x * x).sum();
            prop_assert!((err2 - tail).abs() < 1e-9 * total);
        }
    }

    #[test]
    fn singular_values_rotation_invariant(n in 2usize..10, m in 2usize..10, seed in any::<u64>()) {
        let a = gaussian(n, m, seed);
        let mut rng = Rng::new(seed ^ 0xABCD);
        let q1 = random_orthonormal(n, n, &mut rng);
        let q2 = random_orthonormal(m, m, &mut rng);
        let b = q1.matmul(&a).unwrap().matmul(&q2).unwrap();
        let (sa, sb) = (svd(&a).unwrap().sigma, svd(&b).unwrap().sigma);
        for (x, y) in sa.iter().zip(&sb) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn condition_number_scale_invariant(
        n in 2usize..10,
        seed in any::<u64>(),
        c in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3],
    ) {
        let a = gaussian(n + 2, n, seed);
        let k1 = condition_number(&a).unwrap();
        let k2 = condition_number(&a.scale(c)).unwrap();
        prop_assert!((k1 - k2).abs() <= 1e-8 * k1);
    }

    #[test]
    fn svd_is_deterministic(rows in 1usize..10, cols in 1usize..10, seed in any::<u64>()) {
        let m = gaussian(rows, cols, seed);
        prop_assert_eq!(svd(&m).unwrap(), svd(&m).unwrap());
    }

    // Relative accuracy on the smallest σ degrades like eps·κ, so decays stop
    // where κ = decay^-31 stays below about 1e7.
    #[test]
    fn synthetic_weights_realize_spectrum(seed in any::<u64>(), decay in 0.6f64..1.0, smax in 0.1f64..5.0) {
        let cfg = ModelConfig { num_layers: 1, ..preset("toy-small").unwrap() };
        let spec = SpectrumSpec::uniform(smax, decay);
        let w = generate_synthetic(&cfg, &spec, seed).unwrap();
        let want = spec.sigma_for(0, 64, 32);
        let got = svd(&w.layers[0].w_k).unwrap().sigma;
        for (a, b) in want.iter().zip(&got) {
            prop_assert!((a - b).abs() <= 1e-8 * a);
        }
    }
}

fn conds_strategy() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((1.0f64..50.0, 1.0f64..50.0), 1..20)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kappa_tilde_nonincreasing(conds in conds_strategy()) {
        let s = sensitivities_from_conditions(&conds);
        prop_assert!(s.windows(2).all(|w| w[0].kappa_tilde >= w[1].kappa_tilde));
    }

    #[test]
    fn progressive_dims_nonincreasing_and_endpoints(
        conds in conds_strategy(),
        d_max in 8usize..64,
        frac in 0.05f64..1.0,
        threshold in prop_oneof![Just(f64::INFINITY), 1.0f64..1e12],
    ) {
        let s = sensitivities_from_conditions(&conds);
        let d_min = ((d_max as f64 * frac) as usize).max(1);
        let p = plan_progressive(&s, 64, d_max, d_min, threshold).unwrap();
        let active: Vec<usize> = p.layers.iter().filter(|l| !l.skip).map(|l| l.d_c).collect();
        prop_assert!(active.windows(2).all(|w| w[0] >= w[1]));
        let t = normalized_terms(&s);
        let (lo, hi) = (
            s.iter().map(|l| l.log_kappa_tilde).fold(f64::INFINITY, f64::min),
            s.iter().map(|l| l.log_kappa_tilde).fold(f64::NEG_INFINITY, f64::max),
        );
        for (l, ti) in s.iter().zip(&t) {
            if l.log_kappa_tilde == hi {
                prop_assert_eq!(*ti, 0.0);
            }
            if l.log_kappa_tilde == lo && hi - lo >= 1e-9 {
                prop_assert_eq!(*ti, 1.0);
            }
        }
        for (lp, ti) in p.layers.iter().zip(&t) {
            if !lp.skip && *ti == 0.0 {
                prop_assert_eq!(lp.d_c, d_max);
            }
            if !lp.skip && *ti == 1.0 {
                prop_assert_eq!(lp.d_c, d_min);
            }
        }
    }

    #[test]
    fn skip_sets_agree(conds in conds_strategy(), threshold in 1.0f64..1e9, d in 1usize..64) {
        let s = sensitivities_from_conditions(&conds);
        let p = plan_progressive(&s, 64, 64, 1, threshold).unwrap();
        let u = plan_uniform(&s, 64, d, threshold).unwrap();
        prop_assert_eq!(p.skip_set(), u.skip_set());
    }

    #[test]
    fn solve_dmin_brackets(conds in conds_strategy(), target in 0.05f64..1.0) {
        let s = sensitivities_from_conditions(&conds);
        match solve_dmin(&s, 64, 64, f64::INFINITY, target) {
            Ok(d) => {
                let r = |d| plan_progressive(&s, 64, 64, d, f64::INFINITY).unwrap().retained_ratio();
                prop_assert!(r(d) <= target);
                if d < 64 {
                    prop_assert!(r(d + 1) > target);
                }
            }
            Err(kvsvd::Error::Infeasible { floor, .. }) => prop_assert!(floor > target),
            Err(e) => prop_assert!(false, "unexpected {e:?}"),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn plans_invariant_under_weight_scaling(seed in any::<u64>(), c in 0.01f64..100.0) {
        let w = small_model(3, seed, 0.85);
        let scaled = w.scale_projections(c);
        let (a, b) = (layer_sensitivities(&w).unwrap(), layer_sensitivities(&scaled).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.log_kappa_tilde - y.log_kappa_tilde).abs() < 1e-8);
        }
        prop_assert_eq!(
            plan_progressive(&a, 32, 32, 8, 1e30).unwrap().layers.iter().map(|l| l.d_c).collect::<Vec<_>>(),
            plan_progressive(&b, 32, 32, 8, 1e30).unwrap().layers.iter().map(|l| l.d_c).collect::<Vec<_>>()
        );
    }

    #[test]
    fn key_error_monotone_in_width(seed in any::<u64>()) {
        let w = small_model(1, seed, 0.9);
        let mut prev = f64::INFINITY;
        for d in (2..=32).step_by(3) {
            let e = w.layers[0].w_k.sub(&low_rank_approx(&w.layers[0].w_k, d).unwrap()).unwrap().frobenius_norm();
            prop_assert!(e <= prev + 1e-12);
            prev = e;
        }
    }

    #[test]
    fn mha_and_gqa_compress_alike(seed in any::<u64>(), d_c in 4usize..32) {
        let w = small_model(2, seed, 0.85);
        let mha = w.duplicate_kv_heads();
        let s = layer_sensitivities(&w).unwrap();
        let plan_g = plan_uniform(&s, 32, d_c, f64::INFINITY).unwrap();
        let plan_m = CompressionPlan::custom(&mha.config, &[(0, d_c), (1, d_c)]).unwrap();
        let cg = compress_model(&w, &plan_g).unwrap();
        let cm = compress_model(&mha, &plan_m).unwrap();
        let a = decode(&cg, &[3, 1, 4], 6).unwrap();
        let b = decode(&cm, &[3, 1, 4], 6).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            for (p, q) in x.iter().zip(y) {
                prop_assert!((p - q).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn cache_bytes_track_plan(seed in any::<u64>(), widths in prop::collection::vec(1usize..=32, 4)) {
        let w = small_model(4, seed, 0.9);
        let list: Vec<(usize, usize)> = widths.iter().copied().enumerate().collect();
        let plan = CompressionPlan::custom(&w.config, &list).unwrap();
        let full = cache_bytes(&w.config, None, 3, 100, 2, false);
        let comp = cache_bytes(&w.config, Some(&plan), 3, 100, 2, false);
        prop_assert_eq!(comp as f64 / full as f64, plan.retained_ratio());
        if widths.iter().any(|&d| d < 32) {
            prop_assert!(comp < full);
        }
        let cm: CompressedModel<f64> = compress_model(&w, &plan).unwrap();
        prop_assert!(cm.layers.iter().all(|l| matches!(l, LayerKind::Compressed(_))));
    }

    #[test]
    fn bound_hierarchy(rows in 2usize..16, cols in 2usize..16, seed in any::<u64>(), xn in 0.1f64..10.0) {
        let m = gaussian(rows, cols, seed);
        let k = (seed as usize) % rows.min(cols);
        let t1 = theorem1_bound(&m, k).unwrap() * xn;
        let t2 = theorem2_bound(&m, k, SILU_LIPSCHITZ, xn).unwrap();
        let net = ChainNetwork::new(vec![m.clone()], Activation::Relu).unwrap();
        let t3 = theorem3_bound(&net, &[k], xn).unwrap();
        prop_assert!(t1 <= t2);
        prop_assert!((t3 - t1).abs() <= 1e-12 * (1.0 + t1));
        prop_assert!(verify_theorem1(&m, k, 200, seed).unwrap().holds);
    }

    #[test]
    fn chains_never_violate(seed in any::<u64>(), relu in any::<bool>()) {
        let spec = ChainSpec {
            activation: if relu { Activation::Relu } else { Activation::Identity },
            ..ChainSpec::default()
        };
        let (net, ranks) = random_chain(&spec, seed).unwrap();
        prop_assert!(verify_theorem3(&net, &ranks, 100, seed).unwrap().holds);
        let base = theorem3_bound(&net, &ranks, 1.0).unwrap();
        for i in 0..net.depth() {
            if ranks[i] > 0 {
                let mut r = ranks.clone();
                r[i] -= 1;
                prop_assert!(theorem3_bound(&net, &r, 1.0).unwrap() >= base - 1e-15);
            }
        }
    }
}

#[test]
fn engineered_spectra_are_exact() {
    let mut rng = Rng::new(5);
    let sigma = [4.0, 2.0, 1.0, 0.5];
    let m = with_spectrum(9, 4, &sigma, &mut rng).unwrap();
    for (a, b) in svd(&m).unwrap().sigma.iter().zip(sigma) {
        assert!((a - b).abs() < 1e-12);
    }
}
