use pasgnn::baselines::{
    assoc_sum_rate, beams_for_assoc, concrete_hzm, fixed_pa_positions, oracle_association, random_assoc,
    random_search_probe,
};
use pasgnn::channel::ChannelRealization;
use pasgnn::metrics::{check_feasibility, sum_rate, DecisionSet, FeasibilityTol};
use pasgnn::scenario::{build_scenario, ScenarioConfig};
use pasgnn::C64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(b: usize, r: usize, n: usize, m: usize, k: usize) -> ScenarioConfig {
    ScenarioConfig {
        num_bs: b,
        num_ris: r,
        num_wg: n,
        pas_per_wg: m,
        ris_elems: 4,
        num_ue: k,
        ..ScenarioConfig::default()
    }
}

fn instance(c: &ScenarioConfig, seed: u64) -> ChannelRealization {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ChannelRealization::draw(build_scenario(c, &mut rng).unwrap(), &mut rng).unwrap()
}

/// Rate formula with explicit loops; `u` and `p` are `(B, K)`, rows of `h` and `w` are `(B, K, N)`.
fn loop_sum_rate(h: &[C64], w: &[C64], u: &[f64], b: usize, k: usize, n: usize, sigma2: f64) -> f64 {
    let dot = |bi: usize, kk: usize, kw: usize| -> C64 {
        (0..n).map(|ni| h[(bi * k + kk) * n + ni] * w[(bi * k + kw) * n + ni]).sum()
    };
    (0..k)
        .map(|kk| {
            let mut sig = C64::new(0.0, 0.0);
            let mut interf = 0.0;
            for bi in 0..b {
                sig += dot(bi, kk, kk) * u[bi * k + kk];
                for kp in (0..k).filter(|&kp| kp != kk) {
                    interf += (dot(bi, kk, kp) * u[bi * k + kp]).norm_sqr();
                }
            }
            (1.0 + sig.norm_sqr() / (interf + sigma2)).log2()
        })
        .sum()
}

#[test]
fn fixed_pa_geometry() {
    let c = cfg(2, 1, 3, 2, 2);
    let x = fixed_pa_positions(&c, false);
    assert_eq!(x.len(), 2 * 3 * 2);
    for row in x.chunks(2) {
        assert_eq!(row, [0.0, 0.1]);
    }
    let wide = fixed_pa_positions(&cfg(1, 1, 2, 5, 1), true);
    for row in wide.chunks(5) {
        assert_eq!(row, [0.0, 2.5, 5.0, 7.5, 10.0]);
    }
    for (c, uniform) in [(cfg(2, 1, 3, 4, 2), false), (cfg(2, 1, 3, 4, 2), true)] {
        let real = instance(&c, 1);
        let d = DecisionSet {
            x_pa: fixed_pa_positions(&c, uniform),
            phi: vec![C64::new(1.0, 0.0); c.num_ris * c.ris_elems],
            w: vec![C64::new(0.0, 0.0); c.num_bs * c.num_ue * c.num_wg],
            u: random_assoc(c.num_ue, c.num_bs, &mut ChaCha8Rng::seed_from_u64(2)),
        };
        let rep = check_feasibility(&d, real.config(), &FeasibilityTol::default());
        assert!(rep.passed(), "{rep:?}");
    }
}

#[test]
fn random_assoc_is_one_hot_and_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, k) = (4, 3);
    let draws = 100_000;
    let mut counts = vec![0usize; b * k];
    for _ in 0..draws {
        let u = random_assoc(k, b, &mut rng);
        for kk in 0..k {
            let col: Vec<f64> = (0..b).map(|bi| u[bi * k + kk]).collect();
            assert_eq!(col.iter().sum::<f64>(), 1.0);
            assert!(col.iter().all(|&v| v == 0.0 || v == 1.0));
        }
        for (c, v) in counts.iter_mut().zip(&u) {
            *c += *v as usize;
        }
    }
    for c in counts {
        assert!((c as f64 / draws as f64 - 0.25).abs() < 0.02 * 0.25);
    }
    assert_eq!(random_assoc(5, 1, &mut rng), vec![1.0; 5]);
}

#[test]
fn beams_respect_power_budget() {
    let c = cfg(2, 1, 3, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, k, n) = (c.num_bs, c.num_ue, c.num_wg);
    let hhat: Vec<C64> = (0..b * k * n).map(|_| C64::new(rng.random(), rng.random())).collect();
    let alpha: Vec<f64> = (0..b * k).map(|_| rng.random()).collect();
    let dir = concrete_hzm(&c, &hhat, &alpha).unwrap();
    for scale in [0.1, 1.0, 5.0] {
        let p: Vec<f64> = (0..b * k).map(|_| scale * c.p_max * rng.random::<f64>()).collect();
        let u = random_assoc(k, b, &mut rng);
        let w = beams_for_assoc(&c, &dir, &p, &u);
        for bi in 0..b {
            let used: f64 = (0..k)
                .map(|kk| u[bi * k + kk] * w[(bi * k + kk) * n..(bi * k + kk + 1) * n].iter().map(|z| z.norm_sqr()).sum::<f64>())
                .sum();
            let asked: f64 = (0..k).map(|kk| u[bi * k + kk] * p[bi * k + kk]).sum();
            assert!((used - asked.min(c.p_max)).abs() < 1e-12 * c.p_max);
        }
    }
}

#[test]
fn oracle_matches_hand_enumeration() {
    let c = cfg(2, 1, 2, 2, 2);
    let (b, k, n) = (2, 2, 2);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let hhat: Vec<C64> = (0..b * k * n)
            .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * 1e-4)
            .collect();
        let alpha: Vec<f64> = (0..b * k).map(|_| rng.random()).collect();
        let p: Vec<f64> = (0..b * k).map(|_| c.p_max * rng.random::<f64>()).collect();
        let dir = concrete_hzm(&c, &hhat, &alpha).unwrap();
        let cases: [[f64; 4]; 4] = [
            [1.0, 1.0, 0.0, 0.0],
            [0.0, 1.0, 1.0, 0.0],
            [1.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 1.0],
        ];
        let mut best = (f64::NEG_INFINITY, [0.0; 4]);
        for u in cases {
            let mut w = Vec::new();
            for bi in 0..b {
                let load: f64 = (0..k).map(|kk| u[bi * k + kk] * p[bi * k + kk]).sum();
                let f = if load > c.p_max { c.p_max / load } else { 1.0 };
                for kk in 0..k {
                    let amp = (p[bi * k + kk] * f).sqrt();
                    w.extend(dir[(bi * k + kk) * n..(bi * k + kk + 1) * n].iter().map(|z| z * amp));
                }
            }
            let sr = loop_sum_rate(&hhat, &w, &u, b, k, n, c.sigma2);
            assert!((sr - assoc_sum_rate(&c, &hhat, &dir, &p, &u).unwrap()).abs() < 1e-10 * sr.max(1.0));
            if sr > best.0 {
                best = (sr, u);
            }
        }
        let (u, sr) = oracle_association(&c, &hhat, &dir, &p).unwrap();
        assert!((sr - best.0).abs() < 1e-10 * sr.max(1.0));
        assert_eq!(u, best.1.to_vec());
    }
}

#[test]
fn oracle_rejects_large_spaces() {
    let c = cfg(3, 1, 8, 2, 8);
    let z = vec![C64::new(1.0, 0.0); 3 * 8 * 8];
    assert!(oracle_association(&c, &z, &z, &[1.0; 24]).unwrap_err().is_config());
}

#[test]
fn probe_budget_one_is_single_draw_and_monotone() {
    let c = cfg(2, 1, 2, 3, 2);
    let real = instance(&c, 5);
    let one = random_search_probe(&real, 1, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert!((sum_rate(&real, &one.decisions).unwrap() - one.sum_rate).abs() < 1e-12 * one.sum_rate.max(1.0));
    let mut prev = 0.0;
    for budget in [1, 2, 5, 20, 100] {
        let r = random_search_probe(&real, budget, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert!(r.sum_rate >= prev);
        prev = r.sum_rate;
        let rep = check_feasibility(&r.decisions, real.config(), &FeasibilityTol::default());
        assert!(rep.passed(), "{rep:?}");
    }
    assert!(random_search_probe(&real, 0, &mut ChaCha8Rng::seed_from_u64(6)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn oracle_dominates_every_association(seed in any::<u64>(), b in 1usize..=3, k in 1usize..=3) {
        let c = cfg(b, 1, 3, 2, k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nw = c.num_wg;
        let hhat: Vec<C64> = (0..b * k * nw).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
        let alpha: Vec<f64> = (0..b * k).map(|_| rng.random()).collect();
        let p: Vec<f64> = (0..b * k).map(|_| c.p_max * rng.random::<f64>()).collect();
        let dir = concrete_hzm(&c, &hhat, &alpha).unwrap();
        let (u, sr) = oracle_association(&c, &hhat, &dir, &p).unwrap();
        prop_assert_eq!(u.iter().sum::<f64>(), k as f64);
        for _ in 0..30 {
            let r = random_assoc(k, b, &mut rng);
            prop_assert!(assoc_sum_rate(&c, &hhat, &dir, &p, &r).unwrap() <= sr + 1e-12 * sr);
        }
    }
}
