use std::f64::consts::PI;
use std::sync::Arc;

use pasgnn::autodiff::{grad_check, CTensor, Tape};
use pasgnn::channel::{effective_channel_batch, ChannelRealization};
use pasgnn::scenario::{build_scenario, Scenario, ScenarioConfig, Steering};
use pasgnn::C64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg(b: usize, r: usize, n: usize, m: usize, l: usize, k: usize, steering: Steering) -> ScenarioConfig {
    ScenarioConfig {
        num_bs: b,
        num_ris: r,
        num_wg: n,
        pas_per_wg: m,
        ris_elems: l,
        num_ue: k,
        steering,
        ..ScenarioConfig::default()
    }
}

fn random_offsets(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = Vec::new();
    for _ in 0..cfg.num_bs * cfg.num_wg {
        let mut row: Vec<f64> = (0..cfg.pas_per_wg).map(|_| rng.random::<f64>() * cfg.wg_length).collect();
        row.sort_by(f64::total_cmp);
        x.extend(row);
    }
    x
}

fn random_phases(n: usize, rng: &mut ChaCha8Rng) -> Vec<C64> {
    (0..n).map(|_| C64::from_polar(1.0, rng.random::<f64>() * 2.0 * PI)).collect()
}

/// Effective channel by direct summation over every path, written from the
/// channel formulas without reusing any library geometry helper. Also
/// returns, per entry, the sum of path magnitudes that bounds its rounding.
fn oracle_effective(real: &ChannelRealization, x_pa: &[f64], phi: &[C64]) -> (Vec<C64>, Vec<f64>) {
    let sc = real.scenario();
    let c = &sc.config;
    let (bn, rn, wn, mn, ln, kn) = (c.num_bs, c.num_ris, c.num_wg, c.pas_per_wg, c.ris_elems, c.num_ue);
    let k0 = 2.0 * PI / c.lambda;
    let kg = 2.0 * PI * c.n_eff / c.lambda;
    let sq_eta = 3e8 / (4.0 * PI * c.carrier_hz);
    let ka = (c.kappa / (1.0 + c.kappa)).sqrt();
    let kb = (1.0 / (1.0 + c.kappa)).sqrt();
    let norm = |a: [f64; 3], b: [f64; 3]| -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            s += (a[i] - b[i]) * (a[i] - b[i]);
        }
        s.sqrt()
    };
    let angle = |from: [f64; 3], to: [f64; 3]| -> f64 {
        let mut a = (to[1] - from[1]).atan2(to[0] - from[0]);
        if a < 0.0 {
            a += 2.0 * PI;
        }
        match c.steering {
            Steering::Literal => a,
            Steering::Cosine => a.cos(),
        }
    };
    let mut out = vec![C64::new(0.0, 0.0); bn * kn * wn];
    let mut scale = vec![0.0; bn * kn * wn];
    for b in 0..bn {
        for k in 0..kn {
            let pu = sc.ue_positions[k];
            for n in 0..wn {
                let feed = sc.bs_feed_points[b * wn + n];
                let mut acc = C64::new(0.0, 0.0);
                let mut mag = 0.0;
                for m in 0..mn {
                    let x = x_pa[(b * wn + n) * mn + m];
                    let pp = [feed[0] + x, feed[1], feed[2]];
                    let g = C64::new(-c.zeta * x, -kg * x).exp();
                    let d = norm(pu, pp);
                    let f = C64::new(0.0, -k0 * d).exp() * (sq_eta / d);
                    let mut coef = f.conj();
                    mag += f.norm() * g.norm();
                    for r in 0..rn {
                        let pr = sc.ris_positions[r];
                        let dr = norm(pr, pp);
                        let du = norm(pr, pu);
                        let a_pr = angle(pp, pr);
                        let a_ru = angle(pr, pu);
                        for l in 0..ln {
                            let los_h = C64::new(0.0, -k0 * l as f64 * c.elem_sep * a_pr).exp();
                            let hl = (los_h * ka + real.nlos_pa_ris()[(b * rn + r) * ln + l] * kb)
                                * (c.beta0 / dr.powf(c.path_loss_exp)).sqrt();
                            let los_u = C64::new(0.0, -k0 * l as f64 * c.elem_sep * a_ru).exp();
                            let hu = (los_u * ka + real.nlos_ris_ue()[(r * kn + k) * ln + l] * kb)
                                * (c.beta0 / du.powf(c.path_loss_exp)).sqrt();
                            coef += hu.conj() * phi[r * ln + l] * hl;
                            mag += (hu * hl).norm() * g.norm();
                        }
                    }
                    acc += coef * g;
                }
                out[(b * kn + k) * wn + n] = acc;
                scale[(b * kn + k) * wn + n] = mag;
            }
        }
    }
    (out, scale)
}

/// Worst entry error relative to that entry's summed path magnitude.
fn scaled_err(a: &[C64], b: &[C64], scale: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(scale)
        .map(|((x, y), s)| (x - y).norm() / s)
        .fold(0.0, f64::max)
}

fn rel_err(a: &[C64], b: &[C64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

fn instance(seed: u64, dims: (usize, usize, usize, usize, usize, usize), steering: Steering) -> ChannelRealization {
    let (b, r, n, m, l, k) = dims;
    let cfg = small_cfg(b, r, n, m, l, k, steering);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sc = build_scenario(&cfg, &mut rng).unwrap();
    ChannelRealization::draw(sc, &mut rng).unwrap()
}

#[test]
fn pa_ris_magnitude_at_one_meter_and_path_loss_scaling() {
    let cfg = ScenarioConfig {
        num_wg: 1,
        pas_per_wg: 1,
        num_ue: 1,
        ris_elems: 4,
        kappa: 1e12,
        ..ScenarioConfig::default()
    };
    let mut sc = build_scenario(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let feed = sc.bs_feed_points[0];
    sc.ris_positions[0] = [feed[0] + 1.0, feed[1], feed[2]];
    let real = ChannelRealization::draw(sc.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let h = real.pa_ris_channel(0, 0, &[0.0]).unwrap();
    assert_eq!(h.shape(), (4, 1));
    for z in h.iter() {
        assert!((z - C64::new(0.1, 0.0)).norm() < 1e-6);
    }
    sc.ris_positions[0] = [feed[0] + 2.0, feed[1], feed[2]];
    let real2 = ChannelRealization::new(sc, real.nlos_pa_ris().to_vec(), real.nlos_ris_ue().to_vec()).unwrap();
    let h2 = real2.pa_ris_channel(0, 0, &[0.0]).unwrap();
    let ratio = h2[(0, 0)].norm() / h[(0, 0)].norm();
    assert!((ratio - 2f64.powf(-1.4)).abs() < 1e-9);
}

#[test]
fn ris_ue_magnitude_and_determinism() {
    let cfg = ScenarioConfig {
        num_wg: 1,
        pas_per_wg: 1,
        num_ue: 1,
        ris_elems: 3,
        kappa: 1e12,
        ..ScenarioConfig::default()
    };
    let mut sc = build_scenario(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let u = sc.ue_positions[0];
    sc.ris_positions[0] = [u[0] - 1.0, u[1], 0.0];
    let a = ChannelRealization::draw(sc.clone(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let b = ChannelRealization::draw(sc.clone(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a, b);
    for z in a.ris_ue_channel(0, 0).iter() {
        assert!((z - C64::new(0.1, 0.0)).norm() < 1e-6);
    }
    sc.ris_positions[0] = [u[0] - 2.0, u[1], 0.0];
    let far = ChannelRealization::new(sc, a.nlos_pa_ris().to_vec(), a.nlos_ris_ue().to_vec()).unwrap();
    let ratio = far.ris_ue_channel(0, 0)[0].norm() / a.ris_ue_channel(0, 0)[0].norm();
    assert!((ratio - 2f64.powf(-1.4)).abs() < 1e-9);
}

#[test]
fn direct_link_below_pa() {
    let cfg = ScenarioConfig {
        num_wg: 2,
        pas_per_wg: 2,
        num_ue: 1,
        ..ScenarioConfig::default()
    };
    let mut sc = build_scenario(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let feed = sc.bs_feed_points[0];
    sc.ue_positions[0] = [feed[0] + 1.0, feed[1], 0.0];
    let real = ChannelRealization::draw(sc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let f = real.pa_ue_channel(0, 0, &[1.0, 2.0, 0.0, 3.0]).unwrap();
    assert_eq!(f.len(), 4);
    assert!((f[0].norm() - 7.958e-4).abs() < 1e-7);
    let phasor = C64::from_polar(1.0, -2.0 * PI * 5.0 / 0.05);
    assert!((f[0] / f[0].norm() - phasor).norm() < 1e-9);
}

#[test]
fn no_ris_reduces_to_direct_path() {
    let real = instance(5, (2, 0, 2, 2, 4, 2), Steering::Literal);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_offsets(real.config(), &mut rng);
    let h = real.effective_channel(&x, Some(&[])).unwrap();
    let cfg = real.config();
    for b in 0..2 {
        let g = pasgnn::channel::pinching_matrix(&x[b * 4..(b + 1) * 4], cfg).unwrap();
        for k in 0..2 {
            let row = real.pa_ue_channel(b, k, &x[b * 4..(b + 1) * 4]).unwrap().adjoint() * &g;
            for n in 0..2 {
                assert!((row[n] - h[(b * 2 + k) * 2 + n]).norm() < 1e-18);
            }
        }
    }
    let with_ris = instance(5, (2, 1, 2, 2, 4, 2), Steering::Literal);
    let dropped = with_ris.effective_channel(&x, None).unwrap();
    let stripped = with_ris.without_ris().effective_channel(&x, None).unwrap();
    assert_eq!(dropped, stripped);
}

#[test]
fn single_pa_identity_phase_matches_hand_chain() {
    let real = instance(8, (1, 1, 1, 1, 2, 1), Steering::Literal);
    let x = [3.0];
    let phi = [C64::new(1.0, 0.0); 2];
    let h = real.effective_channel(&x, Some(&phi)).unwrap();
    let f = real.pa_ue_channel(0, 0, &x).unwrap()[0];
    let hr = real.pa_ris_channel(0, 0, &x).unwrap();
    let hu = real.ris_ue_channel(0, 0);
    let g = pasgnn::channel::pinching_matrix(&x, real.config()).unwrap()[(0, 0)];
    let hand = (f.conj() + hu[0].conj() * hr[(0, 0)] + hu[1].conj() * hr[(1, 0)]) * g;
    assert!((h[0] - hand).norm() <= 1e-14 * hand.norm());
}

#[test]
fn frozen_fading_reused_across_positions() {
    let real = instance(2, (1, 1, 1, 2, 4, 1), Steering::Literal);
    let a = real.pa_ris_channel(0, 0, &[0.0, 1.0]).unwrap();
    let b = real.pa_ris_channel(0, 0, &[0.0, 2.0]).unwrap();
    assert_eq!(a.column(0), b.column(0));
    let again = real.pa_ris_channel(0, 0, &[0.0, 1.0]).unwrap();
    assert_eq!(a, again);
}

#[test]
fn permuting_ues_permutes_channel_rows() {
    let real = instance(12, (2, 2, 3, 2, 3, 3), Steering::Literal);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_offsets(real.config(), &mut rng);
    let phi = random_phases(6, &mut rng);
    let perm = [2, 0, 1];
    let base = real.effective_channel(&x, Some(&phi)).unwrap();
    let p = real.permute_ues(&perm).unwrap().effective_channel(&x, Some(&phi)).unwrap();
    for b in 0..2 {
        for (k, &src) in perm.iter().enumerate() {
            for n in 0..3 {
                assert_eq!(p[(b * 3 + k) * 3 + n], base[(b * 3 + src) * 3 + n]);
            }
        }
    }
    assert!(real.permute_ues(&[0, 0, 1]).is_err());
}

fn batch_inputs(reals: &[ChannelRealization], rng: &mut ChaCha8Rng) -> (CTensor, CTensor, Vec<Vec<f64>>, Vec<Vec<C64>>) {
    let c = reals[0].config();
    let (mut xs, mut ps, mut xd, mut pd) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in reals {
        let x = random_offsets(c, rng);
        let p = random_phases(c.num_ris * c.ris_elems, rng);
        xd.extend(x.iter().map(|&v| C64::new(v, 0.0)));
        pd.extend(p.iter().copied());
        xs.push(x);
        ps.push(p);
    }
    let xt = CTensor::new(&[reals.len() * c.num_bs * c.num_wg, c.pas_per_wg], xd).unwrap();
    let pt = CTensor::new(&[reals.len() * c.num_ris, c.ris_elems], pd).unwrap();
    (xt, pt, xs, ps)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn vectorized_matches_scalar_oracle(
        seed in any::<u64>(),
        b in 1usize..=3, r in 0usize..=3, n in 1usize..=3, m in 1usize..=3, l in 1usize..=3, k in 1usize..=3,
        cosine in any::<bool>(),
    ) {
        prop_assume!(k <= n);
        let steering = if cosine { Steering::Cosine } else { Steering::Literal };
        let real = instance(seed, (b, r, n, m, l, k), steering);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let x = random_offsets(real.config(), &mut rng);
        let phi = random_phases(r * l, &mut rng);
        let (oracle, scale) = oracle_effective(&real, &x, &phi);
        let got = real.effective_channel(&x, Some(&phi)).unwrap();
        let e = scaled_err(&got, &oracle, &scale);
        prop_assert!(e < 1e-12, "{e}");

        let tape = Tape::new();
        let xt = CTensor::from_real(&[b * n, m], &x).unwrap();
        let pt = CTensor::new(&[r, l], phi.clone()).unwrap();
        let phi_var = (r > 0).then(|| tape.constant(pt));
        let out = effective_channel_batch(&[Arc::new(real.clone())], tape.constant(xt), phi_var).unwrap();
        let fused = if r > 0 { out.value().data().to_vec() } else { real.effective_channel(&x, None).unwrap() };
        prop_assert!(scaled_err(&fused, &oracle, &scale) < 1e-12);
        for z in &phi {
            prop_assert!((z.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_channel_gradients(seed in any::<u64>(), cosine in any::<bool>()) {
        let steering = if cosine { Steering::Cosine } else { Steering::Literal };
        let reals: Vec<ChannelRealization> =
            (0..2).map(|i| instance(seed.wrapping_add(i), (2, 2, 2, 2, 3, 2), steering)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (xt, pt, _, _) = batch_inputs(&reals, &mut rng);
        let arcs: Vec<Arc<ChannelRealization>> = reals.into_iter().map(Arc::new).collect();
        let weights: Vec<C64> = (0..2 * 2 * 2 * 2).map(|i| C64::new((i as f64).sin(), (i as f64 * 0.3).cos())).collect();
        let report = grad_check(
            |tape, p| {
                let h = effective_channel_batch(&arcs, p[0], Some(p[1]))?;
                let w = tape.constant(CTensor::new(&[8, 2], weights.clone())?);
                // Scale to O(1): effective channels are ~1e-4.
                h.scale_re(1e4).mul(w)?.abs2().sum()
            },
            &[xt, pt],
            1e-6,
        ).unwrap();
        prop_assert!(report.max_rel_error < 1e-5, "{}", report.max_rel_error);
    }
}

#[test]
fn batch_without_phases_skips_reflection() {
    let reals: Vec<ChannelRealization> = (0..2).map(|i| instance(40 + i, (1, 2, 2, 2, 3, 2), Steering::Literal)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (xt, _, xs, _) = batch_inputs(&reals, &mut rng);
    let arcs: Vec<Arc<ChannelRealization>> = reals.iter().cloned().map(Arc::new).collect();
    let tape = Tape::new();
    let out = effective_channel_batch(&arcs, tape.constant(xt), None).unwrap();
    let expect: Vec<C64> = reals
        .iter()
        .zip(&xs)
        .flat_map(|(r, x)| r.effective_channel(x, None).unwrap())
        .collect();
    assert!(rel_err(out.value().data(), &expect) < 1e-13);
}

#[test]
fn scenario_reuse_keeps_infrastructure() {
    let real = instance(1, (2, 2, 2, 2, 2, 2), Steering::Literal);
    let sc: &Scenario = real.scenario();
    let moved = sc.with_ues(vec![[1.0, 1.0, 0.0]]);
    assert_eq!(moved.bs_feed_points, sc.bs_feed_points);
    assert_eq!(moved.config.num_ue, 1);
}
