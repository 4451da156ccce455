//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! `acceptance [N ...]` runs the listed criteria, all of them by default.

use std::sync::Arc;
use std::time::Instant;

use pasgnn::autodiff::{grad_check, CTensor, Tape};
use pasgnn::baselines::concrete_hzm;
use pasgnn::channel::ChannelRealization;
use pasgnn::evaluation::{evaluate, EvalMode, Summary};
use pasgnn::layers::{kaiming, Ctx};
use pasgnn::mappings::{gumbel_assoc, hard_assoc, AssocMode};
use pasgnn::metrics::{check_feasibility, loss_ee, loss_sr, rates, FeasibilityTol, RateDims};
use pasgnn::model::{AssocOverride, Model, ModelConfig, Variant};
use pasgnn::scenario::{build_scenario, sample_ues, ScenarioConfig};
use pasgnn::training::{generate_dataset, train, Dataset, Objective, TrainConfig};
use pasgnn::C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const DESK_SAMPLES: usize = 6250;
const DESK_TEST: usize = 500;
const DESK_HIDDEN: usize = 32;

fn scenario(b: usize, r: usize, n: usize, m: usize, l: usize, k: usize) -> ScenarioConfig {
    ScenarioConfig {
        num_bs: b,
        num_ris: r,
        num_wg: n,
        pas_per_wg: m,
        ris_elems: l,
        num_ue: k,
        ..ScenarioConfig::default()
    }
}

fn desk_scenario(m: usize) -> ScenarioConfig {
    scenario(2, 2, 4, m, 8, 3)
}

fn desk_train(seed: u64) -> TrainConfig {
    TrainConfig {
        objective: Objective::SumRate,
        epochs: 20,
        batch_size: 32,
        lr: 1e-2,
        milestones: vec![12, 17],
        lr_decay: 0.5,
        patience: 0,
        seed,
        ..TrainConfig::default()
    }
}

fn batch(cfg: &ScenarioConfig, t: usize, seed: u64) -> Vec<Arc<ChannelRealization>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = build_scenario(cfg, &mut rng).unwrap();
    (0..t)
        .map(|_| {
            let ues = sample_ues(cfg, &mut rng);
            Arc::new(ChannelRealization::draw(base.with_ues(ues), &mut rng).unwrap())
        })
        .collect()
}

fn model(mc: ModelConfig, seed: u64) -> Model {
    Model::new(mc, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn perturb(m: &mut Model, fan_in: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in m.params.values_mut() {
        let n = kaiming(p.shape(), fan_in, &mut rng);
        *p = p.zip_map(&n, |a, b| a + b);
    }
}

fn verdict(n: usize, pass: bool, detail: String) {
    println!("criterion {n:>2}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
}

fn c1() {
    let start = Instant::now();
    let cfg = scenario(2, 1, 2, 2, 4, 2);
    let mut worst = 0.0f64;
    let mut excluded_ok = true;
    let mut checks = 0;
    let mut excluded = 0;
    let mut per = Vec::new();
    for (ms, js, bs) in [(5u64, 104u64, 11u64), (6, 105, 12), (7, 106, 13)] {
        let mut m = model(ModelConfig::for_scenario(&cfg).with_hidden(16), ms);
        perturb(&mut m, 1250, js);
        let reals = batch(&cfg, 2, bs);
        for ee in [false, true] {
            let rep = grad_check(
                |tape, vars| {
                    let ctx = Ctx::from_vars(vars.to_vec(), &m.buffers, false);
                    let out = m.forward(&ctx, tape, &reals, AssocMode::Train, None, &AssocOverride::Learned)?;
                    if ee {
                        loss_ee(out.sr, out.tx_power, cfg.p_circuit)
                    } else {
                        loss_sr(out.sr)
                    }
                },
                m.params.values(),
                1e-6,
            )
            .unwrap();
            worst = worst.max(rep.max_rel_error);
            excluded_ok &= rep.excluded * 100 <= rep.coordinates;
            per.push(format!("{}/{ms}: {:.1e}", if ee { "ee" } else { "sr" }, rep.max_rel_error));
            excluded += rep.excluded;
            checks += rep.coordinates;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        worst < 1e-4 && excluded_ok && secs < 300.0,
        format!("max rel error {worst:.2e} (< 1e-4), {checks} coordinates, {excluded} kink-excluded, {secs:.0} s (< 300 s); per loss/seed [{}]", per.join(", ")),
    );
}

fn c2() {
    let configs = [
        scenario(2, 1, 2, 2, 4, 2),
        scenario(2, 2, 4, 2, 8, 3),
        scenario(3, 2, 4, 4, 4, 4),
        scenario(1, 1, 4, 3, 8, 2),
    ];
    let variants = [Variant::Full, Variant::Full, Variant::FixedPa, Variant::NoRis];
    let fans = [0usize, 1, 16, 1250];
    let tol = FeasibilityTol::default();
    let draws = 10_000;
    let mut failures = 0;
    for i in 0..draws {
        let cfg = &configs[i % configs.len()];
        let variant = variants[(i / configs.len()) % variants.len()];
        let mc = ModelConfig { variant, ..ModelConfig::for_scenario(cfg).with_hidden(8) };
        let mut m = model(mc, i as u64);
        let fan = fans[(i / 16) % fans.len()];
        if fan > 0 {
            perturb(&mut m, fan, 1_000_000 + i as u64);
        }
        let out = m.infer(&batch(cfg, 1, 2_000_000 + i as u64), &AssocOverride::Learned).unwrap();
        if !check_feasibility(&out[0].decisions, cfg, &tol).passed() {
            failures += 1;
        }
    }
    verdict(2, failures == 0, format!("{failures} infeasible of {draws} draws"));
}

/// Per-UE rates by explicit loops; rows of `h` and `w` are `(B, K, N)`, `u` is `(B, K)`.
fn loop_rates(h: &[C64], w: &[C64], u: &[f64], b: usize, k: usize, n: usize, sigma2: f64) -> Vec<f64> {
    let dot = |bi: usize, kh: usize, kw: usize| -> C64 {
        let mut s = C64::new(0.0, 0.0);
        for ni in 0..n {
            s += h[(bi * k + kh) * n + ni] * w[(bi * k + kw) * n + ni];
        }
        s
    };
    (0..k)
        .map(|kk| {
            let mut sig = C64::new(0.0, 0.0);
            let mut interf = 0.0;
            for bi in 0..b {
                sig += dot(bi, kk, kk) * u[bi * k + kk];
                for kp in 0..k {
                    if kp != kk {
                        interf += (dot(bi, kk, kp) * u[bi * k + kp]).norm_sqr();
                    }
                }
            }
            (1.0 + sig.norm_sqr() / (interf + sigma2)).log2()
        })
        .collect()
}

fn c3() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (b, k, n) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=8));
        let t = rng.random_range(1..=3);
        let sigma2 = 10f64.powf(rng.random_range(-12.0..-6.0));
        let scale = sigma2.sqrt() * 10f64.powf(rng.random_range(-1.0..2.0));
        let mut cn = |s: f64| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * s;
        let h: Vec<C64> = (0..t * b * k * n).map(|_| cn(scale)).collect();
        let w: Vec<C64> = (0..t * b * k * n).map(|_| cn(1.0)).collect();
        let u: Vec<f64> = (0..t * b * k).map(|_| rng.random::<f64>()).collect();
        let tape = Tape::new();
        let r = rates(
            tape.constant(CTensor::new(&[t * b * k, n], h.clone()).unwrap()),
            tape.constant(CTensor::new(&[t * b * k, n], w.clone()).unwrap()),
            tape.constant(CTensor::from_real(&[t * b, k], &u).unwrap()),
            sigma2,
            RateDims { samples: t, bs: b, ues: k, wgs: n },
        )
        .unwrap()
        .value()
        .re();
        let stride = b * k * n;
        for ti in 0..t {
            let expect = loop_rates(
                &h[ti * stride..(ti + 1) * stride],
                &w[ti * stride..(ti + 1) * stride],
                &u[ti * b * k..(ti + 1) * b * k],
                b,
                k,
                n,
                sigma2,
            );
            for (kk, e) in expect.iter().enumerate() {
                let got = r[ti * k + kk];
                worst = worst.max((got - e).abs() / e.abs().max(f64::MIN_POSITIVE));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(3, worst < 1e-10 && secs < 60.0, format!("max rel deviation {worst:.2e} (< 1e-10) over 100 instances, {secs:.2} s"));
}

fn c4() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut leak = 0.0f64;
    let mut align = 1.0f64;
    let mut instances = 0;
    while instances < 200 {
        let (b, k) = (rng.random_range(1..=3), rng.random_range(1..=4));
        let n = k + rng.random_range(0..=3);
        let cfg = scenario(b, 1, n, 2, 4, k);
        let h: Vec<C64> = (0..b * k * n)
            .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * 1e-4)
            .collect();
        // Well-conditioned draws only: smallest singular value of every BS block
        // at least 1e-2 of the largest.
        let conditioned = (0..b).all(|bi| {
            let m = nalgebra::DMatrix::from_fn(k, n, |r, c| h[(bi * k + r) * n + c]);
            let s = m.singular_values();
            s.min() >= 1e-2 * s.max()
        });
        if !conditioned {
            continue;
        }
        instances += 1;
        let norm = |v: &[C64]| v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let row = |v: &[C64], i: usize| v[i * n..(i + 1) * n].to_vec();
        let dot = |a: &[C64], w: &[C64]| a.iter().zip(w).map(|(x, y)| x * y).sum::<C64>();
        let zf = concrete_hzm(&cfg, &h, &vec![1.0; b * k]).unwrap();
        let mr = concrete_hzm(&cfg, &h, &vec![0.0; b * k]).unwrap();
        for bi in 0..b {
            for j in 0..k {
                let hj = row(&h, bi * k + j);
                for kk in (0..k).filter(|&kk| kk != j) {
                    let wk = row(&zf, bi * k + kk);
                    leak = leak.max(dot(&hj, &wk).norm() / (norm(&hj) * norm(&wk)));
                }
                let wj = row(&mr, bi * k + j);
                align = align.min(dot(&hj, &wj).norm() / norm(&hj));
            }
        }
    }
    verdict(
        4,
        leak < 1e-8 && align > 1.0 - 1e-10,
        format!("alpha=1 max normalized leakage {leak:.2e} (< 1e-8); alpha=0 min alignment 1 - {:.2e} (> 1 - 1e-10); {instances} instances", 1.0 - align),
    );
}

fn c5() {
    let cfg = scenario(2, 2, 4, 2, 8, 3);
    let perm = [2, 0, 1];
    let (bs, k, n) = (cfg.num_bs, cfg.num_ue, cfg.num_wg);
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut m = model(ModelConfig::for_scenario(&cfg).with_hidden(16), seed);
        perturb(&mut m, 64, 50 + seed);
        let reals = batch(&cfg, 3, 60 + seed);
        let permuted: Vec<_> = reals.iter().map(|r| Arc::new(r.permute_ues(&perm).unwrap())).collect();
        let a = m.infer(&reals, &AssocOverride::Learned).unwrap();
        let b = m.infer(&permuted, &AssocOverride::Learned).unwrap();
        for (oa, ob) in a.iter().zip(&b) {
            let mut gap = |x: f64, y: f64, s: f64| worst = worst.max((x - y).abs() / s.max(1e-300));
            gap(oa.sum_rate, ob.sum_rate, oa.sum_rate.abs().max(1.0));
            for (xa, xb) in oa.decisions.x_pa.iter().zip(&ob.decisions.x_pa) {
                gap(*xa, *xb, 1.0);
            }
            for (pa, pb) in oa.decisions.phi.iter().zip(&ob.decisions.phi) {
                gap((pa - pb).norm(), 0.0, 1.0);
            }
            let wscale = oa.decisions.w.iter().map(|z| z.norm()).fold(0.0, f64::max);
            for bi in 0..bs {
                for (kk, &p) in perm.iter().enumerate() {
                    gap(oa.logits[bi * k + p], ob.logits[bi * k + kk], 1.0);
                    gap(oa.decisions.u[bi * k + p], ob.decisions.u[bi * k + kk], 1.0);
                    gap(oa.p_tilde[bi * k + p], ob.p_tilde[bi * k + kk], cfg.p_max);
                    for ni in 0..n {
                        let za = oa.decisions.w[(bi * k + p) * n + ni];
                        let zb = ob.decisions.w[(bi * k + kk) * n + ni];
                        gap((za - zb).norm(), 0.0, wscale);
                    }
                }
            }
        }
    }
    let counts: Vec<usize> = [2, 3, 4]
        .iter()
        .map(|&k| model(ModelConfig::for_scenario(&scenario(2, 2, 4, 2, 8, k)).with_hidden(16), 0).param_count())
        .collect();
    let same_count = counts.windows(2).all(|w| w[0] == w[1]);

    let data = generate_dataset(&cfg, 400, [8, 1, 1]).unwrap();
    let mut m = model(ModelConfig::for_scenario(&cfg).with_hidden(16), 0);
    let tc = TrainConfig { epochs: 2, ..desk_train(0) };
    train(&mut m, &data, &tc, |_| {}).unwrap();
    let mut transfer = Vec::new();
    let mut transfer_ok = true;
    for kt in [2, 4] {
        let test = generate_dataset(&scenario(2, 2, 4, 2, 8, kt), 50, [8, 1, 1]).unwrap();
        match evaluate(&m, &test, &test.split.test, EvalMode::Proposed, 0) {
            Ok(rows) => {
                let s = Summary::of(&rows);
                transfer_ok &= s.feasible_rate == 1.0;
                transfer.push(format!("K={kt} SR {:.3}", s.mean_sr));
            }
            Err(e) => {
                transfer_ok = false;
                transfer.push(format!("K={kt} error {e}"));
            }
        }
    }
    verdict(
        5,
        worst < 1e-9 && same_count && transfer_ok,
        format!(
            "equivariance gap {worst:.2e} (< 1e-9); params at K=2,3,4 {counts:?}; trained at K=3, evaluated {}",
            transfer.join(", ")
        ),
    );
}

fn c9() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut exact = true;
    let mut sum_err = 0.0f64;
    for _ in 0..200 {
        let (t, b, k) = (rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=5));
        let logits: Vec<f64> = (0..t * b * k).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let hard = hard_assoc(&logits, t, b, k);
        let tape = Tape::new();
        let l = tape.constant_real(&[t, b, k], &logits).unwrap();
        for tau in [1e-9, 1e-12] {
            let soft = gumbel_assoc(l, tau, None, AssocMode::Train).unwrap();
            exact &= soft.value().data() == hard.data();
        }
        exact &= gumbel_assoc(l, 1.0, None, AssocMode::Infer).unwrap().value().data() == hard.data();
        for tau in [0.1, 0.5, 1.0, 5.0] {
            let soft = gumbel_assoc(l, tau, Some(&mut rng), AssocMode::Train).unwrap().value();
            for ti in 0..t {
                for ki in 0..k {
                    let s: f64 = (0..b).map(|bi| soft.data()[(ti * b + bi) * k + ki].re).sum();
                    sum_err = sum_err.max((s - 1.0).abs());
                }
            }
        }
    }
    verdict(
        9,
        exact && sum_err < 1e-12,
        format!("tau->0 equals argmax one-hot: {exact}; train-mode max |column sum - 1| {sum_err:.2e} (< 1e-12)"),
    );
}

/// Trained desk-scale models and their test-set results.
struct Desk {
    data: Vec<(usize, Dataset)>,
    runs: Vec<Run>,
}

struct Run {
    m: usize,
    variant: Variant,
    residual: bool,
    seed: u64,
    model: Model,
    summary: Summary,
    secs: f64,
}

impl Desk {
    fn new() -> Self {
        Self { data: Vec::new(), runs: Vec::new() }
    }

    fn dataset(&mut self, m: usize) -> &Dataset {
        if !self.data.iter().any(|(mm, _)| *mm == m) {
            self.data.push((m, generate_dataset(&desk_scenario(m), DESK_SAMPLES, [8, 1, 1]).unwrap()));
        }
        &self.data.iter().find(|(mm, _)| *mm == m).unwrap().1
    }

    fn test_idx(&mut self, m: usize) -> Vec<usize> {
        self.dataset(m).split.test[..DESK_TEST].to_vec()
    }

    fn run(&mut self, m: usize, variant: Variant, residual: bool, seed: u64) -> &Run {
        let found = self
            .runs
            .iter()
            .position(|r| r.m == m && r.variant == variant && r.residual == residual && r.seed == seed);
        let i = match found {
            Some(i) => i,
            None => {
                let start = Instant::now();
                let idx = self.test_idx(m);
                let data = self.dataset(m);
                let mc = ModelConfig { variant, residual, ..ModelConfig::for_scenario(&data.config).with_hidden(DESK_HIDDEN) };
                let mut model = model(mc, seed);
                train(&mut model, data, &desk_train(seed), |_| {}).unwrap();
                let mode = match variant {
                    Variant::Full => EvalMode::Proposed,
                    Variant::FixedPa => EvalMode::FixedPa,
                    Variant::NoRis => EvalMode::NoRis,
                };
                let summary = Summary::of(&evaluate(&model, data, &idx, mode, seed).unwrap());
                let secs = start.elapsed().as_secs_f64();
                self.runs.push(Run { m, variant, residual, seed, model, summary, secs });
                self.runs.len() - 1
            }
        };
        &self.runs[i]
    }

    fn mean_sr(&mut self, m: usize, variant: Variant, residual: bool) -> (f64, f64) {
        let (mut sr, mut secs) = (0.0, 0.0);
        for s in SEEDS {
            let r = self.run(m, variant, residual, s);
            sr += r.summary.mean_sr;
            secs += r.secs;
        }
        (sr / SEEDS.len() as f64, secs)
    }
}

fn c6(desk: &mut Desk) {
    let start = Instant::now();
    let (full, t0) = desk.mean_sr(2, Variant::Full, true);
    let (fixed, t1) = desk.mean_sr(2, Variant::FixedPa, true);
    let (noris, t2) = desk.mean_sr(2, Variant::NoRis, true);
    let idx = desk.test_idx(2);
    let mut random = 0.0;
    for s in SEEDS {
        let data = &desk.data.iter().find(|(m, _)| *m == 2).unwrap().1;
        let run = desk.runs.iter().find(|r| r.m == 2 && r.variant == Variant::Full && r.residual && r.seed == s).unwrap();
        random += Summary::of(&evaluate(&run.model, data, &idx, EvalMode::RandomAssoc, s).unwrap()).mean_sr;
    }
    random /= SEEDS.len() as f64;
    let secs = (t0 + t1 + t2).max(start.elapsed().as_secs_f64());
    let gain = |base: f64| (full / base - 1.0) * 100.0;
    verdict(
        6,
        gain(random) >= 3.0 && gain(fixed) >= 2.0 && gain(noris) >= 1.0 && secs < 1800.0,
        format!(
            "mean SR proposed {full:.3}, random-U {random:.3} ({:+.2}% vs >= 3%), fixed-PA {fixed:.3} ({:+.2}% vs >= 2%), no-RIS {noris:.3} ({:+.2}% vs >= 1%); {secs:.0} s (< 1800 s)",
            gain(random),
            gain(fixed),
            gain(noris)
        ),
    );
}

fn c7(desk: &mut Desk) {
    let srs: Vec<f64> = [2, 3, 4].iter().map(|&m| desk.mean_sr(m, Variant::Full, true).0).collect();
    verdict(
        7,
        srs.windows(2).all(|w| w[1] >= w[0]),
        format!("mean test SR at M=2,3,4: {:.3}, {:.3}, {:.3} (non-decreasing)", srs[0], srs[1], srs[2]),
    );
}

fn c8(desk: &mut Desk) {
    let idx = desk.test_idx(2);
    let mut fractions = Vec::new();
    let (mut learned, mut random, mut oracle) = (0.0, 0.0, 0.0);
    for s in SEEDS {
        desk.run(2, Variant::Full, true, s);
        let data = &desk.data.iter().find(|(m, _)| *m == 2).unwrap().1;
        let run = desk.runs.iter().find(|r| r.m == 2 && r.variant == Variant::Full && r.residual && r.seed == s).unwrap();
        let l = evaluate(&run.model, data, &idx, EvalMode::Proposed, s).unwrap();
        let r = evaluate(&run.model, data, &idx, EvalMode::RandomAssoc, s).unwrap();
        let o = evaluate(&run.model, data, &idx, EvalMode::OracleAssoc, s).unwrap();
        let wins = l.iter().zip(&r).filter(|(a, b)| a.sum_rate >= b.sum_rate * (1.0 - 1e-12)).count();
        fractions.push(wins as f64 / idx.len() as f64);
        learned += Summary::of(&l).mean_sr;
        random += Summary::of(&r).mean_sr;
        oracle += Summary::of(&o).mean_sr;
    }
    let k = SEEDS.len() as f64;
    let min = fractions.iter().copied().fold(1.0, f64::min);
    let shown: Vec<String> = fractions.iter().map(|f| format!("{:.1}%", f * 100.0)).collect();
    verdict(
        8,
        min >= 0.8,
        format!(
            "learned >= random on [{}] of {} samples per seed (>= 80%); mean SR learned {:.3}, random {:.3}, oracle bound {:.3}",
            shown.join(", "),
            idx.len(),
            learned / k,
            random / k,
            oracle / k
        ),
    );
}

fn c10(desk: &mut Desk) {
    let (with, _) = desk.mean_sr(2, Variant::Full, true);
    let (without, _) = desk.mean_sr(2, Variant::Full, false);
    let per: Vec<String> = SEEDS
        .iter()
        .map(|&s| {
            let a = desk.run(2, Variant::Full, true, s).summary.mean_sr;
            let b = desk.run(2, Variant::Full, false, s).summary.mean_sr;
            format!("{:+.3}", a - b)
        })
        .collect();
    verdict(
        10,
        with - without > 0.0,
        format!(
            "mean test SR with residual {with:.4}, without {without:.4}, margin {:+.4} (> 0); per-seed margins [{}]",
            with - without,
            per.join(", ")
        ),
    );
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut desk = Desk::new();
    let start = Instant::now();
    for n in 1..=10 {
        if !on(n) {
            continue;
        }
        match n {
            1 => c1(),
            2 => c2(),
            3 => c3(),
            4 => c4(),
            5 => c5(),
            6 => c6(&mut desk),
            7 => c7(&mut desk),
            8 => c8(&mut desk),
            9 => c9(),
            _ => c10(&mut desk),
        }
    }
    eprintln!("total {:.0} s", start.elapsed().as_secs_f64());
}
