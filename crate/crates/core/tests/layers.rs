use std::rc::Rc;

use pasgnn::autodiff::{grad_check, CTensor, Tape};
use pasgnn::layers::{
    kaiming, link_graph_edges, link_graph_mask, BatchNorm, Cfl, CflStack, Cgal, Chal, Ctx, LayerFlags, NodeType,
    ParamStore, TypedFeatures, BN_EPS, BN_MOMENTUM,
};
use pasgnn::C64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const T: usize = 2;
const COUNTS: [usize; 3] = [2, 3, 1];
const DIMS: [usize; 3] = [5, 3, 4];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn features(seed: u64, counts: [usize; 3]) -> [CTensor; 3] {
    let mut r = rng(seed);
    [0, 1, 2].map(|i| kaiming(&[T * counts[i], DIMS[i]], 1, &mut r))
}

fn chal(seed: u64, flags: LayerFlags) -> (Chal, ParamStore) {
    let mut store = ParamStore::new();
    let layer = Chal::new(&mut store, "h", DIMS, 8, 2, [true; 3], flags, &mut rng(seed)).unwrap();
    (layer, store)
}

fn typed<'t>(tape: &'t Tape, x: &[Option<CTensor>; 3]) -> TypedFeatures<'t> {
    [0, 1, 2].map(|i| x[i].clone().map(|v| tape.constant(v)))
}

fn all_some(x: [CTensor; 3]) -> [Option<CTensor>; 3] {
    x.map(Some)
}

fn row_sums(v: &CTensor) -> Vec<f64> {
    let cols = *v.shape().last().unwrap();
    v.data().chunks(cols).map(|r| r.iter().map(|z| z.re).sum()).collect()
}

fn permute_rows(x: &CTensor, perm: &[usize]) -> CTensor {
    let cols = x.shape()[1];
    let n = perm.len();
    let mut out = x.clone();
    for t in 0..x.shape()[0] / n {
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..cols {
                out.data_mut()[(t * n + dst) * cols + c] = x.data()[(t * n + src) * cols + c];
            }
        }
    }
    out
}

fn max_diff(a: &CTensor, b: &CTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

#[test]
fn chal_attention_rows_are_distributions() {
    let (layer, store) = chal(1, LayerFlags::default());
    let x = all_some(features(2, COUNTS));
    let tape = Tape::new();
    let buffers = ParamStore::new();
    let ctx = Ctx::frozen(&tape, &store, &buffers, false);
    let feats = typed(&tape, &x);
    for src in NodeType::ALL {
        for dst in NodeType::ALL {
            if src == dst {
                continue;
            }
            let heads = layer.attention_weights(&ctx, &feats, (src, dst), T).unwrap();
            assert_eq!(heads.len(), 2);
            for a in heads {
                assert_eq!(a.shape(), &[T, COUNTS[src.index()], COUNTS[dst.index()]]);
                for s in row_sums(&a.value()) {
                    assert!((s - 1.0).abs() < 1e-12);
                }
                assert!(a.value().data().iter().all(|z| z.re >= 0.0 && z.im == 0.0));
            }
        }
        let sem = layer.semantic_weights(&ctx, &feats, src, T).unwrap().unwrap();
        assert_eq!(sem.shape(), &[T, 2]);
        for s in row_sums(&sem.value()) {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn singleton_neighbour_and_single_meta_path_get_weight_one() {
    let (layer, store) = chal(3, LayerFlags::default());
    let [bs, ue, ris] = features(4, COUNTS);
    let tape = Tape::new();
    let buffers = ParamStore::new();
    let ctx = Ctx::frozen(&tape, &store, &buffers, false);
    // One RIS node per sample.
    let feats = typed(&tape, &[Some(bs.clone()), Some(ue.clone()), Some(ris)]);
    for a in layer.attention_weights(&ctx, &feats, (NodeType::Bs, NodeType::Ris), T).unwrap() {
        assert!(a.value().data().iter().all(|z| (z.re - 1.0).abs() < 1e-15));
    }
    // Without RIS nodes the BS type has one adjacent meta-path.
    let feats = typed(&tape, &[Some(bs), Some(ue), None]);
    let sem = layer.semantic_weights(&ctx, &feats, NodeType::Bs, T).unwrap().unwrap();
    assert_eq!(sem.shape(), &[T, 1]);
    assert!(sem.value().data().iter().all(|z| (z.re - 1.0).abs() < 1e-15));
}

#[test]
fn identical_neighbours_get_uniform_weights() {
    let (layer, store) = chal(5, LayerFlags::default());
    let [bs, ue, ris] = features(6, COUNTS);
    let row: Vec<C64> = ue.data()[..DIMS[1]].to_vec();
    let same = CTensor::new(ue.shape(), row.iter().cycle().take(ue.len()).copied().collect()).unwrap();
    let tape = Tape::new();
    let buffers = ParamStore::new();
    let ctx = Ctx::frozen(&tape, &store, &buffers, false);
    let feats = typed(&tape, &[Some(bs), Some(same), Some(ris)]);
    for a in layer.attention_weights(&ctx, &feats, (NodeType::Bs, NodeType::Ue), T).unwrap() {
        assert!(a.value().data().iter().all(|z| (z.re - 1.0 / 3.0).abs() < 1e-12));
    }
}

#[test]
fn chal_is_permutation_equivariant() {
    let (layer, store) = chal(7, LayerFlags::default());
    let x = features(8, COUNTS);
    let perm = [2, 0, 1];
    let mut xp = x.clone();
    xp[1] = permute_rows(&x[1], &perm);
    let run = |x: [CTensor; 3]| -> Vec<CTensor> {
        let tape = Tape::new();
        let buffers = ParamStore::new();
        let ctx = Ctx::frozen(&tape, &store, &buffers, false);
        let out = layer.forward(&ctx, &typed(&tape, &all_some(x)), T).unwrap();
        out.iter().map(|v| v.unwrap().value().as_ref().clone()).collect()
    };
    let a = run(x);
    let b = run(xp);
    assert!(max_diff(&permute_rows(&a[1], &perm), &b[1]) < 1e-12);
    assert!(max_diff(&a[0], &b[0]) < 1e-12);
    assert!(max_diff(&a[2], &b[2]) < 1e-12);
}

#[test]
fn chal_ablations() {
    let x = features(9, COUNTS);
    let forward = |flags: LayerFlags| -> (Vec<CTensor>, ParamStore) {
        let (layer, store) = chal(10, flags);
        let tape = Tape::new();
        let buffers = ParamStore::new();
        let ctx = Ctx::frozen(&tape, &store, &buffers, false);
        let out = layer.forward(&ctx, &typed(&tape, &all_some(x.clone())), T).unwrap();
        (out.iter().map(|v| v.unwrap().value().as_ref().clone()).collect(), store)
    };
    let (no_mp, store) = forward(LayerFlags { message_passing: false, residual: true });
    for ty in NodeType::ALL {
        let i = ty.index();
        let w = store.get(store.id(&format!("h.w_res.{}", ty.tag())).unwrap());
        let tape = Tape::new();
        let expect = tape.constant(x[i].clone()).matmul(tape.constant(w.clone())).unwrap().crelu();
        assert!(max_diff(&no_mp[i], &expect.value()) < 1e-14);
    }
    let (full, _) = forward(LayerFlags::default());
    let (no_res, _) = forward(LayerFlags { message_passing: true, residual: false });
    assert!((0..3).all(|i| max_diff(&full[i], &no_res[i]) > 1e-6));
    assert!(no_res.iter().all(|v| v.data().iter().all(|z| z.re >= 0.0 && z.im >= 0.0)));
}

#[test]
fn link_graph_edge_count_matches_enumeration() {
    for b in 1..5 {
        for k in 1..6 {
            // Pairs sharing a BS plus pairs sharing a UE.
            let by_bs = b * k * (k - 1) / 2;
            let by_ue = k * b * (b - 1) / 2;
            assert_eq!(link_graph_edges(b, k), by_bs + by_ue);
            assert_eq!(2 * link_graph_edges(b, k), b * k * (k + b - 2));
            let mask = link_graph_mask(b, k);
            let n = b * k;
            assert!((0..n).all(|i| !mask[i * n + i]));
            assert!((0..n).all(|i| (0..n).all(|j| mask[i * n + j] == mask[j * n + i])));
        }
    }
    assert_eq!(link_graph_edges(2, 3), 9);
}

fn cgal(seed: u64, flags: LayerFlags) -> (Cgal, ParamStore) {
    let mut store = ParamStore::new();
    let layer = Cgal::new(&mut store, "g", 4, 3, 6, flags, &mut rng(seed)).unwrap();
    (layer, store)
}

#[test]
fn cgal_attention_is_masked_distribution() {
    let (b, k) = (2, 3);
    let n = b * k;
    let (layer, mut store) = cgal(11, LayerFlags::default());
    let mut r = rng(12);
    let x = kaiming(&[T * n, 4], 1, &mut r);
    let mask = Rc::new(link_graph_mask(b, k));
    let att = |store: &ParamStore| -> CTensor {
        let tape = Tape::new();
        let buffers = ParamStore::new();
        let ctx = Ctx::frozen(&tape, store, &buffers, false);
        layer.attention(&ctx, tape.constant(x.clone()), &mask, T).unwrap().value().as_ref().clone()
    };
    let a = att(&store);
    for (row, s) in row_sums(&a).into_iter().enumerate() {
        assert!((s - 1.0).abs() < 1e-12);
        let i = row % n;
        for j in 0..n {
            if !mask[i * n + j] {
                assert_eq!(a.data()[row * n + j], C64::new(0.0, 0.0));
            }
        }
    }
    // Zero attention vectors leave constant logits.
    for name in ["g.a.self", "g.a.nbr"] {
        let id = store.id(name).unwrap();
        store.set(id, CTensor::zeros(&[6, 1])).unwrap();
    }
    let a = att(&store);
    let degree = (k - 1 + b - 1) as f64;
    for row in 0..T * n {
        let i = row % n;
        for j in 0..n {
            let expect = if mask[i * n + j] { 1.0 / degree } else { 0.0 };
            assert!((a.data()[row * n + j].re - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn cgal_singleton_neighbourhood() {
    // B = 2, K = 1: each link's only neighbour is the other BS's link.
    let (layer, store) = cgal(13, LayerFlags::default());
    let x = kaiming(&[T * 2, 4], 1, &mut rng(14));
    let tape = Tape::new();
    let buffers = ParamStore::new();
    let ctx = Ctx::frozen(&tape, &store, &buffers, false);
    let a = layer.attention(&ctx, tape.constant(x), &Rc::new(link_graph_mask(2, 1)), T).unwrap();
    let v = a.value();
    for row in v.data().chunks(2).enumerate() {
        let (r, vals) = row;
        let other = 1 - r % 2;
        assert!((vals[other].re - 1.0).abs() < 1e-15);
    }
}

#[test]
fn cgal_equivariant_under_ue_relabelling() {
    let (b, k) = (2, 3);
    let n = b * k;
    let (layer, store) = cgal(15, LayerFlags::default());
    let mut r = rng(16);
    let x = kaiming(&[T * n, 4], 1, &mut r);
    let x0 = kaiming(&[T * n, 3], 1, &mut r);
    let ue_perm = [1, 2, 0];
    let perm: Vec<usize> = (0..n).map(|i| (i / k) * k + ue_perm[i % k]).collect();
    let mask = Rc::new(link_graph_mask(b, k));
    let run = |x: &CTensor, x0: &CTensor| -> CTensor {
        let tape = Tape::new();
        let buffers = ParamStore::new();
        let ctx = Ctx::frozen(&tape, &store, &buffers, false);
        layer
            .forward(&ctx, tape.constant(x.clone()), tape.constant(x0.clone()), &mask, T)
            .unwrap()
            .value()
            .as_ref()
            .clone()
    };
    let a = run(&x, &x0);
    let bp = run(&permute_rows(&x, &perm), &permute_rows(&x0, &perm));
    assert!(max_diff(&permute_rows(&a, &perm), &bp) < 1e-12);
}

#[test]
fn cgal_without_message_passing_is_residual_only() {
    let (layer, store) = cgal(17, LayerFlags { message_passing: false, residual: true });
    let mut r = rng(18);
    let x = kaiming(&[T * 4, 4], 1, &mut r);
    let x0 = kaiming(&[T * 4, 3], 1, &mut r);
    let tape = Tape::new();
    let buffers = ParamStore::new();
    let ctx = Ctx::frozen(&tape, &store, &buffers, false);
    let out = layer
        .forward(&ctx, tape.constant(x.clone()), tape.constant(x0.clone()), &Rc::new(link_graph_mask(2, 2)), T)
        .unwrap();
    let wp = tape.constant(store.get(store.id("g.w_prev").unwrap()).clone());
    let wi = tape.constant(store.get(store.id("g.w_input").unwrap()).clone());
    let expect = tape
        .constant(x)
        .matmul(wp)
        .unwrap()
        .add(tape.constant(x0).matmul(wi).unwrap())
        .unwrap();
    assert!(max_diff(&out.value(), &expect.value()) < 1e-14);
}

fn batch_norm(dim: usize) -> (BatchNorm, ParamStore, ParamStore) {
    let mut store = ParamStore::new();
    let mut buffers = ParamStore::new();
    let bn = BatchNorm::new(&mut store, &mut buffers, "bn", dim).unwrap();
    (bn, store, buffers)
}

#[test]
fn batch_norm_constant_batch_gives_shift() {
    let (bn, mut store, buffers) = batch_norm(2);
    let shift = CTensor::new(&[2], vec![C64::new(0.3, -1.2), C64::new(-2.0, 0.5)]).unwrap();
    store.set(store.id("bn.beta").unwrap(), shift.clone()).unwrap();
    let row = [C64::new(1.5, 2.0), C64::new(-0.7, 0.1)];
    let x = CTensor::new(&[5, 2], row.iter().cycle().take(10).copied().collect()).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::frozen(&tape, &store, &buffers, true);
    let y = bn.forward(&ctx, tape.constant(x)).unwrap();
    for r in y.value().data().chunks(2) {
        assert!((r[0] - shift.data()[0]).norm() < 1e-12);
        assert!((r[1] - shift.data()[1]).norm() < 1e-12);
    }
}

#[test]
fn batch_norm_standardizes_and_tracks_running_stats() {
    let (bn, store, buffers) = batch_norm(3);
    let mut r = rng(19);
    let x = kaiming(&[40, 3], 1, &mut r).map(|z| z * 4.0 + C64::new(2.0, -1.0));
    let tape = Tape::new();
    let ctx = Ctx::frozen(&tape, &store, &buffers, true);
    let y = bn.forward(&ctx, tape.constant(x.clone())).unwrap().value().as_ref().clone();
    for c in 0..3 {
        let col: Vec<C64> = (0..40).map(|i| y.data()[i * 3 + c]).collect();
        let mean: C64 = col.iter().sum::<C64>() / 40.0;
        let ms: f64 = col.iter().map(|z| z.norm_sqr()).sum::<f64>() / 40.0;
        assert!(mean.norm() < 1e-10);
        // Unit mean-square modulus, short of 1 only by the eps term.
        let xc: Vec<C64> = (0..40).map(|i| x.data()[i * 3 + c]).collect();
        let mu: C64 = xc.iter().sum::<C64>() / 40.0;
        let var: f64 = xc.iter().map(|z| (z - mu).norm_sqr()).sum::<f64>() / 40.0;
        assert!((ms - var / (var + BN_EPS)).abs() < 1e-12);
        assert!((ms - 1.0).abs() < 1e-4);
        let updates = ctx.take_updates();
        if c == 0 {
            assert_eq!(updates.len(), 2);
            let (_, rm) = &updates[0];
            let (_, rv) = &updates[1];
            assert!((rm.data()[c] - mu * BN_MOMENTUM).norm() < 1e-12);
            assert!((rv.data()[c].re - (1.0 - BN_MOMENTUM) - var * BN_MOMENTUM).abs() < 1e-12);
        }
    }
}

#[test]
fn batch_norm_eval_uses_frozen_stats() {
    let (bn, store, mut buffers) = batch_norm(2);
    let mean = CTensor::new(&[2], vec![C64::new(1.0, 1.0), C64::new(-1.0, 0.0)]).unwrap();
    let var = CTensor::from_real(&[2], &[4.0, 0.25]).unwrap();
    buffers.set(buffers.id("bn.running_mean").unwrap(), mean.clone()).unwrap();
    buffers.set(buffers.id("bn.running_var").unwrap(), var.clone()).unwrap();
    let x = kaiming(&[3, 2], 1, &mut rng(20));
    let run = || {
        let tape = Tape::new();
        let ctx = Ctx::frozen(&tape, &store, &buffers, false);
        let y = bn.forward(&ctx, tape.constant(x.clone())).unwrap().value().as_ref().clone();
        assert!(ctx.take_updates().is_empty());
        y
    };
    let y = run();
    assert_eq!(y, run());
    for i in 0..3 {
        for c in 0..2 {
            let expect = (x.data()[i * 2 + c] - mean.data()[c]) / (var.data()[c].re + BN_EPS).sqrt();
            assert!((y.data()[i * 2 + c] - expect).norm() < 1e-12);
        }
    }
}

#[test]
fn batch_norm_rejects_empty_batch() {
    let (bn, store, buffers) = batch_norm(2);
    let tape = Tape::new();
    let ctx = Ctx::frozen(&tape, &store, &buffers, true);
    assert!(bn.forward(&ctx, tape.constant(CTensor::zeros(&[0, 2]))).is_err());
}

#[test]
fn cfl_examples() {
    let mut store = ParamStore::new();
    let mut buffers = ParamStore::new();
    let layer = Cfl::new(&mut store, &mut buffers, "f", 3, 3, false, &mut rng(21)).unwrap();
    let x = kaiming(&[4, 3], 1, &mut rng(22));
    let eval = |store: &ParamStore, x: &CTensor| {
        let tape = Tape::new();
        let ctx = Ctx::frozen(&tape, store, &buffers, false);
        layer.forward(&ctx, tape.constant(x.clone())).unwrap().value().as_ref().clone()
    };
    assert_eq!(eval(&store, &x).shape(), &[4, 3]);

    let bias = CTensor::new(&[3], vec![C64::new(1.0, -1.0), C64::new(-0.5, 2.0), C64::new(0.2, 0.3)]).unwrap();
    store.set(store.id("f.w").unwrap(), CTensor::zeros(&[3, 3])).unwrap();
    store.set(store.id("f.b").unwrap(), bias).unwrap();
    let y = eval(&store, &x);
    let expect = [C64::new(1.0, 0.0), C64::new(0.0, 2.0), C64::new(0.2, 0.3)];
    for r in y.data().chunks(3) {
        assert_eq!(r, expect);
    }

    let mut eye = CTensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = C64::new(1.0, 0.0);
    }
    store.set(store.id("f.w").unwrap(), eye).unwrap();
    store.set(store.id("f.b").unwrap(), CTensor::zeros(&[3])).unwrap();
    let pos = x.map(|z| C64::new(z.re.abs(), z.im.abs()));
    assert_eq!(eval(&store, &pos), pos);
}

#[test]
fn disabled_stack_is_one_projection() {
    let mut store = ParamStore::new();
    let mut buffers = ParamStore::new();
    let stack = CflStack::new(&mut store, &mut buffers, "s", 3, 4, 8, 2, false, &mut rng(23)).unwrap();
    assert_eq!(store.len(), 2);
    assert!(buffers.is_empty());
    let x = kaiming(&[5, 4], 1, &mut rng(24));
    let tape = Tape::new();
    let ctx = Ctx::frozen(&tape, &store, &buffers, true);
    let y = stack.forward(&ctx, tape.constant(x.clone())).unwrap();
    let expect = tape
        .constant(x)
        .matmul(tape.constant(store.get(store.id("s.0.w").unwrap()).clone()))
        .unwrap();
    assert!(max_diff(&y.value(), &expect.value()) < 1e-14);
    // Linear output keeps negative parts.
    assert!(y.value().data().iter().any(|z| z.re < 0.0));
}

fn scalar_loss<'t>(tape: &'t Tape, v: pasgnn::autodiff::Var<'t>, seed: u64) -> pasgnn::Result<pasgnn::autodiff::Var<'t>> {
    let w = kaiming(&v.shape(), 1, &mut rng(seed));
    Ok(v.mul(tape.constant(w))?.sum()?.re())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn chal_gradients(seed in 0u64..1000, mp in any::<bool>(), res in any::<bool>()) {
        let (layer, store) = chal(seed, LayerFlags { message_passing: mp, residual: res });
        let x = features(seed + 1, COUNTS);
        let buffers = ParamStore::new();
        let mut params = store.values().to_vec();
        params.extend(x.iter().cloned());
        let np = store.len();
        let report = grad_check(|tape, v| {
            let ctx = Ctx::from_vars(v[..np].to_vec(), &buffers, false);
            let feats: TypedFeatures<'_> = [Some(v[np]), Some(v[np + 1]), Some(v[np + 2])];
            let out = layer.forward(&ctx, &feats, T)?;
            let mut total = tape.constant_real(&[1], &[0.0])?.sum()?;
            for (i, o) in out.iter().enumerate() {
                total = total.add(scalar_loss(tape, o.unwrap(), seed + 10 + i as u64)?)?;
            }
            Ok(total)
        }, &params, 1e-6).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{:?}", report);
    }

    #[test]
    fn cgal_gradients(seed in 0u64..1000, mp in any::<bool>(), res in any::<bool>()) {
        let (layer, store) = cgal(seed, LayerFlags { message_passing: mp, residual: res });
        let mut r = rng(seed + 1);
        let params: Vec<CTensor> = store.values().iter().cloned()
            .chain([kaiming(&[T * 6, 4], 1, &mut r), kaiming(&[T * 6, 3], 1, &mut r)])
            .collect();
        let np = store.len();
        let buffers = ParamStore::new();
        let mask = Rc::new(link_graph_mask(2, 3));
        let report = grad_check(|tape, v| {
            let ctx = Ctx::from_vars(v[..np].to_vec(), &buffers, false);
            let out = layer.forward(&ctx, v[np], v[np + 1], &mask, T)?;
            scalar_loss(tape, out, seed + 2)
        }, &params, 1e-6).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{:?}", report);
    }

    #[test]
    fn cfl_stack_gradients(seed in 0u64..1000, train in any::<bool>()) {
        let mut store = ParamStore::new();
        let mut buffers = ParamStore::new();
        let stack = CflStack::new(&mut store, &mut buffers, "s", 2, 5, 6, 3, true, &mut rng(seed)).unwrap();
        let mut params = store.values().to_vec();
        params.push(kaiming(&[7, 5], 1, &mut rng(seed + 1)));
        let np = store.len();
        let report = grad_check(|tape, v| {
            let ctx = Ctx::from_vars(v[..np].to_vec(), &buffers, train);
            let out = stack.forward(&ctx, v[np])?;
            scalar_loss(tape, out, seed + 2)
        }, &params, 1e-6).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{:?}", report);
    }

    #[test]
    fn parameter_shapes_ignore_node_counts(bs in 1usize..4, ue in 1usize..5, ris in 1usize..4, seed in 0u64..100) {
        let (layer, store) = chal(seed, LayerFlags::default());
        let (_, again) = chal(seed, LayerFlags::default());
        prop_assert_eq!(&store, &again);
        let x = all_some(features(seed, [bs, ue, ris]));
        let tape = Tape::new();
        let buffers = ParamStore::new();
        let ctx = Ctx::frozen(&tape, &store, &buffers, false);
        let out = layer.forward(&ctx, &typed(&tape, &x), T).unwrap();
        for (o, c) in out.iter().zip([bs, ue, ris]) {
            prop_assert_eq!(o.unwrap().shape(), &[T * c, 8][..]);
        }
    }
}
