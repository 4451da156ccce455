//! Feasibility-preserving readouts: every raw network output is mapped to a
//! decision that satisfies its constraint by construction.

use rand::RngCore;
use rand_distr::{Distribution, Gumbel};

use crate::autodiff::{CTensor, Tape, Var};
use crate::scenario::ScenarioConfig;
use crate::{Error, Result, C64};

/// Raw logits are clamped to this range before any sigmoid.
pub const SIGMOID_CLAMP: f64 = 30.0;
/// Moduli below this are treated as zero by the phase readout.
pub const PHASE_FLOOR: f64 = 1e-12;
/// Floor on the sum rate inside the losses.
pub const SR_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssocMode {
    /// Gumbel-Softmax relaxation over BSs.
    Train,
    /// Hard one-hot argmax over BSs.
    Infer,
}

/// Maps raw `(rows, M)` scores to PA offsets satisfying the range and
/// minimum-spacing constraints of every waveguide row.
pub fn spacing_readout<'t>(raw: Var<'t>, cfg: &ScenarioConfig) -> Result<Var<'t>> {
    let m = cfg.pas_per_wg;
    if raw.value().last_dim() != m || raw.shape().len() != 2 {
        return Err(Error::Shape(format!("spacing readout: {:?}, expected (rows, {m})", raw.shape())));
    }
    let dmax = cfg.delta_max();
    let delta = raw.clamp_re(-SIGMOID_CLAMP, SIGMOID_CLAMP).sigmoid_re().scale_re(dmax);
    let total = delta.sum_axis(1)?;
    let factor = total.max_re(dmax).recip()?.scale_re(dmax);
    let delta = delta.mul_colvec(factor)?;
    let packing: Vec<f64> = (0..m).map(|i| i as f64 * cfg.delta_min).collect();
    let packing = raw.tape().constant_real(&[m], &packing)?;
    delta.cumsum_last()?.add_rowvec(packing)
}

/// Unit-modulus RIS coefficients; the count of entries that fell below
/// [`PHASE_FLOOR`] and were replaced by `1 + 0j` is returned alongside.
pub fn phase_readout(v: Var<'_>) -> (Var<'_>, usize) {
    let flagged = v.value().data().iter().filter(|z| z.norm() < PHASE_FLOOR).count();
    (v.unit_phase(PHASE_FLOOR), flagged)
}

/// Batched zero-forcing `Q_b = Z_b^H (Z_b Z_b^H)^{-1}` for `z: (batch, K, N)`,
/// returned transposed as `(batch, K, N)` so row `k` is the ZF column for UE `k`.
///
/// Blocks whose Gram matrix fails to invert cleanly get `eps I` added with
/// `eps = 1e-9 trace / K`; their count is returned.
pub fn zf_matrix(z: Var<'_>) -> Result<(Var<'_>, usize)> {
    let zv = z.value();
    let (batch, k, n) = match zv.shape() {
        [b, k, n] => (*b, *k, *n),
        s => return Err(Error::Shape(format!("zf_matrix: {s:?}"))),
    };
    if k > n {
        return Err(Error::Shape(format!("zf_matrix: K = {k} exceeds N = {n}")));
    }
    let tape = z.tape();
    let zh = z.adjoint()?;
    let gram = z.bmm(zh)?;
    let gv = gram.value();
    let mut reg = CTensor::zeros(&[batch, k, k]);
    let mut flagged = 0;
    for b in 0..batch {
        let block = &gv.data()[b * k * k..(b + 1) * k * k];
        let well = gram_well_conditioned(block, k);
        tape.note_branches([u8::from(well)]);
        if !well {
            let trace: f64 = (0..k).map(|i| block[i * k + i].re).sum();
            let eps = (1e-9 * trace / k as f64).max(f64::MIN_POSITIVE);
            for i in 0..k {
                reg.data_mut()[b * k * k + i * k + i] = C64::new(eps, 0.0);
            }
            flagged += 1;
        }
    }
    let gram = if flagged > 0 { gram.add(tape.constant(reg))? } else { gram };
    let q = zh.bmm(gram.inverse()?)?;
    Ok((q.transpose()?, flagged))
}

/// Invertibility probe: a Gram block counts as well conditioned when its
/// inverse reproduces the identity to `1e-8`.
fn gram_well_conditioned(block: &[C64], k: usize) -> bool {
    let tape = Tape::new();
    let Ok(a) = CTensor::new(&[1, k, k], block.to_vec()) else { return false };
    let a = tape.constant(a);
    let Ok(inv) = a.inverse() else { return false };
    let Ok(prod) = a.bmm(inv) else { return false };
    let p = prod.value();
    if !p.all_finite() {
        return false;
    }
    (0..k).all(|i| {
        (0..k).all(|j| {
            let target = if i == j { 1.0 } else { 0.0 };
            (p.data()[i * k + j] - C64::new(target, 0.0)).norm() < 1e-8
        })
    })
}

/// Divides every row of a 2-D tensor by its Euclidean norm.
fn normalize_rows(x: Var<'_>) -> Result<Var<'_>> {
    let norms = x.row_norm()?.max_re(f64::MIN_POSITIVE).recip()?;
    x.mul_colvec(norms)
}

/// Hybrid ZF/MR unit directions.
///
/// `hhat` rows are the effective channels `h^H G`, `q` rows the matching ZF
/// columns, both `(rows, N)`; `alpha` has one entry per row in `[0, 1]`.
pub fn hzm_direction<'t>(hhat: Var<'t>, q: Var<'t>, alpha: Var<'t>) -> Result<Var<'t>> {
    if hhat.shape() != q.shape() || hhat.shape().len() != 2 {
        return Err(Error::Shape(format!("hzm_direction: {:?} vs {:?}", hhat.shape(), q.shape())));
    }
    let mr = normalize_rows(hhat.conj())?;
    let zf = normalize_rows(q)?;
    let one_minus = alpha.neg().add_scalar(C64::new(1.0, 0.0));
    let mix = zf.mul_colvec(alpha)?.add(mr.mul_colvec(one_minus)?)?;
    normalize_rows(mix)
}

/// `w = sqrt(p) * direction` per row.
pub fn assemble_beamformers<'t>(direction: Var<'t>, p: Var<'t>) -> Result<Var<'t>> {
    direction.mul_colvec(p.max_re(0.0).sqrt())
}

/// Association weights from `(T, B, K)` logits, normalized over the BS axis.
///
/// Train mode adds Gumbel(0, 1) noise when `noise` is given and applies a
/// temperature-`tau` softmax; infer mode is the noiseless argmax one-hot.
pub fn gumbel_assoc<'t>(
    logits: Var<'t>,
    tau: f64,
    noise: Option<&mut dyn RngCore>,
    mode: AssocMode,
) -> Result<Var<'t>> {
    let lv = logits.value();
    let (t, b, k) = match lv.shape() {
        [t, b, k] => (*t, *b, *k),
        s => return Err(Error::Shape(format!("gumbel_assoc: {s:?}, expected (T, B, K)"))),
    };
    match mode {
        AssocMode::Infer => Ok(logits.tape().constant(hard_assoc(&lv.re(), t, b, k))),
        AssocMode::Train => {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::Config(format!("Gumbel temperature must be positive, got {tau}")));
            }
            let shifted = match noise {
                Some(rng) => {
                    let gumbel = Gumbel::new(0.0, 1.0).expect("unit scale is valid");
                    let g: Vec<f64> = (0..lv.len()).map(|_| gumbel.sample(rng)).collect();
                    logits.add(logits.tape().constant_real(lv.shape(), &g)?)?
                }
                None => logits,
            };
            shifted.re().scale_re(1.0 / tau).softmax_re(1)
        }
    }
}

/// One-hot over `b` at the first maximal logit of every `(t, k)` column.
pub fn hard_assoc(logits: &[f64], t: usize, b: usize, k: usize) -> CTensor {
    let mut u = CTensor::zeros(&[t, b, k]);
    for ti in 0..t {
        for ki in 0..k {
            let mut best = 0;
            for bi in 1..b {
                if logits[(ti * b + bi) * k + ki] > logits[(ti * b + best) * k + ki] {
                    best = bi;
                }
            }
            u.data_mut()[(ti * b + best) * k + ki] = C64::new(1.0, 0.0);
        }
    }
    u
}

/// Per-BS powers `(T*B, K)` from raw scores and association weights.
///
/// `p~ = P_max sigmoid(raw)`, rescaled per BS so `sum_k u p~ <= P_max`.
pub fn power_readout<'t>(p_raw: Var<'t>, u: Var<'t>, p_max: f64) -> Result<Var<'t>> {
    let p_tilde = p_raw.clamp_re(-SIGMOID_CLAMP, SIGMOID_CLAMP).sigmoid_re().scale_re(p_max);
    power_normalize(p_tilde, u, p_max)
}

/// The per-BS rescale of [`power_readout`] applied to given `p~`.
pub fn power_normalize<'t>(p_tilde: Var<'t>, u: Var<'t>, p_max: f64) -> Result<Var<'t>> {
    let shape = p_tilde.shape();
    if shape.len() != 2 || u.value().len() != p_tilde.value().len() {
        return Err(Error::Shape(format!("power readout: p {:?} vs u {:?}", shape, u.shape())));
    }
    let u = u.reshape(&shape)?;
    let load = p_tilde.mul(u)?.sum_axis(1)?;
    let factor = load.max_re(p_max).recip()?.scale_re(p_max);
    p_tilde.mul_colvec(factor)
}

/// Concrete spacing readout of `(rows, M)` raw scores.
pub fn spacing_readout_values(raw: &[f64], cfg: &ScenarioConfig) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let rows = raw.len() / cfg.pas_per_wg.max(1);
    let x = spacing_readout(tape.constant_real(&[rows, cfg.pas_per_wg], raw)?, cfg)?;
    Ok(x.value().re())
}
