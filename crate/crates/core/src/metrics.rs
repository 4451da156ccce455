//! Rates, sum rate, energy efficiency, power accounting and constraint checks.

use std::f64::consts::LN_2;

use crate::autodiff::{CTensor, Tape, Var};
use crate::channel::ChannelRealization;
use crate::mappings::SR_FLOOR;
use crate::scenario::ScenarioConfig;
use crate::{Error, Result, C64};

/// A complete solution for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionSet {
    /// PA offsets, `(B, N, M)` row-major.
    pub x_pa: Vec<f64>,
    /// RIS diagonals, `(R, L)` row-major; empty when no RIS is used.
    pub phi: Vec<C64>,
    /// Beamformers, `(B, K, N)` row-major.
    pub w: Vec<C64>,
    /// Association weights, `(B, K)` row-major.
    pub u: Vec<f64>,
}

/// Dimensions `(T, B, K, N)` of a batched rate computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RateDims {
    pub samples: usize,
    pub bs: usize,
    pub ues: usize,
    pub wgs: usize,
}

/// Per-UE rates `(T, K)` in bit/s/Hz.
///
/// `hhat` and `w` are `(T*B*K, N)` (effective channel rows and beamformers),
/// `u` is `(T*B, K)`. Interference keeps the association weight inside the
/// modulus, `|u_{b,k'} h_{b,k}^H w_{b,k'}|^2`.
pub fn rates<'t>(hhat: Var<'t>, w: Var<'t>, u: Var<'t>, sigma2: f64, d: RateDims) -> Result<Var<'t>> {
    let RateDims { samples: t, bs: b, ues: k, wgs: n } = d;
    let rows = t * b * k;
    if hhat.shape() != [rows, n] || w.shape() != [rows, n] || u.value().len() != t * b * k {
        return Err(Error::Shape(format!(
            "rates: hhat {:?}, w {:?}, u {:?} for {d:?}",
            hhat.shape(),
            w.shape(),
            u.shape()
        )));
    }
    let tape = hhat.tape();
    let z = hhat.reshape(&[t * b, k, n])?;
    let wt = w.reshape(&[t * b, k, n])?.transpose()?;
    let cross = z.bmm(wt)?;
    let zero_rows = tape.constant(CTensor::zeros(&[t * b, k]));
    let u_cols = zero_rows.pair_add(u.reshape(&[t * b, k])?)?;
    let weighted = cross.mul(u_cols)?;
    let diag = weighted.diag()?;
    let signal = diag.reshape(&[t, b, k])?.sum_axis(1)?.abs2();
    let total = weighted.abs2().sum_axis(2)?;
    let interference = total.sub(diag.abs2())?.reshape(&[t, b, k])?.sum_axis(1)?;
    let sinr = signal.mul(interference.add_scalar(C64::new(sigma2, 0.0)).recip()?)?;
    Ok(sinr.add_scalar(C64::new(1.0, 0.0)).ln_re()?.scale_re(1.0 / LN_2))
}

/// Transmit power per BS `(T*B)`: `sum_k u ||w||^2`.
pub fn bs_power<'t>(w: Var<'t>, u: Var<'t>, d: RateDims) -> Result<Var<'t>> {
    let RateDims { samples: t, bs: b, ues: k, wgs: n } = d;
    let norms = w.reshape(&[t * b, k, n])?.abs2().sum_axis(2)?;
    norms.mul(u.reshape(&[t * b, k])?)?.sum_axis(1)
}

/// Mean over the batch of `1 / max(SR, floor)`.
pub fn loss_sr(sr: Var<'_>) -> Result<Var<'_>> {
    sr.max_re(SR_FLOOR).recip()?.mean()
}

/// Mean over the batch of `(P_tx + P_C) / max(SR, floor)`.
pub fn loss_ee<'t>(sr: Var<'t>, tx_power: Var<'t>, p_circuit: f64) -> Result<Var<'t>> {
    let consumed = tx_power.add_scalar(C64::new(p_circuit, 0.0));
    consumed.mul(sr.max_re(SR_FLOOR).recip()?)?.mean()
}

fn check_finite(d: &DecisionSet) -> Result<()> {
    let ok = d.x_pa.iter().chain(&d.u).all(|v| v.is_finite())
        && d.phi.iter().chain(&d.w).all(|z| z.re.is_finite() && z.im.is_finite());
    if ok {
        Ok(())
    } else {
        Err(Error::Numeric("decision set contains non-finite values".into()))
    }
}

fn check_dims(d: &DecisionSet, c: &ScenarioConfig) -> Result<()> {
    let (b, k, n) = (c.num_bs, c.num_ue, c.num_wg);
    if d.x_pa.len() != b * n * c.pas_per_wg
        || d.w.len() != b * k * n
        || d.u.len() != b * k
        || !(d.phi.is_empty() || d.phi.len() == c.num_ris * c.ris_elems)
    {
        return Err(Error::Shape("decision set does not match the scenario dimensions".into()));
    }
    Ok(())
}

/// Per-UE rates of a concrete decision.
pub fn per_user_rate(real: &ChannelRealization, d: &DecisionSet) -> Result<Vec<f64>> {
    let c = real.config();
    check_dims(d, c)?;
    check_finite(d)?;
    let phi = (!d.phi.is_empty()).then_some(d.phi.as_slice());
    let h = real.effective_channel(&d.x_pa, phi)?;
    rates_from_channel(&h, d, c)
}

/// Per-UE rates given precomputed effective channels `(B, K, N)`.
pub fn rates_from_channel(hhat: &[C64], d: &DecisionSet, c: &ScenarioConfig) -> Result<Vec<f64>> {
    let (b, k, n) = (c.num_bs, c.num_ue, c.num_wg);
    if hhat.len() != b * k * n {
        return Err(Error::Shape("effective channel does not match the scenario dimensions".into()));
    }
    let tape = Tape::new();
    let dims = RateDims { samples: 1, bs: b, ues: k, wgs: n };
    let r = rates(
        tape.constant(CTensor::new(&[b * k, n], hhat.to_vec())?),
        tape.constant(CTensor::new(&[b * k, n], d.w.clone())?),
        tape.constant(CTensor::from_real(&[b, k], &d.u)?),
        c.sigma2,
        dims,
    )?;
    Ok(r.value().re())
}

pub fn sum_rate(real: &ChannelRealization, d: &DecisionSet) -> Result<f64> {
    Ok(per_user_rate(real, d)?.iter().sum())
}

/// `sum_k u_{b,k} ||w_{b,k}||^2` for every BS.
pub fn per_bs_power(d: &DecisionSet, c: &ScenarioConfig) -> Vec<f64> {
    let (b, k, n) = (c.num_bs, c.num_ue, c.num_wg);
    (0..b)
        .map(|bi| {
            (0..k)
                .map(|ki| {
                    let row = &d.w[(bi * k + ki) * n..(bi * k + ki + 1) * n];
                    d.u[bi * k + ki] * row.iter().map(|z| z.norm_sqr()).sum::<f64>()
                })
                .sum()
        })
        .collect()
}

/// Sum rate over total consumed power (bit/J/Hz).
pub fn energy_efficiency(real: &ChannelRealization, d: &DecisionSet) -> Result<f64> {
    let c = real.config();
    let sr = sum_rate(real, d)?;
    Ok(sr / (per_bs_power(d, c).iter().sum::<f64>() + c.p_circuit))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityTol {
    /// Slack on `0 <= x <= C` and on the minimum spacing (m).
    pub position: f64,
    /// Slack on the unit modulus of RIS coefficients.
    pub modulus: f64,
    /// Relative slack on the per-BS power budget.
    pub power_rel: f64,
    /// Slack on association column sums.
    pub assoc: f64,
    /// Require one-hot association columns.
    pub hard: bool,
}

impl Default for FeasibilityTol {
    fn default() -> Self {
        Self {
            position: 1e-9,
            modulus: 1e-12,
            power_rel: 1e-9,
            assoc: 1e-12,
            hard: true,
        }
    }
}

/// Violation counts per constraint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeasibilityReport {
    /// `0 <= x <= C`.
    pub range: usize,
    /// Adjacent spacing `>= delta_min`.
    pub spacing: usize,
    /// Per-BS power `<= P_max`.
    pub power: usize,
    /// `|Phi_ll| = 1`.
    pub modulus: usize,
    /// `sum_b u_{b,k} = 1`.
    pub assoc_sum: usize,
    /// One-hot columns (hard mode only).
    pub one_hot: usize,
}

impl FeasibilityReport {
    pub fn failures(&self) -> usize {
        self.range + self.spacing + self.power + self.modulus + self.assoc_sum + self.one_hot
    }

    pub fn passed(&self) -> bool {
        self.failures() == 0
    }
}

pub fn check_feasibility(d: &DecisionSet, c: &ScenarioConfig, tol: &FeasibilityTol) -> FeasibilityReport {
    let mut rep = FeasibilityReport::default();
    let m = c.pas_per_wg;
    for row in d.x_pa.chunks(m) {
        for (i, &x) in row.iter().enumerate() {
            if !(x >= -tol.position && x <= c.wg_length + tol.position) {
                rep.range += 1;
            }
            if i > 0 && !(x - row[i - 1] >= c.delta_min - tol.position) {
                rep.spacing += 1;
            }
        }
    }
    for p in per_bs_power(d, c) {
        if !(p <= c.p_max * (1.0 + tol.power_rel)) {
            rep.power += 1;
        }
    }
    rep.modulus = d.phi.iter().filter(|z| !((z.norm() - 1.0).abs() < tol.modulus)).count();
    let (b, k) = (c.num_bs, c.num_ue);
    for ki in 0..k {
        let col: Vec<f64> = (0..b).map(|bi| d.u[bi * k + ki]).collect();
        let s: f64 = col.iter().sum();
        if !((s - 1.0).abs() <= tol.assoc) || col.iter().any(|&v| !(-tol.assoc..=1.0 + tol.assoc).contains(&v)) {
            rep.assoc_sum += 1;
        }
        if tol.hard && !(col.iter().filter(|&&v| v == 1.0).count() == 1 && col.iter().all(|&v| v == 0.0 || v == 1.0)) {
            rep.one_hot += 1;
        }
    }
    rep
}
