//! Reference systems and exhaustive or randomized verification oracles.

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::channel::ChannelRealization;
use crate::mappings::{hzm_direction, spacing_readout_values, zf_matrix};
use crate::metrics::{energy_efficiency, rates_from_channel, DecisionSet};
use crate::model::{ModelConfig, Variant};
use crate::scenario::ScenarioConfig;
use crate::{Error, Result, C64};

/// Largest association space [`oracle_association`] will enumerate.
pub const ORACLE_LIMIT: usize = 4096;

/// Equal-spacing PA offsets `(B, N, M)`.
///
/// Packed at `delta_min` from the feed by default; `uniform` spreads them over
/// the whole waveguide instead.
pub fn fixed_pa_positions(cfg: &ScenarioConfig, uniform: bool) -> Vec<f64> {
    let m = cfg.pas_per_wg;
    let step = if uniform && m > 1 {
        cfg.wg_length / (m - 1) as f64
    } else {
        cfg.delta_min
    };
    let row: Vec<f64> = (0..m).map(|i| i as f64 * step).collect();
    (0..cfg.num_bs * cfg.num_wg).flat_map(|_| row.iter().copied()).collect()
}

/// The model variant trained without RIS assistance.
pub fn no_ris_mode(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig {
        variant: Variant::NoRis,
        ..cfg.clone()
    }
}

/// One uniformly chosen serving BS per UE, as `(B, K)` one-hot columns.
pub fn random_assoc<R: Rng + ?Sized>(k: usize, b: usize, rng: &mut R) -> Vec<f64> {
    let mut u = vec![0.0; b * k];
    for ki in 0..k {
        u[rng.random_range(0..b) * k + ki] = 1.0;
    }
    u
}

/// Per-BS power rescale and beam assembly for a given association.
///
/// `direction` is `(B, K, N)` unit rows, `p_tilde` and `u` are `(B, K)`.
/// Returns the beamformers `(B, K, N)`.
pub fn beams_for_assoc(cfg: &ScenarioConfig, direction: &[C64], p_tilde: &[f64], u: &[f64]) -> Vec<C64> {
    let (b, k, n) = (cfg.num_bs, cfg.num_ue, cfg.num_wg);
    let mut w = Vec::with_capacity(b * k * n);
    for bi in 0..b {
        let load: f64 = (0..k).map(|ki| u[bi * k + ki] * p_tilde[bi * k + ki]).sum();
        let factor = cfg.p_max / load.max(cfg.p_max);
        for ki in 0..k {
            let amp = (p_tilde[bi * k + ki] * factor).max(0.0).sqrt();
            let row = &direction[(bi * k + ki) * n..(bi * k + ki + 1) * n];
            w.extend(row.iter().map(|z| z * amp));
        }
    }
    w
}

/// Association index `idx` in base `b`, digit `k` choosing the BS of UE `k`.
fn decode_assoc(mut idx: usize, b: usize, k: usize) -> Vec<f64> {
    let mut u = vec![0.0; b * k];
    for ki in 0..k {
        u[(idx % b) * k + ki] = 1.0;
        idx /= b;
    }
    u
}

/// Sum rate of one association with frozen channels, directions and raw powers.
pub fn assoc_sum_rate(
    cfg: &ScenarioConfig,
    hhat: &[C64],
    direction: &[C64],
    p_tilde: &[f64],
    u: &[f64],
) -> Result<f64> {
    let d = DecisionSet {
        x_pa: Vec::new(),
        phi: Vec::new(),
        w: beams_for_assoc(cfg, direction, p_tilde, u),
        u: u.to_vec(),
    };
    Ok(rates_from_channel(hhat, &d, cfg)?.iter().sum())
}

/// Exhaustive best association over all `B^K` hard choices.
///
/// Ties keep the lowest enumeration index.
pub fn oracle_association(
    cfg: &ScenarioConfig,
    hhat: &[C64],
    direction: &[C64],
    p_tilde: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let (b, k) = (cfg.num_bs, cfg.num_ue);
    let total = (b as u128)
        .checked_pow(k as u32)
        .filter(|&t| t <= ORACLE_LIMIT as u128)
        .ok_or_else(|| Error::Config(format!("oracle association needs B^K <= {ORACLE_LIMIT}, got {b}^{k}")))?
        as usize;
    let srs: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|i| assoc_sum_rate(cfg, hhat, direction, p_tilde, &decode_assoc(i, b, k)))
        .collect::<Result<_>>()?;
    let (best, sr) = srs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
    Ok((decode_assoc(best, b, k), sr))
}

/// Best decision found by the probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub decisions: DecisionSet,
    pub sum_rate: f64,
    pub energy_efficiency: f64,
}

/// One feasible decision drawn through the readout mappings.
fn random_decision<R: Rng + ?Sized>(real: &ChannelRealization, rng: &mut R) -> Result<DecisionSet> {
    let c = real.config();
    let (b, k, n, m) = (c.num_bs, c.num_ue, c.num_wg, c.pas_per_wg);
    let raw: Vec<f64> = (0..b * n * m).map(|_| rng.random_range(-4.0..4.0)).collect();
    let x_pa = spacing_readout_values(&raw, c)?;
    let phi: Vec<C64> = (0..c.num_ris * c.ris_elems)
        .map(|_| C64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let hhat = real.effective_channel(&x_pa, (!phi.is_empty()).then_some(phi.as_slice()))?;
    let alpha: Vec<f64> = (0..b * k).map(|_| rng.random::<f64>()).collect();
    let p_tilde: Vec<f64> = (0..b * k).map(|_| c.p_max * rng.random::<f64>()).collect();
    let u = random_assoc(k, b, rng);
    let direction = concrete_hzm(c, &hhat, &alpha)?;
    let w = beams_for_assoc(c, &direction, &p_tilde, &u);
    Ok(DecisionSet { x_pa, phi, w, u })
}

/// HZM unit directions `(B, K, N)` for concrete channels and coefficients.
pub fn concrete_hzm(cfg: &ScenarioConfig, hhat: &[C64], alpha: &[f64]) -> Result<Vec<C64>> {
    let (b, k, n) = (cfg.num_bs, cfg.num_ue, cfg.num_wg);
    let tape = Tape::new();
    let h = tape.constant(crate::autodiff::CTensor::new(&[b * k, n], hhat.to_vec())?);
    let (q, _) = zf_matrix(h.reshape(&[b, k, n])?)?;
    let a = tape.constant_real(&[b * k], alpha)?;
    let d = hzm_direction(h, q.reshape(&[b * k, n])?, a)?;
    Ok(d.value().data().to_vec())
}

/// Best-of-`budget` uniformly drawn feasible decisions, ranked by sum rate.
pub fn random_search_probe<R: Rng + ?Sized>(
    real: &ChannelRealization,
    budget: usize,
    rng: &mut R,
) -> Result<ProbeResult> {
    if budget == 0 {
        return Err(Error::Config("random search budget must be positive".into()));
    }
    let mut best: Option<ProbeResult> = None;
    for _ in 0..budget {
        let d = random_decision(real, rng)?;
        let sr = crate::metrics::sum_rate(real, &d)?;
        if best.as_ref().is_none_or(|b| sr > b.sum_rate) {
            let ee = energy_efficiency(real, &d)?;
            best = Some(ProbeResult {
                decisions: d,
                sum_rate: sr,
                energy_efficiency: ee,
            });
        }
    }
    Ok(best.expect("budget is positive"))
}
