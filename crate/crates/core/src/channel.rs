//! Channel synthesis: in-waveguide propagation, PA-RIS, RIS-UE and direct
//! PA-UE links, and the effective channel that feeds the model.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{CTensor, Var};
use crate::scenario::{Point3, Scenario, ScenarioConfig, Steering};
use crate::{Error, Result, C64};

/// Absolute slack allowed on PA offsets produced by floating-point readouts.
pub const OFFSET_TOL: f64 = 1e-9;

fn dist(a: Point3, b: Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Azimuth of `to - from` in the x-y plane, wrapped to `[0, 2 pi)`.
pub fn azimuth(from: Point3, to: Point3) -> f64 {
    let a = (to[1] - from[1]).atan2(to[0] - from[0]);
    if a < 0.0 {
        (a + 2.0 * PI).min(2.0 * PI - f64::EPSILON * 8.0)
    } else {
        a
    }
}

fn nonzero_distance(d: f64, what: &str) -> Result<f64> {
    if d > 0.0 && d.is_finite() {
        Ok(d)
    } else {
        Err(Error::Numeric(format!("{what}: coincident positions (distance {d})")))
    }
}

/// Checks one BS's offsets `(N, M)` row-major: each waveguide sorted and in `[0, C]`.
pub fn validate_offsets(x_pa: &[f64], cfg: &ScenarioConfig) -> Result<()> {
    let m = cfg.pas_per_wg;
    if x_pa.len() != cfg.num_wg * m {
        return Err(Error::Shape(format!(
            "expected {} PA offsets per BS, got {}",
            cfg.num_wg * m,
            x_pa.len()
        )));
    }
    for (n, row) in x_pa.chunks(m).enumerate() {
        for (i, &x) in row.iter().enumerate() {
            if !(x >= -OFFSET_TOL && x <= cfg.wg_length + OFFSET_TOL) {
                return Err(Error::Infeasible(format!(
                    "PA offset {x} on waveguide {n} outside [0, {}]",
                    cfg.wg_length
                )));
            }
            if i > 0 && x < row[i - 1] {
                return Err(Error::Infeasible(format!("PA offsets on waveguide {n} are not sorted")));
            }
        }
    }
    Ok(())
}

/// Block-diagonal `MN x N` in-waveguide propagation matrix of one BS.
pub fn pinching_matrix(x_pa: &[f64], cfg: &ScenarioConfig) -> Result<DMatrix<C64>> {
    validate_offsets(x_pa, cfg)?;
    let (n, m) = (cfg.num_wg, cfg.pas_per_wg);
    let gamma = C64::new(cfg.zeta, 2.0 * PI / cfg.lambda_guided());
    let mut g = DMatrix::zeros(m * n, n);
    for wg in 0..n {
        for pa in 0..m {
            g[(wg * m + pa, wg)] = (-gamma * x_pa[wg * m + pa]).exp();
        }
    }
    Ok(g)
}

/// ULA steering vector `[exp(-j k0 l spacing s(aod))]_{l < L}`.
pub fn los_steering(aod: f64, l: usize, elem_sep: f64, lambda: f64, steering: Steering) -> DVector<C64> {
    let step = 2.0 * PI / lambda * elem_sep * steering.phase_factor(aod);
    DVector::from_iterator(l, (0..l).map(|i| C64::from_polar(1.0, -step * i as f64)))
}

/// i.i.d. `CN(0, 1)` entries.
pub fn draw_cn<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<C64> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    (0..len)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            C64::new(s * re, s * im)
        })
        .collect()
}

/// Rician combination `sqrt(k/(1+k)) los + sqrt(1/(1+k)) nlos`.
pub fn rician_combine(los: &DVector<C64>, nlos: &[C64], kappa: f64) -> DVector<C64> {
    let a = (kappa / (1.0 + kappa)).sqrt();
    let b = (1.0 / (1.0 + kappa)).sqrt();
    DVector::from_iterator(los.len(), los.iter().zip(nlos).map(|(l, n)| l * a + n * b))
}

pub fn draw_rician<R: Rng + ?Sized>(los: &DVector<C64>, kappa: f64, rng: &mut R) -> DVector<C64> {
    let nlos = draw_cn(los.len(), rng);
    rician_combine(los, &nlos, kappa)
}

/// All channel state of one sample: geometry plus frozen NLoS fading.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    scenario: Scenario,
    /// `(B, R, L)` row-major.
    nlos_pa_ris: Vec<C64>,
    /// `(R, K, L)` row-major.
    nlos_ris_ue: Vec<C64>,
    /// Cached `h_{r,k}`, `(R, K, L)` row-major.
    h_ris_ue: Vec<C64>,
}

impl ChannelRealization {
    pub fn new(scenario: Scenario, nlos_pa_ris: Vec<C64>, nlos_ris_ue: Vec<C64>) -> Result<Self> {
        let c = &scenario.config;
        let (b, r, k, l) = (c.num_bs, c.num_ris, c.num_ue, c.ris_elems);
        if scenario.ue_positions.len() != k
            || scenario.ris_positions.len() != r
            || scenario.bs_feed_points.len() != b * c.num_wg
        {
            return Err(Error::Shape("scenario node lists disagree with its config".into()));
        }
        if nlos_pa_ris.len() != b * r * l || nlos_ris_ue.len() != r * k * l {
            return Err(Error::Shape(format!(
                "NLoS draws of lengths {} / {} for (B, R, K, L) = ({b}, {r}, {k}, {l})",
                nlos_pa_ris.len(),
                nlos_ris_ue.len()
            )));
        }
        if !nlos_pa_ris.iter().chain(&nlos_ris_ue).all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(Error::Numeric("non-finite NLoS draw".into()));
        }
        let mut h_ris_ue = Vec::with_capacity(r * k * l);
        for ri in 0..r {
            let pr = scenario.ris_positions[ri];
            for ki in 0..k {
                let pu = scenario.ue_positions[ki];
                let d = nonzero_distance(dist(pr, pu), "RIS-UE link")?;
                let los = los_steering(azimuth(pr, pu), l, c.elem_sep, c.lambda, c.steering);
                let start = (ri * k + ki) * l;
                let small = rician_combine(&los, &nlos_ris_ue[start..start + l], c.kappa);
                let gain = (c.beta0 / d.powf(c.path_loss_exp)).sqrt();
                h_ris_ue.extend(small.iter().map(|z| z * gain));
            }
        }
        Ok(Self {
            scenario,
            nlos_pa_ris,
            nlos_ris_ue,
            h_ris_ue,
        })
    }

    /// Draws fresh NLoS fading for every PA-RIS and RIS-UE pair.
    pub fn draw<R: Rng + ?Sized>(scenario: Scenario, rng: &mut R) -> Result<Self> {
        let c = &scenario.config;
        let pa_ris = draw_cn(c.num_bs * c.num_ris * c.ris_elems, rng);
        let ris_ue = draw_cn(c.num_ris * c.num_ue * c.ris_elems, rng);
        Self::new(scenario, pa_ris, ris_ue)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.scenario.config
    }

    pub fn nlos_pa_ris(&self) -> &[C64] {
        &self.nlos_pa_ris
    }

    pub fn nlos_ris_ue(&self) -> &[C64] {
        &self.nlos_ris_ue
    }

    /// The same sample with UE `k` of the result taken from UE `perm[k]`.
    pub fn permute_ues(&self, perm: &[usize]) -> Result<Self> {
        let k = self.config().num_ue;
        let mut seen = vec![false; k];
        if perm.len() != k || !perm.iter().all(|&p| p < k && !std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("{perm:?} is not a permutation of 0..{k}")));
        }
        let l = self.config().ris_elems;
        let ues = perm.iter().map(|&p| self.scenario.ue_positions[p]).collect();
        let mut nlos = Vec::with_capacity(self.nlos_ris_ue.len());
        for r in 0..self.config().num_ris {
            for &p in perm {
                let s = (r * k + p) * l;
                nlos.extend_from_slice(&self.nlos_ris_ue[s..s + l]);
            }
        }
        Self::new(self.scenario.with_ues(ues), self.nlos_pa_ris.clone(), nlos)
    }

    /// The same sample with every RIS removed.
    pub fn without_ris(&self) -> Self {
        Self::new(self.scenario.without_ris(), Vec::new(), Vec::new())
            .expect("dropping RISs keeps the remaining state consistent")
    }

    fn pa_point(&self, b: usize, n: usize, x: f64) -> Point3 {
        self.scenario.pa_position(b, n, x)
    }

    /// `L x MN` channel from the PAs of BS `b` to RIS `r`.
    pub fn pa_ris_channel(&self, b: usize, r: usize, x_pa: &[f64]) -> Result<DMatrix<C64>> {
        let c = self.config();
        validate_offsets(x_pa, c)?;
        let (n, m, l) = (c.num_wg, c.pas_per_wg, c.ris_elems);
        let pr = self.scenario.ris_positions[r];
        let start = (b * c.num_ris + r) * l;
        let nlos = &self.nlos_pa_ris[start..start + l];
        let mut h = DMatrix::zeros(l, m * n);
        for wg in 0..n {
            for pa in 0..m {
                let pp = self.pa_point(b, wg, x_pa[wg * m + pa]);
                let d = nonzero_distance(dist(pr, pp), "PA-RIS link")?;
                let los = los_steering(azimuth(pp, pr), l, c.elem_sep, c.lambda, c.steering);
                let col = rician_combine(&los, nlos, c.kappa) * C64::new((c.beta0 / d.powf(c.path_loss_exp)).sqrt(), 0.0);
                h.set_column(wg * m + pa, &col);
            }
        }
        Ok(h)
    }

    /// `L`-vector channel from RIS `r` to UE `k`.
    pub fn ris_ue_channel(&self, r: usize, k: usize) -> DVector<C64> {
        let l = self.config().ris_elems;
        let s = (r * self.config().num_ue + k) * l;
        DVector::from_column_slice(&self.h_ris_ue[s..s + l])
    }

    /// `MN`-vector direct channel from the PAs of BS `b` to UE `k`.
    pub fn pa_ue_channel(&self, b: usize, k: usize, x_pa: &[f64]) -> Result<DVector<C64>> {
        let c = self.config();
        validate_offsets(x_pa, c)?;
        let (n, m) = (c.num_wg, c.pas_per_wg);
        let pu = self.scenario.ue_positions[k];
        let k0 = 2.0 * PI / c.lambda;
        let sq_eta = c.eta().sqrt();
        let mut f = DVector::zeros(m * n);
        for wg in 0..n {
            for pa in 0..m {
                let d = nonzero_distance(dist(pu, self.pa_point(b, wg, x_pa[wg * m + pa])), "PA-UE link")?;
                f[wg * m + pa] = C64::from_polar(sq_eta / d, -k0 * d);
            }
        }
        Ok(f)
    }

    /// Effective channels `(f^H + sum_r h^H Phi_r H) G` as `(B, K, N)` row-major.
    ///
    /// `x_pa` is `(B, N, M)` row-major; `phi` holds the `(R, L)` diagonals, and
    /// `None` drops the reflected paths.
    pub fn effective_channel(&self, x_pa: &[f64], phi: Option<&[C64]>) -> Result<Vec<C64>> {
        let c = self.config();
        let (bn, nm, k, r, l) = (c.num_bs, c.num_wg * c.pas_per_wg, c.num_ue, c.num_ris, c.ris_elems);
        if x_pa.len() != bn * nm {
            return Err(Error::Shape(format!("expected {} PA offsets, got {}", bn * nm, x_pa.len())));
        }
        if let Some(p) = phi {
            if p.len() != r * l {
                return Err(Error::Shape(format!("expected {} RIS phases, got {}", r * l, p.len())));
            }
        }
        let mut out = Vec::with_capacity(bn * k * c.num_wg);
        for b in 0..bn {
            let xb = &x_pa[b * nm..(b + 1) * nm];
            let g = pinching_matrix(xb, c)?;
            let reflect: Vec<DMatrix<C64>> = match phi {
                Some(p) => (0..r)
                    .map(|ri| {
                        let diag = DMatrix::from_diagonal(&DVector::from_column_slice(&p[ri * l..(ri + 1) * l]));
                        Ok(diag * self.pa_ris_channel(b, ri, xb)?)
                    })
                    .collect::<Result<_>>()?,
                None => Vec::new(),
            };
            for ki in 0..k {
                let mut row = self.pa_ue_channel(b, ki, xb)?.adjoint();
                for (ri, ph) in reflect.iter().enumerate() {
                    row += self.ris_ue_channel(ri, ki).adjoint() * ph;
                }
                out.extend((row * &g).iter().copied());
            }
        }
        Ok(out)
    }
}

/// Per-PA quantities of the effective channel and their derivatives in `x`.
struct PaTerms {
    g: C64,
    dg: C64,
    /// `conj(f_k)` for every UE.
    cf: Vec<C64>,
    dcf: Vec<C64>,
    /// PA-RIS column entries `H_{r,l}`.
    h: Vec<C64>,
    dh: Vec<C64>,
}

impl PaTerms {
    fn new(k: usize, rl: usize) -> Self {
        let z = C64::new(0.0, 0.0);
        Self {
            g: z,
            dg: z,
            cf: vec![z; k],
            dcf: vec![z; k],
            h: vec![z; rl],
            dh: vec![z; rl],
        }
    }
}

impl ChannelRealization {
    fn pa_terms(&self, b: usize, n: usize, x: f64, with_ris: bool, t: &mut PaTerms) {
        let c = self.config();
        let k0 = 2.0 * PI / c.lambda;
        let gamma = C64::new(c.zeta, 2.0 * PI / c.lambda_guided());
        t.g = (-gamma * x).exp();
        t.dg = -gamma * t.g;

        let pp = self.pa_point(b, n, x);
        let sq_eta = c.eta().sqrt();
        for (ki, &pu) in self.scenario.ue_positions.iter().enumerate() {
            let d = dist(pu, pp);
            let f = C64::from_polar(sq_eta / d, -k0 * d);
            let dd = (pp[0] - pu[0]) / d;
            let df = f * C64::new(-1.0 / d, -k0) * dd;
            t.cf[ki] = f.conj();
            t.dcf[ki] = df.conj();
        }
        if !with_ris {
            return;
        }
        let l = c.ris_elems;
        let a = (c.kappa / (1.0 + c.kappa)).sqrt();
        let bb = (1.0 / (1.0 + c.kappa)).sqrt();
        let half_alpha = c.path_loss_exp / 2.0;
        for (ri, &pr) in self.scenario.ris_positions.iter().enumerate() {
            let d = dist(pr, pp);
            let amp = c.beta0.sqrt() * d.powf(-half_alpha);
            let damp = -half_alpha * amp / d * ((pp[0] - pr[0]) / d);
            let (dx, dy) = (pr[0] - pp[0], pr[1] - pp[1]);
            let rho2 = dx * dx + dy * dy;
            let dphi = if rho2 > 0.0 { dy / rho2 } else { 0.0 };
            let phi = azimuth(pp, pr);
            let step = k0 * c.elem_sep * c.steering.phase_factor(phi);
            let dstep = k0 * c.elem_sep * c.steering.phase_factor_deriv(phi) * dphi;
            let nlos = &self.nlos_pa_ris[(b * c.num_ris + ri) * l..(b * c.num_ris + ri + 1) * l];
            for li in 0..l {
                let los = C64::from_polar(1.0, -step * li as f64);
                let dlos = los * C64::new(0.0, -dstep * li as f64);
                let small = los * a + nlos[li] * bb;
                t.h[ri * l + li] = small * amp;
                t.dh[ri * l + li] = small * damp + dlos * (a * amp);
            }
        }
    }
}

/// Differentiable batched effective channel.
///
/// `x_pa` is `(T*B*N, M)` real offsets and `phi` the optional `(T*R, L)` RIS
/// diagonals for the `T` realizations; the result is `(T*B*K, N)` with row
/// `(t*B + b)*K + k` holding the effective channel of BS `b` to UE `k`.
pub fn effective_channel_batch<'t>(
    reals: &[Arc<ChannelRealization>],
    x_pa: Var<'t>,
    phi: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let first = reals
        .first()
        .ok_or_else(|| Error::Shape("effective channel of an empty batch".into()))?;
    let c = first.config().clone();
    let (tn, bn, wn, mn, kn) = (reals.len(), c.num_bs, c.num_wg, c.pas_per_wg, c.num_ue);
    let with_ris = phi.is_some();
    let (rn, ln) = if with_ris { (c.num_ris, c.ris_elems) } else { (0, 0) };
    for r in reals {
        let rc = r.config();
        if (rc.num_bs, rc.num_wg, rc.pas_per_wg, rc.num_ue, rc.num_ris, rc.ris_elems)
            != (bn, wn, mn, kn, c.num_ris, c.ris_elems)
        {
            return Err(Error::Shape("realizations in a batch must share dimensions".into()));
        }
    }
    if x_pa.shape() != [tn * bn * wn, mn] {
        return Err(Error::Shape(format!(
            "effective channel: x_pa {:?}, expected [{}, {mn}]",
            x_pa.shape(),
            tn * bn * wn
        )));
    }
    if let Some(p) = phi {
        if p.shape() != [tn * rn, ln] {
            return Err(Error::Shape(format!(
                "effective channel: phi {:?}, expected [{}, {ln}]",
                p.shape(),
                tn * rn
            )));
        }
    }

    let x = x_pa.value();
    let ph = phi.map(|p| p.value());
    let mut out = CTensor::zeros(&[tn * bn * kn, wn]);
    let mut terms = PaTerms::new(kn, rn * ln);
    let mut v = vec![C64::new(0.0, 0.0); rn * ln];
    for (ti, real) in reals.iter().enumerate() {
        for b in 0..bn {
            for n in 0..wn {
                for m in 0..mn {
                    let xv = x.data()[((ti * bn + b) * wn + n) * mn + m].re;
                    real.pa_terms(b, n, xv, with_ris, &mut terms);
                    if let Some(p) = &ph {
                        for (i, vi) in v.iter_mut().enumerate() {
                            *vi = p.data()[ti * rn * ln + i] * terms.h[i];
                        }
                    }
                    for k in 0..kn {
                        let mut ck = terms.cf[k];
                        for r in 0..rn {
                            let hk = &real.h_ris_ue[(r * kn + k) * ln..(r * kn + k + 1) * ln];
                            for l in 0..ln {
                                ck += hk[l].conj() * v[r * ln + l];
                            }
                        }
                        out.data_mut()[((ti * bn + b) * kn + k) * wn + n] += ck * terms.g;
                    }
                }
            }
        }
    }

    let reals: Vec<Arc<ChannelRealization>> = reals.to_vec();
    let mut inputs = vec![x_pa];
    inputs.extend(phi);
    Ok(x_pa.tape().custom(
        &inputs,
        out,
        Box::new(move |g, ins, _| {
            let x = ins[0];
            let ph = ins.get(1);
            let mut gx = CTensor::zeros(x.shape());
            let mut gphi = ph.map(|p| CTensor::zeros(p.shape()));
            let mut terms = PaTerms::new(kn, rn * ln);
            let mut v = vec![C64::new(0.0, 0.0); rn * ln];
            let mut dv = vec![C64::new(0.0, 0.0); rn * ln];
            for (ti, real) in reals.iter().enumerate() {
                for b in 0..bn {
                    for n in 0..wn {
                        for m in 0..mn {
                            let xi = ((ti * bn + b) * wn + n) * mn + m;
                            real.pa_terms(b, n, x.data()[xi].re, ph.is_some(), &mut terms);
                            if let Some(p) = ph {
                                for i in 0..rn * ln {
                                    let pv = p.data()[ti * rn * ln + i];
                                    v[i] = pv * terms.h[i];
                                    dv[i] = pv * terms.dh[i];
                                }
                            }
                            let mut acc = 0.0;
                            for k in 0..kn {
                                let go = g.data()[((ti * bn + b) * kn + k) * wn + n];
                                let mut ck = terms.cf[k];
                                let mut dck = terms.dcf[k];
                                for r in 0..rn {
                                    let hk = &real.h_ris_ue[(r * kn + k) * ln..(r * kn + k + 1) * ln];
                                    for l in 0..ln {
                                        ck += hk[l].conj() * v[r * ln + l];
                                        dck += hk[l].conj() * dv[r * ln + l];
                                    }
                                }
                                acc += (go.conj() * (dck * terms.g + ck * terms.dg)).re;
                                if let Some(gp) = gphi.as_mut() {
                                    let s = go * terms.g.conj();
                                    for r in 0..rn {
                                        let hk = &real.h_ris_ue[(r * kn + k) * ln..(r * kn + k + 1) * ln];
                                        for l in 0..ln {
                                            gp.data_mut()[ti * rn * ln + r * ln + l] +=
                                                s * hk[l] * terms.h[r * ln + l].conj();
                                        }
                                    }
                                }
                            }
                            gx.data_mut()[xi] = C64::new(acc, 0.0);
                        }
                    }
                }
            }
            let mut res = vec![Some(gx)];
            if let Some(gp) = gphi {
                res.push(Some(gp));
            }
            res
        }),
    ))
}
