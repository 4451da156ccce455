//! The three-stage pipeline: ChanGNN, BeamGNN and AssocGNN.

use std::fmt;
use std::io::{Read, Write};
use std::rc::Rc;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{CTensor, Tape, Var};
use crate::baselines::fixed_pa_positions;
use crate::channel::{effective_channel_batch, ChannelRealization};
use crate::config::{fmt_f64, KvConfig};
use crate::layers::{
    link_graph_mask, read_arrays, write_arrays, Cgal, Chal, CflStack, Ctx, LayerFlags, NodeType, ParamStore,
    TypedFeatures,
};
use crate::mappings::{
    assemble_beamformers, gumbel_assoc, hzm_direction, phase_readout, power_normalize, spacing_readout, zf_matrix,
    AssocMode, SIGMOID_CLAMP,
};
use crate::metrics::{bs_power, per_bs_power, rates, DecisionSet, RateDims};
use crate::scenario::ScenarioConfig;
use crate::{Error, Result, C64};

const BUFFER_PREFIX: &str = "buffer:";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Learned PA positions and RIS phases.
    Full,
    /// PA positions fixed at equal spacing; everything else learned.
    FixedPa,
    /// RIS removed from the channel and from the Stage-1 graph.
    NoRis,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "proposed" => Ok(Variant::Full),
            "fixed-pa" | "fixed_pa" => Ok(Variant::FixedPa),
            "no-ris" | "no_ris" => Ok(Variant::NoRis),
            _ => Err(Error::Config(format!("unknown variant `{s}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::FixedPa => "fixed-pa",
            Variant::NoRis => "no-ris",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Layer counts `G_1 .. G_9`.
    pub layers: [usize; 9],
    pub hidden_chan: usize,
    pub hidden_beam: usize,
    pub hidden_assoc: usize,
    pub heads: usize,
    pub tau: f64,
    pub variant: Variant,
    /// Fixed-PA geometry spread uniformly over the waveguide instead of packed at the feed.
    pub fixed_pa_uniform: bool,
    pub message_passing: bool,
    pub residual: bool,
    /// Fully connected stacks per stage; disabled ones become one linear projection.
    pub cfl_chan: bool,
    pub cfl_beam: bool,
    pub cfl_assoc: bool,
    pub num_wg: usize,
    pub pas_per_wg: usize,
    pub ris_elems: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: [2; 9],
            hidden_chan: 64,
            hidden_beam: 64,
            hidden_assoc: 64,
            heads: 4,
            tau: 1.0,
            variant: Variant::Full,
            fixed_pa_uniform: false,
            message_passing: true,
            residual: true,
            cfl_chan: true,
            cfl_beam: true,
            cfl_assoc: true,
            num_wg: 8,
            pas_per_wg: 6,
            ris_elems: 64,
        }
    }
}

impl ModelConfig {
    /// Defaults with the antenna dimensions of `sc`.
    pub fn for_scenario(sc: &ScenarioConfig) -> Self {
        Self::default().with_dims(sc)
    }

    pub fn with_dims(mut self, sc: &ScenarioConfig) -> Self {
        self.num_wg = sc.num_wg;
        self.pas_per_wg = sc.pas_per_wg;
        self.ris_elems = sc.ris_elems;
        self
    }

    pub fn with_hidden(mut self, h: usize) -> Self {
        self.hidden_chan = h;
        self.hidden_beam = h;
        self.hidden_assoc = h;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.layers.iter().position(|&g| g == 0) {
            return Err(Error::Config(format!("G_{} must be at least 1", i + 1)));
        }
        for (name, h) in [
            ("hidden_chan", self.hidden_chan),
            ("hidden_beam", self.hidden_beam),
            ("hidden_assoc", self.hidden_assoc),
        ] {
            if h == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.heads == 0 || self.hidden_chan % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads must divide hidden_chan = {}",
                self.heads, self.hidden_chan
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau_gs must be positive, got {}", self.tau)));
        }
        if self.num_wg == 0 || self.pas_per_wg == 0 || self.ris_elems == 0 {
            return Err(Error::Config("N, M and L must be positive".into()));
        }
        Ok(())
    }

    /// Consumes model keys from `kv`.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let mut c = Self::default();
        for (i, g) in c.layers.iter_mut().enumerate() {
            *g = kv.take_or(&format!("G{}", i + 1), *g)?;
        }
        if let Some(h) = kv.take::<usize>("hidden")? {
            c = c.with_hidden(h);
        }
        c.hidden_chan = kv.take_or("hidden_chan", c.hidden_chan)?;
        c.hidden_beam = kv.take_or("hidden_beam", c.hidden_beam)?;
        c.hidden_assoc = kv.take_or("hidden_assoc", c.hidden_assoc)?;
        c.heads = kv.take_or("heads", c.heads)?;
        c.tau = kv.take_or("tau_gs", c.tau)?;
        c.variant = kv.take_or("variant", c.variant)?;
        c.fixed_pa_uniform = kv.take_bool("fixed_pa_uniform", c.fixed_pa_uniform)?;
        c.message_passing = kv.take_bool("message_passing", c.message_passing)?;
        c.residual = kv.take_bool("residual", c.residual)?;
        c.cfl_chan = kv.take_bool("cfl_chan", c.cfl_chan)?;
        c.cfl_beam = kv.take_bool("cfl_beam", c.cfl_beam)?;
        c.cfl_assoc = kv.take_bool("cfl_assoc", c.cfl_assoc)?;
        c.num_wg = kv.take_or("N", c.num_wg)?;
        c.pas_per_wg = kv.take_or("M", c.pas_per_wg)?;
        c.ris_elems = kv.take_or("L", c.ris_elems)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        for (i, g) in self.layers.iter().enumerate() {
            s += &format!("G{} = {g}\n", i + 1);
        }
        s += &format!(
            "hidden_chan = {}\nhidden_beam = {}\nhidden_assoc = {}\nheads = {}\ntau_gs = {}\nvariant = {}\n\
             fixed_pa_uniform = {}\nmessage_passing = {}\nresidual = {}\ncfl_chan = {}\ncfl_beam = {}\n\
             cfl_assoc = {}\nN = {}\nM = {}\nL = {}\n",
            self.hidden_chan,
            self.hidden_beam,
            self.hidden_assoc,
            self.heads,
            fmt_f64(self.tau),
            self.variant,
            self.fixed_pa_uniform,
            self.message_passing,
            self.residual,
            self.cfl_chan,
            self.cfl_beam,
            self.cfl_assoc,
            self.num_wg,
            self.pas_per_wg,
            self.ris_elems,
        );
        s
    }

    fn flags(&self) -> LayerFlags {
        LayerFlags {
            message_passing: self.message_passing,
            residual: self.residual,
        }
    }
}

/// Association used by the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum AssocOverride {
    /// Gumbel-Softmax or argmax of the learned logits.
    Learned,
    /// A given `(T, B, K)` association; power is renormalized for it.
    Given(CTensor),
}

#[derive(Debug, Clone)]
struct BeamBranch {
    gals: Vec<Cgal>,
    head: CflStack,
}

impl BeamBranch {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        params: &mut ParamStore,
        buffers: &mut ParamStore,
        prefix: &str,
        gal_count: usize,
        fl_count: usize,
        input_dim: usize,
        hidden: usize,
        cfl: bool,
        flags: LayerFlags,
        rng: &mut R,
    ) -> Result<Self> {
        let mut gals = Vec::with_capacity(gal_count);
        for i in 0..gal_count {
            let din = if i == 0 { input_dim } else { hidden };
            gals.push(Cgal::new(params, &format!("{prefix}.gal{i}"), din, input_dim, hidden, flags, rng)?);
        }
        let head = CflStack::new(params, buffers, &format!("{prefix}.fl"), fl_count, hidden, hidden, 1, cfl, rng)?;
        Ok(Self { gals, head })
    }

    fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x0: Var<'t>, mask: &Rc<Vec<bool>>, t: usize) -> Result<Var<'t>> {
        let mut x = x0;
        for g in &self.gals {
            x = g.forward(ctx, x, x0, mask, t)?;
        }
        self.head.forward(ctx, x)
    }
}

/// Learnable parameters, BN buffers and layer wiring.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub buffers: ParamStore,
    chals: Vec<Chal>,
    pos_head: CflStack,
    phase_head: CflStack,
    alpha: BeamBranch,
    power: BeamBranch,
    assoc: BeamBranch,
}

/// Everything one forward pass produces over a batch of `T` realizations.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut<'t> {
    /// `(T*B*N, M)` PA offsets.
    pub x_pa: Var<'t>,
    /// `(T*R, L)` RIS coefficients, absent in the no-RIS variant.
    pub phi: Option<Var<'t>>,
    /// `(T*B*K, N)` effective channels.
    pub hhat: Var<'t>,
    /// `(T*B*K, N)` unit HZM directions.
    pub direction: Var<'t>,
    /// `(T*B*K)` hybrid coefficients.
    pub alpha: Var<'t>,
    /// `(T*B, K)` unconstrained powers.
    pub p_tilde: Var<'t>,
    /// `(T, B, K)` association logits.
    pub logits: Var<'t>,
    /// `(T, B, K)` association weights.
    pub u: Var<'t>,
    /// `(T*B, K)` normalized powers.
    pub p: Var<'t>,
    /// `(T*B*K, N)` final beamformers.
    pub w: Var<'t>,
    /// `(T, K)` per-user rates.
    pub rates: Var<'t>,
    /// `(T)` sum rates.
    pub sr: Var<'t>,
    /// `(T)` total transmit power.
    pub tx_power: Var<'t>,
    pub flagged_phases: usize,
    pub flagged_zf: usize,
}

/// Concrete per-sample results of an inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub decisions: DecisionSet,
    pub sum_rate: f64,
    pub energy_efficiency: f64,
    pub power_per_bs: Vec<f64>,
    pub hhat: Vec<C64>,
    pub direction: Vec<C64>,
    pub p_tilde: Vec<f64>,
    pub logits: Vec<f64>,
}

fn coords(points: &[[f64; 3]], scale: f64) -> Vec<f64> {
    points.iter().flat_map(|p| p.iter().map(|v| v / scale)).collect()
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let flags = c.flags();
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let (n, m, l) = (c.num_wg, c.pas_per_wg, c.ris_elems);
        let hc = c.hidden_chan;

        let mut chals = Vec::with_capacity(c.layers[0]);
        for g in 0..c.layers[0] {
            let dims = if g == 0 { [3 * n, 3, 3] } else { [hc; 3] };
            let last = g + 1 == c.layers[0];
            let outputs = [true, !last, true];
            chals.push(Chal::new(&mut params, &format!("chan.hal{g}"), dims, hc, c.heads, outputs, flags, rng)?);
        }
        let pos_head = CflStack::new(&mut params, &mut buffers, "chan.pos", c.layers[1], hc, hc, n * m, c.cfl_chan, rng)?;
        let phase_head = CflStack::new(&mut params, &mut buffers, "chan.phase", c.layers[2], hc, hc, l, c.cfl_chan, rng)?;
        let hb = c.hidden_beam;
        let alpha = BeamBranch::new(
            &mut params, &mut buffers, "beam.alpha", c.layers[3], c.layers[4], n, hb, c.cfl_beam, flags, rng,
        )?;
        let power = BeamBranch::new(
            &mut params, &mut buffers, "beam.power", c.layers[5], c.layers[6], n, hb, c.cfl_beam, flags, rng,
        )?;
        let assoc = BeamBranch::new(
            &mut params, &mut buffers, "assoc", c.layers[7], c.layers[8], 1, c.hidden_assoc, c.cfl_assoc, flags, rng,
        )?;
        Ok(Self {
            config,
            params,
            buffers,
            chals,
            pos_head,
            phase_head,
            alpha,
            power,
            assoc,
        })
    }

    /// Number of learnable complex scalars.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_batch(&self, reals: &[Arc<ChannelRealization>]) -> Result<ScenarioConfig> {
        let first = reals.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let sc = first.config().clone();
        let c = &self.config;
        if (sc.num_wg, sc.pas_per_wg, sc.ris_elems) != (c.num_wg, c.pas_per_wg, c.ris_elems) {
            return Err(Error::Config(format!(
                "model built for (N, M, L) = ({}, {}, {}), scenario has ({}, {}, {})",
                c.num_wg, c.pas_per_wg, c.ris_elems, sc.num_wg, sc.pas_per_wg, sc.ris_elems
            )));
        }
        Ok(sc)
    }

    fn uses_ris(&self, sc: &ScenarioConfig) -> bool {
        self.config.variant != Variant::NoRis && sc.num_ris > 0
    }

    /// Stage 1: PA offsets `(T*B*N, M)` and RIS coefficients `(T*R, L)`.
    pub fn chan_gnn<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        tape: &'t Tape,
        reals: &[Arc<ChannelRealization>],
    ) -> Result<(Var<'t>, Option<Var<'t>>, usize)> {
        let sc = self.check_batch(reals)?;
        let t = reals.len();
        let (b, k, n, m) = (sc.num_bs, sc.num_ue, sc.num_wg, sc.pas_per_wg);
        let with_ris = self.uses_ris(&sc);
        let r = if with_ris { sc.num_ris } else { 0 };
        let scale = sc.length_x.max(sc.width_y);
        let mut bs = Vec::with_capacity(t * b * 3 * n);
        let mut ue = Vec::with_capacity(t * k * 3);
        let mut ris = Vec::with_capacity(t * r * 3);
        for real in reals {
            let s = real.scenario();
            bs.extend(coords(&s.bs_feed_points, scale));
            ue.extend(coords(&s.ue_positions, scale));
            if with_ris {
                ris.extend(coords(&s.ris_positions, scale));
            }
        }
        let mut feats: TypedFeatures<'t> = [
            Some(tape.constant_real(&[t * b, 3 * n], &bs)?),
            Some(tape.constant_real(&[t * k, 3], &ue)?),
            if with_ris { Some(tape.constant_real(&[t * r, 3], &ris)?) } else { None },
        ];
        for chal in &self.chals {
            feats = chal.forward(ctx, &feats, t)?;
        }
        let bs_emb = feats[NodeType::Bs.index()].expect("BS nodes are always present");
        let x_pa = match self.config.variant {
            Variant::FixedPa => {
                let x = fixed_pa_positions(&sc, self.config.fixed_pa_uniform);
                let tiled: Vec<f64> = (0..t).flat_map(|_| x.iter().copied()).collect();
                tape.constant_real(&[t * b * n, m], &tiled)?
            }
            _ => {
                let raw = self.pos_head.forward(ctx, bs_emb)?.re().reshape(&[t * b * n, m])?;
                spacing_readout(raw, &sc)?
            }
        };
        let (phi, flagged) = match feats[NodeType::Ris.index()] {
            Some(emb) => {
                let (phi, f) = phase_readout(self.phase_head.forward(ctx, emb)?);
                (Some(phi), f)
            }
            None => (None, 0),
        };
        Ok((x_pa, phi, flagged))
    }

    /// Full pipeline over a batch of realizations sharing dimensions.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        tape: &'t Tape,
        reals: &[Arc<ChannelRealization>],
        mode: AssocMode,
        noise: Option<&mut dyn RngCore>,
        assoc: &AssocOverride,
    ) -> Result<ForwardOut<'t>> {
        let sc = self.check_batch(reals)?;
        let t = reals.len();
        let (b, k, n) = (sc.num_bs, sc.num_ue, sc.num_wg);
        let rows = t * b * k;
        let dims = RateDims {
            samples: t,
            bs: b,
            ues: k,
            wgs: n,
        };

        let (x_pa, phi, flagged_phases) = self.chan_gnn(ctx, tape, reals)?;
        let hhat = if phi.is_some() {
            effective_channel_batch(reals, x_pa, phi)?
        } else {
            let stripped: Vec<Arc<ChannelRealization>> = reals.iter().map(|r| Arc::new(r.without_ris())).collect();
            effective_channel_batch(&stripped, x_pa, None)?
        };

        // Stage 2
        let energy = hhat.abs2().reshape(&[t, b * k * n])?.sum_axis(1)?.scale_re(1.0 / (b * k * n) as f64);
        let feat = hhat.mul_colvec(energy.sqrt().recip()?)?;
        let mask = Rc::new(link_graph_mask(b, k));
        let a_raw = self.alpha.forward(ctx, feat, &mask, t)?;
        let alpha = a_raw.clamp_re(-SIGMOID_CLAMP, SIGMOID_CLAMP).sigmoid_re().reshape(&[rows])?;
        let p_raw = self.power.forward(ctx, feat, &mask, t)?;
        let p_tilde = p_raw
            .clamp_re(-SIGMOID_CLAMP, SIGMOID_CLAMP)
            .sigmoid_re()
            .scale_re(sc.p_max)
            .reshape(&[t * b, k])?;
        let (q, flagged_zf) = zf_matrix(hhat.reshape(&[t * b, k, n])?)?;
        let direction = hzm_direction(hhat, q.reshape(&[rows, n])?, alpha)?;
        let w_hat = assemble_beamformers(direction, p_tilde.reshape(&[rows])?)?;

        // Stage 3
        let gain = hhat.mul(w_hat)?.sum_axis(1)?.abs2().reshape(&[rows, 1])?;
        let g_feat = gain
            .scale_re(1.0 / sc.sigma2)
            .add_scalar(C64::new(1.0, 0.0))
            .ln_re()?
            .scale_re(std::f64::consts::LOG10_E);
        let logits = self.assoc.forward(ctx, g_feat, &mask, t)?.re().reshape(&[t, b, k])?;
        let u = match assoc {
            AssocOverride::Learned => gumbel_assoc(logits, self.config.tau, noise, mode)?,
            AssocOverride::Given(u) => {
                if u.shape() != [t, b, k] {
                    return Err(Error::Shape(format!("given association {:?}, expected [{t}, {b}, {k}]", u.shape())));
                }
                tape.constant(u.clone())
            }
        };
        let p = power_normalize(p_tilde, u, sc.p_max)?;
        let w = assemble_beamformers(direction, p.reshape(&[rows])?)?;
        let rates = rates(hhat, w, u, sc.sigma2, dims)?;
        let sr = rates.sum_axis(1)?;
        let tx_power = bs_power(w, u, dims)?.reshape(&[t, b])?.sum_axis(1)?;
        if !sr.value().all_finite() || !tx_power.value().all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite sum rate in a batch of {t} ({flagged_phases} degenerate RIS entries, {flagged_zf} regularized ZF solves)"
            )));
        }
        Ok(ForwardOut {
            x_pa,
            phi,
            hhat,
            direction,
            alpha,
            p_tilde,
            logits,
            u,
            p,
            w,
            rates,
            sr,
            tx_power,
            flagged_phases,
            flagged_zf,
        })
    }

    /// Eval-mode, hard-association inference with frozen parameters.
    pub fn infer(&self, reals: &[Arc<ChannelRealization>], assoc: &AssocOverride) -> Result<Vec<SampleOutput>> {
        let tape = Tape::new();
        let ctx = Ctx::frozen(&tape, &self.params, &self.buffers, false);
        let out = self.forward(&ctx, &tape, reals, AssocMode::Infer, None, assoc)?;
        let sc = self.check_batch(reals)?;
        Ok(split_outputs(&out, &sc, reals.len()))
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let names: Vec<String> = self.buffers.iter().map(|(n, _)| format!("{BUFFER_PREFIX}{n}")).collect();
        let arrays = self
            .params
            .iter()
            .chain(names.iter().map(String::as_str).zip(self.buffers.values()));
        write_arrays(w, &self.config.to_kv_text(), arrays)
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let (header, arrays) = read_arrays(r)?;
        let mut kv = KvConfig::parse(&header)?;
        let config = ModelConfig::from_kv(&mut kv)?;
        kv.finish()?;
        let mut model = Model::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let (bufs, params): (Vec<_>, Vec<_>) = arrays.into_iter().partition(|(n, _)| n.starts_with(BUFFER_PREFIX));
        let bufs: Vec<(String, CTensor)> = bufs
            .into_iter()
            .map(|(n, t)| (n[BUFFER_PREFIX.len()..].to_string(), t))
            .collect();
        model.params.load_from(&params)?;
        model.buffers.load_from(&bufs)?;
        Ok(model)
    }

    pub fn save_file(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_file(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Config(format!("cannot open checkpoint {}: {e}", path.display())))?;
        Self::load(&mut std::io::BufReader::new(f))
    }
}

/// Splits batched forward values into per-sample results.
pub fn split_outputs(out: &ForwardOut<'_>, sc: &ScenarioConfig, t: usize) -> Vec<SampleOutput> {
    let (b, k, n, m) = (sc.num_bs, sc.num_ue, sc.num_wg, sc.pas_per_wg);
    let x = out.x_pa.value().re();
    let phi = out.phi.map(|p| p.value().data().to_vec()).unwrap_or_default();
    let r_l = if t > 0 { phi.len() / t } else { 0 };
    let w = out.w.value();
    let u = out.u.value().re();
    let sr = out.sr.value().re();
    let txp = out.tx_power.value().re();
    let hhat = out.hhat.value();
    let dir = out.direction.value();
    let pt = out.p_tilde.value().re();
    let lg = out.logits.value().re();
    (0..t)
        .map(|ti| {
            let bkn = b * k * n;
            let decisions = DecisionSet {
                x_pa: x[ti * b * n * m..(ti + 1) * b * n * m].to_vec(),
                phi: phi[ti * r_l..(ti + 1) * r_l].to_vec(),
                w: w.data()[ti * bkn..(ti + 1) * bkn].to_vec(),
                u: u[ti * b * k..(ti + 1) * b * k].to_vec(),
            };
            SampleOutput {
                power_per_bs: per_bs_power(&decisions, sc),
                decisions,
                sum_rate: sr[ti],
                energy_efficiency: sr[ti] / (txp[ti] + sc.p_circuit),
                hhat: hhat.data()[ti * bkn..(ti + 1) * bkn].to_vec(),
                direction: dir.data()[ti * bkn..(ti + 1) * bkn].to_vec(),
                p_tilde: pt[ti * b * k..(ti + 1) * b * k].to_vec(),
                logits: lg[ti * b * k..(ti + 1) * b * k].to_vec(),
            }
        })
        .collect()
}
