//! Deployment geometry and physical constants.

use rand::Rng;

use crate::config::{fmt_f64, KvConfig};
use crate::{Error, Result};

/// Speed of light used for every wavelength conversion (m/s).
pub const SPEED_OF_LIGHT: f64 = 3e8;

pub type Point3 = [f64; 3];

/// Phase progression used by uniform-linear-array steering vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Steering {
    /// Phase increment `(2 pi / lambda) * spacing * phi`, with `phi` the AoD in radians.
    #[default]
    Literal,
    /// Phase increment `(2 pi / lambda) * spacing * cos(phi)`.
    Cosine,
}

impl Steering {
    pub fn phase_factor(self, angle: f64) -> f64 {
        match self {
            Steering::Literal => angle,
            Steering::Cosine => angle.cos(),
        }
    }

    pub fn phase_factor_deriv(self, angle: f64) -> f64 {
        match self {
            Steering::Literal => 1.0,
            Steering::Cosine => -angle.sin(),
        }
    }
}

impl std::str::FromStr for Steering {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Steering::Literal),
            "cos" | "cosine" => Ok(Steering::Cosine),
            _ => Err(Error::Config(format!("unknown steering convention `{s}`"))),
        }
    }
}

impl std::fmt::Display for Steering {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Steering::Literal => "literal",
            Steering::Cosine => "cos",
        })
    }
}

/// Counts, region geometry and link-budget constants of one deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub num_bs: usize,
    pub num_ris: usize,
    pub num_ue: usize,
    /// Waveguides per BS.
    pub num_wg: usize,
    /// Pinching antennas per waveguide.
    pub pas_per_wg: usize,
    /// Reflecting elements per RIS.
    pub ris_elems: usize,
    /// Region extent along x (m).
    pub length_x: f64,
    /// Region extent along y (m).
    pub width_y: f64,
    pub wg_height: f64,
    pub wg_length: f64,
    pub wg_spacing: f64,
    /// Per-BS transmit power budget (W).
    pub p_max: f64,
    /// Circuit power (W).
    pub p_circuit: f64,
    /// Noise power per UE (W).
    pub sigma2: f64,
    pub carrier_hz: f64,
    pub lambda: f64,
    pub n_eff: f64,
    /// In-waveguide attenuation (1/m).
    pub zeta: f64,
    /// Rician factor (linear).
    pub kappa: f64,
    pub path_loss_exp: f64,
    /// Channel gain at 1 m (linear).
    pub beta0: f64,
    pub delta_min: f64,
    /// RIS element separation (m).
    pub elem_sep: f64,
    pub seed: u64,
    pub steering: Steering,
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    1e-3 * db_to_linear(dbm)
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let carrier_hz = 6e9;
        let lambda = SPEED_OF_LIGHT / carrier_hz;
        Self {
            num_bs: 1,
            num_ris: 1,
            num_ue: 4,
            num_wg: 8,
            pas_per_wg: 6,
            ris_elems: 64,
            length_x: 30.0,
            width_y: 30.0,
            wg_height: 5.0,
            wg_length: 10.0,
            wg_spacing: 0.7,
            p_max: 10.0,
            p_circuit: 5.0,
            sigma2: dbm_to_watts(-60.0),
            carrier_hz,
            lambda,
            n_eff: 1.4,
            zeta: 0.0046,
            kappa: db_to_linear(3.0),
            path_loss_exp: 2.8,
            beta0: db_to_linear(-20.0),
            delta_min: 0.1,
            elem_sep: lambda / 2.0,
            seed: 0,
            steering: Steering::Literal,
        }
    }
}

impl ScenarioConfig {
    /// Guided wavelength inside the dielectric waveguide.
    pub fn lambda_guided(&self) -> f64 {
        self.lambda / self.n_eff
    }

    /// Free-space gain constant of the direct PA-UE link, `c^2 / (4 pi f_c)^2`.
    pub fn eta(&self) -> f64 {
        (SPEED_OF_LIGHT / (4.0 * std::f64::consts::PI * self.carrier_hz)).powi(2)
    }

    /// Largest total free spacing on one waveguide, `C - (M - 1) * delta_min`.
    pub fn delta_max(&self) -> f64 {
        self.wg_length - (self.pas_per_wg as f64 - 1.0) * self.delta_min
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_bs == 0 {
            return bad("B must be at least 1".into());
        }
        if self.num_ue == 0 {
            return bad("K must be at least 1".into());
        }
        if self.num_wg == 0 || self.pas_per_wg == 0 {
            return bad("N and M must be at least 1".into());
        }
        if self.num_ris > 0 && self.ris_elems == 0 {
            return bad("L must be at least 1 when RISs are deployed".into());
        }
        if self.num_ue > self.num_wg {
            return bad(format!("K = {} exceeds N = {}", self.num_ue, self.num_wg));
        }
        let positive = [
            ("D", self.length_x),
            ("S", self.width_y),
            ("H_b", self.wg_height),
            ("C", self.wg_length),
            ("delta_wg", self.wg_spacing),
            ("P_max", self.p_max),
            ("P_C", self.p_circuit),
            ("sigma2", self.sigma2),
            ("f_c", self.carrier_hz),
            ("lambda", self.lambda),
            ("n_eff", self.n_eff),
            ("kappa", self.kappa),
            ("alpha_pl", self.path_loss_exp),
            ("beta0", self.beta0),
            ("delta_min", self.delta_min),
            ("elem_sep", self.elem_sep),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be finite and positive, got {v}"));
            }
        }
        if !(self.zeta.is_finite() && self.zeta >= 0.0) {
            return bad(format!("zeta must be nonnegative, got {}", self.zeta));
        }
        if self.delta_max() <= 0.0 {
            return bad(format!(
                "delta_min * (M - 1) = {} leaves no room on a waveguide of length {}",
                self.delta_min * (self.pas_per_wg as f64 - 1.0),
                self.wg_length
            ));
        }
        let expected = SPEED_OF_LIGHT / self.carrier_hz;
        if ((self.lambda - expected) / expected).abs() > 1e-12 {
            return bad(format!(
                "lambda = {} disagrees with c / f_c = {expected}",
                self.lambda
            ));
        }
        if self.wg_length > self.length_x {
            return bad(format!(
                "waveguide length C = {} exceeds region length D = {}",
                self.wg_length, self.length_x
            ));
        }
        Ok(())
    }

    /// Consumes scenario keys from `kv`, starting from the defaults.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let mut c = Self::default();
        c.num_bs = kv.take_or("B", c.num_bs)?;
        c.num_ris = kv.take_or("R", c.num_ris)?;
        c.num_ue = kv.take_or("K", c.num_ue)?;
        c.num_wg = kv.take_or("N", c.num_wg)?;
        c.pas_per_wg = kv.take_or("M", c.pas_per_wg)?;
        c.ris_elems = kv.take_or("L", c.ris_elems)?;
        c.length_x = kv.take_or("D", c.length_x)?;
        c.width_y = kv.take_or("S", c.width_y)?;
        c.wg_height = kv.take_or("H_b", c.wg_height)?;
        c.wg_length = kv.take_or("C", c.wg_length)?;
        c.wg_spacing = kv.take_or("delta_wg", c.wg_spacing)?;
        c.p_max = kv.take_or("P_max", c.p_max)?;
        c.p_circuit = kv.take_or("P_C", c.p_circuit)?;
        let sigma_w: Option<f64> = kv.take("sigma2")?;
        let sigma_dbm: Option<f64> = kv.take("sigma2_dbm")?;
        c.sigma2 = match (sigma_w, sigma_dbm) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("give either sigma2 or sigma2_dbm, not both".into()))
            }
            (Some(w), None) => w,
            (None, Some(dbm)) => dbm_to_watts(dbm),
            (None, None) => c.sigma2,
        };
        c.carrier_hz = kv.take_or("f_c", c.carrier_hz)?;
        c.lambda = kv.take_or("lambda", SPEED_OF_LIGHT / c.carrier_hz)?;
        c.n_eff = kv.take_or("n_eff", c.n_eff)?;
        c.zeta = kv.take_or("zeta", c.zeta)?;
        let kappa: Option<f64> = kv.take("kappa")?;
        let kappa_db: Option<f64> = kv.take("kappa_db")?;
        c.kappa = kappa.or(kappa_db.map(db_to_linear)).unwrap_or(c.kappa);
        c.path_loss_exp = kv.take_or("alpha_pl", c.path_loss_exp)?;
        let beta0: Option<f64> = kv.take("beta0")?;
        let beta0_db: Option<f64> = kv.take("beta0_db")?;
        c.beta0 = beta0.or(beta0_db.map(db_to_linear)).unwrap_or(c.beta0);
        c.delta_min = kv.take_or("delta_min", c.delta_min)?;
        c.elem_sep = kv.take_or("elem_sep", c.lambda / 2.0)?;
        c.seed = kv.take_or("seed", c.seed)?;
        c.steering = kv.take_or("steering", c.steering)?;
        c.validate()?;
        Ok(c)
    }

    /// Canonical key-value rendering, parseable by [`ScenarioConfig::from_kv`].
    pub fn to_kv_text(&self) -> String {
        let f = fmt_f64;
        format!(
            "B = {}\nR = {}\nK = {}\nN = {}\nM = {}\nL = {}\nD = {}\nS = {}\nH_b = {}\nC = {}\n\
             delta_wg = {}\nP_max = {}\nP_C = {}\nsigma2 = {}\nf_c = {}\nlambda = {}\nn_eff = {}\n\
             zeta = {}\nkappa = {}\nalpha_pl = {}\nbeta0 = {}\ndelta_min = {}\nelem_sep = {}\n\
             seed = {}\nsteering = {}\n",
            self.num_bs,
            self.num_ris,
            self.num_ue,
            self.num_wg,
            self.pas_per_wg,
            self.ris_elems,
            f(self.length_x),
            f(self.width_y),
            f(self.wg_height),
            f(self.wg_length),
            f(self.wg_spacing),
            f(self.p_max),
            f(self.p_circuit),
            f(self.sigma2),
            f(self.carrier_hz),
            f(self.lambda),
            f(self.n_eff),
            f(self.zeta),
            f(self.kappa),
            f(self.path_loss_exp),
            f(self.beta0),
            f(self.delta_min),
            f(self.elem_sep),
            self.seed,
            self.steering,
        )
    }
}

/// Fixed infrastructure plus one draw of UE positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    /// Feed point of waveguide `n` of BS `b` at index `b * N + n`.
    pub bs_feed_points: Vec<Point3>,
    pub ris_positions: Vec<Point3>,
    pub ue_positions: Vec<Point3>,
}

impl Scenario {
    pub fn feed_point(&self, b: usize, n: usize) -> Point3 {
        self.bs_feed_points[b * self.config.num_wg + n]
    }

    /// Absolute position of a PA at offset `x` along waveguide `(b, n)`.
    pub fn pa_position(&self, b: usize, n: usize, x: f64) -> Point3 {
        let [fx, fy, fz] = self.feed_point(b, n);
        [fx + x, fy, fz]
    }

    /// Same infrastructure with a different UE count and UE draw.
    pub fn with_ues(&self, ue_positions: Vec<Point3>) -> Self {
        let mut s = self.clone();
        s.config.num_ue = ue_positions.len();
        s.ue_positions = ue_positions;
        s
    }

    /// Same infrastructure with the RISs removed.
    pub fn without_ris(&self) -> Self {
        let mut s = self.clone();
        s.config.num_ris = 0;
        s.ris_positions.clear();
        s
    }
}

/// Grid `(rows, cols)` whose aspect `cols / rows` best matches `D / S`.
///
/// Candidates satisfy `count <= rows * cols <= 2 * count`; ties go to the
/// smaller cell count, then to fewer rows.
pub fn grid_dims(count: usize, length_x: f64, width_y: f64) -> (usize, usize) {
    let target = length_x / width_y;
    let count = count.max(1);
    let mut best = (1, count);
    let mut best_key = (f64::INFINITY, usize::MAX, usize::MAX);
    for p in 1..=2 * count {
        for q in 1..=2 * count {
            let cells = p * q;
            if cells < count || cells > 2 * count {
                continue;
            }
            let key = ((q as f64 / p as f64 - target).abs(), cells, p);
            if key < best_key {
                best_key = key;
                best = (p, q);
            }
        }
    }
    best
}

/// Row-major grid centers for `count` nodes.
fn grid_centers(count: usize, length_x: f64, width_y: f64) -> Vec<[f64; 2]> {
    if count == 0 {
        return Vec::new();
    }
    let (rows, cols) = grid_dims(count, length_x, width_y);
    (0..count)
        .map(|i| {
            let (r, c) = (i / cols + 1, i % cols + 1);
            [
                (c as f64 - 0.5) * length_x / cols as f64,
                (r as f64 - 0.5) * width_y / rows as f64,
            ]
        })
        .collect()
}

/// Waveguide feed points (index `b * N + n`) and RIS positions.
pub fn place_infrastructure(cfg: &ScenarioConfig) -> Result<(Vec<Point3>, Vec<Point3>)> {
    cfg.validate()?;
    let n = cfg.num_wg;
    let mut feeds = Vec::with_capacity(cfg.num_bs * n);
    for [xc, yc] in grid_centers(cfg.num_bs, cfg.length_x, cfg.width_y) {
        for wg in 0..n {
            let offset = (wg as f64 - (n as f64 - 1.0) / 2.0) * cfg.wg_spacing;
            feeds.push([xc - cfg.wg_length / 2.0, yc + offset, cfg.wg_height]);
        }
    }
    let ris = grid_centers(cfg.num_ris, cfg.length_x, cfg.width_y)
        .into_iter()
        .map(|[x, y]| [x, y, cfg.wg_height / 2.0])
        .collect();
    Ok((feeds, ris))
}

/// `K` i.i.d. uniform positions over the region at ground level.
pub fn sample_ues<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Vec<Point3> {
    (0..cfg.num_ue)
        .map(|_| {
            [
                rng.random::<f64>() * cfg.length_x,
                rng.random::<f64>() * cfg.width_y,
                0.0,
            ]
        })
        .collect()
}

pub fn build_scenario<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<Scenario> {
    let (bs_feed_points, ris_positions) = place_infrastructure(cfg)?;
    Ok(Scenario {
        config: cfg.clone(),
        bs_feed_points,
        ris_positions,
        ue_positions: sample_ues(cfg, rng),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive competitor scan, independent of `grid_dims`.
    fn brute_force_best_error(count: usize, d: f64, s: f64) -> f64 {
        let mut best = f64::INFINITY;
        for p in 1..=2 * count {
            for q in 1..=2 * count {
                if p * q >= count && p * q <= 2 * count {
                    best = best.min((q as f64 / p as f64 - d / s).abs());
                }
            }
        }
        best
    }

    #[test]
    fn grid_dims_examples() {
        assert_eq!(grid_dims(1, 30.0, 30.0), (1, 1));
        assert_eq!(grid_dims(4, 30.0, 30.0), (2, 2));
        assert_eq!(grid_dims(2, 60.0, 30.0), (1, 2));
        assert_eq!(grid_dims(3, 30.0, 30.0), (2, 2));
    }

    #[test]
    fn grid_dims_dominates_enumeration() {
        for count in 1..=16 {
            for (d, s) in [(30.0, 30.0), (60.0, 30.0), (30.0, 70.0), (50.0, 40.0)] {
                let (p, q) = grid_dims(count, d, s);
                assert!(p * q >= count);
                let err = (q as f64 / p as f64 - d / s).abs();
                assert!(err <= brute_force_best_error(count, d, s) + 1e-15);
            }
        }
    }

    #[test]
    fn placement_examples() {
        let cfg = ScenarioConfig::default();
        let (feeds, ris) = place_infrastructure(&cfg).unwrap();
        assert_eq!(feeds.len(), cfg.num_wg);
        let ys: Vec<f64> = feeds.iter().map(|f| f[1]).collect();
        let mean_y = ys.iter().sum::<f64>() / ys.len() as f64;
        assert!((mean_y - 15.0).abs() < 1e-12);
        for f in &feeds {
            assert_eq!(f[0], 10.0);
            assert_eq!(f[2], 5.0);
        }
        for w in ys.windows(2) {
            assert!((w[1] - w[0] - 0.7).abs() < 1e-12);
        }
        assert_eq!(ris, vec![[15.0, 15.0, 2.5]]);

        let cfg4 = ScenarioConfig {
            num_bs: 4,
            num_wg: 1,
            num_ue: 1,
            ..ScenarioConfig::default()
        };
        let (feeds, _) = place_infrastructure(&cfg4).unwrap();
        let centers: Vec<[f64; 2]> = feeds.iter().map(|f| [f[0] + 5.0, f[1]]).collect();
        assert_eq!(
            centers,
            vec![[7.5, 7.5], [22.5, 7.5], [7.5, 22.5], [22.5, 22.5]]
        );
    }

    #[test]
    fn three_bs_fill_row_major() {
        let cfg = ScenarioConfig {
            num_bs: 3,
            num_wg: 1,
            num_ue: 1,
            ..ScenarioConfig::default()
        };
        let (feeds, _) = place_infrastructure(&cfg).unwrap();
        let centers: Vec<[f64; 2]> = feeds.iter().map(|f| [f[0] + 5.0, f[1]]).collect();
        assert_eq!(centers, vec![[7.5, 7.5], [22.5, 7.5], [7.5, 22.5]]);
    }

    #[test]
    fn rejects_degenerate_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let k0 = ScenarioConfig {
            num_ue: 0,
            ..ScenarioConfig::default()
        };
        assert!(build_scenario(&k0, &mut rng).is_err());
        let long = ScenarioConfig {
            wg_length: 40.0,
            ..ScenarioConfig::default()
        };
        assert!(place_infrastructure(&long).is_err());
        let packed = ScenarioConfig {
            delta_min: 2.0,
            ..ScenarioConfig::default()
        };
        assert!(packed.validate().is_err());
        let wrong_lambda = ScenarioConfig {
            lambda: 0.051,
            ..ScenarioConfig::default()
        };
        assert!(wrong_lambda.validate().is_err());
        let too_many_ues = ScenarioConfig {
            num_ue: 9,
            ..ScenarioConfig::default()
        };
        assert!(too_many_ues.validate().is_err());
    }

    #[test]
    fn defaults_match_parameter_table() {
        let c = ScenarioConfig::default();
        assert!((c.lambda - 0.05).abs() < 1e-15);
        assert!((c.sigma2 - 1e-9).abs() < 1e-21);
        assert!((c.kappa - 1.9953).abs() < 1e-4);
        assert!((c.beta0 - 0.01).abs() < 1e-15);
        assert!((c.eta().sqrt() - 3.9789e-3).abs() < 1e-7);
        c.validate().unwrap();
    }

    #[test]
    fn kv_round_trip_and_dbm() {
        let text = ScenarioConfig::default().to_kv_text();
        let mut kv = KvConfig::parse(&text).unwrap();
        let back = ScenarioConfig::from_kv(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, ScenarioConfig::default());

        let mut kv = KvConfig::parse("sigma2_dbm = -60\nkappa_db = 3\nsteering = cos").unwrap();
        let c = ScenarioConfig::from_kv(&mut kv).unwrap();
        assert!((c.sigma2 - 1e-9).abs() < 1e-21);
        assert_eq!(c.steering, Steering::Cosine);
    }

    #[test]
    fn ue_sampling_is_deterministic_and_uniform() {
        let cfg = ScenarioConfig {
            num_ue: 3,
            ..ScenarioConfig::default()
        };
        let a = sample_ues(&cfg, &mut ChaCha8Rng::seed_from_u64(7));
        let b = sample_ues(&cfg, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);

        // Monte-Carlo mean against the uniform-law mean (D/2, S/2).
        let big = ScenarioConfig {
            num_ue: 100_000,
            num_wg: 100_000,
            ..ScenarioConfig::default()
        };
        let pts = sample_ues(&big, &mut ChaCha8Rng::seed_from_u64(1));
        let mx = pts.iter().map(|p| p[0]).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p[1]).sum::<f64>() / pts.len() as f64;
        assert!((mx / 15.0 - 1.0).abs() < 0.01);
        assert!((my / 15.0 - 1.0).abs() < 0.01);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn scenario_invariants(
            b in 1usize..5, r in 0usize..5, n in 1usize..6, k in 1usize..6,
            side in 30.0f64..70.0, aspect in 0.5f64..2.0, seed in any::<u64>(),
        ) {
            prop_assume!(k <= n);
            let cfg = ScenarioConfig {
                num_bs: b, num_ris: r, num_wg: n, num_ue: k,
                length_x: side, width_y: side * aspect, seed,
                ..ScenarioConfig::default()
            };
            let sc = build_scenario(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(sc.bs_feed_points.len(), b * n);
            prop_assert_eq!(sc.ris_positions.len(), r);
            for u in &sc.ue_positions {
                prop_assert!(u[0] >= 0.0 && u[0] <= cfg.length_x);
                prop_assert!(u[1] >= 0.0 && u[1] <= cfg.width_y);
                prop_assert_eq!(u[2], 0.0);
            }
            for f in &sc.bs_feed_points {
                prop_assert_eq!(f[2], cfg.wg_height);
            }
            for p in &sc.ris_positions {
                prop_assert_eq!(p[2], cfg.wg_height / 2.0);
            }
            for bi in 0..b {
                let y0 = sc.feed_point(bi, 0)[1];
                for wi in 1..n {
                    let dy = sc.feed_point(bi, wi)[1] - y0;
                    prop_assert!((dy - wi as f64 * cfg.wg_spacing).abs() < 1e-9);
                }
            }
            let again = build_scenario(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(sc, again);
        }
    }
}
