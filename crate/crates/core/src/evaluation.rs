//! Per-sample evaluation of a trained model and its baselines.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::CTensor;
use crate::baselines::{oracle_association, random_assoc};
use crate::channel::ChannelRealization;
use crate::metrics::{check_feasibility, FeasibilityTol};
use crate::model::{AssocOverride, Model, SampleOutput, Variant};
use crate::training::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Proposed,
    FixedPa,
    NoRis,
    RandomAssoc,
    OracleAssoc,
}

impl EvalMode {
    pub const ALL: [EvalMode; 5] = [
        EvalMode::Proposed,
        EvalMode::FixedPa,
        EvalMode::NoRis,
        EvalMode::RandomAssoc,
        EvalMode::OracleAssoc,
    ];

    /// Model variant a checkpoint must have to be evaluated in this mode.
    pub fn required_variant(self) -> Variant {
        match self {
            EvalMode::FixedPa => Variant::FixedPa,
            EvalMode::NoRis => Variant::NoRis,
            _ => Variant::Full,
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(EvalMode::Proposed),
            "fixed-pa" => Ok(EvalMode::FixedPa),
            "no-ris" => Ok(EvalMode::NoRis),
            "random-assoc" => Ok(EvalMode::RandomAssoc),
            "oracle-assoc" => Ok(EvalMode::OracleAssoc),
            _ => Err(Error::Config(format!("unknown evaluation mode `{s}`"))),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Proposed => "proposed",
            EvalMode::FixedPa => "fixed-pa",
            EvalMode::NoRis => "no-ris",
            EvalMode::RandomAssoc => "random-assoc",
            EvalMode::OracleAssoc => "oracle-assoc",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sample_id: usize,
    pub k: usize,
    pub b: usize,
    pub r: usize,
    pub sum_rate: f64,
    pub energy_efficiency: f64,
    pub power_per_bs: Vec<f64>,
    pub feasible: bool,
    pub infer_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub samples: usize,
    pub mean_sr: f64,
    pub mean_ee: f64,
    pub mean_ms: f64,
    pub feasible_rate: f64,
}

impl Summary {
    pub fn of(rows: &[EvalRow]) -> Self {
        let n = rows.len().max(1) as f64;
        Self {
            samples: rows.len(),
            mean_sr: rows.iter().map(|r| r.sum_rate).sum::<f64>() / n,
            mean_ee: rows.iter().map(|r| r.energy_efficiency).sum::<f64>() / n,
            mean_ms: rows.iter().map(|r| r.infer_ms).sum::<f64>() / n,
            feasible_rate: rows.iter().filter(|r| r.feasible).count() as f64 / n,
        }
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "samples={} mean_SR={:.4} mean_EE={:.4} mean_infer_ms={:.3} feasible={:.4}",
            self.samples, self.mean_sr, self.mean_ee, self.mean_ms, self.feasible_rate
        )
    }
}

/// Infers one sample under `mode`.
pub fn evaluate_sample(model: &Model, real: &Arc<ChannelRealization>, mode: EvalMode, seed: u64, id: usize) -> Result<SampleOutput> {
    let reals = std::slice::from_ref(real);
    let c = real.config();
    let (b, k) = (c.num_bs, c.num_ue);
    let given = |u: Vec<f64>| -> Result<AssocOverride> { Ok(AssocOverride::Given(CTensor::from_real(&[1, b, k], &u)?)) };
    let out = match mode {
        EvalMode::Proposed | EvalMode::FixedPa | EvalMode::NoRis => model.infer(reals, &AssocOverride::Learned)?,
        EvalMode::RandomAssoc => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id as u64);
            model.infer(reals, &given(random_assoc(k, b, &mut rng))?)?
        }
        EvalMode::OracleAssoc => {
            let learned = model.infer(reals, &AssocOverride::Learned)?;
            let o = &learned[0];
            let (u, _) = oracle_association(c, &o.hhat, &o.direction, &o.p_tilde)?;
            model.infer(reals, &given(u)?)?
        }
    };
    out.into_iter().next().ok_or_else(|| Error::Shape("empty inference result".into()))
}

/// Evaluates `idx` of `data`, one sample per inference, in parallel.
pub fn evaluate(model: &Model, data: &Dataset, idx: &[usize], mode: EvalMode, seed: u64) -> Result<Vec<EvalRow>> {
    if model.config.variant != mode.required_variant() {
        return Err(Error::Config(format!(
            "mode {mode} needs a {} checkpoint, got {}",
            mode.required_variant(),
            model.config.variant
        )));
    }
    let c = &data.config;
    let tol = FeasibilityTol::default();
    idx.par_iter()
        .map(|&i| {
            let real = Arc::new(data.realization(i)?);
            let start = Instant::now();
            let o = evaluate_sample(model, &real, mode, seed, i)?;
            let infer_ms = start.elapsed().as_secs_f64() * 1e3;
            Ok(EvalRow {
                sample_id: i,
                k: c.num_ue,
                b: c.num_bs,
                r: if mode == EvalMode::NoRis { 0 } else { c.num_ris },
                sum_rate: o.sum_rate,
                energy_efficiency: o.energy_efficiency,
                power_per_bs: o.power_per_bs.clone(),
                feasible: check_feasibility(&o.decisions, c, &tol).passed(),
                infer_ms,
            })
        })
        .collect()
}

pub const CSV_HEADER: &str = "sample_id,K,B,R,SR_bit_s_Hz,EE_bit_J_Hz,power_W_per_bs,feasible,infer_ms";

/// CSV text with `#`-prefixed metadata lines first.
pub fn rows_to_csv(rows: &[EvalRow], meta: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in meta {
        s += &format!("# {k} = {v}\n");
    }
    s += CSV_HEADER;
    s.push('\n');
    for r in rows {
        let p: Vec<String> = r.power_per_bs.iter().map(|p| format!("{p}")).collect();
        s += &format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.sample_id,
            r.k,
            r.b,
            r.r,
            r.sum_rate,
            r.energy_efficiency,
            p.join(";"),
            u8::from(r.feasible),
            r.infer_ms
        );
    }
    s
}

/// Parses text written by [`rows_to_csv`]; returns metadata and rows.
pub fn parse_csv(text: &str) -> Result<(Vec<(String, String)>, Vec<EvalRow>)> {
    let mut meta = Vec::new();
    let mut rows = Vec::new();
    let mut header_seen = false;
    let bad = |line: usize, what: &str| Error::Format(format!("line {line}: {what}"));
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        if let Some(m) = line.strip_prefix('#') {
            if let Some((k, v)) = m.split_once('=') {
                meta.push((k.trim().to_string(), v.trim().to_string()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            if line.trim() != CSV_HEADER {
                return Err(bad(ln, "unexpected header"));
            }
            header_seen = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(bad(ln, "expected 9 fields"));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(ln, "bad number"));
        let int = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(ln, "bad integer"));
        let power = if f[6].is_empty() {
            Vec::new()
        } else {
            f[6].split(';').map(num).collect::<Result<_>>()?
        };
        rows.push(EvalRow {
            sample_id: int(f[0])?,
            k: int(f[1])?,
            b: int(f[2])?,
            r: int(f[3])?,
            sum_rate: num(f[4])?,
            energy_efficiency: num(f[5])?,
            power_per_bs: power,
            feasible: int(f[7])? == 1,
            infer_ms: num(f[8])?,
        });
    }
    if !header_seen {
        return Err(Error::Format("missing CSV header".into()));
    }
    Ok((meta, rows))
}

/// Comparison table, one row per labelled result set.
pub fn report_table(entries: &[(String, Summary)]) -> String {
    let mut s = String::from("| system | samples | mean SR (bit/s/Hz) | mean EE (bit/J/Hz) | infer (ms) | feasible |\n");
    s += "|---|---|---|---|---|---|\n";
    for (label, m) in entries {
        s += &format!(
            "| {label} | {} | {:.4} | {:.4} | {:.3} | {:.4} |\n",
            m.samples, m.mean_sr, m.mean_ee, m.mean_ms, m.feasible_rate
        );
    }
    s
}
