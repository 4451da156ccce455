use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use pasgnn::autodiff::{grad_check, CTensor, Tape};
use pasgnn::baselines::{assoc_sum_rate, concrete_hzm, oracle_association};
use pasgnn::channel::ChannelRealization;
use pasgnn::config::{config_hash, KvConfig};
use pasgnn::evaluation::{evaluate, parse_csv, report_table, rows_to_csv, EvalMode, Summary};
use pasgnn::layers::{kaiming, Ctx};
use pasgnn::mappings::AssocMode;
use pasgnn::metrics::{check_feasibility, loss_sr, rates, FeasibilityTol, RateDims};
use pasgnn::model::{AssocOverride, Model, ModelConfig, Variant};
use pasgnn::scenario::{build_scenario, sample_ues, ScenarioConfig};
use pasgnn::training::{generate_dataset, train, Dataset, Objective, TrainConfig};
use pasgnn::{Error, Result, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const THREADS_ENV: &str = "PASGNN_THREADS";
const DATASET_FILE: &str = "dataset.bin";
const DATASET_META: &str = "dataset.meta";

#[derive(Parser)]
#[command(name = "pasgnn", version, about = "Pinching-antenna RIS downlink optimisation with a complex GNN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a seeded dataset with a fixed train/val/test split.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: usize,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `sr` or `ee`; overrides the config file.
        #[arg(long)]
        objective: Option<Objective>,
        /// `full`, `fixed-pa` or `no-ris`; overrides the config file.
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split; writes per-sample CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "proposed")]
        mode: EvalMode,
        /// Evaluate on a fresh test set with this many UEs.
        #[arg(long)]
        k_test: Option<usize>,
        /// Seed of the random-association baseline.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use at most this many test samples.
        #[arg(long)]
        limit: Option<usize>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Markdown comparison table from evaluation CSVs.
    Report {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient-check and oracle-equivalence suites on small instances.
    Selftest,
}

/// Scenario, model and training settings from one flat config file.
struct RunConfig {
    scenario: ScenarioConfig,
    model: ModelConfig,
    train: TrainConfig,
}

impl RunConfig {
    fn load(path: &Path) -> Result<Self> {
        let mut kv = KvConfig::load(path)?;
        let scenario = ScenarioConfig::from_kv(&mut kv)?;
        let model = ModelConfig::from_kv(&mut kv)?.with_dims(&scenario);
        let train = TrainConfig::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(Self { scenario, model, train })
    }

    fn text(&self) -> String {
        // Scenario keys N, M, L also appear in the model text; only emit them once.
        let model: String = self
            .model
            .to_kv_text()
            .lines()
            .filter(|l| !["N ", "M ", "L "].iter().any(|p| l.starts_with(p)))
            .map(|l| format!("{l}\n"))
            .collect();
        format!("{}{model}{}", self.scenario.to_kv_text(), self.train.to_kv_text())
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(fs::write(path, text)?)
}

fn meta_text(pairs: &[(&str, String)], body: &str) -> String {
    let mut s: String = pairs.iter().map(|(k, v)| format!("# {k} = {v}\n")).collect();
    s += body;
    s
}

fn dataset_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(DATASET_FILE)
    } else {
        p.to_path_buf()
    }
}

fn sidecar(p: &Path, ext: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn generate(config: &Path, out: &Path, samples: usize) -> Result<()> {
    if samples == 0 {
        return Err(Error::Config("--samples must be positive".into()));
    }
    let rc = RunConfig::load(config)?;
    let data = generate_dataset(&rc.scenario, samples, rc.train.split)?;
    fs::create_dir_all(out)?;
    data.save_file(&out.join(DATASET_FILE))?;
    let sc_text = rc.scenario.to_kv_text();
    let meta = meta_text(
        &[
            ("config_hash", config_hash(&sc_text)),
            ("seed", rc.scenario.seed.to_string()),
            ("samples", samples.to_string()),
            ("train_val_test", format!("{},{},{}", data.split.train.len(), data.split.val.len(), data.split.test.len())),
        ],
        &sc_text,
    );
    write_file(&out.join(DATASET_META), &meta)?;
    eprintln!(
        "wrote {} samples ({} / {} / {}) to {}",
        samples,
        data.split.train.len(),
        data.split.val.len(),
        data.split.test.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(config: &Path, data: &Path, objective: Option<Objective>, variant: Option<Variant>, out: &Path) -> Result<()> {
    let mut rc = RunConfig::load(config)?;
    if let Some(o) = objective {
        rc.train.objective = o;
    }
    if let Some(v) = variant {
        rc.model.variant = v;
    }
    let data = Dataset::load_file(&dataset_path(data))?;
    if data.config.to_kv_text() != rc.scenario.to_kv_text() {
        return Err(Error::Config("the dataset was generated from a different scenario than the config".into()));
    }
    let mut model = Model::new(rc.model.clone(), &mut ChaCha8Rng::seed_from_u64(rc.train.seed))?;
    eprintln!("training {} parameters on {} samples", model.param_count(), data.split.train.len());
    let start = Instant::now();
    let hist = train(&mut model, &data, &rc.train, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.6}  val SR {:.4}  val EE {:.4}  lr {:.2e}",
            r.epoch, r.train_loss, r.val_sr, r.val_ee, r.lr
        );
    })?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    model.save_file(out)?;
    let text = rc.text();
    let pairs = [
        ("config_hash", config_hash(&text)),
        ("seed", rc.scenario.seed.to_string()),
        ("train_seed", rc.train.seed.to_string()),
        ("best_epoch", hist.best_epoch.to_string()),
        ("train_secs", format!("{:.1}", start.elapsed().as_secs_f64())),
    ];
    write_file(&sidecar(out, ".meta"), &meta_text(&pairs, &text))?;
    write_file(&sidecar(out, ".history.csv"), &meta_text(&pairs, &hist.to_csv()))?;
    eprintln!("best epoch {} of {}; wrote {}", hist.best_epoch, hist.records.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    ckpt: &Path,
    data: &Path,
    mode: EvalMode,
    k_test: Option<usize>,
    seed: u64,
    limit: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let model = Model::load_file(ckpt)?;
    let mut data = Dataset::load_file(&dataset_path(data))?;
    if let Some(k) = k_test.filter(|&k| k != data.config.num_ue) {
        let cfg = ScenarioConfig { num_ue: k, ..data.config.clone() };
        let n = data.samples.len();
        let ratio = [data.split.train.len(), data.split.val.len(), data.split.test.len()];
        data = generate_dataset(&cfg, n, ratio)?;
    }
    let mut idx = data.split.test.clone();
    if let Some(l) = limit {
        idx.truncate(l);
    }
    if idx.is_empty() {
        return Err(Error::Config("the test split is empty".into()));
    }
    let rows = evaluate(&model, &data, &idx, mode, seed)?;
    let summary = Summary::of(&rows);
    let meta = [
        ("mode", mode.to_string()),
        ("config_hash", config_hash(&format!("{}{}", data.config.to_kv_text(), model.config.to_kv_text()))),
        ("seed", data.config.seed.to_string()),
        ("eval_seed", seed.to_string()),
        ("checkpoint", ckpt.display().to_string()),
        ("K", data.config.num_ue.to_string()),
    ];
    let csv = rows_to_csv(&rows, &meta);
    match out {
        Some(p) => write_file(p, &csv)?,
        None => print!("{csv}"),
    }
    eprintln!("{mode}: {summary}");
    let bad = rows.iter().filter(|r| !r.feasible).count();
    if bad > 0 {
        return Err(Error::Infeasible(format!("{bad} of {} samples violate a constraint", rows.len())));
    }
    Ok(())
}

fn report(inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut entries = Vec::new();
    for p in inputs {
        let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
        let (meta, rows) = parse_csv(&text)?;
        let find = |key: &str| meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let label = match (find("mode"), find("K")) {
            (Some(m), Some(k)) => format!("{m} (K={k}, {stem})"),
            (Some(m), None) => m,
            _ => stem,
        };
        entries.push((label, Summary::of(&rows)));
    }
    let table = report_table(&entries);
    match out {
        Some(p) => write_file(p, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}

fn tiny_scenario(b: usize, k: usize) -> ScenarioConfig {
    ScenarioConfig {
        num_bs: b,
        num_ris: 1,
        num_wg: 2,
        pas_per_wg: 2,
        ris_elems: 4,
        num_ue: k,
        ..ScenarioConfig::default()
    }
}

fn realizations(cfg: &ScenarioConfig, t: usize, seed: u64) -> Result<Vec<Arc<ChannelRealization>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = build_scenario(cfg, &mut rng)?;
    (0..t)
        .map(|_| {
            let ues = sample_ues(cfg, &mut rng);
            Ok(Arc::new(ChannelRealization::draw(base.with_ues(ues), &mut rng)?))
        })
        .collect()
}

fn check(name: &str, ok: bool, detail: String) -> bool {
    println!("{:<28} {}  {detail}", name, if ok { "ok" } else { "FAILED" });
    ok
}

fn selftest() -> Result<()> {
    let mut all = true;

    let cfg = tiny_scenario(2, 2);
    let mut m = Model::new(ModelConfig::for_scenario(&cfg).with_hidden(4), &mut ChaCha8Rng::seed_from_u64(5))?;
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for p in m.params.values_mut() {
        let n = kaiming(p.shape(), 1250, &mut rng);
        *p = p.zip_map(&n, |a, b| a + b);
    }
    let reals = realizations(&cfg, 2, 11)?;
    let rep = grad_check(
        |tape, vars| {
            let ctx = Ctx::from_vars(vars.to_vec(), &m.buffers, false);
            let out = m.forward(&ctx, tape, &reals, AssocMode::Train, None, &AssocOverride::Learned)?;
            loss_sr(out.sr)
        },
        m.params.values(),
        1e-6,
    )?;
    all &= check(
        "end-to-end gradient",
        rep.max_rel_error < 1e-4,
        format!("max rel error {:.2e} over {} coordinates", rep.max_rel_error, rep.coordinates),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (b, k, n) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
        let h: Vec<C64> = (0..b * k * n).map(|_| C64::new(rng.random(), rng.random())).collect();
        let w: Vec<C64> = (0..b * k * n).map(|_| C64::new(rng.random(), rng.random())).collect();
        let u: Vec<f64> = (0..b * k).map(|_| rng.random()).collect();
        let tape = Tape::new();
        let r = rates(
            tape.constant(CTensor::new(&[b * k, n], h.clone())?),
            tape.constant(CTensor::new(&[b * k, n], w.clone())?),
            tape.constant(CTensor::from_real(&[b, k], &u)?),
            0.5,
            RateDims { samples: 1, bs: b, ues: k, wgs: n },
        )?
        .value()
        .re();
        for kk in 0..k {
            let mut sig = C64::new(0.0, 0.0);
            let mut interf = 0.0;
            for bi in 0..b {
                let dot = |kw: usize| (0..n).map(|i| h[(bi * k + kk) * n + i] * w[(bi * k + kw) * n + i]).sum::<C64>();
                sig += dot(kk) * u[bi * k + kk];
                for kp in (0..k).filter(|&kp| kp != kk) {
                    interf += (dot(kp) * u[bi * k + kp]).norm_sqr();
                }
            }
            let e = (1.0 + sig.norm_sqr() / (interf + 0.5)).log2();
            worst = worst.max((r[kk] - e).abs() / e.max(f64::MIN_POSITIVE));
        }
    }
    all &= check("rate vs loop oracle", worst < 1e-10, format!("max rel deviation {worst:.2e}"));

    let mut gap = 0.0f64;
    for seed in 0..20 {
        let c = tiny_scenario(2 + (seed as usize % 2), 2);
        let (b, k, n) = (c.num_bs, c.num_ue, c.num_wg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h: Vec<C64> = (0..b * k * n).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
        let alpha: Vec<f64> = (0..b * k).map(|_| rng.random()).collect();
        let p: Vec<f64> = (0..b * k).map(|_| c.p_max * rng.random::<f64>()).collect();
        let dir = concrete_hzm(&c, &h, &alpha)?;
        let (_, best) = oracle_association(&c, &h, &dir, &p)?;
        let mut brute = f64::NEG_INFINITY;
        for code in 0..b.pow(k as u32) {
            let mut u = vec![0.0; b * k];
            let mut rest = code;
            for kk in 0..k {
                u[(rest % b) * k + kk] = 1.0;
                rest /= b;
            }
            brute = brute.max(assoc_sum_rate(&c, &h, &dir, &p, &u)?);
        }
        gap = gap.max((best - brute).abs() / brute.max(1.0));
    }
    all &= check("oracle vs enumeration", gap < 1e-12, format!("max rel gap {gap:.2e}"));

    let tol = FeasibilityTol::default();
    let mut failures = 0;
    for seed in 0..100u64 {
        let c = tiny_scenario(1 + seed as usize % 3, 2);
        let m = Model::new(ModelConfig::for_scenario(&c).with_hidden(4), &mut ChaCha8Rng::seed_from_u64(seed))?;
        for o in m.infer(&realizations(&c, 2, 500 + seed)?, &AssocOverride::Learned)? {
            failures += usize::from(!check_feasibility(&o.decisions, &c, &tol).passed());
        }
    }
    all &= check("infer-mode feasibility", failures == 0, format!("{failures} of 200 samples infeasible"));

    if all {
        Ok(())
    } else {
        Err(Error::Numeric("selftest failed".into()))
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("{THREADS_ENV}: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Generate { config, out, samples } => generate(&config, &out, samples),
        Command::Train { config, data, objective, variant, out } => train_cmd(&config, &data, objective, variant, &out),
        Command::Eval { ckpt, data, mode, k_test, seed, limit, out } => {
            eval_cmd(&ckpt, &data, mode, k_test, seed, limit, out.as_deref())
        }
        Command::Report { inputs, out } => report(&inputs, out.as_deref()),
        Command::Selftest => selftest(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
