//! Datasets, the Adam optimizer and the unsupervised training loop.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{CTensor, Tape};
use crate::channel::{draw_cn, ChannelRealization};
use crate::config::{fmt_f64, KvConfig};
use crate::layers::Ctx;
use crate::mappings::AssocMode;
use crate::metrics::{loss_ee, loss_sr};
use crate::model::{AssocOverride, Model};
use crate::scenario::{place_infrastructure, sample_ues, Point3, Scenario, ScenarioConfig};
use crate::{Error, Result, C64};

const DATA_MAGIC: &[u8; 8] = b"PASGNNDS";
const DATA_VERSION: u32 = 1;
/// RNG stream reserved for the split shuffle.
const SPLIT_STREAM: u64 = u64::MAX;

/// One sample: UE positions and the frozen NLoS draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub ue_positions: Vec<Point3>,
    /// `(B, R, L)`.
    pub nlos_pa_ris: Vec<C64>,
    /// `(R, K, L)`.
    pub nlos_ris_ue: Vec<C64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub samples: Vec<Sample>,
    pub split: Split,
}

/// Sizes `floor(n * r_i / sum r)` for train and validation; test takes the rest.
pub fn split_sizes(n: usize, ratio: [usize; 3]) -> Result<(usize, usize, usize)> {
    let total: usize = ratio.iter().sum();
    if total == 0 {
        return Err(Error::Config("split ratio must not be all zero".into()));
    }
    let tr = n * ratio[0] / total;
    let va = n * ratio[1] / total;
    Ok((tr, va, n - tr - va))
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws sample `index` of the dataset seeded with `seed`.
pub fn draw_sample(cfg: &ScenarioConfig, seed: u64, index: u64) -> Sample {
    let mut rng = sample_rng(seed, index);
    let ue_positions = sample_ues(cfg, &mut rng);
    let nlos_pa_ris = draw_cn(cfg.num_bs * cfg.num_ris * cfg.ris_elems, &mut rng);
    let nlos_ris_ue = draw_cn(cfg.num_ris * cfg.num_ue * cfg.ris_elems, &mut rng);
    Sample {
        ue_positions,
        nlos_pa_ris,
        nlos_ris_ue,
    }
}

/// `n` i.i.d. samples over fixed infrastructure, split by `ratio` after a seeded shuffle.
pub fn generate_dataset(cfg: &ScenarioConfig, n: usize, ratio: [usize; 3]) -> Result<Dataset> {
    cfg.validate()?;
    let (tr, va, _) = split_sizes(n, ratio)?;
    let samples = (0..n).map(|i| draw_sample(cfg, cfg.seed, i as u64)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut sample_rng(cfg.seed, SPLIT_STREAM));
    let split = Split {
        train: order[..tr].to_vec(),
        val: order[tr..tr + va].to_vec(),
        test: order[tr + va..].to_vec(),
    };
    Ok(Dataset {
        config: cfg.clone(),
        seed: cfg.seed,
        samples,
        split,
    })
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(get_u64(r)?))
}

fn get_c64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<C64>> {
    (0..n).map(|_| Ok(C64::new(get_f64(r)?, get_f64(r)?))).collect()
}

impl Dataset {
    /// The fixed infrastructure with the UEs of sample `i`.
    pub fn scenario(&self, i: usize) -> Result<Scenario> {
        let (bs_feed_points, ris_positions) = place_infrastructure(&self.config)?;
        Ok(Scenario {
            config: self.config.clone(),
            bs_feed_points,
            ris_positions,
            ue_positions: self.samples[i].ue_positions.clone(),
        })
    }

    pub fn realization(&self, i: usize) -> Result<ChannelRealization> {
        let s = &self.samples[i];
        ChannelRealization::new(self.scenario(i)?, s.nlos_pa_ris.clone(), s.nlos_ris_ue.clone())
    }

    pub fn realizations(&self, idx: &[usize]) -> Result<Vec<Arc<ChannelRealization>>> {
        idx.iter().map(|&i| self.realization(i).map(Arc::new)).collect()
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let c = &self.config;
        let text = c.to_kv_text();
        w.write_all(DATA_MAGIC)?;
        w.write_all(&DATA_VERSION.to_le_bytes())?;
        put_u64(w, text.len() as u64)?;
        w.write_all(text.as_bytes())?;
        put_u64(w, self.seed)?;
        put_u64(w, self.samples.len() as u64)?;
        for part in [&self.split.train, &self.split.val, &self.split.test] {
            put_u64(w, part.len() as u64)?;
            for &i in part {
                put_u64(w, i as u64)?;
            }
        }
        for s in &self.samples {
            for p in &s.ue_positions {
                for &v in p {
                    put_f64(w, v)?;
                }
            }
            for z in s.nlos_pa_ris.iter().chain(&s.nlos_ris_ue) {
                put_f64(w, z.re)?;
                put_f64(w, z.im)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DATA_MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let mut vb = [0u8; 4];
        r.read_exact(&mut vb)?;
        let version = u32::from_le_bytes(vb);
        if version != DATA_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let tlen = get_u64(r)?;
        if tlen > 1 << 20 {
            return Err(Error::Format("dataset header too long".into()));
        }
        let mut text = vec![0u8; tlen as usize];
        r.read_exact(&mut text)?;
        let text = String::from_utf8(text).map_err(|_| Error::Format("dataset header is not UTF-8".into()))?;
        let mut kv = KvConfig::parse(&text)?;
        let config = ScenarioConfig::from_kv(&mut kv)?;
        kv.finish()?;
        let seed = get_u64(r)?;
        let n = get_u64(r)? as usize;
        if n > 1 << 28 {
            return Err(Error::Format(format!("implausible sample count {n}")));
        }
        let mut parts = Vec::with_capacity(3);
        let mut seen = vec![false; n];
        for _ in 0..3 {
            let len = get_u64(r)? as usize;
            if len > n {
                return Err(Error::Format("split larger than the dataset".into()));
            }
            let mut part = Vec::with_capacity(len);
            for _ in 0..len {
                let i = get_u64(r)? as usize;
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Format(format!("bad or repeated split index {i}")));
                }
                part.push(i);
            }
            parts.push(part);
        }
        let (b, rr, k, l) = (config.num_bs, config.num_ris, config.num_ue, config.ris_elems);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let mut ue_positions = Vec::with_capacity(k);
            for _ in 0..k {
                ue_positions.push([get_f64(r)?, get_f64(r)?, get_f64(r)?]);
            }
            let nlos_pa_ris = get_c64s(r, b * rr * l)?;
            let nlos_ris_ue = get_c64s(r, rr * k * l)?;
            samples.push(Sample {
                ue_positions,
                nlos_pa_ris,
                nlos_ris_ue,
            });
        }
        let test = parts.pop().expect("three parts");
        let val = parts.pop().expect("three parts");
        let train = parts.pop().expect("three parts");
        Ok(Self {
            config,
            seed,
            samples,
            split: Split { train, val, test },
        })
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Config(format!("cannot open dataset {}: {e}", path.display())))?;
        Self::read(&mut std::io::BufReader::new(f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    SumRate,
    EnergyEfficiency,
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sr" => Ok(Objective::SumRate),
            "ee" => Ok(Objective::EnergyEfficiency),
            _ => Err(Error::Config(format!("objective must be sr or ee, got `{s}`"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::SumRate => "sr",
            Objective::EnergyEfficiency => "ee",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub patience: usize,
    pub split: [usize; 3],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::SumRate,
            epochs: 50,
            batch_size: 128,
            lr: 5e-5,
            milestones: vec![20, 35],
            lr_decay: 0.5,
            patience: 10,
            split: [8, 1, 1],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::Config("lr and lr_decay must be positive".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let mut c = Self::default();
        c.objective = kv.take_or("objective", c.objective)?;
        c.epochs = kv.take_or("epochs", c.epochs)?;
        c.batch_size = kv.take_or("batch_size", c.batch_size)?;
        c.lr = kv.take_or("lr", c.lr)?;
        if let Some(m) = kv.take_list("milestones")? {
            c.milestones = m;
        }
        c.lr_decay = kv.take_or("lr_decay", c.lr_decay)?;
        c.patience = kv.take_or("patience", c.patience)?;
        if let Some(s) = kv.take_list::<usize>("split")? {
            c.split = s
                .try_into()
                .map_err(|_| Error::Config("split needs three ratios".into()))?;
        }
        c.seed = kv.take_or("train_seed", c.seed)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv_text(&self) -> String {
        let ms: Vec<String> = self.milestones.iter().map(usize::to_string).collect();
        format!(
            "objective = {}\nepochs = {}\nbatch_size = {}\nlr = {}\nmilestones = {}\nlr_decay = {}\n\
             patience = {}\nsplit = {},{},{}\ntrain_seed = {}\n",
            self.objective,
            self.epochs,
            self.batch_size,
            fmt_f64(self.lr),
            ms.join(","),
            fmt_f64(self.lr_decay),
            self.patience,
            self.split[0],
            self.split[1],
            self.split[2],
            self.seed,
        )
    }

    /// Learning rate in effect during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(hits as i32)
    }
}

/// Adam over complex tensors, treating real and imaginary parts as
/// independent coordinates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<CTensor>,
    /// Second moments: `re` holds the real coordinate, `im` the imaginary one.
    v: Vec<CTensor>,
}

impl Adam {
    pub fn new(params: &[CTensor]) -> Self {
        let zeros: Vec<CTensor> = params.iter().map(|p| CTensor::zeros(p.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [CTensor], grads: &[CTensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = m.data()[i] * b1 + gi * (1.0 - b1);
                let vi = C64::new(
                    v.data()[i].re * b2 + gi.re * gi.re * (1.0 - b2),
                    v.data()[i].im * b2 + gi.im * gi.im * (1.0 - b2),
                );
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let upd = C64::new(
                    mi.re / bc1 / ((vi.re / bc2).sqrt() + eps),
                    mi.im / bc1 / ((vi.im / bc2).sqrt() + eps),
                );
                p.data_mut()[i] -= upd * lr;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_sr: f64,
    pub val_ee: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_SR,val_EE,lr\n");
        for r in &self.records {
            s += &format!("{},{},{},{},{}\n", r.epoch, r.train_loss, r.val_sr, r.val_ee, r.lr);
        }
        s
    }
}

/// Mean infer-mode SR and EE over `idx`, evaluated in chunks.
pub fn validate(model: &Model, data: &Dataset, idx: &[usize], chunk: usize) -> Result<(f64, f64)> {
    if idx.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let (mut sr, mut ee) = (0.0, 0.0);
    for part in idx.chunks(chunk.max(1)) {
        for o in model.infer(&data.realizations(part)?, &AssocOverride::Learned)? {
            sr += o.sum_rate;
            ee += o.energy_efficiency;
        }
    }
    Ok((sr / idx.len() as f64, ee / idx.len() as f64))
}

/// One optimizer step on a batch; returns the loss.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    reals: &[Arc<ChannelRealization>],
    objective: Objective,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let p_circuit = reals
        .first()
        .ok_or_else(|| Error::Shape("empty batch".into()))?
        .config()
        .p_circuit;
    let (loss, grads, updates) = {
        let tape = Tape::new();
        let ctx = Ctx::bind(&tape, &model.params, &model.buffers, true);
        let out = model.forward(&ctx, &tape, reals, AssocMode::Train, Some(rng), &AssocOverride::Learned)?;
        let loss = match objective {
            Objective::SumRate => loss_sr(out.sr)?,
            Objective::EnergyEfficiency => loss_ee(out.sr, out.tx_power, p_circuit)?,
        };
        let value = loss.item().re;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {value}")));
        }
        let g = tape.backward(loss)?;
        let grads: Vec<CTensor> = ctx.vars().iter().map(|&v| g.get_or_zeros(v)).collect();
        if !grads.iter().all(CTensor::all_finite) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        (value, grads, ctx.take_updates())
    };
    opt.step(model.params.values_mut(), &grads, lr)?;
    for (id, value) in updates {
        model.buffers.set(id, value)?;
    }
    Ok(loss)
}

/// Epoch loop with multi-step decay; restores the best-validation parameters.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if data.split.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let train_reals = data.realizations(&data.split.train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.params.values());
    let mut hist = History::default();
    let mut best: Option<(f64, Model)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_reals.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let reals: Vec<_> = chunk.iter().map(|&i| train_reals[i].clone()).collect();
            total += train_step(model, &mut opt, &reals, cfg.objective, lr, &mut rng)?;
            batches += 1;
        }
        let (val_sr, val_ee) = validate(model, data, &data.split.val, 256)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss: total / batches as f64,
            val_sr,
            val_ee,
            lr,
        };
        on_epoch(&rec);
        hist.records.push(rec);
        let score = match cfg.objective {
            Objective::SumRate => val_sr,
            Objective::EnergyEfficiency => val_ee,
        };
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, model.clone()));
            hist.best_epoch = epoch + 1;
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(hist)
}
