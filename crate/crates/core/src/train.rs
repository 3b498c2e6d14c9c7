//! Optimizer, schedule, checkpoints and the pretraining / finetuning loops.
//!
//! All randomness in a run is derived from `(seed, epoch, image index)`, so
//! a loop restarted from an epoch checkpoint replays the remaining epochs
//! exactly as the uninterrupted run would have.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::backbone::FrozenBackbone;
use crate::config::{FinetuneMode, RunConfig, TrainConfig};
use crate::data::Sample;
use crate::error::{io_error, Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::model::{param_group, Detr, ParamGroup, ParamSet};
use crate::objective::{finetune_forward, prepare_image, prepare_pair, pretrain_forward, PreparedImage, PreparedPair};
use crate::seed;
use crate::tensor::{Tape, Tensor};
use crate::views::build_view_pair;

const TAG_SHUFFLE: u64 = 0x5348_5546;
const TAG_VIEWS: u64 = 0x5649_4557;
const TAG_FLIP: u64 = 0x464C_4950;
const TAG_FINETUNE: u64 = 0x4654;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDTR";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// AdamW with decoupled weight decay. Moment buffers are kept for every
/// parameter of the model, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. `grads[i]` is `None` for parameters that are not being
    /// trained; those are left untouched, including by weight decay. Any
    /// non-finite gradient aborts before anything is modified.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f32>>], lr: f32) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, model has {}, got {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGrad(params.names()[i].clone()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let w = params.value_mut(i).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..w.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] = w[j] * decay - lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales the gradients in place so their joint L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f32>>], max_norm: f32) -> f32 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum();
    let norm = sq.sqrt() as f32;
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Step schedule: base rate until `decay_epoch`, then scaled by `factor`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub decay_epoch: usize,
    pub factor: f32,
    pub lr: f32,
}

impl Schedule {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            epochs: c.epochs,
            decay_epoch: c.decay_epoch,
            factor: c.decay_factor,
            lr: c.lr,
        }
    }

    /// Learning rate of the zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        if epoch >= self.decay_epoch {
            self.lr * self.factor
        } else {
            self.lr
        }
    }
}

/// Contents of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub optim: Option<AdamW>,
    pub meta: BTreeMap<String, String>,
}

enum Entry<'a> {
    F32(&'a [usize], &'a [f32]),
    Bytes(&'a [u8]),
}

fn encode_entries(entries: &[(String, Entry)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, e) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match e {
            Entry::F32(shape, data) => {
                out.push(DTYPE_F32);
                out.push(shape.len() as u8);
                for &d in shape.iter() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in data.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Entry::Bytes(b) => {
                out.push(DTYPE_U8);
                out.push(1);
                out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                out.extend_from_slice(b);
            }
        }
    }
    let len = out.len() as u64;
    out.extend_from_slice(&len.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta_bytes: Vec<(String, Vec<u8>)> = self
            .meta
            .iter()
            .map(|(k, v)| (format!("meta.{k}"), v.as_bytes().to_vec()))
            .collect();
        let mut optim_meta = Vec::new();
        if let Some(o) = &self.optim {
            for (k, v) in [
                ("step", o.step.to_string()),
                ("weight_decay", o.weight_decay.to_string()),
                ("beta1", o.beta1.to_string()),
                ("beta2", o.beta2.to_string()),
                ("eps", o.eps.to_string()),
            ] {
                optim_meta.push((format!("optim.{k}"), v.into_bytes()));
            }
        }
        let mut entries: Vec<(String, Entry)> = Vec::new();
        for (name, t) in self.params.iter() {
            entries.push((name.to_string(), Entry::F32(t.shape(), t.data())));
        }
        if let Some(o) = &self.optim {
            for (i, (name, t)) in self.params.iter().enumerate() {
                entries.push((format!("optim.m.{name}"), Entry::F32(t.shape(), &o.m[i])));
            }
            for (i, (name, t)) in self.params.iter().enumerate() {
                entries.push((format!("optim.v.{name}"), Entry::F32(t.shape(), &o.v[i])));
            }
        }
        for (k, v) in &optim_meta {
            entries.push((k.clone(), Entry::Bytes(v)));
        }
        for (k, v) in &meta_bytes {
            entries.push((k.clone(), Entry::Bytes(v)));
        }
        encode_entries(&entries)
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        if buf.len() < 24 {
            return Err("file too short".into());
        }
        let body = buf.len() - 8;
        let trailer = u64::from_le_bytes(buf[body..].try_into().expect("8 bytes"));
        if trailer != body as u64 {
            return Err(format!("length check failed: trailer says {trailer}, body is {body} bytes"));
        }
        let mut r = Reader {
            buf: &buf[..body],
            pos: 0,
        };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let count = r.u64()?;
        let mut params = ParamSet::new();
        let mut moments: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut optim_meta: BTreeMap<String, String> = BTreeMap::new();
        let mut meta = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| "entry name is not UTF-8".to_string())?;
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            match dtype {
                DTYPE_F32 => {
                    let raw = r.take(numel.checked_mul(4).ok_or("entry too large")?)?;
                    let data: Vec<f32> = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    if name.starts_with("optim.m.") || name.starts_with("optim.v.") {
                        moments.insert(name, data);
                    } else {
                        let t = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
                        params.insert(name, t);
                    }
                }
                DTYPE_U8 => {
                    let raw = r.take(numel)?;
                    let text = String::from_utf8(raw.to_vec()).map_err(|_| format!("{name}: not UTF-8"))?;
                    if let Some(k) = name.strip_prefix("meta.") {
                        meta.insert(k.to_string(), text);
                    } else if let Some(k) = name.strip_prefix("optim.") {
                        optim_meta.insert(k.to_string(), text);
                    } else {
                        return Err(format!("unexpected byte entry `{name}`"));
                    }
                }
                t => return Err(format!("{name}: unknown dtype tag {t}")),
            }
        }
        if r.pos != body {
            return Err(format!("{} trailing bytes after the last entry", body - r.pos));
        }
        let optim = if optim_meta.is_empty() {
            None
        } else {
            let get = |k: &str| -> std::result::Result<&String, String> {
                optim_meta.get(k).ok_or_else(|| format!("missing optim.{k}"))
            };
            let num = |k: &str| -> std::result::Result<f32, String> {
                get(k)?.parse().map_err(|_| format!("bad optim.{k}"))
            };
            let mut m = Vec::with_capacity(params.len());
            let mut v = Vec::with_capacity(params.len());
            for (name, t) in params.iter() {
                for (dst, pre) in [(&mut m, "optim.m."), (&mut v, "optim.v.")] {
                    let buf = moments
                        .remove(&format!("{pre}{name}"))
                        .ok_or_else(|| format!("missing {pre}{name}"))?;
                    if buf.len() != t.numel() {
                        return Err(format!("{pre}{name} has {} values, expected {}", buf.len(), t.numel()));
                    }
                    dst.push(buf);
                }
            }
            Some(AdamW {
                weight_decay: num("weight_decay")?,
                beta1: num("beta1")?,
                beta2: num("beta2")?,
                eps: num("eps")?,
                step: get("step")?.parse().map_err(|_| "bad optim.step".to_string())?,
                m,
                v,
            })
        };
        if let Some(k) = moments.keys().next() {
            return Err(format!("moment buffer `{k}` has no matching parameter"));
        }
        Ok(Self { params, optim, meta })
    }

    /// Writes through a temporary file and renames it into place; on
    /// failure the temporary file is removed.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(io_error(path))?;
        Self::from_bytes(&buf).map_err(|msg| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        })
    }

    /// Checks that this checkpoint was produced with the same architecture
    /// as `cfg`; the error names every mismatched key.
    /// The full model stored in the checkpoint, built under `cfg`. Every
    /// parameter must be present with its expected shape.
    pub fn detector(&self, cfg: &RunConfig) -> Result<Detr> {
        self.check_compatible(cfg)?;
        let mut model = Detr::new(cfg.model.clone(), cfg.seed)?;
        let mut bad = Vec::new();
        for (name, shape) in model.expected_shapes() {
            match self.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => bad.push(format!("{name} (shape {:?} vs {:?})", shape, t.shape())),
                None => bad.push(format!("{name} (missing)")),
            }
        }
        if !bad.is_empty() {
            return Err(Error::Incompatible(bad.join(", ")));
        }
        model.load_matching(&self.params, |_| true)?;
        Ok(model)
    }

    pub fn check_compatible(&self, cfg: &RunConfig) -> Result<()> {
        let snapshot = self.meta.get("config").map(String::as_str).unwrap_or("");
        let mut bad = cfg.architecture_mismatches(snapshot);
        if !bad.is_empty() {
            return Err(Error::Incompatible(bad.join(", ")));
        }
        let want = Detr::new(cfg.model.clone(), 0)?;
        for (name, shape) in want.expected_shapes() {
            if param_group(&name) != ParamGroup::Transformer {
                continue;
            }
            match self.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => bad.push(format!("{name} (shape {:?} vs {:?})", shape, t.shape())),
                None => bad.push(format!("{name} (missing)")),
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible(bad.join(", ")))
        }
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let res = (|| {
        let mut f = fs::File::create(&tmp).map_err(io_error(&tmp))?;
        f.write_all(bytes).map_err(io_error(&tmp))?;
        f.sync_all().map_err(io_error(&tmp))?;
        fs::rename(&tmp, path).map_err(io_error(path))
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res
}

/// One optimizer step's losses. For finetuning only `total` is set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f32,
    pub losses: LossBreakdown,
    pub pretrain: bool,
}

pub const METRICS_HEADER: &str = "step,epoch,lr,loss_total,loss_loc,loss_g,loss_r";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        if self.pretrain {
            format!(
                "{},{},{},{},{},{},{}",
                self.step, self.epoch, self.lr, l.total, l.loc, l.global_disc, l.region_disc
            )
        } else {
            format!("{},{},{},{},,,", self.step, self.epoch, self.lr, l.total)
        }
    }
}

/// Where and how a training loop runs.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Output directory for per-epoch checkpoints and `metrics.csv`; `None`
    /// keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Worker threads for batch assembly.
    pub threads: usize,
}

pub struct TrainOutcome {
    pub model: Detr,
    pub optim: AdamW,
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Splits an epoch's order into batches. A trailing remainder smaller than
/// `min_batch` is merged into the previous batch.
pub fn epoch_batches(order: &[usize], batch: usize, min_batch: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min_batch) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

fn parallel_map<T: Send, F>(items: &[usize], threads: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T> + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(|&i| f(i)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let results: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(|&i| f(i)).collect::<Result<Vec<T>>>())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

struct Metrics {
    out: Option<BufWriter<fs::File>>,
}

impl Metrics {
    /// Opens `metrics.csv`, keeping the first `keep` data rows of an
    /// existing file when resuming.
    fn open(dir: Option<&Path>, keep: Option<usize>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self { out: None });
        };
        let path = dir.join("metrics.csv");
        let mut kept = format!("{METRICS_HEADER}\n");
        if let Some(k) = keep {
            if let Ok(text) = fs::read_to_string(&path) {
                for line in text.lines().skip(1).take(k) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
        let mut f = BufWriter::new(fs::File::create(&path).map_err(io_error(&path))?);
        f.write_all(kept.as_bytes()).map_err(io_error(&path))?;
        Ok(Self { out: Some(f) })
    }

    fn push(&mut self, r: &StepRecord) -> Result<()> {
        if let Some(f) = &mut self.out {
            writeln!(f, "{}", r.csv_row()).map_err(io_error("metrics.csv"))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.out {
            f.flush().map_err(io_error("metrics.csv"))?;
        }
        Ok(())
    }
}

fn base_meta(cfg: &RunConfig, kind: &str, epoch: usize, step: usize) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), kind.into());
    meta.insert("config".into(), cfg.render());
    meta.insert("epoch".into(), epoch.to_string());
    meta.insert("step".into(), step.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("backbone_seed".into(), cfg.backbone_seed.to_string());
    meta.insert("rng".into(), format!("chacha8 derived from seed={} at epoch={epoch}", cfg.seed));
    meta
}

struct Resume {
    model: Detr,
    optim: AdamW,
    epoch: usize,
    step: usize,
}

fn resume_state(cfg: &RunConfig, path: &Path, kind: &str) -> Result<Resume> {
    let ck = Checkpoint::load(path)?;
    let bad = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    if ck.meta.get("kind").map(String::as_str) != Some(kind) {
        return Err(bad(format!("not a {kind} checkpoint")));
    }
    ck.check_compatible(cfg)?;
    let num = |k: &str| -> Result<usize> {
        ck.meta
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("missing meta.{k}")))
    };
    let (epoch, step) = (num("epoch")?, num("step")?);
    let mut model = Detr::new(cfg.model.clone(), cfg.seed)?;
    let want: Vec<String> = model.params.names().to_vec();
    let copied = model.load_matching(&ck.params, |_| true)?;
    if copied.len() != want.len() {
        let missing: Vec<&String> = want.iter().filter(|n| !copied.contains(n)).collect();
        return Err(Error::Incompatible(format!("{missing:?}")));
    }
    let optim = ck.optim.ok_or_else(|| bad("no optimizer state".into()))?;
    if optim.m.len() != model.params.len() {
        return Err(bad("optimizer state does not match the parameter list".into()));
    }
    Ok(Resume {
        model,
        optim,
        epoch,
        step,
    })
}

fn collect_grads(tape: &Tape<f32>, vars: &[crate::tensor::Var], trainable: &[bool]) -> Vec<Option<Vec<f32>>> {
    vars.iter()
        .zip(trainable)
        .map(|(&v, &t)| {
            if t {
                Some(tape.grad(v).map(<[f32]>::to_vec).unwrap_or_default())
            } else {
                None
            }
        })
        .collect()
}

fn fill_missing(grads: &mut [Option<Vec<f32>>], params: &ParamSet) {
    for (i, g) in grads.iter_mut().enumerate() {
        if let Some(g) = g {
            if g.is_empty() {
                *g = vec![0.0; params.value(i).numel()];
            }
        }
    }
}

/// Builds and prepares the view pairs of one batch.
pub fn pretrain_batch(
    cfg: &RunConfig,
    backbone: &FrozenBackbone,
    samples: &[Sample],
    idx: &[usize],
    epoch: usize,
    threads: usize,
) -> Result<Vec<PreparedPair>> {
    parallel_map(idx, threads, |i| {
        let s = seed::derive_seed(cfg.seed, &[TAG_VIEWS, epoch as u64, i as u64]);
        let vp = build_view_pair(&samples[i].image, &cfg.view, s)?;
        prepare_pair(backbone, &vp)
    })
}

/// Self-supervised pretraining over unlabeled `samples`.
pub fn pretrain(cfg: &RunConfig, samples: &[Sample], opts: &RunOptions, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("pretraining needs at least one image".into()));
    }
    let weights = cfg.effective_weights();
    let needs_pairs = weights.lambda_g > 0.0 && cfg.model.projector == crate::model::ProjectorKind::Mlp;
    if needs_pairs && samples.len() < 2 {
        return Err(Error::Config("the global loss with an MLP projector needs batches of at least 2".into()));
    }
    let backbone = FrozenBackbone::new(cfg.backbone_seed);
    let sched = Schedule::from_config(&cfg.pretrain);
    let popts = cfg.pretrain_options();
    let (mut model, mut optim, start_epoch, mut step) = match &opts.resume {
        Some(p) => {
            let r = resume_state(cfg, p, "pretrain")?;
            (r.model, r.optim, r.epoch, r.step)
        }
        None => {
            let m = Detr::new(cfg.model.clone(), cfg.seed)?;
            let o = AdamW::new(&m.params, &cfg.pretrain);
            (m, o, 0, 0)
        }
    };
    if let Some(d) = &opts.out_dir {
        fs::create_dir_all(d).map_err(io_error(d))?;
    }
    let mut metrics = Metrics::open(opts.out_dir.as_deref(), opts.resume.as_ref().map(|_| step))?;
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let trainable = vec![true; model.params.len()];
    for epoch in start_epoch..sched.epochs {
        let lr = sched.lr_at(epoch);
        let order = crate::data::shuffled_indices(samples.len(), seed::derive_seed(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        for idx in epoch_batches(&order, cfg.pretrain.batch, if needs_pairs { 2 } else { 1 }) {
            let batch = pretrain_batch(cfg, &backbone, samples, &idx, epoch, opts.threads)?;
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape, |_| true);
            let out = pretrain_forward(&mut tape, &model, &bound, &batch, &popts, None)?;
            let losses = total_loss(
                tape.item(out.loc),
                tape.item(out.global_disc),
                tape.item(out.region_disc),
                weights,
            )?;
            tape.backward(out.total)?;
            let mut grads = collect_grads(&tape, bound.vars(), &trainable);
            drop(tape);
            fill_missing(&mut grads, &model.params);
            clip_grad_norm(&mut grads, cfg.pretrain.clip_norm);
            optim.update(&mut model.params, &grads, lr)?;
            let rec = StepRecord {
                step,
                epoch,
                lr,
                losses,
                pretrain: true,
            };
            metrics.push(&rec)?;
            on_step(&rec);
            records.push(rec);
            step += 1;
        }
        metrics.flush()?;
        let due = (epoch + 1) % cfg.pretrain.checkpoint_every == 0 || epoch + 1 == cfg.pretrain.epochs;
        if let (Some(d), true) = (&opts.out_dir, due) {
            let path = d.join(format!("pretrain_epoch{:03}.sdtr", epoch + 1));
            Checkpoint {
                params: model.params.clone(),
                optim: Some(optim.clone()),
                meta: base_meta(cfg, "pretrain", epoch + 1, step),
            }
            .save(&path)?;
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome {
        model,
        optim,
        records,
        checkpoints,
    })
}

/// Initialization of a downstream model.
#[derive(Clone, Debug)]
pub enum FinetuneInit {
    Scratch,
    /// Transformer weights (input projection, encoder, decoder, queries)
    /// come from the checkpoint; every head keeps its fresh initialization.
    Pretrained(Box<Checkpoint>),
}

/// Fresh detector for `cfg`, optionally carrying pretrained transformer
/// weights. Returns the model and the names copied from the checkpoint.
pub fn init_detector(cfg: &RunConfig, init: &FinetuneInit) -> Result<(Detr, Vec<String>)> {
    let mut model = Detr::new(cfg.model.clone(), cfg.seed)?;
    let copied = match init {
        FinetuneInit::Scratch => Vec::new(),
        FinetuneInit::Pretrained(ck) => {
            ck.check_compatible(cfg)?;
            model.load_matching(&ck.params, |n| param_group(n) == ParamGroup::Transformer)?
        }
    };
    Ok((model, copied))
}

/// Backbone features of every sample, unflipped and flipped.
pub fn prepare_images(cfg: &RunConfig, samples: &[Sample], threads: usize) -> Result<Vec<[PreparedImage; 2]>> {
    let backbone = FrozenBackbone::new(cfg.backbone_seed);
    let idx: Vec<usize> = (0..samples.len()).collect();
    parallel_map(&idx, threads, |i| {
        Ok([
            prepare_image(&backbone, &samples[i], cfg.detect_size, false)?,
            prepare_image(&backbone, &samples[i], cfg.detect_size, true)?,
        ])
    })
}

/// Supervised detection training on labeled `samples`.
pub fn finetune(
    cfg: &RunConfig,
    samples: &[Sample],
    init: &FinetuneInit,
    opts: &RunOptions,
    on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let prepared = prepare_images(cfg, samples, opts.threads)?;
    finetune_prepared(cfg, &prepared, init, opts, on_step)
}

/// `finetune` over features computed by `prepare_images`.
pub fn finetune_prepared(
    cfg: &RunConfig,
    prepared: &[[PreparedImage; 2]],
    init: &FinetuneInit,
    opts: &RunOptions,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if prepared.is_empty() {
        return Err(Error::Config("finetuning needs at least one image".into()));
    }
    let sched = Schedule::from_config(&cfg.finetune);
    let fopts = cfg.finetune_options();
    let (mut model, mut optim, start_epoch, mut step) = match &opts.resume {
        Some(p) => {
            let r = resume_state(cfg, p, "finetune")?;
            (r.model, r.optim, r.epoch, r.step)
        }
        None => {
            let (m, _) = init_detector(cfg, init)?;
            let o = AdamW::new(&m.params, &cfg.finetune);
            (m, o, 0, 0)
        }
    };
    let trainable: Vec<bool> = model
        .params
        .names()
        .iter()
        .map(|n| match cfg.finetune_mode {
            FinetuneMode::Full => param_group(n) != ParamGroup::PretrainHead,
            FinetuneMode::Heads => param_group(n) == ParamGroup::DetectionHead,
        })
        .collect();
    if let Some(d) = &opts.out_dir {
        fs::create_dir_all(d).map_err(io_error(d))?;
    }
    let mut metrics = Metrics::open(opts.out_dir.as_deref(), opts.resume.as_ref().map(|_| step))?;
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let base = seed::derive_seed(cfg.seed, &[TAG_FINETUNE]);
    for epoch in start_epoch..sched.epochs {
        let lr = sched.lr_at(epoch);
        let order = crate::data::shuffled_indices(prepared.len(), seed::derive_seed(base, &[TAG_SHUFFLE, epoch as u64]));
        for idx in epoch_batches(&order, cfg.finetune.batch, 1) {
            let batch: Vec<PreparedImage> = idx
                .iter()
                .map(|&i| {
                    let flip = cfg.finetune_flip && seed::stream(base, &[TAG_FLIP, epoch as u64, i as u64]).gen::<bool>();
                    prepared[i][flip as usize].clone()
                })
                .collect();
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape, |_| true);
            let loss = finetune_forward(&mut tape, &model, &bound, &batch, &fopts)?;
            let value = tape.item(loss);
            tape.backward(loss)?;
            let mut grads = collect_grads(&tape, bound.vars(), &trainable);
            drop(tape);
            fill_missing(&mut grads, &model.params);
            clip_grad_norm(&mut grads, cfg.finetune.clip_norm);
            optim.update(&mut model.params, &grads, lr)?;
            let rec = StepRecord {
                step,
                epoch,
                lr,
                losses: LossBreakdown {
                    loc: 0.0,
                    global_disc: 0.0,
                    region_disc: 0.0,
                    total: value,
                    weights: cfg.effective_weights(),
                },
                pretrain: false,
            };
            metrics.push(&rec)?;
            on_step(&rec);
            records.push(rec);
            step += 1;
        }
        metrics.flush()?;
        let due = (epoch + 1) % cfg.finetune.checkpoint_every == 0 || epoch + 1 == cfg.finetune.epochs;
        if let (Some(d), true) = (&opts.out_dir, due) {
            let path = d.join(format!("finetune_epoch{:03}.sdtr", epoch + 1));
            Checkpoint {
                params: model.params.clone(),
                optim: Some(optim.clone()),
                meta: base_meta(cfg, "finetune", epoch + 1, step),
            }
            .save(&path)?;
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome {
        model,
        optim,
        records,
        checkpoints,
    })
}
