//! Flat `key = value` run configuration.
//!
//! Every tunable of a run lives under one dotted key. Text configs and
//! `--set key=value` overrides go through the same setter, unknown keys are
//! rejected, and all problems are reported together.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{ProjectorKind, TransformerConfig};
use crate::objective::{FinetuneOptions, PretrainOptions, RegionTarget};
use crate::views::{AugmentConfig, ProposalMode, ViewConfig};

/// Optimizer and schedule of one training phase.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    /// Epoch at which the learning rate is multiplied by `decay_factor`.
    pub decay_epoch: usize,
    pub decay_factor: f32,
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f32,
    /// Write a checkpoint every this many epochs; the last epoch is always
    /// written.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        Self {
            batch: 8,
            epochs: 20,
            decay_epoch: 14,
            decay_factor: 0.1,
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.1,
            checkpoint_every: 1,
        }
    }

    pub fn finetune_default() -> Self {
        Self {
            epochs: 50,
            decay_epoch: 35,
            ..Self::pretrain_default()
        }
    }

    fn check(&self, prefix: &str, bad: &mut Vec<String>) {
        if self.batch == 0 {
            bad.push(format!("{prefix}.batch must be >= 1"));
        }
        if self.epochs == 0 {
            bad.push(format!("{prefix}.epochs must be >= 1"));
        }
        if self.checkpoint_every == 0 {
            bad.push(format!("{prefix}.checkpoint_every must be >= 1"));
        }
        if self.decay_epoch >= self.epochs {
            bad.push(format!(
                "{prefix}.decay_epoch {} must be below {prefix}.epochs {}",
                self.decay_epoch, self.epochs
            ));
        }
        for (k, v) in [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("eps", self.eps),
            ("clip_norm", self.clip_norm),
            ("decay_factor", self.decay_factor),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bad.push(format!("{prefix}.{k} must be finite and >= 0, got {v}"));
            }
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                bad.push(format!("{prefix}.{k} must be in [0, 1), got {v}"));
            }
        }
    }
}

/// Which parameters finetuning updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneMode {
    Full,
    /// Box and class heads only; the transformer stays fixed.
    Heads,
}

impl FromStr for FinetuneMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(Self::Full),
            "heads" => Ok(Self::Heads),
            _ => Err(format!("unknown finetune mode `{s}` (full|heads)")),
        }
    }
}

impl std::fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Heads => "heads",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone_seed: u64,
    pub data: SceneSpec,
    pub view: ViewConfig,
    pub model: TransformerConfig,
    pub weights: LossWeights,
    pub enable_g: bool,
    pub enable_r: bool,
    pub region_target: RegionTarget,
    pub aux_loss: bool,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub finetune_mode: FinetuneMode,
    /// Side of the square input the detector sees downstream.
    pub detect_size: usize,
    pub finetune_flip: bool,
    pub eos_weight: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backbone_seed: 0,
            data: SceneSpec::default(),
            view: ViewConfig::default(),
            model: TransformerConfig::desk(),
            weights: LossWeights::DESK,
            enable_g: true,
            enable_r: true,
            region_target: RegionTarget::Crop,
            aux_loss: false,
            pretrain: TrainConfig::pretrain_default(),
            finetune: TrainConfig::finetune_default(),
            finetune_mode: FinetuneMode::Full,
            detect_size: 128,
            finetune_flip: true,
            eos_weight: 0.1,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("{key}: cannot parse `{v}`"))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(format!("{key}: expected a boolean, got `{v}`")),
    }
}

fn parse_pair(key: &str, v: &str) -> std::result::Result<(f32, f32), String> {
    let mut it = v.split(',').map(str::trim);
    match (it.next(), it.next(), it.next()) {
        (Some(a), Some(b), None) => Ok((parse(key, a)?, parse(key, b)?)),
        _ => Err(format!("{key}: expected `lo,hi`, got `{v}`")),
    }
}

fn set_train(t: &mut TrainConfig, key: &str, field: &str, v: &str) -> std::result::Result<(), String> {
    match field {
        "batch" => t.batch = parse(key, v)?,
        "epochs" => t.epochs = parse(key, v)?,
        "decay_epoch" => t.decay_epoch = parse(key, v)?,
        "decay_factor" => t.decay_factor = parse(key, v)?,
        "lr" => t.lr = parse(key, v)?,
        "weight_decay" => t.weight_decay = parse(key, v)?,
        "beta1" => t.beta1 = parse(key, v)?,
        "beta2" => t.beta2 = parse(key, v)?,
        "eps" => t.eps = parse(key, v)?,
        "clip_norm" => t.clip_norm = parse(key, v)?,
        "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
        _ => return Err(format!("unknown key `{key}`")),
    }
    Ok(())
}

fn train_entries(prefix: &str, t: &TrainConfig, out: &mut Vec<(String, String)>) {
    for (k, v) in [
        ("batch", t.batch.to_string()),
        ("epochs", t.epochs.to_string()),
        ("decay_epoch", t.decay_epoch.to_string()),
        ("decay_factor", t.decay_factor.to_string()),
        ("lr", t.lr.to_string()),
        ("weight_decay", t.weight_decay.to_string()),
        ("beta1", t.beta1.to_string()),
        ("beta2", t.beta2.to_string()),
        ("eps", t.eps.to_string()),
        ("clip_norm", t.clip_norm.to_string()),
        ("checkpoint_every", t.checkpoint_every.to_string()),
    ] {
        out.push((format!("{prefix}.{k}"), v));
    }
}

impl RunConfig {
    /// Sets one key. `loss.preset` overwrites all three weights, so later
    /// `loss.lambda_*` keys refine it.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "backbone.seed" => self.backbone_seed = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.width" => self.data.width = parse(key, v)?,
            "data.height" => self.data.height = parse(key, v)?,
            "data.min_objects" => self.data.min_objects = parse(key, v)?,
            "data.max_objects" => self.data.max_objects = parse(key, v)?,
            "data.min_side" => self.data.min_side = parse(key, v)?,
            "data.max_side" => self.data.max_side = parse(key, v)?,
            "data.max_pair_iou" => self.data.max_pair_iou = parse(key, v)?,
            "data.noise_amplitude" => self.data.noise_amplitude = parse(key, v)?,
            "data.noise_cell" => self.data.noise_cell = parse(key, v)?,
            "data.min_gradients" => self.data.min_gradients = parse(key, v)?,
            "data.max_gradients" => self.data.max_gradients = parse(key, v)?,
            "view.size" => self.view.view_size = parse(key, v)?,
            "view.tau" => self.view.tau = parse(key, v)?,
            "view.n" => self.view.n = parse(key, v)?,
            "view.jitter" => self.view.jitter = parse(key, v)?,
            "view.base_area" => self.view.base_area = parse_pair(key, v)?,
            "view.base_aspect" => self.view.base_aspect = parse_pair(key, v)?,
            "view.min_proposal_side" => self.view.min_proposal_side = parse(key, v)?,
            "view.augment" => {
                self.view.augment = if parse_bool(key, v)? {
                    AugmentConfig::default()
                } else {
                    AugmentConfig::none()
                }
            }
            "proposals.mode" => self.view.proposals = v.parse::<ProposalMode>().map_err(|e| format!("{key}: {e}"))?,
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.enc_layers" => self.model.enc_layers = parse(key, v)?,
            "model.dec_layers" => self.model.dec_layers = parse(key, v)?,
            "model.ffn" => self.model.ffn = parse(key, v)?,
            "model.queries" => self.model.queries = parse(key, v)?,
            "model.classes" => self.model.classes = parse(key, v)?,
            "model.projector" => self.model.projector = v.parse::<ProjectorKind>().map_err(|e| format!("{key}: {e}"))?,
            "model.pos_input" => self.model.pos_input = parse_bool(key, v)?,
            "loss.preset" => {
                self.weights = match v {
                    "desk" => LossWeights::DESK,
                    "imagenet" => LossWeights::IMAGENET,
                    "coco" => LossWeights::COCO,
                    _ => return Err(format!("{key}: unknown preset `{v}` (desk|imagenet|coco)")),
                }
            }
            "loss.lambda_r" => self.weights.lambda_r = parse(key, v)?,
            "loss.lambda_g" => self.weights.lambda_g = parse(key, v)?,
            "loss.lambda_loc" => self.weights.lambda_loc = parse(key, v)?,
            "loss.enable_g" => self.enable_g = parse_bool(key, v)?,
            "loss.enable_r" => self.enable_r = parse_bool(key, v)?,
            "loss.region_target" => self.region_target = v.parse::<RegionTarget>().map_err(|e| format!("{key}: {e}"))?,
            "loss.aux" => self.aux_loss = parse_bool(key, v)?,
            "finetune.mode" => self.finetune_mode = v.parse::<FinetuneMode>().map_err(|e| format!("{key}: {e}"))?,
            "finetune.flip" => self.finetune_flip = parse_bool(key, v)?,
            "finetune.eos_weight" => self.eos_weight = parse(key, v)?,
            "detect.size" => self.detect_size = parse(key, v)?,
            _ => {
                if let Some(f) = key.strip_prefix("pretrain.") {
                    set_train(&mut self.pretrain, key, f, v)?;
                } else if let Some(f) = key.strip_prefix("finetune.") {
                    set_train(&mut self.finetune, key, f, v)?;
                } else {
                    return Err(format!("unknown key `{key}`"));
                }
            }
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let a = &self.view.base_area;
        let r = &self.view.base_aspect;
        let mut out: Vec<(String, String)> = [
            ("seed", self.seed.to_string()),
            ("backbone.seed", self.backbone_seed.to_string()),
            ("data.seed", self.data.seed.to_string()),
            ("data.width", self.data.width.to_string()),
            ("data.height", self.data.height.to_string()),
            ("data.min_objects", self.data.min_objects.to_string()),
            ("data.max_objects", self.data.max_objects.to_string()),
            ("data.min_side", self.data.min_side.to_string()),
            ("data.max_side", self.data.max_side.to_string()),
            ("data.max_pair_iou", self.data.max_pair_iou.to_string()),
            ("data.noise_amplitude", self.data.noise_amplitude.to_string()),
            ("data.noise_cell", self.data.noise_cell.to_string()),
            ("data.min_gradients", self.data.min_gradients.to_string()),
            ("data.max_gradients", self.data.max_gradients.to_string()),
            ("view.size", self.view.view_size.to_string()),
            ("view.tau", self.view.tau.to_string()),
            ("view.n", self.view.n.to_string()),
            ("view.jitter", self.view.jitter.to_string()),
            ("view.base_area", format!("{},{}", a.0, a.1)),
            ("view.base_aspect", format!("{},{}", r.0, r.1)),
            ("view.min_proposal_side", self.view.min_proposal_side.to_string()),
            ("view.augment", (self.view.augment != AugmentConfig::none()).to_string()),
            ("proposals.mode", self.view.proposals.to_string()),
            ("model.d_model", self.model.d_model.to_string()),
            ("model.heads", self.model.heads.to_string()),
            ("model.enc_layers", self.model.enc_layers.to_string()),
            ("model.dec_layers", self.model.dec_layers.to_string()),
            ("model.ffn", self.model.ffn.to_string()),
            ("model.queries", self.model.queries.to_string()),
            ("model.classes", self.model.classes.to_string()),
            ("model.projector", self.model.projector.to_string()),
            ("model.pos_input", self.model.pos_input.to_string()),
            ("loss.lambda_r", self.weights.lambda_r.to_string()),
            ("loss.lambda_g", self.weights.lambda_g.to_string()),
            ("loss.lambda_loc", self.weights.lambda_loc.to_string()),
            ("loss.enable_g", self.enable_g.to_string()),
            ("loss.enable_r", self.enable_r.to_string()),
            ("loss.region_target", self.region_target.to_string()),
            ("loss.aux", self.aux_loss.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        train_entries("pretrain", &self.pretrain, &mut out);
        train_entries("finetune", &self.finetune, &mut out);
        for (k, v) in [
            ("finetune.mode", self.finetune_mode.to_string()),
            ("finetune.flip", self.finetune_flip.to_string()),
            ("finetune.eos_weight", self.eos_weight.to_string()),
            ("detect.size", self.detect_size.to_string()),
        ] {
            out.push((k.to_string(), v));
        }
        out
    }

    /// `key = value` lines that parse back to the same config.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut bad = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v) {
                        bad.push(format!("line {}: {e}", i + 1));
                    }
                }
                None => bad.push(format!("line {}: expected `key = value`, got `{line}`", i + 1)),
            }
        }
        join_errors(bad)
    }

    /// Applies `key=value` overrides as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, sets: &[S]) -> Result<()> {
        let mut bad = Vec::new();
        for s in sets {
            let s = s.as_ref();
            match s.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v) {
                        bad.push(e);
                    }
                }
                None => bad.push(format!("override `{s}` is not key=value")),
            }
        }
        join_errors(bad)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Cross-field validation; lists every problem found.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if let Err(e) = self.data.validate() {
            bad.push(e.to_string());
        }
        if let Err(e) = self.view.validate() {
            bad.push(e.to_string());
        }
        if let Err(e) = self.model.validate() {
            bad.push(e.to_string());
        }
        if let Err(e) = self.weights.validate() {
            bad.push(e.to_string());
        }
        if self.view.n != self.model.queries {
            bad.push(format!(
                "view.n {} must equal model.queries {}",
                self.view.n, self.model.queries
            ));
        }
        if self.detect_size == 0 || self.detect_size % 8 != 0 {
            bad.push(format!("detect.size {} not a positive multiple of 8", self.detect_size));
        }
        if !(self.eos_weight >= 0.0) {
            bad.push("finetune.eos_weight must be >= 0".into());
        }
        self.pretrain.check("pretrain", &mut bad);
        self.finetune.check("finetune", &mut bad);
        join_errors(bad)
    }

    /// Loss weights with disabled terms zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            lambda_r: if self.enable_r { self.weights.lambda_r } else { 0.0 },
            lambda_g: if self.enable_g { self.weights.lambda_g } else { 0.0 },
            lambda_loc: self.weights.lambda_loc,
        }
    }

    pub fn pretrain_options(&self) -> PretrainOptions {
        PretrainOptions {
            weights: self.effective_weights(),
            region_target: self.region_target,
            aux_loss: self.aux_loss,
            ..PretrainOptions::default()
        }
    }

    pub fn finetune_options(&self) -> FinetuneOptions {
        FinetuneOptions {
            eos_weight: self.eos_weight,
            aux_loss: self.aux_loss,
            ..FinetuneOptions::default()
        }
    }

    /// Keys whose values must agree for a checkpoint to load into a model
    /// built from this config.
    pub fn architecture_keys() -> &'static [&'static str] {
        &[
            "backbone.seed",
            "model.d_model",
            "model.heads",
            "model.enc_layers",
            "model.dec_layers",
            "model.ffn",
            "model.queries",
            "model.projector",
            "model.pos_input",
        ]
    }

    /// Architecture keys whose values differ from those recorded in
    /// `snapshot` (a rendered config), as `key (ours vs theirs)`.
    pub fn architecture_mismatches(&self, snapshot: &str) -> Vec<String> {
        let theirs: std::collections::HashMap<&str, &str> = snapshot
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let ours: std::collections::HashMap<String, String> = self.entries().into_iter().collect();
        Self::architecture_keys()
            .iter()
            .filter_map(|k| {
                let a = ours.get(*k).map(String::as_str).unwrap_or("");
                match theirs.get(k) {
                    Some(b) if *b == a => None,
                    Some(b) => Some(format!("{k} ({a} vs {b})")),
                    None => Some(format!("{k} (missing)")),
                }
            })
            .collect()
    }
}

fn join_errors(bad: Vec<String>) -> Result<()> {
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(bad.join("\n")))
    }
}
