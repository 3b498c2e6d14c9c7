use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sdetr_core::backbone::FrozenBackbone;
use sdetr_core::config::{FinetuneMode, RunConfig};
use sdetr_core::data::{generate_dataset, load_dataset, Sample};
use sdetr_core::eval::{
    attention_maps, average_recall_at_k, evaluate, export_attention, probe_table, GroundTruth, MetricReport, ProbeRow,
};
use sdetr_core::objective::{detect, prepare_pair, PreparedImage};
use sdetr_core::train::{
    finetune_prepared, pretrain, prepare_images, Checkpoint, FinetuneInit, RunOptions, StepRecord,
};
use sdetr_core::views::build_view_pair;
use sdetr_core::{Error, Tensor};

const MANIFEST_NAME: &str = "run_manifest.txt";

#[derive(Parser, Debug)]
#[command(name = "sdetr", version, about = "Multi-view self-supervised DETR pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file applied on top of the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after --config. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic labeled dataset (PPM images plus manifest).
    GenData {
        #[arg(long)]
        count: usize,
        /// Scene seed; overrides data.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Self-supervised pretraining on the images of a dataset.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an epoch checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Supervised detection finetuning.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `scratch` or a pretraining checkpoint.
        #[arg(long, default_value = "scratch")]
        init: String,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a finetuned checkpoint; prints the metric row as CSV.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Head-only finetuning from a pretrained checkpoint and from random
    /// init; prints AR@1 and AR@10 of both.
    Probe {
        /// Labeled training set for the heads.
        #[arg(long)]
        data: PathBuf,
        /// Held-out set the recall is measured on.
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write per-query decoder cross-attention maps as PGM files.
    ExportAttn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Image index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Condition the queries on the proposals of a second view of the
        /// image (the pretraining path) instead of the plain decoder.
        #[arg(long)]
        view_pair: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Usage and configuration problems exit 1, everything else 2.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Incompatible(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn threads() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("SDTR_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(cap) if cap > 0 => cap.min(avail),
        _ => avail,
    }
}

/// Defaults, then the config file, then overrides, then cross-field checks.
/// Every problem found along the way is reported together.
fn resolve(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    let mut problems = Vec::new();
    if let Some(path) = &args.config {
        match fs::read_to_string(path) {
            Ok(text) => {
                if let Err(e) = cfg.apply_text(&text) {
                    problems.push(format!("{}: {e}", path.display()));
                }
            }
            Err(e) => return Err(Failure::Usage(format!("{}: {e}", path.display()))),
        }
    }
    if let Err(e) = cfg.apply_overrides(&args.sets) {
        problems.push(format!("--set: {e}"));
    }
    if let Err(e) = cfg.validate() {
        problems.push(e.to_string());
    }
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Failure::Usage(problems.join("\n")))
    }
}

fn log_config(cfg: &RunConfig) {
    eprintln!("resolved config:");
    for line in cfg.render().lines() {
        eprintln!("  {line}");
    }
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Text record of a run: the command, the resolved config and the files
/// written. It holds nothing time- or host-dependent.
fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, notes: &[String], outputs: &[PathBuf]) -> Outcome {
    let mut s = String::new();
    let _ = writeln!(s, "# sdetr {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "command = {command}");
    for n in notes {
        let _ = writeln!(s, "{n}");
    }
    s.push_str("\n[config]\n");
    s.push_str(&cfg.render());
    s.push_str("\n[outputs]\n");
    for p in outputs {
        let shown = p.strip_prefix(out).unwrap_or(p);
        let _ = writeln!(s, "{}", shown.display());
    }
    write_file(&out.join(MANIFEST_NAME), s.as_bytes())
}

fn load_samples(path: &Path) -> Result<Vec<Sample>, Failure> {
    let samples = load_dataset(path).map_err(|e| Failure::Runtime(e.to_string()))?;
    eprintln!("loaded {} images from {}", samples.len(), path.display());
    Ok(samples)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Ok(Checkpoint::load(path)?)
}

fn progress(r: &StepRecord) {
    if r.step % 50 == 0 {
        eprintln!("step {} epoch {} lr {:e} loss {:.4}", r.step, r.epoch, r.lr, r.losses.total);
    }
}

fn write_metrics(out: &Path, report: &MetricReport) -> Result<PathBuf, Failure> {
    let path = out.join("metrics_eval.csv");
    write_file(&path, format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row()).as_bytes())?;
    Ok(path)
}

fn gen_data(count: usize, seed: Option<u64>, out: &Path, args: &ConfigArgs) -> Outcome {
    let mut args = args.clone();
    if let Some(s) = seed {
        args.sets.push(format!("data.seed={s}"));
    }
    let cfg = resolve(&args)?;
    log_config(&cfg);
    let manifest = generate_dataset(count, &cfg.data, out).map_err(|e| Failure::Runtime(e.to_string()))?;
    eprintln!("wrote {count} images, manifest {}", manifest.display());
    write_manifest(out, "gen-data", &cfg, &[format!("count = {count}")], &[manifest])
}

fn run_pretrain(data: &Path, out: &Path, resume: Option<PathBuf>, args: &ConfigArgs) -> Outcome {
    let cfg = resolve(args)?;
    log_config(&cfg);
    let samples = load_samples(data)?;
    create_dir(out)?;
    let opts = RunOptions {
        out_dir: Some(out.to_path_buf()),
        resume,
        threads: threads(),
    };
    let outcome = pretrain(&cfg, &samples, &opts, progress)?;
    let mut outputs = outcome.checkpoints.clone();
    outputs.push(out.join("metrics.csv"));
    write_manifest(out, "pretrain", &cfg, &[format!("data = {}", data.display())], &outputs)
}

fn run_finetune(data: &Path, out: &Path, init: &str, resume: Option<PathBuf>, args: &ConfigArgs) -> Outcome {
    let cfg = resolve(args)?;
    log_config(&cfg);
    let start = if init == "scratch" {
        eprintln!("init: scratch (seeded random transformer)");
        FinetuneInit::Scratch
    } else {
        let ck = load_checkpoint(Path::new(init))?;
        ck.check_compatible(&cfg)?;
        eprintln!("init: transformer weights from {init}; heads from the seeded init");
        FinetuneInit::Pretrained(Box::new(ck))
    };
    let samples = load_samples(data)?;
    create_dir(out)?;
    let threads = threads();
    let prepared = prepare_images(&cfg, &samples, threads)?;
    let opts = RunOptions {
        out_dir: Some(out.to_path_buf()),
        resume,
        threads,
    };
    let outcome = finetune_prepared(&cfg, &prepared, &start, &opts, progress)?;
    let mut outputs = outcome.checkpoints.clone();
    outputs.push(out.join("metrics.csv"));
    let notes = [format!("data = {}", data.display()), format!("init = {init}")];
    write_manifest(out, "finetune", &cfg, &notes, &outputs)
}

fn prepared_eval(cfg: &RunConfig, samples: &[Sample]) -> Result<(Vec<PreparedImage>, Vec<GroundTruth>), Failure> {
    let prepared = prepare_images(cfg, samples, threads())?;
    let images = prepared.into_iter().map(|[a, _]| a).collect();
    let gt = samples.iter().map(GroundTruth::from).collect();
    Ok((images, gt))
}

fn run_eval(data: &Path, ckpt: &Path, out: Option<&Path>, args: &ConfigArgs) -> Outcome {
    let cfg = resolve(args)?;
    log_config(&cfg);
    let model = load_checkpoint(ckpt)?.detector(&cfg)?;
    let samples = load_samples(data)?;
    let (images, gt) = prepared_eval(&cfg, &samples)?;
    let report = evaluate(&model, &images, &gt)?;
    println!("{}", MetricReport::CSV_HEADER);
    println!("{}", report.csv_row());
    if let Some(out) = out {
        create_dir(out)?;
        let path = write_metrics(out, &report)?;
        let notes = [format!("data = {}", data.display()), format!("ckpt = {}", ckpt.display())];
        write_manifest(out, "eval", &cfg, &notes, &[path])?;
    }
    Ok(())
}

fn run_probe(data: &Path, test: &Path, init: &Path, out: &Path, args: &ConfigArgs) -> Outcome {
    let mut cfg = resolve(args)?;
    cfg.finetune_mode = FinetuneMode::Heads;
    log_config(&cfg);
    let ck = load_checkpoint(init)?;
    ck.check_compatible(&cfg)?;
    let train = load_samples(data)?;
    let held_out = load_samples(test)?;
    let threads = threads();
    let prepared = prepare_images(&cfg, &train, threads)?;
    let (images, gt) = prepared_eval(&cfg, &held_out)?;
    create_dir(out)?;
    let mut rows = Vec::new();
    for (name, start) in [("pretrained", FinetuneInit::Pretrained(Box::new(ck))), ("random", FinetuneInit::Scratch)] {
        eprintln!("probe: head-only finetuning from {name} init");
        let opts = RunOptions {
            out_dir: None,
            resume: None,
            threads,
        };
        let model = finetune_prepared(&cfg, &prepared, &start, &opts, progress)?.model;
        let mut dets = Vec::new();
        for (i, img) in images.iter().enumerate() {
            dets.extend(detect(&model, img, i)?);
        }
        rows.push(ProbeRow {
            init: name.to_string(),
            ar1: average_recall_at_k(&dets, &gt, 1),
            ar10: average_recall_at_k(&dets, &gt, 10),
        });
    }
    let table = probe_table(&rows);
    print!("{table}");
    let path = out.join("probe.csv");
    write_file(&path, table.as_bytes())?;
    let notes = [
        format!("data = {}", data.display()),
        format!("test = {}", test.display()),
        format!("init = {}", init.display()),
    ];
    write_manifest(out, "probe", &cfg, &notes, &[path])
}

fn run_export(data: &Path, ckpt: &Path, index: usize, view_pair: bool, out: &Path, args: &ConfigArgs) -> Outcome {
    let cfg = resolve(args)?;
    log_config(&cfg);
    let model = load_checkpoint(ckpt)?.detector(&cfg)?;
    let samples = load_samples(data)?;
    let sample = samples
        .get(index)
        .ok_or_else(|| Failure::Usage(format!("--index {index} out of range ({} images)", samples.len())))?;
    let backbone = FrozenBackbone::new(cfg.backbone_seed);
    let maps = if view_pair {
        let vp = build_view_pair(&sample.image, &cfg.view, cfg.seed).map_err(|e| Failure::Runtime(e.to_string()))?;
        let pair = prepare_pair(&backbone, &vp)?;
        let img = PreparedImage {
            grid: pair.grid,
            h: pair.h[1].clone(),
            boxes: Tensor::zeros([0, 4]),
            labels: Vec::new(),
            image_size: (cfg.view.view_size, cfg.view.view_size),
        };
        attention_maps(&model, &img, Some(&pair.z[0]))?
    } else {
        let img = prepared_eval(&cfg, std::slice::from_ref(sample))?.0.remove(0);
        attention_maps(&model, &img, None)?
    };
    let written = export_attention(&maps, out)?;
    eprintln!("wrote {} attention maps to {}", maps.maps.len(), out.display());
    let notes = [
        format!("data = {}", data.display()),
        format!("ckpt = {}", ckpt.display()),
        format!("index = {index}"),
        format!("view_pair = {view_pair}"),
    ];
    write_manifest(out, "export-attn", &cfg, &notes, &written)
}

fn run(cli: Cli) -> Outcome {
    match cli.cmd {
        Command::GenData { count, seed, out, cfg } => gen_data(count, seed, &out, &cfg),
        Command::Pretrain { data, out, resume, cfg } => run_pretrain(&data, &out, resume, &cfg),
        Command::Finetune {
            data,
            out,
            init,
            resume,
            cfg,
        } => run_finetune(&data, &out, &init, resume, &cfg),
        Command::Eval { data, ckpt, out, cfg } => run_eval(&data, &ckpt, out.as_deref(), &cfg),
        Command::Probe {
            data,
            test,
            init,
            out,
            cfg,
        } => run_probe(&data, &test, &init, &out, &cfg),
        Command::ExportAttn {
            data,
            ckpt,
            index,
            view_pair,
            out,
            cfg,
        } => run_export(&data, &ckpt, index, view_pair, &out, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
