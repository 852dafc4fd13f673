//! Command-line front end.
//!
//! Every flag can also come from a flat `key=value` file given with
//! `--config`. Keys are flag names without the dashes (`lr-grid` or
//! `lr_grid`); a flag on the command line wins over the same key in the file.
//! Switches take `true` or `false`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{backbone_checkpoint, backbone_from_checkpoint, content_hash, Checkpoint};
use crate::data::synth::{write_task, SynthSpec, Task};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::lora::LoraConfig;
use crate::optim::Schedule;
use crate::report::{read_results, series, table, upsert_results, SeriesQuery};
use crate::tensor::Precision;
use crate::trainer::{
    dedup_grid, pretrain_backbone, run_selection, Mode, PretrainConfig, Prepared, Selection, TrainConfig,
    ValProtocol, DEFAULT_LR_GRID,
};
use crate::verify::{run_all, VerifyOptions};
use crate::vit::ViTConfig;

#[derive(Debug, Parser)]
#[command(name = "lorafit", version, about = "Linear-probe and LoRA fine-tuning experiments on a small ViT")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic source/target datasets.
    Synth(SynthArgs),
    /// Pretrain a backbone end to end and write a checkpoint.
    Pretrain(PretrainArgs),
    /// Linear probe on frozen features.
    Probe(SingleArgs),
    /// LoRA adapters plus a linear head.
    Lora(SingleArgs),
    /// Several modes over the same selections.
    Sweep(SweepArgs),
    /// Training-set fraction scaling.
    Scale(ScaleArgs),
    /// Run the invariant checks.
    Verify(VerifyArgs),
    /// Tables and series from a results CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// key=value generator spec; defaults apply to missing keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// source, target or both (writes <out>/source and <out>/target).
    #[arg(long, default_value = "both")]
    task: String,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-2)]
    weight_decay: f64,
    #[arg(long, default_value = "cosine")]
    schedule: String,
    #[arg(long, default_value = "f64")]
    precision: String,
    /// Storage dtype of the written checkpoint.
    #[arg(long, default_value = "f64")]
    dtype: String,
    #[arg(long, default_value = "tiny")]
    preset: String,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Results CSV; rows are upserted by (mode, dataset, k_or_fraction, seed).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    #[arg(long)]
    lr_grid: Option<String>,
    #[arg(long, default_value_t = 2)]
    rank: usize,
    #[arg(long, default_value = "q,v")]
    targets: String,
    /// Defaults to the rank (scaling 1).
    #[arg(long)]
    alpha: Option<f64>,
    /// Fixed step count; otherwise max(200, 50k) for shots and epochs for fractions.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-2)]
    weight_decay: f64,
    #[arg(long, default_value = "cosine")]
    schedule: String,
    #[arg(long, default_value = "f64")]
    precision: String,
    /// fewshot or full.
    #[arg(long, default_value = "fewshot")]
    val: String,
    /// Names the run manifest `<out stem>.<label>.manifest`.
    #[arg(long)]
    label: Option<String>,
    /// Report wall_ms as 0 so reruns give byte-identical rows.
    #[arg(long)]
    no_timing: bool,
    /// Probe mode: recompute backbone features every step.
    #[arg(long)]
    no_feature_cache: bool,
}

#[derive(Debug, Args)]
struct SelectionArgs {
    /// Shots per class, comma separated.
    #[arg(long)]
    shots: Option<String>,
    /// Train-split fractions, comma separated.
    #[arg(long)]
    fraction: Option<String>,
    /// Use the whole train split.
    #[arg(long)]
    full: bool,
}

#[derive(Debug, Args)]
struct SingleArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    sel: SelectionArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    sel: SelectionArgs,
    #[arg(long, default_value = "linear_probe,lora")]
    modes: String,
}

#[derive(Debug, Args)]
struct ScaleArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    fractions: String,
    #[arg(long, default_value = "lora")]
    mode: String,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also load this checkpoint and check its CRC.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Initialize LoRA B nonzero; the zero-init check must fail.
    #[arg(long)]
    debug_nonzero_b: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// table or series.
    #[arg(long, default_value = "table")]
    shape: String,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    /// Series only: append this mode's largest-x result as a reference row.
    #[arg(long)]
    reference_mode: Option<String>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::config(format!("bad {what} '{t}'"))))
        .collect()
}

fn flag_present(args: &[String], flag: &str) -> bool {
    args.iter()
        .any(|a| a == flag || a.strip_prefix(flag).is_some_and(|r| r.starts_with('=')))
}

/// Removes `--config FILE` from `args` and appends the file's keys as flags
/// that are not already given.
pub fn expand_config(mut args: Vec<String>) -> Result<Vec<String>> {
    let Some(pos) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let path = match args[pos].strip_prefix("--config=") {
        Some(p) => {
            let p = p.to_string();
            args.remove(pos);
            p
        }
        None => {
            if pos + 1 >= args.len() {
                return Err(Error::config("--config needs a file"));
            }
            args.remove(pos);
            args.remove(pos)
        }
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::config(format!("config {path}: {e}")))?;
    let kv = KvMap::parse(&text).map_err(|e| Error::config(format!("config {path}: {e}")))?;
    for (k, v) in kv.iter() {
        let flag = format!("--{}", k.replace('_', "-"));
        if flag_present(&args, &flag) {
            continue;
        }
        match v {
            "true" => args.push(flag),
            "false" => {}
            _ => {
                args.push(flag);
                args.push(v.to_string());
            }
        }
    }
    Ok(args)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Probe(a) => {
            let sels = selections(&a.sel)?;
            cmd_train("probe", &a.train, &[Mode::LinearProbe], &sels)
        }
        Command::Lora(a) => {
            let sels = selections(&a.sel)?;
            cmd_train("lora", &a.train, &[Mode::Lora], &sels)
        }
        Command::Sweep(a) => {
            let sels = selections(&a.sel)?;
            let modes = a
                .modes
                .split(',')
                .map(|m| Mode::parse(m.trim()))
                .collect::<Result<Vec<_>>>()?;
            if modes.is_empty() {
                return Err(Error::config("--modes is empty"));
            }
            cmd_train("sweep", &a.train, &modes, &sels)
        }
        Command::Scale(a) => {
            let fr: Vec<f64> = list(&a.fractions, "fraction")?;
            if fr.is_empty() {
                return Err(Error::config("--fractions is empty"));
            }
            let sels: Vec<Selection> = fr.into_iter().map(Selection::Fraction).collect();
            cmd_train("scale", &a.train, &[Mode::parse(&a.mode)?], &sels)
        }
        Command::Verify(a) => cmd_verify(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            SynthSpec::from_kv(&KvMap::parse(&text)?)?
        }
        None => SynthSpec::default(),
    };
    let tasks: Vec<(Task, PathBuf)> = match a.task.as_str() {
        "source" => vec![(Task::Source, a.out.clone())],
        "target" => vec![(Task::Target, a.out.clone())],
        "both" => vec![
            (Task::Source, a.out.join("source")),
            (Task::Target, a.out.join("target")),
        ],
        other => return Err(Error::config(format!("unknown task '{other}'"))),
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let spec_path = a.out.join("synth.spec");
    std::fs::write(&spec_path, spec.to_kv().to_canonical()).map_err(|e| Error::io(&spec_path, e))?;
    for (task, dir) in tasks {
        let m = write_task(&spec, task, &dir)?;
        println!("{}: {} images, {} classes -> {}", task.name(), m.items.len(), m.num_classes(), dir.display());
    }
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = PretrainConfig {
        vit: ViTConfig::preset(&a.preset)?,
        steps: a.steps,
        lr: a.lr,
        batch_size: a.batch_size,
        weight_decay: a.weight_decay,
        schedule: Schedule::parse(&a.schedule)?,
        seed: a.seed,
        precision: Precision::parse(&a.precision)?,
    };
    let dtype = Precision::parse(&a.dtype)?;
    let data = Dataset::load(&a.data)?;
    let out = pretrain_backbone(&data, &cfg)?;
    let mut ck = backbone_checkpoint(&out.model);
    ck.meta.extend(cfg.to_kv().iter().map(|(k, v)| (k.to_string(), v.to_string())));
    ck.meta.set("pretrain.data", data.name());
    ck.meta.set("pretrain.test_top1", out.test_top1);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = ck.to_bytes(dtype);
    std::fs::write(&a.out, &bytes).map_err(|e| Error::io(&a.out, e))?;

    let mut manifest = ck.meta.clone();
    manifest.set("command", "pretrain");
    manifest.set("data.dir", a.data.display());
    manifest.set("checkpoint.dtype", dtype.name());
    manifest.set("checkpoint.content_hash", content_hash(&bytes));
    manifest.set("pretrain.final_loss", out.loss_curve.last().copied().unwrap_or(f64::NAN));
    let mpath = sibling(&a.out, "manifest");
    std::fs::write(&mpath, manifest.to_canonical()).map_err(|e| Error::io(&mpath, e))?;
    println!(
        "pretrained {} steps on {}: test_top1 {:.2}% -> {}",
        cfg.steps,
        data.name(),
        100.0 * out.test_top1,
        a.out.display()
    );
    Ok(())
}

/// `<path>.<ext>` (appended, not replacing an existing extension).
fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn selections(a: &SelectionArgs) -> Result<Vec<Selection>> {
    let mut out = Vec::new();
    if let Some(s) = &a.shots {
        for k in list::<usize>(s, "shot count")? {
            if k == 0 {
                return Err(Error::config("shots must be >= 1"));
            }
            out.push(Selection::Shots(k));
        }
    }
    if let Some(f) = &a.fraction {
        out.extend(list::<f64>(f, "fraction")?.into_iter().map(Selection::Fraction));
    }
    if a.full {
        out.push(Selection::Full);
    }
    if out.is_empty() {
        return Err(Error::config("give --shots, --fraction or --full"));
    }
    Ok(out)
}

fn train_config(a: &TrainArgs, modes: &[Mode]) -> Result<TrainConfig> {
    let lr_grid = match &a.lr_grid {
        Some(s) => dedup_grid(&list::<f64>(s, "learning rate")?),
        None => DEFAULT_LR_GRID.to_vec(),
    };
    let seeds: Vec<u64> = list(&a.seeds, "seed")?;
    let lora = if modes.contains(&Mode::Lora) {
        let targets = LoraConfig::parse_targets(&a.targets)?;
        let mut l = LoraConfig::new(a.rank, &targets);
        if let Some(alpha) = a.alpha {
            l = l.with_alpha(alpha);
        }
        Some(l)
    } else {
        None
    };
    let cfg = TrainConfig {
        mode: modes[0],
        lr_grid,
        batch_size: a.batch_size,
        steps: a.steps,
        epochs: a.epochs,
        weight_decay: a.weight_decay,
        schedule: Schedule::parse(&a.schedule)?,
        seeds,
        precision: Precision::parse(&a.precision)?,
        lora,
        val: ValProtocol::parse(&a.val)?,
        head_bias: false,
        cache_features: !a.no_feature_cache,
        timing: !a.no_timing,
    };
    for &m in modes {
        TrainConfig { mode: m, ..cfg.clone() }.validate()?;
    }
    Ok(cfg)
}

fn cmd_train(command: &str, a: &TrainArgs, modes: &[Mode], sels: &[Selection]) -> Result<()> {
    let base = train_config(a, modes)?;
    let bytes = std::fs::read(&a.backbone).map_err(|e| Error::io(&a.backbone, e))?;
    let ck = Checkpoint::from_bytes(&bytes, &a.backbone)?;
    let mut backbone = backbone_from_checkpoint(&ck)?;
    backbone.freeze_all();
    let data = Dataset::load(&a.data)?;
    let dataset = data.name().to_string();
    let prep = Prepared::new(backbone, data)?;

    let label = a.label.clone().unwrap_or_else(|| format!("{command}-{dataset}"));
    let stem = a.out.file_stem().map_or("results".into(), |s| s.to_string_lossy().into_owned());
    let mpath = a.out.with_file_name(format!("{stem}.{label}.manifest"));
    let mut manifest = if mpath.exists() {
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        KvMap::parse(&text)?
    } else {
        KvMap::new()
    };
    manifest.extend(base.to_kv().iter().map(|(k, v)| (k.to_string(), v.to_string())));
    let names: Vec<&str> = modes.iter().map(|m| m.name()).collect();
    manifest.set("train.mode", names.join(","));
    manifest.set("command", command);
    manifest.set("data.dir", a.data.display());
    manifest.set("data.name", &dataset);
    manifest.set("backbone.path", a.backbone.display());
    manifest.set("backbone.content_hash", content_hash(&bytes));
    manifest.set("backbone.weights_hash", &prep.backbone_hash);
    manifest.set("results.path", a.out.display());

    for &mode in modes {
        let cfg = TrainConfig { mode, ..base.clone() };
        for &sel in sels {
            let res = run_selection(&prep, &cfg, sel)?;
            let rows = res.rows(mode.name(), &dataset, sel);
            upsert_results(&a.out, &rows)?;
            let agg = res.test_aggregate()?;
            let key = sel.key();
            let p = format!("result.{}.{key}", mode.name());
            manifest.set(format!("{p}.best_lr"), res.best_lr);
            for (lr, v) in &res.val_by_lr {
                manifest.set(format!("{p}.val_top1.lr{lr}"), v);
            }
            manifest.set(format!("{p}.test_top1"), agg.percent());
            manifest.set(format!("{p}.params_trainable"), rows[0].params_trainable);
            manifest.set(format!("{p}.frozen_check"), "pass");
            if let Some(rel) = res.chosen().iter().filter_map(|r| r.merge_max_rel).reduce(f64::max) {
                manifest.set(format!("{p}.merge_max_rel"), format!("{rel:e}"));
            }
            println!(
                "{} {dataset} k_or_fraction={key} best_lr={} test_top1={} n={} params_trainable={}",
                mode.name(),
                res.best_lr,
                agg.percent(),
                agg.n,
                rows[0].params_trainable
            );
        }
    }
    std::fs::write(&mpath, manifest.to_canonical()).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<()> {
    let opts = VerifyOptions {
        seed: a.seed,
        debug_nonzero_b: a.debug_nonzero_b,
        checkpoint: a.checkpoint,
        ..VerifyOptions::default()
    };
    run_all(&opts, |r| println!("{}", r.json()))?;
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let rows = read_results(&a.input)?;
    if rows.is_empty() {
        eprintln!("warning: {} has no result rows", a.input.display());
    }
    let text = match a.shape.as_str() {
        "table" => {
            let filtered: Vec<_> = rows
                .into_iter()
                .filter(|r| a.mode.as_ref().is_none_or(|m| *m == r.mode))
                .filter(|r| a.dataset.as_ref().is_none_or(|d| *d == r.dataset))
                .collect();
            table(&filtered)?
        }
        "series" => series(
            &rows,
            &SeriesQuery {
                mode: a.mode,
                dataset: a.dataset,
                reference_mode: a.reference_mode,
            },
        )?,
        other => return Err(Error::config(format!("unknown report shape '{other}'"))),
    };
    match &a.out {
        Some(p) => std::fs::write(p, &text).map_err(|e| Error::io(p, e))?,
        None => print!("{text}"),
    }
    Ok(())
}
