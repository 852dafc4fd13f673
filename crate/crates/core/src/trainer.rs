//! Training loops: backbone pretraining, linear probe, LoRA adaptation,
//! fraction scaling, learning-rate sweeps and seed aggregation.
//!
//! Batching: the support set is reshuffled at every epoch boundary from
//! `stream(seed, "shuffle")` and cut into batches of `min(batch_size, n)`;
//! a trailing partial batch is dropped. Few-shot runs train for
//! `max(200, 50·k)` steps, other runs for `epochs` passes.

use std::time::Instant;

use rayon::prelude::*;

use crate::data::episode::{fraction_subsample, sample_balanced, sample_episode};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::{top1_accuracy, HeadVars, LinearHead};
use crate::kv::KvMap;
use crate::lora::{inject, AdaptedModel, LoraConfig};
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::rng::Rng;
use crate::tensor::{max_relative_diff, Precision, Tensor};
use crate::vit::{patchify, PlainProjection, Projector, ViTConfig, ViTModel, ViTWeights};

pub const DEFAULT_LR_GRID: [f64; 5] = [1e-4, 5e-4, 1e-3, 5e-3, 1e-2];
pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    LinearProbe,
    Lora,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::LinearProbe => "linear_probe",
            Mode::Lora => "lora",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear_probe" | "probe" => Ok(Mode::LinearProbe),
            "lora" => Ok(Mode::Lora),
            other => Err(Error::config(format!("unknown mode '{other}'"))),
        }
    }
}

/// How the validation set for lr selection is drawn in few-shot runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValProtocol {
    /// `min(k, 4)` items per class from the val split.
    #[default]
    FewShot,
    Full,
}

impl ValProtocol {
    pub fn name(self) -> &'static str {
        match self {
            ValProtocol::FewShot => "fewshot",
            ValProtocol::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fewshot" => Ok(ValProtocol::FewShot),
            "full" => Ok(ValProtocol::Full),
            other => Err(Error::config(format!("unknown val protocol '{other}'"))),
        }
    }
}

/// Which train items a run sees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    Shots(usize),
    Fraction(f64),
    Full,
}

impl Selection {
    /// The `k_or_fraction` column value.
    pub fn key(&self) -> String {
        match self {
            Selection::Shots(k) => k.to_string(),
            Selection::Fraction(f) => f.to_string(),
            Selection::Full => "1".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr_grid: Vec<f64>,
    pub batch_size: usize,
    /// Overrides the default step budget when set.
    pub steps: Option<usize>,
    pub epochs: usize,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seeds: Vec<u64>,
    pub precision: Precision,
    pub lora: Option<LoraConfig>,
    pub val: ValProtocol,
    pub head_bias: bool,
    /// Probe mode only: compute backbone features once instead of per step.
    pub cache_features: bool,
    /// When false, `wall_ms` is reported as 0 so result rows are reproducible.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::LinearProbe,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            batch_size: 32,
            steps: None,
            epochs: 20,
            weight_decay: AdamWConfig::default().weight_decay,
            schedule: Schedule::Cosine,
            seeds: DEFAULT_SEEDS.to_vec(),
            precision: Precision::F64,
            lora: None,
            val: ValProtocol::FewShot,
            head_bias: false,
            cache_features: true,
            timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_grid.is_empty() {
            return Err(Error::config("lr grid is empty"));
        }
        if let Some(bad) = self.lr_grid.iter().find(|lr| !(lr.is_finite() && **lr > 0.0)) {
            return Err(Error::config(format!("learning rate {bad} is not positive")));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.epochs == 0 && self.steps.is_none() {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.mode == Mode::Lora && self.lora.is_none() {
            return Err(Error::config("lora mode needs a LoRA config"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be >= 0"));
        }
        Ok(())
    }

    pub fn steps_for(&self, sel: Selection, train_items: usize) -> usize {
        if let Some(s) = self.steps {
            return s;
        }
        match sel {
            Selection::Shots(k) => 200.max(50 * k),
            Selection::Fraction(_) | Selection::Full => {
                let batch = self.batch_size.min(train_items.max(1));
                self.epochs * (train_items / batch).max(1)
            }
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Every field as `train.*` / `lora.*` pairs for the run manifest.
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        let grid: Vec<String> = self.lr_grid.iter().map(f64::to_string).collect();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        kv.set("train.mode", self.mode.name());
        kv.set("train.lr_grid", grid.join(","));
        kv.set("train.batch_size", self.batch_size);
        kv.set(
            "train.steps",
            self.steps.map_or("default".to_string(), |s| s.to_string()),
        );
        kv.set("train.epochs", self.epochs);
        kv.set("train.weight_decay", self.weight_decay);
        let a = self.adamw();
        kv.set("train.optimizer", "adamw");
        kv.set("train.beta1", a.beta1);
        kv.set("train.beta2", a.beta2);
        kv.set("train.eps", a.eps);
        kv.set("train.schedule", self.schedule.name());
        kv.set("train.seeds", seeds.join(","));
        kv.set("train.precision", self.precision.name());
        kv.set("train.val", self.val.name());
        kv.set("train.head_bias", self.head_bias);
        kv.set("train.cache_features", self.cache_features);
        kv.set("train.drop_last", true);
        if let Some(l) = &self.lora {
            kv.extend(l.to_pairs().into_iter().filter(|(k, _)| k != "lora.init_seed"));
            kv.set("lora.init_seed", "run seed");
        }
        kv
    }
}

/// One training run at a fixed `(lr, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub lr: f64,
    pub val_top1: f64,
    pub test_top1: f64,
    pub trainable_params: usize,
    pub steps: usize,
    pub wall_ms: u64,
    pub loss_curve: Vec<f64>,
    /// LoRA only: worst merged-vs-unmerged relative logit difference.
    pub merge_max_rel: Option<f64>,
}

/// A swept configuration. `runs` holds every `(lr, seed)` pair, ordered by
/// lr then seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub best_lr: f64,
    pub val_by_lr: Vec<(f64, f64)>,
    pub runs: Vec<SeedRun>,
}

impl RunResult {
    pub fn chosen(&self) -> Vec<&SeedRun> {
        self.runs.iter().filter(|r| r.lr == self.best_lr).collect()
    }

    pub fn test_accuracies(&self) -> Vec<f64> {
        self.chosen().iter().map(|r| r.test_top1).collect()
    }

    pub fn test_aggregate(&self) -> Result<Aggregate> {
        aggregate(&self.test_accuracies())
    }

    pub fn rows(&self, mode: &str, dataset: &str, sel: Selection) -> Vec<ResultRow> {
        self.chosen()
            .into_iter()
            .map(|r| ResultRow {
                mode: mode.to_string(),
                dataset: dataset.to_string(),
                k_or_fraction: sel.key(),
                lr: r.lr,
                seed: r.seed,
                test_top1: r.test_top1,
                params_trainable: r.trainable_params,
                wall_ms: r.wall_ms,
            })
            .collect()
    }
}

/// One line of the results CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub mode: String,
    pub dataset: String,
    pub k_or_fraction: String,
    pub lr: f64,
    pub seed: u64,
    pub test_top1: f64,
    pub params_trainable: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (divides by `n − 1`); 0 when `n = 1`.
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    /// `mean±std` in percent with two decimals, e.g. `95.00±0.00`.
    pub fn percent(&self) -> String {
        format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }

    /// Same numbers without scaling.
    pub fn plain(&self) -> String {
        format!("{:.2}±{:.2}", self.mean, self.std)
    }

    pub fn single_seed(&self) -> bool {
        self.n == 1
    }
}

pub fn aggregate(xs: &[f64]) -> Result<Aggregate> {
    if xs.is_empty() {
        return Err(Error::Argument("aggregate of no results".into()));
    }
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(Aggregate { mean, std, n })
}

/// Sorted, deduplicated copy of `grid`.
pub fn dedup_grid(grid: &[f64]) -> Vec<f64> {
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Runs `run(lr, seed)` for every grid point and seed, in parallel, and
/// picks the lr with the best mean validation accuracy. Ties go to the
/// smaller lr. Results are ordered by `(lr, seed)` whatever the completion
/// order.
pub fn lr_sweep<F>(grid: &[f64], seeds: &[u64], run: F) -> Result<RunResult>
where
    F: Fn(f64, u64) -> Result<SeedRun> + Sync,
{
    let grid = dedup_grid(grid);
    if grid.is_empty() {
        return Err(Error::config("lr grid is empty"));
    }
    if seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    let jobs: Vec<(f64, u64)> = grid
        .iter()
        .flat_map(|&lr| seeds.iter().map(move |&s| (lr, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(lr, s)| run(lr, s))
        .collect::<Result<Vec<_>>>()?;
    let mut val_by_lr = Vec::with_capacity(grid.len());
    for (i, &lr) in grid.iter().enumerate() {
        let chunk = &runs[i * seeds.len()..(i + 1) * seeds.len()];
        let mean = chunk.iter().map(|r| r.val_top1).sum::<f64>() / chunk.len() as f64;
        val_by_lr.push((lr, mean));
    }
    let mut best = 0;
    for (i, &(_, v)) in val_by_lr.iter().enumerate() {
        if v > val_by_lr[best].1 {
            best = i;
        }
    }
    Ok(RunResult {
        best_lr: val_by_lr[best].0,
        val_by_lr,
        runs,
    })
}

/// A backbone and dataset with every image patchified once.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub backbone: ViTModel,
    pub data: Dataset,
    pub patches: Vec<Tensor>,
    pub backbone_hash: String,
}

impl Prepared {
    pub fn new(backbone: ViTModel, data: Dataset) -> Result<Self> {
        let c = &backbone.config;
        let patches = data
            .images
            .iter()
            .map(|img| {
                if img.shape() != [c.channels, c.image_size, c.image_size] {
                    return Err(Error::config(format!(
                        "image shape {:?} does not fit backbone input [{}, {}, {}]",
                        img.shape(),
                        c.channels,
                        c.image_size,
                        c.image_size
                    )));
                }
                patchify(img, c)
            })
            .collect::<Result<Vec<_>>>()?;
        let backbone_hash = backbone.weights_hash();
        Ok(Prepared {
            backbone,
            data,
            patches,
            backbone_hash,
        })
    }

    fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.data.label(i)).collect()
    }

    fn batch_patches(&self, idx: &[usize]) -> Vec<Tensor> {
        idx.iter().map(|&i| self.patches[i].clone()).collect()
    }

    /// Train item indices for `sel`. Fraction subsets are sorted so that
    /// fraction 1.0 and [`Selection::Full`] see the same list.
    pub fn support(&self, sel: Selection, seed: u64) -> Result<Vec<usize>> {
        let m = &self.data.manifest;
        match sel {
            Selection::Shots(k) => Ok(sample_episode(m, k, seed)?.items()),
            Selection::Fraction(f) => {
                let mut v: Vec<usize> = fraction_subsample(m, f, seed)?.into_iter().flatten().collect();
                v.sort_unstable();
                Ok(v)
            }
            Selection::Full => {
                let v = self.data.split(Split::Train);
                if v.is_empty() {
                    return Err(Error::InsufficientData("train split is empty".into()));
                }
                Ok(v)
            }
        }
    }

    pub fn validation(&self, sel: Selection, protocol: ValProtocol, seed: u64) -> Result<Vec<usize>> {
        let idx = match (sel, protocol) {
            (Selection::Shots(k), ValProtocol::FewShot) => {
                sample_balanced(&self.data.manifest, Split::Val, k.clamp(1, 4), seed, "val-episode")?
                    .items()
            }
            _ => self.data.split(Split::Val),
        };
        if idx.is_empty() {
            return Err(Error::InsufficientData("validation split is empty".into()));
        }
        Ok(idx)
    }

    pub fn test(&self) -> Result<Vec<usize>> {
        let idx = self.data.split(Split::Test);
        if idx.is_empty() {
            return Err(Error::InsufficientData("test split is empty".into()));
        }
        Ok(idx)
    }
}

/// Cycles through shuffled epochs of `0..n`, dropping the last partial batch.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl Batcher {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        Batcher {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
            rng: Rng::stream(seed, "shuffle"),
        }
    }

    fn next(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let s = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        s
    }
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::numeric(format!("step {step}: {msg}")),
        other => other,
    }
}

fn check_loss(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("step {step}: loss is {loss}")))
    }
}

/// Stacks per-chunk outputs of `f` into one matrix. Each chunk gets a fresh
/// graph at `precision`.
fn chunked_rows(
    idx: &[usize],
    precision: Precision,
    mut f: impl FnMut(&mut Graph, &[usize]) -> Result<Var>,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut width = 0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let mut g = Graph::new(precision);
        let v = f(&mut g, chunk)?;
        let t = g.value(v);
        width = t.dims2()?.1;
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![idx.len(), width], data)
}

fn features(
    prep: &Prepared,
    model: &ViTModel,
    bind: &dyn Fn(&mut Graph) -> (ViTWeights<Var>, Box<dyn Projector>),
    idx: &[usize],
    precision: Precision,
) -> Result<Tensor> {
    chunked_rows(idx, precision, |g, chunk| {
        let (vars, proj) = bind(g);
        model.features_batch(g, &vars, proj.as_ref(), &prep.batch_patches(chunk))
    })
}

fn head_logits(head: &LinearHead, feats: &Tensor, precision: Precision) -> Result<Tensor> {
    let mut g = Graph::new(precision);
    let hv = head.bind(&mut g, false);
    let z = g.constant(feats.clone());
    let y = head.forward(&mut g, &hv, z)?;
    Ok(g.value(y).clone())
}

fn head_step(
    head: &mut LinearHead,
    opt: &mut AdamW,
    hv: &HeadVars,
    grads: &crate::graph::Gradients,
    first_group: usize,
    lr: f64,
) {
    opt.update(first_group, &mut head.weight, grads.get(hv.weight), lr);
    if let (Some(b), Some(bv)) = (head.bias.as_mut(), hv.bias) {
        opt.update(first_group + 1, b, grads.get(bv), lr);
    }
}

fn head_sizes(head: &LinearHead) -> Vec<usize> {
    let mut v = vec![head.weight.len()];
    if let Some(b) = &head.bias {
        v.push(b.len());
    }
    v
}

/// Trained probe head and per-step losses.
pub struct ProbeOutcome {
    pub head: LinearHead,
    pub loss_curve: Vec<f64>,
}

/// Trains only a zero-initialized head on frozen features of `support`.
pub fn fit_probe(
    prep: &Prepared,
    cfg: &TrainConfig,
    support: &[usize],
    lr: f64,
    seed: u64,
    steps: usize,
) -> Result<ProbeOutcome> {
    let model = &prep.backbone;
    let p = cfg.precision;
    let labels = prep.labels(support);
    let mut head = LinearHead::zeros(prep.data.num_classes(), model.config.dim, cfg.head_bias)?;
    let plain = |g: &mut Graph| (model.bind(g, false), Box::new(PlainProjection) as Box<dyn Projector>);
    let cache = if cfg.cache_features {
        Some(features(prep, model, &plain, support, p)?)
    } else {
        None
    };
    let mut opt = AdamW::new(cfg.adamw(), &head_sizes(&head), p);
    let mut batcher = Batcher::new(support.len(), cfg.batch_size, seed);
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch: Vec<usize> = batcher.next().to_vec();
        let mut g = Graph::new(p);
        let z = match &cache {
            Some(c) => {
                let rows: Vec<f64> = batch.iter().flat_map(|&i| c.row(i).to_vec()).collect();
                g.constant(Tensor::new(vec![batch.len(), model.config.dim], rows)?)
            }
            None => {
                let vars = model.bind(&mut g, false);
                let idx: Vec<usize> = batch.iter().map(|&i| support[i]).collect();
                model
                    .features_batch(&mut g, &vars, &PlainProjection, &prep.batch_patches(&idx))
                    .map_err(|e| at_step(e, step))?
            }
        };
        let hv = head.bind(&mut g, true);
        let logits = head.forward(&mut g, &hv, z)?;
        let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let loss = g.cross_entropy(logits, &y).map_err(|e| at_step(e, step))?;
        let lv = g.value(loss).data()[0];
        check_loss(lv, step)?;
        curve.push(lv);
        let grads = g.backward(loss).map_err(|e| at_step(e, step))?;
        let rate = cfg.schedule.lr_at(lr, step, steps);
        opt.begin_step();
        head_step(&mut head, &mut opt, &hv, &grads, 0, rate);
    }
    Ok(ProbeOutcome {
        head,
        loss_curve: curve,
    })
}

pub struct LoraOutcome {
    pub adapted: AdaptedModel,
    pub head: LinearHead,
    pub loss_curve: Vec<f64>,
}

/// Trains adapters and a zero-initialized head jointly on `support`.
pub fn fit_lora(
    prep: &Prepared,
    cfg: &TrainConfig,
    support: &[usize],
    lr: f64,
    seed: u64,
    steps: usize,
) -> Result<LoraOutcome> {
    let lcfg = cfg
        .lora
        .clone()
        .ok_or_else(|| Error::config("lora mode needs a LoRA config"))?
        .with_seed(seed);
    let mut adapted = inject(prep.backbone.clone(), lcfg)?;
    let p = cfg.precision;
    let mut head = LinearHead::zeros(prep.data.num_classes(), adapted.base.config.dim, cfg.head_bias)?;
    let mut sizes: Vec<usize> = adapted
        .pairs
        .iter()
        .flat_map(|pr| [pr.a.len(), pr.b.len()])
        .collect();
    let head_group = sizes.len();
    sizes.extend(head_sizes(&head));
    let mut opt = AdamW::new(cfg.adamw(), &sizes, p);
    let mut batcher = Batcher::new(support.len(), cfg.batch_size, seed);
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let idx: Vec<usize> = batcher.next().iter().map(|&i| support[i]).collect();
        let mut g = Graph::new(p);
        let (vars, adapters) = adapted.bind(&mut g, true);
        let z = adapted
            .base
            .features_batch(&mut g, &vars, &adapters, &prep.batch_patches(&idx))
            .map_err(|e| at_step(e, step))?;
        let hv = head.bind(&mut g, true);
        let logits = head.forward(&mut g, &hv, z)?;
        let y: Vec<usize> = idx.iter().map(|&i| prep.data.label(i)).collect();
        let loss = g.cross_entropy(logits, &y).map_err(|e| at_step(e, step))?;
        let lv = g.value(loss).data()[0];
        check_loss(lv, step)?;
        curve.push(lv);
        let grads = g.backward(loss).map_err(|e| at_step(e, step))?;
        let rate = cfg.schedule.lr_at(lr, step, steps);
        opt.begin_step();
        for (i, pair) in adapted.pairs.iter_mut().enumerate() {
            let (a, b) = adapters.slots[pair.block][slot(pair.target)].expect("bound unmerged");
            opt.update(2 * i, &mut pair.a, grads.get(a), rate);
            opt.update(2 * i + 1, &mut pair.b, grads.get(b), rate);
        }
        head_step(&mut head, &mut opt, &hv, &grads, head_group, rate);
    }
    Ok(LoraOutcome {
        adapted,
        head,
        loss_curve: curve,
    })
}

fn slot(t: crate::vit::Target) -> usize {
    crate::vit::Target::ALL.iter().position(|&x| x == t).unwrap()
}

/// Tolerance for merged-vs-unmerged logits at `precision`.
pub fn merge_tolerance(precision: Precision) -> f64 {
    match precision {
        Precision::F64 => 1e-10,
        Precision::F32 => 1e-5,
    }
}

/// Logits of an adapted model on `idx`, unmerged and merged. Fails with a
/// verification error when any eval chunk disagrees beyond tolerance.
pub fn lora_logits_checked(
    prep: &Prepared,
    adapted: &AdaptedModel,
    head: &LinearHead,
    idx: &[usize],
    precision: Precision,
) -> Result<(Tensor, f64)> {
    let merged = adapted.merged_model()?;
    let tol = merge_tolerance(precision);
    let mut worst: f64 = 0.0;
    let mut rows = Vec::new();
    let mut width = 0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let adapted_bind = |g: &mut Graph| {
            let (v, a) = adapted.bind(g, false);
            (v, Box::new(a) as Box<dyn Projector>)
        };
        let unmerged_f = features(prep, &adapted.base, &adapted_bind, chunk, precision)?;
        let plain = |g: &mut Graph| (merged.bind(g, false), Box::new(PlainProjection) as Box<dyn Projector>);
        let merged_f = features(prep, &merged, &plain, chunk, precision)?;
        let lu = head_logits(head, &unmerged_f, precision)?;
        let lm = head_logits(head, &merged_f, precision)?;
        let rel = max_relative_diff(lm.data(), lu.data());
        worst = worst.max(rel);
        if !(rel <= tol) {
            return Err(Error::verification(
                "merge-equivalence",
                format!("merged vs unmerged logits differ by {rel:e} (tolerance {tol:e})"),
            ));
        }
        width = lm.dims2()?.1;
        rows.extend_from_slice(lm.data());
    }
    Ok((Tensor::new(vec![idx.len(), width], rows)?, worst))
}

fn frozen_check(prep: &Prepared, model: &ViTModel) -> Result<()> {
    let h = model.weights_hash();
    if h != prep.backbone_hash {
        return Err(Error::verification(
            "frozen-invariance",
            format!("backbone hash changed: {} -> {h}", prep.backbone_hash),
        ));
    }
    Ok(())
}

/// One full `(lr, seed)` run for `cfg.mode`: train on the support set,
/// score validation and test, and enforce the frozen and merge contracts.
pub fn train_once(prep: &Prepared, cfg: &TrainConfig, sel: Selection, lr: f64, seed: u64) -> Result<SeedRun> {
    let started = Instant::now();
    let support = prep.support(sel, seed)?;
    let val = prep.validation(sel, cfg.val, seed)?;
    let test = prep.test()?;
    let steps = cfg.steps_for(sel, support.len());
    let p = cfg.precision;
    let classes = prep.data.num_classes();
    let (val_top1, test_top1, trainable, curve, merge_rel) = match cfg.mode {
        Mode::LinearProbe => {
            let out = fit_probe(prep, cfg, &support, lr, seed, steps)?;
            frozen_check(prep, &prep.backbone)?;
            let plain = |g: &mut Graph| {
                (prep.backbone.bind(g, false), Box::new(PlainProjection) as Box<dyn Projector>)
            };
            let score = |idx: &[usize]| -> Result<f64> {
                let f = features(prep, &prep.backbone, &plain, idx, p)?;
                top1_accuracy(&head_logits(&out.head, &f, p)?, &prep.labels(idx))
            };
            (score(&val)?, score(&test)?, out.head.param_count(), out.loss_curve, None)
        }
        Mode::Lora => {
            let out = fit_lora(prep, cfg, &support, lr, seed, steps)?;
            frozen_check(prep, &out.adapted.base)?;
            let enumerated = out.adapted.trainable_param_count() + out.head.param_count();
            let closed = crate::lora::trainable_param_count(
                &out.adapted.config,
                &out.adapted.base.config,
                Some((classes, out.adapted.base.config.dim)),
            ) + out.head.bias.as_ref().map_or(0, Tensor::len);
            if enumerated != closed {
                return Err(Error::verification(
                    "param-count",
                    format!("enumerated {enumerated} vs closed form {closed}"),
                ));
            }
            let (lv, rv) = lora_logits_checked(prep, &out.adapted, &out.head, &val, p)?;
            let (lt, rt) = lora_logits_checked(prep, &out.adapted, &out.head, &test, p)?;
            (
                top1_accuracy(&lv, &prep.labels(&val))?,
                top1_accuracy(&lt, &prep.labels(&test))?,
                enumerated,
                out.loss_curve,
                Some(rv.max(rt)),
            )
        }
    };
    Ok(SeedRun {
        seed,
        lr,
        val_top1,
        test_top1,
        trainable_params: trainable,
        steps,
        wall_ms: if cfg.timing {
            started.elapsed().as_millis() as u64
        } else {
            0
        },
        loss_curve: curve,
        merge_max_rel: merge_rel,
    })
}

/// Sweeps `cfg.lr_grid × cfg.seeds` for one selection.
pub fn run_selection(prep: &Prepared, cfg: &TrainConfig, sel: Selection) -> Result<RunResult> {
    cfg.validate()?;
    lr_sweep(&cfg.lr_grid, &cfg.seeds, |lr, seed| train_once(prep, cfg, sel, lr, seed))
}

pub fn train_probe(prep: &Prepared, cfg: &TrainConfig, sel: Selection) -> Result<RunResult> {
    let cfg = TrainConfig {
        mode: Mode::LinearProbe,
        ..cfg.clone()
    };
    run_selection(prep, &cfg, sel)
}

pub fn train_lora(prep: &Prepared, cfg: &TrainConfig, sel: Selection) -> Result<RunResult> {
    let cfg = TrainConfig {
        mode: Mode::Lora,
        ..cfg.clone()
    };
    run_selection(prep, &cfg, sel)
}

/// One sweep per fraction, in the given order.
pub fn run_fraction_scaling(
    prep: &Prepared,
    cfg: &TrainConfig,
    fractions: &[f64],
) -> Result<Vec<(f64, RunResult)>> {
    if let Some(bad) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::config(format!("fraction {bad} outside (0, 1]")));
    }
    fractions
        .iter()
        .map(|&f| Ok((f, run_selection(prep, cfg, Selection::Fraction(f))?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub vit: ViTConfig,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            vit: ViTConfig::tiny(),
            steps: 1000,
            lr: 1e-3,
            batch_size: 32,
            weight_decay: AdamWConfig::default().weight_decay,
            schedule: Schedule::Cosine,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl PretrainConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("pretrain.steps", self.steps);
        kv.set("pretrain.lr", self.lr);
        kv.set("pretrain.batch_size", self.batch_size);
        kv.set("pretrain.weight_decay", self.weight_decay);
        kv.set("pretrain.schedule", self.schedule.name());
        kv.set("pretrain.seed", self.seed);
        kv.set("pretrain.precision", self.precision.name());
        kv
    }
}

pub struct PretrainOutcome {
    pub model: ViTModel,
    pub head: LinearHead,
    pub loss_curve: Vec<f64>,
    pub test_top1: f64,
}

/// Trains a freshly initialized backbone plus a throwaway head end to end
/// on the train split of `data`.
pub fn pretrain_backbone(data: &Dataset, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("pretraining needs batch size >= 1 and lr > 0"));
    }
    let model = ViTModel::init(cfg.vit.clone(), cfg.seed)?;
    let mut prep = Prepared::new(model, data.clone())?;
    let train = prep.support(Selection::Full, cfg.seed)?;
    let p = cfg.precision;
    let mut head = LinearHead::zeros(data.num_classes(), cfg.vit.dim, true)?;
    let mut sizes = Vec::new();
    prep.backbone.weights.visit(|_, t| sizes.push(t.len()));
    let head_group = sizes.len();
    sizes.extend(head_sizes(&head));
    let adamw = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(adamw, &sizes, p);
    let mut batcher = Batcher::new(train.len(), cfg.batch_size, cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = batcher.next().iter().map(|&i| train[i]).collect();
        let mut g = Graph::new(p);
        let vars = prep.backbone.bind(&mut g, true);
        let z = prep
            .backbone
            .features_batch(&mut g, &vars, &PlainProjection, &prep.batch_patches(&idx))
            .map_err(|e| at_step(e, step))?;
        let hv = head.bind(&mut g, true);
        let logits = head.forward(&mut g, &hv, z)?;
        let y = prep.labels(&idx);
        let loss = g.cross_entropy(logits, &y).map_err(|e| at_step(e, step))?;
        let lv = g.value(loss).data()[0];
        check_loss(lv, step)?;
        curve.push(lv);
        let grads = g.backward(loss).map_err(|e| at_step(e, step))?;
        let rate = cfg.schedule.lr_at(cfg.lr, step, cfg.steps);
        let mut handles = Vec::new();
        vars.visit(|_, v| handles.push(*v));
        opt.begin_step();
        let mut i = 0;
        prep.backbone.weights.visit_mut(|_, t| {
            opt.update(i, t, grads.get(handles[i]), rate);
            i += 1;
        });
        head_step(&mut head, &mut opt, &hv, &grads, head_group, rate);
    }
    let test = prep.test()?;
    let plain = |g: &mut Graph| (prep.backbone.bind(g, false), Box::new(PlainProjection) as Box<dyn Projector>);
    let f = features(&prep, &prep.backbone, &plain, &test, p)?;
    let test_top1 = top1_accuracy(&head_logits(&head, &f, p)?, &prep.labels(&test))?;
    Ok(PretrainOutcome {
        model: prep.backbone,
        head,
        loss_curve: curve,
        test_top1,
    })
}
