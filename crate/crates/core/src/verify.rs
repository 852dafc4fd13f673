//! Self-checks behind `lorafit verify`.
//!
//! Each check returns a short detail string on success. [`run_all`] runs them
//! in order, emits one record per check and stops at the first failure.

use std::path::PathBuf;

use crate::checkpoint::Checkpoint;
use crate::data::manifest::{DatasetManifest, Item, Norm, Split};
use crate::data::synth::{generate, SynthSpec, Task};
use crate::data::{fraction_subsample, sample_episode};
use crate::error::{Error, Result};
use crate::grad_check::{grad_check, GradCheckOptions, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::head::{HeadVars, LinearHead};
use crate::lora::{build_pairs, inject, trainable_param_count, AdaptedModel, AdapterVars, LoraConfig};
use crate::rng::Rng;
use crate::tensor::{max_relative_diff, Precision, Tensor};
use crate::trainer::{fit_lora, merge_tolerance, Mode, Prepared, TrainConfig};
use crate::vit::{patchify, PlainProjection, Projector, Target, ViTConfig, ViTModel};

pub const L14_QKVO_R16: usize = 3_145_728;
pub const B16_QV_R2: usize = 73_728;

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Draw `B` nonzero at injection; the zero-init check must then fail.
    pub debug_nonzero_b: bool,
    pub checkpoint: Option<PathBuf>,
    pub zero_init_trials: usize,
    pub merge_steps: usize,
    pub merge_probes: usize,
    pub grad_samples: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            debug_nonzero_b: false,
            checkpoint: None,
            zero_init_trials: 20,
            merge_steps: 100,
            merge_probes: 100,
            grad_samples: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRecord {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckRecord {
    pub fn json(&self) -> String {
        serde_json::json!({
            "check": self.check,
            "status": if self.passed { "pass" } else { "fail" },
            "detail": self.detail,
        })
        .to_string()
    }
}

fn random_image(c: &ViTConfig, rng: &mut Rng) -> Tensor {
    let n = c.channels * c.image_size * c.image_size;
    Tensor::new(
        vec![c.channels, c.image_size, c.image_size],
        (0..n).map(|_| rng.uniform()).collect(),
    )
    .expect("shape matches length")
}

fn random_head(classes: usize, d: usize, rng: &mut Rng) -> LinearHead {
    let data = (0..classes * d).map(|_| rng.normal() * 0.5).collect();
    LinearHead {
        weight: Tensor::new(vec![classes, d], data).expect("shape matches length"),
        bias: None,
    }
}

/// A ViT shape for zero-init trial `i`. The first two keep the width, heads
/// and patch size of B/16 and L/14 with one block and a two-by-two patch
/// grid (full depth does not fit in memory at f64); the rest are random small
/// shapes.
fn trial_config(i: usize, rng: &mut Rng) -> ViTConfig {
    let shrink = |mut c: ViTConfig| {
        c.image_size = 2 * c.patch_size;
        c.depth = 1;
        c
    };
    match i {
        0 => shrink(ViTConfig::b16_shape()),
        1 => shrink(ViTConfig::l14_shape()),
        _ => {
            let heads = [1, 2, 4][rng.below(3)];
            let patch = [4, 8][rng.below(2)];
            ViTConfig {
                image_size: patch * (1 + rng.below(3)),
                patch_size: patch,
                channels: [1, 3][rng.below(2)],
                dim: heads * 4 * (1 + rng.below(4)),
                depth: 1 + rng.below(3),
                heads,
                mlp_ratio: 1 + rng.below(4),
                num_classes_hint: None,
            }
        }
    }
}

fn random_lora(dim: usize, rng: &mut Rng) -> LoraConfig {
    let targets: Vec<Target> = loop {
        let t: Vec<Target> = Target::ALL.into_iter().filter(|_| rng.uniform() < 0.5).collect();
        if !t.is_empty() {
            break t;
        }
    };
    let rank = 1 + rng.below(dim.min(8));
    LoraConfig::new(rank, &targets)
        .with_alpha(rng.uniform_in(0.5, 32.0))
        .with_seed(rng.next_u64())
}

fn logits(model: &ViTModel, adapted: Option<&AdaptedModel>, head: &LinearHead, patches: &[Tensor], p: Precision) -> Result<Tensor> {
    let mut g = Graph::new(p);
    let (vars, projector): (_, Box<dyn Projector>) = match adapted {
        Some(a) => {
            let (v, ad) = a.bind(&mut g, false);
            (v, Box::new(ad))
        }
        None => (model.bind(&mut g, false), Box::new(PlainProjection)),
    };
    let z = model.features_batch(&mut g, &vars, projector.as_ref(), patches)?;
    let hv = head.bind(&mut g, false);
    let y = head.forward(&mut g, &hv, z)?;
    Ok(g.value(y).clone())
}

/// Freshly injected models must produce the base model's logits bit for bit.
pub fn zero_init_identity(trials: usize, seed: u64, debug_nonzero_b: bool) -> Result<String> {
    let mut rng = Rng::stream(seed, "verify.zero-init");
    for i in 0..trials {
        let cfg = trial_config(i, &mut rng);
        let model = ViTModel::init(cfg.clone(), rng.next_u64())?;
        let mut lcfg = random_lora(cfg.dim, &mut rng);
        lcfg.debug_nonzero_b = debug_nonzero_b;
        let desc = format!(
            "trial {i}: d={} L={} r={} targets={}",
            cfg.dim,
            cfg.depth,
            lcfg.rank,
            lcfg.targets_string()
        );
        let adapted = inject(model.clone(), lcfg)?;
        let head = random_head(3, cfg.dim, &mut rng);
        let patches = (0..2)
            .map(|_| patchify(&random_image(&cfg, &mut rng), &cfg))
            .collect::<Result<Vec<_>>>()?;
        for p in [Precision::F64, Precision::F32] {
            let base = logits(&model, None, &head, &patches, p)?;
            let ours = logits(&adapted.base, Some(&adapted), &head, &patches, p)?;
            if base != ours {
                let rel = max_relative_diff(ours.data(), base.data());
                return Err(Error::verification(
                    "zero-init-identity",
                    format!("{desc} ({}): injected logits differ from base by {rel:e}", p.name()),
                ));
            }
        }
    }
    Ok(format!("{trials} triples bit-identical in f64 and f32"))
}

fn small_target_task(seed: u64) -> Result<Prepared> {
    let spec = SynthSpec {
        samples_per_class: 20,
        seed,
        ..SynthSpec::default()
    };
    let data = generate(&spec, Task::Target)?;
    let mut backbone = ViTModel::init(ViTConfig::tiny(), seed)?;
    backbone.freeze_all();
    Prepared::new(backbone, data)
}

/// Outcome of [`merge_equivalence`].
#[derive(Debug, Clone)]
pub struct MergeReport {
    pub steps: usize,
    pub probes: usize,
    pub max_rel: f64,
    pub b_max_abs: f64,
}

/// Trains tiny LoRA for `steps`, then compares merged and unmerged logits on
/// `probes` random images in 64-bit precision.
pub fn merge_equivalence(steps: usize, probes: usize, seed: u64) -> Result<MergeReport> {
    let prep = small_target_task(seed)?;
    let cfg = TrainConfig {
        mode: Mode::Lora,
        lora: Some(LoraConfig::new(2, &[Target::Query, Target::Value])),
        ..TrainConfig::default()
    };
    let support = prep.support(crate::trainer::Selection::Shots(4), seed)?;
    let out = fit_lora(&prep, &cfg, &support, 1e-2, seed, steps)?;
    let b_max_abs = out.adapted.pairs.iter().map(|p| p.b.max_abs()).fold(0.0, f64::max);
    if b_max_abs == 0.0 {
        return Err(Error::verification("merge-equivalence", "B stayed zero during training"));
    }
    let c = &prep.backbone.config;
    let mut rng = Rng::stream(seed, "verify.merge-probes");
    let patches = (0..probes)
        .map(|_| patchify(&random_image(c, &mut rng), c))
        .collect::<Result<Vec<_>>>()?;
    let merged = out.adapted.merged_model()?;
    let tol = merge_tolerance(Precision::F64);
    let mut max_rel: f64 = 0.0;
    for chunk in patches.chunks(25) {
        let unmerged = logits(&out.adapted.base, Some(&out.adapted), &out.head, chunk, Precision::F64)?;
        let fused = logits(&merged, None, &out.head, chunk, Precision::F64)?;
        max_rel = max_rel.max(max_relative_diff(fused.data(), unmerged.data()));
    }
    if !(max_rel <= tol) {
        return Err(Error::verification(
            "merge-equivalence",
            format!("max relative difference {max_rel:e} exceeds {tol:e}"),
        ));
    }
    Ok(MergeReport {
        steps,
        probes,
        max_rel,
        b_max_abs,
    })
}

/// Finite-difference check of the full tiny ViT + LoRA (q,k,v,o) + head loss
/// with respect to every adapter factor and the head, with `B` and the head
/// set to nonzero values so no gradient path is trivially zero.
pub fn full_model_grad_check(samples: usize, seed: u64) -> Result<GradCheckReport> {
    let cfg = ViTConfig::tiny();
    let mut rng = Rng::stream(seed, "verify.grad");
    let model = ViTModel::init(cfg.clone(), seed)?;
    let mut adapted = inject(model, LoraConfig::new(2, &Target::ALL).with_alpha(4.0).with_seed(seed))?;
    for p in &mut adapted.pairs {
        let data = (0..p.b.len()).map(|_| rng.normal() * 0.1).collect();
        p.b = Tensor::new(p.b.shape().to_vec(), data)?;
    }
    let classes = 5;
    let head = random_head(classes, cfg.dim, &mut rng);
    let patches = (0..3)
        .map(|_| patchify(&random_image(&cfg, &mut rng), &cfg))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = (0..patches.len()).map(|i| i % classes).collect();

    let mut params: Vec<Tensor> = Vec::new();
    for p in &adapted.pairs {
        params.push(p.a.clone());
        params.push(p.b.clone());
    }
    params.push(head.weight.clone());
    let npairs = adapted.pairs.len();
    let slots: Vec<(usize, usize)> = adapted
        .pairs
        .iter()
        .map(|p| (p.block, Target::ALL.iter().position(|&t| t == p.target).unwrap()))
        .collect();
    let base = &adapted.base;
    let gamma = adapted.gamma();

    let f = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let weights = base.bind(g, false);
        let mut ad = AdapterVars {
            gamma,
            slots: vec![[None; 4]; base.config.depth],
        };
        for (i, &(block, slot)) in slots.iter().enumerate() {
            ad.slots[block][slot] = Some((vars[2 * i], vars[2 * i + 1]));
        }
        let z = base.features_batch(g, &weights, &ad, &patches)?;
        let hv = HeadVars {
            weight: vars[2 * npairs],
            bias: None,
        };
        let y = head.forward(g, &hv, z)?;
        g.cross_entropy(y, &labels)
    };
    grad_check(
        f,
        &params,
        &GradCheckOptions {
            samples: Some(samples),
            seed,
            ..GradCheckOptions::default()
        },
    )
}

pub const GRAD_TOLERANCE: f64 = 1e-4;

fn grad_check_detail(samples: usize, seed: u64) -> Result<String> {
    let r = full_model_grad_check(samples, seed)?;
    if !(r.max_rel_error < GRAD_TOLERANCE) {
        return Err(Error::verification(
            "grad-check",
            format!(
                "max relative error {:e} at param {} coordinate {}",
                r.max_rel_error, r.worst.0, r.worst.1
            ),
        ));
    }
    Ok(format!("{} coordinates, max relative error {:e}", r.checked, r.max_rel_error))
}

/// Closed-form adapter counts against enumeration over built pairs.
pub fn count_laws() -> Result<String> {
    let all16 = LoraConfig::new(16, &Target::ALL);
    let qv2 = LoraConfig::new(2, &[Target::Query, Target::Value]);
    let cases: [(&str, &LoraConfig, ViTConfig, Option<(usize, usize)>, usize); 4] = [
        ("L14-shape qkvo r16", &all16, ViTConfig::l14_shape(), None, L14_QKVO_R16),
        ("B16-shape qv r2", &qv2, ViTConfig::b16_shape(), None, B16_QV_R2),
        ("tiny qv r2", &qv2, ViTConfig::tiny(), None, 512),
        ("tiny qv r2 + 5x32 head", &qv2, ViTConfig::tiny(), Some((5, 32)), 672),
    ];
    for (name, lcfg, vit, head, expected) in cases {
        let closed = trainable_param_count(lcfg, &vit, head);
        let enumerated: usize = build_pairs(vit.depth, vit.dim, lcfg)
            .iter()
            .map(|p| p.a.len() + p.b.len())
            .sum::<usize>()
            + head.map_or(0, |(c, n)| c * n);
        if closed != expected || enumerated != expected {
            return Err(Error::verification(
                "count-laws",
                format!("{name}: closed form {closed}, enumerated {enumerated}, expected {expected}"),
            ));
        }
    }
    let tiny = inject(ViTModel::init(ViTConfig::tiny(), 0)?, qv2.clone())?;
    if tiny.trainable_param_count() != 512 {
        return Err(Error::verification(
            "count-laws",
            format!("injected tiny model reports {}", tiny.trainable_param_count()),
        ));
    }
    Ok(format!("{L14_QKVO_R16}, {B16_QV_R2}, 512, 672"))
}

fn synthetic_manifest(classes: usize, per_class: usize) -> DatasetManifest {
    let items = (0..classes)
        .flat_map(|c| {
            (0..per_class).map(move |i| Item {
                path: format!("{c}/{i}"),
                label: c,
                split: Split::Train,
            })
        })
        .collect();
    DatasetManifest {
        name: "verify".into(),
        classes: (0..classes).map(|c| format!("class{c}")).collect(),
        norm: Norm::identity(1),
        items,
    }
}

/// Episodes and fraction subsets: sizes, balance, reproducibility, nesting.
pub fn sampler_determinism(seed: u64) -> Result<String> {
    let fail = |msg: String| Error::verification("sampler-determinism", msg);
    let m = synthetic_manifest(5, 60);
    for k in [1, 2, 4, 8, 16, 50] {
        let a = sample_episode(&m, k, seed)?;
        if a != sample_episode(&m, k, seed)? {
            return Err(fail(format!("k={k}: same seed gave different episodes")));
        }
        if a.total() != 5 * k || a.selected.iter().any(|s| s.len() != k) {
            return Err(fail(format!("k={k}: episode has {} items", a.total())));
        }
        for (c, s) in a.selected.iter().enumerate() {
            let mut u = s.clone();
            u.sort_unstable();
            u.dedup();
            if u.len() != k || s.iter().any(|&i| m.items[i].label != c) {
                return Err(fail(format!("k={k}: class {c} draw is not {k} distinct items")));
            }
        }
    }
    if sample_episode(&m, 4, seed)? == sample_episode(&m, 4, seed.wrapping_add(1))? {
        return Err(fail("neighbouring seeds gave the same episode".into()));
    }
    let mut prev: Option<Vec<Vec<usize>>> = None;
    for f in [0.05, 0.1, 0.25, 0.5, 1.0] {
        let cur = fraction_subsample(&m, f, seed)?;
        if cur != fraction_subsample(&m, f, seed)? {
            return Err(fail(format!("fraction {f}: not reproducible")));
        }
        if let Some(p) = &prev {
            if p.iter().zip(&cur).any(|(a, b)| !a.iter().all(|i| b.contains(i))) {
                return Err(fail(format!("fraction {f}: does not contain the smaller subset")));
            }
        }
        prev = Some(cur);
    }
    Ok("episodes k in {1,2,4,8,16,50} give k*C items; fractions nested".into())
}

fn checkpoint_check(path: &std::path::Path) -> Result<String> {
    let ck = Checkpoint::load(path).map_err(|e| Error::verification("checkpoint", e.to_string()))?;
    Ok(format!("{}: {} tensors, checksum ok", path.display(), ck.tensors.len()))
}

/// Runs every check, passing each record to `emit` as it completes. Returns
/// the records, or the first failure as a verification error.
pub fn run_all(opts: &VerifyOptions, mut emit: impl FnMut(&CheckRecord)) -> Result<Vec<CheckRecord>> {
    let seed = opts.seed;
    let mut checks: Vec<(&str, Box<dyn Fn() -> Result<String> + '_>)> = Vec::new();
    if let Some(p) = &opts.checkpoint {
        checks.push(("checkpoint", Box::new(move || checkpoint_check(p))));
    }
    checks.push((
        "zero-init-identity",
        Box::new(move || zero_init_identity(opts.zero_init_trials, seed, opts.debug_nonzero_b)),
    ));
    checks.push((
        "merge-equivalence",
        Box::new(move || {
            let r = merge_equivalence(opts.merge_steps, opts.merge_probes, seed)?;
            Ok(format!(
                "{} steps, {} probes, max relative difference {:e}",
                r.steps, r.probes, r.max_rel
            ))
        }),
    ));
    checks.push(("grad-check", Box::new(move || grad_check_detail(opts.grad_samples, seed))));
    checks.push(("count-laws", Box::new(count_laws)));
    checks.push(("sampler-determinism", Box::new(move || sampler_determinism(seed))));

    let mut records = Vec::new();
    for (name, check) in checks {
        match check() {
            Ok(detail) => {
                let r = CheckRecord {
                    check: name.into(),
                    passed: true,
                    detail,
                };
                emit(&r);
                records.push(r);
            }
            Err(e) => {
                let (check, detail) = match e {
                    Error::Verification { check, detail } => (check, detail),
                    other => (name.to_string(), other.to_string()),
                };
                emit(&CheckRecord {
                    check: check.clone(),
                    passed: false,
                    detail: detail.clone(),
                });
                return Err(Error::Verification { check, detail });
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_sampler_pass() {
        count_laws().unwrap();
        sampler_determinism(3).unwrap();
    }

    #[test]
    fn nonzero_b_breaks_zero_init() {
        assert!(zero_init_identity(3, 0, false).is_ok());
        match zero_init_identity(3, 0, true) {
            Err(Error::Verification { check, .. }) => assert_eq!(check, "zero-init-identity"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn record_json_escapes() {
        let r = CheckRecord {
            check: "grad-check".into(),
            passed: false,
            detail: "a \"b\"".into(),
        };
        assert_eq!(
            r.json(),
            r#"{"check":"grad-check","detail":"a \"b\"","status":"fail"}"#
        );
    }
}
