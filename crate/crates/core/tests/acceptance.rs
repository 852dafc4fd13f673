//! Acceptance criteria AC1-AC9. Prints one `[PASS]`/`[FAIL]` line per
//! criterion and exits nonzero if any fails.

use std::time::Instant;

use lorafit::checkpoint::{backbone_checkpoint, content_hash};
use lorafit::data::manifest::Split;
use lorafit::data::sample_episode;
use lorafit::data::synth::{generate, SynthSpec, Task};
use lorafit::lora::{trainable_param_count, LoraConfig};
use lorafit::report::{render_results, series, table, SeriesQuery};
use lorafit::trainer::{
    fit_lora, fit_probe, pretrain_backbone, run_fraction_scaling, run_selection, Mode, PretrainConfig, Prepared,
    Selection, TrainConfig,
};
use lorafit::verify::{full_model_grad_check, merge_equivalence, zero_init_identity, GRAD_TOLERANCE};
use lorafit::vit::{Target, ViTConfig};
use lorafit::{Precision, Result};

/// Learning rates swept for AC7/AC8: the upper three points of the default
/// grid. The two smallest never won a few-shot sweep during calibration and
/// would double the runtime.
const GRID: [f64; 3] = [1e-3, 5e-3, 1e-2];
const SEEDS: [u64; 3] = [0, 1, 2];
const AC7_SHOTS: [usize; 3] = [4, 8, 16];
const AC7_MARGIN: f64 = 3.0;
const FRACTIONS: [f64; 5] = [0.05, 0.1, 0.25, 0.5, 1.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

struct Suite {
    failed: usize,
}

impl Suite {
    fn check(&mut self, id: &str, name: &str, f: impl FnOnce() -> Result<Outcome>) {
        let t = Instant::now();
        let (pass, detail) = match f() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            self.failed += 1;
        }
        println!(
            "[{}] {id} {name}: {detail} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
}

fn lora_cfg() -> TrainConfig {
    TrainConfig {
        lr_grid: GRID.to_vec(),
        seeds: SEEDS.to_vec(),
        lora: Some(LoraConfig::new(2, &[Target::Query, Target::Value])),
        timing: false,
        ..TrainConfig::default()
    }
}

fn ac1() -> Result<Outcome> {
    let cfg = LoraConfig::new(16, &Target::ALL);
    let n = trainable_param_count(&cfg, &ViTConfig::l14_shape(), None);
    let implied = n * 62;
    outcome(
        n == 3_145_728,
        format!(
            "L14-shape q,k,v,o r=16 -> {n} (~{:.1} million); x62 = {implied} (~{:.2}e8, reported only)",
            n as f64 / 1e6,
            implied as f64 / 1e8
        ),
    )
}

fn ac2() -> Result<Outcome> {
    let detail = zero_init_identity(20, 7, false)?;
    let negative = zero_init_identity(1, 7, true).is_err();
    outcome(negative, format!("{detail}; nonzero-B control fails as expected: {negative}"))
}

fn ac3() -> Result<Outcome> {
    let r = merge_equivalence(100, 100, 11)?;
    outcome(
        r.steps >= 100 && r.probes == 100 && r.max_rel <= 1e-10 && r.b_max_abs > 0.0,
        format!(
            "{} steps, {} probes, max relative difference {:.3e} (<= 1e-10), max |B| {:.3e}",
            r.steps, r.probes, r.max_rel, r.b_max_abs
        ),
    )
}

fn ac4() -> Result<Outcome> {
    let r = full_model_grad_check(256, 5)?;
    outcome(
        r.checked >= 200 && r.max_rel_error < GRAD_TOLERANCE,
        format!(
            "{} coordinates over LoRA (q,k,v,o, nonzero B) and head, max relative error {:.3e} (< 1e-4)",
            r.checked, r.max_rel_error
        ),
    )
}

fn ac5(prep: &Prepared, file_hash: &str) -> Result<Outcome> {
    let cfg = lora_cfg();
    let support = prep.support(Selection::Shots(4), 0)?;
    let probe = TrainConfig {
        mode: Mode::LinearProbe,
        ..cfg.clone()
    };
    fit_probe(prep, &probe, &support, 1e-2, 0, 100)?;
    let out = fit_lora(prep, &cfg, &support, 1e-2, 0, 100)?;
    let after = content_hash(&backbone_checkpoint(&out.adapted.base).to_bytes(Precision::F64));
    let weights_same = out.adapted.base.weights_hash() == prep.backbone_hash;
    outcome(
        after == file_hash && weights_same,
        format!("checkpoint content hash {}... unchanged after probe and LoRA runs", &file_hash[..12]),
    )
}

fn ac6_protocol(prep: &Prepared) -> Result<Outcome> {
    let m = &prep.data.manifest;
    let c = m.num_classes();
    let mut sizes = Vec::new();
    for k in [1, 2, 4, 8, 16, 50] {
        let e = sample_episode(m, k, 0)?;
        if e.total() != k * c || e.selected.iter().any(|s| s.len() != k) {
            return outcome(false, format!("k={k}: {} items", e.total()));
        }
        sizes.push(format!("{k}->{}", e.total()));
    }
    let batch = TrainConfig::default().batch_size;
    let split_ok = m.indices(Split::Train).len() >= 50 * c;
    outcome(
        batch == 32 && split_ok,
        format!("C={c}: episode sizes {}; default batch {batch}", sizes.join(", ")),
    )
}

struct Ac7 {
    rows: Vec<lorafit::trainer::ResultRow>,
    lines: Vec<String>,
    pass: bool,
    three_seed_cell: Option<String>,
}

fn ac7(prep: &Prepared) -> Result<Ac7> {
    let base = lora_cfg();
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    let mut pass = true;
    let mut cell = None;
    let dataset = prep.data.name().to_string();
    for k in AC7_SHOTS {
        let sel = Selection::Shots(k);
        let mut means = [0.0; 2];
        for (i, mode) in [Mode::LinearProbe, Mode::Lora].into_iter().enumerate() {
            let cfg = TrainConfig { mode, ..base.clone() };
            let res = run_selection(prep, &cfg, sel)?;
            let agg = res.test_aggregate()?;
            if agg.n != SEEDS.len() {
                pass = false;
            }
            if k == 4 && mode == Mode::LinearProbe {
                cell = Some(agg.percent());
            }
            means[i] = 100.0 * agg.mean;
            rows.extend(res.rows(mode.name(), &dataset, sel));
            lines.push(format!("k={k} {} best_lr={} test {}", mode.name(), res.best_lr, agg.percent()));
        }
        let [probe, lora] = means;
        let ok = lora >= probe && (k != 4 || lora - probe >= AC7_MARGIN);
        pass &= ok;
        lines.push(format!("k={k}: lora {lora:.2} vs probe {probe:.2} (diff {:+.2})", lora - probe));
    }
    Ok(Ac7 {
        rows,
        lines,
        pass,
        three_seed_cell: cell,
    })
}

fn ac8(prep: &Prepared) -> Result<(Outcome, String)> {
    let cfg = TrainConfig {
        mode: Mode::Lora,
        ..lora_cfg()
    };
    let results = run_fraction_scaling(prep, &cfg, &FRACTIONS)?;
    let mut rows = Vec::new();
    for (f, r) in &results {
        rows.extend(r.rows("lora", prep.data.name(), Selection::Fraction(*f)));
    }
    let csv = series(&rows, &SeriesQuery::default())?;
    let mean_at = |f: f64| -> Result<f64> {
        let r = &results.iter().find(|(x, _)| *x == f).expect("fraction swept").1;
        Ok(r.test_aggregate()?.mean)
    };
    let (lo, hi) = (mean_at(0.05)?, mean_at(1.0)?);
    let shape_ok = csv.starts_with("x,mean,std\n") && csv.lines().count() == FRACTIONS.len() + 1;
    Ok((
        Outcome {
            pass: hi >= lo && shape_ok,
            detail: format!("fraction 1.0 {:.2}% >= fraction 0.05 {:.2}%", 100.0 * hi, 100.0 * lo),
        },
        csv,
    ))
}

fn ac9(spec: &SynthSpec) -> Result<Outcome> {
    let source = generate(spec, Task::Source)?;
    let pcfg = PretrainConfig {
        steps: 40,
        ..PretrainConfig::default()
    };
    let bytes = |m: &lorafit::vit::ViTModel| backbone_checkpoint(m).to_bytes(Precision::F64);
    let a = bytes(&pretrain_backbone(&source, &pcfg)?.model);
    let b = bytes(&pretrain_backbone(&source, &pcfg)?.model);
    let backbone = lorafit::checkpoint::backbone_from_checkpoint(
        &lorafit::checkpoint::Checkpoint::from_bytes(&a, std::path::Path::new("mem"))?,
    )?;
    let prep = Prepared::new(backbone, generate(spec, Task::Target)?)?;
    let cfg = TrainConfig {
        steps: Some(30),
        lr_grid: vec![1e-3, 1e-2],
        seeds: vec![0, 1],
        ..lora_cfg()
    };
    for mode in [Mode::LinearProbe, Mode::Lora] {
        let cfg = TrainConfig { mode, ..cfg.clone() };
        let render = || -> Result<String> {
            let r = run_selection(&prep, &cfg, Selection::Shots(2))?;
            Ok(render_results(&r.rows(mode.name(), "target", Selection::Shots(2))))
        };
        if render()? != render()? {
            return outcome(false, format!("{} rows differ between reruns", mode.name()));
        }
    }
    outcome(
        a == b,
        format!(
            "pretrained checkpoint reruns identical ({} bytes, {}...); probe and LoRA rows identical",
            a.len(),
            &content_hash(&a)[..12]
        ),
    )
}

fn main() {
    let mut suite = Suite { failed: 0 };
    let started = Instant::now();
    suite.check("AC1", "parameter efficiency", ac1);
    suite.check("AC2", "zero-init identity", ac2);
    suite.check("AC3", "merge equivalence", ac3);
    suite.check("AC4", "gradient correctness", ac4);

    let spec = SynthSpec::default();
    suite.check("AC9", "determinism", || ac9(&spec));

    let setup = Instant::now();
    let prepared = (|| -> Result<(Prepared, String, f64)> {
        let source = generate(&spec, Task::Source)?;
        let out = pretrain_backbone(&source, &PretrainConfig::default())?;
        let hash = content_hash(&backbone_checkpoint(&out.model).to_bytes(Precision::F64));
        let mut backbone = out.model;
        backbone.freeze_all();
        Ok((Prepared::new(backbone, generate(&spec, Task::Target)?)?, hash, out.test_top1))
    })();
    let (prep, hash) = match prepared {
        Ok((p, h, acc)) => {
            println!(
                "setup: pretrained tiny backbone on source, test_top1 {:.2}% ({:.1}s)",
                100.0 * acc,
                setup.elapsed().as_secs_f64()
            );
            (p, h)
        }
        Err(e) => {
            println!("[FAIL] AC5-AC8 setup: {e}");
            std::process::exit(1);
        }
    };

    suite.check("AC5", "frozen invariance", || ac5(&prep, &hash));

    let mut ac7_out = None;
    suite.check("AC7", "LoRA >= linear probe at k=4,8,16", || {
        let r = ac7(&prep)?;
        for l in &r.lines {
            println!("    {l}");
        }
        let pass = r.pass;
        ac7_out = Some(r);
        outcome(
            pass,
            format!("3 seeds, lr grid {GRID:?}, margin >= {AC7_MARGIN} points required at k=4"),
        )
    });

    suite.check("AC6", "protocol fidelity", || {
        let p = ac6_protocol(&prep)?;
        let Some(r) = &ac7_out else {
            return outcome(false, format!("{}; no sweep results for the 3-seed check", p.detail));
        };
        let cell = r.three_seed_cell.clone().unwrap_or_default();
        let t = table(&r.rows)?;
        println!("{}", t.trim_end().lines().map(|l| format!("    {l}")).collect::<Vec<_>>().join("\n"));
        let formatted = {
            let (m, s) = cell.split_once('±').unwrap_or(("", ""));
            let two_dp = |x: &str| x.split_once('.').is_some_and(|(_, d)| d.len() == 2);
            two_dp(m) && two_dp(s)
        };
        outcome(
            p.pass && formatted && t.contains(&cell) && !t.contains("(n=1)"),
            format!("{}; 3-seed cell {cell}", p.detail),
        )
    });

    suite.check("AC8", "fraction scaling", || {
        let (o, csv) = ac8(&prep)?;
        for l in csv.lines() {
            println!("    {l}");
        }
        Ok(o)
    });

    println!(
        "acceptance: {} failed, total {:.1}s",
        suite.failed,
        started.elapsed().as_secs_f64()
    );
    if suite.failed > 0 {
        std::process::exit(1);
    }
}
