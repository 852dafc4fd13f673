use std::path::Path;

use lorafit::checkpoint::Checkpoint;
use lorafit::data::manifest::{DatasetManifest, Item, Norm, Split};
use lorafit::data::{fraction_subsample, sample_episode};
use lorafit::graph::Graph;
use lorafit::kv::KvMap;
use lorafit::lora::{build_pairs, inject, kaiming_uniform, trainable_param_count, LoraConfig, LoraPair};
use lorafit::optim::{AdamW, AdamWConfig};
use lorafit::report::{series, SeriesQuery};
use lorafit::rng::Rng;
use lorafit::tensor::max_relative_diff;
use lorafit::trainer::{aggregate, lr_sweep, ResultRow, SeedRun};
use lorafit::vit::{patchify, PlainProjection, Target, ViTConfig, ViTModel};
use lorafit::{Precision, Tensor};
use proptest::prelude::*;

fn manifest(classes: usize, train: usize, val: usize) -> DatasetManifest {
    let mut items = Vec::new();
    for c in 0..classes {
        for (split, n) in [(Split::Train, train), (Split::Val, val), (Split::Test, 2)] {
            for i in 0..n {
                items.push(Item {
                    path: format!("{c}-{}-{i}", split.name()),
                    label: c,
                    split,
                });
            }
        }
    }
    DatasetManifest {
        name: "p".into(),
        classes: (0..classes).map(|c| format!("c{c}")).collect(),
        norm: Norm::identity(3),
        items,
    }
}

fn targets_from_mask(mask: u8) -> Vec<Target> {
    Target::ALL
        .into_iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, t)| t)
        .collect()
}

fn seed_run(lr: f64, seed: u64, val: f64) -> SeedRun {
    SeedRun {
        seed,
        lr,
        val_top1: val,
        test_top1: val,
        trainable_params: 1,
        steps: 1,
        wall_ms: 0,
        loss_curve: vec![],
        merge_max_rel: None,
    }
}

#[test]
fn adamw_first_step_matches_closed_form() {
    // Step 1 with bias correction: m̂ = g, v̂ = g², so after decoupled decay
    // w ← w(1 − lr·wd) − lr·g / (|g| + ε).
    let cfg = AdamWConfig::default();
    let mut w = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let g = [0.2, -0.3, 0.0];
    let lr = 0.1;
    let mut opt = AdamW::new(cfg.clone(), &[3], Precision::F64);
    opt.begin_step();
    opt.update(0, &mut w, Some(&g), lr);
    for ((got, w0), gi) in w.data().iter().zip([0.5, -1.0, 2.0]).zip(g) {
        let want = w0 * (1.0 - lr * cfg.weight_decay) - lr * gi / (f64::abs(gi) + cfg.eps);
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn closed_form_count_matches_enumeration(
        dim_mult in 1usize..5, depth in 1usize..6, rank in 1usize..5,
        mask in 1u8..16, classes in 2usize..7,
    ) {
        let vit = ViTConfig { dim: 8 * dim_mult, depth, heads: 2, ..ViTConfig::tiny() };
        let cfg = LoraConfig::new(rank, &targets_from_mask(mask));
        let enumerated: usize = build_pairs(depth, vit.dim, &cfg).iter().map(LoraPair::param_count).sum();
        prop_assert_eq!(trainable_param_count(&cfg, &vit, None), enumerated);
        prop_assert_eq!(
            trainable_param_count(&cfg, &vit, Some((classes, vit.dim))),
            enumerated + classes * vit.dim
        );
        let model = ViTModel::init(vit.clone(), 0).unwrap();
        prop_assert_eq!(inject(model, cfg).unwrap().trainable_param_count(), enumerated);
    }

    #[test]
    fn rank_above_width_is_rejected(extra in 1usize..8) {
        let model = ViTModel::init(ViTConfig::tiny(), 0).unwrap();
        let cfg = LoraConfig::new(32 + extra, &[Target::Query]);
        prop_assert!(matches!(inject(model, cfg), Err(lorafit::Error::Config(_))));
    }

    #[test]
    fn merge_then_unmerge_restores_weights(m in 1usize..8, n in 1usize..8, r in 1usize..4, gamma in 0.1f64..4.0, seed in any::<u64>()) {
        let mut rng = Rng::seeded(seed);
        let mut w = kaiming_uniform(m, n, &mut rng);
        let orig = w.clone();
        let mut p = LoraPair::from_factors(0, Target::Value, kaiming_uniform(r, n, &mut rng), kaiming_uniform(m, r, &mut rng)).unwrap();
        p.merge_into(&mut w, gamma).unwrap();
        let delta = p.delta(gamma);
        for i in 0..w.len() {
            prop_assert!((w.data()[i] - orig.data()[i] - delta.data()[i]).abs() < 1e-14);
        }
        p.unmerge_from(&mut w, gamma).unwrap();
        prop_assert!(max_relative_diff(w.data(), orig.data()) < 1e-14);
    }

    #[test]
    fn zero_b_injection_is_identity(mask in 1u8..16, rank in 1usize..9, alpha in 0.5f64..64.0, seed in any::<u64>()) {
        let cfg = ViTConfig::tiny();
        let model = ViTModel::init(cfg.clone(), seed).unwrap();
        let lcfg = LoraConfig::new(rank, &targets_from_mask(mask)).with_alpha(alpha).with_seed(seed);
        let adapted = inject(model.clone(), lcfg).unwrap();
        let mut rng = Rng::seeded(seed);
        let img = Tensor::new(vec![3, 32, 32], (0..3 * 32 * 32).map(|_| rng.uniform()).collect()).unwrap();
        let patches = [patchify(&img, &cfg).unwrap()];
        let mut g = Graph::new(Precision::F64);
        let w = model.bind(&mut g, false);
        let z0 = model.features_batch(&mut g, &w, &PlainProjection, &patches).unwrap();
        let (w1, ad) = adapted.bind(&mut g, false);
        let z1 = adapted.base.features_batch(&mut g, &w1, &ad, &patches).unwrap();
        prop_assert_eq!(g.value(z0), g.value(z1));
    }

    #[test]
    fn episodes_have_k_per_class(classes in 2usize..7, extra in 0usize..10, k in 1usize..12, seed in any::<u64>()) {
        let m = manifest(classes, k + extra, 3);
        let e = sample_episode(&m, k, seed).unwrap();
        prop_assert_eq!(e.total(), k * classes);
        prop_assert_eq!(&e, &sample_episode(&m, k, seed).unwrap());
        let mut all = e.items();
        for (c, sel) in e.selected.iter().enumerate() {
            prop_assert!(sel.iter().all(|&i| m.items[i].label == c && m.items[i].split == Split::Train));
        }
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), k * classes);
        prop_assert!(sample_episode(&m, k + extra + 1, seed).is_err());
    }

    #[test]
    fn fractions_are_nested_and_proportional(per_class in 20usize..120, seed in any::<u64>(), a in 0.05f64..1.0, b in 0.05f64..1.0) {
        let m = manifest(3, per_class, 1);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = fraction_subsample(&m, lo, seed).unwrap();
        let big = fraction_subsample(&m, hi, seed).unwrap();
        for (s, l) in small.iter().zip(&big) {
            prop_assert_eq!(s.len(), (lo * per_class as f64 + 1e-9).floor() as usize);
            prop_assert!(s.iter().all(|i| l.contains(i)));
        }
    }

    #[test]
    fn checkpoint_round_trips(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 0..5), seed in any::<u64>(), key in "[a-z]{1,8}", value in "[ -~]{0,16}") {
        let mut rng = Rng::seeded(seed);
        let mut meta = KvMap::new();
        meta.set(key, value.trim());
        let mut ck = Checkpoint::new(meta);
        for (i, s) in shapes.iter().enumerate() {
            let n: usize = s.iter().product();
            ck.push(format!("t{i}"), Tensor::new(s.clone(), (0..n).map(|_| rng.normal()).collect()).unwrap());
        }
        let bytes = ck.to_bytes(Precision::F64);
        prop_assert_eq!(&Checkpoint::from_bytes(&bytes, Path::new("p")).unwrap(), &ck);
        prop_assert_eq!(ck.to_bytes(Precision::F64), bytes);
    }

    #[test]
    fn aggregate_matches_two_pass_formula(xs in prop::collection::vec(0.0f64..1.0, 1..10)) {
        let a = aggregate(&xs).unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        prop_assert!((a.mean - mean).abs() < 1e-15);
        if xs.len() > 1 {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            prop_assert!((a.std - var.sqrt()).abs() < 1e-12);
        } else {
            prop_assert_eq!(a.std, 0.0);
            prop_assert!(a.single_seed());
        }
    }

    #[test]
    fn sweep_is_order_free_and_picks_max(vals in prop::collection::vec(0u8..5, 6), p in 0usize..6) {
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let grid = [1e-4, 5e-4, 1e-3];
        let val = |lr: f64, s: u64| {
            let li = grid.iter().position(|&g| g == lr).unwrap();
            f64::from(vals[li * 2 + s as usize]) / 4.0
        };
        let a = lr_sweep(&grid, &[0, 1], |lr, s| Ok(seed_run(lr, s, val(lr, s)))).unwrap();
        let perm: Vec<f64> = PERMS[p].iter().map(|&i| grid[i]).collect();
        let b = lr_sweep(&perm, &[0, 1], |lr, s| Ok(seed_run(lr, s, val(lr, s)))).unwrap();
        prop_assert_eq!(&a, &b);
        let means: Vec<f64> = grid.iter().map(|&lr| (val(lr, 0) + val(lr, 1)) / 2.0).collect();
        let best = means.iter().cloned().fold(f64::MIN, f64::max);
        let first = means.iter().position(|&m| m == best).unwrap();
        prop_assert_eq!(a.best_lr, grid[first]);
    }

    #[test]
    fn series_sorted_and_unique(xs in prop::collection::vec(1usize..60, 1..12)) {
        let rows: Vec<ResultRow> = xs.iter().enumerate().map(|(i, &k)| ResultRow {
            mode: "lora".into(),
            dataset: "t".into(),
            k_or_fraction: k.to_string(),
            lr: 1e-3,
            seed: i as u64,
            test_top1: 0.5,
            params_trainable: 1,
            wall_ms: 0,
        }).collect();
        let s = series(&rows, &SeriesQuery::default()).unwrap();
        let got: Vec<usize> = s.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        let mut want = xs.clone();
        want.sort_unstable();
        want.dedup();
        prop_assert_eq!(got, want);
    }
}
