//! Low-rank adapters on the attention projections.
//!
//! An adapted projection computes `h = W x + γ·B·(A x)` with `A: r×n`,
//! `B: m×r` and `γ = alpha / r`. `A` starts Kaiming-uniform (fan-in,
//! bound `√(6/n)`) and `B` starts at zero, so a freshly injected model is
//! exactly the base model. The training path never materializes `B·A`;
//! only [`LoraPair::delta`] (used for merging) does.

use std::collections::BTreeSet;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kv::KvMap;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vit::{block_param_name, Projector, Target, ViTConfig, ViTModel, ViTWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: BTreeSet<Target>,
    pub init_seed: u64,
    /// Debug only: draw `B` like `A` instead of zeros. Exists so the
    /// zero-init verification can be shown to fail.
    pub debug_nonzero_b: bool,
}

impl LoraConfig {
    /// `alpha` defaults to `rank`, i.e. `γ = 1`.
    pub fn new(rank: usize, targets: &[Target]) -> Self {
        LoraConfig {
            rank,
            alpha: rank as f64,
            targets: targets.iter().copied().collect(),
            init_seed: 0,
            debug_nonzero_b: false,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    /// `γ = alpha / r`, recomputed on every call.
    pub fn gamma(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::config("LoRA targets must be non-empty"));
        }
        if self.rank == 0 {
            return Err(Error::config("LoRA rank must be >= 1"));
        }
        if self.rank > dim {
            return Err(Error::config(format!(
                "LoRA rank {} exceeds projection size {dim}",
                self.rank
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config(format!("LoRA alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Short target list such as `q,v`.
    pub fn targets_string(&self) -> String {
        self.targets
            .iter()
            .map(|t| t.short().to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_targets(s: &str) -> Result<Vec<Target>> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(Target::parse)
            .collect()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("lora.rank".into(), self.rank.to_string()),
            ("lora.alpha".into(), self.alpha.to_string()),
            ("lora.targets".into(), self.targets_string()),
            ("lora.init_seed".into(), self.init_seed.to_string()),
        ]
    }
}

/// Uniform on `[-√(6/n), √(6/n)]` with `n = fan_in` (variance `2/n`).
pub fn kaiming_uniform(rows: usize, fan_in: usize, rng: &mut Rng) -> Tensor {
    assert!(fan_in >= 1 && rows >= 1);
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..rows * fan_in)
        .map(|_| rng.uniform_in(-bound, bound))
        .collect();
    Tensor::new(vec![rows, fan_in], data).expect("non-zero extents")
}

pub fn kaiming_init(rows: usize, fan_in: usize, seed: u64) -> Tensor {
    kaiming_uniform(rows, fan_in, &mut Rng::stream(seed, "kaiming"))
}

/// `x·Wᵀ + γ·(x·Aᵀ)·Bᵀ`, the row-major form of `W x + γ B A x`.
pub fn adapted_projection(
    g: &mut Graph,
    x: Var,
    weight: Var,
    a: Var,
    b: Var,
    gamma: f64,
) -> Result<Var> {
    let base = g.matmul_nt(x, weight)?;
    let down = g.matmul_nt(x, a)?;
    let up = g.matmul_nt(down, b)?;
    let delta = g.scale(up, gamma)?;
    g.add(base, delta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub block: usize,
    pub target: Target,
    /// `r×n`
    pub a: Tensor,
    /// `m×r`
    pub b: Tensor,
    merged: bool,
}

impl LoraPair {
    pub fn new(block: usize, target: Target, m: usize, n: usize, cfg: &LoraConfig) -> Self {
        let mut rng = Rng::stream(cfg.init_seed, &format!("lora.block{block}.{target}"));
        let a = kaiming_uniform(cfg.rank, n, &mut rng);
        let b = if cfg.debug_nonzero_b {
            kaiming_uniform(m, cfg.rank, &mut rng)
        } else {
            Tensor::zeros(&[m, cfg.rank])
        };
        LoraPair {
            block,
            target,
            a,
            b,
            merged: false,
        }
    }

    /// Builds a pair from explicit factors, unmerged.
    pub fn from_factors(block: usize, target: Target, a: Tensor, b: Tensor) -> Result<Self> {
        let (r, _) = a.dims2()?;
        let (_, r2) = b.dims2()?;
        if r != r2 {
            return Err(Error::dim(format!("A has rank {r}, B has rank {r2}")));
        }
        Ok(LoraPair {
            block,
            target,
            a,
            b,
            merged: false,
        })
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn name(&self, factor: &str) -> String {
        block_param_name(self.block, &format!("{}.lora_{factor}", self.target))
    }

    /// Materialized `γ·B·A`.
    pub fn delta(&self, gamma: f64) -> Tensor {
        self.b
            .matmul(&self.a)
            .expect("factor shapes checked at construction")
            .map(|x| gamma * x)
    }

    fn check_host(&self, host: &Tensor) -> Result<()> {
        let (m, n) = host.dims2()?;
        if self.b.shape()[0] != m || self.a.shape()[1] != n {
            return Err(Error::dim(format!(
                "adapter {}x{} does not fit host {m}x{n}",
                self.b.shape()[0],
                self.a.shape()[1]
            )));
        }
        Ok(())
    }

    /// `W ← W + γBA`.
    pub fn merge_into(&mut self, host: &mut Tensor, gamma: f64) -> Result<()> {
        if self.merged {
            return Err(Error::state(format!("{} already merged", self.name("pair"))));
        }
        self.check_host(host)?;
        let d = self.delta(gamma);
        host.data_mut().iter_mut().zip(d.data()).for_each(|(w, x)| *w += x);
        self.merged = true;
        Ok(())
    }

    /// `W ← W − γBA`, with `γBA` recomputed from the stored factors.
    pub fn unmerge_from(&mut self, host: &mut Tensor, gamma: f64) -> Result<()> {
        if !self.merged {
            return Err(Error::state(format!("{} is not merged", self.name("pair"))));
        }
        self.check_host(host)?;
        let d = self.delta(gamma);
        host.data_mut().iter_mut().zip(d.data()).for_each(|(w, x)| *w -= x);
        self.merged = false;
        Ok(())
    }

    /// Graph-mode adapted forward through this pair's host `weight`.
    /// `a` and `b` must be the graph handles for this pair's factors.
    pub fn adapted_forward(
        &self,
        g: &mut Graph,
        x: Var,
        weight: Var,
        a: Var,
        b: Var,
        gamma: f64,
    ) -> Result<Var> {
        if self.merged {
            return Err(Error::state(
                "adapted forward on a merged pair; use the plain weight",
            ));
        }
        adapted_projection(g, x, weight, a, b, gamma)
    }
}

/// Graph handles for every adapter in a model, indexed by block then target.
#[derive(Debug, Clone)]
pub struct AdapterVars {
    pub gamma: f64,
    pub slots: Vec<[Option<(Var, Var)>; 4]>,
}

fn target_slot(t: Target) -> usize {
    Target::ALL.iter().position(|&x| x == t).unwrap()
}

impl Projector for AdapterVars {
    fn project(
        &self,
        g: &mut Graph,
        block: usize,
        target: Target,
        x: Var,
        weight: Var,
    ) -> Result<Var> {
        match self.slots.get(block).and_then(|s| s[target_slot(target)]) {
            Some((a, b)) => adapted_projection(g, x, weight, a, b, self.gamma),
            None => g.matmul_nt(x, weight),
        }
    }
}

/// A frozen backbone plus one [`LoraPair`] per (block, target).
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    pub base: ViTModel,
    pub config: LoraConfig,
    pub pairs: Vec<LoraPair>,
}

/// Attaches adapters to every block's targeted projections and freezes the
/// backbone.
pub fn inject(mut model: ViTModel, cfg: LoraConfig) -> Result<AdaptedModel> {
    model.config.validate()?;
    cfg.validate(model.config.dim)?;
    model.freeze_all();
    let d = model.config.dim;
    let pairs = build_pairs(model.config.depth, d, &cfg);
    Ok(AdaptedModel {
        base: model,
        config: cfg,
        pairs,
    })
}

/// Pairs for `depth` blocks of `d×d` projections, without a backbone.
pub fn build_pairs(depth: usize, d: usize, cfg: &LoraConfig) -> Vec<LoraPair> {
    (0..depth)
        .flat_map(|block| {
            cfg.targets
                .iter()
                .map(move |&t| LoraPair::new(block, t, d, d, cfg))
        })
        .collect()
}

impl AdaptedModel {
    pub fn gamma(&self) -> f64 {
        self.config.gamma()
    }

    pub fn is_merged(&self) -> bool {
        self.pairs.iter().any(LoraPair::is_merged)
    }

    /// Elements in groups that train: adapter factors plus unfrozen base groups.
    pub fn trainable_param_count(&self) -> usize {
        self.pairs.iter().map(LoraPair::param_count).sum::<usize>() + self.base.param_count(true)
    }

    /// Binds base weights (frozen, so never requiring grad) and adapter
    /// factors. A merged model binds no adapters at all.
    pub fn bind(&self, g: &mut Graph, with_grad: bool) -> (ViTWeights<Var>, AdapterVars) {
        let weights = self.base.bind(g, with_grad);
        let mut slots = vec![[None; 4]; self.base.config.depth];
        if !self.is_merged() {
            for p in &self.pairs {
                let a = g.leaf(p.a.clone(), with_grad);
                let b = g.leaf(p.b.clone(), with_grad);
                slots[p.block][target_slot(p.target)] = Some((a, b));
            }
        }
        (
            weights,
            AdapterVars {
                gamma: self.gamma(),
                slots,
            },
        )
    }

    pub fn merge(&mut self) -> Result<()> {
        let gamma = self.gamma();
        for p in &mut self.pairs {
            let host = self.base.weights.blocks[p.block].projection_mut(p.target);
            p.merge_into(host, gamma)?;
        }
        Ok(())
    }

    pub fn unmerge(&mut self) -> Result<()> {
        let gamma = self.gamma();
        for p in &mut self.pairs {
            let host = self.base.weights.blocks[p.block].projection_mut(p.target);
            p.unmerge_from(host, gamma)?;
        }
        Ok(())
    }

    /// A plain backbone with every delta folded in; `self` is untouched.
    pub fn merged_model(&self) -> Result<ViTModel> {
        let mut copy = self.clone();
        copy.merge()?;
        Ok(copy.base)
    }

    pub fn pair(&self, block: usize, target: Target) -> Option<&LoraPair> {
        self.pairs
            .iter()
            .find(|p| p.block == block && p.target == target)
    }

    pub fn adapter_checkpoint(&self) -> Checkpoint {
        let mut meta = KvMap::new();
        meta.set("kind", "adapter");
        meta.set("vit.dim", self.base.config.dim);
        meta.set("vit.depth", self.base.config.depth);
        meta.extend(self.config.to_pairs());
        let mut ck = Checkpoint::new(meta);
        for p in &self.pairs {
            ck.push(p.name("A"), p.a.clone());
            ck.push(p.name("B"), p.b.clone());
        }
        ck
    }

    /// Loads adapters from an adapter checkpoint onto `base`.
    pub fn from_adapter_checkpoint(base: ViTModel, ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.meta;
        if meta.get("kind") != Some("adapter") {
            return Err(Error::config("checkpoint is not an adapter checkpoint"));
        }
        let d: usize = meta.require_parse("vit.dim")?;
        let depth: usize = meta.require_parse("vit.depth")?;
        if d != base.config.dim || depth != base.config.depth {
            return Err(Error::config(format!(
                "adapter built for d={d}, L={depth}; backbone has d={}, L={}",
                base.config.dim, base.config.depth
            )));
        }
        let targets = LoraConfig::parse_targets(meta.get("lora.targets").unwrap_or(""))?;
        let cfg = LoraConfig {
            rank: meta.require_parse("lora.rank")?,
            alpha: meta.require_parse("lora.alpha")?,
            targets: targets.into_iter().collect(),
            init_seed: meta.require_parse("lora.init_seed")?,
            debug_nonzero_b: false,
        };
        let mut model = inject(base, cfg)?;
        for p in &mut model.pairs {
            let a = ck.require(&p.name("A"))?;
            let b = ck.require(&p.name("B"))?;
            if a.shape() != p.a.shape() || b.shape() != p.b.shape() {
                return Err(Error::dim(format!("adapter factor shapes for {}", p.name("*"))));
            }
            p.a = a.clone();
            p.b = b.clone();
        }
        Ok(model)
    }
}

/// Closed form: `L·|targets|·r·(m+n)` with `m = n = d`, plus `c·n` for a head.
pub fn trainable_param_count(
    cfg: &LoraConfig,
    vit: &ViTConfig,
    include_head: Option<(usize, usize)>,
) -> usize {
    let d = vit.dim;
    let adapters = vit.depth * cfg.targets.len() * cfg.rank * (d + d);
    adapters + include_head.map_or(0, |(c, n)| c * n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_relative_diff, Precision};
    use crate::vit::PlainProjection;

    fn qv() -> Vec<Target> {
        vec![Target::Query, Target::Value]
    }

    #[test]
    fn pair_counts() {
        let m = ViTModel::init(ViTConfig::tiny(), 0).unwrap();
        let a = inject(m, LoraConfig::new(2, &qv())).unwrap();
        assert_eq!(a.pairs.len(), 4);
        let b16 = build_pairs(12, 8, &LoraConfig::new(2, &qv()));
        assert_eq!(b16.len(), 24);
    }

    #[test]
    fn injection_errors() {
        let m = ViTModel::init(ViTConfig::tiny(), 0).unwrap();
        assert!(matches!(
            inject(m.clone(), LoraConfig::new(33, &qv())),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            inject(m.clone(), LoraConfig::new(2, &[])),
            Err(Error::Config(_))
        ));
        assert!(inject(m, LoraConfig::new(2, &qv()).with_alpha(0.0)).is_err());
    }

    #[test]
    fn b_starts_at_zero_and_a_in_bounds() {
        let cfg = LoraConfig::new(4, &qv()).with_seed(9);
        let p = LoraPair::new(0, Target::Query, 32, 32, &cfg);
        assert!(p.b.data().iter().all(|&x| x == 0.0));
        let bound = (6.0f64 / 32.0).sqrt();
        assert!(p.a.data().iter().all(|x| x.abs() <= bound));
        assert_eq!(p, LoraPair::new(0, Target::Query, 32, 32, &cfg));
    }

    #[test]
    fn kaiming_support_and_determinism() {
        let a = kaiming_init(16, 64, 5);
        assert_eq!(a, kaiming_init(16, 64, 5));
        assert_ne!(a, kaiming_init(16, 64, 6));
        let bound = (6.0f64 / 64.0).sqrt();
        assert!(a.data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn kaiming_variance_is_two_over_fan_in() {
        // Var of U(-b, b) = b²/3 = (6/n)/3 = 2/n.
        let n = 50;
        let t = kaiming_init(2000, n, 11); // 10⁵ draws
        let xs = t.data();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        let expected = 2.0 / n as f64;
        assert!((var / expected - 1.0).abs() < 0.05, "var {var} vs {expected}");
    }

    fn eval_projection(w: &Tensor, pair: &LoraPair, x: &Tensor, gamma: f64) -> Tensor {
        let mut g = Graph::new(Precision::F64);
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let (av, bv) = (g.constant(pair.a.clone()), g.constant(pair.b.clone()));
        let out = pair.adapted_forward(&mut g, xv, wv, av, bv, gamma).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn zero_b_is_exactly_base() {
        let mut rng = Rng::seeded(1);
        let w = kaiming_uniform(6, 6, &mut rng);
        let x = kaiming_uniform(3, 6, &mut rng);
        let pair = LoraPair::new(0, Target::Query, 6, 6, &LoraConfig::new(2, &qv()));
        let out = eval_projection(&w, &pair, &x, 1.0);
        let base = x.matmul(&w.transpose().unwrap()).unwrap();
        assert_eq!(out, base);
    }

    #[test]
    fn rank_one_by_hand() {
        // W = 0, A = [1 2 3], B = [1; -1], x = [1 1 1] → h = B·(A·x) = [6, -6].
        let w = Tensor::zeros(&[2, 3]);
        let a = Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let b = Tensor::from_rows(&[&[1.0], &[-1.0]]).unwrap();
        let pair = LoraPair::from_factors(0, Target::Value, a, b).unwrap();
        let x = Tensor::from_rows(&[&[1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(eval_projection(&w, &pair, &x, 1.0).data(), &[6.0, -6.0]);
        // Doubling γ doubles the delta term exactly.
        assert_eq!(eval_projection(&w, &pair, &x, 2.0).data(), &[12.0, -12.0]);
    }

    #[test]
    fn merge_state_machine() {
        let mut rng = Rng::seeded(2);
        let mut w = kaiming_uniform(4, 4, &mut rng);
        let orig = w.clone();
        let mut pair = LoraPair::from_factors(
            0,
            Target::Key,
            kaiming_uniform(2, 4, &mut rng),
            kaiming_uniform(4, 2, &mut rng),
        )
        .unwrap();
        pair.merge_into(&mut w, 0.5).unwrap();
        assert!(matches!(pair.merge_into(&mut w, 0.5), Err(Error::State(_))));
        let x = kaiming_uniform(3, 4, &mut rng);
        let mut g = Graph::new(Precision::F64);
        let vars = [g.constant(x), g.constant(w.clone())];
        let (av, bv) = (g.constant(pair.a.clone()), g.constant(pair.b.clone()));
        assert!(matches!(
            pair.adapted_forward(&mut g, vars[0], vars[1], av, bv, 0.5),
            Err(Error::State(_))
        ));
        pair.unmerge_from(&mut w, 0.5).unwrap();
        assert!(matches!(pair.unmerge_from(&mut w, 0.5), Err(Error::State(_))));
        assert!(!pair.is_merged());
        for (x, y) in w.data().iter().zip(orig.data()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-300), "{x} vs {y}");
        }
    }

    #[test]
    fn merge_with_zero_b_is_bit_exact() {
        let mut rng = Rng::seeded(3);
        let mut w = kaiming_uniform(5, 5, &mut rng);
        let orig = w.clone();
        let mut pair = LoraPair::new(1, Target::Output, 5, 5, &LoraConfig::new(2, &qv()));
        pair.merge_into(&mut w, 1.0).unwrap();
        assert_eq!(w, orig);
    }

    #[test]
    fn merged_model_matches_adapted_forward() {
        let base = ViTModel::init(ViTConfig::tiny(), 4).unwrap();
        let mut adapted = inject(base, LoraConfig::new(2, &Target::ALL).with_seed(1)).unwrap();
        let mut rng = Rng::seeded(5);
        for p in &mut adapted.pairs {
            p.b = kaiming_uniform(32, 2, &mut rng).map(|x| 0.1 * x);
        }
        let image = Tensor::new(
            vec![3, 32, 32],
            (0..3 * 32 * 32).map(|_| rng.uniform()).collect(),
        )
        .unwrap();

        let mut g = Graph::new(Precision::F64);
        let (w, ad) = adapted.bind(&mut g, false);
        let z1 = adapted.base.features(&mut g, &w, &ad, &image).unwrap();
        let unmerged = g.value(z1).clone();

        let merged = adapted.merged_model().unwrap();
        let mut g = Graph::new(Precision::F64);
        let w = merged.bind(&mut g, false);
        let z2 = merged.features(&mut g, &w, &PlainProjection, &image).unwrap();
        let rel = max_relative_diff(g.value(z2).data(), unmerged.data());
        assert!(rel < 1e-10, "{rel}");
    }

    #[test]
    fn closed_form_counts() {
        let all = LoraConfig::new(16, &Target::ALL);
        assert_eq!(trainable_param_count(&all, &ViTConfig::l14_shape(), None), 3_145_728);
        let qv2 = LoraConfig::new(2, &qv());
        assert_eq!(trainable_param_count(&qv2, &ViTConfig::b16_shape(), None), 73_728);
        assert_eq!(trainable_param_count(&qv2, &ViTConfig::tiny(), None), 512);
        assert_eq!(trainable_param_count(&qv2, &ViTConfig::tiny(), Some((5, 32))), 672);
    }

    #[test]
    fn adapter_checkpoint_round_trip() {
        let base = ViTModel::init(ViTConfig::tiny(), 4).unwrap();
        let mut adapted = inject(base.clone(), LoraConfig::new(2, &qv()).with_seed(3)).unwrap();
        adapted.pairs[1].b = Tensor::full(&[32, 2], 0.25);
        let ck = adapted.adapter_checkpoint();
        assert!(ck.get("block0.query.lora_A").is_some());
        assert!(ck.get("block1.value.lora_B").is_some());
        let bytes = ck.to_bytes(Precision::F64);
        let ck = Checkpoint::from_bytes(&bytes, std::path::Path::new("m")).unwrap();
        let back = AdaptedModel::from_adapter_checkpoint(base, &ck).unwrap();
        assert_eq!(back.pairs, adapted.pairs);

        let mut other = ViTConfig::tiny();
        other.depth = 3;
        let wrong = ViTModel::init(other, 0).unwrap();
        assert!(AdaptedModel::from_adapter_checkpoint(wrong, &ck).is_err());
    }
}
