//! Synthetic cell-like images for desk-scale transfer experiments.
//!
//! Each class owns a fixed blob layout (its geometry), drawn once from the
//! spec seed. A task's [`Style`] decides how that geometry is rendered:
//! blob colour, radius, background colour and stripe texture. The source
//! and target tasks share geometry and differ only in style, so a backbone
//! pretrained on the source task has to transfer across a rendering shift.
//!
//! Splits default to 70/15/15 of each task's per-class sample count, taken in
//! generation order.

use std::path::Path;

use crate::data::dataset::Dataset;
use crate::data::image::encode_image;
use crate::data::manifest::{DatasetManifest, Item, Norm, Split};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vit::ViTConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Source,
    Target,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Source => "source",
            Task::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Style {
    pub blob_color: [f64; 3],
    pub background: [f64; 3],
    pub radius: f64,
    pub texture_amp: f64,
    pub texture_freq: f64,
    pub texture_angle: f64,
    /// Random blobs per image that carry no class information.
    pub distractors: usize,
    pub distractor_color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub name: String,
    pub num_classes: usize,
    /// Target-task images per class.
    pub samples_per_class: usize,
    /// Source-task images per class; the pretraining corpus is larger.
    pub source_samples_per_class: usize,
    pub split: [f64; 3],
    pub image_size: usize,
    pub channels: usize,
    /// Class `c` has `blobs_base + c % blobs_cycle` blobs.
    pub blobs_base: usize,
    pub blobs_cycle: usize,
    /// Per-sample displacement of each blob centre, in pixels.
    pub jitter: f64,
    pub noise: f64,
    pub seed: u64,
    pub source: Style,
    pub target: Style,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            name: "synth".into(),
            num_classes: 5,
            samples_per_class: 100,
            source_samples_per_class: 300,
            split: [0.7, 0.15, 0.15],
            image_size: 32,
            channels: 3,
            blobs_base: 2,
            blobs_cycle: 2,
            jitter: 1.5,
            noise: 0.05,
            seed: 0,
            source: Style {
                blob_color: [0.95, 0.25, 0.2],
                background: [0.1, 0.1, 0.15],
                radius: 2.5,
                texture_amp: 0.05,
                texture_freq: 0.4,
                texture_angle: 0.0,
                distractors: 0,
                distractor_color: [0.95, 0.25, 0.2],
            },
            target: Style {
                blob_color: [0.443, 0.679, 0.746],
                background: [0.25, 0.2, 0.3],
                radius: 2.5,
                texture_amp: 0.1,
                texture_freq: 0.7,
                texture_angle: 1.1,
                distractors: 0,
                distractor_color: [0.443, 0.679, 0.746],
            },
        }
    }
}

fn parse_triple(kv: &KvMap, key: &str, default: [f64; 3]) -> Result<[f64; 3]> {
    let Some(v) = kv.get(key) else {
        return Ok(default);
    };
    let xs: Vec<f64> = v
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("cannot parse {key}='{v}'")))?;
    xs.try_into()
        .map_err(|_| Error::config(format!("{key} needs 3 comma-separated values")))
}

fn triple(x: [f64; 3]) -> String {
    format!("{},{},{}", x[0], x[1], x[2])
}

impl Style {
    fn from_kv(kv: &KvMap, prefix: &str, d: &Style) -> Result<Style> {
        let k = |s: &str| format!("{prefix}.{s}");
        Ok(Style {
            blob_color: parse_triple(kv, &k("blob_color"), d.blob_color)?,
            background: parse_triple(kv, &k("background"), d.background)?,
            radius: kv.get_parse(&k("radius"))?.unwrap_or(d.radius),
            texture_amp: kv.get_parse(&k("texture_amp"))?.unwrap_or(d.texture_amp),
            texture_freq: kv.get_parse(&k("texture_freq"))?.unwrap_or(d.texture_freq),
            texture_angle: kv.get_parse(&k("texture_angle"))?.unwrap_or(d.texture_angle),
            distractors: kv.get_parse(&k("distractors"))?.unwrap_or(d.distractors),
            distractor_color: parse_triple(kv, &k("distractor_color"), d.distractor_color)?,
        })
    }

    fn to_kv(&self, prefix: &str, kv: &mut KvMap) {
        kv.set(format!("{prefix}.blob_color"), triple(self.blob_color));
        kv.set(format!("{prefix}.background"), triple(self.background));
        kv.set(format!("{prefix}.radius"), self.radius);
        kv.set(format!("{prefix}.texture_amp"), self.texture_amp);
        kv.set(format!("{prefix}.texture_freq"), self.texture_freq);
        kv.set(format!("{prefix}.texture_angle"), self.texture_angle);
        kv.set(format!("{prefix}.distractors"), self.distractors);
        kv.set(format!("{prefix}.distractor_color"), triple(self.distractor_color));
    }
}

impl SynthSpec {
    /// Keys absent from `kv` keep their [`Default`] values.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = SynthSpec::default();
        let split = match kv.get("split") {
            Some(_) => parse_triple(kv, "split", d.split)?,
            None => d.split,
        };
        let spec = SynthSpec {
            name: kv.get("name").map_or(d.name.clone(), str::to_string),
            num_classes: kv.get_parse("num_classes")?.unwrap_or(d.num_classes),
            samples_per_class: kv.get_parse("samples_per_class")?.unwrap_or(d.samples_per_class),
            source_samples_per_class: kv
                .get_parse("source_samples_per_class")?
                .unwrap_or(d.source_samples_per_class),
            split,
            image_size: kv.get_parse("image_size")?.unwrap_or(d.image_size),
            channels: kv.get_parse("channels")?.unwrap_or(d.channels),
            blobs_base: kv.get_parse("blobs_base")?.unwrap_or(d.blobs_base),
            blobs_cycle: kv.get_parse("blobs_cycle")?.unwrap_or(d.blobs_cycle),
            jitter: kv.get_parse("jitter")?.unwrap_or(d.jitter),
            noise: kv.get_parse("noise")?.unwrap_or(d.noise),
            seed: kv.get_parse("seed")?.unwrap_or(d.seed),
            source: Style::from_kv(kv, "source", &d.source)?,
            target: Style::from_kv(kv, "target", &d.target)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("name", &self.name);
        kv.set("num_classes", self.num_classes);
        kv.set("samples_per_class", self.samples_per_class);
        kv.set("source_samples_per_class", self.source_samples_per_class);
        kv.set("split", triple(self.split));
        kv.set("image_size", self.image_size);
        kv.set("channels", self.channels);
        kv.set("blobs_base", self.blobs_base);
        kv.set("blobs_cycle", self.blobs_cycle);
        kv.set("jitter", self.jitter);
        kv.set("noise", self.noise);
        kv.set("seed", self.seed);
        self.source.to_kv("source", &mut kv);
        self.target.to_kv("target", &mut kv);
        kv
    }

    pub fn style(&self, task: Task) -> &Style {
        match task {
            Task::Source => &self.source,
            Task::Target => &self.target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("synthetic data needs >= 2 classes"));
        }
        if !(1..=3).contains(&self.channels) {
            return Err(Error::config("channels must be 1, 2 or 3"));
        }
        let tiny = ViTConfig::tiny();
        if self.image_size % tiny.patch_size != 0 || self.image_size < tiny.patch_size {
            return Err(Error::config(format!(
                "image_size {} incompatible with patch size {}",
                self.image_size, tiny.patch_size
            )));
        }
        if self.split.iter().any(|&f| f < 0.0) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::config("split proportions must be >= 0 and sum to 1"));
        }
        if self.blobs_base + self.blobs_cycle == 0 || self.blobs_cycle == 0 {
            return Err(Error::config("blobs_cycle must be >= 1"));
        }
        Ok(())
    }

    pub fn samples(&self, task: Task) -> usize {
        match task {
            Task::Source => self.source_samples_per_class,
            Task::Target => self.samples_per_class,
        }
    }

    /// Per-class counts `(train, val, test)` for `task`.
    pub fn split_counts(&self, task: Task) -> (usize, usize, usize) {
        let total = self.samples(task);
        let n = total as f64;
        let train = ((self.split[0] * n).round() as usize).min(total);
        let val = ((self.split[1] * n).round() as usize).min(total - train);
        (train, val, total - train - val)
    }

    /// Blob centres per class, shared by both tasks.
    pub fn geometry(&self) -> Vec<Vec<(f64, f64)>> {
        let mut rng = Rng::stream(self.seed, "synth.geometry");
        let s = self.image_size as f64;
        let margin = 4.0;
        (0..self.num_classes)
            .map(|c| {
                let count = self.blobs_base + c % self.blobs_cycle;
                (0..count)
                    .map(|_| (rng.uniform_in(margin, s - margin), rng.uniform_in(margin, s - margin)))
                    .collect()
            })
            .collect()
    }
}

/// Renders one `C×S×S` image with values in `[0, 1]`, rounded to `f32`.
fn render(spec: &SynthSpec, style: &Style, blobs: &[(f64, f64)], rng: &mut Rng) -> Vec<f64> {
    let s = spec.image_size;
    let c = spec.channels;
    let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
    let (ca, sa) = (style.texture_angle.cos(), style.texture_angle.sin());
    let mut centres: Vec<(f64, f64, f64, f64, [f64; 3])> = blobs
        .iter()
        .map(|&(x, y)| {
            let dx = rng.uniform_in(-spec.jitter, spec.jitter);
            let dy = rng.uniform_in(-spec.jitter, spec.jitter);
            let r = style.radius * rng.uniform_in(0.85, 1.15);
            let strength = rng.uniform_in(0.8, 1.0);
            (x + dx, y + dy, r, strength, style.blob_color)
        })
        .collect();
    for _ in 0..style.distractors {
        let x = rng.uniform_in(2.0, s as f64 - 2.0);
        let y = rng.uniform_in(2.0, s as f64 - 2.0);
        let k = rng.uniform_in(0.6, 0.9);
        centres.push((x, y, style.radius * 0.8, k, style.distractor_color));
    }
    let mut out = vec![0.0; c * s * s];
    for y in 0..s {
        for x in 0..s {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let tex = style.texture_amp * (style.texture_freq * (fx * ca + fy * sa) + phase).sin();
            // The strongest blob at this pixel decides the colour.
            let mut alpha: f64 = 0.0;
            let mut color = style.blob_color;
            for &(bx, by, r, k, col) in &centres {
                let d2 = (fx - bx).powi(2) + (fy - by).powi(2);
                let a = k * (-d2 / (2.0 * r * r)).exp();
                if a > alpha {
                    alpha = a;
                    color = col;
                }
            }
            for ch in 0..c {
                let bg = style.background[ch] + tex;
                let v = bg * (1.0 - alpha) + color[ch] * alpha;
                out[ch * s * s + y * s + x] = v;
            }
        }
    }
    for v in &mut out {
        *v += spec.noise * rng.normal();
        *v = (v.clamp(0.0, 1.0) as f32) as f64;
    }
    out
}

/// Raw images (values in `[0, 1]`) plus the manifest describing them.
pub fn generate_raw(spec: &SynthSpec, task: Task) -> Result<(DatasetManifest, Vec<Tensor>)> {
    spec.validate()?;
    let geometry = spec.geometry();
    let style = spec.style(task);
    let (n_train, n_val, _) = spec.split_counts(task);
    let mut rng = Rng::stream(spec.seed, &format!("synth.{}", task.name()));
    let mut items = Vec::new();
    let mut images = Vec::new();
    let s = spec.image_size;
    for (label, blobs) in geometry.iter().enumerate() {
        for i in 0..spec.samples(task) {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            let data = render(spec, style, blobs, &mut rng);
            images.push(Tensor::new(vec![spec.channels, s, s], data)?);
            items.push(Item {
                path: format!("images/{:05}.cyt", items.len()),
                label,
                split,
            });
        }
    }
    let norm = train_norm(&items, &images, spec.channels);
    let manifest = DatasetManifest {
        name: format!("{}-{}", spec.name, task.name()),
        classes: (0..spec.num_classes).map(|c| format!("class{c}")).collect(),
        norm,
        items,
    };
    Ok((manifest, images))
}

fn train_norm(items: &[Item], images: &[Tensor], channels: usize) -> Norm {
    let mut sum = vec![0.0; channels];
    let mut sq = vec![0.0; channels];
    let mut count = 0usize;
    for (it, img) in items.iter().zip(images) {
        if it.split != Split::Train {
            continue;
        }
        let per = img.len() / channels;
        for (ch, chunk) in img.data().chunks(per).enumerate() {
            sum[ch] += chunk.iter().sum::<f64>();
            sq[ch] += chunk.iter().map(|v| v * v).sum::<f64>();
        }
        count += img.len() / channels;
    }
    let n = count.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
        .collect();
    Norm { mean, std }
}

/// In-memory normalized dataset, identical to writing and reloading.
pub fn generate(spec: &SynthSpec, task: Task) -> Result<Dataset> {
    let (manifest, images) = generate_raw(spec, task)?;
    Dataset::from_raw(manifest, images)
}

/// Writes `<dir>/manifest.csv` and `<dir>/images/*.cyt`.
pub fn write_task(spec: &SynthSpec, task: Task, dir: &Path) -> Result<DatasetManifest> {
    let (mut manifest, images) = generate_raw(spec, task)?;
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (it, img) in manifest.items.iter().zip(&images) {
        let p = dir.join(&it.path);
        std::fs::write(&p, encode_image(img)?).map_err(|e| Error::io(&p, e))?;
    }
    manifest.write(dir)?;
    if let Some(n) = dir.file_name() {
        manifest.name = n.to_string_lossy().into_owned();
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            samples_per_class: 20,
            source_samples_per_class: 20,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn spec_round_trips_through_kv() {
        let s = small();
        let back = SynthSpec::from_kv(&KvMap::parse(&s.to_kv().to_canonical()).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_unpatchable_size() {
        let s = SynthSpec {
            image_size: 30,
            ..small()
        };
        assert!(matches!(generate_raw(&s, Task::Source), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_and_in_range() {
        let (m1, a) = generate_raw(&small(), Task::Target).unwrap();
        let (m2, b) = generate_raw(&small(), Task::Target).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(a, b);
        assert!(a.iter().all(|t| t.data().iter().all(|v| (0.0..=1.0).contains(v))));
        let (train, val, test) = small().split_counts(Task::Target);
        assert_eq!((train, val, test), (14, 3, 3));
    }

    #[test]
    fn class_means_differ_by_more_than_noise() {
        let spec = small();
        let (m, imgs) = generate_raw(&spec, Task::Source).unwrap();
        let mean_of = |c: usize| {
            let idx: Vec<usize> = (0..m.items.len()).filter(|&i| m.items[i].label == c).collect();
            let mut acc = vec![0.0; imgs[0].len()];
            for &i in &idx {
                acc.iter_mut().zip(imgs[i].data()).for_each(|(a, v)| *a += v);
            }
            acc.iter().map(|a| a / idx.len() as f64).collect::<Vec<_>>()
        };
        let (m0, m1) = (mean_of(0), mean_of(1));
        let mad = m0.iter().zip(&m1).map(|(a, b)| (a - b).abs()).sum::<f64>() / m0.len() as f64;
        // Mean absolute difference over the whole image, against the noise std.
        let peak = m0.iter().zip(&m1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(peak > spec.noise, "peak {peak} vs noise {}", spec.noise);
        assert!(mad > 0.0);
    }

    #[test]
    fn nearest_mean_separates_single_noise_free_samples() {
        let spec = SynthSpec {
            samples_per_class: 1,
            source_samples_per_class: 1,
            split: [1.0, 0.0, 0.0],
            noise: 0.0,
            ..SynthSpec::default()
        };
        let (m, imgs) = generate_raw(&spec, Task::Target).unwrap();
        // One sample per class: each class mean is the sample itself.
        for (i, img) in imgs.iter().enumerate() {
            let nearest = (0..imgs.len())
                .min_by(|&a, &b| {
                    let da: f64 = imgs[a].data().iter().zip(img.data()).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = imgs[b].data().iter().zip(img.data()).map(|(x, y)| (x - y).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(m.items[nearest].label, m.items[i].label);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let (m, _) = generate_raw(&small(), Task::Source).unwrap();
        let mut paths: Vec<&str> = m.items.iter().map(|i| i.path.as_str()).collect();
        let n = paths.len();
        paths.sort();
        paths.dedup();
        assert_eq!(paths.len(), n);
        for split in [Split::Train, Split::Val, Split::Test] {
            assert!(!m.indices(split).is_empty());
        }
    }
}
