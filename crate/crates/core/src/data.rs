//! Dataset manifests, GXB1 raster loading and the synthetic scene generator.
//!
//! A manifest is a JSON document:
//!
//! ```text
//! {
//!   "name": "synthetic-cls",            (optional)
//!   "task": "classification" | "multilabel" | "segmentation" | "change-detection",
//!   "num_classes": 4,
//!   "metric": "accuracy",               (optional; see metrics::registry)
//!   "bands": ["B2", ...],
//!   "splits": { "train": [ { "bands": {"B2": "train/00000_B2.gxb1", ...},
//!                            "after_bands": {...},      (change-detection only)
//!                            "label": 3 | [0, 2] | "train/00000_mask.gxb1" } ],
//!               "val": [...], "test": [...] },
//!   "stats": { "B2": {"mean": 0.0, "std": 1.0}, ... }
//! }
//! ```
//!
//! Paths are relative to the manifest's directory. Multilabel labels list the
//! indices of present labels. Masks are GXB1 tensors of shape `[H, W]` holding
//! class indices; for change detection `bands` is the "before" raster.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bands::{
    compute_stats, normalize_clip, sar_magnitude_db, BandId, ChannelStack, Modality,
    NormalizationStats,
};
use crate::error::{Error, Result};
use crate::numeric::tensor::{read_gxb1, write_gxb1};
use crate::numeric::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Classification,
    Multilabel,
    Segmentation,
    ChangeDetection,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Multilabel => "multilabel",
            TaskKind::Segmentation => "segmentation",
            TaskKind::ChangeDetection => "change-detection",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classification" | "cls" => Ok(Self::Classification),
            "multilabel" => Ok(Self::Multilabel),
            "segmentation" | "seg" => Ok(Self::Segmentation),
            "change-detection" | "cd" => Ok(Self::ChangeDetection),
            other => Err(Error::UnknownName {
                kind: "task",
                name: other.to_string(),
            }),
        }
    }

    pub fn is_dense(self) -> bool {
        matches!(self, TaskKind::Segmentation | TaskKind::ChangeDetection)
    }

    /// Metric used when neither the manifest nor the dataset name pins one.
    pub fn default_metric(self) -> &'static str {
        match self {
            TaskKind::Classification => "accuracy",
            TaskKind::Multilabel => "f1_multilabel",
            TaskKind::Segmentation => "miou",
            TaskKind::ChangeDetection => "f1",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Evaluation metric assigned to each benchmark dataset.
pub const BENCHMARK_METRICS: [(&str, &str); 10] = [
    ("x-bigearthnet", "f1_multilabel"),
    ("x-so2sat", "accuracy"),
    ("x-eurosat", "accuracy"),
    ("x-brick-kiln", "accuracy"),
    ("x-cashew-plantation", "miou"),
    ("x-SA-crop-type", "miou"),
    ("x-sen1floods11", "miou"),
    ("x-harvey-building", "biou"),
    ("x-harvey-flood", "biou"),
    ("x-oscd", "f1"),
];

pub fn benchmark_metric(dataset: &str) -> Option<&'static str> {
    BENCHMARK_METRICS
        .iter()
        .find(|(d, _)| d.eq_ignore_ascii_case(dataset))
        .map(|(_, m)| *m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelRef {
    Class(usize),
    Labels(Vec<usize>),
    Mask(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub bands: BTreeMap<BandId, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after_bands: Option<BTreeMap<BandId, String>>,
    pub label: LabelRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub task: TaskKind,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<String>,
    pub bands: Vec<BandId>,
    pub splits: BTreeMap<Split, Vec<SampleRecord>>,
    #[serde(default)]
    pub stats: NormalizationStats,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate_structure()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            fs::create_dir_all(d)?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    fn validate_structure(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Data("num_classes must be positive".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (split, recs) in &self.splits {
            for r in recs {
                let key: Vec<&String> = r.bands.values().collect();
                if !seen.insert(format!("{key:?}")) {
                    return Err(Error::Data(format!(
                        "sample {key:?} appears twice (split {})",
                        split.as_str()
                    )));
                }
                if self.task == TaskKind::ChangeDetection && r.after_bands.is_none() {
                    return Err(Error::Data("change-detection sample without after_bands".into()));
                }
            }
        }
        self.stats.validate()
    }

    pub fn metric_name(&self) -> String {
        self.metric
            .clone()
            .or_else(|| self.name.as_deref().and_then(benchmark_metric).map(String::from))
            .unwrap_or_else(|| self.task.default_metric().to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskPayload {
    Class(usize),
    MultiLabel(Vec<bool>),
    Mask(Vec<usize>),
    Change { after: ChannelStack, mask: Vec<usize> },
}

/// A co-registered raster (normalized) with its task label.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub raster: ChannelStack,
    pub payload: TaskPayload,
}

impl SceneSample {
    pub fn class(&self) -> Option<usize> {
        match self.payload {
            TaskPayload::Class(c) => Some(c),
            _ => None,
        }
    }
}

/// A manifest with every split decoded and normalized.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub manifest: DatasetManifest,
    pub splits: BTreeMap<Split, Vec<SceneSample>>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[SceneSample] {
        self.splits.get(&s).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn task(&self) -> TaskKind {
        self.manifest.task
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn metric_name(&self) -> String {
        self.manifest.metric_name()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        Split::ALL
            .iter()
            .flat_map(|s| self.split(*s).first())
            .map(|s| (s.raster.height, s.raster.width))
            .next()
    }

    /// Loads a manifest and its files. Missing statistics are computed on
    /// the training split and reused for every split.
    /// Loads a manifest file, or `manifest.json` inside a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let joined;
        let path = if path.is_dir() {
            joined = path.join("manifest.json");
            joined.as_path()
        } else {
            path
        };
        let mut manifest = DatasetManifest::load(path)?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let raw = load_raw_splits(&manifest, &root)?;
        if manifest.stats.bands.is_empty() {
            manifest.stats = train_stats(&raw)?;
        }
        let name = manifest.name.clone().unwrap_or_else(|| {
            path.parent()
                .and_then(|p| p.file_name())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        });
        Self::from_raw(name, manifest, raw)
    }

    pub fn from_raw(
        name: String,
        manifest: DatasetManifest,
        raw: BTreeMap<Split, Vec<SceneSample>>,
    ) -> Result<Self> {
        let splits = raw
            .into_iter()
            .map(|(s, samples)| {
                let norm = samples
                    .into_iter()
                    .map(|smp| normalize_sample(smp, &manifest.stats))
                    .collect::<Result<Vec<_>>>()?;
                Ok((s, norm))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            name,
            manifest,
            splits,
        })
    }
}

fn normalize_stack(stack: ChannelStack, stats: &NormalizationStats) -> Result<ChannelStack> {
    let planes = stack
        .bands
        .iter()
        .zip(&stack.planes)
        .map(|(&b, p)| normalize_clip(p, stats.get(b)?))
        .collect::<Result<Vec<_>>>()?;
    ChannelStack::new(stack.bands, stack.height, stack.width, planes)
}

fn normalize_sample(s: SceneSample, stats: &NormalizationStats) -> Result<SceneSample> {
    let raster = normalize_stack(s.raster, stats)?;
    let payload = match s.payload {
        TaskPayload::Change { after, mask } => TaskPayload::Change {
            after: normalize_stack(after, stats)?,
            mask,
        },
        p => p,
    };
    Ok(SceneSample { raster, payload })
}

/// Statistics over all training rasters (both images of change pairs).
pub fn train_stats(raw: &BTreeMap<Split, Vec<SceneSample>>) -> Result<NormalizationStats> {
    let train = raw.get(&Split::Train).map(Vec::as_slice).unwrap_or(&[]);
    let mut planes: Vec<(BandId, &[f64])> = Vec::new();
    for s in train {
        for (b, p) in s.raster.bands.iter().zip(&s.raster.planes) {
            planes.push((*b, p.as_slice()));
        }
        if let TaskPayload::Change { after, .. } = &s.payload {
            for (b, p) in after.bands.iter().zip(&after.planes) {
                planes.push((*b, p.as_slice()));
            }
        }
    }
    compute_stats(planes)
}

fn read_plane(path: &Path) -> Result<Tensor> {
    let mut f = fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_gxb1(&mut std::io::BufReader::new(&mut f))
}

fn load_stack(files: &BTreeMap<BandId, String>, root: &Path) -> Result<ChannelStack> {
    let mut bands = Vec::new();
    let mut planes = Vec::new();
    let mut hw = None;
    for b in BandId::ALL {
        let Some(rel) = files.get(&b) else { continue };
        let t = read_plane(&root.join(rel))?;
        let (h, w) = match t.shape() {
            [h, w] => (*h, *w),
            s => return Err(Error::Data(format!("{rel}: expected [H, W], got {s:?}"))),
        };
        if *hw.get_or_insert((h, w)) != (h, w) {
            return Err(Error::Data(format!("{rel}: plane size differs from other bands")));
        }
        bands.push(b);
        planes.push(t.into_data());
    }
    let (h, w) = hw.ok_or_else(|| Error::Data("sample without bands".into()))?;
    ChannelStack::new(bands, h, w, planes)
}

fn load_raw_splits(
    m: &DatasetManifest,
    root: &Path,
) -> Result<BTreeMap<Split, Vec<SceneSample>>> {
    let mut out = BTreeMap::new();
    for (split, recs) in &m.splits {
        let mut samples = Vec::with_capacity(recs.len());
        for r in recs {
            let raster = load_stack(&r.bands, root)?;
            let mask = |rel: &str| -> Result<Vec<usize>> {
                let t = read_plane(&root.join(rel))?;
                if t.shape() != [raster.height, raster.width] {
                    return Err(Error::Data(format!("{rel}: mask size differs from raster")));
                }
                let vals: Vec<usize> = t.data().iter().map(|&v| v.round() as usize).collect();
                if vals.iter().any(|&v| v >= m.num_classes) {
                    return Err(Error::Data(format!("{rel}: mask class out of range")));
                }
                Ok(vals)
            };
            let payload = match (m.task, &r.label) {
                (TaskKind::Classification, LabelRef::Class(c)) if *c < m.num_classes => {
                    TaskPayload::Class(*c)
                }
                (TaskKind::Multilabel, LabelRef::Labels(ls)) => {
                    let mut bits = vec![false; m.num_classes];
                    for &l in ls {
                        *bits
                            .get_mut(l)
                            .ok_or_else(|| Error::Data(format!("label {l} out of range")))? = true;
                    }
                    TaskPayload::MultiLabel(bits)
                }
                (TaskKind::Segmentation, LabelRef::Mask(p)) => TaskPayload::Mask(mask(p)?),
                (TaskKind::ChangeDetection, LabelRef::Mask(p)) => {
                    let after = load_stack(r.after_bands.as_ref().expect("validated"), root)?;
                    if (after.height, after.width) != (raster.height, raster.width) {
                        return Err(Error::Data("before/after sizes differ".into()));
                    }
                    TaskPayload::Change {
                        after,
                        mask: mask(p)?,
                    }
                }
                (task, label) => {
                    return Err(Error::Data(format!("label {label:?} invalid for task {task}")))
                }
            };
            samples.push(SceneSample { raster, payload });
        }
        out.insert(*split, samples);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic scenes

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub size: usize,
    pub num_classes: usize,
    /// How strongly the NIR/SWIR and SAR planes follow the latent scene.
    pub rho: f64,
    pub noise: f64,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            size: 32,
            num_classes: 4,
            rho: 1.0,
            noise: 0.05,
            seed: 0,
            train: 128,
            val: 64,
            test: 64,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self, task: TaskKind) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Parameter(format!("rho {} outside [0, 1]", self.rho)));
        }
        if self.size < 4 || !(self.noise >= 0.0) {
            return Err(Error::Parameter("synthetic size must be >= 4 and noise >= 0".into()));
        }
        let min_classes = if task == TaskKind::ChangeDetection { 2 } else { 1 };
        if self.num_classes < min_classes.max(2) && task != TaskKind::Multilabel {
            return Err(Error::Parameter("at least two classes required".into()));
        }
        if self.train == 0 {
            return Err(Error::Parameter("empty training split".into()));
        }
        Ok(())
    }
}

/// Bands whose content is `rho·latent + (1−rho)·noise`.
pub fn is_cross_band(b: BandId) -> bool {
    matches!(b, BandId::B8A | BandId::B11 | BandId::B12 | BandId::VV | BandId::VH)
}

/// Fixed per-(material, band) signature perturbation in [-1, 1].
fn signature_jitter(material: usize, band: BandId) -> f64 {
    let mut h = (material as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (band.index() as u64 + 7).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 29;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 32;
    (h % 2001) as f64 / 1000.0 - 1.0
}

/// Latent intensity of a material; background is 0.
fn material_level(material: usize, materials: usize) -> f64 {
    material as f64 / materials.max(1) as f64
}

struct Scene {
    material: Vec<usize>,
}

fn draw_shape(rng: &mut ChaCha8Rng, scene: &mut Scene, size: usize, material: usize) {
    let min = (size / 5).max(2);
    let max = (size / 2).max(min + 1);
    let s = rng.gen_range(min..=max);
    let y0 = rng.gen_range(0..=size - s.min(size));
    let x0 = rng.gen_range(0..=size - s.min(size));
    let disc = rng.gen_bool(0.5);
    let c = (s as f64 - 1.0) / 2.0;
    for y in 0..s {
        for x in 0..s {
            let inside = !disc || {
                let (dy, dx) = (y as f64 - c, x as f64 - c);
                dy * dy + dx * dx <= (c + 0.5) * (c + 0.5)
            };
            if inside {
                scene.material[(y0 + y) * size + x0 + x] = material;
            }
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Renders the 12 raw bands of a latent scene.
fn render(rng: &mut ChaCha8Rng, scene: &Scene, cfg: &SyntheticConfig, materials: usize) -> ChannelStack {
    let n = cfg.size * cfg.size;
    let mut planes = Vec::with_capacity(12);
    for b in BandId::ALL {
        let mut plane = Vec::with_capacity(n);
        for &m in &scene.material {
            let level = material_level(m, materials);
            let unit = if is_cross_band(b) {
                let u: f64 = rng.gen();
                cfg.rho * level + (1.0 - cfg.rho) * u
            } else {
                level * (1.0 + 0.15 * signature_jitter(m, b))
            };
            let unit = unit + cfg.noise * gauss(rng);
            let v = match b.modality() {
                Modality::Optical => 500.0 + 3000.0 * unit,
                Modality::Sar => {
                    let db = -25.0 + 20.0 * unit;
                    let amp = 10f64.powf(db / 20.0);
                    let phase = rng.gen::<f64>() * std::f64::consts::TAU;
                    sar_magnitude_db(amp * phase.cos(), amp * phase.sin())
                }
            };
            plane.push(v);
        }
        planes.push(plane);
    }
    ChannelStack::new(BandId::ALL.to_vec(), cfg.size, cfg.size, planes).expect("consistent")
}

fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let s = seed
        .wrapping_mul(0x2545_F491_4F6C_DD1D)
        .wrapping_add((split as u64 + 1) << 40)
        .wrapping_add(index as u64);
    ChaCha8Rng::seed_from_u64(s)
}

fn synth_sample(cfg: &SyntheticConfig, task: TaskKind, rng: &mut ChaCha8Rng) -> SceneSample {
    let size = cfg.size;
    let k = cfg.num_classes;
    let mut scene = Scene {
        material: vec![0; size * size],
    };
    match task {
        TaskKind::Classification => {
            let label = rng.gen_range(0..k);
            for _ in 0..rng.gen_range(1..=2) {
                draw_shape(rng, &mut scene, size, label + 1);
            }
            SceneSample {
                raster: render(rng, &scene, cfg, k),
                payload: TaskPayload::Class(label),
            }
        }
        TaskKind::Multilabel => {
            let mut present = vec![false; k];
            present[rng.gen_range(0..k)] = true;
            for p in present.iter_mut() {
                *p |= rng.gen_bool(0.3);
            }
            for (m, _) in present.iter().enumerate().filter(|(_, p)| **p) {
                draw_shape(rng, &mut scene, size, m + 1);
            }
            // labels reflect what survived occlusion
            let mut visible = vec![false; k];
            for &m in &scene.material {
                if m > 0 {
                    visible[m - 1] = true;
                }
            }
            SceneSample {
                raster: render(rng, &scene, cfg, k),
                payload: TaskPayload::MultiLabel(visible),
            }
        }
        TaskKind::Segmentation => {
            for _ in 0..rng.gen_range(2..=4) {
                let m = rng.gen_range(1..k);
                draw_shape(rng, &mut scene, size, m);
            }
            let mask = scene.material.clone();
            SceneSample {
                raster: render(rng, &scene, cfg, k - 1),
                payload: TaskPayload::Mask(mask),
            }
        }
        TaskKind::ChangeDetection => {
            let materials = 4;
            for _ in 0..rng.gen_range(1..=3) {
                let m = rng.gen_range(1..=materials);
                draw_shape(rng, &mut scene, size, m);
            }
            let before = render(rng, &scene, cfg, materials);
            let mut after_scene = Scene {
                material: scene.material.clone(),
            };
            for _ in 0..rng.gen_range(1..=2) {
                let m = rng.gen_range(1..=materials);
                draw_shape(rng, &mut after_scene, size, m);
            }
            let mask = scene
                .material
                .iter()
                .zip(&after_scene.material)
                .map(|(a, b)| usize::from(a != b))
                .collect();
            let after = render(rng, &after_scene, cfg, materials);
            SceneSample {
                raster: before,
                payload: TaskPayload::Change { after, mask },
            }
        }
    }
}

/// Generates raw (unnormalized) splits in memory; a pure function of the config.
pub fn synthesize(cfg: &SyntheticConfig, task: TaskKind) -> Result<BTreeMap<Split, Vec<SceneSample>>> {
    cfg.validate(task)?;
    let mut out = BTreeMap::new();
    for (split, n) in [(Split::Train, cfg.train), (Split::Val, cfg.val), (Split::Test, cfg.test)] {
        let samples = (0..n)
            .map(|i| synth_sample(cfg, task, &mut sample_rng(cfg.seed, split, i)))
            .collect();
        out.insert(split, samples);
    }
    Ok(out)
}

fn synthetic_manifest(
    name: &str,
    cfg: &SyntheticConfig,
    task: TaskKind,
    stats: NormalizationStats,
) -> DatasetManifest {
    DatasetManifest {
        name: Some(name.to_string()),
        task,
        num_classes: if task == TaskKind::ChangeDetection { 2 } else { cfg.num_classes },
        metric: None,
        bands: BandId::ALL.to_vec(),
        splits: BTreeMap::new(),
        stats,
    }
}

/// Builds a normalized in-memory synthetic dataset (no files).
pub fn synthetic_dataset(name: &str, cfg: &SyntheticConfig, task: TaskKind) -> Result<Dataset> {
    let raw = synthesize(cfg, task)?;
    let stats = train_stats(&raw)?;
    let manifest = synthetic_manifest(name, cfg, task, stats);
    Dataset::from_raw(name.to_string(), manifest, raw)
}

fn write_plane(path: &Path, h: usize, w: usize, data: Vec<f64>) -> Result<()> {
    let t = Tensor::new(vec![h, w], data)?;
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_gxb1(&mut f, &t)?;
    Ok(())
}

fn write_stack(dir: &Path, rel_dir: &str, stem: &str, stack: &ChannelStack) -> Result<BTreeMap<BandId, String>> {
    let mut refs = BTreeMap::new();
    for (b, p) in stack.bands.iter().zip(&stack.planes) {
        let rel = format!("{rel_dir}/{stem}_{b}.gxb1");
        write_plane(&dir.join(&rel), stack.height, stack.width, p.clone())?;
        refs.insert(*b, rel);
    }
    Ok(refs)
}

/// Writes a synthetic dataset (GXB1 planes + `manifest.json`) under `out`.
pub fn generate_synthetic(cfg: &SyntheticConfig, task: TaskKind, out: &Path) -> Result<PathBuf> {
    let raw = synthesize(cfg, task)?;
    let stats = train_stats(&raw)?;
    let name = out
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("synthetic-{task}"));
    let mut manifest = synthetic_manifest(&name, cfg, task, stats);
    for (split, samples) in &raw {
        let rel_dir = split.as_str();
        fs::create_dir_all(out.join(rel_dir))?;
        let mut recs = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let stem = format!("{i:05}");
            let bands = write_stack(out, rel_dir, &stem, &s.raster)?;
            let mut after_bands = None;
            let label = match &s.payload {
                TaskPayload::Class(c) => LabelRef::Class(*c),
                TaskPayload::MultiLabel(bits) => LabelRef::Labels(
                    bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect(),
                ),
                TaskPayload::Mask(m) => {
                    let rel = format!("{rel_dir}/{stem}_mask.gxb1");
                    write_plane(&out.join(&rel), cfg.size, cfg.size, m.iter().map(|&v| v as f64).collect())?;
                    LabelRef::Mask(rel)
                }
                TaskPayload::Change { after, mask } => {
                    after_bands = Some(write_stack(out, rel_dir, &format!("{stem}_after"), after)?);
                    let rel = format!("{rel_dir}/{stem}_mask.gxb1");
                    write_plane(&out.join(&rel), cfg.size, cfg.size, mask.iter().map(|&v| v as f64).collect())?;
                    LabelRef::Mask(rel)
                }
            };
            recs.push(SampleRecord {
                bands,
                after_bands,
                label,
            });
        }
        manifest.splits.insert(*split, recs);
    }
    let path = out.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            size: 16,
            train: 6,
            val: 2,
            test: 2,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn synthesis_is_pure() {
        let a = synthesize(&small(3), TaskKind::Classification).unwrap();
        let b = synthesize(&small(3), TaskKind::Classification).unwrap();
        assert_eq!(a, b);
        let c = synthesize(&small(4), TaskKind::Classification).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rho_one_noise_zero_makes_sar_a_function_of_material() {
        let cfg = SyntheticConfig {
            noise: 0.0,
            ..small(1)
        };
        let raw = synthesize(&cfg, TaskKind::Segmentation).unwrap();
        for s in &raw[&Split::Train] {
            let TaskPayload::Mask(mask) = &s.payload else { panic!() };
            let vv = s.raster.plane(BandId::VV).unwrap();
            let b4 = s.raster.plane(BandId::B4).unwrap();
            let mut seen: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
            for ((&m, &v), &r) in mask.iter().zip(vv).zip(b4) {
                let e = seen.entry(m).or_insert((v, r));
                assert!((e.0 - v).abs() < 1e-6 && (e.1 - r).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn files_round_trip_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        for task in [
            TaskKind::Classification,
            TaskKind::Multilabel,
            TaskKind::Segmentation,
            TaskKind::ChangeDetection,
        ] {
            let out = dir.path().join(task.as_str());
            let path = generate_synthetic(&small(9), task, &out).unwrap();
            let ds = Dataset::load(&path).unwrap();
            assert_eq!(ds.split(Split::Train).len(), 6);
            assert_eq!(ds.task(), task);
            for s in ds.split(Split::Test) {
                assert!(s.raster.planes.iter().flatten().all(|v| (-3.0..=3.0).contains(v)));
            }
            let mem = synthetic_dataset(&ds.name, &small(9), task).unwrap();
            // files hold f32, so compare loosely
            let a = &ds.split(Split::Val)[0].raster.planes[0];
            let b = &mem.split(Split::Val)[0].raster.planes[0];
            assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-3));
        }
        let p1 = dir.path().join("again");
        generate_synthetic(&small(9), TaskKind::Segmentation, &p1).unwrap();
        let m1 = fs::read(p1.join("manifest.json")).unwrap();
        let f1 = fs::read(p1.join("train/00002_VH.gxb1")).unwrap();
        let p2 = dir.path().join("again2");
        generate_synthetic(&small(9), TaskKind::Segmentation, &p2).unwrap();
        assert_eq!(f1, fs::read(p2.join("train/00002_VH.gxb1")).unwrap());
        assert_eq!(
            String::from_utf8(m1).unwrap().replace("again", "X"),
            String::from_utf8(fs::read(p2.join("manifest.json")).unwrap())
                .unwrap()
                .replace("again2", "X")
        );
    }

    #[test]
    fn stats_come_from_train_split_only() {
        let mut raw = synthesize(&small(2), TaskKind::Classification).unwrap();
        let st = train_stats(&raw).unwrap();
        for s in raw.get_mut(&Split::Test).unwrap() {
            for p in &mut s.raster.planes {
                p.iter_mut().for_each(|v| *v += 1e6);
            }
        }
        assert_eq!(train_stats(&raw).unwrap(), st);
    }

    #[test]
    fn benchmark_metric_assignment() {
        assert_eq!(benchmark_metric("x-harvey-flood"), Some("biou"));
        assert_eq!(benchmark_metric("x-oscd"), Some("f1"));
        assert_eq!(benchmark_metric("x-bigearthnet"), Some("f1_multilabel"));
        assert_eq!(benchmark_metric("x-sen1floods11"), Some("miou"));
        assert_eq!(benchmark_metric("synthetic"), None);
    }

    #[test]
    fn missing_file_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = generate_synthetic(&small(1), TaskKind::Classification, dir.path()).unwrap();
        fs::remove_file(dir.path().join("train/00000_B2.gxb1")).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Data(_))));
    }
}
