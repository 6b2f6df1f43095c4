//! Self-distillation pretraining with multi-crop views, hierarchical channel
//! sampling and masked patch prediction.
//!
//! Per image, the teacher set `T` is drawn by hierarchical channel sampling
//! over the image's bands and every student view draws its own set from `T`.
//! The EMA teacher encodes the global crops on `T`; the student encodes all
//! crops, with masked global crops. The loss is the CLS distillation loss plus
//! the masked-patch loss, unweighted.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bands::{BandCombination, BandId, ChannelStack};
use crate::data::{synthesize, Dataset, Split, SyntheticConfig, TaskKind};
use crate::error::{Error, Result};
use crate::numeric::bundle::save_bundle;
use crate::numeric::optim::cosine_ramp;
use crate::numeric::{
    ema_update, AdamWConfig, AdamWState, Bound, LrSchedule, ParamSet, Tape, Tensor, Var,
    WarmupCosine, WsdSchedule,
};
use crate::vit::{
    backbone_meta, cls_representation, linear, patch_representations, save_backbone, Backbone,
    BackboneRegistry, EncodeOptions, Encoded, VitConfig,
};

// ---------------------------------------------------------------------------
// Channel sampling and view planning

/// Draws `m` uniformly from `1..=|available|`, then a uniform `m`-subset.
/// The subset keeps the order of `available`.
pub fn hcs_sample<R: Rng + ?Sized>(available: &[BandId], rng: &mut R) -> Result<Vec<BandId>> {
    if available.is_empty() {
        return Err(Error::Parameter("channel sampling from an empty band set".into()));
    }
    let n = available.len();
    let m = rng.gen_range(1..=n);
    let mut idx = sample_indices(rng, n, m).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| available[i]).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewConfig {
    pub global_crops: usize,
    pub local_crops: usize,
    pub global_size: usize,
    pub local_size: usize,
    /// Area fraction ranges of the source image.
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    /// Hierarchical channel sampling of the teacher set; off keeps every band.
    pub channel_sampling: bool,
    /// Student sets drawn from the teacher set; off draws them from all bands.
    pub subset_sampling: bool,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            global_crops: 2,
            local_crops: 8,
            global_size: 32,
            local_size: 16,
            global_scale: (0.25, 1.0),
            local_scale: (0.05, 0.25),
            channel_sampling: true,
            subset_sampling: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropGeometry {
    pub y0: f64,
    pub x0: f64,
    /// Side of the square source region, in pixels.
    pub side: f64,
    pub out_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSpec {
    pub global: bool,
    pub crop: CropGeometry,
    pub bands: Vec<BandId>,
}

/// Teacher channel set plus every student view (globals first).
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPlan {
    pub teacher_bands: Vec<BandId>,
    pub views: Vec<ViewSpec>,
}

impl ViewPlan {
    pub fn globals(&self) -> impl Iterator<Item = &ViewSpec> {
        self.views.iter().filter(|v| v.global)
    }
}

fn sample_crop<R: Rng + ?Sized>(
    rng: &mut R,
    h: usize,
    w: usize,
    scale: (f64, f64),
    out_size: usize,
) -> CropGeometry {
    let lim = h.min(w) as f64;
    let s = if scale.1 > scale.0 { rng.gen_range(scale.0..=scale.1) } else { scale.0 };
    let side = ((s * (h * w) as f64).sqrt()).clamp(1.0, lim);
    let y0 = rng.gen::<f64>() * (h as f64 - side);
    let x0 = rng.gen::<f64>() * (w as f64 - side);
    CropGeometry {
        y0,
        x0,
        side,
        out_size,
    }
}

/// Samples crop geometry and channel sets for one image.
pub fn plan_views<R: Rng + ?Sized>(
    bands: &[BandId],
    height: usize,
    width: usize,
    cfg: &ViewConfig,
    rng: &mut R,
) -> Result<ViewPlan> {
    if bands.is_empty() {
        return Err(Error::Parameter("cannot plan views for an image without bands".into()));
    }
    let teacher_bands = if cfg.channel_sampling {
        hcs_sample(bands, rng)?
    } else {
        bands.to_vec()
    };
    let mut views = Vec::with_capacity(cfg.global_crops + cfg.local_crops);
    for i in 0..cfg.global_crops + cfg.local_crops {
        let global = i < cfg.global_crops;
        let crop = if global {
            sample_crop(rng, height, width, cfg.global_scale, cfg.global_size)
        } else {
            sample_crop(rng, height, width, cfg.local_scale, cfg.local_size)
        };
        let bands = match (cfg.channel_sampling, cfg.subset_sampling) {
            (false, _) => teacher_bands.clone(),
            (true, true) => hcs_sample(&teacher_bands, rng)?,
            (true, false) => hcs_sample(bands, rng)?,
        };
        views.push(ViewSpec { global, crop, bands });
    }
    Ok(ViewPlan {
        teacher_bands,
        views,
    })
}

/// Bilinear resample of the crop region to `out_size × out_size`.
pub fn resized_crop(stack: &ChannelStack, bands: &[BandId], crop: &CropGeometry) -> Result<ChannelStack> {
    let n = crop.out_size;
    let (h, w) = (stack.height, stack.width);
    let step = crop.side / n as f64;
    let coord = |origin: f64, i: usize, max: usize| -> (usize, usize, f64) {
        let c = (origin + (i as f64 + 0.5) * step - 0.5).clamp(0.0, (max - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(max - 1);
        (lo, hi, c - lo as f64)
    };
    let ys: Vec<_> = (0..n).map(|i| coord(crop.y0, i, h)).collect();
    let xs: Vec<_> = (0..n).map(|i| coord(crop.x0, i, w)).collect();
    let mut planes = Vec::with_capacity(bands.len());
    for &b in bands {
        let src = stack
            .plane(b)
            .ok_or_else(|| Error::UnavailableBand(vec![b.to_string()]))?;
        let mut out = Vec::with_capacity(n * n);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
        planes.push(out);
    }
    ChannelStack::new(bands.to_vec(), n, n, planes)
}

/// Positional-embedding window under a crop: the crop centre mapped onto the
/// grid, clamped so the window fits.
pub fn pos_window(crop: &CropGeometry, image: (usize, usize), patch: usize, grid: usize) -> (usize, usize) {
    let g = crop.out_size / patch;
    let place = |origin: f64, extent: usize| -> usize {
        let centre = (origin + crop.side / 2.0) / extent as f64 * grid as f64;
        let start = (centre - g as f64 / 2.0).round();
        start.clamp(0.0, grid.saturating_sub(g) as f64) as usize
    };
    (place(crop.y0, image.0), place(crop.x0, image.1))
}

// ---------------------------------------------------------------------------
// Masking

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// Chance that a student global view is masked at all.
    pub probability: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            ratio_min: 0.1,
            ratio_max: 0.5,
            probability: 0.5,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.ratio_min && self.ratio_min <= self.ratio_max && self.ratio_max < 1.0) {
            return Err(Error::Parameter("mask ratios must satisfy 0 <= min <= max < 1".into()));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Parameter("mask probability must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Spatial mask of one global view; masked locations cover every channel.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub grid: (usize, usize),
    pub spatial: Vec<bool>,
    pub ratio: f64,
}

impl MaskPlan {
    pub fn none(grid: (usize, usize)) -> Self {
        Self {
            grid,
            spatial: vec![false; grid.0 * grid.1],
            ratio: 0.0,
        }
    }

    pub fn masked_count(&self) -> usize {
        self.spatial.iter().filter(|&&m| m).count()
    }

    pub fn fraction(&self) -> f64 {
        self.masked_count() as f64 / self.spatial.len() as f64
    }

    /// Token-row mask (CLS first) for `blocks` channel blocks.
    pub fn token_mask(&self, blocks: usize) -> Vec<bool> {
        let mut m = Vec::with_capacity(1 + blocks * self.spatial.len());
        m.push(false);
        for _ in 0..blocks {
            m.extend_from_slice(&self.spatial);
        }
        m
    }
}

/// Rectangles with random aspect ratio are added until the masked
/// count reaches `round(r·N_p)`, clamped to the configured fraction range.
pub fn block_mask<R: Rng + ?Sized>(grid: (usize, usize), cfg: &MaskConfig, rng: &mut R) -> MaskPlan {
    let (gh, gw) = grid;
    let n = gh * gw;
    let ratio = if cfg.ratio_max > cfg.ratio_min {
        rng.gen_range(cfg.ratio_min..=cfg.ratio_max)
    } else {
        cfg.ratio_min
    };
    let lo = (cfg.ratio_min * n as f64).ceil() as usize;
    let hi = ((cfg.ratio_max * n as f64).floor() as usize).max(lo);
    let target = ((ratio * n as f64).round() as usize).clamp(lo, hi).min(n);
    let mut spatial = vec![false; n];
    let mut count = 0;
    let mut tries = 0;
    while count < target && tries < 100 {
        tries += 1;
        let remaining = target - count;
        let area = rng.gen_range(1..=remaining.max(1)) as f64;
        let aspect = (rng.gen_range((0.3f64).ln()..=(1.0 / 0.3f64).ln())).exp();
        let bh = ((area * aspect).sqrt().round() as usize).clamp(1, gh);
        let bw = ((area / aspect).sqrt().round() as usize).clamp(1, gw);
        let y0 = rng.gen_range(0..=gh - bh);
        let x0 = rng.gen_range(0..=gw - bw);
        let mut cells: Vec<usize> = Vec::new();
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                if !spatial[y * gw + x] {
                    cells.push(y * gw + x);
                }
            }
        }
        if cells.is_empty() || count + cells.len() > target {
            continue;
        }
        for c in cells {
            spatial[c] = true;
            count += 1;
        }
    }
    // fill any remainder patch by patch
    while count < target {
        let i = rng.gen_range(0..n);
        if !spatial[i] {
            spatial[i] = true;
            count += 1;
        }
    }
    MaskPlan {
        grid,
        spatial,
        ratio,
    }
}

// ---------------------------------------------------------------------------
// Losses

/// `softmax((logits − center) / t)` row-wise.
pub fn teacher_targets(logits: &Tensor, center: &[f64], t: f64) -> Result<Tensor> {
    let (_, k) = logits.as_matrix();
    if center.len() != k {
        return Err(Error::Contract(format!(
            "center has {} entries for {k} prototypes",
            center.len()
        )));
    }
    let mut c = logits.clone();
    for row in c.data_mut().chunks_mut(k) {
        row.iter_mut().zip(center).for_each(|(v, m)| *v -= m);
    }
    c.softmax(t)
}

/// Mean soft cross-entropy over every `(teacher global g, student view v)`
/// pair with `v ≠ g`. Student views `0..targets.len()` are the global views.
pub fn dino_cls_loss(
    tape: &mut Tape,
    targets: &[Tensor],
    student_logits: &[Var],
    t_student: f64,
) -> Result<Var> {
    if targets.is_empty() || student_logits.len() < targets.len() {
        return Err(Error::Contract(format!(
            "{} teacher views and {} student views",
            targets.len(),
            student_logits.len()
        )));
    }
    let mut terms = Vec::new();
    for (g, target) in targets.iter().enumerate() {
        for (v, &s) in student_logits.iter().enumerate() {
            if v == g {
                continue;
            }
            if tape.shape(s) != target.shape() {
                return Err(Error::Contract(format!(
                    "student {:?} vs teacher {:?} prototypes",
                    tape.shape(s),
                    target.shape()
                )));
            }
            terms.push(tape.soft_cross_entropy(target, s, t_student)?);
        }
    }
    if terms.is_empty() {
        return Err(Error::Contract("no (teacher, student) view pairs".into()));
    }
    let n = terms.len() as f64;
    let stacked = tape.concat_rows(&terms)?;
    let s = tape.sum(stacked);
    Ok(tape.scale(s, 1.0 / n))
}

/// Number of view pairs the CLS loss averages over.
pub fn cls_pair_count(globals: usize, views: usize) -> usize {
    (0..globals).map(|g| (0..views).filter(|&v| v != g).count()).sum()
}

/// Soft cross-entropy averaged over masked token rows only; zero when nothing
/// is masked. Rows are aligned between teacher and student; row 0 is CLS.
pub fn mim_patch_loss(
    tape: &mut Tape,
    teacher_probs: &Tensor,
    student_logits: Var,
    token_mask: &[bool],
    t_student: f64,
) -> Result<Var> {
    if token_mask.first() == Some(&true) {
        return Err(Error::Contract("the CLS token cannot be masked".into()));
    }
    let (rows, _) = teacher_probs.as_matrix();
    if token_mask.len() != rows || tape.shape(student_logits) != teacher_probs.shape() {
        return Err(Error::Contract(format!(
            "mask of {} rows for teacher {:?} and student {:?}",
            token_mask.len(),
            teacher_probs.shape(),
            tape.shape(student_logits)
        )));
    }
    let ids: Vec<usize> = (0..rows).filter(|&i| token_mask[i]).collect();
    if ids.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let k = teacher_probs.as_matrix().1;
    let mut t = Vec::with_capacity(ids.len() * k);
    for &i in &ids {
        t.extend_from_slice(teacher_probs.row(i));
    }
    let t = Tensor::new(vec![ids.len(), k], t)?;
    let s = tape.gather_rows(student_logits, &ids)?;
    tape.soft_cross_entropy(&t, s, t_student)
}

/// `cls + mim`, rejecting non-finite parts.
pub fn total_loss(cls: f64, mim: f64) -> Result<f64> {
    if !cls.is_finite() || !mim.is_finite() {
        return Err(Error::Training {
            param: "loss".into(),
            reason: format!("non-finite loss components cls={cls} mim={mim}"),
        });
    }
    Ok(cls + mim)
}

/// `center ← m·center + (1−m)·mean(rows of outputs)`.
pub fn teacher_center_update(center: &[f64], outputs: &Tensor, momentum: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Parameter(format!("center momentum {momentum} outside [0, 1]")));
    }
    let mean = outputs.mean_rows();
    if mean.numel() != center.len() {
        return Err(Error::Contract("center and outputs differ in width".into()));
    }
    Ok(center
        .iter()
        .zip(mean.data())
        .map(|(c, m)| momentum * c + (1.0 - momentum) * m)
        .collect())
}

// ---------------------------------------------------------------------------
// Projection head

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub prototypes: usize,
    /// One head for CLS and patch tokens; off adds a separate patch head.
    pub shared: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            bottleneck: 64,
            prototypes: 1024,
            shared: true,
        }
    }
}

fn init_head(p: &mut ParamSet, prefix: &str, dim: usize, cfg: &HeadConfig, rng: &mut ChaCha8Rng) {
    let mut lin = |name: &str, i: usize, o: usize, bias: bool, std: f64| {
        p.insert(format!("{prefix}{name}.w"), Tensor::randn(&[i, o], std, rng));
        if bias {
            p.insert(format!("{prefix}{name}.b"), Tensor::zeros(&[o]));
        }
    };
    lin("fc1", dim, cfg.hidden, true, (1.0 / dim as f64).sqrt());
    lin("fc2", cfg.hidden, cfg.hidden, true, (1.0 / cfg.hidden as f64).sqrt());
    lin("fc3", cfg.hidden, cfg.bottleneck, true, (1.0 / cfg.hidden as f64).sqrt());
    lin("last", cfg.bottleneck, cfg.prototypes, false, (1.0 / cfg.bottleneck as f64).sqrt());
}

pub fn new_head(dim: usize, cfg: &HeadConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144);
    let mut p = ParamSet::new();
    init_head(&mut p, "cls.", dim, cfg, &mut rng);
    if !cfg.shared {
        init_head(&mut p, "patch.", dim, cfg, &mut rng);
    }
    p
}

/// MLP, ℓ2-normalized bottleneck, then cosine similarity to unit-norm
/// prototypes (the columns of `last.w`).
pub fn head_forward(tape: &mut Tape, bound: &Bound, which: &str, x: Var) -> Result<Var> {
    let name = |n: &str| format!("{which}.{n}");
    let h = linear(tape, bound, &name("fc1"), x)?;
    let h = tape.gelu(h);
    let h = linear(tape, bound, &name("fc2"), h)?;
    let h = tape.gelu(h);
    let h = linear(tape, bound, &name("fc3"), h)?;
    let h = tape.l2_normalize(h, 1e-12);
    let w = tape.transpose(bound.get(&name("last.w"))?)?;
    let w = tape.l2_normalize(w, 1e-12);
    tape.matmul_nt(h, w)
}

fn patch_head_name(cfg: &HeadConfig) -> &'static str {
    if cfg.shared {
        "cls"
    } else {
        "patch"
    }
}

// ---------------------------------------------------------------------------
// Corpora

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorpusSource {
    /// Synthetic scenes generated in memory.
    Synthetic {
        #[serde(default)]
        config: SyntheticConfig,
        #[serde(default = "default_task")]
        task: TaskKind,
    },
    /// The given split of a dataset manifest.
    Manifest {
        path: PathBuf,
        #[serde(default = "default_split")]
        split: Split,
    },
}

fn default_task() -> TaskKind {
    TaskKind::Segmentation
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub name: String,
    #[serde(default = "one")]
    pub weight: f64,
    /// Paired optical/radar corpus, weighted by the parallel-data coefficient.
    #[serde(default)]
    pub parallel: bool,
    /// Band combination (name or list) available in this corpus; all bands if unset.
    #[serde(default)]
    pub bands: Option<String>,
    pub source: CorpusSource,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainMixConfig {
    pub corpora: Vec<CorpusSpec>,
    /// Parallel-data coefficient λ.
    #[serde(default = "one")]
    pub pdc: f64,
}

impl PretrainMixConfig {
    /// Normalized sampling distribution over corpora.
    pub fn effective_weights(&self) -> Result<Vec<f64>> {
        if self.corpora.is_empty() {
            return Err(Error::Parameter("corpus mix is empty".into()));
        }
        if !(self.pdc > 0.0) {
            return Err(Error::Parameter("parallel-data coefficient must be > 0".into()));
        }
        let raw: Vec<f64> = self
            .corpora
            .iter()
            .map(|c| {
                if !(c.weight > 0.0) || !c.weight.is_finite() {
                    Err(Error::Parameter(format!("corpus {} has weight {}", c.name, c.weight)))
                } else {
                    Ok(c.weight * if c.parallel { self.pdc } else { 1.0 })
                }
            })
            .collect::<Result<_>>()?;
        let total: f64 = raw.iter().sum();
        Ok(raw.into_iter().map(|w| w / total).collect())
    }
}

/// Index of the corpus to draw the next sample from.
pub fn sample_corpus<R: Rng + ?Sized>(mix: &PretrainMixConfig, rng: &mut R) -> Result<usize> {
    let w = mix.effective_weights()?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in w.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(w.len() - 1)
}

/// Loaded images of one corpus, already restricted to its bands.
pub struct Corpus {
    pub name: String,
    pub images: Vec<ChannelStack>,
}

pub fn load_corpora(mix: &PretrainMixConfig, base: &Path) -> Result<Vec<Corpus>> {
    mix.corpora
        .iter()
        .map(|spec| {
            let stacks: Vec<ChannelStack> = match &spec.source {
                CorpusSource::Synthetic { config, task } => {
                    let raw = synthesize(config, *task)?;
                    let stats = crate::data::train_stats(&raw)?;
                    let ds = Dataset::from_raw(
                        spec.name.clone(),
                        crate::data::DatasetManifest {
                            name: Some(spec.name.clone()),
                            task: *task,
                            num_classes: config.num_classes.max(2),
                            metric: None,
                            bands: BandId::ALL.to_vec(),
                            splits: Default::default(),
                            stats,
                        },
                        raw,
                    )?;
                    ds.split(Split::Train).iter().map(|s| s.raster.clone()).collect()
                }
                CorpusSource::Manifest { path, split } => {
                    let p = if path.is_absolute() { path.clone() } else { base.join(path) };
                    Dataset::load(&p)?.split(*split).iter().map(|s| s.raster.clone()).collect()
                }
            };
            let images = match &spec.bands {
                Some(b) => {
                    let combo = BandCombination::by_name(b)?;
                    stacks.iter().map(|s| s.select(&combo)).collect::<Result<_>>()?
                }
                None => stacks,
            };
            if images.is_empty() {
                return Err(Error::Data(format!("corpus {} is empty", spec.name)));
            }
            Ok(Corpus {
                name: spec.name.clone(),
                images,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleConfig {
    Wsd(WsdSchedule),
    WarmupCosine(WarmupCosine),
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Box<dyn LrSchedule>> {
        Ok(match self {
            ScheduleConfig::Wsd(s) => {
                s.validate()?;
                Box::new(*s)
            }
            ScheduleConfig::WarmupCosine(s) => Box::new(*s),
        })
    }

    pub fn total(&self) -> f64 {
        match self {
            ScheduleConfig::Wsd(s) => s.total,
            ScheduleConfig::WarmupCosine(s) => s.warmup + s.decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub student_temp: f64,
    pub teacher_temp_start: f64,
    pub teacher_temp_end: f64,
    /// Fraction of the sample budget over which the teacher temperature warms up.
    pub teacher_temp_warmup: f64,
    pub center_momentum: f64,
    pub ema_start: f64,
    pub ema_end: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            student_temp: 0.1,
            teacher_temp_start: 0.04,
            teacher_temp_end: 0.07,
            teacher_temp_warmup: 0.3,
            center_momentum: 0.9,
            ema_start: 0.996,
            ema_end: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn teacher_temp(&self, progress: f64) -> f64 {
        if self.teacher_temp_warmup <= 0.0 || progress >= self.teacher_temp_warmup {
            self.teacher_temp_end
        } else {
            let f = progress / self.teacher_temp_warmup;
            self.teacher_temp_start + (self.teacher_temp_end - self.teacher_temp_start) * f
        }
    }

    pub fn ema_momentum(&self, progress: f64) -> f64 {
        cosine_ramp(self.ema_start, self.ema_end, progress)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    #[serde(default = "default_backbone")]
    pub backbone: String,
    #[serde(default)]
    pub vit: VitConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub views: ViewConfig,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    /// Learning rate over samples seen; the budget is the schedule total.
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub mix: PretrainMixConfig,
    #[serde(default)]
    pub seed: u64,
    /// Steps between checkpoint bundles; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_backbone() -> String {
    "chivit".into()
}

fn default_batch() -> usize {
    8
}

impl PretrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.mask.validate()?;
        self.schedule.build()?;
        self.mix.effective_weights()?;
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        if self.views.global_crops == 0 {
            return Err(Error::Parameter("at least one global crop is required".into()));
        }
        let p = self.vit.patch;
        if self.views.global_size % p != 0 || self.views.local_size % p != 0 {
            return Err(Error::Parameter("crop sizes must be multiples of the patch size".into()));
        }
        if self.views.global_size > self.vit.image_size || self.views.local_size > self.vit.image_size {
            return Err(Error::Parameter("crops larger than the positional grid".into()));
        }
        if !(self.distill.student_temp > 0.0 && self.distill.teacher_temp_start > 0.0) {
            return Err(Error::Parameter("temperatures must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        (self.schedule.total() / self.batch_size as f64).ceil() as usize
    }
}

// ---------------------------------------------------------------------------
// Training state

pub struct Student {
    pub backbone: Box<dyn Backbone>,
    pub head: ParamSet,
}

pub struct TeacherState {
    pub backbone: Box<dyn Backbone>,
    pub head: ParamSet,
    pub center_cls: Vec<f64>,
    pub center_patch: Vec<f64>,
}

/// Values for one step that depend on training progress.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepHyper {
    pub lr: f64,
    pub ema_momentum: f64,
    pub teacher_temp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub samples_seen: u64,
    pub lr: f64,
    pub cls_loss: f64,
    pub mim_loss: f64,
    pub total: f64,
}

struct TeacherOut {
    /// Raw head logits per global view: CLS (1×K) and patches (rows as the encoding).
    cls: Vec<Tensor>,
    patch: Vec<Tensor>,
    blocks: Vec<Vec<Option<BandId>>>,
}

fn teacher_forward(
    teacher: &TeacherState,
    head_cfg: &HeadConfig,
    views: &[(ChannelStack, EncodeOptions)],
) -> Result<TeacherOut> {
    let mut out = TeacherOut {
        cls: Vec::new(),
        patch: Vec::new(),
        blocks: Vec::new(),
    };
    for (stack, opts) in views {
        let mut tape = Tape::new();
        let bb = teacher.backbone.params().bind(&mut tape, false);
        let hb = teacher.head.bind(&mut tape, false);
        let enc = teacher.backbone.encode(&mut tape, &bb, stack, opts)?;
        let c = cls_representation(&mut tape, &enc)?;
        let c = head_forward(&mut tape, &hb, "cls", c)?;
        let p = patch_representations(&mut tape, &enc)?;
        let p = head_forward(&mut tape, &hb, patch_head_name(head_cfg), p)?;
        debug_assert!(!tape.requires_grad(c) && !tape.requires_grad(p));
        out.cls.push(tape.value(c).clone());
        out.patch.push(tape.value(p).clone());
        out.blocks.push(enc.blocks.clone());
    }
    Ok(out)
}

/// Teacher patch targets re-indexed to the student's token rows (row 0 and
/// student blocks absent from the teacher stay uniform and unmasked).
fn align_patch_targets(
    teacher_probs: &Tensor,
    teacher_blocks: &[Option<BandId>],
    student: &Encoded,
    spatial_mask: &[bool],
) -> (Tensor, Vec<bool>) {
    let k = teacher_probs.as_matrix().1;
    let np = student.num_spatial();
    let rows = student.num_tokens();
    let mut data = vec![1.0 / k as f64; rows * k];
    let mut mask = vec![false; rows];
    for (sb, band) in student.blocks.iter().enumerate() {
        let Some(tb) = teacher_blocks.iter().position(|b| b == band) else { continue };
        for j in 0..np {
            let r = student.row(sb, j);
            let tr = tb * np + j;
            data[r * k..(r + 1) * k].copy_from_slice(teacher_probs.row(tr));
            mask[r] = spatial_mask[j];
        }
    }
    (Tensor::new(vec![rows, k], data).expect("sized"), mask)
}

/// Loss terms of one image recorded on `tape`; returns (cls, mim) vars plus
/// the teacher's raw CLS and patch logits for center updates.
#[allow(clippy::too_many_arguments)]
fn image_loss(
    tape: &mut Tape,
    student: &Student,
    sb: &Bound,
    hb: &Bound,
    teacher: &TeacherState,
    cfg: &PretrainConfig,
    hyper: &StepHyper,
    image: &ChannelStack,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Var, Vec<Tensor>, Vec<Tensor>)> {
    let plan = plan_views(&image.bands, image.height, image.width, &cfg.views, rng)?;
    let vit = student.backbone.config();
    let grid = vit.grid();
    let image_hw = (image.height, image.width);

    let mut teacher_views = Vec::new();
    let mut student_views = Vec::new();
    for v in &plan.views {
        let opts = EncodeOptions {
            pos_offset: pos_window(&v.crop, image_hw, vit.patch, grid),
            mask: None,
        };
        if v.global {
            teacher_views.push((resized_crop(image, &plan.teacher_bands, &v.crop)?, opts.clone()));
        }
        student_views.push((resized_crop(image, &v.bands, &v.crop)?, opts));
    }
    let t = teacher_forward(teacher, &cfg.head, &teacher_views)?;
    let d = &cfg.distill;
    let cls_targets: Vec<Tensor> = t
        .cls
        .iter()
        .map(|l| teacher_targets(l, &teacher.center_cls, hyper.teacher_temp))
        .collect::<Result<_>>()?;

    let mut student_cls = Vec::with_capacity(student_views.len());
    let mut mim_terms: Vec<(Var, usize)> = Vec::new();
    for (vi, (stack, opts)) in student_views.iter_mut().enumerate() {
        let global = plan.views[vi].global;
        let g = (stack.height / vit.patch, stack.width / vit.patch);
        let mask = if global && rng.gen_bool(cfg.mask.probability) {
            block_mask(g, &cfg.mask, rng)
        } else {
            MaskPlan::none(g)
        };
        if global {
            opts.mask = Some(mask.spatial.clone());
        }
        let enc = student.backbone.encode(tape, sb, stack, opts)?;
        let c = cls_representation(tape, &enc)?;
        student_cls.push(head_forward(tape, hb, "cls", c)?);
        if global && mask.masked_count() > 0 {
            let probs = teacher_targets(&t.patch[vi], &teacher.center_patch, hyper.teacher_temp)?;
            let (target, token_mask) = align_patch_targets(&probs, &t.blocks[vi], &enc, &mask.spatial);
            let slots = token_mask.iter().filter(|&&m| m).count();
            if slots > 0 {
                let all = tape.slice_rows(enc.output, 0, enc.num_tokens())?;
                let logits = head_forward(tape, hb, patch_head_name(&cfg.head), all)?;
                let l = mim_patch_loss(tape, &target, logits, &token_mask, d.student_temp)?;
                mim_terms.push((l, slots));
            }
        }
    }
    let cls = dino_cls_loss(tape, &cls_targets, &student_cls, d.student_temp)?;
    // average over all masked slots of the image's global views
    let mim = if mim_terms.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let total: usize = mim_terms.iter().map(|(_, n)| n).sum();
        let mut acc = None;
        for (l, n) in mim_terms {
            let w = tape.scale(l, n as f64 / total as f64);
            acc = Some(match acc {
                None => w,
                Some(a) => tape.add(a, w)?,
            });
        }
        acc.expect("nonempty")
    };
    Ok((cls, mim, t.cls, t.patch))
}

/// One optimizer step on the student, then the EMA and center updates.
pub fn pretrain_step(
    batch: &[ChannelStack],
    student: &mut Student,
    teacher: &mut TeacherState,
    opt: &mut AdamWState,
    cfg: &PretrainConfig,
    hyper: StepHyper,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty pretraining batch".into()));
    }
    let bsz = batch.len() as f64;
    let mut grads_bb = std::collections::BTreeMap::<String, Tensor>::new();
    let mut grads_head = std::collections::BTreeMap::<String, Tensor>::new();
    let mut cls_sum = 0.0;
    let mut mim_sum = 0.0;
    let mut teacher_cls = Vec::new();
    let mut teacher_patch = Vec::new();
    for image in batch {
        let mut tape = Tape::new();
        let sb = student.backbone.params().bind(&mut tape, true);
        let hb = student.head.bind(&mut tape, true);
        let (cls, mim, tc, tp) =
            image_loss(&mut tape, student, &sb, &hb, teacher, cfg, &hyper, image, rng)?;
        let (cv, mv) = (tape.value(cls).item()?, tape.value(mim).item()?);
        total_loss(cv, mv)?;
        cls_sum += cv;
        mim_sum += mv;
        let total = tape.add(cls, mim)?;
        let loss = tape.scale(total, 1.0 / bsz);
        let g = tape.backward(loss)?;
        for (dst, bound) in [(&mut grads_bb, &sb), (&mut grads_head, &hb)] {
            for (name, t) in bound.gradients(&tape, &g) {
                match dst.get_mut(&name) {
                    Some(acc) => acc.add_assign(&t)?,
                    None => {
                        dst.insert(name, t);
                    }
                }
            }
        }
        teacher_cls.extend(tc);
        teacher_patch.extend(tp);
    }
    let (cls, mim) = (cls_sum / bsz, mim_sum / bsz);
    total_loss(cls, mim)?;

    // one optimizer state over both parameter groups: prefix head names
    let mut all = ParamSet::new();
    all.extend_prefixed("backbone.", student.backbone.params());
    all.extend_prefixed("head.", &student.head);
    let mut grads = std::collections::BTreeMap::new();
    grads.extend(grads_bb.into_iter().map(|(k, v)| (format!("backbone.{k}"), v)));
    grads.extend(grads_head.into_iter().map(|(k, v)| (format!("head.{k}"), v)));
    opt.step(&mut all, &grads, hyper.lr)?;
    *student.backbone.params_mut() = all.strip_prefix("backbone.");
    student.head = all.strip_prefix("head.");

    ema_update(teacher.backbone.params_mut(), student.backbone.params(), hyper.ema_momentum)?;
    ema_update(&mut teacher.head, &student.head, hyper.ema_momentum)?;

    let cm = cfg.distill.center_momentum;
    let stack_rows = |ts: &[Tensor]| -> Result<Tensor> {
        let k = ts[0].as_matrix().1;
        let data: Vec<f64> = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(vec![data.len() / k, k], data)
    };
    teacher.center_cls = teacher_center_update(&teacher.center_cls, &stack_rows(&teacher_cls)?, cm)?;
    teacher.center_patch =
        teacher_center_update(&teacher.center_patch, &stack_rows(&teacher_patch)?, cm)?;
    Ok((cls, mim))
}

pub struct Pretrainer {
    pub config: PretrainConfig,
    pub student: Student,
    pub teacher: TeacherState,
    pub optimizer: AdamWState,
    schedule: Box<dyn LrSchedule>,
    rng: ChaCha8Rng,
    pub samples_seen: u64,
    pub step: usize,
}

impl Pretrainer {
    pub fn new(config: PretrainConfig, registry: &BackboneRegistry) -> Result<Self> {
        config.validate()?;
        let backbone = registry.create(&config.backbone, &config.vit, config.seed)?;
        let head = new_head(config.vit.dim, &config.head, config.seed);
        let k = config.head.prototypes;
        let teacher = TeacherState {
            backbone: backbone.clone_box(),
            head: head.clone(),
            center_cls: vec![0.0; k],
            center_patch: vec![0.0; k],
        };
        Ok(Self {
            schedule: config.schedule.build()?,
            optimizer: AdamWState::new(config.optimizer),
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5052_4554)),
            student: Student { backbone, head },
            teacher,
            config,
            samples_seen: 0,
            step: 0,
        })
    }

    pub fn progress(&self) -> f64 {
        (self.samples_seen as f64 / self.schedule.total()).min(1.0)
    }

    pub fn hyper(&self) -> Result<StepHyper> {
        let p = self.progress();
        Ok(StepHyper {
            lr: self.schedule.lr_at((self.samples_seen as f64).min(self.schedule.total()))?,
            ema_momentum: self.config.distill.ema_momentum(p),
            teacher_temp: self.config.distill.teacher_temp(p),
        })
    }

    pub fn is_done(&self) -> bool {
        self.samples_seen as f64 >= self.schedule.total()
    }

    /// Draws a batch from the corpus mix.
    pub fn draw_batch<'a>(&mut self, corpora: &'a [Corpus]) -> Result<Vec<&'a ChannelStack>> {
        (0..self.config.batch_size)
            .map(|_| {
                let c = &corpora[sample_corpus(&self.config.mix, &mut self.rng)?];
                Ok(&c.images[self.rng.gen_range(0..c.images.len())])
            })
            .collect()
    }

    pub fn train_step(&mut self, corpora: &[Corpus]) -> Result<StepLog> {
        let batch: Vec<ChannelStack> = self.draw_batch(corpora)?.into_iter().cloned().collect();
        let hyper = self.hyper()?;
        let (cls, mim) = pretrain_step(
            &batch,
            &mut self.student,
            &mut self.teacher,
            &mut self.optimizer,
            &self.config,
            hyper,
            &mut self.rng,
        )
        .map_err(|e| match e {
            Error::Training { param, reason } => Error::Training {
                param,
                reason: format!("{reason} (step {}, samples {})", self.step, self.samples_seen),
            },
            e => e,
        })?;
        self.step += 1;
        self.samples_seen += batch.len() as u64;
        Ok(StepLog {
            step: self.step,
            samples_seen: self.samples_seen,
            lr: hyper.lr,
            cls_loss: cls,
            mim_loss: mim,
            total: total_loss(cls, mim)?,
        })
    }

    /// Trains until the sample budget is spent, writing the log and bundles under `out`.
    pub fn run(&mut self, corpora: &[Corpus], out: Option<&Path>) -> Result<Vec<StepLog>> {
        let mut log_file = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(std::io::BufWriter::new(fs::File::create(dir.join("train_log.jsonl"))?))
            }
            None => None,
        };
        let mut logs = Vec::new();
        while !self.is_done() {
            let l = self.train_step(corpora)?;
            if let Some(f) = log_file.as_mut() {
                serde_json::to_writer(&mut *f, &l)?;
                f.write_all(b"\n")?;
            }
            if let (Some(dir), true) = (out, self.config.checkpoint_every > 0) {
                if self.step % self.config.checkpoint_every == 0 {
                    self.save_state(&dir.join(format!("ckpt_{:06}.gxbn", self.step)))?;
                }
            }
            logs.push(l);
        }
        if let Some(f) = log_file.as_mut() {
            f.flush()?;
        }
        if let Some(dir) = out {
            self.save_state(&dir.join("final.gxbn"))?;
            save_backbone(&dir.join("backbone.gxbb"), self.teacher.backbone.as_ref())?;
        }
        Ok(logs)
    }

    /// Student, teacher and heads in one bundle.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut all = ParamSet::new();
        all.extend_prefixed("student.", self.student.backbone.params());
        all.extend_prefixed("student_head.", &self.student.head);
        all.extend_prefixed("teacher.", self.teacher.backbone.params());
        all.extend_prefixed("teacher_head.", &self.teacher.head);
        let meta = json!({
            "backbone": backbone_meta(self.teacher.backbone.as_ref()),
            "step": self.step,
            "samples_seen": self.samples_seen,
            "center_cls": self.teacher.center_cls,
            "center_patch": self.teacher.center_patch,
        });
        save_bundle(path, &all, meta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::tensor::entropy_rows;

    #[test]
    fn hcs_singleton_and_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(hcs_sample(&[BandId::VV], &mut rng).unwrap(), vec![BandId::VV]);
            let s = hcs_sample(&BandId::ALL, &mut rng).unwrap();
            assert!(!s.is_empty() && s.iter().all(|b| BandId::ALL.contains(b)));
        }
        assert!(matches!(hcs_sample(&[], &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn single_band_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = plan_views(&[BandId::B8], 32, 32, &ViewConfig::default(), &mut rng).unwrap();
        assert_eq!(p.views.len(), 10);
        assert_eq!(p.globals().count(), 2);
        assert!(p.views.iter().all(|v| v.bands == [BandId::B8]));
        let a = plan_views(&BandId::ALL, 32, 32, &ViewConfig::default(), &mut ChaCha8Rng::seed_from_u64(4));
        let b = plan_views(&BandId::ALL, 32, 32, &ViewConfig::default(), &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn mask_fraction_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = MaskConfig::default();
        for _ in 0..500 {
            let m = block_mask((4, 4), &cfg, &mut rng);
            assert!(m.fraction() >= 0.1 && m.fraction() <= 0.5, "{}", m.fraction());
            let t = m.token_mask(3);
            assert!(!t[0]);
            assert_eq!(t.len(), 49);
        }
    }

    #[test]
    fn cls_loss_uniform_is_ln_k() {
        let k = 5;
        let mut tape = Tape::new();
        let targets = vec![Tensor::filled(&[1, k], 0.2); 2];
        let students: Vec<Var> = (0..4).map(|_| tape.leaf(Tensor::zeros(&[1, k]))).collect();
        let l = dino_cls_loss(&mut tape, &targets, &students, 0.1).unwrap();
        assert!((tape.value(l).item().unwrap() - (k as f64).ln()).abs() < 1e-12);
        assert_eq!(cls_pair_count(2, 4), 6);
        assert_eq!(cls_pair_count(1, 4), 3);
    }

    #[test]
    fn cls_loss_self_consistency() {
        let logits = Tensor::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap();
        let target = logits.softmax(0.1).unwrap();
        let mut tape = Tape::new();
        let s = tape.leaf(logits.clone());
        let other = tape.leaf(logits);
        let l = dino_cls_loss(&mut tape, &[target.clone()], &[s, other], 0.1).unwrap();
        assert!((tape.value(l).item().unwrap() - entropy_rows(&target)).abs() < 1e-12);
    }

    #[test]
    fn mim_loss_contracts() {
        let probs = Tensor::filled(&[3, 4], 0.25);
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::zeros(&[3, 4]));
        let zero = mim_patch_loss(&mut tape, &probs, s, &[false, false, false], 0.1).unwrap();
        assert_eq!(tape.value(zero).item().unwrap(), 0.0);
        assert!(matches!(
            mim_patch_loss(&mut tape, &probs, s, &[true, false, false], 0.1),
            Err(Error::Contract(_))
        ));
        let full = mim_patch_loss(&mut tape, &probs, s, &[false, true, true], 0.1).unwrap();
        assert!((tape.value(full).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_sum() {
        assert_eq!(total_loss(1.0, 2.0).unwrap(), 3.0);
        assert_eq!(total_loss(0.7, 0.0).unwrap(), 0.7);
        assert_eq!(total_loss(0.1, 0.2).unwrap(), total_loss(0.2, 0.1).unwrap());
        assert!(matches!(total_loss(f64::NAN, 1.0), Err(Error::Training { .. })));
    }

    #[test]
    fn center_update_examples() {
        let out = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(teacher_center_update(&[5.0, 5.0], &out, 1.0).unwrap(), vec![5.0, 5.0]);
        assert_eq!(teacher_center_update(&[5.0, 5.0], &out, 0.0).unwrap(), vec![2.0, 3.0]);
        let c = Tensor::from_rows(&vec![vec![7.0, -1.0]; 3]).unwrap();
        assert_eq!(teacher_center_update(&[7.0, -1.0], &c, 0.9).unwrap(), vec![7.0, -1.0]);
    }

    #[test]
    fn pdc_weights() {
        let spec = |name: &str, parallel| CorpusSpec {
            name: name.into(),
            weight: 1.0,
            parallel,
            bands: None,
            source: CorpusSource::Synthetic {
                config: SyntheticConfig::default(),
                task: TaskKind::Classification,
            },
        };
        let mix = PretrainMixConfig {
            corpora: vec![spec("a", false), spec("b", true)],
            pdc: 4.0,
        };
        let w = mix.effective_weights().unwrap();
        assert!((w[0] - 0.2).abs() < 1e-15 && (w[1] - 0.8).abs() < 1e-15);
        let plain = PretrainMixConfig { pdc: 1.0, ..mix };
        assert_eq!(plain.effective_weights().unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn crop_identity() {
        let planes = vec![(0..64).map(|v| v as f64).collect()];
        let s = ChannelStack::new(vec![BandId::B2], 8, 8, planes).unwrap();
        let full = CropGeometry {
            y0: 0.0,
            x0: 0.0,
            side: 8.0,
            out_size: 8,
        };
        assert_eq!(resized_crop(&s, &[BandId::B2], &full).unwrap(), s);
        let crop = CropGeometry {
            y0: 4.0,
            x0: 4.0,
            side: 4.0,
            out_size: 16,
        };
        assert_eq!(pos_window(&crop, (32, 32), 8, 4), (0, 0));
        let crop = CropGeometry {
            y0: 20.0,
            x0: 0.0,
            side: 12.0,
            out_size: 16,
        };
        assert_eq!(pos_window(&crop, (32, 32), 8, 4), (2, 0));
    }
}
