//! Fine-tuning with task heads, full or with a frozen backbone, and the
//! mixture linear probe.
//!
//! Dense heads read four intermediate feature maps, project each to `w·D`
//! channels, sum them, and classify every patch; patch logits are bilinearly
//! upsampled to pixels with a fixed interpolation matrix. The change head runs
//! the same decoder on the difference of the two images' features.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bands::{BandCombination, BandId, ChannelStack};
use crate::data::{Dataset, SceneSample, Split, TaskKind, TaskPayload};
use crate::error::{shape_err, Error, Result};
use crate::metrics::{ConfusionAccumulator, EvalAccumulator, Metric, MetricRegistry};
use crate::numeric::bundle::{load_bundle, save_bundle};
use crate::numeric::{
    AdamWConfig, AdamWState, Bound, LrSchedule, ParamSet, Tape, Tensor, Var, WarmupCosine,
};
use crate::vit::{
    backbone_meta, cls_representation, linear, spatial_feature_maps, Backbone, BackboneRegistry,
    EncodeOptions, VitConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    /// Every backbone and head parameter is trained.
    Full,
    /// Only the head is trained; backbone features are computed once.
    Frozen,
}

impl FinetuneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Frozen => "frozen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "frozen" => Ok(Self::Frozen),
            _ => Err(Error::UnknownName {
                kind: "fine-tuning mode",
                name: s.to_string(),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Examples

/// What a model is trained to predict for one example.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Labels(Vec<bool>),
    /// Per-pixel class, raster order.
    Mask(Vec<usize>),
}

/// Model-ready input: the image on some band combination, plus the second
/// image for change detection.
#[derive(Clone, Debug)]
pub struct Example {
    pub input: ChannelStack,
    pub after: Option<ChannelStack>,
    pub target: Target,
}

impl Example {
    /// Non-change tasks read `test` bands. A change pair keeps `train` bands
    /// for the before image and reads `test` bands for the after image.
    pub fn from_sample(
        s: &SceneSample,
        train: &BandCombination,
        test: &BandCombination,
    ) -> Result<Self> {
        Ok(match &s.payload {
            TaskPayload::Class(c) => Self {
                input: s.raster.select(test)?,
                after: None,
                target: Target::Class(*c),
            },
            TaskPayload::MultiLabel(l) => Self {
                input: s.raster.select(test)?,
                after: None,
                target: Target::Labels(l.clone()),
            },
            TaskPayload::Mask(m) => Self {
                input: s.raster.select(test)?,
                after: None,
                target: Target::Mask(m.clone()),
            },
            TaskPayload::Change { after, mask } => Self {
                input: s.raster.select(train)?,
                after: Some(after.select(test)?),
                target: Target::Mask(mask.clone()),
            },
        })
    }
}

pub fn examples(
    samples: &[SceneSample],
    train: &BandCombination,
    test: &BandCombination,
) -> Result<Vec<Example>> {
    samples.iter().map(|s| Example::from_sample(s, train, test)).collect()
}

// ---------------------------------------------------------------------------
// Task heads

/// Interpolation matrix (`h·w × gh·gw`) of half-pixel-centred bilinear
/// upsampling from a `gh×gw` grid to `h×w` pixels.
pub fn bilinear_upsample_matrix(gh: usize, gw: usize, h: usize, w: usize) -> Tensor {
    let axis = |n_out: usize, n_in: usize| -> Vec<[(usize, f64); 2]> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                    .clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                let f = src - i0 as f64;
                [(i0, 1.0 - f), (i1, f)]
            })
            .collect()
    };
    let (ay, ax) = (axis(h, gh), axis(w, gw));
    let mut m = Tensor::zeros(&[h * w, gh * gw]);
    let cols = gh * gw;
    let data = m.data_mut();
    for (y, wy) in ay.iter().enumerate() {
        for (x, wx) in ax.iter().enumerate() {
            let row = (y * w + x) * cols;
            for &(iy, fy) in wy {
                for &(ix, fx) in wx {
                    data[row + iy * gw + ix] += fy * fx;
                }
            }
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub task: TaskKind,
    /// Classes, labels, or 2 for change masks.
    pub outputs: usize,
    pub dim: usize,
    /// Decoder width multiplier `w`.
    pub width: usize,
    pub layers: [usize; 4],
    /// Patch grid and pixel size of dense outputs.
    pub grid: (usize, usize),
    pub image: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct TaskHead {
    pub spec: HeadSpec,
    pub params: ParamSet,
    upsample: Option<Tensor>,
}

/// Backbone features a head consumes.
pub struct HeadInput {
    pub cls: Var,
    /// Spatial feature maps (`N_p × D`) at the head's four layers; empty for
    /// image-level tasks.
    pub maps: Vec<Var>,
}

impl TaskHead {
    pub fn new(spec: HeadSpec, seed: u64) -> Result<Self> {
        if spec.outputs == 0 {
            return Err(Error::Parameter("task head needs at least one output".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5441_534B);
        let mut p = ParamSet::new();
        let d = spec.dim;
        let mut lin = |name: &str, i: usize, o: usize, rng: &mut ChaCha8Rng| {
            p.insert(format!("{name}.w"), Tensor::randn(&[i, o], (1.0 / i as f64).sqrt(), rng));
            p.insert(format!("{name}.b"), Tensor::zeros(&[o]));
        };
        let upsample = if spec.task.is_dense() {
            if !(1..=3).contains(&spec.width) {
                return Err(Error::Parameter(format!(
                    "decoder width must be 1, 2 or 3, got {}",
                    spec.width
                )));
            }
            let hidden = spec.width * d;
            for l in 0..4 {
                lin(&format!("lvl{l}"), d, hidden, &mut rng);
            }
            lin("cls", hidden, spec.outputs, &mut rng);
            let (gh, gw) = spec.grid;
            Some(bilinear_upsample_matrix(gh, gw, spec.image.0, spec.image.1))
        } else {
            lin("cls", d, spec.outputs, &mut rng);
            None
        };
        Ok(Self {
            spec,
            params: p,
            upsample,
        })
    }

    pub fn from_params(spec: HeadSpec, params: ParamSet) -> Result<Self> {
        let mut head = Self::new(spec, 0)?;
        for (name, t) in head.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return shape_err(format!("head parameter `{name}` has shape {:?}", got.shape()));
            }
        }
        head.params = params;
        Ok(head)
    }

    pub fn is_dense(&self) -> bool {
        self.upsample.is_some()
    }

    /// Logits: `1×K` for image-level tasks, `pixels×K` for dense ones.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: &HeadInput) -> Result<Var> {
        let Some(up) = &self.upsample else {
            return linear(tape, bound, "cls", input.cls);
        };
        if input.maps.len() != 4 {
            return Err(Error::Contract(format!(
                "dense head needs 4 feature maps, got {}",
                input.maps.len()
            )));
        }
        let mut fused = linear(tape, bound, "lvl0", input.maps[0])?;
        for (l, &m) in input.maps.iter().enumerate().skip(1) {
            let z = linear(tape, bound, &format!("lvl{l}"), m)?;
            fused = tape.add(fused, z)?;
        }
        let fused = tape.gelu(fused);
        let patch_logits = linear(tape, bound, "cls", fused)?;
        let up = tape.constant(up.clone());
        tape.matmul(up, patch_logits)
    }
}

/// Default head for a task on a backbone.
pub fn head_spec(
    task: TaskKind,
    outputs: usize,
    vit: &VitConfig,
    image: (usize, usize),
    width: usize,
    layers: Option<[usize; 4]>,
) -> Result<HeadSpec> {
    let layers = match layers {
        Some(l) => l,
        None if task.is_dense() => vit.default_feature_layers()?,
        None => [0, 0, 0, 0],
    };
    Ok(HeadSpec {
        task,
        outputs: if task == TaskKind::ChangeDetection { 2 } else { outputs },
        dim: vit.dim,
        width,
        layers,
        grid: (image.0 / vit.patch, image.1 / vit.patch),
        image,
    })
}

fn task_loss(tape: &mut Tape, logits: Var, target: &Target) -> Result<Var> {
    match target {
        Target::Class(c) => tape.cross_entropy(logits, &[*c]),
        Target::Labels(l) => {
            let t = Tensor::new(vec![1, l.len()], l.iter().map(|&b| f64::from(u8::from(b))).collect())?;
            tape.bce_with_logits(logits, &t)
        }
        Target::Mask(m) => tape.cross_entropy(logits, m),
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Class(usize),
    /// Sigmoid above 0.5.
    Labels(Vec<bool>),
    Mask(Vec<usize>),
}

fn decode(task: TaskKind, logits: &Tensor) -> Prediction {
    let (r, _) = logits.as_matrix();
    match task {
        TaskKind::Classification => Prediction::Class(argmax(logits.row(0))),
        TaskKind::Multilabel => Prediction::Labels(logits.row(0).iter().map(|&x| x > 0.0).collect()),
        TaskKind::Segmentation | TaskKind::ChangeDetection => {
            Prediction::Mask((0..r).map(|i| argmax(logits.row(i))).collect())
        }
    }
}

fn new_accumulator(spec: &HeadSpec) -> EvalAccumulator {
    match spec.task {
        TaskKind::Multilabel => EvalAccumulator::multilabel(spec.outputs),
        _ => EvalAccumulator::Confusion(ConfusionAccumulator::new(spec.outputs)),
    }
}

fn accumulate(acc: &mut EvalAccumulator, target: &Target, pred: &Prediction) -> Result<()> {
    match (acc, target, pred) {
        (EvalAccumulator::Confusion(c), Target::Class(t), Prediction::Class(p)) => c.add(*t, *p),
        (EvalAccumulator::Confusion(c), Target::Mask(t), Prediction::Mask(p)) => c.add_all(t, p),
        (acc @ EvalAccumulator::Multilabel(_), Target::Labels(t), Prediction::Labels(p)) => {
            acc.add_multilabel(t, p)
        }
        _ => Err(Error::Contract("prediction does not match the target kind".into())),
    }
}

// ---------------------------------------------------------------------------
// Feature extraction

fn encode_input(
    tape: &mut Tape,
    backbone: &dyn Backbone,
    bound: &Bound,
    stack: &ChannelStack,
    spec: &HeadSpec,
) -> Result<HeadInput> {
    let enc = backbone.encode(tape, bound, stack, &EncodeOptions::default())?;
    let cls = cls_representation(tape, &enc)?;
    let maps = if spec.task.is_dense() {
        spatial_feature_maps(tape, &enc, &spec.layers)?
    } else {
        Vec::new()
    };
    Ok(HeadInput { cls, maps })
}

fn difference(tape: &mut Tape, before: HeadInput, after: HeadInput) -> Result<HeadInput> {
    let cls = tape.sub(after.cls, before.cls)?;
    let maps = after
        .maps
        .iter()
        .zip(&before.maps)
        .map(|(&a, &b)| tape.sub(a, b))
        .collect::<Result<_>>()?;
    Ok(HeadInput { cls, maps })
}

/// Backbones that encode an example: the before (or only) image, and the
/// after image of a change pair when it needs a differently adapted model.
#[derive(Clone, Copy)]
struct Encoders<'a> {
    main: &'a dyn Backbone,
    after: Option<&'a dyn Backbone>,
}

fn example_input(
    tape: &mut Tape,
    enc: Encoders,
    bound: &Bound,
    after_bound: Option<&Bound>,
    ex: &Example,
    spec: &HeadSpec,
) -> Result<HeadInput> {
    let a = encode_input(tape, enc.main, bound, &ex.input, spec)?;
    let Some(after) = &ex.after else {
        return Ok(a);
    };
    if (after.height, after.width) != (ex.input.height, ex.input.width) {
        return shape_err(format!(
            "change pair sizes differ: {}x{} vs {}x{}",
            ex.input.height, ex.input.width, after.height, after.width
        ));
    }
    let (model, b) = match (enc.after, after_bound) {
        (Some(m), Some(b)) => (m, b),
        _ => (enc.main, bound),
    };
    let b = encode_input(tape, model, b, after, spec)?;
    difference(tape, a, b)
}

/// Differenced feature maps `after − before` of a change pair, evaluated
/// without gradients.
pub fn change_features(
    backbone: &dyn Backbone,
    before: &ChannelStack,
    after: &ChannelStack,
    layers: [usize; 4],
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let bound = backbone.params().bind(&mut tape, false);
    let spec = HeadSpec {
        task: TaskKind::ChangeDetection,
        outputs: 2,
        dim: backbone.config().dim,
        width: 1,
        layers,
        grid: (0, 0),
        image: (0, 0),
    };
    let ex = Example {
        input: before.clone(),
        after: Some(after.clone()),
        target: Target::Mask(Vec::new()),
    };
    let enc = Encoders {
        main: backbone,
        after: None,
    };
    let input = example_input(&mut tape, enc, &bound, None, &ex, &spec)?;
    Ok(input.maps.iter().map(|&m| tape.value(m).clone()).collect())
}

/// Frozen-backbone features of one example.
#[derive(Clone, Debug)]
struct CachedInput {
    cls: Tensor,
    maps: Vec<Tensor>,
}

impl CachedInput {
    fn compute(enc: Encoders, ex: &Example, spec: &HeadSpec) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = enc.main.params().bind(&mut tape, false);
        let after_bound = enc.after.map(|a| a.params().bind(&mut tape, false));
        let input = example_input(&mut tape, enc, &bound, after_bound.as_ref(), ex, spec)?;
        Ok(Self {
            cls: tape.value(input.cls).clone(),
            maps: input.maps.iter().map(|&m| tape.value(m).clone()).collect(),
        })
    }

    fn record(&self, tape: &mut Tape) -> HeadInput {
        HeadInput {
            cls: tape.constant(self.cls.clone()),
            maps: self.maps.iter().map(|m| tape.constant(m.clone())).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Fine-tuned model

/// A backbone with its task head.
#[derive(Clone)]
pub struct FinetunedModel {
    pub backbone: Box<dyn Backbone>,
    /// Encodes the after image of change pairs when its bands need a
    /// differently adapted first layer.
    pub after_backbone: Option<Box<dyn Backbone>>,
    pub head: TaskHead,
}

impl FinetunedModel {
    fn encoders(&self) -> Encoders<'_> {
        Encoders {
            main: self.backbone.as_ref(),
            after: self.after_backbone.as_deref(),
        }
    }

    pub fn logits(&self, ex: &Example) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bb = self.backbone.params().bind(&mut tape, false);
        let ab = self.after_backbone.as_ref().map(|a| a.params().bind(&mut tape, false));
        let hb = self.head.params.bind(&mut tape, false);
        let input = example_input(&mut tape, self.encoders(), &bb, ab.as_ref(), ex, &self.head.spec)?;
        let l = self.head.forward(&mut tape, &hb, &input)?;
        Ok(tape.value(l).clone())
    }

    pub fn predict(&self, ex: &Example) -> Result<Prediction> {
        Ok(decode(self.head.spec.task, &self.logits(ex)?))
    }

    /// Accumulated predictions over `examples`.
    pub fn accumulate(&self, examples: &[Example]) -> Result<EvalAccumulator> {
        let mut acc = new_accumulator(&self.head.spec);
        for ex in examples {
            accumulate(&mut acc, &ex.target, &self.predict(ex)?)?;
        }
        Ok(acc)
    }

    pub fn evaluate(&self, examples: &[Example], metric: &dyn Metric) -> Result<f64> {
        metric.score(&self.accumulate(examples)?)
    }

    /// The same model with test-time backbones for `test` bands.
    pub fn for_testing(&self, train: &[BandId], test: &[BandId]) -> Result<Self> {
        let adapted = self.backbone.for_testing(train, test)?;
        let mut out = self.clone();
        if self.head.spec.task == TaskKind::ChangeDetection {
            out.after_backbone = Some(adapted);
        } else {
            out.backbone = adapted;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut all = ParamSet::new();
        all.extend_prefixed("backbone.", self.backbone.params());
        all.extend_prefixed("head.", &self.head.params);
        let meta = json!({ "backbone": backbone_meta(self.backbone.as_ref()), "head": self.head.spec });
        save_bundle(path, &all, meta)
    }

    pub fn load(path: &Path, registry: &BackboneRegistry) -> Result<Self> {
        let (params, meta) = load_bundle(path)?;
        let bmeta = meta
            .get("backbone")
            .ok_or_else(|| Error::Format("model meta lacks \"backbone\"".into()))?;
        let kind = bmeta
            .get("kind")
            .and_then(|k| k.as_str())
            .ok_or_else(|| Error::Format("backbone meta lacks \"kind\"".into()))?;
        let config: VitConfig = serde_json::from_value(bmeta["config"].clone())?;
        let extra = bmeta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        let backbone = registry.from_params(kind, config, params.strip_prefix("backbone."), &extra)?;
        let spec: HeadSpec = serde_json::from_value(
            meta.get("head")
                .cloned()
                .ok_or_else(|| Error::Format("model meta lacks \"head\"".into()))?,
        )?;
        let head = TaskHead::from_params(spec, params.strip_prefix("head."))?;
        Ok(Self {
            backbone,
            after_backbone: None,
            head,
        })
    }
}

/// Change mask for a pair; the before image keeps the training bands.
pub fn predict_change(
    model: &FinetunedModel,
    before: &ChannelStack,
    after: &ChannelStack,
) -> Result<Vec<usize>> {
    if model.head.spec.task != TaskKind::ChangeDetection {
        return Err(Error::Contract("model is not a change-detection model".into()));
    }
    let ex = Example {
        input: before.clone(),
        after: Some(after.clone()),
        target: Target::Mask(Vec::new()),
    };
    match model.predict(&ex)? {
        Prediction::Mask(m) => Ok(m),
        _ => unreachable!("change head decodes masks"),
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub lr: f64,
    pub warmup_epochs: usize,
    /// Cosine decay epochs after warmup; `None` uses 30 for image-level
    /// tasks and 80 for dense ones.
    pub decay_epochs: Option<usize>,
    /// `None` uses 64 for image-level tasks and 8 for dense ones.
    pub batch_size: Option<usize>,
    /// Decoder width multiplier for dense heads.
    pub width: usize,
    pub feature_layers: Option<[usize; 4]>,
    /// Evaluate on validation every this many epochs (and after the last).
    pub eval_every: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::Full,
            lr: 1e-3,
            warmup_epochs: 20,
            decay_epochs: None,
            batch_size: None,
            width: 2,
            feature_layers: None,
            eval_every: 1,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn decay_for(&self, task: TaskKind) -> usize {
        self.decay_epochs.unwrap_or(if task.is_dense() { 80 } else { 30 })
    }

    pub fn batch_for(&self, task: TaskKind) -> usize {
        self.batch_size.unwrap_or(if task.is_dense() { 8 } else { 64 })
    }

    pub fn epochs_for(&self, task: TaskKind) -> usize {
        self.warmup_epochs + self.decay_for(task)
    }

    pub fn schedule(&self, task: TaskKind) -> WarmupCosine {
        WarmupCosine {
            peak_lr: self.lr,
            warmup: self.warmup_epochs as f64,
            decay: self.decay_for(task) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size == Some(0) || self.eval_every == 0 {
            return Err(Error::Parameter("batch size and eval interval must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    /// `None` when not evaluated this epoch or the metric is undefined.
    pub val_metric: Option<f64>,
}

pub struct FinetuneOutcome {
    /// Model from the best validation epoch (the last epoch without validation data).
    pub model: FinetunedModel,
    pub best_epoch: usize,
    pub best_val: Option<f64>,
    pub history: Vec<EpochLog>,
}

/// What to train: the task, its label count and the selection metric.
pub struct TaskSpec<'a> {
    pub task: TaskKind,
    pub num_classes: usize,
    pub metric: &'a dyn Metric,
}

fn add_grads(dst: &mut BTreeMap<String, Tensor>, prefix: &str, src: BTreeMap<String, Tensor>) -> Result<()> {
    for (name, t) in src {
        let key = format!("{prefix}{name}");
        match dst.get_mut(&key) {
            Some(acc) => acc.add_assign(&t)?,
            None => {
                dst.insert(key, t);
            }
        }
    }
    Ok(())
}

fn score(metric: &dyn Metric, acc: &EvalAccumulator) -> Result<Option<f64>> {
    match metric.score(acc) {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Fine-tunes `backbone` (adapted to the training bands first) with a fresh
/// head, keeping the epoch with the highest validation metric.
pub fn finetune(
    backbone: &dyn Backbone,
    train: &[Example],
    val: &[Example],
    task: &TaskSpec,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::Data("fine-tuning needs at least one training example".into()))?;
    let bands = first.input.bands.clone();
    let mut backbone = backbone.for_training(&bands)?;
    let image = (first.input.height, first.input.width);
    let spec = head_spec(
        task.task,
        task.num_classes,
        backbone.config(),
        image,
        cfg.width,
        cfg.feature_layers,
    )?;
    let mut head = TaskHead::new(spec, cfg.seed)?;
    let frozen = cfg.mode == FinetuneMode::Frozen;
    let reference = frozen.then(|| backbone.params().clone());

    let (train_cache, val_cache) = if frozen {
        let enc = Encoders {
            main: backbone.as_ref(),
            after: None,
        };
        let cache = |xs: &[Example]| {
            xs.iter()
                .map(|ex| CachedInput::compute(enc, ex, &head.spec))
                .collect::<Result<Vec<_>>>()
        };
        (cache(train)?, cache(val)?)
    } else {
        (Vec::new(), Vec::new())
    };

    let schedule = cfg.schedule(task.task);
    let epochs = cfg.epochs_for(task.task);
    let bsz = cfg.batch_for(task.task).min(train.len());
    let steps_per_epoch = train.len().div_ceil(bsz);
    let mut opt = AdamWState::new(cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x4654));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    let mut best: Option<(f64, usize, ParamSet, ParamSet)> = None;

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (b, batch) in order.chunks(bsz).enumerate() {
            let pos = (epoch as f64 + (b + 1) as f64 / steps_per_epoch as f64).min(schedule.total());
            lr = schedule.lr_at(pos)?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads = BTreeMap::new();
            for &i in batch {
                let mut tape = Tape::new();
                let hb = head.params.bind(&mut tape, true);
                let (input, bb) = if frozen {
                    (train_cache[i].record(&mut tape), None)
                } else {
                    let bb = backbone.params().bind(&mut tape, true);
                    let enc = Encoders {
                        main: backbone.as_ref(),
                        after: None,
                    };
                    (example_input(&mut tape, enc, &bb, None, &train[i], &head.spec)?, Some(bb))
                };
                let logits = head.forward(&mut tape, &hb, &input)?;
                let loss = task_loss(&mut tape, logits, &train[i].target)?;
                let lv = tape.value(loss).item()?;
                if !lv.is_finite() {
                    return Err(Error::Training {
                        param: "loss".into(),
                        reason: format!("non-finite fine-tuning loss at epoch {epoch}"),
                    });
                }
                loss_sum += lv;
                let scaled = tape.scale(loss, scale);
                let g = tape.backward(scaled)?;
                add_grads(&mut grads, "head.", hb.gradients(&tape, &g))?;
                if let Some(bb) = bb {
                    add_grads(&mut grads, "backbone.", bb.gradients(&tape, &g))?;
                }
            }
            let mut all = ParamSet::new();
            if !frozen {
                all.extend_prefixed("backbone.", backbone.params());
            }
            all.extend_prefixed("head.", &head.params);
            opt.step(&mut all, &grads, lr)?;
            if !frozen {
                *backbone.params_mut() = all.strip_prefix("backbone.");
            }
            head.params = all.strip_prefix("head.");
        }

        let last = epoch + 1 == epochs;
        let val_metric = if !val.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || last) {
            let mut acc = new_accumulator(&head.spec);
            if frozen {
                for (c, ex) in val_cache.iter().zip(val) {
                    let mut tape = Tape::new();
                    let hb = head.params.bind(&mut tape, false);
                    let input = c.record(&mut tape);
                    let l = head.forward(&mut tape, &hb, &input)?;
                    accumulate(&mut acc, &ex.target, &decode(task.task, tape.value(l)))?;
                }
            } else {
                let model = FinetunedModel {
                    backbone: backbone.clone_box(),
                    after_backbone: None,
                    head: head.clone(),
                };
                acc = model.accumulate(val)?;
            }
            score(task.metric, &acc)?
        } else {
            None
        };
        history.push(EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_metric,
        });
        if let Some(v) = val_metric {
            if best.as_ref().is_none_or(|(bv, ..)| v > *bv) {
                let bb = if frozen { ParamSet::new() } else { backbone.params().clone() };
                best = Some((v, epoch, bb, head.params.clone()));
            }
        }
    }

    if let Some(reference) = reference {
        if &reference != backbone.params() {
            return Err(Error::Contract("frozen fine-tuning changed the backbone".into()));
        }
    }
    let (best_val, best_epoch) = match best {
        Some((v, e, bb, hp)) => {
            if !frozen {
                *backbone.params_mut() = bb;
            }
            head.params = hp;
            (Some(v), e)
        }
        None => (None, epochs.saturating_sub(1)),
    };
    Ok(FinetuneOutcome {
        model: FinetunedModel {
            backbone,
            after_backbone: None,
            head,
        },
        best_epoch,
        best_val,
        history,
    })
}

// ---------------------------------------------------------------------------
// Mixture linear probe

pub struct ProbeOutcome {
    pub model: FinetunedModel,
    /// Training vectors used: training samples times combinations.
    pub train_vectors: usize,
    /// Test score per evaluated combination name.
    pub scores: BTreeMap<String, f64>,
}

/// Trains one linear classifier on frozen CLS vectors of every training
/// sample under every combination in `combos`, then scores it on the test
/// split separately for each of `eval_combos`.
pub fn linear_probe_mixture(
    backbone: &dyn Backbone,
    data: &Dataset,
    combos: &[BandCombination],
    eval_combos: &[BandCombination],
    cfg: &FinetuneConfig,
) -> Result<ProbeOutcome> {
    if combos.is_empty() {
        return Err(Error::Parameter("mixture probe needs at least one combination".into()));
    }
    if data.task().is_dense() {
        return Err(Error::Contract(format!(
            "linear probing needs an image-level task, not {}",
            data.task().as_str()
        )));
    }
    let mixed = |split: Split| -> Result<Vec<Example>> {
        let mut out = Vec::new();
        for c in combos {
            out.extend(examples(data.split(split), c, c)?);
        }
        Ok(out)
    };
    let train = mixed(Split::Train)?;
    let val = mixed(Split::Val)?;
    let registry = MetricRegistry::default();
    let metric = registry.get(&data.metric_name())?;
    let spec = TaskSpec {
        task: data.task(),
        num_classes: data.num_classes(),
        metric,
    };
    let cfg = FinetuneConfig {
        mode: FinetuneMode::Frozen,
        ..cfg.clone()
    };
    let outcome = finetune(backbone, &train, &val, &spec, &cfg)?;
    let mut scores = BTreeMap::new();
    for c in eval_combos {
        let test = examples(data.split(Split::Test), c, c)?;
        scores.insert(c.name().to_string(), outcome.model.evaluate(&test, metric)?);
    }
    Ok(ProbeOutcome {
        model: outcome.model,
        train_vectors: train.len(),
        scores,
    })
}
