//! Evaluation metrics over mergeable confusion matrices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K×K` counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.k || pred >= self.k {
            return Err(Error::Validation(format!(
                "class pair ({truth}, {pred}) out of range for {} classes",
                self.k
            )));
        }
        self.counts[truth * self.k + pred] += 1;
        Ok(())
    }

    pub fn add_all(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        truth.iter().zip(pred).try_for_each(|(&t, &p)| self.add(t, p))
    }

    pub fn from_pairs(k: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        let mut a = Self::new(k);
        a.add_all(truth, pred)?;
        Ok(a)
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Shape(format!("merging {} with {} classes", self.k, other.k)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    /// Predicted `c` but truth was another class.
    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.k).filter(|&t| t != c).map(|t| self.get(t, c)).sum()
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.k).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }

    pub fn support(&self, c: usize) -> u64 {
        (0..self.k).map(|p| self.get(c, p)).sum()
    }
}

pub fn accuracy(acc: &ConfusionAccumulator) -> Result<f64> {
    let total = acc.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("accuracy of an empty accumulator".into()));
    }
    let trace: u64 = (0..acc.num_classes()).map(|c| acc.get(c, c)).sum();
    Ok(trace as f64 / total as f64)
}

/// `2TP/(2TP+FP+FN)` for `positive`; 0 when the denominator is 0.
pub fn f1_binary(acc: &ConfusionAccumulator, positive: usize) -> Result<f64> {
    if acc.num_classes() != 2 || positive > 1 {
        return Err(Error::Validation(format!(
            "binary F1 needs 2 classes and positive in {{0, 1}}, got {} / {positive}",
            acc.num_classes()
        )));
    }
    let tp = acc.true_positives(positive);
    let denom = 2 * tp + acc.false_positives(positive) + acc.false_negatives(positive);
    Ok(if denom == 0 { 0.0 } else { (2 * tp) as f64 / denom as f64 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Average {
    #[default]
    Macro,
    Micro,
}

/// Multilabel F1 over one binary accumulator per label (positive = 1).
pub fn f1_multilabel(labels: &[ConfusionAccumulator], average: F1Average) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Validation("multilabel F1 needs at least one label".into()));
    }
    match average {
        F1Average::Macro => {
            let mut s = 0.0;
            for a in labels {
                s += f1_binary(a, 1)?;
            }
            Ok(s / labels.len() as f64)
        }
        F1Average::Micro => {
            let mut pooled = ConfusionAccumulator::new(2);
            for a in labels {
                pooled.merge(a)?;
            }
            f1_binary(&pooled, 1)
        }
    }
}

fn iou(acc: &ConfusionAccumulator, c: usize) -> Option<f64> {
    let tp = acc.true_positives(c);
    let denom = tp + acc.false_positives(c) + acc.false_negatives(c);
    (denom > 0).then(|| tp as f64 / denom as f64)
}

/// Mean IoU over classes present in the ground truth or the prediction.
pub fn miou(acc: &ConfusionAccumulator) -> Result<f64> {
    if acc.num_classes() < 2 {
        return Err(Error::Validation("mIoU needs at least 2 classes".into()));
    }
    let ious: Vec<f64> = (0..acc.num_classes()).filter_map(|c| iou(acc, c)).collect();
    if ious.is_empty() {
        return Err(Error::UndefinedMetric("mIoU with every class absent".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Class with fewer ground-truth pixels; ties go to class 1.
pub fn minority_class(acc: &ConfusionAccumulator) -> usize {
    if acc.support(0) < acc.support(1) {
        0
    } else {
        1
    }
}

/// IoU of the minority class of a binary problem.
pub fn biou_minority(acc: &ConfusionAccumulator) -> Result<f64> {
    if acc.num_classes() != 2 {
        return Err(Error::Validation(format!(
            "bIoU needs 2 classes, got {}",
            acc.num_classes()
        )));
    }
    let c = minority_class(acc);
    iou(acc, c).ok_or_else(|| {
        Error::UndefinedMetric(format!("minority class {c} absent from truth and prediction"))
    })
}

/// Accumulated evaluation state, whichever the task produces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalAccumulator {
    Confusion(ConfusionAccumulator),
    /// One binary accumulator per label.
    Multilabel(Vec<ConfusionAccumulator>),
}

impl EvalAccumulator {
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        match (self, other) {
            (Self::Confusion(a), Self::Confusion(b)) => a.merge(b),
            (Self::Multilabel(a), Self::Multilabel(b)) if a.len() == b.len() => {
                a.iter_mut().zip(b).try_for_each(|(x, y)| x.merge(y))
            }
            _ => Err(Error::Shape("merging incompatible accumulators".into())),
        }
    }

    pub fn multilabel(labels: usize) -> Self {
        Self::Multilabel(vec![ConfusionAccumulator::new(2); labels])
    }

    pub fn add_multilabel(&mut self, truth: &[bool], pred: &[bool]) -> Result<()> {
        let Self::Multilabel(accs) = self else {
            return Err(Error::Contract("not a multilabel accumulator".into()));
        };
        if truth.len() != accs.len() || pred.len() != accs.len() {
            return Err(Error::Shape("label count mismatch".into()));
        }
        for ((a, &t), &p) in accs.iter_mut().zip(truth).zip(pred) {
            a.add(usize::from(t), usize::from(p))?;
        }
        Ok(())
    }
}

/// A named metric computed from an [`EvalAccumulator`].
pub trait Metric: Send + Sync {
    fn name(&self) -> &'static str;
    fn score(&self, acc: &EvalAccumulator) -> Result<f64>;
}

fn confusion<'a>(acc: &'a EvalAccumulator, metric: &str) -> Result<&'a ConfusionAccumulator> {
    match acc {
        EvalAccumulator::Confusion(c) => Ok(c),
        EvalAccumulator::Multilabel(_) => Err(Error::Contract(format!(
            "{metric} needs a single confusion matrix"
        ))),
    }
}

struct Accuracy;
struct F1;
struct F1Multilabel(F1Average);
struct MeanIou;
struct MinorityIou;

impl Metric for Accuracy {
    fn name(&self) -> &'static str {
        "accuracy"
    }
    fn score(&self, acc: &EvalAccumulator) -> Result<f64> {
        accuracy(confusion(acc, self.name())?)
    }
}

impl Metric for F1 {
    fn name(&self) -> &'static str {
        "f1"
    }
    fn score(&self, acc: &EvalAccumulator) -> Result<f64> {
        f1_binary(confusion(acc, self.name())?, 1)
    }
}

impl Metric for F1Multilabel {
    fn name(&self) -> &'static str {
        "f1_multilabel"
    }
    fn score(&self, acc: &EvalAccumulator) -> Result<f64> {
        match acc {
            EvalAccumulator::Multilabel(l) => f1_multilabel(l, self.0),
            EvalAccumulator::Confusion(_) => {
                Err(Error::Contract("f1_multilabel needs per-label accumulators".into()))
            }
        }
    }
}

impl Metric for MeanIou {
    fn name(&self) -> &'static str {
        "miou"
    }
    fn score(&self, acc: &EvalAccumulator) -> Result<f64> {
        miou(confusion(acc, self.name())?)
    }
}

impl Metric for MinorityIou {
    fn name(&self) -> &'static str {
        "biou"
    }
    fn score(&self, acc: &EvalAccumulator) -> Result<f64> {
        biou_minority(confusion(acc, self.name())?)
    }
}

pub struct MetricRegistry {
    entries: BTreeMap<&'static str, Box<dyn Metric>>,
}

impl MetricRegistry {
    pub fn with_multilabel_average(average: F1Average) -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register(Box::new(Accuracy));
        r.register(Box::new(F1));
        r.register(Box::new(F1Multilabel(average)));
        r.register(Box::new(MeanIou));
        r.register(Box::new(MinorityIou));
        r
    }

    pub fn register(&mut self, m: Box<dyn Metric>) {
        self.entries.insert(m.name(), m);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Metric> {
        self.entries
            .get(name)
            .map(|m| m.as_ref())
            .ok_or_else(|| Error::UnknownName {
                kind: "metric",
                name: name.to_string(),
            })
    }

    pub fn names(&self) -> impl Iterator<Item = &&'static str> {
        self.entries.keys()
    }
}

impl Default for MetricRegistry {
    fn default() -> Self {
        Self::with_multilabel_average(F1Average::Macro)
    }
}
