//! Brute-force metric definitions over raw label lists.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn labels(rng: &mut ChaCha8Rng, k: usize, n: usize) -> Vec<usize> {
    // skewed draws so some classes are often missing
    let hot = rng.gen_range(0..k);
    (0..n)
        .map(|_| if rng.gen_bool(0.4) { hot } else { rng.gen_range(0..k) })
        .collect()
}

pub fn instance(rng: &mut ChaCha8Rng, k: usize) -> (Vec<usize>, Vec<usize>) {
    let n = rng.gen_range(1..40);
    (labels(rng, k, n), labels(rng, k, n))
}

pub fn count(t: &[usize], p: &[usize], f: impl Fn(usize, usize) -> bool) -> usize {
    t.iter().zip(p).filter(|(&a, &b)| f(a, b)).count()
}

pub fn oracle_accuracy(t: &[usize], p: &[usize]) -> f64 {
    count(t, p, |a, b| a == b) as f64 / t.len() as f64
}

pub fn oracle_f1(t: &[usize], p: &[usize]) -> f64 {
    let tp = count(t, p, |a, b| a == 1 && b == 1);
    let fp = count(t, p, |a, b| a == 0 && b == 1);
    let fn_ = count(t, p, |a, b| a == 1 && b == 0);
    if tp + fp + fn_ == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Intersection over union of the index sets `{t = c}` and `{p = c}`.
pub fn oracle_iou(t: &[usize], p: &[usize], c: usize) -> Option<f64> {
    let inter = count(t, p, |a, b| a == c && b == c);
    let union = count(t, p, |a, b| a == c || b == c);
    (union > 0).then(|| inter as f64 / union as f64)
}

pub fn oracle_miou(t: &[usize], p: &[usize], k: usize) -> Option<f64> {
    let v: Vec<f64> = (0..k).filter_map(|c| oracle_iou(t, p, c)).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn oracle_biou(t: &[usize], p: &[usize]) -> Option<f64> {
    let zeros = t.iter().filter(|&&x| x == 0).count();
    let ones = t.len() - zeros;
    oracle_iou(t, p, if zeros < ones { 0 } else { 1 })
}

pub fn multilabel_instance(rng: &mut ChaCha8Rng) -> (usize, Vec<Vec<bool>>, Vec<Vec<bool>>) {
    let l = rng.gen_range(1..7);
    let n = rng.gen_range(1..30);
    let draw = |rng: &mut ChaCha8Rng| (0..n).map(|_| (0..l).map(|_| rng.gen_bool(0.3)).collect()).collect();
    (l, draw(rng), draw(rng))
}

pub fn label_column(rows: &[Vec<bool>], j: usize) -> Vec<usize> {
    rows.iter().map(|r| usize::from(r[j])).collect()
}
