//! Oracles shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use geocross::numeric::{ParamSet, Tape, Tensor};
use geocross::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central finite difference with step `h` on a scalar function of the params.
pub fn finite_difference<F>(params: &ParamSet, name: &str, index: usize, h: f64, f: &F) -> f64
where
    F: Fn(&ParamSet) -> f64,
{
    let mut plus = params.clone();
    plus.get_mut(name).unwrap().data_mut()[index] += h;
    let mut minus = params.clone();
    minus.get_mut(name).unwrap().data_mut()[index] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Compares analytic gradients with central differences on `samples`
/// randomly chosen scalars. The relative error uses
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check<L, F>(params: &ParamSet, loss_grad: L, loss: F, samples: usize, floor: f64, seed: u64) -> GradCheck
where
    L: Fn(&ParamSet) -> Result<BTreeMap<String, Tensor>>,
    F: Fn(&ParamSet) -> f64,
{
    let grads = loss_grad(params).unwrap();
    let names: Vec<&String> = params.names().collect();
    let sizes: Vec<usize> = names.iter().map(|n| params.get(n).unwrap().numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for _ in 0..samples {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let name = names[which];
        let a = grads[name.as_str()].data()[flat];
        let n = finite_difference(params, name, flat, 1e-5, &loss);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > out.max_rel_err {
            out.max_rel_err = rel;
            out.worst = format!("{name}[{flat}] analytic {a:e} numeric {n:e}");
        }
        out.checked += 1;
    }
    out
}

/// Evaluates `f` on a fresh tape with `params` bound as trainable and
/// returns the loss and per-parameter gradients.
pub fn loss_and_grads<F>(params: &ParamSet, f: F) -> Result<(f64, BTreeMap<String, Tensor>)>
where
    F: Fn(&mut Tape, &geocross::numeric::Bound) -> Result<geocross::numeric::Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss = f(&mut tape, &bound)?;
    let g = tape.backward(loss)?;
    Ok((tape.value(loss).item()?, bound.gradients(&tape, &g)))
}

pub fn random_stack(bands: &[geocross::bands::BandId], size: usize, seed: u64) -> geocross::bands::ChannelStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planes = bands
        .iter()
        .map(|_| Tensor::randn(&[size * size], 1.0, &mut rng).into_data())
        .collect();
    geocross::bands::ChannelStack::new(bands.to_vec(), size, size, planes).unwrap()
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den: f64 = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
    num / den.max(1e-300)
}

pub mod metric_oracle;

/// Tiny channel ViT pretraining setup on one synthetic corpus; `images`
/// scenes, `steps` steps of batch 8 and a sharp constant teacher temperature.
pub fn desk_pretrain_config(images: usize, steps: usize, seed: u64) -> geocross::pretrain::PretrainConfig {
    use geocross::data::{SyntheticConfig, TaskKind};
    use geocross::numeric::WsdSchedule;
    use geocross::pretrain::*;
    let total = (steps * 8) as f64;
    PretrainConfig {
        backbone: "chivit".into(),
        vit: geocross::vit::VitConfig {
            dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            ..Default::default()
        },
        head: HeadConfig {
            hidden: 64,
            bottleneck: 32,
            prototypes: 128,
            shared: true,
        },
        views: ViewConfig::default(),
        mask: MaskConfig::default(),
        distill: DistillConfig {
            teacher_temp_start: 0.01,
            teacher_temp_end: 0.01,
            ..Default::default()
        },
        schedule: ScheduleConfig::Wsd(WsdSchedule::new(1e-3, total * 0.1, total, 0.1).unwrap()),
        optimizer: Default::default(),
        batch_size: 8,
        mix: PretrainMixConfig {
            corpora: vec![CorpusSpec {
                name: "synthetic".into(),
                weight: 1.0,
                parallel: false,
                bands: None,
                source: CorpusSource::Synthetic {
                    config: SyntheticConfig {
                        train: images,
                        val: 0,
                        test: 0,
                        seed: 99,
                        rho: 1.0,
                        ..Default::default()
                    },
                    task: TaskKind::Classification,
                },
            }],
            pdc: 1.0,
        },
        seed,
        checkpoint_every: 0,
    }
}
