//! Supervised training on synthetic scenes: loss, metrics, optimizer and
//! the batch loop.

mod data;
mod metrics;
mod optim;

pub use data::{
    generate_scene, generate_scene_with, scene_seed, synthetic_dataset, SceneOptions, Shape,
    SyntheticScene, BACKGROUND, DISK, MIN_SCENE_SIZE, RECTANGLE, SCENE_CLASSES,
};
pub use metrics::{miou, ConfusionMatrix};
pub use optim::{Sgd, SgdConfig};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::LeMoReModel;
use crate::params::{ParamId, RunningUpdate, Session};
use crate::tensor::Tensor;

pub const IGNORE_INDEX: u32 = 255;

/// Mean cross entropy over non-ignored pixels, recorded on the session tape.
pub fn cross_entropy_loss(
    s: &mut Session<'_>,
    logits: Var,
    labels: &[u32],
    ignore_index: u32,
) -> Result<Var> {
    s.tape.cross_entropy(logits, labels, ignore_index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub ignore_index: u32,
    pub dataset_size: usize,
    pub dataset_seed: u64,
    pub shuffle_seed: u64,
    /// Evaluate training mIoU every this many steps (0: only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sgd: SgdConfig::default(),
            batch_size: 8,
            ignore_index: IGNORE_INDEX,
            dataset_size: 64,
            dataset_seed: 0,
            shuffle_seed: 0,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    /// Budget and step size for the toy model on the 64-scene set.
    pub fn toy() -> Self {
        TrainConfig {
            sgd: SgdConfig {
                base_lr: 0.5,
                max_steps: 300,
                ..SgdConfig::default()
            },
            batch_size: 32,
            ..TrainConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("train config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.dataset_size == 0 {
            return Err(Error::config("dataset_size", "must be positive"));
        }
        if !(self.sgd.base_lr >= 0.0 && self.sgd.base_lr.is_finite()) {
            return Err(Error::config(
                "sgd.base_lr",
                "must be finite and non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) {
            return Err(Error::config("sgd.momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Model plus optimizer slots and the step counter.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: LeMoReModel,
    pub optimizer: Sgd,
    pub step: usize,
    pub ignore_index: u32,
}

/// Mean loss, batch-averaged parameter gradients and queued statistics.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub grads: Vec<(ParamId, Tensor)>,
    pub running: Vec<RunningUpdate>,
}

fn batch_mean_loss(
    s: &mut Session<'_>,
    model: &LeMoReModel,
    scenes: &[SyntheticScene],
    ignore_index: u32,
) -> Result<Var> {
    if scenes.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let images: Vec<Var> = scenes.iter().map(|sc| s.input(sc.image.clone())).collect();
    let logits = model.network().forward_batch(s, &images)?;
    let mut total: Option<Var> = None;
    for (l, sc) in logits.into_iter().zip(scenes) {
        let loss = cross_entropy_loss(s, l, &sc.labels, ignore_index)?;
        total = Some(match total {
            Some(t) => s.tape.add(t, loss)?,
            None => loss,
        });
    }
    s.tape
        .scale(total.expect("non-empty batch"), 1.0 / scenes.len() as f64)
}

/// Train-mode forward and backward pass over one mini-batch. The loss is
/// the mean of the per-image losses.
pub fn batch_gradients(
    model: &LeMoReModel,
    scenes: &[SyntheticScene],
    ignore_index: u32,
) -> Result<BatchGradients> {
    let mut s = Session::train(model.store());
    let loss = batch_mean_loss(&mut s, model, scenes, ignore_index)?;
    let g = s.tape.backward(loss)?;
    Ok(BatchGradients {
        loss: s.value(loss).item()?,
        grads: s.param_grads(&g),
        running: s.take_running_updates(),
    })
}

/// Train-mode mean loss without a backward pass.
pub fn batch_loss(
    model: &LeMoReModel,
    scenes: &[SyntheticScene],
    ignore_index: u32,
) -> Result<f64> {
    let mut s = Session::train(model.store());
    let loss = batch_mean_loss(&mut s, model, scenes, ignore_index)?;
    s.value(loss).item()
}

impl TrainState {
    pub fn new(model: LeMoReModel, sgd: SgdConfig) -> Self {
        let optimizer = Sgd::new(sgd, model.store());
        TrainState {
            model,
            optimizer,
            step: 0,
            ignore_index: IGNORE_INDEX,
        }
    }

    pub fn lr(&self) -> f64 {
        self.optimizer.config.lr_at(self.step)
    }

    /// One optimizer step on the batch-averaged gradient; returns the mean
    /// loss.
    pub fn train_step(&mut self, batch: &[SyntheticScene]) -> Result<f64> {
        let r = batch_gradients(&self.model, batch, self.ignore_index)?;
        let lr = self.lr();
        let store = self.model.store_mut();
        store.apply_running(&r.running);
        self.optimizer.step(store, &r.grads, lr)?;
        self.step += 1;
        Ok(r.loss)
    }
}

/// Eval-mode mean IoU over `scenes`.
pub fn evaluate(model: &LeMoReModel, scenes: &[SyntheticScene]) -> Result<f64> {
    let preds = scenes
        .par_iter()
        .map(|sc| model.predict(&sc.image))
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(model.config().num_classes);
    for (p, sc) in preds.iter().zip(scenes) {
        cm.add(p, &sc.labels)?;
    }
    Ok(cm.mean_iou())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub final_miou: f64,
    pub records: Vec<MetricRecord>,
}

/// Runs the step budget of `state.optimizer.config`, writing one JSON line
/// per step to `log`.
pub fn run_training(
    state: &mut TrainState,
    dataset: &[SyntheticScene],
    config: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    if dataset.is_empty() || config.batch_size == 0 {
        return Err(Error::invalid(
            "training needs a non-empty dataset and batch size",
        ));
    }
    state.ignore_index = config.ignore_index;
    let max_steps = state.optimizer.config.max_steps;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut records = Vec::with_capacity(max_steps);
    let mut final_loss = f64::NAN;
    let mut final_miou = None;
    while state.step < max_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed.wrapping_add(epoch));
                order.shuffle(&mut rng);
                epoch += 1;
                cursor = 0;
            }
            batch.push(dataset[order[cursor]].clone());
            cursor += 1;
        }
        let lr = state.lr();
        let loss = state.train_step(&batch)?;
        let step = state.step;
        let due =
            step == max_steps || (config.eval_every > 0 && step.is_multiple_of(config.eval_every));
        let miou = if due {
            Some(evaluate(&state.model, dataset)?)
        } else {
            None
        };
        let rec = MetricRecord {
            step,
            loss,
            lr,
            miou,
        };
        writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        final_loss = loss;
        if miou.is_some() {
            final_miou = miou;
        }
        records.push(rec);
    }
    let final_miou = match final_miou {
        Some(m) => m,
        None => evaluate(&state.model, dataset)?,
    };
    Ok(TrainSummary {
        steps: state.step,
        final_loss,
        final_miou,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::toy();
        c.input_size = (32, 32);
        c
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let store = crate::params::ParamStore::new();
        let mut s = Session::eval(&store);
        let l = s.input(Tensor::zeros(&[2, 3, 3]).unwrap());
        let loss =
            cross_entropy_loss(&mut s, l, &[0, 1, 1, 0, 0, 1, 1, 1, 0], IGNORE_INDEX).unwrap();
        assert!((s.value(loss).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn all_ignored_is_zero_with_zero_gradient() {
        let store = crate::params::ParamStore::new();
        let mut s = Session::eval(&store);
        let l = s.input(Tensor::full(&[3, 2, 2], 0.7).unwrap());
        let loss = cross_entropy_loss(&mut s, l, &[IGNORE_INDEX; 4], IGNORE_INDEX).unwrap();
        assert_eq!(s.value(loss).item().unwrap(), 0.0);
        let g = s.tape.backward(loss).unwrap();
        assert!(g.get(l).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let store = crate::params::ParamStore::new();
        let mut s = Session::eval(&store);
        let l = s.input(Tensor::zeros(&[2, 1, 2]).unwrap());
        assert!(matches!(
            cross_entropy_loss(&mut s, l, &[0, 2], IGNORE_INDEX),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn zero_lr_step_leaves_weights_but_updates_running_stats() {
        let model = LeMoReModel::build(&tiny()).unwrap();
        let mut state = TrainState::new(
            model,
            SgdConfig {
                base_lr: 0.0,
                ..SgdConfig::default()
            },
        );
        let before = state.model.store().clone();
        let scene = generate_scene(1, 32).unwrap();
        state.train_step(&[scene]).unwrap();
        assert_eq!(state.step, 1);
        for (id, e) in before.iter() {
            if e.kind.trainable() {
                assert_eq!(state.model.store().get(id), &e.value, "{}", e.name);
            }
        }
    }

    #[test]
    fn step_is_thread_count_independent() {
        let data = synthetic_dataset(3, 4, 32).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let mut st = TrainState::new(
                    LeMoReModel::build(&tiny()).unwrap(),
                    SgdConfig {
                        base_lr: 0.01,
                        ..SgdConfig::default()
                    },
                );
                let l = st.train_step(&data).unwrap();
                (l, st.model.store().clone())
            })
        };
        let (la, sa) = run(1);
        let (lb, sb) = run(4);
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(sa, sb);
    }

    #[test]
    fn run_training_logs_every_step() {
        let data = synthetic_dataset(4, 3, 32).unwrap();
        let mut st = TrainState::new(
            LeMoReModel::build(&tiny()).unwrap(),
            SgdConfig {
                base_lr: 0.01,
                max_steps: 3,
                ..SgdConfig::default()
            },
        );
        let cfg = TrainConfig {
            batch_size: 2,
            eval_every: 2,
            ..TrainConfig::default()
        };
        let mut log = Vec::new();
        let summary = run_training(&mut st, &data, &cfg, &mut log).unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(log)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["step"], 1);
        assert!(lines[0].get("miou").is_none());
        assert!(lines[1].get("miou").is_some() && lines[2].get("miou").is_some());
        assert_eq!(summary.steps, 3);
        assert!((0.0..=1.0).contains(&summary.final_miou));
    }
}
