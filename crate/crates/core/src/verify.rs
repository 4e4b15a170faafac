//! Finite-difference verification of composite blocks and the whole toy
//! network, on top of the per-op registry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionNormalization, NestedAttention};
use crate::autodiff::{
    gradcheck_registry, run_gradcheck_suite, uniform, weighted_sum, GradCase, GradReport, Tape, Var,
};
use crate::cartesian::{CartesianBlock, CartesianSpec, View};
use crate::decoder::GatedFusion;
use crate::error::Result;
use crate::model::{LeMoReModel, ModelConfig};
use crate::params::{Mode, ParamBuilder, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::Tensor;
use crate::training::{cross_entropy_loss, IGNORE_INDEX};

/// Pass threshold on the worst relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Coordinates probed per parameter tensor in the whole-network case.
pub const MODEL_SAMPLE: usize = 4;

/// Input size of the toy network in the whole-network case.
pub const MODEL_CHECK_SIZE: usize = 64;

/// Offsets biases and normalization affines away from their constant init.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, e)| matches!(e.kind, ParamKind::Bias | ParamKind::Norm))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
}

/// A case whose inputs are `data` followed by every trainable registry entry.
fn session_case<F>(
    name: &str,
    store: ParamStore,
    data: Vec<Tensor>,
    sample: Option<usize>,
    forward: F,
) -> GradCase
where
    F: Fn(&mut Session<'_>, &[Var]) -> Result<Var> + Send + Sync + 'static,
{
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, e)| e.kind.trainable())
        .map(|(id, _)| id)
        .collect();
    let nd = data.len();
    let mut inputs = data;
    inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
    GradCase {
        name: name.to_string(),
        inputs,
        sample,
        f: Box::new(move |tape: &mut Tape, v: &[Var]| {
            let bindings: Vec<(ParamId, Var)> =
                ids.iter().copied().zip(v[nd..].iter().copied()).collect();
            let mut s = Session::on_tape(std::mem::take(tape), &store, Mode::Train, &bindings);
            let out = forward(&mut s, &v[..nd]);
            *tape = s.into_tape();
            out
        }),
    }
}

pub fn cartesian_block_case(seed: u64) -> Result<GradCase> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let spec = CartesianSpec {
        channels: 4,
        height: 4,
        width: 5,
        views: &View::ALL,
        refine_repeats: 1,
        attention_ratio: Some(2),
    };
    let block = CartesianBlock::new(&mut ParamBuilder::new(&mut store, rng), &spec)?;
    jitter(&mut store, rng);
    let x = uniform(rng, &[4, 4, 5]);
    let w = uniform(rng, &[4, 4, 5]);
    Ok(session_case(
        "cartesian_block",
        store,
        vec![x],
        None,
        move |s, v| {
            let y = block.forward(s, v[0])?;
            weighted_sum(&mut s.tape, y, &w)
        },
    ))
}

pub fn nested_attention_case(seed: u64) -> Result<GradCase> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let na = NestedAttention::new(
        &mut ParamBuilder::new(&mut store, rng),
        4,
        (2, 3),
        AttentionNormalization::Softmax,
    )?;
    jitter(&mut store, rng);
    let x = uniform(rng, &[4, 4, 6]);
    let w = uniform(rng, &[4, 4, 6]);
    Ok(session_case(
        "nested_attention",
        store,
        vec![x],
        None,
        move |s, v| {
            let y = na.forward(s, v[0])?;
            weighted_sum(&mut s.tape, y, &w)
        },
    ))
}

pub fn gated_fusion_case(seed: u64) -> Result<GradCase> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let gfm = GatedFusion::new(&mut ParamBuilder::new(&mut store, rng), 3, 4, 3)?;
    jitter(&mut store, rng);
    let local = uniform(rng, &[3, 4, 4]);
    let global = uniform(rng, &[4, 2, 2]);
    let w = uniform(rng, &[3, 4, 4]);
    Ok(session_case(
        "gated_fusion",
        store,
        vec![local, global],
        None,
        move |s, v| {
            let y = gfm.forward(s, v[0], v[1])?;
            weighted_sum(&mut s.tape, y, &w)
        },
    ))
}

/// Toy network on a two-image batch, mean cross entropy, train mode.
pub fn toy_model_case(seed: u64) -> Result<GradCase> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut config = ModelConfig::toy();
    config.input_size = (MODEL_CHECK_SIZE, MODEL_CHECK_SIZE);
    config.seed = seed;
    let model = LeMoReModel::build(&config)?;
    let network = model.network().clone();
    let mut store = model.store().clone();
    jitter(&mut store, rng);
    let shape = [3, MODEL_CHECK_SIZE, MODEL_CHECK_SIZE];
    let images = vec![uniform(rng, &shape), uniform(rng, &shape)];
    let k = config.num_classes as u32;
    let pixels = MODEL_CHECK_SIZE * MODEL_CHECK_SIZE;
    let labels: Vec<Vec<u32>> = (0..2)
        .map(|_| {
            (0..pixels)
                .map(|_| {
                    if rng.gen_bool(0.05) {
                        IGNORE_INDEX
                    } else {
                        rng.gen_range(0..k)
                    }
                })
                .collect()
        })
        .collect();
    Ok(session_case(
        "toy_model",
        store,
        images,
        Some(MODEL_SAMPLE),
        move |s, v| {
            let logits = network.forward_batch(s, v)?;
            let a = cross_entropy_loss(s, logits[0], &labels[0], IGNORE_INDEX)?;
            let b = cross_entropy_loss(s, logits[1], &labels[1], IGNORE_INDEX)?;
            let sum = s.tape.add(a, b)?;
            s.tape.scale(sum, 0.5)
        },
    ))
}

pub fn composite_cases(seed: u64) -> Result<Vec<GradCase>> {
    Ok(vec![
        cartesian_block_case(seed)?,
        nested_attention_case(seed)?,
        gated_fusion_case(seed)?,
        toy_model_case(seed)?,
    ])
}

/// Every registered op followed by the composite cases for one seed.
pub fn gradcheck_all(seed: u64, epsilon: f64) -> Result<Vec<GradReport>> {
    let mut cases = gradcheck_registry(seed);
    cases.extend(composite_cases(seed)?);
    run_gradcheck_suite(&cases, epsilon)
}

/// Worst error per case name over several seeds, in case order; kink
/// skips are summed.
pub fn worst_over_seeds(
    seeds: impl IntoIterator<Item = u64>,
    epsilon: f64,
) -> Result<Vec<GradReport>> {
    let mut worst: Vec<GradReport> = Vec::new();
    for seed in seeds {
        let reports = gradcheck_all(seed, epsilon)?;
        if worst.is_empty() {
            worst = reports;
            continue;
        }
        for (w, r) in worst.iter_mut().zip(reports) {
            w.max_error = w.max_error.max(r.max_error);
            w.kinks += r.kinks;
        }
    }
    Ok(worst)
}
