//! Central finite differences as the ground truth for every backward rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NormStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;

type GraphFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

/// A differentiable computation with concrete inputs, checked coordinate-wise.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub f: GraphFn,
    /// Probe at most this many evenly spaced coordinates per input.
    pub sample: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_error: f64,
    pub coordinates: usize,
    /// Probes skipped because every step size straddled a ReLU kink.
    pub kinks: usize,
}

/// Step reductions tried when a probe straddles a ReLU kink.
pub const KINK_RETRIES: usize = 2;

/// Worst error and number of probes skipped at kinks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOutcome {
    pub max_error: f64,
    pub kinks: usize,
}

fn eval_scalar(
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::invalid(format!(
            "finite-difference target must be scalar, got {} elements",
            v.numel()
        )));
    }
    Ok((v.data()[0], tape.relu_pattern()))
}

/// Max over all coordinates of all inputs of `|analytic − numeric| / max(1, |numeric|)`.
pub fn finite_diff_check_multi(
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    epsilon: f64,
) -> Result<f64> {
    finite_diff_check_sampled(f, inputs, epsilon, None)
}

/// Indices probed for an input of `numel` elements.
pub fn probe_coordinates(numel: usize, sample: Option<usize>) -> Vec<usize> {
    match sample {
        Some(k) if k < numel => (0..k).map(|j| j * numel / k).collect(),
        _ => (0..numel).collect(),
    }
}

/// [`finite_diff_check_multi`] restricted to [`probe_coordinates`] of each input.
pub fn finite_diff_check_sampled(
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    epsilon: f64,
    sample: Option<usize>,
) -> Result<f64> {
    Ok(finite_diff_probe(f, inputs, epsilon, sample)?.max_error)
}

/// Sampled check that retries a probe with a tenfold smaller step when the
/// ReLU sign pattern differs between `x + ε` and `x − ε`, and skips it once
/// [`KINK_RETRIES`] reductions all straddle a kink.
pub fn finite_diff_probe(
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    epsilon: f64,
    sample: Option<usize>,
) -> Result<ProbeOutcome> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::invalid(format!(
            "finite-difference target must be scalar, got {} elements",
            tape.value(out).numel()
        )));
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut kinks = 0;
    let mut probe = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned();
        for i in probe_coordinates(inputs[k].numel(), sample) {
            let orig = inputs[k].data()[i];
            let mut numeric = None;
            let mut eps = epsilon;
            for _ in 0..=KINK_RETRIES {
                probe[k].data_mut()[i] = orig + eps;
                let (up, up_pattern) = eval_scalar(f, &probe)?;
                probe[k].data_mut()[i] = orig - eps;
                let (down, down_pattern) = eval_scalar(f, &probe)?;
                if up_pattern == down_pattern {
                    numeric = Some((up - down) / (2.0 * eps));
                    break;
                }
                eps /= 10.0;
            }
            probe[k].data_mut()[i] = orig;
            let Some(numeric) = numeric else {
                kinks += 1;
                continue;
            };
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[i]);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(ProbeOutcome {
        max_error: worst,
        kinks,
    })
}

/// Single-input form of [`finite_diff_check_multi`].
pub fn finite_diff_check(
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
    x: &Tensor,
    epsilon: f64,
) -> Result<f64> {
    finite_diff_check_multi(
        &|tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        epsilon,
    )
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::raw(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

/// Reduces an arbitrary output to a scalar with a fixed random weighting so
/// every output coordinate contributes a distinct sensitivity.
pub fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.leaf(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

macro_rules! case {
    ($name:expr, [$($input:expr),*], $out_shape:expr, $rng:expr, |$tape:ident, $v:ident| $body:expr) => {{
        let inputs = vec![$($input),*];
        let weights = uniform($rng, &$out_shape);
        GradCase {
            name: $name.to_string(),
            inputs,
            f: Box::new(move |$tape: &mut Tape, $v: &[Var]| {
                let out = $body?;
                weighted_sum($tape, out, &weights)
            }),
            sample: None,
        }
    }};
}

/// Every differentiable tape operation with random inputs in `[-1, 1]`.
pub fn gradcheck_registry(seed: u64) -> Vec<GradCase> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    cases.push(case!(
        "permute",
        [uniform(rng, &[2, 3, 4])],
        [4, 2, 3],
        rng,
        |t, v| t.permute(v[0], &[2, 0, 1])
    ));
    cases.push(case!(
        "reshape",
        [uniform(rng, &[2, 3, 4])],
        [6, 4],
        rng,
        |t, v| t.reshape(v[0], &[6, 4])
    ));
    cases.push(case!(
        "matmul",
        [uniform(rng, &[3, 4]), uniform(rng, &[4, 2])],
        [3, 2],
        rng,
        |t, v| t.matmul(v[0], v[1])
    ));
    cases.push(case!(
        "add",
        [uniform(rng, &[2, 3, 3]), uniform(rng, &[2, 3, 3])],
        [2, 3, 3],
        rng,
        |t, v| t.add(v[0], v[1])
    ));
    cases.push(case!(
        "add_per_channel",
        [uniform(rng, &[3, 2, 4]), uniform(rng, &[3, 1, 1])],
        [3, 2, 4],
        rng,
        |t, v| t.add(v[0], v[1])
    ));
    cases.push(case!(
        "mul",
        [uniform(rng, &[2, 3, 3]), uniform(rng, &[2, 3, 3])],
        [2, 3, 3],
        rng,
        |t, v| t.mul(v[0], v[1])
    ));
    cases.push(case!(
        "mul_per_channel",
        [uniform(rng, &[3, 2, 4]), uniform(rng, &[3, 1, 1])],
        [3, 2, 4],
        rng,
        |t, v| t.mul(v[0], v[1])
    ));
    cases.push(case!("scale", [uniform(rng, &[5])], [5], rng, |t, v| t
        .scale(v[0], -1.7)));
    cases.push(case!(
        "relu",
        [uniform(rng, &[2, 4, 4])],
        [2, 4, 4],
        rng,
        |t, v| t.relu(v[0])
    ));
    cases.push(case!(
        "sigmoid",
        [uniform(rng, &[2, 4, 4])],
        [2, 4, 4],
        rng,
        |t, v| t.sigmoid(v[0])
    ));
    cases.push(case!(
        "softmax_rows",
        [uniform(rng, &[3, 5])],
        [3, 5],
        rng,
        |t, v| t.softmax_rows(v[0])
    ));
    cases.push(case!(
        "global_avg_pool",
        [uniform(rng, &[3, 4, 5])],
        [3, 1, 1],
        rng,
        |t, v| t.global_avg_pool(v[0])
    ));
    cases.push(case!(
        "bilinear_upsample",
        [uniform(rng, &[2, 3, 4])],
        [2, 7, 9],
        rng,
        |t, v| t.upsample(v[0], 7, 9)
    ));
    cases.push(case!(
        "avg_pool_to_grid",
        [uniform(rng, &[2, 5, 7])],
        [2, 2, 3],
        rng,
        |t, v| t.avg_pool_to_grid(v[0], 2, 3)
    ));
    cases.push(case!(
        "conv1x1",
        [
            uniform(rng, &[4, 3, 3]),
            uniform(rng, &[3, 4]),
            uniform(rng, &[3])
        ],
        [3, 3, 3],
        rng,
        |t, v| t.conv1x1(v[0], v[1], Some(v[2]))
    ));
    cases.push(case!(
        "dwconv3x3_d1",
        [
            uniform(rng, &[2, 5, 5]),
            uniform(rng, &[2, 3, 3]),
            uniform(rng, &[2])
        ],
        [2, 5, 5],
        rng,
        |t, v| t.dwconv3x3(v[0], v[1], Some(v[2]), 1, 1)
    ));
    cases.push(case!(
        "dwconv3x3_d2",
        [uniform(rng, &[2, 6, 6]), uniform(rng, &[2, 3, 3])],
        [2, 6, 6],
        rng,
        |t, v| t.dwconv3x3(v[0], v[1], None, 2, 1)
    ));
    cases.push(case!(
        "dwconv3x3_s2",
        [uniform(rng, &[2, 7, 6]), uniform(rng, &[2, 3, 3])],
        [2, 4, 3],
        rng,
        |t, v| t.dwconv3x3(v[0], v[1], None, 1, 2)
    ));
    cases.push(case!(
        "conv3x3_s2",
        [
            uniform(rng, &[2, 6, 5]),
            uniform(rng, &[3, 2, 3, 3]),
            uniform(rng, &[3])
        ],
        [3, 3, 3],
        rng,
        |t, v| t.conv3x3(v[0], v[1], Some(v[2]), 2)
    ));
    cases.push(case!(
        "batch_norm_train",
        [
            uniform(rng, &[2, 3, 4]),
            uniform(rng, &[2]),
            uniform(rng, &[2])
        ],
        [2, 3, 4],
        rng,
        |t, v| t
            .batch_norm(v[0], v[1], v[2], NormStats::Batch, 1e-5)
            .map(|(y, _)| y)
    ));
    let (rm, rv) = (vec![0.3, -0.2], vec![0.8, 1.7]);
    cases.push(case!(
        "batch_norm_eval",
        [
            uniform(rng, &[2, 3, 4]),
            uniform(rng, &[2]),
            uniform(rng, &[2])
        ],
        [2, 3, 4],
        rng,
        |t, v| t
            .batch_norm(
                v[0],
                v[1],
                v[2],
                NormStats::Running {
                    mean: &rm,
                    var: &rv
                },
                1e-5
            )
            .map(|(y, _)| y)
    ));
    cases.push(case!(
        "batch_norm_group",
        [
            uniform(rng, &[2, 3, 4]),
            uniform(rng, &[2, 3, 4]),
            uniform(rng, &[2, 3, 4]),
            uniform(rng, &[2]),
            uniform(rng, &[2])
        ],
        [2, 3, 4],
        rng,
        |t, v| {
            let (ys, _) = t.batch_norm_group(&v[..3], v[3], v[4], 1e-5)?;
            let a = t.scale(ys[1], 0.6)?;
            let b = t.mul(ys[2], ys[0])?;
            let ab = t.add(a, b)?;
            t.add(ys[0], ab)
        }
    ));
    cases.push(case!("mean", [uniform(rng, &[3, 4])], [1], rng, |t, v| t
        .mean(v[0])));
    cases.push(case!("pick", [uniform(rng, &[3, 4])], [1], rng, |t, v| t
        .pick(v[0], 7)));

    let labels: Vec<u32> = (0..12)
        .map(|i| if i == 5 { 255 } else { rng.gen_range(0..3) })
        .collect();
    cases.push(case!(
        "cross_entropy",
        [uniform(rng, &[3, 3, 4])],
        [1],
        rng,
        |t, v| t.cross_entropy(v[0], &labels, 255)
    ));
    cases
}

/// Runs every primitive case; composite blocks are added by the caller.
pub fn run_gradcheck_suite(cases: &[GradCase], epsilon: f64) -> Result<Vec<GradReport>> {
    cases
        .iter()
        .map(|c| {
            let outcome = finite_diff_probe(&*c.f, &c.inputs, epsilon, c.sample)?;
            Ok(GradReport {
                name: c.name.clone(),
                max_error: outcome.max_error,
                coordinates: c
                    .inputs
                    .iter()
                    .map(|t| probe_coordinates(t.numel(), c.sample).len())
                    .sum(),
                kinks: outcome.kinks,
            })
        })
        .collect()
}
