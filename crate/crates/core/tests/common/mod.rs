//! Naive reference implementations and measurement helpers shared by the
//! integration tests and the acceptance report.
#![allow(dead_code)]

use lemore::attention::{AttentionNormalization, NestedAttention};
use lemore::nn::ChannelAttention;
use lemore::params::{ParamBuilder, ParamStore, Session};
use lemore::tensor::{self, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ORACLE_TOL: f64 = 1e-10;
pub const ORACLE_INSTANCES: usize = 120;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn at(t: &Tensor, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[(c * s[1] + y) * s[2] + x]
}

pub fn conv1x1_naive(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (cin, h, wd) = x.chw().unwrap();
    let cout = w.shape()[0];
    let mut out = Vec::with_capacity(cout * h * wd);
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b.data()[o];
                for i in 0..cin {
                    acc += w.data()[o * cin + i] * at(x, i, y, xx);
                }
                out.push(acc);
            }
        }
    }
    out
}

pub fn dwconv_naive(
    x: &Tensor,
    w: &Tensor,
    dilation: usize,
    stride: usize,
) -> (Vec<usize>, Vec<f64>) {
    let (c, h, wd) = x.chw().unwrap();
    let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
    let mut out = Vec::new();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..3i64 {
                    for kx in 0..3i64 {
                        let iy = (oy * stride) as i64 + (ky - 1) * dilation as i64;
                        let ix = (ox * stride) as i64 + (kx - 1) * dilation as i64;
                        if (0..h as i64).contains(&iy) && (0..wd as i64).contains(&ix) {
                            acc += w.data()[ch * 9 + (ky * 3 + kx) as usize]
                                * at(x, ch, iy as usize, ix as usize);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    (vec![c, oh, ow], out)
}

pub fn matmul_naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
            }
        }
    }
    out
}

pub fn softmax_naive(t: &Tensor) -> Vec<f64> {
    let n = t.shape()[1];
    t.data()
        .chunks(n)
        .flat_map(|row| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            row.iter().map(move |v| v.exp() / z).collect::<Vec<_>>()
        })
        .collect()
}

pub fn grid_pool_naive(t: &Tensor, gh: usize, gw: usize) -> Vec<f64> {
    let (c, h, w) = t.chw().unwrap();
    let bin = |v: usize, len: usize, bins: usize| {
        (0..bins)
            .find(|&i| i * len / bins <= v && v < (i + 1) * len / bins)
            .unwrap()
    };
    let mut sums = vec![0.0; c * gh * gw];
    let mut counts = vec![0usize; c * gh * gw];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let k = (ch * gh + bin(y, h, gh)) * gw + bin(x, w, gw);
                sums[k] += at(t, ch, y, x);
                counts[k] += 1;
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| s / n as f64)
        .collect()
}

fn source(dst: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * input as f64 / output as f64 - 0.5).max(0.0);
    let lo = (s.floor() as usize).min(input - 1);
    let hi = (lo + 1).min(input - 1);
    (lo, hi, if lo == hi { 0.0 } else { s - lo as f64 })
}

pub fn bilinear_naive(t: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
    let (c, h, w) = t.chw().unwrap();
    let mut out = Vec::new();
    for ch in 0..c {
        for y in 0..oh {
            let (y0, y1, fy) = source(y, h, oh);
            for x in 0..ow {
                let (x0, x1, fx) = source(x, w, ow);
                let top = at(t, ch, y0, x0) * (1.0 - fx) + at(t, ch, y0, x1) * fx;
                let bot = at(t, ch, y1, x0) * (1.0 - fx) + at(t, ch, y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `(kernel name, instances, worst absolute difference)` for each kernel.
pub fn kernel_oracle_report(seed: u64) -> Vec<(&'static str, usize, f64)> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let n = ORACLE_INSTANCES;
    let mut rows = Vec::new();
    let mut run = |name: &'static str, rng: &mut ChaCha8Rng, f: &dyn Fn(&mut ChaCha8Rng) -> f64| {
        let worst = (0..n).map(|_| f(rng)).fold(0.0, f64::max);
        rows.push((name, n, worst));
    };
    run("conv1x1", rng, &|r| {
        let (cin, cout, h, w) = (
            r.gen_range(1..6),
            r.gen_range(1..6),
            r.gen_range(1..6),
            r.gen_range(1..6),
        );
        let x = rand_tensor(r, &[cin, h, w]);
        let wt = rand_tensor(r, &[cout, cin]);
        let b = rand_tensor(r, &[cout]);
        max_diff(
            tensor::conv1x1(&x, &wt, Some(&b)).unwrap().data(),
            &conv1x1_naive(&x, &wt, &b),
        )
    });
    for (name, dilation) in [("dwconv_d1", 1), ("dwconv_d2", 2)] {
        run(name, rng, &|r| {
            let (c, h, w) = (r.gen_range(1..5), r.gen_range(1..8), r.gen_range(1..8));
            let stride = r.gen_range(1..3);
            let x = rand_tensor(r, &[c, h, w]);
            let wt = rand_tensor(r, &[c, 3, 3]);
            let got = tensor::dwconv3x3(&x, &wt, None, dilation, stride).unwrap();
            let (shape, want) = dwconv_naive(&x, &wt, dilation, stride);
            assert_eq!(got.shape(), shape.as_slice());
            max_diff(got.data(), &want)
        });
    }
    run("matmul", rng, &|r| {
        let (m, k, nn) = (r.gen_range(1..7), r.gen_range(1..7), r.gen_range(1..7));
        let a = rand_tensor(r, &[m, k]);
        let b = rand_tensor(r, &[k, nn]);
        max_diff(
            tensor::matmul(&a, &b).unwrap().data(),
            &matmul_naive(&a, &b),
        )
    });
    run("softmax", rng, &|r| {
        let shape = [r.gen_range(1..6), r.gen_range(1..9)];
        let t = rand_tensor(r, &shape).map(|v| 4.0 * v);
        max_diff(tensor::softmax_rows(&t).unwrap().data(), &softmax_naive(&t))
    });
    run("grid_pool", rng, &|r| {
        let (c, h, w) = (r.gen_range(1..4), r.gen_range(1..10), r.gen_range(1..10));
        let (gh, gw) = (r.gen_range(1..=h), r.gen_range(1..=w));
        let t = rand_tensor(r, &[c, h, w]);
        max_diff(
            tensor::avg_pool_to_grid(&t, gh, gw).unwrap().data(),
            &grid_pool_naive(&t, gh, gw),
        )
    });
    run("global_pool", rng, &|r| {
        let (c, h, w) = (r.gen_range(1..4), r.gen_range(1..8), r.gen_range(1..8));
        let t = rand_tensor(r, &[c, h, w]);
        max_diff(
            tensor::global_avg_pool(&t).unwrap().data(),
            &grid_pool_naive(&t, 1, 1),
        )
    });
    run("bilinear", rng, &|r| {
        let (c, h, w) = (r.gen_range(1..4), r.gen_range(1..6), r.gen_range(1..6));
        let (oh, ow) = (r.gen_range(h..h * 4 + 1), r.gen_range(w..w * 4 + 1));
        let t = rand_tensor(r, &[c, h, w]);
        max_diff(
            tensor::bilinear_upsample(&t, oh, ow).unwrap().data(),
            &bilinear_naive(&t, oh, ow),
        )
    });
    rows
}

/// Structural measurements on a randomly initialized attention block.
pub struct AttentionChecks {
    /// Worst `|row sum − 1|` of the attention map.
    pub row_sum_error: f64,
    /// Worst difference between nine-pair and factored outputs.
    pub pairwise_gap: f64,
}

pub fn attention_checks(seed: u64) -> AttentionChecks {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut row_sum_error = 0.0f64;
    let mut pairwise_gap = 0.0f64;
    for _ in 0..10 {
        let d = rng.gen_range(2..9);
        let (h, w) = (rng.gen_range(2..12), rng.gen_range(2..12));
        let grid = (rng.gen_range(1..6), rng.gen_range(1..6));
        let mut store = ParamStore::new();
        let na = NestedAttention::new(
            &mut ParamBuilder::new(&mut store, rng),
            d,
            grid,
            AttentionNormalization::Softmax,
        )
        .unwrap();
        let x = rand_tensor(rng, &[d, h, w]);
        let mut s = Session::eval(&store);
        let xv = s.input(x);
        let a = na.trace(&mut s, xv).unwrap();
        let b = na.trace_pairwise(&mut s, xv).unwrap();
        let attn = s.value(a.attention);
        let n = attn.shape()[1];
        for row in attn.data().chunks(n) {
            row_sum_error = row_sum_error.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        pairwise_gap = pairwise_gap
            .max(s.value(a.attention).max_abs_diff(s.value(b.attention)))
            .max(s.value(a.output).max_abs_diff(s.value(b.output)));
    }
    AttentionChecks {
        row_sum_error,
        pairwise_gap,
    }
}

/// Worst spatial spread of the channel-attention gate on random inputs.
pub fn gate_spread(seed: u64) -> f64 {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let c = rng.gen_range(1..17);
        let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let mut store = ParamStore::new();
        let ca = ChannelAttention::new(&mut ParamBuilder::new(&mut store, rng), c, 4).unwrap();
        let x = rand_tensor(rng, &[c, h, w]).map(|v| v + 1.5);
        let mut s = Session::eval(&store);
        let xv = s.input(x.clone());
        let y = ca.forward(&mut s, xv).unwrap();
        let y = s.value(y);
        for ch in 0..c {
            let ratios: Vec<f64> = (0..h * w)
                .map(|p| y.data()[ch * h * w + p] / x.data()[ch * h * w + p])
                .collect();
            let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            worst = worst.max(hi - lo);
        }
    }
    worst
}

/// Worst deviation of `permute(permute(x))` from `x` over each view; exact
/// equality is expected.
pub fn involution_mismatches(seed: u64) -> usize {
    use lemore::cartesian::View;
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..50 {
        let shape = [
            rng.gen_range(1..6),
            rng.gen_range(1..6),
            rng.gen_range(1..6),
        ];
        let x = rand_tensor(rng, &shape);
        for v in View::ALL {
            let twice = x.permute(&v.axes()).unwrap().permute(&v.axes()).unwrap();
            if twice != x {
                bad += 1;
            }
        }
    }
    bad
}

/// Toy model with every entry perturbed so a round trip cannot pass by
/// coincidence with a freshly built model.
pub fn perturbed_toy(seed: u64) -> lemore::model::LeMoReModel {
    let mut cfg = lemore::model::ModelConfig::toy();
    cfg.seed = seed;
    let mut m = lemore::model::LeMoReModel::build(&cfg).unwrap();
    let rng = &mut ChaCha8Rng::seed_from_u64(seed ^ 0xA5);
    let ids: Vec<_> = m.store().iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in m.store_mut().get_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    m
}

fn relative_gap(a: &ParamStore, b: &ParamStore) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, x), (_, y))| {
            x.value
                .data()
                .iter()
                .zip(y.value.data())
                .map(|(p, q)| (p - q).abs() / p.abs().max(1e-30))
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Named format checks; every entry should be `true`.
pub fn format_checks() -> Vec<(&'static str, bool)> {
    use lemore::io::*;
    use lemore::{Error, WeightError};
    let mut out = Vec::new();

    let src = perturbed_toy(21);
    let bytes = encode_weights(src.store()).unwrap();
    let mut dst = lemore::model::LeMoReModel::build(&lemore::model::ModelConfig::toy()).unwrap();
    apply_weights(dst.store_mut(), &decode_weights(&bytes).unwrap()).unwrap();
    out.push((
        "weights round trip within f32 precision",
        relative_gap(src.store(), dst.store()) <= 6e-8,
    ));
    out.push((
        "weights re-encode byte identical",
        encode_weights(dst.store()).unwrap() == bytes,
    ));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    out.push((
        "bad magic",
        decode_weights(&bad) == Err(WeightError::BadMagic),
    ));
    let mut bad = bytes.clone();
    bad[4] = 9;
    out.push((
        "unsupported version",
        matches!(
            decode_weights(&bad),
            Err(WeightError::UnsupportedVersion(9))
        ),
    ));
    out.push((
        "truncated file",
        matches!(
            decode_weights(&bytes[..bytes.len() - 3]),
            Err(WeightError::Truncated { .. })
        ),
    ));
    let mut bad = bytes.clone();
    bad.push(0);
    out.push((
        "trailing bytes",
        matches!(
            decode_weights(&bad),
            Err(WeightError::TrailingBytes { count: 1, .. })
        ),
    ));
    let mut entries = decode_weights(&bytes).unwrap();
    entries[0].dims.push(1);
    out.push((
        "shape mismatch",
        matches!(
            apply_weights(dst.store_mut(), &entries),
            Err(WeightError::ShapeMismatch { .. })
        ),
    ));
    let mut entries = decode_weights(&bytes).unwrap();
    entries.pop();
    out.push((
        "missing entry",
        matches!(
            apply_weights(dst.store_mut(), &entries),
            Err(WeightError::MissingEntry(_))
        ),
    ));

    let rng = &mut ChaCha8Rng::seed_from_u64(22);
    let (h, w) = (7, 5);
    let img = Tensor::from_vec(
        &[3, h, w],
        (0..3 * h * w)
            .map(|_| rng.gen_range(0..=255u8) as f64 / 255.0)
            .collect(),
    )
    .unwrap();
    let ppm = encode_ppm(&img).unwrap();
    out.push((
        "ppm round trip",
        decode_ppm(&ppm).unwrap() == img && encode_ppm(&decode_ppm(&ppm).unwrap()).unwrap() == ppm,
    ));
    let labels: Vec<u32> = (0..h * w).map(|_| rng.gen_range(0..150)).collect();
    let pgm = encode_label_pgm(&labels, w, h).unwrap();
    let back = decode_pgm(&pgm).unwrap();
    out.push((
        "label pgm round trip",
        back.width == w
            && back.height == h
            && back
                .pixels
                .iter()
                .map(|&p| p as u32)
                .eq(labels.iter().copied()),
    ));
    out.push((
        "ppm wrong magic",
        matches!(decode_ppm(b"P5\n1 1\n255\n\0"), Err(Error::Parse { .. })),
    ));
    out.push((
        "ppm short payload",
        matches!(decode_ppm(&ppm[..ppm.len() - 1]), Err(Error::Parse { .. })),
    ));
    out.push((
        "ppm bad maxval",
        matches!(
            decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            Err(Error::Parse { .. })
        ),
    ));
    out.push((
        "pgm trailing bytes",
        matches!(
            decode_pgm(&[pgm.clone(), vec![0]].concat()),
            Err(Error::Parse { .. })
        ),
    ));
    out.push((
        "label above 255 rejected",
        encode_label_pgm(&[256], 1, 1).is_err(),
    ));
    out
}

pub struct CliRun {
    pub code: i32,
    pub stdout: Vec<u8>,
    pub stderr: String,
}

pub fn cli(args: &[&str]) -> CliRun {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_lemore"))
        .args(args)
        .output()
        .expect("binary runs");
    CliRun {
        code: out.status.code().unwrap_or(-1),
        stdout: out.stdout,
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Runs a subcommand under `--threads 1` and `--threads n`; returns stdout
/// plus the bytes of every named output file, for each setting.
fn outputs_at(
    threads: usize,
    dir: &std::path::Path,
    args: &[&str],
    files: &[&str],
) -> (i32, Vec<Vec<u8>>) {
    let t = threads.to_string();
    let mut full: Vec<String> = vec!["--threads".into(), t.clone()];
    full.extend(
        args.iter()
            .map(|a| a.replace("{dir}", &format!("{}/{t}", dir.display()))),
    );
    std::fs::create_dir_all(dir.join(&t)).unwrap();
    let r = cli(&full.iter().map(String::as_str).collect::<Vec<_>>());
    let mut blobs = vec![r.stdout];
    for f in files {
        blobs.push(std::fs::read(dir.join(&t).join(f)).unwrap_or_default());
    }
    (r.code, blobs)
}

/// `(command, identical across thread counts)` for analyze, gradcheck and a
/// short seeded training run.
pub fn determinism_checks(n: usize) -> Vec<(&'static str, bool)> {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&'static str, Vec<&str>, Vec<&str>); 3] = [
        (
            "analyze",
            vec!["analyze", "--json", "{dir}/cost.json"],
            vec!["cost.json"],
        ),
        ("gradcheck", vec!["gradcheck", "--seed", "3"], vec![]),
        (
            "train",
            vec![
                "train",
                "--steps",
                "3",
                "--weights-out",
                "{dir}/w.lmw",
                "--metrics",
                "{dir}/m.jsonl",
            ],
            vec!["w.lmw", "m.jsonl"],
        ),
    ];
    cases
        .into_iter()
        .map(|(name, args, files)| {
            let (c1, a) = outputs_at(1, dir.path(), &args, &files);
            let (cn, b) = outputs_at(n, dir.path(), &args, &files);
            let ok = c1 == 0 && cn == 0 && a == b && a.iter().all(|x| !x.is_empty());
            (name, ok)
        })
        .collect()
}
