use rayon::prelude::*;

use super::{Tensor, PAR_THRESHOLD};
use crate::error::{Error, Result, ShapeFmt};

/// How a binary operand lines up against the left-hand tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    /// Both operands share one shape.
    Same,
    /// Right operand is `C×1×1` against a `C×H×W` left operand.
    PerChannel,
}

impl Broadcast {
    pub fn resolve(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        if let ([c, _, _], [cb, 1, 1]) = (a, b) {
            if c == cb {
                return Ok(Broadcast::PerChannel);
            }
        }
        Err(Error::shape(format!(
            "cannot broadcast {} against {}",
            ShapeFmt(b),
            ShapeFmt(a)
        )))
    }
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    match Broadcast::resolve(a.shape(), b.shape())? {
        Broadcast::Same => a.zip_map(b, f),
        Broadcast::PerChannel => {
            let plane = a.shape()[1] * a.shape()[2];
            let data = a
                .data()
                .chunks(plane)
                .zip(b.data())
                .flat_map(|(row, &g)| row.iter().map(move |&v| (v, g)))
                .map(|(v, g)| f(v, g))
                .collect();
            Ok(Tensor::raw(a.shape().to_vec(), data))
        }
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, |x, y| x * y)
}

pub fn scale(t: &Tensor, factor: f64) -> Tensor {
    t.map(|v| v * factor)
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(t: &Tensor) -> Tensor {
    t.map(sigmoid_scalar)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.rows_cols()?;
    let (kb, n) = b.rows_cols()?;
    if k != kb {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {m}x{k} · {kb}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    let row = |(i, orow): (usize, &mut [f64])| {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    Ok(Tensor::raw(vec![m, n], out))
}

pub fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let (_, n) = t.rows_cols()?;
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor::raw(t.shape().to_vec(), out))
}

pub fn global_avg_pool(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    let n = (h * w) as f64;
    let data = t
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().sum::<f64>() / n)
        .collect();
    Ok(Tensor::raw(vec![c, 1, 1], data))
}

/// Source taps for one output coordinate of align-corners-false resampling.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

/// Bilinear resampling to any target size (align-corners false).
pub fn interpolate_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("interpolation target size must be non-zero"));
    }
    if out_h == h && out_w == w {
        return Ok(t.clone());
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let src = t.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for (ch, oplane) in out.chunks_mut(out_h * out_w).enumerate() {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (y, yt) in ty.iter().enumerate() {
            let r0 = &plane[yt.lo * w..(yt.lo + 1) * w];
            let r1 = &plane[yt.hi * w..(yt.hi + 1) * w];
            for (x, xt) in tx.iter().enumerate() {
                let top = r0[xt.lo] * xt.w_lo + r0[xt.hi] * xt.w_hi;
                let bot = r1[xt.lo] * xt.w_lo + r1[xt.hi] * xt.w_hi;
                oplane[y * out_w + x] = top * yt.w_lo + bot * yt.w_hi;
            }
        }
    }
    Ok(Tensor::raw(vec![c, out_h, out_w], out))
}

pub fn bilinear_upsample(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = t.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("upsample target size must be non-zero"));
    }
    if out_h < h || out_w < w {
        return Err(Error::invalid(format!(
            "upsample target {out_h}x{out_w} smaller than input {h}x{w}"
        )));
    }
    interpolate_bilinear(t, out_h, out_w)
}

/// Adjoint of [`interpolate_bilinear`]: scatters `grad` back onto an `in_h×in_w` grid.
pub fn bilinear_upsample_backward(grad: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let (c, out_h, out_w) = grad.chw()?;
    if out_h == in_h && out_w == in_w {
        return Ok(grad.clone());
    }
    let ty = taps(in_h, out_h);
    let tx = taps(in_w, out_w);
    let mut out = vec![0.0; c * in_h * in_w];
    for (ch, plane) in out.chunks_mut(in_h * in_w).enumerate() {
        let g = &grad.data()[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (y, yt) in ty.iter().enumerate() {
            for (x, xt) in tx.iter().enumerate() {
                let gv = g[y * out_w + x];
                plane[yt.lo * in_w + xt.lo] += gv * yt.w_lo * xt.w_lo;
                plane[yt.lo * in_w + xt.hi] += gv * yt.w_lo * xt.w_hi;
                plane[yt.hi * in_w + xt.lo] += gv * yt.w_hi * xt.w_lo;
                plane[yt.hi * in_w + xt.hi] += gv * yt.w_hi * xt.w_hi;
            }
        }
    }
    Ok(Tensor::raw(vec![c, in_h, in_w], out))
}

/// Contiguous, non-overlapping bins `[start, end)` splitting `len` into `bins` parts.
pub fn pool_bins(len: usize, bins: usize) -> Vec<(usize, usize)> {
    (0..bins)
        .map(|i| (i * len / bins, (i + 1) * len / bins))
        .collect()
}

pub fn avg_pool_to_grid(t: &Tensor, gh: usize, gw: usize) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if gh == 0 || gw == 0 || gh > h || gw > w {
        return Err(Error::invalid(format!(
            "pooling grid {gh}x{gw} does not fit input {h}x{w}"
        )));
    }
    if gh == h && gw == w {
        return Ok(t.clone());
    }
    let by = pool_bins(h, gh);
    let bx = pool_bins(w, gw);
    let mut out = Vec::with_capacity(c * gh * gw);
    for plane in t.data().chunks(h * w) {
        for &(y0, y1) in &by {
            for &(x0, x1) in &bx {
                let mut acc = 0.0;
                for y in y0..y1 {
                    acc += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Ok(Tensor::raw(vec![c, gh, gw], out))
}

pub fn avg_pool_to_grid_backward(grad: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let (c, gh, gw) = grad.chw()?;
    if gh == in_h && gw == in_w {
        return Ok(grad.clone());
    }
    let by = pool_bins(in_h, gh);
    let bx = pool_bins(in_w, gw);
    let mut out = vec![0.0; c * in_h * in_w];
    for (ch, plane) in out.chunks_mut(in_h * in_w).enumerate() {
        for (i, &(y0, y1)) in by.iter().enumerate() {
            for (j, &(x0, x1)) in bx.iter().enumerate() {
                let g = grad.data()[(ch * gh + i) * gw + j] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for v in &mut plane[y * in_w + x0..y * in_w + x1] {
                        *v += g;
                    }
                }
            }
        }
    }
    Ok(Tensor::raw(vec![c, in_h, in_w], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let id = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(matmul(&a, &v).unwrap().data(), &[17.0, 39.0]);
        assert!(matches!(
            matmul(&a, &b.permute(&[1, 0]).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = rand_t(&mut rng, &[4, 5]);
            let b = rand_t(&mut rng, &[5, 3]);
            let c = rand_t(&mut rng, &[3, 6]);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right) < 1e-10);
        }
    }

    #[test]
    fn elementwise_basics() {
        let z = Tensor::zeros(&[2, 3]).unwrap();
        assert!(sigmoid(&z).data().iter().all(|&v| v == 0.5));
        let t = Tensor::from_vec(&[2], vec![-3.0, 3.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 3.0]);
        assert_eq!(sigmoid(&Tensor::scalar(-800.0)).data()[0], 0.0);
        assert!(sigmoid(&Tensor::scalar(800.0)).is_finite());
    }

    #[test]
    fn per_channel_broadcast_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_t(&mut rng, &[2, 2, 2]);
        let g = Tensor::from_vec(&[2, 1, 1], vec![2.0, 0.5]).unwrap();
        let y = mul(&x, &g).unwrap();
        for c in 0..2 {
            for h in 0..2 {
                for w in 0..2 {
                    let want = x.get(&[c, h, w]).unwrap() * g.data()[c];
                    assert_eq!(y.get(&[c, h, w]).unwrap(), want);
                }
            }
        }
        let bad = Tensor::zeros(&[3, 1, 1]).unwrap();
        assert!(matches!(add(&x, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_closed_forms() {
        let t = Tensor::from_vec(&[2, 2], vec![0.0, 3f64.ln(), 7.0, 7.0]).unwrap();
        let s = softmax_rows(&t).unwrap();
        let want = [0.25, 0.75, 0.5, 0.5];
        for (a, b) in s.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let t = Tensor::from_vec(&[1, 3], vec![1000.0, 999.0, -1000.0]).unwrap();
        let s = softmax_rows(&t).unwrap();
        assert!(s.is_finite());
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pools_on_hand_values() {
        let t = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&t).unwrap().data(), &[2.5]);
        let c = Tensor::full(&[3, 4, 4], 7.0).unwrap();
        assert!(global_avg_pool(&c)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 7.0));
        let p = avg_pool_to_grid(&c, 2, 2).unwrap();
        assert!(p.data().iter().all(|&v| v == 7.0));
        assert_eq!(avg_pool_to_grid(&t, 2, 2).unwrap(), t);
        assert!(avg_pool_to_grid(&t, 3, 1).is_err());
    }

    #[test]
    fn pool_bins_partition_exactly() {
        for len in 1..20 {
            for bins in 1..=len {
                let b = pool_bins(len, bins);
                assert_eq!(b[0].0, 0);
                assert_eq!(b[bins - 1].1, len);
                for w in b.windows(2) {
                    assert_eq!(w[0].1, w[1].0);
                }
                assert!(b.iter().all(|&(s, e)| e > s));
            }
        }
    }

    #[test]
    fn upsample_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = rand_t(&mut rng, &[2, 3, 5]);
        assert_eq!(bilinear_upsample(&t, 3, 5).unwrap(), t);
        let c = Tensor::full(&[2, 3, 3], -1.25).unwrap();
        let u = bilinear_upsample(&c, 7, 11).unwrap();
        assert!(u.data().iter().all(|&v| (v + 1.25).abs() < 1e-15));
        assert!(bilinear_upsample(&t, 0, 5).is_err());
        assert!(bilinear_upsample(&t, 2, 5).is_err());
    }

    #[test]
    fn degenerate_single_pixel_maps() {
        let t = Tensor::from_vec(&[2, 1, 1], vec![3.0, -4.0]).unwrap();
        let u = bilinear_upsample(&t, 4, 4).unwrap();
        assert!(u.data()[..16].iter().all(|&v| v == 3.0));
        assert!(u.data()[16..].iter().all(|&v| v == -4.0));
        assert_eq!(avg_pool_to_grid(&t, 1, 1).unwrap(), t);
        assert_eq!(global_avg_pool(&t).unwrap(), t);
    }
}
