//! Convolution kernels: pointwise (1×1), depthwise 3×3 with dilation and
//! stride, and dense 3×3. Zero padding throughout.

use rayon::prelude::*;

use super::{ops::matmul, Tensor, PAR_THRESHOLD};
use crate::error::{Error, Result};

/// Gradients of a convolution with respect to its operands.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

fn check_bias(bias: Option<&Tensor>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(Error::shape(format!(
            "bias of shape {:?} for {channels} output channels",
            b.shape()
        ))),
        _ => Ok(()),
    }
}

fn add_bias(out: &mut [f64], bias: Option<&Tensor>, plane: usize) {
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_mut(plane).zip(b.data()) {
            for v in row {
                *v += bv;
            }
        }
    }
}

fn channel_sums(grad: &Tensor, plane: usize) -> Tensor {
    let sums: Vec<f64> = grad.data().chunks(plane).map(|p| p.iter().sum()).collect();
    let n = sums.len();
    Tensor::raw(vec![n], sums)
}

/// `out[o,h,w] = Σ_i weight[o,i]·x[i,h,w] + bias[o]` with `weight` of shape `Cout×Cin`.
pub fn conv1x1(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (cin, h, w) = x.chw()?;
    let (cout, wcin) = weight.rows_cols()?;
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv1x1 expects {wcin} input channels, got {cin}"
        )));
    }
    check_bias(bias, cout)?;
    let flat = Tensor::raw(vec![cin, h * w], x.data().to_vec());
    let mut out = matmul(weight, &flat)?.into_data();
    add_bias(&mut out, bias, h * w);
    Ok(Tensor::raw(vec![cout, h, w], out))
}

pub fn conv1x1_backward(
    x: &Tensor,
    weight: &Tensor,
    grad: &Tensor,
    with_bias: bool,
) -> Result<ConvGrads> {
    let (cin, h, w) = x.chw()?;
    let (cout, _) = weight.rows_cols()?;
    let g = Tensor::raw(vec![cout, h * w], grad.data().to_vec());
    let xf = Tensor::raw(vec![cin, h * w], x.data().to_vec());
    let dx = matmul(&weight.permute(&[1, 0])?, &g)?;
    let dw = matmul(&g, &xf.permute(&[1, 0])?)?;
    Ok(ConvGrads {
        input: Tensor::raw(vec![cin, h, w], dx.into_data()),
        weight: dw,
        bias: with_bias.then(|| channel_sums(grad, h * w)),
    })
}

/// Output extent of a 3×3 window with padding equal to the dilation.
pub(crate) fn window_out(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

fn check_geometry(dilation: usize, stride: usize) -> Result<()> {
    if dilation == 0 || stride == 0 {
        return Err(Error::invalid("dilation and stride must be positive"));
    }
    Ok(())
}

/// Per-channel 3×3 correlation. `weight` is `C×3×3`; padding equals `dilation`.
pub fn dwconv3x3(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    dilation: usize,
    stride: usize,
) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    check_geometry(dilation, stride)?;
    if weight.shape() != [c, 3, 3] {
        return Err(Error::shape(format!(
            "depthwise weight {:?} for {c} channels",
            weight.shape()
        )));
    }
    check_bias(bias, c)?;
    let (oh, ow) = (window_out(h, stride), window_out(w, stride));
    let d = dilation as isize;
    let mut out = vec![0.0; c * oh * ow];
    let kernel = |(ch, oplane): (usize, &mut [f64])| {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        let k = &weight.data()[ch * 9..ch * 9 + 9];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..3 {
                    let iy = (oy * stride) as isize + (ky as isize - 1) * d;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride) as isize + (kx as isize - 1) * d;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += k[ky * 3 + kx] * plane[iy as usize * w + ix as usize];
                    }
                }
                oplane[oy * ow + ox] = acc;
            }
        }
    };
    if c * oh * ow * 9 >= PAR_THRESHOLD {
        out.par_chunks_mut(oh * ow).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(oh * ow).enumerate().for_each(kernel);
    }
    add_bias(&mut out, bias, oh * ow);
    Ok(Tensor::raw(vec![c, oh, ow], out))
}

pub fn dwconv3x3_backward(
    x: &Tensor,
    weight: &Tensor,
    grad: &Tensor,
    dilation: usize,
    stride: usize,
    with_bias: bool,
) -> Result<ConvGrads> {
    let (c, h, w) = x.chw()?;
    let (_, oh, ow) = grad.chw()?;
    let d = dilation as isize;
    let per_channel: Vec<(Vec<f64>, [f64; 9])> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
            let g = &grad.data()[ch * oh * ow..(ch + 1) * oh * ow];
            let k = &weight.data()[ch * 9..ch * 9 + 9];
            let mut dx = vec![0.0; h * w];
            let mut dk = [0.0; 9];
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[oy * ow + ox];
                    for ky in 0..3 {
                        let iy = (oy * stride) as isize + (ky as isize - 1) * d;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride) as isize + (kx as isize - 1) * d;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let at = iy as usize * w + ix as usize;
                            dx[at] += k[ky * 3 + kx] * gv;
                            dk[ky * 3 + kx] += plane[at] * gv;
                        }
                    }
                }
            }
            (dx, dk)
        })
        .collect();
    let mut dx = Vec::with_capacity(c * h * w);
    let mut dk = Vec::with_capacity(c * 9);
    for (px, pk) in per_channel {
        dx.extend(px);
        dk.extend(pk);
    }
    Ok(ConvGrads {
        input: Tensor::raw(vec![c, h, w], dx),
        weight: Tensor::raw(vec![c, 3, 3], dk),
        bias: with_bias.then(|| channel_sums(grad, oh * ow)),
    })
}

/// Dense 3×3 convolution with padding 1. `weight` is `Cout×Cin×3×3`.
pub fn conv3x3(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
) -> Result<Tensor> {
    let (cin, h, w) = x.chw()?;
    check_geometry(1, stride)?;
    let cout = match weight.shape() {
        &[o, i, 3, 3] if i == cin => o,
        s => {
            return Err(Error::shape(format!(
                "conv3x3 weight {s:?} for {cin} input channels"
            )))
        }
    };
    check_bias(bias, cout)?;
    let (oh, ow) = (window_out(h, stride), window_out(w, stride));
    let mut out = vec![0.0; cout * oh * ow];
    let kernel = |(o, oplane): (usize, &mut [f64])| {
        for i in 0..cin {
            let plane = &x.data()[i * h * w..(i + 1) * h * w];
            let k = &weight.data()[(o * cin + i) * 9..(o * cin + i) * 9 + 9];
            for oy in 0..oh {
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                acc += k[ky * 3 + kx] * row[ix as usize];
                            }
                        }
                        oplane[oy * ow + ox] += acc;
                    }
                }
            }
        }
    };
    if cout * cin * oh * ow * 9 >= PAR_THRESHOLD {
        out.par_chunks_mut(oh * ow).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(oh * ow).enumerate().for_each(kernel);
    }
    add_bias(&mut out, bias, oh * ow);
    Ok(Tensor::raw(vec![cout, oh, ow], out))
}

pub fn conv3x3_backward(
    x: &Tensor,
    weight: &Tensor,
    grad: &Tensor,
    stride: usize,
    with_bias: bool,
) -> Result<ConvGrads> {
    let (cin, h, w) = x.chw()?;
    let (cout, oh, ow) = grad.chw()?;
    let wd = weight.data();
    let gd = grad.data();

    // input gradient, one input channel per task
    let mut dx = vec![0.0; cin * h * w];
    dx.par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(i, dplane)| {
            for o in 0..cout {
                let k = &wd[(o * cin + i) * 9..(o * cin + i) * 9 + 9];
                let g = &gd[o * oh * ow..(o + 1) * oh * ow];
                for oy in 0..oh {
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let gv = g[oy * ow + ox];
                            for kx in 0..3 {
                                let ix = (ox * stride + kx) as isize - 1;
                                if ix >= 0 && ix < w as isize {
                                    dplane[iy as usize * w + ix as usize] += k[ky * 3 + kx] * gv;
                                }
                            }
                        }
                    }
                }
            }
        });

    // weight gradient, one output channel per task
    let mut dw = vec![0.0; cout * cin * 9];
    dw.par_chunks_mut(cin * 9).enumerate().for_each(|(o, dk)| {
        let g = &gd[o * oh * ow..(o + 1) * oh * ow];
        for i in 0..cin {
            let plane = &x.data()[i * h * w..(i + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                acc += g[oy * ow + ox] * plane[iy as usize * w + ix as usize];
                            }
                        }
                    }
                    dk[i * 9 + ky * 3 + kx] = acc;
                }
            }
        }
    });

    Ok(ConvGrads {
        input: Tensor::raw(vec![cin, h, w], dx),
        weight: Tensor::raw(vec![cout, cin, 3, 3], dw),
        bias: with_bias.then(|| channel_sums(grad, oh * ow)),
    })
}
