//! Reverse-mode automatic differentiation over the tensor kernels.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in
//! evaluation order, saving whatever the backward rule needs. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns a
//! [`Gradients`] map. The tape itself is never modified by `backward`, so the
//! same loss can be differentiated repeatedly with identical results.

mod gradcheck;

pub use gradcheck::{
    finite_diff_check, finite_diff_check_multi, finite_diff_check_sampled, finite_diff_probe,
    gradcheck_registry, probe_coordinates, run_gradcheck_suite, uniform, weighted_sum, GradCase,
    GradReport, ProbeOutcome, DEFAULT_EPSILON, KINK_RETRIES,
};

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result, ShapeFmt};
use crate::tensor::{self, Broadcast, Tensor};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// Statistics source for a batch-normalization node.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the input itself (training).
    Batch,
    /// Normalize with stored running statistics (inference).
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics observed by a batch-statistics normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (`n/(n-1)` correction; none when `n = 1`).
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    Mul {
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    SoftmaxRows {
        x: usize,
    },
    GlobalAvgPool {
        x: usize,
    },
    Upsample {
        x: usize,
    },
    PoolGrid {
        x: usize,
    },
    Conv1x1 {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    DwConv {
        x: usize,
        w: usize,
        b: Option<usize>,
        dilation: usize,
        stride: usize,
    },
    Conv3x3 {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    /// Joint normalization of equally shaped maps; value is `B×C×H×W`.
    NormGroup {
        xs: Vec<usize>,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Slice {
        x: usize,
        index: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    Pick {
        x: usize,
        index: usize,
    },
    CrossEntropy {
        logits: usize,
        probs: Tensor,
        targets: Vec<Option<usize>>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of one scalar with respect to every value on its tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the value does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Handle(format!(
                "value belongs to tape {}, not tape {}",
                v.tape, self.id
            )));
        }
        if v.index() >= self.nodes.len() {
            return Err(Error::Handle(format!("no value #{} on tape", v.index)));
        }
        Ok(v.index())
    }

    /// Value behind a handle.
    ///
    /// Panics if `v` was produced by another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.idx(v).expect("foreign handle");
        &self.nodes[i].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.permute(axes)?;
        Ok(self.push(
            out,
            Op::Permute {
                x: xi,
                axes: axes.to_vec(),
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x: xi }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = tensor::matmul(&self.nodes[ai].value, &self.nodes[bi].value)?;
        Ok(self.push(out, Op::MatMul { a: ai, b: bi }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let bc = Broadcast::resolve(va.shape(), vb.shape())?;
        let out = tensor::add(va, vb)?;
        Ok(self.push(out, Op::Add { a: ai, b: bi, bc }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let bc = Broadcast::resolve(va.shape(), vb.shape())?;
        let out = tensor::mul(va, vb)?;
        Ok(self.push(out, Op::Mul { a: ai, b: bi, bc }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = tensor::scale(&self.nodes[xi].value, factor);
        Ok(self.push(out, Op::Scale { x: xi, factor }))
    }

    /// Sign pattern (`> 0`) of every ReLU input on the tape, in node order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } => Some(&self.nodes[x].value),
                _ => None,
            })
            .flat_map(|v| v.data().iter().map(|&a| a > 0.0))
            .collect()
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = tensor::relu(&self.nodes[xi].value);
        Ok(self.push(out, Op::Relu { x: xi }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = tensor::sigmoid(&self.nodes[xi].value);
        Ok(self.push(out, Op::Sigmoid { x: xi }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = tensor::softmax_rows(&self.nodes[xi].value)?;
        Ok(self.push(out, Op::SoftmaxRows { x: xi }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = tensor::global_avg_pool(&self.nodes[xi].value)?;
        Ok(self.push(out, Op::GlobalAvgPool { x: xi }))
    }

    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = tensor::bilinear_upsample(&self.nodes[xi].value, out_h, out_w)?;
        Ok(self.push(out, Op::Upsample { x: xi }))
    }

    pub fn avg_pool_to_grid(&mut self, x: Var, gh: usize, gw: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = tensor::avg_pool_to_grid(&self.nodes[xi].value, gh, gw)?;
        Ok(self.push(out, Op::PoolGrid { x: xi }))
    }

    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let out = tensor::conv1x1(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            bi.map(|i| &self.nodes[i].value),
        )?;
        Ok(self.push(
            out,
            Op::Conv1x1 {
                x: xi,
                w: wi,
                b: bi,
            },
        ))
    }

    pub fn dwconv3x3(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        stride: usize,
    ) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let out = tensor::dwconv3x3(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            bi.map(|i| &self.nodes[i].value),
            dilation,
            stride,
        )?;
        Ok(self.push(
            out,
            Op::DwConv {
                x: xi,
                w: wi,
                b: bi,
                dilation,
                stride,
            },
        ))
    }

    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let out = tensor::conv3x3(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            bi.map(|i| &self.nodes[i].value),
            stride,
        )?;
        Ok(self.push(
            out,
            Op::Conv3x3 {
                x: xi,
                w: wi,
                b: bi,
                stride,
            },
        ))
    }

    /// Per-channel normalization `y = γ·(x−μ)/√(σ²+eps) + β` on a `C×H×W` map,
    /// with `γ` and `β` of shape `C`.
    ///
    /// Returns the observed statistics when normalizing with batch statistics
    /// so the caller can fold them into its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<ObservedStats>)> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xv = &self.nodes[xi].value;
        let (c, h, w) = xv.chw()?;
        let (gv, bv) = (&self.nodes[gi].value, &self.nodes[bi].value);
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape(format!(
                "batch norm affine of shape {} / {} for {c} channels",
                ShapeFmt(gv.shape()),
                ShapeFmt(bv.shape())
            )));
        }
        let plane = h * w;
        let n = plane as f64;
        let (means, vars, observed) = match stats {
            NormStats::Batch => {
                let mut means = Vec::with_capacity(c);
                let mut vars = Vec::with_capacity(c);
                for p in xv.data().chunks(plane) {
                    let m = p.iter().sum::<f64>() / n;
                    let v = p.iter().map(|&u| (u - m) * (u - m)).sum::<f64>() / n;
                    means.push(m);
                    vars.push(v);
                }
                let correction = if plane > 1 { n / (n - 1.0) } else { 1.0 };
                let observed = ObservedStats {
                    mean: means.clone(),
                    var: vars.iter().map(|v| v * correction).collect(),
                };
                (means, vars, Some(observed))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("running statistics length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut out = Vec::with_capacity(xv.numel());
        for (ch, p) in xv.data().chunks(plane).enumerate() {
            let (m, s) = (means[ch], inv_std[ch]);
            let (g, b) = (gv.data()[ch], bv.data()[ch]);
            for &u in p {
                let xh = (u - m) * s;
                xhat.push(xh);
                out.push(g * xh + b);
            }
        }
        let shape = vec![c, h, w];
        let op = Op::BatchNorm {
            x: xi,
            gamma: gi,
            beta: bi,
            xhat: Tensor::raw(shape.clone(), xhat),
            inv_std,
            batch_stats: observed.is_some(),
        };
        Ok((self.push(Tensor::raw(shape, out), op), observed))
    }

    /// Batch-statistics normalization over several `C×H×W` maps at once:
    /// the per-channel mean and variance pool every pixel of every map.
    /// Returns one output per input plus the pooled statistics.
    pub fn batch_norm_group(
        &mut self,
        xs: &[Var],
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Vec<Var>, ObservedStats)> {
        match xs {
            [] => return Err(Error::invalid("batch norm over an empty group")),
            [x] => {
                let (y, obs) = self.batch_norm(*x, gamma, beta, NormStats::Batch, eps)?;
                return Ok((vec![y], obs.expect("batch statistics are observed")));
            }
            _ => {}
        }
        let idx: Vec<usize> = xs.iter().map(|&x| self.idx(x)).collect::<Result<_>>()?;
        let (gi, bi) = (self.idx(gamma)?, self.idx(beta)?);
        let shape = self.nodes[idx[0]].value.shape().to_vec();
        let (c, h, w) = self.nodes[idx[0]].value.chw()?;
        if let Some(&bad) = idx.iter().find(|&&i| self.nodes[i].value.shape() != shape) {
            return Err(Error::shape(format!(
                "batch norm group mixes shapes {} and {}",
                ShapeFmt(&shape),
                ShapeFmt(self.nodes[bad].value.shape())
            )));
        }
        let (gv, bv) = (&self.nodes[gi].value, &self.nodes[bi].value);
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape(format!(
                "batch norm affine of shape {} / {} for {c} channels",
                ShapeFmt(gv.shape()),
                ShapeFmt(bv.shape())
            )));
        }
        let plane = h * w;
        let b = idx.len();
        let n = (b * plane) as f64;
        let nodes = &self.nodes;
        let planes = |ch: usize| {
            idx.iter()
                .map(move |&i| &nodes[i].value.data()[ch * plane..(ch + 1) * plane])
        };
        let mut means = Vec::with_capacity(c);
        let mut vars = Vec::with_capacity(c);
        for ch in 0..c {
            let m = planes(ch).map(|p| p.iter().sum::<f64>()).sum::<f64>() / n;
            let v = planes(ch)
                .map(|p| p.iter().map(|&u| (u - m) * (u - m)).sum::<f64>())
                .sum::<f64>()
                / n;
            means.push(m);
            vars.push(v);
        }
        let correction = n / (n - 1.0);
        let observed = ObservedStats {
            mean: means.clone(),
            var: vars.iter().map(|v| v * correction).collect(),
        };
        let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(b * c * plane);
        let mut out = Vec::with_capacity(b * c * plane);
        for &i in &idx {
            for (ch, p) in self.nodes[i].value.data().chunks(plane).enumerate() {
                let (m, s) = (means[ch], inv_std[ch]);
                let (g, bb) = (gv.data()[ch], bv.data()[ch]);
                for &u in p {
                    let xh = (u - m) * s;
                    xhat.push(xh);
                    out.push(g * xh + bb);
                }
            }
        }
        let full = vec![b, c, h, w];
        let op = Op::NormGroup {
            xs: idx,
            gamma: gi,
            beta: bi,
            xhat: Tensor::raw(full.clone(), xhat),
            inv_std,
        };
        let joint = self.push(Tensor::raw(full, out), op);
        let ji = joint.index();
        let numel = c * plane;
        let ys = (0..b)
            .map(|k| {
                let data = self.nodes[ji].value.data()[k * numel..(k + 1) * numel].to_vec();
                self.push(
                    Tensor::raw(shape.clone(), data),
                    Op::Slice { x: ji, index: k },
                )
            })
            .collect();
        Ok((ys, observed))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = Tensor::scalar(self.nodes[xi].value.sum());
        Ok(self.push(out, Op::Sum { x: xi }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        Ok(self.push(out, Op::Mean { x: xi }))
    }

    /// Scalar holding element `index` of the flattened value.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        let Some(&e) = v.data().get(index) else {
            return Err(Error::invalid(format!(
                "pick index {index} out of range for {} elements",
                v.numel()
            )));
        };
        Ok(self.push(Tensor::scalar(e), Op::Pick { x: xi, index }))
    }

    /// Mean pixel-wise cross entropy of `K×H×W` logits against a label map.
    ///
    /// Pixels equal to `ignore_index` do not contribute; when every pixel is
    /// ignored the loss is defined as 0 with a zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32], ignore_index: u32) -> Result<Var> {
        let li = self.idx(logits)?;
        let lv = &self.nodes[li].value;
        let (k, h, w) = lv.chw()?;
        let plane = h * w;
        if labels.len() != plane {
            return Err(Error::shape(format!(
                "label map has {} pixels, logits have {h}x{w}",
                labels.len()
            )));
        }
        let mut targets = Vec::with_capacity(plane);
        for (p, &l) in labels.iter().enumerate() {
            if l == ignore_index {
                targets.push(None);
            } else if (l as usize) < k {
                targets.push(Some(l as usize));
            } else {
                return Err(Error::invalid(format!(
                    "label {l} at pixel {p} outside [0, {k}) and not the ignore index {ignore_index}"
                )));
            }
        }
        let d = lv.data();
        let mut probs = vec![0.0; k * plane];
        let mut total = 0.0;
        let mut count = 0usize;
        for p in 0..plane {
            let max = (0..k)
                .map(|c| d[c * plane + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..k {
                let e = (d[c * plane + p] - max).exp();
                probs[c * plane + p] = e;
                z += e;
            }
            for c in 0..k {
                probs[c * plane + p] /= z;
            }
            if let Some(t) = targets[p] {
                total += -(d[t * plane + p] - max - z.ln());
                count += 1;
            }
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let op = Op::CrossEntropy {
            logits: li,
            probs: Tensor::raw(vec![k, h, w], probs),
            targets,
            count,
        };
        Ok(self.push(Tensor::scalar(loss), op))
    }

    /// Differentiates the scalar `loss` with respect to everything before it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        let lv = &self.nodes[li].value;
        if lv.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {}",
                ShapeFmt(lv.shape())
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[li] = Some(Tensor::raw(lv.shape().to_vec(), vec![1.0]));

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => {}
            Op::Permute { x, axes } => {
                accumulate(grads, *x, g.permute(&tensor::inverse_permutation(axes))?);
            }
            Op::Reshape { x } => accumulate(grads, *x, g.reshape(val(*x).shape())?),
            Op::MatMul { a, b } => {
                let da = tensor::matmul(g, &val(*b).permute(&[1, 0])?)?;
                let db = tensor::matmul(&val(*a).permute(&[1, 0])?, g)?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add { a, b, bc } => {
                accumulate(grads, *a, g.clone());
                let db = match bc {
                    Broadcast::Same => g.clone(),
                    Broadcast::PerChannel => channel_sum(g, |gv, _| gv, None),
                };
                accumulate(grads, *b, db);
            }
            Op::Mul { a, b, bc } => match bc {
                Broadcast::Same => {
                    accumulate(grads, *a, g.zip_map(val(*b), |u, v| u * v)?);
                    accumulate(grads, *b, g.zip_map(val(*a), |u, v| u * v)?);
                }
                Broadcast::PerChannel => {
                    accumulate(grads, *a, tensor::mul(g, val(*b))?);
                    accumulate(grads, *b, channel_sum(g, |gv, av| gv * av, Some(val(*a))));
                }
            },
            Op::Scale { x, factor } => accumulate(grads, *x, tensor::scale(g, *factor)),
            Op::Relu { x } => accumulate(
                grads,
                *x,
                g.zip_map(val(*x), |u, v| if v > 0.0 { u } else { 0.0 })?,
            ),
            Op::Sigmoid { x } => {
                accumulate(grads, *x, g.zip_map(&node.value, |u, y| u * y * (1.0 - y))?)
            }
            Op::SoftmaxRows { x } => {
                let y = &node.value;
                let (_, n) = y.rows_cols()?;
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                accumulate(grads, *x, Tensor::raw(y.shape().to_vec(), dx));
            }
            Op::GlobalAvgPool { x } => {
                let (c, h, w) = val(*x).chw()?;
                let n = (h * w) as f64;
                let dx = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v / n, h * w))
                    .collect();
                accumulate(grads, *x, Tensor::raw(vec![c, h, w], dx));
            }
            Op::Upsample { x } => {
                let (_, h, w) = val(*x).chw()?;
                accumulate(grads, *x, tensor::bilinear_upsample_backward(g, h, w)?);
            }
            Op::PoolGrid { x } => {
                let (_, h, w) = val(*x).chw()?;
                accumulate(grads, *x, tensor::avg_pool_to_grid_backward(g, h, w)?);
            }
            Op::Conv1x1 { x, w, b } => {
                let cg = tensor::conv1x1_backward(val(*x), val(*w), g, b.is_some())?;
                accumulate_conv(grads, *x, *w, *b, cg);
            }
            Op::DwConv {
                x,
                w,
                b,
                dilation,
                stride,
            } => {
                let cg = tensor::dwconv3x3_backward(
                    val(*x),
                    val(*w),
                    g,
                    *dilation,
                    *stride,
                    b.is_some(),
                )?;
                accumulate_conv(grads, *x, *w, *b, cg);
            }
            Op::Conv3x3 { x, w, b, stride } => {
                let cg = tensor::conv3x3_backward(val(*x), val(*w), g, *stride, b.is_some())?;
                accumulate_conv(grads, *x, *w, *b, cg);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (c, h, w) = xhat.chw()?;
                let plane = h * w;
                let n = plane as f64;
                let gam = val(*gamma).data();
                let mut dx = Vec::with_capacity(c * plane);
                let mut dgamma = Vec::with_capacity(c);
                let mut dbeta = Vec::with_capacity(c);
                for ch in 0..c {
                    let gp = &g.data()[ch * plane..(ch + 1) * plane];
                    let xp = &xhat.data()[ch * plane..(ch + 1) * plane];
                    let sum_g: f64 = gp.iter().sum();
                    let sum_gx: f64 = gp.iter().zip(xp).map(|(a, b)| a * b).sum();
                    dgamma.push(sum_gx);
                    dbeta.push(sum_g);
                    let k = gam[ch] * inv_std[ch];
                    if *batch_stats {
                        for (&gv, &xv) in gp.iter().zip(xp) {
                            dx.push(k * (gv - sum_g / n - xv * sum_gx / n));
                        }
                    } else {
                        dx.extend(gp.iter().map(|&gv| k * gv));
                    }
                }
                accumulate(grads, *x, Tensor::raw(vec![c, h, w], dx));
                accumulate(grads, *gamma, Tensor::raw(vec![c], dgamma));
                accumulate(grads, *beta, Tensor::raw(vec![c], dbeta));
            }
            Op::NormGroup {
                xs,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, c, h, w) = match xhat.shape() {
                    &[b, c, h, w] => (b, c, h, w),
                    _ => unreachable!("group normalization stores a rank-4 map"),
                };
                let plane = h * w;
                let numel = c * plane;
                let n = (b * plane) as f64;
                let gam = val(*gamma).data();
                let at = |k: usize, ch: usize| k * numel + ch * plane..k * numel + (ch + 1) * plane;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    for k in 0..b {
                        let gp = &g.data()[at(k, ch)];
                        let xp = &xhat.data()[at(k, ch)];
                        dbeta[ch] += gp.iter().sum::<f64>();
                        dgamma[ch] += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                for (k, &x) in xs.iter().enumerate() {
                    let mut dx = Vec::with_capacity(numel);
                    for ch in 0..c {
                        let kk = gam[ch] * inv_std[ch];
                        let gp = &g.data()[at(k, ch)];
                        let xp = &xhat.data()[at(k, ch)];
                        for (&gv, &xv) in gp.iter().zip(xp) {
                            dx.push(kk * (gv - dbeta[ch] / n - xv * dgamma[ch] / n));
                        }
                    }
                    accumulate(grads, x, Tensor::raw(vec![c, h, w], dx));
                }
                accumulate(grads, *gamma, Tensor::raw(vec![c], dgamma));
                accumulate(grads, *beta, Tensor::raw(vec![c], dbeta));
            }
            Op::Slice { x, index } => {
                let full = val(*x);
                let numel = g.numel();
                let slot = grads[*x].get_or_insert_with(|| {
                    Tensor::raw(full.shape().to_vec(), vec![0.0; full.numel()])
                });
                let dst = &mut slot.data_mut()[index * numel..(index + 1) * numel];
                for (d, &v) in dst.iter_mut().zip(g.data()) {
                    *d += v;
                }
            }
            Op::Sum { x } => {
                let s = val(*x).shape().to_vec();
                let v = g.data()[0];
                let n = val(*x).numel();
                accumulate(grads, *x, Tensor::raw(s, vec![v; n]));
            }
            Op::Mean { x } => {
                let s = val(*x).shape().to_vec();
                let n = val(*x).numel();
                let v = g.data()[0] / n as f64;
                accumulate(grads, *x, Tensor::raw(s, vec![v; n]));
            }
            Op::Pick { x, index } => {
                let xv = val(*x);
                let mut d = vec![0.0; xv.numel()];
                d[*index] = g.data()[0];
                accumulate(grads, *x, Tensor::raw(xv.shape().to_vec(), d));
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                count,
            } => {
                let (k, h, w) = probs.chw()?;
                let plane = h * w;
                let mut d = vec![0.0; k * plane];
                if *count > 0 {
                    let s = g.data()[0] / *count as f64;
                    for (p, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..k {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            d[c * plane + p] = s * (probs.data()[c * plane + p] - onehot);
                        }
                    }
                }
                accumulate(grads, *logits, Tensor::raw(vec![k, h, w], d));
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], target: usize, contribution: Tensor) {
    match &mut grads[target] {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn accumulate_conv(
    grads: &mut [Option<Tensor>],
    x: usize,
    w: usize,
    b: Option<usize>,
    cg: tensor::ConvGrads,
) {
    accumulate(grads, x, cg.input);
    accumulate(grads, w, cg.weight);
    if let (Some(b), Some(db)) = (b, cg.bias) {
        accumulate(grads, b, db);
    }
}

/// Reduces a `C×H×W` gradient to `C×1×1`, optionally weighting by a second map.
fn channel_sum(g: &Tensor, f: impl Fn(f64, f64) -> f64, other: Option<&Tensor>) -> Tensor {
    let c = g.shape()[0];
    let plane = g.numel() / c;
    let sums = (0..c)
        .map(|ch| {
            let gp = &g.data()[ch * plane..(ch + 1) * plane];
            match other {
                Some(o) => {
                    let op = &o.data()[ch * plane..(ch + 1) * plane];
                    gp.iter().zip(op).map(|(&a, &b)| f(a, b)).sum()
                }
                None => gp.iter().map(|&a| f(a, 0.0)).sum(),
            }
        })
        .collect();
    Tensor::raw(vec![c, 1, 1], sums)
}
