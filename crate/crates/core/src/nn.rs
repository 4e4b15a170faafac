//! Parameterized layers. Each layer holds registry ids and records its
//! computation onto a [`Session`].

use crate::autodiff::{NormStats, Var};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId, ParamKind, Session};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Applies a per-map computation to every map of a mini-batch.
pub fn each(xs: &[Var], mut f: impl FnMut(Var) -> Result<Var>) -> Result<Vec<Var>> {
    xs.iter().map(|&x| f(x)).collect()
}

#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv1x1 {
    pub fn new(pb: &mut ParamBuilder<'_>, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        let weight = pb.weight("weight", &[cout, cin], cin)?;
        let bias = bias
            .then(|| pb.constant("bias", ParamKind::Bias, &[cout], 0.0))
            .transpose()?;
        Ok(Conv1x1 {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.conv1x1(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// 3×3 depthwise filter; dilation 1 is a plain DW conv, dilation > 1 a DWD conv.
#[derive(Debug, Clone)]
pub struct DepthwiseConv3x3 {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub channels: usize,
    pub dilation: usize,
    pub stride: usize,
}

impl DepthwiseConv3x3 {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        channels: usize,
        dilation: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        if dilation == 0 || stride == 0 {
            return Err(Error::invalid("dilation and stride must be positive"));
        }
        let weight = pb.weight("weight", &[channels, 3, 3], 9)?;
        let bias = bias
            .then(|| pb.constant("bias", ParamKind::Bias, &[channels], 0.0))
            .transpose()?;
        Ok(DepthwiseConv3x3 {
            weight,
            bias,
            channels,
            dilation,
            stride,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.dwconv3x3(x, w, b, self.dilation, self.stride)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Dense 3×3 convolution, padding 1. Used by the stem only.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn new(pb: &mut ParamBuilder<'_>, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let weight = pb.weight("weight", &[cout, cin, 3, 3], cin * 9)?;
        Ok(Conv3x3 {
            weight,
            in_channels: cin,
            out_channels: cout,
            stride,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        s.tape.conv3x3(x, w, None, self.stride)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight]
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: pb.constant("gamma", ParamKind::Norm, &[channels], 1.0)?,
            beta: pb.constant("beta", ParamKind::Norm, &[channels], 0.0)?,
            running_mean: pb.constant("running_mean", ParamKind::Buffer, &[channels], 0.0)?,
            running_var: pb.constant("running_var", ParamKind::Buffer, &[channels], 1.0)?,
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_batch(s, &[x])?.remove(0))
    }

    /// Normalizes a mini-batch; batch statistics pool over every map.
    pub fn forward_batch(&self, s: &mut Session<'_>, xs: &[Var]) -> Result<Vec<Var>> {
        for &x in xs {
            let (c, _, _) = s.value(x).chw()?;
            if c != self.channels {
                return Err(Error::shape(format!(
                    "batch norm over {} channels got {c}",
                    self.channels
                )));
            }
        }
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        if s.batch_norm_stats() {
            let (ys, observed) = s.tape.batch_norm_group(xs, gamma, beta, self.eps)?;
            s.queue_running(self.running_mean, self.running_var, observed, self.momentum)?;
            return Ok(ys);
        }
        let mean = s.store().get(self.running_mean).data().to_vec();
        let var = s.store().get(self.running_var).data().to_vec();
        let stats = NormStats::Running {
            mean: &mean,
            var: &var,
        };
        each(xs, |x| {
            Ok(s.tape.batch_norm(x, gamma, beta, stats, self.eps)?.0)
        })
    }

    /// Trainable entries (γ, β); running statistics are buffers.
    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Reduced width of the squeeze step: `C / ratio`, but never below 4 (or `C`).
pub fn reduced_width(channels: usize, ratio: usize) -> usize {
    (channels / ratio).max(4).min(channels)
}

/// Squeeze-excite gating: `x ⊙ σ(expand(relu(reduce(gap(x)))))`.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub reduce: Conv1x1,
    pub expand: Conv1x1,
    pub channels: usize,
}

impl ChannelAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::invalid("reduction ratio must be positive"));
        }
        let r = reduced_width(channels, ratio);
        Ok(ChannelAttention {
            reduce: Conv1x1::new(&mut pb.scope("reduce"), channels, r, true)?,
            expand: Conv1x1::new(&mut pb.scope("expand"), r, channels, true)?,
            channels,
        })
    }

    /// The `C×1×1` gate alone.
    pub fn gate(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (c, _, _) = s.value(x).chw()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "channel attention over {} channels got {c}",
                self.channels
            )));
        }
        let pooled = s.tape.global_avg_pool(x)?;
        let r = self.reduce.forward(s, pooled)?;
        let r = s.tape.relu(r)?;
        let e = self.expand.forward(s, r)?;
        s.tape.sigmoid(e)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let gate = self.gate(s, x)?;
        s.tape.mul(x, gate)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.reduce.params();
        p.extend(self.expand.params());
        p
    }
}

pub const FFN_EXPANSION: usize = 2;

/// `project(relu(dw(relu(expand(x)))))` with a fixed expansion of two.
#[derive(Debug, Clone)]
pub struct FeedForwardNetwork {
    pub expand: Conv1x1,
    pub dw: DepthwiseConv3x3,
    pub project: Conv1x1,
}

impl FeedForwardNetwork {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        let hidden = dim * FFN_EXPANSION;
        Ok(FeedForwardNetwork {
            expand: Conv1x1::new(&mut pb.scope("expand"), dim, hidden, true)?,
            dw: DepthwiseConv3x3::new(&mut pb.scope("dw"), hidden, 1, 1, true)?,
            project: Conv1x1::new(&mut pb.scope("project"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.expand.forward(s, x)?;
        let h = s.tape.relu(h)?;
        let h = self.dw.forward(s, h)?;
        let h = s.tape.relu(h)?;
        self.project.forward(s, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.expand.params();
        p.extend(self.dw.params());
        p.extend(self.project.params());
        p
    }
}
