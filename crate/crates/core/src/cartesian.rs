//! Cartesian encoder block: three axis-permuted pointwise projections
//! (transverse over channels, frontal over height, lateral over width),
//! summed and then refined by a depthwise cascade with channel attention.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{each, BatchNorm, ChannelAttention, Conv1x1, DepthwiseConv3x3};
use crate::params::{ParamBuilder, ParamId, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Transverse,
    Frontal,
    Lateral,
}

impl View {
    pub const ALL: [View; 3] = [View::Transverse, View::Frontal, View::Lateral];

    /// Permutation bringing this view's mixing axis to the front of `C×H×W`.
    /// Each one is its own inverse.
    pub fn axes(self) -> [usize; 3] {
        match self {
            View::Transverse => [0, 1, 2],
            View::Frontal => [1, 0, 2],
            View::Lateral => [2, 1, 0],
        }
    }

    /// Size of the mixed axis for a `C×H×W` map.
    pub fn axis_len(self, c: usize, h: usize, w: usize) -> usize {
        match self {
            View::Transverse => c,
            View::Frontal => h,
            View::Lateral => w,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Transverse => "transverse",
            View::Frontal => "frontal",
            View::Lateral => "lateral",
        }
    }
}

/// Applies `conv` along the view's axis and restores `C×H×W` layout.
pub fn view_project(s: &mut Session<'_>, x: Var, view: View, conv: &Conv1x1) -> Result<Var> {
    let (c, h, w) = s.value(x).chw()?;
    let len = view.axis_len(c, h, w);
    if conv.in_channels != len || conv.out_channels != len {
        return Err(Error::config(
            format!("{}_view", view.name()),
            format!(
                "projection is {}→{} but the permuted leading axis has size {len}",
                conv.in_channels, conv.out_channels
            ),
        ));
    }
    if view == View::Transverse {
        return conv.forward(s, x);
    }
    let axes = view.axes();
    let p = s.tape.permute(x, &axes)?;
    let y = conv.forward(s, p)?;
    s.tape.permute(y, &axes)
}

/// One DW → BN → ReLU → DWD → BN → ReLU cascade.
#[derive(Debug, Clone)]
pub struct RefineStep {
    pub dw: DepthwiseConv3x3,
    pub bn_dw: BatchNorm,
    pub dwd: DepthwiseConv3x3,
    pub bn_dwd: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct ViewBranch {
    pub view: View,
    pub conv: Conv1x1,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct CartesianBlock {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub branches: Vec<ViewBranch>,
    pub refine: Vec<RefineStep>,
    pub attention: Option<ChannelAttention>,
}

/// Dilation of the second depthwise filter in each refinement step.
pub const REFINE_DILATION: usize = 2;

#[derive(Debug, Clone)]
pub struct CartesianSpec<'a> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub views: &'a [View],
    pub refine_repeats: usize,
    /// Squeeze ratio for channel attention; `None` disables it.
    pub attention_ratio: Option<usize>,
}

impl CartesianBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, spec: &CartesianSpec<'_>) -> Result<Self> {
        if spec.views.is_empty() {
            return Err(Error::config(
                "enabled_views",
                "at least one view must be enabled",
            ));
        }
        let (c, h, w) = (spec.channels, spec.height, spec.width);
        let mut branches = Vec::new();
        // fixed (t, f, l) order regardless of how the set was written
        for view in View::ALL {
            if !spec.views.contains(&view) {
                continue;
            }
            let len = view.axis_len(c, h, w);
            let mut vb = pb.scope(view.name());
            branches.push(ViewBranch {
                view,
                conv: Conv1x1::new(&mut vb.scope("proj"), len, len, false)?,
                bn: BatchNorm::new(&mut vb.scope("bn"), c)?,
            });
        }
        let mut refine = Vec::new();
        for i in 0..spec.refine_repeats {
            let mut rb = pb.scope(format!("refine.{i}"));
            refine.push(RefineStep {
                dw: DepthwiseConv3x3::new(&mut rb.scope("dw"), c, 1, 1, false)?,
                bn_dw: BatchNorm::new(&mut rb.scope("bn_dw"), c)?,
                dwd: DepthwiseConv3x3::new(&mut rb.scope("dwd"), c, REFINE_DILATION, 1, false)?,
                bn_dwd: BatchNorm::new(&mut rb.scope("bn_dwd"), c)?,
            });
        }
        let attention = spec
            .attention_ratio
            .map(|r| ChannelAttention::new(&mut pb.scope("ca"), c, r))
            .transpose()?;
        Ok(CartesianBlock {
            channels: c,
            height: h,
            width: w,
            branches,
            refine,
            attention,
        })
    }

    pub fn views(&self) -> Vec<View> {
        self.branches.iter().map(|b| b.view).collect()
    }

    fn check_input(&self, s: &Session<'_>, x: Var) -> Result<()> {
        let (c, h, w) = s.value(x).chw()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "Cartesian block over {} channels got {c}",
                self.channels
            )));
        }
        let bound = self.branches.iter().any(|b| b.view != View::Transverse);
        if bound && (h != self.height || w != self.width) {
            return Err(Error::config(
                "input_size",
                format!(
                    "block operates at {}x{} but received {h}x{w}",
                    self.height, self.width
                ),
            ));
        }
        Ok(())
    }

    /// Sum of the normalized view projections, before refinement.
    pub fn regroup(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        Ok(self.regroup_batch(s, &[x])?.remove(0))
    }

    pub fn regroup_batch(&self, s: &mut Session<'_>, xs: &[Var]) -> Result<Vec<Var>> {
        for &x in xs {
            self.check_input(s, x)?;
        }
        let mut acc: Option<Vec<Var>> = None;
        for b in &self.branches {
            let p = each(xs, |x| view_project(s, x, b.view, &b.conv))?;
            let p = b.bn.forward_batch(s, &p)?;
            acc = Some(match acc {
                Some(a) => a
                    .iter()
                    .zip(&p)
                    .map(|(&a, &p)| s.tape.add(a, p))
                    .collect::<Result<_>>()?,
                None => p,
            });
        }
        Ok(acc.expect("at least one branch"))
    }

    /// Refinement cascade and channel attention applied to a regrouped map.
    pub fn refine(&self, s: &mut Session<'_>, y: Var) -> Result<Var> {
        Ok(self.refine_batch(s, &[y])?.remove(0))
    }

    pub fn refine_batch(&self, s: &mut Session<'_>, ys: &[Var]) -> Result<Vec<Var>> {
        let mut y = ys.to_vec();
        for step in &self.refine {
            y = each(&y, |v| step.dw.forward(s, v))?;
            y = step.bn_dw.forward_batch(s, &y)?;
            y = each(&y, |v| s.tape.relu(v))?;
            y = each(&y, |v| step.dwd.forward(s, v))?;
            y = step.bn_dwd.forward_batch(s, &y)?;
            y = each(&y, |v| s.tape.relu(v))?;
        }
        match &self.attention {
            Some(ca) => each(&y, |v| ca.forward(s, v)),
            None => Ok(y),
        }
    }

    /// `x + refine(regroup(x))`.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_batch(s, &[x])?.remove(0))
    }

    pub fn forward_batch(&self, s: &mut Session<'_>, xs: &[Var]) -> Result<Vec<Var>> {
        let xi = self.regroup_batch(s, xs)?;
        let refined = self.refine_batch(s, &xi)?;
        xs.iter()
            .zip(&refined)
            .map(|(&x, &r)| s.tape.add(x, r))
            .collect()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        for b in &self.branches {
            p.extend(b.conv.params());
            p.extend(b.bn.params());
        }
        for r in &self.refine {
            p.extend(r.dw.params());
            p.extend(r.bn_dw.params());
            p.extend(r.dwd.params());
            p.extend(r.bn_dwd.params());
        }
        if let Some(ca) = &self.attention {
            p.extend(ca.params());
        }
        p
    }
}
