//! Static parameter and MAC accounting.
//!
//! MACs cover convolutions and matrix products only. Normalization,
//! activations, pooling, gating and additions are tallied as `other_ops`;
//! bilinear interpolation is tallied separately as four multiply-adds per
//! output element. FLOPs follow the `2 · MACs` convention.

use std::fmt::Write as _;

use serde::Serialize;

use crate::attention::NestedAttention;
use crate::cartesian::{CartesianBlock, View};
use crate::decoder::{GatedFusion, SegmentationHead};
use crate::error::{Error, Result};
use crate::model::{LeMoReModel, ModelConfig};
use crate::nn::{
    BatchNorm, ChannelAttention, Conv1x1, Conv3x3, DepthwiseConv3x3, FeedForwardNetwork,
};
use crate::params::{ParamId, ParamStore};

/// Multiply-adds per bilinearly interpolated output element.
pub const INTERP_MACS_PER_ELEMENT: u64 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub params: usize,
    pub macs: u64,
    pub other_ops: u64,
    pub interp_macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostTotals {
    pub params: usize,
    pub macs: u64,
    pub flops: u64,
    pub other_ops: u64,
    pub interp_macs: u64,
    pub flops_with_upsampling: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Convention {
    pub macs: &'static str,
    pub flops: &'static str,
}

pub const CONVENTION: Convention = Convention {
    macs: "multiply-accumulate count of convolutions and matrix products",
    flops: "2 * macs",
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub probe_resolution: (usize, usize),
    pub convention: Convention,
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
}

pub fn conv1x1_macs(cin: usize, cout: usize, h: usize, w: usize) -> u64 {
    (cout * h * w * cin) as u64
}

pub fn conv3x3_macs(cin: usize, cout: usize, out_h: usize, out_w: usize) -> u64 {
    (cout * out_h * out_w * cin * 9) as u64
}

pub fn dwconv3x3_macs(channels: usize, out_h: usize, out_w: usize) -> u64 {
    (channels * out_h * out_w * 9) as u64
}

fn strided(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

struct Ledger<'a> {
    store: &'a ParamStore,
    rows: Vec<CostRow>,
}

impl Ledger<'_> {
    fn row(
        &mut self,
        name: impl Into<String>,
        params: &[ParamId],
        macs: u64,
        other_ops: u64,
        interp_macs: u64,
    ) {
        self.rows.push(CostRow {
            name: name.into(),
            params: self.store.count_of(params),
            macs,
            other_ops,
            interp_macs,
        });
    }

    fn conv1x1(&mut self, name: &str, c: &Conv1x1, h: usize, w: usize) {
        let bias_ops = if c.bias.is_some() {
            (c.out_channels * h * w) as u64
        } else {
            0
        };
        self.row(
            name,
            &c.params(),
            conv1x1_macs(c.in_channels, c.out_channels, h, w),
            bias_ops,
            0,
        );
    }

    fn conv3x3(&mut self, name: &str, c: &Conv3x3, out_h: usize, out_w: usize) {
        self.row(
            name,
            &c.params(),
            conv3x3_macs(c.in_channels, c.out_channels, out_h, out_w),
            0,
            0,
        );
    }

    fn dwconv(&mut self, name: &str, c: &DepthwiseConv3x3, out_h: usize, out_w: usize) {
        let bias_ops = if c.bias.is_some() {
            (c.channels * out_h * out_w) as u64
        } else {
            0
        };
        self.row(
            name,
            &c.params(),
            dwconv3x3_macs(c.channels, out_h, out_w),
            bias_ops,
            0,
        );
    }

    /// Normalization (2 ops per element) plus an optional ReLU (1 op).
    fn bn(&mut self, name: &str, bn: &BatchNorm, h: usize, w: usize, relu: bool) {
        let per = if relu { 3 } else { 2 };
        self.row(name, &bn.params(), 0, (per * bn.channels * h * w) as u64, 0);
    }

    fn ops(&mut self, name: &str, other_ops: u64, interp_macs: u64) {
        self.row(name, &[], 0, other_ops, interp_macs);
    }

    fn channel_attention(&mut self, name: &str, ca: &ChannelAttention, h: usize, w: usize) {
        let c = ca.channels;
        self.conv1x1(&format!("{name}.reduce"), &ca.reduce, 1, 1);
        self.conv1x1(&format!("{name}.expand"), &ca.expand, 1, 1);
        let r = ca.reduce.out_channels;
        // pooling, relu, sigmoid, gating product
        self.ops(
            &format!("{name}.gate"),
            (c * h * w + r + c + c * h * w) as u64,
            0,
        );
    }

    fn ffn(&mut self, name: &str, f: &FeedForwardNetwork, h: usize, w: usize) {
        let hidden = f.expand.out_channels;
        self.conv1x1(&format!("{name}.expand"), &f.expand, h, w);
        self.dwconv(&format!("{name}.dw"), &f.dw, h, w);
        self.conv1x1(&format!("{name}.project"), &f.project, h, w);
        self.ops(&format!("{name}.act"), (2 * hidden * h * w) as u64, 0);
    }

    fn cartesian(&mut self, name: &str, b: &CartesianBlock, h: usize, w: usize) {
        let c = b.channels;
        for br in &b.branches {
            let len = br.view.axis_len(c, h, w);
            let macs = (c * h * w * len) as u64;
            self.row(
                format!("{name}.{}.proj", br.view.name()),
                &br.conv.params(),
                macs,
                0,
                0,
            );
            self.bn(
                &format!("{name}.{}.bn", br.view.name()),
                &br.bn,
                h,
                w,
                false,
            );
        }
        let sums = (b.branches.len().saturating_sub(1) * c * h * w) as u64;
        if sums > 0 {
            self.ops(&format!("{name}.regroup"), sums, 0);
        }
        for (i, r) in b.refine.iter().enumerate() {
            self.dwconv(&format!("{name}.refine.{i}.dw"), &r.dw, h, w);
            self.bn(&format!("{name}.refine.{i}.bn_dw"), &r.bn_dw, h, w, true);
            self.dwconv(&format!("{name}.refine.{i}.dwd"), &r.dwd, h, w);
            self.bn(&format!("{name}.refine.{i}.bn_dwd"), &r.bn_dwd, h, w, true);
        }
        if let Some(ca) = &b.attention {
            self.channel_attention(&format!("{name}.ca"), ca, h, w);
        }
        self.ops(&format!("{name}.residual"), (c * h * w) as u64, 0);
    }

    fn attention(&mut self, name: &str, na: &NestedAttention, h: usize, w: usize) {
        let d = na.dim;
        let (gh, gw) = na.effective_grid(h, w);
        let n = gh * gw;
        self.ops(&format!("{name}.pool"), (d * h * w) as u64, 0);
        for (e, t) in na.triplets.iter().enumerate() {
            self.conv1x1(&format!("{name}.qkv.{e}.query"), &t.query, gh, gw);
            self.conv1x1(&format!("{name}.qkv.{e}.key"), &t.key, gh, gw);
            self.conv1x1(&format!("{name}.qkv.{e}.value"), &t.value, gh, gw);
        }
        // (ΣQ)(ΣK)ᵀ, then A·ΣV
        self.row(
            format!("{name}.logits"),
            &[],
            (n * n * d) as u64,
            (6 * d * n) as u64,
            0,
        );
        self.row(format!("{name}.softmax"), &[], 0, (4 * n * n) as u64, 0);
        self.row(format!("{name}.context"), &[], (n * n * d) as u64, 0, 0);
        self.ffn(&format!("{name}.ffn"), &na.ffn, gh, gw);
        let interp = if (gh, gw) == (h, w) {
            0
        } else {
            INTERP_MACS_PER_ELEMENT * (d * h * w) as u64
        };
        self.ops(&format!("{name}.residual_upsample"), (d * n) as u64, interp);
    }

    fn fusion(
        &mut self,
        name: &str,
        g: &GatedFusion,
        global_hw: (usize, usize),
        h: usize,
        w: usize,
    ) {
        let cg = g.gate_proj.in_channels;
        let out = g.out_channels();
        let interp = if global_hw == (h, w) {
            0
        } else {
            INTERP_MACS_PER_ELEMENT * (cg * h * w) as u64
        };
        self.ops(&format!("{name}.align"), 0, interp);
        self.conv1x1(&format!("{name}.local_proj"), &g.local_proj, h, w);
        self.conv1x1(&format!("{name}.gate_proj"), &g.gate_proj, h, w);
        self.conv1x1(&format!("{name}.global_proj"), &g.global_proj, h, w);
        // sigmoid, product, sum
        self.ops(&format!("{name}.gate"), (3 * out * h * w) as u64, 0);
    }

    fn head(
        &mut self,
        name: &str,
        head: &SegmentationHead,
        (h, w): (usize, usize),
        out: (usize, usize),
    ) {
        self.conv1x1(&format!("{name}.conv_a"), &head.conv_a, h, w);
        self.bn(&format!("{name}.bn"), &head.bn, h, w, true);
        self.conv1x1(&format!("{name}.conv_b"), &head.conv_b, h, w);
        let k = head.num_classes();
        let interp = if (h, w) == out {
            0
        } else {
            INTERP_MACS_PER_ELEMENT * (k * out.0 * out.1) as u64
        };
        self.ops(&format!("{name}.upsample"), 0, interp);
    }
}

fn resolution_bound(config: &ModelConfig) -> bool {
    config
        .enabled_views
        .iter()
        .any(|v| v.iter().any(|&view| view != View::Transverse))
}

/// Cost report at `resolution`.
///
/// Frontal and lateral projections are sized for the build resolution, so
/// probing any other size requires a transverse-only model.
pub fn count_costs(model: &LeMoReModel, resolution: (usize, usize)) -> Result<CostReport> {
    let config = model.config();
    let (h, w) = resolution;
    let s = config.max_stride();
    if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::invalid(format!(
            "probe resolution {h}x{w} is not divisible by the largest stride {s}"
        )));
    }
    if resolution != config.input_size && resolution_bound(config) {
        return Err(Error::config(
            "input_size",
            format!(
                "model was built for {}x{} with resolution-bound views; rebuild it at {h}x{w} to probe",
                config.input_size.0, config.input_size.1
            ),
        ));
    }
    let net = model.network();
    let mut l = Ledger {
        store: model.store(),
        rows: Vec::new(),
    };

    let (h1, w1) = (strided(h, 2), strided(w, 2));
    let (h2, w2) = (strided(h1, 2), strided(w1, 2));
    l.conv3x3("stem.conv1", &net.stem.conv1, h1, w1);
    l.bn("stem.bn1", &net.stem.bn1, h1, w1, true);
    l.conv3x3("stem.conv2", &net.stem.conv2, h2, w2);
    l.bn("stem.bn2", &net.stem.bn2, h2, w2, true);

    let mut hw = (h2, w2);
    let mut stage_hw = Vec::with_capacity(net.stages.len());
    for (i, stage) in net.stages.iter().enumerate() {
        if let Some(t) = &stage.transition {
            let (th, tw) = (strided(hw.0, 2), strided(hw.1, 2));
            let p = format!("stages.{i}.transition");
            l.dwconv(&format!("{p}.dw"), &t.dw, th, tw);
            l.bn(&format!("{p}.bn_dw"), &t.bn_dw, th, tw, true);
            l.conv1x1(&format!("{p}.pw"), &t.pw, th, tw);
            l.bn(&format!("{p}.bn_pw"), &t.bn_pw, th, tw, false);
            hw = (th, tw);
        }
        for (b, block) in stage.blocks.iter().enumerate() {
            l.cartesian(&format!("stages.{i}.blocks.{b}"), block, hw.0, hw.1);
        }
        stage_hw.push(hw);
    }
    let mut global_hw = hw;
    if let Some(na) = &net.bottleneck {
        l.attention("bottleneck", na, hw.0, hw.1);
    }
    for (k, f) in net.fusions.iter().enumerate() {
        let (fh, fw) = stage_hw[f.stage];
        l.fusion(&format!("decoder.fusions.{k}"), &f.gfm, global_hw, fh, fw);
        global_hw = (fh, fw);
    }
    l.head("decoder.head", &net.head, global_hw, resolution);

    let rows = l.rows;
    let macs: u64 = rows.iter().map(|r| r.macs).sum();
    let interp: u64 = rows.iter().map(|r| r.interp_macs).sum();
    let totals = CostTotals {
        params: rows.iter().map(|r| r.params).sum(),
        macs,
        flops: 2 * macs,
        other_ops: rows.iter().map(|r| r.other_ops).sum(),
        interp_macs: interp,
        flops_with_upsampling: 2 * (macs + interp),
    };
    Ok(CostReport {
        probe_resolution: resolution,
        convention: CONVENTION,
        rows,
        totals,
    })
}

/// Builds `config` at `resolution` and reports its cost there.
pub fn analyze_config(config: &ModelConfig, resolution: (usize, usize)) -> Result<CostReport> {
    let mut c = config.clone();
    c.input_size = resolution;
    count_costs(&LeMoReModel::build(&c)?, resolution)
}

impl CostReport {
    /// Sum over rows whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> (usize, u64) {
        self.rows
            .iter()
            .filter(|r| r.name == prefix || r.name.starts_with(&format!("{prefix}.")))
            .fold((0, 0), |(p, m), r| (p + r.params, m + r.macs))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = String::new();
        let (h, w) = self.probe_resolution;
        let _ = writeln!(out, "probe resolution: {h}x{w}");
        let _ = writeln!(
            out,
            "{:<width$}  {:>10}  {:>14}  {:>12}  {:>12}",
            "layer", "params", "macs", "other_ops", "interp_macs"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>10}  {:>14}  {:>12}  {:>12}",
                r.name, r.params, r.macs, r.other_ops, r.interp_macs
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            out,
            "{:<width$}  {:>10}  {:>14}  {:>12}  {:>12}",
            "total", t.params, t.macs, t.other_ops, t.interp_macs
        );
        let _ = writeln!(out, "parameters: {:.4}M", t.params as f64 / 1e6);
        let _ = writeln!(out, "GFLOPs (2*MACs): {:.4}", t.flops as f64 / 1e9);
        let _ = writeln!(
            out,
            "GFLOPs incl. upsampling: {:.4}",
            t.flops_with_upsampling as f64 / 1e9
        );
        out
    }
}

/// One ablation toggle combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Toggles {
    pub frontal: bool,
    pub lateral: bool,
    pub channel_attention: bool,
    pub nested_attention: bool,
}

impl Toggles {
    pub fn label(&self) -> String {
        let mut views = String::from("t");
        if self.frontal {
            views.push_str("+f");
        }
        if self.lateral {
            views.push_str("+l");
        }
        let ca = if self.channel_attention { "CA" } else { "-" };
        let na = if self.nested_attention { "N-Attn" } else { "-" };
        format!("views={views} ca={ca} attn={na}")
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        let mut views = vec![View::Transverse];
        if self.frontal {
            views.push(View::Frontal);
        }
        if self.lateral {
            views.push(View::Lateral);
        }
        c.enabled_views = vec![views; c.num_stages()];
        c.use_channel_attention = self.channel_attention;
        c.use_nested_attention = self.nested_attention;
        c
    }
}

const fn t(
    frontal: bool,
    lateral: bool,
    channel_attention: bool,
    nested_attention: bool,
) -> Toggles {
    Toggles {
        frontal,
        lateral,
        channel_attention,
        nested_attention,
    }
}

/// The eight toggle combinations, in ladder order.
pub const ABLATION_LADDER: [Toggles; 8] = [
    t(false, false, false, false),
    t(true, false, false, false),
    t(true, true, false, false),
    t(true, true, true, false),
    t(false, false, false, true),
    t(true, false, false, true),
    t(true, true, false, true),
    t(true, true, true, true),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationEntry {
    pub label: String,
    pub toggles: Toggles,
    pub params: usize,
    pub macs: u64,
    pub flops: u64,
}

pub fn ablation_ladder(base: &ModelConfig) -> Result<Vec<AblationEntry>> {
    ABLATION_LADDER
        .iter()
        .map(|tg| {
            let cfg = tg.apply(base);
            let report = analyze_config(&cfg, cfg.input_size)?;
            Ok(AblationEntry {
                label: tg.label(),
                toggles: *tg,
                params: report.totals.params,
                macs: report.totals.macs,
                flops: report.totals.flops,
            })
        })
        .collect()
}

pub fn ladder_strictly_increasing(entries: &[AblationEntry]) -> bool {
    entries.windows(2).all(|p| p[0].params < p[1].params)
}

pub fn ladder_text(entries: &[AblationEntry]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<36}  {:>10}  {:>8}  {:>8}",
        "configuration", "params", "M", "GFLOPs"
    );
    for e in entries {
        let _ = writeln!(
            out,
            "{:<36}  {:>10}  {:>8.4}  {:>8.4}",
            e.label,
            e.params,
            e.params as f64 / 1e6,
            e.flops as f64 / 1e9
        );
    }
    out
}
