use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attention::AttentionNormalization;
use crate::cartesian::View;
use crate::error::{Error, Result};

/// Declarative network description. Serialized field names are stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `(H, W)` of the input image.
    pub input_size: (usize, usize),
    pub num_classes: usize,
    pub stem_width: usize,
    pub stage_widths: Vec<usize>,
    /// Cumulative output stride of each stage.
    pub stage_strides: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    /// View subset used by every block of each stage.
    pub enabled_views: Vec<Vec<View>>,
    pub use_channel_attention: bool,
    pub use_nested_attention: bool,
    pub token_grid: (usize, usize),
    /// Stage indices (0-based) whose features enter the decoder.
    pub fusion_stages: Vec<usize>,
    pub seed: u64,
    #[serde(default = "defaults::decoder_width")]
    pub decoder_width: usize,
    #[serde(default = "defaults::refine_repeats")]
    pub refine_repeats: usize,
    #[serde(default = "defaults::ca_reduction")]
    pub ca_reduction: usize,
    #[serde(default)]
    pub attention_normalization: AttentionNormalization,
}

mod defaults {
    pub fn decoder_width() -> usize {
        64
    }
    pub fn refine_repeats() -> usize {
        1
    }
    pub fn ca_reduction() -> usize {
        4
    }
}

/// Stride of the stem output and of stage 0.
pub const STEM_STRIDE: usize = 4;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: (512, 512),
            num_classes: 150,
            stem_width: 8,
            stage_widths: vec![16, 24, 96, 160, 168],
            stage_strides: vec![4, 8, 16, 32, 64],
            blocks_per_stage: vec![1, 2, 1, 2, 25],
            enabled_views: vec![View::ALL.to_vec(); 5],
            use_channel_attention: true,
            use_nested_attention: true,
            token_grid: (8, 8),
            fusion_stages: vec![1, 2, 3],
            seed: 42,
            decoder_width: 64,
            refine_repeats: 2,
            ca_reduction: 32,
            attention_normalization: AttentionNormalization::Softmax,
        }
    }
}

impl ModelConfig {
    /// Two-stage configuration for desk-scale training at 64×64.
    pub fn toy() -> Self {
        ModelConfig {
            input_size: (64, 64),
            num_classes: 3,
            stem_width: 8,
            stage_widths: vec![16, 32],
            stage_strides: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            enabled_views: vec![View::ALL.to_vec(); 2],
            use_channel_attention: true,
            use_nested_attention: true,
            token_grid: (8, 8),
            fusion_stages: vec![0],
            seed: 42,
            decoder_width: 16,
            refine_repeats: 1,
            ca_reduction: 4,
            attention_normalization: AttentionNormalization::Softmax,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_widths.len()
    }

    /// Spatial size of stage `i` at the configured input size.
    pub fn stage_resolution(&self, i: usize) -> (usize, usize) {
        let s = self.stage_strides[i];
        (self.input_size.0 / s, self.input_size.1 / s)
    }

    pub fn max_stride(&self) -> usize {
        self.stage_strides.last().copied().unwrap_or(STEM_STRIDE)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_widths.len();
        if n < 2 {
            return Err(Error::config(
                "stage_widths",
                "at least two stages are required",
            ));
        }
        for (field, len) in [
            ("stage_strides", self.stage_strides.len()),
            ("blocks_per_stage", self.blocks_per_stage.len()),
            ("enabled_views", self.enabled_views.len()),
        ] {
            if len != n {
                return Err(Error::config(
                    field,
                    format!("has {len} entries but stage_widths has {n}"),
                ));
            }
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 {
            return Err(Error::config("input_size", "dimensions must be positive"));
        }
        for (field, v) in [
            ("num_classes", self.num_classes),
            ("stem_width", self.stem_width),
            ("decoder_width", self.decoder_width),
            ("ca_reduction", self.ca_reduction),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.stage_widths.contains(&0) {
            return Err(Error::config("stage_widths", "widths must be positive"));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::config(
                "blocks_per_stage",
                "every stage needs at least one block",
            ));
        }
        if self.stage_strides[0] != STEM_STRIDE {
            return Err(Error::config(
                "stage_strides",
                format!("first stride must be {STEM_STRIDE}"),
            ));
        }
        for pair in self.stage_strides.windows(2) {
            if pair[1] != 2 * pair[0] {
                return Err(Error::config(
                    "stage_strides",
                    format!(
                        "strides must double from stage to stage, got {} then {}",
                        pair[0], pair[1]
                    ),
                ));
            }
        }
        let s = self.max_stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::config(
                "input_size",
                format!("{h}x{w} is not divisible by the largest stride {s}"),
            ));
        }
        for (i, views) in self.enabled_views.iter().enumerate() {
            if views.is_empty() {
                return Err(Error::config(
                    "enabled_views",
                    format!("stage {i} enables no view"),
                ));
            }
            let mut sorted = views.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != views.len() {
                return Err(Error::config(
                    "enabled_views",
                    format!("stage {i} lists a view twice"),
                ));
            }
        }
        if self.token_grid.0 == 0 || self.token_grid.1 == 0 {
            return Err(Error::config("token_grid", "grid must be at least 1x1"));
        }
        if self.fusion_stages.is_empty() {
            return Err(Error::config(
                "fusion_stages",
                "at least one stage must feed the decoder",
            ));
        }
        let mut seen = vec![false; n];
        for &i in &self.fusion_stages {
            if i >= n {
                return Err(Error::config(
                    "fusion_stages",
                    format!("stage {i} does not exist"),
                ));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::config(
                    "fusion_stages",
                    format!("stage {i} listed twice"),
                ));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies one `dotted.key=value` override.
    ///
    /// Values are read as JSON when possible; `AxB` becomes a pair and
    /// comma lists become arrays. A flat view list given for
    /// `enabled_views` applies to every stage.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let mut value = parse_override_value(raw.trim());
        let mut doc = serde_json::to_value(&*self)?;
        if key == "enabled_views" {
            if let Value::String(_) = value {
                value = Value::Array(vec![value]);
            }
            if let Value::Array(items) = &value {
                if items.iter().all(Value::is_string) {
                    value = Value::Array(vec![value.clone(); self.num_stages()]);
                }
            }
        }
        let slot = key
            .split('.')
            .try_fold(&mut doc, |node, part| match node {
                Value::Object(map) => map.get_mut(part),
                Value::Array(items) => part
                    .parse::<usize>()
                    .ok()
                    .and_then(move |i| items.get_mut(i)),
                _ => None,
            })
            .ok_or_else(|| Error::config(key, "no such configuration field"))?;
        if slot.is_array() && !value.is_array() {
            value = Value::Array(vec![value]);
        }
        *slot = value;
        let updated: ModelConfig =
            serde_json::from_value(doc).map_err(|e| Error::config(key, e.to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

fn parse_override_value(raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return v;
    }
    if let Some((a, b)) = raw.split_once(['x', 'X']) {
        if let (Ok(a), Ok(b)) = (a.parse::<u64>(), b.parse::<u64>()) {
            return Value::Array(vec![a.into(), b.into()]);
        }
    }
    if raw.contains(',') {
        return Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(parse_override_value)
                .collect(),
        );
    }
    Value::String(raw.to_string())
}
