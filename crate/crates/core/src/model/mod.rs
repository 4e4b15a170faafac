//! Full network assembly: stem, Cartesian stages, attention bottleneck,
//! gated-fusion decoder and segmentation head.

mod config;

pub use config::{ModelConfig, STEM_STRIDE};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::NestedAttention;
use crate::autodiff::Var;
use crate::cartesian::{CartesianBlock, CartesianSpec};
use crate::decoder::{argmax_labels, GatedFusion, SegmentationHead};
use crate::error::{Error, Result};
use crate::nn::{each, BatchNorm, Conv1x1, Conv3x3, DepthwiseConv3x3};
use crate::params::{ParamBuilder, ParamStore, Session};
use crate::tensor::Tensor;

pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone)]
pub struct Stem {
    pub conv1: Conv3x3,
    pub bn1: BatchNorm,
    pub conv2: Conv3x3,
    pub bn2: BatchNorm,
}

/// Stride-2 downsampling between stages: depthwise 3×3 then pointwise 1×1.
#[derive(Debug, Clone)]
pub struct Transition {
    pub dw: DepthwiseConv3x3,
    pub bn_dw: BatchNorm,
    pub pw: Conv1x1,
    pub bn_pw: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub transition: Option<Transition>,
    pub blocks: Vec<CartesianBlock>,
    pub width: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct Fusion {
    /// Stage whose output is the local input.
    pub stage: usize,
    pub gfm: GatedFusion,
}

/// Layer structure without parameter values.
#[derive(Debug, Clone)]
pub struct Network {
    pub stem: Stem,
    pub stages: Vec<Stage>,
    pub bottleneck: Option<NestedAttention>,
    /// Deepest stage first.
    pub fusions: Vec<Fusion>,
    pub head: SegmentationHead,
    pub input_size: (usize, usize),
}

/// Hook receiving `(layer name, output value)` as the forward pass runs.
pub type TraceHook<'h> = &'h mut dyn FnMut(&str, &Tensor);

impl Network {
    fn build(config: &ModelConfig, pb: &mut ParamBuilder<'_>) -> Result<Self> {
        let stem = {
            let mut sb = pb.scope("stem");
            let c0 = config.stage_widths[0];
            Stem {
                conv1: Conv3x3::new(&mut sb.scope("conv1"), INPUT_CHANNELS, config.stem_width, 2)?,
                bn1: BatchNorm::new(&mut sb.scope("bn1"), config.stem_width)?,
                conv2: Conv3x3::new(&mut sb.scope("conv2"), config.stem_width, c0, 2)?,
                bn2: BatchNorm::new(&mut sb.scope("bn2"), c0)?,
            }
        };
        let mut stages = Vec::with_capacity(config.num_stages());
        let mut cin = config.stage_widths[0];
        for i in 0..config.num_stages() {
            let mut sb = pb.scope(format!("stages.{i}"));
            let width = config.stage_widths[i];
            let transition = if i == 0 {
                None
            } else {
                let mut tb = sb.scope("transition");
                Some(Transition {
                    dw: DepthwiseConv3x3::new(&mut tb.scope("dw"), cin, 1, 2, false)?,
                    bn_dw: BatchNorm::new(&mut tb.scope("bn_dw"), cin)?,
                    pw: Conv1x1::new(&mut tb.scope("pw"), cin, width, false)?,
                    bn_pw: BatchNorm::new(&mut tb.scope("bn_pw"), width)?,
                })
            };
            let (h, w) = config.stage_resolution(i);
            let spec = CartesianSpec {
                channels: width,
                height: h,
                width: w,
                views: &config.enabled_views[i],
                refine_repeats: config.refine_repeats,
                attention_ratio: config.use_channel_attention.then_some(config.ca_reduction),
            };
            let blocks = (0..config.blocks_per_stage[i])
                .map(|b| CartesianBlock::new(&mut sb.scope(format!("blocks.{b}")), &spec))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage {
                transition,
                blocks,
                width,
                stride: config.stage_strides[i],
            });
            cin = width;
        }
        let last = *config.stage_widths.last().expect("validated");
        let bottleneck = config
            .use_nested_attention
            .then(|| {
                NestedAttention::new(
                    &mut pb.scope("bottleneck"),
                    last,
                    config.token_grid,
                    config.attention_normalization,
                )
            })
            .transpose()?;
        let mut order = config.fusion_stages.clone();
        order.sort_unstable_by(|a, b| b.cmp(a));
        let mut fusions = Vec::with_capacity(order.len());
        let mut global = last;
        for (k, &stage) in order.iter().enumerate() {
            let gfm = GatedFusion::new(
                &mut pb.scope(format!("decoder.fusions.{k}")),
                config.stage_widths[stage],
                global,
                config.decoder_width,
            )?;
            fusions.push(Fusion { stage, gfm });
            global = config.decoder_width;
        }
        let head = SegmentationHead::new(
            &mut pb.scope("decoder.head"),
            config.decoder_width,
            config.num_classes,
        )?;
        Ok(Network {
            stem,
            stages,
            bottleneck,
            fusions,
            head,
            input_size: config.input_size,
        })
    }

    /// Logits `K×H×W` for one `3×H×W` image.
    pub fn forward(&self, s: &mut Session<'_>, image: Var) -> Result<Var> {
        self.forward_traced(s, image, &mut |_, _| {})
    }

    pub fn forward_traced(
        &self,
        s: &mut Session<'_>,
        image: Var,
        hook: TraceHook<'_>,
    ) -> Result<Var> {
        Ok(self.forward_batch_traced(s, &[image], hook)?.remove(0))
    }

    /// Logits for every image of a mini-batch. Only normalization layers
    /// look across images.
    pub fn forward_batch(&self, s: &mut Session<'_>, images: &[Var]) -> Result<Vec<Var>> {
        self.forward_batch_traced(s, images, &mut |_, _| {})
    }

    /// The hook sees the first image of the batch.
    pub fn forward_batch_traced(
        &self,
        s: &mut Session<'_>,
        images: &[Var],
        hook: TraceHook<'_>,
    ) -> Result<Vec<Var>> {
        if images.is_empty() {
            return Err(Error::invalid("empty image batch"));
        }
        let (h, w) = self.input_size;
        for &image in images {
            let shape = s.value(image).shape().to_vec();
            if shape != [INPUT_CHANNELS, h, w] {
                return Err(Error::shape(format!(
                    "model expects a {INPUT_CHANNELS}x{h}x{w} image, got {shape:?}"
                )));
            }
        }
        let mut emit = |s: &Session<'_>, name: &str, v: &[Var]| hook(name, s.value(v[0]));
        emit(s, "input", images);

        let st = &self.stem;
        let mut x = each(images, |v| st.conv1.forward(s, v))?;
        x = st.bn1.forward_batch(s, &x)?;
        x = each(&x, |v| {
            let v = s.tape.relu(v)?;
            st.conv2.forward(s, v)
        })?;
        x = st.bn2.forward_batch(s, &x)?;
        x = each(&x, |v| s.tape.relu(v))?;
        emit(s, "stem", &x);

        let mut outs = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(t) = &stage.transition {
                x = each(&x, |v| t.dw.forward(s, v))?;
                x = t.bn_dw.forward_batch(s, &x)?;
                x = each(&x, |v| {
                    let v = s.tape.relu(v)?;
                    t.pw.forward(s, v)
                })?;
                x = t.bn_pw.forward_batch(s, &x)?;
                emit(s, &format!("stages.{i}.transition"), &x);
            }
            for (b, block) in stage.blocks.iter().enumerate() {
                x = block.forward_batch(s, &x)?;
                emit(s, &format!("stages.{i}.blocks.{b}"), &x);
            }
            outs.push(x.clone());
        }

        let mut global = outs.last().expect("at least two stages").clone();
        if let Some(na) = &self.bottleneck {
            global = each(&global, |v| na.forward(s, v))?;
            emit(s, "bottleneck", &global);
        }
        for (k, f) in self.fusions.iter().enumerate() {
            global = outs[f.stage]
                .iter()
                .zip(&global)
                .map(|(&l, &g)| f.gfm.forward(s, l, g))
                .collect::<Result<_>>()?;
            emit(s, &format!("decoder.fusions.{k}"), &global);
        }
        let logits = self.head.forward_batch(s, &global, h, w)?;
        emit(s, "decoder.head", &logits);
        Ok(logits)
    }
}

/// A built network plus its parameter registry.
#[derive(Debug, Clone)]
pub struct LeMoReModel {
    config: ModelConfig,
    network: Network,
    store: ParamStore,
}

impl LeMoReModel {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let network = Network::build(config, &mut ParamBuilder::new(&mut store, &mut rng))?;
        Ok(LeMoReModel {
            config: config.clone(),
            network,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Eval-mode logits.
    pub fn infer(&self, image: &Tensor) -> Result<Tensor> {
        let mut s = Session::eval(&self.store);
        let x = s.input(image.clone());
        let y = self.network.forward(&mut s, x)?;
        Ok(s.value(y).clone())
    }

    /// Eval-mode label map, row-major `H×W`.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<u32>> {
        argmax_labels(&self.infer(image)?)
    }

    /// Output shape of every traced layer on a zero image.
    pub fn shape_trace(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let (h, w) = self.config.input_size;
        let mut trace = Vec::new();
        let mut s = Session::eval(&self.store);
        let x = s.input(Tensor::zeros(&[INPUT_CHANNELS, h, w])?);
        self.network.forward_traced(&mut s, x, &mut |name, t| {
            trace.push((name.to_string(), t.shape().to_vec()))
        })?;
        Ok(trace)
    }
}
