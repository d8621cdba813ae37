//! The assembled classifier.
//!
//! Layer order: stem conv → dual attention → four stages (one conv-block
//! then identity blocks) → dual attention → global average pool → MLP →
//! logits. Conv-blocks and identity blocks are bottlenecks: 1×1 reduce,
//! 3×3 grouped conv, 1×1 expand, added to the shortcut, then relu. The
//! conv-block downsamples by 2 in the grouped conv and projects the shortcut
//! with a strided 1×1 conv.

mod config;
mod loss;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;
pub use loss::cross_entropy;

use crate::attention::{
    dual_attention_traced, AttentionTrace, ChannelAttentionParams, SpatialAttentionParams,
};
use crate::error::{Error, Result};
use crate::layers::{
    batch_norm, global_avg_pool, grouped_conv2d, linear, update_running, BatchNormParams, BatchStats,
    Conv2dParams, Conv2dSpec, LinearParams, Mode, BN_EPS, BN_MOMENTUM,
};
use crate::tensor::Tensor;

/// Named trainable tensors, in registration order.
pub type ParamStore = IndexMap<String, Tensor>;

#[derive(Debug, Clone)]
struct ConvLayer {
    name: String,
    spec: Conv2dSpec,
    batch_norm: bool,
}

#[derive(Debug, Clone)]
struct Bottleneck {
    name: String,
    reduce: ConvLayer,
    grouped: ConvLayer,
    expand: ConvLayer,
    shortcut: Option<ConvLayer>,
}

#[derive(Debug, Clone)]
struct AttentionLayer {
    name: String,
    channels: usize,
    reduction: usize,
    kernel: usize,
}

#[derive(Debug, Clone)]
struct LinearLayer {
    name: String,
    inputs: usize,
    outputs: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: ConvLayer,
    attention_in: AttentionLayer,
    stages: Vec<Vec<Bottleneck>>,
    attention_out: AttentionLayer,
    head: Vec<LinearLayer>,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let bn = cfg.use_batch_norm;
        let conv = |name: String, spec: Conv2dSpec| ConvLayer {
            name,
            spec: spec.with_bias(!bn),
            batch_norm: bn,
        };
        let stem = conv("stem".into(), cfg.stem_spec());
        let attention = |name: &str, channels| AttentionLayer {
            name: name.into(),
            channels,
            reduction: cfg.reduction,
            kernel: cfg.spatial_kernel,
        };
        let mut stages = Vec::with_capacity(4);
        let mut in_c = cfg.stem_channels;
        for (s, &identities) in cfg.stage_identity_counts.iter().enumerate() {
            let width = cfg.stage_widths[s];
            let out_c = cfg.stage_out_channels(s);
            let mut blocks = Vec::with_capacity(identities + 1);
            for i in 0..=identities {
                let name = format!("stage{}.block{i}", s + 1);
                let (block_in, stride) = if i == 0 { (in_c, 2) } else { (out_c, 1) };
                blocks.push(Bottleneck {
                    reduce: conv(format!("{name}.reduce"), Conv2dSpec::square(block_in, width, 1, 1, 0)),
                    grouped: conv(
                        format!("{name}.grouped"),
                        Conv2dSpec::square(width, width, 3, stride, 1).with_groups(cfg.cardinality),
                    ),
                    expand: conv(format!("{name}.expand"), Conv2dSpec::square(width, out_c, 1, 1, 0)),
                    shortcut: (i == 0).then(|| {
                        conv(format!("{name}.shortcut"), Conv2dSpec::square(block_in, out_c, 1, stride, 0))
                    }),
                    name,
                });
            }
            stages.push(blocks);
            in_c = out_c;
        }
        let mut head = Vec::new();
        let mut width = cfg.final_channels();
        for (i, &h) in cfg.mlp_hidden.iter().chain(std::iter::once(&cfg.num_classes)).enumerate() {
            head.push(LinearLayer {
                name: format!("head.fc{i}"),
                inputs: width,
                outputs: h,
            });
            width = h;
        }
        Layout {
            stem,
            attention_in: attention("attention_in", cfg.stem_channels),
            stages,
            attention_out: attention("attention_out", cfg.final_channels()),
            head,
        }
    }
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, num_classes]`
    pub logits: Tensor,
    /// Pre-pool feature map after the second attention block.
    pub features: Tensor,
    /// Batch statistics per batch-norm layer (training mode only); apply with
    /// [`Model::commit_batch_stats`].
    pub batch_stats: Vec<(String, BatchStats)>,
    /// Multipliers of the two attention blocks, input side first.
    pub attention: Vec<AttentionTrace>,
}

/// One row of [`ParamTable`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockCount {
    pub block: String,
    pub params: usize,
}

/// Trainable parameter counts per named block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamTable {
    pub blocks: Vec<BlockCount>,
    pub total: usize,
}

impl ParamTable {
    pub fn get(&self, block: &str) -> Option<usize> {
        self.blocks.iter().find(|b| b.block == block).map(|b| b.params)
    }
}

/// The parameterized network.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore,
    /// Batch-norm running statistics, `<layer>.bn.running_mean` / `.running_var`.
    buffers: IndexMap<String, Vec<f64>>,
    /// Parameter name → owning block name.
    param_blocks: IndexMap<String, String>,
}

struct Builder {
    rng: ChaCha8Rng,
    params: ParamStore,
    buffers: IndexMap<String, Vec<f64>>,
    param_blocks: IndexMap<String, String>,
}

impl Builder {
    fn add(&mut self, block: &str, name: String, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        self.param_blocks.insert(name.clone(), block.to_string());
        let t = Tensor::parameter(shape, data)?;
        if self.params.insert(name.clone(), t).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        Ok(())
    }

    /// `U(−√(6/fan_in), √(6/fan_in))`.
    fn uniform(&mut self, block: &str, name: String, shape: Vec<usize>, fan_in: usize) -> Result<()> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.add(block, name, shape, data)
    }

    fn zeros(&mut self, block: &str, name: String, n: usize) -> Result<()> {
        self.add(block, name, vec![n], vec![0.0; n])
    }

    fn conv(&mut self, block: &str, layer: &ConvLayer) -> Result<()> {
        let spec = layer.spec;
        self.uniform(block, format!("{}.weight", layer.name), spec.weight_shape().to_vec(), spec.fan_in())?;
        if spec.bias {
            self.zeros(block, format!("{}.bias", layer.name), spec.out_channels)?;
        }
        if layer.batch_norm {
            let c = spec.out_channels;
            self.add(block, format!("{}.bn.gamma", layer.name), vec![c], vec![1.0; c])?;
            self.zeros(block, format!("{}.bn.beta", layer.name), c)?;
            self.buffers.insert(format!("{}.bn.running_mean", layer.name), vec![0.0; c]);
            self.buffers.insert(format!("{}.bn.running_var", layer.name), vec![1.0; c]);
        }
        Ok(())
    }

    fn attention(&mut self, layer: &AttentionLayer) -> Result<()> {
        let c = layer.channels;
        let h = c / layer.reduction;
        let block = format!("{}.channel", layer.name);
        self.uniform(&block, format!("{block}.w1"), vec![h, c], c)?;
        self.uniform(&block, format!("{block}.w2"), vec![c, h], h)?;
        let block = format!("{}.spatial", layer.name);
        let k = layer.kernel;
        for branch in ["avg", "max"] {
            self.uniform(&block, format!("{block}.{branch}.weight"), vec![1, 1, k, k], k * k)?;
            self.zeros(&block, format!("{block}.{branch}.bias"), 1)?;
        }
        Ok(())
    }
}

struct Ctx<'a> {
    model: &'a Model,
    mode: Mode,
    detach: bool,
    stats: Vec<(String, BatchStats)>,
}

impl Ctx<'_> {
    fn param(&self, name: &str) -> Result<Tensor> {
        let t = self
            .model
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        Ok(if self.detach { t.detach() } else { t.clone() })
    }

    fn buffer(&self, name: &str) -> Result<Vec<f64>> {
        self.model
            .buffers
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("missing buffer {name}")))
    }

    fn conv(&mut self, layer: &ConvLayer, x: &Tensor, relu: bool) -> Result<Tensor> {
        let run = |ctx: &mut Self| -> Result<Tensor> {
            let bias = if layer.spec.bias {
                Some(ctx.param(&format!("{}.bias", layer.name))?)
            } else {
                None
            };
            let p = Conv2dParams::new(layer.spec, ctx.param(&format!("{}.weight", layer.name))?, bias)?;
            let mut y = grouped_conv2d(x, &p)?;
            if layer.batch_norm {
                let bn = format!("{}.bn", layer.name);
                let p = BatchNormParams {
                    gamma: ctx.param(&format!("{bn}.gamma"))?,
                    beta: ctx.param(&format!("{bn}.beta"))?,
                    running_mean: ctx.buffer(&format!("{bn}.running_mean"))?,
                    running_var: ctx.buffer(&format!("{bn}.running_var"))?,
                    eps: BN_EPS,
                    momentum: BN_MOMENTUM,
                };
                let (out, stats) = batch_norm(&y, &p, ctx.mode)?;
                if let Some(stats) = stats {
                    ctx.stats.push((bn, stats));
                }
                y = out;
            }
            if relu {
                y = y.relu()?;
            }
            Ok(y)
        };
        run(self).map_err(|e| e.in_layer(&layer.name))
    }

    fn bottleneck(&mut self, block: &Bottleneck, x: &Tensor) -> Result<Tensor> {
        let h = self.conv(&block.reduce, x, true)?;
        let h = self.conv(&block.grouped, &h, true)?;
        let h = self.conv(&block.expand, &h, false)?;
        let shortcut = match &block.shortcut {
            Some(layer) => self.conv(layer, x, false)?,
            None => x.clone(),
        };
        h.add(&shortcut)
            .and_then(|s| s.relu())
            .map_err(|e| e.in_layer(&block.name))
    }

    fn attention(&mut self, layer: &AttentionLayer, x: &Tensor) -> Result<(Tensor, AttentionTrace)> {
        let run = |ctx: &mut Self| -> Result<(Tensor, AttentionTrace)> {
            let n = &layer.name;
            let cp = ChannelAttentionParams::new(
                layer.channels,
                layer.reduction,
                ctx.param(&format!("{n}.channel.w1"))?,
                ctx.param(&format!("{n}.channel.w2"))?,
            )?;
            let spec = SpatialAttentionParams::branch_spec(layer.kernel)?;
            let branch = |ctx: &Self, b: &str| {
                Conv2dParams::new(
                    spec,
                    ctx.param(&format!("{n}.spatial.{b}.weight"))?,
                    Some(ctx.param(&format!("{n}.spatial.{b}.bias"))?),
                )
            };
            let sp = SpatialAttentionParams::new(branch(ctx, "avg")?, branch(ctx, "max")?)?;
            dual_attention_traced(x, &cp, &sp)
        };
        run(self).map_err(|e| e.in_layer(&layer.name))
    }

    fn head(&mut self, layers: &[LinearLayer], x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in layers.iter().enumerate() {
            let p = LinearParams::new(
                self.param(&format!("{}.weight", layer.name))?,
                self.param(&format!("{}.bias", layer.name))?,
            )?;
            h = linear(&h, &p).map_err(|e| e.in_layer(&layer.name))?;
            if i + 1 < layers.len() {
                h = h.relu().map_err(|e| e.in_layer(&layer.name))?;
            }
        }
        Ok(h)
    }
}

/// Builds the network with parameters drawn deterministically from `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: IndexMap::new(),
        buffers: IndexMap::new(),
        param_blocks: IndexMap::new(),
    };
    b.conv("stem", &layout.stem)?;
    b.attention(&layout.attention_in)?;
    for stage in &layout.stages {
        for block in stage {
            for layer in [Some(&block.reduce), Some(&block.grouped), Some(&block.expand), block.shortcut.as_ref()]
                .into_iter()
                .flatten()
            {
                b.conv(&block.name, layer)?;
            }
        }
    }
    b.attention(&layout.attention_out)?;
    for layer in &layout.head {
        b.uniform("head", format!("{}.weight", layer.name), vec![layer.outputs, layer.inputs], layer.inputs)?;
        b.zeros("head", format!("{}.bias", layer.name), layer.outputs)?;
    }
    Ok(Model {
        config: cfg.clone(),
        layout,
        params: b.params,
        buffers: b.buffers,
        param_blocks: b.param_blocks,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &ParamStore {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &IndexMap<String, Vec<f64>> {
        &self.buffers
    }

    /// Replaces a buffer's values; the name and length must already exist.
    pub fn set_buffer(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        match self.buffers.get_mut(name) {
            Some(b) if b.len() == values.len() => {
                *b = values;
                Ok(())
            }
            Some(b) => Err(Error::shape("set_buffer", format!("{name}: {} values, expected {}", values.len(), b.len()))),
            None => Err(Error::Config(format!("unknown buffer {name}"))),
        }
    }

    /// Replaces a parameter tensor; name and shape must match.
    pub fn set_parameter(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.params.get_mut(name) {
            Some(p) if p.shape() == value.shape() => {
                *p = value;
                Ok(())
            }
            Some(p) => Err(Error::shape(
                "set_parameter",
                format!("{name}: shape {:?}, expected {:?}", value.shape(), p.shape()),
            )),
            None => Err(Error::Config(format!("unknown parameter {name}"))),
        }
    }

    /// Copy of the model with one parameter replaced.
    pub fn with_parameter(&self, name: &str, value: Tensor) -> Result<Model> {
        let mut m = self.clone();
        m.set_parameter(name, value)?;
        Ok(m)
    }

    pub fn zero_grads(&self) {
        self.params.values().for_each(Tensor::reset_grad);
    }

    /// Number of blocks (conv-block + identity blocks) per stage.
    pub fn stage_block_counts(&self) -> Vec<usize> {
        self.layout.stages.iter().map(Vec::len).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let cfg = &self.config;
        match *x.shape() {
            [_, c, h, w] if c == cfg.input_channels && (h, w) == cfg.input_size => Ok(()),
            _ => Err(Error::shape(
                "model",
                format!(
                    "input {:?}, model expects [B, {}, {}, {}]",
                    x.shape(),
                    cfg.input_channels,
                    cfg.input_size.0,
                    cfg.input_size.1
                ),
            )),
        }
    }

    fn run(&self, x: &Tensor, mode: Mode, detach: bool) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let mut ctx = Ctx {
            model: self,
            mode,
            detach,
            stats: Vec::new(),
        };
        let l = &self.layout;
        let h = ctx.conv(&l.stem, x, true)?;
        let (mut h, trace_in) = ctx.attention(&l.attention_in, &h)?;
        for stage in &l.stages {
            for block in stage {
                h = ctx.bottleneck(block, &h)?;
            }
        }
        let (features, trace_out) = ctx.attention(&l.attention_out, &h)?;
        let b = features.shape()[0];
        let c = features.shape()[1];
        let pooled = global_avg_pool(&features)
            .and_then(|p| p.reshape(vec![b, c]))
            .map_err(|e| e.in_layer("pool"))?;
        let logits = ctx.head(&l.head, &pooled)?;
        Ok(ForwardOutput {
            logits,
            features,
            batch_stats: ctx.stats,
            attention: vec![trace_in, trace_out],
        })
    }

    /// Differentiable forward pass over `[B, C, H, W]` input.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        self.run(x, mode, false)
    }

    /// Eval-mode logits without building a gradient graph.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, Mode::Eval, true).map(|o| o.logits)
    }

    /// Runs a single bottleneck block (`stage` and `index` 0-based).
    pub fn run_block(&self, stage: usize, index: usize, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let block = self
            .layout
            .stages
            .get(stage)
            .and_then(|s| s.get(index))
            .ok_or_else(|| Error::Config(format!("no block {index} in stage {stage}")))?;
        let mut ctx = Ctx {
            model: self,
            mode,
            detach: false,
            stats: Vec::new(),
        };
        ctx.bottleneck(block, x)
    }

    /// Names of the parameters belonging to the residual branch of a block.
    pub fn block_parameter_names(&self, stage: usize, index: usize) -> Vec<String> {
        let prefix = format!("stage{}.block{index}.", stage + 1);
        self.params.keys().filter(|k| k.starts_with(&prefix)).cloned().collect()
    }

    /// Folds training-mode batch statistics into the running statistics.
    pub fn commit_batch_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (bn, s) in stats {
            let mean_key = format!("{bn}.running_mean");
            let var_key = format!("{bn}.running_var");
            let mut mean = self
                .buffers
                .get(&mean_key)
                .cloned()
                .ok_or_else(|| Error::Config(format!("unknown buffer {mean_key}")))?;
            let var = self
                .buffers
                .get_mut(&var_key)
                .ok_or_else(|| Error::Config(format!("unknown buffer {var_key}")))?;
            update_running(&mut mean, var, s, BN_MOMENTUM);
            self.buffers.insert(mean_key, mean);
        }
        Ok(())
    }

    /// Exact trainable parameter counts grouped by block.
    pub fn count_parameters(&self) -> ParamTable {
        let mut per_block: IndexMap<&str, usize> = IndexMap::new();
        for (name, t) in &self.params {
            let block = self.param_blocks.get(name).map_or(name.as_str(), String::as_str);
            *per_block.entry(block).or_default() += t.numel();
        }
        let blocks: Vec<BlockCount> = per_block
            .into_iter()
            .map(|(block, params)| BlockCount {
                block: block.to_string(),
                params,
            })
            .collect();
        let total = blocks.iter().map(|b| b.params).sum();
        ParamTable { blocks, total }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::scaled(16, 4, (32, 32));
        c.stage_identity_counts = vec![1, 1, 1, 1];
        c.mlp_hidden = vec![8];
        c
    }

    fn input(b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * 3 * 32 * 32;
        Tensor::new(vec![b, 3, 32, 32], (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn block_counts_per_stage() {
        let m = build_model(&ModelConfig::reduced(), 0).unwrap();
        assert_eq!(m.stage_block_counts(), vec![3, 4, 6, 4]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&tiny(), 11).unwrap();
        let b = build_model(&tiny(), 11).unwrap();
        let c = build_model(&tiny(), 12).unwrap();
        assert!(a.parameters().keys().eq(b.parameters().keys()));
        for (x, y) in a.parameters().values().zip(b.parameters().values()) {
            assert_eq!(x.values(), y.values());
        }
        assert!(a.parameters().values().zip(c.parameters().values()).any(|(x, y)| x.values() != y.values()));
    }

    #[test]
    fn output_shape_and_determinism() {
        let m = build_model(&tiny(), 1).unwrap();
        for b in [1, 4] {
            let x = input(b, b as u64);
            let y = m.predict(&x).unwrap();
            assert_eq!(y.shape(), &[b, 2]);
            assert_eq!(m.predict(&x).unwrap().values(), y.values());
        }
        let x = input(2, 9);
        let out = m.forward(&x, Mode::Train).unwrap();
        assert_eq!(out.logits.shape(), &[2, 2]);
        assert_eq!(out.features.shape(), &[2, 512, 1, 1]);
        assert!(!out.batch_stats.is_empty());
    }

    #[test]
    fn rejects_wrong_input_size() {
        let m = build_model(&tiny(), 1).unwrap();
        let x = Tensor::zeros(vec![1, 3, 16, 16]).unwrap();
        assert!(m.predict(&x).is_err());
    }

    #[test]
    fn zeroed_identity_branch_is_identity() {
        let mut m = build_model(&tiny(), 3).unwrap();
        let names = m.block_parameter_names(1, 1);
        assert!(!names.is_empty());
        for n in names {
            let shape = m.parameters()[&n].shape().to_vec();
            m.set_parameter(&n, Tensor::zeros(shape).unwrap()).unwrap();
        }
        // block inputs in the network are post-relu, hence non-negative
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 2 * 128 * 4 * 4;
        let x = Tensor::new(vec![2, 128, 4, 4], (0..n).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let y = m.run_block(1, 1, &x, mode).unwrap();
            assert_eq!(y.values(), x.values());
        }
    }

    #[test]
    fn paper_literal_variant_without_batch_norm() {
        let mut cfg = tiny();
        cfg.use_batch_norm = false;
        let m = build_model(&cfg, 5).unwrap();
        assert!(m.buffers().is_empty());
        assert!(m.parameters().contains_key("stem.bias"));
        let y = m.forward(&input(1, 2), Mode::Train).unwrap();
        assert!(y.logits.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn attention_block_counts() {
        let m = build_model(&ModelConfig::default(), 0).unwrap();
        let table = m.count_parameters();
        assert_eq!(table.get("attention_in.channel"), Some(512));
        assert_eq!(table.get("attention_out.channel"), Some(2 * 2048 * 2048 / 16));
        assert_eq!(table.total, table.blocks.iter().map(|b| b.params).sum::<usize>());
    }

    #[test]
    fn commit_updates_running_stats() {
        let mut m = build_model(&tiny(), 1).unwrap();
        let before = m.buffers()["stem.bn.running_mean"].clone();
        let out = m.forward(&input(2, 3), Mode::Train).unwrap();
        m.commit_batch_stats(&out.batch_stats).unwrap();
        assert_ne!(m.buffers()["stem.bn.running_mean"], before);
    }
}
