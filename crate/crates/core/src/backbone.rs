//! Residual backbone with grouped bottlenecks, optional grouped attention
//! modules, an L2-normalised embedding head and analytic parameter counting.

use std::fmt::{self, Write as _};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{GamOutput, GroupedAttentionModule};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, BatchStats, Binding, Conv2d, Linear, Mode, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const PRESETS: [&str; 3] = ["resnet50-baseline", "resnet50-gam", "tiny"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolConfig {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pool: Option<PoolConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BottleneckConfig {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub groups: usize,
    pub has_projection: bool,
    pub attention: bool,
}

impl BottleneckConfig {
    fn validate(&self) -> Result<()> {
        let g = self.groups;
        if g == 0 {
            return Err(Error::config("groups must be positive"));
        }
        for c in [self.in_channels, self.mid_channels, self.out_channels] {
            if c == 0 || c % g != 0 {
                return Err(Error::config(format!("channel count {c} not divisible by {g} groups")));
            }
        }
        if self.stride == 0 {
            return Err(Error::config("stride must be positive"));
        }
        let needs_projection = self.stride > 1 || self.in_channels != self.out_channels;
        if needs_projection && !self.has_projection {
            return Err(Error::config(format!(
                "block {}->{} stride {} needs a projection shortcut",
                self.in_channels, self.out_channels, self.stride
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub preset: String,
    pub in_channels: usize,
    pub stem: StemConfig,
    pub stages: Vec<Vec<BottleneckConfig>>,
    pub embedding_dim: usize,
    pub groups: usize,
}

fn resnet_stages(groups: usize, attention: bool, widths: &[(usize, usize, usize)], first_in: usize) -> Vec<Vec<BottleneckConfig>> {
    // widths: (blocks, mid, out) per stage
    let mut stages = Vec::new();
    let mut in_channels = first_in;
    for (s, &(blocks, mid, out)) in widths.iter().enumerate() {
        let mut stage = Vec::new();
        for b in 0..blocks {
            let stride = if b == 0 && s > 0 { 2 } else { 1 };
            stage.push(BottleneckConfig {
                in_channels,
                mid_channels: mid,
                out_channels: out,
                stride,
                groups,
                has_projection: b == 0,
                attention,
            });
            in_channels = out;
        }
        stages.push(stage);
    }
    stages
}

impl BackboneConfig {
    /// Build a named preset. `groups` and `embedding_dim` override the preset
    /// defaults when given.
    pub fn preset(name: &str, groups: Option<usize>, embedding_dim: Option<usize>) -> Result<Self> {
        let resnet_stem = StemConfig {
            out_channels: 64,
            kernel: 7,
            stride: 2,
            padding: 3,
            pool: Some(PoolConfig { kernel: 3, stride: 2, padding: 1 }),
        };
        let resnet_widths = [(3, 64, 256), (4, 128, 512), (6, 256, 1024), (3, 512, 2048)];
        let cfg = match name {
            "resnet50-baseline" => {
                let g = groups.unwrap_or(1);
                BackboneConfig {
                    preset: name.into(),
                    in_channels: 3,
                    stem: resnet_stem,
                    stages: resnet_stages(g, false, &resnet_widths, 64),
                    embedding_dim: embedding_dim.unwrap_or(512),
                    groups: g,
                }
            }
            "resnet50-gam" => {
                let g = groups.unwrap_or(4);
                BackboneConfig {
                    preset: name.into(),
                    in_channels: 3,
                    stem: resnet_stem,
                    stages: resnet_stages(g, true, &resnet_widths, 64),
                    embedding_dim: embedding_dim.unwrap_or(512),
                    groups: g,
                }
            }
            "tiny" => {
                let g = groups.unwrap_or(4);
                BackboneConfig {
                    preset: name.into(),
                    in_channels: 3,
                    stem: StemConfig { out_channels: 16, kernel: 3, stride: 1, padding: 1, pool: None },
                    stages: resnet_stages(g, true, &[(1, 16, 32), (1, 32, 64)], 16),
                    embedding_dim: embedding_dim.unwrap_or(128),
                    groups: g,
                }
            }
            other => {
                return Err(Error::config(format!(
                    "unknown preset {other:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        if self.in_channels == 0 || self.stem.out_channels == 0 || self.stem.kernel == 0 || self.stem.stride == 0 {
            return Err(Error::config("stem extents must be positive"));
        }
        let mut channels = self.stem.out_channels;
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.is_empty() {
                return Err(Error::config(format!("stage {s} has no blocks")));
            }
            for (b, block) in stage.iter().enumerate() {
                if block.in_channels != channels {
                    return Err(Error::config(format!(
                        "stage {s} block {b} expects {} input channels, previous layer gives {channels}",
                        block.in_channels
                    )));
                }
                block.validate()?;
                channels = block.out_channels;
            }
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.stages
            .last()
            .and_then(|s| s.last())
            .map_or(self.stem.out_channels, |b| b.out_channels)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BottleneckConfig> {
        self.stages.iter().flatten()
    }

    /// Line-oriented text form, parsed back by [`BackboneConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "preset = {}", self.preset);
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let pool = match self.stem.pool {
            Some(p) => format!("{}/{}/{}", p.kernel, p.stride, p.padding),
            None => "none".into(),
        };
        let _ = writeln!(
            s,
            "stem = out={} kernel={} stride={} padding={} pool={pool}",
            self.stem.out_channels, self.stem.kernel, self.stem.stride, self.stem.padding
        );
        for (i, stage) in self.stages.iter().enumerate() {
            for b in stage {
                let _ = writeln!(
                    s,
                    "block = stage={i} in={} mid={} out={} stride={} groups={} projection={} attention={}",
                    b.in_channels, b.mid_channels, b.out_channels, b.stride, b.groups, b.has_projection, b.attention
                );
            }
        }
        let _ = writeln!(s, "embedding_dim = {}", self.embedding_dim);
        let _ = writeln!(s, "groups = {}", self.groups);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        fn fields(v: &str) -> Result<Vec<(&str, &str)>> {
            v.split_whitespace()
                .map(|kv| kv.split_once('=').ok_or_else(|| Error::format(format!("bad field {kv:?}"))))
                .collect()
        }
        fn num<T: std::str::FromStr>(v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::format(format!("bad number {v:?}")))
        }
        let mut preset = None;
        let mut in_channels = None;
        let mut stem = None;
        let mut stages: Vec<Vec<BottleneckConfig>> = Vec::new();
        let mut embedding_dim = None;
        let mut groups = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::format(format!("bad config line {line:?}")))?;
            match key {
                "preset" => preset = Some(value.to_string()),
                "in_channels" => in_channels = Some(num(value)?),
                "embedding_dim" => embedding_dim = Some(num(value)?),
                "groups" => groups = Some(num(value)?),
                "stem" => {
                    let mut st = StemConfig { out_channels: 0, kernel: 0, stride: 0, padding: 0, pool: None };
                    for (k, v) in fields(value)? {
                        match k {
                            "out" => st.out_channels = num(v)?,
                            "kernel" => st.kernel = num(v)?,
                            "stride" => st.stride = num(v)?,
                            "padding" => st.padding = num(v)?,
                            "pool" if v == "none" => st.pool = None,
                            "pool" => {
                                let p: Vec<usize> = v.split('/').map(num).collect::<Result<_>>()?;
                                let [kernel, stride, padding] = p[..] else {
                                    return Err(Error::format(format!("bad pool spec {v:?}")));
                                };
                                st.pool = Some(PoolConfig { kernel, stride, padding });
                            }
                            _ => return Err(Error::format(format!("unknown stem field {k:?}"))),
                        }
                    }
                    stem = Some(st);
                }
                "block" => {
                    let mut stage = None;
                    let mut b = BottleneckConfig {
                        in_channels: 0,
                        mid_channels: 0,
                        out_channels: 0,
                        stride: 0,
                        groups: 0,
                        has_projection: false,
                        attention: false,
                    };
                    for (k, v) in fields(value)? {
                        match k {
                            "stage" => stage = Some(num::<usize>(v)?),
                            "in" => b.in_channels = num(v)?,
                            "mid" => b.mid_channels = num(v)?,
                            "out" => b.out_channels = num(v)?,
                            "stride" => b.stride = num(v)?,
                            "groups" => b.groups = num(v)?,
                            "projection" => b.has_projection = num(v)?,
                            "attention" => b.attention = num(v)?,
                            _ => return Err(Error::format(format!("unknown block field {k:?}"))),
                        }
                    }
                    let stage = stage.ok_or_else(|| Error::format("block without stage"))?;
                    if stage > stages.len() {
                        return Err(Error::format(format!("stage {stage} out of order")));
                    }
                    if stage == stages.len() {
                        stages.push(Vec::new());
                    }
                    stages[stage].push(b);
                }
                other => return Err(Error::format(format!("unknown backbone key {other:?}"))),
            }
        }
        let missing = |what: &str| Error::format(format!("backbone config missing {what}"));
        let cfg = BackboneConfig {
            preset: preset.ok_or_else(|| missing("preset"))?,
            in_channels: in_channels.ok_or_else(|| missing("in_channels"))?,
            stem: stem.ok_or_else(|| missing("stem"))?,
            stages,
            embedding_dim: embedding_dim.ok_or_else(|| missing("embedding_dim"))?,
            groups: groups.ok_or_else(|| missing("groups"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameter counts by category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub conv: usize,
    pub bn: usize,
    pub linear: usize,
    pub attention: usize,
    pub total: usize,
}

impl fmt::Display for ParamBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "conv\t{}", self.conv)?;
        writeln!(f, "bn\t{}", self.bn)?;
        writeln!(f, "linear\t{}", self.linear)?;
        writeln!(f, "attention\t{}", self.attention)?;
        write!(f, "total\t{}", self.total)
    }
}

/// Analytic parameter count; allocates no weights. A grouped convolution
/// contributes `C_out * (C_in / g) * k^2` weights.
pub fn count_parameters(config: &BackboneConfig) -> ParamBreakdown {
    let conv_w = |cin: usize, cout: usize, k: usize, g: usize| cout * (cin / g) * k * k;
    let mut b = ParamBreakdown::default();
    let stem = &config.stem;
    b.conv += conv_w(config.in_channels, stem.out_channels, stem.kernel, 1);
    b.bn += 2 * stem.out_channels;
    for blk in config.blocks() {
        let g = blk.groups;
        b.conv += conv_w(blk.in_channels, blk.mid_channels, 1, g)
            + conv_w(blk.mid_channels, blk.mid_channels, 3, g)
            + conv_w(blk.mid_channels, blk.out_channels, 1, g);
        b.bn += 2 * (2 * blk.mid_channels + blk.out_channels);
        if blk.has_projection {
            b.conv += conv_w(blk.in_channels, blk.out_channels, 1, 1);
            b.bn += 2 * blk.out_channels;
        }
        if blk.attention {
            b.attention += GroupedAttentionModule::num_params(blk.mid_channels);
        }
    }
    b.linear = config.feature_channels() * config.embedding_dim + config.embedding_dim;
    b.total = b.conv + b.bn + b.linear + b.attention;
    b
}

#[derive(Clone, Debug)]
struct Stem {
    conv: Conv2d,
    bn: BatchNorm2d,
    pool: Option<PoolConfig>,
}

#[derive(Clone, Debug)]
struct Projection {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    attention: Option<GroupedAttentionModule>,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    projection: Option<Projection>,
}

/// Intermediate values of one bottleneck pass.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub output: Var,
    /// Grouped 3x3 features before the attention module.
    pub pre_attention: Var,
    pub attention: Option<GamOutput>,
}

impl Bottleneck {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BottleneckConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.groups;
        let (cin, mid, cout) = (cfg.in_channels, cfg.mid_channels, cfg.out_channels);
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), cin, mid, 1, 1, 0, g, false, rng)?;
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), mid);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), mid, mid, 3, cfg.stride, 1, g, false, rng)?;
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), mid);
        let attention = cfg
            .attention
            .then(|| GroupedAttentionModule::new(store, &format!("{name}.gam"), mid, rng));
        let conv3 = Conv2d::new(store, &format!("{name}.conv3"), mid, cout, 1, 1, 0, g, false, rng)?;
        let bn3 = BatchNorm2d::new(store, &format!("{name}.bn3"), cout);
        let projection = if cfg.has_projection {
            Some(Projection {
                conv: Conv2d::new(store, &format!("{name}.proj"), cin, cout, 1, cfg.stride, 0, 1, false, rng)?,
                bn: BatchNorm2d::new(store, &format!("{name}.proj_bn"), cout),
            })
        } else {
            None
        };
        Ok(Bottleneck { conv1, bn1, conv2, bn2, attention, conv3, bn3, projection })
    }

    /// `relu(F(x) + skip(x))` where the grouped attention module gates the
    /// grouped 3x3 features inside `F`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        x: Var,
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<BlockOutput> {
        let h = self.conv1.forward(tape, bind, x)?;
        let h = self.bn1.forward(tape, bind, h, mode, stats)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, bind, h)?;
        let h = self.bn2.forward(tape, bind, h, mode, stats)?;
        let pre_attention = tape.relu(h);
        let (h, attention) = match &self.attention {
            Some(gam) => {
                let out = gam.forward(tape, bind, pre_attention)?;
                (out.output, Some(out))
            }
            None => (pre_attention, None),
        };
        let h = self.conv3.forward(tape, bind, h)?;
        let h = self.bn3.forward(tape, bind, h, mode, stats)?;
        let skip = match &self.projection {
            Some(p) => {
                let s = p.conv.forward(tape, bind, x)?;
                p.bn.forward(tape, bind, s, mode, stats)?
            }
            None => x,
        };
        let sum = tape.add(h, skip)?;
        Ok(BlockOutput { output: tape.relu(sum), pre_attention, attention })
    }

    fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm2d> {
        [&mut self.bn1, &mut self.bn2, &mut self.bn3]
            .into_iter()
            .chain(self.projection.as_mut().map(|p| &mut p.bn))
    }
}

/// Result of a backbone forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[N, D]`, unit-norm rows.
    pub embedding: Var,
    pub blocks: Vec<BlockOutput>,
    /// Batch statistics of every train-mode batch norm, in layer order.
    pub bn_stats: Vec<BatchStats>,
}

/// Assembled network: parameters plus layer structure and batch-norm buffers.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    pub store: ParamStore,
    stem: Stem,
    blocks: Vec<Bottleneck>,
    head: Linear,
}

impl Backbone {
    /// Seeded Kaiming-uniform initialisation; batch norm scale 1, shift 0.
    pub fn new(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let st = &config.stem;
        let stem = Stem {
            conv: Conv2d::new(&mut store, "stem.conv", config.in_channels, st.out_channels, st.kernel, st.stride, st.padding, 1, false, &mut rng)?,
            bn: BatchNorm2d::new(&mut store, "stem.bn", st.out_channels),
            pool: st.pool,
        };
        let mut blocks = Vec::new();
        for (s, stage) in config.stages.iter().enumerate() {
            for (b, cfg) in stage.iter().enumerate() {
                blocks.push(Bottleneck::new(&mut store, &format!("stage{s}.block{b}"), cfg, &mut rng)?);
            }
        }
        let head = Linear::new(&mut store, "head", config.feature_channels(), config.embedding_dim, &mut rng);
        Ok(Backbone { config: config.clone(), store, stem, blocks, head })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Parameter counts of the allocated tensors, by name category.
    pub fn allocated_breakdown(&self) -> ParamBreakdown {
        let mut b = ParamBreakdown::default();
        for p in self.store.iter() {
            let n = p.value.len();
            if p.name.contains(".gam.") {
                b.attention += n;
            } else if p.name.starts_with("head.") {
                b.linear += n;
            } else if p.name.contains("bn.") || p.name.contains(".bn") {
                b.bn += n;
            } else {
                b.conv += n;
            }
        }
        b.total = b.conv + b.bn + b.linear + b.attention;
        b
    }

    /// Run the network on `[N, C, H, W]` images bound to `x`.
    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, x: Var, mode: Mode) -> Result<ForwardOutput> {
        let shape = tape.value(x).shape();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::shape(format!(
                "backbone expects [N,{},H,W] input, got {shape:?}",
                self.config.in_channels
            )));
        }
        let mut stats = Vec::new();
        let h = self.stem.conv.forward(tape, bind, x)?;
        let h = self.stem.bn.forward(tape, bind, h, mode, &mut stats)?;
        let mut h = tape.relu(h);
        if let Some(p) = self.stem.pool {
            h = tape.max_pool2d(h, p.kernel, p.stride, p.padding)?;
        }
        let mut outs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(tape, bind, h, mode, &mut stats)?;
            h = out.output;
            outs.push(out);
        }
        let pooled = tape.global_avg_pool(h)?;
        let projected = self.head.forward(tape, bind, pooled)?;
        let embedding = tape.l2_normalize_rows(projected)?;
        Ok(ForwardOutput { embedding, blocks: outs, bn_stats: stats })
    }

    /// Fold train-mode batch statistics into the running averages.
    pub fn commit_batch_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let layers: Vec<&mut BatchNorm2d> = std::iter::once(&mut self.stem.bn)
            .chain(self.blocks.iter_mut().flat_map(|b| b.batch_norms_mut()))
            .collect();
        if layers.len() != stats.len() {
            return Err(Error::integrity(format!(
                "{} batch-norm layers but {} statistics",
                layers.len(),
                stats.len()
            )));
        }
        for (layer, s) in layers.into_iter().zip(stats) {
            layer.commit(s);
        }
        Ok(())
    }

    /// Eval-mode embeddings for a `[N, C, H, W]` batch, processed in chunks.
    pub fn embed(&self, images: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = *images.shape().first().ok_or_else(|| Error::shape("embed needs a batch"))?;
        let chunk = chunk.max(1);
        let mut rows = Vec::with_capacity(n * self.config.embedding_dim);
        let inner: usize = images.shape()[1..].iter().product();
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let part = Tensor::new(shape, images.data()[start * inner..end * inner].to_vec())?;
            let mut tape = Tape::new();
            let mut bind = Binding::new(&self.store, false);
            let x = tape.constant(part);
            let out = self.forward(&mut tape, &mut bind, x, Mode::Eval)?;
            rows.extend_from_slice(tape.value(out.embedding).data());
        }
        Tensor::new(vec![n, self.config.embedding_dim], rows)
    }

    /// Eval-mode spatial attention maps of block `layer` (`[N,1,H,W]`).
    pub fn attention_maps(&self, images: &Tensor, layer: usize) -> Result<Tensor> {
        if layer >= self.blocks.len() {
            return Err(Error::usage(format!("layer {layer} out of range ({} blocks)", self.blocks.len())));
        }
        let mut tape = Tape::new();
        let mut bind = Binding::new(&self.store, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &mut bind, x, Mode::Eval)?;
        let gam = out.blocks[layer]
            .attention
            .ok_or_else(|| Error::usage(format!("block {layer} has no attention module")))?;
        Ok(tape.value(gam.spatial_map).clone())
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Named tensors for checkpointing: parameters, then batch-norm buffers.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> =
            self.store.iter().map(|p| (format!("param/{}", p.name), p.value.clone())).collect();
        for (i, bn) in self.batch_norms().enumerate() {
            let c = bn.running_mean.len();
            out.push((format!("bn_mean/{i}"), Tensor::new(vec![c], bn.running_mean.clone()).expect("bn")));
            out.push((format!("bn_var/{i}"), Tensor::new(vec![c], bn.running_var.clone()).expect("bn")));
        }
        out
    }

    fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm2d> {
        std::iter::once(&self.stem.bn).chain(self.blocks.iter().flat_map(|b| {
            [&b.bn1, &b.bn2, &b.bn3].into_iter().chain(b.projection.as_ref().map(|p| &p.bn))
        }))
    }

    /// Restore weights and buffers produced by [`Backbone::named_tensors`].
    /// Everything is validated before anything is replaced.
    pub fn load_named_tensors(&mut self, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        let mut params = Vec::with_capacity(self.store.len());
        for p in self.store.iter() {
            let key = format!("param/{}", p.name);
            let t = lookup(&key).ok_or_else(|| Error::integrity(format!("checkpoint lacks {key}")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::integrity(format!(
                    "{key}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            params.push(t);
        }
        let mut buffers = Vec::new();
        for (i, bn) in self.batch_norms().enumerate() {
            for prefix in ["bn_mean", "bn_var"] {
                let key = format!("{prefix}/{i}");
                let t = lookup(&key).ok_or_else(|| Error::integrity(format!("checkpoint lacks {key}")))?;
                if t.len() != bn.running_mean.len() {
                    return Err(Error::integrity(format!("{key}: wrong channel count")));
                }
                buffers.push(t);
            }
        }
        for (p, t) in self.store.iter_mut().zip(params) {
            p.value = t;
        }
        let layers: Vec<&mut BatchNorm2d> = std::iter::once(&mut self.stem.bn)
            .chain(self.blocks.iter_mut().flat_map(|b| b.batch_norms_mut()))
            .collect();
        for (bn, pair) in layers.into_iter().zip(buffers.chunks(2)) {
            bn.running_mean.copy_from_slice(pair[0].data());
            bn.running_var.copy_from_slice(pair[1].data());
        }
        Ok(())
    }
}
