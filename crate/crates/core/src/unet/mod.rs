//! Toy ε-prediction U-Net with per-block convolution swapping.
//!
//! Layer paths follow the usual diffusers layout (`down_blocks.0.resnets.0.conv1`,
//! `mid_block.attentions.0.to_q`, ...). Down block `i` is `DB<i>`, up block `i`
//! is `UB<i>` (0 is the deepest), the middle block is `MB`.

pub mod presets;
pub mod attention;
pub mod plan;
pub mod weights;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::redilation::fractional_redilated_conv_info;
use crate::dispersion::dispersed_conv_strided;
use crate::tensor::{conv2d_strided, Kernel, PadMode, PadSpec, Tensor};
use crate::tiled::{group_norm, silu, GroupNormParams, GN_EPS};

use attention::{attn_scale_baseline, redilated_attention, AttentionParams};
use plan::{BlockName, ConvMode, ResolvedPlan};
use weights::{orthogonal, WeightStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    /// One entry per resolution level.
    pub channel_mult: Vec<usize>,
    pub blocks_per_level: usize,
    /// Levels whose blocks carry self-attention.
    pub attention_levels: Vec<usize>,
    pub mid_attention: bool,
    pub groups: usize,
    pub embed_dim: usize,
    /// Class 0 is the unconditional embedding.
    pub num_classes: usize,
    /// Latent side length the weights are meant for.
    pub sample_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            out_channels: 4,
            base_channels: 32,
            channel_mult: vec![1, 1, 2, 2],
            blocks_per_level: 1,
            attention_levels: vec![3],
            mid_attention: true,
            groups: 8,
            embed_dim: 128,
            num_classes: 10,
            sample_size: 32,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    /// Spatial dims must be multiples of this.
    pub fn factor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return bad("channel_mult needs at least one positive entry".into());
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 || self.blocks_per_level == 0 {
            return bad("channel counts and blocks_per_level must be positive".into());
        }
        if self.groups == 0 || (0..self.levels()).any(|l| !self.channels(l).is_multiple_of(self.groups)) {
            return bad(format!("every level width must be divisible by {} groups", self.groups));
        }
        if let Some(l) = self.attention_levels.iter().find(|&&l| l >= self.levels()) {
            return bad(format!("attention level {l} out of range"));
        }
        if !self.base_channels.is_multiple_of(2) || self.embed_dim == 0 || self.num_classes == 0 {
            return bad("base_channels must be even, embed_dim and num_classes positive".into());
        }
        Ok(())
    }
}

/// A convolution together with the block whose plan entry governs it.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub path: String,
    pub kernel: Kernel,
    pub stride: usize,
    /// `None` for layers that are never adapted.
    pub block: Option<BlockName>,
}

impl ConvLayer {
    pub fn apply(&self, h: &Tensor, mode: &ConvMode) -> Result<Tensor> {
        let k = &self.kernel;
        match mode {
            ConvMode::Plain => conv2d_strided(h, k, PadSpec::same(PadMode::Zero, k, 1), 1, self.stride),
            ConvMode::Redilate(d) if d.fract() == 0.0 => {
                let d = *d as usize;
                conv2d_strided(h, k, PadSpec::same(PadMode::Zero, k, d), d, self.stride)
            }
            ConvMode::Redilate(d) => Ok(fractional_redilated_conv_info(h, k, *d, self.stride)?.0),
            ConvMode::Disperse(d, op) => dispersed_conv_strided(h, k, op, *d, self.stride),
        }
    }

    pub fn mode(&self, plan: &ResolvedPlan, step: usize) -> ConvMode {
        self.block.map_or(ConvMode::Plain, |b| plan.conv_mode(b, step))
    }
}

#[derive(Clone, Debug)]
struct Linear {
    out_f: usize,
    in_f: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Linear {
    fn apply(&self, x: &[f32]) -> Vec<f32> {
        (0..self.out_f)
            .map(|o| {
                let row = &self.weight[o * self.in_f..(o + 1) * self.in_f];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>() + self.bias[o]
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNormParams,
    conv1: ConvLayer,
    time_emb_proj: Linear,
    norm2: GroupNormParams,
    conv2: ConvLayer,
    shortcut: Option<ConvLayer>,
}

#[derive(Clone, Debug)]
struct AttnBlock {
    norm: GroupNormParams,
    params: AttentionParams,
}

#[derive(Clone, Debug)]
struct Level {
    resnets: Vec<ResBlock>,
    attentions: Vec<AttnBlock>,
    resample: Option<ConvLayer>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    conv_in: ConvLayer,
    time_1: Linear,
    time_2: Linear,
    class_embedding: Vec<f32>,
    down: Vec<Level>,
    mid_resnets: Vec<ResBlock>,
    mid_attention: Option<AttnBlock>,
    up: Vec<Level>,
    norm_out: GroupNormParams,
    conv_out: ConvLayer,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Orthogonal(f32),
    Normal(f32),
    Zeros,
    Ones,
}

trait ParamSource {
    fn fetch(&mut self, name: String, shape: Vec<usize>, init: Init) -> Result<Vec<f32>>;
}

struct RandomSource {
    rng: ChaCha8Rng,
    store: WeightStore,
}

impl ParamSource for RandomSource {
    fn fetch(&mut self, name: String, shape: Vec<usize>, init: Init) -> Result<Vec<f32>> {
        let len: usize = shape.iter().product();
        let data = match init {
            Init::Orthogonal(gain) => orthogonal(&mut self.rng, shape[0], len / shape[0], gain),
            Init::Normal(std) => (0..len)
                .map(|_| std * self.rng.sample::<f32, _>(StandardNormal))
                .collect(),
            Init::Zeros => vec![0.0; len],
            Init::Ones => vec![1.0; len],
        };
        self.store.insert(name, shape, data.clone())?;
        Ok(data)
    }
}

struct StoreSource<'a> {
    store: &'a WeightStore,
    used: Vec<String>,
}

impl ParamSource for StoreSource<'_> {
    fn fetch(&mut self, name: String, shape: Vec<usize>, _init: Init) -> Result<Vec<f32>> {
        let p = self.store.get(&name)?;
        if p.shape != shape {
            return Err(Error::Config(format!("{name}: expected {shape:?}, found {:?}", p.shape)));
        }
        self.used.push(name);
        Ok(p.data.clone())
    }
}

struct Builder<'a> {
    src: &'a mut dyn ParamSource,
    groups: usize,
    embed_dim: usize,
}

impl Builder<'_> {
    fn conv(&mut self, path: String, out_c: usize, in_c: usize, r: usize, stride: usize, block: Option<BlockName>, gain: f32) -> Result<ConvLayer> {
        let w = self.src.fetch(format!("{path}.weight"), vec![out_c, in_c, r, r], Init::Orthogonal(gain))?;
        let b = self.src.fetch(format!("{path}.bias"), vec![out_c], Init::Normal(0.02))?;
        Ok(ConvLayer {
            kernel: Kernel::new([out_c, in_c, r, r], w, Some(b))?,
            path,
            stride,
            block,
        })
    }

    fn norm(&mut self, path: String, channels: usize) -> Result<GroupNormParams> {
        let gamma = self.src.fetch(format!("{path}.weight"), vec![channels], Init::Ones)?;
        let beta = self.src.fetch(format!("{path}.bias"), vec![channels], Init::Zeros)?;
        Ok(GroupNormParams { groups: self.groups, gamma, beta, eps: GN_EPS })
    }

    fn linear(&mut self, path: String, out_f: usize, in_f: usize) -> Result<Linear> {
        let weight = self.src.fetch(format!("{path}.weight"), vec![out_f, in_f], Init::Orthogonal(1.0))?;
        let bias = self.src.fetch(format!("{path}.bias"), vec![out_f], Init::Normal(0.02))?;
        Ok(Linear { out_f, in_f, weight, bias })
    }

    fn resnet(&mut self, path: String, in_c: usize, out_c: usize, block: BlockName) -> Result<ResBlock> {
        Ok(ResBlock {
            norm1: self.norm(format!("{path}.norm1"), in_c)?,
            conv1: self.conv(format!("{path}.conv1"), out_c, in_c, 3, 1, Some(block), 1.0)?,
            time_emb_proj: self.linear(format!("{path}.time_emb_proj"), out_c, self.embed_dim)?,
            norm2: self.norm(format!("{path}.norm2"), out_c)?,
            conv2: self.conv(format!("{path}.conv2"), out_c, out_c, 3, 1, Some(block), 1.0)?,
            shortcut: if in_c != out_c {
                Some(self.conv(format!("{path}.conv_shortcut"), out_c, in_c, 1, 1, None, 1.0)?)
            } else {
                None
            },
        })
    }

    fn attention(&mut self, path: String, c: usize) -> Result<AttnBlock> {
        let norm = self.norm(format!("{path}.norm"), c)?;
        let mut proj = |name: &str| self.conv(format!("{path}.{name}"), c, c, 1, 1, None, 1.0).map(|l| l.kernel);
        let params = AttentionParams::new(proj("to_q")?, proj("to_k")?, proj("to_v")?, proj("to_out")?)?;
        Ok(AttnBlock { norm, params })
    }
}

impl UNet {
    fn build(config: &UNetConfig, src: &mut dyn ParamSource) -> Result<Self> {
        config.validate()?;
        let c = config;
        let levels = c.levels();
        let mut b = Builder { src, groups: c.groups, embed_dim: c.embed_dim };
        let conv_in = b.conv("conv_in".into(), c.base_channels, c.in_channels, 3, 1, None, 1.0)?;
        let time_1 = b.linear("time_embedding.linear_1".into(), c.embed_dim, c.base_channels)?;
        let time_2 = b.linear("time_embedding.linear_2".into(), c.embed_dim, c.embed_dim)?;
        let class_embedding = b.src.fetch("class_embedding.weight".into(), vec![c.num_classes, c.embed_dim], Init::Normal(1.0))?;

        let mut skips = vec![c.base_channels];
        let mut ch = c.base_channels;
        let mut down = Vec::with_capacity(levels);
        for l in 0..levels {
            let block = BlockName::Down(l);
            let out_c = c.channels(l);
            let mut lv = Level { resnets: Vec::new(), attentions: Vec::new(), resample: None };
            for j in 0..c.blocks_per_level {
                lv.resnets.push(b.resnet(format!("down_blocks.{l}.resnets.{j}"), ch, out_c, block)?);
                ch = out_c;
                if c.attention_levels.contains(&l) {
                    lv.attentions.push(b.attention(format!("down_blocks.{l}.attentions.{j}"), ch)?);
                }
                skips.push(ch);
            }
            if l + 1 < levels {
                lv.resample = Some(b.conv(format!("down_blocks.{l}.downsamplers.0.conv"), ch, ch, 3, 2, Some(block), 1.0)?);
                skips.push(ch);
            }
            down.push(lv);
        }

        let mid_resnets = vec![
            b.resnet("mid_block.resnets.0".into(), ch, ch, BlockName::Mid)?,
            b.resnet("mid_block.resnets.1".into(), ch, ch, BlockName::Mid)?,
        ];
        let mid_attention = if c.mid_attention {
            Some(b.attention("mid_block.attentions.0".into(), ch)?)
        } else {
            None
        };

        let mut up = Vec::with_capacity(levels);
        for i in 0..levels {
            let l = levels - 1 - i;
            let block = BlockName::Up(i);
            let out_c = c.channels(l);
            let mut lv = Level { resnets: Vec::new(), attentions: Vec::new(), resample: None };
            for j in 0..=c.blocks_per_level {
                let skip = skips.pop().ok_or_else(|| Error::Config("skip stack underflow".into()))?;
                lv.resnets.push(b.resnet(format!("up_blocks.{i}.resnets.{j}"), ch + skip, out_c, block)?);
                ch = out_c;
                if c.attention_levels.contains(&l) {
                    lv.attentions.push(b.attention(format!("up_blocks.{i}.attentions.{j}"), ch)?);
                }
            }
            if l > 0 {
                lv.resample = Some(b.conv(format!("up_blocks.{i}.upsamplers.0.conv"), ch, ch, 3, 1, None, 1.0)?);
            }
            up.push(lv);
        }
        let norm_out = b.norm("conv_norm_out".into(), ch)?;
        let conv_out = b.conv("conv_out".into(), c.out_channels, ch, 3, 1, None, 1.0)?;
        Ok(Self {
            config: c.clone(),
            conv_in,
            time_1,
            time_2,
            class_embedding,
            down,
            mid_resnets,
            mid_attention,
            up,
            norm_out,
            conv_out,
        })
    }

    /// Seeded weights: orthogonal convolutions and projections, small
    /// Gaussian biases, identity GroupNorm affines. The config is stored
    /// with the weights.
    pub fn random_weights(config: &UNetConfig, seed: u64) -> Result<WeightStore> {
        let mut src = RandomSource { rng: ChaCha8Rng::seed_from_u64(seed), store: WeightStore::new() };
        Self::build(config, &mut src)?;
        src.store.config = Some(serde_json::to_value(config)?);
        Ok(src.store)
    }

    pub fn random(config: &UNetConfig, seed: u64) -> Result<Self> {
        Self::from_store(config, &Self::random_weights(config, seed)?)
    }

    /// Every layer must resolve to exactly one entry and no entry may be left over.
    pub fn from_store(config: &UNetConfig, store: &WeightStore) -> Result<Self> {
        let mut src = StoreSource { store, used: Vec::new() };
        let net = Self::build(config, &mut src)?;
        store.check_exact(&src.used)?;
        Ok(net)
    }

    /// Uses the config saved alongside the weights.
    pub fn from_store_config(store: &WeightStore) -> Result<Self> {
        let cfg = store
            .config
            .clone()
            .ok_or_else(|| Error::Config("weights carry no model config".into()))?;
        let cfg: UNetConfig = serde_json::from_value(cfg).map_err(|e| Error::Config(format!("invalid model config: {e}")))?;
        Self::from_store(&cfg, store)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Every convolution in forward order.
    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        fn resnet<'a>(r: &'a ResBlock, out: &mut Vec<&'a ConvLayer>) {
            out.extend([&r.conv1, &r.conv2]);
            out.extend(r.shortcut.as_ref());
        }
        let mut out = vec![&self.conv_in];
        for lv in &self.down {
            lv.resnets.iter().for_each(|r| resnet(r, &mut out));
            out.extend(lv.resample.as_ref());
        }
        self.mid_resnets.iter().for_each(|r| resnet(r, &mut out));
        for lv in &self.up {
            lv.resnets.iter().for_each(|r| resnet(r, &mut out));
            out.extend(lv.resample.as_ref());
        }
        out.push(&self.conv_out);
        out
    }

    pub fn conv_layer(&self, path: &str) -> Option<&ConvLayer> {
        self.conv_layers().into_iter().find(|l| l.path == path)
    }

    /// Convolutions that a plan may adapt inside `block`.
    pub fn block_convs(&self, block: BlockName) -> Vec<&ConvLayer> {
        self.conv_layers().into_iter().filter(|l| l.block == Some(block)).collect()
    }

    pub fn resolve(&self, plan: &plan::AdaptationPlan, base_dir: Option<&std::path::Path>) -> Result<ResolvedPlan> {
        plan.resolve(self.config.levels(), base_dir)
    }

    /// ε estimate for `x` at diffusion `timestep`, inference step `step`,
    /// one class id per batch entry.
    pub fn forward(&self, x: &Tensor, timestep: f64, step: usize, classes: &[usize], plan: &ResolvedPlan) -> Result<Tensor> {
        self.run(x, timestep, step, classes, plan, &mut |_, _| {})
    }

    /// Like [`forward`](Self::forward), also returning the output of every
    /// block (`conv_in`, `DB0`, ..., `MB`, `UB0`, ..., `out`).
    pub fn forward_traced(
        &self,
        x: &Tensor,
        timestep: f64,
        step: usize,
        classes: &[usize],
        plan: &ResolvedPlan,
    ) -> Result<Vec<(String, Tensor)>> {
        let mut trace = Vec::new();
        self.run(x, timestep, step, classes, plan, &mut |name, t| trace.push((name, t.clone())))?;
        Ok(trace)
    }

    fn embedding(&self, timestep: f64, classes: &[usize]) -> Result<Vec<Vec<f32>>> {
        let c = &self.config;
        let half = c.base_channels / 2;
        let mut feats = vec![0f32; c.base_channels];
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            feats[k] = (timestep * freq).cos() as f32;
            feats[half + k] = (timestep * freq).sin() as f32;
        }
        let t = self.time_2.apply(&silu_vec(&self.time_1.apply(&feats)));
        classes
            .iter()
            .map(|&id| {
                if id >= c.num_classes {
                    return Err(Error::Config(format!("class {id} out of range for {} classes", c.num_classes)));
                }
                let row = &self.class_embedding[id * c.embed_dim..(id + 1) * c.embed_dim];
                Ok(silu_vec(&t.iter().zip(row).map(|(a, b)| a + b).collect::<Vec<_>>()))
            })
            .collect()
    }

    fn resnet(&self, r: &ResBlock, h: &Tensor, emb: &[Vec<f32>], plan: &ResolvedPlan, step: usize) -> Result<Tensor> {
        let a = silu(&group_norm(h, &r.norm1, None)?);
        let mut a = r.conv1.apply(&a, &r.conv1.mode(plan, step))?;
        for (n, e) in emb.iter().enumerate() {
            let shift = r.time_emb_proj.apply(e);
            for (ch, s) in shift.into_iter().enumerate() {
                a.plane_mut(n, ch).iter_mut().for_each(|v| *v += s);
            }
        }
        let a = silu(&group_norm(&a, &r.norm2, None)?);
        let a = r.conv2.apply(&a, &r.conv2.mode(plan, step))?;
        let skip = match &r.shortcut {
            Some(s) => s.apply(h, &ConvMode::Plain)?,
            None => h.clone(),
        };
        skip.add(&a)
    }

    fn attend(&self, a: &AttnBlock, h: &Tensor, input_tokens: usize, plan: &ResolvedPlan, step: usize) -> Result<Tensor> {
        let n = group_norm(h, &a.norm, None)?;
        let out = match plan.attention_scale {
            Some(s) => {
                let current = h.height() * h.width();
                let trained = (s.trained_tokens * current / input_tokens).max(2);
                attn_scale_baseline(&n, &a.params, trained, current)?
            }
            None => redilated_attention(&n, plan.attention_factor(step), &a.params)?,
        };
        h.add(&out)
    }

    fn run(
        &self,
        x: &Tensor,
        timestep: f64,
        step: usize,
        classes: &[usize],
        plan: &ResolvedPlan,
        trace: &mut dyn FnMut(String, &Tensor),
    ) -> Result<Tensor> {
        let c = &self.config;
        if x.channels() != c.in_channels {
            return Err(dim_err!("expected {} input channels, got {}", c.in_channels, x.channels()));
        }
        let f = c.factor();
        if !x.height().is_multiple_of(f) || !x.width().is_multiple_of(f) || x.height() == 0 || x.width() == 0 {
            return Err(dim_err!("{}x{} latent is not divisible by {f}", x.height(), x.width()));
        }
        if classes.len() != x.batch() {
            return Err(dim_err!("{} class ids for batch {}", classes.len(), x.batch()));
        }
        let input_tokens = x.height() * x.width();
        let emb = self.embedding(timestep, classes)?;

        let mut h = self.conv_in.apply(x, &ConvMode::Plain)?;
        trace("conv_in".into(), &h);
        let mut skips = vec![h.clone()];
        for (l, lv) in self.down.iter().enumerate() {
            for (j, r) in lv.resnets.iter().enumerate() {
                h = self.resnet(r, &h, &emb, plan, step)?;
                if let Some(a) = lv.attentions.get(j) {
                    h = self.attend(a, &h, input_tokens, plan, step)?;
                }
                skips.push(h.clone());
            }
            if let Some(ds) = &lv.resample {
                h = ds.apply(&h, &ds.mode(plan, step))?;
                skips.push(h.clone());
            }
            trace(BlockName::Down(l).to_string(), &h);
        }

        h = self.resnet(&self.mid_resnets[0], &h, &emb, plan, step)?;
        if let Some(a) = &self.mid_attention {
            h = self.attend(a, &h, input_tokens, plan, step)?;
        }
        h = self.resnet(&self.mid_resnets[1], &h, &emb, plan, step)?;
        trace(BlockName::Mid.to_string(), &h);

        for (i, lv) in self.up.iter().enumerate() {
            for (j, r) in lv.resnets.iter().enumerate() {
                let skip = skips.pop().ok_or_else(|| Error::Config("skip stack underflow".into()))?;
                h = self.resnet(r, &h.concat_channels(&skip)?, &emb, plan, step)?;
                if let Some(a) = lv.attentions.get(j) {
                    h = self.attend(a, &h, input_tokens, plan, step)?;
                }
            }
            if let Some(us) = &lv.resample {
                h = us.apply(&h.upsample_nearest2x(), &ConvMode::Plain)?;
            }
            trace(BlockName::Up(i).to_string(), &h);
        }

        let out = self.conv_out.apply(&silu(&group_norm(&h, &self.norm_out, None)?), &ConvMode::Plain)?;
        trace("out".into(), &out);
        Ok(out)
    }
}

fn silu_vec(v: &[f32]) -> Vec<f32> {
    v.iter().map(|x| x / (1.0 + (-x).exp())).collect()
}
