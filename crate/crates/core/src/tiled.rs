//! GroupNorm with mergeable statistics, and tiled evaluation of
//! normalization-bearing networks.
//!
//! Evaluating a network tile by tile normalizes every tile with its own
//! statistics, which shifts the tone of each tile. [`tiled_apply`] with
//! `sync` first gathers each GroupNorm layer's statistics over all tiles,
//! layer by layer, then renders every tile with the merged statistics and
//! blends the overlaps.

use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, param_err, Result};
use crate::tensor::{conv2d_same, Kernel, Tensor};
use crate::error::Error;
use crate::unet::weights::{orthogonal_kernel, WeightStore};

pub const GN_EPS: f64 = 1e-5;

/// Affine GroupNorm parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNormParams {
    pub groups: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f64,
}

impl GroupNormParams {
    pub fn identity(channels: usize, groups: usize) -> Self {
        Self {
            groups,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: GN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Count, sum and centred sum of squares of one group.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub sum: f64,
    pub m2: f64,
}

impl Moments {
    fn from_values(values: impl Iterator<Item = f32> + Clone) -> Self {
        let (count, sum) = values
            .clone()
            .fold((0u64, 0f64), |(n, s), v| (n + 1, s + f64::from(v)));
        if count == 0 {
            return Self::default();
        }
        let mean = sum / count as f64;
        let m2 = values.map(|v| (f64::from(v) - mean).powi(2)).sum();
        Self { count, sum, m2 }
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        self.m2 / self.count as f64
    }

    /// Pairwise merge with the mean-difference correction on the centred term.
    pub fn merge(&self, other: &Moments) -> Moments {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let delta = other.mean() - self.mean();
        Moments {
            count: self.count + other.count,
            sum: self.sum + other.sum,
            m2: self.m2 + other.m2 + delta * delta * na * nb / (na + nb),
        }
    }
}

/// Per-(batch, group) moments of one GroupNorm input.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNormStats {
    batch: usize,
    groups: usize,
    moments: Vec<Moments>,
}

impl GroupNormStats {
    pub fn empty(batch: usize, groups: usize) -> Self {
        Self {
            batch,
            groups,
            moments: vec![Moments::default(); batch * groups],
        }
    }

    pub fn from_tensor(h: &Tensor, groups: usize) -> Result<Self> {
        Self::from_region(h, groups, 0, 0, h.height(), h.width())
    }

    /// Moments over the spatial window `[y0, y0+rh) x [x0, x0+rw)`.
    pub fn from_region(h: &Tensor, groups: usize, y0: usize, x0: usize, rh: usize, rw: usize) -> Result<Self> {
        let [n, c, height, width] = h.shape();
        check_groups(c, groups)?;
        if y0 + rh > height || x0 + rw > width {
            return Err(dim_err!("stats window exceeds {height}x{width}"));
        }
        let per = c / groups;
        let mut moments = Vec::with_capacity(n * groups);
        for b in 0..n {
            for g in 0..groups {
                let values = (g * per..(g + 1) * per).flat_map(move |ch| {
                    let plane = h.plane(b, ch);
                    (y0..y0 + rh).flat_map(move |y| plane[y * width + x0..y * width + x0 + rw].iter().copied())
                });
                moments.push(Moments::from_values(values));
            }
        }
        Ok(Self { batch: n, groups, moments })
    }

    pub fn merge(&mut self, other: &GroupNormStats) -> Result<()> {
        if self.batch != other.batch || self.groups != other.groups {
            return Err(dim_err!(
                "cannot merge stats of {}x{} with {}x{}",
                self.batch,
                self.groups,
                other.batch,
                other.groups
            ));
        }
        for (a, b) in self.moments.iter_mut().zip(&other.moments) {
            *a = a.merge(b);
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn moments(&self, batch: usize, group: usize) -> Moments {
        self.moments[batch * self.groups + group]
    }
}

fn check_groups(channels: usize, groups: usize) -> Result<()> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(param_err!("{channels} channels not divisible into {groups} groups"));
    }
    Ok(())
}

/// GroupNorm with self-computed statistics, or with `stats` when given.
pub fn group_norm(h: &Tensor, params: &GroupNormParams, stats: Option<&GroupNormStats>) -> Result<Tensor> {
    let [n, c, _, _] = h.shape();
    check_groups(c, params.groups)?;
    if params.channels() != c {
        return Err(dim_err!("GroupNorm has {} channels, input {c}", params.channels()));
    }
    let own;
    let stats = match stats {
        Some(s) => {
            if s.batch != n || s.groups != params.groups {
                return Err(dim_err!("external stats are {}x{}, need {n}x{}", s.batch, s.groups, params.groups));
            }
            s
        }
        None => {
            own = GroupNormStats::from_tensor(h, params.groups)?;
            &own
        }
    };
    let per = c / params.groups;
    let mut out = h.clone();
    for b in 0..n {
        for ch in 0..c {
            let m = stats.moments(b, ch / per);
            let inv = 1.0 / (m.variance() + params.eps).sqrt();
            let scale = (f64::from(params.gamma[ch]) * inv) as f32;
            let (mean, beta) = (m.mean() as f32, params.beta[ch]);
            for v in out.plane_mut(b, ch) {
                *v = (*v - mean) * scale + beta;
            }
        }
    }
    Ok(out)
}

pub fn silu(h: &Tensor) -> Tensor {
    h.map(|v| v / (1.0 + (-v).exp()))
}

/// Supplies the normalization of each GroupNorm layer during a forward pass.
pub trait NormHook {
    fn group_norm(&mut self, layer: usize, h: &Tensor, params: &GroupNormParams) -> Result<Tensor>;
}

/// Every layer normalizes with its own statistics.
pub struct SelfStats;

impl NormHook for SelfStats {
    fn group_norm(&mut self, _layer: usize, h: &Tensor, params: &GroupNormParams) -> Result<Tensor> {
        group_norm(h, params, None)
    }
}

/// Layers use externally supplied statistics.
pub struct FixedStats<'a>(pub &'a [GroupNormStats]);

impl NormHook for FixedStats<'_> {
    fn group_norm(&mut self, layer: usize, h: &Tensor, params: &GroupNormParams) -> Result<Tensor> {
        group_norm(h, params, Some(&self.0[layer]))
    }
}

/// Records layer `target`'s input statistics over a window; earlier layers
/// use the already merged statistics.
struct Collect<'a> {
    target: usize,
    known: &'a [GroupNormStats],
    window: Rect,
    found: Option<GroupNormStats>,
}

impl NormHook for Collect<'_> {
    fn group_norm(&mut self, layer: usize, h: &Tensor, params: &GroupNormParams) -> Result<Tensor> {
        if layer < self.target {
            return group_norm(h, params, Some(&self.known[layer]));
        }
        if layer == self.target {
            let w = self.window;
            self.found = Some(GroupNormStats::from_region(h, params.groups, w.y, w.x, w.h, w.w)?);
        }
        group_norm(h, params, None)
    }
}

/// A network whose GroupNorm layers can be driven by a [`NormHook`].
pub trait NormNetwork: Sync {
    fn forward_with(&self, x: &Tensor, norm: &mut dyn NormHook) -> Result<Tensor>;

    fn norm_layers(&self) -> usize;

    /// Pixels of context each output needs on every side.
    fn receptive_radius(&self) -> usize;

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, &mut SelfStats)
    }
}

/// Decoder stand-in: repeated `GroupNorm -> SiLU -> conv3x3`.
#[derive(Clone, Debug)]
pub struct GnConvStack {
    layers: Vec<(GroupNormParams, Kernel)>,
}

impl GnConvStack {
    pub fn new(layers: Vec<(GroupNormParams, Kernel)>) -> Result<Self> {
        for (i, (gn, k)) in layers.iter().enumerate() {
            if gn.channels() != k.in_channels() {
                return Err(dim_err!("layer {i}: GroupNorm {} channels, conv {}", gn.channels(), k.in_channels()));
            }
            if let Some((_, next)) = layers.get(i + 1) {
                if next.in_channels() != k.out_channels() {
                    return Err(dim_err!("layer {i} outputs {} channels, next expects {}", k.out_channels(), next.in_channels()));
                }
            }
        }
        Ok(Self { layers })
    }

    /// Seeded stack with channel widths `channels[0] -> ... -> channels[n]`.
    /// GroupNorm affines are drawn away from identity so tiles disagree
    /// visibly when unsynchronized.
    pub fn random(channels: &[usize], groups: usize, seed: u64) -> Result<Self> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = channels
            .windows(2)
            .map(|w| {
                let (cin, cout) = (w[0], w[1]);
                let gamma = (0..cin).map(|_| rng.random_range(0.5f32..1.5)).collect();
                let beta = (0..cin).map(|_| rng.random_range(-0.5f32..0.5)).collect();
                let gn = GroupNormParams { groups: groups.min(cin), gamma, beta, eps: GN_EPS };
                let bias = (0..cout).map(|_| rng.random_range(-0.1f32..0.1)).collect();
                let k = orthogonal_kernel(&mut rng, cout, cin, 3, 1.0)?.with_bias(Some(bias))?;
                Ok((gn, k))
            })
            .collect::<Result<_>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[(GroupNormParams, Kernel)] {
        &self.layers
    }

    /// Entries `layers.{i}.norm.{weight,bias}` and `layers.{i}.conv.{weight,bias}`;
    /// group counts go in the store config.
    pub fn to_store(&self) -> Result<WeightStore> {
        let mut store = WeightStore::new();
        for (i, (gn, k)) in self.layers.iter().enumerate() {
            let c = gn.channels();
            store.insert(format!("layers.{i}.norm.weight"), vec![c], gn.gamma.clone())?;
            store.insert(format!("layers.{i}.norm.bias"), vec![c], gn.beta.clone())?;
            store.insert_kernel(&format!("layers.{i}.conv"), k)?;
        }
        let groups: Vec<usize> = self.layers.iter().map(|(gn, _)| gn.groups).collect();
        store.config = Some(serde_json::json!({ "kind": "gn_conv_stack", "groups": groups }));
        Ok(store)
    }

    pub fn from_store(store: &WeightStore) -> Result<Self> {
        let config = store.config.as_ref().ok_or_else(|| Error::Config("decoder weights carry no config".into()))?;
        if config.get("kind").and_then(|v| v.as_str()) != Some("gn_conv_stack") {
            return Err(Error::Config("weights are not a GroupNorm/conv stack".into()));
        }
        let groups: Vec<usize> = serde_json::from_value(config.get("groups").cloned().unwrap_or_default())?;
        let mut used = Vec::new();
        let layers = groups
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let conv = format!("layers.{i}.conv");
                let shape: [usize; 4] = store
                    .get(&format!("{conv}.weight"))?
                    .shape
                    .clone()
                    .try_into()
                    .map_err(|s| Error::Config(format!("{conv}.weight: expected rank 4, found {s:?}")))?;
                let k = store.kernel(&conv, shape)?;
                let c = shape[1];
                let gamma = store.vector(&format!("layers.{i}.norm.weight"), c)?;
                let beta = store.vector(&format!("layers.{i}.norm.bias"), c)?;
                if g == 0 || !c.is_multiple_of(g) {
                    return Err(Error::Config(format!("layer {i}: {c} channels do not split into {g} groups")));
                }
                used.extend([format!("{conv}.weight"), format!("layers.{i}.norm.weight"), format!("layers.{i}.norm.bias")]);
                if k.bias().is_some() {
                    used.push(format!("{conv}.bias"));
                }
                Ok((GroupNormParams { groups: g, gamma, beta, eps: GN_EPS }, k))
            })
            .collect::<Result<_>>()?;
        store.check_exact(&used)?;
        Self::new(layers)
    }
}

impl NormNetwork for GnConvStack {
    fn forward_with(&self, x: &Tensor, norm: &mut dyn NormHook) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, (gn, k)) in self.layers.iter().enumerate() {
            h = conv2d_same(&silu(&norm.group_norm(i, &h, gn)?), k, 1)?;
        }
        Ok(h)
    }

    fn norm_layers(&self) -> usize {
        self.layers.len()
    }

    fn receptive_radius(&self) -> usize {
        self.layers.iter().map(|(_, k)| k.effective_radius(1)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// One tile's extent along an axis and the sub-range it owns outright.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub own_start: usize,
    pub own_end: usize,
}

/// Regular grid of overlapping tiles. Tiles advance by `tile - overlap`;
/// the last tile in a row or column is truncated at the border.
#[derive(Clone, Debug, PartialEq)]
pub struct TileLayout {
    pub height: usize,
    pub width: usize,
    pub tile_h: usize,
    pub tile_w: usize,
    pub overlap: usize,
    rows: Vec<Span>,
    cols: Vec<Span>,
}

impl TileLayout {
    pub fn new(height: usize, width: usize, tile_h: usize, tile_w: usize, overlap: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(param_err!("empty image"));
        }
        for t in [tile_h, tile_w] {
            if t == 0 || 2 * overlap > t {
                return Err(param_err!("tile {t} must be positive and at least twice the overlap {overlap}"));
            }
        }
        Ok(Self {
            height,
            width,
            tile_h,
            tile_w,
            overlap,
            rows: spans(height, tile_h, overlap),
            cols: spans(width, tile_w, overlap),
        })
    }

    pub fn square(height: usize, width: usize, tile: usize, overlap: usize) -> Result<Self> {
        Self::new(height, width, tile, tile, overlap)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn rows(&self) -> &[Span] {
        &self.rows
    }

    pub fn cols(&self) -> &[Span] {
        &self.cols
    }

    /// Tiles in row-major (canonical) order: (source rect, owned rect).
    pub fn tiles(&self) -> Vec<(Rect, Rect)> {
        self.rows
            .iter()
            .flat_map(|r| {
                self.cols.iter().map(move |c| {
                    (
                        Rect { y: r.start, x: c.start, h: r.end - r.start, w: c.end - c.start },
                        Rect { y: r.own_start, x: c.own_start, h: r.own_end - r.own_start, w: c.own_end - c.own_start },
                    )
                })
            })
            .collect()
    }

    /// Blend weights of tile `(row, col)` over its source rect, row-major.
    /// Inside an overlap band the outer `margin` pixels of each tile get
    /// zero weight and the rest ramps linearly.
    pub fn blend_weights(&self, row: usize, col: usize, margin: usize) -> Vec<f32> {
        let wy = axis_weights(&self.rows, row, margin);
        let wx = axis_weights(&self.cols, col, margin);
        wy.iter().flat_map(|a| wx.iter().map(move |b| (a * b) as f32)).collect()
    }
}

fn spans(len: usize, tile: usize, overlap: usize) -> Vec<Span> {
    let stride = tile - overlap;
    let mut out: Vec<Span> = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + tile).min(len);
        out.push(Span { start, end, own_start: start, own_end: end });
        if end == len {
            break;
        }
        start += stride;
    }
    for i in 1..out.len() {
        let split = (out[i].start + out[i - 1].end) / 2;
        out[i - 1].own_end = split;
        out[i].own_start = split;
    }
    out
}

/// Weight of the later tile at absolute position `p` of the overlap band `[lo, hi)`.
fn ramp(p: usize, lo: usize, hi: usize, margin: usize) -> f64 {
    let width = hi - lo;
    let margin = margin.min(width.saturating_sub(1) / 2);
    let t = (p as f64 + 0.5 - (lo + margin) as f64) / (width - 2 * margin) as f64;
    t.clamp(0.0, 1.0)
}

fn axis_weights(spans: &[Span], i: usize, margin: usize) -> Vec<f64> {
    let s = spans[i];
    (s.start..s.end)
        .map(|p| {
            let mut w = 1.0;
            if i > 0 && p < spans[i - 1].end {
                w = ramp(p, s.start, spans[i - 1].end, margin);
            }
            if let Some(next) = spans.get(i + 1) {
                if p >= next.start {
                    w = 1.0 - ramp(p, next.start, s.end, margin);
                }
            }
            w
        })
        .collect()
}

/// Result of a tiled evaluation.
#[derive(Clone, Debug)]
pub struct TiledOutput {
    pub output: Tensor,
    /// Layout problems that prevent tiles from matching the full-image result.
    pub warnings: Vec<String>,
    /// Merged statistics per GroupNorm layer (sync only).
    pub stats: Option<Vec<GroupNormStats>>,
}

/// Evaluates `f` tile by tile and blends the overlaps. With `sync`, every
/// GroupNorm layer normalizes with statistics merged over the owned regions
/// of all tiles, gathered layer by layer in canonical tile order.
pub fn tiled_apply<F: NormNetwork + ?Sized>(f: &F, x: &Tensor, layout: &TileLayout, sync: bool) -> Result<TiledOutput> {
    if x.height() != layout.height || x.width() != layout.width {
        return Err(dim_err!(
            "layout is {}x{}, input {}x{}",
            layout.height,
            layout.width,
            x.height(),
            x.width()
        ));
    }
    let radius = f.receptive_radius();
    let mut warnings = Vec::new();
    let (gr, gc) = layout.grid();
    let smallest_tile = layout.rows.iter().chain(&layout.cols).map(|s| s.end - s.start).min().unwrap_or(0);
    if (gr > 1 || gc > 1) && smallest_tile < 2 * radius + 1 {
        warnings.push(format!("tile extent {smallest_tile} is smaller than the receptive field {}", 2 * radius + 1));
    }
    if (gr > 1 || gc > 1) && layout.overlap < 2 * radius + 1 {
        warnings.push(format!(
            "overlap {} is narrower than the receptive field {}; seams will not be exact",
            layout.overlap,
            2 * radius + 1
        ));
    }

    let tiles = layout.tiles();
    let crops: Vec<Tensor> = tiles.iter().map(|(src, _)| x.crop(src.y, src.x, src.h, src.w)).collect::<Result<_>>()?;

    let stats = if sync {
        let mut merged: Vec<GroupNormStats> = Vec::with_capacity(f.norm_layers());
        for layer in 0..f.norm_layers() {
            let per_tile: Vec<GroupNormStats> = tiles
                .par_iter()
                .zip(&crops)
                .map(|((src, own), crop)| {
                    let mut hook = Collect {
                        target: layer,
                        known: &merged,
                        window: Rect { y: own.y - src.y, x: own.x - src.x, h: own.h, w: own.w },
                        found: None,
                    };
                    f.forward_with(crop, &mut hook)?;
                    hook.found.ok_or_else(|| param_err!("network skipped GroupNorm layer {layer}"))
                })
                .collect::<Result<_>>()?;
            let mut acc = per_tile[0].clone();
            for s in &per_tile[1..] {
                acc.merge(s)?;
            }
            merged.push(acc);
        }
        Some(merged)
    } else {
        None
    };

    let outputs: Vec<Tensor> = crops
        .par_iter()
        .map(|crop| match &stats {
            Some(s) => f.forward_with(crop, &mut FixedStats(s)),
            None => f.forward(crop),
        })
        .collect::<Result<_>>()?;

    let [n, oc, _, _] = outputs[0].shape();
    let mut out = Tensor::zeros([n, oc, layout.height, layout.width]);
    for (idx, ((src, _), tile)) in tiles.iter().zip(&outputs).enumerate() {
        if tile.height() != src.h || tile.width() != src.w {
            return Err(dim_err!("network changed tile size {}x{} to {}x{}", src.h, src.w, tile.height(), tile.width()));
        }
        let weights = layout.blend_weights(idx / gc, idx % gc, radius);
        for b in 0..n {
            for c in 0..oc {
                let tp = tile.plane(b, c);
                let op = out.plane_mut(b, c);
                for ty in 0..src.h {
                    let row = &mut op[(src.y + ty) * layout.width + src.x..][..src.w];
                    for ((o, &v), &w) in row.iter_mut().zip(&tp[ty * src.w..]).zip(&weights[ty * src.w..]) {
                        *o += w * v;
                    }
                }
            }
        }
    }
    Ok(TiledOutput { output: out, warnings, stats })
}

/// Largest per-tile gap between the mean of `tiled` and of `reference`
/// over each tile's owned region.
pub fn tile_mean_gap(tiled: &Tensor, reference: &Tensor, layout: &TileLayout) -> Result<f64> {
    tiled.check_same_shape(reference)?;
    let diff = tiled.sub(reference)?;
    let mut worst = 0f64;
    for (_, own) in layout.tiles() {
        let region = diff.crop(own.y, own.x, own.h, own.w)?;
        let mean = region.data().iter().map(|&v| f64::from(v)).sum::<f64>() / region.data().len() as f64;
        worst = worst.max(mean.abs());
    }
    Ok(worst)
}
