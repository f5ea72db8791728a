//! Dense 4-D feature arrays and convolution kernels.
//!
//! Everything here is pure: operations take immutable inputs and allocate
//! fresh outputs. Internal parallelism only splits work over independent
//! output planes, so results never depend on the worker count.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{dim_err, param_err, Result};

/// Dense `(batch, channels, height, width)` array of `f32`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(dim_err!(
                "tensor of shape {shape:?} needs {len} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// Standard-normal samples drawn in row-major order.
    pub fn randn<R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f32) {
        let i = self.offset(n, c, y, x);
        self.data[i] = value;
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &mut self.data[start..start + len]
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f32) -> Self {
        self.map(|v| v * factor)
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err!(
                "shape mismatch: {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f32::max)
    }

    /// Root mean square of all entries, accumulated in `f64`.
    pub fn rms(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
        (ss / self.data.len() as f64).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Spatial crop `[y0, y0 + h) x [x0, x0 + w)` across all batches and channels.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height() || x0 + w > self.width() {
            return Err(dim_err!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height(),
                self.width()
            ));
        }
        let [n, c, _, _] = self.shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                let plane = self.plane(b, ch);
                for y in y0..y0 + h {
                    let row = &plane[y * self.width()..(y + 1) * self.width()];
                    data.extend_from_slice(&row[x0..x0 + w]);
                }
            }
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Self> {
        let [n, c1, h, w] = self.shape;
        let [n2, c2, h2, w2] = other.shape;
        if n != n2 || h != h2 || w != w2 {
            return Err(dim_err!(
                "cannot concat {:?} and {:?} on channels",
                self.shape,
                other.shape
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (c1 + c2) * plane);
        for b in 0..n {
            data.extend_from_slice(&self.data[b * c1 * plane..(b + 1) * c1 * plane]);
            data.extend_from_slice(&other.data[b * c2 * plane..(b + 1) * c2 * plane]);
        }
        Ok(Self {
            shape: [n, c1 + c2, h, w],
            data,
        })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2x(&self) -> Self {
        let [n, c, h, w] = self.shape;
        Self::from_fn([n, c, 2 * h, 2 * w], |b, ch, y, x| self.at(b, ch, y / 2, x / 2))
    }

    /// Raw little-endian bytes of the payload, for hashing and golden files.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Convolution weight `(out_channels, in_channels, r, r)` with optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    shape: [usize; 4],
    data: Vec<f32>,
    bias: Option<Vec<f32>>,
}

impl Kernel {
    pub fn new(shape: [usize; 4], data: Vec<f32>, bias: Option<Vec<f32>>) -> Result<Self> {
        let [out_c, _, kh, kw] = shape;
        if kh != kw {
            return Err(param_err!("kernel must be square, got {kh}x{kw}"));
        }
        if kh == 0 || kh % 2 == 0 {
            return Err(param_err!("kernel size must be odd and >= 1, got {kh}"));
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(dim_err!(
                "kernel of shape {shape:?} needs {len} values, got {}",
                data.len()
            ));
        }
        if let Some(b) = &bias {
            if b.len() != out_c {
                return Err(dim_err!("bias has {} entries for {out_c} outputs", b.len()));
            }
        }
        Ok(Self { shape, data, bias })
    }

    /// Single-channel kernel from an `r x r` row-major slice.
    pub fn single(r: usize, data: Vec<f32>) -> Result<Self> {
        Self::new([1, 1, r, r], data, None)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn out_channels(&self) -> usize {
        self.shape[0]
    }

    pub fn in_channels(&self) -> usize {
        self.shape[1]
    }

    pub fn size(&self) -> usize {
        self.shape[2]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    pub fn with_bias(mut self, bias: Option<Vec<f32>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != self.out_channels() {
                return Err(dim_err!(
                    "bias has {} entries for {} outputs",
                    b.len(),
                    self.out_channels()
                ));
            }
        }
        self.bias = bias;
        Ok(self)
    }

    /// The `r x r` slice for one (out, in) channel pair.
    pub fn slice(&self, o: usize, i: usize) -> &[f32] {
        let r2 = self.shape[2] * self.shape[3];
        let start = (o * self.shape[1] + i) * r2;
        &self.data[start..start + r2]
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    /// Radius of the footprint once dilated by `dilation`.
    pub fn effective_radius(&self, dilation: usize) -> usize {
        dilation * (self.size() - 1) / 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

/// Border handling for a convolution, with per-side amounts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadSpec {
    pub mode: PadMode,
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl PadSpec {
    pub fn uniform(mode: PadMode, amount: usize) -> Self {
        Self {
            mode,
            top: amount,
            bottom: amount,
            left: amount,
            right: amount,
        }
    }

    /// Padding that keeps the spatial size for `kernel` dilated by `dilation`.
    pub fn same(mode: PadMode, kernel: &Kernel, dilation: usize) -> Self {
        Self::uniform(mode, kernel.effective_radius(dilation))
    }
}

/// 2-D cross-correlation `out(o) = sum_q h(o + d*q) * k(q)` with the kernel
/// anchored at its centre, `q` ranging over `[-(r-1)/2, (r-1)/2]^2`.
///
/// Each output pixel accumulates in a fixed order: input channel, then
/// kernel row, then kernel column, then bias. Exactly-zero taps are skipped,
/// which makes a pre-dilated kernel at dilation 1 bit-identical to the
/// original kernel at dilation `d`.
pub fn conv2d(h: &Tensor, k: &Kernel, pad: PadSpec, dilation: usize) -> Result<Tensor> {
    conv2d_strided(h, k, pad, dilation, 1)
}

/// Zero-padded "same" convolution.
pub fn conv2d_same(h: &Tensor, k: &Kernel, dilation: usize) -> Result<Tensor> {
    if dilation == 0 {
        return Err(param_err!("dilation must be >= 1"));
    }
    conv2d(h, k, PadSpec::same(PadMode::Zero, k, dilation), dilation)
}

pub fn conv2d_strided(
    h: &Tensor,
    k: &Kernel,
    pad: PadSpec,
    dilation: usize,
    stride: usize,
) -> Result<Tensor> {
    if dilation == 0 {
        return Err(param_err!("dilation must be >= 1"));
    }
    if stride == 0 {
        return Err(param_err!("stride must be >= 1"));
    }
    let [batch, in_c, in_h, in_w] = h.shape();
    let [out_c, k_in, r, _] = k.shape();
    if in_c != k_in {
        return Err(dim_err!(
            "input has {in_c} channels, kernel expects {k_in}"
        ));
    }
    let span = dilation * (r - 1) + 1;
    let padded_h = in_h + pad.top + pad.bottom;
    let padded_w = in_w + pad.left + pad.right;
    if padded_h < span || padded_w < span {
        return Err(dim_err!(
            "padded input {padded_h}x{padded_w} smaller than dilated kernel {span}"
        ));
    }
    let out_h = (padded_h - span) / stride + 1;
    let out_w = (padded_w - span) / stride + 1;
    let out_plane = out_h * out_w;
    let mut out = vec![0f32; batch * out_c * out_plane];
    let padded = pad_planes(h, pad, padded_h, padded_w);
    let padded_plane = padded_h * padded_w;

    // per pixel, taps accumulate in (in channel, kernel row, kernel column) order
    out.par_chunks_mut(out_plane)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (b, oc) = (idx / out_c, idx % out_c);
            let mut taps: Vec<(usize, f32)> = Vec::with_capacity(r);
            for ic in 0..in_c {
                let start = (b * in_c + ic) * padded_plane;
                let src = &padded[start..start + padded_plane];
                let weights = k.slice(oc, ic);
                for ky in 0..r {
                    taps.clear();
                    taps.extend(
                        (0..r)
                            .map(|kx| (kx * dilation, weights[ky * r + kx]))
                            .filter(|&(_, w)| w != 0.0),
                    );
                    if taps.is_empty() {
                        continue;
                    }
                    for oy in 0..out_h {
                        let row_start = (oy * stride + ky * dilation) * padded_w;
                        let row = &src[row_start..row_start + padded_w];
                        accumulate_row(&mut plane[oy * out_w..(oy + 1) * out_w], row, &taps, stride);
                    }
                }
            }
            if let Some(bias) = k.bias() {
                let bv = bias[oc];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        });

    Tensor::new([batch, out_c, out_h, out_w], out)
}

fn pad_planes(h: &Tensor, pad: PadSpec, padded_h: usize, padded_w: usize) -> Vec<f32> {
    let [batch, channels, in_h, in_w] = h.shape();
    let mut out = vec![0f32; batch * channels * padded_h * padded_w];
    for (p, dst) in out.chunks_mut(padded_h * padded_w).enumerate() {
        let src = h.plane(p / channels, p % channels);
        for py in 0..padded_h {
            let iy = py as isize - pad.top as isize;
            let iy = match pad.mode {
                PadMode::Zero if iy < 0 || iy >= in_h as isize => continue,
                _ => iy.clamp(0, in_h as isize - 1) as usize,
            };
            let src_row = &src[iy * in_w..(iy + 1) * in_w];
            let dst_row = &mut dst[py * padded_w..(py + 1) * padded_w];
            dst_row[pad.left..pad.left + in_w].copy_from_slice(src_row);
            if pad.mode == PadMode::Replicate {
                dst_row[..pad.left].fill(src_row[0]);
                dst_row[pad.left + in_w..].fill(src_row[in_w - 1]);
            }
        }
    }
    out
}

/// `out[x] += sum_t w_t * row[x * stride + offset_t]`, taps in order.
fn accumulate_row(out: &mut [f32], row: &[f32], taps: &[(usize, f32)], stride: usize) {
    let n = out.len();
    if stride != 1 {
        for (x, o) in out.iter_mut().enumerate() {
            let base = x * stride;
            let mut acc = *o;
            for &(off, w) in taps {
                acc += w * row[base + off];
            }
            *o = acc;
        }
        return;
    }
    for chunk in taps.chunks(3) {
        match *chunk {
            [(a, w0), (b, w1), (c, w2)] => {
                let (s0, s1, s2) = (&row[a..a + n], &row[b..b + n], &row[c..c + n]);
                for i in 0..n {
                    out[i] = out[i] + w0 * s0[i] + w1 * s1[i] + w2 * s2[i];
                }
            }
            [(a, w0), (b, w1)] => {
                let (s0, s1) = (&row[a..a + n], &row[b..b + n]);
                for i in 0..n {
                    out[i] = out[i] + w0 * s0[i] + w1 * s1[i];
                }
            }
            [(a, w0)] => {
                for (o, &v) in out.iter_mut().zip(&row[a..a + n]) {
                    *o += w0 * v;
                }
            }
            _ => unreachable!("chunks of at most three taps"),
        }
    }
}

/// Inserts `d - 1` zeros between kernel taps, giving size `d(r-1)+1`.
pub fn dilate_kernel(k: &Kernel, d: usize) -> Result<Kernel> {
    if d == 0 {
        return Err(param_err!("dilation must be >= 1"));
    }
    if d == 1 {
        return Ok(k.clone());
    }
    let [o, i, r, _] = k.shape();
    let rd = d * (r - 1) + 1;
    let mut data = vec![0f32; o * i * rd * rd];
    for oc in 0..o {
        for ic in 0..i {
            let taps = k.slice(oc, ic);
            let base = (oc * i + ic) * rd * rd;
            for y in 0..r {
                for x in 0..r {
                    data[base + (y * d) * rd + x * d] = taps[y * r + x];
                }
            }
        }
    }
    Kernel::new([o, i, rd, rd], data, k.bias.clone())
}

/// `round(len * s)` with halves rounded up.
pub fn scaled_len(len: usize, s: f64) -> usize {
    (len as f64 * s + 0.5).floor() as usize
}

/// Bilinear resize by factor `s`; output dims are `round_half_up(dims * s)`.
pub fn interp(h: &Tensor, s: f64) -> Result<Tensor> {
    if !(s.is_finite() && s > 0.0) {
        return Err(param_err!("interpolation scale must be positive, got {s}"));
    }
    resize_bilinear(h, scaled_len(h.height(), s), scaled_len(h.width(), s))
}

/// Bilinear resize to an explicit size, half-pixel centres
/// (align-corners false), source coordinates clamped to the edge.
pub fn resize_bilinear(h: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(param_err!("resize target {out_h}x{out_w} has a zero dimension"));
    }
    let [n, c, in_h, in_w] = h.shape();
    if in_h == out_h && in_w == out_w {
        return Ok(h.clone());
    }
    let ys = axis_taps(in_h, out_h);
    let xs = axis_taps(in_w, out_w);
    let out_plane = out_h * out_w;
    let mut out = vec![0f32; n * c * out_plane];
    out.par_chunks_mut(out_plane).enumerate().for_each(|(idx, plane)| {
        let src = h.plane(idx / c, idx % c);
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            let r0 = &src[y0 * in_w..(y0 + 1) * in_w];
            let r1 = &src[y1 * in_w..(y1 + 1) * in_w];
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let top = (1.0 - lx) * r0[x0] + lx * r0[x1];
                let bot = (1.0 - lx) * r1[x0] + lx * r1[x1];
                plane[oy * out_w + ox] = (1.0 - ly) * top + ly * bot;
            }
        }
    });
    Tensor::new([n, c, out_h, out_w], out)
}

/// Per output index: (lower source index, upper source index, upper weight).
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let lambda = if i1 == i0 { 0.0 } else { (src - i0 as f64) as f32 };
            (i0, i1, lambda)
        })
        .collect()
}

/// Response of a linear (or affine) map to a centred unit impulse.
#[derive(Clone, Debug)]
pub struct ImpulseResponse {
    /// Per-pixel magnitude summed over output channels, `1 x 1 x E x E`.
    pub response: Tensor,
    /// Widest bounding-box side of the support.
    pub support_width: usize,
    pub support_height: usize,
    /// Entries above the relative threshold.
    pub nonzero_count: usize,
    /// Support reaches the probe border, so the footprint may be cut off.
    pub truncated: bool,
}

/// Relative magnitude below which a response entry counts as zero.
pub const SUPPORT_THRESHOLD: f32 = 1e-6;

/// Probes `layer` with a unit impulse at the centre of channel 0 of a
/// `1 x channels x extent x extent` input. The response to an all-zero
/// input is subtracted so biases do not widen the footprint.
pub fn impulse_response<F>(layer: F, channels: usize, extent: usize) -> Result<ImpulseResponse>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if extent == 0 || channels == 0 {
        return Err(param_err!("impulse probe needs a positive extent and channel count"));
    }
    let shape = [1, channels, extent, extent];
    let zero = Tensor::zeros(shape);
    let mut impulse = zero.clone();
    impulse.set(0, 0, extent / 2, extent / 2, 1.0);

    let hit = layer(&impulse)?;
    let base = layer(&zero)?;
    let diff = hit.sub(&base)?;
    let [_, oc, oh, ow] = diff.shape();
    let mut magnitude = Tensor::zeros([1, 1, oh, ow]);
    for c in 0..oc {
        for (m, v) in magnitude.data_mut().iter_mut().zip(diff.plane(0, c)) {
            *m += v.abs();
        }
    }

    let peak = magnitude.max_abs();
    let cut = peak * SUPPORT_THRESHOLD;
    let (mut y_lo, mut y_hi, mut x_lo, mut x_hi) = (usize::MAX, 0, usize::MAX, 0);
    let mut nonzero_count = 0;
    for y in 0..oh {
        for x in 0..ow {
            if peak > 0.0 && magnitude.at(0, 0, y, x) > cut {
                nonzero_count += 1;
                y_lo = y_lo.min(y);
                y_hi = y_hi.max(y);
                x_lo = x_lo.min(x);
                x_hi = x_hi.max(x);
            }
        }
    }
    let (support_height, support_width, truncated) = if nonzero_count == 0 {
        (0, 0, false)
    } else {
        (
            y_hi - y_lo + 1,
            x_hi - x_lo + 1,
            y_lo == 0 || x_lo == 0 || y_hi + 1 == oh || x_hi + 1 == ow,
        )
    };
    Ok(ImpulseResponse {
        response: magnitude,
        support_width: support_width.max(support_height),
        support_height,
        nonzero_count,
        truncated,
    })
}
