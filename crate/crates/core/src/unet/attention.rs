//! Single-head spatial self-attention, with the slice-partitioned variant
//! and the logit-scaling baseline.

use rayon::prelude::*;

use crate::error::{dim_err, param_err, Result};
use crate::tensor::{conv2d_same, Kernel, Tensor};

/// Per-token projections, stored as 1×1 convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub to_q: Kernel,
    pub to_k: Kernel,
    pub to_v: Kernel,
    pub to_out: Kernel,
}

impl AttentionParams {
    pub fn new(to_q: Kernel, to_k: Kernel, to_v: Kernel, to_out: Kernel) -> Result<Self> {
        let c = to_q.in_channels();
        for (name, k) in [("to_q", &to_q), ("to_k", &to_k), ("to_v", &to_v), ("to_out", &to_out)] {
            if k.size() != 1 || k.in_channels() != c || k.out_channels() != c {
                return Err(dim_err!("{name}: expected ({c}, {c}, 1, 1), got {:?}", k.shape()));
            }
        }
        Ok(Self { to_q, to_k, to_v, to_out })
    }

    pub fn channels(&self) -> usize {
        self.to_q.in_channels()
    }
}

/// Attention over every token of the map.
pub fn attention(h: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    attend(h, params, 1, 1.0)
}

/// Splits the map into `d²` interleaved slices by `(y mod d, x mod d)`,
/// attends within each slice and writes results back in place.
pub fn redilated_attention(h: &Tensor, d: usize, params: &AttentionParams) -> Result<Tensor> {
    if d == 0 {
        return Err(param_err!("attention slice factor must be >= 1"));
    }
    if !h.height().is_multiple_of(d) || !h.width().is_multiple_of(d) {
        return Err(dim_err!("{}x{} map is not divisible by slice factor {d}", h.height(), h.width()));
    }
    attend(h, params, d, 1.0)
}

/// `sqrt(log current / log trained)`.
pub fn attn_scale_factor(trained_tokens: usize, current_tokens: usize) -> Result<f64> {
    if trained_tokens < 2 || current_tokens < 2 {
        return Err(param_err!("token counts must be >= 2, got {trained_tokens} and {current_tokens}"));
    }
    Ok(((current_tokens as f64).ln() / (trained_tokens as f64).ln()).sqrt())
}

/// Plain attention with logits multiplied by [`attn_scale_factor`].
pub fn attn_scale_baseline(
    h: &Tensor,
    params: &AttentionParams,
    trained_tokens: usize,
    current_tokens: usize,
) -> Result<Tensor> {
    let f = attn_scale_factor(trained_tokens, current_tokens)?;
    attend(h, params, 1, f)
}

/// Token indices of slice `(a, b)` in row-major order.
pub fn slice_tokens(height: usize, width: usize, d: usize, a: usize, b: usize) -> Vec<usize> {
    (a..height)
        .step_by(d)
        .flat_map(|y| (b..width).step_by(d).map(move |x| y * width + x))
        .collect()
}

fn attend(h: &Tensor, params: &AttentionParams, d: usize, logit_scale: f64) -> Result<Tensor> {
    let c = params.channels();
    if h.channels() != c {
        return Err(dim_err!("attention expects {c} channels, got {}", h.channels()));
    }
    let q = conv2d_same(h, &params.to_q, 1)?;
    let k = conv2d_same(h, &params.to_k, 1)?;
    let v = conv2d_same(h, &params.to_v, 1)?;
    let [n, _, height, width] = h.shape();
    let tokens = height * width;
    let scale = (logit_scale / (c as f64).sqrt()) as f32;
    let slices: Vec<Vec<usize>> = (0..d)
        .flat_map(|a| (0..d).map(move |b| (a, b)))
        .map(|(a, b)| slice_tokens(height, width, d, a, b))
        .collect();

    // token-major copies: [n][token][channel]
    let token_major = |t: &Tensor| -> Vec<f32> {
        let mut out = vec![0f32; n * tokens * c];
        for b in 0..n {
            for ch in 0..c {
                for (p, &val) in t.plane(b, ch).iter().enumerate() {
                    out[(b * tokens + p) * c + ch] = val;
                }
            }
        }
        out
    };
    let (q, k, v) = (token_major(&q), token_major(&k), token_major(&v));

    let jobs: Vec<(usize, usize)> = (0..n).flat_map(|b| (0..slices.len()).map(move |s| (b, s))).collect();
    let results: Vec<Vec<(usize, Vec<f32>)>> = jobs
        .par_iter()
        .map(|&(b, s)| {
            let idx = &slices[s];
            fn row(m: &[f32], b: usize, p: usize, tokens: usize, c: usize) -> &[f32] {
                let o = (b * tokens + p) * c;
                &m[o..o + c]
            }
            let mut logits = vec![0f32; idx.len()];
            idx.iter()
                .map(|&qi| {
                    let qr = row(&q, b, qi, tokens, c);
                    for (l, &kj) in logits.iter_mut().zip(idx) {
                        *l = qr.iter().zip(row(&k, b, kj, tokens, c)).map(|(a, b)| a * b).sum::<f32>() * scale;
                    }
                    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut total = 0f32;
                    for l in logits.iter_mut() {
                        *l = (*l - max).exp();
                        total += *l;
                    }
                    let mut out = vec![0f32; c];
                    for (&p, &vj) in logits.iter().zip(idx) {
                        let w = p / total;
                        for (o, &val) in out.iter_mut().zip(row(&v, b, vj, tokens, c)) {
                            *o += w * val;
                        }
                    }
                    (qi, out)
                })
                .collect()
        })
        .collect();

    let mut merged = Tensor::zeros(h.shape());
    for (&(b, _), slice) in jobs.iter().zip(results) {
        for (p, vals) in slice {
            for (ch, val) in vals.into_iter().enumerate() {
                merged.plane_mut(b, ch)[p] = val;
            }
        }
    }
    conv2d_same(&merged, &params.to_out, 1)
}
