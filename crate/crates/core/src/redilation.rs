//! Inference-time re-dilation of pre-trained convolutions.
//!
//! Integer factors dilate the kernel directly. Fractional factors round the
//! dilation up to `ceil(d)` and compensate by stretching the feature map by
//! `s = ceil(d) / d` before the convolution, resizing back afterwards.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::tensor::{conv2d_same, conv2d_strided, interp, resize_bilinear, Kernel, PadMode, PadSpec, Tensor};

/// Re-dilated convolution with an integer factor and "same" zero padding.
pub fn redilated_conv(h: &Tensor, k: &Kernel, d: usize) -> Result<Tensor> {
    conv2d_same(h, k, d)
}

/// How a fractional factor is realised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stretch {
    /// Integer dilation applied to the kernel, `ceil(d)`.
    pub dilation: usize,
    /// Feature-map stretch `ceil(d) / d`.
    pub scale: f64,
}

impl Stretch {
    pub fn for_factor(d: f64) -> Result<Self> {
        if !(d.is_finite() && d >= 1.0) {
            return Err(param_err!("dilation factor must be finite and >= 1, got {d}"));
        }
        let dilation = d.ceil();
        Ok(Self {
            dilation: dilation as usize,
            scale: dilation / d,
        })
    }

    pub fn is_integer(&self) -> bool {
        self.scale == 1.0
    }
}

/// Metadata reported alongside a fractional re-dilated convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FractionalInfo {
    pub stretch: Stretch,
    /// Spatial size of the stretched feature map.
    pub stretched: (usize, usize),
}

/// `interp_{1/s}(interp_s(h) * dilate(k, ceil(d)))` with `s = ceil(d)/d`.
/// The output has the input's spatial shape.
pub fn fractional_redilated_conv(h: &Tensor, k: &Kernel, d: f64) -> Result<Tensor> {
    fractional_redilated_conv_info(h, k, d, 1).map(|(t, _)| t)
}

/// Fractional re-dilation for a convolution with the given stride. The
/// inverse resize targets the unadapted output size exactly.
pub fn fractional_redilated_conv_info(
    h: &Tensor,
    k: &Kernel,
    d: f64,
    stride: usize,
) -> Result<(Tensor, FractionalInfo)> {
    let stretch = Stretch::for_factor(d)?;
    let (out_h, out_w) = strided_len(h, stride)?;
    let stretched = interp(h, stretch.scale)?;
    let info = FractionalInfo {
        stretch,
        stretched: (stretched.height(), stretched.width()),
    };
    let pad = PadSpec::same(PadMode::Zero, k, stretch.dilation);
    let conv = conv2d_strided(&stretched, k, pad, stretch.dilation, stride)?;
    Ok((resize_bilinear(&conv, out_h, out_w)?, info))
}

/// Output size of a "same"-padded convolution with `stride`.
pub(crate) fn strided_len(h: &Tensor, stride: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(param_err!("stride must be >= 1"));
    }
    if h.height() == 0 || h.width() == 0 {
        return Err(param_err!("empty feature map"));
    }
    Ok(((h.height() - 1) / stride + 1, (h.width() - 1) / stride + 1))
}

/// Dilation factor of a layer with base factor `base` at inference step
/// `step`: 1 from `tau` on, `base` before it, or a linear decay from
/// `base` to 1 across `[0, tau)` when `progressive`.
pub fn schedule_factor(base: f64, tau: usize, progressive: bool, step: usize) -> f64 {
    if step >= tau {
        return 1.0;
    }
    if !progressive {
        return base;
    }
    1.0 + (base - 1.0) * (1.0 - step as f64 / tau as f64)
}

/// Per-layer dilation factors gated by the step threshold `tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DilationSchedule {
    pub factors: Vec<f64>,
    pub tau: usize,
    pub progressive: bool,
    pub steps: usize,
}

impl DilationSchedule {
    pub fn new(factors: Vec<f64>, tau: usize, progressive: bool, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(param_err!("schedule needs at least one inference step"));
        }
        if tau > steps {
            return Err(param_err!("tau {tau} exceeds {steps} inference steps"));
        }
        if let Some(bad) = factors.iter().find(|d| !(d.is_finite() && **d >= 1.0)) {
            return Err(param_err!("dilation factor {bad} is below 1"));
        }
        Ok(Self {
            factors,
            tau,
            progressive,
            steps,
        })
    }

    pub fn layers(&self) -> usize {
        self.factors.len()
    }

    pub fn eval(&self, step: usize, layer: usize) -> f64 {
        schedule_factor(self.factors[layer], self.tau, self.progressive, step)
    }
}
