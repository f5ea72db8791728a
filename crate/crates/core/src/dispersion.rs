//! Convolution dispersion.
//!
//! A pre-trained `r x r` kernel `k` is enlarged to `r' x r'` by a fixed
//! linear map `R`, `k' = R k`. `R` is calibrated once by least squares so
//! that the enlarged kernel
//!
//! * on a feature map upscaled by `d` reproduces the upscaled output of the
//!   original kernel (structure term), and
//! * on the original feature map behaves like the original kernel (pixel
//!   term, weighted by `eta`).
//!
//! Both terms are linear in `k`, so the problem separates over the `r^2`
//! one-hot basis kernels and every column of `R` shares one normal matrix.
//! Each term is a mean over the interior pixels of its own grid.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dten::DtenArray;
use crate::error::{dim_err, param_err, Error, Result};
use crate::redilation::{strided_len, Stretch};
use crate::tensor::{conv2d_same, conv2d_strided, interp, resize_bilinear, Kernel, PadMode, PadSpec, Tensor};

/// Diagonal damping added to the normal matrix.
pub const TIKHONOV_DAMPING: f64 = 1e-8;

/// A Cholesky pivot below this fraction of the largest undamped diagonal
/// entry (plus the damping itself) marks the system as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-7;

pub const DEFAULT_ETA: f64 = 1.0;
pub const DEFAULT_PATCHES: usize = 64;
pub const DEFAULT_PATCH_SIZE: usize = 16;
pub const DEFAULT_SEED: u64 = 7;

/// Single-channel feature patches over which the calibration is posed.
#[derive(Clone, Debug)]
pub struct CalibrationSet {
    samples: Vec<Tensor>,
}

impl CalibrationSet {
    pub fn new(samples: Vec<Tensor>) -> Result<Self> {
        if samples.is_empty() {
            return Err(param_err!("calibration set is empty"));
        }
        for s in &samples {
            let [n, c, _, _] = s.shape();
            if n != 1 || c != 1 {
                return Err(dim_err!("calibration patches must be 1x1xHxW, got {:?}", s.shape()));
            }
        }
        Ok(Self { samples })
    }

    /// `count` square patches of i.i.d. standard-normal noise.
    pub fn white_noise(count: usize, size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(
            (0..count)
                .map(|_| Tensor::randn([1, 1, size, size], &mut rng))
                .collect(),
        )
    }

    pub fn samples(&self) -> &[Tensor] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Geometry and weighting of a dispersion problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersionParams {
    pub r: usize,
    pub r_prime: usize,
    /// Perception-field multiple; also the upscale factor of the structure term.
    pub d: f64,
    pub eta: f64,
}

impl DispersionParams {
    pub fn new(r: usize, r_prime: usize, d: f64, eta: f64) -> Result<Self> {
        let p = Self { r, r_prime, d, eta };
        p.validate()?;
        Ok(p)
    }

    /// The kernel-size rule `r' = d(r - 1) + 1` for integer `d`.
    pub fn for_integer_scale(r: usize, d: usize, eta: f64) -> Result<Self> {
        Self::new(r, d * (r.max(1) - 1) + 1, d as f64, eta)
    }

    fn validate(&self) -> Result<()> {
        let Self { r, r_prime, d, eta } = *self;
        if r == 0 || r % 2 == 0 || r_prime % 2 == 0 {
            return Err(param_err!("kernel sizes must be odd, got {r} -> {r_prime}"));
        }
        if r_prime < r {
            return Err(param_err!("dispersed size {r_prime} is smaller than {r}"));
        }
        if !(d.is_finite() && d >= 1.0) {
            return Err(param_err!("scale d must be >= 1, got {d}"));
        }
        if d.fract() == 0.0 && r_prime != (d as usize) * (r - 1) + 1 {
            return Err(param_err!(
                "integer scale {d} needs r' = {}, got {r_prime}",
                (d as usize) * (r - 1) + 1
            ));
        }
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(param_err!("eta must be finite and >= 0, got {eta}"));
        }
        Ok(())
    }

    /// Pixels excluded at each border of both loss grids.
    pub fn margin(&self) -> usize {
        self.r_prime
    }
}

/// The two calibration terms for one kernel pair, each a mean over interior pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub structure: f64,
    pub pixel: f64,
    pub eta: f64,
}

impl Objective {
    pub fn total(&self) -> f64 {
        self.structure + self.eta * self.pixel
    }
}

/// The calibrated map `R` of shape `(r'^2, r^2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DispersionOperator {
    params: DispersionParams,
    matrix: Vec<f32>,
    /// RMS structure error over the calibration set and all basis kernels.
    pub structure_residual: f64,
    /// RMS pixel error over the calibration set and all basis kernels.
    pub pixel_residual: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    r: usize,
    r_prime: usize,
    d: f64,
    eta: f64,
    structure_residual: f64,
    pixel_residual: f64,
    damping: f64,
}

impl DispersionOperator {
    pub fn from_matrix(params: DispersionParams, matrix: Vec<f32>) -> Result<Self> {
        params.validate()?;
        let expect = params.r_prime.pow(2) * params.r.pow(2);
        if matrix.len() != expect {
            return Err(dim_err!("operator needs {expect} entries, got {}", matrix.len()));
        }
        Ok(Self {
            params,
            matrix,
            structure_residual: f64::NAN,
            pixel_residual: f64::NAN,
        })
    }

    /// `R = I` for `r' = r`, `d = 1`.
    pub fn identity(r: usize) -> Result<Self> {
        let params = DispersionParams::new(r, r, 1.0, DEFAULT_ETA)?;
        let n = r * r;
        let mut matrix = vec![0f32; n * n];
        for i in 0..n {
            matrix[i * n + i] = 1.0;
        }
        Ok(Self {
            params,
            matrix,
            structure_residual: 0.0,
            pixel_residual: 0.0,
        })
    }

    pub fn params(&self) -> DispersionParams {
        self.params
    }

    pub fn r(&self) -> usize {
        self.params.r
    }

    pub fn r_prime(&self) -> usize {
        self.params.r_prime
    }

    pub fn d(&self) -> f64 {
        self.params.d
    }

    pub fn eta(&self) -> f64 {
        self.params.eta
    }

    /// Row-major `(r'^2, r^2)` matrix.
    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    /// Column `j` of `R`: the dispersed image of the `j`-th one-hot kernel.
    pub fn column(&self, j: usize) -> Vec<f32> {
        let cols = self.params.r.pow(2);
        (0..self.params.r_prime.pow(2))
            .map(|m| self.matrix[m * cols + j])
            .collect()
    }

    /// `k' = R k` for one `r x r` slice.
    pub fn apply(&self, taps: &[f32]) -> Result<Vec<f32>> {
        let cols = self.params.r.pow(2);
        if taps.len() != cols {
            return Err(dim_err!("operator expects {cols} taps, got {}", taps.len()));
        }
        Ok(self
            .matrix
            .chunks_exact(cols)
            .map(|row| {
                row.iter()
                    .zip(taps)
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum::<f64>() as f32
            })
            .collect())
    }

    /// Calibration objective of `R k` for a single-channel kernel `k`.
    pub fn objective(&self, taps: &[f32], calib: &CalibrationSet) -> Result<Objective> {
        let dispersed = self.apply(taps)?;
        calibration_objective(&self.params, taps, &dispersed, calib)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (r2, rp2) = (self.params.r.pow(2), self.params.r_prime.pow(2));
        DtenArray::new(vec![rp2, r2], self.matrix.clone())?.save(path)?;
        let sidecar = Sidecar {
            r: self.params.r,
            r_prime: self.params.r_prime,
            d: self.params.d,
            eta: self.params.eta,
            structure_residual: self.structure_residual,
            pixel_residual: self.pixel_residual,
            damping: TIKHONOV_DAMPING,
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    /// Loads `R` and its JSON sidecar. Without a sidecar the geometry is
    /// inferred from the matrix shape, `eta` and the residuals are NaN.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let arr = DtenArray::load(path)?;
        if arr.dims.len() != 2 {
            return Err(Error::Format(format!("operator must be 2-D, got {:?}", arr.dims)));
        }
        let side = sidecar_path(path);
        if side.exists() {
            let s: Sidecar = serde_json::from_str(&fs::read_to_string(side)?)?;
            let mut op = Self::from_matrix(DispersionParams::new(s.r, s.r_prime, s.d, s.eta)?, arr.data)?;
            if arr.dims != [s.r_prime.pow(2), s.r.pow(2)] {
                return Err(Error::Format(format!("operator dims {:?} disagree with sidecar", arr.dims)));
            }
            op.structure_residual = s.structure_residual;
            op.pixel_residual = s.pixel_residual;
            return Ok(op);
        }
        let r = exact_sqrt(arr.dims[1])?;
        let r_prime = exact_sqrt(arr.dims[0])?;
        let d = if r > 1 { (r_prime - 1) as f64 / (r - 1) as f64 } else { 1.0 };
        let mut op = Self::from_matrix(DispersionParams::new(r, r_prime, d, 0.0)?, arr.data)?;
        op.params.eta = f64::NAN;
        Ok(op)
    }

    /// Loads `dir/R_{r}to{r'}_d{d}_eta{eta}.dten`, solving and saving it on a miss.
    pub fn cached(dir: impl AsRef<Path>, params: DispersionParams, calib: &CalibrationSet) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(format!(
            "R_{}to{}_d{}_eta{}.dten",
            params.r, params.r_prime, params.d, params.eta
        ));
        if path.exists() {
            let op = Self::load(&path)?;
            if op.params == params {
                return Ok(op);
            }
        }
        fs::create_dir_all(dir)?;
        let op = solve_dispersion(params, calib)?;
        op.save(&path)?;
        Ok(op)
    }
}

/// `foo.dten` -> `foo.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn exact_sqrt(n: usize) -> Result<usize> {
    let r = (n as f64).sqrt().round() as usize;
    if r * r != n {
        return Err(Error::Format(format!("{n} is not a square kernel size")));
    }
    Ok(r)
}

fn one_hot(r: usize, j: usize) -> Kernel {
    let mut data = vec![0f32; r * r];
    data[j] = 1.0;
    Kernel::single(r, data).expect("odd size")
}

/// Row-major list of pixels at least `margin` from every border.
fn interior(len_h: usize, len_w: usize, margin: usize) -> impl Iterator<Item = (usize, usize)> {
    let ys = margin..len_h.saturating_sub(margin);
    ys.flat_map(move |y| (margin..len_w.saturating_sub(margin)).map(move |x| (y, x)))
}

/// Gathers the `r' x r'` neighbourhood of `(y, x)`, zero outside the map.
fn gather(plane: &[f32], h: usize, w: usize, y: usize, x: usize, r_prime: usize, out: &mut [f64]) {
    let half = (r_prime / 2) as isize;
    let mut i = 0;
    for dy in -half..=half {
        for dx in -half..=half {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            out[i] = if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                0.0
            } else {
                f64::from(plane[yy as usize * w + xx as usize])
            };
            i += 1;
        }
    }
}

/// Per-sample tensors shared by the solver and the evaluator.
struct Grids {
    base: Tensor,
    up: Tensor,
}

fn grids(params: &DispersionParams, calib: &CalibrationSet) -> Result<Vec<Grids>> {
    let min = 2 * params.margin() + 1;
    calib
        .samples()
        .iter()
        .map(|h| {
            if h.height() < min || h.width() < min {
                return Err(dim_err!(
                    "calibration patch {}x{} smaller than {min}x{min}",
                    h.height(),
                    h.width()
                ));
            }
            Ok(Grids {
                base: h.clone(),
                up: interp(h, params.d)?,
            })
        })
        .collect()
}

/// Solves for `R` over the one-hot basis of `r x r` kernels.
pub fn solve_dispersion(params: DispersionParams, calib: &CalibrationSet) -> Result<DispersionOperator> {
    params.validate()?;
    let DispersionParams { r, r_prime, eta, .. } = params;
    let (r2, n) = (r * r, r_prime * r_prime);
    let margin = params.margin();
    let samples = grids(&params, calib)?;

    // Targets per basis kernel: interp_d(f_e(h)) on the upscaled grid, f_e(h) on the base grid.
    let basis: Vec<Kernel> = (0..r2).map(|j| one_hot(r, j)).collect();

    let mut s_gram = vec![0f64; n * n];
    let mut p_gram = vec![0f64; n * n];
    let mut s_rhs = vec![0f64; n * r2];
    let mut p_rhs = vec![0f64; n * r2];
    let (mut s_count, mut p_count) = (0usize, 0usize);
    let mut patch = vec![0f64; n];

    for g in &samples {
        let targets: Vec<(Tensor, Tensor)> = basis
            .iter()
            .map(|e| {
                let out = conv2d_same(&g.base, e, 1)?;
                Ok((interp(&out, params.d)?, out))
            })
            .collect::<Result<_>>()?;

        let (uh, uw) = (g.up.height(), g.up.width());
        for (y, x) in interior(uh, uw, margin) {
            gather(g.up.data(), uh, uw, y, x, r_prime, &mut patch);
            accumulate(&mut s_gram, &mut s_rhs, &patch, y * uw + x, targets.iter().map(|t| &t.0));
            s_count += 1;
        }
        let (bh, bw) = (g.base.height(), g.base.width());
        for (y, x) in interior(bh, bw, margin) {
            gather(g.base.data(), bh, bw, y, x, r_prime, &mut patch);
            accumulate(&mut p_gram, &mut p_rhs, &patch, y * bw + x, targets.iter().map(|t| &t.1));
            p_count += 1;
        }
    }
    if s_count == 0 || p_count == 0 {
        return Err(dim_err!("calibration patches have no interior pixels"));
    }

    let (ws, wp) = (1.0 / s_count as f64, eta / p_count as f64);
    let mut gram: Vec<f64> = s_gram.iter().zip(&p_gram).map(|(s, p)| ws * s + wp * p).collect();
    let scale = (0..n).map(|i| gram[i * n + i]).fold(0.0, f64::max);
    for i in 0..n {
        gram[i * n + i] += TIKHONOV_DAMPING;
    }
    let chol = cholesky(&gram, n, scale)?;

    let mut matrix = vec![0f32; n * r2];
    for j in 0..r2 {
        let rhs: Vec<f64> = (0..n).map(|m| ws * s_rhs[m * r2 + j] + wp * p_rhs[m * r2 + j]).collect();
        let col = cholesky_solve(&chol, n, &rhs);
        for m in 0..n {
            matrix[m * r2 + j] = col[m] as f32;
        }
    }

    let mut op = DispersionOperator::from_matrix(params, matrix)?;
    let (mut s_sum, mut p_sum) = (0.0, 0.0);
    for j in 0..r2 {
        let mut taps = vec![0f32; r2];
        taps[j] = 1.0;
        let obj = op.objective(&taps, calib)?;
        s_sum += obj.structure;
        p_sum += obj.pixel;
    }
    op.structure_residual = (s_sum / r2 as f64).sqrt();
    op.pixel_residual = (p_sum / r2 as f64).sqrt();
    Ok(op)
}

/// Least-squares `k'` for one kernel, solved directly rather than through
/// the basis. By linearity this equals `R k` up to rounding.
pub fn solve_for_kernel(params: DispersionParams, taps: &[f32], calib: &CalibrationSet) -> Result<Vec<f32>> {
    params.validate()?;
    let DispersionParams { r, r_prime, eta, .. } = params;
    let k = Kernel::single(r, taps.to_vec())?;
    let n = r_prime * r_prime;
    let margin = params.margin();
    let mut s_gram = vec![0f64; n * n];
    let mut p_gram = vec![0f64; n * n];
    let mut s_rhs = vec![0f64; n];
    let mut p_rhs = vec![0f64; n];
    let (mut s_count, mut p_count) = (0usize, 0usize);
    let mut patch = vec![0f64; n];
    for g in grids(&params, calib)? {
        let out = conv2d_same(&g.base, &k, 1)?;
        let up_target = interp(&out, params.d)?;
        let (uh, uw) = (g.up.height(), g.up.width());
        for (y, x) in interior(uh, uw, margin) {
            gather(g.up.data(), uh, uw, y, x, r_prime, &mut patch);
            accumulate(&mut s_gram, &mut s_rhs, &patch, y * uw + x, std::iter::once(&up_target));
            s_count += 1;
        }
        let (bh, bw) = (g.base.height(), g.base.width());
        for (y, x) in interior(bh, bw, margin) {
            gather(g.base.data(), bh, bw, y, x, r_prime, &mut patch);
            accumulate(&mut p_gram, &mut p_rhs, &patch, y * bw + x, std::iter::once(&out));
            p_count += 1;
        }
    }
    if s_count == 0 || p_count == 0 {
        return Err(dim_err!("calibration patches have no interior pixels"));
    }
    let (ws, wp) = (1.0 / s_count as f64, eta / p_count as f64);
    let mut gram: Vec<f64> = s_gram.iter().zip(&p_gram).map(|(s, p)| ws * s + wp * p).collect();
    let scale = (0..n).map(|i| gram[i * n + i]).fold(0.0, f64::max);
    for i in 0..n {
        gram[i * n + i] += TIKHONOV_DAMPING;
    }
    let chol = cholesky(&gram, n, scale)?;
    let rhs: Vec<f64> = s_rhs.iter().zip(&p_rhs).map(|(s, p)| ws * s + wp * p).collect();
    Ok(cholesky_solve(&chol, n, &rhs).into_iter().map(|v| v as f32).collect())
}

fn accumulate<'a>(
    gram: &mut [f64],
    rhs: &mut [f64],
    patch: &[f64],
    offset: usize,
    targets: impl Iterator<Item = &'a Tensor>,
) {
    let n = patch.len();
    for a in 0..n {
        let pa = patch[a];
        if pa == 0.0 {
            continue;
        }
        let row = &mut gram[a * n..(a + 1) * n];
        for (g, &pb) in row.iter_mut().zip(patch) {
            *g += pa * pb;
        }
    }
    let r2 = rhs.len() / n;
    for (j, t) in targets.enumerate() {
        let tv = f64::from(t.data()[offset]);
        for a in 0..n {
            rhs[a * r2 + j] += patch[a] * tv;
        }
    }
}

/// Lower-triangular factor of a symmetric positive-definite matrix.
fn cholesky(a: &[f64], n: usize, scale: f64) -> Result<Vec<f64>> {
    let mut l = vec![0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(sum > RANK_TOLERANCE * scale + TIKHONOV_DAMPING) {
                    return Err(Error::SingularSystem { column: i, pivot: sum });
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0f64; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0f64; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    x
}

/// Evaluates both calibration terms for an explicit pair `(k, k')`.
pub fn calibration_objective(
    params: &DispersionParams,
    taps: &[f32],
    dispersed: &[f32],
    calib: &CalibrationSet,
) -> Result<Objective> {
    params.validate()?;
    let k = Kernel::single(params.r, taps.to_vec())?;
    let kp = Kernel::single(params.r_prime, dispersed.to_vec())?;
    let margin = params.margin();
    let (mut s_err, mut p_err, mut s_n, mut p_n) = (0f64, 0f64, 0usize, 0usize);
    for g in grids(params, calib)? {
        let out = conv2d_same(&g.base, &k, 1)?;
        let target = interp(&out, params.d)?;
        let up_conv = conv2d_same(&g.up, &kp, 1)?;
        let base_conv = conv2d_same(&g.base, &kp, 1)?;
        for (y, x) in interior(target.height(), target.width(), margin) {
            let e = f64::from(target.at(0, 0, y, x)) - f64::from(up_conv.at(0, 0, y, x));
            s_err += e * e;
            s_n += 1;
        }
        for (y, x) in interior(out.height(), out.width(), margin) {
            let e = f64::from(out.at(0, 0, y, x)) - f64::from(base_conv.at(0, 0, y, x));
            p_err += e * e;
            p_n += 1;
        }
    }
    Ok(Objective {
        structure: s_err / s_n.max(1) as f64,
        pixel: p_err / p_n.max(1) as f64,
        eta: params.eta,
    })
}

/// Applies `R` to every `(out, in)` slice of `k`; the bias is kept.
pub fn disperse_kernel(op: &DispersionOperator, k: &Kernel) -> Result<Kernel> {
    if k.size() != op.r() {
        return Err(dim_err!("kernel size {} does not match operator r = {}", k.size(), op.r()));
    }
    let [o, i, _, _] = k.shape();
    let mut data = Vec::with_capacity(o * i * op.r_prime().pow(2));
    for oc in 0..o {
        for ic in 0..i {
            data.extend(op.apply(k.slice(oc, ic))?);
        }
    }
    Kernel::new([o, i, op.r_prime(), op.r_prime()], data, k.bias().map(<[f32]>::to_vec))
}

/// Convolution with a dispersed kernel at factor `d`. Integer `d` convolves
/// with `R k` directly; fractional `d` stretches the input by `ceil(d)/d`
/// first and resizes back afterwards. `ceil(d)` must equal the operator scale.
pub fn dispersed_conv(h: &Tensor, k: &Kernel, op: &DispersionOperator, d: f64) -> Result<Tensor> {
    dispersed_conv_strided(h, k, op, d, 1)
}

pub fn dispersed_conv_strided(
    h: &Tensor,
    k: &Kernel,
    op: &DispersionOperator,
    d: f64,
    stride: usize,
) -> Result<Tensor> {
    let stretch = Stretch::for_factor(d)?;
    if stretch.dilation as f64 != op.d() {
        return Err(param_err!(
            "factor {d} needs a scale-{} operator, got scale {}",
            stretch.dilation,
            op.d()
        ));
    }
    let kp = disperse_kernel(op, k)?;
    let pad = PadSpec::same(PadMode::Zero, &kp, 1);
    if stretch.is_integer() {
        return conv2d_strided(h, &kp, pad, 1, stride);
    }
    let (out_h, out_w) = strided_len(h, stride)?;
    let stretched = interp(h, stretch.scale)?;
    let conv = conv2d_strided(&stretched, &kp, pad, 1, stride)?;
    resize_bilinear(&conv, out_h, out_w)
}
