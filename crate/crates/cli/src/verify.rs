use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use rescalekit::dispersion::{
    calibration_objective, dispersed_conv, solve_dispersion, solve_for_kernel, CalibrationSet, DispersionOperator,
    DispersionParams, DEFAULT_ETA, DEFAULT_PATCHES, DEFAULT_PATCH_SIZE, DEFAULT_SEED,
};
use rescalekit::guidance::{noise_damped_cfg, standard_cfg, GuidanceConfig, GuidanceMode};
use rescalekit::redilation::{fractional_redilated_conv, redilated_conv};
use rescalekit::sampler::{sample, SamplerConfig};
use rescalekit::tensor::{conv2d_same, dilate_kernel, impulse_response};
use rescalekit::tiled::{tile_mean_gap, tiled_apply, GnConvStack, NormNetwork, TileLayout};
use rescalekit::unet::presets;
use rescalekit::unet::attention::{attention, attn_scale_baseline, attn_scale_factor, redilated_attention, slice_tokens, AttentionParams};
use rescalekit::unet::plan::{AdaptationPlan, BlockName, ResolvedPlan};
use rescalekit::unet::weights::orthogonal_kernel;
use rescalekit::unet::{UNet, UNetConfig};
use rescalekit::{Kernel, Result, Tensor};

use crate::failure::Failure;
use crate::{Report, Suite, VerifyArgs};

const UNIVERSALITY_TOL: f64 = 1e-6;
const TILE_SYNC_TOL: f64 = 1e-4;
const SINGLE_TILE_TOL: f64 = 1e-6;
const TILE_GAP_RATIO: f64 = 10.0;
const PARTITION_TOL: f64 = 1e-6;
const SLICE_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// `measured <= threshold`
    AtMost,
    /// `measured > threshold`
    Above,
    /// `measured == threshold` exactly.
    Equals,
    /// Only required to be finite.
    Finite,
}

#[derive(Debug, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub status: &'static str,
    pub measured: f64,
    pub threshold: Option<f64>,
    pub relation: Relation,
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub pass: bool,
}

struct Recorder {
    suite: &'static str,
    checks: Vec<Check>,
}

impl Recorder {
    fn push(&mut self, name: impl Into<String>, measured: f64, relation: Relation, threshold: Option<f64>) {
        let t = threshold.unwrap_or(f64::NAN);
        let pass = measured.is_finite()
            && match relation {
                Relation::AtMost => measured <= t,
                Relation::Above => measured > t,
                Relation::Equals => measured == t,
                Relation::Finite => true,
            };
        self.checks.push(Check {
            suite: self.suite,
            name: name.into(),
            status: if pass { "pass" } else { "fail" },
            measured,
            threshold,
            relation,
        });
    }

    fn at_most(&mut self, name: impl Into<String>, measured: f64, threshold: f64) {
        self.push(name, measured, Relation::AtMost, Some(threshold));
    }

    fn equals(&mut self, name: impl Into<String>, measured: f64, expected: f64) {
        self.push(name, measured, Relation::Equals, Some(expected));
    }

    fn above(&mut self, name: impl Into<String>, measured: f64, threshold: f64) {
        self.push(name, measured, Relation::Above, Some(threshold));
    }

    fn flag(&mut self, name: impl Into<String>, ok: bool) {
        self.equals(name, f64::from(u8::from(ok)), 1.0);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_taps(g: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| g.random_range(-1.0f32..1.0)).collect()
}

fn diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.max_abs_diff(b).map(f64::from)
}

fn dispersion(r: &mut Recorder, kernels: usize, seed: u64) -> Result<()> {
    let params = DispersionParams::new(3, 5, 2.0, DEFAULT_ETA)?;
    let calib = CalibrationSet::white_noise(DEFAULT_PATCHES, DEFAULT_PATCH_SIZE, DEFAULT_SEED)?;
    let op = solve_dispersion(params, &calib)?;
    r.push("structure_residual", op.structure_residual, Relation::Finite, None);
    r.push("pixel_residual", op.pixel_residual, Relation::Finite, None);

    let (mut solved, mut naive) = (0.0, 0.0);
    for j in 0..9 {
        let mut taps = vec![0f32; 9];
        taps[j] = 1.0;
        solved += op.objective(&taps, &calib)?.total();
        let dilated = dilate_kernel(&Kernel::single(3, taps.clone())?, 2)?;
        naive += calibration_objective(&params, &taps, dilated.data(), &calib)?.total();
    }
    r.at_most("basis objective vs re-dilation", solved / 9.0, naive / 9.0);

    let mut g = rng(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..kernels {
        let taps = random_taps(&mut g, 9);
        let via_r = op.objective(&taps, &calib)?.total();
        let direct = solve_for_kernel(params, &taps, &calib)?;
        let best = calibration_objective(&params, &taps, &direct, &calib)?.total();
        worst = worst.max((via_r - best) / best.abs().max(f64::MIN_POSITIVE));
    }
    r.at_most(format!("universality gap over {kernels} kernels"), worst, UNIVERSALITY_TOL);

    let k = Kernel::single(3, random_taps(&mut g, 9))?;
    let dilated = impulse_response(|h| redilated_conv(h, &k, 2), 1, 15)?;
    let dispersed = impulse_response(|h| dispersed_conv(h, &k, &op, 2.0), 1, 15)?;
    r.above("dispersed nonzero taps beyond re-dilated", dispersed.nonzero_count as f64, dilated.nonzero_count as f64);
    r.at_most("dispersed support width", dispersed.support_width as f64, 5.0);
    Ok(())
}

fn small_unet() -> UNetConfig {
    UNetConfig { base_channels: 16, groups: 4, embed_dim: 32, ..UNetConfig::default() }
}

fn identity(r: &mut Recorder, seed: u64) -> Result<()> {
    let mut g = rng(seed);
    let h = Tensor::randn([1, 3, 16, 16], &mut g);
    let k = orthogonal_kernel(&mut g, 3, 3, 3, 1.0)?;
    let plain = conv2d_same(&h, &k, 1)?;
    r.equals("redilation d=1 max diff", diff(&redilated_conv(&h, &k, 1)?, &plain)?, 0.0);
    r.equals("fractional d=1.0 max diff", diff(&fractional_redilated_conv(&h, &k, 1.0)?, &plain)?, 0.0);
    let id = DispersionOperator::identity(3)?;
    r.equals("identity dispersion max diff", diff(&dispersed_conv(&h, &k, &id, 1.0)?, &plain)?, 0.0);

    let single = Kernel::single(3, random_taps(&mut g, 9))?;
    for d in [1, 2, 3] {
        let ir = impulse_response(|h| redilated_conv(h, &single, d), 1, 15)?;
        r.equals(format!("footprint width at d={d}"), ir.support_width as f64, (2 * d + 1) as f64);
    }

    let net = UNet::random(&small_unet(), seed)?;
    let x = Tensor::randn([1, 4, 16, 16], &mut g);
    let all: Vec<BlockName> = ["DB0", "DB1", "DB2", "DB3", "MB", "UB0", "UB1", "UB2", "UB3"]
        .iter()
        .map(|b| b.parse().expect("block name"))
        .collect();
    let empty = net.forward(&x, 500.0, 0, &[1], &ResolvedPlan::empty())?;
    let ones = net.resolve(&AdaptationPlan::redilate(&all, 1.0), None)?;
    r.equals("unit-factor plan max diff", diff(&net.forward(&x, 500.0, 0, &[1], &ones)?, &empty)?, 0.0);

    let (c, u) = (Tensor::randn([1, 4, 8, 8], &mut g), Tensor::randn([1, 4, 8, 8], &mut g));
    let same = noise_damped_cfg(&u, &c, &u, 7.5)?;
    r.flag("noise-damped guidance with identical models is standard", same.to_le_bytes() == standard_cfg(&c, &u, 7.5)?.to_le_bytes());

    let plan = net.resolve(&AdaptationPlan::redilate(&[BlockName::Down(3), BlockName::Mid, BlockName::Up(0)], 2.0), None)?;
    let cfg = SamplerConfig { steps: 6, tau: 4, seed, latent: [4, 16, 16], ..SamplerConfig::default() };
    let damped = SamplerConfig { guidance: GuidanceConfig { mode: GuidanceMode::NoiseDamped, ..cfg.guidance }, ..cfg.clone() };
    let a = sample(&net, &plan, &cfg)?.latent;
    let b = sample(&net, &plan, &damped)?.latent;
    r.equals("sampler noise-damped vs standard max diff", diff(&a, &b)?, 0.0);
    Ok(())
}

fn gradient_image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut g = rng(seed);
    Tensor::from_fn([1, 4, h, w], |_, c, y, x| {
        let n: f32 = g.random_range(-1.0..1.0);
        n * (0.2 + 2.0 * x as f32 / w as f32) + 3.0 * y as f32 / h as f32 + c as f32 * 0.1
    })
}

fn tiling(r: &mut Recorder, seed: u64) -> Result<()> {
    let f = GnConvStack::random(&[4, 8, 8, 4], 4, seed)?;
    let x = gradient_image(seed + 1, 64, 64);
    let full = f.forward(&x)?;

    let whole = TileLayout::square(64, 64, 64, 8)?;
    r.at_most("single tile vs full image", diff(&tiled_apply(&f, &x, &whole, true)?.output, &full)?, SINGLE_TILE_TOL);

    let layout = TileLayout::square(64, 64, 36, 8)?;
    let on = tiled_apply(&f, &x, &layout, true)?;
    let off = tiled_apply(&f, &x, &layout, false)?;
    r.at_most("2x2 synced vs full image", diff(&on.output, &full)?, TILE_SYNC_TOL);
    let gap_on = tile_mean_gap(&on.output, &full, &layout)?;
    let gap_off = tile_mean_gap(&off.output, &full, &layout)?;
    r.push("tile mean gap, sync on", gap_on, Relation::Finite, None);
    r.above("tile mean gap, sync off", gap_off, TILE_GAP_RATIO * gap_on);

    let other = TileLayout::new(64, 64, 28, 40, 10)?;
    r.at_most("sync output layout invariance", diff(&tiled_apply(&f, &x, &other, true)?.output, &on.output)?, TILE_SYNC_TOL);

    let mut worst = 0f64;
    for margin in [0, 2] {
        let mut sum = vec![0f64; 64 * 64];
        for (i, (src, _)) in layout.tiles().iter().enumerate() {
            let cols = layout.grid().1;
            let w = layout.blend_weights(i / cols, i % cols, margin);
            for y in 0..src.h {
                for x in 0..src.w {
                    sum[(src.y + y) * 64 + src.x + x] += f64::from(w[y * src.w + x]);
                }
            }
        }
        worst = sum.iter().map(|s| (s - 1.0).abs()).fold(worst, f64::max);
    }
    r.at_most("blend weights sum to one", worst, PARTITION_TOL);
    Ok(())
}

fn attention_suite(r: &mut Recorder, seed: u64) -> Result<()> {
    let c = 8;
    let mut g = rng(seed);
    let mut k = || orthogonal_kernel(&mut g, c, c, 1, 1.0);
    let p = AttentionParams::new(k()?, k()?, k()?, k()?)?;
    let h = Tensor::randn([1, c, 8, 8], &mut rng(seed + 1));
    r.equals("slice factor 1 vs full attention", diff(&redilated_attention(&h, 1, &p)?, &attention(&h, &p)?)?, 0.0);

    // every slice, cut out as its own 4x4 map, must match the sliced result
    let sliced = redilated_attention(&h, 2, &p)?;
    let mut worst = 0f64;
    for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let tokens = slice_tokens(8, 8, 2, a, b);
        let sub = Tensor::from_fn([1, c, 4, 4], |_, ch, y, x| h.plane(0, ch)[tokens[y * 4 + x]]);
        let want = attention(&sub, &p)?;
        for ch in 0..c {
            for (i, &t) in tokens.iter().enumerate() {
                worst = worst.max(f64::from((sliced.plane(0, ch)[t] - want.plane(0, ch)[i]).abs()));
            }
        }
    }
    r.at_most("slice-wise attention vs per-slice maps", worst, SLICE_TOL);

    r.equals("logit scale at trained size", attn_scale_factor(64, 64)?, 1.0);
    let same = attn_scale_baseline(&h, &p, 64, 64)?;
    r.equals("logit-scaled attention at trained size", diff(&same, &attention(&h, &p)?)?, 0.0);
    Ok(())
}

fn plans(r: &mut Recorder) -> Result<()> {
    let stand_in = std::sync::Arc::new(DispersionOperator::from_matrix(
        DispersionParams::new(3, 5, 2.0, DEFAULT_ETA)?,
        vec![0.0; 25 * 9],
    )?);
    for (name, plan) in presets::all() {
        let round_trip = AdaptationPlan::from_json(&plan.to_json()?)? == plan;
        let resolves = plan.resolve_with(4, |_| Ok(stand_in.clone())).is_ok();
        r.flag(format!("{name} validates, round-trips and resolves"), plan.validate().is_ok() && round_trip && resolves);
    }
    Ok(())
}

fn run_suite(suite: Suite, a: &VerifyArgs) -> Result<Vec<Check>> {
    let name = match suite {
        Suite::Dispersion => "dispersion",
        Suite::Identity => "identity",
        Suite::Tiling => "tiling",
        Suite::Attention => "attention",
        Suite::Plans => "plans",
        Suite::All => unreachable!("expanded by the caller"),
    };
    let mut r = Recorder { suite: name, checks: Vec::new() };
    match suite {
        Suite::Dispersion => dispersion(&mut r, a.kernels, a.seed)?,
        Suite::Identity => identity(&mut r, a.seed)?,
        Suite::Tiling => tiling(&mut r, a.seed)?,
        Suite::Attention => attention_suite(&mut r, a.seed)?,
        Suite::Plans => plans(&mut r)?,
        Suite::All => {}
    }
    Ok(r.checks)
}

pub fn run(a: &VerifyArgs) -> std::result::Result<Report, Failure> {
    let suites = match a.suite {
        Suite::All => vec![Suite::Identity, Suite::Dispersion, Suite::Tiling, Suite::Attention, Suite::Plans],
        s => vec![s],
    };
    let mut checks = Vec::new();
    for s in suites {
        checks.extend(run_suite(s, a)?);
    }
    let pass = checks.iter().all(|c| c.status == "pass");
    let mut text = String::new();
    for c in &checks {
        let bound = match (c.relation, c.threshold) {
            (Relation::AtMost, Some(t)) => format!("<= {t:.3e}"),
            (Relation::Above, Some(t)) => format!("> {t:.3e}"),
            (Relation::Equals, Some(t)) => format!("== {t}"),
            _ => "finite".into(),
        };
        let _ = writeln!(text, "[{}] {}/{}: {:.6e} ({bound})", c.status.to_uppercase(), c.suite, c.name, c.measured);
    }
    let _ = writeln!(text, "{} of {} checks passed", checks.iter().filter(|c| c.status == "pass").count(), checks.len());
    let report = VerifyReport { checks, pass };
    Ok(Report {
        text,
        json: serde_json::to_value(&report).expect("report serializes"),
        failed: !pass,
    })
}
