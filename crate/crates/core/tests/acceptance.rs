//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Set `RESCALEKIT_BLESS=1` to (re)write the golden baseline hash.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use rescalekit::dispersion::{
    solve_dispersion, CalibrationSet, DispersionParams, DEFAULT_PATCHES, DEFAULT_PATCH_SIZE,
    DEFAULT_SEED,
};
use rescalekit::guidance::{noise_damped_cfg, standard_cfg, GuidanceConfig, GuidanceMode, DEFAULT_GUIDANCE};
use rescalekit::redilation::{fractional_redilated_conv, fractional_redilated_conv_info, redilated_conv};
use rescalekit::sampler::{dump_steps, sample, SamplerConfig};
use rescalekit::tensor::impulse_response;
use rescalekit::tiled::{tile_mean_gap, tiled_apply, GnConvStack, NormNetwork, TileLayout};
use rescalekit::unet::attention::{attention, redilated_attention, slice_tokens, AttentionParams};
use rescalekit::unet::presets;
use rescalekit::unet::plan::{AdaptationPlan, BlockName, ResolvedPlan};
use rescalekit::unet::weights::orthogonal_kernel;
use rescalekit::unet::{UNet, UNetConfig};
use rescalekit::{Kernel, Result, Tensor};

// Tolerances.
const FRACTIONAL_TOL: f32 = 1e-6;
const OPTIMALITY_REL_TOL: f64 = 1e-5;
const HELD_OUT_RATIO: f64 = 2.0;
const UNIVERSALITY_TOL: f64 = 1e-6;
const ETA_LIMIT_MASS: f64 = 1e-3;
const UNIT_PLAN_TOL: f32 = 1e-6;
const TILE_SYNC_TOL: f32 = 1e-4;
const TILE_GAP_RATIO: f64 = 10.0;

// Wall-clock budgets.
const FOOTPRINT_BUDGET: Duration = Duration::from_secs(1);
const FRACTIONAL_BUDGET: Duration = Duration::from_secs(5);
const DISPERSION_BUDGET: Duration = Duration::from_secs(30);
const SAMPLER_BUDGET: Duration = Duration::from_secs(60);
const SMOKE_BUDGET: Duration = Duration::from_secs(120);

const SAMPLE_SEED: u64 = 7;
const WEIGHT_SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dense_kernel(g: &mut ChaCha8Rng, o: usize, i: usize, r: usize) -> Kernel {
    // taps bounded away from zero so every position registers in the footprint
    let data = (0..o * i * r * r)
        .map(|_| {
            let v: f32 = g.random_range(0.2..1.0);
            if g.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Kernel::new([o, i, r, r], data, None).unwrap()
}

fn footprint_law() -> Result<Outcome> {
    let start = Instant::now();
    let mut g = rng(1);
    let mut bad = Vec::new();
    for r in [3, 5] {
        for d in 1..=4 {
            let k = dense_kernel(&mut g, 2, 2, r);
            let expect = d * (r - 1) + 1;
            let ir = impulse_response(|h| redilated_conv(h, &k, d), 2, 2 * expect + 1)?;
            if ir.support_width != expect || ir.truncated {
                bad.push(format!("r={r} d={d}: {}", ir.support_width));
            }
        }
    }
    let t = start.elapsed();
    outcome(bad.is_empty() && t < FOOTPRINT_BUDGET, format!("8 cases, mismatches {bad:?}, {t:.2?}"))
}

fn fractional_degeneration() -> Result<Outcome> {
    let start = Instant::now();
    let mut g = rng(2);
    let mut worst = 0f32;
    for d in [2usize, 3] {
        let k = dense_kernel(&mut g, 4, 4, 3);
        for _ in 0..100 {
            let h = Tensor::randn([1, 4, 32, 32], &mut g);
            let a = fractional_redilated_conv(&h, &k, d as f64)?;
            let b = redilated_conv(&h, &k, d)?;
            worst = worst.max(a.max_abs_diff(&b)?);
        }
    }
    let t = start.elapsed();
    outcome(worst <= FRACTIONAL_TOL && t < FRACTIONAL_BUDGET, format!("max-abs {worst:e}, {t:.2?}"))
}

fn stretch_constant() -> Result<Outcome> {
    let h = Tensor::randn([1, 2, 20, 20], &mut rng(3));
    let k = dense_kernel(&mut rng(4), 2, 2, 3);
    let (out, info) = fractional_redilated_conv_info(&h, &k, 2.5, 1)?;
    let pass = info.stretch.scale == 1.2 && info.stretch.dilation == 3 && info.stretched == (24, 24) && out.shape() == h.shape();
    outcome(
        pass,
        format!("s = {}, dilation {}, stretched {:?}", info.stretch.scale, info.stretch.dilation, info.stretched),
    )
}

/// Independent f64 evaluation of the calibration problem for one kernel.
struct Oracle {
    r: usize,
    rp: usize,
    eta: f64,
    /// per-sample (base plane, upscaled plane, sizes)
    grids: Vec<(Vec<f64>, usize, usize, Vec<f64>, usize, usize)>,
}

fn bilinear_f64(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let taps = |n: usize, m: usize| -> Vec<(usize, usize, f64)> {
        (0..m)
            .map(|o| {
                let s = ((o as f64 + 0.5) * n as f64 / m as f64 - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(n - 1);
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, if i0 == i1 { 0.0 } else { s - i0 as f64 })
            })
            .collect()
    };
    let (ys, xs) = (taps(h, oh), taps(w, ow));
    let mut out = vec![0.0; oh * ow];
    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
            let top = (1.0 - lx) * src[y0 * w + x0] + lx * src[y0 * w + x1];
            let bot = (1.0 - lx) * src[y1 * w + x0] + lx * src[y1 * w + x1];
            out[oy * ow + ox] = (1.0 - ly) * top + ly * bot;
        }
    }
    out
}

fn conv_f64(src: &[f64], h: usize, w: usize, taps: &[f64], r: usize) -> Vec<f64> {
    let half = (r / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -half..=half {
                for dx in -half..=half {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        acc += src[(yy * w as isize + xx) as usize] * taps[((dy + half) * r as isize + dx + half) as usize];
                    }
                }
            }
            out[(y * w as isize + x) as usize] = acc;
        }
    }
    out
}

impl Oracle {
    fn new(r: usize, rp: usize, d: usize, eta: f64, calib: &CalibrationSet) -> Self {
        let grids = calib
            .samples()
            .iter()
            .map(|t| {
                let (h, w) = (t.height(), t.width());
                let base: Vec<f64> = t.data().iter().map(|&v| f64::from(v)).collect();
                let up = bilinear_f64(&base, h, w, h * d, w * d);
                (base, h, w, up, h * d, w * d)
            })
            .collect();
        Self { r, rp, eta, grids }
    }

    /// (structure rows, structure targets, pixel rows, pixel targets) for kernel `k`.
    fn system(&self, k: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
        let m = self.rp;
        let half = (self.rp / 2) as isize;
        let patch = |src: &[f64], h: usize, w: usize, y: usize, x: usize| -> Vec<f64> {
            let mut p = Vec::with_capacity(self.rp * self.rp);
            for dy in -half..=half {
                for dx in -half..=half {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    p.push(if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        0.0
                    } else {
                        src[yy as usize * w + xx as usize]
                    });
                }
            }
            p
        };
        let (mut sa, mut sb, mut pa, mut pb) = (vec![], vec![], vec![], vec![]);
        for (base, h, w, up, uh, uw) in &self.grids {
            let out = conv_f64(base, *h, *w, k, self.r);
            let target = bilinear_f64(&out, *h, *w, *uh, *uw);
            for y in m..uh - m {
                for x in m..uw - m {
                    sa.push(patch(up, *uh, *uw, y, x));
                    sb.push(target[y * uw + x]);
                }
            }
            for y in m..h - m {
                for x in m..w - m {
                    pa.push(patch(base, *h, *w, y, x));
                    pb.push(out[y * w + x]);
                }
            }
        }
        (sa, sb, pa, pb)
    }

    fn objective(&self, k: &[f64], kp: &[f64]) -> f64 {
        let (sa, sb, pa, pb) = self.system(k);
        let mse = |a: &[Vec<f64>], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(row, t)| (row.iter().zip(kp).map(|(p, w)| p * w).sum::<f64>() - t).powi(2))
                .sum::<f64>()
                / b.len() as f64
        };
        mse(&sa, &sb) + self.eta * mse(&pa, &pb)
    }

    /// Dense least-squares solve for this kernel alone.
    fn direct(&self, k: &[f64]) -> Vec<f64> {
        let (sa, sb, pa, pb) = self.system(k);
        let n = self.rp * self.rp;
        let (ws, wp) = (1.0 / sb.len() as f64, self.eta / pb.len() as f64);
        let rows = sa.len() + pa.len();
        let mut a = DMatrix::<f64>::zeros(rows, n);
        let mut b = DVector::<f64>::zeros(rows);
        for (i, (row, t)) in sa.iter().zip(&sb).chain(pa.iter().zip(&pb)).enumerate() {
            let w = if i < sa.len() { ws.sqrt() } else { wp.sqrt() };
            for j in 0..n {
                a[(i, j)] = w * row[j];
            }
            b[i] = w * t;
        }
        let sol = a.svd(true, true).solve(&b, 1e-12).expect("svd solve");
        sol.iter().copied().collect()
    }
}

fn default_calibration() -> Result<CalibrationSet> {
    CalibrationSet::white_noise(DEFAULT_PATCHES, DEFAULT_PATCH_SIZE, DEFAULT_SEED)
}

fn random_taps(g: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| g.random_range(-1.0f32..1.0)).collect()
}

/// Criteria 4 and 5 share one solve and one oracle pass.
fn dispersion_checks() -> Result<(Outcome, Outcome)> {
    let start = Instant::now();
    let calib = default_calibration()?;
    let params = DispersionParams::new(3, 5, 2.0, 1.0)?;
    let op = solve_dispersion(params, &calib)?;
    let oracle = Oracle::new(3, 5, 2, 1.0, &calib);
    let mut g = rng(5);
    let (mut worst_rel, mut worst_gap) = (0f64, f64::NEG_INFINITY);
    for _ in 0..100 {
        let taps = random_taps(&mut g, 9);
        let k: Vec<f64> = taps.iter().map(|&v| f64::from(v)).collect();
        let kp: Vec<f64> = op.apply(&taps)?.iter().map(|&v| f64::from(v)).collect();
        let ours = oracle.objective(&k, &kp);
        let best = oracle.objective(&k, &oracle.direct(&k));
        let energy: f64 = k.iter().map(|v| v * v).sum();
        worst_rel = worst_rel.max((ours - best).abs() / best);
        worst_gap = worst_gap.max((ours - best) / energy);
    }

    let held_out = CalibrationSet::white_noise(DEFAULT_PATCHES, DEFAULT_PATCH_SIZE, DEFAULT_SEED + 1000)?;
    let mut s = 0.0;
    for j in 0..9 {
        let mut taps = vec![0f32; 9];
        taps[j] = 1.0;
        s += op.objective(&taps, &held_out)?.structure;
    }
    let held = (s / 9.0).sqrt();
    let t = start.elapsed();
    let c4 = outcome(
        worst_rel <= OPTIMALITY_REL_TOL && held <= HELD_OUT_RATIO * op.structure_residual && t < DISPERSION_BUDGET,
        format!(
            "max relative gap {worst_rel:.2e}, held-out structure residual {held:.4} vs calibration {:.4}, {t:.2?}",
            op.structure_residual
        ),
    )?;
    let c5 = outcome(worst_gap <= UNIVERSALITY_TOL, format!("max normalized gap {worst_gap:.2e}"))?;
    Ok((c4, c5))
}

fn eta_limit() -> Result<Outcome> {
    let op = solve_dispersion(DispersionParams::new(3, 5, 2.0, 1e6)?, &default_calibration()?)?;
    let mut centre = vec![0f32; 9];
    centre[4] = 1.0;
    let kp = op.apply(&centre)?;
    let total: f64 = kp.iter().map(|v| f64::from(v.abs())).sum();
    let off = total - f64::from(kp[12].abs());
    let frac = off / total;
    outcome(frac < ETA_LIMIT_MASS, format!("off-centre mass fraction {frac:.2e}"))
}

fn noise_damped_cancellation() -> Result<Outcome> {
    let mut g = rng(6);
    let shape = [1, 4, 8, 8];
    let mut flips = 0;
    let trials = 50;
    for _ in 0..trials {
        // dyadic values so that c + e and u + e are exact in f32
        let mut q = |_, _, _, _| g.random_range(-4096i32..4096) as f32 / 256.0;
        let (b, c, u, e) = (
            Tensor::from_fn(shape, &mut q),
            Tensor::from_fn(shape, &mut q),
            Tensor::from_fn(shape, &mut q),
            Tensor::from_fn(shape, &mut q),
        );
        let w = DEFAULT_GUIDANCE;
        let noisy = noise_damped_cfg(&b, &c.add(&e)?, &u.add(&e)?, w)?;
        let clean = noise_damped_cfg(&b, &c, &u, w)?;
        let same_model = noise_damped_cfg(&u, &c, &u, w)?;
        if noisy.to_le_bytes() != clean.to_le_bytes() || same_model.to_le_bytes() != standard_cfg(&c, &u, w)?.to_le_bytes() {
            flips += 1;
        }
    }

    // same comparison through the sampler, base model identical to the adapted one
    let net = UNet::random(&UNetConfig { base_channels: 16, groups: 4, embed_dim: 32, ..UNetConfig::default() }, 1)?;
    let plan = net.resolve(&AdaptationPlan::redilate(&[BlockName::Down(3), BlockName::Mid, BlockName::Up(0)], 2.0), None)?;
    let cfg = SamplerConfig { steps: 8, tau: 5, seed: 3, latent: [4, 16, 16], ..SamplerConfig::default() };
    let damped = SamplerConfig { guidance: GuidanceConfig { mode: GuidanceMode::NoiseDamped, ..cfg.guidance }, ..cfg.clone() };
    let a = sample(&net, &plan, &cfg)?.latent;
    let b = sample(&net, &plan, &damped)?.latent;
    let sampler_equal = a.to_le_bytes() == b.to_le_bytes();
    outcome(
        flips == 0 && sampler_equal,
        format!("{trials} random trials, {flips} bitwise mismatches; sampler noise-damped == standard: {sampler_equal}"),
    )
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/sample_64x64_seed7.sha256")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sampler_identity() -> Result<Outcome> {
    let net = UNet::random(&UNetConfig::default(), WEIGHT_SEED)?;
    let cfg = SamplerConfig { seed: SAMPLE_SEED, latent: [4, 64, 64], ..SamplerConfig::default() };
    let run = |threads: usize, plan: &ResolvedPlan| -> Result<(Tensor, Duration)> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
        let start = Instant::now();
        let out = pool.install(|| sample(&net, plan, &cfg))?;
        Ok((out.latent, start.elapsed()))
    };
    let empty = ResolvedPlan::empty();
    let (base, t1) = run(1, &empty)?;
    let digest = hex(&Sha256::digest(base.to_le_bytes()));

    let path = golden_path();
    if std::env::var("RESCALEKIT_BLESS").is_ok_and(|v| v == "1") {
        std::fs::create_dir_all(path.parent().unwrap())?;
        std::fs::write(&path, format!("{digest}\n"))?;
    }
    let golden = std::fs::read_to_string(&path).map(|s| s.trim().to_string()).unwrap_or_default();
    let golden_ok = golden == digest;

    let (h2, _) = run(2, &empty)?;
    let (h8, _) = run(8, &empty)?;
    let threads_ok = [&h2, &h8].iter().all(|t| t.to_le_bytes() == base.to_le_bytes());

    let all = ["DB0", "DB1", "DB2", "DB3", "MB", "UB0", "UB1", "UB2", "UB3"].map(|b| b.parse().unwrap());
    let ones = net.resolve(&AdaptationPlan::redilate(&all, 1.0), None)?;
    let (unit, t_unit) = run(2, &ones)?;
    let unit_diff = unit.max_abs_diff(&base)?;
    let slowest = t1.max(t_unit);
    outcome(
        golden_ok && threads_ok && unit_diff <= UNIT_PLAN_TOL && slowest < SAMPLER_BUDGET,
        format!(
            "golden {} ({}), 1/2/8 threads identical: {threads_ok}, unit-factor max-abs {unit_diff:e}, slowest run {slowest:.1?}",
            if golden_ok { "match" } else { "MISMATCH" },
            &digest[..16]
        ),
    )
}

fn gradient_image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut g = rng(seed);
    Tensor::from_fn([1, 4, h, w], |_, c, y, x| {
        let n: f32 = g.random_range(-1.0..1.0);
        n * (0.2 + 2.0 * x as f32 / w as f32) + 3.0 * y as f32 / h as f32 + c as f32 * 0.1
    })
}

fn tiled_sync() -> Result<Outcome> {
    let f = GnConvStack::random(&[4, 8, 8, 4], 4, 9)?;
    let x = gradient_image(10, 64, 64);
    let full = f.forward(&x)?;
    let layout = TileLayout::square(64, 64, 36, 8)?;
    let grid = layout.grid();
    let on = tiled_apply(&f, &x, &layout, true)?;
    let off = tiled_apply(&f, &x, &layout, false)?;
    let diff = on.output.max_abs_diff(&full)?;
    let gap_on = tile_mean_gap(&on.output, &full, &layout)?;
    let gap_off = tile_mean_gap(&off.output, &full, &layout)?;
    outcome(
        grid == (2, 2) && diff <= TILE_SYNC_TOL && gap_off > TILE_GAP_RATIO * gap_on,
        format!("grid {grid:?}, synced max-abs {diff:.2e}, tile mean gap off {gap_off:.3e} vs on {gap_on:.3e}"),
    )
}

fn attention_checks() -> Result<Outcome> {
    let c = 8;
    let mut g = rng(11);
    let mut k = || orthogonal_kernel(&mut g, c, c, 1, 1.0).unwrap();
    let p = AttentionParams::new(k(), k(), k(), k())?;
    let h = Tensor::randn([1, c, 8, 8], &mut rng(12));
    let plain_equal = redilated_attention(&h, 1, &p)?.to_le_bytes() == attention(&h, &p)?.to_le_bytes();

    let before = redilated_attention(&h, 2, &p)?;
    let mut worst = 0f32;
    let mut sizes_ok = true;
    for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let tokens = slice_tokens(8, 8, 2, a, b);
        sizes_ok &= tokens.len() == 16;
        let mut perturbed = h.clone();
        for ch in 0..c {
            let plane = perturbed.plane_mut(0, ch);
            let vals: Vec<f32> = tokens.iter().map(|&t| plane[t]).collect();
            // rotate the slice's content and add an offset
            for (i, &t) in tokens.iter().enumerate() {
                plane[t] = vals[(i + 5) % vals.len()] + 0.75;
            }
        }
        let after = redilated_attention(&perturbed, 2, &p)?;
        for (a2, b2) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            if (a2, b2) == (a, b) {
                continue;
            }
            for t in slice_tokens(8, 8, 2, a2, b2) {
                for ch in 0..c {
                    worst = worst.max((after.plane(0, ch)[t] - before.plane(0, ch)[t]).abs());
                }
            }
        }
    }
    outcome(
        plain_equal && worst == 0.0 && sizes_ok,
        format!("d=1 bitwise equal: {plain_equal}, 4 slices of 16 tokens: {sizes_ok}, other-slice max-abs change {worst:e}"),
    )
}

/// Hand transcription of the reference settings tables, independent of
/// `presets.rs`.
const TABLES: [(&str, &str); 8] = [
    ("sd15-4x", r#"{"redilated":[{"block":"DB3","d":2},{"block":"MB","d":2},{"block":"UB0","d":2}],"progressive":false,"tau":30,"steps":50,"guidance":7.5,"latent":[4,128,128]}"#),
    ("sd15-625x", r#"{"redilated":[{"block":"DB3","d":2.5},{"block":"MB","d":2.5},{"block":"UB0","d":2.5}],"progressive":false,"tau":30,"steps":50,"guidance":7.5,"latent":[4,160,160]}"#),
    ("sd15-8x", r#"{"redilated":[{"block":"DB0","d":2},{"block":"DB1","d":2},{"block":"DB2","d":2},{"block":"DB3","d":2},{"block":"MB","d":2},{"block":"UB0","d":2},{"block":"UB1","d":2},{"block":"UB2","d":2},{"block":"UB3","d":2}],"noise_damped":["DB0","DB1","DB2","UB1","UB2","UB3"],"progressive":false,"tau":30,"steps":50,"guidance":7.5,"latent":[4,128,256]}"#),
    ("sd15-16x", r#"{"redilated":[{"block":"DB0","d":2},{"block":"DB1","d":4},{"block":"UB2","d":4},{"block":"UB3","d":2}],"dispersed":[{"block":"DB2","d":2,"operator":"R_3to5_d2.dten","kernel":[3,5]},{"block":"DB3","d":2,"operator":"R_3to5_d2.dten","kernel":[3,5]},{"block":"MB","d":2,"operator":"R_3to5_d2.dten","kernel":[3,5]},{"block":"UB0","d":2,"operator":"R_3to5_d2.dten","kernel":[3,5]},{"block":"UB1","d":2,"operator":"R_3to5_d2.dten","kernel":[3,5]}],"noise_damped":["DB0","DB1","UB2","UB3"],"progressive":true,"tau":35,"steps":50,"guidance":7.5,"latent":[4,256,256]}"#),
    ("sdxl-4x", r#"{"redilated":[{"block":"DB3","d":2},{"block":"MB","d":2},{"block":"UB0","d":2}],"progressive":false,"tau":30,"steps":50,"guidance":5.0,"latent":[4,256,256]}"#),
    ("sdxl-625x", r#"{"redilated":[{"block":"DB1","d":2},{"block":"DB2","d":2},{"block":"DB3","d":2.5},{"block":"MB","d":2.5},{"block":"UB0","d":2.5},{"block":"UB1","d":2},{"block":"UB2","d":2}],"noise_damped":["DB1","DB2","UB1","UB2"],"progressive":false,"tau":30,"steps":50,"guidance":5.0,"latent":[4,320,320]}"#),
    ("sdxl-8x", r#"{"redilated":[{"block":"DB1","d":2},{"block":"DB2","d":2},{"block":"DB3","d":2},{"block":"MB","d":2},{"block":"UB0","d":2},{"block":"UB1","d":2},{"block":"UB2","d":2}],"noise_damped":["DB1","DB2","UB1","UB2"],"progressive":false,"tau":30,"steps":50,"guidance":5.0,"latent":[4,256,512]}"#),
    ("sdxl-16x", r#"{"redilated":[{"block":"DB2","d":2},{"block":"UB1","d":2}],"dispersed":[{"block":"DB3","d":2,"operator":"R_3to5_d2.dten","kernel":[3,5]},{"block":"MB","d":2,"operator":"R_3to5_d2.dten","kernel":[3,5]},{"block":"UB0","d":2,"operator":"R_3to5_d2.dten","kernel":[3,5]}],"noise_damped":["DB2","UB1"],"progressive":true,"tau":35,"steps":50,"guidance":5.0,"latent":[4,512,512]}"#),
];

fn presets_round_trip() -> Result<Outcome> {
    let mut bad = Vec::new();
    for (name, json) in TABLES {
        let transcribed = AdaptationPlan::from_json(json)?;
        let built = presets::plan(name).expect("known table");
        let text = built.to_json()?;
        let back = AdaptationPlan::from_json(&text)?;
        let text_again = back.to_json()?;
        if transcribed != built || back != built || text != text_again || built.validate().is_err() {
            bad.push(name);
        }
    }
    outcome(bad.is_empty(), format!("{} tables, mismatches {bad:?}", TABLES.len()))
}

fn end_to_end_smoke() -> Result<Outcome> {
    let start = Instant::now();
    let config = UNetConfig::default();
    let net = UNet::random(&config, WEIGHT_SEED)?;
    let side = 2 * config.sample_size;
    let plan = AdaptationPlan::redilate(&[BlockName::Down(3), BlockName::Mid, BlockName::Up(0)], 2.0);
    let resolved = net.resolve(&plan, None)?;
    let cfg = SamplerConfig { record_steps: true, ..SamplerConfig::from_plan(&plan, SAMPLE_SEED, [4, side, side]) };
    let out = sample(&net, &resolved, &cfg)?;
    let dir = tempfile::tempdir()?;
    let frames = dump_steps(&out, dir.path())?;
    let x0_frames = frames.iter().filter(|p| p.to_string_lossy().ends_with("_x0.pgm")).count();
    let tail: Vec<f64> = out.steps[cfg.tau..].iter().map(|s| s.residual).collect();
    let monotone = tail.windows(2).all(|w| w[1] <= w[0]);
    let t = start.elapsed();
    outcome(
        out.latent.is_finite() && x0_frames == cfg.steps && monotone && t < SMOKE_BUDGET,
        format!(
            "{side}x{side} latent ({}x trained area), {x0_frames} x0 frames, residual {:.3} -> {:.3} non-increasing over last {} steps: {monotone}, {t:.1?}",
            (side * side) / (config.sample_size * config.sample_size),
            tail.first().unwrap_or(&f64::NAN),
            tail.last().unwrap_or(&f64::NAN),
            tail.len()
        ),
    )
}

fn report(index: usize, name: &str, result: Result<Outcome>) -> bool {
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("[{}] {index:>2}. {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() {
    // keep `cargo test -- --list` style invocations cheap
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut ok = true;
    ok &= report(1, "dilated footprint law", footprint_law());
    ok &= report(2, "fractional degeneration", fractional_degeneration());
    ok &= report(3, "fractional stretch constant", stretch_constant());
    match dispersion_checks() {
        Ok((c4, c5)) => {
            ok &= report(4, "dispersion optimality", Ok(c4));
            ok &= report(5, "operator universality", Ok(c5));
        }
        Err(e) => {
            let msg = e.to_string();
            ok &= report(4, "dispersion optimality", Err(rescalekit::Error::Numerical(msg.clone())));
            ok &= report(5, "operator universality", Err(rescalekit::Error::Numerical(msg)));
        }
    }
    ok &= report(6, "pixel-calibration limit", eta_limit());
    ok &= report(7, "noise-damped cancellation", noise_damped_cancellation());
    ok &= report(8, "sampler identity degenerations", sampler_identity());
    ok &= report(9, "tiled GroupNorm sync", tiled_sync());
    ok &= report(10, "re-dilated attention", attention_checks());
    ok &= report(11, "reference plan round trip", presets_round_trip());
    ok &= report(12, "end-to-end smoke", end_to_end_smoke());
    if !ok {
        std::process::exit(1);
    }
}
