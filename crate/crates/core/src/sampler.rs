//! Deterministic DDIM sampling with classifier-free guidance.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{noise_damped_cfg, standard_cfg, GuidanceConfig, GuidanceMode};
use crate::render::{to_gray8_auto, write_pgm};
use crate::tensor::Tensor;
use crate::unet::plan::{AdaptationPlan, ResolvedPlan};
use crate::unet::UNet;

/// An ε-prediction network evaluated under an adaptation plan.
pub trait Denoiser: Sync {
    fn eps(&self, x: &Tensor, timestep: f64, step: usize, classes: &[usize], plan: &ResolvedPlan) -> Result<Tensor>;
}

impl Denoiser for UNet {
    fn eps(&self, x: &Tensor, timestep: f64, step: usize, classes: &[usize], plan: &ResolvedPlan) -> Result<Tensor> {
        self.forward(x, timestep, step, classes, plan)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub tau: usize,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_steps: usize,
    /// `[channels, height, width]`.
    pub latent: [usize; 3],
    /// Class id for the conditional branch; 0 is the unconditional class.
    pub class_id: usize,
    /// Keep per-step tensors in the result.
    pub record_steps: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            tau: 30,
            guidance: GuidanceConfig::default(),
            seed: 0,
            beta_start: 1e-4,
            beta_end: 2e-2,
            train_steps: 1000,
            latent: [4, 64, 64],
            class_id: 1,
            record_steps: false,
        }
    }
}

impl SamplerConfig {
    /// Steps, τ, guidance scale and mode taken from `plan`.
    pub fn from_plan(plan: &AdaptationPlan, seed: u64, latent: [usize; 3]) -> Self {
        Self {
            steps: plan.steps,
            tau: plan.tau,
            guidance: GuidanceConfig {
                w: plan.guidance,
                mode: if plan.is_noise_damped() { GuidanceMode::NoiseDamped } else { GuidanceMode::Standard },
            },
            seed,
            latent,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("at least one inference step is required".into());
        }
        if self.tau > self.steps {
            return bad(format!("tau {} exceeds {} steps", self.tau, self.steps));
        }
        if self.train_steps < self.steps {
            return bad(format!("{} inference steps exceed {} training steps", self.steps, self.train_steps));
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return bad(format!("invalid beta range [{}, {}]", self.beta_start, self.beta_end));
        }
        if self.latent.contains(&0) {
            return bad("latent dims must be positive".into());
        }
        Ok(())
    }
}

/// Linear-β noise schedule and its DDIM striding.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
    timesteps: Vec<usize>,
}

impl NoiseSchedule {
    pub fn new(cfg: &SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.train_steps;
        let mut acc = 1.0;
        let alphas_cumprod = (0..n)
            .map(|i| {
                let beta = if n == 1 {
                    cfg.beta_start
                } else {
                    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64
                };
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        let ratio = n / cfg.steps;
        let timesteps = (0..cfg.steps).map(|i| (cfg.steps - 1 - i) * ratio).collect();
        Ok(Self { alphas_cumprod, timesteps })
    }

    /// Training timestep visited at inference step `i`.
    pub fn timestep(&self, i: usize) -> usize {
        self.timesteps[i]
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// `ᾱ` at inference step `i`.
    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.alphas_cumprod[self.timesteps[i]]
    }

    /// `ᾱ` of the step after `i`; 1 after the final step.
    pub fn alpha_bar_prev(&self, i: usize) -> f64 {
        self.timesteps.get(i + 1).map_or(1.0, |&t| self.alphas_cumprod[t])
    }
}

/// `(x_t - sqrt(1 - ᾱ) ε) / sqrt(ᾱ)`.
pub fn predicted_x0(x_t: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
        return Err(Error::Numerical(format!("alpha_bar {alpha_bar} leaves predicted x0 undefined")));
    }
    let a = alpha_bar.sqrt();
    let s = (1.0 - alpha_bar).sqrt();
    x_t.zip_map(eps, |x, e| ((x as f64 - s * e as f64) / a) as f32)
}

/// Diagnostics of one inference step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub timestep: usize,
    pub factor_active: bool,
    /// RMS of `x_t - sqrt(ᾱ) x̂0`.
    pub residual: f64,
    pub x0: Option<Tensor>,
    pub eps_cond: Option<Tensor>,
    pub eps_uncond: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub latent: Tensor,
    pub steps: Vec<StepRecord>,
}

/// Runs `cfg.steps` DDIM (η = 0) steps from seeded Gaussian noise.
///
/// In noise-damped mode the unconditional estimate of the base model
/// (the plan with its noise-damped blocks reverted) anchors the guidance.
pub fn sample(model: &dyn Denoiser, plan: &ResolvedPlan, cfg: &SamplerConfig) -> Result<SampleOutput> {
    let schedule = NoiseSchedule::new(cfg)?;
    let mut plan = plan.clone();
    plan.tau = cfg.tau;
    plan.steps = cfg.steps;
    let base = plan.base_model();
    let [c, h, w] = cfg.latent;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Tensor::randn([1, c, h, w], &mut rng);
    let mut records = Vec::with_capacity(cfg.steps);

    for i in 0..cfg.steps {
        let t = schedule.timestep(i);
        let pair = Tensor::new([2, c, h, w], [x.data(), x.data()].concat())?;
        let both = model.eps(&pair, t as f64, i, &[cfg.class_id, 0], &plan)?;
        let plane = c * h * w;
        let cond = Tensor::new([1, c, h, w], both.data()[..plane].to_vec())?;
        let uncond = Tensor::new([1, c, h, w], both.data()[plane..].to_vec())?;
        let eps = match cfg.guidance.mode {
            GuidanceMode::Standard => standard_cfg(&cond, &uncond, cfg.guidance.w)?,
            GuidanceMode::NoiseDamped => {
                let base_uncond = model.eps(&x, t as f64, i, &[0], &base)?;
                noise_damped_cfg(&base_uncond, &cond, &uncond, cfg.guidance.w)?
            }
        };
        if !eps.is_finite() {
            return Err(Error::Numerical(format!("non-finite ε at step {i}")));
        }
        let ab = schedule.alpha_bar(i);
        let x0 = predicted_x0(&x, &eps, ab)?;
        let sa = ab.sqrt();
        let residual = x
            .zip_map(&x0, |xt, p| (xt as f64 - sa * p as f64) as f32)?
            .rms();
        let prev = schedule.alpha_bar_prev(i);
        let (pa, ps) = (prev.sqrt(), (1.0 - prev).sqrt());
        let next = x0.zip_map(&eps, |p, e| (pa * p as f64 + ps * e as f64) as f32)?;
        records.push(StepRecord {
            step: i,
            timestep: t,
            factor_active: i < cfg.tau,
            residual,
            x0: cfg.record_steps.then(|| x0.clone()),
            eps_cond: cfg.record_steps.then(|| cond.clone()),
            eps_uncond: cfg.record_steps.then(|| uncond.clone()),
        });
        x = next;
    }
    Ok(SampleOutput { latent: x, steps: records })
}

/// Writes `step_NNN_{x0,eps_cond,eps_uncond,eps_diff}.pgm` for every
/// recorded step, each frame scaled to its own largest magnitude.
pub fn dump_steps(out: &SampleOutput, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for rec in &out.steps {
        let (Some(x0), Some(c), Some(u)) = (&rec.x0, &rec.eps_cond, &rec.eps_uncond) else {
            continue;
        };
        let diff = c.sub(u)?;
        for (name, t) in [("x0", x0), ("eps_cond", c), ("eps_uncond", u), ("eps_diff", &diff)] {
            let path = dir.join(format!("step_{:03}_{name}.pgm", rec.step));
            write_pgm(&to_gray8_auto(t)?, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// ε = a·x, constant in the plan.
    struct Linear(f32);

    impl Denoiser for Linear {
        fn eps(&self, x: &Tensor, _: f64, _: usize, classes: &[usize], _: &ResolvedPlan) -> Result<Tensor> {
            let n = x.batch();
            let plane = x.data().len() / n;
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(k, v)| v * self.0 * (1.0 + 0.1 * classes[k / plane] as f32))
                .collect();
            Tensor::new(x.shape(), data)
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = NoiseSchedule::new(&SamplerConfig::default()).unwrap();
        assert_eq!(s.timestep(0), 980);
        assert_eq!(s.timestep(49), 0);
        assert_eq!(s.alpha_bar_prev(49), 1.0);
        assert!((s.alpha_bar(49) - (1.0 - 1e-4)).abs() < 1e-12);
        for i in 1..50 {
            assert!(s.alpha_bar(i) > s.alpha_bar(i - 1));
        }
    }

    #[test]
    fn x0_closed_form() {
        let mut g = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn([1, 2, 3, 3], &mut g);
        let e = Tensor::randn([1, 2, 3, 3], &mut g);
        let ab: f64 = g.random_range(0.01..0.99);
        let out = predicted_x0(&x, &e, ab).unwrap();
        for ((o, x), e) in out.data().iter().zip(x.data()).zip(e.data()) {
            assert_eq!(*o, ((*x as f64 - (1.0 - ab).sqrt() * *e as f64) / ab.sqrt()) as f32);
        }
        let zero = predicted_x0(&x, &Tensor::zeros(x.shape()), 0.25).unwrap();
        assert_eq!(zero, x.scale(2.0));
        assert!(matches!(predicted_x0(&x, &e, 0.0), Err(Error::Numerical(_))));
        let near = predicted_x0(&x, &e, 1.0 - 1e-4).unwrap();
        assert!(near.sub(&x).unwrap().max_abs() < 0.02 * e.max_abs() + 1e-3);
    }

    #[test]
    fn config_errors() {
        let m = Linear(0.5);
        let p = ResolvedPlan::empty();
        for cfg in [
            SamplerConfig { steps: 0, ..Default::default() },
            SamplerConfig { tau: 51, ..Default::default() },
            SamplerConfig { beta_start: 0.0, ..Default::default() },
        ] {
            assert!(matches!(sample(&m, &p, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn deterministic_and_recorded() {
        let m = Linear(0.5);
        let cfg = SamplerConfig { latent: [2, 4, 4], steps: 10, tau: 5, record_steps: true, ..Default::default() };
        let a = sample(&m, &ResolvedPlan::empty(), &cfg).unwrap();
        let b = sample(&m, &ResolvedPlan::empty(), &cfg).unwrap();
        assert_eq!(a.latent.to_le_bytes(), b.latent.to_le_bytes());
        assert_eq!(a.steps.len(), 10);
        assert!(a.steps.iter().all(|s| s.x0.is_some()));
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(dump_steps(&a, dir.path()).unwrap().len(), 40);
        let nd = SamplerConfig { guidance: GuidanceConfig { mode: GuidanceMode::NoiseDamped, ..cfg.guidance }, ..cfg };
        let c = sample(&m, &ResolvedPlan::empty(), &nd).unwrap();
        assert_eq!(a.latent.to_le_bytes(), c.latent.to_le_bytes());
    }
}
