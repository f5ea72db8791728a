//! Classifier-free guidance combiners.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Tensor;

/// Guidance scale used by the SD 1.5 / 2.1 style toy configuration.
pub const DEFAULT_GUIDANCE: f64 = 7.5;
/// Guidance scale used by the XL style toy configuration.
pub const DEFAULT_GUIDANCE_XL: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    Standard,
    NoiseDamped,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub w: f64,
    pub mode: GuidanceMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w: DEFAULT_GUIDANCE,
            mode: GuidanceMode::Standard,
        }
    }
}

/// `uncond + w * (cond - uncond)`.
pub fn standard_cfg(eps_cond: &Tensor, eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    combine(eps_uncond, eps_cond, eps_uncond, w)
}

/// `base_uncond + w * (tilde_cond - tilde_uncond)`.
///
/// Any error field shared by the two adapted estimates cancels in the
/// difference, leaving the strong denoiser's estimate as the base.
pub fn noise_damped_cfg(
    eps_base_uncond: &Tensor,
    eps_tilde_cond: &Tensor,
    eps_tilde_uncond: &Tensor,
    w: f64,
) -> Result<Tensor> {
    combine(eps_base_uncond, eps_tilde_cond, eps_tilde_uncond, w)
}

fn combine(base: &Tensor, cond: &Tensor, uncond: &Tensor, w: f64) -> Result<Tensor> {
    base.check_same_shape(cond)?;
    base.check_same_shape(uncond)?;
    let w = w as f32;
    let data = base
        .data()
        .iter()
        .zip(cond.data())
        .zip(uncond.data())
        .map(|((&b, &c), &u)| b + w * (c - u))
        .collect();
    Tensor::new(base.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn triple(seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let s = [1, 4, 6, 6];
        (Tensor::randn(s, &mut g), Tensor::randn(s, &mut g), Tensor::randn(s, &mut g))
    }

    #[test]
    fn zero_and_unit_scale() {
        let (b, c, u) = triple(1);
        assert_eq!(noise_damped_cfg(&b, &c, &u, 0.0).unwrap(), b);
        assert_eq!(standard_cfg(&c, &u, 0.0).unwrap(), u);
        assert!(standard_cfg(&c, &u, 1.0).unwrap().max_abs_diff(&c).unwrap() < 1e-6);
    }

    #[test]
    fn degenerates_to_standard() {
        let (_, c, u) = triple(2);
        let a = noise_damped_cfg(&u, &c, &u, 7.5).unwrap();
        assert_eq!(a.to_le_bytes(), standard_cfg(&c, &u, 7.5).unwrap().to_le_bytes());
    }

    #[test]
    fn closed_form_per_element() {
        let (_, c, u) = triple(3);
        let out = standard_cfg(&c, &u, 7.5).unwrap();
        for ((o, c), u) in out.data().iter().zip(c.data()).zip(u.data()) {
            assert_eq!(*o, u + 7.5f32 * (c - u));
        }
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::zeros([1, 1, 2, 2]);
        let b = Tensor::zeros([1, 1, 2, 3]);
        assert!(standard_cfg(&a, &b, 1.0).is_err());
        assert!(noise_damped_cfg(&a, &a, &b, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn shared_error_cancels(seed in any::<u64>(), w in -10.0f64..10.0) {
            // dyadic values keep c + e and u + e exact, so c - u is recovered bitwise
            let mut g = ChaCha8Rng::seed_from_u64(seed);
            use rand::Rng;
            let mut q = |_, _, _, _| (g.random_range(-1024i32..1024) as f32) / 64.0;
            let s = [1, 2, 4, 4];
            let (b, c, u, e) = (Tensor::from_fn(s, &mut q), Tensor::from_fn(s, &mut q),
                                Tensor::from_fn(s, &mut q), Tensor::from_fn(s, &mut q));
            let noisy = noise_damped_cfg(&b, &c.add(&e).unwrap(), &u.add(&e).unwrap(), w).unwrap();
            let clean = noise_damped_cfg(&b, &c, &u, w).unwrap();
            prop_assert_eq!(noisy.to_le_bytes(), clean.to_le_bytes());
        }

        #[test]
        fn linear_in_scale(seed in any::<u64>(), w1 in -5.0f64..5.0, w2 in -5.0f64..5.0) {
            let (b, c, u) = triple(seed);
            let sum = noise_damped_cfg(&b, &c, &u, w1 + w2).unwrap();
            let a1 = noise_damped_cfg(&b, &c, &u, w1).unwrap();
            let a2 = noise_damped_cfg(&b, &c, &u, w2).unwrap();
            // (a1 - b) + (a2 - b) = sum - b
            for (((s, x), y), bb) in sum.data().iter().zip(a1.data()).zip(a2.data()).zip(b.data()) {
                prop_assert!(((s - bb) - ((x - bb) + (y - bb))).abs() < 1e-4);
            }
        }
    }
}
