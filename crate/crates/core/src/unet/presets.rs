//! Reference adaptation settings for the SD 1.5 and SD XL style block layouts.

use super::plan::{AdaptationPlan, BlockName, DispersedBlock, RedilatedBlock};
use crate::guidance::{DEFAULT_GUIDANCE, DEFAULT_GUIDANCE_XL};

/// Operator file used by dispersed entries.
pub const DISPERSION_OPERATOR: &str = "R_3to5_d2.dten";

pub const NAMES: [&str; 8] = [
    "sd15-4x", "sd15-625x", "sd15-8x", "sd15-16x", "sdxl-4x", "sdxl-625x", "sdxl-8x", "sdxl-16x",
];

fn blocks(names: &[&str]) -> Vec<BlockName> {
    names.iter().map(|n| n.parse().expect("valid block name")).collect()
}

struct Table<'a> {
    latent: [usize; 3],
    redilated: &'a [&'a str],
    rb: &'a [f64],
    dispersed: &'a [&'a str],
    db: &'a [f64],
    progressive: bool,
    noise_damped: &'a [&'a str],
    tau: usize,
    guidance: f64,
}

impl Table<'_> {
    fn plan(&self) -> AdaptationPlan {
        AdaptationPlan {
            redilated: blocks(self.redilated)
                .into_iter()
                .zip(self.rb)
                .map(|(block, &d)| RedilatedBlock { block, d })
                .collect(),
            dispersed: blocks(self.dispersed)
                .into_iter()
                .zip(self.db.iter().chain(std::iter::repeat(self.db.last().unwrap_or(&2.0))))
                .map(|(block, &d)| DispersedBlock {
                    block,
                    d,
                    operator: DISPERSION_OPERATOR.into(),
                    kernel: Some([3, 5]),
                })
                .collect(),
            noise_damped: blocks(self.noise_damped),
            progressive: self.progressive,
            tau: self.tau,
            steps: 50,
            guidance: self.guidance,
            attention_d: 1,
            latent: Some(self.latent),
            attention_scale: None,
        }
    }
}

const ALL_SD15: [&str; 9] = ["DB0", "DB1", "DB2", "DB3", "MB", "UB0", "UB1", "UB2", "UB3"];
const XL_SEVEN: [&str; 7] = ["DB1", "DB2", "DB3", "MB", "UB0", "UB1", "UB2"];

/// The named setting, or `None` for an unknown name.
///
/// The `sdxl-16x` setting lists three dispersed blocks with two scales; the
/// last scale is repeated.
pub fn plan(name: &str) -> Option<AdaptationPlan> {
    let t = match name {
        "sd15-4x" => Table {
            latent: [4, 128, 128],
            redilated: &["DB3", "MB", "UB0"],
            rb: &[2.0; 3],
            dispersed: &[],
            db: &[],
            progressive: false,
            noise_damped: &[],
            tau: 30,
            guidance: DEFAULT_GUIDANCE,
        },
        "sd15-625x" => Table {
            latent: [4, 160, 160],
            redilated: &["DB3", "MB", "UB0"],
            rb: &[2.5; 3],
            dispersed: &[],
            db: &[],
            progressive: false,
            noise_damped: &[],
            tau: 30,
            guidance: DEFAULT_GUIDANCE,
        },
        "sd15-8x" => Table {
            latent: [4, 128, 256],
            redilated: &ALL_SD15,
            rb: &[2.0; 9],
            dispersed: &[],
            db: &[],
            progressive: false,
            noise_damped: &["DB0", "DB1", "DB2", "UB1", "UB2", "UB3"],
            tau: 30,
            guidance: DEFAULT_GUIDANCE,
        },
        "sd15-16x" => Table {
            latent: [4, 256, 256],
            redilated: &["DB0", "DB1", "UB2", "UB3"],
            rb: &[2.0, 4.0, 4.0, 2.0],
            dispersed: &["DB2", "DB3", "MB", "UB0", "UB1"],
            db: &[2.0; 5],
            progressive: true,
            noise_damped: &["DB0", "DB1", "UB2", "UB3"],
            tau: 35,
            guidance: DEFAULT_GUIDANCE,
        },
        "sdxl-4x" => Table {
            latent: [4, 256, 256],
            redilated: &["DB3", "MB", "UB0"],
            rb: &[2.0; 3],
            dispersed: &[],
            db: &[],
            progressive: false,
            noise_damped: &[],
            tau: 30,
            guidance: DEFAULT_GUIDANCE_XL,
        },
        "sdxl-625x" => Table {
            latent: [4, 320, 320],
            redilated: &XL_SEVEN,
            rb: &[2.0, 2.0, 2.5, 2.5, 2.5, 2.0, 2.0],
            dispersed: &[],
            db: &[],
            progressive: false,
            noise_damped: &["DB1", "DB2", "UB1", "UB2"],
            tau: 30,
            guidance: DEFAULT_GUIDANCE_XL,
        },
        "sdxl-8x" => Table {
            latent: [4, 256, 512],
            redilated: &XL_SEVEN,
            rb: &[2.0; 7],
            dispersed: &[],
            db: &[],
            progressive: false,
            noise_damped: &["DB1", "DB2", "UB1", "UB2"],
            tau: 30,
            guidance: DEFAULT_GUIDANCE_XL,
        },
        "sdxl-16x" => Table {
            latent: [4, 512, 512],
            redilated: &["DB2", "UB1"],
            rb: &[2.0, 2.0],
            dispersed: &["DB3", "MB", "UB0"],
            db: &[2.0, 2.0],
            progressive: true,
            noise_damped: &["DB2", "UB1"],
            tau: 35,
            guidance: DEFAULT_GUIDANCE_XL,
        },
        _ => return None,
    };
    Some(t.plan())
}

pub fn all() -> Vec<(&'static str, AdaptationPlan)> {
    NAMES.iter().map(|&n| (n, plan(n).expect("known name"))).collect()
}
