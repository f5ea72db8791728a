//! Adaptation plans: which blocks get re-dilated or dispersed convolutions,
//! at what factor, and which blocks are reverted in the noise-damped base
//! model.
//!
//! JSON form:
//!
//! ```json
//! {"redilated": [{"block": "MB", "d": 2.0}],
//!  "dispersed": [{"block": "DB3", "d": 2, "operator": "R_3to5.dten"}],
//!  "noise_damped": ["DB0", "UB2"],
//!  "progressive": true, "tau": 35, "steps": 50, "guidance": 7.5, "attention_d": 1}
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dispersion::DispersionOperator;
use crate::error::{Error, Result};
use crate::guidance::DEFAULT_GUIDANCE;
use crate::redilation::schedule_factor;

/// `DB<i>`, `MB` or `UB<i>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockName {
    Down(usize),
    Mid,
    Up(usize),
}

impl fmt::Display for BlockName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockName::Down(i) => write!(f, "DB{i}"),
            BlockName::Mid => write!(f, "MB"),
            BlockName::Up(i) => write!(f, "UB{i}"),
        }
    }
}

impl FromStr for BlockName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let index = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::Config(format!("unknown block name {s:?}")))
        };
        match s {
            "MB" => Ok(BlockName::Mid),
            _ if s.starts_with("DB") => Ok(BlockName::Down(index(&s[2..])?)),
            _ if s.starts_with("UB") => Ok(BlockName::Up(index(&s[2..])?)),
            _ => Err(Error::Config(format!("unknown block name {s:?}"))),
        }
    }
}

impl Serialize for BlockName {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockName {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RedilatedBlock {
    pub block: BlockName,
    pub d: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispersedBlock {
    pub block: BlockName,
    pub d: f64,
    /// Path of the `R` operator, relative to the plan file.
    pub operator: String,
    /// `[r, r']`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<[usize; 2]>,
}

/// Logit-scaling comparison baseline for attention layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionScale {
    pub trained_tokens: usize,
}

fn default_tau() -> usize {
    30
}

fn default_steps() -> usize {
    50
}

fn default_guidance() -> f64 {
    DEFAULT_GUIDANCE
}

fn default_attention_d() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationPlan {
    #[serde(default)]
    pub redilated: Vec<RedilatedBlock>,
    #[serde(default)]
    pub dispersed: Vec<DispersedBlock>,
    #[serde(default)]
    pub noise_damped: Vec<BlockName>,
    #[serde(default)]
    pub progressive: bool,
    #[serde(default = "default_tau")]
    pub tau: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_guidance")]
    pub guidance: f64,
    #[serde(default = "default_attention_d")]
    pub attention_d: usize,
    /// Latent `[channels, height, width]` the plan was written for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_scale: Option<AttentionScale>,
}

impl Default for AdaptationPlan {
    fn default() -> Self {
        Self {
            redilated: Vec::new(),
            dispersed: Vec::new(),
            noise_damped: Vec::new(),
            progressive: false,
            tau: default_tau(),
            steps: default_steps(),
            guidance: default_guidance(),
            attention_d: 1,
            latent: None,
            attention_scale: None,
        }
    }
}

impl AdaptationPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid plan: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Re-dilates `blocks` at factor `d`.
    pub fn redilate(blocks: &[BlockName], d: f64) -> Self {
        Self {
            redilated: blocks.iter().map(|&block| RedilatedBlock { block, d }).collect(),
            ..Self::default()
        }
    }

    pub fn is_noise_damped(&self) -> bool {
        !self.noise_damped.is_empty()
    }

    /// Adapted blocks in plan order: re-dilated first, then dispersed.
    pub fn adapted_blocks(&self) -> Vec<BlockName> {
        self.redilated
            .iter()
            .map(|b| b.block)
            .chain(self.dispersed.iter().map(|b| b.block))
            .collect()
    }

    /// Structural checks that need no model config.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("plan needs at least one step".into()));
        }
        if self.tau > self.steps {
            return Err(Error::Config(format!("tau {} exceeds {} steps", self.tau, self.steps)));
        }
        if self.attention_d == 0 {
            return Err(Error::Config("attention_d must be >= 1".into()));
        }
        if !self.guidance.is_finite() {
            return Err(Error::Config("guidance scale must be finite".into()));
        }
        let mut seen = BTreeMap::new();
        for (block, d) in self
            .redilated
            .iter()
            .map(|b| (b.block, b.d))
            .chain(self.dispersed.iter().map(|b| (b.block, b.d)))
        {
            if !(d.is_finite() && d >= 1.0) {
                return Err(Error::Config(format!("{block}: factor {d} is below 1")));
            }
            if seen.insert(block, ()).is_some() {
                return Err(Error::Config(format!("{block} is adapted twice")));
            }
        }
        if let Some(s) = self.attention_scale {
            if s.trained_tokens < 2 {
                return Err(Error::Config("attention_scale.trained_tokens must be >= 2".into()));
            }
        }
        Ok(())
    }

    /// Validates block names against `levels` and loads operators through `load`.
    pub fn resolve_with(
        &self,
        levels: usize,
        mut load: impl FnMut(&str) -> Result<Arc<DispersionOperator>>,
    ) -> Result<ResolvedPlan> {
        self.validate()?;
        let check = |b: BlockName| -> Result<BlockName> {
            match b {
                BlockName::Down(i) | BlockName::Up(i) if i >= levels => Err(Error::Config(format!(
                    "unknown block {b} for a {levels}-level U-Net"
                ))),
                _ => Ok(b),
            }
        };
        let mut blocks = BTreeMap::new();
        for r in &self.redilated {
            blocks.insert(check(r.block)?, Adaptation::Redilate { base: r.d });
        }
        for r in &self.dispersed {
            let op = load(&r.operator)?;
            if let Some([k, kp]) = r.kernel {
                if (k, kp) != (op.r(), op.r_prime()) {
                    return Err(Error::Config(format!(
                        "{}: plan says {k}->{kp}, operator is {}->{}",
                        r.block,
                        op.r(),
                        op.r_prime()
                    )));
                }
            }
            blocks.insert(check(r.block)?, Adaptation::Disperse { base: r.d, operator: op });
        }
        let noise_damped = self.noise_damped.iter().map(|&b| check(b)).collect::<Result<_>>()?;
        Ok(ResolvedPlan {
            blocks,
            noise_damped,
            tau: self.tau,
            steps: self.steps,
            progressive: self.progressive,
            attention_d: self.attention_d,
            attention_scale: self.attention_scale,
        })
    }

    /// Resolves operator paths relative to `base_dir`, loading each file once.
    pub fn resolve(&self, levels: usize, base_dir: Option<&Path>) -> Result<ResolvedPlan> {
        let mut cache: BTreeMap<PathBuf, Arc<DispersionOperator>> = BTreeMap::new();
        self.resolve_with(levels, |name| {
            let p = match base_dir {
                Some(dir) => dir.join(name),
                None => PathBuf::from(name),
            };
            if let Some(op) = cache.get(&p) {
                return Ok(op.clone());
            }
            let op = Arc::new(DispersionOperator::load(&p)?);
            cache.insert(p, op.clone());
            Ok(op)
        })
    }
}

#[derive(Clone, Debug)]
pub enum Adaptation {
    Redilate { base: f64 },
    Disperse { base: f64, operator: Arc<DispersionOperator> },
}

impl Adaptation {
    pub fn base(&self) -> f64 {
        match self {
            Adaptation::Redilate { base } | Adaptation::Disperse { base, .. } => *base,
        }
    }
}

/// How one convolution executes at one step.
#[derive(Clone, Debug)]
pub enum ConvMode {
    Plain,
    Redilate(f64),
    Disperse(f64, Arc<DispersionOperator>),
}

impl ConvMode {
    pub fn is_plain(&self) -> bool {
        matches!(self, ConvMode::Plain)
    }
}

/// A plan checked against a model, with operators loaded.
#[derive(Clone, Debug)]
pub struct ResolvedPlan {
    blocks: BTreeMap<BlockName, Adaptation>,
    noise_damped: Vec<BlockName>,
    pub tau: usize,
    pub steps: usize,
    pub progressive: bool,
    pub attention_d: usize,
    pub attention_scale: Option<AttentionScale>,
}

impl ResolvedPlan {
    pub fn empty() -> Self {
        Self {
            blocks: BTreeMap::new(),
            noise_damped: Vec::new(),
            tau: 0,
            steps: 1,
            progressive: false,
            attention_d: 1,
            attention_scale: None,
        }
    }

    pub fn adaptation(&self, block: BlockName) -> Option<&Adaptation> {
        self.blocks.get(&block)
    }

    pub fn adapted(&self) -> impl Iterator<Item = (&BlockName, &Adaptation)> {
        self.blocks.iter()
    }

    pub fn noise_damped(&self) -> &[BlockName] {
        &self.noise_damped
    }

    /// The strong-denoising base model: noise-damped blocks reverted.
    pub fn base_model(&self) -> Self {
        let mut base = self.clone();
        for b in &self.noise_damped {
            base.blocks.remove(b);
        }
        base.noise_damped.clear();
        base
    }

    /// Dilation factor of `block` at inference step `step`.
    pub fn factor(&self, block: BlockName, step: usize) -> f64 {
        self.blocks
            .get(&block)
            .map_or(1.0, |a| schedule_factor(a.base(), self.tau, self.progressive, step))
    }

    /// Execution mode of an adaptable convolution inside `block`.
    pub fn conv_mode(&self, block: BlockName, step: usize) -> ConvMode {
        let Some(a) = self.blocks.get(&block) else {
            return ConvMode::Plain;
        };
        let d = schedule_factor(a.base(), self.tau, self.progressive, step);
        if d == 1.0 {
            return ConvMode::Plain;
        }
        match a {
            Adaptation::Redilate { .. } => ConvMode::Redilate(d),
            Adaptation::Disperse { operator, .. } => ConvMode::Disperse(d, operator.clone()),
        }
    }

    /// Slice factor for attention layers at `step`.
    pub fn attention_factor(&self, step: usize) -> usize {
        if step < self.tau {
            self.attention_d
        } else {
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn block_names() {
        for s in ["DB0", "DB3", "MB", "UB2"] {
            assert_eq!(s.parse::<BlockName>().unwrap().to_string(), s);
        }
        for s in ["XB1", "DB", "mb", "UBx"] {
            assert!(s.parse::<BlockName>().is_err());
        }
    }

    #[test]
    fn schema_example_parses() {
        let json = r#"{"redilated": [{"block": "MB", "d": 2.0}], "dispersed": [{"block": "DB3", "d": 2, "operator": "R_3to5.dten"}], "noise_damped": ["DB0","UB2"], "progressive": true, "tau": 35, "steps": 50, "guidance": 7.5, "attention_d": 1}"#;
        let p = AdaptationPlan::from_json(json).unwrap();
        assert_eq!(p.redilated[0].block, BlockName::Mid);
        assert_eq!(p.dispersed[0].d, 2.0);
        assert_eq!(p.noise_damped, vec![BlockName::Down(0), BlockName::Up(2)]);
        assert!(p.progressive);
        assert_eq!((p.tau, p.steps, p.attention_d), (35, 50, 1));
        p.validate().unwrap();
        assert_eq!(AdaptationPlan::from_json(&p.to_json().unwrap()).unwrap(), p);
    }

    #[test]
    fn invalid_plans() {
        assert!(AdaptationPlan::from_json(r#"{"redilated": [{"block": "XB0", "d": 2}]}"#).is_err());
        assert!(AdaptationPlan::from_json(r#"{"bogus": 1}"#).is_err());
        let twice = AdaptationPlan::from_json(
            r#"{"redilated": [{"block": "MB", "d": 2}], "dispersed": [{"block": "MB", "d": 2, "operator": "x"}]}"#,
        )
        .unwrap();
        assert!(twice.validate().is_err());
        let low = AdaptationPlan::redilate(&[BlockName::Mid], 0.5);
        assert!(low.validate().is_err());
        let deep = AdaptationPlan::redilate(&[BlockName::Down(4)], 2.0);
        assert!(matches!(deep.resolve(4, None), Err(Error::Config(_))));
        let tau = AdaptationPlan { tau: 60, ..AdaptationPlan::default() };
        assert!(tau.validate().is_err());
    }

    #[test]
    fn base_model_reverts_noise_damped() {
        let mut plan = AdaptationPlan::redilate(&[BlockName::Down(0), BlockName::Mid], 2.0);
        plan.noise_damped = vec![BlockName::Down(0)];
        let r = plan.resolve(4, None).unwrap();
        assert!(matches!(r.conv_mode(BlockName::Down(0), 0), ConvMode::Redilate(_)));
        let base = r.base_model();
        assert!(base.conv_mode(BlockName::Down(0), 0).is_plain());
        assert!(matches!(base.conv_mode(BlockName::Mid, 0), ConvMode::Redilate(_)));
        assert!(r.conv_mode(BlockName::Mid, 30).is_plain());
    }

    fn block() -> impl Strategy<Value = BlockName> {
        prop_oneof![
            (0usize..4).prop_map(BlockName::Down),
            Just(BlockName::Mid),
            (0usize..4).prop_map(BlockName::Up),
        ]
    }

    proptest! {
        #[test]
        fn json_round_trip(
            blocks in prop::collection::btree_set(block(), 0..9),
            factors in prop::collection::vec(1.0f64..4.0, 9),
            split in 0usize..9,
            nd in prop::collection::vec(block(), 0..4),
            progressive in any::<bool>(),
            tau in 0usize..50,
            guidance in 0.0f64..10.0,
        ) {
            let blocks: Vec<_> = blocks.into_iter().collect();
            let split = split.min(blocks.len());
            let plan = AdaptationPlan {
                redilated: blocks[..split].iter().zip(&factors).map(|(&block, &d)| RedilatedBlock { block, d }).collect(),
                dispersed: blocks[split..].iter().zip(&factors).map(|(&block, &d)| DispersedBlock {
                    block, d, operator: "R_3to5.dten".into(), kernel: Some([3, 5]) }).collect(),
                noise_damped: nd,
                progressive,
                tau,
                steps: 50,
                guidance,
                attention_d: 1,
                latent: Some([4, 64, 64]),
                attention_scale: None,
            };
            prop_assert_eq!(AdaptationPlan::from_json(&plan.to_json().unwrap()).unwrap(), plan);
        }
    }
}
