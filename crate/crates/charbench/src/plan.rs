//! Sweep plans and their expansion into per-condition specs.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{mix_phrase, PromptParts};
use crate::vocab::AttributeType;

/// Weights of the reference grid. Anything else is reported as extended.
pub const GRID_WEIGHTS: [f64; 3] = [0.25, 0.5, 0.75];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Mixing,
    Directional,
    Stencil,
    Intervention,
    Concatenation,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::Mixing,
        Condition::Directional,
        Condition::Stencil,
        Condition::Intervention,
        Condition::Concatenation,
    ];

    pub fn is_weighted(self) -> bool {
        self != Condition::Concatenation
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Mixing => "mixing",
            Condition::Directional => "directional",
            Condition::Stencil => "stencil",
            Condition::Intervention => "intervention",
            Condition::Concatenation => "concatenation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributePair {
    pub target: AttributeType,
    pub original: String,
    pub additional: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub overcoat: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySettings {
    pub gamma: f64,
    pub latent_size: usize,
}

impl Default for ToySettings {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            latent_size: 8,
        }
    }
}

/// A sweep as written in a plan file. Pairs and contexts not given
/// explicitly are sampled from `meta_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepPlan {
    pub meta_seed: u64,
    pub steps: usize,
    pub guide_scale: f64,
    pub toy: ToySettings,
    pub conditions: Vec<Condition>,
    pub target_types: Vec<AttributeType>,
    /// Sampled per target type when `pairs` is empty.
    pub pairs_per_type: usize,
    pub pairs: Vec<AttributePair>,
    pub sets_per_pair: usize,
    pub weights: Vec<f64>,
}

impl Default for SweepPlan {
    fn default() -> Self {
        Self {
            meta_seed: 0,
            steps: 50,
            guide_scale: 7.5,
            toy: ToySettings::default(),
            conditions: Condition::ALL.to_vec(),
            target_types: AttributeType::ALL.to_vec(),
            pairs_per_type: 24,
            pairs: Vec::new(),
            sets_per_pair: 2,
            weights: GRID_WEIGHTS.to_vec(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("reading plan: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing plan: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid plan: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> PlanError {
    PlanError::Invalid(msg.into())
}

/// One condition applied to one attribute pair and one sampled context.
/// Produces a record per weight, or a single record for concatenation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub condition: Condition,
    pub pair: AttributePair,
    /// Non-target attributes; the target slot is empty.
    pub context: PromptParts,
    pub weights: Vec<f64>,
    pub seeds: Seeds,
    pub pair_index: usize,
    pub set_index: usize,
}

impl SweepSpec {
    pub fn original_prompt(&self) -> String {
        self.with_target(&self.pair.original)
    }

    pub fn additional_prompt(&self) -> String {
        self.with_target(&self.pair.additional)
    }

    pub fn concatenated_prompt(&self) -> String {
        self.with_target(&mix_phrase(&self.pair.original, &self.pair.additional))
    }

    fn with_target(&self, value: &str) -> String {
        self.context
            .with(self.pair.target, value)
            .compose()
            .expect("the target slot is always filled")
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let t = self.pair.target;
        for attr in [&self.pair.original, &self.pair.additional] {
            if !t.contains(attr) {
                return Err(invalid(format!(
                    "{attr:?} is not a {} attribute",
                    t.as_str()
                )));
            }
        }
        if self.pair.original == self.pair.additional {
            return Err(invalid("original and additional attributes are equal"));
        }
        if self.context.slot(t).is_some() {
            return Err(invalid("context fills the target slot"));
        }
        for kind in AttributeType::ALL {
            let needed = t.context_types().contains(&kind);
            match self.context.slot(kind) {
                Some(a) if !needed => {
                    return Err(invalid(format!(
                        "unexpected {} attribute {a:?}",
                        kind.as_str()
                    )))
                }
                Some(a) if !kind.contains(a) => {
                    return Err(invalid(format!(
                        "{a:?} is not a {} attribute",
                        kind.as_str()
                    )))
                }
                None if needed => {
                    return Err(invalid(format!("missing {} attribute", kind.as_str())))
                }
                _ => {}
            }
        }
        if self.condition.is_weighted() == self.weights.is_empty() {
            return Err(invalid(format!(
                "{} weights: {:?}",
                self.condition.as_str(),
                self.weights
            )));
        }
        if let Some(w) = self.weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(invalid(format!("weight {w} outside [0, 1]")));
        }
        Ok(())
    }
}

pub fn is_grid_weight(w: f64) -> bool {
    GRID_WEIGHTS.contains(&w)
}

impl SweepPlan {
    pub fn load(path: &Path) -> Result<Self, PlanError> {
        let plan: SweepPlan = serde_json::from_str(&fs::read_to_string(path)?)?;
        plan.check()?;
        Ok(plan)
    }

    pub fn check(&self) -> Result<(), PlanError> {
        if self.steps == 0 {
            return Err(invalid("steps must be positive"));
        }
        if self.conditions.is_empty() || self.sets_per_pair == 0 {
            return Err(invalid("nothing to run"));
        }
        if self.conditions.iter().any(|c| c.is_weighted()) && self.weights.is_empty() {
            return Err(invalid("weighted conditions need weights"));
        }
        let distinct: BTreeSet<u64> = self.weights.iter().map(|w| w.to_bits()).collect();
        if distinct.len() != self.weights.len() {
            return Err(invalid("duplicate weights"));
        }
        if self.pairs.is_empty() {
            let max = 8 * 7;
            if self.pairs_per_type == 0 || self.pairs_per_type > max {
                return Err(invalid(format!("pairs_per_type must be in 1..={max}")));
            }
        }
        Ok(())
    }

    /// Attribute pairs: the explicit list, or a sample of ordered pairs per
    /// target type.
    fn sample_pairs(&self, rng: &mut ChaCha8Rng) -> Vec<AttributePair> {
        if !self.pairs.is_empty() {
            return self.pairs.clone();
        }
        let mut out = Vec::new();
        for &target in &self.target_types {
            let vocab = target.vocabulary();
            let all: Vec<(usize, usize)> = (0..vocab.len())
                .flat_map(|a| {
                    (0..vocab.len())
                        .filter(move |&b| b != a)
                        .map(move |b| (a, b))
                })
                .collect();
            let mut picked = index::sample(rng, all.len(), self.pairs_per_type).into_vec();
            picked.sort_unstable();
            out.extend(picked.into_iter().map(|i| AttributePair {
                target,
                original: vocab[all[i].0].to_string(),
                additional: vocab[all[i].1].to_string(),
            }));
        }
        out
    }

    /// Expands into specs ordered by pair, then context set, then condition.
    pub fn expand(&self) -> Result<Vec<SweepSpec>, PlanError> {
        self.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.meta_seed);
        let pairs = self.sample_pairs(&mut rng);
        let mut specs = Vec::new();
        for (pair_index, pair) in pairs.into_iter().enumerate() {
            for set_index in 0..self.sets_per_pair {
                let mut context = PromptParts::default();
                for &kind in pair.target.context_types() {
                    let pick = kind
                        .vocabulary()
                        .choose(&mut rng)
                        .expect("vocabularies are non-empty");
                    context = context.with(kind, *pick);
                }
                let init = u64::from(rng.random::<u32>());
                let overcoat = loop {
                    // the overcoat noise must not replay the initial noise
                    let s = u64::from(rng.random::<u32>());
                    if s != init {
                        break s;
                    }
                };
                for &condition in &self.conditions {
                    let spec = SweepSpec {
                        condition,
                        pair: pair.clone(),
                        context: context.clone(),
                        weights: if condition.is_weighted() {
                            self.weights.clone()
                        } else {
                            Vec::new()
                        },
                        seeds: Seeds { init, overcoat },
                        pair_index,
                        set_index,
                    };
                    spec.validate()?;
                    specs.push(spec);
                }
            }
        }
        Ok(specs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_covers_72_pairs() {
        let specs = SweepPlan::default().expand().unwrap();
        let pairs: BTreeSet<usize> = specs.iter().map(|s| s.pair_index).collect();
        assert_eq!(pairs.len(), 72);
        // 72 pairs x 2 sets x 5 conditions
        assert_eq!(specs.len(), 720);
        let records: usize = specs.iter().map(|s| s.weights.len().max(1)).sum();
        assert_eq!(records, 72 * 2 * (4 * 3 + 1));
    }

    #[test]
    fn expansion_is_seeded() {
        let plan = SweepPlan {
            pairs_per_type: 3,
            ..SweepPlan::default()
        };
        assert_eq!(plan.expand().unwrap(), plan.expand().unwrap());
        let other = SweepPlan {
            meta_seed: 1,
            ..plan.clone()
        };
        assert_ne!(plan.expand().unwrap(), other.expand().unwrap());
    }

    #[test]
    fn contexts_fill_exactly_the_non_target_slots() {
        for spec in SweepPlan::default().expand().unwrap() {
            let p = spec.original_prompt();
            let n = p.split(", ").count();
            assert_eq!(n, 1 + spec.pair.target.context_types().len(), "{p}");
        }
    }

    #[test]
    fn rejects_foreign_attributes() {
        let plan = SweepPlan {
            pairs: vec![AttributePair {
                target: AttributeType::Objects,
                original: "cat".into(),
                additional: "impressionism".into(),
            }],
            ..SweepPlan::default()
        };
        assert!(matches!(plan.expand(), Err(PlanError::Invalid(_))));
    }
}
