//! The (c1, c2, k) probing protocol: compare concept scores on images of
//! class c1 with k present, class c1 with k absent, and class c2.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletScenario {
    pub c1: String,
    pub c2: String,
    pub k: String,
    pub samples: usize,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
}

fn default_repetitions() -> usize {
    10
}

impl TripletScenario {
    pub fn validate(&self) -> Result<()> {
        if self.c1 == self.c2 {
            return Err(Error::Invalid(format!("c1 and c2 are both `{}`", self.c1)));
        }
        if self.repetitions == 0 || self.samples == 0 {
            return Err(Error::Invalid("samples and repetitions must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Scores of the three subsets drawn in one repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Repetition {
    pub present: Vec<f64>,
    pub absent: Vec<f64>,
    pub other: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletResult {
    pub scenario: TripletScenario,
    /// Mean over repetitions of each subset's mean score.
    pub means: [f64; 3],
    /// Population standard deviation of the per-repetition means.
    pub stds: [f64; 3],
    pub failures: usize,
    pub failure_rate: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn population_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// A repetition fails when the k-absent subset outscores the k-present one
/// on average. Equal means are not failures.
pub fn run_triplet(scenario: &TripletScenario, reps: &[Repetition]) -> Result<TripletResult> {
    scenario.validate()?;
    if reps.is_empty() {
        return Err(Error::Invalid("no repetitions".into()));
    }
    let mut per_rep: [Vec<f64>; 3] = Default::default();
    let mut failures = 0;
    for (i, r) in reps.iter().enumerate() {
        let subsets = [&r.present, &r.absent, &r.other];
        if subsets.iter().any(|s| s.is_empty()) {
            return Err(Error::Invalid(format!("repetition {i} has an empty subset")));
        }
        let m = subsets.map(|s| mean(s));
        failures += (m[1] > m[0]) as usize;
        for (acc, v) in per_rep.iter_mut().zip(m) {
            acc.push(v);
        }
    }
    Ok(TripletResult {
        scenario: scenario.clone(),
        means: [0, 1, 2].map(|k| mean(&per_rep[k])),
        stds: [0, 1, 2].map(|k| population_std(&per_rep[k])),
        failures,
        failure_rate: failures as f64 / reps.len() as f64,
    })
}

/// Draws `scenario.samples` scores without replacement from each pool, once
/// per repetition.
pub fn draw_repetitions(
    scenario: &TripletScenario,
    pools: [&[f64]; 3],
    seed: u64,
) -> Result<Vec<Repetition>> {
    scenario.validate()?;
    for (name, pool) in ["k-present c1", "k-absent c1", "c2"].iter().zip(pools) {
        if pool.len() < scenario.samples {
            return Err(Error::Invalid(format!(
                "{name} pool has {} scores, scenario draws {}",
                pool.len(),
                scenario.samples
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |pool: &[f64]| -> Vec<f64> {
        sample(&mut rng, pool.len(), scenario.samples)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    };
    Ok((0..scenario.repetitions)
        .map(|_| Repetition {
            present: draw(pools[0]),
            absent: draw(pools[1]),
            other: draw(pools[2]),
        })
        .collect())
}

/// Mean failure rate across scenarios.
pub fn mean_failure_rate(results: &[TripletResult]) -> Option<f64> {
    (!results.is_empty())
        .then(|| results.iter().map(|r| r.failure_rate).sum::<f64>() / results.len() as f64)
}
