//! Synthetic learners whose recall decays with the number of steps since a
//! concept was last practiced.
//!
//! Each learner has ability `a ~ N(0, ability_spread²)`, each concept has
//! difficulty `b_c ~ N(0, difficulty_spread²)`. At every step the learner
//! answers a uniformly random concept and is correct with probability
//!
//! ```text
//! sigmoid(a − b_c + κ · exp(−Δ_c / τ_mem) · practiced_c)
//! ```
//!
//! where `Δ_c` is the number of steps since `c` was last answered.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::records::InteractionRecord;
use crate::error::{KtError, Result};
use crate::numerics::sigmoid;

pub const DEFAULT_MASTERY_BONUS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub learners: usize,
    pub concepts: usize,
    pub length: usize,
    pub tau_mem: f64,
    pub ability_spread: f64,
    pub difficulty_spread: f64,
    #[serde(default = "default_bonus")]
    pub mastery_bonus: f64,
    pub seed: u64,
}

fn default_bonus() -> f64 {
    DEFAULT_MASTERY_BONUS
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            learners: 500,
            concepts: 50,
            length: 200,
            tau_mem: 20.0,
            ability_spread: 1.0,
            difficulty_spread: 1.0,
            mastery_bonus: DEFAULT_MASTERY_BONUS,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.learners == 0 || self.concepts == 0 || self.length == 0 {
            return Err(KtError::InvalidArgument(
                "learners, concepts and length must be positive".into(),
            ));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.tau_mem.is_finite() && self.tau_mem > 0.0) {
            return Err(KtError::InvalidArgument(format!(
                "tau_mem must be > 0, got {}",
                self.tau_mem
            )));
        }
        if !finite_nonneg(self.ability_spread)
            || !finite_nonneg(self.difficulty_spread)
            || !self.mastery_bonus.is_finite()
        {
            return Err(KtError::InvalidArgument(
                "spreads must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Closed-form probability of a correct answer. `steps_since` is `None` for
/// a concept never practiced.
pub fn correct_probability(ability: f64, difficulty: f64, steps_since: Option<f64>, bonus: f64, tau_mem: f64) -> f64 {
    let memory = match steps_since {
        Some(delta) => bonus * (-delta / tau_mem).exp(),
        None => 0.0,
    };
    sigmoid(ability - difficulty + memory)
}

/// Bernoulli draw shared by the generator and its frequency test.
pub fn sample_correct<R: Rng>(p: f64, rng: &mut R) -> bool {
    rng.gen::<f64>() < p
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub records: Vec<InteractionRecord>,
    /// Generating probability of each record.
    pub probabilities: Vec<f64>,
    pub abilities: Vec<f64>,
    pub difficulties: Vec<f64>,
}

impl SyntheticData {
    /// Expected fraction correct and its standard error under the generator.
    pub fn expected_correct_rate(&self) -> (f64, f64) {
        let n = self.probabilities.len() as f64;
        let mean = self.probabilities.iter().sum::<f64>() / n;
        let var: f64 = self.probabilities.iter().map(|p| p * (1.0 - p)).sum();
        (mean, var.sqrt() / n)
    }

    pub fn empirical_correct_rate(&self) -> f64 {
        self.records.iter().filter(|r| r.correct).count() as f64 / self.records.len() as f64
    }
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = |sd: f64| Normal::new(0.0, sd).map_err(|e| KtError::InvalidArgument(e.to_string()));
    let diff_dist = normal(spec.difficulty_spread)?;
    let ability_dist = normal(spec.ability_spread)?;
    let difficulties: Vec<f64> = (0..spec.concepts).map(|_| diff_dist.sample(&mut rng)).collect();
    let abilities: Vec<f64> = (0..spec.learners).map(|_| ability_dist.sample(&mut rng)).collect();

    let width = spec.learners.to_string().len().max(4);
    let mut records = Vec::with_capacity(spec.learners * spec.length);
    let mut probabilities = Vec::with_capacity(spec.learners * spec.length);
    let mut last_seen: Vec<Option<usize>> = vec![None; spec.concepts];
    for (l, &ability) in abilities.iter().enumerate() {
        last_seen.iter_mut().for_each(|s| *s = None);
        let learner_id = format!("s{l:0width$}");
        for t in 0..spec.length {
            let c = rng.gen_range(0..spec.concepts);
            let since = last_seen[c].map(|s| (t - s) as f64);
            let p = correct_probability(ability, difficulties[c], since, spec.mastery_bonus, spec.tau_mem);
            let correct = sample_correct(p, &mut rng);
            last_seen[c] = Some(t);
            records.push(InteractionRecord {
                learner_id: learner_id.clone(),
                question_id: format!("q{c}"),
                concept_id: format!("c{c}"),
                correct,
                timestamp_ms: Some(t as i64 * 60_000),
            });
            probabilities.push(p);
        }
    }
    Ok(SyntheticData {
        records,
        probabilities,
        abilities,
        difficulties,
    })
}
