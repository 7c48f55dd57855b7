//! Ranked-list utility evaluation under the given-k and all-but-1
//! protocols.
//!
//! A scanning user is assumed to reach list position k with probability
//! p(k) = 2^(-k/a), where the half-life a is the position seen with
//! probability one half. Each test user's achieved utility is divided
//! by the utility of a list with all held-out items at the top, and the
//! mean is scaled to [0, 100].

use std::collections::BTreeSet;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{split_with_eligible, ItemId, PreferenceDataset, Protocol, SplitSpec};
use crate::model::CfwModel;
use crate::recommender::{recommend, Algorithm, Query};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("user {0:?} has an empty measurement set; the score is undefined")]
    EmptyMeasurement(String),
    #[error("half-life must be positive, got {0}")]
    BadHalfLife(f64),
    #[error("no test user could be scored under this protocol")]
    NoUsersScored,
}

/// Frequency stratum a query is restricted to, relative to the median
/// training-set item count. Items at the median count as high.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stratum {
    All,
    Low,
    High,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub algorithm: Algorithm,
    pub half_life: f64,
    pub seed: u64,
    pub stratum: Stratum,
}

impl EvalConfig {
    pub fn new(protocol: Protocol, algorithm: Algorithm, seed: u64) -> Self {
        Self {
            protocol,
            algorithm,
            half_life: 5.0,
            seed,
            stratum: Stratum::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserScore {
    pub user_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean normalized utility over scored users, in [0, 100].
    pub score: f64,
    pub n_scored: usize,
    pub n_skipped: usize,
    /// Per-user normalized scores, for external significance testing.
    pub per_user: Vec<UserScore>,
    /// Wall-clock throughput; excluded from reproducibility comparisons.
    pub queries_per_second: f64,
}

/// Probability that a scanning user reaches 0-indexed position k.
pub fn position_probability(k: u64, half_life: f64) -> f64 {
    (-(k as f64) / half_life).exp2()
}

/// Mean normalized list utility, scaled to [0, 100]. Each case pairs a
/// ranked recommendation list with the user's held-out measurement set.
pub fn cfaccuracy(
    cases: &[(Vec<ItemId>, BTreeSet<ItemId>)],
    half_life: f64,
) -> Result<f64, EvalError> {
    if half_life <= 0.0 || half_life.is_nan() {
        return Err(EvalError::BadHalfLife(half_life));
    }
    let mut total = 0.0;
    for (i, (recommendations, measurement)) in cases.iter().enumerate() {
        if measurement.is_empty() {
            return Err(EvalError::EmptyMeasurement(format!("case {i}")));
        }
        total += normalized_utility(
            recommendations
                .iter()
                .map(|item| measurement.contains(item)),
            measurement.len(),
            half_life,
        );
    }
    Ok(100.0 * total / cases.len() as f64)
}

/// Achieved utility over best achievable utility for one user; `hits`
/// flags which ranked positions hold measured items.
fn normalized_utility(
    hits: impl Iterator<Item = bool>,
    measurement_len: usize,
    half_life: f64,
) -> f64 {
    let achieved: f64 = hits
        .enumerate()
        .filter(|(_, hit)| *hit)
        .map(|(k, _)| position_probability(k as u64, half_life))
        .sum();
    let best: f64 = (0..measurement_len as u64)
        .map(|k| position_probability(k, half_life))
        .sum();
    achieved / best
}

/// Runs an evaluation protocol over every test user: split the liked
/// items into query and measurement per the protocol (and stratum),
/// rank with the model, and score. Users that cannot satisfy the
/// protocol are skipped and counted.
pub fn run_protocol(
    model: &CfwModel,
    test: &PreferenceDataset,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if cfg.half_life <= 0.0 || cfg.half_life.is_nan() {
        return Err(EvalError::BadHalfLife(cfg.half_life));
    }
    let stratum_mask = stratum_mask(model, cfg.stratum);
    let spec = SplitSpec {
        seed: cfg.seed,
        protocol: cfg.protocol,
    };

    let started = Instant::now();
    let outcomes: Vec<Option<UserScore>> = test
        .users()
        .par_iter()
        .enumerate()
        .map(|(index, user)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(index as u64);
            let eligible: Vec<ItemId> = match &stratum_mask {
                None => user.liked.clone(),
                Some(mask) => user
                    .liked
                    .iter()
                    .copied()
                    .filter(|&item| {
                        model
                            .lookup(test.token(item))
                            .is_some_and(|id| mask[id as usize])
                    })
                    .collect(),
            };
            let split = split_with_eligible(&user.liked, &eligible, spec.protocol, &mut rng)?;
            let query = Query {
                evidence: split
                    .query
                    .iter()
                    .map(|&item| test.token(item).to_string())
                    .collect(),
                algorithm: cfg.algorithm,
                max_results: None,
            };
            let ranked = recommend(model, &query);
            // Measurement items the model has never seen can only miss;
            // they still count in the normalizer.
            let measured: BTreeSet<ItemId> = split
                .measurement
                .iter()
                .filter_map(|&item| model.lookup(test.token(item)))
                .collect();
            let utility = normalized_utility(
                ranked.items.iter().map(|s| measured.contains(&s.item)),
                split.measurement.len(),
                cfg.half_life,
            );
            Some(UserScore {
                user_id: user.user_id.clone(),
                score: 100.0 * utility,
            })
        })
        .collect();
    let elapsed = started.elapsed().as_secs_f64();

    let per_user: Vec<UserScore> = outcomes.into_iter().flatten().collect();
    if per_user.is_empty() {
        return Err(EvalError::NoUsersScored);
    }
    let n_scored = per_user.len();
    let n_skipped = test.n_users() - n_scored;
    let score = per_user.iter().map(|u| u.score).sum::<f64>() / n_scored as f64;
    Ok(EvalReport {
        score,
        n_scored,
        n_skipped,
        per_user,
        queries_per_second: n_scored as f64 / elapsed.max(1e-9),
    })
}

/// Per-item membership mask for the requested stratum, or `None` for
/// the unrestricted protocol. Low means liked by fewer training users
/// than the median item.
fn stratum_mask(model: &CfwModel, stratum: Stratum) -> Option<Vec<bool>> {
    match stratum {
        Stratum::All => None,
        Stratum::Low | Stratum::High => {
            let mut counts: Vec<u64> = model.marginals.like_counts().to_vec();
            counts.sort_unstable();
            let median = counts[counts.len() / 2];
            let mask = model
                .marginals
                .like_counts()
                .iter()
                .map(|&count| match stratum {
                    Stratum::Low => count < median,
                    Stratum::High => count >= median,
                    Stratum::All => unreachable!(),
                })
                .collect();
            Some(mask)
        }
    }
}
