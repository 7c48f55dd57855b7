//! Per-item like counts and Beta-posterior point estimates.
//!
//! Each item's long-run like fraction theta_x gets a Beta(1/2, 1/2)
//! prior, so after observing a_x likes among n users the posterior is
//! Beta(a_x + 1/2, n - a_x + 1/2). The posterior median is the point
//! estimate used everywhere downstream.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ItemId, PreferenceDataset};

#[derive(Debug, Error)]
pub enum MarginalsError {
    #[error("beta parameters must be positive and finite, got ({alpha}, {beta})")]
    BadBetaParams { alpha: f64, beta: f64 },
    #[error("theta must lie strictly inside (0,1), got {0}")]
    ThetaOutOfRange(f64),
    #[error("cannot count marginals on an empty dataset")]
    EmptyDataset,
}

/// Like counts and posterior medians for every item in a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalTable {
    n_users: u64,
    likes: Vec<u64>,
    thetas: Vec<f64>,
}

impl MarginalTable {
    pub fn n_users(&self) -> u64 {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.likes.len()
    }

    /// Number of users who like the item (a_x).
    pub fn likes(&self, item: ItemId) -> u64 {
        self.likes[item as usize]
    }

    /// Number of users who do not like the item (b_x).
    pub fn dislikes(&self, item: ItemId) -> u64 {
        self.n_users - self.likes[item as usize]
    }

    /// Posterior median of the item's long-run like fraction.
    pub fn theta(&self, item: ItemId) -> f64 {
        self.thetas[item as usize]
    }

    /// Prior log odds of the item: ln(theta / (1 - theta)).
    pub fn omega_0(&self, item: ItemId) -> f64 {
        let t = self.theta(item);
        (t / (1.0 - t)).ln()
    }

    pub fn like_counts(&self) -> &[u64] {
        &self.likes
    }
}

/// Counts per-item likes over the training users and computes every
/// posterior median. Items never liked in the training set still get an
/// entry (with a_x = 0 and a small positive theta).
pub fn count_marginals(train: &PreferenceDataset) -> Result<MarginalTable, MarginalsError> {
    if train.n_users() == 0 {
        return Err(MarginalsError::EmptyDataset);
    }
    let n_users = train.n_users() as u64;
    let mut likes = vec![0u64; train.n_items()];
    for user in train.users() {
        for &item in &user.liked {
            likes[item as usize] += 1;
        }
    }
    let thetas = likes
        .iter()
        .map(|&a| beta_median(a as f64 + 0.5, (n_users - a) as f64 + 0.5))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(MarginalTable {
        n_users,
        likes,
        thetas,
    })
}

/// Median of a Beta(alpha, beta) distribution, found by bisection on the
/// regularized incomplete beta function to a CDF tolerance of 1e-10.
pub fn beta_median(alpha: f64, beta: f64) -> Result<f64, MarginalsError> {
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(MarginalsError::BadBetaParams { alpha, beta });
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut mid = 0.5;
    for _ in 0..100 {
        let cdf = statrs::function::beta::beta_reg(alpha, beta, mid);
        if (cdf - 0.5).abs() <= 1e-10 && hi - lo <= 1e-12 {
            break;
        }
        if cdf < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
        mid = 0.5 * (lo + hi);
    }
    Ok(mid)
}

/// The log odds ln(theta / (1 - theta)) of a probability strictly inside
/// (0, 1). Boundary or non-finite inputs are rejected.
pub fn marginal_logit(theta: f64) -> Result<f64, MarginalsError> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(MarginalsError::ThetaOutOfRange(theta));
    }
    Ok((theta / (1.0 - theta)).ln())
}
