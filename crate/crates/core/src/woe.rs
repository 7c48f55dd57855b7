//! Weight-of-evidence math for ordered item pairs.
//!
//! The weight of evidence omega(e:h) = ln(theta_{e|h} / theta_{e|not h})
//! measures how strongly liking item e predicts liking item h. Given 2x2
//! contingency counts and known marginals, a discretized posterior over
//! omega is built with a two-pass refinement over a bounded uniform
//! prior, then collapsed into the point estimates the model stores: the
//! expected conditional probability, the effective weight it implies,
//! and a conservative low percentile.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Prior support for omega(e:h).
pub const DEFAULT_PRIOR_LO: f64 = -6.0;
pub const DEFAULT_PRIOR_HI: f64 = 6.0;
/// Segment count per pass of the posterior discretization.
pub const DEFAULT_SEGMENTS: usize = 15;
/// Posterior mass below which outer segments are left unrefined.
pub const DEFAULT_EXPAND_THRESHOLD: f64 = 1e-5;

/// Binary-search tolerance when locating feasibility boundaries.
const RANGE_TOL: f64 = 1e-6;
/// Feasible ranges narrower than this are rejected as degenerate.
const MIN_RANGE_WIDTH: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum WoeError {
    #[error(
        "omega {omega} infeasible for theta_e={theta_e}, theta_h={theta_h}: \
         a conditional would leave [0,1]"
    )]
    InfeasibleOmega {
        omega: f64,
        theta_e: f64,
        theta_h: f64,
    },
    #[error(
        "feasible omega range for theta_e={theta_e}, theta_h={theta_h} \
         is narrower than {MIN_RANGE_WIDTH}"
    )]
    DegenerateRange { theta_e: f64, theta_h: f64 },
    #[error("theta must lie strictly inside (0,1), got {0}")]
    BadTheta(f64),
    #[error("contingency table must hold at least one observation")]
    EmptyTable,
    #[error("cell {cell} is zero; the log odds ratio and its error are undefined")]
    ZeroCell { cell: char },
}

/// 2x2 contingency counts for an ordered item pair (e, h):
/// `a` likes neither, `b` likes e only, `c` likes h only, `d` likes both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Result<Self, WoeError> {
        if a + b + c + d == 0 {
            return Err(WoeError::EmptyTable);
        }
        Ok(Self { a, b, c, d })
    }

    pub fn n(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    /// Count of users who like e (b + d).
    pub fn likes_e(&self) -> u64 {
        self.b + self.d
    }

    /// Count of users who like h (c + d).
    pub fn likes_h(&self) -> u64 {
        self.c + self.d
    }
}

/// Conditional and joint cell probabilities implied by (omega, theta_e,
/// theta_h).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairConditionals {
    pub e_given_h: f64,
    pub e_given_not_h: f64,
    pub joint_eh: f64,
    pub joint_e_not_h: f64,
    pub joint_not_e_h: f64,
    pub joint_neither: f64,
}

/// Piecewise-constant posterior over omega: contiguous segments with a
/// center, a width, and a probability mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub center: f64,
    pub width: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePosterior {
    pub segments: Vec<Segment>,
}

impl DiscretePosterior {
    pub fn total_prob(&self) -> f64 {
        self.segments.iter().map(|s| s.prob).sum()
    }

    /// Outer edges of the support.
    pub fn support(&self) -> (f64, f64) {
        let first = self.segments.first().expect("posterior has segments");
        let last = self.segments.last().expect("posterior has segments");
        (
            first.center - first.width / 2.0,
            last.center + last.width / 2.0,
        )
    }
}

/// Tunables for the discretized posterior. The defaults are the values
/// the model is trained with; tests pin them explicitly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorConfig {
    pub prior_lo: f64,
    pub prior_hi: f64,
    pub segments: usize,
    pub expand_threshold: f64,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        Self {
            prior_lo: DEFAULT_PRIOR_LO,
            prior_hi: DEFAULT_PRIOR_HI,
            segments: DEFAULT_SEGMENTS,
            expand_threshold: DEFAULT_EXPAND_THRESHOLD,
        }
    }
}

/// Standard logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`logistic`] on (0,1). Callers guarantee the domain.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn check_theta(theta: f64) -> Result<(), WoeError> {
    if theta > 0.0 && theta < 1.0 {
        Ok(())
    } else {
        Err(WoeError::BadTheta(theta))
    }
}

/// Solves the pair conditionals implied by a weight of evidence and the
/// two marginals:
/// theta_{e|not h} = theta_e / (theta_h e^omega + 1 - theta_h) and
/// theta_{e|h} = e^omega theta_{e|not h}. Errors when either conditional
/// leaves [0,1].
pub fn solve_conditionals(
    omega: f64,
    theta_e: f64,
    theta_h: f64,
) -> Result<PairConditionals, WoeError> {
    check_theta(theta_e)?;
    check_theta(theta_h)?;
    let u = omega.exp();
    let e_given_not_h = theta_e / (theta_h * u + (1.0 - theta_h));
    let e_given_h = u * e_given_not_h;
    // NaN (from omega = NaN or +inf) must also land here.
    if e_given_h > 1.0 || e_given_not_h > 1.0 || e_given_h.is_nan() || e_given_not_h.is_nan() {
        return Err(WoeError::InfeasibleOmega {
            omega,
            theta_e,
            theta_h,
        });
    }
    // Deriving complements by subtraction keeps the marginal identities
    // exact: joint_eh + joint_not_e_h == theta_h bit-for-bit.
    let joint_eh = e_given_h * theta_h;
    let joint_not_e_h = theta_h - joint_eh;
    let joint_e_not_h = e_given_not_h * (1.0 - theta_h);
    let joint_neither = (1.0 - theta_h) - joint_e_not_h;
    Ok(PairConditionals {
        e_given_h,
        e_given_not_h,
        joint_eh,
        joint_e_not_h,
        joint_not_e_h,
        joint_neither,
    })
}

/// Largest subinterval of [prior_lo, prior_hi] on which
/// [`solve_conditionals`] succeeds, with boundaries located by binary
/// search. omega = 0 (independence) is always feasible and anchors the
/// search.
pub fn feasible_range(theta_e: f64, theta_h: f64) -> Result<(f64, f64), WoeError> {
    feasible_range_in(theta_e, theta_h, DEFAULT_PRIOR_LO, DEFAULT_PRIOR_HI)
}

pub fn feasible_range_in(
    theta_e: f64,
    theta_h: f64,
    prior_lo: f64,
    prior_hi: f64,
) -> Result<(f64, f64), WoeError> {
    check_theta(theta_e)?;
    check_theta(theta_h)?;
    assert!(
        prior_lo < 0.0 && prior_hi > 0.0,
        "prior must straddle omega = 0"
    );
    let ok = |w: f64| solve_conditionals(w, theta_e, theta_h).is_ok();
    let lo = if ok(prior_lo) {
        prior_lo
    } else {
        bisect_boundary(prior_lo, 0.0, &ok)
    };
    let hi = if ok(prior_hi) {
        prior_hi
    } else {
        bisect_boundary(prior_hi, 0.0, &ok)
    };
    if hi - lo < MIN_RANGE_WIDTH {
        return Err(WoeError::DegenerateRange { theta_e, theta_h });
    }
    Ok((lo, hi))
}

/// Binary search between an infeasible point and a feasible one; returns
/// the feasible side of a bracket no wider than the tolerance.
fn bisect_boundary(infeasible: f64, feasible: f64, ok: &impl Fn(f64) -> bool) -> f64 {
    let (mut bad, mut good) = (infeasible, feasible);
    while (good - bad).abs() > RANGE_TOL {
        let mid = 0.5 * (bad + good);
        if ok(mid) {
            good = mid;
        } else {
            bad = mid;
        }
    }
    good
}

/// Multinomial log likelihood of the table under (omega, theta_e,
/// theta_h), with the count-only multinomial coefficient dropped (it is
/// constant in omega and cancels on normalization). 0*ln(0) counts as 0.
pub fn log_likelihood(
    table: &ContingencyTable,
    omega: f64,
    theta_e: f64,
    theta_h: f64,
) -> Result<f64, WoeError> {
    let cells = solve_conditionals(omega, theta_e, theta_h)?;
    Ok(count_term(table.a, cells.joint_neither)
        + count_term(table.b, cells.joint_e_not_h)
        + count_term(table.c, cells.joint_not_e_h)
        + count_term(table.d, cells.joint_eh))
}

fn count_term(count: u64, p: f64) -> f64 {
    if count == 0 {
        0.0
    } else {
        count as f64 * p.ln()
    }
}

/// Discretized posterior over omega for a contingency table, using the
/// default prior and segmentation.
pub fn approximate_posterior(
    table: &ContingencyTable,
    theta_e: f64,
    theta_h: f64,
) -> Result<DiscretePosterior, WoeError> {
    approximate_posterior_with(&PosteriorConfig::default(), table, theta_e, theta_h)
}

/// Discretized posterior with explicit tunables.
pub fn approximate_posterior_with(
    cfg: &PosteriorConfig,
    table: &ContingencyTable,
    theta_e: f64,
    theta_h: f64,
) -> Result<DiscretePosterior, WoeError> {
    let (lo, hi) = feasible_range_in(theta_e, theta_h, cfg.prior_lo, cfg.prior_hi)?;
    Ok(two_pass_posterior(cfg, lo, hi, |w| {
        log_likelihood(table, w, theta_e, theta_h).expect("centers lie inside the feasible range")
    }))
}

/// Two-pass discretization of a posterior over [lo, hi] under a uniform
/// prior and an arbitrary log-likelihood:
/// 1. split the range into equal segments with equal priors;
/// 2. form the discrete posterior from center-point likelihoods;
/// 3. find the segment before the first and after the last segment
///    whose posterior exceeds the expansion threshold (falling back to
///    the outermost segments);
/// 4. merge that span and re-split it into equal segments;
/// 5. keep leftover outer segments at their old width and give every
///    segment a prior proportional to its width;
/// 6. recompute the discrete posterior at the centers.
pub fn two_pass_posterior(
    cfg: &PosteriorConfig,
    lo: f64,
    hi: f64,
    loglik: impl Fn(f64) -> f64,
) -> DiscretePosterior {
    let n = cfg.segments;
    assert!(n >= 2, "need at least two segments");
    assert!(hi > lo, "empty support");
    let w1 = (hi - lo) / n as f64;
    let center1 = |i: usize| lo + (i as f64 + 0.5) * w1;
    let ll1: Vec<f64> = (0..n).map(|i| loglik(center1(i))).collect();
    let p1 = normalize_log_weights(&ll1);

    let first = p1.iter().position(|&p| p > cfg.expand_threshold);
    let last = p1.iter().rposition(|&p| p > cfg.expand_threshold);
    // The max normalized mass is at least 1/n, so for any threshold
    // below that both indices exist; fall back to the mode regardless.
    let argmax = max_index(&p1);
    let first = first.unwrap_or(argmax);
    let last = last.unwrap_or(argmax);
    let left = first.saturating_sub(1);
    let right = (last + 1).min(n - 1);
    let span_lo = if left == 0 { lo } else { lo + left as f64 * w1 };
    let span_hi = if right == n - 1 {
        hi
    } else {
        lo + (right + 1) as f64 * w1
    };

    let mut centers = Vec::with_capacity(2 * n);
    let mut widths = Vec::with_capacity(2 * n);
    for i in 0..left {
        centers.push(center1(i));
        widths.push(w1);
    }
    let w2 = (span_hi - span_lo) / n as f64;
    for i in 0..n {
        centers.push(span_lo + (i as f64 + 0.5) * w2);
        widths.push(w2);
    }
    for i in (right + 1)..n {
        centers.push(center1(i));
        widths.push(w1);
    }

    let total_width: f64 = widths.iter().sum();
    let weighted: Vec<f64> = centers
        .iter()
        .zip(&widths)
        .map(|(&c, &w)| loglik(c) + (w / total_width).ln())
        .collect();
    let probs = normalize_log_weights(&weighted);
    let segments = centers
        .into_iter()
        .zip(widths)
        .zip(probs)
        .map(|((center, width), prob)| Segment {
            center,
            width,
            prob,
        })
        .collect();
    DiscretePosterior { segments }
}

fn normalize_log_weights(log_w: &[f64]) -> Vec<f64> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = log_w.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

fn max_index(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Posterior-expected conditional probability of liking h given e:
/// sum over segments of logistic(center + omega_0) * prob.
pub fn expected_theta_h_given_e(posterior: &DiscretePosterior, omega_0: f64) -> f64 {
    posterior
        .segments
        .iter()
        .map(|s| logistic(s.center + omega_0) * s.prob)
        .sum()
}

/// The single omega value that reproduces the posterior-expected
/// conditional probability: logit(<theta_{h|e}>) - omega_0.
pub fn effective_woe(posterior: &DiscretePosterior, omega_0: f64) -> f64 {
    logit(expected_theta_h_given_e(posterior, omega_0)) - omega_0
}

/// The omega at cumulative posterior probability `p`, interpolated
/// linearly inside the containing segment.
pub fn percentile_woe(posterior: &DiscretePosterior, p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "percentile must lie in (0,1)");
    let mut cum = 0.0;
    for seg in &posterior.segments {
        if cum + seg.prob >= p {
            let left = seg.center - seg.width / 2.0;
            if seg.prob <= 0.0 {
                return left;
            }
            return left + seg.width * (p - cum) / seg.prob;
        }
        cum += seg.prob;
    }
    let last = posterior.segments.last().expect("posterior has segments");
    last.center + last.width / 2.0
}

/// Maximum-likelihood estimate ln[(d/(c+d)) / (b/(a+b))]. `None` when a
/// zero count makes the estimate undefined or infinite.
pub fn ml_woe(table: &ContingencyTable) -> Option<f64> {
    let ContingencyTable { a, b, c, d } = *table;
    if b == 0 || d == 0 || a + b == 0 || c + d == 0 {
        return None;
    }
    let num = d as f64 / (c + d) as f64;
    let den = b as f64 / (a + b) as f64;
    Some((num / den).ln())
}

/// Smoothed direct estimate of omega: each conditional is estimated
/// separately with add-half smoothing, (1/2 + c)/(1 + c + d) for
/// theta_{e|h} and (1/2 + a)/(1 + a + b) for theta_{e|not h}, then the
/// log ratio is taken. Always finite.
pub fn simple_woe(table: &ContingencyTable) -> f64 {
    let ContingencyTable { a, b, c, d } = *table;
    let e_given_h = (0.5 + c as f64) / (1.0 + (c + d) as f64);
    let e_given_not_h = (0.5 + a as f64) / (1.0 + (a + b) as f64);
    (e_given_h / e_given_not_h).ln()
}

/// Log cross-product ratio ln(ad/bc) with its asymptotic standard error
/// sqrt(1/a + 1/b + 1/c + 1/d). Every cell must be positive.
pub fn log_odds_ratio_ase(table: &ContingencyTable) -> Result<(f64, f64), WoeError> {
    let ContingencyTable { a, b, c, d } = *table;
    for (cell, count) in [('a', a), ('b', b), ('c', c), ('d', d)] {
        if count == 0 {
            return Err(WoeError::ZeroCell { cell });
        }
    }
    let (a, b, c, d) = (a as f64, b as f64, c as f64, d as f64);
    let log_ratio = (a * d / (b * c)).ln();
    let se = (1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d).sqrt();
    Ok((log_ratio, se))
}
