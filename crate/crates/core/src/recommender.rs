//! Query-time prediction, similar-item retrieval, and the popularity
//! baseline.
//!
//! Candidates come from the union of the evidence items' prediction
//! lists. When several evidence items vouch for the same candidate the
//! weights are combined either conservatively (max) or naive-Bayes
//! style (sum), then pushed through the candidate's prior log odds to
//! get a probability score.

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use crate::corpus::ItemId;
use crate::model::CfwModel;
use crate::woe::logistic;

#[derive(Debug, Error)]
pub enum RecommendError {
    #[error("unknown item {0:?}")]
    UnknownItem(String),
}

/// How gathered weights of evidence are combined per candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Maximum of the gathered effective weights (conservative).
    CfwM,
    /// Sum of the gathered effective weights (naive-Bayes style).
    CfwP,
    /// Popularity order; ignores pairwise evidence.
    Baseline,
}

#[derive(Debug, Clone)]
pub struct Query {
    pub evidence: Vec<String>,
    pub algorithm: Algorithm,
    /// `None` returns the full candidate list.
    pub max_results: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredItem {
    pub item: ItemId,
    /// Estimated probability the user likes the item:
    /// logistic(combined_omega + omega_0).
    pub score: f64,
    pub combined_omega: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recommendations {
    pub items: Vec<ScoredItem>,
    /// Evidence tokens that are not in the model vocabulary.
    pub unknown_evidence: usize,
    /// True when no usable evidence remained and the popularity
    /// baseline answered instead.
    pub baseline_fallback: bool,
}

/// Ranks likely items for a set of evidence items. Unknown evidence is
/// ignored (counted in the result); an effectively empty query degrades
/// to the popularity baseline rather than erroring.
pub fn recommend(model: &CfwModel, query: &Query) -> Recommendations {
    let mut evidence: BTreeSet<ItemId> = BTreeSet::new();
    let mut unknown = 0usize;
    for token in &query.evidence {
        match model.lookup(token) {
            Some(id) => {
                evidence.insert(id);
            }
            None => unknown += 1,
        }
    }
    let baseline_fallback = evidence.is_empty() && query.algorithm != Algorithm::Baseline;
    let items = if evidence.is_empty() || query.algorithm == Algorithm::Baseline {
        baseline_popularity(model, &evidence, query.max_results)
    } else {
        combine_evidence(model, &evidence, query.algorithm, query.max_results)
    };
    Recommendations {
        items,
        unknown_evidence: unknown,
        baseline_fallback,
    }
}

fn combine_evidence(
    model: &CfwModel,
    evidence: &BTreeSet<ItemId>,
    algorithm: Algorithm,
    max_results: Option<usize>,
) -> Vec<ScoredItem> {
    let mut combined: HashMap<ItemId, f64> = HashMap::new();
    for &e in evidence {
        for assoc in &model.predict_lists[e as usize] {
            if evidence.contains(&assoc.target) {
                continue;
            }
            combined
                .entry(assoc.target)
                .and_modify(|w| match algorithm {
                    Algorithm::CfwM => *w = w.max(assoc.omega_eff),
                    Algorithm::CfwP => *w += assoc.omega_eff,
                    Algorithm::Baseline => unreachable!("handled by caller"),
                })
                .or_insert(assoc.omega_eff);
        }
    }
    let mut items: Vec<ScoredItem> = combined
        .into_iter()
        .map(|(item, combined_omega)| ScoredItem {
            item,
            combined_omega,
            score: logistic(combined_omega + model.omega_0(item)),
        })
        .collect();
    sort_scored(model, &mut items);
    truncate(items, max_results)
}

/// All model items ranked by marginal popularity, minus `exclude`.
pub fn baseline_popularity(
    model: &CfwModel,
    exclude: &BTreeSet<ItemId>,
    max_results: Option<usize>,
) -> Vec<ScoredItem> {
    let mut items: Vec<ScoredItem> = (0..model.n_items() as ItemId)
        .filter(|id| !exclude.contains(id))
        .map(|item| ScoredItem {
            item,
            combined_omega: 0.0,
            score: logistic(model.omega_0(item)),
        })
        .collect();
    sort_scored(model, &mut items);
    truncate(items, max_results)
}

/// Stored similar-item associations of `item` whose conservative weight
/// reaches the threshold, strongest first.
pub fn similar_items(
    model: &CfwModel,
    item: &str,
    threshold: f64,
    max_results: Option<usize>,
) -> Result<Vec<(ItemId, f64)>, RecommendError> {
    let id = model
        .lookup(item)
        .ok_or_else(|| RecommendError::UnknownItem(item.to_string()))?;
    let hits: Vec<(ItemId, f64)> = model.similar_lists[id as usize]
        .iter()
        .filter(|assoc| assoc.omega_p05 >= threshold)
        .map(|assoc| (assoc.target, assoc.omega_p05))
        .collect();
    Ok(truncate(hits, max_results))
}

/// Score descending, then popularity descending, then token ascending.
fn sort_scored(model: &CfwModel, items: &mut [ScoredItem]) {
    items.sort_by(|x, y| {
        y.score
            .total_cmp(&x.score)
            .then_with(|| {
                model
                    .marginals
                    .likes(y.item)
                    .cmp(&model.marginals.likes(x.item))
            })
            .then_with(|| model.token(x.item).cmp(model.token(y.item)))
    });
}

fn truncate<T>(mut items: Vec<T>, max_results: Option<usize>) -> Vec<T> {
    if let Some(limit) = max_results {
        items.truncate(limit);
    }
    items
}
