//! Model construction: partitioned pair counting, posterior
//! memoization, the plus/minus-one skip bound, and top-f list assembly.
//!
//! Counting only tallies d (users liking both items of an ordered pair);
//! the other three cells derive from the marginal counts. To bound
//! memory, source items are split into m partitions and the data is
//! passed over once per partition.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use dashmap::DashMap;
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{ItemId, PreferenceDataset};
use crate::marginals::{count_marginals, MarginalTable, MarginalsError};
use crate::model::{Association, CfwModel, ModelMeta, DEFAULT_LIST_CAPACITY, MODEL_VERSION};
use crate::woe::{
    self, logistic, logit, ContingencyTable, PosteriorConfig, WoeError, DEFAULT_PRIOR_HI,
    DEFAULT_PRIOR_LO,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Marginals(#[from] MarginalsError),
    #[error("invalid train config: {0}")]
    BadConfig(String),
}

/// Training configuration. Defaults match the values the model artifact
/// is expected to ship with.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Association list capacity per item.
    pub f: usize,
    /// Pass count for partitioned counting; `None` picks the smallest m
    /// whose per-pass pair memory fits the byte budget.
    pub partitions: Option<usize>,
    /// Byte budget for one counting pass when `partitions` is `None`.
    pub pair_budget_bytes: usize,
    /// Posterior memo capacity in distinct count vectors; 0 disables.
    pub cache_capacity: usize,
    /// Fast pruning of pairs that cannot reach either list.
    pub skip_bound: bool,
    pub prior_lo: f64,
    pub prior_hi: f64,
    /// Conservative percentile stored per association.
    pub percentile: f64,
    /// Recorded in model metadata for provenance.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            f: DEFAULT_LIST_CAPACITY,
            partitions: None,
            pair_budget_bytes: 256 << 20,
            cache_capacity: 100_000,
            skip_bound: true,
            prior_lo: DEFAULT_PRIOR_LO,
            prior_hi: DEFAULT_PRIOR_HI,
            percentile: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.f == 0 {
            return Err(TrainError::BadConfig("f must be at least 1".into()));
        }
        if self.partitions == Some(0) {
            return Err(TrainError::BadConfig(
                "partitions must be at least 1".into(),
            ));
        }
        if !(self.percentile > 0.0 && self.percentile < 1.0) {
            return Err(TrainError::BadConfig(format!(
                "percentile must lie in (0,1), got {}",
                self.percentile
            )));
        }
        if !(self.prior_lo < 0.0 && self.prior_hi > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "prior bounds must straddle 0, got ({}, {})",
                self.prior_lo, self.prior_hi
            )));
        }
        Ok(())
    }

    fn posterior_config(&self) -> PosteriorConfig {
        PosteriorConfig {
            prior_lo: self.prior_lo,
            prior_hi: self.prior_hi,
            ..PosteriorConfig::default()
        }
    }
}

/// Counters reported after a training run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainStats {
    /// Ordered pairs with at least one co-like.
    pub pairs_counted: u64,
    /// Pairs whose posterior was computed or fetched from the memo.
    pub pairs_evaluated: u64,
    /// Pairs pruned by the skip bound.
    pub pairs_skipped: u64,
    /// Pairs dropped because their feasible omega range degenerated.
    pub pairs_infeasible: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

impl TrainStats {
    pub fn cache_hit_rate(&self) -> f64 {
        let total = self.cache_hits + self.cache_misses;
        if total == 0 {
            0.0
        } else {
            self.cache_hits as f64 / total as f64
        }
    }
}

/// Co-like counts for source items of one partition, with full tables
/// derived on demand from the marginal counts.
pub struct PairCounts<'a> {
    marginals: &'a MarginalTable,
    in_partition: Vec<bool>,
    co_likes: BTreeMap<(ItemId, ItemId), u64>,
}

impl PairCounts<'_> {
    /// The contingency table for an ordered pair. Works for pairs never
    /// liked together (d = 0, remaining cells from the marginals); `None`
    /// when e is outside the partition or the pair is degenerate.
    pub fn table(&self, e: ItemId, h: ItemId) -> Option<ContingencyTable> {
        if e == h || !self.in_partition.get(e as usize).copied().unwrap_or(false) {
            return None;
        }
        let d = self.co_likes.get(&(e, h)).copied().unwrap_or(0);
        Some(derive_table(self.marginals, e, h, d))
    }

    /// Ordered pairs with d >= 1, ascending by (e, h).
    pub fn co_liked(&self) -> impl Iterator<Item = (ItemId, ItemId, u64)> + '_ {
        self.co_likes.iter().map(|(&(e, h), &d)| (e, h, d))
    }
}

fn derive_table(marginals: &MarginalTable, e: ItemId, h: ItemId, d: u64) -> ContingencyTable {
    let n = marginals.n_users();
    let b = marginals.likes(e) - d;
    let c = marginals.likes(h) - d;
    ContingencyTable {
        a: n - b - c - d,
        b,
        c,
        d,
    }
}

/// One pass over the users, tallying co-like counts d for every ordered
/// pair whose source item lies in `partition`.
pub fn count_pairs<'a>(
    train: &PreferenceDataset,
    marginals: &'a MarginalTable,
    partition: &[ItemId],
) -> PairCounts<'a> {
    let mut in_partition = vec![false; train.n_items()];
    for &e in partition {
        in_partition[e as usize] = true;
    }
    let mut co_likes = BTreeMap::new();
    for user in train.users() {
        for &e in &user.liked {
            if !in_partition[e as usize] {
                continue;
            }
            for &h in &user.liked {
                if h != e {
                    *co_likes.entry((e, h)).or_insert(0u64) += 1;
                }
            }
        }
    }
    PairCounts {
        marginals,
        in_partition,
        co_likes,
    }
}

/// Which association list a candidate is being bounded against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ListKind {
    Predict,
    Similar,
}

/// Fast admission check for a candidate pair against a full list: the
/// ML estimate is evaluated on the 16 tables obtained by varying every
/// cell by +-1 (clamped at zero), and the best resulting key is an
/// optimistic stand-in for the posterior point estimate. Returns `true`
/// (evaluate fully) unless even the optimistic key falls below the
/// current f-th best; undefined ML estimates always keep. `fth_best_key`
/// is `None` while the list is not yet full, which always keeps.
pub fn skip_bound(
    table: &ContingencyTable,
    fth_best_key: Option<f64>,
    kind: ListKind,
    omega_0: f64,
) -> bool {
    let Some(fth_best) = fth_best_key else {
        return true;
    };
    let mut best = f64::NEG_INFINITY;
    for bits in 0..16u8 {
        let vary = |cell: u64, bit: u8| -> u64 {
            if bits & (1 << bit) != 0 {
                cell + 1
            } else {
                cell.saturating_sub(1)
            }
        };
        let varied = ContingencyTable {
            a: vary(table.a, 0),
            b: vary(table.b, 1),
            c: vary(table.c, 2),
            d: vary(table.d, 3),
        };
        match woe::ml_woe(&varied) {
            // An undefined estimate cannot bound the posterior.
            None => return true,
            Some(w) => best = best.max(w),
        }
    }
    let optimistic = match kind {
        ListKind::Predict => logistic(best + omega_0),
        ListKind::Similar => best,
    };
    optimistic >= fth_best
}

/// Point estimates stored per ordered pair.
#[derive(Debug, Clone, Copy)]
struct PairEstimates {
    theta_h_given_e: f64,
    omega_eff: f64,
    omega_p05: f64,
}

/// Insert-once memo for posterior point estimates, keyed on the exact
/// count vector. The marginals (and so the thetas) are recoverable from
/// the counts, which is what makes the key sound. First-come capacity,
/// no eviction; accounting may be approximate under concurrency.
struct PosteriorCache {
    map: DashMap<(u64, u64, u64, u64), PairEstimates>,
    capacity: usize,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl PosteriorCache {
    fn new(capacity: usize) -> Self {
        Self {
            map: DashMap::new(),
            capacity,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    fn get_or_compute(
        &self,
        table: &ContingencyTable,
        compute: impl FnOnce() -> Result<PairEstimates, WoeError>,
    ) -> Result<PairEstimates, WoeError> {
        let key = (table.a, table.b, table.c, table.d);
        if let Some(found) = self.map.get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(*found);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let value = compute()?;
        if self.map.len() < self.capacity {
            self.map.insert(key, value);
        }
        Ok(value)
    }
}

/// Bounded keeper of the top-f associations under a (key, popularity,
/// token) ordering. Entries above capacity evict the current worst.
struct TopList<'a> {
    entries: Vec<(f64, Association)>,
    capacity: usize,
    rank: &'a dyn Fn(&Association) -> (u64, std::cmp::Reverse<u32>),
}

impl<'a> TopList<'a> {
    fn new(
        capacity: usize,
        rank: &'a dyn Fn(&Association) -> (u64, std::cmp::Reverse<u32>),
    ) -> Self {
        Self {
            entries: Vec::with_capacity(capacity + 1),
            capacity,
            rank,
        }
    }

    fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    /// Key of the current f-th best entry, valid only when full.
    fn fth_best_key(&self) -> Option<f64> {
        if self.is_full() {
            self.entries.last().map(|(key, _)| *key)
        } else {
            None
        }
    }

    fn push(&mut self, key: f64, assoc: Association) {
        let ord = |a: &(f64, Association), b: &(f64, Association)| {
            b.0.total_cmp(&a.0)
                .then_with(|| (self.rank)(&b.1).cmp(&(self.rank)(&a.1)))
        };
        let pos = self
            .entries
            .binary_search_by(|probe| ord(probe, &(key, assoc)))
            .unwrap_or_else(|p| p);
        self.entries.insert(pos, (key, assoc));
        self.entries.truncate(self.capacity);
    }

    fn into_sorted(self) -> Vec<Association> {
        self.entries.into_iter().map(|(_, a)| a).collect()
    }
}

/// Trains a model; see [`build_model_with_stats`] for the counters.
pub fn build_model(train: &PreferenceDataset, cfg: &TrainConfig) -> Result<CfwModel, TrainError> {
    build_model_with_stats(train, cfg).map(|(model, _)| model)
}

/// Trains a model from every ordered item pair with at least one
/// co-like. Deterministic for a fixed config: partitioning, caching and
/// thread scheduling cannot change the result.
pub fn build_model_with_stats(
    train: &PreferenceDataset,
    cfg: &TrainConfig,
) -> Result<(CfwModel, TrainStats), TrainError> {
    cfg.validate()?;
    let marginals = count_marginals(train)?;
    let n_items = train.n_items();
    let posterior_cfg = cfg.posterior_config();
    let cache = PosteriorCache::new(cfg.cache_capacity);

    // Lexicographic rank of each item token, for deterministic tie-breaks.
    let lex_rank = lexicographic_ranks(train.vocab());
    let rank_of = |assoc: &Association| {
        (
            marginals.likes(assoc.target),
            std::cmp::Reverse(lex_rank[assoc.target as usize]),
        )
    };

    let m = partition_count(cfg, n_items);
    let chunk = n_items.div_ceil(m);
    let mut predict_lists: Vec<Vec<Association>> = vec![Vec::new(); n_items];
    let mut similar_lists: Vec<Vec<Association>> = vec![Vec::new(); n_items];
    let mut stats = TrainStats::default();

    let all_items: Vec<ItemId> = (0..n_items as ItemId).collect();
    for partition in all_items.chunks(chunk.max(1)) {
        let counts = count_pairs(train, &marginals, partition);
        // Group candidates by source item; BTreeMap iteration keeps both
        // the sources and each candidate run ascending.
        let mut per_source: Vec<(ItemId, Vec<(ItemId, u64)>)> = Vec::new();
        for (e, h, d) in counts.co_liked() {
            match per_source.last_mut() {
                Some((source, run)) if *source == e => run.push((h, d)),
                _ => per_source.push((e, vec![(h, d)])),
            }
        }
        stats.pairs_counted += per_source
            .iter()
            .map(|(_, run)| run.len() as u64)
            .sum::<u64>();

        let results: Vec<(ItemId, Vec<Association>, Vec<Association>, TrainStats)> = per_source
            .into_par_iter()
            .map(|(e, run)| {
                let mut local = TrainStats::default();
                let mut predict = TopList::new(cfg.f, &rank_of);
                let mut similar = TopList::new(cfg.f, &rank_of);
                let theta_e = marginals.theta(e);
                for (h, d) in run {
                    let table = derive_table(&marginals, e, h, d);
                    let omega_0 = marginals.omega_0(h);
                    if cfg.skip_bound && predict.is_full() && similar.is_full() {
                        let keep_predict =
                            skip_bound(&table, predict.fth_best_key(), ListKind::Predict, omega_0);
                        let keep_similar =
                            skip_bound(&table, similar.fth_best_key(), ListKind::Similar, omega_0);
                        if !keep_predict && !keep_similar {
                            local.pairs_skipped += 1;
                            continue;
                        }
                    }
                    let estimates = cache.get_or_compute(&table, || {
                        pair_estimates(
                            &posterior_cfg,
                            &table,
                            theta_e,
                            marginals.theta(h),
                            omega_0,
                            cfg.percentile,
                        )
                    });
                    let estimates = match estimates {
                        Ok(est) => est,
                        Err(err) => {
                            log::warn!(
                                "skipping pair ({}, {}): {err}",
                                train.token(e),
                                train.token(h)
                            );
                            local.pairs_infeasible += 1;
                            continue;
                        }
                    };
                    local.pairs_evaluated += 1;
                    let assoc = Association {
                        target: h,
                        theta_h_given_e: estimates.theta_h_given_e,
                        omega_eff: estimates.omega_eff,
                        omega_p05: estimates.omega_p05,
                    };
                    predict.push(assoc.theta_h_given_e, assoc);
                    similar.push(assoc.omega_p05, assoc);
                }
                (e, predict.into_sorted(), similar.into_sorted(), local)
            })
            .collect();

        for (e, predict, similar, local) in results {
            predict_lists[e as usize] = predict;
            similar_lists[e as usize] = similar;
            stats.pairs_evaluated += local.pairs_evaluated;
            stats.pairs_skipped += local.pairs_skipped;
            stats.pairs_infeasible += local.pairs_infeasible;
        }
    }

    stats.cache_hits = cache.hits.load(Ordering::Relaxed);
    stats.cache_misses = cache.misses.load(Ordering::Relaxed);
    let meta = ModelMeta {
        version: MODEL_VERSION,
        seed: cfg.seed,
        n_users: marginals.n_users(),
    };
    let model = CfwModel::new(
        train.vocab().to_vec(),
        marginals,
        predict_lists,
        similar_lists,
        cfg.f,
        meta,
    );
    Ok((model, stats))
}

fn pair_estimates(
    posterior_cfg: &PosteriorConfig,
    table: &ContingencyTable,
    theta_e: f64,
    theta_h: f64,
    omega_0: f64,
    percentile: f64,
) -> Result<PairEstimates, WoeError> {
    let posterior = woe::approximate_posterior_with(posterior_cfg, table, theta_e, theta_h)?;
    let theta_h_given_e = woe::expected_theta_h_given_e(&posterior, omega_0);
    Ok(PairEstimates {
        theta_h_given_e,
        omega_eff: logit(theta_h_given_e) - omega_0,
        omega_p05: woe::percentile_woe(&posterior, percentile),
    })
}

fn partition_count(cfg: &TrainConfig, n_items: usize) -> usize {
    if let Some(m) = cfg.partitions {
        return m.clamp(1, n_items.max(1));
    }
    // One counting pass holds up to |partition| * n_items map entries.
    const BYTES_PER_ENTRY: usize = 48;
    let per_source = n_items.saturating_mul(BYTES_PER_ENTRY).max(1);
    let sources_per_pass = (cfg.pair_budget_bytes / per_source).max(1);
    n_items.div_ceil(sources_per_pass).max(1)
}

fn lexicographic_ranks(vocab: &[String]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..vocab.len() as u32).collect();
    order.sort_by(|&x, &y| vocab[x as usize].cmp(&vocab[y as usize]));
    let mut rank = vec![0u32; vocab.len()];
    for (pos, &item) in order.iter().enumerate() {
        rank[item as usize] = pos as u32;
    }
    rank
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_dataset;

    #[test]
    fn pair_counting_matches_hand_enumeration() {
        let d = parse_dataset("u1\tA B\nu2\tA\nu3\tB\n").unwrap();
        let marginals = count_marginals(&d).unwrap();
        let all: Vec<ItemId> = vec![0, 1];
        let counts = count_pairs(&d, &marginals, &all);
        let (a_id, b_id) = (d.lookup("A").unwrap(), d.lookup("B").unwrap());
        let t = counts.table(a_id, b_id).unwrap();
        assert_eq!((t.a, t.b, t.c, t.d), (0, 1, 1, 1));
    }

    #[test]
    fn never_coliked_pair_still_derives_a_table() {
        let d = parse_dataset("u1\tA\nu2\tB\nu3\tA\n").unwrap();
        let marginals = count_marginals(&d).unwrap();
        let counts = count_pairs(&d, &marginals, &[0, 1]);
        let t = counts
            .table(d.lookup("A").unwrap(), d.lookup("B").unwrap())
            .unwrap();
        assert_eq!((t.a, t.b, t.c, t.d), (0, 2, 1, 0));
        assert_eq!(counts.co_liked().count(), 0);
    }

    #[test]
    fn partitioned_counting_equals_single_pass() {
        let d = parse_dataset("u1\tA B C\nu2\tB C\nu3\tA C\nu4\tB\n").unwrap();
        let marginals = count_marginals(&d).unwrap();
        let whole = count_pairs(&d, &marginals, &[0, 1, 2]);
        for split in [vec![vec![0], vec![1], vec![2]], vec![vec![0, 1], vec![2]]] {
            let mut merged: BTreeMap<(ItemId, ItemId), u64> = BTreeMap::new();
            for part in &split {
                for (e, h, cd) in count_pairs(&d, &marginals, part).co_liked() {
                    merged.insert((e, h), cd);
                }
            }
            let base: BTreeMap<(ItemId, ItemId), u64> =
                whole.co_liked().map(|(e, h, cd)| ((e, h), cd)).collect();
            assert_eq!(merged, base);
        }
    }

    #[test]
    fn skip_bound_keeps_when_list_not_full_or_undefined() {
        let t = ContingencyTable {
            a: 10,
            b: 1,
            c: 1,
            d: 1,
        };
        assert!(skip_bound(&t, None, ListKind::Predict, -2.0));
        // d - 1 hits zero in some variations, so the bound cannot engage.
        assert!(skip_bound(&t, Some(0.999), ListKind::Predict, -2.0));
        assert!(skip_bound(&t, Some(100.0), ListKind::Similar, -2.0));
    }

    #[test]
    fn skip_bound_prunes_clearly_weak_pairs() {
        // Large counts with a weak association: the optimistic ML stays
        // far below a strong f-th best.
        let t = ContingencyTable {
            a: 1_000_000,
            b: 1_000,
            c: 1_000,
            d: 2,
        };
        assert!(!skip_bound(&t, Some(5.0), ListKind::Similar, -3.0));
        assert!(!skip_bound(&t, Some(0.99), ListKind::Predict, -3.0));
        // And keeps pairs comfortably above the bar.
        let strong = ContingencyTable {
            a: 1_000_000,
            b: 200,
            c: 200,
            d: 400,
        };
        assert!(skip_bound(&strong, Some(5.0), ListKind::Similar, -3.0));
    }

    #[test]
    fn two_item_corpus_builds_singleton_lists() {
        let d = parse_dataset("u1\tA B\nu2\tA\nu3\tB\nu4\tA B\n").unwrap();
        let (model, stats) = build_model_with_stats(&d, &TrainConfig::default()).unwrap();
        for e in 0..2usize {
            assert_eq!(model.predict_lists[e].len(), 1);
            assert_eq!(model.similar_lists[e].len(), 1);
            assert_ne!(model.predict_lists[e][0].target as usize, e);
        }
        assert_eq!(stats.pairs_counted, 2);
        assert_eq!(stats.pairs_evaluated, 2);
    }

    #[test]
    fn f_one_keeps_only_the_best_association() {
        let d = parse_dataset("u1\tA B C\nu2\tA B\nu3\tA B\nu4\tA C\nu5\tC\nu6\tB\n").unwrap();
        let cfg = TrainConfig {
            f: 1,
            ..TrainConfig::default()
        };
        let model = build_model(&d, &cfg).unwrap();
        let a = d.lookup("A").unwrap() as usize;
        assert_eq!(model.predict_lists[a].len(), 1);
        // B co-occurs with A three times, C twice; B must win.
        assert_eq!(model.predict_lists[a][0].target, d.lookup("B").unwrap());
    }

    #[test]
    fn lists_are_sorted_and_free_of_self_associations() {
        let d = parse_dataset("u1\tq z y\nu2\tq z\nu3\tq y\nu4\tz y q\nu5\tz\nu6\ty\n").unwrap();
        let model = build_model(&d, &TrainConfig::default()).unwrap();
        for (e, list) in model.predict_lists.iter().enumerate() {
            for pair in list.windows(2) {
                assert!(pair[0].theta_h_given_e >= pair[1].theta_h_given_e);
            }
            for assoc in list {
                assert_ne!(assoc.target as usize, e, "self-association");
            }
        }
        for (e, list) in model.similar_lists.iter().enumerate() {
            for pair in list.windows(2) {
                assert!(pair[0].omega_p05 >= pair[1].omega_p05);
            }
            for assoc in list {
                assert_ne!(assoc.target as usize, e, "self-association");
            }
        }
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let d = parse_dataset("u1\tA B\nu2\tA\n").unwrap();
        for cfg in [
            TrainConfig {
                f: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                percentile: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                partitions: Some(0),
                ..TrainConfig::default()
            },
            TrainConfig {
                prior_lo: 1.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(
                build_model(&d, &cfg),
                Err(TrainError::BadConfig(_))
            ));
        }
    }

    #[test]
    fn auto_partitioning_respects_the_budget() {
        let cfg = TrainConfig {
            pair_budget_bytes: 10_000,
            ..TrainConfig::default()
        };
        // 100 items * 48 bytes = 4800 per source; 2 sources fit.
        assert_eq!(partition_count(&cfg, 100), 50);
        let big = TrainConfig::default();
        assert_eq!(partition_count(&big, 100), 1);
        assert_eq!(
            partition_count(
                &TrainConfig {
                    partitions: Some(8),
                    ..TrainConfig::default()
                },
                3
            ),
            3
        );
    }
}
