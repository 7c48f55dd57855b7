//! Dataset representation, file ingestion, splitting, and synthetic data.
//!
//! A dataset is a list of users, each with a non-empty set of liked item
//! ids, plus an ordered vocabulary of item tokens. All randomness is
//! seeded and per-user streams make splits independent of evaluation
//! order.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::woe;

/// Internal item identifier: index into the dataset vocabulary.
pub type ItemId = u32;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate user id {user_id:?} at line {line}")]
    DuplicateUser { user_id: String, line: usize },
    #[error("dataset needs at least {needed} users, found {found}")]
    TooFewUsers { needed: usize, found: usize },
    #[error("test fraction must lie in (0,1), got {0}")]
    BadFraction(f64),
    #[error("invalid synthetic config: {0}")]
    BadSynthConfig(String),
    #[error(
        "planted omega {omega} is infeasible for pair ({item_e}, {item_h}) \
         with marginals ({theta_e:.6}, {theta_h:.6})"
    )]
    InfeasiblePlant {
        item_e: usize,
        item_h: usize,
        omega: f64,
        theta_e: f64,
        theta_h: f64,
    },
    #[error("synthetic generation produced only empty users; marginals too small")]
    DegenerateSynth,
}

/// One user and the set of items they like, stored as sorted unique ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserRecord {
    pub user_id: String,
    pub liked: Vec<ItemId>,
}

/// Immutable collection of user preference records over a shared vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    users: Vec<UserRecord>,
    vocab: Vec<String>,
    index: HashMap<String, ItemId>,
}

impl PreferenceDataset {
    fn new(users: Vec<UserRecord>, vocab: Vec<String>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as ItemId))
            .collect();
        Self {
            users,
            vocab,
            index,
        }
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.vocab.len()
    }

    pub fn users(&self) -> &[UserRecord] {
        &self.users
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token(&self, item: ItemId) -> &str {
        &self.vocab[item as usize]
    }

    pub fn lookup(&self, token: &str) -> Option<ItemId> {
        self.index.get(token).copied()
    }

    /// Canonical text form: one `user_id<TAB>item item ...` line per user.
    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        for user in &self.users {
            out.push_str(&user.user_id);
            out.push('\t');
            let mut first = true;
            for &item in &user.liked {
                if !first {
                    out.push(' ');
                }
                first = false;
                out.push_str(self.token(item));
            }
            out.push('\n');
        }
        out
    }
}

/// Accumulates users and interns item tokens in first-appearance order.
struct DatasetBuilder {
    users: Vec<UserRecord>,
    seen_users: HashSet<String>,
    vocab: Vec<String>,
    index: HashMap<String, ItemId>,
}

impl DatasetBuilder {
    fn new() -> Self {
        Self {
            users: Vec::new(),
            seen_users: HashSet::new(),
            vocab: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn intern(&mut self, token: &str) -> ItemId {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.vocab.len() as ItemId;
        self.vocab.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Adds a user; items are deduplicated. Users left with no items are
    /// dropped with a warning (the prediction task is undefined for them).
    fn push_user(&mut self, user_id: &str, items: impl Iterator<Item = ItemId>) {
        let liked: BTreeSet<ItemId> = items.collect();
        if liked.is_empty() {
            log::warn!("dropping user {user_id:?}: no liked items after parsing");
            return;
        }
        self.users.push(UserRecord {
            user_id: user_id.to_string(),
            liked: liked.into_iter().collect(),
        });
    }

    fn finish(self) -> PreferenceDataset {
        PreferenceDataset {
            users: self.users,
            vocab: self.vocab,
            index: self.index,
        }
    }
}

/// Loads a dataset file. Two layouts are accepted: the canonical
/// `user_id<TAB>item item ...` line per user, and a `user_id,item_id`
/// pair per line, which is grouped on load. Blank lines and lines
/// starting with `#` are skipped; the layout is sniffed from the first
/// data line.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<PreferenceDataset, CorpusError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text)
}

/// Parses dataset text; see [`load_dataset`] for the accepted layouts.
pub fn parse_dataset(text: &str) -> Result<PreferenceDataset, CorpusError> {
    let mut builder = DatasetBuilder::new();
    let mut layout: Option<bool> = None; // true = canonical tab layout
                                         // CSV layout groups non-adjacent lines of one user; collect first.
    let mut csv_users: Vec<String> = Vec::new();
    let mut csv_items: HashMap<String, Vec<ItemId>> = HashMap::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches(['\r']);
        let lineno = lineno + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let canonical = *layout.get_or_insert_with(|| line.contains('\t'));
        if canonical {
            let (user_id, items) = line.split_once('\t').ok_or_else(|| CorpusError::Parse {
                line: lineno,
                reason: "expected `user_id<TAB>item item ...`".to_string(),
            })?;
            let user_id = user_id.trim();
            if user_id.is_empty() {
                return Err(CorpusError::Parse {
                    line: lineno,
                    reason: "empty user id".to_string(),
                });
            }
            if !builder.seen_users.insert(user_id.to_string()) {
                return Err(CorpusError::DuplicateUser {
                    user_id: user_id.to_string(),
                    line: lineno,
                });
            }
            let ids: Vec<ItemId> = items
                .split_whitespace()
                .map(|t| builder.intern(t))
                .collect();
            builder.push_user(user_id, ids.into_iter());
        } else {
            let (user_id, item) = line.split_once(',').ok_or_else(|| CorpusError::Parse {
                line: lineno,
                reason: "expected `user_id,item_id` or `user_id<TAB>item ...`".to_string(),
            })?;
            let (user_id, item) = (user_id.trim(), item.trim());
            if user_id.is_empty() || item.is_empty() {
                return Err(CorpusError::Parse {
                    line: lineno,
                    reason: "empty user id or item id".to_string(),
                });
            }
            let id = builder.intern(item);
            if !csv_items.contains_key(user_id) {
                csv_users.push(user_id.to_string());
            }
            csv_items.entry(user_id.to_string()).or_default().push(id);
        }
    }
    for user_id in csv_users {
        let items = csv_items.remove(&user_id).unwrap_or_default();
        builder.push_user(&user_id, items.into_iter());
    }
    Ok(builder.finish())
}

/// Writes a dataset in the canonical tab layout.
pub fn save_dataset(
    dataset: &PreferenceDataset,
    path: impl AsRef<Path>,
) -> Result<(), CorpusError> {
    let path = path.as_ref();
    std::fs::write(path, dataset.to_canonical_string()).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Evaluation protocol for partitioning one user's liked items into a
/// query (model input) and a held-out measurement set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Query holds exactly `k` sampled items; the rest are measured.
    GivenK(usize),
    /// One held-out measurement item; the query holds the rest.
    AllBut1,
}

/// Seeded protocol specification shared by every user of one experiment.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub seed: u64,
    pub protocol: Protocol,
}

/// Query/measurement split for one user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySplit {
    pub query: Vec<ItemId>,
    pub measurement: Vec<ItemId>,
}

/// Splits users into disjoint train and test sets. The test set holds
/// `round(test_fraction * n)` users, capped so the train set stays
/// non-empty; user order within each half is preserved.
pub fn split_train_test(
    dataset: &PreferenceDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(PreferenceDataset, PreferenceDataset), CorpusError> {
    if dataset.n_users() < 2 {
        return Err(CorpusError::TooFewUsers {
            needed: 2,
            found: dataset.n_users(),
        });
    }
    if test_fraction <= 0.0 || test_fraction >= 1.0 || test_fraction.is_nan() {
        return Err(CorpusError::BadFraction(test_fraction));
    }
    let n = dataset.n_users();
    let n_test = ((test_fraction * n as f64).round() as usize).min(n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let mut in_test = vec![false; n];
    for &i in order.iter().take(n_test) {
        in_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, user) in dataset.users.iter().enumerate() {
        if in_test[i] {
            test.push(user.clone());
        } else {
            train.push(user.clone());
        }
    }
    Ok((
        PreferenceDataset::new(train, dataset.vocab.clone()),
        PreferenceDataset::new(test, dataset.vocab.clone()),
    ))
}

/// Splits one user's liked items per the protocol, or returns `None`
/// when the user has too few items. `stream` selects an independent
/// random stream off the spec seed, so per-user splits do not depend on
/// the order users are processed in.
pub fn split_query_measurement(
    user: &UserRecord,
    spec: &SplitSpec,
    stream: u64,
) -> Option<QuerySplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    split_with_eligible(&user.liked, &user.liked, spec.protocol, &mut rng)
}

/// Protocol split where query items may only be drawn from `eligible`
/// (a subset of `liked`); measurement items come from all of `liked`.
pub fn split_with_eligible(
    liked: &[ItemId],
    eligible: &[ItemId],
    protocol: Protocol,
    rng: &mut impl Rng,
) -> Option<QuerySplit> {
    match protocol {
        Protocol::GivenK(k) => {
            if k == 0 || liked.len() < k + 1 || eligible.len() < k {
                return None;
            }
            let picks = rand::seq::index::sample(rng, eligible.len(), k);
            let mut query: Vec<ItemId> = picks.iter().map(|i| eligible[i]).collect();
            query.sort_unstable();
            let measurement: Vec<ItemId> = liked
                .iter()
                .copied()
                .filter(|item| query.binary_search(item).is_err())
                .collect();
            Some(QuerySplit { query, measurement })
        }
        Protocol::AllBut1 => {
            if liked.len() < 2 {
                return None;
            }
            let eligible_set: BTreeSet<ItemId> = eligible.iter().copied().collect();
            let off: Vec<ItemId> = liked
                .iter()
                .copied()
                .filter(|item| !eligible_set.contains(item))
                .collect();
            let held_out = match off.len() {
                0 => liked[rng.gen_range(0..liked.len())],
                // A single off-eligible item must be the held-out one for
                // the query to stay all-eligible.
                1 => off[0],
                _ => return None,
            };
            let query: Vec<ItemId> = liked.iter().copied().filter(|&i| i != held_out).collect();
            Some(QuerySplit {
                query,
                measurement: vec![held_out],
            })
        }
    }
}

/// A pair of items generated with a fixed true weight of evidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedPair {
    pub item_e: usize,
    pub item_h: usize,
    pub omega: f64,
}

/// Configuration for the synthetic dataset generator.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    /// Item marginals decay as rank^(-zipf_exponent).
    pub zipf_exponent: f64,
    /// Marginals are rescaled so the expected liked-set size is this.
    pub mean_items_per_user: f64,
    pub planted: Vec<PlantedPair>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n_users: usize, n_items: usize) -> Self {
        Self {
            n_users,
            n_items,
            zipf_exponent: 1.0,
            mean_items_per_user: 4.0,
            planted: Vec::new(),
            seed: 0,
        }
    }
}

/// The per-item like probabilities implied by a synthetic config:
/// `theta_r ∝ rank^(-zipf_exponent)`, rescaled to the configured mean
/// liked-set size.
pub fn item_thetas(cfg: &SynthConfig) -> Result<Vec<f64>, CorpusError> {
    if cfg.n_items == 0 || cfg.n_users == 0 {
        return Err(CorpusError::BadSynthConfig(
            "n_users and n_items must be positive".to_string(),
        ));
    }
    if cfg.zipf_exponent <= 0.0 || cfg.zipf_exponent.is_nan() {
        return Err(CorpusError::BadSynthConfig(format!(
            "zipf exponent must be > 0, got {}",
            cfg.zipf_exponent
        )));
    }
    if cfg.mean_items_per_user <= 0.0 || cfg.mean_items_per_user.is_nan() {
        return Err(CorpusError::BadSynthConfig(format!(
            "mean items per user must be > 0, got {}",
            cfg.mean_items_per_user
        )));
    }
    let z: f64 = (1..=cfg.n_items)
        .map(|r| (r as f64).powf(-cfg.zipf_exponent))
        .sum();
    let scale = cfg.mean_items_per_user / z;
    let thetas: Vec<f64> = (1..=cfg.n_items)
        .map(|r| scale * (r as f64).powf(-cfg.zipf_exponent))
        .collect();
    if thetas[0] >= 1.0 {
        return Err(CorpusError::BadSynthConfig(format!(
            "top item marginal {:.4} >= 1; lower mean_items_per_user or add items",
            thetas[0]
        )));
    }
    Ok(thetas)
}

/// Generates a synthetic dataset: items are liked independently with
/// Zipf-decaying marginals, except planted pairs, which are sampled
/// jointly from the 2x2 cell probabilities implied by their omega.
/// Deterministic under the config seed.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<PreferenceDataset, CorpusError> {
    let thetas = item_thetas(cfg)?;
    let mut planted_of: HashMap<usize, usize> = HashMap::new();
    for (i, pair) in cfg.planted.iter().enumerate() {
        if pair.item_e >= cfg.n_items || pair.item_h >= cfg.n_items || pair.item_e == pair.item_h {
            return Err(CorpusError::BadSynthConfig(format!(
                "planted pair ({}, {}) out of range or degenerate",
                pair.item_e, pair.item_h
            )));
        }
        for item in [pair.item_e, pair.item_h] {
            if planted_of.insert(item, i).is_some() {
                return Err(CorpusError::BadSynthConfig(format!(
                    "item {item} appears in more than one planted pair"
                )));
            }
        }
    }
    // Joint cell probabilities per planted pair, as cumulative
    // [neither, e only, h only, both].
    let mut pair_cells: Vec<[f64; 4]> = Vec::with_capacity(cfg.planted.len());
    for pair in &cfg.planted {
        let (te, th) = (thetas[pair.item_e], thetas[pair.item_h]);
        let cond = woe::solve_conditionals(pair.omega, te, th).map_err(|_| {
            CorpusError::InfeasiblePlant {
                item_e: pair.item_e,
                item_h: pair.item_h,
                omega: pair.omega,
                theta_e: te,
                theta_h: th,
            }
        })?;
        let mut cum = [0.0; 4];
        let cells = [
            cond.joint_neither,
            cond.joint_e_not_h,
            cond.joint_not_e_h,
            cond.joint_eh,
        ];
        let mut acc = 0.0;
        for (slot, cell) in cum.iter_mut().zip(cells) {
            acc += cell;
            *slot = acc;
        }
        pair_cells.push(cum);
    }

    let item_width = digits(cfg.n_items.saturating_sub(1)).max(4);
    let user_width = digits(cfg.n_users.saturating_sub(1)).max(4);
    let vocab: Vec<String> = (0..cfg.n_items)
        .map(|i| format!("i{i:0item_width$}"))
        .collect();
    let unplanted: Vec<usize> = (0..cfg.n_items)
        .filter(|i| !planted_of.contains_key(i))
        .collect();

    let mut users = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u as u64);
        let mut liked = BTreeSet::new();
        let mut attempts = 0usize;
        loop {
            liked.clear();
            for (pair, cum) in cfg.planted.iter().zip(&pair_cells) {
                let r: f64 = rng.gen();
                if r >= cum[2] {
                    liked.insert(pair.item_e as ItemId);
                    liked.insert(pair.item_h as ItemId);
                } else if r >= cum[1] {
                    liked.insert(pair.item_h as ItemId);
                } else if r >= cum[0] {
                    liked.insert(pair.item_e as ItemId);
                }
            }
            for &i in &unplanted {
                if rng.gen::<f64>() < thetas[i] {
                    liked.insert(i as ItemId);
                }
            }
            if !liked.is_empty() {
                break;
            }
            attempts += 1;
            if attempts >= 10_000 {
                return Err(CorpusError::DegenerateSynth);
            }
        }
        let mut user_id = String::new();
        write!(user_id, "u{u:0user_width$}").expect("write to string");
        users.push(UserRecord {
            user_id,
            liked: liked.into_iter().collect(),
        });
    }
    Ok(PreferenceDataset::new(users, vocab))
}

fn digits(mut n: usize) -> usize {
    let mut d = 1;
    while n >= 10 {
        n /= 10;
        d += 1;
    }
    d
}
