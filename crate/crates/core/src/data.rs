//! Interaction ingestion, k-core filtering, per-user splitting and
//! mini-batch candidate sampling.
//!
//! Raw identifiers are mapped to dense indices in first-seen order. After
//! [`split`] the store is immutable; batch sampling only needs `&SplitStore`
//! plus a caller-owned RNG stream.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type UserIdx = u32;
pub type ItemIdx = u32;

/// Rejected in-batch draws tolerated per candidate slot before falling back
/// to the full item universe.
pub const IN_BATCH_REJECTIONS_PER_SLOT: usize = 50;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected at least 2 columns, found {found}")]
    ShortRow { line: usize, found: usize },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("atomic header must contain user_id and item_id fields, got {0:?}")]
    AtomicHeader(String),
    #[error("empty dataset")]
    Empty,
    #[error("k-core filter with min_interactions={0} removed every interaction")]
    FilterEmptied(usize),
    #[error("invalid split ratios {0:?}: each must be >= 0 and they must sum to 1")]
    BadRatios((f64, f64, f64)),
    #[error("invalid sampling request: {0}")]
    BadSampling(String),
    #[error("no pair in the batch can form a candidate set of size {k}")]
    BatchUnformable { k: usize },
    #[error("{0}")]
    Manifest(String),
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// One raw implicit-feedback record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user_raw: String,
    pub item_raw: String,
    pub timestamp: Option<i64>,
}

/// Bijection between raw identifiers and dense indices `0..len`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    raw: Vec<String>,
    index: HashMap<String, u32>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_insert(&mut self, raw: &str) -> u32 {
        if let Some(&idx) = self.index.get(raw) {
            return idx;
        }
        let idx = self.raw.len() as u32;
        self.raw.push(raw.to_owned());
        self.index.insert(raw.to_owned(), idx);
        idx
    }

    pub fn index_of(&self, raw: &str) -> Option<u32> {
        self.index.get(raw).copied()
    }

    pub fn raw_of(&self, idx: u32) -> Option<&str> {
        self.raw.get(idx as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.raw.iter().enumerate().map(|(i, r)| (i as u32, r.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Delimiter {
    /// Tab if the first line contains one, else comma, else runs of whitespace.
    #[default]
    Auto,
    Tab,
    Comma,
    Whitespace,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct InputFormat {
    pub delimiter: Delimiter,
    /// RecBole atomic `.inter` file: mandatory `field:type` header, tab separated.
    pub atomic: bool,
}

impl InputFormat {
    pub fn atomic() -> Self {
        InputFormat {
            delimiter: Delimiter::Tab,
            atomic: true,
        }
    }
}

/// Deduplicated interactions with dense ID maps, not yet split.
#[derive(Debug, Clone)]
pub struct InteractionStore {
    users: IdMap,
    items: IdMap,
    records: Vec<(UserIdx, ItemIdx)>,
    timestamps: Vec<Option<i64>>,
}

impl InteractionStore {
    /// Builds a store from raw records, dropping repeated (user, item) pairs
    /// and keeping the first occurrence.
    pub fn from_interactions<I>(rows: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = Interaction>,
    {
        let mut users = IdMap::new();
        let mut items = IdMap::new();
        let mut seen = std::collections::HashSet::new();
        let mut records = Vec::new();
        let mut timestamps = Vec::new();
        for row in rows {
            let u = users.get_or_insert(&row.user_raw);
            let i = items.get_or_insert(&row.item_raw);
            if seen.insert((u, i)) {
                records.push((u, i));
                timestamps.push(row.timestamp);
            }
        }
        if records.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(InteractionStore {
            users,
            items,
            records,
            timestamps,
        })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.records.len()
    }

    pub fn users(&self) -> &IdMap {
        &self.users
    }

    pub fn items(&self) -> &IdMap {
        &self.items
    }

    pub fn records(&self) -> &[(UserIdx, ItemIdx)] {
        &self.records
    }

    pub fn interaction(&self, n: usize) -> Option<Interaction> {
        let &(u, i) = self.records.get(n)?;
        Some(Interaction {
            user_raw: self.users.raw_of(u)?.to_owned(),
            item_raw: self.items.raw_of(i)?.to_owned(),
            timestamp: self.timestamps[n],
        })
    }

    /// Fraction of the user-item matrix with no interaction.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.n_interactions() as f64 / (self.n_users() as f64 * self.n_items() as f64)
    }
}

fn looks_numeric(field: &str) -> bool {
    field.trim().parse::<f64>().is_ok()
}

fn split_fields(line: &str, delimiter: Delimiter) -> Vec<&str> {
    match delimiter {
        Delimiter::Tab => line.split('\t').collect(),
        Delimiter::Comma => line.split(',').collect(),
        Delimiter::Whitespace | Delimiter::Auto => line.split_whitespace().collect(),
    }
}

fn parse_timestamp(field: &str) -> Option<i64> {
    let f = field.trim();
    f.parse::<i64>()
        .ok()
        .or_else(|| f.parse::<f64>().ok().filter(|v| v.is_finite()).map(|v| v as i64))
}

/// Parses delimiter-separated interactions from any reader.
///
/// Columns are `user, item[, rating][, timestamp]`. Without `atomic`, the
/// first row is treated as a header when none of its fields is numeric.
pub fn parse_interactions<R: Read>(reader: R, format: InputFormat) -> Result<InteractionStore, DataError> {
    let reader = BufReader::new(reader);
    let mut delimiter = format.delimiter;
    let mut columns = (0usize, 1usize, Some(3usize));
    let mut rows = Vec::new();
    let mut first = true;
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| DataError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        if delimiter == Delimiter::Auto {
            delimiter = if line.contains('\t') {
                Delimiter::Tab
            } else if line.contains(',') {
                Delimiter::Comma
            } else {
                Delimiter::Whitespace
            };
        }
        let fields = split_fields(line, delimiter);
        if first {
            first = false;
            if format.atomic {
                columns = atomic_columns(&fields).ok_or_else(|| DataError::AtomicHeader(line.to_owned()))?;
                continue;
            }
            if !fields.iter().any(|f| looks_numeric(f)) {
                continue;
            }
        }
        let needed = columns.0.max(columns.1) + 1;
        if fields.len() < needed.max(2) {
            return Err(DataError::ShortRow {
                line: line_no,
                found: fields.len(),
            });
        }
        let user = fields[columns.0].trim();
        let item = fields[columns.1].trim();
        if user.is_empty() || item.is_empty() {
            return Err(DataError::Malformed {
                line: line_no,
                message: "empty user or item identifier".into(),
            });
        }
        let timestamp = columns.2.and_then(|c| fields.get(c)).and_then(|f| parse_timestamp(f));
        rows.push(Interaction {
            user_raw: user.to_owned(),
            item_raw: item.to_owned(),
            timestamp,
        });
    }
    InteractionStore::from_interactions(rows)
}

fn atomic_columns(header: &[&str]) -> Option<(usize, usize, Option<usize>)> {
    let find = |name: &str| {
        header
            .iter()
            .position(|f| f.trim().split(':').next() == Some(name))
    };
    Some((find("user_id")?, find("item_id")?, find("timestamp")))
}

/// Reads an interaction file from disk.
pub fn load_interactions(path: &Path, format: InputFormat) -> Result<InteractionStore, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    parse_interactions(file, format)
}

/// Iteratively drops users and items with fewer than `min_interactions`
/// records until nothing changes, then re-densifies the ID maps.
pub fn kcore_filter(store: &InteractionStore, min_interactions: usize) -> Result<InteractionStore, DataError> {
    if min_interactions <= 1 {
        return Ok(store.clone());
    }
    let mut alive = vec![true; store.records.len()];
    loop {
        let mut user_deg = vec![0usize; store.n_users()];
        let mut item_deg = vec![0usize; store.n_items()];
        for (n, &(u, i)) in store.records.iter().enumerate() {
            if alive[n] {
                user_deg[u as usize] += 1;
                item_deg[i as usize] += 1;
            }
        }
        let mut removed = false;
        for (n, &(u, i)) in store.records.iter().enumerate() {
            if alive[n] && (user_deg[u as usize] < min_interactions || item_deg[i as usize] < min_interactions) {
                alive[n] = false;
                removed = true;
            }
        }
        if !removed {
            break;
        }
    }
    let rows = (0..store.records.len())
        .filter(|&n| alive[n])
        .filter_map(|n| store.interaction(n));
    InteractionStore::from_interactions(rows).map_err(|e| match e {
        DataError::Empty => DataError::FilterEmptied(min_interactions),
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<(), DataError> {
        let all = [self.train, self.valid, self.test];
        let ok = all.iter().all(|r| r.is_finite() && *r >= 0.0) && ((all.iter().sum::<f64>()) - 1.0).abs() < 1e-9;
        if ok {
            Ok(())
        } else {
            Err(DataError::BadRatios((self.train, self.valid, self.test)))
        }
    }

    /// (train, valid, test) sizes for a user with `n` interactions.
    ///
    /// Users with fewer than 3 interactions keep everything in train; above
    /// that, each held-out part gets `max(1, floor(ratio * n))` when its ratio
    /// is positive and train takes the rest.
    pub fn partition_sizes(&self, n: usize) -> (usize, usize, usize) {
        if n < 3 {
            return (n, 0, 0);
        }
        let held = |r: f64| {
            if r > 0.0 {
                ((r * n as f64).floor() as usize).max(1)
            } else {
                0
            }
        };
        let test = held(self.test);
        let valid = held(self.valid);
        (n - test - valid, valid, test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Valid,
    Test,
}

impl SplitPart {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Valid => "valid",
            SplitPart::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitPart {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitPart::Train),
            "valid" => Ok(SplitPart::Valid),
            "test" => Ok(SplitPart::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Split interactions: per-user sorted train/valid/test item lists.
#[derive(Debug, Clone)]
pub struct SplitStore {
    users: IdMap,
    items: IdMap,
    train: Vec<Vec<ItemIdx>>,
    valid: Vec<Vec<ItemIdx>>,
    test: Vec<Vec<ItemIdx>>,
    train_pairs: Vec<(UserIdx, ItemIdx)>,
}

/// Randomly partitions every user's interactions into train/valid/test.
pub fn split(store: &InteractionStore, ratios: SplitRatios, seed: u64) -> Result<SplitStore, DataError> {
    ratios.validate()?;
    let mut per_user: Vec<Vec<ItemIdx>> = vec![Vec::new(); store.n_users()];
    for &(u, i) in &store.records {
        per_user[u as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(per_user.len());
    let mut valid = Vec::with_capacity(per_user.len());
    let mut test = Vec::with_capacity(per_user.len());
    for mut items in per_user {
        items.sort_unstable();
        items.shuffle(&mut rng);
        let (_, n_valid, n_test) = ratios.partition_sizes(items.len());
        let mut te: Vec<ItemIdx> = items[..n_test].to_vec();
        let mut va: Vec<ItemIdx> = items[n_test..n_test + n_valid].to_vec();
        let mut tr: Vec<ItemIdx> = items[n_test + n_valid..].to_vec();
        te.sort_unstable();
        va.sort_unstable();
        tr.sort_unstable();
        train.push(tr);
        valid.push(va);
        test.push(te);
    }
    SplitStore::from_parts(store.users.clone(), store.items.clone(), train, valid, test)
}

impl SplitStore {
    /// Assembles a split store from per-user lists (sorted internally).
    pub fn from_parts(
        users: IdMap,
        items: IdMap,
        mut train: Vec<Vec<ItemIdx>>,
        mut valid: Vec<Vec<ItemIdx>>,
        mut test: Vec<Vec<ItemIdx>>,
    ) -> Result<Self, DataError> {
        let n_users = users.len();
        let n_items = items.len() as u32;
        if train.len() != n_users || valid.len() != n_users || test.len() != n_users {
            return Err(DataError::Manifest("per-user list count does not match user map".into()));
        }
        for lists in [&mut train, &mut valid, &mut test] {
            for l in lists.iter_mut() {
                l.sort_unstable();
                if l.windows(2).any(|w| w[0] == w[1]) {
                    return Err(DataError::Manifest("duplicate item within a user split".into()));
                }
                if l.iter().any(|&i| i >= n_items) {
                    return Err(DataError::Manifest("item index out of range".into()));
                }
            }
        }
        for u in 0..n_users {
            if train[u].is_empty() {
                return Err(DataError::Manifest(format!("user {u} has no train interactions")));
            }
            let overlaps = valid[u].iter().chain(&test[u]).any(|i| train[u].binary_search(i).is_ok())
                || valid[u].iter().any(|i| test[u].binary_search(i).is_ok());
            if overlaps {
                return Err(DataError::Manifest(format!("user {u} has overlapping splits")));
            }
        }
        let train_pairs = train
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u as UserIdx, i)))
            .collect();
        Ok(SplitStore {
            users,
            items,
            train,
            valid,
            test,
            train_pairs,
        })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn users(&self) -> &IdMap {
        &self.users
    }

    pub fn items(&self) -> &IdMap {
        &self.items
    }

    pub fn part(&self, part: SplitPart, u: UserIdx) -> &[ItemIdx] {
        let lists = match part {
            SplitPart::Train => &self.train,
            SplitPart::Valid => &self.valid,
            SplitPart::Test => &self.test,
        };
        &lists[u as usize]
    }

    pub fn train(&self, u: UserIdx) -> &[ItemIdx] {
        &self.train[u as usize]
    }

    pub fn is_train_positive(&self, u: UserIdx, i: ItemIdx) -> bool {
        self.train[u as usize].binary_search(&i).is_ok()
    }

    /// All (user, item) train pairs, user-major.
    pub fn train_pairs(&self) -> &[(UserIdx, ItemIdx)] {
        &self.train_pairs
    }

    pub fn count(&self, part: SplitPart) -> usize {
        (0..self.n_users() as UserIdx).map(|u| self.part(part, u).len()).sum()
    }

    pub fn n_interactions(&self) -> usize {
        self.count(SplitPart::Train) + self.count(SplitPart::Valid) + self.count(SplitPart::Test)
    }

    /// Split manifest: one `user_idx\titem_idx\tsplit` line per interaction.
    pub fn write_manifest<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for u in 0..self.n_users() as UserIdx {
            for part in [SplitPart::Train, SplitPart::Valid, SplitPart::Test] {
                for &i in self.part(part, u) {
                    writeln!(out, "{u}\t{i}\t{}", part.as_str())?;
                }
            }
        }
        Ok(())
    }

    /// Parses a manifest produced by [`SplitStore::write_manifest`].
    pub fn read_manifest<R: Read>(reader: R, users: IdMap, items: IdMap) -> Result<Self, DataError> {
        let n_users = users.len();
        let mut train = vec![Vec::new(); n_users];
        let mut valid = vec![Vec::new(); n_users];
        let mut test = vec![Vec::new(); n_users];
        for (n, line) in BufReader::new(reader).lines().enumerate() {
            let line = line.map_err(|e| DataError::Manifest(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| DataError::Malformed {
                line: n + 1,
                message: m.to_owned(),
            };
            let mut fields = line.split('\t');
            let u: usize = fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| bad("bad user index"))?;
            let i: ItemIdx = fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| bad("bad item index"))?;
            let part: SplitPart = fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| bad("bad split name"))?;
            if u >= n_users {
                return Err(bad("user index out of range"));
            }
            match part {
                SplitPart::Train => train[u].push(i),
                SplitPart::Valid => valid[u].push(i),
                SplitPart::Test => test[u].push(i),
            }
        }
        SplitStore::from_parts(users, items, train, valid, test)
    }
}

/// Summary written next to a prepared dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub sparsity: f64,
    pub raw_users: usize,
    pub raw_items: usize,
    pub raw_interactions: usize,
    pub min_core: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

pub const MANIFEST_FILE: &str = "split.tsv";
pub const STATS_FILE: &str = "stats.json";
pub const USERS_FILE: &str = "users.tsv";
pub const ITEMS_FILE: &str = "items.tsv";

fn write_id_map(path: &Path, map: &IdMap) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (idx, raw) in map.iter() {
        writeln!(out, "{idx}\t{raw}").map_err(|e| DataError::io(path, e))?;
    }
    out.flush().map_err(|e| DataError::io(path, e))
}

fn read_id_map(path: &Path) -> Result<IdMap, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut map = IdMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (idx, raw) = line.split_once('\t').ok_or_else(|| DataError::Malformed {
            line: n + 1,
            message: format!("{}: expected `idx<TAB>raw`", path.display()),
        })?;
        let idx: u32 = idx.parse().map_err(|_| DataError::Malformed {
            line: n + 1,
            message: format!("{}: bad index", path.display()),
        })?;
        if map.get_or_insert(raw) != idx {
            return Err(DataError::Manifest(format!("{}: indices not dense", path.display())));
        }
    }
    Ok(map)
}

/// Writes manifest, ID maps and stats into `dir`.
pub fn write_prepared(dir: &Path, store: &SplitStore, stats: &DatasetStats) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    let file = File::create(&manifest).map_err(|e| DataError::io(&manifest, e))?;
    let mut out = BufWriter::new(file);
    store
        .write_manifest(&mut out)
        .and_then(|_| out.flush())
        .map_err(|e| DataError::io(&manifest, e))?;
    write_id_map(&dir.join(USERS_FILE), store.users())?;
    write_id_map(&dir.join(ITEMS_FILE), store.items())?;
    let stats_path = dir.join(STATS_FILE);
    let json = serde_json::to_string_pretty(stats).expect("stats serialize");
    fs::write(&stats_path, json + "\n").map_err(|e| DataError::io(&stats_path, e))
}

/// Loads a directory written by [`write_prepared`].
pub fn read_prepared(dir: &Path) -> Result<(SplitStore, DatasetStats), DataError> {
    let stats_path = dir.join(STATS_FILE);
    let stats_text = fs::read_to_string(&stats_path).map_err(|e| DataError::io(&stats_path, e))?;
    let stats: DatasetStats =
        serde_json::from_str(&stats_text).map_err(|e| DataError::Manifest(format!("{}: {e}", stats_path.display())))?;
    let users = read_id_map(&dir.join(USERS_FILE))?;
    let items = read_id_map(&dir.join(ITEMS_FILE))?;
    if users.len() != stats.n_users || items.len() != stats.n_items {
        return Err(DataError::Manifest("ID maps disagree with stats.json".into()));
    }
    let manifest = dir.join(MANIFEST_FILE);
    let file = File::open(&manifest).map_err(|e| DataError::io(&manifest, e))?;
    let store = SplitStore::read_manifest(file, users, items)?;
    Ok((store, stats))
}

/// A training mini-batch: `(user, positive)` pairs and, per pair, the
/// candidate set `M` with the positive at index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub pairs: Vec<(UserIdx, ItemIdx)>,
    pub candidates: Vec<Vec<ItemIdx>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The item perturbed to build the noisy triple of pair `n`.
    pub fn noise_anchor(&self, n: usize) -> ItemIdx {
        self.pairs[n].1
    }
}

fn can_form(store: &SplitStore, u: UserIdx, k: usize) -> bool {
    store.n_items() - store.train(u).len() >= k - 1
}

fn check_k(store: &SplitStore, k: usize) -> Result<(), DataError> {
    if k < 2 || k > store.n_items() {
        return Err(DataError::BadSampling(format!(
            "k={k} must lie in [2, n_items={}]",
            store.n_items()
        )));
    }
    Ok(())
}

fn fill_candidates<R: Rng + ?Sized>(
    store: &SplitStore,
    u: UserIdx,
    positive: ItemIdx,
    pool: &[ItemIdx],
    k: usize,
    rng: &mut R,
) -> Vec<ItemIdx> {
    let mut m = Vec::with_capacity(k);
    m.push(positive);
    let eligible = |m: &[ItemIdx], c: ItemIdx| !store.is_train_positive(u, c) && !m.contains(&c);

    let mut rejected = 0;
    while m.len() < k && rejected < IN_BATCH_REJECTIONS_PER_SLOT * k {
        let c = pool[rng.random_range(0..pool.len())];
        if eligible(&m, c) {
            m.push(c);
        } else {
            rejected += 1;
        }
    }

    let n_items = store.n_items() as ItemIdx;
    let mut rejected = 0;
    while m.len() < k && rejected < IN_BATCH_REJECTIONS_PER_SLOT * k {
        let c = rng.random_range(0..n_items);
        if eligible(&m, c) {
            m.push(c);
        } else {
            rejected += 1;
        }
    }
    if m.len() < k {
        // Dense user: enumerate what is left and draw without replacement.
        let mut rest: Vec<ItemIdx> = (0..n_items).filter(|&c| eligible(&m, c)).collect();
        let need = k - m.len();
        let (picked, _) = rest.partial_shuffle(rng, need);
        m.extend_from_slice(picked);
    }
    m
}

/// Builds candidate sets for the given pairs. Pairs whose user has fewer
/// than `k - 1` non-positive items are dropped.
pub fn build_batch<R: Rng + ?Sized>(
    store: &SplitStore,
    pairs: &[(UserIdx, ItemIdx)],
    k: usize,
    rng: &mut R,
) -> Result<Batch, DataError> {
    check_k(store, k)?;
    let kept: Vec<(UserIdx, ItemIdx)> = pairs.iter().copied().filter(|&(u, _)| can_form(store, u, k)).collect();
    if kept.is_empty() {
        return Err(DataError::BatchUnformable { k });
    }
    let pool: Vec<ItemIdx> = kept.iter().map(|&(_, i)| i).collect();
    let candidates = kept
        .iter()
        .map(|&(u, i)| fill_candidates(store, u, i, &pool, k, rng))
        .collect();
    Ok(Batch {
        pairs: kept,
        candidates,
    })
}

/// Draws `batch_size` train pairs uniformly (with replacement) and builds
/// their candidate sets from the batch's own positives.
pub fn sample_batch<R: Rng + ?Sized>(
    store: &SplitStore,
    batch_size: usize,
    k: usize,
    rng: &mut R,
) -> Result<Batch, DataError> {
    if batch_size == 0 {
        return Err(DataError::BadSampling("batch size must be >= 1".into()));
    }
    check_k(store, k)?;
    let all = store.train_pairs();
    if !all.iter().any(|&(u, _)| can_form(store, u, k)) {
        return Err(DataError::BatchUnformable { k });
    }
    let mut pairs = Vec::with_capacity(batch_size);
    while pairs.len() < batch_size {
        let p = all[rng.random_range(0..all.len())];
        if can_form(store, p.0, k) {
            pairs.push(p);
        }
    }
    build_batch(store, &pairs, k, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(pairs: &[(&str, &str)]) -> Vec<Interaction> {
        pairs
            .iter()
            .map(|(u, i)| Interaction {
                user_raw: u.to_string(),
                item_raw: i.to_string(),
                timestamp: None,
            })
            .collect()
    }

    fn store_of(pairs: &[(&str, &str)]) -> InteractionStore {
        InteractionStore::from_interactions(rows(pairs)).unwrap()
    }

    #[test]
    fn duplicate_rows_are_dropped() {
        let text = "1\t10\t5\t100\n1\t11\t3\t101\n1\t10\t4\t102\n2\t10\t1\t103\n";
        let s = parse_interactions(text.as_bytes(), InputFormat::default()).unwrap();
        assert_eq!(s.n_interactions(), 3);
        assert_eq!(s.n_users(), 2);
        assert_eq!(s.n_items(), 2);
        // first occurrence kept, including its timestamp
        assert_eq!(s.interaction(0).unwrap().timestamp, Some(100));
    }

    #[test]
    fn header_is_detected_and_comma_is_sniffed() {
        let text = "user,item,rating\na,x,1\nb,y,2\n";
        let s = parse_interactions(text.as_bytes(), InputFormat::default()).unwrap();
        assert_eq!(s.n_interactions(), 2);
        assert_eq!(s.users().raw_of(0), Some("a"));
    }

    #[test]
    fn atomic_header_selects_columns() {
        let text = "timestamp:float\titem_id:token\tuser_id:token\n5\tI1\tU1\n6\tI2\tU1\n";
        let s = parse_interactions(text.as_bytes(), InputFormat::atomic()).unwrap();
        assert_eq!(s.users().raw_of(0), Some("U1"));
        assert_eq!(s.items().raw_of(1), Some("I2"));
        assert_eq!(s.interaction(1).unwrap().timestamp, Some(6));
        let bad = parse_interactions("a:token\tb:token\n1\t2\n".as_bytes(), InputFormat::atomic());
        assert!(matches!(bad, Err(DataError::AtomicHeader(_))));
    }

    #[test]
    fn short_row_reports_line_number() {
        let err = parse_interactions("1\t2\n3\n".as_bytes(), InputFormat::default()).unwrap_err();
        assert!(matches!(err, DataError::ShortRow { line: 2, found: 1 }), "{err}");
    }

    #[test]
    fn empty_input_is_an_error() {
        let err = parse_interactions("".as_bytes(), InputFormat::default()).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
        let err = parse_interactions("user\titem\n".as_bytes(), InputFormat::default()).unwrap_err();
        assert!(matches!(err, DataError::Empty));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_interactions(Path::new("/nonexistent/u.data"), InputFormat::default()).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
    }

    #[test]
    fn kcore_zero_is_identity() {
        let s = store_of(&[("u1", "a"), ("u2", "b")]);
        let f = kcore_filter(&s, 0).unwrap();
        assert_eq!(f.records(), s.records());
    }

    #[test]
    fn kcore_star_graph_empties() {
        let s = store_of(&[("u", "a"), ("u", "b"), ("u", "c"), ("u", "d"), ("u", "e")]);
        assert!(matches!(kcore_filter(&s, 2), Err(DataError::FilterEmptied(2))));
    }

    #[test]
    fn kcore_chain_cascades_to_empty() {
        // u2 and item a go first; u1 is then left with only b, so it goes too.
        let s = store_of(&[("u1", "a"), ("u1", "b"), ("u2", "b")]);
        assert!(matches!(kcore_filter(&s, 2), Err(DataError::FilterEmptied(2))));
    }

    #[test]
    fn kcore_keeps_dense_core_and_reindexes() {
        let s = store_of(&[("u3", "b"), ("u1", "a"), ("u1", "b"), ("u2", "a"), ("u2", "b")]);
        let f = kcore_filter(&s, 2).unwrap();
        assert_eq!(f.n_users(), 2);
        assert_eq!(f.n_items(), 2);
        assert_eq!(f.users().raw_of(0), Some("u1"));
        assert_eq!(f.items().raw_of(0), Some("a"));
        assert_eq!(f.n_interactions(), 4);
    }

    #[test]
    fn pinned_partition_table() {
        // (n, train, valid, test) for n = 0..=12 under 0.8/0.1/0.1
        let expected = [
            (0, 0, 0, 0),
            (1, 1, 0, 0),
            (2, 2, 0, 0),
            (3, 1, 1, 1),
            (4, 2, 1, 1),
            (5, 3, 1, 1),
            (6, 4, 1, 1),
            (7, 5, 1, 1),
            (8, 6, 1, 1),
            (9, 7, 1, 1),
            (10, 8, 1, 1),
            (11, 9, 1, 1),
            (12, 10, 1, 1),
        ];
        let r = SplitRatios::default();
        for (n, tr, va, te) in expected {
            assert_eq!(r.partition_sizes(n), (tr, va, te), "n={n}");
        }
        assert_eq!(r.partition_sizes(25), (21, 2, 2));
    }

    #[test]
    fn bad_ratios_rejected() {
        let s = store_of(&[("u", "a")]);
        let r = SplitRatios {
            train: 0.5,
            valid: 0.1,
            test: 0.1,
        };
        assert!(matches!(split(&s, r, 0), Err(DataError::BadRatios(_))));
    }

    fn synthetic_store(n_users: usize, n_items: usize, per_user: usize, seed: u64) -> InteractionStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for u in 0..n_users {
            for _ in 0..per_user {
                let i = rng.random_range(0..n_items);
                rows.push(Interaction {
                    user_raw: format!("u{u}"),
                    item_raw: format!("i{i}"),
                    timestamp: None,
                });
            }
        }
        InteractionStore::from_interactions(rows).unwrap()
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let s = synthetic_store(30, 50, 12, 1);
        let a = split(&s, SplitRatios::default(), 9).unwrap();
        let b = split(&s, SplitRatios::default(), 9).unwrap();
        let c = split(&s, SplitRatios::default(), 10).unwrap();
        let mut ma = Vec::new();
        let mut mb = Vec::new();
        let mut mc = Vec::new();
        a.write_manifest(&mut ma).unwrap();
        b.write_manifest(&mut mb).unwrap();
        c.write_manifest(&mut mc).unwrap();
        assert_eq!(ma, mb);
        assert_ne!(ma, mc);
        assert_eq!(a.n_interactions(), s.n_interactions());
        for u in 0..a.n_users() as UserIdx {
            let n = a.train(u).len() + a.part(SplitPart::Valid, u).len() + a.part(SplitPart::Test, u).len();
            let (tr, va, te) = SplitRatios::default().partition_sizes(n);
            assert_eq!(a.train(u).len(), tr);
            assert_eq!(a.part(SplitPart::Valid, u).len(), va);
            assert_eq!(a.part(SplitPart::Test, u).len(), te);
        }
    }

    #[test]
    fn manifest_round_trips() {
        let s = synthetic_store(10, 20, 8, 2);
        let a = split(&s, SplitRatios::default(), 3).unwrap();
        let mut buf = Vec::new();
        a.write_manifest(&mut buf).unwrap();
        let b = SplitStore::read_manifest(buf.as_slice(), a.users().clone(), a.items().clone()).unwrap();
        for u in 0..a.n_users() as UserIdx {
            for part in [SplitPart::Train, SplitPart::Valid, SplitPart::Test] {
                assert_eq!(a.part(part, u), b.part(part, u));
            }
        }
    }

    fn tiny_split(pairs: &[(&str, &str)]) -> SplitStore {
        let s = store_of(pairs);
        // everyone has < 3 interactions or we force all-train via ratios
        split(
            &s,
            SplitRatios {
                train: 1.0,
                valid: 0.0,
                test: 0.0,
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn k2_gives_one_negative() {
        let st = tiny_split(&[("u1", "a"), ("u2", "b"), ("u3", "c"), ("u1", "d")]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = sample_batch(&st, 8, 2, &mut rng).unwrap();
        for (n, m) in b.candidates.iter().enumerate() {
            assert_eq!(m.len(), 2);
            assert_eq!(m[0], b.pairs[n].1);
            assert!(!st.is_train_positive(b.pairs[n].0, m[1]));
        }
    }

    #[test]
    fn full_rejection_uses_universe_fallback() {
        // Both users share every in-batch positive, so in-batch draws are
        // always rejected; the universe still has items they never saw.
        let st = tiny_split(&[
            ("u1", "a"),
            ("u1", "b"),
            ("u2", "a"),
            ("u2", "b"),
            ("u3", "c"),
            ("u3", "d"),
            ("u3", "e"),
        ]);
        let a = st.items().index_of("a").unwrap();
        let b = st.items().index_of("b").unwrap();
        let u1 = st.users().index_of("u1").unwrap();
        let u2 = st.users().index_of("u2").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = build_batch(&st, &[(u1, a), (u2, b), (u1, b)], 3, &mut rng).unwrap();
        for (n, m) in batch.candidates.iter().enumerate() {
            let u = batch.pairs[n].0;
            assert_eq!(m.len(), 3);
            let mut sorted = m.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 3);
            assert!(m[1..].iter().all(|&i| !st.is_train_positive(u, i)));
        }
    }

    #[test]
    fn single_pair_batch_forces_fallback() {
        let st = tiny_split(&[("u1", "a"), ("u2", "b"), ("u2", "c"), ("u2", "d")]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = sample_batch(&st, 1, 3, &mut rng).unwrap();
        assert_eq!(b.candidates[0].len(), 3);
    }

    #[test]
    fn saturated_user_is_skipped_or_errors() {
        let st = tiny_split(&[("u1", "a"), ("u1", "b"), ("u2", "a")]);
        let u1 = st.users().index_of("u1").unwrap();
        let u2 = st.users().index_of("u2").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(matches!(
            build_batch(&st, &[(u1, 0)], 2, &mut rng),
            Err(DataError::BatchUnformable { k: 2 })
        ));
        let b = build_batch(&st, &[(u1, 0), (u2, 0)], 2, &mut rng).unwrap();
        assert_eq!(b.pairs, vec![(u2, 0)]);
        assert_eq!(b.candidates[0], vec![0, 1]);
    }

    #[test]
    fn bad_k_rejected() {
        let st = tiny_split(&[("u1", "a"), ("u2", "b")]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(sample_batch(&st, 4, 1, &mut rng).is_err());
        assert!(sample_batch(&st, 4, 3, &mut rng).is_err());
        assert!(sample_batch(&st, 0, 2, &mut rng).is_err());
    }

    #[test]
    fn sampling_never_returns_known_positives() {
        let s = synthetic_store(40, 60, 15, 11);
        let st = split(&s, SplitRatios::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut checked = 0usize;
        while checked < 100_000 {
            let b = sample_batch(&st, 64, 5, &mut rng).unwrap();
            for (n, m) in b.candidates.iter().enumerate() {
                let (u, ip) = b.pairs[n];
                assert_eq!(m[0], ip);
                for &c in &m[1..] {
                    assert!(!st.is_train_positive(u, c));
                    checked += 1;
                }
            }
        }
    }

    #[test]
    fn id_maps_are_bijective() {
        let s = synthetic_store(15, 25, 5, 3);
        for (idx, raw) in s.users().iter() {
            assert_eq!(s.users().index_of(raw), Some(idx));
        }
        for (idx, raw) in s.items().iter() {
            assert_eq!(s.items().index_of(raw), Some(idx));
            assert_eq!(s.items().raw_of(s.items().index_of(raw).unwrap()), Some(raw));
        }
    }
}
