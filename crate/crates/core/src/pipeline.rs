//! Response-log ingestion: filtering, sessionization, stratified sampling,
//! and synthetic log generation for offline runs.

use crate::rasch::{RaschFit, WeightedResponseMatrix};
use crate::{sigmoid, Error, Result};
use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Addition,
    Subtraction,
    Multiplication,
    Division,
    CalculationOrder,
    TextProblems,
}

impl Domain {
    pub const ALL: [Domain; 6] = [
        Domain::Addition,
        Domain::Subtraction,
        Domain::Multiplication,
        Domain::Division,
        Domain::CalculationOrder,
        Domain::TextProblems,
    ];

    /// Human-readable label used in prompts.
    pub fn label(&self) -> &'static str {
        match self {
            Domain::Addition => "addition",
            Domain::Subtraction => "subtraction",
            Domain::Multiplication => "multiplication",
            Domain::Division => "division",
            Domain::CalculationOrder => "calculation order",
            Domain::TextProblems => "text problems",
        }
    }

    /// Grade level each domain is administered at.
    pub fn default_grade(&self) -> i32 {
        match self {
            Domain::Addition => 3,
            Domain::Subtraction => 4,
            Domain::TextProblems => 5,
            Domain::Multiplication => 6,
            Domain::Division => 7,
            Domain::CalculationOrder => 8,
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        let domain = match key.as_str() {
            "addition" => Domain::Addition,
            "subtraction" => Domain::Subtraction,
            "multiplication" => Domain::Multiplication,
            "division" => Domain::Division,
            "calculationorder" => Domain::CalculationOrder,
            "textproblems" => Domain::TextProblems,
            _ => return Err(Error::InvalidArgument(format!("unknown domain {s:?}"))),
        };
        Ok(domain)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub user_id: String,
    pub item_id: String,
    pub correct: u8,
    pub timestamp: DateTime<Utc>,
    pub domain: Domain,
    pub grade: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemBankEntry {
    pub item_id: String,
    pub domain: Domain,
    pub grade: i32,
    pub time_limit_seconds: u32,
    pub open_ended: bool,
    /// Raw task wording; may contain HTML fragments and is never cleaned.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledItem {
    pub item_id: String,
    /// 1 is the easiest stratum, 4 the hardest.
    pub stratum: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorItem {
    pub item_id: String,
    pub expected_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedSample {
    pub domain: Domain,
    pub items: Vec<SampledItem>,
    /// Easy anchor first, hard anchor second; disjoint from `items`.
    pub anchors: [AnchorItem; 2],
    pub stratum_borders: [f64; 3],
    pub seed: u64,
}

impl StratifiedSample {
    pub fn item_ids(&self) -> Vec<String> {
        self.items.iter().map(|s| s.item_id.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// An item survives with strictly more responses than this.
    pub min_item_responses: usize,
    /// A user survives with strictly more tasks than this.
    pub min_user_tasks: usize,
    /// A user survives with strictly fewer tasks than this.
    pub max_user_tasks: usize,
    pub grade_for: BTreeMap<Domain, i32>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_item_responses: 300,
            min_user_tasks: 5,
            max_user_tasks: 5000,
            grade_for: Domain::ALL
                .iter()
                .map(|d| (*d, d.default_grade()))
                .collect(),
        }
    }
}

/// Applies the three filters per domain in the order items, users, grade,
/// iterated to a fixpoint so that removing users cannot leave an item below
/// the response floor.
pub fn filter_responses(
    records: &[ResponseRecord],
    item_bank: &BTreeMap<String, ItemBankEntry>,
    config: &FilterConfig,
) -> Result<Vec<ResponseRecord>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no response records".into()));
    }
    let mut by_domain: BTreeMap<Domain, Vec<ResponseRecord>> = BTreeMap::new();
    let mut unknown_items = 0usize;
    for r in records {
        if !item_bank.contains_key(&r.item_id) {
            unknown_items += 1;
            continue;
        }
        by_domain.entry(r.domain).or_default().push(r.clone());
    }
    if unknown_items > 0 {
        log::warn!("dropped {unknown_items} responses to items missing from the bank");
    }

    let mut out = Vec::new();
    for (domain, mut rows) in by_domain {
        let grade = *config
            .grade_for
            .get(&domain)
            .ok_or_else(|| Error::Config(format!("no grade configured for domain {domain}")))?;
        loop {
            let before = rows.len();

            let mut item_counts: BTreeMap<&str, usize> = BTreeMap::new();
            for r in &rows {
                *item_counts.entry(r.item_id.as_str()).or_default() += 1;
            }
            let keep: Vec<ResponseRecord> = rows
                .iter()
                .filter(|r| item_counts[r.item_id.as_str()] > config.min_item_responses)
                .cloned()
                .collect();
            if keep.is_empty() {
                return Err(Error::EmptyDomain {
                    domain: domain.to_string(),
                    stage: "item response floor".into(),
                });
            }
            rows = keep;

            let mut user_counts: BTreeMap<&str, usize> = BTreeMap::new();
            for r in &rows {
                *user_counts.entry(r.user_id.as_str()).or_default() += 1;
            }
            let keep: Vec<ResponseRecord> = rows
                .iter()
                .filter(|r| {
                    let n = user_counts[r.user_id.as_str()];
                    n > config.min_user_tasks && n < config.max_user_tasks
                })
                .cloned()
                .collect();
            if keep.is_empty() {
                return Err(Error::EmptyDomain {
                    domain: domain.to_string(),
                    stage: "user task range".into(),
                });
            }
            rows = keep;

            let keep: Vec<ResponseRecord> =
                rows.iter().filter(|r| r.grade == grade).cloned().collect();
            if keep.is_empty() {
                return Err(Error::EmptyDomain {
                    domain: domain.to_string(),
                    stage: "grade match".into(),
                });
            }
            rows = keep;

            if rows.len() == before {
                break;
            }
        }
        out.extend(rows);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionRule {
    /// A new session starts after this much inactivity.
    pub gap_minutes: i64,
    pub min_unique_items: usize,
}

impl Default for SessionRule {
    fn default() -> Self {
        Self {
            gap_minutes: 30,
            min_unique_items: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionizeStats {
    pub users_in: usize,
    pub users_excluded: usize,
    pub sessions_kept: usize,
    pub sessions_dropped: usize,
}

/// Splits each user's history into sessions, keeps the first attempt per item
/// within a session, drops short sessions, and recodes each surviving session
/// as a pseudo-person with weight 1/S (S = that user's surviving sessions).
pub fn sessionize(
    records: &[ResponseRecord],
    rule: &SessionRule,
) -> Result<(WeightedResponseMatrix, SessionizeStats)> {
    let mut by_user: BTreeMap<&str, Vec<&ResponseRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(r.user_id.as_str()).or_default().push(r);
    }

    let mut stats = SessionizeStats {
        users_in: by_user.len(),
        ..Default::default()
    };
    let gap = Duration::minutes(rule.gap_minutes);
    let mut item_index: BTreeMap<String, u32> = BTreeMap::new();
    let mut items: Vec<String> = Vec::new();
    let mut persons = Vec::new();
    let mut weights = Vec::new();
    let mut responses = Vec::new();

    for (user, mut rows) in by_user {
        rows.sort_by_key(|r| r.timestamp);
        let mut sessions: Vec<Vec<&ResponseRecord>> = Vec::new();
        for r in rows {
            match sessions.last_mut() {
                Some(cur) if r.timestamp - cur.last().unwrap().timestamp <= gap => cur.push(r),
                _ => sessions.push(vec![r]),
            }
        }
        let mut kept: Vec<Vec<(&str, u8)>> = Vec::new();
        for session in sessions {
            let mut first_attempts: Vec<(&str, u8)> = Vec::new();
            for r in &session {
                if !first_attempts.iter().any(|(id, _)| *id == r.item_id) {
                    first_attempts.push((r.item_id.as_str(), r.correct));
                }
            }
            if first_attempts.len() >= rule.min_unique_items {
                kept.push(first_attempts);
            } else {
                stats.sessions_dropped += 1;
            }
        }
        if kept.is_empty() {
            stats.users_excluded += 1;
            continue;
        }
        let weight = 1.0 / kept.len() as f64;
        for (k, session) in kept.iter().enumerate() {
            let person = persons.len() as u32;
            persons.push(format!("{user}#{k}"));
            weights.push(weight);
            stats.sessions_kept += 1;
            for &(item_id, correct) in session {
                let idx = *item_index.entry(item_id.to_string()).or_insert_with(|| {
                    items.push(item_id.to_string());
                    (items.len() - 1) as u32
                });
                responses.push((person, idx, correct));
            }
        }
    }
    if stats.users_excluded > 0 {
        log::info!(
            "sessionize: {} of {} users had no surviving session",
            stats.users_excluded,
            stats.users_in
        );
    }
    let matrix = WeightedResponseMatrix::new(persons, items, responses, weights)?;
    Ok((matrix, stats))
}

/// Linear-interpolation percentile (inclusive, type 7) of sorted values.
fn percentile_type7(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Stratum for an expected proportion correct. Borders are the 25th, 50th and
/// 75th percentiles; a value exactly on a border goes to the stratum covering
/// the lower values (the harder side, since low expected_p means hard).
fn stratum_for(expected_p: f64, borders: &[f64; 3]) -> u8 {
    if expected_p > borders[2] {
        1
    } else if expected_p > borders[1] {
        2
    } else if expected_p > borders[0] {
        3
    } else {
        4
    }
}

/// Draws `n_per_stratum` open-ended items from each of four difficulty strata
/// plus one easy and one hard anchor, all without replacement.
pub fn stratified_sample(
    fit: &RaschFit,
    item_bank: &BTreeMap<String, ItemBankEntry>,
    domain: Domain,
    n_per_stratum: usize,
    seed: u64,
) -> Result<StratifiedSample> {
    if n_per_stratum == 0 {
        return Err(Error::InvalidArgument("n_per_stratum must be positive".into()));
    }
    let mut sorted_p = fit.expected_p.clone();
    sorted_p.sort_by(|a, b| a.total_cmp(b));
    if sorted_p.is_empty() {
        return Err(Error::InvalidArgument("empty fit".into()));
    }
    let borders = [
        percentile_type7(&sorted_p, 0.25),
        percentile_type7(&sorted_p, 0.50),
        percentile_type7(&sorted_p, 0.75),
    ];

    // pools[s] holds (item_id, expected_p) for stratum s+1, open-ended only
    let mut pools: [Vec<(String, f64)>; 4] = Default::default();
    for (id, &p) in fit.item_ids.iter().zip(&fit.expected_p) {
        let entry = match item_bank.get(id) {
            Some(e) => e,
            None => continue,
        };
        if entry.domain != domain || !entry.open_ended {
            continue;
        }
        let s = stratum_for(p, &borders) as usize - 1;
        pools[s].push((id.clone(), p));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(4 * n_per_stratum);
    let mut leftovers: [Option<(String, f64)>; 4] = Default::default();
    for (s, pool) in pools.iter_mut().enumerate() {
        // extreme strata also supply one anchor each
        let needed = n_per_stratum + usize::from(s == 0 || s == 3);
        if pool.len() < needed {
            return Err(Error::InsufficientStratum {
                stratum: s + 1,
                available: pool.len(),
                needed,
            });
        }
        pool.sort_by(|a, b| a.0.cmp(&b.0));
        pool.shuffle(&mut rng);
        for (id, _) in pool.iter().take(n_per_stratum) {
            items.push(SampledItem {
                item_id: id.clone(),
                stratum: (s + 1) as u8,
            });
        }
        if s == 0 || s == 3 {
            leftovers[s] = Some(pool[n_per_stratum].clone());
        }
    }
    let (easy_id, easy_p) = leftovers[0].take().unwrap();
    let (hard_id, hard_p) = leftovers[3].take().unwrap();
    Ok(StratifiedSample {
        domain,
        items,
        anchors: [
            AnchorItem {
                item_id: easy_id,
                expected_p: easy_p,
            },
            AnchorItem {
                item_id: hard_id,
                expected_p: hard_p,
            },
        ],
        stratum_borders: borders,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub domain: Domain,
    pub n_items: usize,
    pub n_users: usize,
    /// Inclusive range of item difficulties on the logit scale.
    pub difficulty_range: (f64, f64),
    pub sessions_per_user: usize,
    pub ability_sd: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    /// item_id -> generating difficulty (logit scale)
    pub difficulties: BTreeMap<String, f64>,
    pub ability_sd: f64,
}

/// Rasch-generated response logs with a ground-truth sidecar. Every user
/// answers every item, split evenly across sessions well apart in time.
pub fn generate_synthetic_logs(
    spec: &SyntheticSpec,
) -> Result<(Vec<ResponseRecord>, Vec<ItemBankEntry>, SyntheticTruth)> {
    if spec.n_items == 0 || spec.n_users == 0 || spec.sessions_per_user == 0 {
        return Err(Error::InvalidArgument("counts must be positive".into()));
    }
    if !(spec.ability_sd >= 0.0) {
        return Err(Error::InvalidArgument("ability sd must be non-negative".into()));
    }
    let grade = spec.domain.default_grade();
    let width = spec.n_items.to_string().len();
    let tag = spec.domain.label().replace(' ', "-");
    let domain_index = Domain::ALL.iter().position(|d| *d == spec.domain).unwrap();
    // operand base per domain keeps texts unique across merged domain banks
    let base = 1000 * (domain_index + 1);
    let (lo, hi) = spec.difficulty_range;
    let mut bank = Vec::with_capacity(spec.n_items);
    let mut truth = BTreeMap::new();
    let mut difficulties = Vec::with_capacity(spec.n_items);
    for i in 0..spec.n_items {
        let b = if spec.n_items == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (spec.n_items - 1) as f64
        };
        let item_id = format!("syn-{tag}-{i:0width$}");
        bank.push(ItemBankEntry {
            item_id: item_id.clone(),
            domain: spec.domain,
            grade,
            time_limit_seconds: 30,
            open_ended: true,
            // fixed-width operands so no text is a substring of another
            text: format!("{} + {}", base + i, base + 7 + i),
        });
        truth.insert(item_id, b);
        difficulties.push(b);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = Utc.with_ymd_and_hms(2024, 1, 1, 8, 0, 0).unwrap();
    let per_session = spec.n_items.div_ceil(spec.sessions_per_user);
    let mut records = Vec::with_capacity(spec.n_items * spec.n_users);
    for u in 0..spec.n_users {
        let theta = if spec.ability_sd > 0.0 {
            Normal::new(0.0, spec.ability_sd).unwrap().sample(&mut rng)
        } else {
            0.0
        };
        let user_id = format!("user-{u:05}");
        for (i, (entry, &b)) in bank.iter().zip(&difficulties).enumerate() {
            let session = i / per_session;
            let within = i % per_session;
            let correct = u8::from(rng.gen::<f64>() < sigmoid(theta - b));
            records.push(ResponseRecord {
                user_id: user_id.clone(),
                item_id: entry.item_id.clone(),
                correct,
                timestamp: base
                    + Duration::hours(2 * session as i64)
                    + Duration::seconds(10 * within as i64),
                domain: spec.domain,
                grade,
            });
        }
    }
    Ok((
        records,
        bank,
        SyntheticTruth {
            difficulties: truth,
            ability_sd: spec.ability_sd,
        },
    ))
}

/// Reads a response log from a CSV file with headers
/// `user_id,item_id,correct,timestamp,domain,grade`.
pub fn read_response_log(path: impl AsRef<std::path::Path>) -> Result<Vec<ResponseRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    for row in reader.deserialize() {
        records.push(row?);
    }
    Ok(records)
}

pub fn write_response_log(
    path: impl AsRef<std::path::Path>,
    records: &[ResponseRecord],
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for record in records {
        writer.serialize(record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads an item bank from a CSV file with headers
/// `item_id,domain,grade,time_limit_seconds,open_ended,text`. Duplicate item
/// ids are rejected.
pub fn read_item_bank(
    path: impl AsRef<std::path::Path>,
) -> Result<BTreeMap<String, ItemBankEntry>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut bank = BTreeMap::new();
    for row in reader.deserialize() {
        let entry: ItemBankEntry = row?;
        if bank.insert(entry.item_id.clone(), entry).is_some() {
            return Err(Error::InvalidArgument("duplicate item id in bank".into()));
        }
    }
    Ok(bank)
}

pub fn write_item_bank<'a>(
    path: impl AsRef<std::path::Path>,
    entries: impl Iterator<Item = &'a ItemBankEntry>,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for entry in entries {
        writer.serialize(entry)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn bank_of(items: &[&str], domain: Domain, grade: i32) -> BTreeMap<String, ItemBankEntry> {
        items
            .iter()
            .map(|id| {
                (
                    id.to_string(),
                    ItemBankEntry {
                        item_id: id.to_string(),
                        domain,
                        grade,
                        time_limit_seconds: 30,
                        open_ended: true,
                        text: format!("task {id}"),
                    },
                )
            })
            .collect()
    }

    fn record(user: &str, item: &str, correct: u8, minute: i64) -> ResponseRecord {
        ResponseRecord {
            user_id: user.into(),
            item_id: item.into(),
            correct,
            timestamp: Utc.with_ymd_and_hms(2024, 1, 1, 8, 0, 0).unwrap()
                + Duration::minutes(minute),
            domain: Domain::Addition,
            grade: 3,
        }
    }

    #[test]
    fn item_at_exactly_the_response_floor_is_dropped() {
        // i-keep gets 301 responses, i-drop exactly 300
        let mut records = Vec::new();
        for u in 0..301 {
            records.push(record(&format!("u{u}"), "i-keep", 1, u));
        }
        for u in 0..300 {
            records.push(record(&format!("u{u}"), "i-drop", 1, 1000 + u));
        }
        let bank = bank_of(&["i-keep", "i-drop"], Domain::Addition, 3);
        let config = FilterConfig {
            min_user_tasks: 0,
            ..FilterConfig::default()
        };
        let kept = filter_responses(&records, &bank, &config).unwrap();
        assert!(kept.iter().all(|r| r.item_id == "i-keep"));
        assert_eq!(kept.len(), 301);
    }

    #[test]
    fn user_task_count_boundaries_are_strict() {
        let items: Vec<String> = (0..7).map(|i| format!("i{i}")).collect();
        let item_refs: Vec<&str> = items.iter().map(|s| s.as_str()).collect();
        let mut records = Vec::new();
        // both users answer every item so the item floor cannot interfere
        for i in 0..5 {
            records.push(record("five", &items[i], 1, i as i64));
        }
        for i in 0..6 {
            records.push(record("six", &items[i], 1, 100 + i as i64));
        }
        let bank = bank_of(&item_refs, Domain::Addition, 3);
        let config = FilterConfig {
            min_item_responses: 0,
            ..FilterConfig::default()
        };
        let kept = filter_responses(&records, &bank, &config).unwrap();
        assert!(kept.iter().all(|r| r.user_id == "six"));
        assert_eq!(kept.len(), 6);
    }

    #[test]
    fn fully_eligible_log_is_retained_in_full() {
        let items: Vec<String> = (0..10).map(|i| format!("i{i}")).collect();
        let item_refs: Vec<&str> = items.iter().map(|s| s.as_str()).collect();
        let mut records = Vec::new();
        for u in 0..400 {
            for (k, item) in items.iter().enumerate() {
                records.push(record(&format!("u{u}"), item, 1, (u * 10 + k as i64) % 7));
            }
        }
        let bank = bank_of(&item_refs, Domain::Addition, 3);
        let kept = filter_responses(&records, &bank, &FilterConfig::default()).unwrap();
        assert_eq!(kept.len(), 4000);
    }

    #[test]
    fn empty_domain_error_names_the_stage() {
        let records: Vec<ResponseRecord> = (0..10).map(|i| record("u", "i0", 1, i)).collect();
        let bank = bank_of(&["i0"], Domain::Addition, 3);
        match filter_responses(&records, &bank, &FilterConfig::default()) {
            Err(Error::EmptyDomain { domain, stage }) => {
                assert_eq!(domain, "addition");
                assert_eq!(stage, "item response floor");
            }
            other => panic!("expected EmptyDomain, got {other:?}"),
        }
    }

    #[test]
    fn grade_mismatch_names_the_grade_stage() {
        let mut records = Vec::new();
        for u in 0..400 {
            for i in 0..6 {
                let mut r = record(&format!("u{u}"), &format!("i{i}"), 1, i);
                r.grade = 4;
                records.push(r);
            }
        }
        let bank = bank_of(&["i0", "i1", "i2", "i3", "i4", "i5"], Domain::Addition, 3);
        match filter_responses(&records, &bank, &FilterConfig::default()) {
            Err(Error::EmptyDomain { stage, .. }) => assert_eq!(stage, "grade match"),
            other => panic!("expected EmptyDomain, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn filtering_is_idempotent(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let items: Vec<String> = (0..6).map(|i| format!("i{i}")).collect();
            let item_refs: Vec<&str> = items.iter().map(|s| s.as_str()).collect();
            let bank = bank_of(&item_refs, Domain::Addition, 3);
            let mut records = Vec::new();
            for u in 0..40 {
                let n = rng.gen_range(1..12);
                for k in 0..n {
                    records.push(record(
                        &format!("u{u}"),
                        &items[rng.gen_range(0..items.len())],
                        rng.gen_range(0..2),
                        (u * 20 + k) as i64,
                    ));
                }
            }
            let config = FilterConfig {
                min_item_responses: 20,
                min_user_tasks: 3,
                max_user_tasks: 11,
                ..FilterConfig::default()
            };
            let once = match filter_responses(&records, &bank, &config) {
                Ok(rows) => rows,
                Err(_) => return Ok(()),
            };
            let twice = filter_responses(&once, &bank, &config).unwrap();
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn single_session_user_gets_weight_one() {
        let records: Vec<ResponseRecord> =
            (0..6).map(|i| record("u", &format!("i{i}"), 1, i)).collect();
        let (matrix, stats) = sessionize(&records, &SessionRule::default()).unwrap();
        assert_eq!(matrix.n_persons(), 1);
        assert_eq!(matrix.weights(), &[1.0]);
        assert_eq!(stats.sessions_kept, 1);
    }

    #[test]
    fn short_sessions_are_dropped_and_weights_split() {
        let mut records = Vec::new();
        // session 1: 6 items, session 2: 7 items, session 3: only 3 items
        for i in 0..6 {
            records.push(record("u", &format!("a{i}"), 1, i));
        }
        for i in 0..7 {
            records.push(record("u", &format!("b{i}"), 1, 100 + i));
        }
        for i in 0..3 {
            records.push(record("u", &format!("c{i}"), 1, 200 + i));
        }
        let (matrix, stats) = sessionize(&records, &SessionRule::default()).unwrap();
        assert_eq!(matrix.n_persons(), 2);
        assert_eq!(matrix.weights(), &[0.5, 0.5]);
        assert_eq!(stats.sessions_dropped, 1);
    }

    #[test]
    fn first_attempt_within_a_session_is_retained() {
        let records = vec![
            record("u", "A", 0, 0),
            record("u", "A", 1, 1),
            record("u", "B", 1, 2),
            record("u", "C", 1, 3),
            record("u", "D", 1, 4),
            record("u", "E", 1, 5),
        ];
        let (matrix, _) = sessionize(&records, &SessionRule::default()).unwrap();
        let a_idx = matrix.items().iter().position(|i| i == "A").unwrap() as u32;
        let a_val = matrix
            .responses()
            .iter()
            .find(|(_, i, _)| *i == a_idx)
            .unwrap()
            .2;
        assert_eq!(a_val, 0);
        assert_eq!(matrix.responses().len(), 5);
    }

    #[test]
    fn users_with_no_surviving_session_are_counted() {
        let records = vec![record("u", "A", 1, 0), record("u", "B", 1, 1)];
        let (matrix, stats) = sessionize(&records, &SessionRule::default()).unwrap();
        assert_eq!(matrix.n_persons(), 0);
        assert_eq!(stats.users_excluded, 1);
    }

    proptest! {
        #[test]
        fn surviving_user_weights_sum_to_one(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut records = Vec::new();
            for u in 0..10 {
                let sessions = rng.gen_range(1..5);
                for s in 0..sessions {
                    let n = rng.gen_range(2..9);
                    for i in 0..n {
                        records.push(record(
                            &format!("u{u}"),
                            &format!("i{}", rng.gen_range(0..30)),
                            1,
                            (u * 10_000 + s * 100 + i) as i64,
                        ));
                    }
                }
            }
            let (matrix, _) = sessionize(&records, &SessionRule::default()).unwrap();
            let mut per_user: BTreeMap<&str, f64> = BTreeMap::new();
            for (person, w) in matrix.persons().iter().zip(matrix.weights()) {
                let user = person.split('#').next().unwrap();
                *per_user.entry(user).or_default() += w;
            }
            for (user, total) in per_user {
                prop_assert!((total - 1.0).abs() < 1e-12, "user {}: {}", user, total);
            }
        }
    }

    fn synthetic_fit(n: usize) -> (RaschFit, BTreeMap<String, ItemBankEntry>) {
        let item_ids: Vec<String> = (0..n).map(|i| format!("i{i:03}")).collect();
        let expected_p: Vec<f64> = (0..n).map(|i| (i + 1) as f64 / (n + 1) as f64).collect();
        let refs: Vec<&str> = item_ids.iter().map(|s| s.as_str()).collect();
        let bank = bank_of(&refs, Domain::Addition, 3);
        let fit = RaschFit {
            item_ids,
            difficulties: vec![0.0; n],
            ability: crate::rasch::AbilityDistribution::new(1.0).unwrap(),
            expected_p,
            log_likelihood_trace: vec![],
            converged: true,
            iterations: 0,
        };
        (fit, bank)
    }

    #[test]
    fn sample_has_fifteen_items_per_stratum_and_disjoint_anchors() {
        let (fit, bank) = synthetic_fit(100);
        let sample = stratified_sample(&fit, &bank, Domain::Addition, 15, 7).unwrap();
        assert_eq!(sample.items.len(), 60);
        for s in 1..=4u8 {
            assert_eq!(sample.items.iter().filter(|i| i.stratum == s).count(), 15);
        }
        let ids: std::collections::BTreeSet<&str> =
            sample.items.iter().map(|i| i.item_id.as_str()).collect();
        assert_eq!(ids.len(), 60, "sampled items must be distinct");
        for anchor in &sample.anchors {
            assert!(!ids.contains(anchor.item_id.as_str()));
        }
        assert!(sample.anchors[0].expected_p > sample.anchors[1].expected_p);
    }

    #[test]
    fn same_seed_gives_byte_identical_sample() {
        let (fit, bank) = synthetic_fit(100);
        let a = stratified_sample(&fit, &bank, Domain::Addition, 15, 42).unwrap();
        let b = stratified_sample(&fit, &bank, Domain::Addition, 15, 42).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        let c = stratified_sample(&fit, &bank, Domain::Addition, 15, 43).unwrap();
        assert_ne!(a.items, c.items);
    }

    #[test]
    fn uniform_difficulties_split_into_equal_strata() {
        // 100 evenly spaced expected_p values: each stratum holds ~25
        let (fit, bank) = synthetic_fit(100);
        let sample = stratified_sample(&fit, &bank, Domain::Addition, 15, 1).unwrap();
        let borders = sample.stratum_borders;
        let counts: Vec<usize> = (1..=4u8)
            .map(|s| {
                fit.expected_p
                    .iter()
                    .filter(|&&p| stratum_for(p, &borders) == s)
                    .count()
            })
            .collect();
        for &c in &counts {
            assert!((24..=26).contains(&c), "stratum counts {counts:?}");
        }
    }

    #[test]
    fn insufficient_stratum_is_reported_with_counts() {
        let (fit, bank) = synthetic_fit(20);
        match stratified_sample(&fit, &bank, Domain::Addition, 15, 1) {
            Err(Error::InsufficientStratum {
                stratum,
                available,
                needed,
            }) => {
                assert_eq!(stratum, 1);
                assert!(available < needed);
                assert_eq!(needed, 16);
            }
            other => panic!("expected InsufficientStratum, got {other:?}"),
        }
    }

    #[test]
    fn percentile_matches_direct_computation() {
        let vals: Vec<f64> = (1..=5).map(f64::from).collect();
        assert!((percentile_type7(&vals, 0.25) - 2.0).abs() < 1e-12);
        assert!((percentile_type7(&vals, 0.50) - 3.0).abs() < 1e-12);
        let vals4: Vec<f64> = (1..=4).map(f64::from).collect();
        assert!((percentile_type7(&vals4, 0.25) - 1.75).abs() < 1e-12);
    }

    #[test]
    fn symmetric_generator_yields_half_correct() {
        let spec = SyntheticSpec {
            domain: Domain::Addition,
            n_items: 100,
            n_users: 1000,
            difficulty_range: (0.0, 0.0),
            sessions_per_user: 2,
            ability_sd: 1e-9,
            seed: 11,
        };
        let (records, bank, truth) = generate_synthetic_logs(&spec).unwrap();
        assert_eq!(records.len(), 100_000);
        assert_eq!(bank.len(), 100);
        assert!(truth.difficulties.values().all(|&b| b == 0.0));
        let p = records.iter().filter(|r| r.correct == 1).count() as f64 / records.len() as f64;
        assert!((p - 0.5).abs() < 0.02, "proportion correct {p}");
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SyntheticSpec {
            domain: Domain::Division,
            n_items: 8,
            n_users: 20,
            difficulty_range: (-2.0, 2.0),
            sessions_per_user: 2,
            ability_sd: 1.0,
            seed: 3,
        };
        let a = generate_synthetic_logs(&spec).unwrap();
        let b = generate_synthetic_logs(&spec).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
    }

    #[test]
    fn generated_sessions_survive_the_pipeline() {
        let spec = SyntheticSpec {
            domain: Domain::Addition,
            n_items: 12,
            n_users: 400,
            difficulty_range: (-1.0, 1.0),
            sessions_per_user: 2,
            ability_sd: 1.0,
            seed: 5,
        };
        let (records, bank, _) = generate_synthetic_logs(&spec).unwrap();
        let bank_map: BTreeMap<String, ItemBankEntry> = bank
            .into_iter()
            .map(|e| (e.item_id.clone(), e))
            .collect();
        let kept = filter_responses(&records, &bank_map, &FilterConfig::default()).unwrap();
        assert_eq!(kept.len(), records.len());
        let (matrix, stats) = sessionize(&kept, &SessionRule::default()).unwrap();
        assert_eq!(stats.users_excluded, 0);
        assert_eq!(matrix.n_persons(), 800);
    }

    #[test]
    fn csv_round_trip_preserves_logs_and_bank() {
        let spec = SyntheticSpec {
            domain: Domain::Division,
            n_items: 8,
            n_users: 5,
            difficulty_range: (-1.0, 1.0),
            sessions_per_user: 1,
            ability_sd: 1.0,
            seed: 9,
        };
        let (records, bank, _) = generate_synthetic_logs(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let log_path = dir.path().join("log.csv");
        let bank_path = dir.path().join("bank.csv");
        write_response_log(&log_path, &records).unwrap();
        write_item_bank(&bank_path, bank.iter()).unwrap();
        assert_eq!(read_response_log(&log_path).unwrap(), records);
        let read = read_item_bank(&bank_path).unwrap();
        assert_eq!(read.len(), bank.len());
        assert_eq!(read[&bank[0].item_id], bank[0]);

        // a duplicated row is rejected
        write_item_bank(&bank_path, bank.iter().chain(bank.iter().take(1))).unwrap();
        assert!(matches!(
            read_item_bank(&bank_path),
            Err(Error::InvalidArgument(_))
        ));
    }
}
