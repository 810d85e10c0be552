//! Judgement orchestration: one independent request per judgement, parse
//! retries, soft-probability extraction, the confident-one resampling loop,
//! and an append-only resumable judgement log.

use super::parse::{first_bracket_span, parse_bracket_output, ParsedValue};
use super::prompts::{build_prompt, AnchorInput, PromptInputs};
use super::schedule::PairSchedule;
use super::{DecisionType, DesignCell, JudgementFormat};
use crate::gateway::{BackendProfile, ChatRequest, CompletionClient, CompletionResponse};
use crate::pipeline::{ItemBankEntry, StratifiedSample};
use crate::token_calc::{
    absolute_soft, ev_frac, normalize_over, pairwise_soft, AbsoluteCase, PairwiseSoftRecord,
    SoftAbsoluteEstimate, TokenCandidate,
};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseBConfig {
    /// P(I=1) at or above this skips resampling.
    pub conf_threshold: f64,
    pub max_attempts: u32,
    /// Fixed fractional expectation when resampling is skipped or exhausted.
    pub fallback_frac: f64,
}

impl Default for CaseBConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.99,
            max_attempts: 100,
            fallback_frac: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElicitConfig {
    /// Total attempts allowed per judgement before it is recorded as failed.
    pub retry_max: u32,
    /// Judgements in flight at once.
    pub parallelism: usize,
    pub temperature: f64,
    pub top_logprobs: u32,
    pub case_b: CaseBConfig,
}

impl Default for ElicitConfig {
    fn default() -> Self {
        Self {
            retry_max: 3,
            parallelism: 4,
            temperature: 1.0,
            top_logprobs: 10,
            case_b: CaseBConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
}

impl RecordUsage {
    fn add(&mut self, resp: &CompletionResponse) {
        self.prompt_tokens += resp.usage.prompt_tokens;
        self.completion_tokens += resp.usage.completion_tokens;
        self.latency_ms += resp.latency_ms;
    }

    fn merge(&mut self, other: &RecordUsage) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.latency_ms += other.latency_ms;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SoftValue {
    Absolute(SoftAbsoluteEstimate),
    Pairwise(PairwiseSoftRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgementRecord {
    /// cell key plus unit id; unique within a campaign.
    pub key: String,
    pub cell: DesignCell,
    /// Presented order for pairwise judgements.
    pub item_ids: Vec<String>,
    pub raw_text: String,
    /// None marks a parse failure after all retries.
    pub parsed: Option<f64>,
    /// Top-k candidate lists at the located decision positions.
    pub decision_candidates: Vec<Vec<TokenCandidate>>,
    pub soft: Option<SoftValue>,
    pub attempts: u32,
    pub usage: RecordUsage,
}

/// Line-delimited judgement log: one record per line, append-only. Reopening
/// restores the key set so interrupted campaigns resume without repeating
/// finished judgements.
pub struct JudgementLog {
    path: PathBuf,
    records: BTreeMap<String, JudgementRecord>,
}

impl JudgementLog {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut records = BTreeMap::new();
        match std::fs::File::open(&path) {
            Ok(file) => {
                for line in BufReader::new(file).lines() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let record: JudgementRecord = serde_json::from_str(&line)?;
                    records.insert(record.key.clone(), record);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        Ok(Self { path, records })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, key: &str) -> Option<&JudgementRecord> {
        self.records.get(key)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &JudgementRecord> {
        self.records.values()
    }

    pub fn append(&mut self, record: JudgementRecord) -> Result<()> {
        if self.records.contains_key(&record.key) {
            return Ok(());
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        file.write_all(line.as_bytes())?;
        file.sync_data()?;
        self.records.insert(record.key.clone(), record);
        Ok(())
    }
}

/// Byte spans of each generated token, assuming the completion text is the
/// concatenation of the sampled tokens.
fn token_spans(resp: &CompletionResponse) -> Vec<(usize, usize)> {
    let mut spans = Vec::with_capacity(resp.positions.len());
    let mut offset = 0;
    for pos in &resp.positions {
        spans.push((offset, offset + pos.token.len()));
        offset += pos.token.len();
    }
    spans
}

fn positions_in_bracket(resp: &CompletionResponse) -> Vec<usize> {
    let Some((start, end)) = first_bracket_span(&resp.text) else {
        return Vec::new();
    };
    token_spans(resp)
        .iter()
        .enumerate()
        .filter(|(_, &(s, e))| s < end && e > start)
        .map(|(k, _)| k)
        .collect()
}

/// First token inside the bracket group whose trimmed text is "1" or "0".
fn locate_pairwise_decision(resp: &CompletionResponse) -> Option<usize> {
    positions_in_bracket(resp)
        .into_iter()
        .find(|&k| matches!(resp.positions[k].token.trim(), "1" | "0"))
}

/// Leading-integer position and, when the completion follows the
/// "0", ".", digit tokenization, the fractional-digit position.
fn locate_absolute_decision(resp: &CompletionResponse) -> Option<(usize, Option<usize>)> {
    let in_bracket = positions_in_bracket(resp);
    let lead_at = in_bracket
        .iter()
        .position(|&k| matches!(resp.positions[k].token.trim(), "1" | "0"))?;
    let lead_idx = in_bracket[lead_at];
    let mut rest = in_bracket[lead_at + 1..]
        .iter()
        .filter(|&&k| !resp.positions[k].token.trim().is_empty());
    let frac_idx = match rest.next() {
        Some(&dot) if resp.positions[dot].token.trim() == "." => rest.next().copied().filter(|&d| {
            let t = resp.positions[d].token.trim();
            t.len() == 1 && t.chars().all(|c| c.is_ascii_digit())
        }),
        _ => None,
    };
    Some((lead_idx, frac_idx))
}

const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

fn digit_distribution(candidates: &[TokenCandidate]) -> Option<[f64; 10]> {
    let dist = normalize_over(candidates, &DIGITS)?;
    let mut out = [0.0; 10];
    for (token, mass) in dist {
        out[token.parse::<usize>().unwrap()] = mass;
    }
    Some(out)
}

fn point_mass_digit(d: usize) -> [f64; 10] {
    let mut out = [0.0; 10];
    out[d] = 1.0;
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseBOutcome {
    pub estimate: SoftAbsoluteEstimate,
    /// Resample calls issued (0 when the confidence shortcut applies).
    pub resample_attempts: u32,
    pub usage: RecordUsage,
    /// Fractional-digit candidates of the accepted resample, if any.
    pub frac_candidates: Option<Vec<TokenCandidate>>,
}

/// Resolves a first completion of 1.0 in an absolute-soft cell. The leading
/// distribution always comes from the first call; only the fractional digit
/// is resampled. A backend failure mid-loop propagates so the campaign can
/// resume from the cache.
pub fn resolve_case_b(
    client: &dyn CompletionClient,
    base_request: &ChatRequest,
    next_ordinal: u32,
    p_leading_one: f64,
    p_leading_zero: f64,
    config: &CaseBConfig,
) -> Result<CaseBOutcome> {
    let mut usage = RecordUsage::default();
    if p_leading_one >= config.conf_threshold {
        return Ok(CaseBOutcome {
            estimate: absolute_soft(
                p_leading_one,
                p_leading_zero,
                config.fallback_frac,
                AbsoluteCase::BConfident,
            )?,
            resample_attempts: 0,
            usage,
            frac_candidates: None,
        });
    }
    for attempt in 0..config.max_attempts {
        let mut request = base_request.clone();
        request.ordinal = next_ordinal + attempt;
        let resp = client.complete(&request)?;
        usage.add(&resp);
        let parsed = parse_bracket_output(&resp.text, JudgementFormat::Absolute);
        let Some(ParsedValue::Absolute(v)) = parsed else {
            continue;
        };
        if v >= 1.0 {
            continue;
        }
        let frac_idx = locate_absolute_decision(&resp).and_then(|(_, frac)| frac);
        let (dist, candidates) = match frac_idx {
            Some(idx) => {
                let cands = resp.positions[idx].top_candidates.clone();
                match digit_distribution(&cands) {
                    Some(dist) => (dist, Some(cands)),
                    None => (point_mass_digit((v * 10.0).round() as usize), None),
                }
            }
            None => (point_mass_digit((v * 10.0).round() as usize), None),
        };
        return Ok(CaseBOutcome {
            estimate: absolute_soft(
                p_leading_one,
                p_leading_zero,
                ev_frac(&dist)?,
                AbsoluteCase::BResampled,
            )?,
            resample_attempts: attempt + 1,
            usage,
            frac_candidates: candidates,
        });
    }
    Ok(CaseBOutcome {
        estimate: absolute_soft(
            p_leading_one,
            p_leading_zero,
            config.fallback_frac,
            AbsoluteCase::BFallback,
        )?,
        resample_attempts: config.max_attempts,
        usage,
        frac_candidates: None,
    })
}

struct Unit {
    id: String,
    item_ids: Vec<String>,
    system_message: String,
    user_message: String,
}

fn anchors_for(
    cell: &DesignCell,
    sample: &StratifiedSample,
    bank: &BTreeMap<String, ItemBankEntry>,
) -> Result<Option<[AnchorInput; 2]>> {
    if cell.template().needs_anchors() {
        let mut out = Vec::with_capacity(2);
        for anchor in &sample.anchors {
            let entry = bank
                .get(&anchor.item_id)
                .ok_or_else(|| Error::Config(format!("anchor {} not in bank", anchor.item_id)))?;
            out.push(AnchorInput {
                text: entry.text.clone(),
                expected_p: anchor.expected_p,
            });
        }
        Ok(Some([out[0].clone(), out[1].clone()]))
    } else {
        Ok(None)
    }
}

fn build_units(
    cell: &DesignCell,
    sample: &StratifiedSample,
    bank: &BTreeMap<String, ItemBankEntry>,
    schedule: Option<&PairSchedule>,
) -> Result<Vec<Unit>> {
    let anchors = anchors_for(cell, sample, bank)?;
    let entry = |id: &str| -> Result<&ItemBankEntry> {
        bank.get(id)
            .ok_or_else(|| Error::Config(format!("item {id} not in bank")))
    };
    let mut units = Vec::new();
    match cell.format {
        JudgementFormat::Absolute => {
            for item in &sample.items {
                let e = entry(&item.item_id)?;
                let bundle = build_prompt(
                    cell.template(),
                    &PromptInputs {
                        grade: e.grade,
                        domain_label: cell.domain.label().to_string(),
                        time_limit_seconds: e.time_limit_seconds,
                        tasks: vec![e.text.clone()],
                        anchors: anchors.clone(),
                    },
                )?;
                units.push(Unit {
                    id: item.item_id.clone(),
                    item_ids: vec![item.item_id.clone()],
                    system_message: bundle.system_message,
                    user_message: bundle.user_message,
                });
            }
        }
        JudgementFormat::Pairwise => {
            let schedule = schedule.ok_or_else(|| {
                Error::InvalidArgument("pairwise cell requires a pair schedule".into())
            })?;
            for (first, second) in &schedule.pairs {
                let (a, b) = (entry(first)?, entry(second)?);
                let bundle = build_prompt(
                    cell.template(),
                    &PromptInputs {
                        grade: a.grade,
                        domain_label: cell.domain.label().to_string(),
                        // one limit slot in the prompt; use the looser one
                        time_limit_seconds: a.time_limit_seconds.max(b.time_limit_seconds),
                        tasks: vec![a.text.clone(), b.text.clone()],
                        anchors: anchors.clone(),
                    },
                )?;
                units.push(Unit {
                    id: format!("{first}~{second}"),
                    item_ids: vec![first.clone(), second.clone()],
                    system_message: bundle.system_message,
                    user_message: bundle.user_message,
                });
            }
        }
    }
    Ok(units)
}

fn run_unit(
    cell: &DesignCell,
    unit: &Unit,
    key: String,
    client: &dyn CompletionClient,
    profile: &BackendProfile,
    config: &ElicitConfig,
) -> Result<JudgementRecord> {
    let base_request = ChatRequest {
        backend: profile.name.clone(),
        model: profile.model.clone(),
        system_message: unit.system_message.clone(),
        user_message: unit.user_message.clone(),
        temperature: config.temperature,
        top_logprobs: config.top_logprobs.min(profile.top_k_limit),
        ordinal: 0,
    };

    let mut usage = RecordUsage::default();
    let mut attempts = 0u32;
    let mut next_ordinal = 0u32;
    let (resp, parsed) = loop {
        attempts += 1;
        let mut request = base_request.clone();
        request.ordinal = next_ordinal;
        next_ordinal += 1;
        match client.complete(&request) {
            Ok(resp) => {
                usage.add(&resp);
                match parse_bracket_output(&resp.text, cell.format) {
                    Some(v) => break (resp, Some(v)),
                    None if attempts >= config.retry_max => break (resp, None),
                    None => {
                        log::warn!("{key}: unparseable completion {:?}, retrying", resp.text);
                    }
                }
            }
            Err(e) if attempts >= config.retry_max => return Err(e),
            Err(e) => log::warn!("{key}: backend error ({e}), retrying"),
        }
    };

    let mut record = JudgementRecord {
        key,
        cell: cell.clone(),
        item_ids: unit.item_ids.clone(),
        raw_text: resp.text.clone(),
        parsed: parsed.map(|v| v.as_f64()),
        decision_candidates: Vec::new(),
        soft: None,
        attempts,
        usage,
    };
    let Some(parsed) = parsed else {
        return Ok(record);
    };
    if cell.decision == DecisionType::Hard {
        return Ok(record);
    }

    match cell.format {
        JudgementFormat::Pairwise => {
            let hard = match parsed {
                ParsedValue::Pairwise(d) => d,
                ParsedValue::Absolute(_) => unreachable!("absolute parse in pairwise cell"),
            };
            let candidates = match locate_pairwise_decision(&resp) {
                Some(idx) => resp.positions[idx].top_candidates.clone(),
                None => {
                    log::warn!("{}: decision token not located, hard fallback", record.key);
                    Vec::new()
                }
            };
            let soft = pairwise_soft(&candidates, hard);
            if !candidates.is_empty() {
                record.decision_candidates.push(candidates);
            }
            record.soft = Some(SoftValue::Pairwise(soft));
        }
        JudgementFormat::Absolute => {
            let value = parsed.as_f64();
            let located = locate_absolute_decision(&resp);
            let leading = located.and_then(|(lead_idx, _)| {
                let cands = &resp.positions[lead_idx].top_candidates;
                normalize_over(cands, &["1", "0"]).map(|dist| {
                    record.decision_candidates.push(cands.clone());
                    (
                        dist.get("1").copied().unwrap_or(0.0),
                        dist.get("0").copied().unwrap_or(0.0),
                    )
                })
            });
            let (p_one, p_zero) = match leading {
                Some(pair) => pair,
                None => {
                    // tokenization shape did not match; degrade to the
                    // sampled hard decision
                    log::warn!("{}: leading token not located, hard fallback", record.key);
                    if value >= 1.0 {
                        (1.0, 0.0)
                    } else {
                        (0.0, 1.0)
                    }
                }
            };
            if value < 1.0 {
                let frac_idx = located.and_then(|(_, frac)| frac);
                let dist = frac_idx
                    .and_then(|idx| {
                        let cands = resp.positions[idx].top_candidates.clone();
                        let dist = digit_distribution(&cands);
                        if dist.is_some() {
                            record.decision_candidates.push(cands);
                        }
                        dist
                    })
                    .unwrap_or_else(|| point_mass_digit((value * 10.0).round() as usize));
                let estimate = absolute_soft(p_one, p_zero, ev_frac(&dist)?, AbsoluteCase::A)?;
                record.soft = Some(SoftValue::Absolute(estimate));
            } else {
                let outcome = resolve_case_b(
                    client,
                    &base_request,
                    next_ordinal,
                    p_one,
                    p_zero,
                    &config.case_b,
                )?;
                record.attempts += outcome.resample_attempts;
                record.usage.merge(&outcome.usage);
                if let Some(cands) = outcome.frac_candidates {
                    record.decision_candidates.push(cands);
                }
                record.soft = Some(SoftValue::Absolute(outcome.estimate));
            }
        }
    }
    Ok(record)
}

/// Runs every judgement of a design cell with bounded parallelism. Finished
/// judgements are appended to the log as their chunk completes; keys already
/// present are returned without touching the backend, so an interrupted
/// campaign resumes with at-most-once accounting per unit.
pub fn run_cell(
    cell: &DesignCell,
    sample: &StratifiedSample,
    bank: &BTreeMap<String, ItemBankEntry>,
    schedule: Option<&PairSchedule>,
    client: &dyn CompletionClient,
    profile: &BackendProfile,
    config: &ElicitConfig,
    log: &mut JudgementLog,
) -> Result<Vec<JudgementRecord>> {
    if cell.decision == DecisionType::Soft && !profile.supports_logprobs {
        return Err(Error::Config(format!(
            "backend {} does not expose log-probabilities",
            profile.name
        )));
    }
    if cell.decision == DecisionType::Soft && config.temperature != 1.0 {
        log::warn!(
            "soft estimates at temperature {} are not comparable to the defaults",
            config.temperature
        );
    }
    let units = build_units(cell, sample, bank, schedule)?;
    let parallelism = config.parallelism.max(1);
    let mut out: Vec<JudgementRecord> = Vec::with_capacity(units.len());

    for chunk in units.chunks(parallelism) {
        let mut todo = Vec::new();
        let mut slots: Vec<Option<JudgementRecord>> = Vec::with_capacity(chunk.len());
        for unit in chunk {
            let key = format!("{}|{}", cell.key(), unit.id);
            match log.get(&key) {
                Some(existing) => slots.push(Some(existing.clone())),
                None => {
                    slots.push(None);
                    todo.push((slots.len() - 1, unit, key));
                }
            }
        }
        if !todo.is_empty() {
            let results: Mutex<Vec<(usize, Result<JudgementRecord>)>> =
                Mutex::new(Vec::with_capacity(todo.len()));
            std::thread::scope(|scope| {
                for (slot, unit, key) in todo {
                    let results = &results;
                    scope.spawn(move || {
                        let outcome = run_unit(cell, unit, key, client, profile, config);
                        results.lock().unwrap().push((slot, outcome));
                    });
                }
            });
            let mut first_error = None;
            for (slot, outcome) in results.into_inner().unwrap() {
                match outcome {
                    Ok(record) => slots[slot] = Some(record),
                    Err(e) => {
                        if first_error.is_none() {
                            first_error = Some(e);
                        }
                    }
                }
            }
            // persist what finished before surfacing the failure
            for record in slots.iter().flatten() {
                log.append(record.clone())?;
            }
            if let Some(e) = first_error {
                return Err(e);
            }
        } else {
            for record in slots.iter().flatten() {
                log.append(record.clone())?;
            }
        }
        out.extend(slots.into_iter().map(Option::unwrap));
    }
    Ok(out)
}
