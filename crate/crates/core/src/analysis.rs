//! Agreement analysis: Spearman correlations between model-derived and
//! empirical difficulties, paired bootstrap intervals, condition contrasts,
//! and cost accounting.

use crate::elicit::{DesignCell, JudgementRecord};
use crate::gateway::BackendProfile;
use crate::pipeline::Domain;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Larger value means harder (Bradley-Terry strength of "harder").
    HarderIsLarger,
    /// Larger value means easier (absolute estimates on the solved-proportion
    /// scale, like the criterion expected_p).
    EasierIsLarger,
}

/// Per-item difficulty estimates produced by one design cell in one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEstimate {
    pub cell: DesignCell,
    pub values: BTreeMap<String, f64>,
    pub orientation: Orientation,
    /// item id -> reason, for items without a usable value.
    pub excluded: BTreeMap<String, String>,
}

impl ConditionEstimate {
    /// Condition identity without the domain, used for cross-domain
    /// aggregation.
    pub fn condition_key(&self) -> String {
        let key = self.cell.key();
        let parts: Vec<&str> = key.split('|').collect();
        parts[..parts.len() - 1].join("|")
    }
}

/// One domain's inputs to the bootstrap: the empirical criterion and every
/// condition's estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainData {
    pub domain: Domain,
    /// item id -> empirical expected proportion correct.
    pub criterion_expected_p: BTreeMap<String, f64>,
    pub estimates: Vec<ConditionEstimate>,
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantVector);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 observations, got {}",
            x.len()
        )));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Aligns an estimate with the criterion on their shared items and converts
/// both to the harder-is-larger orientation. Returns (item ids, estimate
/// values, criterion values) sorted by item id.
pub fn orient(
    estimate: &ConditionEstimate,
    criterion: &BTreeMap<String, f64>,
) -> Result<(Vec<String>, Vec<f64>, Vec<f64>)> {
    let mut ids = Vec::new();
    let mut est = Vec::new();
    let mut crit = Vec::new();
    for (id, &value) in &estimate.values {
        let Some(&p) = criterion.get(id) else {
            continue;
        };
        ids.push(id.clone());
        est.push(match estimate.orientation {
            Orientation::HarderIsLarger => value,
            Orientation::EasierIsLarger => -value,
        });
        crit.push(-p);
    }
    if ids.is_empty() {
        return Err(Error::InvalidArgument(
            "estimate and criterion share no items".into(),
        ));
    }
    Ok((ids, est, crit))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastSpec {
    pub name: String,
    /// Condition keys on each side; Δ = mean(A) − mean(B) per iteration.
    pub a_conditions: Vec<String>,
    pub b_conditions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub b_iterations: usize,
    pub seed: u64,
    pub parallel: bool,
    /// Retain per-iteration domain-averaged r_s per condition (for audits).
    pub keep_iteration_means: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            b_iterations: 10_000,
            seed: 0,
            parallel: true,
            keep_iteration_means: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub r_s_by_domain: BTreeMap<Domain, f64>,
    /// Domain-averaged point estimate on the full (non-resampled) data.
    pub mean_r_s: f64,
    /// 2.5th and 97.5th percentiles of the bootstrapped domain average.
    pub ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastResult {
    pub name: String,
    pub delta: f64,
    pub ci: (f64, f64),
    pub excludes_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResult {
    pub conditions: Vec<ConditionSummary>,
    pub contrasts: Vec<ContrastResult>,
    pub b_requested: usize,
    /// Iterations actually used after excluding degenerate resamples.
    pub b_used: usize,
    pub degenerate_iterations: usize,
    pub seed: u64,
    pub iteration_means: Option<BTreeMap<String, Vec<f64>>>,
}

struct PreparedDomain {
    domain: Domain,
    criterion: Vec<f64>,
    /// condition key -> values aligned to the criterion item order.
    per_condition: BTreeMap<String, Vec<Option<f64>>>,
}

fn prepare(domains: &[DomainData]) -> Result<Vec<PreparedDomain>> {
    let mut out = Vec::with_capacity(domains.len());
    for data in domains {
        let ids: Vec<&String> = data.criterion_expected_p.keys().collect();
        let criterion: Vec<f64> = data.criterion_expected_p.values().map(|&p| -p).collect();
        let mut per_condition = BTreeMap::new();
        for estimate in &data.estimates {
            let values: Vec<Option<f64>> = ids
                .iter()
                .map(|id| {
                    estimate.values.get(*id).map(|&v| match estimate.orientation {
                        Orientation::HarderIsLarger => v,
                        Orientation::EasierIsLarger => -v,
                    })
                })
                .collect();
            if values.iter().all(Option::is_none) {
                return Err(Error::InvalidArgument(format!(
                    "condition {} shares no items with the {} criterion",
                    estimate.condition_key(),
                    data.domain
                )));
            }
            per_condition.insert(estimate.condition_key(), values);
        }
        out.push(PreparedDomain {
            domain: data.domain,
            criterion,
            per_condition,
        });
    }
    Ok(out)
}

/// Domain-averaged r_s per condition for one set of per-domain index draws.
/// None marks a degenerate iteration (a constant resampled vector).
fn iteration_means(
    prepared: &[PreparedDomain],
    indices: &[Vec<usize>],
    conditions: &[String],
) -> Option<BTreeMap<String, f64>> {
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (dom, idx) in prepared.iter().zip(indices) {
        for condition in conditions {
            let Some(values) = dom.per_condition.get(condition) else {
                continue;
            };
            let mut est = Vec::with_capacity(idx.len());
            let mut crit = Vec::with_capacity(idx.len());
            for &i in idx {
                if let Some(v) = values[i] {
                    est.push(v);
                    crit.push(dom.criterion[i]);
                }
            }
            if est.len() < 3 {
                return None;
            }
            match spearman(&est, &crit) {
                Ok(r) => {
                    let entry = sums.entry(condition.as_str()).or_insert((0.0, 0));
                    entry.0 += r;
                    entry.1 += 1;
                }
                Err(Error::ConstantVector) => return None,
                Err(_) => return None,
            }
        }
    }
    Some(
        sums.into_iter()
            .map(|(k, (s, n))| (k.to_string(), s / n as f64))
            .collect(),
    )
}

fn percentile_ci(sorted: &[f64]) -> (f64, f64) {
    let pick = |q: f64| {
        let h = q * (sorted.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    (pick(0.025), pick(0.975))
}

fn contrast_delta(means: &BTreeMap<String, f64>, spec: &ContrastSpec) -> Option<f64> {
    let side = |keys: &[String]| -> Option<f64> {
        let vals: Vec<f64> = keys.iter().map(|k| means.get(k).copied()).collect::<Option<_>>()?;
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Some(side(&spec.a_conditions)? - side(&spec.b_conditions)?)
}

/// Item-level bootstrap over all conditions at once. Every condition within
/// an iteration sees the same per-domain resample, so contrasts are paired.
/// Fully determined by the seed; each iteration draws from its own RNG
/// stream, so parallel and serial execution agree bit for bit.
pub fn bootstrap_analysis(
    domains: &[DomainData],
    contrasts: &[ContrastSpec],
    config: &AnalysisConfig,
) -> Result<AnalysisResult> {
    if domains.is_empty() {
        return Err(Error::InvalidArgument("no domain data".into()));
    }
    if config.b_iterations == 0 {
        return Err(Error::InvalidArgument("need at least one iteration".into()));
    }
    let prepared = prepare(domains)?;
    let mut conditions: Vec<String> = prepared
        .iter()
        .flat_map(|d| d.per_condition.keys().cloned())
        .collect();
    conditions.sort();
    conditions.dedup();

    // point estimates on the full data
    let identity: Vec<Vec<usize>> = prepared
        .iter()
        .map(|d| (0..d.criterion.len()).collect())
        .collect();
    let mut point_by_domain: BTreeMap<String, BTreeMap<Domain, f64>> = BTreeMap::new();
    for dom in &prepared {
        for (condition, values) in &dom.per_condition {
            let mut est = Vec::new();
            let mut crit = Vec::new();
            for (i, v) in values.iter().enumerate() {
                if let Some(v) = v {
                    est.push(*v);
                    crit.push(dom.criterion[i]);
                }
            }
            let r = spearman(&est, &crit)?;
            point_by_domain
                .entry(condition.clone())
                .or_default()
                .insert(dom.domain, r);
        }
    }
    let point_means =
        iteration_means(&prepared, &identity, &conditions).ok_or(Error::ConstantVector)?;

    let draw = |iteration: u64| -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(iteration + 1);
        prepared
            .iter()
            .map(|d| {
                let n = d.criterion.len();
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            })
            .collect()
    };
    let one = |i: usize| iteration_means(&prepared, &draw(i as u64), &conditions);
    let raw: Vec<Option<BTreeMap<String, f64>>> = if config.parallel {
        (0..config.b_iterations).into_par_iter().map(one).collect()
    } else {
        (0..config.b_iterations).map(one).collect()
    };
    let kept: Vec<BTreeMap<String, f64>> = raw.into_iter().flatten().collect();
    let degenerate = config.b_iterations - kept.len();
    if kept.is_empty() {
        return Err(Error::InvalidArgument(
            "every bootstrap iteration was degenerate".into(),
        ));
    }
    if degenerate > 0 {
        log::info!("bootstrap: excluded {degenerate} degenerate iterations");
    }

    let mut summaries = Vec::with_capacity(conditions.len());
    for condition in &conditions {
        let mut series: Vec<f64> = kept.iter().map(|m| m[condition]).collect();
        series.sort_by(|a, b| a.total_cmp(b));
        summaries.push(ConditionSummary {
            condition: condition.clone(),
            r_s_by_domain: point_by_domain[condition].clone(),
            mean_r_s: point_means[condition],
            ci: percentile_ci(&series),
        });
    }

    let mut contrast_results = Vec::with_capacity(contrasts.len());
    for spec in contrasts {
        let delta = contrast_delta(&point_means, spec).ok_or_else(|| {
            Error::InvalidArgument(format!("contrast {} names an unknown condition", spec.name))
        })?;
        let mut series: Vec<f64> = kept
            .iter()
            .map(|m| contrast_delta(m, spec).unwrap())
            .collect();
        series.sort_by(|a, b| a.total_cmp(b));
        let ci = percentile_ci(&series);
        contrast_results.push(ContrastResult {
            name: spec.name.clone(),
            delta,
            ci,
            excludes_zero: ci.0 > 0.0 || ci.1 < 0.0,
        });
    }

    let iteration_means_out = config.keep_iteration_means.then(|| {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for m in &kept {
            for (k, v) in m {
                out.entry(k.clone()).or_default().push(*v);
            }
        }
        out
    });

    Ok(AnalysisResult {
        conditions: summaries,
        contrasts: contrast_results,
        b_requested: config.b_iterations,
        b_used: kept.len(),
        degenerate_iterations: degenerate,
        seed: config.seed,
        iteration_means: iteration_means_out,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLine {
    pub judgements: usize,
    /// Records whose usage counters are absent (all zero).
    pub missing_usage: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_time_s: f64,
    pub cost: f64,
}

/// Per-cell judgement counts, token totals, wall time, and priced cost.
pub fn cost_report(
    records: &[JudgementRecord],
    profiles: &BTreeMap<String, BackendProfile>,
) -> Result<BTreeMap<String, CostLine>> {
    let mut out: BTreeMap<String, CostLine> = BTreeMap::new();
    for record in records {
        let profile = profiles.get(&record.cell.model).ok_or_else(|| {
            Error::Config(format!("no backend profile for model {}", record.cell.model))
        })?;
        let line = out.entry(record.cell.key()).or_default();
        line.judgements += 1;
        let u = &record.usage;
        if u.prompt_tokens == 0 && u.completion_tokens == 0 {
            line.missing_usage += 1;
            continue;
        }
        line.prompt_tokens += u.prompt_tokens;
        line.completion_tokens += u.completion_tokens;
        line.total_time_s += u.latency_ms as f64 / 1000.0;
        line.cost += u.prompt_tokens as f64 / 1000.0 * profile.price_per_1k_prompt_tokens
            + u.completion_tokens as f64 / 1000.0 * profile.price_per_1k_completion_tokens;
    }
    Ok(out)
}

/// Builds a condition's per-item values from absolute judgement records:
/// the soft estimate when present, otherwise the parsed hard value. Records
/// without either are listed in the exclusion set.
pub fn absolute_condition_estimate(
    cell: &DesignCell,
    records: &[JudgementRecord],
) -> ConditionEstimate {
    use crate::elicit::SoftValue;
    let mut values = BTreeMap::new();
    let mut excluded = BTreeMap::new();
    for record in records {
        let [item_id] = record.item_ids.as_slice() else {
            continue;
        };
        let value = match &record.soft {
            Some(SoftValue::Absolute(soft)) => Some(soft.p_soft),
            _ => record.parsed,
        };
        match value {
            Some(v) => {
                values.insert(item_id.clone(), v);
            }
            None => {
                excluded.insert(item_id.clone(), "parse failure".to_string());
            }
        }
    }
    ConditionEstimate {
        cell: cell.clone(),
        values,
        orientation: Orientation::EasierIsLarger,
        excluded,
    }
}

/// Wraps fitted Bradley-Terry strengths as a condition estimate.
pub fn pairwise_condition_estimate(
    cell: &DesignCell,
    item_ids: &[String],
    lambda: &[f64],
) -> ConditionEstimate {
    ConditionEstimate {
        cell: cell.clone(),
        values: item_ids
            .iter()
            .cloned()
            .zip(lambda.iter().copied())
            .collect(),
        orientation: Orientation::HarderIsLarger,
        excluded: BTreeMap::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elicit::{DecisionType, JudgementFormat, PromptingStrategy, RecordUsage};
    use proptest::prelude::*;
    use rand::Rng;

    fn cell(model: &str, format: JudgementFormat, domain: Domain) -> DesignCell {
        DesignCell {
            model: model.into(),
            format,
            decision: DecisionType::Hard,
            prompting: PromptingStrategy::ZeroShot,
            domain,
        }
    }

    #[test]
    fn identity_and_reversal() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| v * 2.0 + 1.0).collect();
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert!((spearman(&x, &rev).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn tied_ranks_match_the_hand_computed_value() {
        // ranks of x: 1, 2.5, 2.5, 4; ranks of y: 1, 3, 2, 4
        let x = [1.0, 2.0, 2.0, 4.0];
        let y = [1.0, 3.0, 2.0, 4.0];
        let expected = 4.5 / (4.5f64 * 5.0).sqrt();
        assert!((spearman(&x, &y).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn constant_vector_is_an_error() {
        let x = [1.0, 1.0, 1.0, 1.0];
        let y = [1.0, 2.0, 3.0, 4.0];
        assert!(matches!(spearman(&x, &y), Err(Error::ConstantVector)));
        assert!(matches!(spearman(&y, &x), Err(Error::ConstantVector)));
    }

    proptest! {
        #[test]
        fn invariant_under_strictly_increasing_transforms(
            xs in proptest::collection::vec(-50.0f64..50.0, 5..30),
            ys in proptest::collection::vec(-50.0f64..50.0, 5..30),
        ) {
            let n = xs.len().min(ys.len());
            let (xs, ys) = (&xs[..n], &ys[..n]);
            let base = match spearman(xs, ys) {
                Ok(r) => r,
                Err(_) => return Ok(()),
            };
            let ex: Vec<f64> = xs.iter().map(|v| (v / 10.0).exp()).collect();
            let cy: Vec<f64> = ys.iter().map(|v| v.powi(3)).collect();
            prop_assert!((spearman(&ex, ys).unwrap() - base).abs() < 1e-12);
            prop_assert!((spearman(xs, &cy).unwrap() - base).abs() < 1e-12);
        }
    }

    fn criterion(n: usize) -> BTreeMap<String, f64> {
        (0..n)
            .map(|i| (format!("i{i:02}"), 0.1 + 0.8 * i as f64 / (n - 1) as f64))
            .collect()
    }

    #[test]
    fn orientation_aligns_all_three_estimate_kinds() {
        let crit = criterion(10);
        // absolute estimates equal to the criterion
        let absolute = ConditionEstimate {
            cell: cell("m", JudgementFormat::Absolute, Domain::Addition),
            values: crit.clone(),
            orientation: Orientation::EasierIsLarger,
            excluded: BTreeMap::new(),
        };
        let (_, est, c) = orient(&absolute, &crit).unwrap();
        assert!((spearman(&est, &c).unwrap() - 1.0).abs() < 1e-12);

        // strengths equal to the difficulty logit
        let lambda = ConditionEstimate {
            cell: cell("m", JudgementFormat::Pairwise, Domain::Addition),
            values: crit
                .iter()
                .map(|(k, &p)| (k.clone(), -(p / (1.0 - p)).ln()))
                .collect(),
            orientation: Orientation::HarderIsLarger,
            excluded: BTreeMap::new(),
        };
        let (_, est, c) = orient(&lambda, &crit).unwrap();
        assert!((spearman(&est, &c).unwrap() - 1.0).abs() < 1e-12);

        // anti-correlated input: claims harder-is-larger but tracks easiness
        let anti = ConditionEstimate {
            values: crit.clone(),
            ..lambda
        };
        let (_, est, c) = orient(&anti, &crit).unwrap();
        assert!((spearman(&est, &c).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn orienting_an_already_oriented_series_changes_nothing() {
        let crit = criterion(8);
        let first = ConditionEstimate {
            cell: cell("m", JudgementFormat::Pairwise, Domain::Addition),
            values: crit.iter().map(|(k, &p)| (k.clone(), 1.0 - p)).collect(),
            orientation: Orientation::HarderIsLarger,
            excluded: BTreeMap::new(),
        };
        let (ids, est, _) = orient(&first, &crit).unwrap();
        let second = ConditionEstimate {
            values: ids.iter().cloned().zip(est.iter().copied()).collect(),
            ..first.clone()
        };
        let (_, est2, _) = orient(&second, &crit).unwrap();
        assert_eq!(est, est2);
    }

    fn synthetic_domain(domain: Domain, seed: u64, noise: f64) -> DomainData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crit = criterion(60);
        let noisy = |rng: &mut ChaCha8Rng| -> BTreeMap<String, f64> {
            crit.iter()
                .map(|(k, &p)| (k.clone(), p + noise * (rng.gen::<f64>() - 0.5)))
                .collect()
        };
        let estimates = vec![
            ConditionEstimate {
                cell: cell("m1", JudgementFormat::Absolute, domain),
                values: noisy(&mut rng),
                orientation: Orientation::EasierIsLarger,
                excluded: BTreeMap::new(),
            },
            ConditionEstimate {
                cell: cell("m2", JudgementFormat::Absolute, domain),
                values: noisy(&mut rng),
                orientation: Orientation::EasierIsLarger,
                excluded: BTreeMap::new(),
            },
        ];
        DomainData {
            domain,
            criterion_expected_p: crit,
            estimates,
        }
    }

    fn two_domains() -> Vec<DomainData> {
        vec![
            synthetic_domain(Domain::Addition, 1, 0.3),
            synthetic_domain(Domain::Division, 2, 0.3),
        ]
    }

    #[test]
    fn same_seed_gives_bit_identical_results() {
        let domains = two_domains();
        let config = AnalysisConfig {
            b_iterations: 200,
            seed: 9,
            ..AnalysisConfig::default()
        };
        let a = bootstrap_analysis(&domains, &[], &config).unwrap();
        let b = bootstrap_analysis(&domains, &[], &config).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
    }

    #[test]
    fn parallel_and_serial_execution_agree() {
        let domains = two_domains();
        let base = AnalysisConfig {
            b_iterations: 100,
            seed: 4,
            ..AnalysisConfig::default()
        };
        let par = bootstrap_analysis(&domains, &[], &base).unwrap();
        let ser = bootstrap_analysis(
            &domains,
            &[],
            &AnalysisConfig {
                parallel: false,
                ..base
            },
        )
        .unwrap();
        assert_eq!(
            serde_json::to_vec(&par).unwrap(),
            serde_json::to_vec(&ser).unwrap()
        );
    }

    #[test]
    fn point_estimates_equal_direct_spearman() {
        let domains = two_domains();
        let config = AnalysisConfig {
            b_iterations: 10,
            seed: 1,
            ..AnalysisConfig::default()
        };
        let result = bootstrap_analysis(&domains, &[], &config).unwrap();
        for summary in &result.conditions {
            let mut direct = Vec::new();
            for dom in &domains {
                let estimate = dom
                    .estimates
                    .iter()
                    .find(|e| e.condition_key() == summary.condition)
                    .unwrap();
                let (_, est, crit) = orient(estimate, &dom.criterion_expected_p).unwrap();
                direct.push(spearman(&est, &crit).unwrap());
            }
            let mean = direct.iter().sum::<f64>() / direct.len() as f64;
            assert!((summary.mean_r_s - mean).abs() < 1e-12);
            for (domain, r) in &summary.r_s_by_domain {
                let k = if *domain == Domain::Addition { 0 } else { 1 };
                assert!((r - direct[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sentinel_condition_scores_one_in_every_iteration() {
        let mut domains = two_domains();
        for dom in &mut domains {
            dom.estimates.push(ConditionEstimate {
                cell: cell("sentinel", JudgementFormat::Absolute, dom.domain),
                values: dom.criterion_expected_p.clone(),
                orientation: Orientation::EasierIsLarger,
                excluded: BTreeMap::new(),
            });
        }
        let config = AnalysisConfig {
            b_iterations: 300,
            seed: 2,
            keep_iteration_means: true,
            ..AnalysisConfig::default()
        };
        let result = bootstrap_analysis(&domains, &[], &config).unwrap();
        let sentinel_key = domains[0].estimates[2].condition_key();
        let series = &result.iteration_means.unwrap()[&sentinel_key];
        assert_eq!(series.len(), result.b_used);
        assert!(series.iter().all(|r| (r - 1.0).abs() < 1e-12));
    }

    #[test]
    fn self_contrast_is_exactly_zero() {
        let domains = two_domains();
        let key = domains[0].estimates[0].condition_key();
        let spec = ContrastSpec {
            name: "self".into(),
            a_conditions: vec![key.clone()],
            b_conditions: vec![key],
        };
        let config = AnalysisConfig {
            b_iterations: 100,
            seed: 3,
            ..AnalysisConfig::default()
        };
        let result = bootstrap_analysis(&domains, &[spec], &config).unwrap();
        let c = &result.contrasts[0];
        assert_eq!(c.delta, 0.0);
        assert_eq!(c.ci, (0.0, 0.0));
        assert!(!c.excludes_zero);
    }

    #[test]
    fn cleaner_condition_beats_noisier_condition() {
        // m1 gets low noise, m2 high noise, in both domains
        let make = |domain: Domain, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let crit = criterion(60);
            let noisy = |rng: &mut ChaCha8Rng, sd: f64| -> BTreeMap<String, f64> {
                crit.iter()
                    .map(|(k, &p)| (k.clone(), p + sd * (rng.gen::<f64>() - 0.5)))
                    .collect()
            };
            let estimates = vec![
                ConditionEstimate {
                    cell: cell("m1", JudgementFormat::Absolute, domain),
                    values: noisy(&mut rng, 0.05),
                    orientation: Orientation::EasierIsLarger,
                    excluded: BTreeMap::new(),
                },
                ConditionEstimate {
                    cell: cell("m2", JudgementFormat::Absolute, domain),
                    values: noisy(&mut rng, 1.5),
                    orientation: Orientation::EasierIsLarger,
                    excluded: BTreeMap::new(),
                },
            ];
            DomainData {
                domain,
                criterion_expected_p: crit,
                estimates,
            }
        };
        let domains = vec![make(Domain::Addition, 10), make(Domain::Division, 11)];
        let a_key = domains[0].estimates[0].condition_key();
        let b_key = domains[0].estimates[1].condition_key();
        let spec = ContrastSpec {
            name: "clean-vs-noisy".into(),
            a_conditions: vec![a_key],
            b_conditions: vec![b_key],
        };
        let config = AnalysisConfig {
            b_iterations: 2000,
            seed: 12,
            ..AnalysisConfig::default()
        };
        let result = bootstrap_analysis(&domains, &[spec], &config).unwrap();
        let c = &result.contrasts[0];
        assert!(c.delta > 0.0);
        assert!(c.excludes_zero, "CI {:?} should exclude zero", c.ci);
    }

    fn usage_record(model: &str, domain: Domain, prompt: u64, completion: u64) -> JudgementRecord {
        JudgementRecord {
            key: format!("{model}|{domain:?}|{prompt}"),
            cell: cell(model, JudgementFormat::Absolute, domain),
            item_ids: vec!["i".into()],
            raw_text: "[[0.5]]".into(),
            parsed: Some(0.5),
            decision_candidates: vec![],
            soft: None,
            attempts: 1,
            usage: RecordUsage {
                prompt_tokens: prompt,
                completion_tokens: completion,
                latency_ms: 500,
            },
        }
    }

    fn profiles() -> BTreeMap<String, BackendProfile> {
        [("m1", 0.005, 0.015), ("m2", 0.001, 0.002)]
            .into_iter()
            .map(|(name, pp, pc)| {
                (
                    name.to_string(),
                    BackendProfile {
                        name: name.into(),
                        base_url: String::new(),
                        model: name.into(),
                        auth_env_var: String::new(),
                        top_k_limit: 10,
                        supports_logprobs: true,
                        price_per_1k_prompt_tokens: pp,
                        price_per_1k_completion_tokens: pc,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn cost_totals_match_a_hand_sum() {
        let records = vec![
            usage_record("m1", Domain::Addition, 1000, 200),
            usage_record("m1", Domain::Addition, 3000, 400),
            usage_record("m2", Domain::Addition, 500, 100),
        ];
        let report = cost_report(&records, &profiles()).unwrap();
        let m1 = &report[&records[0].cell.key()];
        assert_eq!(m1.judgements, 2);
        assert_eq!(m1.prompt_tokens, 4000);
        assert_eq!(m1.completion_tokens, 600);
        assert!((m1.total_time_s - 1.0).abs() < 1e-12);
        assert!((m1.cost - (4.0 * 0.005 + 0.6 * 0.015)).abs() < 1e-12);
        let m2 = &report[&records[2].cell.key()];
        assert!((m2.cost - (0.5 * 0.001 + 0.1 * 0.002)).abs() < 1e-12);
    }

    #[test]
    fn empty_input_yields_an_empty_report() {
        assert!(cost_report(&[], &profiles()).unwrap().is_empty());
    }

    #[test]
    fn missing_usage_is_counted_not_zeroed() {
        let mut record = usage_record("m1", Domain::Addition, 0, 0);
        record.usage.latency_ms = 0;
        let report = cost_report(&[record.clone()], &profiles()).unwrap();
        let line = &report[&record.cell.key()];
        assert_eq!(line.judgements, 1);
        assert_eq!(line.missing_usage, 1);
        assert_eq!(line.cost, 0.0);
    }

    #[test]
    fn cost_report_is_additive_over_partitions() {
        let records: Vec<JudgementRecord> = (0..10)
            .map(|i| usage_record("m1", Domain::Addition, 100 + i * 13, 10 + i))
            .collect();
        let whole = cost_report(&records, &profiles()).unwrap();
        let left = cost_report(&records[..4], &profiles()).unwrap();
        let right = cost_report(&records[4..], &profiles()).unwrap();
        let key = records[0].cell.key();
        assert_eq!(
            whole[&key].prompt_tokens,
            left[&key].prompt_tokens + right[&key].prompt_tokens
        );
        assert!(
            (whole[&key].cost - (left[&key].cost + right[&key].cost)).abs() < 1e-12
        );
        assert_eq!(
            whole[&key].judgements,
            left[&key].judgements + right[&key].judgements
        );
    }
}
