//! Pipeline stages. Each stage reads its predecessor's artifacts, writes its
//! own into the output directory, and records input and artifact digests in
//! the manifest so unchanged stages are skipped on rerun.

use crate::config::{BackendSpec, RunConfig};
use crate::manifest::{digest_bytes, digest_file, RunManifest};
use itemcal::analysis::{
    absolute_condition_estimate, bootstrap_analysis, cost_report, pairwise_condition_estimate,
    AnalysisConfig, AnalysisResult, ConditionEstimate, ContrastSpec, DomainData,
};
use itemcal::bt::{bt_fit, win_matrix_from_judgements, BtConfig};
use itemcal::elicit::{
    run_cell, schedule_pairs, DesignCell, JudgementFormat, JudgementLog, JudgementRecord,
    PairSchedule,
};
use itemcal::gateway::{
    BackendProfile, CachedClient, CompletionClient, DiskCache, HttpBackend, MockJudgeBackend,
    MockJudgeConfig, MockTruth,
};
use itemcal::pipeline::{
    filter_responses, generate_synthetic_logs, read_item_bank, read_response_log, sessionize,
    stratified_sample, write_item_bank, write_response_log, Domain, ItemBankEntry, ResponseRecord,
    SessionizeStats, StratifiedSample, SyntheticTruth,
};
use itemcal::rasch::{expected_proportion_correct, rasch_em_fit, RaschConfig, RaschFit};
use itemcal::{Error, Result};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub struct StageCtx<'a> {
    pub config: &'a RunConfig,
    pub out: PathBuf,
    pub manifest: &'a mut RunManifest,
    /// Substring filter over cell keys (`--only`).
    pub only: Option<String>,
}

fn file_label(domain: Domain) -> String {
    domain.label().replace(' ', "_")
}

fn cell_file_key(cell: &DesignCell) -> String {
    cell.key().replace('|', "_").replace(' ', "-")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::StagePrecondition(format!("missing artifact {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Fitted pairwise strengths for one design cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BtArtifact {
    pub item_ids: Vec<String>,
    pub lambda: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Judgements ignored during matrix assembly (parse failures, unknown
    /// items).
    pub skipped: usize,
}

impl<'a> StageCtx<'a> {
    fn domains(&self) -> Result<Vec<Domain>> {
        self.config.sampling.domains()
    }

    /// Design cells crossed with domains, after the `--only` filter.
    fn selected_cells(&self) -> Result<Vec<DesignCell>> {
        let mut cells = Vec::new();
        for spec in &self.config.cells {
            for domain in self.domains()? {
                let cell = spec.cell(domain);
                if self
                    .only
                    .as_deref()
                    .is_none_or(|needle| cell.key().contains(needle))
                {
                    cells.push(cell);
                }
            }
        }
        if cells.is_empty() {
            return Err(Error::Config("cell filter matched nothing".into()));
        }
        Ok(cells)
    }

    fn matrix_path(&self, domain: Domain) -> PathBuf {
        self.out.join(format!("matrix_{}.json", file_label(domain)))
    }

    fn calibration_path(&self, domain: Domain) -> PathBuf {
        self.out
            .join(format!("calibration_{}.json", file_label(domain)))
    }

    fn sample_path(&self, domain: Domain) -> PathBuf {
        self.out.join(format!("sample_{}.json", file_label(domain)))
    }

    fn schedule_path(&self, domain: Domain) -> PathBuf {
        self.out
            .join(format!("schedule_{}.json", file_label(domain)))
    }

    fn judgement_path(&self, cell: &DesignCell) -> PathBuf {
        self.out
            .join("judgements")
            .join(format!("{}.jsonl", cell_file_key(cell)))
    }

    fn bt_path(&self, cell: &DesignCell) -> PathBuf {
        self.out.join(format!("bt_{}.json", cell_file_key(cell)))
    }

    fn run_stage(
        &mut self,
        stage: &str,
        input_digest: String,
        body: impl FnOnce(&Self) -> Result<Vec<PathBuf>>,
    ) -> Result<()> {
        if self.manifest.up_to_date(&self.out, stage, &input_digest) {
            log::info!("stage {stage}: inputs unchanged, skipping");
            self.manifest.mark_skipped(stage);
            self.manifest.save(&self.out)?;
            return Ok(());
        }
        let artifacts = body(self)?;
        self.manifest
            .record(&self.out, stage, input_digest, &artifacts, "ran")?;
        self.manifest.save(&self.out)?;
        log::info!("stage {stage}: done ({} artifacts)", artifacts.len());
        Ok(())
    }

    pub fn synth(&mut self) -> Result<()> {
        if self.config.synthetic.is_empty() {
            return Err(Error::Config(
                "no [[synthetic]] sections in the run configuration".into(),
            ));
        }
        let input = digest_bytes(&serde_json::to_vec(&self.config.synthetic)?);
        self.run_stage("synth", input, |ctx| {
            let mut records: Vec<ResponseRecord> = Vec::new();
            let mut bank: Vec<ItemBankEntry> = Vec::new();
            let mut truth = SyntheticTruth {
                difficulties: BTreeMap::new(),
                ability_sd: ctx.config.synthetic[0].ability_sd,
            };
            let mut seen = std::collections::BTreeSet::new();
            for spec in &ctx.config.synthetic {
                if !seen.insert(spec.domain) {
                    return Err(Error::Config(format!(
                        "duplicate synthetic domain {}",
                        spec.domain
                    )));
                }
                if spec.ability_sd != truth.ability_sd {
                    return Err(Error::Config(
                        "synthetic sections must share one ability_sd".into(),
                    ));
                }
                let (r, b, t) = generate_synthetic_logs(spec)?;
                records.extend(r);
                bank.extend(b);
                truth.difficulties.extend(t.difficulties);
            }
            let paths = &ctx.config.paths;
            for target in [&paths.response_log, &paths.item_bank] {
                if let Some(parent) = target.parent() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            write_response_log(&paths.response_log, &records)?;
            write_item_bank(&paths.item_bank, bank.iter())?;
            let truth_path = ctx.out.join("truth.json");
            write_json(&truth_path, &truth)?;
            Ok(vec![
                paths.response_log.clone(),
                paths.item_bank.clone(),
                truth_path,
            ])
        })
    }

    pub fn ingest(&mut self) -> Result<()> {
        let paths = &self.config.paths;
        let input = format!(
            "{}:{}",
            digest_file(&paths.response_log)?,
            digest_file(&paths.item_bank)?
        );
        self.run_stage("ingest", input, |ctx| {
            let records = read_response_log(&ctx.config.paths.response_log)?;
            let bank = read_item_bank(&ctx.config.paths.item_bank)?;
            let domains = ctx.domains()?;
            let in_scope: Vec<ResponseRecord> = records
                .into_iter()
                .filter(|r| domains.contains(&r.domain))
                .collect();
            let filter_config = ctx.config.filter.to_filter_config()?;
            let kept = filter_responses(&in_scope, &bank, &filter_config)?;
            let rule = ctx.config.session.to_rule();
            let mut artifacts = Vec::new();
            let mut stats: BTreeMap<String, SessionizeStats> = BTreeMap::new();
            for domain in domains {
                let domain_records: Vec<ResponseRecord> = kept
                    .iter()
                    .filter(|r| r.domain == domain)
                    .cloned()
                    .collect();
                let (matrix, s) = sessionize(&domain_records, &rule)?;
                let path = ctx.matrix_path(domain);
                write_json(&path, &matrix)?;
                artifacts.push(path);
                stats.insert(domain.label().to_string(), s);
            }
            let stats_path = ctx.out.join("ingest_stats.json");
            write_json(&stats_path, &stats)?;
            artifacts.push(stats_path);
            Ok(artifacts)
        })
    }

    pub fn calibrate(&mut self) -> Result<()> {
        self.manifest.require_stage(&self.out, "ingest")?;
        let mut input = String::new();
        for domain in self.domains()? {
            input.push_str(&digest_file(&self.matrix_path(domain))?);
        }
        self.run_stage("calibrate", input, |ctx| {
            let section = &ctx.config.calibrate;
            let rasch_config = RaschConfig {
                quadrature_nodes: section.quadrature_nodes,
                tol: section.tol,
                max_iter: section.max_iter,
                init_difficulties: None,
            };
            let mut artifacts = Vec::new();
            for domain in ctx.domains()? {
                let matrix = read_json(&ctx.matrix_path(domain))?;
                let fit = rasch_em_fit(&matrix, &rasch_config)?;
                let path = ctx.calibration_path(domain);
                write_json(&path, &fit)?;
                artifacts.push(path);
            }
            Ok(artifacts)
        })
    }

    pub fn sample(&mut self) -> Result<()> {
        self.manifest.require_stage(&self.out, "calibrate")?;
        let mut input = digest_file(&self.config.paths.item_bank)?;
        for domain in self.domains()? {
            input.push_str(&digest_file(&self.calibration_path(domain))?);
        }
        self.run_stage("sample", input, |ctx| {
            let bank = read_item_bank(&ctx.config.paths.item_bank)?;
            let mut artifacts = Vec::new();
            for domain in ctx.domains()? {
                let fit: RaschFit = read_json(&ctx.calibration_path(domain))?;
                let sample = stratified_sample(
                    &fit,
                    &bank,
                    domain,
                    ctx.config.sampling.n_per_stratum,
                    ctx.config.sampling.seed,
                )?;
                let schedule = schedule_pairs(&sample.item_ids(), ctx.config.schedule.seed)?;
                let sample_path = ctx.sample_path(domain);
                let schedule_path = ctx.schedule_path(domain);
                write_json(&sample_path, &sample)?;
                write_json(&schedule_path, &schedule)?;
                artifacts.push(sample_path);
                artifacts.push(schedule_path);
            }
            Ok(artifacts)
        })
    }

    fn build_client(&self, model: &str) -> Result<Box<dyn CompletionClient>> {
        let spec = self
            .config
            .backends
            .get(model)
            .ok_or_else(|| Error::Config(format!("unknown backend {model:?}")))?;
        let profile = spec.profile(model);
        match spec {
            BackendSpec::Openai {
                timeout_seconds, ..
            } => {
                let http = HttpBackend::new(
                    profile,
                    std::time::Duration::from_secs(*timeout_seconds),
                )?;
                let cache = DiskCache::open(self.config.paths.cache_dir())?;
                Ok(Box::new(CachedClient::new(http, cache)))
            }
            BackendSpec::Mock {
                truth,
                tau,
                digit_spread,
                seed,
            } => {
                let truth: SyntheticTruth = read_json(truth)?;
                let sd = truth.ability_sd;
                let mock_truth: BTreeMap<String, MockTruth> = truth
                    .difficulties
                    .iter()
                    .map(|(id, &b)| {
                        Ok((
                            id.clone(),
                            MockTruth {
                                difficulty_logit: b,
                                expected_p: expected_proportion_correct(b, sd)?,
                            },
                        ))
                    })
                    .collect::<Result<_>>()?;
                let bank = read_item_bank(&self.config.paths.item_bank)?;
                let texts = bank
                    .values()
                    .map(|e| (e.text.clone(), e.item_id.clone()))
                    .collect();
                Ok(Box::new(MockJudgeBackend::new(
                    mock_truth,
                    texts,
                    MockJudgeConfig {
                        tau: *tau,
                        digit_spread: *digit_spread,
                        seed: *seed,
                    },
                )))
            }
        }
    }

    pub fn elicit(&mut self) -> Result<()> {
        self.manifest.require_stage(&self.out, "sample")?;
        let cells = self.selected_cells()?;
        let mut input = digest_file(&self.config.paths.item_bank)?;
        for domain in self.domains()? {
            input.push_str(&digest_file(&self.sample_path(domain))?);
            input.push_str(&digest_file(&self.schedule_path(domain))?);
        }
        for cell in &cells {
            input.push('|');
            input.push_str(&cell.key());
        }
        self.run_stage("elicit", input, |ctx| {
            let bank = read_item_bank(&ctx.config.paths.item_bank)?;
            let elicit_config = ctx.config.elicit.to_elicit_config();
            let mut clients: BTreeMap<String, Box<dyn CompletionClient>> = BTreeMap::new();
            let mut artifacts = Vec::new();
            for cell in &cells {
                let sample: StratifiedSample = read_json(&ctx.sample_path(cell.domain))?;
                let schedule: Option<PairSchedule> = match cell.format {
                    JudgementFormat::Pairwise => {
                        Some(read_json(&ctx.schedule_path(cell.domain))?)
                    }
                    JudgementFormat::Absolute => None,
                };
                if !clients.contains_key(&cell.model) {
                    clients.insert(cell.model.clone(), ctx.build_client(&cell.model)?);
                }
                let client = clients[&cell.model].as_ref();
                let profile = ctx.config.backends[&cell.model].profile(&cell.model);
                let path = ctx.judgement_path(cell);
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                let mut log = JudgementLog::open(&path)?;
                run_cell(
                    cell,
                    &sample,
                    &bank,
                    schedule.as_ref(),
                    client,
                    &profile,
                    &elicit_config,
                    &mut log,
                )?;
                artifacts.push(path);
            }
            Ok(artifacts)
        })
    }

    /// Judgement records belonging to one cell, in log order.
    fn cell_records(&self, cell: &DesignCell) -> Result<Vec<JudgementRecord>> {
        let log = JudgementLog::open(self.judgement_path(cell))?;
        Ok(log.records().cloned().collect())
    }

    pub fn fit(&mut self) -> Result<()> {
        self.manifest.require_stage(&self.out, "elicit")?;
        let cells: Vec<DesignCell> = self
            .selected_cells()?
            .into_iter()
            .filter(|c| c.format == JudgementFormat::Pairwise)
            .collect();
        let mut input = String::new();
        for cell in &cells {
            input.push_str(&digest_file(&self.judgement_path(cell))?);
        }
        self.run_stage("fit", input, |ctx| {
            let bt_config = BtConfig {
                tol: ctx.config.fit.tol,
                max_iter: ctx.config.fit.max_iter,
                smoothing: ctx.config.fit.smoothing,
            };
            let mut artifacts = Vec::new();
            for cell in &cells {
                let sample: StratifiedSample = read_json(&ctx.sample_path(cell.domain))?;
                let item_ids = sample.item_ids();
                let records = ctx.cell_records(cell)?;
                let (w, skipped) =
                    win_matrix_from_judgements(&records, &item_ids, cell.decision)?;
                let result = bt_fit(&w, &bt_config)?;
                let path = ctx.bt_path(cell);
                write_json(
                    &path,
                    &BtArtifact {
                        item_ids,
                        lambda: result.lambda,
                        converged: result.converged,
                        iterations: result.iterations,
                        skipped,
                    },
                )?;
                artifacts.push(path);
            }
            Ok(artifacts)
        })
    }

    fn condition_estimate(&self, cell: &DesignCell) -> Result<ConditionEstimate> {
        match cell.format {
            JudgementFormat::Absolute => {
                Ok(absolute_condition_estimate(cell, &self.cell_records(cell)?))
            }
            JudgementFormat::Pairwise => {
                let artifact: BtArtifact = read_json(&self.bt_path(cell))?;
                Ok(pairwise_condition_estimate(
                    cell,
                    &artifact.item_ids,
                    &artifact.lambda,
                ))
            }
        }
    }

    /// One contrast per binary design factor present on both sides.
    fn factor_contrasts(condition_keys: &[String]) -> Vec<ContrastSpec> {
        let split = |needle: &str| -> (Vec<String>, Vec<String>) {
            let marker = format!("|{needle}");
            condition_keys
                .iter()
                .cloned()
                .partition(|k| k.contains(&marker))
        };
        [
            ("pairwise_vs_absolute", "pairwise|"),
            ("soft_vs_hard", "soft|"),
            ("few_shot_vs_zero_shot", "few_shot"),
        ]
        .iter()
        .filter_map(|(name, needle)| {
            let (a, b) = split(needle);
            (!a.is_empty() && !b.is_empty()).then(|| ContrastSpec {
                name: name.to_string(),
                a_conditions: a,
                b_conditions: b,
            })
        })
        .collect()
    }

    pub fn analyze(&mut self) -> Result<()> {
        self.manifest.require_stage(&self.out, "elicit")?;
        let cells = self.selected_cells()?;
        if cells.iter().any(|c| c.format == JudgementFormat::Pairwise) {
            self.manifest.require_stage(&self.out, "fit")?;
        }
        let mut input = String::new();
        for cell in &cells {
            let path = match cell.format {
                JudgementFormat::Pairwise => self.bt_path(cell),
                JudgementFormat::Absolute => self.judgement_path(cell),
            };
            input.push_str(&digest_file(&path)?);
        }
        self.run_stage("analyze", input, |ctx| {
            let mut domains_data = Vec::new();
            for domain in ctx.domains()? {
                let fit: RaschFit = read_json(&ctx.calibration_path(domain))?;
                let sample: StratifiedSample = read_json(&ctx.sample_path(domain))?;
                let sampled = sample.item_ids();
                let criterion: BTreeMap<String, f64> = fit
                    .item_ids
                    .iter()
                    .zip(&fit.expected_p)
                    .filter(|(id, _)| sampled.contains(id))
                    .map(|(id, &p)| (id.clone(), p))
                    .collect();
                let estimates = cells
                    .iter()
                    .filter(|c| c.domain == domain)
                    .map(|c| ctx.condition_estimate(c))
                    .collect::<Result<Vec<_>>>()?;
                domains_data.push(DomainData {
                    domain,
                    criterion_expected_p: criterion,
                    estimates,
                });
            }
            let mut condition_keys: Vec<String> = domains_data
                .iter()
                .flat_map(|d| d.estimates.iter().map(|e| e.condition_key()))
                .collect();
            condition_keys.sort();
            condition_keys.dedup();
            let contrasts = Self::factor_contrasts(&condition_keys);
            let result = bootstrap_analysis(
                &domains_data,
                &contrasts,
                &AnalysisConfig {
                    b_iterations: ctx.config.analysis.b_iterations,
                    seed: ctx.config.analysis.seed,
                    ..AnalysisConfig::default()
                },
            )?;
            let path = ctx.out.join("analysis.json");
            write_json(&path, &result)?;
            Ok(vec![path])
        })
    }

    pub fn report(&mut self) -> Result<()> {
        self.manifest.require_stage(&self.out, "analyze")?;
        let analysis_path = self.out.join("analysis.json");
        let cells = self.selected_cells()?;
        let mut input = digest_file(&analysis_path)?;
        for cell in &cells {
            input.push_str(&digest_file(&self.judgement_path(cell))?);
        }
        self.run_stage("report", input, |ctx| {
            let analysis: AnalysisResult = read_json(&analysis_path)?;
            let mut all_records = Vec::new();
            for cell in &cells {
                all_records.extend(ctx.cell_records(cell)?);
            }
            let profiles: BTreeMap<String, BackendProfile> = ctx
                .config
                .backends
                .iter()
                .map(|(model, spec)| (model.clone(), spec.profile(model)))
                .collect();
            let costs = cost_report(&all_records, &profiles)?;
            let path = ctx.out.join("report.md");
            std::fs::write(&path, render_report(&analysis, &costs, ctx.domains()?))?;
            Ok(vec![path])
        })
    }

    pub fn run_all(&mut self) -> Result<()> {
        if !self.config.synthetic.is_empty() {
            self.synth()?;
        }
        self.ingest()?;
        self.calibrate()?;
        self.sample()?;
        self.elicit()?;
        self.fit()?;
        self.analyze()?;
        self.report()
    }
}

fn render_report(
    analysis: &AnalysisResult,
    costs: &BTreeMap<String, itemcal::analysis::CostLine>,
    domains: Vec<Domain>,
) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    writeln!(out, "# Agreement report").unwrap();
    writeln!(out).unwrap();
    writeln!(
        out,
        "Bootstrap: {} requested, {} used, {} degenerate, seed {}.",
        analysis.b_requested, analysis.b_used, analysis.degenerate_iterations, analysis.seed
    )
    .unwrap();
    writeln!(out).unwrap();

    writeln!(out, "## Rank agreement by condition").unwrap();
    writeln!(out).unwrap();
    let mut header = String::from("| condition |");
    let mut rule = String::from("| --- |");
    for domain in &domains {
        write!(header, " {} |", domain.label()).unwrap();
        rule.push_str(" --- |");
    }
    header.push_str(" mean r_s | 95% CI |");
    rule.push_str(" --- | --- |");
    writeln!(out, "{header}").unwrap();
    writeln!(out, "{rule}").unwrap();
    for summary in &analysis.conditions {
        write!(out, "| {} |", summary.condition).unwrap();
        for domain in &domains {
            match summary.r_s_by_domain.get(domain) {
                Some(r) => write!(out, " {r:.3} |").unwrap(),
                None => write!(out, " - |").unwrap(),
            }
        }
        writeln!(
            out,
            " {:.3} | [{:.3}, {:.3}] |",
            summary.mean_r_s, summary.ci.0, summary.ci.1
        )
        .unwrap();
    }
    writeln!(out).unwrap();

    if !analysis.contrasts.is_empty() {
        writeln!(out, "## Condition contrasts").unwrap();
        writeln!(out).unwrap();
        writeln!(out, "| contrast | delta r_s | 95% CI | CI excludes 0 |").unwrap();
        writeln!(out, "| --- | --- | --- | --- |").unwrap();
        for contrast in &analysis.contrasts {
            writeln!(
                out,
                "| {} | {:.3} | [{:.3}, {:.3}] | {} |",
                contrast.name,
                contrast.delta,
                contrast.ci.0,
                contrast.ci.1,
                if contrast.excludes_zero { "yes" } else { "no" }
            )
            .unwrap();
        }
        writeln!(out).unwrap();
    }

    writeln!(out, "## Cost").unwrap();
    writeln!(out).unwrap();
    writeln!(
        out,
        "| cell | judgements | missing usage | prompt tokens | completion tokens | time (s) | cost |"
    )
    .unwrap();
    writeln!(out, "| --- | --- | --- | --- | --- | --- | --- |").unwrap();
    for (key, line) in costs {
        writeln!(
            out,
            "| {key} | {} | {} | {} | {} | {:.1} | {:.4} |",
            line.judgements,
            line.missing_usage,
            line.prompt_tokens,
            line.completion_tokens,
            line.total_time_s,
            line.cost
        )
        .unwrap();
    }
    out
}
