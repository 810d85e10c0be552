//! Declarative run configuration. One TOML file drives every stage; flags
//! only select the config and filter cells. Unknown keys are rejected and
//! every random draw traces back to a named seed in this file.

use itemcal::elicit::{CaseBConfig, DecisionType, DesignCell, ElicitConfig, JudgementFormat, PromptingStrategy};
use itemcal::gateway::BackendProfile;
use itemcal::pipeline::{Domain, FilterConfig, SessionRule, SyntheticSpec};
use itemcal::{Error, Result};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub session: SessionSection,
    pub sampling: SamplingSection,
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub calibrate: CalibrateSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub elicit: ElicitSection,
    pub analysis: AnalysisSection,
    pub cells: Vec<CellSpec>,
    pub backends: BTreeMap<String, BackendSpec>,
    #[serde(default)]
    pub synthetic: Vec<SyntheticSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub response_log: PathBuf,
    pub item_bank: PathBuf,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
}

impl Paths {
    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("cache"))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub min_item_responses: usize,
    pub min_user_tasks: usize,
    pub max_user_tasks: usize,
    /// Domain label to grade; unlisted domains use their default grade.
    #[serde(default)]
    pub grades: BTreeMap<String, i32>,
}

impl Default for FilterSection {
    fn default() -> Self {
        let base = FilterConfig::default();
        Self {
            min_item_responses: base.min_item_responses,
            min_user_tasks: base.min_user_tasks,
            max_user_tasks: base.max_user_tasks,
            grades: BTreeMap::new(),
        }
    }
}

impl FilterSection {
    pub fn to_filter_config(&self) -> Result<FilterConfig> {
        let mut config = FilterConfig {
            min_item_responses: self.min_item_responses,
            min_user_tasks: self.min_user_tasks,
            max_user_tasks: self.max_user_tasks,
            ..FilterConfig::default()
        };
        for (label, grade) in &self.grades {
            let domain: Domain = label.parse()?;
            config.grade_for.insert(domain, *grade);
        }
        Ok(config)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSection {
    pub gap_minutes: i64,
    pub min_unique_items: usize,
}

impl Default for SessionSection {
    fn default() -> Self {
        let base = SessionRule::default();
        Self {
            gap_minutes: base.gap_minutes,
            min_unique_items: base.min_unique_items,
        }
    }
}

impl SessionSection {
    pub fn to_rule(&self) -> SessionRule {
        SessionRule {
            gap_minutes: self.gap_minutes,
            min_unique_items: self.min_unique_items,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub domains: Vec<String>,
    pub n_per_stratum: usize,
    pub seed: u64,
}

impl SamplingSection {
    pub fn domains(&self) -> Result<Vec<Domain>> {
        self.domains.iter().map(|d| d.parse()).collect()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct CalibrateSection {
    pub quadrature_nodes: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        Self {
            quadrature_nodes: 60,
            tol: 1e-5,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct FitSection {
    /// Per ordered pair, added to the win counts before fitting.
    pub smoothing: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            smoothing: 0.5,
            tol: 1e-10,
            max_iter: 1000,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct ElicitSection {
    pub retry_max: u32,
    pub parallelism: usize,
    pub temperature: f64,
    pub top_logprobs: u32,
    pub case_b: CaseBSection,
}

impl Default for ElicitSection {
    fn default() -> Self {
        let base = ElicitConfig::default();
        Self {
            retry_max: base.retry_max,
            parallelism: base.parallelism,
            temperature: base.temperature,
            top_logprobs: base.top_logprobs,
            case_b: CaseBSection::default(),
        }
    }
}

impl ElicitSection {
    pub fn to_elicit_config(&self) -> ElicitConfig {
        ElicitConfig {
            retry_max: self.retry_max,
            parallelism: self.parallelism,
            temperature: self.temperature,
            top_logprobs: self.top_logprobs,
            case_b: CaseBConfig {
                conf_threshold: self.case_b.conf_threshold,
                max_attempts: self.case_b.max_attempts,
                fallback_frac: self.case_b.fallback_frac,
            },
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct CaseBSection {
    pub conf_threshold: f64,
    pub max_attempts: u32,
    pub fallback_frac: f64,
}

impl Default for CaseBSection {
    fn default() -> Self {
        let base = CaseBConfig::default();
        Self {
            conf_threshold: base.conf_threshold,
            max_attempts: base.max_attempts,
            fallback_frac: base.fallback_frac,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub b_iterations: usize,
    pub seed: u64,
}

/// One design-cell family; crossed with `sampling.domains` at run time.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub model: String,
    pub format: JudgementFormat,
    pub decision: DecisionType,
    pub prompting: PromptingStrategy,
}

impl CellSpec {
    pub fn cell(&self, domain: Domain) -> DesignCell {
        DesignCell {
            model: self.model.clone(),
            format: self.format,
            decision: self.decision,
            prompting: self.prompting,
            domain,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// OpenAI-protocol chat-completion endpoint.
    Openai {
        base_url: String,
        auth_env_var: String,
        top_k_limit: u32,
        supports_logprobs: bool,
        #[serde(default)]
        price_per_1k_prompt_tokens: f64,
        #[serde(default)]
        price_per_1k_completion_tokens: f64,
        #[serde(default = "default_timeout_s")]
        timeout_seconds: u64,
    },
    /// Offline deterministic judge driven by a synthetic truth file.
    Mock {
        truth: PathBuf,
        tau: f64,
        digit_spread: f64,
        seed: u64,
    },
}

fn default_timeout_s() -> u64 {
    120
}

impl BackendSpec {
    pub fn profile(&self, model: &str) -> BackendProfile {
        match self {
            BackendSpec::Openai {
                base_url,
                auth_env_var,
                top_k_limit,
                supports_logprobs,
                price_per_1k_prompt_tokens,
                price_per_1k_completion_tokens,
                ..
            } => BackendProfile {
                name: model.to_string(),
                base_url: base_url.clone(),
                model: model.to_string(),
                auth_env_var: auth_env_var.clone(),
                top_k_limit: *top_k_limit,
                supports_logprobs: *supports_logprobs,
                price_per_1k_prompt_tokens: *price_per_1k_prompt_tokens,
                price_per_1k_completion_tokens: *price_per_1k_completion_tokens,
            },
            BackendSpec::Mock { .. } => BackendProfile {
                name: model.to_string(),
                base_url: String::new(),
                model: model.to_string(),
                auth_env_var: String::new(),
                top_k_limit: 10,
                supports_logprobs: true,
                price_per_1k_prompt_tokens: 0.0,
                price_per_1k_completion_tokens: 0.0,
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let raw = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let text = std::str::from_utf8(&raw)
            .map_err(|e| Error::Config(format!("{} is not UTF-8: {e}", path.display())))?;
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok((config, raw))
    }

    fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config("no design cells configured".into()));
        }
        for cell in &self.cells {
            if !self.backends.contains_key(&cell.model) {
                return Err(Error::Config(format!(
                    "cell references unknown backend {:?}",
                    cell.model
                )));
            }
        }
        self.sampling.domains()?;
        if self.sampling.domains.is_empty() {
            return Err(Error::Config("no sampling domains configured".into()));
        }
        Ok(())
    }
}
