//! Prompt construction, judgement scheduling, output parsing, and the
//! elicitation runner including the confident-one resampling protocol.

pub mod parse;
pub mod prompts;
pub mod run;
pub mod schedule;

pub use parse::{parse_bracket_output, ParsedValue};
pub use prompts::{build_prompt, AnchorInput, PromptBundle, PromptInputs, PromptTemplate};
pub use run::{
    resolve_case_b, run_cell, CaseBConfig, CaseBOutcome, ElicitConfig, JudgementLog,
    JudgementRecord, RecordUsage, SoftValue,
};
pub use schedule::{schedule_pairs, PairSchedule};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgementFormat {
    Absolute,
    Pairwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionType {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptingStrategy {
    ZeroShot,
    FewShot,
}

/// One cell of the 2x2x2 factorial design for one model and domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignCell {
    pub model: String,
    pub format: JudgementFormat,
    pub decision: DecisionType,
    pub prompting: PromptingStrategy,
    pub domain: crate::pipeline::Domain,
}

impl DesignCell {
    /// Stable identifier used to key judgement logs and manifests.
    pub fn key(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}",
            self.model,
            match self.format {
                JudgementFormat::Absolute => "absolute",
                JudgementFormat::Pairwise => "pairwise",
            },
            match self.decision {
                DecisionType::Hard => "hard",
                DecisionType::Soft => "soft",
            },
            match self.prompting {
                PromptingStrategy::ZeroShot => "zero_shot",
                PromptingStrategy::FewShot => "few_shot",
            },
            self.domain.label(),
        )
    }

    pub fn template(&self) -> PromptTemplate {
        match (self.format, self.prompting) {
            (JudgementFormat::Absolute, PromptingStrategy::ZeroShot) => PromptTemplate::A,
            (JudgementFormat::Absolute, PromptingStrategy::FewShot) => PromptTemplate::B,
            (JudgementFormat::Pairwise, PromptingStrategy::ZeroShot) => PromptTemplate::C,
            (JudgementFormat::Pairwise, PromptingStrategy::FewShot) => PromptTemplate::D,
        }
    }
}
