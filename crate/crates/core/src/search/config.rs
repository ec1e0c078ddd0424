use serde::{Deserialize, Serialize};

use super::SearchError;
use crate::gateway::{POLICY_INPUT_BUDGET, VALUE_INPUT_BUDGET};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Exploration on, answers graded against ground truth.
    Collection,
    /// Value-guided, answers scored by the value estimator.
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorBudgetMode {
    /// Count resets after every successful cell.
    Consecutive,
    /// Every failed cell on the path counts.
    Total,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    Uniform,
    /// Normalized exp(mean token log-probability); uniform if any candidate
    /// lacks log-probabilities.
    Logprob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalSelection {
    None,
    MajorityVote,
    ValueMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSettings {
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub phase: Phase,
    pub c_puct: f64,
    pub max_iterations: u32,
    pub max_depth: usize,
    pub k_expansions: usize,
    pub max_consecutive_errors: u32,
    pub error_budget_mode: ErrorBudgetMode,
    pub max_input_tokens: usize,
    pub value_input_tokens: usize,
    pub prior_mode: PriorMode,
    pub reward_correct: f64,
    pub reward_failure: f64,
    pub default_backprop_value: f64,
    /// Re-visits of a terminal node before it drops out of descent.
    pub terminal_revisit_limit: u32,
    /// Stop once this many answer nodes agree on the same labels.
    pub early_stop_agreement: Option<usize>,
    pub final_selection: FinalSelection,
    /// Execute the K code candidates of one expansion concurrently.
    pub parallel_exec: bool,
    pub sampling: SamplingSettings,
}

impl SearchConfig {
    pub fn collection() -> Self {
        Self {
            phase: Phase::Collection,
            c_puct: 1.25,
            max_iterations: 50,
            max_depth: 10,
            k_expansions: 3,
            max_consecutive_errors: 3,
            error_budget_mode: ErrorBudgetMode::Consecutive,
            max_input_tokens: POLICY_INPUT_BUDGET,
            value_input_tokens: VALUE_INPUT_BUDGET,
            prior_mode: PriorMode::Uniform,
            reward_correct: 1.0,
            reward_failure: -1.0,
            default_backprop_value: 0.0,
            terminal_revisit_limit: 2,
            early_stop_agreement: None,
            final_selection: FinalSelection::None,
            parallel_exec: true,
            sampling: SamplingSettings { temperature: 1.0, top_p: 0.95, max_output_tokens: 8192 },
        }
    }

    pub fn inference() -> Self {
        Self {
            phase: Phase::Inference,
            c_puct: 0.0,
            max_iterations: 40,
            final_selection: FinalSelection::MajorityVote,
            sampling: SamplingSettings { temperature: 0.7, top_p: 0.95, max_output_tokens: 8192 },
            ..Self::collection()
        }
    }

    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Collection => Self::collection(),
            Phase::Inference => Self::inference(),
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::InvalidConfig(m.to_string()));
        if self.max_depth < 1 {
            return bad("max_depth must be >= 1");
        }
        if self.k_expansions < 1 {
            return bad("k_expansions must be >= 1");
        }
        if self.c_puct.is_nan() || self.c_puct < 0.0 {
            return bad("c_puct must be >= 0");
        }
        if self.max_consecutive_errors < 1 {
            return bad("max_consecutive_errors must be >= 1");
        }
        if !(self.sampling.top_p > 0.0 && self.sampling.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        if self.sampling.temperature.is_nan() || self.sampling.temperature < 0.0 {
            return bad("temperature must be >= 0");
        }
        for (name, v) in [
            ("reward_correct", self.reward_correct),
            ("reward_failure", self.reward_failure),
            ("default_backprop_value", self.default_backprop_value),
        ] {
            if !(-1.0..=1.0).contains(&v) {
                return bad(&format!("{name} must be within [-1, 1]"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_defaults() {
        let c = SearchConfig::collection();
        assert_eq!((c.max_iterations, c.max_depth, c.k_expansions, c.c_puct), (50, 10, 3, 1.25));
        assert_eq!((c.sampling.temperature, c.sampling.top_p), (1.0, 0.95));
        let i = SearchConfig::inference();
        assert_eq!((i.max_iterations, i.max_depth, i.k_expansions, i.c_puct), (40, 10, 3, 0.0));
        assert_eq!(i.sampling.temperature, 0.7);
        assert_eq!(i.max_input_tokens, 100_000);
        assert_eq!(i.value_input_tokens, 8_000);
        assert!(c.validate().is_ok() && i.validate().is_ok());
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = SearchConfig::inference();
        c.max_depth = 0;
        assert!(c.validate().is_err());
        let mut c = SearchConfig::inference();
        c.k_expansions = 0;
        assert!(c.validate().is_err());
        let mut c = SearchConfig::inference();
        c.c_puct = f64::NAN;
        assert!(c.validate().is_err());
    }
}
