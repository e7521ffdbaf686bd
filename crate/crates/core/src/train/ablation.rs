//! Single-component ablations of the full model.

use crate::error::{Error, Result};
use crate::mapper::MapperVariant;
use crate::nn::ParamStore;
use crate::prompting::{DynamicPromptConfig, ReportChoice};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ablation {
    Full,
    /// Fixed option order and the top report during training.
    NoDynamicPrompt,
    /// No retrieved report in any prompt.
    NoReport,
    /// Prefix is the linear projection plus lead positions, without the
    /// transformer layers.
    NoMapper,
    /// Prefix omits the lead positional rows.
    NoPositional,
    /// Decoder and its adapters receive no updates.
    FrozenDecoder,
    /// Encoder and lead positional layer receive no updates.
    FrozenEncoder,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::NoDynamicPrompt,
        Ablation::NoReport,
        Ablation::NoMapper,
        Ablation::NoPositional,
        Ablation::FrozenDecoder,
        Ablation::FrozenEncoder,
    ];

    /// Command-line name.
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoDynamicPrompt => "no-dp",
            Ablation::NoReport => "no-report",
            Ablation::NoMapper => "no-mapper",
            Ablation::NoPositional => "no-pos",
            Ablation::FrozenDecoder => "frozen-llm",
            Ablation::FrozenEncoder => "frozen-encoder",
        }
    }

    /// Row label in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "Full",
            Ablation::NoDynamicPrompt => "W/o DP",
            Ablation::NoReport => "W/o Retrieval Report",
            Ablation::NoMapper => "W/o ET-Mapper",
            Ablation::NoPositional => "W/o Pos-Encoder",
            Ablation::FrozenDecoder => "Frozen LLM",
            Ablation::FrozenEncoder => "Frozen ECG Encoder",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation {s:?}")))
    }

    pub fn mapper_variant(self) -> MapperVariant {
        match self {
            Ablation::NoMapper => MapperVariant::LinearOnly,
            Ablation::NoPositional => MapperVariant::NoSkip,
            _ => MapperVariant::Full,
        }
    }

    pub fn train_prompting(self, seed: u64) -> DynamicPromptConfig {
        match self {
            Ablation::NoDynamicPrompt => DynamicPromptConfig::evaluation(),
            Ablation::NoReport => DynamicPromptConfig {
                report_choice: ReportChoice::None,
                ..DynamicPromptConfig::training(seed)
            },
            _ => DynamicPromptConfig::training(seed),
        }
    }

    pub fn eval_prompting(self) -> DynamicPromptConfig {
        match self {
            Ablation::NoReport => DynamicPromptConfig {
                report_choice: ReportChoice::None,
                ..DynamicPromptConfig::evaluation()
            },
            _ => DynamicPromptConfig::evaluation(),
        }
    }

    pub fn apply_trainable<T: crate::nn::Scalar>(self, store: &mut ParamStore<T>) {
        match self {
            Ablation::FrozenDecoder => store.set_trainable("decoder.", false),
            Ablation::FrozenEncoder => {
                store.set_trainable("encoder.", false);
                store.set_trainable("lead_pos.", false);
            }
            _ => {}
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_roundtrip() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()).unwrap(), a);
        }
        assert!(Ablation::parse("no-everything").is_err());
    }

    #[test]
    fn prompting_choices() {
        assert!(!Ablation::NoDynamicPrompt.train_prompting(1).shuffle);
        assert!(Ablation::Full.train_prompting(1).shuffle);
        assert_eq!(Ablation::NoReport.eval_prompting().report_choice, ReportChoice::None);
        assert_eq!(Ablation::NoReport.train_prompting(1).report_choice, ReportChoice::None);
    }
}
