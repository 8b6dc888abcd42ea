use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Relation types kept when building entailment pairs.
pub const DEFAULT_WHITELIST: [&str; 9] = [
    "HasProperty",
    "CapableOf",
    "Desires",
    "xNeed",
    "xAttr",
    "xEffect",
    "xReact",
    "xWant",
    "xIntent",
];

/// Relevance tag for facts that hold for the statement on its own.
pub const RELEVANT_WITHOUT_CONTEXT: &str = "RPA";

/// One statement/fact pair from a fact-linking corpus.
///
/// `relation` is absent for pairs that were never linked; `relevance` is the
/// linking label (`RPA` when the fact is relevant to the statement alone).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactLinkRecord {
    pub statement: String,
    pub fact: String,
    #[serde(default)]
    pub relation: Option<String>,
    #[serde(default)]
    pub relevance: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NliLabel {
    Entailment,
    NoEntailment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliExample {
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NliBuildOptions {
    pub whitelist: BTreeSet<String>,
    /// Premises that must not appear in the output (held-out test utterances).
    pub blocklist: BTreeSet<String>,
}

impl Default for NliBuildOptions {
    fn default() -> Self {
        NliBuildOptions {
            whitelist: DEFAULT_WHITELIST.iter().map(|s| s.to_string()).collect(),
            blocklist: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliBuildReport {
    pub kept: usize,
    pub positives: usize,
    pub negatives: usize,
    pub malformed: usize,
    pub excluded_relation: usize,
    pub excluded_relevance: usize,
    pub dropped_leakage: usize,
}

pub fn build_nli_dataset(
    records: &[FactLinkRecord],
    options: &NliBuildOptions,
) -> (Vec<NliExample>, NliBuildReport) {
    let mut report = NliBuildReport::default();
    let mut out = Vec::new();
    for r in records {
        let premise = r.statement.trim();
        let hypothesis = r.fact.trim();
        if premise.is_empty() || hypothesis.is_empty() {
            report.malformed += 1;
            continue;
        }
        if options.blocklist.contains(premise) {
            report.dropped_leakage += 1;
            continue;
        }
        let relation = r.relation.as_deref().map(str::trim).filter(|s| !s.is_empty());
        let label = match relation {
            None => NliLabel::NoEntailment,
            Some(rel) if !options.whitelist.contains(rel) => {
                report.excluded_relation += 1;
                continue;
            }
            Some(_) => {
                if r.relevance.as_deref().map(str::trim) != Some(RELEVANT_WITHOUT_CONTEXT) {
                    report.excluded_relevance += 1;
                    continue;
                }
                NliLabel::Entailment
            }
        };
        match label {
            NliLabel::Entailment => report.positives += 1,
            NliLabel::NoEntailment => report.negatives += 1,
        }
        out.push(NliExample {
            premise: premise.to_string(),
            hypothesis: hypothesis.to_string(),
            label,
        });
    }
    if report.malformed > 0 {
        log::warn!("skipped {} malformed fact-linking record(s)", report.malformed);
    }
    report.kept = out.len();
    (out, report)
}
