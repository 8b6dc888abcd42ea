//! In-process lookup-table scorers, used for hermetic runs and as the
//! reference the remote backend is checked against.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoding::TokenScorer;
use crate::error::{Error, Result};
use crate::nli::{NliLogProbs, NliScorer};
use crate::vocab::{TokenId, Vocab};
use crate::LOGPROB_FLOOR;

pub const TABLE_SCHEMA_VERSION: u32 = 1;
const NORMALIZATION_TOLERANCE: f64 = 1e-6;

pub(crate) fn check_normalized(logprobs: &[f64]) -> Result<()> {
    if logprobs.iter().any(|lp| lp.is_nan() || *lp > 1e-9) {
        return Err(Error::invalid("log-probabilities must be <= 0"));
    }
    let mass: f64 = logprobs.iter().map(|lp| lp.exp()).sum();
    if (mass - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(Error::invalid(format!(
            "log-probabilities sum to {mass} in probability space"
        )));
    }
    Ok(())
}

fn floor(lp: f64) -> f64 {
    lp.max(LOGPROB_FLOOR)
}

/// Next-token log-probabilities keyed by (rendered input, output prefix).
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerTable {
    vocab: Vocab,
    fallback_uniform: bool,
    entries: HashMap<String, HashMap<Vec<TokenId>, Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    context: String,
    prefix: Vec<TokenId>,
    logprobs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    version: u32,
    vocab: Vocab,
    fallback_uniform: bool,
    entries: Vec<TableEntry>,
}

impl ScorerTable {
    pub fn new(vocab: Vocab, fallback_uniform: bool) -> Self {
        ScorerTable {
            vocab,
            fallback_uniform,
            entries: HashMap::new(),
        }
    }

    pub fn fallback_uniform(&self) -> bool {
        self.fallback_uniform
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores a vector; values below the floor are clamped to it.
    pub fn insert(&mut self, context: &str, prefix: &[TokenId], logprobs: Vec<f64>) -> Result<()> {
        if logprobs.len() != self.vocab.len() {
            return Err(Error::invalid(format!(
                "vector of length {} for a vocabulary of {}",
                logprobs.len(),
                self.vocab.len()
            )));
        }
        let logprobs: Vec<f64> = logprobs.into_iter().map(floor).collect();
        check_normalized(&logprobs)?;
        self.entries
            .entry(context.to_string())
            .or_default()
            .insert(prefix.to_vec(), logprobs);
        Ok(())
    }

    /// Stores a probability vector (converted to log space).
    pub fn insert_probs(&mut self, context: &str, prefix: &[TokenId], probs: &[f64]) -> Result<()> {
        self.insert(context, prefix, probs.iter().map(|p| p.ln()).collect())
    }

    pub fn get(&self, context: &str, prefix: &[TokenId]) -> Option<&[f64]> {
        self.entries
            .get(context)
            .and_then(|m| m.get(prefix))
            .map(Vec::as_slice)
    }

    pub fn lookup(&self, context: &str, prefix: &[TokenId]) -> Result<Vec<f64>> {
        if let Some(v) = self.get(context, prefix) {
            return Ok(v.to_vec());
        }
        if self.fallback_uniform {
            let n = self.vocab.len() as f64;
            return Ok(vec![-(n.ln()); self.vocab.len()]);
        }
        Err(Error::MissingEntry {
            context: context.to_string(),
            prefix: prefix.to_vec(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut entries: Vec<TableEntry> = self
            .entries
            .iter()
            .flat_map(|(ctx, m)| {
                m.iter().map(move |(prefix, lps)| TableEntry {
                    context: ctx.clone(),
                    prefix: prefix.clone(),
                    logprobs: lps.clone(),
                })
            })
            .collect();
        entries.sort_by(|a, b| (&a.context, &a.prefix).cmp(&(&b.context, &b.prefix)));
        let file = TableFile {
            version: TABLE_SCHEMA_VERSION,
            vocab: self.vocab.clone(),
            fallback_uniform: self.fallback_uniform,
            entries,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: TableFile = serde_json::from_str(json)?;
        if file.version != TABLE_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported scorer table version {}",
                file.version
            )));
        }
        let mut table = ScorerTable::new(file.vocab, file.fallback_uniform);
        for e in file.entries {
            table.insert(&e.context, &e.prefix, e.logprobs)?;
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl TokenScorer for ScorerTable {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn next_token_logprobs(&self, context: &str, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.lookup(context, prefix)
    }
}

/// Three-way label probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliProbs {
    pub entailment: f64,
    pub neutral: f64,
    pub contradiction: f64,
}

impl NliProbs {
    pub fn new(entailment: f64, neutral: f64, contradiction: f64) -> Result<Self> {
        let p = NliProbs {
            entailment,
            neutral,
            contradiction,
        };
        let sum = entailment + neutral + contradiction;
        if [entailment, neutral, contradiction]
            .iter()
            .any(|x| !(0.0..=1.0).contains(x))
            || (sum - 1.0).abs() > NORMALIZATION_TOLERANCE
        {
            return Err(Error::invalid(format!(
                "NLI probabilities ({entailment}, {neutral}, {contradiction}) are not a distribution"
            )));
        }
        Ok(p)
    }

    /// All mass on neutral.
    pub fn neutral_certain() -> Self {
        NliProbs {
            entailment: 0.0,
            neutral: 1.0,
            contradiction: 0.0,
        }
    }

    pub fn logprobs(&self) -> NliLogProbs {
        NliLogProbs::from_probs(self.entailment, self.neutral, self.contradiction)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NliTable {
    default: NliProbs,
    entries: BTreeMap<(String, String), NliProbs>,
}

#[derive(Serialize, Deserialize)]
struct NliEntry {
    premise: String,
    hypothesis: String,
    probs: NliProbs,
}

#[derive(Serialize, Deserialize)]
struct NliFile {
    version: u32,
    default: NliProbs,
    entries: Vec<NliEntry>,
}

impl NliTable {
    pub fn new(default: NliProbs) -> Self {
        NliTable {
            default,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, premise: &str, hypothesis: &str, probs: NliProbs) -> Result<()> {
        let probs = NliProbs::new(probs.entailment, probs.neutral, probs.contradiction)?;
        self.entries
            .insert((premise.to_string(), hypothesis.to_string()), probs);
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = NliFile {
            version: TABLE_SCHEMA_VERSION,
            default: self.default,
            entries: self
                .entries
                .iter()
                .map(|((p, h), probs)| NliEntry {
                    premise: p.clone(),
                    hypothesis: h.clone(),
                    probs: *probs,
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: NliFile = serde_json::from_str(json)?;
        if file.version != TABLE_SCHEMA_VERSION {
            return Err(Error::invalid(format!("unsupported NLI table version {}", file.version)));
        }
        let d = file.default;
        let mut table = NliTable::new(NliProbs::new(d.entailment, d.neutral, d.contradiction)?);
        for e in file.entries {
            table.insert(&e.premise, &e.hypothesis, e.probs)?;
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl NliScorer for NliTable {
    fn nli_logprobs(&self, premise: &str, hypothesis: &str) -> Result<NliLogProbs> {
        if premise.trim().is_empty() || hypothesis.trim().is_empty() {
            return Err(Error::invalid("premise and hypothesis must be non-empty"));
        }
        let probs = self
            .entries
            .get(&(premise.to_string(), hypothesis.to_string()))
            .unwrap_or(&self.default);
        Ok(probs.logprobs())
    }
}
