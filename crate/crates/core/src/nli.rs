//! Entailment verdicts and the two ways they adjust extraction candidates:
//! reranking (entailed candidates get the entailment log-probability added to
//! their LM score) and neutral removal (non-entailed candidates are dropped).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoding::ScoredCandidate;
use crate::error::{Error, Result};
use crate::template::{parse_output, TemplateSpec};
use crate::triplet::{triplet_to_sentence, PersonaTriplet};
use crate::LOGPROB_FLOOR;

const NORMALIZATION_TOLERANCE: f64 = 1e-4;

/// Three-way NLI log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliLogProbs {
    pub entailment: f64,
    pub neutral: f64,
    pub contradiction: f64,
}

impl NliLogProbs {
    /// Log of each probability, clamped at [`LOGPROB_FLOOR`].
    pub fn from_probs(entailment: f64, neutral: f64, contradiction: f64) -> Self {
        let ln = |p: f64| p.ln().max(LOGPROB_FLOOR);
        NliLogProbs {
            entailment: ln(entailment),
            neutral: ln(neutral),
            contradiction: ln(contradiction),
        }
    }

    pub fn probability_mass(&self) -> f64 {
        self.entailment.exp() + self.neutral.exp() + self.contradiction.exp()
    }
}

/// Entailment decision for one (premise, hypothesis) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliVerdict {
    pub logp_entail: f64,
    pub logp_neutral: f64,
    pub logp_contradict: f64,
    pub entailed: bool,
}

impl NliVerdict {
    /// Verdict used for candidates that never reach the NLI model.
    pub fn rejected() -> Self {
        NliVerdict {
            logp_entail: LOGPROB_FLOOR,
            logp_neutral: 0.0,
            logp_contradict: LOGPROB_FLOOR,
            entailed: false,
        }
    }
}

/// Merges neutral and contradiction into "no entailment". Entailment must be
/// strictly the most probable label; exact ties count as not entailed.
pub fn collapse_binary(lp: NliLogProbs) -> Result<NliVerdict> {
    let mass = lp.probability_mass();
    if !mass.is_finite() || (mass - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(Error::invalid(format!(
            "NLI log-probabilities sum to {mass} in probability space"
        )));
    }
    Ok(NliVerdict {
        logp_entail: lp.entailment,
        logp_neutral: lp.neutral,
        logp_contradict: lp.contradiction,
        entailed: lp.entailment > lp.neutral && lp.entailment > lp.contradiction,
    })
}

fn check_aligned(candidates: &[ScoredCandidate], verdicts: &[NliVerdict]) -> Result<()> {
    if candidates.len() != verdicts.len() {
        return Err(Error::invalid(format!(
            "{} candidates but {} verdicts",
            candidates.len(),
            verdicts.len()
        )));
    }
    Ok(())
}

/// Adds `logp_entail` to the LM score of entailed candidates and re-sorts by
/// the result. Non-entailed candidates keep their LM score. Stable on ties.
pub fn rerank(
    candidates: &[ScoredCandidate],
    verdicts: &[NliVerdict],
) -> Result<Vec<ScoredCandidate>> {
    check_aligned(candidates, verdicts)?;
    let mut out: Vec<ScoredCandidate> = candidates
        .iter()
        .zip(verdicts)
        .map(|(c, v)| {
            let mut c = c.clone();
            c.final_score = if v.entailed {
                c.lm_score + v.logp_entail
            } else {
                c.lm_score
            };
            c.nli = Some(*v);
            c
        })
        .collect();
    out.sort_by(|a, b| b.final_score.total_cmp(&a.final_score));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum FilterOutcome {
    Kept(Vec<ScoredCandidate>),
    /// Nothing was entailed.
    NoRelation(PersonaTriplet),
}

/// Keeps the entailed candidates in their original order.
pub fn filter_neutral_removed(
    candidates: &[ScoredCandidate],
    verdicts: &[NliVerdict],
    source_id: &str,
) -> Result<FilterOutcome> {
    check_aligned(candidates, verdicts)?;
    let kept: Vec<ScoredCandidate> = candidates
        .iter()
        .zip(verdicts)
        .filter(|(_, v)| v.entailed)
        .map(|(c, v)| ScoredCandidate {
            nli: Some(*v),
            ..c.clone()
        })
        .collect();
    if kept.is_empty() {
        Ok(FilterOutcome::NoRelation(PersonaTriplet::no_relation(source_id)))
    } else {
        Ok(FilterOutcome::Kept(kept))
    }
}

/// Source of three-way NLI log-probabilities.
pub trait NliScorer {
    fn nli_logprobs(&self, premise: &str, hypothesis: &str) -> Result<NliLogProbs>;

    fn nli_logprobs_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<NliLogProbs>> {
        pairs
            .iter()
            .map(|(p, h)| self.nli_logprobs(p, h))
            .collect()
    }
}

impl<T: NliScorer + ?Sized> NliScorer for &T {
    fn nli_logprobs(&self, premise: &str, hypothesis: &str) -> Result<NliLogProbs> {
        (**self).nli_logprobs(premise, hypothesis)
    }

    fn nli_logprobs_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<NliLogProbs>> {
        (**self).nli_logprobs_batch(pairs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjudicationMode {
    #[default]
    None,
    Rerank,
    NeutralRemoved,
}

impl fmt::Display for AdjudicationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdjudicationMode::None => "none",
            AdjudicationMode::Rerank => "rerank",
            AdjudicationMode::NeutralRemoved => "neutral_removed",
        })
    }
}

impl FromStr for AdjudicationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('-', "_").as_str() {
            "none" => Ok(AdjudicationMode::None),
            "rerank" => Ok(AdjudicationMode::Rerank),
            "neutral_removed" => Ok(AdjudicationMode::NeutralRemoved),
            other => Err(Error::invalid(format!("unknown adjudication mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AdjudicationConfig {
    pub mode: AdjudicationMode,
}

/// Verdicts for every candidate of one utterance. The utterance is the
/// premise and the candidate's sentence form the hypothesis. Candidates that
/// do not parse into a persona triplet are rejected without a model call.
pub fn candidate_verdicts<N: NliScorer + ?Sized>(
    nli: &N,
    utterance: &str,
    candidates: &[ScoredCandidate],
    spec: &TemplateSpec,
) -> Result<Vec<NliVerdict>> {
    let hypotheses: Vec<Option<String>> = candidates
        .iter()
        .map(|c| {
            parse_output(&c.text, spec)
                .ok()
                .and_then(|t| triplet_to_sentence(&t).ok())
        })
        .collect();
    let pairs: Vec<(&str, &str)> = hypotheses
        .iter()
        .flatten()
        .map(|h| (utterance, h.as_str()))
        .collect();
    let mut scored = if pairs.is_empty() || utterance.trim().is_empty() {
        Vec::new()
    } else {
        nli.nli_logprobs_batch(&pairs)?
    }
    .into_iter();
    hypotheses
        .iter()
        .map(|h| match h {
            Some(_) if !utterance.trim().is_empty() => {
                let lp = scored
                    .next()
                    .ok_or_else(|| Error::invalid("NLI backend returned too few results"))?;
                collapse_binary(lp)
            }
            _ => Ok(NliVerdict::rejected()),
        })
        .collect()
}

/// Outcome of adjudicating one utterance's candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjudicated {
    pub candidates: Vec<ScoredCandidate>,
    /// Set when neutral removal rejected every candidate.
    pub sentinel: Option<PersonaTriplet>,
}

pub fn adjudicate<N: NliScorer + ?Sized>(
    nli: &N,
    utterance: &str,
    source_id: &str,
    candidates: &[ScoredCandidate],
    spec: &TemplateSpec,
    config: AdjudicationConfig,
) -> Result<Adjudicated> {
    if config.mode == AdjudicationMode::None {
        return Ok(Adjudicated {
            candidates: candidates.to_vec(),
            sentinel: None,
        });
    }
    let verdicts = candidate_verdicts(nli, utterance, candidates, spec)?;
    match config.mode {
        AdjudicationMode::Rerank => Ok(Adjudicated {
            candidates: rerank(candidates, &verdicts)?,
            sentinel: None,
        }),
        _ => match filter_neutral_removed(candidates, &verdicts, source_id)? {
            FilterOutcome::Kept(kept) => Ok(Adjudicated {
                candidates: kept,
                sentinel: None,
            }),
            FilterOutcome::NoRelation(t) => Ok(Adjudicated {
                candidates: Vec::new(),
                sentinel: Some(t),
            }),
        },
    }
}
