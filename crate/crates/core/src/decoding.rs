//! Greedy, beam and diverse beam search under grammar constraints.
//!
//! At every step the scorer's log-probabilities are restricted to the tokens
//! the grammar admits (disallowed tokens get -inf) and renormalised over the
//! admitted set. Tokens after which the output could no longer be completed
//! within `max_length` are also masked, so every search that has room for a
//! complete output produces one.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{Grammar, GrammarState};
use crate::nli::NliVerdict;
use crate::vocab::{TokenId, Vocab};

/// Next-token log-probabilities for a model input and an output prefix.
pub trait TokenScorer {
    fn vocab(&self) -> &Vocab;

    /// Log-probability vector over the whole vocabulary.
    fn next_token_logprobs(&self, context: &str, prefix: &[TokenId]) -> Result<Vec<f64>>;

    /// Scores several prefixes of the same input; output order follows `prefixes`.
    fn next_token_logprobs_batch(
        &self,
        context: &str,
        prefixes: &[&[TokenId]],
    ) -> Result<Vec<Vec<f64>>> {
        prefixes
            .iter()
            .map(|p| self.next_token_logprobs(context, p))
            .collect()
    }
}

impl<T: TokenScorer + ?Sized> TokenScorer for &T {
    fn vocab(&self) -> &Vocab {
        (**self).vocab()
    }

    fn next_token_logprobs(&self, context: &str, prefix: &[TokenId]) -> Result<Vec<f64>> {
        (**self).next_token_logprobs(context, prefix)
    }

    fn next_token_logprobs_batch(
        &self,
        context: &str,
        prefixes: &[&[TokenId]],
    ) -> Result<Vec<Vec<f64>>> {
        (**self).next_token_logprobs_batch(context, prefixes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMethod {
    Greedy,
    Beam,
    DiverseBeam,
}

impl fmt::Display for DecodeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMethod::Greedy => "greedy",
            DecodeMethod::Beam => "beam",
            DecodeMethod::DiverseBeam => "diverse_beam",
        })
    }
}

impl FromStr for DecodeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('-', "_").as_str() {
            "greedy" => Ok(DecodeMethod::Greedy),
            "beam" => Ok(DecodeMethod::Beam),
            "diverse_beam" => Ok(DecodeMethod::DiverseBeam),
            other => Err(Error::invalid(format!("unknown decode method `{other}`"))),
        }
    }
}

/// How finished candidates are ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    /// Mean per-token log-probability.
    #[default]
    Average,
    /// Summed log-probability.
    Cumulative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub method: DecodeMethod,
    pub beam_count: usize,
    pub group_count: usize,
    pub diversity_strength: f64,
    pub max_length: usize,
    pub seed: u64,
    #[serde(default)]
    pub ranking: Ranking,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            method: DecodeMethod::Greedy,
            beam_count: 5,
            group_count: 5,
            diversity_strength: 0.4,
            max_length: 64,
            seed: 0,
            ranking: Ranking::Average,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        DecodeConfig::default()
    }

    pub fn beam(beam_count: usize) -> Self {
        DecodeConfig {
            method: DecodeMethod::Beam,
            beam_count,
            ..Default::default()
        }
    }

    pub fn diverse_beam(beam_count: usize, group_count: usize, lambda: f64) -> Self {
        DecodeConfig {
            method: DecodeMethod::DiverseBeam,
            beam_count,
            group_count,
            diversity_strength: lambda,
            ..Default::default()
        }
    }

    pub fn with_max_length(mut self, max_length: usize) -> Self {
        self.max_length = max_length;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_count == 0 {
            return Err(Error::invalid("beam_count must be at least 1"));
        }
        if self.max_length == 0 {
            return Err(Error::invalid("max_length must be at least 1"));
        }
        if self.method == DecodeMethod::DiverseBeam {
            if self.group_count == 0 || self.beam_count % self.group_count != 0 {
                return Err(Error::invalid(format!(
                    "beam_count {} is not divisible by group_count {}",
                    self.beam_count, self.group_count
                )));
            }
            if !(self.diversity_strength >= 0.0) {
                return Err(Error::invalid("diversity strength must be >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub tokens: Vec<TokenId>,
    pub text: String,
    /// Mean per-token log-probability of the constrained sequence.
    pub lm_score: f64,
    pub nli: Option<NliVerdict>,
    pub final_score: f64,
}

/// Arithmetic mean of per-token log-probabilities.
pub fn avg_logprob(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::invalid("cannot average an empty log-probability sequence"));
    }
    if let Some(bad) = token_logprobs.iter().find(|&&lp| lp > 1e-12 || lp.is_nan()) {
        return Err(Error::invalid(format!("log-probability {bad} is not <= 0")));
    }
    Ok(token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64)
}

/// Restricts `logprobs` to `allowed` and renormalises over that set.
fn masked_logprobs(logprobs: &[f64], allowed: &[TokenId]) -> Vec<(TokenId, f64)> {
    let max = allowed
        .iter()
        .map(|&t| logprobs[t as usize])
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // every admitted token has -inf mass: fall back to uniform
        let u = -(allowed.len() as f64).ln();
        return allowed.iter().map(|&t| (t, u)).collect();
    }
    let lse = max
        + allowed
            .iter()
            .map(|&t| (logprobs[t as usize] - max).exp())
            .sum::<f64>()
            .ln();
    allowed
        .iter()
        .map(|&t| (t, (logprobs[t as usize] - lse).min(0.0)))
        .collect()
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<TokenId>,
    logprobs: Vec<f64>,
    cumulative: f64,
    state: GrammarState,
}

impl Hypothesis {
    fn root(grammar: &Grammar) -> Self {
        Hypothesis {
            tokens: Vec::new(),
            logprobs: Vec::new(),
            cumulative: 0.0,
            state: grammar.start(),
        }
    }

    fn into_candidate(self, vocab: &Vocab) -> Result<ScoredCandidate> {
        let lm_score = avg_logprob(&self.logprobs)?;
        Ok(ScoredCandidate {
            text: vocab.decode(&self.tokens),
            tokens: self.tokens,
            lm_score,
            nli: None,
            final_score: lm_score,
        })
    }

    fn rank_score(&self, ranking: Ranking) -> f64 {
        match ranking {
            Ranking::Average => self.cumulative / self.logprobs.len().max(1) as f64,
            Ranking::Cumulative => self.cumulative,
        }
    }
}

struct Expansion {
    beam: usize,
    token: TokenId,
    logprob: f64,
    score: f64,
}

/// Score descending, then lowest token id, then earliest beam.
fn expansion_order(a: &Expansion, b: &Expansion) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.token.cmp(&b.token))
        .then(a.beam.cmp(&b.beam))
}

struct Search<'a, S: ?Sized> {
    scorer: &'a S,
    input: &'a str,
    grammar: &'a Grammar,
    max_length: usize,
}

impl<S: TokenScorer + ?Sized> Search<'_, S> {
    /// Renormalised admissible continuations for every hypothesis in `beams`.
    fn expand(&self, beams: &[&Hypothesis], step: usize) -> Result<Vec<Vec<(TokenId, f64)>>> {
        let prefixes: Vec<&[TokenId]> = beams.iter().map(|h| h.tokens.as_slice()).collect();
        let vocab_len = self.scorer.vocab().len();
        let wrap = |e: Error| Error::Backend {
            step,
            source: Box::new(e),
        };
        let vectors = self
            .scorer
            .next_token_logprobs_batch(self.input, &prefixes)
            .map_err(wrap)?;
        if vectors.len() != beams.len() {
            return Err(wrap(Error::invalid(format!(
                "scorer returned {} vectors for {} prefixes",
                vectors.len(),
                beams.len()
            ))));
        }
        beams
            .iter()
            .zip(vectors)
            .map(|(h, v)| {
                if v.len() != vocab_len {
                    return Err(wrap(Error::invalid(format!(
                        "scorer returned {} log-probabilities for a vocabulary of {vocab_len}",
                        v.len()
                    ))));
                }
                let remaining = self.max_length - h.tokens.len();
                let allowed = self.grammar.allowed_within_budget(&h.state, remaining)?;
                Ok(masked_logprobs(&v, &allowed))
            })
            .collect()
    }

    fn extend(&self, h: &Hypothesis, token: TokenId, logprob: f64) -> Result<Hypothesis> {
        let mut next = h.clone();
        next.state = self.grammar.advance(&h.state, token)?;
        next.tokens.push(token);
        next.logprobs.push(logprob);
        next.cumulative += logprob;
        Ok(next)
    }

    fn is_done(&self, h: &Hypothesis) -> bool {
        h.state.is_terminal() || h.tokens.len() >= self.max_length
    }
}

fn rank_finished(mut finished: Vec<Hypothesis>, ranking: Ranking) -> Vec<Hypothesis> {
    // stable: equal scores keep generation order
    finished.sort_by(|a, b| b.rank_score(ranking).total_cmp(&a.rank_score(ranking)));
    finished
}

/// Picks the admissible argmax at every step.
pub fn decode_greedy<S: TokenScorer + ?Sized>(
    scorer: &S,
    input: &str,
    grammar: &Grammar,
    cfg: &DecodeConfig,
) -> Result<ScoredCandidate> {
    cfg.validate()?;
    let search = Search {
        scorer,
        input,
        grammar,
        max_length: cfg.max_length,
    };
    let mut hyp = Hypothesis::root(grammar);
    while !search.is_done(&hyp) {
        let step = hyp.tokens.len();
        let options = search.expand(&[&hyp], step)?.remove(0);
        let (token, lp) = options
            .into_iter()
            .fold(None::<(TokenId, f64)>, |best, (t, lp)| match best {
                Some((_, blp)) if blp >= lp => best,
                _ => Some((t, lp)),
            })
            .ok_or_else(|| Error::ContractViolation("grammar admitted no tokens".into()))?;
        hyp = search.extend(&hyp, token, lp)?;
    }
    hyp.into_candidate(scorer.vocab())
}

/// One length-synchronous beam; finished hypotheses leave the beam.
struct Beam {
    active: Vec<Hypothesis>,
    finished: Vec<Hypothesis>,
    width: usize,
}

impl Beam {
    fn new(root: Hypothesis, width: usize) -> Self {
        Beam {
            active: vec![root],
            finished: Vec::new(),
            width,
        }
    }

    /// Keeps the best `width` expansions, scored by `score_of`.
    fn select<S: TokenScorer + ?Sized>(
        &mut self,
        search: &Search<'_, S>,
        options: &[Vec<(TokenId, f64)>],
        score_of: impl Fn(&Hypothesis, TokenId, f64) -> f64,
    ) -> Result<Vec<TokenId>> {
        let mut expansions: Vec<Expansion> = Vec::new();
        for (beam, (h, opts)) in self.active.iter().zip(options).enumerate() {
            for &(token, logprob) in opts {
                expansions.push(Expansion {
                    beam,
                    token,
                    logprob,
                    score: score_of(h, token, logprob),
                });
            }
        }
        expansions.sort_by(expansion_order);
        expansions.truncate(self.width);

        let mut chosen = Vec::with_capacity(expansions.len());
        let mut next = Vec::with_capacity(expansions.len());
        for e in expansions {
            let h = search.extend(&self.active[e.beam], e.token, e.logprob)?;
            chosen.push(e.token);
            if search.is_done(&h) {
                self.finished.push(h);
            } else {
                next.push(h);
            }
        }
        self.active = next;
        Ok(chosen)
    }
}

/// Standard beam search over cumulative log-probability. Returns up to
/// `beam_count` finished candidates, best first.
pub fn decode_beam<S: TokenScorer + ?Sized>(
    scorer: &S,
    input: &str,
    grammar: &Grammar,
    cfg: &DecodeConfig,
) -> Result<Vec<ScoredCandidate>> {
    cfg.validate()?;
    let search = Search {
        scorer,
        input,
        grammar,
        max_length: cfg.max_length,
    };
    let mut beam = Beam::new(Hypothesis::root(grammar), cfg.beam_count);
    let mut step = 0;
    while !beam.active.is_empty() {
        let refs: Vec<&Hypothesis> = beam.active.iter().collect();
        let options = search.expand(&refs, step)?;
        beam.select(&search, &options, |h, _, lp| h.cumulative + lp)?;
        step += 1;
    }
    rank_finished(beam.finished, cfg.ranking)
        .into_iter()
        .take(cfg.beam_count)
        .map(|h| h.into_candidate(scorer.vocab()))
        .collect()
}

/// Diverse beam search, returning each group's candidates separately.
///
/// Groups advance in lockstep. Within a step, group `g` ranks its expansions
/// by `cumulative + logprob - lambda * n(token)`, where `n(token)` counts how
/// often earlier groups selected that token at this step. The penalty only
/// steers selection; candidate scores stay unpenalised.
pub fn decode_diverse_beam_groups<S: TokenScorer + ?Sized>(
    scorer: &S,
    input: &str,
    grammar: &Grammar,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<ScoredCandidate>>> {
    cfg.validate()?;
    if cfg.method != DecodeMethod::DiverseBeam {
        return Err(Error::invalid("diverse beam search needs method diverse_beam"));
    }
    let search = Search {
        scorer,
        input,
        grammar,
        max_length: cfg.max_length,
    };
    let width = cfg.beam_count / cfg.group_count;
    let lambda = cfg.diversity_strength;
    let mut groups: Vec<Beam> = (0..cfg.group_count)
        .map(|_| Beam::new(Hypothesis::root(grammar), width))
        .collect();

    let mut step = 0;
    while groups.iter().any(|g| !g.active.is_empty()) {
        // one scorer batch per step across all groups
        let refs: Vec<&Hypothesis> = groups.iter().flat_map(|g| g.active.iter()).collect();
        let mut options = search.expand(&refs, step)?.into_iter();
        let per_group: Vec<Vec<Vec<(TokenId, f64)>>> = groups
            .iter()
            .map(|g| options.by_ref().take(g.active.len()).collect())
            .collect();

        let mut counts = vec![0u32; scorer.vocab().len()];
        for (group, opts) in groups.iter_mut().zip(&per_group) {
            if group.active.is_empty() {
                continue;
            }
            let chosen = group.select(&search, opts, |h, tok, lp| {
                h.cumulative + lp - lambda * f64::from(counts[tok as usize])
            })?;
            for tok in chosen {
                counts[tok as usize] += 1;
            }
        }
        step += 1;
    }

    groups
        .into_iter()
        .map(|g| {
            rank_finished(g.finished, cfg.ranking)
                .into_iter()
                .take(width)
                .map(|h| h.into_candidate(scorer.vocab()))
                .collect()
        })
        .collect()
}

/// Union of all diverse-beam groups, best first.
pub fn decode_diverse_beam<S: TokenScorer + ?Sized>(
    scorer: &S,
    input: &str,
    grammar: &Grammar,
    cfg: &DecodeConfig,
) -> Result<Vec<ScoredCandidate>> {
    let mut all: Vec<ScoredCandidate> = decode_diverse_beam_groups(scorer, input, grammar, cfg)?
        .into_iter()
        .flatten()
        .collect();
    match cfg.ranking {
        Ranking::Average => all.sort_by(|a, b| b.lm_score.total_cmp(&a.lm_score)),
        Ranking::Cumulative => all.sort_by(|a, b| {
            let sum = |c: &ScoredCandidate| c.lm_score * c.tokens.len() as f64;
            sum(b).total_cmp(&sum(a))
        }),
    }
    Ok(all)
}

/// Runs the configured search. Greedy yields a single candidate.
pub fn decode<S: TokenScorer + ?Sized>(
    scorer: &S,
    input: &str,
    grammar: &Grammar,
    cfg: &DecodeConfig,
) -> Result<Vec<ScoredCandidate>> {
    match cfg.method {
        DecodeMethod::Greedy => decode_greedy(scorer, input, grammar, cfg).map(|c| vec![c]),
        DecodeMethod::Beam => decode_beam(scorer, input, grammar, cfg),
        DecodeMethod::DiverseBeam => decode_diverse_beam(scorer, input, grammar, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_logprob_examples() {
        assert_eq!(avg_logprob(&[-0.2]).unwrap(), -0.2);
        assert!((avg_logprob(&[-0.2, -0.4]).unwrap() - -0.3).abs() < 1e-15);
        assert_eq!(avg_logprob(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(avg_logprob(&[]), Err(Error::InvalidArgument(_))));
        assert!(avg_logprob(&[0.5]).is_err());
    }

    #[test]
    fn masking_renormalises_over_allowed() {
        let lp = [0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()];
        let m = masked_logprobs(&lp, &[1, 2]);
        assert!((m[0].1 - 0.5f64.ln()).abs() < 1e-12);
        assert!((m[1].1 - 0.5f64.ln()).abs() < 1e-12);
        let m = masked_logprobs(&[f64::NEG_INFINITY; 3], &[0, 2]);
        assert!((m[0].1 - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(DecodeConfig::beam(0).validate().is_err());
        assert!(DecodeConfig::diverse_beam(5, 2, 0.4).validate().is_err());
        assert!(DecodeConfig::diverse_beam(5, 5, -1.0).validate().is_err());
        assert!(DecodeConfig::diverse_beam(6, 3, 0.4).validate().is_ok());
        assert!(DecodeConfig::greedy().with_max_length(0).validate().is_err());
        assert_eq!("diverse-beam".parse::<DecodeMethod>().unwrap(), DecodeMethod::DiverseBeam);
    }
}
