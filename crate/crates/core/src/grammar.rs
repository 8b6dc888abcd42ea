//! Token-level constraint automaton for template outputs.
//!
//! The automaton walks the output slots of a [`TemplateSpec`]: a forced
//! marker, then the slot content, then the next marker, and finally the
//! terminator (if any) and EOS. Relation slots take exactly one relation
//! token. Head and tail slots take ordinary vocabulary and need at least one
//! content token before the closing marker is admitted.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::template::{FillKind, TemplateSpec};
use crate::triplet::{PersonaTriplet, RelationType};
use crate::vocab::{all_structure_tokens, TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Phase {
    Marker,
    Content,
    Eos,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GrammarState {
    /// Index of the current output slot (equals the slot count once all
    /// slots are closed).
    pub slot: usize,
    /// Content tokens emitted in the current slot.
    pub emitted: usize,
    phase: Phase,
}

impl GrammarState {
    pub fn is_terminal(&self) -> bool {
        self.phase == Phase::Done
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokenClass {
    Content,
    Relation,
    Closer,
}

#[derive(Debug, Clone)]
pub struct Grammar {
    spec: TemplateSpec,
    fills: Vec<FillKind>,
    markers: Vec<TokenId>,
    terminator: Option<TokenId>,
    relations: Vec<TokenId>,
    relation_of: Vec<(TokenId, RelationType)>,
    content: Vec<TokenId>,
    eos: TokenId,
}

impl Grammar {
    pub fn new(spec: &TemplateSpec, vocab: &Vocab) -> Result<Self> {
        spec.validate()?;
        let lookup = |tok: &str| {
            vocab.id(tok).ok_or_else(|| {
                Error::invalid(format!("vocabulary lacks structure token `{tok}`"))
            })
        };
        let markers = spec
            .output_slots
            .iter()
            .map(|s| lookup(&s.marker))
            .collect::<Result<Vec<_>>>()?;
        let terminator = spec.output_terminator.as_deref().map(lookup).transpose()?;
        let mut relation_of = RelationType::ALL
            .iter()
            .map(|r| Ok((lookup(r.token())?, *r)))
            .collect::<Result<Vec<_>>>()?;
        relation_of.sort_by_key(|(id, _)| *id);
        let relations = relation_of.iter().map(|(id, _)| *id).collect();

        let mut excluded: HashSet<&str> = spec.structure_tokens().into_iter().collect();
        let known = all_structure_tokens();
        excluded.extend(known.iter().map(String::as_str));
        let eos = vocab.eos_id();
        let content = (0..vocab.len() as TokenId)
            .filter(|&id| id != eos && !excluded.contains(vocab.token(id).unwrap_or_default()))
            .collect::<Vec<_>>();
        if content.is_empty() {
            return Err(Error::invalid("vocabulary has no ordinary content tokens"));
        }

        Ok(Grammar {
            spec: spec.clone(),
            fills: spec.output_slots.iter().map(|s| s.fill).collect(),
            markers,
            terminator,
            relations,
            relation_of,
            content,
            eos,
        })
    }

    pub fn spec(&self) -> &TemplateSpec {
        &self.spec
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn content_tokens(&self) -> &[TokenId] {
        &self.content
    }

    pub fn relation_tokens(&self) -> &[TokenId] {
        &self.relations
    }

    pub fn start(&self) -> GrammarState {
        GrammarState {
            slot: 0,
            emitted: 0,
            phase: Phase::Marker,
        }
    }

    fn closer(&self, slot: usize) -> TokenId {
        if slot + 1 < self.markers.len() {
            self.markers[slot + 1]
        } else {
            self.terminator.unwrap_or(self.eos)
        }
    }

    fn can_close(&self, state: &GrammarState) -> bool {
        state.emitted >= 1
    }

    /// Tokens admissible from `state`, sorted by id.
    pub fn allowed_next_tokens(&self, state: &GrammarState) -> Result<Vec<TokenId>> {
        match state.phase {
            Phase::Done => Err(Error::ContractViolation(
                "no tokens are admissible after the end of the sequence".into(),
            )),
            Phase::Marker => Ok(vec![self.markers[state.slot]]),
            Phase::Eos => Ok(vec![self.eos]),
            Phase::Content => {
                let closer = self.closer(state.slot);
                match self.fills[state.slot] {
                    FillKind::Relation if state.emitted == 0 => Ok(self.relations.clone()),
                    FillKind::Relation => Ok(vec![closer]),
                    _ => {
                        let mut out = self.content.clone();
                        if self.can_close(state) {
                            let at = out.partition_point(|&t| t < closer);
                            out.insert(at, closer);
                        }
                        Ok(out)
                    }
                }
            }
        }
    }

    fn classify(&self, state: &GrammarState, token: TokenId) -> Option<TokenClass> {
        match state.phase {
            Phase::Done => None,
            Phase::Marker => (token == self.markers[state.slot]).then_some(TokenClass::Closer),
            Phase::Eos => (token == self.eos).then_some(TokenClass::Closer),
            Phase::Content => match self.fills[state.slot] {
                FillKind::Relation if state.emitted == 0 => self
                    .relations
                    .binary_search(&token)
                    .ok()
                    .map(|_| TokenClass::Relation),
                FillKind::Relation => {
                    (token == self.closer(state.slot)).then_some(TokenClass::Closer)
                }
                _ => {
                    if self.content.binary_search(&token).is_ok() {
                        Some(TokenClass::Content)
                    } else if self.can_close(state) && token == self.closer(state.slot) {
                        Some(TokenClass::Closer)
                    } else {
                        None
                    }
                }
            },
        }
    }

    fn step(&self, state: &GrammarState, class: TokenClass) -> GrammarState {
        match (state.phase, class) {
            (Phase::Marker, _) => GrammarState {
                slot: state.slot,
                emitted: 0,
                phase: Phase::Content,
            },
            (Phase::Eos, _) => GrammarState {
                slot: state.slot,
                emitted: 0,
                phase: Phase::Done,
            },
            (Phase::Content, TokenClass::Content | TokenClass::Relation) => GrammarState {
                emitted: state.emitted + 1,
                ..*state
            },
            (Phase::Content, TokenClass::Closer) => {
                let next = state.slot + 1;
                if next < self.markers.len() {
                    GrammarState {
                        slot: next,
                        emitted: 0,
                        phase: Phase::Content,
                    }
                } else if self.terminator.is_some() {
                    GrammarState {
                        slot: next,
                        emitted: 0,
                        phase: Phase::Eos,
                    }
                } else {
                    GrammarState {
                        slot: next,
                        emitted: 0,
                        phase: Phase::Done,
                    }
                }
            }
            (Phase::Done, _) => *state,
        }
    }

    /// Consumes one token; rejects anything [`Self::allowed_next_tokens`] would not admit.
    pub fn advance(&self, state: &GrammarState, token: TokenId) -> Result<GrammarState> {
        if state.is_terminal() {
            return Err(Error::ContractViolation(
                "cannot advance a terminal grammar state".into(),
            ));
        }
        let class = self.classify(state, token).ok_or_else(|| {
            Error::ContractViolation(format!(
                "token {token} not admissible in slot {} after {} tokens",
                state.slot, state.emitted
            ))
        })?;
        Ok(self.step(state, class))
    }

    /// Fewest tokens that still have to be emitted to reach the terminal state.
    pub fn min_remaining(&self, state: &GrammarState) -> usize {
        let tail_from = |slot: usize| -> usize {
            // each later slot: marker + one content token
            let later = 2 * (self.markers.len() - slot - 1);
            later + usize::from(self.terminator.is_some()) + 1
        };
        match state.phase {
            Phase::Done => 0,
            Phase::Eos => 1,
            Phase::Marker => 1 + 1 + tail_from(state.slot),
            Phase::Content => usize::from(state.emitted == 0) + tail_from(state.slot),
        }
    }

    /// Minimum length of a complete output sequence.
    pub fn min_length(&self) -> usize {
        self.min_remaining(&self.start())
    }

    /// Like [`Self::allowed_next_tokens`], but drops tokens after which the
    /// sequence could no longer be completed within `remaining` tokens. When
    /// completion is already impossible the unrestricted set is returned.
    pub fn allowed_within_budget(
        &self,
        state: &GrammarState,
        remaining: usize,
    ) -> Result<Vec<TokenId>> {
        let allowed = self.allowed_next_tokens(state)?;
        if self.min_remaining(state) > remaining {
            return Ok(allowed);
        }
        let mut fits = [None::<bool>; 3];
        Ok(allowed
            .into_iter()
            .filter(|&tok| {
                let Some(class) = self.classify(state, tok) else {
                    return false;
                };
                *fits[class as usize].get_or_insert_with(|| {
                    1 + self.min_remaining(&self.step(state, class)) <= remaining
                })
            })
            .collect())
    }

    pub fn relation_for(&self, token: TokenId) -> Option<RelationType> {
        self.relation_of
            .iter()
            .find(|(id, _)| *id == token)
            .map(|(_, r)| *r)
    }

    /// Token ids of the grammar-valid output for `t`, ending in EOS.
    /// Head and tail are split on whitespace and each word must be a content token.
    pub fn encode(&self, t: &PersonaTriplet, vocab: &Vocab) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        for (i, fill) in self.fills.iter().enumerate() {
            out.push(self.markers[i]);
            match fill {
                FillKind::Relation => out.push(
                    vocab
                        .id(t.relation.token())
                        .ok_or_else(|| Error::invalid("relation token missing"))?,
                ),
                FillKind::Head | FillKind::Tail => {
                    let text = if *fill == FillKind::Head { &t.head } else { &t.tail };
                    if text.trim().is_empty() {
                        return Err(Error::invalid("empty head or tail cannot be encoded"));
                    }
                    for w in text.split_whitespace() {
                        let id = vocab
                            .id(w)
                            .filter(|id| self.content.binary_search(id).is_ok())
                            .ok_or_else(|| {
                                Error::invalid(format!("`{w}` is not a content token"))
                            })?;
                        out.push(id);
                    }
                }
                FillKind::Context => {}
            }
        }
        if let Some(term) = self.terminator {
            out.push(term);
        }
        out.push(self.eos);
        Ok(out)
    }
}
