use std::collections::BTreeMap;

use persona_core::triplet::RelationType;
use persona_core::vocab::{TokenId, Vocab};
use persona_core::TokenScorer;

use super::HashScorer;

/// Token ids of the relation-first layout.
pub struct Layout {
    relation_marker: TokenId,
    head_marker: TokenId,
    tail_marker: TokenId,
    eos: TokenId,
    relations: Vec<TokenId>,
    content: Vec<TokenId>,
}

#[derive(Clone, Copy)]
pub enum Stage {
    Start,
    Relation,
    AfterRelation,
    Head(usize),
    Tail(usize, usize),
    Done,
}

pub const ORACLE_POSITIONS: usize = 6;

impl Layout {
    pub fn new(vocab: &Vocab, words: &[String]) -> Self {
        let id = |t: &str| vocab.id(t).unwrap();
        Layout {
            relation_marker: id("[RELATION]"),
            head_marker: id("[HEAD]"),
            tail_marker: id("[TAIL]"),
            eos: vocab.eos_id(),
            relations: RelationType::ALL.iter().map(|r| id(r.token())).collect(),
            content: words.iter().map(|w| id(w)).collect(),
        }
    }

    /// Admissible continuations, keeping relation + head + tail within
    /// `ORACLE_POSITIONS` tokens.
    pub fn moves(&self, stage: Stage) -> Vec<(TokenId, Stage)> {
        let fits = |used: usize| used <= ORACLE_POSITIONS;
        match stage {
            Stage::Start => vec![(self.relation_marker, Stage::Relation)],
            Stage::Relation => self.relations.iter().map(|&r| (r, Stage::AfterRelation)).collect(),
            Stage::AfterRelation => vec![(self.head_marker, Stage::Head(0))],
            Stage::Head(n) => {
                let mut m = Vec::new();
                if n == 0 || fits(1 + n + 1 + 1) {
                    m.extend(self.content.iter().map(|&c| (c, Stage::Head(n + 1))));
                }
                if n > 0 {
                    m.push((self.tail_marker, Stage::Tail(n, 0)));
                }
                m
            }
            Stage::Tail(h, n) => {
                let mut m = Vec::new();
                if n == 0 || fits(1 + h + n + 1) {
                    m.extend(self.content.iter().map(|&c| (c, Stage::Tail(h, n + 1))));
                }
                if n > 0 {
                    m.push((self.eos, Stage::Done));
                }
                m
            }
            Stage::Done => Vec::new(),
        }
    }
}

struct Enumeration<'a> {
    scorer: &'a HashScorer,
    context: &'a str,
    layout: &'a Layout,
    k: usize,
    top: Vec<(f64, Vec<TokenId>)>,
    scores: BTreeMap<Vec<TokenId>, f64>,
}

impl Enumeration<'_> {
    fn walk(&mut self, stage: Stage, prefix: &mut Vec<TokenId>, sum: f64) {
        if let Stage::Done = stage {
            let avg = sum / prefix.len() as f64;
            self.scores.insert(prefix.clone(), avg);
            if self.top.len() < self.k || avg > self.top[self.top.len() - 1].0 {
                let at = self.top.partition_point(|(s, _)| *s >= avg);
                self.top.insert(at, (avg, prefix.clone()));
                self.top.truncate(self.k);
            }
            return;
        }
        let moves = self.layout.moves(stage);
        let raw = self.scorer.next_token_logprobs(self.context, prefix).unwrap();
        let norm = moves.iter().map(|(t, _)| raw[*t as usize].exp()).sum::<f64>().ln();
        for (token, next) in moves.iter().copied() {
            let lp = if moves.len() == 1 { 0.0 } else { raw[token as usize] - norm };
            prefix.push(token);
            self.walk(next, prefix, sum + lp);
            prefix.pop();
        }
    }
}

/// Exhaustive top-k by average log-probability, plus the score of every
/// complete sequence.
pub fn enumerate(
    scorer: &HashScorer,
    context: &str,
    words: &[String],
    k: usize,
) -> (Vec<(f64, Vec<TokenId>)>, BTreeMap<Vec<TokenId>, f64>) {
    let layout = Layout::new(scorer.vocab(), words);
    let mut e = Enumeration {
        scorer,
        context,
        layout: &layout,
        k,
        top: Vec::new(),
        scores: BTreeMap::new(),
    };
    e.walk(Stage::Start, &mut Vec::new(), 0.0);
    (e.top, e.scores)
}

