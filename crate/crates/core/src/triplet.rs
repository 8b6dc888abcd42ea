//! Persona triplets and the relation vocabulary they are labelled with.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Persona relation types, plus the bucket for statements that carry none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationType {
    Characteristic,
    RoutineHabit,
    GoalPlan,
    Experience,
    NoRelation,
}

impl RelationType {
    pub const ALL: [RelationType; 5] = [
        RelationType::Characteristic,
        RelationType::RoutineHabit,
        RelationType::GoalPlan,
        RelationType::Experience,
        RelationType::NoRelation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RelationType::Characteristic => "characteristic",
            RelationType::RoutineHabit => "routine_habit",
            RelationType::GoalPlan => "goal_plan",
            RelationType::Experience => "experience",
            RelationType::NoRelation => "no_relation",
        }
    }

    /// Spelling of the special token emitted by the extraction model.
    pub fn token(self) -> &'static str {
        match self {
            RelationType::Characteristic => "[characteristic]",
            RelationType::RoutineHabit => "[routine_habit]",
            RelationType::GoalPlan => "[goal_plan]",
            RelationType::Experience => "[experience]",
            RelationType::NoRelation => "[no_relation]",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.token() == token)
    }

    pub fn is_persona(self) -> bool {
        self != RelationType::NoRelation
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelationType {
    type Err = Error;

    /// Accepts the plain name or the bracketed token spelling.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s || r.token() == s)
            .ok_or_else(|| Error::UnknownRelation(s.to_string()))
    }
}

/// Lowercase, trim and collapse internal whitespace.
pub fn canonical_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PersonaTriplet {
    pub head: String,
    pub relation: RelationType,
    pub tail: String,
    #[serde(default)]
    pub source_id: String,
}

impl PersonaTriplet {
    /// Builds a triplet in canonical form.
    pub fn new(head: &str, relation: RelationType, tail: &str) -> Self {
        PersonaTriplet {
            head: canonical_text(head),
            relation,
            tail: canonical_text(tail),
            source_id: String::new(),
        }
    }

    pub fn with_source(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }

    /// The sentinel emitted when every candidate for a source was rejected.
    pub fn no_relation(source_id: impl Into<String>) -> Self {
        PersonaTriplet {
            head: String::new(),
            relation: RelationType::NoRelation,
            tail: String::new(),
            source_id: source_id.into(),
        }
    }

    pub fn canonical(&self) -> Self {
        PersonaTriplet {
            head: canonical_text(&self.head),
            relation: self.relation,
            tail: canonical_text(&self.tail),
            source_id: self.source_id.clone(),
        }
    }

    /// (head, relation, tail) ignoring the source id.
    pub fn key(&self) -> (String, RelationType, String) {
        (
            canonical_text(&self.head),
            self.relation,
            canonical_text(&self.tail),
        )
    }

    pub fn is_persona(&self) -> bool {
        self.relation.is_persona()
    }
}

/// Turns a triplet into the hypothesis sentence used for entailment checks.
pub fn triplet_to_sentence(t: &PersonaTriplet) -> Result<String> {
    if !t.relation.is_persona() {
        return Err(Error::invalid("no_relation triplets have no sentence form"));
    }
    let head = canonical_text(&t.head);
    let tail = canonical_text(&t.tail);
    if head.is_empty() || tail.is_empty() {
        return Err(Error::invalid("triplet head and tail must be non-empty"));
    }
    Ok(format!("{head} {tail}"))
}
