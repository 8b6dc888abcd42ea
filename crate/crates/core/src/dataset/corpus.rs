use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One dialogue turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub dialogue_id: String,
    pub character: String,
    pub description: String,
    pub turn: u32,
    pub text: String,
}

impl UtteranceRecord {
    pub fn character_id(&self) -> String {
        character_id(&self.character, &self.description)
    }

    pub fn source_id(&self) -> String {
        format!("{}:{}", self.dialogue_id, self.turn)
    }
}

/// Stable id for a (name, description) pair.
pub fn character_id(name: &str, description: &str) -> String {
    let mut h = Sha256::new();
    h.update(name.trim().as_bytes());
    h.update([0x1f]);
    h.update(description.trim().as_bytes());
    hex::encode(&h.finalize()[..8])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterProfile {
    pub character_id: String,
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Utterance,
    Description,
}

/// A text to run extraction on, with where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionInput {
    pub source_id: String,
    #[serde(default)]
    pub character_id: String,
    pub kind: InputKind,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub utterances: Vec<UtteranceRecord>,
    /// Unique characters in order of first appearance.
    pub characters: Vec<CharacterProfile>,
}

impl Corpus {
    pub fn from_records(utterances: Vec<UtteranceRecord>) -> Self {
        let mut seen = BTreeMap::new();
        let mut characters = Vec::new();
        for u in &utterances {
            let id = u.character_id();
            if seen.insert(id.clone(), ()).is_none() {
                characters.push(CharacterProfile {
                    character_id: id,
                    name: u.character.clone(),
                    description: u.description.clone(),
                });
            }
        }
        Corpus {
            utterances,
            characters,
        }
    }

    pub fn dialogue_count(&self) -> usize {
        let mut ids: Vec<&str> = self.utterances.iter().map(|u| u.dialogue_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    /// Whole utterances, then (optionally) description sentences per character.
    pub fn extraction_inputs(&self, with_descriptions: bool) -> Vec<ExtractionInput> {
        let mut out: Vec<ExtractionInput> = self
            .utterances
            .iter()
            .map(|u| ExtractionInput {
                source_id: u.source_id(),
                character_id: u.character_id(),
                kind: InputKind::Utterance,
                text: u.text.clone(),
            })
            .collect();
        if with_descriptions {
            for c in &self.characters {
                for (i, s) in split_description_sentences(&c.description).into_iter().enumerate() {
                    out.push(ExtractionInput {
                        source_id: format!("{}:desc:{i}", c.character_id),
                        character_id: c.character_id.clone(),
                        kind: InputKind::Description,
                        text: s,
                    });
                }
            }
        }
        out
    }
}

fn check_record(u: &UtteranceRecord, line: usize) -> Result<()> {
    let missing = [
        ("dialogue_id", &u.dialogue_id),
        ("character", &u.character),
        ("text", &u.text),
    ]
    .into_iter()
    .find(|(_, v)| v.trim().is_empty());
    match missing {
        Some((field, _)) => Err(Error::Schema {
            line,
            message: format!("field `{field}` is empty"),
        }),
        None => Ok(()),
    }
}

/// Reads the one-turn-per-line dialogue format.
pub fn ingest_jsonl<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: i + 1,
            message: e.to_string(),
        })?;
        check_record(&rec, i + 1)?;
        records.push(rec);
    }
    Ok(Corpus::from_records(records))
}

#[derive(Deserialize)]
struct LightAgent {
    name: String,
    persona: String,
}

#[derive(Deserialize)]
struct LightEpisode {
    agents: Vec<LightAgent>,
    character: Vec<String>,
    speech: Vec<String>,
}

/// Converts a LIGHT-style dump (a JSON array of episodes with `agents`,
/// `character` and `speech` lists) into utterance records. Schema errors
/// report the 1-based episode number as the line.
pub fn ingest_light_json(json: &str) -> Result<Corpus> {
    let episodes: Vec<LightEpisode> = serde_json::from_str(json).map_err(|e| Error::Schema {
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut records = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        let line = e + 1;
        if ep.character.len() != ep.speech.len() {
            return Err(Error::Schema {
                line,
                message: format!(
                    "episode has {} speakers but {} speech turns",
                    ep.character.len(),
                    ep.speech.len()
                ),
            });
        }
        for (turn, (who, text)) in ep.character.iter().zip(&ep.speech).enumerate() {
            let agent = ep.agents.iter().find(|a| a.name == *who).ok_or_else(|| Error::Schema {
                line,
                message: format!("speaker `{who}` is not among the episode's agents"),
            })?;
            let rec = UtteranceRecord {
                dialogue_id: format!("light-{e:05}"),
                character: agent.name.clone(),
                description: agent.persona.clone(),
                turn: turn as u32,
                text: text.clone(),
            };
            check_record(&rec, line)?;
            records.push(rec);
        }
    }
    Ok(Corpus::from_records(records))
}

/// Splits on `.`, `!` or `?` followed by whitespace; punctuation stays with
/// its sentence.
pub fn split_description_sentences(description: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = description.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        let at_boundary = matches!(c, '.' | '!' | '?')
            && chars.peek().is_none_or(|n| n.is_whitespace());
        if at_boundary {
            let s = current.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            current.clear();
        }
    }
    let rest = current.trim();
    if !rest.is_empty() {
        out.push(rest.to_string());
    }
    out
}
