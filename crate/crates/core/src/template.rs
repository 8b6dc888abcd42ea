//! Structured input/output templates for the extraction model.
//!
//! A template describes two things: how an utterance is rendered into the
//! model input (with mask tokens in the slots the model must fill), and the
//! order of marker tokens in the model output. The output side drives both
//! the decoding grammar and [`parse_output`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::triplet::{canonical_text, PersonaTriplet, RelationType};

pub const TEMPLATE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateVariant {
    Paed,
    Tokens,
    RelationFirst,
    RelationFirstNomask,
}

impl TemplateVariant {
    pub const ALL: [TemplateVariant; 4] = [
        TemplateVariant::Paed,
        TemplateVariant::Tokens,
        TemplateVariant::RelationFirst,
        TemplateVariant::RelationFirstNomask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateVariant::Paed => "paed",
            TemplateVariant::Tokens => "tokens",
            TemplateVariant::RelationFirst => "relation_first",
            TemplateVariant::RelationFirstNomask => "relation_first_nomask",
        }
    }
}

impl fmt::Display for TemplateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemplateVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown template variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillKind {
    Context,
    Relation,
    Head,
    Tail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub marker: String,
    pub fill: FillKind,
    /// Attach the marker to the preceding text without a separating space.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub glued: bool,
}

impl Slot {
    fn new(marker: &str, fill: FillKind) -> Self {
        Slot {
            marker: marker.to_string(),
            fill,
            glued: false,
        }
    }

    fn glued(marker: &str, fill: FillKind) -> Self {
        Slot {
            glued: true,
            ..Slot::new(marker, fill)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub version: u32,
    pub variant: TemplateVariant,
    pub mask_token: String,
    pub input_slots: Vec<Slot>,
    #[serde(default)]
    pub input_terminator: Option<String>,
    pub output_slots: Vec<Slot>,
    #[serde(default)]
    pub output_terminator: Option<String>,
}

impl TemplateSpec {
    pub fn new(variant: TemplateVariant) -> Self {
        use FillKind::*;
        let (mask, input_slots, input_terminator, output_slots, output_terminator) = match variant {
            TemplateVariant::Paed => (
                "<mask>",
                vec![
                    Slot::new("Context :", Context),
                    Slot::new("Head Entity :", Head),
                    Slot::glued(", Tail Entity :", Tail),
                    Slot::new(", Relation :", Relation),
                ],
                Some("."),
                vec![
                    Slot::new("Head Entity :", Head),
                    Slot::new(", Tail Entity :", Tail),
                    Slot::new(", Relation :", Relation),
                ],
                Some("."),
            ),
            TemplateVariant::Tokens => (
                "<mask>",
                vec![
                    Slot::new("[CONTEXT]", Context),
                    Slot::new("[HEAD]", Head),
                    Slot::new("[TAIL]", Tail),
                    Slot::new("[RELATION]", Relation),
                ],
                None,
                vec![
                    Slot::new("[HEAD]", Head),
                    Slot::new("[TAIL]", Tail),
                    Slot::new("[RELATION]", Relation),
                ],
                None,
            ),
            TemplateVariant::RelationFirst => (
                "<MASK>",
                vec![
                    Slot::new("[CONTEXT]", Context),
                    Slot::new("[RELATION]", Relation),
                    Slot::new("[HEAD]", Head),
                    Slot::new("[TAIL]", Tail),
                ],
                None,
                vec![
                    Slot::new("[RELATION]", Relation),
                    Slot::new("[HEAD]", Head),
                    Slot::new("[TAIL]", Tail),
                ],
                None,
            ),
            TemplateVariant::RelationFirstNomask => (
                "<mask>",
                vec![Slot::new("[CONTEXT]", Context)],
                None,
                vec![
                    Slot::new("[RELATION]", Relation),
                    Slot::new("[HEAD]", Head),
                    Slot::new("[TAIL]", Tail),
                ],
                None,
            ),
        };
        TemplateSpec {
            version: TEMPLATE_SCHEMA_VERSION,
            variant,
            mask_token: mask.to_string(),
            input_slots,
            input_terminator: input_terminator.map(str::to_string),
            output_slots,
            output_terminator: output_terminator.map(str::to_string),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != TEMPLATE_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported template version {}",
                self.version
            )));
        }
        if self.input_slots.is_empty() || self.output_slots.is_empty() {
            return Err(Error::invalid("template slot lists must be non-empty"));
        }
        for slots in [&self.input_slots, &self.output_slots] {
            for (i, s) in slots.iter().enumerate() {
                if s.marker.trim().is_empty() {
                    return Err(Error::invalid("template markers must be non-empty"));
                }
                if slots[..i].iter().any(|o| o.fill == s.fill) {
                    return Err(Error::invalid(format!("fill kind {:?} repeated", s.fill)));
                }
            }
        }
        let mut out: Vec<_> = self.output_slots.iter().map(|s| s.fill).collect();
        out.sort_by_key(|f| *f as u8);
        if out != [FillKind::Relation, FillKind::Head, FillKind::Tail] {
            return Err(Error::invalid(
                "output slots must be exactly relation, head and tail",
            ));
        }
        let markers = self.output_markers();
        for (i, m) in markers.iter().enumerate() {
            if markers[..i].contains(m) {
                return Err(Error::invalid(format!("duplicate output marker `{m}`")));
            }
        }
        Ok(())
    }

    /// Output-side structure tokens, in emission order (terminator last).
    pub fn output_markers(&self) -> Vec<&str> {
        self.output_slots
            .iter()
            .map(|s| s.marker.as_str())
            .chain(self.output_terminator.as_deref())
            .collect()
    }

    /// Every token spelling the template treats as structure.
    pub fn structure_tokens(&self) -> Vec<&str> {
        let mut all: Vec<&str> = self
            .input_slots
            .iter()
            .map(|s| s.marker.as_str())
            .chain(self.input_terminator.as_deref())
            .chain(self.output_markers())
            .chain(std::iter::once(self.mask_token.as_str()))
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: TemplateSpec = serde_json::from_str(json)?;
        spec.validate()?;
        Ok(spec)
    }
}

fn push_piece(pieces: &mut Vec<String>, text: &str, glued: bool) {
    match pieces.last_mut() {
        Some(last) if glued => last.push_str(text),
        _ => pieces.push(text.to_string()),
    }
}

/// Renders the model input for one utterance. The utterance is kept whole.
pub fn render_input(utterance: &str, spec: &TemplateSpec) -> String {
    let mut pieces: Vec<String> = Vec::new();
    for slot in &spec.input_slots {
        push_piece(&mut pieces, &slot.marker, slot.glued);
        match slot.fill {
            FillKind::Context => {
                let ctx = utterance.trim();
                if !ctx.is_empty() {
                    pieces.push(ctx.to_string());
                }
            }
            _ => pieces.push(spec.mask_token.clone()),
        }
    }
    if let Some(t) = &spec.input_terminator {
        pieces.push(t.clone());
    }
    pieces.join(" ")
}

/// Renders the output sequence a model would emit for `t`.
pub fn render_output(t: &PersonaTriplet, spec: &TemplateSpec) -> String {
    let mut pieces: Vec<String> = Vec::new();
    for slot in &spec.output_slots {
        push_piece(&mut pieces, &slot.marker, slot.glued);
        let fill = match slot.fill {
            FillKind::Relation => t.relation.token().to_string(),
            FillKind::Head => t.head.clone(),
            FillKind::Tail => t.tail.clone(),
            FillKind::Context => String::new(),
        };
        if !fill.trim().is_empty() {
            pieces.push(fill);
        }
    }
    if let Some(term) = &spec.output_terminator {
        pieces.push(term.clone());
    }
    pieces.join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletPart {
    Relation,
    Head,
    Tail,
}

/// An output that could not be parsed into a complete triplet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedOutput {
    pub raw: String,
    pub missing: Vec<TripletPart>,
}

fn find_words(words: &[&str], needle: &[&str], from: usize) -> Option<usize> {
    if needle.is_empty() || words.len() < needle.len() {
        return None;
    }
    (from..=words.len() - needle.len()).find(|&i| words[i..i + needle.len()] == *needle)
}

/// Splits a decoded output on the template's markers.
///
/// Markers are matched as whole whitespace-delimited tokens, in template order.
pub fn parse_output(
    text: &str,
    spec: &TemplateSpec,
) -> std::result::Result<PersonaTriplet, MalformedOutput> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let slots = &spec.output_slots;

    // (marker start, content start) for every marker that was found
    let mut found: Vec<Option<(usize, usize)>> = Vec::with_capacity(slots.len());
    let mut pos = 0;
    for slot in slots {
        let needle: Vec<&str> = slot.marker.split_whitespace().collect();
        match find_words(&words, &needle, pos) {
            Some(start) => {
                pos = start + needle.len();
                found.push(Some((start, pos)));
            }
            None => found.push(None),
        }
    }

    let mut end_of_content = words.len();
    if let Some(term) = &spec.output_terminator {
        let needle: Vec<&str> = term.split_whitespace().collect();
        if words.len() >= needle.len() && words[words.len() - needle.len()..] == *needle && pos < words.len() {
            end_of_content = words.len() - needle.len();
        }
    }

    let mut relation = None;
    let mut head = String::new();
    let mut tail = String::new();
    let mut missing = Vec::new();

    for (i, slot) in slots.iter().enumerate() {
        let content = found[i].map(|(_, begin)| {
            let end = found[i + 1..]
                .iter()
                .flatten()
                .map(|(s, _)| *s)
                .next()
                .unwrap_or(end_of_content)
                .max(begin);
            words[begin..end].join(" ")
        });
        let content = content.map(|c| canonical_text(&c)).unwrap_or_default();
        match slot.fill {
            FillKind::Relation => {
                relation = RelationType::from_token(&content)
                    .or_else(|| content.parse::<RelationType>().ok());
                if relation.is_none() {
                    missing.push(TripletPart::Relation);
                }
            }
            FillKind::Head if content.is_empty() => missing.push(TripletPart::Head),
            FillKind::Head => head = content,
            FillKind::Tail if content.is_empty() => missing.push(TripletPart::Tail),
            FillKind::Tail => tail = content,
            FillKind::Context => {}
        }
    }

    match relation {
        Some(relation) if missing.is_empty() => Ok(PersonaTriplet {
            head,
            relation,
            tail,
            source_id: String::new(),
        }),
        _ => {
            missing.sort();
            Err(MalformedOutput {
                raw: text.to_string(),
                missing,
            })
        }
    }
}
