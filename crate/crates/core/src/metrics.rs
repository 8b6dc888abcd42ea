//! Reference scores against gold triplets and reference-free metrics for
//! extractions on new data.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::graph::consolidate_triplets;
use crate::triplet::{canonical_text, PersonaTriplet, RelationType};

fn fixed4<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::Error as _;
    RawValue::from_string(format!("{x:.4}"))
        .map_err(S::Error::custom)?
        .serialize(s)
}

fn fixed4_opt<S: Serializer>(x: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match x {
        Some(v) => fixed4(v, s),
        None => s.serialize_none(),
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub relation: RelationType,
    #[serde(serialize_with = "fixed4")]
    pub precision: f64,
    #[serde(serialize_with = "fixed4")]
    pub recall: f64,
    #[serde(serialize_with = "fixed4")]
    pub f1: f64,
    /// One-vs-rest accuracy.
    #[serde(serialize_with = "fixed4")]
    pub accuracy: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScores {
    pub count: usize,
    pub per_label: Vec<LabelScores>,
    #[serde(serialize_with = "fixed4")]
    pub macro_precision: f64,
    #[serde(serialize_with = "fixed4")]
    pub macro_recall: f64,
    #[serde(serialize_with = "fixed4")]
    pub macro_f1: f64,
    #[serde(serialize_with = "fixed4")]
    pub relation_accuracy: f64,
    #[serde(serialize_with = "fixed4")]
    pub head_accuracy: f64,
    #[serde(serialize_with = "fixed4")]
    pub tail_accuracy: f64,
    #[serde(serialize_with = "fixed4")]
    pub tail_overlap: f64,
    #[serde(serialize_with = "fixed4")]
    pub triplet_accuracy: f64,
}

impl ReferenceScores {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Share of distinct gold tail tokens (whitespace-split) present in the prediction.
pub fn tail_overlap(gold_tail: &str, predicted_tail: &str) -> f64 {
    let gold: BTreeSet<String> = canonical_text(gold_tail)
        .split(' ')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    let pred_text = canonical_text(predicted_tail);
    let pred: BTreeSet<&str> = pred_text.split(' ').filter(|s| !s.is_empty()).collect();
    if gold.is_empty() {
        return if pred.is_empty() { 1.0 } else { 0.0 };
    }
    ratio(gold.iter().filter(|t| pred.contains(t.as_str())).count(), gold.len())
}

pub fn reference_scores(
    predictions: &[PersonaTriplet],
    golds: &[PersonaTriplet],
) -> Result<ReferenceScores> {
    if predictions.len() != golds.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} gold triplets",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::invalid("no examples to score"));
    }
    let n = golds.len();
    let pairs: Vec<(&PersonaTriplet, &PersonaTriplet)> = predictions.iter().zip(golds).collect();
    let head_ok = |p: &PersonaTriplet, g: &PersonaTriplet| canonical_text(&p.head) == canonical_text(&g.head);
    let tail_ok = |p: &PersonaTriplet, g: &PersonaTriplet| canonical_text(&p.tail) == canonical_text(&g.tail);

    let heads = pairs.iter().filter(|(p, g)| head_ok(p, g)).count();
    let tails = pairs.iter().filter(|(p, g)| tail_ok(p, g)).count();
    let labels = pairs.iter().filter(|(p, g)| p.relation == g.relation).count();
    let triplets = pairs
        .iter()
        .filter(|(p, g)| head_ok(p, g) && tail_ok(p, g) && p.relation == g.relation)
        .count();
    let overlap = pairs.iter().map(|(p, g)| tail_overlap(&g.tail, &p.tail)).sum::<f64>() / n as f64;

    let present: BTreeSet<RelationType> = pairs
        .iter()
        .flat_map(|(p, g)| [p.relation, g.relation])
        .collect();
    let per_label: Vec<LabelScores> = RelationType::ALL
        .iter()
        .copied()
        .filter(|r| present.contains(r))
        .map(|r| {
            let tp = pairs.iter().filter(|(p, g)| p.relation == r && g.relation == r).count();
            let predicted = pairs.iter().filter(|(p, _)| p.relation == r).count();
            let support = pairs.iter().filter(|(_, g)| g.relation == r).count();
            let tn = pairs.iter().filter(|(p, g)| p.relation != r && g.relation != r).count();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            LabelScores {
                relation: r,
                precision,
                recall,
                f1,
                accuracy: ratio(tp + tn, n),
                support,
            }
        })
        .collect();
    let mean = |f: fn(&LabelScores) -> f64| per_label.iter().map(f).sum::<f64>() / per_label.len() as f64;

    Ok(ReferenceScores {
        count: n,
        macro_precision: mean(|l| l.precision),
        macro_recall: mean(|l| l.recall),
        macro_f1: mean(|l| l.f1),
        per_label,
        relation_accuracy: ratio(labels, n),
        head_accuracy: ratio(heads, n),
        tail_accuracy: ratio(tails, n),
        tail_overlap: overlap,
        triplet_accuracy: ratio(triplets, n),
    })
}

/// Persona triplets (or distinct ones) per utterance.
pub fn coverage(extractions: &[PersonaTriplet], utterance_count: usize, unique: bool) -> Result<f64> {
    if utterance_count == 0 {
        return Err(Error::invalid("coverage needs at least one utterance"));
    }
    let persona = extractions.iter().filter(|t| t.is_persona());
    let count = if unique {
        persona.map(PersonaTriplet::key).collect::<BTreeSet<_>>().len()
    } else {
        persona.count()
    };
    Ok(count as f64 / utterance_count as f64)
}

fn is_first_person(head: &str) -> bool {
    let h = head.trim().to_lowercase();
    matches!(h.as_str(), "i" | "me" | "my") || h.starts_with("my ")
}

/// Share of persona triplets with a first-person head; `None` when there are none.
pub fn first_person_ratio(triplets: &[PersonaTriplet]) -> Option<f64> {
    let persona: Vec<&PersonaTriplet> = triplets.iter().filter(|t| t.is_persona()).collect();
    if persona.is_empty() {
        return None;
    }
    Some(ratio(persona.iter().filter(|t| is_first_person(&t.head)).count(), persona.len()))
}

/// (distinct heads / total, distinct tails / total) over persona triplets.
pub fn unique_entity_ratios(triplets: &[PersonaTriplet]) -> Option<(f64, f64)> {
    let persona: Vec<&PersonaTriplet> = triplets.iter().filter(|t| t.is_persona()).collect();
    if persona.is_empty() {
        return None;
    }
    let heads: BTreeSet<String> = persona.iter().map(|t| canonical_text(&t.head)).collect();
    let tails: BTreeSet<String> = persona.iter().map(|t| canonical_text(&t.tail)).collect();
    Some((
        ratio(heads.len(), persona.len()),
        ratio(tails.len(), persona.len()),
    ))
}

fn consolidated_keys(triplets: &[PersonaTriplet]) -> BTreeSet<(String, RelationType, String)> {
    consolidate_triplets(triplets)
        .into_iter()
        .filter(|t| t.relation.is_persona())
        .map(|t| (t.head, t.relation, t.tail))
        .collect()
}

/// (recovered, total) distinct description triplets after consolidation.
pub fn persona_recall_counts(
    dialogue: &[PersonaTriplet],
    description: &[PersonaTriplet],
) -> (usize, usize) {
    let wanted = consolidated_keys(description);
    let found = consolidated_keys(dialogue);
    (wanted.intersection(&found).count(), wanted.len())
}

/// Share of distinct description triplets also extracted from dialogue.
pub fn persona_recall(dialogue: &[PersonaTriplet], description: &[PersonaTriplet]) -> Option<f64> {
    match persona_recall_counts(dialogue, description) {
        (_, 0) => None,
        (hit, total) => Some(ratio(hit, total)),
    }
}

/// Extractions for one character.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterExtractions {
    pub character: String,
    pub utterance_count: usize,
    /// Triplets extracted from the character's utterances.
    pub dialogue: Vec<PersonaTriplet>,
    /// Triplets extracted from the character's description sentences.
    pub description: Vec<PersonaTriplet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicRow {
    pub character: String,
    pub utterances: usize,
    pub persona_count: usize,
    #[serde(serialize_with = "fixed4")]
    pub coverage: f64,
    #[serde(serialize_with = "fixed4")]
    pub unique_coverage: f64,
    #[serde(serialize_with = "fixed4_opt")]
    pub first_person_ratio: Option<f64>,
    #[serde(serialize_with = "fixed4_opt")]
    pub unique_head_ratio: Option<f64>,
    #[serde(serialize_with = "fixed4_opt")]
    pub unique_tail_ratio: Option<f64>,
    #[serde(serialize_with = "fixed4_opt")]
    pub persona_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicReport {
    pub characters: Vec<IntrinsicRow>,
    pub overall: IntrinsicRow,
}

pub const OVERALL: &str = "overall";

fn row(c: &CharacterExtractions) -> Result<IntrinsicRow> {
    let entity = unique_entity_ratios(&c.dialogue);
    Ok(IntrinsicRow {
        character: c.character.clone(),
        utterances: c.utterance_count,
        persona_count: c.dialogue.iter().filter(|t| t.is_persona()).count(),
        coverage: coverage(&c.dialogue, c.utterance_count, false)?,
        unique_coverage: coverage(&c.dialogue, c.utterance_count, true)?,
        first_person_ratio: first_person_ratio(&c.dialogue),
        unique_head_ratio: entity.map(|e| e.0),
        unique_tail_ratio: entity.map(|e| e.1),
        persona_recall: persona_recall(&c.dialogue, &c.description),
    })
}

/// Per-character rows plus an overall row. Overall coverage and ratios pool
/// all triplets; unique coverage and recall count distinct triplets within
/// each character before summing.
pub fn intrinsic_report(characters: &[CharacterExtractions]) -> Result<IntrinsicReport> {
    let rows = characters.iter().map(row).collect::<Result<Vec<_>>>()?;
    let utterances: usize = characters.iter().map(|c| c.utterance_count).sum();
    let pooled: Vec<PersonaTriplet> = characters.iter().flat_map(|c| c.dialogue.clone()).collect();
    let persona_count = pooled.iter().filter(|t| t.is_persona()).count();
    let distinct: usize = characters
        .iter()
        .map(|c| {
            c.dialogue
                .iter()
                .filter(|t| t.is_persona())
                .map(PersonaTriplet::key)
                .collect::<BTreeSet<_>>()
                .len()
        })
        .sum();
    let (hit, total) = characters
        .iter()
        .map(|c| persona_recall_counts(&c.dialogue, &c.description))
        .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if utterances == 0 {
        return Err(Error::invalid("coverage needs at least one utterance"));
    }
    let entity = unique_entity_ratios(&pooled);
    let overall = IntrinsicRow {
        character: OVERALL.to_string(),
        utterances,
        persona_count,
        coverage: ratio(persona_count, utterances),
        unique_coverage: ratio(distinct, utterances),
        first_person_ratio: first_person_ratio(&pooled),
        unique_head_ratio: entity.map(|e| e.0),
        unique_tail_ratio: entity.map(|e| e.1),
        persona_recall: (total > 0).then(|| ratio(hit, total)),
    };
    Ok(IntrinsicReport {
        characters: rows,
        overall,
    })
}

impl IntrinsicReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Per-character table followed by the overall row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "character",
            "utterances",
            "persona_count",
            "coverage",
            "unique_coverage",
            "first_person_ratio",
            "unique_head_ratio",
            "unique_tail_ratio",
            "persona_recall",
        ])?;
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_default();
        for r in self.characters.iter().chain(std::iter::once(&self.overall)) {
            w.write_record([
                r.character.clone(),
                r.utterances.to_string(),
                r.persona_count.to_string(),
                format!("{:.4}", r.coverage),
                format!("{:.4}", r.unique_coverage),
                opt(r.first_person_ratio),
                opt(r.unique_head_ratio),
                opt(r.unique_tail_ratio),
                opt(r.persona_recall),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
