use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::triplet::{canonical_text, PersonaTriplet, RelationType};

const BUNDLED_MAPPING: &str = include_str!("../../data/personaext_peacok_mapping.tsv");

/// Bucket name in the mapping file for relations with no persona counterpart.
pub const NOT_BUCKET: &str = "not";

/// Fine-grained relation name to persona relation type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FineRelationMapping {
    table: BTreeMap<String, RelationType>,
}

#[derive(Deserialize)]
struct MappingRow {
    fine_name: String,
    peacok_relation: String,
}

impl FineRelationMapping {
    /// The 105-relation table shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_tsv(BUNDLED_MAPPING.as_bytes()).expect("bundled mapping parses")
    }

    /// Reads a two-column TSV with a `fine_name`/`peacok_relation` header.
    pub fn from_tsv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .from_reader(reader);
        let mut table = BTreeMap::new();
        for (i, row) in rdr.deserialize::<MappingRow>().enumerate() {
            let row = row?;
            let line = i + 2;
            let relation = match row.peacok_relation.trim() {
                NOT_BUCKET => RelationType::NoRelation,
                other => other.parse().map_err(|_| Error::Schema {
                    line,
                    message: format!("unknown relation type `{other}`"),
                })?,
            };
            let name = row.fine_name.trim().to_string();
            if table.insert(name.clone(), relation).is_some() {
                return Err(Error::Schema {
                    line,
                    message: format!("fine relation `{name}` listed twice"),
                });
            }
        }
        Ok(FineRelationMapping { table })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.table.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, RelationType)> {
        self.table.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn map_relation(&self, fine_name: &str) -> Result<RelationType> {
        self.table
            .get(fine_name.trim())
            .copied()
            .ok_or_else(|| Error::UnknownRelation(fine_name.to_string()))
    }
}

/// `have_family` + `wife` gives `have family wife`.
pub fn make_tail_phrase(fine_name: &str, tail: &str) -> Result<String> {
    if fine_name.trim().is_empty() || tail.trim().is_empty() {
        return Err(Error::invalid("relation name and tail must be non-empty"));
    }
    Ok(canonical_text(&format!("{} {}", fine_name.replace('_', " "), tail)))
}

/// A fine-grained extraction record as distributed upstream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineRecord {
    pub utterance: String,
    pub head: String,
    pub relation: String,
    pub tail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
}

/// An utterance with its gold triplet, in the output schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExtractionRecord {
    pub utterance: String,
    pub head: String,
    pub relation: RelationType,
    pub tail: String,
    #[serde(default)]
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl LabeledExtractionRecord {
    pub fn gold(&self) -> PersonaTriplet {
        PersonaTriplet {
            head: self.head.clone(),
            relation: self.relation,
            tail: self.tail.clone(),
            source_id: self.source_id.clone(),
        }
    }
}

pub fn convert_record(
    mapping: &FineRelationMapping,
    record: &FineRecord,
    source_id: impl Into<String>,
) -> Result<LabeledExtractionRecord> {
    let relation = mapping.map_relation(&record.relation)?;
    let tail = make_tail_phrase(&record.relation, &record.tail)?;
    Ok(LabeledExtractionRecord {
        utterance: record.utterance.clone(),
        head: canonical_text(&record.head),
        relation,
        tail,
        source_id: record.source_id.clone().unwrap_or_else(|| source_id.into()),
        split: None,
    })
}
