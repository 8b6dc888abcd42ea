//! Dataset preparation: relation conversion, stratified splits, entailment
//! training pairs and dialogue corpus ingestion.

pub mod corpus;
pub mod mapping;
pub mod nli_data;
pub mod split;

pub use corpus::{
    character_id, ingest_jsonl, ingest_light_json, split_description_sentences, CharacterProfile,
    Corpus, ExtractionInput, InputKind, UtteranceRecord,
};
pub use mapping::{
    convert_record, make_tail_phrase, FineRecord, FineRelationMapping, LabeledExtractionRecord,
};
pub use nli_data::{
    build_nli_dataset, FactLinkRecord, NliBuildOptions, NliBuildReport, NliExample, NliLabel,
    DEFAULT_WHITELIST,
};
pub use split::{largest_remainder, stratified_split, SplitRatios, Splits, SPLIT_NAMES};
