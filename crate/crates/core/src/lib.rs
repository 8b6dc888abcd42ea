//! Persona knowledge extraction: template-constrained triplet decoding,
//! NLI adjudication, dataset preparation, metrics, persona graphs and
//! annotation tooling.

pub mod annotation;
pub mod backends;
pub mod dataset;
pub mod decoding;
pub mod error;
pub mod graph;
pub mod grammar;
pub mod jsonl;
pub mod metrics;
pub mod nli;
pub mod pipeline;
pub mod template;
pub mod triplet;
pub mod vocab;

/// Stand-in for negative infinity in serialized log-probabilities.
pub const LOGPROB_FLOOR: f64 = -1e9;

pub use annotation::{
    acceptance_ratio, agreement_report, krippendorff_alpha, nominal_alpha, AgreementLevel,
    AnnotationRecord, Verdict,
};
pub use backends::{NliProbs, NliTable, RemoteNli, RemoteScorer, RemoteScorerConfig, ScorerTable};
pub use decoding::{
    avg_logprob, decode, decode_beam, decode_diverse_beam, decode_diverse_beam_groups,
    decode_greedy, DecodeConfig, DecodeMethod, Ranking, ScoredCandidate, TokenScorer,
};
pub use error::{Error, Result};
pub use graph::{
    build_graph, consolidate, consolidate_triplets, export, import_json, ExportFormat, PersonaGraph,
    SupportedTriplet,
};
pub use grammar::{Grammar, GrammarState};
pub use metrics::{
    coverage, first_person_ratio, intrinsic_report, persona_recall, reference_scores,
    unique_entity_ratios, IntrinsicReport, ReferenceScores,
};
pub use nli::{
    adjudicate, collapse_binary, filter_neutral_removed, rerank, Adjudicated,
    AdjudicationConfig, AdjudicationMode, FilterOutcome, NliLogProbs, NliScorer, NliVerdict,
};
pub use template::{parse_output, render_input, render_output, MalformedOutput, TemplateSpec, TemplateVariant};
pub use triplet::{triplet_to_sentence, PersonaTriplet, RelationType};
pub use vocab::{TokenId, Vocab};
