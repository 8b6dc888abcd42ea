//! Implementations of the token-scoring and NLI-scoring contracts.

pub mod remote;
pub mod table;

pub use remote::{RemoteClient, RemoteNli, RemoteScorer, RemoteScorerConfig, VocabResponse};
pub use table::{NliProbs, NliTable, ScorerTable};
