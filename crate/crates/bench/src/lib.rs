//! Synthetic workloads shared by the benchmarks.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use persona_core::annotation::{AnnotationRecord, Verdict};
use persona_core::vocab::{TokenId, Vocab};
use persona_core::{Result, TokenScorer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic pseudo-random next-token distributions over a standard
/// vocabulary with `words` content tokens.
pub struct SyntheticScorer {
    vocab: Vocab,
    seed: u64,
}

impl SyntheticScorer {
    pub fn new(words: usize, seed: u64) -> Self {
        let content: Vec<String> = (0..words).map(|i| format!("w{i}")).collect();
        SyntheticScorer {
            vocab: Vocab::standard(&content).expect("valid vocabulary"),
            seed,
        }
    }
}

impl TokenScorer for SyntheticScorer {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn next_token_logprobs(&self, context: &str, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut h = DefaultHasher::new();
        (self.seed, context, prefix).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let weights: Vec<f64> = (0..self.vocab.len())
            .map(|_| rng.random::<f64>() + 1e-3)
            .collect();
        let log_total = weights.iter().sum::<f64>().ln();
        Ok(weights.into_iter().map(|w| w.ln() - log_total).collect())
    }
}

/// `items` triplets each judged by `annotators` annotators at random.
pub fn random_session(items: usize, annotators: usize, seed: u64) -> Vec<AnnotationRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..items)
        .flat_map(|i| (0..annotators).map(move |a| (i, a)))
        .map(|(i, a)| AnnotationRecord {
            triplet_id: format!("t{i:05}"),
            annotator: format!("a{a}"),
            verdict: Verdict::ALL[rng.random_range(0..Verdict::ALL.len())],
            timestamp: 0,
        })
        .collect()
}
