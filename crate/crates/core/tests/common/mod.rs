#![allow(dead_code)]

pub mod oracle;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use persona_core::template::{TemplateSpec, TemplateVariant};
use persona_core::vocab::{all_structure_tokens, TokenId, Vocab};
use persona_core::{Result, ScorerTable, TokenScorer, LOGPROB_FLOOR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: [&str; 12] = [
    "gold", "sword", "ship", "dog", "sea", "village", "like", "own", "want", "have", "pet", "map",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bias {
    Plain,
    EosHeavy,
    StructureHeavy,
}

/// Pseudo-random next-token distributions keyed by (seed, context, prefix),
/// so the answer never depends on query order.
pub struct HashScorer {
    vocab: Vocab,
    seed: u64,
    bias: Bias,
    boosted: Vec<bool>,
}

impl HashScorer {
    pub fn new(vocab: Vocab, seed: u64, bias: Bias) -> Self {
        let structure = all_structure_tokens();
        let boosted = vocab
            .tokens()
            .iter()
            .enumerate()
            .map(|(i, t)| match bias {
                Bias::Plain => false,
                Bias::EosHeavy => i as TokenId == vocab.eos_id(),
                Bias::StructureHeavy => structure.contains(t),
            })
            .collect();
        HashScorer {
            vocab,
            seed,
            bias,
            boosted,
        }
    }

    pub fn probs(&self, context: &str, prefix: &[TokenId]) -> Vec<f64> {
        let mut h = DefaultHasher::new();
        (self.seed, context, prefix).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let mut p: Vec<f64> = self
            .boosted
            .iter()
            .map(|&b| {
                let u: f64 = rng.random();
                let w = u * u * u;
                if b {
                    w * 50.0 + 1.0
                } else if self.bias != Bias::Plain && rng.random_bool(0.2) {
                    0.0
                } else {
                    w + 1e-3
                }
            })
            .collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= total);
        p
    }
}

impl TokenScorer for HashScorer {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn next_token_logprobs(&self, context: &str, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self
            .probs(context, prefix)
            .into_iter()
            .map(|p| p.ln().max(LOGPROB_FLOOR))
            .collect())
    }
}

/// A [`ScorerTable`] filled on demand from a [`HashScorer`]; every lookup
/// goes through the table itself.
pub struct LazyTable {
    source: HashScorer,
    table: Mutex<ScorerTable>,
    vocab: Vocab,
}

impl LazyTable {
    pub fn new(source: HashScorer) -> Self {
        let vocab = source.vocab().clone();
        LazyTable {
            table: Mutex::new(ScorerTable::new(vocab.clone(), false)),
            source,
            vocab,
        }
    }

    pub fn into_table(self) -> ScorerTable {
        self.table.into_inner().unwrap()
    }
}

impl TokenScorer for LazyTable {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn next_token_logprobs(&self, context: &str, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut table = self.table.lock().unwrap();
        if table.get(context, prefix).is_none() {
            table.insert_probs(context, prefix, &self.source.probs(context, prefix))?;
        }
        table.lookup(context, prefix)
    }
}

pub fn content_words(n: usize) -> Vec<String> {
    WORDS.iter().take(n).map(|w| w.to_string()).collect()
}

pub fn spec(variant: TemplateVariant) -> TemplateSpec {
    TemplateSpec::new(variant)
}

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("data")
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

pub fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
