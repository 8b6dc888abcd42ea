//! File-based pipeline stages. Each stage reads JSONL, writes its artifacts
//! atomically into an output directory and records a `<stage>.manifest.json`
//! with the configuration, input and output digests and schema versions.
//! Manifests carry no timestamps or absolute paths, so identical runs
//! produce identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::annotation::{acceptance_ratio, agreement_report, load_session, AnnotationItem};
use crate::backends::table::TABLE_SCHEMA_VERSION;
use crate::backends::{NliTable, RemoteNli, RemoteScorer, RemoteScorerConfig, ScorerTable};
use crate::dataset::{
    build_nli_dataset, convert_record, ingest_jsonl, ingest_light_json, stratified_split,
    Corpus, ExtractionInput, FactLinkRecord, FineRecord, FineRelationMapping, InputKind,
    LabeledExtractionRecord, NliBuildOptions, SplitRatios, SPLIT_NAMES,
};
use crate::decoding::{decode, DecodeConfig, ScoredCandidate, TokenScorer};
use crate::error::{Error, Result};
use crate::grammar::Grammar;
use crate::graph::{build_graph, consolidate_triplets, export, ExportFormat, GRAPH_SCHEMA_VERSION};
use crate::jsonl::{read_jsonl, read_jsonl_lenient, to_line};
use crate::metrics::{intrinsic_report, reference_scores, CharacterExtractions};
use crate::nli::{adjudicate, AdjudicationConfig, NliScorer};
use crate::template::{parse_output, render_input, TemplateSpec, TemplateVariant, TEMPLATE_SCHEMA_VERSION};
use crate::triplet::{PersonaTriplet, RelationType};

const PROGRESS_EVERY: usize = 100;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Where token or NLI scores come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Table(PathBuf),
    Remote(String),
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix("table:") {
            Ok(BackendSpec::Table(PathBuf::from(path)))
        } else if let Some(url) = s.strip_prefix("remote:") {
            Ok(BackendSpec::Remote(url.to_string()))
        } else {
            Err(Error::invalid(format!(
                "backend `{s}` must look like table:PATH or remote:URL"
            )))
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Table(p) => write!(f, "table:{}", p.display()),
            BackendSpec::Remote(u) => write!(f, "remote:{u}"),
        }
    }
}

/// Manifest entry for a backend; table files are listed by name since their
/// digest goes into the inputs.
fn backend_value(spec: &BackendSpec) -> Value {
    match spec {
        BackendSpec::Table(p) => json!({ "kind": "table", "file": file_name(p) }),
        BackendSpec::Remote(u) => json!({ "kind": "remote", "url": u }),
    }
}

pub type DynScorer = Box<dyn TokenScorer + Send + Sync>;
pub type DynNli = Box<dyn NliScorer + Send + Sync>;

pub fn load_scorer(spec: &BackendSpec, remote: &RemoteScorerConfig) -> Result<DynScorer> {
    match spec {
        BackendSpec::Table(p) => Ok(Box::new(ScorerTable::load(p)?)),
        BackendSpec::Remote(url) => Ok(Box::new(RemoteScorer::connect(RemoteScorerConfig {
            base_url: url.clone(),
            ..remote.clone()
        })?)),
    }
}

pub fn load_nli(spec: &BackendSpec, remote: &RemoteScorerConfig) -> Result<DynNli> {
    match spec {
        BackendSpec::Table(p) => Ok(Box::new(NliTable::load(p)?)),
        BackendSpec::Remote(url) => Ok(Box::new(RemoteNli::new(RemoteScorerConfig {
            base_url: url.clone(),
            ..remote.clone()
        })?)),
    }
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: Value,
    /// File name to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
}

fn versions() -> BTreeMap<String, String> {
    [
        ("persona-core", env!("CARGO_PKG_VERSION").to_string()),
        ("template_schema", TEMPLATE_SCHEMA_VERSION.to_string()),
        ("table_schema", TABLE_SCHEMA_VERSION.to_string()),
        ("graph_schema", GRAPH_SCHEMA_VERSION.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Collects inputs and writes outputs for one stage.
#[derive(Debug)]
pub struct Run {
    command: String,
    dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Run {
    pub fn new(command: &str, out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        Ok(Run {
            command: command.to_string(),
            dir: out_dir.to_path_buf(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    /// Reads an input file and records its digest.
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        self.inputs.insert(file_name(path), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn read_string(&mut self, path: &Path) -> Result<String> {
        String::from_utf8(self.read(path)?)
            .map_err(|e| Error::invalid(format!("{} is not UTF-8: {e}", path.display())))
    }

    /// Records a digest for an input read elsewhere (e.g. a table backend).
    pub fn note_input(&mut self, path: &Path) -> Result<()> {
        self.read(path).map(|_| ())
    }

    /// Writes through a temporary file in the output directory, then renames.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(self.dir.join(name)).map_err(|e| Error::Io(e.error))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<()> {
        let mut buf = String::new();
        for item in items {
            buf.push_str(&to_line(item)?);
            buf.push('\n');
        }
        self.write(name, buf.as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(&serde_json::to_value(value)?)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    pub fn finish(mut self, config: Value) -> Result<Manifest> {
        let manifest = Manifest {
            command: self.command.clone(),
            config,
            inputs: std::mem::take(&mut self.inputs),
            outputs: std::mem::take(&mut self.outputs),
            versions: versions(),
        };
        let name = format!("{}.manifest.json", self.command);
        let mut s = serde_json::to_string_pretty(&serde_json::to_value(&manifest)?)?;
        s.push('\n');
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(s.as_bytes())?;
        tmp.persist(self.dir.join(name)).map_err(|e| Error::Io(e.error))?;
        Ok(manifest)
    }
}

fn parse_jsonl<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<Vec<T>> {
    read_jsonl(bytes)
}

fn relation_counts<'a>(relations: impl Iterator<Item = &'a RelationType>) -> Value {
    let mut counts: BTreeMap<&str, usize> = RelationType::ALL.iter().map(|r| (r.name(), 0)).collect();
    let mut total = 0;
    for r in relations {
        *counts.entry(r.name()).or_default() += 1;
        total += 1;
    }
    let fractions: BTreeMap<&str, Value> = counts
        .iter()
        .map(|(k, &c)| {
            let f = if total == 0 { 0.0 } else { c as f64 / total as f64 };
            (*k, json!((f * 10_000.0).round() / 10_000.0))
        })
        .collect();
    json!({ "total": total, "counts": counts, "fractions": fractions })
}

/// Fine-grained records to the persona relation schema.
pub fn run_convert(input: &Path, mapping: Option<&Path>, out_dir: &Path) -> Result<Manifest> {
    let mut run = Run::new("convert", out_dir)?;
    let mapping_label = mapping.map_or_else(|| "bundled".to_string(), file_name);
    let mapping = match mapping {
        Some(p) => FineRelationMapping::from_tsv(run.read(p)?.as_slice())?,
        None => FineRelationMapping::bundled(),
    };
    let records: Vec<FineRecord> = parse_jsonl(&run.read(input)?)?;
    let converted = records
        .iter()
        .enumerate()
        .map(|(i, r)| convert_record(&mapping, r, format!("pe-{:06}", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    run.write_jsonl("converted.jsonl", &converted)?;
    run.write_json("convert.summary.json", &relation_counts(converted.iter().map(|r| &r.relation)))?;
    run.finish(json!({
        "input": file_name(input),
        "mapping": mapping_label,
    }))
}

pub fn run_split(input: &Path, ratios: SplitRatios, seed: u64, out_dir: &Path) -> Result<Manifest> {
    let mut run = Run::new("split", out_dir)?;
    let records: Vec<LabeledExtractionRecord> = parse_jsonl(&run.read(input)?)?;
    let splits = stratified_split(&records, |r| r.relation.name().to_string(), ratios, seed)?;
    let mut summary = serde_json::Map::new();
    for (name, part) in SPLIT_NAMES.iter().zip(splits.parts()) {
        let tagged: Vec<LabeledExtractionRecord> = part
            .iter()
            .cloned()
            .map(|mut r| {
                r.split = Some(name.to_string());
                r
            })
            .collect();
        run.write_jsonl(&format!("{name}.jsonl"), &tagged)?;
        summary.insert(name.to_string(), relation_counts(part.iter().map(|r| &r.relation)));
    }
    summary.insert("degenerate_labels".into(), json!(splits.degenerate));
    run.write_json("split.summary.json", &summary)?;
    run.finish(json!({
        "input": file_name(input),
        "ratios": [ratios.train, ratios.dev, ratios.test],
        "seed": seed,
    }))
}

fn blocklist_entries(bytes: &[u8]) -> BTreeSet<String> {
    String::from_utf8_lossy(bytes)
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            serde_json::from_str::<Value>(line)
                .ok()
                .and_then(|v| {
                    v.get("utterance")
                        .or_else(|| v.get("text"))
                        .and_then(Value::as_str)
                        .map(str::to_string)
                })
                .unwrap_or_else(|| line.to_string())
                .trim()
                .to_string()
        })
        .collect()
}

pub fn run_build_nli(input: &Path, blocklist: Option<&Path>, out_dir: &Path) -> Result<Manifest> {
    let mut run = Run::new("build-nli", out_dir)?;
    let (records, bad) = read_jsonl_lenient::<FactLinkRecord, _>(run.read(input)?.as_slice())?;
    for e in &bad {
        log::warn!("skipping malformed fact-linking record: {e}");
    }
    let mut options = NliBuildOptions::default();
    if let Some(p) = blocklist {
        options.blocklist = blocklist_entries(&run.read(p)?);
    }
    let (examples, mut report) = build_nli_dataset(&records, &options);
    report.malformed += bad.len();
    run.write_jsonl("nli.jsonl", &examples)?;
    run.write_json("build-nli.summary.json", &report)?;
    run.finish(json!({
        "input": file_name(input),
        "blocklist": blocklist.map(file_name),
        "whitelist": options.whitelist,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Light,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "light" => Ok(CorpusFormat::Light),
            other => Err(Error::invalid(format!("unknown corpus format `{other}`"))),
        }
    }
}

pub fn run_ingest(
    input: &Path,
    format: CorpusFormat,
    with_descriptions: bool,
    out_dir: &Path,
) -> Result<Manifest> {
    let mut run = Run::new("ingest", out_dir)?;
    let bytes = run.read(input)?;
    let corpus: Corpus = match format {
        CorpusFormat::Jsonl => ingest_jsonl(bytes.as_slice())?,
        CorpusFormat::Light => ingest_light_json(&String::from_utf8_lossy(&bytes))?,
    };
    run.write_jsonl("utterances.jsonl", &corpus.utterances)?;
    run.write_jsonl("characters.jsonl", &corpus.characters)?;
    let inputs = corpus.extraction_inputs(with_descriptions);
    run.write_jsonl("inputs.jsonl", &inputs)?;
    run.write_json(
        "ingest.summary.json",
        &json!({
            "dialogues": corpus.dialogue_count(),
            "utterances": corpus.utterances.len(),
            "characters": corpus.characters.len(),
            "extraction_inputs": inputs.len(),
        }),
    )?;
    run.finish(json!({
        "input": file_name(input),
        "format": match format { CorpusFormat::Jsonl => "jsonl", CorpusFormat::Light => "light" },
        "descriptions": with_descriptions,
    }))
}

/// A decoded candidate with its parsed triplet (absent when malformed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    #[serde(flatten)]
    pub candidate: ScoredCandidate,
    pub triplet: Option<PersonaTriplet>,
}

/// Extraction output for one input text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub source_id: String,
    #[serde(default)]
    pub character_id: String,
    pub kind: InputKind,
    pub text: String,
    pub candidates: Vec<CandidateRecord>,
    /// Best retained triplet, or the no_relation sentinel.
    pub triplet: PersonaTriplet,
}

impl ExtractionRecord {
    /// Persona triplets of all retained candidates, in rank order.
    pub fn retained(&self) -> Vec<PersonaTriplet> {
        self.candidates
            .iter()
            .filter_map(|c| c.triplet.clone())
            .filter(PersonaTriplet::is_persona)
            .collect()
    }

    /// Retained persona triplets, or the sentinel when there are none.
    pub fn triplets_or_sentinel(&self) -> Vec<PersonaTriplet> {
        let kept = self.retained();
        if kept.is_empty() {
            vec![PersonaTriplet::no_relation(self.source_id.clone())]
        } else {
            kept
        }
    }
}

fn candidate_records(
    candidates: Vec<ScoredCandidate>,
    spec: &TemplateSpec,
    source_id: &str,
) -> Vec<CandidateRecord> {
    candidates
        .into_iter()
        .map(|c| CandidateRecord {
            triplet: parse_output(&c.text, spec)
                .ok()
                .map(|t| t.with_source(source_id)),
            candidate: c,
        })
        .collect()
}

fn best_triplet(candidates: &[CandidateRecord], source_id: &str) -> PersonaTriplet {
    candidates
        .iter()
        .find_map(|c| c.triplet.clone())
        .unwrap_or_else(|| PersonaTriplet::no_relation(source_id))
}

#[derive(Deserialize)]
struct AnyInput {
    source_id: Option<String>,
    #[serde(default)]
    character_id: String,
    kind: Option<InputKind>,
    text: Option<String>,
    utterance: Option<String>,
}

/// Accepts extraction inputs (`text`) as well as labeled records (`utterance`).
pub fn read_extraction_inputs(bytes: &[u8]) -> Result<Vec<ExtractionInput>> {
    let raw: Vec<AnyInput> = parse_jsonl(bytes)?;
    raw.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let text = r.text.or(r.utterance).ok_or_else(|| Error::Schema {
                line: i + 1,
                message: "record has neither `text` nor `utterance`".into(),
            })?;
            Ok(ExtractionInput {
                source_id: r.source_id.unwrap_or_else(|| format!("line-{}", i + 1)),
                character_id: r.character_id,
                kind: r.kind.unwrap_or(InputKind::Utterance),
                text,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractOptions {
    pub template: TemplateVariant,
    pub decode: DecodeConfig,
}

/// Decodes every input text; records are processed in parallel and written
/// in input order.
pub fn extract_records<S: TokenScorer + Sync + ?Sized>(
    inputs: &[ExtractionInput],
    scorer: &S,
    options: &ExtractOptions,
) -> Result<Vec<ExtractionRecord>> {
    options.decode.validate()?;
    let spec = TemplateSpec::new(options.template);
    let grammar = Grammar::new(&spec, scorer.vocab())?;
    let done = AtomicUsize::new(0);
    inputs
        .par_iter()
        .map(|input| {
            let context = render_input(&input.text, &spec);
            let candidates = decode(scorer, &context, &grammar, &options.decode)?;
            let candidates = candidate_records(candidates, &spec, &input.source_id);
            let n = done.fetch_add(1, Ordering::Relaxed) + 1;
            if n % PROGRESS_EVERY == 0 {
                log::info!("extract: {n}/{} records", inputs.len());
            }
            Ok(ExtractionRecord {
                triplet: best_triplet(&candidates, &input.source_id),
                source_id: input.source_id.clone(),
                character_id: input.character_id.clone(),
                kind: input.kind,
                text: input.text.clone(),
                candidates,
            })
        })
        .collect()
}

pub fn run_extract<S: TokenScorer + Sync + ?Sized>(
    input: &Path,
    scorer: &S,
    backend: &BackendSpec,
    options: &ExtractOptions,
    out_dir: &Path,
) -> Result<Manifest> {
    let mut run = Run::new("extract", out_dir)?;
    if let BackendSpec::Table(p) = backend {
        run.note_input(p)?;
    }
    let inputs = read_extraction_inputs(&run.read(input)?)?;
    let records = extract_records(&inputs, scorer, options)?;
    run.write_jsonl("extractions.jsonl", &records)?;
    run.finish(json!({
        "input": file_name(input),
        "template": options.template.name(),
        "decode": options.decode,
        "backend": backend_value(backend),
    }))
}

pub fn adjudicate_records<N: NliScorer + Sync + ?Sized>(
    records: &[ExtractionRecord],
    nli: &N,
    template: TemplateVariant,
    config: AdjudicationConfig,
) -> Result<Vec<ExtractionRecord>> {
    let spec = TemplateSpec::new(template);
    records
        .par_iter()
        .map(|r| {
            let candidates: Vec<ScoredCandidate> =
                r.candidates.iter().map(|c| c.candidate.clone()).collect();
            let out = adjudicate(nli, &r.text, &r.source_id, &candidates, &spec, config)?;
            let candidates = candidate_records(out.candidates, &spec, &r.source_id);
            let triplet = match out.sentinel {
                Some(t) => t,
                None => best_triplet(&candidates, &r.source_id),
            };
            Ok(ExtractionRecord {
                candidates,
                triplet,
                ..r.clone()
            })
        })
        .collect()
}

pub fn run_adjudicate<N: NliScorer + Sync + ?Sized>(
    input: &Path,
    nli: &N,
    backend: Option<&BackendSpec>,
    template: TemplateVariant,
    config: AdjudicationConfig,
    out_dir: &Path,
) -> Result<Manifest> {
    let mut run = Run::new("adjudicate", out_dir)?;
    if let Some(BackendSpec::Table(p)) = backend {
        run.note_input(p)?;
    }
    let records: Vec<ExtractionRecord> = parse_jsonl(&run.read(input)?)?;
    let out = adjudicate_records(&records, nli, template, config)?;
    run.write_jsonl("adjudicated.jsonl", &out)?;
    run.finish(json!({
        "input": file_name(input),
        "template": template.name(),
        "mode": config.mode.to_string(),
        "backend": backend.map(backend_value),
    }))
}

/// Scores top predictions against gold records matched by source id.
pub fn run_metrics_reference(predictions: &Path, gold: &Path, out_dir: &Path) -> Result<Manifest> {
    let mut run = Run::new("metrics", out_dir)?;
    let preds: Vec<ExtractionRecord> = parse_jsonl(&run.read(predictions)?)?;
    let golds: Vec<LabeledExtractionRecord> = parse_jsonl(&run.read(gold)?)?;
    let by_id: BTreeMap<&str, &ExtractionRecord> =
        preds.iter().map(|p| (p.source_id.as_str(), p)).collect();
    let mut p = Vec::with_capacity(golds.len());
    let mut g = Vec::with_capacity(golds.len());
    for gold in &golds {
        let pred = by_id.get(gold.source_id.as_str()).ok_or_else(|| {
            Error::invalid(format!("no prediction for source `{}`", gold.source_id))
        })?;
        p.push(pred.triplet.clone());
        g.push(gold.gold());
    }
    let scores = reference_scores(&p, &g)?;
    run.write("reference.json", scores.to_json()?.as_bytes())?;
    run.finish(json!({
        "kind": "reference",
        "predictions": file_name(predictions),
        "gold": file_name(gold),
    }))
}

/// Groups extraction records into per-character inputs for intrinsic metrics.
pub fn character_extractions(
    records: &[ExtractionRecord],
    descriptions: &[ExtractionRecord],
) -> Vec<CharacterExtractions> {
    let mut by_char: BTreeMap<&str, CharacterExtractions> = BTreeMap::new();
    for r in records.iter().filter(|r| r.kind == InputKind::Utterance) {
        let c = by_char
            .entry(&r.character_id)
            .or_insert_with(|| CharacterExtractions {
                character: r.character_id.clone(),
                utterance_count: 0,
                dialogue: Vec::new(),
                description: Vec::new(),
            });
        c.utterance_count += 1;
        c.dialogue.extend(r.triplets_or_sentinel());
    }
    for r in records
        .iter()
        .chain(descriptions)
        .filter(|r| r.kind == InputKind::Description)
    {
        match by_char.get_mut(r.character_id.as_str()) {
            Some(c) => c.description.extend(r.retained()),
            None => log::warn!(
                "description sentence `{}` belongs to a character without utterances",
                r.source_id
            ),
        }
    }
    by_char.into_values().collect()
}

pub fn run_metrics_intrinsic(
    extractions: &Path,
    descriptions: Option<&Path>,
    out_dir: &Path,
) -> Result<Manifest> {
    let mut run = Run::new("metrics", out_dir)?;
    let records: Vec<ExtractionRecord> = parse_jsonl(&run.read(extractions)?)?;
    let desc: Vec<ExtractionRecord> = match descriptions {
        Some(p) => parse_jsonl(&run.read(p)?)?,
        None => Vec::new(),
    };
    let report = intrinsic_report(&character_extractions(&records, &desc))?;
    run.write("intrinsic.json", report.to_json()?.as_bytes())?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    run.write("intrinsic.csv", &csv)?;
    run.finish(json!({
        "kind": "intrinsic",
        "extractions": file_name(extractions),
        "descriptions": descriptions.map(file_name),
    }))
}

/// One JSON and one DOT graph per character, from utterance extractions.
pub fn run_graph(input: &Path, out_dir: &Path) -> Result<Manifest> {
    let mut run = Run::new("graph", out_dir)?;
    let records: Vec<ExtractionRecord> = parse_jsonl(&run.read(input)?)?;
    let mut by_char: BTreeMap<&str, Vec<PersonaTriplet>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.kind == InputKind::Utterance) {
        by_char.entry(&r.character_id).or_default().extend(r.retained());
    }
    let mut index = Vec::new();
    for (character, triplets) in by_char {
        let graph = build_graph(character, &consolidate_triplets(&triplets));
        let stem = if character.is_empty() { "unknown" } else { character };
        run.write(&format!("graph-{stem}.json"), export(&graph, ExportFormat::Json)?.as_bytes())?;
        run.write(&format!("graph-{stem}.dot"), export(&graph, ExportFormat::Dot)?.as_bytes())?;
        index.push(json!({
            "character": character,
            "nodes": graph.nodes.len(),
            "edges": graph.edges.len(),
            "support": graph.total_support(),
        }));
    }
    run.write_jsonl("graphs.jsonl", &index)?;
    run.finish(json!({ "input": file_name(input) }))
}

/// Consolidated utterance triplets of one character, in graph order.
pub fn annotation_items(records: &[ExtractionRecord], character_id: &str) -> Vec<AnnotationItem> {
    let triplets: Vec<PersonaTriplet> = records
        .iter()
        .filter(|r| r.kind == InputKind::Utterance && r.character_id == character_id)
        .flat_map(ExtractionRecord::retained)
        .collect();
    consolidate_triplets(&triplets)
        .iter()
        .map(|t| AnnotationItem::new(character_id, t.triplet()))
        .collect()
}

pub fn run_agreement(sessions: &[PathBuf], out_dir: &Path) -> Result<Manifest> {
    let mut run = Run::new("agreement", out_dir)?;
    let mut records = Vec::new();
    for p in sessions {
        records.extend(load_session(run.read(p)?.as_slice())?);
    }
    let report = agreement_report(&records)?;
    run.write_json(
        "agreement.json",
        &json!({ "agreement": report, "acceptance": acceptance_ratio(&records) }),
    )?;
    run.finish(json!({
        "sessions": sessions.iter().map(|p| file_name(p)).collect::<Vec<_>>(),
    }))
}

/// One stage invocation with all of its inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Convert {
        input: PathBuf,
        mapping: Option<PathBuf>,
    },
    Split {
        input: PathBuf,
        ratios: SplitRatios,
    },
    BuildNli {
        input: PathBuf,
        blocklist: Option<PathBuf>,
    },
    Ingest {
        input: PathBuf,
        format: CorpusFormat,
        descriptions: bool,
    },
    Extract {
        input: PathBuf,
        backend: BackendSpec,
        options: ExtractOptions,
    },
    Adjudicate {
        input: PathBuf,
        backend: Option<BackendSpec>,
        template: TemplateVariant,
        config: AdjudicationConfig,
    },
    MetricsReference {
        predictions: PathBuf,
        gold: PathBuf,
    },
    MetricsIntrinsic {
        extractions: PathBuf,
        descriptions: Option<PathBuf>,
    },
    Graph {
        input: PathBuf,
    },
    Agreement {
        sessions: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Timeouts and concurrency for remote backends; the URL comes from the
    /// backend selection.
    pub remote: RemoteScorerConfig,
}

impl RunConfig {
    pub fn new(command: Command, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            command,
            out_dir: out_dir.into(),
            seed: 0,
            remote: RemoteScorerConfig::new(""),
        }
    }
}

/// Stand-in judge for `--mode none`, which never consults a model.
struct NoNli;

impl NliScorer for NoNli {
    fn nli_logprobs(&self, _premise: &str, _hypothesis: &str) -> Result<crate::nli::NliLogProbs> {
        Err(Error::invalid("no NLI backend was selected"))
    }
}

pub fn execute(cfg: &RunConfig) -> Result<Manifest> {
    let out = cfg.out_dir.as_path();
    match &cfg.command {
        Command::Convert { input, mapping } => run_convert(input, mapping.as_deref(), out),
        Command::Split { input, ratios } => run_split(input, *ratios, cfg.seed, out),
        Command::BuildNli { input, blocklist } => run_build_nli(input, blocklist.as_deref(), out),
        Command::Ingest {
            input,
            format,
            descriptions,
        } => run_ingest(input, *format, *descriptions, out),
        Command::Extract {
            input,
            backend,
            options,
        } => {
            let scorer = load_scorer(backend, &cfg.remote)?;
            run_extract(input, scorer.as_ref(), backend, options, out)
        }
        Command::Adjudicate {
            input,
            backend,
            template,
            config,
        } => match backend {
            Some(b) => {
                let nli = load_nli(b, &cfg.remote)?;
                run_adjudicate(input, nli.as_ref(), Some(b), *template, *config, out)
            }
            None if config.mode == crate::nli::AdjudicationMode::None => {
                run_adjudicate(input, &NoNli, None, *template, *config, out)
            }
            None => Err(Error::invalid(format!(
                "adjudication mode {} needs an NLI backend",
                config.mode
            ))),
        },
        Command::MetricsReference { predictions, gold } => {
            run_metrics_reference(predictions, gold, out)
        }
        Command::MetricsIntrinsic {
            extractions,
            descriptions,
        } => run_metrics_intrinsic(extractions, descriptions.as_deref(), out),
        Command::Graph { input } => run_graph(input, out),
        Command::Agreement { sessions } => run_agreement(sessions, out),
    }
}
