use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use persona_core::backends::NliProbs;
use persona_core::template::{render_input, render_output, TemplateSpec, TemplateVariant};
use persona_core::vocab::Vocab;
use persona_core::{NliTable, PersonaTriplet, RelationType, ScorerTable};
use serde_json::Value;
use tempfile::TempDir;

const WORDS: [&str; 9] = ["i", "sail", "sea", "gold", "dog", "sword", "village", "like", "have"];

fn fixture() -> Vec<(&'static str, PersonaTriplet)> {
    use RelationType::*;
    vec![
        ("I sail the sea every day.", PersonaTriplet::new("i", RoutineHabit, "sail sea")),
        ("Gold is what I want.", PersonaTriplet::new("i", GoalPlan, "gold")),
        ("My dog follows me.", PersonaTriplet::new("i", Characteristic, "have dog")),
        ("I grew up in a village.", PersonaTriplet::new("i", Experience, "village")),
        ("I like my sword.", PersonaTriplet::new("i", Characteristic, "like sword")),
    ]
}

/// Writes the inputs and a table that puts 0.9 on each token of the expected
/// output and spreads the rest evenly, so greedy decoding traces it exactly.
fn write_fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let spec = TemplateSpec::new(TemplateVariant::RelationFirst);
    let vocab = Vocab::standard(&WORDS).unwrap();
    let mut table = ScorerTable::new(vocab.clone(), true);
    let mut inputs = String::new();
    for (i, (text, triplet)) in fixture().iter().enumerate() {
        inputs.push_str(&format!(
            "{{\"source_id\":\"u{}\",\"character_id\":\"pirate\",\"text\":{:?}}}\n",
            i + 1,
            text
        ));
        let context = render_input(text, &spec);
        let mut ids: Vec<u32> = render_output(triplet, &spec)
            .split_whitespace()
            .map(|t| vocab.id(t).unwrap_or_else(|| panic!("`{t}` not in vocabulary")))
            .collect();
        if ids.last() != Some(&vocab.eos_id()) {
            ids.push(vocab.eos_id());
        }
        let rest = 0.1 / (vocab.len() - 1) as f64;
        for k in 0..ids.len() {
            let mut probs = vec![rest; vocab.len()];
            probs[ids[k] as usize] = 0.9;
            table.insert_probs(&context, &ids[..k], &probs).unwrap();
        }
    }
    let input = dir.join("utterances.jsonl");
    fs::write(&input, inputs).unwrap();
    let scores = dir.join("scores.json");
    fs::write(&scores, table.to_json().unwrap()).unwrap();
    let nli = dir.join("nli.json");
    fs::write(&nli, NliTable::new(NliProbs::neutral_certain()).to_json().unwrap()).unwrap();
    (input, scores, nli)
}

fn persona(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_persona"))
        .args(args)
        .env_remove("PERSONA_SIDECAR_URL")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn extract(dir: &Path, input: &Path, scores: &Path, out: &str) -> PathBuf {
    let out = dir.join(out);
    let backend = format!("table:{}", s(scores));
    let o = persona(&["extract", "--input", s(input), "--backend", &backend, "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn greedy_extract_traces_fixture() {
    let tmp = TempDir::new().unwrap();
    let (input, scores, _) = write_fixture(tmp.path());
    let out = extract(tmp.path(), &input, &scores, "x");
    let records = lines(&out.join("extractions.jsonl"));
    assert_eq!(records.len(), 5);
    for (record, (_, want)) in records.iter().zip(fixture()) {
        let got: PersonaTriplet = serde_json::from_value(record["triplet"].clone()).unwrap();
        assert_eq!((got.head, got.relation, got.tail), (want.head, want.relation, want.tail));
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("extract.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "extract");
    assert!(manifest["outputs"]["extractions.jsonl"].is_string());
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = persona(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn missing_backend_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let (input, _, _) = write_fixture(tmp.path());
    let o = persona(&["extract", "--input", s(&input), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_input_is_data_error() {
    let tmp = TempDir::new().unwrap();
    let o = persona(&["graph", "--input", s(&tmp.path().join("absent.jsonl")), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unreachable_sidecar_is_backend_error() {
    let tmp = TempDir::new().unwrap();
    let (input, _, _) = write_fixture(tmp.path());
    let o = persona(&[
        "extract",
        "--input",
        s(&input),
        "--backend",
        "remote:http://127.0.0.1:9",
        "--timeout-ms",
        "500",
        "--out",
        s(&tmp.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn neutral_removed_without_entailment_gives_sentinels() {
    let tmp = TempDir::new().unwrap();
    let (input, scores, nli) = write_fixture(tmp.path());
    let x = extract(tmp.path(), &input, &scores, "x");
    let out = tmp.path().join("adj");
    let backend = format!("table:{}", s(&nli));
    let o = persona(&[
        "adjudicate",
        "--input",
        s(&x.join("extractions.jsonl")),
        "--mode",
        "neutral-removed",
        "--backend",
        &backend,
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let records = lines(&out.join("adjudicated.jsonl"));
    assert_eq!(records.len(), 5);
    for r in records {
        assert_eq!(r["triplet"]["relation"], "no_relation");
    }
}

#[test]
fn adjudicate_none_is_identity() {
    let tmp = TempDir::new().unwrap();
    let (input, scores, _) = write_fixture(tmp.path());
    let x = extract(tmp.path(), &input, &scores, "x");
    let out = tmp.path().join("adj");
    let o = persona(&["adjudicate", "--input", s(&x.join("extractions.jsonl")), "--mode", "none", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(out.join("adjudicated.jsonl")).unwrap(),
        fs::read(x.join("extractions.jsonl")).unwrap()
    );
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let (input, scores, _) = write_fixture(tmp.path());
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let x = extract(tmp.path(), &input, &scores, name);
        let o = persona(&["graph", "--input", s(&x.join("extractions.jsonl")), "--out", s(&x)]);
        assert_eq!(o.status.code(), Some(0));
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&x)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        runs.push(files);
    }
    assert!(runs[0].len() >= 5);
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn beam_extract_keeps_candidates() {
    let tmp = TempDir::new().unwrap();
    let (input, scores, _) = write_fixture(tmp.path());
    let out = tmp.path().join("beam");
    let backend = format!("table:{}", s(&scores));
    let o = persona(&[
        "extract", "--input", s(&input), "--backend", &backend, "--method", "diverse-beam", "--beams", "4",
        "--groups", "2", "--lambda", "0.5", "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for r in lines(&out.join("extractions.jsonl")) {
        assert_eq!(r["candidates"].as_array().unwrap().len(), 4);
    }
}

#[test]
fn bad_flag_value_is_usage_error() {
    let o = persona(&["extract", "--input", "x", "--backend", "table:x", "--method", "sampling"]);
    assert_eq!(o.status.code(), Some(1));
}

fn annotate(dir: &Path, extractions: &Path, annotator: &str, answers: &str) -> PathBuf {
    use std::io::Write;
    let characters = dir.join("characters.jsonl");
    fs::write(
        &characters,
        "{\"character_id\":\"pirate\",\"name\":\"Pirate\",\"description\":\"I am a pirate. I sail the sea.\"}\n",
    )
    .unwrap();
    let session = dir.join(format!("session-{annotator}.jsonl"));
    let mut child = Command::new(env!("CARGO_BIN_EXE_persona"))
        .args([
            "annotate", "--input", s(extractions), "--characters", s(&characters), "--character", "pirate",
            "--annotator", annotator, "--session", s(&session),
        ])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(answers.as_bytes()).unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    session
}

#[test]
fn annotation_resumes_and_feeds_agreement() {
    let tmp = TempDir::new().unwrap();
    let (input, scores, _) = write_fixture(tmp.path());
    let x = extract(tmp.path(), &input, &scores, "x").join("extractions.jsonl");
    let a = annotate(tmp.path(), &x, "ann1", "1\n2\nq\n");
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 2);
    annotate(tmp.path(), &x, "ann1", "bogus\n3\n1\n1\n");
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 5);
    let b = annotate(tmp.path(), &x, "ann2", "1\n2\n3\n1\n4\n");
    let out = tmp.path().join("agree");
    let o = persona(&["agreement", s(&a), s(&b), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("agreement.json")).unwrap()).unwrap();
    assert_eq!(report["agreement"]["shared_items"], 5);
    assert_eq!(report["acceptance"]["total"], 10);
}
