//! Human evaluation of extracted triplets: a resumable terminal session,
//! acceptance ratios and Krippendorff's alpha for nominal data.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::CharacterProfile;
use crate::error::{Error, Result};
use crate::triplet::PersonaTriplet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    YesDirectly,
    YesReasonable,
    NoContradictory,
    NoUnreasonable,
    NoNonspecific,
    NoMalformed,
}

impl Verdict {
    pub const ALL: [Verdict; 6] = [
        Verdict::YesDirectly,
        Verdict::YesReasonable,
        Verdict::NoContradictory,
        Verdict::NoUnreasonable,
        Verdict::NoNonspecific,
        Verdict::NoMalformed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Verdict::YesDirectly => "yes_directly",
            Verdict::YesReasonable => "yes_reasonable",
            Verdict::NoContradictory => "no_contradictory",
            Verdict::NoUnreasonable => "no_unreasonable",
            Verdict::NoNonspecific => "no_nonspecific",
            Verdict::NoMalformed => "no_malformed",
        }
    }

    pub fn is_accepted(self) -> bool {
        matches!(self, Verdict::YesDirectly | Verdict::YesReasonable)
    }

    /// Top-level yes/no label.
    pub fn binary(self) -> &'static str {
        if self.is_accepted() {
            "yes"
        } else {
            "no"
        }
    }

    fn help(self) -> &'static str {
        match self {
            Verdict::YesDirectly => "stated outright in the description",
            Verdict::YesReasonable => "fits the character though not stated",
            Verdict::NoContradictory => "conflicts with the description",
            Verdict::NoUnreasonable => "does not fit the character or setting",
            Verdict::NoNonspecific => "too vague to say anything about the character",
            Verdict::NoMalformed => "not a well-formed persona fact",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(n) = s.parse::<usize>() {
            if (1..=6).contains(&n) {
                return Ok(Verdict::ALL[n - 1]);
            }
        }
        Verdict::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown verdict `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub triplet_id: String,
    pub annotator: String,
    pub verdict: Verdict,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// Stable id of a triplet within a character's graph.
pub fn triplet_id(character: &str, t: &PersonaTriplet) -> String {
    let (h, r, tail) = t.key();
    let mut d = Sha256::new();
    for part in [character, &h, r.name(), &tail] {
        d.update(part.as_bytes());
        d.update([0x1f]);
    }
    hex::encode(&d.finalize()[..8])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationItem {
    pub triplet_id: String,
    pub triplet: PersonaTriplet,
}

impl AnnotationItem {
    pub fn new(character: &str, triplet: PersonaTriplet) -> Self {
        AnnotationItem {
            triplet_id: triplet_id(character, &triplet),
            triplet,
        }
    }

    fn is_malformed(&self) -> bool {
        !self.triplet.is_persona()
            || self.triplet.head.trim().is_empty()
            || self.triplet.tail.trim().is_empty()
    }
}

/// Reads a session file. A final line cut off mid-write is ignored.
pub fn load_session<R: BufRead>(reader: R) -> Result<Vec<AnnotationRecord>> {
    let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => {
                log::warn!("ignoring incomplete last line {} of session file", i + 1);
            }
            Err(e) => {
                return Err(Error::Schema {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

fn write_header<W: Write>(out: &mut W, profile: &CharacterProfile, todo: usize) -> Result<()> {
    writeln!(out, "Character: {}", profile.name)?;
    writeln!(out, "Description: {}", profile.description)?;
    writeln!(out)?;
    writeln!(out, "Judge each triplet on its own, even if it conflicts with another one.")?;
    writeln!(out, "Judge against the character as they are now: a wish to become what the")?;
    writeln!(out, "character already is counts as contradictory.")?;
    writeln!(out)?;
    for (i, v) in Verdict::ALL.iter().enumerate() {
        writeln!(out, "  {}  {:<17} {}", i + 1, v.name(), v.help())?;
    }
    writeln!(out, "  q  quit (progress is saved)")?;
    writeln!(out, "{todo} triplet(s) to annotate.")?;
    Ok(())
}

/// Prompts for each unanswered item, appending one JSON line per verdict to
/// `session` as soon as it is given. Malformed items are labeled
/// `no_malformed` without a prompt. Returns the new records.
#[allow(clippy::too_many_arguments)]
pub fn run_session<I: BufRead, O: Write, S: Write>(
    items: &[AnnotationItem],
    profile: &CharacterProfile,
    annotator: &str,
    existing: &[AnnotationRecord],
    mut input: I,
    mut prompt: O,
    mut session: S,
    now: impl Fn() -> u64,
) -> Result<Vec<AnnotationRecord>> {
    let mut done: BTreeSet<&str> = existing
        .iter()
        .filter(|r| r.annotator == annotator)
        .map(|r| r.triplet_id.as_str())
        .collect();
    let todo: Vec<&AnnotationItem> = items
        .iter()
        .filter(|it| done.insert(it.triplet_id.as_str()))
        .collect();
    let mut new = Vec::new();
    let mut emit = |item: &AnnotationItem, verdict: Verdict, session: &mut S| -> Result<()> {
        let rec = AnnotationRecord {
            triplet_id: item.triplet_id.clone(),
            annotator: annotator.to_string(),
            verdict,
            timestamp: now(),
        };
        writeln!(session, "{}", serde_json::to_string(&rec)?)?;
        session.flush()?;
        new.push(rec);
        Ok(())
    };

    if todo.is_empty() {
        return Ok(new);
    }
    write_header(&mut prompt, profile, todo.len())?;
    'items: for (n, item) in todo.iter().enumerate() {
        if item.is_malformed() {
            emit(item, Verdict::NoMalformed, &mut session)?;
            continue;
        }
        let t = &item.triplet;
        loop {
            write!(
                prompt,
                "\n[{}/{}] ({}, {}, {})\nverdict> ",
                n + 1,
                todo.len(),
                t.head,
                t.relation,
                t.tail
            )?;
            prompt.flush()?;
            let mut line = String::new();
            if input.read_line(&mut line)? == 0 {
                break 'items;
            }
            let answer = line.trim();
            if answer.eq_ignore_ascii_case("q") {
                break 'items;
            }
            match answer.parse::<Verdict>() {
                Ok(v) => {
                    emit(item, v, &mut session)?;
                    break;
                }
                Err(_) => writeln!(prompt, "please answer 1-6 or q")?,
            }
        }
    }
    Ok(new)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceSummary {
    pub accepted: usize,
    pub total: usize,
    pub ratio: f64,
    pub histogram: BTreeMap<Verdict, usize>,
}

/// Share of yes verdicts; `None` for no records.
pub fn acceptance_ratio(records: &[AnnotationRecord]) -> Option<AcceptanceSummary> {
    if records.is_empty() {
        return None;
    }
    let mut histogram: BTreeMap<Verdict, usize> = Verdict::ALL.iter().map(|v| (*v, 0)).collect();
    for r in records {
        *histogram.entry(r.verdict).or_default() += 1;
    }
    let accepted = records.iter().filter(|r| r.verdict.is_accepted()).count();
    Some(AcceptanceSummary {
        accepted,
        total: records.len(),
        ratio: accepted as f64 / records.len() as f64,
        histogram,
    })
}

/// Nominal Krippendorff's alpha from the coincidence matrix. Each unit lists
/// the values it received; units with fewer than two values are not pairable
/// and are skipped.
pub fn nominal_alpha<V: Ord + Clone>(units: &[Vec<V>]) -> Result<f64> {
    let mut coincidence: BTreeMap<(V, V), f64> = BTreeMap::new();
    let mut pairable = 0;
    for values in units.iter().filter(|u| u.len() >= 2) {
        pairable += 1;
        let w = 1.0 / (values.len() - 1) as f64;
        for (i, a) in values.iter().enumerate() {
            for (j, b) in values.iter().enumerate() {
                if i != j {
                    *coincidence.entry((a.clone(), b.clone())).or_default() += w;
                }
            }
        }
    }
    if pairable == 0 {
        return Err(Error::UndefinedAgreement("no item was rated by two annotators".into()));
    }
    let mut marginal: BTreeMap<V, f64> = BTreeMap::new();
    for ((a, _), w) in &coincidence {
        *marginal.entry(a.clone()).or_default() += w;
    }
    let n: f64 = marginal.values().sum();
    let observed: f64 = coincidence
        .iter()
        .filter(|((a, b), _)| a != b)
        .map(|(_, w)| w)
        .sum();
    let expected: f64 = n * n - marginal.values().map(|m| m * m).sum::<f64>();
    if expected == 0.0 {
        // a single category throughout: no disagreement is possible
        return Ok(1.0);
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementLevel {
    /// yes/no.
    Binary,
    /// The six sub-categories.
    Detailed,
}

/// Groups records by triplet id; later records from the same annotator win.
fn units(records: &[AnnotationRecord]) -> BTreeMap<&str, BTreeMap<&str, Verdict>> {
    let mut by_item: BTreeMap<&str, BTreeMap<&str, Verdict>> = BTreeMap::new();
    for r in records {
        by_item
            .entry(&r.triplet_id)
            .or_default()
            .insert(&r.annotator, r.verdict);
    }
    by_item
}

pub fn krippendorff_alpha(records: &[AnnotationRecord], level: AgreementLevel) -> Result<f64> {
    let values: Vec<Vec<&'static str>> = units(records)
        .into_values()
        .map(|m| {
            m.into_values()
                .map(|v| match level {
                    AgreementLevel::Binary => v.binary(),
                    AgreementLevel::Detailed => v.name(),
                })
                .collect()
        })
        .collect();
    nominal_alpha(&values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub annotators: Vec<String>,
    pub items: usize,
    pub shared_items: usize,
    pub alpha_binary: f64,
    pub alpha_detailed: f64,
    pub histogram: BTreeMap<Verdict, usize>,
}

pub fn agreement_report(records: &[AnnotationRecord]) -> Result<AgreementReport> {
    let u = units(records);
    let annotators: BTreeSet<&str> = records.iter().map(|r| r.annotator.as_str()).collect();
    let histogram = acceptance_ratio(records)
        .map(|s| s.histogram)
        .unwrap_or_default();
    Ok(AgreementReport {
        annotators: annotators.into_iter().map(str::to_string).collect(),
        items: u.len(),
        shared_items: u.values().filter(|m| m.len() >= 2).count(),
        alpha_binary: krippendorff_alpha(records, AgreementLevel::Binary)?,
        alpha_detailed: krippendorff_alpha(records, AgreementLevel::Detailed)?,
        histogram,
    })
}
