//! Text normalization, word error rate and pooled per-subset reports.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::decoding::{Condition, TranscriptRecord};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("unknown condition {0:?}; expected mix or voc")]
    UnknownCondition(String),
    #[error("sample {0:?} has no subset tag")]
    MissingSubset(String),
    #[error("no reference text for sample {0:?}")]
    MissingReference(String),
    #[error("duplicate transcript for sample {0:?} condition {1}")]
    Duplicate(String, &'static str),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Subset name covering every sample.
pub const OVERALL: &str = "overall";

/// Lowercases, deletes unicode punctuation (apostrophes included) and
/// collapses whitespace.
pub fn normalize_text(s: &str) -> String {
    static PUNCT: OnceLock<Regex> = OnceLock::new();
    let punct = PUNCT.get_or_init(|| Regex::new(r"\p{P}").expect("static pattern"));
    let lower = s.to_lowercase();
    punct
        .replace_all(&lower, "")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WerDetail {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    /// Errors over reference words; with an empty reference, the raw error
    /// count.
    pub wer: f64,
    pub empty_reference: bool,
}

impl WerDetail {
    pub fn from_counts(substitutions: usize, deletions: usize, insertions: usize, ref_words: usize) -> Self {
        let errors = (substitutions + deletions + insertions) as f64;
        Self {
            substitutions,
            deletions,
            insertions,
            ref_words,
            wer: if ref_words == 0 { errors } else { errors / ref_words as f64 },
            empty_reference: ref_words == 0,
        }
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Word-level Levenshtein distance with unit costs. Among minimal
/// alignments the one with the most substitutions is reported.
pub fn wer(reference: &str, hypothesis: &str) -> WerDetail {
    let r = normalize_text(reference);
    let h = normalize_text(hypothesis);
    let r: Vec<&str> = r.split_whitespace().collect();
    let h: Vec<&str> = h.split_whitespace().collect();
    let (s, d, i) = align(&r, &h);
    WerDetail::from_counts(s, d, i, r.len())
}

#[derive(Clone, Copy)]
struct Cell {
    cost: usize,
    subs: usize,
    dels: usize,
    ins: usize,
}

impl Cell {
    fn better(self, other: Cell) -> bool {
        (self.cost, std::cmp::Reverse(self.subs)) < (other.cost, std::cmp::Reverse(other.subs))
    }
}

fn align(r: &[&str], h: &[&str]) -> (usize, usize, usize) {
    let w = h.len() + 1;
    let mut dp = vec![Cell { cost: 0, subs: 0, dels: 0, ins: 0 }; (r.len() + 1) * w];
    for j in 1..=h.len() {
        dp[j] = Cell { cost: j, subs: 0, dels: 0, ins: j };
    }
    for i in 1..=r.len() {
        dp[i * w] = Cell { cost: i, subs: 0, dels: i, ins: 0 };
        for j in 1..=h.len() {
            let diag = dp[(i - 1) * w + j - 1];
            let mut best = if r[i - 1] == h[j - 1] {
                diag
            } else {
                Cell { cost: diag.cost + 1, subs: diag.subs + 1, ..diag }
            };
            let up = dp[(i - 1) * w + j];
            let del = Cell { cost: up.cost + 1, dels: up.dels + 1, ..up };
            if del.better(best) {
                best = del;
            }
            let left = dp[i * w + j - 1];
            let ins = Cell { cost: left.cost + 1, ins: left.ins + 1, ..left };
            if ins.better(best) {
                best = ins;
            }
            dp[i * w + j] = best;
        }
    }
    let c = dp[r.len() * w + h.len()];
    (c.subs, c.dels, c.ins)
}

/// Summed error counts over a set of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledRow {
    pub subset: String,
    pub condition: Condition,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WerReport {
    pub per_sample: BTreeMap<(String, Condition), WerDetail>,
    /// Sorted by subset (language tags, then `overall`) and condition.
    pub pooled: Vec<PooledRow>,
}

impl WerReport {
    pub fn row(&self, subset: &str, condition: Condition) -> Option<&PooledRow> {
        self.pooled
            .iter()
            .find(|r| r.subset == subset && r.condition == condition)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["subset", "condition", "S", "D", "I", "ref_words", "wer"])?;
        for r in &self.pooled {
            w.write_record([
                r.subset.clone(),
                r.condition.name().to_string(),
                r.substitutions.to_string(),
                r.deletions.to_string(),
                r.insertions.to_string(),
                r.ref_words.to_string(),
                format!("{:.6}", r.wer),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pools per-sample details by subset tag and condition, plus an
/// `overall` subset holding every sample.
pub fn aggregate(
    details: &BTreeMap<(String, Condition), WerDetail>,
    subsets: &HashMap<String, String>,
) -> Result<WerReport, EvalError> {
    let mut sums: BTreeMap<(bool, String, Condition), [usize; 4]> = BTreeMap::new();
    for ((id, cond), d) in details {
        let tag = subsets.get(id).ok_or_else(|| EvalError::MissingSubset(id.clone()))?;
        for key in [(false, tag.clone(), *cond), (true, OVERALL.to_string(), *cond)] {
            let s = sums.entry(key).or_default();
            s[0] += d.substitutions;
            s[1] += d.deletions;
            s[2] += d.insertions;
            s[3] += d.ref_words;
        }
    }
    let pooled = sums
        .into_iter()
        .map(|((_, subset, condition), [s, d, i, n])| PooledRow {
            subset,
            condition,
            substitutions: s,
            deletions: d,
            insertions: i,
            ref_words: n,
            wer: WerDetail::from_counts(s, d, i, n).wer,
        })
        .collect();
    Ok(WerReport {
        per_sample: details.clone(),
        pooled,
    })
}

/// Scores transcripts against reference texts; the subset of a sample is
/// its language tag.
pub fn evaluate(
    transcripts: &[TranscriptRecord],
    references: &HashMap<String, (String, String)>,
) -> Result<WerReport, EvalError> {
    let mut details = BTreeMap::new();
    let mut subsets = HashMap::new();
    for t in transcripts {
        let (text, tag) = references
            .get(&t.id)
            .ok_or_else(|| EvalError::MissingReference(t.id.clone()))?;
        if details
            .insert((t.id.clone(), t.condition), wer(text, &t.hypothesis))
            .is_some()
        {
            return Err(EvalError::Duplicate(t.id.clone(), t.condition.name()));
        }
        subsets.insert(t.id.clone(), tag.clone());
    }
    aggregate(&details, &subsets)
}

pub fn parse_condition(s: &str) -> Result<Condition, EvalError> {
    Condition::parse(s).ok_or_else(|| EvalError::UnknownCondition(s.to_string()))
}

/// Markdown table with one row per label and a `Mix`/`Voc` column pair per
/// subset.
pub fn markdown_table(rows: &[(String, BTreeMap<(String, Condition), f64>)]) -> String {
    let mut subsets: Vec<String> = rows
        .iter()
        .flat_map(|(_, cells)| cells.keys().map(|(s, _)| s.clone()))
        .filter(|s| s != OVERALL)
        .collect();
    subsets.sort();
    subsets.dedup();
    subsets.push(OVERALL.to_string());
    let mut out = String::from("| model |");
    let mut rule = String::from("|---|");
    for s in &subsets {
        for c in Condition::ALL {
            let cond = if c == Condition::Mix { "Mix" } else { "Voc" };
            let name = if s == OVERALL { "Overall".to_string() } else { s.to_uppercase() };
            out.push_str(&format!(" {name} {cond} |"));
            rule.push_str("---:|");
        }
    }
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    for (label, cells) in rows {
        out.push_str(&format!("| {label} |"));
        for s in &subsets {
            for c in Condition::ALL {
                match cells.get(&(s.clone(), c)) {
                    Some(v) => out.push_str(&format!(" {:.2} |", 100.0 * v)),
                    None => out.push_str(" - |"),
                }
            }
        }
        out.push('\n');
    }
    out
}
