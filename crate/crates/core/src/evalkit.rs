//! Recognition and description scoring: label extraction with error marking,
//! accuracy, Rouge-1/Rouge-L, BLEU-4 and a lexicon-driven METEOR.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconEntry {
    pub name: String,
    /// Adjective used in sentence templates.
    pub display: String,
    #[serde(default)]
    pub forms: Vec<String>,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LexiconFile {
    labels: Vec<LexiconEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MatchKind {
    Form,
    Synonym,
}

/// Canonical labels and the words that denote each of them.
#[derive(Clone, Debug)]
pub struct LabelLexicon {
    entries: Vec<LexiconEntry>,
    words: HashMap<String, (usize, MatchKind)>,
}

impl LabelLexicon {
    pub fn new(entries: Vec<LexiconEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::param("lexicon has no labels"));
        }
        let mut words: HashMap<String, (usize, MatchKind)> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            let own = std::iter::once(&e.name)
                .chain(std::iter::once(&e.display))
                .chain(&e.forms)
                .map(|w| (w, MatchKind::Form))
                .chain(e.synonyms.iter().map(|w| (w, MatchKind::Synonym)));
            for (w, kind) in own {
                let key = w.to_lowercase();
                if key.is_empty() || key.contains(char::is_whitespace) {
                    return Err(Error::param(format!(
                        "lexicon word {w:?} must be a single word"
                    )));
                }
                match words.get(&key) {
                    Some(&(j, _)) if j != i => {
                        return Err(Error::param(format!(
                            "lexicon word {key:?} belongs to both {} and {}",
                            entries[j].name, e.name
                        )))
                    }
                    Some(_) => {}
                    None => {
                        words.insert(key, (i, kind));
                    }
                }
            }
        }
        Ok(Self { entries, words })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: LexiconFile =
            toml::from_str(text).map_err(|e| Error::param(format!("lexicon: {e}")))?;
        Self::new(file.labels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::parse(&text).map_err(|e| Error::load(path, e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&LexiconFile {
            labels: self.entries.clone(),
        })
        .expect("lexicon serialises")
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn entry(&self, canonical: &str) -> Option<&LexiconEntry> {
        self.entries.iter().find(|e| e.name == canonical)
    }

    /// Canonical label a single word denotes, if any (case-insensitive).
    pub fn canonical(&self, word: &str) -> Option<&str> {
        self.words
            .get(&word.to_lowercase())
            .map(|&(i, _)| self.entries[i].name.as_str())
    }

    pub fn display(&self, canonical: &str) -> Option<&str> {
        self.entry(canonical).map(|e| e.display.as_str())
    }

    fn lookup(&self, word: &str) -> Option<(usize, MatchKind)> {
        self.words.get(word).copied()
    }
}

impl Default for LabelLexicon {
    fn default() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }
}

/// Lowercased words of `text`; punctuation separates words and is dropped.
/// Apostrophes and hyphens inside a word are kept.
pub fn metric_tokens(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let joiner = (c == '\'' || c == '-')
            && !cur.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
        if c.is_alphanumeric() || joiner {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Result of label extraction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "status", content = "label")]
pub enum Extracted {
    Label(String),
    Error,
}

impl Extracted {
    pub fn label(&self) -> Option<&str> {
        match self {
            Extracted::Label(l) => Some(l),
            Extracted::Error => None,
        }
    }
}

impl std::fmt::Display for Extracted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Extracted::Label(l) => f.write_str(l),
            Extracted::Error => f.write_str("Error"),
        }
    }
}

/// The single canonical label mentioned in `text`, or `Error` when none or
/// several distinct labels are mentioned.
pub fn extract_label(text: &str, lexicon: &LabelLexicon) -> Extracted {
    let mut found: Option<usize> = None;
    for w in metric_tokens(text) {
        if let Some((i, _)) = lexicon.lookup(&w) {
            match found {
                Some(j) if j != i => return Extracted::Error,
                _ => found = Some(i),
            }
        }
    }
    match found {
        Some(i) => Extracted::Label(lexicon.entries[i].name.clone()),
        None => Extracted::Error,
    }
}

/// Sentence templates for recognition answers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputFormat {
    /// The bare label.
    A,
    /// "This is a/an [Label] person."
    #[default]
    B,
    /// "This is a 3D skeleton sequence of a person. From their movements, it can be observed that their emotion is [Label]."
    C,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(OutputFormat::A),
            "B" | "b" => Ok(OutputFormat::B),
            "C" | "c" => Ok(OutputFormat::C),
            other => Err(Error::param(format!(
                "unknown output format {other:?} (expected A, B or C)"
            ))),
        }
    }
}

fn article(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Renders `label` into a recognition template verbatim.
pub fn render_output_format(format: OutputFormat, label: &str) -> String {
    match format {
        OutputFormat::A => label.to_string(),
        OutputFormat::B => format!("This is {} {label} person.", article(label)),
        OutputFormat::C => format!(
            "This is a 3D skeleton sequence of a person. From their movements, it can be observed that their emotion is {label}."
        ),
    }
}

/// The supervision sentence for a canonical label: the label itself for A,
/// its adjective for B and its lowercase name for C.
pub fn answer_for(format: OutputFormat, canonical: &str, lexicon: &LabelLexicon) -> Result<String> {
    let entry = lexicon
        .entry(canonical)
        .ok_or_else(|| Error::param(format!("{canonical:?} is not a canonical label")))?;
    Ok(match format {
        OutputFormat::A => render_output_format(format, &entry.name),
        OutputFormat::B => render_output_format(format, &entry.display),
        OutputFormat::C => render_output_format(format, &entry.name.to_lowercase()),
    })
}

/// Fraction of records whose extracted label equals the reference; errors count as wrong.
pub fn accuracy(pairs: &[(Extracted, String)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::param("accuracy of an empty record set"));
    }
    let correct = pairs
        .iter()
        .filter(|(e, r)| e.label() == Some(r.as_str()))
        .count();
    Ok(correct as f64 / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1_f: f64,
    pub rouge_l_f: f64,
}

fn f1(overlap: f64, cand: usize, reference: usize) -> f64 {
    if overlap == 0.0 {
        return 0.0;
    }
    let p = overlap / cand as f64;
    let r = overlap / reference as f64;
    2.0 * p * r / (p + r)
}

fn counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

fn clipped_matches(cand: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let c = counts(cand, n);
    let r = counts(reference, n);
    let matched = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, cand.len().saturating_sub(n - 1))
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Rouge-1 and Rouge-L F1 over lowercased words.
pub fn rouge(candidate: &str, reference: &str) -> Result<RougeScores> {
    let r = metric_tokens(reference);
    if r.is_empty() {
        return Err(Error::MetricUndefined(
            "Rouge with an empty reference".into(),
        ));
    }
    let c = metric_tokens(candidate);
    if c.is_empty() {
        return Ok(RougeScores {
            rouge1_f: 0.0,
            rouge_l_f: 0.0,
        });
    }
    let (m1, _) = clipped_matches(&c, &r, 1);
    Ok(RougeScores {
        rouge1_f: f1(m1 as f64, c.len(), r.len()),
        rouge_l_f: f1(lcs(&c, &r) as f64, c.len(), r.len()),
    })
}

/// Sentence BLEU up to `max_n`-grams. A precision with no matches is
/// smoothed to `(m + 1) / (t + 1)`; shorter candidates pay `exp(1 − r/c)`.
pub fn bleu(candidate: &str, reference: &str, max_n: usize) -> f64 {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    if c.is_empty() || r.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (m, t) = clipped_matches(&c, &r, n);
        let p = if m == 0 {
            1.0 / (t as f64 + 1.0)
        } else {
            m as f64 / t as f64
        };
        log_sum += p.ln();
    }
    let bp = if c.len() < r.len() {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    } else {
        1.0
    };
    bp * (log_sum / max_n as f64).exp()
}

/// METEOR with exact, grammatical-form and synonym matching stages.
/// `F = 10PR / (R + 9P)`, penalty `0.5 · (chunks / matches)³`.
pub fn meteor_simplified(candidate: &str, reference: &str, lexicon: &LabelLexicon) -> f64 {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut align: Vec<Option<usize>> = vec![None; c.len()];
    let mut used = vec![false; r.len()];
    let stages: [&dyn Fn(&str, &str) -> bool; 3] = [
        &|a, b| a == b,
        &|a, b| match (lexicon.lookup(a), lexicon.lookup(b)) {
            (Some((i, MatchKind::Form)), Some((j, MatchKind::Form))) => i == j,
            _ => false,
        },
        &|a, b| match (lexicon.lookup(a), lexicon.lookup(b)) {
            (Some((i, _)), Some((j, _))) => i == j,
            _ => false,
        },
    ];
    for stage in stages {
        for (ci, word) in c.iter().enumerate() {
            if align[ci].is_some() {
                continue;
            }
            if let Some(ri) = (0..r.len()).find(|&ri| !used[ri] && stage(word, &r[ri])) {
                align[ci] = Some(ri);
                used[ri] = true;
            }
        }
    }
    let m = align.iter().flatten().count();
    if m == 0 {
        return 0.0;
    }
    let chunks = count_chunks(&align);
    let p = m as f64 / c.len() as f64;
    let rr = m as f64 / r.len() as f64;
    let f_mean = 10.0 * p * rr / (rr + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

/// Maximal runs of candidate positions that are adjacent on both sides.
fn count_chunks(align: &[Option<usize>]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for a in align {
        match (*a, prev) {
            (Some(ri), Some(p)) if ri == p + 1 => {}
            (Some(_), _) => chunks += 1,
            (None, _) => {}
        }
        prev = *a;
    }
    chunks
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub rouge1_f: f64,
    pub rouge_l_f: f64,
    pub bleu: f64,
    pub meteor: f64,
}

pub fn score_text(candidate: &str, reference: &str, lexicon: &LabelLexicon) -> Result<TextScores> {
    let r = rouge(candidate, reference)?;
    Ok(TextScores {
        rouge1_f: r.rouge1_f,
        rouge_l_f: r.rouge_l_f,
        bleu: bleu(candidate, reference, 4),
        meteor: meteor_simplified(candidate, reference, lexicon),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Recognition,
    Description,
}

/// Outcome of one evaluation item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub sample_id: String,
    pub kind: PromptKind,
    pub prompt: String,
    pub generated: String,
    pub extracted: Extracted,
    /// Canonical reference label.
    pub reference_label: String,
    /// Supervision target of a recognition prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_completion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<TextScores>,
    /// Generation failure (for example a transport error) for this record only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub records: usize,
    pub recognition_records: usize,
    pub accuracy: Option<f64>,
    /// Share of recognition records whose generation equals the expected completion.
    pub exact_match: Option<f64>,
    pub description_records: usize,
    pub rouge1_f: Option<f64>,
    pub rouge_l_f: Option<f64>,
    pub bleu: Option<f64>,
    pub meteor: Option<f64>,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub records: Vec<GenerationRecord>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    pub fn new(records: Vec<GenerationRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::param("evaluation produced no records"));
        }
        let recognition: Vec<(Extracted, String)> = records
            .iter()
            .filter(|r| r.kind == PromptKind::Recognition)
            .map(|r| (r.extracted.clone(), r.reference_label.clone()))
            .collect();
        let scored: Vec<&TextScores> = records.iter().filter_map(|r| r.scores.as_ref()).collect();
        let summary = EvalSummary {
            records: records.len(),
            recognition_records: recognition.len(),
            accuracy: if recognition.is_empty() {
                None
            } else {
                Some(accuracy(&recognition)?)
            },
            exact_match: mean(records.iter().filter_map(|r| {
                r.expected_completion
                    .as_ref()
                    .map(|e| f64::from(u8::from(r.generated.trim() == e)))
            })),
            description_records: scored.len(),
            rouge1_f: mean(scored.iter().map(|s| s.rouge1_f)),
            rouge_l_f: mean(scored.iter().map(|s| s.rouge_l_f)),
            bleu: mean(scored.iter().map(|s| s.bleu)),
            meteor: mean(scored.iter().map(|s| s.meteor)),
            failures: records.iter().filter(|r| r.failure.is_some()).count(),
        };
        Ok(Self { summary, records })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// One line per aggregate, for consoles.
    pub fn summary_lines(&self) -> Vec<String> {
        let s = &self.summary;
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        let mut lines = vec![format!("records: {} ({} failed)", s.records, s.failures)];
        lines.push(format!(
            "accuracy: {}  exact: {} over {} recognition records",
            fmt(s.accuracy),
            fmt(s.exact_match),
            s.recognition_records
        ));
        lines.push(format!(
            "rouge-1: {}  rouge-l: {}  bleu: {}  meteor: {} over {} description records",
            fmt(s.rouge1_f),
            fmt(s.rouge_l_f),
            fmt(s.bleu),
            fmt(s.meteor),
            s.description_records
        ));
        lines
    }
}

/// Maps every dataset label to its canonical lexicon label.
pub fn canonical_map(
    dataset_labels: &[String],
    lexicon: &LabelLexicon,
) -> Result<BTreeMap<String, String>> {
    dataset_labels
        .iter()
        .map(|l| {
            lexicon
                .canonical(l)
                .map(|c| (l.clone(), c.to_string()))
                .ok_or_else(|| Error::param(format!("label {l:?} is not in the lexicon")))
        })
        .collect()
}
