//! Essay records, trait scores, embedding bundles and dataset splits.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tgeb;

/// Number of analytic traits scored per essay.
pub const TRAIT_COUNT: usize = 6;

/// Lowest and highest rubric scores.
pub const MIN_SCORE: f64 = 1.0;
pub const MAX_SCORE: f64 = 5.0;
/// Rubric step between adjacent score levels.
pub const SCORE_STEP: f64 = 0.5;
/// Distinct score levels on the rubric scale (1.0, 1.5, ..., 5.0).
pub const SCORE_LEVELS: usize = 9;

/// File names used inside a dataset directory.
pub const ESSAYS_FILE: &str = "essays.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.tgeb";

/// The six analytic writing traits, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Trait {
    Cohesion,
    Syntax,
    Vocabulary,
    Phraseology,
    Grammar,
    Conventions,
}

impl Trait {
    pub const ALL: [Trait; TRAIT_COUNT] = [
        Trait::Cohesion,
        Trait::Syntax,
        Trait::Vocabulary,
        Trait::Phraseology,
        Trait::Grammar,
        Trait::Conventions,
    ];

    /// Lowercase key used in JSON, CSV headers and config files.
    pub fn key(self) -> &'static str {
        match self {
            Trait::Cohesion => "cohesion",
            Trait::Syntax => "syntax",
            Trait::Vocabulary => "vocabulary",
            Trait::Phraseology => "phraseology",
            Trait::Grammar => "grammar",
            Trait::Conventions => "conventions",
        }
    }

    /// Capitalized column title.
    pub fn title(self) -> &'static str {
        match self {
            Trait::Cohesion => "Cohesion",
            Trait::Syntax => "Syntax",
            Trait::Vocabulary => "Vocabulary",
            Trait::Phraseology => "Phraseology",
            Trait::Grammar => "Grammar",
            Trait::Conventions => "Conventions",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Scores for the six traits, indexed in [`Trait::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "TraitScoresRepr", into = "TraitScoresRepr")]
pub struct TraitScores(pub [f64; TRAIT_COUNT]);

impl TraitScores {
    pub fn get(&self, t: Trait) -> f64 {
        self.0[t.index()]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Gold-score check: every value on the rubric grid.
    pub fn check_gold(&self) -> std::result::Result<(), String> {
        for t in Trait::ALL {
            let v = self.get(t);
            if !(MIN_SCORE..=MAX_SCORE).contains(&v) {
                return Err(format!("{} score {v} outside [1.0, 5.0]", t.key()));
            }
            if ((v - MIN_SCORE) / SCORE_STEP).fract() != 0.0 {
                return Err(format!("{} score {v} is not a multiple of 0.5", t.key()));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraitScoresRepr {
    cohesion: f64,
    syntax: f64,
    vocabulary: f64,
    phraseology: f64,
    grammar: f64,
    conventions: f64,
}

impl From<TraitScoresRepr> for TraitScores {
    fn from(r: TraitScoresRepr) -> Self {
        TraitScores([
            r.cohesion,
            r.syntax,
            r.vocabulary,
            r.phraseology,
            r.grammar,
            r.conventions,
        ])
    }
}

impl From<TraitScores> for TraitScoresRepr {
    fn from(s: TraitScores) -> Self {
        let [cohesion, syntax, vocabulary, phraseology, grammar, conventions] = s.0;
        TraitScoresRepr {
            cohesion,
            syntax,
            vocabulary,
            phraseology,
            grammar,
            conventions,
        }
    }
}

/// Head index marking a sentence root in [`EssayRecord::deps`].
pub const ROOT_HEAD: i64 = -1;

/// One essay: words, sentence boundaries, dependency arcs and optional gold
/// scores. Dependency pairs are `(head, dependent)` with 0-based word indices
/// and [`ROOT_HEAD`] for sentence roots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssayRecord {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(rename = "sentences")]
    pub sentence_spans: Vec<(usize, usize)>,
    pub deps: Vec<(i64, i64)>,
    #[serde(rename = "scores", default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<TraitScores>,
}

/// Pre-computed embeddings for one essay: the pooled essay vector and one
/// row per word.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub essay_id: String,
    pub essay_vec: Vec<f64>,
    /// `n x d`, row `i` embeds word `i`.
    pub token_matrix: Tensor,
}

impl EmbeddingBundle {
    pub fn dim(&self) -> usize {
        self.essay_vec.len()
    }

    pub fn token_count(&self) -> usize {
        self.token_matrix.rows()
    }
}

/// A single consistency problem found by [`validate_record`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    IdMismatch { record: String, bundle: String },
    RowCount { rows: usize, tokens: usize },
    Dimension { essay_vec: usize, token_matrix: usize },
    NonFinite(&'static str),
    HeadOutOfRange(i64),
    DependentOutOfRange(i64),
    MalformedSpans(String),
    CrossSentenceArc { head: i64, dependent: i64 },
    DependentCount { token: usize, count: usize },
    GoldScore(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::IdMismatch { record, bundle } => {
                write!(f, "record id {record:?} paired with bundle id {bundle:?}")
            }
            Violation::RowCount { rows, tokens } => {
                write!(f, "row count {rows} ≠ token count {tokens}")
            }
            Violation::Dimension {
                essay_vec,
                token_matrix,
            } => write!(
                f,
                "essay vector length {essay_vec} ≠ token matrix width {token_matrix}"
            ),
            Violation::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Violation::HeadOutOfRange(h) => write!(f, "head index {h} out of range"),
            Violation::DependentOutOfRange(d) => write!(f, "dependent index {d} out of range"),
            Violation::MalformedSpans(msg) => write!(f, "malformed sentence spans: {msg}"),
            Violation::CrossSentenceArc { head, dependent } => {
                write!(f, "arc ({head}, {dependent}) crosses a sentence boundary")
            }
            Violation::DependentCount { token, count } => {
                write!(f, "token {token} is a dependent {count} times, expected once")
            }
            Violation::GoldScore(msg) => write!(f, "gold score: {msg}"),
        }
    }
}

/// Outcome of [`validate_record`]; an empty violation list means ok.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationResult {
    pub violations: Vec<Violation>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(ToString::to_string).collect()
    }
}

/// Checks a record against its embedding bundle. Problems are reported as
/// data; this never fails.
pub fn validate_record(record: &EssayRecord, bundle: &EmbeddingBundle) -> ValidationResult {
    let mut v = Vec::new();
    let n = record.tokens.len();

    if record.id != bundle.essay_id {
        v.push(Violation::IdMismatch {
            record: record.id.clone(),
            bundle: bundle.essay_id.clone(),
        });
    }
    if bundle.token_count() != n {
        v.push(Violation::RowCount {
            rows: bundle.token_count(),
            tokens: n,
        });
    }
    if bundle.token_matrix.cols() != bundle.dim() {
        v.push(Violation::Dimension {
            essay_vec: bundle.dim(),
            token_matrix: bundle.token_matrix.cols(),
        });
    }
    if !bundle.essay_vec.iter().all(|x| x.is_finite()) {
        v.push(Violation::NonFinite("essay vector"));
    }
    if !bundle.token_matrix.is_finite() {
        v.push(Violation::NonFinite("token matrix"));
    }

    // Sentence of each token, if spans are well formed.
    let sentence_of = match check_spans(&record.sentence_spans, n) {
        Ok(map) => Some(map),
        Err(msg) => {
            v.push(Violation::MalformedSpans(msg));
            None
        }
    };

    let mut dependent_count = vec![0usize; n];
    for &(head, dep) in &record.deps {
        let dep_ok = dep >= 0 && (dep as usize) < n;
        let head_ok = head == ROOT_HEAD || (head >= 0 && (head as usize) < n);
        if !head_ok {
            v.push(Violation::HeadOutOfRange(head));
        }
        if !dep_ok {
            v.push(Violation::DependentOutOfRange(dep));
            continue;
        }
        dependent_count[dep as usize] += 1;
        if let (true, Some(map)) = (head_ok && head != ROOT_HEAD, &sentence_of) {
            if map[head as usize] != map[dep as usize] {
                v.push(Violation::CrossSentenceArc {
                    head,
                    dependent: dep,
                });
            }
        }
    }
    for (token, &count) in dependent_count.iter().enumerate() {
        if count != 1 {
            v.push(Violation::DependentCount { token, count });
        }
    }

    if let Some(gold) = &record.gold {
        if let Err(msg) = gold.check_gold() {
            v.push(Violation::GoldScore(msg));
        }
    }

    ValidationResult { violations: v }
}

/// Maps each token to its sentence, or explains why the spans do not tile
/// `[0, n)`.
fn check_spans(spans: &[(usize, usize)], n: usize) -> std::result::Result<Vec<usize>, String> {
    let mut sentence_of = Vec::with_capacity(n);
    let mut cursor = 0;
    for (s, &(start, end)) in spans.iter().enumerate() {
        if start != cursor {
            return Err(format!("span {s} starts at {start}, expected {cursor}"));
        }
        if end <= start {
            return Err(format!("span {s} ({start}, {end}) is empty or reversed"));
        }
        if end > n {
            return Err(format!("span {s} ends at {end} beyond {n} tokens"));
        }
        sentence_of.extend(std::iter::repeat_n(s, end - start));
        cursor = end;
    }
    if cursor != n {
        return Err(format!("spans cover {cursor} of {n} tokens"));
    }
    Ok(sentence_of)
}

/// Rounds a continuous prediction onto the rubric grid: nearest multiple of
/// 0.5, midpoints upward, clamped to [1.0, 5.0].
pub fn discretize_score(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::arg(format!("cannot discretize non-finite score {x}")));
    }
    let steps = ((x - MIN_SCORE) / SCORE_STEP + 0.5).floor();
    Ok((MIN_SCORE + steps * SCORE_STEP).clamp(MIN_SCORE, MAX_SCORE))
}

/// Category index in `[0, 8]` of a discretized score.
pub fn score_to_category(x: f64) -> Result<usize> {
    if !(MIN_SCORE..=MAX_SCORE).contains(&x) {
        return Err(Error::arg(format!("score {x} is off the rubric scale")));
    }
    let steps = (x - MIN_SCORE) / SCORE_STEP;
    if steps.fract() != 0.0 {
        return Err(Error::arg(format!("score {x} is not a multiple of 0.5")));
    }
    Ok(steps as usize)
}

pub fn category_to_score(c: usize) -> f64 {
    MIN_SCORE + SCORE_STEP * c as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Validation,
    Test,
}

/// Records plus their embeddings, keyed by essay id.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub records: Vec<EssayRecord>,
    pub bundles: BTreeMap<String, EmbeddingBundle>,
    pub role: SplitRole,
}

impl DatasetSplit {
    /// Pairs records with bundles. Every record needs exactly one bundle and
    /// ids must be unique on both sides.
    pub fn new(
        records: Vec<EssayRecord>,
        bundles: Vec<EmbeddingBundle>,
        role: SplitRole,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::invalid(format!("duplicate essay id {:?}", r.id)));
            }
        }
        let mut map = BTreeMap::new();
        for b in bundles {
            if map.contains_key(&b.essay_id) {
                return Err(Error::invalid(format!(
                    "duplicate embedding id {:?}",
                    b.essay_id
                )));
            }
            map.insert(b.essay_id.clone(), b);
        }
        for r in &records {
            if !map.contains_key(&r.id) {
                return Err(Error::invalid(format!("no embeddings for essay {:?}", r.id)));
            }
        }
        Ok(DatasetSplit {
            records,
            bundles: map,
            role,
        })
    }

    /// Loads `essays.jsonl` and `embeddings.tgeb` from `dir`.
    pub fn load_dir(dir: &Path, role: SplitRole) -> Result<Self> {
        let records = read_jsonl(&dir.join(ESSAYS_FILE))?;
        let bundles = tgeb::read_file(&dir.join(EMBEDDINGS_FILE))?;
        DatasetSplit::new(records, bundles, role)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn bundle(&self, id: &str) -> &EmbeddingBundle {
        &self.bundles[id]
    }

    /// Embedding width shared by all bundles, if consistent.
    pub fn dim(&self) -> Result<usize> {
        let mut dims = self.bundles.values().map(EmbeddingBundle::dim);
        let d = dims
            .next()
            .ok_or_else(|| Error::invalid("split has no embeddings"))?;
        if dims.any(|x| x != d) {
            return Err(Error::invalid("embedding dimensions differ across essays"));
        }
        Ok(d)
    }

    /// Runs [`validate_record`] on every record, returning `(id, messages)`
    /// for the ones with violations.
    pub fn validate(&self) -> Vec<(String, Vec<String>)> {
        self.records
            .iter()
            .filter_map(|r| {
                let res = validate_record(r, self.bundle(&r.id));
                (!res.is_ok()).then(|| (r.id.clone(), res.messages()))
            })
            .collect()
    }

    /// Validation as a hard error, naming the first offending essay.
    pub fn ensure_valid(&self) -> Result<()> {
        match self.validate().into_iter().next() {
            None => Ok(()),
            Some((id, msgs)) => Err(Error::invalid(format!("essay {id:?}: {}", msgs.join("; ")))),
        }
    }
}

pub fn parse_jsonl(text: &str) -> Result<Vec<EssayRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: EssayRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<EssayRecord>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EssayRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(i + 1, format!("{}: {e}", path.display())))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[EssayRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
