//! Multiple-choice questions with aggregated student response rates.
//!
//! Input is either JSON lines (one [`Question`] object per line, same field
//! names) or CSV with the columns
//! `id,stem,choice_a,choice_b,choice_c,correct_index,qtype,rate_a,rate_b,rate_c,examinee_count`.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::largest_remainder;

/// Mean examinee count used when a question does not carry its own.
pub const DEFAULT_EXAMINEE_COUNT: u32 = 268;

/// Tolerance on `sum(student_rates) == 1`.
pub const RATE_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("question `{id}`: {reason}")]
    Invalid { id: String, reason: String },
    #[error("dataset contains no questions")]
    Empty,
    #[error("duplicate question id `{0}`")]
    DuplicateId(String),
    #[error("question `{0}` has no student rates")]
    MissingRates(String),
    #[error("invalid type mix: {0}")]
    InvalidMix(String),
    #[error("unknown dataset format `{0}` (expected jsonl or csv)")]
    UnknownFormat(String),
}

/// Question formulation. The numeric values are the on-disk encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum QuestionType {
    FillGap = 1,
    FillTwoGaps = 2,
    WhQuestion = 3,
    SentenceCompletion = 4,
}

impl QuestionType {
    pub const ALL: [QuestionType; 4] = [
        QuestionType::FillGap,
        QuestionType::FillTwoGaps,
        QuestionType::WhQuestion,
        QuestionType::SentenceCompletion,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn label(self) -> &'static str {
        match self {
            QuestionType::FillGap => "Fill the gap",
            QuestionType::FillTwoGaps => "Fill two gaps",
            QuestionType::WhQuestion => "Wh-question",
            QuestionType::SentenceCompletion => "Sentence completion",
        }
    }
}

impl TryFrom<u8> for QuestionType {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(QuestionType::FillGap),
            2 => Ok(QuestionType::FillTwoGaps),
            3 => Ok(QuestionType::WhQuestion),
            4 => Ok(QuestionType::SentenceCompletion),
            other => Err(format!("question type must be 1-4, got {other}")),
        }
    }
}

impl From<QuestionType> for u8 {
    fn from(t: QuestionType) -> u8 {
        t.code()
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

/// One validated three-choice question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawQuestion")]
pub struct Question {
    pub id: String,
    pub stem: String,
    pub choices: [String; 3],
    pub correct_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qtype: Option<QuestionType>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub student_rates: Option<[f64; 3]>,
    pub examinee_count: u32,
}

/// Unvalidated wire form; arities are checked when converting to [`Question`].
#[derive(Debug, Clone, Deserialize)]
pub struct RawQuestion {
    pub id: String,
    pub stem: String,
    pub choices: Vec<String>,
    pub correct_index: i64,
    #[serde(default)]
    pub qtype: Option<QuestionType>,
    #[serde(default)]
    pub student_rates: Option<Vec<f64>>,
    #[serde(default)]
    pub examinee_count: Option<i64>,
}

impl TryFrom<RawQuestion> for Question {
    type Error = DatasetError;

    fn try_from(raw: RawQuestion) -> Result<Self, Self::Error> {
        let invalid = |reason: String| DatasetError::Invalid {
            id: raw.id.clone(),
            reason,
        };
        let choices: [String; 3] =
            raw.choices.clone().try_into().map_err(|v: Vec<String>| {
                invalid(format!("expected 3 choices, found {}", v.len()))
            })?;
        if !(0..3).contains(&raw.correct_index) {
            return Err(invalid(format!(
                "correct_index {} does not address one of the 3 choices",
                raw.correct_index
            )));
        }
        let student_rates = match &raw.student_rates {
            None => None,
            Some(r) => Some(
                <[f64; 3]>::try_from(r.as_slice())
                    .map_err(|_| invalid(format!("expected 3 student rates, found {}", r.len())))?,
            ),
        };
        let examinee_count = match raw.examinee_count {
            None => DEFAULT_EXAMINEE_COUNT,
            Some(n) if n >= 1 && n <= u32::MAX as i64 => n as u32,
            Some(n) => return Err(invalid(format!("examinee_count must be positive, got {n}"))),
        };
        let q = Question {
            id: raw.id,
            stem: raw.stem,
            choices,
            correct_index: raw.correct_index as usize,
            qtype: raw.qtype,
            student_rates,
            examinee_count,
        };
        q.validate()?;
        Ok(q)
    }
}

impl Question {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let invalid = |reason: String| DatasetError::Invalid {
            id: self.id.clone(),
            reason,
        };
        if self.id.is_empty() {
            return Err(invalid("empty id".into()));
        }
        if self.stem.trim().is_empty() {
            return Err(invalid("empty stem".into()));
        }
        for (i, c) in self.choices.iter().enumerate() {
            if c.trim().is_empty() {
                return Err(invalid(format!("choice {i} is empty")));
            }
        }
        for i in 0..3 {
            for j in i + 1..3 {
                if self.choices[i] == self.choices[j] {
                    return Err(invalid(format!("choices {i} and {j} are identical")));
                }
            }
        }
        if self.correct_index > 2 {
            return Err(invalid(format!(
                "correct_index {} does not address one of the 3 choices",
                self.correct_index
            )));
        }
        if self.examinee_count == 0 {
            return Err(invalid("examinee_count must be positive".into()));
        }
        if let Some(rates) = &self.student_rates {
            if let Some(r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
                return Err(invalid(format!("student rate {r} outside [0, 1]")));
            }
            let sum: f64 = rates.iter().sum();
            if (sum - 1.0).abs() > RATE_SUM_TOLERANCE {
                let shown = (sum * 1e6).round() / 1e6;
                return Err(invalid(format!("rates sum {shown} ≠ 1")));
            }
        }
        Ok(())
    }

    /// Declared type, or the classifier's guess when the input had none.
    pub fn effective_type(&self) -> QuestionType {
        self.qtype
            .unwrap_or_else(|| classify_question_type(&self.stem).qtype)
    }

    pub fn rates(&self) -> Result<[f64; 3], DatasetError> {
        self.student_rates
            .ok_or_else(|| DatasetError::MissingRates(self.id.clone()))
    }

    pub fn has_zero_rate(&self) -> bool {
        self.student_rates
            .map(|r| r.contains(&0.0))
            .unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub source: String,
    pub created: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub metadata: DatasetMetadata,
    pub questions: Vec<Question>,
}

impl Dataset {
    pub fn new(metadata: DatasetMetadata, questions: Vec<Question>) -> Result<Self, DatasetError> {
        if questions.is_empty() {
            return Err(DatasetError::Empty);
        }
        let mut seen = HashSet::new();
        for q in &questions {
            if !seen.insert(q.id.as_str()) {
                return Err(DatasetError::DuplicateId(q.id.clone()));
            }
        }
        Ok(Dataset {
            metadata,
            questions,
        })
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Jsonl,
    Csv,
}

impl DatasetFormat {
    /// `.csv` → Csv, anything else → Jsonl.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DatasetFormat::Csv,
            _ => DatasetFormat::Jsonl,
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(DatasetFormat::Jsonl),
            "csv" => Ok(DatasetFormat::Csv),
            other => Err(DatasetError::UnknownFormat(other.to_string())),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let questions = match format {
        DatasetFormat::Jsonl => read_jsonl(BufReader::new(file), path)?,
        DatasetFormat::Csv => read_csv(file)?,
    };
    let source = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(
        DatasetMetadata {
            source,
            created: None,
        },
        questions,
    )
}

fn read_jsonl(reader: impl BufRead, path: &Path) -> Result<Vec<Question>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawQuestion = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: i as u64 + 1,
            message: e.to_string(),
        })?;
        out.push(Question::try_from(raw)?);
    }
    Ok(out)
}

const CSV_HEADER: [&str; 11] = [
    "id",
    "stem",
    "choice_a",
    "choice_b",
    "choice_c",
    "correct_index",
    "qtype",
    "rate_a",
    "rate_b",
    "rate_c",
    "examinee_count",
];

fn read_csv(reader: impl std::io::Read) -> Result<Vec<Question>, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DatasetError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let choice_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.trim().starts_with("choice_"))
        .map(|(i, _)| i)
        .collect();
    let rate_cols = [column("rate_a"), column("rate_b"), column("rate_c")];
    for required in ["id", "stem", "correct_index"] {
        if column(required).is_none() {
            return Err(DatasetError::Parse {
                line: 1,
                message: format!("missing column `{required}`"),
            });
        }
    }

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| DatasetError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |message: String| DatasetError::Parse { line, message };
        let field = |name: &str| {
            column(name)
                .and_then(|i| record.get(i))
                .unwrap_or("")
                .trim()
        };

        let choices: Vec<String> = choice_cols
            .iter()
            .filter_map(|&i| record.get(i))
            .filter(|s| !s.trim().is_empty())
            .map(str::to_string)
            .collect();
        let correct_index = field("correct_index")
            .parse::<i64>()
            .map_err(|e| parse_err(format!("correct_index: {e}")))?;
        let qtype = match field("qtype") {
            "" => None,
            s => Some(
                s.parse::<u8>()
                    .map_err(|e| parse_err(format!("qtype: {e}")))
                    .and_then(|v| QuestionType::try_from(v).map_err(parse_err))?,
            ),
        };
        let rate_text: Vec<&str> = rate_cols
            .iter()
            .map(|c| c.and_then(|i| record.get(i)).unwrap_or("").trim())
            .collect();
        let student_rates = if rate_text.iter().all(|s| s.is_empty()) {
            None
        } else {
            let mut rates = Vec::with_capacity(3);
            for s in &rate_text {
                rates.push(
                    s.parse::<f64>()
                        .map_err(|e| parse_err(format!("rate `{s}`: {e}")))?,
                );
            }
            Some(rates)
        };
        let examinee_count = match field("examinee_count") {
            "" => None,
            s => Some(
                s.parse::<i64>()
                    .map_err(|e| parse_err(format!("examinee_count: {e}")))?,
            ),
        };
        out.push(Question::try_from(RawQuestion {
            id: field("id").to_string(),
            stem: field("stem").to_string(),
            choices,
            correct_index,
            qtype,
            student_rates,
            examinee_count,
        })?);
    }
    Ok(out)
}

pub fn write_dataset(ds: &Dataset, path: &Path, format: DatasetFormat) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    match format {
        DatasetFormat::Jsonl => {
            for q in &ds.questions {
                let line = serde_json::to_string(q).expect("question serializes");
                writeln!(w, "{line}").map_err(io_err(path))?;
            }
        }
        DatasetFormat::Csv => {
            let mut cw = csv::Writer::from_writer(&mut w);
            let csv_err = |e: csv::Error| DatasetError::Io {
                path: path.to_path_buf(),
                source: e.into(),
            };
            cw.write_record(CSV_HEADER).map_err(csv_err)?;
            for q in &ds.questions {
                let rate = |i: usize| {
                    q.student_rates
                        .map(|r| r[i].to_string())
                        .unwrap_or_default()
                };
                cw.write_record([
                    q.id.clone(),
                    q.stem.clone(),
                    q.choices[0].clone(),
                    q.choices[1].clone(),
                    q.choices[2].clone(),
                    q.correct_index.to_string(),
                    q.qtype.map(|t| t.to_string()).unwrap_or_default(),
                    rate(0),
                    rate(1),
                    rate(2),
                    q.examinee_count.to_string(),
                ])
                .map_err(csv_err)?;
            }
            cw.flush().map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// Classifier output; `low_confidence` is set when no rule matched and the
/// fallback type was used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TypeGuess {
    pub qtype: QuestionType,
    pub low_confidence: bool,
}

fn gap_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\.{3,}|…|_{3,}").expect("valid regex"))
}

/// Rule-based question type from the stem alone. Rules, first match wins:
///
/// 1. two or more gap markers (`...`, `…`, `___`) → fill two gaps
/// 2. one gap marker that is not at the end → fill the gap
/// 3. stem ends with a gap marker → sentence completion
/// 4. stem ends with `?` → wh-question
/// 5. otherwise sentence completion, flagged low-confidence
pub fn classify_question_type(stem: &str) -> TypeGuess {
    let text = stem.trim_end();
    let markers: Vec<_> = gap_marker().find_iter(text).collect();
    let sure = |qtype| TypeGuess {
        qtype,
        low_confidence: false,
    };
    match markers.as_slice() {
        [_, _, ..] => sure(QuestionType::FillTwoGaps),
        [m] if m.end() == text.len() => sure(QuestionType::SentenceCompletion),
        [_] => sure(QuestionType::FillGap),
        [] if text.ends_with('?') => sure(QuestionType::WhQuestion),
        [] => TypeGuess {
            qtype: QuestionType::SentenceCompletion,
            low_confidence: true,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceRole {
    CorrectAnswer,
    Distractor1,
    Distractor2,
}

impl ChoiceRole {
    pub const ALL: [ChoiceRole; 3] = [
        ChoiceRole::CorrectAnswer,
        ChoiceRole::Distractor1,
        ChoiceRole::Distractor2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ChoiceRole::CorrectAnswer => "correct_answer",
            ChoiceRole::Distractor1 => "distractor_1",
            ChoiceRole::Distractor2 => "distractor_2",
        }
    }
}

/// Role of each original choice index within one question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ChoiceRoles {
    pub by_choice: [ChoiceRole; 3],
}

impl ChoiceRoles {
    pub fn role_of(&self, choice: usize) -> ChoiceRole {
        self.by_choice[choice]
    }

    pub fn choice_for(&self, role: ChoiceRole) -> usize {
        self.by_choice
            .iter()
            .position(|&r| r == role)
            .expect("roles are a bijection")
    }
}

/// Correct answer keeps its role; the two distractors are ranked by student
/// selection rate, higher first, ties going to the lower choice index.
pub fn assign_choice_roles(q: &Question) -> Result<ChoiceRoles, DatasetError> {
    let rates = q.rates()?;
    let mut distractors: Vec<usize> = (0..3).filter(|&i| i != q.correct_index).collect();
    distractors.sort_by(|&a, &b| rates[b].total_cmp(&rates[a]).then(a.cmp(&b)));
    let mut by_choice = [ChoiceRole::CorrectAnswer; 3];
    by_choice[distractors[0]] = ChoiceRole::Distractor1;
    by_choice[distractors[1]] = ChoiceRole::Distractor2;
    Ok(ChoiceRoles { by_choice })
}

/// Dirichlet concentration for (correct, distractor 1, distractor 2). The means
/// are 0.703 / 0.209 / 0.088.
const SYNTH_ALPHA: [f64; 3] = [7.03, 2.09, 0.88];

/// Deterministic synthetic dataset with the requested question-type mix.
///
/// Student rates come from per-question examinee counts split by a Dirichlet
/// draw, so every rate is a whole number of students over `examinee_count`
/// and no choice is left at zero.
pub fn synthesize_dataset(
    n: usize,
    type_mix: [f64; 4],
    seed: u64,
) -> Result<Dataset, DatasetError> {
    if n == 0 {
        return Err(DatasetError::InvalidMix("n must be at least 1".into()));
    }
    if type_mix
        .iter()
        .any(|&m| !(0.0..=1.0).contains(&m) || m.is_nan())
    {
        return Err(DatasetError::InvalidMix(format!(
            "fractions must lie in [0, 1], got {type_mix:?}"
        )));
    }
    let mix_sum: f64 = type_mix.iter().sum();
    if (mix_sum - 1.0).abs() > RATE_SUM_TOLERANCE {
        return Err(DatasetError::InvalidMix(format!(
            "fractions sum to {mix_sum}, expected 1"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = largest_remainder(&type_mix, n as u64);
    let mut types: Vec<QuestionType> = QuestionType::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(&t, &c)| std::iter::repeat_n(t, c as usize))
        .collect();
    types.shuffle(&mut rng);

    let gammas: Vec<Gamma<f64>> = SYNTH_ALPHA
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape"))
        .collect();
    let examinees = Normal::new(DEFAULT_EXAMINEE_COUNT as f64, 185.0).expect("valid normal");
    let width = n.to_string().len().max(4);

    let questions = types
        .into_iter()
        .enumerate()
        .map(|(i, qtype)| {
            let correct_index = rng.random_range(0..3usize);
            let mut others: Vec<usize> = (0..3).filter(|&c| c != correct_index).collect();
            if rng.random_bool(0.5) {
                others.swap(0, 1);
            }
            let slots = [correct_index, others[0], others[1]];
            let mut weights = [0.0; 3];
            for (g, &slot) in gammas.iter().zip(&slots) {
                weights[slot] = g.sample(&mut rng).max(f64::MIN_POSITIVE);
            }
            let examinee_count = examinees.sample(&mut rng).round().clamp(40.0, 1200.0) as u32;
            let spread = largest_remainder(&weights, examinee_count as u64 - 3);
            let student_rates =
                std::array::from_fn(|c| (spread[c] + 1) as f64 / examinee_count as f64);
            let topic = i % 17;
            Question {
                id: format!("syn-{:0width$}", i + 1),
                stem: synthetic_stem(qtype, i + 1, topic),
                choices: std::array::from_fn(|c| {
                    format!(
                        "option {} for item {}",
                        ["alpha", "beta", "gamma"][c],
                        i + 1
                    )
                }),
                correct_index,
                qtype: Some(qtype),
                student_rates: Some(student_rates),
                examinee_count,
            }
        })
        .collect();

    Dataset::new(
        DatasetMetadata {
            source: format!("synthetic(n={n}, seed={seed})"),
            created: None,
        },
        questions,
    )
}

fn synthetic_stem(qtype: QuestionType, item: usize, topic: usize) -> String {
    match qtype {
        QuestionType::FillGap => {
            format!("In item {item}, the ... principle accounts for effect {topic} in the brain.")
        }
        QuestionType::FillTwoGaps => format!("Concept {topic} is to ... as item {item} is to ..."),
        QuestionType::WhQuestion => {
            format!("Which statement about mechanism {topic} in item {item} is correct?")
        }
        QuestionType::SentenceCompletion => {
            format!("Item {item}: the structure governing process {topic} consists of the ...")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(id: &str, rates: Option<[f64; 3]>, correct: usize) -> Question {
        Question {
            id: id.into(),
            stem: "Which one?".into(),
            choices: ["a".into(), "b".into(), "c".into()],
            correct_index: correct,
            qtype: None,
            student_rates: rates,
            examinee_count: DEFAULT_EXAMINEE_COUNT,
        }
    }

    fn write_tmp(contents: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_two_valid_jsonl_rows_in_order() {
        let f = write_tmp(
            concat!(
                r#"{"id":"q2","stem":"Which of these is right?","choices":["x","y","z"],"correct_index":1,"student_rates":[0.2,0.7,0.1]}"#,
                "\n",
                r#"{"id":"q1","stem":"The brain is ...","choices":["x","y","z"],"correct_index":0,"qtype":4,"examinee_count":100}"#,
                "\n"
            ),
            ".jsonl",
        );
        let ds = load_dataset(f.path(), DatasetFormat::Jsonl).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.questions[0].id, "q2");
        assert_eq!(ds.questions[0].examinee_count, 268);
        assert_eq!(
            ds.questions[1].qtype,
            Some(QuestionType::SentenceCompletion)
        );
        assert_eq!(ds.questions[1].examinee_count, 100);
    }

    #[test]
    fn rejects_rates_not_summing_to_one() {
        let f = write_tmp(
            r#"{"id":"bad","stem":"s?","choices":["x","y","z"],"correct_index":0,"student_rates":[0.5,0.3,0.1]}"#,
            ".jsonl",
        );
        let err = load_dataset(f.path(), DatasetFormat::Jsonl).unwrap_err();
        assert_eq!(err.to_string(), "question `bad`: rates sum 0.9 ≠ 1");
    }

    #[test]
    fn rejects_four_choices() {
        let f = write_tmp(
            r#"{"id":"four","stem":"s?","choices":["w","x","y","z"],"correct_index":0}"#,
            ".jsonl",
        );
        let err = load_dataset(f.path(), DatasetFormat::Jsonl).unwrap_err();
        assert!(err.to_string().contains("expected 3 choices"), "{err}");
        assert!(err.to_string().contains("four"));
    }

    #[test]
    fn parse_error_reports_line_number() {
        let f = write_tmp(
            concat!(
                r#"{"id":"a","stem":"s?","choices":["x","y","z"],"correct_index":0}"#,
                "\n{not json\n"
            ),
            ".jsonl",
        );
        match load_dataset(f.path(), DatasetFormat::Jsonl).unwrap_err() {
            DatasetError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_duplicate_and_empty_choices_and_ids() {
        let mut dup = q("d", None, 0);
        dup.choices[2] = "a".into();
        assert!(dup
            .validate()
            .unwrap_err()
            .to_string()
            .contains("identical"));
        let mut blank = q("b", None, 0);
        blank.choices[1] = " ".into();
        assert!(blank.validate().is_err());
        let err = Dataset::new(
            DatasetMetadata {
                source: "t".into(),
                created: None,
            },
            vec![q("x", None, 0), q("x", None, 1)],
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateId(id) if id == "x"));
        assert!(matches!(
            Dataset::new(
                DatasetMetadata {
                    source: "t".into(),
                    created: None
                },
                vec![]
            ),
            Err(DatasetError::Empty)
        ));
    }

    #[test]
    fn csv_loads_and_rejects_fourth_choice() {
        let ok = write_tmp(
            "id,stem,choice_a,choice_b,choice_c,correct_index,qtype,rate_a,rate_b,rate_c,examinee_count\n\
             c1,Which is it?,x,y,z,2,3,0.1,0.2,0.7,50\n\
             c2,\"The brain, in short, is ...\",x,y,z,0,,,,,\n",
            ".csv",
        );
        let ds = load_dataset(ok.path(), DatasetFormat::Csv).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.questions[0].student_rates, Some([0.1, 0.2, 0.7]));
        assert_eq!(ds.questions[1].student_rates, None);
        assert_eq!(ds.questions[1].stem, "The brain, in short, is ...");

        let four = write_tmp(
            "id,stem,choice_a,choice_b,choice_c,choice_d,correct_index\nc1,s?,w,x,y,z,0\n",
            ".csv",
        );
        let err = load_dataset(four.path(), DatasetFormat::Csv).unwrap_err();
        assert!(err.to_string().contains("expected 3 choices"), "{err}");
    }

    #[test]
    fn classifies_table_examples() {
        let cases = [
            (
                "In explaining colour perception, the ... theory applies to what happens in the brain.",
                QuestionType::FillGap,
            ),
            ("Homeostasis is to ... as allostasis is to ...", QuestionType::FillTwoGaps),
            ("The central nervous system consists of the ...", QuestionType::SentenceCompletion),
            ("Which of these statements is correct?", QuestionType::WhQuestion),
            ("The answer is ___ and ___", QuestionType::FillTwoGaps),
            ("Neurons end with …", QuestionType::SentenceCompletion),
        ];
        for (stem, want) in cases {
            let guess = classify_question_type(stem);
            assert_eq!(guess.qtype, want, "{stem}");
            assert!(!guess.low_confidence);
        }
        let fallback = classify_question_type("Name the lobe");
        assert_eq!(fallback.qtype, QuestionType::SentenceCompletion);
        assert!(fallback.low_confidence);
    }

    #[test]
    fn roles_follow_rates_with_index_tie_break() {
        let r = assign_choice_roles(&q("a", Some([0.703, 0.209, 0.088]), 0)).unwrap();
        assert_eq!(
            r.by_choice,
            [
                ChoiceRole::CorrectAnswer,
                ChoiceRole::Distractor1,
                ChoiceRole::Distractor2
            ]
        );
        let r = assign_choice_roles(&q("b", Some([0.5, 0.25, 0.25]), 0)).unwrap();
        assert_eq!(r.role_of(1), ChoiceRole::Distractor1);
        let r = assign_choice_roles(&q("c", Some([0.1, 0.2, 0.7]), 2)).unwrap();
        assert_eq!(
            r.by_choice,
            [
                ChoiceRole::Distractor2,
                ChoiceRole::Distractor1,
                ChoiceRole::CorrectAnswer
            ]
        );
        assert_eq!(r.choice_for(ChoiceRole::Distractor1), 1);
        assert!(matches!(
            assign_choice_roles(&q("d", None, 0)),
            Err(DatasetError::MissingRates(_))
        ));
    }

    #[test]
    fn synth_matches_type_mix() {
        let ds = synthesize_dataset(451, [0.149, 0.031, 0.503, 0.317], 7).unwrap();
        assert_eq!(ds.len(), 451);
        let want = [67i64, 14, 227, 143];
        for (t, w) in QuestionType::ALL.iter().zip(want) {
            let got = ds.questions.iter().filter(|q| q.qtype == Some(*t)).count() as i64;
            assert!((got - w).abs() <= 1, "{t:?}: {got} vs {w}");
        }
        for q in &ds.questions {
            assert_eq!(
                classify_question_type(&q.stem).qtype,
                q.qtype.unwrap(),
                "{}",
                q.stem
            );
            assert!(!q.has_zero_rate());
        }
        let mean_correct: f64 = ds
            .questions
            .iter()
            .map(|q| q.student_rates.unwrap()[q.correct_index])
            .sum::<f64>()
            / 451.0;
        assert!((mean_correct - 0.703).abs() < 0.03, "{mean_correct}");
    }

    #[test]
    fn synth_single_question_and_bad_mix() {
        let ds = synthesize_dataset(1, [0.25; 4], 0).unwrap();
        assert_eq!(ds.len(), 1);
        let sum: f64 = ds.questions[0].student_rates.unwrap().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(matches!(
            synthesize_dataset(10, [0.2, 0.2, 0.2, 0.3], 0),
            Err(DatasetError::InvalidMix(_))
        ));
        assert!(synthesize_dataset(0, [0.25; 4], 0).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        let ds = synthesize_dataset(40, [0.149, 0.031, 0.503, 0.317], 11).unwrap();
        write_dataset(&ds, &a, DatasetFormat::Jsonl).unwrap();
        write_dataset(
            &synthesize_dataset(40, [0.149, 0.031, 0.503, 0.317], 11).unwrap(),
            &b,
            DatasetFormat::Jsonl,
        )
        .unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let back = load_dataset(&a, DatasetFormat::Jsonl).unwrap();
        assert_eq!(back.questions, ds.questions);
        let c = dir.path().join("c.csv");
        write_dataset(&ds, &c, DatasetFormat::Csv).unwrap();
        assert_eq!(
            load_dataset(&c, DatasetFormat::Csv).unwrap().questions,
            ds.questions
        );
    }

    proptest! {
        #[test]
        fn classifier_is_pure(stem in ".{1,80}") {
            prop_assert_eq!(classify_question_type(&stem), classify_question_type(&stem));
        }

        #[test]
        fn roles_are_bijective(a in 0.0f64..1.0, b in 0.0f64..1.0, correct in 0usize..3) {
            let total = a + b + 1.0;
            let rates = [a / total, b / total, 1.0 / total];
            let roles = assign_choice_roles(&q("p", Some(rates), correct)).unwrap();
            let mut seen = roles.by_choice.to_vec();
            seen.sort();
            prop_assert_eq!(seen, ChoiceRole::ALL.to_vec());
            let d1 = roles.choice_for(ChoiceRole::Distractor1);
            let d2 = roles.choice_for(ChoiceRole::Distractor2);
            prop_assert!(rates[d1] >= rates[d2]);
        }

        #[test]
        fn synthesized_rates_sum_to_one(seed in any::<u64>(), n in 1usize..30) {
            let ds = synthesize_dataset(n, [0.1, 0.2, 0.3, 0.4], seed).unwrap();
            for q in &ds.questions {
                let s: f64 = q.student_rates.unwrap().iter().sum();
                prop_assert!((s - 1.0).abs() <= RATE_SUM_TOLERANCE);
            }
        }
    }
}
