//! Question items, candidate answer options, dynamic prompting and prompt
//! rendering.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::Hit;
use crate::io_util::read_text;
use crate::rng::{mix_seed, SeededRng};

pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/prompt_v1.txt");

pub const VERIFY_OPTIONS: [&str; 3] = ["yes", "no", "not sure"];
pub const LEAD_OPTIONS: [&str; 12] = [
    "lead I", "lead II", "lead III", "lead aVR", "lead aVL", "lead aVF", "lead V1", "lead V2", "lead V3", "lead V4", "lead V5", "lead V6",
];
pub const NUMERIC_OPTIONS: [&str; 6] = [
    "rr interval",
    "p duration",
    "pr interval",
    "qrs duration",
    "qt interval",
    "qt corrected",
];
pub const RANGE_OPTIONS: [&str; 3] = ["below the normal range", "within the normal range", "above the normal range"];
pub const NONE_OPTION: &str = "none";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QuestionType {
    Verify,
    Choose,
    Query,
}

impl QuestionType {
    pub const ALL: [QuestionType; 3] = [QuestionType::Verify, QuestionType::Choose, QuestionType::Query];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::Verify => "single-verify",
            QuestionType::Choose => "single-choose",
            QuestionType::Query => "single-query",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single-verify" => Ok(QuestionType::Verify),
            "single-choose" => Ok(QuestionType::Choose),
            "single-query" => Ok(QuestionType::Query),
            other => Err(Error::invalid(format!("unknown question type {other:?}"))),
        }
    }
}

impl std::fmt::Display for QuestionType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One line of the QA JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaRow {
    pub ecg_ref: String,
    pub question_type: String,
    pub question: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub answers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaItem {
    pub ecg_ref: String,
    pub qtype: QuestionType,
    pub question: String,
    pub attributes: Vec<String>,
    pub answers: Vec<String>,
}

impl QaItem {
    pub fn from_row(row: QaRow) -> Result<Self> {
        Ok(Self {
            qtype: QuestionType::parse(&row.question_type)?,
            ecg_ref: row.ecg_ref,
            question: row.question,
            attributes: row.attributes,
            answers: row.answers,
        })
    }

    pub fn to_row(&self) -> QaRow {
        QaRow {
            ecg_ref: self.ecg_ref.clone(),
            question_type: self.qtype.as_str().to_string(),
            question: self.question.clone(),
            attributes: self.attributes.clone(),
            answers: self.answers.clone(),
        }
    }

    /// Gold answers sorted and joined with `", "`, the training target.
    pub fn answer_text(&self) -> String {
        let mut a: Vec<String> = self.answers.iter().map(|s| s.trim().to_lowercase()).collect();
        a.sort();
        a.join(", ")
    }
}

pub fn parse_jsonl(text: &str) -> Result<Vec<QaItem>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let row: QaRow = serde_json::from_str(line).map_err(|e| Error::format(format!("QA line {}: {e}", n + 1)))?;
            QaItem::from_row(row)
        })
        .collect()
}

pub fn load_jsonl(path: &Path) -> Result<Vec<QaItem>> {
    parse_jsonl(&read_text(path)?)
}

pub fn to_jsonl(items: &[QaItem]) -> String {
    items
        .iter()
        .map(|it| serde_json::to_string(&it.to_row()).expect("QA rows serialise") + "\n")
        .collect()
}

fn with_none(attributes: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(attributes.len() + 1);
    for a in attributes.iter().map(|a| a.trim().to_lowercase()) {
        if !out.contains(&a) {
            out.push(a);
        }
    }
    if !out.iter().any(|a| a == NONE_OPTION) {
        out.push(NONE_OPTION.to_string());
    }
    out
}

fn owned(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Candidate answers for an item, following the option rules table. Query
/// prefixes are matched case-sensitively.
pub fn candidate_options(item: &QaItem) -> Vec<String> {
    match item.qtype {
        QuestionType::Verify => owned(&VERIFY_OPTIONS),
        QuestionType::Choose => with_none(&item.attributes),
        QuestionType::Query => {
            let q = item.question.trim_start();
            if q.starts_with("What leads") {
                owned(&LEAD_OPTIONS)
            } else if q.starts_with("What numeric features") {
                owned(&NUMERIC_OPTIONS)
            } else if q.starts_with("What range") {
                owned(&RANGE_OPTIONS)
            } else {
                with_none(&item.attributes)
            }
        }
    }
}

pub fn shuffle_options(options: &[String], seed: u64) -> Vec<String> {
    let mut out = options.to_vec();
    SeededRng::new(seed).shuffle(&mut out);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportChoice {
    RandomOfThree,
    FixedTop1,
    None,
}

impl ReportChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random-of-3" => Ok(Self::RandomOfThree),
            "fixed-top-1" => Ok(Self::FixedTop1),
            "none" => Ok(Self::None),
            other => Err(Error::invalid(format!("unknown report choice {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::RandomOfThree => "random-of-3",
            Self::FixedTop1 => "fixed-top-1",
            Self::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DynamicPromptConfig {
    pub shuffle: bool,
    pub report_choice: ReportChoice,
    pub seed: u64,
}

impl DynamicPromptConfig {
    /// Shuffled options and a random one of the top three reports.
    pub fn training(seed: u64) -> Self {
        Self {
            shuffle: true,
            report_choice: ReportChoice::RandomOfThree,
            seed,
        }
    }

    /// Fixed option order and the best-scoring report.
    pub fn evaluation() -> Self {
        Self {
            shuffle: false,
            report_choice: ReportChoice::FixedTop1,
            seed: 0,
        }
    }

    /// Per-item, per-step configuration with the seed derived from the
    /// global seed.
    pub fn for_step(&self, global_seed: u64, item: u64, step: u64) -> Self {
        Self {
            seed: mix_seed(global_seed, &[item, step]),
            ..*self
        }
    }
}

/// Choose the report to show according to `cfg`.
pub fn select_report<'a>(hits: &'a [Hit], cfg: &DynamicPromptConfig) -> Result<Option<&'a Hit>> {
    if cfg.report_choice == ReportChoice::None {
        return Ok(None);
    }
    if hits.is_empty() {
        return Err(Error::EmptyRetrieval);
    }
    match cfg.report_choice {
        ReportChoice::FixedTop1 => Ok(hits.iter().reduce(|best, h| if h.score > best.score { h } else { best })),
        ReportChoice::RandomOfThree => {
            let n = hits.len().min(3) as u64;
            let mut rng = SeededRng::new(mix_seed(cfg.seed, &[1]));
            Ok(Some(&hits[rng.below(n) as usize]))
        }
        ReportChoice::None => unreachable!(),
    }
}

enum Segment<'a> {
    Text(&'a str),
    Slot(&'a str),
}

const SLOTS: [&str; 3] = ["report", "question", "options"];

/// A prompt template with `{report}`, `{question}` and `{options}` slots.
/// The span from `<report>` to `</report>` (and the line break after it) is
/// dropped when no report is given.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let t = Self { text: text.into() };
        let segments = parse_segments(&t.text)?;
        for need in ["question", "options"] {
            if !segments.iter().any(|s| matches!(s, Segment::Slot(n) if *n == need)) {
                return Err(Error::Template(format!("template has no {{{need}}} placeholder")));
            }
        }
        Ok(t)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(read_text(path)?)
    }

    pub fn render(&self, question: &str, options: &[String], report: Option<&str>) -> Result<String> {
        if options.is_empty() {
            return Err(Error::invalid("prompt needs at least one option"));
        }
        let text = match report {
            Some(_) => self.text.clone(),
            None => strip_report_block(&self.text)?,
        };
        let joined = options.join(", ");
        let mut out = String::with_capacity(text.len() + question.len() + joined.len());
        for seg in parse_segments(&text)? {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot("question") => out.push_str(question),
                Segment::Slot("options") => out.push_str(&joined),
                Segment::Slot("report") => match report {
                    Some(r) => out.push_str(r),
                    None => return Err(Error::Template("{report} used outside the <report> block".into())),
                },
                Segment::Slot(other) => return Err(Error::Template(format!("unresolved placeholder {{{other}}}"))),
            }
        }
        Ok(out.trim_end().to_string())
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::new(DEFAULT_TEMPLATE).expect("built-in template is valid")
    }
}

fn parse_segments(text: &str) -> Result<Vec<Segment<'_>>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name = close.map(|c| &after[..c]);
        match name {
            Some(n) if !n.is_empty() && n.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_') => {
                if !SLOTS.contains(&n) {
                    return Err(Error::Template(format!("unresolved placeholder {{{n}}}")));
                }
                out.push(Segment::Text(&rest[..open]));
                out.push(Segment::Slot(n));
                rest = &after[n.len() + 1..];
            }
            _ => {
                out.push(Segment::Text(&rest[..open + 1]));
                rest = after;
            }
        }
    }
    out.push(Segment::Text(rest));
    Ok(out)
}

fn strip_report_block(text: &str) -> Result<String> {
    match (text.find("<report>"), text.find("</report>")) {
        (None, None) => Ok(text.to_string()),
        (Some(s), Some(e)) if s < e => {
            let mut end = e + "</report>".len();
            if text[end..].starts_with('\n') {
                end += 1;
            }
            Ok(format!("{}{}", &text[..s], &text[end..]))
        }
        _ => Err(Error::Template("unbalanced <report> block".into())),
    }
}

/// Everything that goes into one rendered prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPrompt {
    pub options: Vec<String>,
    pub report: Option<String>,
    pub text: String,
}

/// Options (shuffled if configured), report selection and rendering.
pub fn prepare_prompt(item: &QaItem, hits: &[Hit], dp: &DynamicPromptConfig, template: &PromptTemplate) -> Result<PreparedPrompt> {
    let mut options = candidate_options(item);
    if dp.shuffle {
        options = shuffle_options(&options, mix_seed(dp.seed, &[0]));
    }
    let report = select_report(hits, dp)?.map(|h| h.report.clone());
    let text = template.render(&item.question, &options, report.as_deref())?;
    Ok(PreparedPrompt { options, report, text })
}
