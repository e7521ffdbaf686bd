//! Synthetic ECG records with matching reports and question items, and the
//! on-disk dataset layout shared by every command:
//!
//! ```text
//! <dir>/ecg/NNNN.ecgr     one record per file
//! <dir>/reports.jsonl     {"ecg_ref": ..., "report": ...}
//! <dir>/qa.jsonl          question items
//! <dir>/vocab.txt         tokenizer vocabulary
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::io_util::{read_text, write_atomic};
use crate::prompting::{
    self, QaItem, QuestionType, DEFAULT_TEMPLATE, LEAD_OPTIONS, NONE_OPTION, NUMERIC_OPTIONS, RANGE_OPTIONS, VERIFY_OPTIONS,
};
use crate::rng::{mix_seed, SeededRng};
use crate::signal::{EcgRecord, CANONICAL_LEN, CANONICAL_RATE, N_LEADS};

pub const RHYTHMS: [&str; 4] = ["sinus rhythm", "sinus bradycardia", "sinus tachycardia", "atrial fibrillation"];

/// Relative QRS amplitude per lead.
const LEAD_GAIN: [f32; N_LEADS] = [1.0, 1.2, 0.4, -0.9, 0.5, 0.8, -0.6, 0.3, 0.9, 1.3, 1.1, 0.9];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub records: usize,
    pub seed: u64,
    pub len: usize,
    pub rate: u32,
    pub noise: f64,
}

impl SynthConfig {
    pub fn new(records: usize, seed: u64) -> Self {
        Self {
            records,
            seed,
            len: CANONICAL_LEN,
            rate: CANONICAL_RATE,
            noise: 0.02,
        }
    }
}

/// Ground truth behind one synthetic record.
#[derive(Clone, Debug, PartialEq)]
pub struct Findings {
    pub rhythm: usize,
    pub st_leads: Vec<usize>,
    pub t_leads: Vec<usize>,
    /// Index into [`RANGE_OPTIONS`].
    pub qt_range: usize,
    pub wide_qrs: bool,
    pub long_pr: bool,
}

impl Findings {
    fn sample(rng: &mut SeededRng) -> Self {
        let rhythm = rng.below(RHYTHMS.len() as u64) as usize;
        let st_leads = lead_set(rng);
        let t_leads = lead_set(rng);
        let qt_range = rng.below(3) as usize;
        let wide_qrs = rng.bernoulli(0.3);
        // Afib has no P wave, hence no PR interval.
        let mut long_pr = rhythm != 3 && rng.bernoulli(0.3);
        if qt_range == 1 && !wide_qrs && !long_pr {
            long_pr = rhythm != 3;
        }
        let mut f = Self {
            rhythm,
            st_leads,
            t_leads,
            qt_range,
            wide_qrs,
            long_pr,
        };
        if f.abnormal_numeric().is_empty() {
            f.wide_qrs = true;
        }
        f
    }

    /// Numeric features outside their normal range, in option order.
    pub fn abnormal_numeric(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.long_pr {
            out.push(NUMERIC_OPTIONS[2]);
        }
        if self.wide_qrs {
            out.push(NUMERIC_OPTIONS[3]);
        }
        if self.qt_range != 1 {
            out.push(NUMERIC_OPTIONS[4]);
        }
        out
    }

    pub fn report(&self) -> String {
        let qt = ["short", "normal", "prolonged"][self.qt_range];
        let mut s = format!(
            "{}. st elevation in {}. t wave inversion in {}. qt interval {qt}.",
            RHYTHMS[self.rhythm],
            lead_phrase(&self.st_leads),
            lead_phrase(&self.t_leads)
        );
        if self.wide_qrs {
            s.push_str(" wide qrs complex.");
        }
        if self.long_pr {
            s.push_str(" prolonged pr interval.");
        }
        s
    }
}

fn lead_set(rng: &mut SeededRng) -> Vec<usize> {
    let a = rng.below(N_LEADS as u64) as usize;
    if rng.bernoulli(0.5) {
        return vec![a];
    }
    let b = (a + 1 + rng.below(N_LEADS as u64 - 1) as usize) % N_LEADS;
    let mut v = vec![a, b];
    v.sort_unstable();
    v
}

fn lead_phrase(leads: &[usize]) -> String {
    leads.iter().map(|&l| LEAD_OPTIONS[l]).collect::<Vec<_>>().join(" and ")
}

fn gauss(x: f64, width: f64) -> f64 {
    (-0.5 * (x / width).powi(2)).exp()
}

/// Sum of P, QRS and T bumps per beat with ST plateaus, scaled per lead,
/// plus white noise.
pub fn synth_signal(f: &Findings, cfg: &SynthConfig, rng: &mut SeededRng) -> Result<EcgRecord> {
    let rate = cfg.rate as f64;
    let dur = cfg.len as f64 / rate;
    let mut beats = Vec::new();
    let mut t = 0.2 + 0.3 * rng.uniform();
    while t < dur + 0.5 {
        beats.push(t);
        let rr = match f.rhythm {
            0 => 0.83,
            1 => 1.2,
            2 => 0.55,
            _ => 0.45 + 0.55 * rng.uniform(),
        };
        t += rr * (1.0 + 0.02 * (rng.uniform() - 0.5));
    }
    let qt = [0.30, 0.40, 0.50][f.qt_range];
    let qrs_w = if f.wide_qrs { 0.025 } else { 0.012 };
    let pr = if f.long_pr { 0.26 } else { 0.16 };
    let p_amp = if f.rhythm == 3 { 0.0 } else { 0.15 };
    let mut rows = vec![vec![0f32; cfg.len]; N_LEADS];
    for (lead, row) in rows.iter_mut().enumerate() {
        let gain = LEAD_GAIN[lead] as f64;
        let t_amp = if f.t_leads.contains(&lead) { -0.35 } else { 0.3 };
        let st = if f.st_leads.contains(&lead) { 0.2 } else { 0.0 };
        for (i, v) in row.iter_mut().enumerate() {
            let ts = i as f64 / rate;
            let mut x = 0.0;
            for &r in beats.iter().filter(|&&r| (ts - r).abs() < 0.8) {
                let d = ts - r;
                x += gain * (p_amp * gauss(d + pr, 0.025) + gauss(d, qrs_w) + t_amp * gauss(d - 0.7 * qt, 0.045));
                if d > 0.05 && d < 0.55 * qt {
                    x += st;
                }
            }
            if f.rhythm == 3 {
                x += 0.03 * (2.0 * std::f64::consts::PI * 6.0 * ts + lead as f64).sin();
            }
            *v = (x + cfg.noise * rng.normal()) as f32;
        }
    }
    EcgRecord::new(cfg.rate, rows)
}

fn owned(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Copy)]
enum QueryKind {
    Leads,
    Numeric,
    Range,
    Rhythm,
}

/// Four questions about one record: a verify, a choose and two queries.
/// Query kinds rotate with `index` so any two consecutive records cover all
/// four kinds.
pub fn questions(ecg_ref: &str, f: &Findings, index: usize, rng: &mut SeededRng) -> Vec<QaItem> {
    let item = |qtype, question: String, attributes: Vec<String>, answers: Vec<String>| QaItem {
        ecg_ref: ecg_ref.to_string(),
        qtype,
        question,
        attributes,
        answers,
    };
    let truth = RHYTHMS[f.rhythm];
    let probe = if rng.bernoulli(0.5) {
        f.rhythm
    } else {
        rng.below(RHYTHMS.len() as u64) as usize
    };
    let verify_answer = if probe == f.rhythm { VERIFY_OPTIONS[0] } else { VERIFY_OPTIONS[1] };
    let mut out = vec![item(
        QuestionType::Verify,
        format!("Does this ECG show {}?", RHYTHMS[probe]),
        vec![RHYTHMS[probe].to_string()],
        vec![verify_answer.to_string()],
    )];

    let mut pair: Vec<usize> = (0..RHYTHMS.len()).filter(|&r| r != f.rhythm).collect();
    rng.shuffle(&mut pair);
    if rng.bernoulli(0.75) {
        pair[0] = f.rhythm;
    }
    let (a, b) = if rng.bernoulli(0.5) {
        (pair[0], pair[1])
    } else {
        (pair[1], pair[0])
    };
    let choose_answer = if a == f.rhythm || b == f.rhythm { truth } else { NONE_OPTION };
    out.push(item(
        QuestionType::Choose,
        format!("Which rhythm does this ECG show, {} or {}?", RHYTHMS[a], RHYTHMS[b]),
        vec![RHYTHMS[a].to_string(), RHYTHMS[b].to_string()],
        vec![choose_answer.to_string()],
    ));

    let kinds = [QueryKind::Leads, QueryKind::Numeric, QueryKind::Range, QueryKind::Rhythm];
    for k in [kinds[(2 * index) % 4], kinds[(2 * index + 1) % 4]] {
        out.push(match k {
            QueryKind::Leads => {
                let (what, leads) = if (index / 2).is_multiple_of(2) {
                    ("st elevation", &f.st_leads)
                } else {
                    ("t wave inversion", &f.t_leads)
                };
                item(
                    QuestionType::Query,
                    format!("What leads show {what}?"),
                    vec![what.to_string()],
                    leads.iter().map(|&l| LEAD_OPTIONS[l].to_string()).collect(),
                )
            }
            QueryKind::Numeric => item(
                QuestionType::Query,
                "What numeric features are outside the normal range?".into(),
                vec![],
                owned(&f.abnormal_numeric()),
            ),
            QueryKind::Range => item(
                QuestionType::Query,
                "What range is the qt interval in?".into(),
                vec!["qt interval".into()],
                vec![RANGE_OPTIONS[f.qt_range].to_string()],
            ),
            QueryKind::Rhythm => item(
                QuestionType::Query,
                "What is the rhythm of this ECG?".into(),
                owned(&RHYTHMS),
                vec![truth.to_string()],
            ),
        });
    }
    out
}

/// A loaded or generated dataset. Records are keyed by `ecg_ref`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: BTreeMap<String, EcgRecord>,
    /// `(ecg_ref, report)` in index order.
    pub reports: Vec<(String, String)>,
    pub items: Vec<QaItem>,
}

#[derive(Serialize, Deserialize)]
struct ReportRow {
    ecg_ref: String,
    report: String,
}

pub fn record_ref(i: usize) -> String {
    format!("ecg/{i:04}.ecgr")
}

pub fn synthesize(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.records == 0 {
        return Err(Error::invalid("need at least one record"));
    }
    let mut ds = Dataset {
        records: BTreeMap::new(),
        reports: Vec::new(),
        items: Vec::new(),
    };
    for i in 0..cfg.records {
        let mut rng = SeededRng::new(mix_seed(cfg.seed, &[i as u64]));
        let f = Findings::sample(&mut rng);
        let name = record_ref(i);
        ds.records.insert(name.clone(), synth_signal(&f, cfg, &mut rng)?);
        ds.reports.push((name.clone(), f.report()));
        ds.items.extend(questions(&name, &f, i, &mut rng));
    }
    Ok(ds)
}

impl Dataset {
    /// Vocabulary covering the built-in template, every option list, the
    /// reports and the question items.
    pub fn vocabulary(&self) -> Result<Tokenizer> {
        let mut texts: Vec<String> = vec![DEFAULT_TEMPLATE.to_string(), NONE_OPTION.to_string()];
        for list in [
            &VERIFY_OPTIONS[..],
            &LEAD_OPTIONS[..],
            &NUMERIC_OPTIONS[..],
            &RANGE_OPTIONS[..],
            &RHYTHMS[..],
        ] {
            texts.extend(owned(list));
        }
        texts.extend(self.reports.iter().map(|(_, r)| r.clone()));
        for it in &self.items {
            texts.push(it.question.clone());
            texts.extend(it.attributes.iter().cloned());
            texts.extend(it.answers.iter().cloned());
        }
        Tokenizer::from_corpus(&texts)
    }

    pub fn record(&self, ecg_ref: &str) -> Result<&EcgRecord> {
        self.records
            .get(ecg_ref)
            .ok_or_else(|| Error::invalid(format!("unknown ecg_ref {ecg_ref:?}")))
    }

    pub fn reports_jsonl(&self) -> String {
        self.reports
            .iter()
            .map(|(r, t)| {
                let row = ReportRow {
                    ecg_ref: r.clone(),
                    report: t.clone(),
                };
                serde_json::to_string(&row).expect("report rows serialise") + "\n"
            })
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, rec) in &self.records {
            rec.save(&dir.join(name))?;
        }
        write_atomic(&dir.join("reports.jsonl"), self.reports_jsonl().as_bytes())?;
        write_atomic(&dir.join("qa.jsonl"), prompting::to_jsonl(&self.items).as_bytes())?;
        self.vocabulary()?.save(&dir.join("vocab.txt"))
    }

    /// Every file written by [`Dataset::write`], sorted.
    pub fn files(&self, dir: &Path) -> Vec<PathBuf> {
        let mut out: Vec<PathBuf> = self.records.keys().map(|n| dir.join(n)).collect();
        out.extend(["qa.jsonl", "reports.jsonl", "vocab.txt"].iter().map(|f| dir.join(f)));
        out.sort();
        out
    }

    /// Reports, question items and every record either list refers to.
    pub fn load(dir: &Path) -> Result<Self> {
        let reports = load_reports(dir)?;
        let items = prompting::load_jsonl(&dir.join("qa.jsonl"))?;
        let mut records = BTreeMap::new();
        let refs = reports.iter().map(|(r, _)| r).chain(items.iter().map(|it| &it.ecg_ref));
        for r in refs {
            if !records.contains_key(r) {
                check_ref(r)?;
                records.insert(r.clone(), EcgRecord::load(&dir.join(r))?);
            }
        }
        Ok(Self { records, reports, items })
    }
}

fn check_ref(r: &str) -> Result<()> {
    if r.contains("..") || Path::new(r).is_absolute() {
        return Err(Error::invalid(format!("ecg_ref {r:?} escapes the dataset directory")));
    }
    Ok(())
}

/// `(ecg_ref, report)` pairs of `reports.jsonl`.
pub fn load_reports(dir: &Path) -> Result<Vec<(String, String)>> {
    let mut reports = Vec::new();
    for (n, line) in read_text(&dir.join("reports.jsonl"))?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ReportRow = serde_json::from_str(line).map_err(|e| Error::format(format!("report line {}: {e}", n + 1)))?;
        reports.push((row.ecg_ref, row.report));
    }
    Ok(reports)
}

/// Every `ecg/*.ecgr` file must have exactly one report and every report an
/// existing record file. The error lists all offenders.
pub fn check_pairing(dir: &Path) -> Result<()> {
    let reports = load_reports(dir)?;
    let ecg_dir = dir.join("ecg");
    let mut files = BTreeSet::new();
    for entry in std::fs::read_dir(&ecg_dir).map_err(|e| Error::io(&ecg_dir, e))? {
        let path = entry.map_err(|e| Error::io(&ecg_dir, e))?.path();
        if path.extension().is_some_and(|x| x == "ecgr") {
            let name = path.file_name().expect("entries have names").to_string_lossy();
            files.insert(format!("ecg/{name}"));
        }
    }
    let mut seen = BTreeSet::new();
    let mut problems = Vec::new();
    for (r, _) in &reports {
        check_ref(r)?;
        if !seen.insert(r.as_str()) {
            problems.push(format!("{r}: more than one report"));
        } else if !files.contains(r) && !dir.join(r).is_file() {
            problems.push(format!("{r}: report without a record file"));
        }
    }
    for f in &files {
        if !seen.contains(f.as_str()) {
            problems.push(format!("{f}: record without a report"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::invalid(format!("unpaired files: {}", problems.join("; "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::candidate_options;

    fn small() -> Dataset {
        let mut cfg = SynthConfig::new(10, 3);
        cfg.len = 1000;
        synthesize(&cfg).unwrap()
    }

    #[test]
    fn pairing_names_the_offender() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small();
        ds.write(dir.path()).unwrap();
        check_pairing(dir.path()).unwrap();
        std::fs::copy(dir.path().join("ecg/0000.ecgr"), dir.path().join("ecg/0099.ecgr")).unwrap();
        let err = check_pairing(dir.path()).unwrap_err().to_string();
        assert!(err.contains("ecg/0099.ecgr"), "{err}");
    }

    #[test]
    fn coverage_of_question_kinds() {
        let ds = small();
        assert!(ds.items.len() >= 30);
        for q in QuestionType::ALL {
            assert!(ds.items.iter().any(|it| it.qtype == q));
        }
        for prefix in ["What leads", "What numeric features", "What range"] {
            assert!(ds.items.iter().any(|it| it.question.starts_with(prefix)), "{prefix}");
        }
    }

    #[test]
    fn answers_are_options() {
        let ds = small();
        for it in &ds.items {
            let opts = candidate_options(it);
            assert!(!it.answers.is_empty());
            for a in &it.answers {
                assert!(opts.iter().any(|o| o.eq_ignore_ascii_case(a)), "{a} not in {opts:?}");
            }
        }
    }

    #[test]
    fn deterministic_and_vocab_complete() {
        let a = small();
        assert_eq!(a, small());
        let tok = a.vocabulary().unwrap();
        assert!(tok.len() < 200, "vocab {}", tok.len());
        for it in &a.items {
            assert!(!tok.encode(&it.question).contains(&crate::decoder::tokenizer::UNK_ID));
            assert!(!tok.encode(&it.answer_text()).contains(&crate::decoder::tokenizer::UNK_ID));
        }
    }

    #[test]
    fn write_and_load() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
        for f in ds.files(dir.path()) {
            assert!(f.exists());
        }
    }
}
