//! Answer scoring: exact match, BLEU-1, ROUGE-L, exact-match METEOR and
//! macro AUC, plus per-question-type aggregation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompting::QuestionType;

/// Lowercase, trim, collapse whitespace and drop one terminal period.
pub fn normalize_text(s: &str) -> String {
    let lower = s.to_lowercase();
    let collapsed = lower.split_whitespace().collect::<Vec<_>>().join(" ");
    match collapsed.strip_suffix('.') {
        Some(rest) => rest.trim_end().to_string(),
        None => collapsed,
    }
}

/// Normalised comma-separated answer parts, sorted and re-joined with `", "`.
pub fn normalize_answer(s: &str) -> String {
    let norm = normalize_text(s);
    let mut parts: Vec<String> = norm.split(',').map(normalize_text).filter(|p| !p.is_empty()).collect();
    parts.sort();
    parts.join(", ")
}

/// Canonical text of a gold answer set.
pub fn gold_text(gold: &[String]) -> String {
    normalize_answer(&gold.join(", "))
}

pub fn exact_match(pred: &str, gold: &[String]) -> f64 {
    if normalize_answer(pred) == gold_text(gold) {
        1.0
    } else {
        0.0
    }
}

/// Word tokens of normalised text; commas separate but are not tokens.
pub fn metric_tokens(s: &str) -> Vec<String> {
    normalize_text(s).replace(',', " ").split_whitespace().map(str::to_string).collect()
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Clipped unigram precision times the brevity penalty.
pub fn bleu1_tokens(pred: &[String], reference: &[String]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let rc = counts(reference);
    let clipped: usize = counts(pred).iter().map(|(t, &c)| c.min(rc.get(t).copied().unwrap_or(0))).sum();
    let p = clipped as f64 / pred.len() as f64;
    let bp = (1.0 - reference.len() as f64 / pred.len() as f64).min(0.0).exp();
    p * bp
}

pub fn bleu1(pred: &str, reference: &str) -> f64 {
    bleu1_tokens(&metric_tokens(pred), &metric_tokens(reference))
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure `(1 + β²)·P·R / (R + β²·P)` with `β = 1.2`.
pub fn rouge_l_tokens(pred: &[String], reference: &[String]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(pred, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let (p, r) = (lcs / pred.len() as f64, lcs / reference.len() as f64);
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l(pred: &str, reference: &str) -> f64 {
    rouge_l_tokens(&metric_tokens(pred), &metric_tokens(reference))
}

/// Left-to-right greedy exact alignment: each prediction token takes the
/// first unused identical reference token.
fn align(pred: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut out = Vec::new();
    for (i, t) in pred.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && &reference[j] == t) {
            used[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// METEOR with exact unigram matching only: harmonic mean weighted towards
/// recall, times `1 − 0.5·(chunks/matches)³`.
pub fn meteor_tokens(pred: &[String], reference: &[String]) -> f64 {
    let pairs = align(pred, reference);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + pairs.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
    let (p, r) = (m as f64 / pred.len() as f64, m as f64 / reference.len() as f64);
    let fmean = p * r / (0.9 * p + 0.1 * r);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

pub fn meteor_simplified(pred: &str, reference: &str) -> f64 {
    meteor_tokens(&metric_tokens(pred), &metric_tokens(reference))
}

/// Pairwise AUC of one class: positives ranked above negatives, ties 0.5.
/// `None` if the class lacks positives or negatives.
pub fn binary_auc(scored: &[(f64, bool)]) -> Option<f64> {
    let pos: Vec<f64> = scored.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scored.iter().filter(|s| !s.1).map(|s| s.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Unweighted mean of per-class AUCs. Degenerate classes are an error when
/// `strict`, otherwise skipped with a warning.
pub fn macro_auc(classes: &[Vec<(f64, bool)>], strict: bool) -> Result<f64> {
    let mut aucs = Vec::new();
    for (i, c) in classes.iter().enumerate() {
        match binary_auc(c) {
            Some(a) => aucs.push(a),
            None if strict => return Err(Error::invalid(format!("class {i} lacks positives or negatives"))),
            None => log::warn!("class {i} lacks positives or negatives; excluded from macro AUC"),
        }
    }
    if aucs.is_empty() {
        return Err(Error::invalid("no class has both positives and negatives"));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// One scored prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub qtype: String,
    pub prediction: String,
    pub gold: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub em_acc: f64,
    pub bleu1: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

impl Scores {
    pub fn of(pred: &str, gold: &[String]) -> Self {
        let (p, r) = (metric_tokens(pred), metric_tokens(&gold_text(gold)));
        Self {
            em_acc: exact_match(pred, gold),
            bleu1: bleu1_tokens(&p, &r),
            rouge_l: rouge_l_tokens(&p, &r),
            meteor: meteor_tokens(&p, &r),
        }
    }

    fn add(&mut self, o: &Scores) {
        self.em_acc += o.em_acc;
        self.bleu1 += o.bleu1;
        self.rouge_l += o.rouge_l;
        self.meteor += o.meteor;
    }

    fn scaled(&self, k: f64) -> Self {
        Self {
            em_acc: self.em_acc * k,
            bleu1: self.bleu1 * k,
            rouge_l: self.rouge_l * k,
            meteor: self.meteor * k,
        }
    }
}

pub const METEOR_NOTE: &str = "METEOR uses exact unigram matching only (no stemming or synonyms); BERTScore is not computed.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub note: String,
    /// Keyed by question type name.
    pub per_type: BTreeMap<String, Scores>,
    pub counts: BTreeMap<String, usize>,
    /// Unweighted mean of the three per-type values.
    pub avg: Scores,
}

/// Per-type means and their unweighted average. Every question type must be
/// present.
pub fn aggregate(label: &str, records: &[EvalRecord]) -> Result<MetricReport> {
    let mut sums: BTreeMap<QuestionType, (Scores, usize)> = BTreeMap::new();
    for r in records {
        if r.gold.is_empty() {
            return Err(Error::invalid("evaluation record has no gold answers"));
        }
        let q = QuestionType::parse(&r.qtype)?;
        let e = sums.entry(q).or_default();
        e.0.add(&Scores::of(&r.prediction, &r.gold));
        e.1 += 1;
    }
    let missing: Vec<&str> = QuestionType::ALL
        .iter()
        .filter(|q| !sums.contains_key(q))
        .map(|q| q.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteEval(missing.join(", ")));
    }
    let mut per_type = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut avg = Scores::default();
    for (q, (s, n)) in &sums {
        let mean = s.scaled(1.0 / *n as f64);
        avg.add(&mean);
        per_type.insert(q.as_str().to_string(), mean);
        counts.insert(q.as_str().to_string(), *n);
    }
    Ok(MetricReport {
        label: label.to_string(),
        note: METEOR_NOTE.to_string(),
        per_type,
        counts,
        avg: avg.scaled(1.0 / QuestionType::ALL.len() as f64),
    })
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialise") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::format(format!("metric report: {e}")))
    }

    /// Aligned table with one row per metric and columns Verify, Choose,
    /// Query, Avg.
    pub fn to_table(&self) -> String {
        let mut s = format!("# {}\n# {}\n", self.label, self.note);
        let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>8} {:>8}", "metric", "Verify", "Choose", "Query", "Avg");
        let cell = |q: QuestionType, f: fn(&Scores) -> f64| self.per_type.get(q.as_str()).map_or(f64::NAN, f);
        type Column = fn(&Scores) -> f64;
        let rows: [(&str, Column); 4] = [
            ("EM-Acc", |s| s.em_acc),
            ("BLEU-1", |s| s.bleu1),
            ("ROUGE-L", |s| s.rouge_l),
            ("METEOR", |s| s.meteor),
        ];
        for (name, f) in rows {
            let _ = writeln!(
                s,
                "{:<10} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
                name,
                cell(QuestionType::Verify, f),
                cell(QuestionType::Choose, f),
                cell(QuestionType::Query, f),
                f(&self.avg)
            );
        }
        let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>8} {:>8}", "BERTScore", "n/a", "n/a", "n/a", "n/a");
        s
    }
}

/// Side-by-side EM accuracy of several reports, one row per report.
pub fn comparison_table(reports: &[MetricReport]) -> String {
    let width = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<width$} {:>8} {:>8} {:>8} {:>8}\n", "method", "Verify", "Choose", "Query", "Avg");
    for r in reports {
        let em = |q: QuestionType| r.per_type.get(q.as_str()).map_or(f64::NAN, |v| v.em_acc);
        let _ = writeln!(
            s,
            "{:<width$} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            r.label,
            em(QuestionType::Verify),
            em(QuestionType::Choose),
            em(QuestionType::Query),
            r.avg.em_acc
        );
    }
    s
}

pub fn parse_eval_jsonl(text: &str) -> Result<Vec<EvalRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::format(format!("eval line {}: {e}", n + 1))))
        .collect()
}

pub fn eval_to_jsonl(records: &[EvalRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialise") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-6
    }

    #[test]
    fn exact_match_rules() {
        assert_eq!(exact_match("yes", &v(&["yes"])), 1.0);
        assert_eq!(exact_match("Yes.", &v(&["yes"])), 1.0);
        assert_eq!(exact_match("  lead ii,   lead i ", &v(&["lead I", "lead II"])), 1.0);
        assert_eq!(exact_match("lead ii", &v(&["lead I", "lead II"])), 0.0);
        assert_eq!(exact_match("no", &v(&["yes"])), 0.0);
    }

    #[test]
    fn bleu_by_hand() {
        assert!(close(bleu1("the cat sat", "the cat sat"), 1.0));
        assert!(close(bleu1("the the the", "the cat"), 1.0 / 3.0));
        assert!(close(bleu1("cat", "the cat"), (-1.0f64).exp()));
        assert_eq!(bleu1("", "the cat"), 0.0);
    }

    #[test]
    fn rouge_by_hand() {
        assert!(close(rouge_l("a b c", "a b c"), 1.0));
        assert_eq!(rouge_l("a b", "c d"), 0.0);
        assert_eq!(rouge_l("", ""), 0.0);
        // LCS 3, P 0.75, R 1: 2.44·0.75 / (1 + 1.44·0.75).
        assert!(close(rouge_l("a b c d", "a c d"), 1.83 / 2.08));
        assert!(close(rouge_l("a b c d", "a c d"), 0.879807));
    }

    #[test]
    fn meteor_by_hand() {
        assert!(close(meteor_simplified("a b c", "a b c"), 1.0 - 0.5 / 27.0));
        assert!(close(meteor_simplified("a b c", "a b c"), 0.981481));
        assert_eq!(meteor_simplified("a b", "c d"), 0.0);
        assert!(close(meteor_simplified("b a", "a b"), 0.5));
    }

    #[test]
    fn auc_by_hand() {
        let c = vec![(0.1, false), (0.4, false), (0.35, true), (0.8, true)];
        assert!(close(macro_auc(&[c], true).unwrap(), 0.75));
        let sep = vec![(0.1, false), (0.9, true)];
        let inv = vec![(0.9, false), (0.1, true)];
        assert_eq!(macro_auc(std::slice::from_ref(&sep), true).unwrap(), 1.0);
        assert_eq!(macro_auc(&[inv], true).unwrap(), 0.0);
        let tie = vec![(0.5, false), (0.5, true)];
        assert_eq!(binary_auc(&tie), Some(0.5));
        let degenerate = vec![(0.5, true)];
        assert!(macro_auc(&[sep.clone(), degenerate.clone()], true).is_err());
        assert_eq!(macro_auc(&[sep, degenerate], false).unwrap(), 1.0);
    }

    fn rec(q: &str, p: &str, g: &[&str]) -> EvalRecord {
        EvalRecord {
            qtype: q.into(),
            prediction: p.into(),
            gold: v(g),
        }
    }

    #[test]
    fn aggregate_rules() {
        let all = vec![
            rec("single-verify", "yes", &["yes"]),
            rec("single-choose", "none", &["none"]),
            rec("single-query", "lead i", &["lead I"]),
        ];
        let r = aggregate("x", &all).unwrap();
        assert_eq!(r.avg.em_acc, 1.0);
        assert_eq!(r.avg.bleu1, 1.0);
        assert!(matches!(aggregate("x", &all[..2]), Err(Error::IncompleteEval(_))));
        let table = r.to_table();
        assert!(table.contains("BERTScore") && table.contains("n/a"));
        assert_eq!(MetricReport::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn average_is_unweighted() {
        let mut recs = Vec::new();
        for i in 0..10 {
            recs.push(rec("single-verify", if i < 9 { "yes" } else { "no" }, &["yes"]));
        }
        for i in 0..5 {
            recs.push(rec("single-choose", if i < 3 { "a" } else { "b" }, &["a"]));
        }
        for i in 0..10 {
            recs.push(rec("single-query", if i < 3 { "a" } else { "b" }, &["a"]));
        }
        let r = aggregate("x", &recs).unwrap();
        assert!(close(r.avg.em_acc, 0.6));
        assert_eq!(r.counts["single-choose"], 5);
    }
}
