//! Reference implementations written independently of the library, shared
//! by the property tests and the acceptance suite.
#![allow(dead_code)]

use ecgqa_core::prompting::{QaItem, QuestionType};

/// Exhaustive top-`k` by cosine similarity in `f64`: full sort, highest
/// score first, smaller id first on equal scores.
pub fn sorted_top_k(vectors: &[Vec<f32>], query: &[f32], k: usize) -> Vec<(u64, f64)> {
    let mut scored: Vec<(u64, f64)> = vectors.iter().enumerate().map(|(i, v)| (i as u64, cosine(v, query))).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Checks `hits` (id, score) against the oracle ranking. Positions whose
/// oracle scores are within `tol` of each other may hold either id.
pub fn matches_oracle(hits: &[(u64, f32)], vectors: &[Vec<f32>], query: &[f32], k: usize, tol: f64) -> Result<(), String> {
    let want = sorted_top_k(vectors, query, k);
    if hits.len() != want.len() {
        return Err(format!("{} hits, expected {}", hits.len(), want.len()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (pos, ((id, score), (_, w))) in hits.iter().zip(&want).enumerate() {
        if !seen.insert(*id) {
            return Err(format!("id {id} returned twice"));
        }
        if (*score as f64 - w).abs() > tol {
            return Err(format!("position {pos}: score {score} vs oracle {w}"));
        }
        let true_score = cosine(&vectors[*id as usize], query);
        if (true_score - w).abs() > tol {
            return Err(format!("position {pos}: id {id} scores {true_score}, oracle slot holds {w}"));
        }
    }
    Ok(())
}

/// Area under the ROC curve from the Mann–Whitney U statistic computed
/// with mid-ranks: `(R₊ − n₊(n₊+1)/2) / (n₊·n₋)`.
pub fn rank_sum_auc(scored: &[(f64, bool)]) -> Option<f64> {
    let n_pos = scored.iter().filter(|s| s.1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));
    let mut ranks = vec![0.0; scored.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].0 == scored[order[i]].0 {
            j += 1;
        }
        // Positions i..=j share the mean of ranks i+1..=j+1.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let r_pos: f64 = (0..scored.len()).filter(|&i| scored[i].1).map(|i| ranks[i]).sum();
    let u = r_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Pearson χ² statistic of observed counts against a uniform expectation.
pub fn chi_square_uniform(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let e = total as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

/// Upper 0.001 quantiles of the χ² distribution for 1 to 12 degrees of
/// freedom (standard statistical tables). A statistic below the quantile
/// means p > 0.001.
pub const CHI2_P001: [f64; 12] = [
    10.828, 13.816, 16.266, 18.467, 20.515, 22.458, 24.322, 26.124, 27.877, 29.588, 31.264, 32.909,
];

pub fn chi2_critical_p001(dof: usize) -> f64 {
    CHI2_P001[dof - 1]
}

pub const OPTION_RULES: &str = include_str!("option_rules.tsv");
pub const ATTRIBUTE_LIST: &str = "<attribute list>";

/// One row of the option rules table.
pub struct OptionRule {
    pub qtype: QuestionType,
    pub condition: String,
    pub options: Vec<String>,
}

pub fn option_rules() -> Vec<OptionRule> {
    OPTION_RULES
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            OptionRule {
                qtype: QuestionType::parse(cols[0]).unwrap(),
                condition: cols[1].to_string(),
                options: cols[2].split(", ").map(str::to_string).collect(),
            }
        })
        .collect()
}

/// An item satisfying `rule`'s condition with the given attributes.
pub fn item_for(rule: &OptionRule, attributes: &[&str]) -> QaItem {
    let question = match rule.condition.as_str() {
        "Any" | "Other cases" => "Which abnormality does this ECG show?".to_string(),
        prefix => format!("{prefix} are affected in this ECG?"),
    };
    QaItem {
        ecg_ref: "ecg/0000.ecgr".into(),
        qtype: rule.qtype,
        question,
        attributes: attributes.iter().map(|a| a.to_string()).collect(),
        answers: vec!["none".into()],
    }
}

/// `rule`'s option list with the attribute placeholder expanded.
pub fn expected_options(rule: &OptionRule, attributes: &[&str]) -> Vec<String> {
    let mut out = Vec::new();
    for o in &rule.options {
        if o == ATTRIBUTE_LIST {
            out.extend(attributes.iter().map(|a| a.to_string()));
        } else {
            out.push(o.clone());
        }
    }
    out
}
