//! Answer metrics: exact match, BLEU-1, ROUGE-L and the original CIDEr
//! (no length penalty, no count clipping).
//!
//! Every metric normalizes its inputs exactly once with [`normalize_answer`]
//! and tokenizes on whitespace.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::scene::{read_jsonl, SceneError};

const TERMINAL_PUNCT: &[char] = &['.', '?', '!', ',', ';', ':'];
const ROUGE_BETA: f64 = 1.2;
const CIDER_MAX_N: usize = 4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no gold answers")]
    EmptyGold,
    #[error("CIDEr needs at least 2 instances, got {0}")]
    DegenerateCorpus(usize),
    #[error("{predictions} predictions for {references} reference sets")]
    LengthMismatch { predictions: usize, references: usize },
    #[error("answer ids do not match gold ids (missing: {missing:?}, extra: {extra:?})")]
    IdMismatch { missing: Vec<String>, extra: Vec<String> },
    #[error("question id `{0}` appears more than once")]
    DuplicateId(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Lowercase, NFC, single spaces, no leading/trailing whitespace and no
/// trailing `.?!,;:`.
pub fn normalize_answer(text: &str) -> String {
    let mut current = text.to_string();
    // Lowercasing can un-compose a few characters; iterate to a fixed point.
    for _ in 0..4 {
        let lowered: String = current.to_lowercase().nfc().collect();
        let mut s = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
        loop {
            let t = s.trim_end_matches(TERMINAL_PUNCT).trim();
            if t.len() == s.len() {
                break;
            }
            s = t.to_string();
        }
        if s == current {
            break;
        }
        current = s;
    }
    current
}

fn tokens(text: &str) -> Vec<String> {
    normalize_answer(text).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

pub fn em_at_1(prediction: &str, gold: &[String]) -> Result<u8, MetricsError> {
    if gold.is_empty() {
        return Err(MetricsError::EmptyGold);
    }
    let p = normalize_answer(prediction);
    Ok(gold.iter().any(|g| normalize_answer(g) == p) as u8)
}

fn counts<'a>(toks: impl IntoIterator<Item = &'a String>) -> HashMap<&'a str, usize> {
    let mut m = HashMap::new();
    for t in toks {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Clipped unigram precision times the brevity penalty against the
/// closest reference length (shorter wins ties).
pub fn bleu1(prediction: &str, references: &[String]) -> f64 {
    let pred = tokens(prediction);
    if pred.is_empty() || references.is_empty() {
        return 0.0;
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokens(r)).collect();
    let mut max_ref: HashMap<&str, usize> = HashMap::new();
    for r in &refs {
        for (t, c) in counts(r) {
            let e = max_ref.entry(t).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let clipped: usize = counts(&pred)
        .into_iter()
        .map(|(t, c)| c.min(max_ref.get(t).copied().unwrap_or(0)))
        .sum();
    let c = pred.len();
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty");
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * clipped as f64 / c as f64
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS F-measure with beta = 1.2, maximized over references.
pub fn rouge_l(prediction: &str, references: &[String]) -> f64 {
    let pred = tokens(prediction);
    if pred.is_empty() {
        return 0.0;
    }
    references
        .iter()
        .map(|r| {
            let r = tokens(r);
            let l = lcs(&pred, &r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / pred.len() as f64;
            let rec = l as f64 / r.len() as f64;
            let b2 = ROUGE_BETA * ROUGE_BETA;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

type NgramCounts = HashMap<Vec<String>, f64>;

fn ngram_counts(toks: &[String], n: usize) -> NgramCounts {
    let mut m = NgramCounts::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    m
}

fn tfidf(counts: &NgramCounts, df: &HashMap<Vec<String>, f64>, n_docs: f64) -> NgramCounts {
    let total: f64 = counts.values().sum();
    counts
        .iter()
        .map(|(g, c)| {
            let d = df.get(g).copied().unwrap_or(0.0);
            // n-grams absent from every reference set get the maximal IDF
            let idf = (n_docs / d.max(1.0)).ln();
            (g.clone(), c / total * idf)
        })
        .collect()
}

fn cosine(a: &NgramCounts, b: &NgramCounts) -> f64 {
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().map(|(g, v)| v * b.get(g).copied().unwrap_or(0.0)).sum();
    dot / (na * nb)
}

/// Corpus CIDEr: mean over instances of the per-instance score, and the
/// per-instance scores themselves. Scale is ×10.
pub fn cider(predictions: &[String], references: &[Vec<String>]) -> Result<(f64, Vec<f64>), MetricsError> {
    if predictions.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            references: references.len(),
        });
    }
    if predictions.len() < 2 {
        return Err(MetricsError::DegenerateCorpus(predictions.len()));
    }
    let n_docs = predictions.len() as f64;
    let pred_toks: Vec<Vec<String>> = predictions.iter().map(|p| tokens(p)).collect();
    let ref_toks: Vec<Vec<Vec<String>>> =
        references.iter().map(|rs| rs.iter().map(|r| tokens(r)).collect()).collect();

    let mut per_instance = vec![0.0; predictions.len()];
    for n in 1..=CIDER_MAX_N {
        let mut df: HashMap<Vec<String>, f64> = HashMap::new();
        for refs in &ref_toks {
            let mut seen = BTreeSet::new();
            for r in refs {
                seen.extend(ngram_counts(r, n).into_keys());
            }
            for g in seen {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        for (i, refs) in ref_toks.iter().enumerate() {
            if refs.is_empty() {
                continue;
            }
            let pv = tfidf(&ngram_counts(&pred_toks[i], n), &df, n_docs);
            let sum: f64 = refs.iter().map(|r| cosine(&pv, &tfidf(&ngram_counts(r, n), &df, n_docs))).sum();
            per_instance[i] += sum / refs.len() as f64;
        }
    }
    for s in per_instance.iter_mut() {
        *s *= 10.0 / CIDER_MAX_N as f64;
    }
    let mean = per_instance.iter().sum::<f64>() / n_docs;
    Ok((mean, per_instance))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub question_id: String,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_instances: usize,
    pub em_at_1: f64,
    pub bleu1: f64,
    pub rouge_l: f64,
    /// Original CIDEr, ×10 scale.
    pub cider: f64,
    /// `cider` × 100, the usual table presentation.
    pub cider_table: f64,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10}{:>10}", "metric", "value")?;
        writeln!(f, "{:<10}{:>10}", "n", self.n_instances)?;
        writeln!(f, "{:<10}{:>10.2}", "EM@1", 100.0 * self.em_at_1)?;
        writeln!(f, "{:<10}{:>10.2}", "BLEU-1", 100.0 * self.bleu1)?;
        writeln!(f, "{:<10}{:>10.2}", "ROUGE-L", 100.0 * self.rouge_l)?;
        write!(f, "{:<10}{:>10.2}  (raw {:.4})", "CIDEr", self.cider_table, self.cider)
    }
}

/// Scores aligned answers against gold. Ids must match exactly.
pub fn evaluate(answers: &[AnswerRecord], gold: &[GoldRecord]) -> Result<MetricsReport, MetricsError> {
    let mut by_id: BTreeMap<&str, &AnswerRecord> = BTreeMap::new();
    for a in answers {
        if by_id.insert(&a.question_id, a).is_some() {
            return Err(MetricsError::DuplicateId(a.question_id.clone()));
        }
    }
    let mut gold_ids = BTreeSet::new();
    for g in gold {
        if !gold_ids.insert(g.question_id.as_str()) {
            return Err(MetricsError::DuplicateId(g.question_id.clone()));
        }
    }
    let missing: Vec<String> = gold_ids.iter().filter(|id| !by_id.contains_key(*id)).map(|s| s.to_string()).collect();
    let extra: Vec<String> = by_id.keys().filter(|id| !gold_ids.contains(*id)).map(|s| s.to_string()).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(MetricsError::IdMismatch { missing, extra });
    }

    let n = gold.len();
    let (mut em, mut b1, mut rl) = (0usize, 0.0, 0.0);
    let mut preds = Vec::with_capacity(n);
    let mut refs = Vec::with_capacity(n);
    for g in gold {
        let a = &by_id[g.question_id.as_str()].answer;
        em += em_at_1(a, &g.answers)? as usize;
        b1 += bleu1(a, &g.answers);
        rl += rouge_l(a, &g.answers);
        preds.push(a.clone());
        refs.push(g.answers.clone());
    }
    let (c, _) = cider(&preds, &refs)?;
    Ok(MetricsReport {
        n_instances: n,
        em_at_1: em as f64 / n as f64,
        bleu1: b1 / n as f64,
        rouge_l: rl / n as f64,
        cider: c,
        cider_table: 100.0 * c,
    })
}

pub fn evaluate_run(answers: &Path, gold: &Path) -> Result<MetricsReport, MetricsError> {
    let a: Vec<AnswerRecord> = read_jsonl(answers)?;
    let g: Vec<GoldRecord> = read_jsonl(gold)?;
    evaluate(&a, &g)
}
