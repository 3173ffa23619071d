//! Corpus-level BLEU-1..4, ROUGE-L and CIDEr-D over tokenized text.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A hypothesis and its references, already tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(hypothesis: Vec<String>, references: Vec<Vec<String>>) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::InvalidArgument("evaluation pair without references".into()));
        }
        Ok(EvalPair { hypothesis, references })
    }

    /// Splits on single spaces; convenient for tests and already-tokenized text.
    pub fn from_text(hypothesis: &str, references: &[&str]) -> Self {
        let split = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        EvalPair {
            hypothesis: split(hypothesis),
            references: references.iter().map(|r| split(r)).collect(),
        }
    }
}

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU up to order `n` with clipped counts and the brevity penalty.
/// Any zero precision makes the score 0; there is no smoothing.
///
/// The reference length of a pair is the reference length closest to the
/// hypothesis length, the shorter one on ties.
pub fn bleu(corpus: &[EvalPair], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::InvalidArgument(format!("BLEU order {n} outside 1..=4")));
    }
    let mut matched = [0usize; 4];
    let mut possible = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for pair in corpus {
        let c = pair.hypothesis.len();
        hyp_len += c;
        ref_len += pair
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap_or(0);
        for k in 1..=n {
            let hyp = ngrams(&pair.hypothesis, k);
            let mut max_ref: Counts<'_> = HashMap::new();
            for r in &pair.references {
                for (g, cnt) in ngrams(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(cnt);
                }
            }
            for (g, cnt) in &hyp {
                matched[k - 1] += (*cnt).min(max_ref.get(g).copied().unwrap_or(0));
            }
            possible[k - 1] += c.saturating_sub(k - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        if matched[k] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[k] as f64 / possible[k] as f64).ln();
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / n as f64).exp())
}

/// Length of the longest common subsequence.
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

/// LCS F-measure `(1 + β²)·P·R / (R + β²·P)` of one hypothesis against one reference.
pub fn rouge_l_pair(hyp: &[String], reference: &[String]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(hyp, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over pairs of the best ROUGE-L across each pair's references.
pub fn rouge_l(corpus: &[EvalPair]) -> f64 {
    if corpus.is_empty() {
        return 0.0;
    }
    let total: f64 = corpus
        .iter()
        .map(|p| {
            p.references
                .iter()
                .map(|r| rouge_l_pair(&p.hypothesis, r))
                .fold(0.0, f64::max)
        })
        .sum();
    total / corpus.len() as f64
}

pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;

struct TfIdf<'a> {
    vecs: [HashMap<&'a [String], f64>; 4],
    norms: [f64; 4],
    len: usize,
}

fn tfidf<'a>(tokens: &'a [String], df: &HashMap<&'a [String], usize>, log_n: f64) -> TfIdf<'a> {
    let mut vecs: [HashMap<&'a [String], f64>; 4] = Default::default();
    let mut norms = [0.0; 4];
    for n in 1..=4 {
        for (g, tf) in ngrams(tokens, n) {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            let w = tf as f64 * (log_n - d.ln());
            norms[n - 1] += w * w;
            vecs[n - 1].insert(g, w);
        }
        norms[n - 1] = norms[n - 1].sqrt();
    }
    TfIdf {
        vecs,
        norms,
        len: tokens.len(),
    }
}

/// CIDEr-D per pair, averaged over the corpus.
///
/// Document frequencies count the pairs whose references contain an
/// n-gram. Each order's similarity clips hypothesis weights at the
/// reference weight and applies `exp(-(Δlen)² / 2σ²)`; orders are averaged,
/// references are averaged, and the result is scaled by 10.
pub fn cider_d(corpus: &[EvalPair]) -> f64 {
    if corpus.is_empty() {
        return 0.0;
    }
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for pair in corpus {
        let mut seen: HashMap<&[String], ()> = HashMap::new();
        for r in &pair.references {
            for n in 1..=4 {
                for g in ngrams(r, n).into_keys() {
                    seen.insert(g, ());
                }
            }
        }
        for g in seen.into_keys() {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (corpus.len() as f64).ln();
    let mut total = 0.0;
    for pair in corpus {
        let h = tfidf(&pair.hypothesis, &df, log_n);
        let mut score = 0.0;
        for r in &pair.references {
            let r = tfidf(r, &df, log_n);
            let delta = h.len as f64 - r.len as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            let mut sims = 0.0;
            for n in 0..4 {
                let mut dot = 0.0;
                for (g, &hv) in &h.vecs[n] {
                    if let Some(&rv) = r.vecs[n].get(g) {
                        dot += hv.min(rv) * rv;
                    }
                }
                if h.norms[n] != 0.0 && r.norms[n] != 0.0 {
                    sims += dot / (h.norms[n] * r.norms[n]) * penalty;
                }
            }
            score += sims / 4.0;
        }
        total += score / pair.references.len() as f64 * CIDER_SCALE;
    }
    total / corpus.len() as f64
}

/// Scores in the usual table order. METEOR is never computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    /// Always `None`: it needs external synonym resources.
    pub meteor: Option<f64>,
    pub rouge_l: f64,
    pub cider: f64,
}

pub const REPORT_COLUMNS: [&str; 7] = ["BLEU1", "BLEU2", "BLEU3", "BLEU4", "METEOR", "ROUGE-L", "CIDEr"];

impl MetricReport {
    pub fn values(&self) -> [Option<f64>; 7] {
        [
            Some(self.bleu1),
            Some(self.bleu2),
            Some(self.bleu3),
            Some(self.bleu4),
            self.meteor,
            Some(self.rouge_l),
            Some(self.cider),
        ]
    }

    fn cells(&self) -> Vec<String> {
        self.values()
            .iter()
            .map(|v| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}")))
            .collect()
    }
}

pub fn evaluate_corpus(pairs: &[EvalPair]) -> Result<MetricReport> {
    Ok(MetricReport {
        bleu1: bleu(pairs, 1)?,
        bleu2: bleu(pairs, 2)?,
        bleu3: bleu(pairs, 3)?,
        bleu4: bleu(pairs, 4)?,
        meteor: None,
        rouge_l: rouge_l(pairs),
        cider: cider_d(pairs),
    })
}

/// Aligned text table with one row per labelled report.
pub fn format_table(label_header: &str, rows: &[(String, MetricReport)]) -> String {
    let mut cells: Vec<Vec<String>> = vec![std::iter::once(label_header.to_string())
        .chain(REPORT_COLUMNS.iter().map(|c| c.to_string()))
        .collect()];
    for (label, r) in rows {
        cells.push(std::iter::once(label.clone()).chain(r.cells()).collect());
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|j| cells.iter().map(|row| row[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (c, &w))| if j == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
    }
    out
}
