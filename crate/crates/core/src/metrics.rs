//! Evaluation metrics: span exact match, ROUGE-1/2/L F1, consistent
//! satisfaction level, and Pearson / Spearman correlation.
//!
//! Text is normalized the extractive-QA way before any comparison: lowercase,
//! punctuation removed, whitespace collapsed. No article stripping, no stemming.
//! Every metric with several references takes the best reference.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One prediction to score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub prediction: String,
    pub references: Vec<String>,
    /// Per-level satisfaction flags, easiest level first.
    #[serde(default, rename = "levels", skip_serializing_if = "Option::is_none")]
    pub satisfaction: Option<Vec<bool>>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.references.is_empty() {
            return Err(Error::Input("record has no references".into()));
        }
        if matches!(&self.satisfaction, Some(levels) if levels.is_empty()) {
            return Err(Error::Input("satisfaction list must be non-empty when present".into()));
        }
        Ok(())
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c, '‘' | '’' | '“' | '”' | '–' | '—' | '…' | '«' | '»' | '¿' | '¡' | '·')
}

pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text.to_lowercase().chars().filter(|&c| !is_punctuation(c)).collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// 1 when some normalized reference occurs contiguously in the normalized
/// prediction. An empty reference never matches.
pub fn span_em<S: AsRef<str>>(prediction: &str, references: &[S]) -> u8 {
    let pred = normalize(prediction);
    let hit = references.iter().any(|r| {
        let r = normalize(r.as_ref());
        !r.is_empty() && pred.windows(r.len()).any(|w| w == r.as_slice())
    });
    u8::from(hit)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

fn f1(overlap: usize, pred_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 || pred_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

fn rouge_n_single(pred: &[String], reference: &[String], n: usize) -> f64 {
    let pc = ngram_counts(pred, n);
    let rc = ngram_counts(reference, n);
    let overlap: usize = pc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
    f1(overlap, pred.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

/// ROUGE-N F1 with clipped n-gram counts, `n ∈ {1, 2}`.
pub fn rouge_n_f1<S: AsRef<str>>(prediction: &str, references: &[S], n: usize) -> Result<f64> {
    if !(1..=2).contains(&n) {
        return Err(Error::Input(format!("ROUGE-N supports n in {{1, 2}}, got {n}")));
    }
    let pred = normalize(prediction);
    Ok(references
        .iter()
        .map(|r| rouge_n_single(&pred, &normalize(r.as_ref()), n))
        .fold(0.0, f64::max))
}

/// Length of the longest common subsequence, by dynamic programming.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
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

/// ROUGE-L F1 from the LCS of normalized tokens.
pub fn rouge_l_f1<S: AsRef<str>>(prediction: &str, references: &[S]) -> f64 {
    let pred = normalize(prediction);
    references
        .iter()
        .map(|r| {
            let r = normalize(r.as_ref());
            f1(lcs_len(&pred, &r), pred.len(), r.len())
        })
        .fold(0.0, f64::max)
}

/// Number of consecutive satisfied levels starting at level 1.
pub fn csl(satisfaction: &[bool]) -> Result<usize> {
    if satisfaction.is_empty() {
        return Err(Error::Input("CSL needs at least one level".into()));
    }
    Ok(satisfaction.iter().take_while(|&&s| s).count())
}

/// A correlation coefficient, or a note that one series has no variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Correlation {
    Defined(f64),
    Degenerate,
}

/// Serialized form of [`Correlation::Degenerate`].
pub const DEGENERATE: &str = "degenerate: zero variance";

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Defined(r) => Some(r),
            Correlation::Degenerate => None,
        }
    }

    pub fn is_degenerate(self) -> bool {
        matches!(self, Correlation::Degenerate)
    }
}

impl std::fmt::Display for Correlation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Correlation::Defined(r) => write!(f, "{r}"),
            Correlation::Degenerate => f.write_str(DEGENERATE),
        }
    }
}

impl Serialize for Correlation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Correlation::Defined(r) => s.serialize_f64(*r),
            Correlation::Degenerate => s.serialize_str(DEGENERATE),
        }
    }
}

impl<'de> Deserialize<'de> for Correlation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Value(f64),
            Note(String),
        }
        match Repr::deserialize(d)? {
            Repr::Value(r) => Ok(Correlation::Defined(r)),
            Repr::Note(s) if s == DEGENERATE => Ok(Correlation::Degenerate),
            Repr::Note(s) => Err(serde::de::Error::custom(format!("unexpected correlation {s:?}"))),
        }
    }
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(Error::Input(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Input("correlation needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation::Degenerate);
    }
    // sqrt(s·s) == s exactly, so identical rankings give exactly ±1.
    Ok(Correlation::Defined((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

/// Ranks starting at 1; tied values share their mean rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson on average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(Error::Input(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Dataset-level summary written by the batch evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub span_em: f64,
    pub rouge1_f1: f64,
    pub rouge2_f1: f64,
    #[serde(rename = "rougeL_f1")]
    pub rouge_l_f1: f64,
    /// Mean CSL over records that carry satisfaction flags; `None` when none do.
    pub csl_mean: Option<f64>,
    pub n: usize,
}

/// Per-record scores, exposed for alternative aggregations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScores {
    pub span_em: u8,
    pub rouge1_f1: f64,
    pub rouge2_f1: f64,
    #[serde(rename = "rougeL_f1")]
    pub rouge_l_f1: f64,
    pub csl: Option<usize>,
}

pub fn score_record(record: &EvalRecord) -> Result<RecordScores> {
    record.validate()?;
    Ok(RecordScores {
        span_em: span_em(&record.prediction, &record.references),
        rouge1_f1: rouge_n_f1(&record.prediction, &record.references, 1)?,
        rouge2_f1: rouge_n_f1(&record.prediction, &record.references, 2)?,
        rouge_l_f1: rouge_l_f1(&record.prediction, &record.references),
        csl: record.satisfaction.as_deref().map(csl).transpose()?,
    })
}

/// Means over records, accumulated in input order.
pub fn summarize(records: &[EvalRecord]) -> Result<(EvalSummary, Vec<RecordScores>)> {
    let scores: Vec<RecordScores> = records.iter().map(score_record).collect::<Result<_>>()?;
    let n = scores.len();
    let mean = |f: &dyn Fn(&RecordScores) -> f64| {
        if n == 0 {
            0.0
        } else {
            scores.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let csls: Vec<usize> = scores.iter().filter_map(|s| s.csl).collect();
    let summary = EvalSummary {
        span_em: mean(&|s| s.span_em as f64),
        rouge1_f1: mean(&|s| s.rouge1_f1),
        rouge2_f1: mean(&|s| s.rouge2_f1),
        rouge_l_f1: mean(&|s| s.rouge_l_f1),
        csl_mean: (!csls.is_empty()).then(|| csls.iter().sum::<usize>() as f64 / csls.len() as f64),
        n,
    };
    Ok((summary, scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("Vatican City."), vec!["vatican", "city"]);
        assert!(normalize("").is_empty());
        assert_eq!(normalize("  A,  a "), vec!["a", "a"]);
    }

    #[test]
    fn span_em_case_study() {
        let grounded = "Based on the text, Ferraro plays the role of Grace Bowman";
        assert_eq!(span_em(grounded, &["Ferraro"]), 1);
        assert_eq!(span_em("Ferraro", &["Ferraro"]), 1);
        assert_eq!(span_em("Molly Ringwald plays Grace", &["Ferraro"]), 0);
        assert_eq!(span_em("anything", &[""]), 0);
        assert_eq!(span_em("the grace bowman role", &["Molly", "Grace  Bowman!"]), 1);
    }

    #[test]
    fn span_em_requires_token_boundaries() {
        assert_eq!(span_em("Ferraros", &["Ferraro"]), 0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_n_f1("the cat sat", &["the cat sat"], 1).unwrap(), 1.0);
        assert_eq!(rouge_n_f1("the cat sat", &["a dog ran"], 1).unwrap(), 0.0);
        let r1 = rouge_n_f1("the cat sat", &["the cat"], 1).unwrap();
        assert!((r1 - 0.8).abs() < 1e-15);
        // bigrams: pred {the cat, cat sat}, ref {the cat}: P = 1/2, R = 1.
        let r2 = rouge_n_f1("the cat sat", &["the cat"], 2).unwrap();
        assert!((r2 - 2.0 / 3.0).abs() < 1e-15);
        assert!(rouge_n_f1("x", &["x"], 3).is_err());
        assert_eq!(rouge_n_f1("", &[""], 1).unwrap(), 0.0);
    }

    #[test]
    fn rouge_clips_repeated_grams() {
        // pred "the the the", ref "the": overlap clipped to 1, P = 1/3, R = 1, F1 = 1/2.
        assert!((rouge_n_f1("the the the", &["the"], 1).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rouge_l_examples() {
        assert_eq!(rouge_l_f1("a b c", &["a b c"]), 1.0);
        assert!((rouge_l_f1("a b c d", &["a c"]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge_l_f1("", &["a b"]), 0.0);
        assert_eq!(rouge_l_f1("a c", &["x", "a c"]), 1.0);
    }

    #[test]
    fn csl_examples() {
        assert_eq!(csl(&[true, true, false, true, true]).unwrap(), 2);
        assert_eq!(csl(&[false; 5]).unwrap(), 0);
        assert_eq!(csl(&[true; 5]).unwrap(), 5);
        assert!(csl(&[]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0, 4.5];
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &xs).unwrap().value().unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&xs, &neg).unwrap().value().unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&xs, &[1.0, 2.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert_eq!(pearson(&[1.0, 1.0], &[3.0, 4.0]).unwrap(), Correlation::Degenerate);
    }

    #[test]
    fn pearson_matches_exact_fractions() {
        // xs = (1,2,3), ys = (2,4,7): Σdxdy = 5, Σdx² = 2, Σdy² = 114/9, so r² = 225/228.
        let r = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 7.0]).unwrap().value().unwrap();
        assert!((r - (225.0f64 / 228.0).sqrt()).abs() < 1e-15);
        assert!((r - 0.993399).abs() < 1e-6);
    }

    #[test]
    fn spearman_examples() {
        let xs = [0.3, -1.0, 2.0, 7.0, 0.0];
        let mono: Vec<f64> = xs.iter().map(|x: &f64| x.powi(3) + 1.0).collect();
        assert_eq!(spearman(&xs, &mono).unwrap(), Correlation::Defined(1.0));
        let rev: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert_eq!(spearman(&xs, &rev).unwrap(), Correlation::Defined(-1.0));
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
    }

    #[test]
    fn summary_means() {
        let records = vec![
            EvalRecord { prediction: "the cat".into(), references: vec!["the cat".into()], satisfaction: Some(vec![true, false]) },
            EvalRecord { prediction: "dog".into(), references: vec!["cat".into()], satisfaction: None },
        ];
        let (s, per) = summarize(&records).unwrap();
        assert_eq!(s.n, 2);
        assert_eq!(s.span_em, 0.5);
        assert_eq!(s.rouge1_f1, 0.5);
        assert_eq!(s.csl_mean, Some(1.0));
        assert_eq!(per[1].csl, None);
        let bad = EvalRecord { prediction: "x".into(), references: vec![], satisfaction: None };
        assert!(summarize(&[bad]).is_err());
    }
}
