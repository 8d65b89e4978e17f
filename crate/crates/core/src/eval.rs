//! Automatic metrics: intent F1, BLEU, ROUGE-L, token F1, perplexity,
//! Fréchet distance and inception score.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq::{SeqExample, SeqParams};
use crate::tensor::Scalar;

/// Floor for zero n-gram precisions before taking logs.
pub const BLEU_EPS: f64 = 1e-9;
pub const DEFAULT_IS_SPLITS: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntentScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub count: usize,
}

/// Binary P/R/F1 on the positive class. Undefined ratios are 0.
pub fn intent_f1(preds: &[bool], golds: &[bool]) -> Result<IntentScores> {
    if preds.len() != golds.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    let tp = preds.iter().zip(golds).filter(|(p, g)| **p && **g).count() as f64;
    let pp = preds.iter().filter(|p| **p).count() as f64;
    let gp = golds.iter().filter(|g| **g).count() as f64;
    let precision = if pp > 0.0 { tp / pp } else { 0.0 };
    let recall = if gp > 0.0 { tp / gp } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(IntentScores {
        precision,
        recall,
        f1,
        count: preds.len(),
    })
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn check_pairs(hyps: &[String], refs: &[String]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::Metric(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    if refs.is_empty() {
        return Err(Error::Metric("no references".into()));
    }
    if let Some(i) = refs.iter().position(|r| r.split_whitespace().next().is_none()) {
        return Err(Error::Metric(format!("reference {i} is empty")));
    }
    Ok(())
}

fn ngram_counts<'b>(toks: &'b [&'b str], n: usize) -> HashMap<&'b [&'b str], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU up to order `n` with brevity penalty; zero precisions are
/// floored at [`BLEU_EPS`]. Orders with no hypothesis n-grams at all are
/// left out of the mean.
pub fn bleu(hyps: &[String], refs: &[String], n: usize) -> Result<f64> {
    check_pairs(hyps, refs)?;
    if n == 0 {
        return Err(Error::Metric("BLEU order must be at least 1".into()));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let h = words(h);
        let r = words(r);
        hyp_len += h.len();
        ref_len += r.len();
        for k in 1..=n {
            let hc = ngram_counts(&h, k);
            let rc = ngram_counts(&r, k);
            for (g, c) in &hc {
                matched[k - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
            }
            total[k - 1] += h.len().saturating_sub(k - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    // orders longer than every hypothesis have no n-grams to judge
    let orders: Vec<usize> = (0..n).filter(|&k| total[k] > 0).collect();
    let log_mean = orders
        .iter()
        .map(|&k| (matched[k] as f64 / total[k] as f64).max(BLEU_EPS).ln())
        .sum::<f64>()
        / orders.len() as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * log_mean.exp())
}

fn lcs(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn f_measure(overlap: f64, hyp_len: usize, ref_len: usize) -> f64 {
    if overlap == 0.0 || hyp_len == 0 || ref_len == 0 {
        return 0.0;
    }
    let p = overlap / hyp_len as f64;
    let r = overlap / ref_len as f64;
    2.0 * p * r / (p + r)
}

/// Mean per-pair ROUGE-L F1.
pub fn rouge_l(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_pairs(hyps, refs)?;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| {
            let (h, r) = (words(h), words(r));
            f_measure(lcs(&h, &r) as f64, h.len(), r.len())
        })
        .sum();
    Ok(total / hyps.len() as f64)
}

/// Mean per-pair unigram F1 with multiset clipping.
pub fn token_f1(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_pairs(hyps, refs)?;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| {
            let (h, r) = (words(h), words(r));
            let rc = ngram_counts(&r, 1);
            let overlap: usize = ngram_counts(&h, 1)
                .iter()
                .map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0)))
                .sum();
            f_measure(overlap as f64, h.len(), r.len())
        })
        .sum();
    Ok(total / hyps.len() as f64)
}

/// `exp` of the pooled token-mean NLL.
pub fn ppl<T: Scalar>(params: &SeqParams<T>, examples: &[SeqExample]) -> Result<f64> {
    Ok(params.batch_nll(examples)?.exp())
}

fn mean_cov(x: &[Vec<f64>], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let mut mu = DVector::zeros(d);
    for row in x {
        mu += DVector::from_column_slice(row);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for row in x {
        let c = DVector::from_column_slice(row) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n.max(2) - 1) as f64;
    if n < d + 1 {
        cov += DMatrix::identity(d, d) * 1e-6;
    }
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().map(Vec::len).ok_or_else(|| Error::Metric("empty feature set".into()))?;
    if b.is_empty() {
        return Err(Error::Metric("empty feature set".into()));
    }
    if a.iter().chain(b).any(|r| r.len() != d) {
        return Err(Error::Metric("feature dimensions differ".into()));
    }
    let (mu_a, cov_a) = mean_cov(a, d);
    let (mu_b, cov_b) = mean_cov(b, d);
    let sa = sym_sqrt(&cov_a);
    let inner = &sa * &cov_b * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let tr_sqrt: f64 = eig
        .eigenvalues
        .iter()
        .map(|&v| if v < 1e-10 { 0.0 } else { v.sqrt() })
        .sum();
    let diff = &mu_a - &mu_b;
    Ok(diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt)
}

/// Inception score: mean and population std over `splits` contiguous
/// chunks of `exp(mean KL(p(y|x) || p(y)))`.
pub fn inception_score(probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    if probs.is_empty() || splits == 0 {
        return Err(Error::Metric("inception score needs samples and splits".into()));
    }
    for (i, p) in probs.iter().enumerate() {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 || p.iter().any(|&x| !(0.0..=1.0 + 1e-9).contains(&x)) {
            return Err(Error::Metric(format!("distribution {i} is not normalized (sum {s})")));
        }
    }
    let n = probs.len();
    let splits = splits.min(n);
    let c = probs[0].len();
    let scores: Vec<f64> = (0..splits)
        .map(|k| {
            let part = &probs[k * n / splits..(k + 1) * n / splits];
            let mut marginal = vec![0.0; c];
            for p in part {
                for (m, x) in marginal.iter_mut().zip(p) {
                    *m += x / part.len() as f64;
                }
            }
            let kl: f64 = part
                .iter()
                .map(|p| {
                    p.iter()
                        .zip(&marginal)
                        .filter(|(x, _)| **x > 0.0)
                        .map(|(x, m)| x * (x / m).ln())
                        .sum::<f64>()
                })
                .sum::<f64>()
                / part.len() as f64;
            kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub ppl: Option<f64>,
    pub bleu1: f64,
    pub bleu2: f64,
    pub rouge_l: f64,
    pub token_f1: f64,
    pub count: usize,
}

impl TextScores {
    /// Overlap metrics for `hyps` against `refs`; `ppl` is filled separately.
    pub fn compute(hyps: &[String], refs: &[String]) -> Result<Self> {
        Ok(Self {
            ppl: None,
            bleu1: bleu(hyps, refs, 1)?,
            bleu2: bleu(hyps, refs, 2)?,
            rouge_l: rouge_l(hyps, refs)?,
            token_f1: token_f1(hyps, refs)?,
            count: hyps.len(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub fid: Option<f64>,
    pub is_mean: Option<f64>,
    pub is_std: Option<f64>,
    /// Share of generated images whose predicted class matches the class
    /// named by their description.
    pub class_match: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub intent: IntentScores,
    pub description: TextScores,
    pub response: TextScores,
    pub image: ImageScores,
    /// Which stand-in models produced features and class probabilities.
    pub backends: BTreeMap<String, String>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    /// Plain-text table grouped as intent | description | response | image.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let rows: [(&str, Vec<(&str, String)>); 4] = [
            (
                "Intent Prediction",
                vec![
                    ("F1", cell(Some(self.intent.f1))),
                    ("P", cell(Some(self.intent.precision))),
                    ("R", cell(Some(self.intent.recall))),
                    ("n", self.intent.count.to_string()),
                ],
            ),
            ("Image Description Generation", text_row(&self.description, false)),
            ("Text Response Generation", text_row(&self.response, true)),
            (
                "Image Generation",
                vec![
                    ("FID", cell(self.image.fid)),
                    (
                        "IS",
                        match (self.image.is_mean, self.image.is_std) {
                            (Some(m), Some(sd)) => format!("{m:.3} ± {sd:.3}"),
                            _ => "-".into(),
                        },
                    ),
                    ("class match", cell(self.image.class_match)),
                    ("n", self.image.count.to_string()),
                ],
            ),
        ];
        for (group, cols) in rows {
            let _ = writeln!(s, "{group}");
            for (name, val) in cols {
                let _ = writeln!(s, "  {name:<12} {val}");
            }
        }
        if !self.backends.is_empty() {
            let _ = writeln!(s, "Backends");
            for (k, v) in &self.backends {
                let _ = writeln!(s, "  {k:<12} {v}");
            }
        }
        s
    }
}

fn text_row(t: &TextScores, with_f1: bool) -> Vec<(&'static str, String)> {
    let mut v = vec![
        ("PPL", cell(t.ppl)),
        ("BLEU-1", cell(Some(t.bleu1))),
        ("BLEU-2", cell(Some(t.bleu2))),
        ("ROUGE-L", cell(Some(t.rouge_l))),
    ];
    if with_f1 {
        v.push(("F1", cell(Some(t.token_f1))));
    }
    v.push(("n", t.count.to_string()));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn intent_hand_case() {
        let r = intent_f1(&[true, true, true], &[true, false, true]).unwrap();
        assert_eq!(r.precision, 2.0 / 3.0);
        assert_eq!(r.recall, 1.0);
        assert!((r.f1 - 0.8).abs() < 1e-15);
        let r = intent_f1(&[false, false], &[true, false]).unwrap();
        assert_eq!((r.precision, r.f1), (0.0, 0.0));
        assert!(intent_f1(&[true], &[]).is_err());
    }

    #[test]
    fn bleu_cases() {
        assert_eq!(bleu(&s(&["a b c"]), &s(&["a b d"]), 1).unwrap(), 2.0 / 3.0);
        assert_eq!(bleu(&s(&["a b", "c d e"]), &s(&["a b", "c d e"]), 2).unwrap(), 1.0);
        assert_eq!(bleu(&s(&[""]), &s(&["a"]), 1).unwrap(), 0.0);
        assert!(bleu(&s(&["a"]), &s(&[""]), 1).is_err());
        // a unigram match but no bigram match hits the floor
        let b2 = bleu(&s(&["a x"]), &s(&["a y"]), 2).unwrap();
        assert!((b2 - (0.5f64 * BLEU_EPS).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rouge_and_f1_cases() {
        assert!((rouge_l(&s(&["a b c"]), &s(&["a c"])).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(rouge_l(&s(&["x y"]), &s(&["a b"])).unwrap(), 0.0);
        assert_eq!(rouge_l(&s(&["a b"]), &s(&["a b"])).unwrap(), 1.0);
        assert!((token_f1(&s(&["a a b"]), &s(&["a b b"])).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(token_f1(&s(&["a"]), &s(&["b"])).unwrap(), 0.0);
    }

    #[test]
    fn fid_identities() {
        let a: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos()]).collect();
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
        // unit covariance shifted by a length-2 vector
        let base = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let x: Vec<Vec<f64>> = base.iter().map(|r| vec![r[0] * 1.5f64.sqrt(), r[1] * 1.5f64.sqrt()]).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0] + 2.0, r[1]]).collect();
        assert!((fid(&x, &y).unwrap() - 4.0).abs() < 1e-6);
        assert!(fid(&x, &[vec![1.0]]).is_err());
    }

    #[test]
    fn inception_identities() {
        let uniform = vec![vec![0.25; 4]; 20];
        let (m, _) = inception_score(&uniform, 10).unwrap();
        assert!((m - 1.0).abs() < 1e-12);
        let onehot: Vec<Vec<f64>> = (0..40)
            .map(|i| (0..4).map(|c| f64::from(c == i % 4)).collect())
            .collect();
        let (m, sd) = inception_score(&onehot, 10).unwrap();
        assert!((m - 4.0).abs() < 1e-12 && sd < 1e-12);
        let same = vec![vec![0.0, 1.0, 0.0, 0.0]; 10];
        assert!((inception_score(&same, 2).unwrap().0 - 1.0).abs() < 1e-12);
        assert!(inception_score(&[vec![0.5, 0.6]], 1).is_err());
    }

    #[test]
    fn table_mentions_every_group() {
        let t = MetricsReport::default().to_table();
        for g in ["Intent", "Description", "Response", "Image Generation"] {
            assert!(t.contains(g));
        }
    }
}
