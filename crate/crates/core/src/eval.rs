//! Weighted-F1 scoring, conversation-length buckets, multi-run aggregation
//! and two-sample significance tests.
//!
//! Weighted-F1 is accumulated as an exact rational and rounded to `f64` once,
//! so equal confusion counts always produce bit-identical scores regardless of
//! class iteration order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::Conversation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub support: u64,
}

impl ClassCounts {
    /// `2tp / (2tp + fp + fn)`; zero when the denominator is zero.
    pub fn f1_exact(&self) -> BigRational {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            return BigRational::zero();
        }
        BigRational::new(BigInt::from(2 * self.tp), BigInt::from(denom))
    }

    pub fn f1(&self) -> f64 {
        self.f1_exact().to_f64().unwrap_or(0.0)
    }
}

/// Per-class true/false positive and false negative counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts<L: Ord> {
    classes: BTreeMap<L, ClassCounts>,
    n: u64,
}

impl<L: Ord + Clone> Default for ConfusionCounts<L> {
    fn default() -> Self {
        Self {
            classes: BTreeMap::new(),
            n: 0,
        }
    }
}

impl<L: Ord + Clone> ConfusionCounts<L> {
    pub fn from_pairs(gold: &[L], pred: &[L]) -> Result<Self> {
        if gold.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} gold labels vs {} predictions",
                gold.len(),
                pred.len()
            )));
        }
        let mut c = Self::default();
        for (g, p) in gold.iter().zip(pred) {
            c.record(g, p);
        }
        Ok(c)
    }

    pub fn record(&mut self, gold: &L, pred: &L) {
        self.n += 1;
        self.classes.entry(gold.clone()).or_default().support += 1;
        if gold == pred {
            self.classes.entry(gold.clone()).or_default().tp += 1;
        } else {
            self.classes.entry(gold.clone()).or_default().fn_ += 1;
            self.classes.entry(pred.clone()).or_default().fp += 1;
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.n += other.n;
        for (k, v) in &other.classes {
            let e = self.classes.entry(k.clone()).or_default();
            e.tp += v.tp;
            e.fp += v.fp;
            e.fn_ += v.fn_;
            e.support += v.support;
        }
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn classes(&self) -> &BTreeMap<L, ClassCounts> {
        &self.classes
    }

    /// `sum_c (support_c / N) * F1_c` over classes with non-zero support.
    pub fn weighted_f1_exact(&self) -> BigRational {
        if self.n == 0 {
            return BigRational::zero();
        }
        let n = BigInt::from(self.n);
        self.classes
            .values()
            .filter(|c| c.support > 0)
            .map(|c| c.f1_exact() * BigRational::new(BigInt::from(c.support), n.clone()))
            .fold(BigRational::zero(), |a, b| a + b)
    }

    pub fn weighted_f1(&self) -> f64 {
        self.weighted_f1_exact().to_f64().unwrap_or(0.0)
    }

    /// F1 of each class with non-zero support.
    pub fn per_class_f1(&self) -> BTreeMap<L, f64> {
        self.classes
            .iter()
            .filter(|(_, c)| c.support > 0)
            .map(|(k, c)| (k.clone(), c.f1()))
            .collect()
    }
}

pub fn weighted_f1<L: Ord + Clone>(gold: &[L], pred: &[L]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Empty("no predictions to score"));
    }
    Ok(ConfusionCounts::from_pairs(gold, pred)?.weighted_f1())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketScore {
    /// Smallest and largest conversation length in the bucket.
    pub lo: usize,
    pub hi: usize,
    pub n_conversations: usize,
    pub n_utterances: usize,
    pub weighted_f1: f64,
}

/// Length ranges splitting `lengths` into at most `n_buckets` quantile groups.
/// Equal lengths never straddle a boundary, so fewer buckets may result.
pub fn quantile_ranges(lengths: &[usize], n_buckets: usize) -> Vec<(usize, usize)> {
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    if n == 0 || n_buckets == 0 {
        return Vec::new();
    }
    let mut starts: Vec<usize> = vec![sorted[0]];
    for b in 1..n_buckets {
        let s = sorted[(b * n / n_buckets).min(n - 1)];
        if s > *starts.last().unwrap() {
            starts.push(s);
        }
    }
    starts
        .iter()
        .enumerate()
        .map(|(i, &lo)| {
            let upper = starts.get(i + 1).copied();
            let hi = sorted
                .iter()
                .copied()
                .filter(|&l| l >= lo && upper.is_none_or(|u| l < u))
                .max()
                .unwrap_or(lo);
            (lo, hi)
        })
        .collect()
}

fn gold_labels(conv: &Conversation) -> Result<Vec<String>> {
    conv.utterances
        .iter()
        .map(|u| {
            u.gold_label.clone().ok_or_else(|| Error::Validation {
                conversation_id: conv.conversation_id.clone(),
                message: format!("utterance {} has no gold label", u.index),
            })
        })
        .collect()
}

/// Confusion counts of each length bucket, with its range.
pub fn length_bucket_counts(
    conversations: &[Conversation],
    predictions: &[Vec<String>],
    n_buckets: usize,
) -> Result<Vec<((usize, usize), usize, ConfusionCounts<String>)>> {
    if conversations.len() != predictions.len() {
        return Err(Error::Shape(format!(
            "{} conversations vs {} prediction lists",
            conversations.len(),
            predictions.len()
        )));
    }
    let lengths: Vec<usize> = conversations.iter().map(Conversation::len).collect();
    let ranges = quantile_ranges(&lengths, n_buckets);
    let mut out: Vec<_> = ranges.iter().map(|&r| (r, 0usize, ConfusionCounts::default())).collect();
    for (conv, pred) in conversations.iter().zip(predictions) {
        if pred.len() != conv.len() {
            return Err(Error::Validation {
                conversation_id: conv.conversation_id.clone(),
                message: format!("{} predictions for {} utterances", pred.len(), conv.len()),
            });
        }
        let gold = gold_labels(conv)?;
        let bucket = out
            .iter_mut()
            .find(|((lo, hi), _, _)| (*lo..=*hi).contains(&conv.len()))
            .expect("every length falls in a bucket");
        bucket.1 += 1;
        for (g, p) in gold.iter().zip(pred) {
            bucket.2.record(g, p);
        }
    }
    Ok(out)
}

pub fn length_bucket_f1(
    conversations: &[Conversation],
    predictions: &[Vec<String>],
    n_buckets: usize,
) -> Result<Vec<BucketScore>> {
    Ok(length_bucket_counts(conversations, predictions, n_buckets)?
        .into_iter()
        .map(|((lo, hi), n_conv, counts)| BucketScore {
            lo,
            hi,
            n_conversations: n_conv,
            n_utterances: counts.n() as usize,
            weighted_f1: counts.weighted_f1(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single run.
    pub stddev: f64,
}

pub fn aggregate_runs(scores: &[f64]) -> Result<RunAggregate> {
    if scores.is_empty() {
        return Err(Error::Empty("no runs to aggregate"));
    }
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let stddev = if n > 1 {
        (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(RunAggregate { n, mean, min, max, stddev })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TTestKind {
    /// Unequal variances.
    #[default]
    Welch,
    /// Pooled variance.
    Student,
    /// Paired by position (e.g. by seed).
    Paired,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub kind: TTestKind,
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_value: f64,
}

impl TTest {
    /// `‡` for p < 0.01, `†` for p < 0.05.
    pub fn marker(&self) -> &'static str {
        if self.p_value < 0.01 {
            "‡"
        } else if self.p_value < 0.05 {
            "†"
        } else {
            ""
        }
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sided two-sample t-test. When the standard error is zero, identical
/// means give `t = 0, p = 1` and different means give `p = 0`.
pub fn significance_test(a: &[f64], b: &[f64], kind: TTestKind) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Empty("t-test needs at least two scores per sample"));
    }
    let (t, df, se_zero, diff) = match kind {
        TTestKind::Paired => {
            if a.len() != b.len() {
                return Err(Error::Shape("paired t-test needs equal sample sizes".into()));
            }
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let (md, vd) = mean_var(&d);
            let se = (vd / d.len() as f64).sqrt();
            (md / se, d.len() as f64 - 1.0, se == 0.0, md)
        }
        TTestKind::Student | TTestKind::Welch => {
            let (ma, va) = mean_var(a);
            let (mb, vb) = mean_var(b);
            let (na, nb) = (a.len() as f64, b.len() as f64);
            let (se, df) = if kind == TTestKind::Student {
                let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
                ((pooled * (1.0 / na + 1.0 / nb)).sqrt(), na + nb - 2.0)
            } else {
                let (sa, sb) = (va / na, vb / nb);
                let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
                ((sa + sb).sqrt(), df)
            };
            ((ma - mb) / se, df, se == 0.0, ma - mb)
        }
    };
    if se_zero {
        let (t, p) = if diff == 0.0 {
            (0.0, 1.0)
        } else {
            (diff.signum() * f64::INFINITY, 0.0)
        };
        return Ok(TTest {
            kind,
            t_statistic: t,
            degrees_of_freedom: df,
            p_value: p,
        });
    }
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest {
        kind,
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub seed: u64,
    pub weighted_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline_mean: f64,
    pub test: TTest,
    pub marker: String,
}

/// Scores of one evaluated configuration across runs. `weighted_f1`,
/// `per_class_f1` and `length_buckets` describe the primary run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub primary_seed: u64,
    pub weighted_f1: f64,
    pub per_class_f1: BTreeMap<String, f64>,
    pub n_scored: usize,
    pub length_buckets: Vec<BucketScore>,
    pub runs: Vec<RunScore>,
    pub aggregate: RunAggregate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tvalue\n");
        out.push_str(&format!("split\t{}\n", self.split));
        out.push_str(&format!("n_scored\t{}\n", self.n_scored));
        out.push_str(&format!("weighted_f1\t{:.6}\n", self.weighted_f1));
        for (label, f1) in &self.per_class_f1 {
            out.push_str(&format!("f1[{label}]\t{f1:.6}\n"));
        }
        for r in &self.runs {
            out.push_str(&format!("run[seed={}]\t{:.6}\n", r.seed, r.weighted_f1));
        }
        let a = &self.aggregate;
        out.push_str(&format!(
            "mean\t{:.6}\nmin\t{:.6}\nmax\t{:.6}\nstddev\t{:.6}\n",
            a.mean, a.min, a.max, a.stddev
        ));
        for b in &self.length_buckets {
            out.push_str(&format!("bucket[{}-{}]\t{:.6}\n", b.lo, b.hi, b.weighted_f1));
        }
        if let Some(c) = &self.comparison {
            out.push_str(&format!(
                "t_statistic\t{:.6}\np_value\t{:.6}\nsignificance\t{}\n",
                c.test.t_statistic, c.test.p_value, c.marker
            ));
        }
        out
    }
}

/// Per-bucket min/mean/max of weighted-F1 across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketCurveRow {
    pub bucket: usize,
    pub lo: usize,
    pub hi: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

pub fn bucket_curve(
    conversations: &[Conversation],
    runs: &[Vec<Vec<String>>],
    n_buckets: usize,
) -> Result<Vec<BucketCurveRow>> {
    let per_run = runs
        .iter()
        .map(|preds| length_bucket_f1(conversations, preds, n_buckets))
        .collect::<Result<Vec<_>>>()?;
    let Some(first) = per_run.first() else {
        return Err(Error::Empty("no runs for the length curve"));
    };
    first
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let scores: Vec<f64> = per_run.iter().map(|r| r[i].weighted_f1).collect();
            let agg = aggregate_runs(&scores)?;
            Ok(BucketCurveRow {
                bucket: i,
                lo: b.lo,
                hi: b.hi,
                min: agg.min,
                mean: agg.mean,
                max: agg.max,
            })
        })
        .collect()
}

pub fn write_bucket_curve(path: impl AsRef<Path>, rows: &[BucketCurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
