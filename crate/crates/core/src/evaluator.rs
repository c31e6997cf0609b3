//! Flattened label-set scoring: Micro/Macro-F1, frequency-binned long-tail
//! tables, invalid-path rates and data-efficiency summaries.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::corpus::Example;
use crate::taxonomy::{Diagnostics, LabelSet, NodeIdx, Taxonomy};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no prediction records to score")]
    EmptyRecords,
    #[error("data proportion must lie in (0, 1], got {0}")]
    InvalidProportion(f64),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    pub gold: LabelSet,
    pub predicted: LabelSet,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-class confusion counts over every class seen in gold or predictions.
pub fn class_counts(records: &[PredictionRecord]) -> BTreeMap<NodeIdx, Counts> {
    let mut out: BTreeMap<NodeIdx, Counts> = BTreeMap::new();
    for r in records {
        for c in r.gold.union(&r.predicted) {
            let e = out.entry(*c).or_default();
            match (r.gold.contains(c), r.predicted.contains(c)) {
                (true, true) => e.tp += 1,
                (false, true) => e.fp += 1,
                (true, false) => e.fn_ += 1,
                (false, false) => unreachable!(),
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scores {
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    /// Mean per-class F1 over classes present in gold.
    pub macro_f1: f64,
}

pub fn micro_macro_f1(records: &[PredictionRecord]) -> Result<Scores> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let per = class_counts(records);
    let mut total = Counts::default();
    per.values().for_each(|c| total.add(c));
    let gold_classes: Vec<&Counts> = per.values().filter(|c| c.tp + c.fn_ > 0).collect();
    let macro_f1 = if gold_classes.is_empty() {
        0.0
    } else {
        gold_classes.iter().map(|c| c.f1()).sum::<f64>() / gold_classes.len() as f64
    };
    Ok(Scores {
        micro_precision: total.precision(),
        micro_recall: total.recall(),
        micro_f1: total.f1(),
        macro_f1,
    })
}

pub const LONG_TAIL_BINS: usize = 5;

/// Test-set frequency of every gold class.
pub fn gold_frequencies(records: &[PredictionRecord]) -> BTreeMap<NodeIdx, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        for c in &r.gold {
            *out.entry(*c).or_insert(0) += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinScores {
    /// 1..=5; frequencies above 5 fall in bin 5.
    pub bin: usize,
    pub classes: usize,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

/// Scores per frequency bin. Classes absent from `frequency` are not binned.
pub fn long_tail_report(records: &[PredictionRecord], frequency: &BTreeMap<NodeIdx, usize>) -> Vec<BinScores> {
    let per = class_counts(records);
    let mut bins: Vec<Vec<Counts>> = vec![Vec::new(); LONG_TAIL_BINS];
    for (c, &f) in frequency {
        if f == 0 {
            continue;
        }
        bins[f.min(LONG_TAIL_BINS) - 1].push(per.get(c).copied().unwrap_or_default());
    }
    bins.into_iter()
        .enumerate()
        .map(|(i, cs)| {
            let mut total = Counts::default();
            cs.iter().for_each(|c| total.add(c));
            let macro_f1 = if cs.is_empty() { 0.0 } else { cs.iter().map(Counts::f1).sum::<f64>() / cs.len() as f64 };
            BinScores { bin: i + 1, classes: cs.len(), micro_f1: total.f1(), macro_f1 }
        })
        .collect()
}

/// Fraction of records whose generation needed any repair.
pub fn invalid_path_rate(records: &[PredictionRecord]) -> f64 {
    ratio(records.iter().filter(|r| !r.diagnostics.is_clean()).count(), records.len())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRow {
    pub id: String,
    pub support: usize,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub examples: usize,
    #[serde(flatten)]
    pub scores: Scores,
    pub invalid_path_rate: f64,
    pub per_class: Vec<ClassRow>,
    pub long_tail: Vec<BinScores>,
}

pub fn score_report(taxonomy: &Taxonomy, records: &[PredictionRecord]) -> Result<ScoreReport> {
    let scores = micro_macro_f1(records)?;
    let per = class_counts(records);
    let per_class = per
        .iter()
        .filter(|(_, c)| c.tp + c.fn_ > 0)
        .map(|(n, c)| ClassRow { id: taxonomy.node(*n).id.clone(), support: c.tp + c.fn_, f1: c.f1() })
        .collect();
    Ok(ScoreReport {
        examples: records.len(),
        scores,
        invalid_path_rate: invalid_path_rate(records),
        per_class,
        long_tail: long_tail_report(records, &gold_frequencies(records)),
    })
}

impl ScoreReport {
    pub fn to_table(&self, dataset: &str) -> String {
        let mut s = String::new();
        let w = dataset.len().max(7);
        let _ = writeln!(s, "{:<w$}  {:>8}  {:>8}  {:>8}", "Dataset", "Micro-F1", "Macro-F1", "Invalid");
        let _ = writeln!(
            s,
            "{:<w$}  {:>8.2}  {:>8.2}  {:>8.4}",
            dataset,
            100.0 * self.scores.micro_f1,
            100.0 * self.scores.macro_f1,
            self.invalid_path_rate
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:>3}  {:>7}  {:>8}  {:>8}", "Bin", "Classes", "Micro-F1", "Macro-F1");
        for b in &self.long_tail {
            let _ = writeln!(s, "{:>3}  {:>7}  {:>8.2}  {:>8.2}", b.bin, b.classes, 100.0 * b.micro_f1, 100.0 * b.macro_f1);
        }
        s
    }
}

fn unit_bow(doc: &[String]) -> HashMap<&str, f64> {
    let mut v: HashMap<&str, f64> = HashMap::new();
    for w in doc {
        *v.entry(w.as_str()).or_insert(0.0) += 1.0;
    }
    let n = v.values().map(|x| x * x).sum::<f64>().sqrt();
    v.values_mut().for_each(|x| *x /= n);
    v
}

/// Bag-of-words nearest-centroid classifier over whole label sets: each
/// distinct training label set gets the mean of its unit term-frequency
/// vectors, and a test document takes the set with the highest dot product.
/// Ties go to the first set in label order.
pub fn nearest_centroid_predictions(train: &[Example], test: &[Example]) -> Vec<PredictionRecord> {
    let mut sums: BTreeMap<&LabelSet, (HashMap<&str, f64>, usize)> = BTreeMap::new();
    for ex in train {
        let (acc, n) = sums.entry(&ex.labels).or_default();
        for (w, x) in unit_bow(&ex.doc) {
            *acc.entry(w).or_insert(0.0) += x;
        }
        *n += 1;
    }
    let centroids: Vec<(&LabelSet, HashMap<&str, f64>)> = sums
        .into_iter()
        .map(|(y, (mut acc, n))| {
            acc.values_mut().for_each(|x| *x /= n as f64);
            (y, acc)
        })
        .collect();
    test.iter()
        .map(|ex| {
            let q = unit_bow(&ex.doc);
            let mut best: Option<(&LabelSet, f64)> = None;
            for (y, c) in &centroids {
                let s: f64 = q.iter().map(|(w, x)| x * c.get(w).copied().unwrap_or(0.0)).sum();
                if best.map_or(true, |(_, b)| s > b) {
                    best = Some((y, s));
                }
            }
            PredictionRecord {
                id: ex.id.clone(),
                gold: ex.labels.clone(),
                predicted: best.map(|(y, _)| y.clone()).unwrap_or_default(),
                diagnostics: Diagnostics::default(),
            }
        })
        .collect()
}

pub const DEFAULT_PROPORTIONS: [f64; 4] = [0.1, 0.3, 0.5, 0.7];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyRow {
    pub proportion: f64,
    pub micro_f1: Vec<f64>,
    pub macro_f1: Vec<f64>,
    pub median_micro_f1: f64,
    pub median_macro_f1: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Runs `run(proportion, seed) -> (micro, macro)` for every pair and reports
/// medians per proportion.
pub fn data_efficiency_curve<E, F>(proportions: &[f64], seeds: &[u64], mut run: F) -> std::result::Result<Vec<EfficiencyRow>, E>
where
    F: FnMut(f64, u64) -> std::result::Result<(f64, f64), E>,
    E: From<EvalError>,
{
    let mut rows = Vec::with_capacity(proportions.len());
    for &p in proportions {
        if !(p > 0.0 && p <= 1.0) {
            return Err(EvalError::InvalidProportion(p).into());
        }
        let (mut mi, mut ma) = (Vec::new(), Vec::new());
        for &s in seeds {
            let (a, b) = run(p, s)?;
            mi.push(a);
            ma.push(b);
        }
        rows.push(EfficiencyRow { proportion: p, median_micro_f1: median(&mi), median_macro_f1: median(&ma), micro_f1: mi, macro_f1: ma });
    }
    Ok(rows)
}

pub fn efficiency_table(rows: &[EfficiencyRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>10}  {:>8}  {:>8}", "Proportion", "Micro-F1", "Macro-F1");
    for r in rows {
        let _ = writeln!(s, "{:>10.2}  {:>8.2}  {:>8.2}", r.proportion, 100.0 * r.median_micro_f1, 100.0 * r.median_macro_f1);
    }
    s
}
