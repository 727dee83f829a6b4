//! Binary classification metrics, ROC/AUC and cross-validation pooling.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores at or above this are called positive.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl ConfusionCounts {
    pub fn new(tp: usize, fn_: usize, tn: usize, fp: usize) -> Self {
        Self { tp, fn_, tn, fp }
    }

    pub fn from_cases(cases: &[ScoredCase], threshold: f64) -> Self {
        let mut c = Self::default();
        for case in cases {
            match (case.label == 1, case.score >= threshold) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fp += 1,
            }
        }
        c
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    pub fn total(&self) -> usize {
        self.positives() + self.negatives()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub pre: f64,
    pub f1: f64,
}

/// Accuracy, sensitivity, specificity, precision and F1. Precision is 0
/// when nothing is called positive, F1 is 0 when precision and sensitivity
/// both are.
pub fn binary_metrics(c: ConfusionCounts) -> Result<BinaryMetrics> {
    if c.positives() == 0 || c.negatives() == 0 {
        return Err(Error::Data(format!(
            "confusion counts {c:?} hold a single class; sensitivity or specificity is undefined"
        )));
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let sen = ratio(c.tp, c.positives());
    let pre = ratio(c.tp, c.tp + c.fp);
    let f1 = if pre + sen == 0.0 { 0.0 } else { 2.0 * pre * sen / (pre + sen) };
    Ok(BinaryMetrics {
        acc: ratio(c.tp + c.tn, c.total()),
        sen,
        spe: ratio(c.tn, c.negatives()),
        pre,
        f1,
    })
}

/// A held-out prediction: the probability of class 1 for a labelled study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCase {
    pub id: String,
    pub label: usize,
    pub score: f64,
}

impl ScoredCase {
    pub fn new(id: impl Into<String>, label: usize, score: f64) -> Result<Self> {
        let id = id.into();
        if label > 1 {
            return Err(Error::Data(format!("case `{id}`: label {label} not in {{0, 1}}")));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Data(format!("case `{id}`: score {score} outside [0, 1]")));
        }
        Ok(Self { id, label, score })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn class_sizes(cases: &[ScoredCase]) -> Result<(usize, usize)> {
    let pos = cases.iter().filter(|c| c.label == 1).count();
    let neg = cases.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data(format!(
            "ROC needs both classes, got {pos} positive and {neg} negative cases"
        )));
    }
    Ok((pos, neg))
}

/// ROC points for thresholds `+inf`, every distinct score in decreasing
/// order, then `-inf`; a case is positive when `score >= threshold`.
pub fn roc_curve(cases: &[ScoredCase]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = class_sizes(cases)?;
    let mut sorted: Vec<&ScoredCase> = cases.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut roc = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].label == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    roc.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });
    Ok(roc)
}

/// Area under a piecewise-linear ROC by the trapezoid rule.
pub fn trapezoid_area(roc: &[RocPoint]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Mann-Whitney AUC, ties counting one half, from mid-ranks.
pub fn auc(cases: &[ScoredCase]) -> Result<f64> {
    let (pos, neg) = class_sizes(cases)?;
    let mut sorted: Vec<&ScoredCase> = cases.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * sorted[i..j].iter().filter(|c| c.label == 1).count() as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

pub fn roc_and_auc(cases: &[ScoredCase]) -> Result<(Vec<RocPoint>, f64)> {
    Ok((roc_curve(cases)?, auc(cases)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: ConfusionCounts,
    pub metrics: BinaryMetrics,
    pub auc: f64,
    pub roc: Vec<RocPoint>,
}

pub fn evaluate(cases: &[ScoredCase], threshold: f64) -> Result<EvalReport> {
    let counts = ConfusionCounts::from_cases(cases, threshold);
    let metrics = binary_metrics(counts)?;
    let (roc, auc) = roc_and_auc(cases)?;
    Ok(EvalReport {
        counts,
        metrics,
        auc,
        roc,
    })
}

/// Pooled report plus what each fold scores on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub pooled: EvalReport,
    /// `None` for a fold whose test cases hold a single class.
    pub folds: Vec<Option<EvalReport>>,
    /// Unweighted mean over the folds that have a report.
    pub macro_mean: Option<(BinaryMetrics, f64)>,
}

pub fn aggregate_cv(per_fold: &[Vec<ScoredCase>], threshold: f64) -> Result<CvReport> {
    let mut seen = BTreeSet::new();
    for (k, fold) in per_fold.iter().enumerate() {
        for c in fold {
            if !seen.insert(c.id.as_str()) {
                return Err(Error::Data(format!("case `{}` appears in more than one fold (again in fold {k})", c.id)));
            }
        }
    }
    let pooled_cases: Vec<ScoredCase> = per_fold.iter().flatten().cloned().collect();
    let pooled = evaluate(&pooled_cases, threshold)?;
    let folds: Vec<Option<EvalReport>> = per_fold.iter().map(|f| evaluate(f, threshold).ok()).collect();

    let present: Vec<&EvalReport> = folds.iter().flatten().collect();
    let macro_mean = (!present.is_empty()).then(|| {
        let n = present.len() as f64;
        let mean = |f: fn(&EvalReport) -> f64| present.iter().map(|r| f(r)).sum::<f64>() / n;
        (
            BinaryMetrics {
                acc: mean(|r| r.metrics.acc),
                sen: mean(|r| r.metrics.sen),
                spe: mean(|r| r.metrics.spe),
                pre: mean(|r| r.metrics.pre),
                f1: mean(|r| r.metrics.f1),
            },
            mean(|r| r.auc),
        )
    });
    Ok(CvReport {
        pooled,
        folds,
        macro_mean,
    })
}

pub const METRICS_CSV_HEADER: &str = "method,n,tp,fn,tn,fp,acc,sen,spe,pre,f1,auc";

pub fn metrics_csv_row(method: &str, r: &EvalReport) -> String {
    let (c, m) = (&r.counts, &r.metrics);
    format!(
        "{method},{},{},{},{},{},{},{},{},{},{},{}",
        c.total(),
        c.tp,
        c.fn_,
        c.tn,
        c.fp,
        m.acc,
        m.sen,
        m.spe,
        m.pre,
        m.f1,
        r.auc
    )
}

/// Header plus one row per `(method, report)`.
pub fn metrics_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a EvalReport)>) -> String {
    let mut s = format!("{METRICS_CSV_HEADER}\n");
    for (method, r) in rows {
        s.push_str(&metrics_csv_row(method, r));
        s.push('\n');
    }
    s
}

/// Rows `pooled`, `fold_<i>` and `macro`. Folds without a report and the
/// macro row leave the count columns empty.
pub fn cv_metrics_csv(r: &CvReport) -> String {
    let mut s = metrics_csv([("pooled", &r.pooled)]);
    for (i, fold) in r.folds.iter().enumerate() {
        match fold {
            Some(f) => s.push_str(&metrics_csv_row(&format!("fold_{i}"), f)),
            None => write!(s, "fold_{i},,,,,,,,,,,").unwrap(),
        }
        s.push('\n');
    }
    if let Some((m, auc)) = &r.macro_mean {
        writeln!(s, "macro,,,,,,{},{},{},{},{},{}", m.acc, m.sen, m.spe, m.pre, m.f1, auc).unwrap();
    }
    s
}

pub fn roc_csv(roc: &[RocPoint]) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in roc {
        writeln!(s, "{},{},{}", p.threshold, p.fpr, p.tpr).unwrap();
    }
    s
}

pub fn scores_csv(cases: &[ScoredCase]) -> String {
    let mut s = String::from("id,label,score\n");
    for c in cases {
        writeln!(s, "{},{},{}", c.id, c.label, c.score).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn cases(pos: &[f64], neg: &[f64]) -> Vec<ScoredCase> {
        let p = pos.iter().enumerate().map(|(i, &s)| ScoredCase::new(format!("p{i}"), 1, s).unwrap());
        let n = neg.iter().enumerate().map(|(i, &s)| ScoredCase::new(format!("n{i}"), 0, s).unwrap());
        p.chain(n).collect()
    }

    fn pairwise(cases: &[ScoredCase]) -> f64 {
        let (mut hits, mut pairs) = (0.0, 0.0);
        for p in cases.iter().filter(|c| c.label == 1) {
            for n in cases.iter().filter(|c| c.label == 0) {
                pairs += 1.0;
                hits += if p.score > n.score {
                    1.0
                } else if p.score == n.score {
                    0.5
                } else {
                    0.0
                };
            }
        }
        hits / pairs
    }

    #[test]
    fn reported_confusion_matrix() {
        let m = binary_metrics(ConfusionCounts::new(22, 2, 21, 3)).unwrap();
        let got = [m.acc, m.sen, m.spe, m.pre, m.f1];
        // 43/48, 22/24, 21/24, 22/25, 44/49
        let want = [43.0 / 48.0, 22.0 / 24.0, 21.0 / 24.0, 22.0 / 25.0, 44.0 / 49.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_counts() {
        let m = binary_metrics(ConfusionCounts::new(24, 0, 24, 0)).unwrap();
        assert_eq!([m.acc, m.sen, m.spe, m.pre, m.f1], [1.0; 5]);
        let m = binary_metrics(ConfusionCounts::new(0, 24, 24, 0)).unwrap();
        assert_eq!((m.pre, m.f1, m.acc), (0.0, 0.0, 0.5));
        assert!(binary_metrics(ConfusionCounts::new(3, 1, 0, 0)).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&cases(&[0.9, 0.8], &[0.2, 0.1])).unwrap(), 1.0);
        assert_eq!(auc(&cases(&[0.3, 0.3], &[0.3, 0.3, 0.3])).unwrap(), 0.5);
        assert_eq!(auc(&cases(&[0.8, 0.4], &[0.6, 0.2])).unwrap(), 0.75);
        assert!(auc(&cases(&[0.1], &[])).is_err());
    }

    #[test]
    fn roc_shape() {
        let roc = roc_curve(&cases(&[0.8, 0.4], &[0.6, 0.2, 0.4])).unwrap();
        let pts: Vec<(f64, f64)> = roc.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(
            pts,
            [(0.0, 0.0), (0.0, 0.5), (1.0 / 3.0, 0.5), (2.0 / 3.0, 1.0), (1.0, 1.0), (1.0, 1.0)]
        );
        assert_eq!(roc[0].threshold, f64::INFINITY);
        assert_eq!(roc.last().unwrap().threshold, f64::NEG_INFINITY);
    }

    fn scored() -> impl Strategy<Value = Vec<ScoredCase>> {
        // coarse grid so ties are common
        prop::collection::vec((0usize..2, 0u32..11), 2..40)
            .prop_filter("both classes", |v| v.iter().any(|x| x.0 == 0) && v.iter().any(|x| x.0 == 1))
            .prop_map(|v| {
                v.into_iter()
                    .enumerate()
                    .map(|(i, (l, s))| ScoredCase::new(format!("c{i}"), l, s as f64 / 10.0).unwrap())
                    .collect()
            })
    }

    proptest! {
        #[test]
        fn auc_equals_pairwise_and_trapezoid(cs in scored()) {
            let (roc, a) = roc_and_auc(&cs).unwrap();
            prop_assert!((a - pairwise(&cs)).abs() < 1e-12);
            prop_assert!((a - trapezoid_area(&roc)).abs() < 1e-12);
            for w in roc.windows(2) {
                prop_assert!(w[1].threshold < w[0].threshold);
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
        }

        #[test]
        fn auc_invariant_under_monotone_map(cs in scored()) {
            let mapped: Vec<ScoredCase> = cs
                .iter()
                .map(|c| ScoredCase { score: c.score.powi(3) * 0.5 + 0.1, ..c.clone() })
                .collect();
            prop_assert!((auc(&cs).unwrap() - auc(&mapped).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn complement_symmetry(cs in scored()) {
            let flipped: Vec<ScoredCase> = cs
                .iter()
                .map(|c| ScoredCase { label: 1 - c.label, score: 1.0 - c.score, ..c.clone() })
                .collect();
            prop_assert!((auc(&cs).unwrap() - auc(&flipped).unwrap()).abs() < 1e-12);
            // strict threshold on the flip side keeps the partition exact
            let a = binary_metrics(ConfusionCounts::from_cases(&cs, 0.55)).unwrap();
            let b = binary_metrics(ConfusionCounts::from_cases(&flipped, 0.46)).unwrap();
            prop_assert_eq!(a.sen, b.spe);
            prop_assert_eq!(a.spe, b.sen);
        }

        #[test]
        fn metrics_bounded(tp in 0usize..50, fn_ in 0usize..50, tn in 0usize..50, fp in 0usize..50) {
            prop_assume!(tp + fn_ > 0 && tn + fp > 0);
            let m = binary_metrics(ConfusionCounts::new(tp, fn_, tn, fp)).unwrap();
            for v in [m.acc, m.sen, m.spe, m.pre, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    fn folds(k: usize, per: usize) -> Vec<Vec<ScoredCase>> {
        (0..k)
            .map(|f| {
                (0..per)
                    .map(|i| {
                        let label = i % 2;
                        let score = ((f * per + i) as f64 * 0.37).fract() * 0.5 + 0.25 * label as f64;
                        ScoredCase::new(format!("f{f}_{i}"), label, score).unwrap()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn pooled_report() {
        let f = folds(6, 8);
        let r = aggregate_cv(&f, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(r.pooled.counts.total(), 48);
        assert_eq!(r.folds.len(), 6);
        assert!(r.folds.iter().all(Option::is_some));
        let flat: Vec<ScoredCase> = f.concat();
        assert_eq!(r.pooled.auc, auc(&flat).unwrap());
        assert_eq!(aggregate_cv(&f, DEFAULT_THRESHOLD).unwrap(), r);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut f = folds(3, 4);
        f[2][0].id = f[0][1].id.clone();
        let err = aggregate_cv(&f, DEFAULT_THRESHOLD).unwrap_err().to_string();
        assert!(err.contains("f0_1"));
    }

    #[test]
    fn single_class_fold_has_no_report() {
        let mut f = folds(2, 4);
        f[1].retain(|c| c.label == 1);
        let r = aggregate_cv(&f, DEFAULT_THRESHOLD).unwrap();
        assert!(r.folds[0].is_some() && r.folds[1].is_none());
        assert_eq!(r.macro_mean.unwrap().1, r.folds[0].as_ref().unwrap().auc);
        let csv = cv_metrics_csv(&r);
        let rows: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(rows, ["method", "pooled", "fold_0", "fold_1", "macro"]);
        assert!(csv.lines().all(|l| l.split(',').count() == 12));
    }

    #[test]
    fn csv_layout() {
        let r = evaluate(&cases(&[0.9, 0.4], &[0.2, 0.6]), DEFAULT_THRESHOLD).unwrap();
        let csv = metrics_csv([("pet_ct", &r)]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(METRICS_CSV_HEADER));
        assert_eq!(lines.next(), Some("pet_ct,4,1,1,1,1,0.5,0.5,0.5,0.5,0.5,0.75"));
        assert!(roc_csv(&r.roc).starts_with("threshold,fpr,tpr\ninf,0,0\n"));
    }
}
