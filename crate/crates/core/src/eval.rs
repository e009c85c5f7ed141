//! Accuracy splits, membership-inference AUC, speedup and report rendering.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Example, SequenceClassifier, PROB_FLOOR};

/// Top-1 accuracy in percent; argmax ties go to the lowest class id.
pub fn accuracy(model: &SequenceClassifier, samples: &[Example<'_>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let mut correct = 0usize;
    for &(tokens, label) in samples {
        if model.predict(tokens)? == label {
            correct += 1;
        }
    }
    Ok(percent(correct, samples.len()))
}

fn percent(k: usize, n: usize) -> f64 {
    100.0 * k as f64 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracySplits {
    /// `100 - accuracy(forget)`.
    pub ua: f64,
    pub ra: f64,
    pub ta: f64,
}

pub fn ua_ra_ta(
    model: &SequenceClassifier,
    forget: &[Example<'_>],
    retain: &[Example<'_>],
    test: &[Example<'_>],
) -> Result<AccuracySplits> {
    Ok(AccuracySplits {
        ua: 100.0 - accuracy(model, forget)?,
        ra: accuracy(model, retain)?,
        ta: accuracy(model, test)?,
    })
}

/// Cross-entropy of the true label, the membership-attack statistic.
pub fn sample_losses(model: &SequenceClassifier, samples: &[Example<'_>]) -> Result<Vec<f64>> {
    let cap = -PROB_FLOOR.ln();
    samples
        .iter()
        .map(|&(tokens, label)| {
            let lp = model.log_probs(tokens)?;
            let l = lp
                .get(label)
                .ok_or_else(|| Error::Shape(format!("label {label} outside {} classes", lp.len())))?;
            Ok((-l).min(cap))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(false-positive rate, true-positive rate)` from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    /// Trapezoid area under the curve.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }
}

/// ROC of the threshold attack "member if statistic <= t". The AUC is the
/// Mann-Whitney probability that a member's statistic is below a
/// non-member's, counting ties as one half (midranks).
pub fn roc_auc(members: &[f64], nonmembers: &[f64]) -> Result<RocCurve> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::UndefinedMetric("ROC needs members and non-members".into()));
    }
    if members.iter().chain(nonmembers).any(|x| x.is_nan()) {
        return Err(Error::Numeric("NaN attack statistic".into()));
    }
    let (m, n) = (members.len(), nonmembers.len());
    // (value, is_member), ascending.
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&x| (x, true))
        .chain(nonmembers.iter().map(|&x| (x, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Ranks in descending order of the statistic, so a member with a small
    // statistic gets a large rank.
    let total = all.len();
    let mut member_rank_sum = 0.0;
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j < total && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ascending positions i..j have 1-based descending ranks total-j+1..total-i.
        let midrank = ((total - j + 1) + (total - i)) as f64 / 2.0;
        for &(_, is_member) in &all[i..j] {
            if is_member {
                member_rank_sum += midrank;
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / n as f64, tp as f64 / m as f64));
        i = j;
    }
    let u = member_rank_sum - (m * (m + 1)) as f64 / 2.0;
    let auc = (u / (m as f64 * n as f64)).clamp(0.0, 1.0);
    Ok(RocCurve { points, auc })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaResult {
    pub curve: RocCurve,
    pub auc: f64,
    /// `|auc - 0.5|`.
    pub gap: f64,
    /// Set when either population has fewer than 5 samples.
    pub warning: Option<String>,
}

pub const MIA_MIN_SAMPLES: usize = 5;

/// Loss-threshold membership attack: forget samples are members, test
/// samples are non-members.
pub fn mia_auc(model: &SequenceClassifier, forget: &[Example<'_>], test: &[Example<'_>]) -> Result<MiaResult> {
    let members = sample_losses(model, forget)?;
    let nonmembers = sample_losses(model, test)?;
    let curve = roc_auc(&members, &nonmembers)?;
    let warning = (forget.len() < MIA_MIN_SAMPLES || test.len() < MIA_MIN_SAMPLES).then(|| {
        format!(
            "low power: {} members, {} non-members",
            forget.len(),
            test.len()
        )
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(MiaResult {
        auc: curve.auc,
        gap: (curve.auc - 0.5).abs(),
        curve,
        warning,
    })
}

/// `retrain_seconds / unlearn_seconds`.
pub fn speedup(retrain_seconds: f64, unlearn_seconds: f64) -> Result<f64> {
    if !(retrain_seconds > 0.0 && unlearn_seconds > 0.0) {
        return Err(Error::Input(format!(
            "runtimes must be positive: {retrain_seconds}, {unlearn_seconds}"
        )));
    }
    Ok(retrain_seconds / unlearn_seconds)
}

/// Metrics of one unlearning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub score_kind: String,
    pub strategy: String,
    pub fraction: f64,
    pub seed: u64,
    pub ua: f64,
    pub ra: f64,
    pub ta: f64,
    pub mia_auc: f64,
    pub mia_gap: f64,
    /// Wall-clock speedup over retraining; absent when not measured.
    pub speedup: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl MetricsReport {
    /// Method name as it appears in tables; tracehiding carries its score kind.
    pub fn label(&self) -> String {
        if self.score_kind.is_empty() || self.score_kind == "-" {
            self.method.clone()
        } else {
            format!("{}({})", self.method, self.score_kind)
        }
    }

    fn sort_key(&self, other: &Self) -> Ordering {
        self.strategy
            .cmp(&other.strategy)
            .then(self.fraction.total_cmp(&other.fraction))
            .then(self.label().cmp(&other.label()))
            .then(self.seed.cmp(&other.seed))
            .then(self.ua.total_cmp(&other.ua))
            .then(self.ra.total_cmp(&other.ra))
            .then(self.ta.total_cmp(&other.ta))
            .then(self.mia_auc.total_cmp(&other.mia_auc))
    }
}

/// Mean metrics over the seeds of one (strategy, fraction, method) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub strategy: String,
    pub fraction: f64,
    pub method: String,
    pub runs: usize,
    pub ua: f64,
    pub ra: f64,
    pub ta: f64,
    pub mia_auc: f64,
    pub mia_gap: f64,
    /// Rank by mean UA within its (strategy, fraction) group; 1 is best.
    pub ua_rank: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<AggregateRow>,
    /// Mean UA rank per method over all groups, best first.
    pub mean_ranks: Vec<(String, f64)>,
    pub table: String,
    pub records: String,
}

/// Average ranks of `values` in descending order (1 = largest); ties share
/// the mean of their positions.
pub fn descending_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Aggregates cells over seeds and renders the comparison table. Wall-clock
/// data is left out so the output depends only on the inputs and seeds.
pub fn report(cells: &[MetricsReport]) -> Result<Report> {
    if cells.is_empty() {
        return Err(Error::Input("report needs at least one cell".into()));
    }
    let mut sorted: Vec<&MetricsReport> = cells.iter().collect();
    sorted.sort_by(|a, b| a.sort_key(b));

    let mut rows: Vec<AggregateRow> = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let head = sorted[i];
        let mut j = i;
        while j < sorted.len()
            && sorted[j].strategy == head.strategy
            && sorted[j].fraction == head.fraction
            && sorted[j].label() == head.label()
        {
            j += 1;
        }
        let g = &sorted[i..j];
        rows.push(AggregateRow {
            strategy: head.strategy.clone(),
            fraction: head.fraction,
            method: head.label(),
            runs: g.len(),
            ua: mean(g.iter().map(|c| c.ua)),
            ra: mean(g.iter().map(|c| c.ra)),
            ta: mean(g.iter().map(|c| c.ta)),
            mia_auc: mean(g.iter().map(|c| c.mia_auc)),
            mia_gap: mean(g.iter().map(|c| c.mia_gap)),
            ua_rank: 0.0,
        });
        i = j;
    }

    // Rows are already grouped by (strategy, fraction).
    let mut rank_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut i = 0;
    while i < rows.len() {
        let mut j = i;
        while j < rows.len() && rows[j].strategy == rows[i].strategy && rows[j].fraction == rows[i].fraction {
            j += 1;
        }
        let uas: Vec<f64> = rows[i..j].iter().map(|r| r.ua).collect();
        for (row, rank) in rows[i..j].iter_mut().zip(descending_ranks(&uas)) {
            row.ua_rank = rank;
            let e = rank_sums.entry(row.method.clone()).or_insert((0.0, 0));
            e.0 += rank;
            e.1 += 1;
        }
        i = j;
    }
    let mut mean_ranks: Vec<(String, f64)> = rank_sums
        .into_iter()
        .map(|(m, (s, n))| (m, s / n as f64))
        .collect();
    mean_ranks.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));

    let table = render_table(&rows, &mean_ranks);
    let records = crate::io::to_jsonl(&rows);
    Ok(Report {
        rows,
        mean_ranks,
        table,
        records,
    })
}

fn render_table(rows: &[AggregateRow], mean_ranks: &[(String, f64)]) -> String {
    let header = ["strategy", "fraction", "method", "runs", "UA", "RA", "TA", "MIA AUC", "MIA gap", "UA rank"];
    let body: Vec<[String; 10]> = rows
        .iter()
        .map(|r| {
            [
                r.strategy.clone(),
                format!("{:.2}", r.fraction),
                r.method.clone(),
                r.runs.to_string(),
                format!("{:.2}", r.ua),
                format!("{:.2}", r.ra),
                format!("{:.2}", r.ta),
                format!("{:.4}", r.mia_auc),
                format!("{:.4}", r.mia_gap),
                format!("{:.1}", r.ua_rank),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: &[String], out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(k, (c, &w))| if k < 3 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(&header.map(String::from), &mut out);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&rule, &mut out);
    for row in &body {
        line(row, &mut out);
    }
    out.push('\n');
    out.push_str("mean UA rank\n");
    let w = mean_ranks.iter().map(|(m, _)| m.len()).max().unwrap_or(0);
    for (m, r) in mean_ranks {
        let _ = writeln!(out, "{m:<w$}  {r:.2}");
    }
    out
}

/// Mean speedup per (strategy, fraction, method), kept apart from the
/// deterministic report because it depends on wall-clock measurements.
pub fn render_timing(cells: &[MetricsReport]) -> String {
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for c in cells {
        if let Some(s) = c.speedup {
            groups
                .entry((c.strategy.clone(), format!("{:.2}", c.fraction), c.label()))
                .or_default()
                .push(s);
        }
    }
    let mut out = String::from("strategy  fraction  method  mean_speedup\n");
    for ((s, f, m), v) in groups {
        let _ = writeln!(out, "{s}  {f}  {m}  {:.2}", mean(v.into_iter()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(method: &str, strategy: &str, fraction: f64, seed: u64, ua: f64) -> MetricsReport {
        MetricsReport {
            method: method.into(),
            score_kind: "-".into(),
            strategy: strategy.into(),
            fraction,
            seed,
            ua,
            ra: 90.0,
            ta: 80.0,
            mia_auc: 0.6,
            mia_gap: 0.1,
            speedup: Some(2.0),
            warning: None,
        }
    }

    #[test]
    fn ua_complements_accuracy() {
        let ua: f64 = 100.0 - 10.18;
        assert!((ua - 89.82).abs() < 1e-12);
    }

    #[test]
    fn binary_confusion_agrees_with_top1() {
        // TP=3, TN=2, FP=1, FN=4.
        assert_eq!(percent(3 + 2, 10), 50.0);
    }

    #[test]
    fn perfect_separation_and_symmetry() {
        let c = roc_auc(&[0.1, 0.2, 0.3], &[1.0, 2.0]).unwrap();
        assert_eq!(c.auc, 1.0);
        let c = roc_auc(&[1.0, 2.0], &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(c.auc, 0.0);
        let c = roc_auc(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(c.auc, 0.5);
        assert_eq!(c.points, vec![(0.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn ties_use_midranks() {
        // Pairs: (1 vs 1) tie, (1 vs 3) win, (2 vs 1) loss, (2 vs 3) win -> 2.5 / 4.
        let c = roc_auc(&[1.0, 2.0], &[1.0, 3.0]).unwrap();
        assert_eq!(c.auc, 0.625);
        assert!((c.trapezoid_area() - c.auc).abs() < 1e-15);
    }

    #[test]
    fn speedup_examples() {
        assert_eq!(speedup(10.0, 0.25).unwrap(), 40.0);
        assert_eq!(speedup(3.0, 3.0).unwrap(), 1.0);
        assert!(speedup(0.0, 1.0).is_err());
        assert!(speedup(1.0, -1.0).is_err());
    }

    #[test]
    fn single_cell_table() {
        let r = report(&[cell("finetune", "uniform", 0.1, 1, 50.0)]).unwrap();
        assert_eq!(r.rows.len(), 1);
        // Header, rule, one row.
        assert_eq!(r.table.lines().take_while(|l| !l.is_empty()).count(), 3);
        assert_eq!(r.rows[0].ua_rank, 1.0);
    }

    #[test]
    fn ranks_on_three_method_fixture() {
        let cells = vec![
            cell("a", "uniform", 0.1, 1, 90.0),
            cell("b", "uniform", 0.1, 1, 80.0),
            cell("c", "uniform", 0.1, 1, 70.0),
            cell("a", "uniform", 0.2, 1, 60.0),
            cell("b", "uniform", 0.2, 1, 60.0),
            cell("c", "uniform", 0.2, 1, 95.0),
        ];
        let r = report(&cells).unwrap();
        let ranks: BTreeMap<_, _> = r.mean_ranks.iter().cloned().collect();
        // a: (1 + 2.5) / 2, b: (2 + 2.5) / 2, c: (3 + 1) / 2.
        assert_eq!(ranks["a"], 1.75);
        assert_eq!(ranks["b"], 2.25);
        assert_eq!(ranks["c"], 2.0);
    }

    #[test]
    fn report_is_order_independent() {
        let mut cells = vec![
            cell("a", "uniform", 0.1, 1, 90.0),
            cell("a", "uniform", 0.1, 2, 70.0),
            cell("b", "targeted", 0.1, 1, 80.0),
            cell("b", "uniform", 0.05, 2, 10.0),
        ];
        let r1 = report(&cells).unwrap();
        cells.reverse();
        let r2 = report(&cells).unwrap();
        assert_eq!(r1.table, r2.table);
        assert_eq!(r1.records, r2.records);
        assert_eq!(r1.rows.iter().find(|r| r.method == "a").unwrap().ua, 80.0);
    }

    #[test]
    fn descending_rank_ties() {
        assert_eq!(descending_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![1.5, 4.0, 1.5, 3.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn auc_negation_and_curve(
                m in prop::collection::vec(-5i32..5, 1..30),
                n in prop::collection::vec(-5i32..5, 1..30),
            ) {
                let m: Vec<f64> = m.into_iter().map(f64::from).collect();
                let n: Vec<f64> = n.into_iter().map(f64::from).collect();
                let c = roc_auc(&m, &n).unwrap();
                let neg_m: Vec<f64> = m.iter().map(|x| -x).collect();
                let neg_n: Vec<f64> = n.iter().map(|x| -x).collect();
                let d = roc_auc(&neg_m, &neg_n).unwrap();
                prop_assert!((c.auc + d.auc - 1.0).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&c.auc));
                prop_assert!((c.trapezoid_area() - c.auc).abs() < 1e-12);
                prop_assert_eq!(c.points.first().copied(), Some((0.0, 0.0)));
                prop_assert_eq!(c.points.last().copied(), Some((1.0, 1.0)));
                for w in c.points.windows(2) {
                    prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
                }
                // Brute-force pair count.
                let mut wins = 0.0;
                for a in &m {
                    for b in &n {
                        wins += if a < b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                    }
                }
                prop_assert!((c.auc - wins / (m.len() * n.len()) as f64).abs() < 1e-12);
            }

            #[test]
            fn speedup_antisymmetric(a in 1e-3f64..1e3, b in 1e-3f64..1e3) {
                let s = speedup(a, b).unwrap() * speedup(b, a).unwrap();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
