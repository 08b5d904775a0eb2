//! Counting and classification metrics, and the models x datasets
//! cross-evaluation.
//!
//! All aggregates are sequential sums over samples sorted by id, so results
//! are bit-identical regardless of how per-sample work was scheduled.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::Frame;
use crate::dataset::DatasetManifest;
use crate::domain::{ScenarioLabel, NUM_SCENARIOS};
use crate::error::{Error, Result};
use crate::pipeline::{FrameRecord, Pipeline};

fn check_lengths(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::LengthMismatch { left, right });
    }
    if left == 0 {
        return Err(Error::NoSamples);
    }
    Ok(())
}

/// Mean absolute error between ground-truth and predicted counts.
pub fn mae(y: &[u64], y_hat: &[u64]) -> Result<f64> {
    check_lengths(y.len(), y_hat.len())?;
    let sum: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(&a, &b)| a.abs_diff(b) as f64)
        .sum();
    Ok(sum / y.len() as f64)
}

/// Root mean squared error between ground-truth and predicted counts.
pub fn rmse(y: &[u64], y_hat: &[u64]) -> Result<f64> {
    check_lengths(y.len(), y_hat.len())?;
    let sum: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(&a, &b)| {
            let d = a.abs_diff(b) as f64;
            d * d
        })
        .sum();
    Ok((sum / y.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountingMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
}

impl CountingMetrics {
    pub fn compute(y: &[u64], y_hat: &[u64]) -> Result<Self> {
        Ok(CountingMetrics {
            mae: mae(y, y_hat)?,
            rmse: rmse(y, y_hat)?,
            n: y.len(),
        })
    }

    /// Metrics over `(id, truth, prediction)` triples, summed in id order.
    pub fn from_triples(triples: &[(String, u64, u64)]) -> Result<Self> {
        let mut sorted: Vec<&(String, u64, u64)> = triples.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let y: Vec<u64> = sorted.iter().map(|t| t.1).collect();
        let p: Vec<u64> = sorted.iter().map(|t| t.2).collect();
        CountingMetrics::compute(&y, &p)
    }
}

/// Pairs predictions with manifest ground truth, in manifest order. Every
/// sample needs a prediction.
pub fn pair_predictions(
    manifest: &DatasetManifest,
    predictions: &BTreeMap<String, u64>,
) -> Result<Vec<(String, u64, u64)>> {
    manifest
        .samples
        .iter()
        .map(|s| {
            predictions
                .get(&s.id)
                .map(|&p| (s.id.clone(), s.count(), p))
                .ok_or_else(|| Error::Contract(format!("no prediction for sample {:?}", s.id)))
        })
        .collect()
}

/// Square confusion matrix, `counts[ground truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidParameter(
                "confusion matrix must be square and non-empty".into(),
            ));
        }
        Ok(ConfusionMatrix { counts: rows })
    }

    /// Tallies scenario label pairs.
    pub fn from_labels(gt: &[ScenarioLabel], pred: &[ScenarioLabel]) -> Result<Self> {
        if gt.len() != pred.len() {
            return Err(Error::LengthMismatch {
                left: gt.len(),
                right: pred.len(),
            });
        }
        let mut m = ConfusionMatrix::zeros(NUM_SCENARIOS);
        for (g, p) in gt.iter().zip(pred) {
            m.add(g.code(), p.code());
        }
        Ok(m)
    }

    pub fn add(&mut self, gt: usize, pred: usize) {
        self.counts[gt][pred] += 1;
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt][pred]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, gt: usize) -> u64 {
        self.counts[gt].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        self.counts.iter().map(|r| r[pred]).sum()
    }

    /// Micro-averaged precision, which equals micro recall and accuracy.
    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total())
    }

    /// CSV for display with prediction on the vertical axis and ground
    /// truth on the horizontal one, i.e. the transpose of the storage.
    pub fn to_display_csv(&self, names: &[&str]) -> String {
        let mut out = String::from("prediction \\ ground truth");
        for n in names {
            let _ = write!(out, ",{n}");
        }
        out.push('\n');
        for p in 0..self.classes() {
            out.push_str(names[p]);
            for g in 0..self.classes() {
                let _ = write!(out, ",{}", self.counts[g][p]);
            }
            out.push('\n');
        }
        out
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Per-class one-vs-rest scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub classes: Vec<ClassScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassMetrics {
    /// Builds metrics from published per-class columns. F1 is taken as
    /// given, not recomputed.
    pub fn from_columns(
        precision: &[f64],
        recall: &[f64],
        f1: &[f64],
        support: &[u64],
    ) -> Result<Self> {
        let k = precision.len();
        if recall.len() != k || f1.len() != k || support.len() != k {
            return Err(Error::InvalidParameter(
                "metric columns differ in length".into(),
            ));
        }
        Ok(ClassMetrics {
            classes: (0..k)
                .map(|i| ClassScore {
                    precision: precision[i],
                    recall: recall[i],
                    f1: f1[i],
                    support: support[i],
                })
                .collect(),
        })
    }

    pub fn total_support(&self) -> u64 {
        self.classes.iter().map(|c| c.support).sum()
    }
}

/// One-vs-rest precision, recall and F1 per class. Zero denominators give 0.
pub fn one_vs_rest(cm: &ConfusionMatrix) -> Result<ClassMetrics> {
    if cm.total() == 0 {
        return Err(Error::NoSamples);
    }
    let classes = (0..cm.classes())
        .map(|c| {
            let tp = cm.get(c, c);
            let fp = cm.col_sum(c) - tp;
            let fn_ = cm.row_sum(c) - tp;
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            ClassScore {
                precision,
                recall,
                f1: f1(precision, recall),
                support: cm.row_sum(c),
            }
        })
        .collect();
    Ok(ClassMetrics { classes })
}

/// Unweighted arithmetic mean over classes.
pub fn macro_average(m: &ClassMetrics) -> Averages {
    let k = m.classes.len().max(1) as f64;
    Averages {
        precision: m.classes.iter().map(|c| c.precision).sum::<f64>() / k,
        recall: m.classes.iter().map(|c| c.recall).sum::<f64>() / k,
        f1: m.classes.iter().map(|c| c.f1).sum::<f64>() / k,
    }
}

/// Support-weighted mean over classes.
pub fn weighted_average(m: &ClassMetrics) -> Averages {
    let total = m.total_support() as f64;
    if total == 0.0 {
        return Averages {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
    }
    let w = |f: fn(&ClassScore) -> f64| {
        m.classes
            .iter()
            .map(|c| f(c) * c.support as f64)
            .sum::<f64>()
            / total
    };
    Averages {
        precision: w(|c| c.precision),
        recall: w(|c| c.recall),
        f1: w(|c| c.f1),
    }
}

/// Per-class table with macro and support-weighted rows, two decimals.
pub fn format_classification_report(names: &[&str], m: &ClassMetrics) -> String {
    let width = names
        .iter()
        .map(|n| n.len())
        .chain(["Weighted Avg.".len()])
        .max()
        .unwrap_or(0);
    let mut out = format!("{:<width$} | Prec. | Rec. | F1   | Support\n", "Class");
    let row = |out: &mut String, name: &str, p: f64, r: f64, f: f64, s: u64| {
        let _ = writeln!(
            out,
            "{name:<width$} | {p:>5.2} | {r:>4.2} | {f:>4.2} | {s:>7}"
        );
    };
    for (n, c) in names.iter().zip(&m.classes) {
        row(&mut out, n, c.precision, c.recall, c.f1, c.support);
    }
    let total = m.total_support();
    let a = macro_average(m);
    row(&mut out, "Macro Avg.", a.precision, a.recall, a.f1, total);
    let w = weighted_average(m);
    row(
        &mut out,
        "Weighted Avg.",
        w.precision,
        w.recall,
        w.f1,
        total,
    );
    out
}

/// One validation set for cross-evaluation: frames carrying ground truth.
#[derive(Debug, Clone)]
pub struct EvalDataset {
    pub name: String,
    pub frames: Vec<Frame>,
}

pub const AUTOMATIC_ROW: &str = "Automatic";
pub const INTEGRATED_COLUMN: &str = "Integrated";

/// Rows are the fixed models then `Automatic`; columns the datasets then
/// `Integrated`, which pools every sample rather than averaging cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEvalReport {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    /// `cells[row][column]`
    pub cells: Vec<Vec<CountingMetrics>>,
}

impl CrossEvalReport {
    pub fn cell(&self, row: &str, column: &str) -> Option<&CountingMetrics> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.columns.iter().position(|x| x == column)?;
        Some(&self.cells[r][c])
    }

    pub fn integrated(&self, row: &str) -> Option<&CountingMetrics> {
        self.cell(row, INTEGRATED_COLUMN)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for c in &self.columns {
            let _ = write!(out, ",{c} MAE,{c} RMSE");
        }
        out.push('\n');
        for (r, cells) in self.rows.iter().zip(&self.cells) {
            out.push_str(r);
            for m in cells {
                let _ = write!(out, ",{},{}", m.mae, m.rmse);
            }
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Model |");
        for c in &self.columns {
            let _ = write!(out, " {c} MAE | {c} RMSE |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(2 * self.columns.len()));
        out.push('\n');
        for (r, cells) in self.rows.iter().zip(&self.cells) {
            let _ = write!(out, "| {r} |");
            for m in cells {
                let _ = write!(
                    out,
                    " {} | {} |",
                    display_metric(m.mae),
                    display_metric(m.rmse)
                );
            }
            out.push('\n');
        }
        out
    }
}

/// Two decimals below 100, one decimal from 100 up.
pub fn display_metric(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

fn truth_of(frame: &Frame) -> Result<u64> {
    frame
        .truth
        .as_ref()
        .map(|s| s.count())
        .ok_or_else(|| Error::MissingTruth(frame.id.clone()))
}

fn record_count(rec: FrameRecord) -> Result<u64> {
    rec.into_result()
        .map(|r| r.count)
        .map_err(|e| Error::Inference {
            backend: e.model_id.unwrap_or_else(|| "classifier".into()),
            message: format!("frame {:?} failed at {:?}: {}", e.id, e.stage, e.message),
        })
}

/// Fixed-model rows send every sample to one model; the automatic row runs
/// the full classify-then-route pipeline.
pub fn cross_evaluate(pipeline: &Pipeline, datasets: &[EvalDataset]) -> Result<CrossEvalReport> {
    if let Some(d) = datasets.iter().find(|d| d.frames.is_empty()) {
        return Err(Error::EmptyManifest(d.name.clone()));
    }
    if datasets.is_empty() {
        return Err(Error::NoSamples);
    }
    let mut models: Vec<String> = Vec::new();
    for (_, id) in pipeline.routing().iter() {
        if !models.iter().any(|m| m == id) {
            models.push(id.to_string());
        }
    }
    let truths: Vec<Vec<u64>> = datasets
        .iter()
        .map(|d| d.frames.iter().map(truth_of).collect::<Result<_>>())
        .collect::<Result<_>>()?;

    let predict = |row: Option<&str>, frames: &[Frame]| -> Result<Vec<u64>> {
        frames
            .par_iter()
            .map(|f| match row {
                Some(m) => pipeline.count_with(m, f).map(|o| o.count),
                None => record_count(pipeline.process_frame(f)),
            })
            .collect()
    };

    let mut rows = models.clone();
    rows.push(AUTOMATIC_ROW.into());
    let mut cells = Vec::with_capacity(rows.len());
    for (ri, row) in rows.iter().enumerate() {
        let model = (ri < models.len()).then_some(row.as_str());
        let mut pooled = Vec::new();
        let mut line = Vec::with_capacity(datasets.len() + 1);
        for (d, truth) in datasets.iter().zip(&truths) {
            let preds = predict(model, &d.frames)?;
            let triples: Vec<(String, u64, u64)> = d
                .frames
                .iter()
                .zip(truth.iter().zip(&preds))
                .map(|(f, (&y, &p))| (format!("{}/{}", d.name, f.id), y, p))
                .collect();
            line.push(CountingMetrics::from_triples(&triples)?);
            pooled.extend(triples);
        }
        line.push(CountingMetrics::from_triples(&pooled)?);
        cells.push(line);
    }
    let mut columns: Vec<String> = datasets.iter().map(|d| d.name.clone()).collect();
    columns.push(INTEGRATED_COLUMN.into());
    Ok(CrossEvalReport {
        rows,
        columns,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_metrics_by_hand() {
        assert_eq!(mae(&[3, 5], &[4, 7]).unwrap(), 1.5);
        assert_eq!(rmse(&[3, 5], &[4, 7]).unwrap(), 2.5f64.sqrt());
        assert_eq!(mae(&[10], &[0]).unwrap(), 10.0);
        assert_eq!(mae(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(rmse(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        let k = CountingMetrics::compute(&[1, 5, 9], &[4, 8, 12]).unwrap();
        assert_eq!((k.mae, k.rmse), (3.0, 3.0));
    }

    #[test]
    fn metric_errors() {
        assert!(matches!(
            mae(&[1], &[1, 2]),
            Err(Error::LengthMismatch { left: 1, right: 2 })
        ));
        assert!(matches!(rmse(&[], &[]), Err(Error::NoSamples)));
    }

    #[test]
    fn confusion_by_hand() {
        use ScenarioLabel::*;
        let m = ConfusionMatrix::from_labels(
            &[SideView, SideView, LongShot],
            &[SideView, LongShot, LongShot],
        )
        .unwrap();
        assert_eq!(m.get(0, 0), 1);
        assert_eq!(m.get(0, 1), 1);
        assert_eq!(m.get(1, 1), 1);
        assert_eq!(m.total(), 3);
        assert!(ConfusionMatrix::from_labels(&[SideView], &[]).is_err());
    }

    #[test]
    fn three_class_one_vs_rest() {
        let m =
            ConfusionMatrix::from_rows(vec![vec![5, 1, 0], vec![2, 6, 0], vec![0, 0, 4]]).unwrap();
        let s = one_vs_rest(&m).unwrap();
        assert_eq!(s.classes[0].precision, 5.0 / 7.0);
        assert_eq!(s.classes[0].recall, 5.0 / 6.0);
        assert_eq!(s.classes[2].precision, 1.0);
        assert_eq!(s.total_support(), 18);
    }

    #[test]
    fn diagonal_is_perfect() {
        let m = ConfusionMatrix::from_rows(vec![vec![3, 0], vec![0, 9]]).unwrap();
        let s = one_vs_rest(&m).unwrap();
        assert!(s
            .classes
            .iter()
            .all(|c| c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0));
        assert_eq!(m.accuracy(), 1.0);
    }

    #[test]
    fn absent_class_scores_zero() {
        let m = ConfusionMatrix::from_rows(vec![vec![3, 0], vec![0, 0]]).unwrap();
        let s = one_vs_rest(&m).unwrap();
        assert_eq!(
            s.classes[1],
            ClassScore {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
                support: 0
            }
        );
        assert!(one_vs_rest(&ConfusionMatrix::zeros(2)).is_err());
    }

    #[test]
    fn macro_examples() {
        let m = ClassMetrics::from_columns(&[1.0, 0.0], &[0.5, 0.5], &[0.5, 0.5], &[1, 3]).unwrap();
        assert_eq!(macro_average(&m).precision, 0.5);
        assert_eq!(weighted_average(&m).precision, 0.25);
    }

    /// Published per-class columns of the scenario classifier.
    fn classifier_columns() -> ClassMetrics {
        ClassMetrics::from_columns(
            &[0.70, 0.87, 0.93, 0.73, 0.87],
            &[0.75, 0.82, 0.98, 0.70, 0.86],
            &[0.72, 0.85, 0.95, 0.71, 0.87],
            &[1130, 1061, 926, 1181, 967],
        )
        .unwrap()
    }

    #[test]
    fn published_column_averages() {
        let m = classifier_columns();
        assert_eq!(m.total_support(), 5265);
        let a = macro_average(&m);
        assert_eq!(format!("{:.2}", a.precision), "0.82");
        let w = weighted_average(&m);
        assert!((w.precision - 0.81).abs() <= 0.005, "{}", w.precision);
        assert!((w.precision - 0.8127).abs() < 1e-4);
    }

    #[test]
    fn report_layout() {
        let names: Vec<&str> = ScenarioLabel::ALL.iter().map(|l| l.title()).collect();
        let r = format_classification_report(&names, &classifier_columns());
        let lines: Vec<&str> = r.lines().collect();
        assert_eq!(lines.len(), 8);
        assert!(
            lines[3].starts_with("Top-View") && lines[3].contains("0.93 | 0.98 | 0.95 |     926"),
            "{r}"
        );
        assert!(
            lines[6].starts_with("Macro Avg.") && lines[6].contains(" 0.82 |"),
            "{r}"
        );
        assert!(lines[6].ends_with("5265"));
    }

    #[test]
    fn display_transposes() {
        let m = ConfusionMatrix::from_rows(vec![vec![1, 2], vec![3, 4]]).unwrap();
        let csv = m.to_display_csv(&["a", "b"]);
        assert_eq!(csv, "prediction \\ ground truth,a,b\na,1,3\nb,2,4\n");
    }

    #[test]
    fn metric_display_precision() {
        assert_eq!(display_metric(1.234), "1.23");
        assert_eq!(display_metric(96.44), "96.44");
        assert_eq!(display_metric(108.64), "108.6");
    }

    #[test]
    fn triples_are_order_independent() {
        let a = vec![
            ("b".to_string(), 3, 4),
            ("a".to_string(), 10, 1),
            ("c".to_string(), 0, 0),
        ];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(
            CountingMetrics::from_triples(&a).unwrap(),
            CountingMetrics::from_triples(&b).unwrap()
        );
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn pairs() -> impl Strategy<Value = (Vec<u64>, Vec<u64>)> {
        (1usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec(0u64..5000, n),
                prop::collection::vec(0u64..5000, n),
            )
        })
    }

    proptest! {
        #[test]
        fn mae_le_rmse((y, p) in pairs()) {
            prop_assert!(mae(&y, &p).unwrap() <= rmse(&y, &p).unwrap() * (1.0 + 1e-12));
        }

        #[test]
        fn metrics_are_symmetric((y, p) in pairs()) {
            prop_assert_eq!(mae(&y, &p).unwrap(), mae(&p, &y).unwrap());
            prop_assert_eq!(rmse(&y, &p).unwrap(), rmse(&p, &y).unwrap());
        }

        #[test]
        fn pooled_mae_is_support_weighted((y, p) in pairs(), cut in 0usize..60) {
            let cut = cut.min(y.len() - 1).max(1).min(y.len());
            prop_assume!(cut < y.len());
            let whole = mae(&y, &p).unwrap();
            let a = mae(&y[..cut], &p[..cut]).unwrap();
            let b = mae(&y[cut..], &p[cut..]).unwrap();
            let weighted = (a * cut as f64 + b * (y.len() - cut) as f64) / y.len() as f64;
            prop_assert!((whole - weighted).abs() <= 1e-9 * whole.max(1.0));
        }

        #[test]
        fn micro_precision_is_accuracy(rows in prop::collection::vec(prop::collection::vec(0u64..50, 5), 5)) {
            let m = ConfusionMatrix::from_rows(rows).unwrap();
            prop_assume!(m.total() > 0);
            let s = one_vs_rest(&m).unwrap();
            let tp: u64 = (0..5).map(|c| m.get(c, c)).sum();
            let fp: u64 = (0..5).map(|c| m.col_sum(c) - m.get(c, c)).sum();
            let micro_p = tp as f64 / (tp + fp) as f64;
            prop_assert_eq!(micro_p, m.accuracy());
            prop_assert_eq!(s.total_support(), m.total());
        }
    }
}
