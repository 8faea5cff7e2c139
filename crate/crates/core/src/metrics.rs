//! Threshold metrics, ROC curves and report tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{write_file, Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// A sample is predicted positive when `score >= threshold`.
pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ConfusionCounts> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `None` when there are no positives.
pub fn sensitivity(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fn_)
}

/// `None` when there are no negatives.
pub fn specificity(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tn, c.tn + c.fp)
}

pub fn accuracy(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tp + c.tn, c.total())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// `None` for the origin point, above every score.
    pub threshold: Option<f64>,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC over the distinct scores, highest first, from `(0, 0)` to `(1, 1)`.
///
/// Tied scores move the curve diagonally in one step, so the trapezoid sum,
/// kept as the integer `sum dFP (2 TP_before + dTP)` over `2 P N`, is the
/// Mann-Whitney statistic with ties counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("ROC score {s}")));
    }
    let p = labels.iter().filter(|&&y| y).count() as u64;
    let n = labels.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(Error::invalid(format!(
            "AUC needs both classes, got {p} positives and {n} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: None,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut dtp, mut dfp) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        area2 += dfp as u128 * (2 * tp + dtp) as u128;
        tp += dtp;
        fp += dfp;
        points.push(RocPoint {
            threshold: Some(s),
            tpr: tp as f64 / p as f64,
            fpr: fp as f64 / n as f64,
        });
    }
    let auc = area2 as f64 / (2 * p as u128 * n as u128) as f64;
    Ok(RocCurve { points, auc })
}

/// Accuracy at 0.5 and, when both classes are present, the ROC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub count: usize,
    pub positives: usize,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub roc: Option<RocCurve>,
}

pub fn evaluate(scores: &[f64], labels: &[bool]) -> Result<Evaluation> {
    let c = confusion(scores, labels, 0.5)?;
    let positives = labels.iter().filter(|&&y| y).count();
    let roc = if positives > 0 && positives < labels.len() {
        Some(roc_auc(scores, labels)?)
    } else {
        None
    };
    Ok(Evaluation {
        count: labels.len(),
        positives,
        accuracy: accuracy(&c),
        auc: roc.as_ref().map(|r| r.auc),
        roc,
    })
}

/// One row of a stream or ensemble table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Patch geometry for stream tables, channel family for the ensemble table.
    pub model: String,
    pub fold: Option<usize>,
    pub training: Evaluation,
    pub validation: Evaluation,
    pub findings: Evaluation,
}

pub const TABLE_HEADER: &str = "model,fold,training_accuracy,training_auc,validation_accuracy,validation_auc,findings_accuracy,findings_auc\n";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn table_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(TABLE_HEADER);
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.model,
            r.fold.map(|f| f.to_string()).unwrap_or_default(),
            cell(r.training.accuracy),
            cell(r.training.auc),
            cell(r.validation.accuracy),
            cell(r.validation.auc),
            cell(r.findings.accuracy),
            cell(r.findings.auc),
        );
    }
    s
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        let t = p.threshold.map_or_else(|| "inf".to_string(), |t| t.to_string());
        let _ = writeln!(s, "{t},{:.9},{:.9}", p.fpr, p.tpr);
    }
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

/// ROC polylines on the unit square; `(label, curve)` pairs.
pub fn roc_svg(title: &str, curves: &[(String, &RocCurve)]) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    let map = |fpr: f64, tpr: f64| (PAD + fpr * SIZE, PAD + (1.0 - tpr) * SIZE);
    let full = SIZE + 2.0 * PAD;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = full + 160.0,
        h = full
    );
    let _ = writeln!(s, r#"<text x="{PAD}" y="24" font-size="14">{}</text>"#, xml_escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    let (x0, y0) = map(0.0, 0.0);
    let (x1, y1) = map(1.0, 1.0);
    let _ = writeln!(
        s,
        r##"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="#bbbbbb" stroke-dasharray="4 4"/>"##
    );
    for (t, anchor) in [(0.0, "start"), (0.5, "middle"), (1.0, "end")] {
        let (x, _) = map(t, 0.0);
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" font-size="11" text-anchor="{anchor}">{t}</text>"#,
            PAD + SIZE + 14.0
        );
        let (_, y) = map(0.0, t);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{t}</text>"#, PAD - 4.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">1 - specificity</text>"#,
        PAD + SIZE / 2.0,
        full - 6.0
    );
    for (k, (label, curve)) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| {
                let (x, y) = map(p.fpr, p.tpr);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{} (AUC {:.3})</text>"#,
            full + 4.0,
            PAD + 14.0 * k as f64 + 10.0,
            xml_escape(label),
            curve.auc
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `<stem>.csv`, one ROC file per row under `roc/` and `<stem>.svg`.
pub fn write_table(dir: &Path, stem: &str, title: &str, rows: &[MetricRow]) -> Result<()> {
    write_file(&dir.join(format!("{stem}.csv")), table_csv(rows).as_bytes())?;
    let mut curves = Vec::new();
    for r in rows {
        if let Some(roc) = &r.validation.roc {
            let name = match r.fold {
                Some(f) => format!("{}_fold{f}", r.model),
                None => r.model.clone(),
            };
            write_file(&dir.join("roc").join(format!("{stem}_{name}.csv")), roc_csv(roc).as_bytes())?;
            curves.push((name, roc));
        }
    }
    write_file(&dir.join(format!("{stem}.svg")), roc_svg(title, &curves).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios_from_counts() {
        let c = ConfusionCounts {
            tp: 3,
            fn_: 1,
            tn: 9,
            fp: 1,
        };
        assert_eq!(sensitivity(&c), Some(0.75));
        assert_eq!(specificity(&c), Some(0.9));
        assert_eq!(accuracy(&c), Some(12.0 / 14.0));
        assert_eq!(sensitivity(&ConfusionCounts::default()), None);
    }

    #[test]
    fn all_above_threshold() {
        let c = confusion(&[0.5, 0.7, 0.9], &[true, false, true], 0.5).unwrap();
        assert_eq!((c.fn_, c.tn, c.tp, c.fp), (0, 0, 2, 1));
    }

    #[test]
    fn auc_limits() {
        let r = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(r.auc, 1.0);
        let r = roc_auc(&[0.3; 6], &[true, false, true, false, false, false]).unwrap();
        assert_eq!(r.auc, 0.5);
        assert_eq!(r.points.len(), 2);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn curve_endpoints_and_monotone() {
        let s = [0.1, 0.4, 0.35, 0.8, 0.8, 0.2];
        let y = [false, true, false, true, false, true];
        let r = roc_auc(&s, &y).unwrap();
        let first = r.points.first().unwrap();
        let last = r.points.last().unwrap();
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert!(r.points.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr));
    }

    #[test]
    fn svg_spans_unit_square() {
        let r = roc_auc(&[0.9, 0.1], &[true, false]).unwrap();
        let svg = roc_svg("t", &[("a".into(), &r)]);
        assert!(svg.contains(r#"<rect x="40" y="40" width="400" height="400""#));
        assert!(svg.contains("40.00,440.00") && svg.contains("440.00,40.00"));
    }
}
