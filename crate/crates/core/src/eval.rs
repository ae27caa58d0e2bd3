//! Pixel confusion counts, mIoU / mAcc and comparison tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LabelMap;
use crate::ontology::{CLASS_NAMES, N_CLASSES};

/// Per-class true-positive, false-positive and false-negative pixel counts.
/// Label value 0 is background; value `c + 1` is class `c`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub class: String,
    /// Percent; `None` when the class is absent from predictions and truth.
    pub iou: Option<f64>,
    pub acc: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionAccumulator {
    pub fn new() -> Self {
        ConfusionAccumulator {
            tp: vec![0; N_CLASSES],
            fp: vec![0; N_CLASSES],
            fn_: vec![0; N_CLASSES],
        }
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.h, pred.w) != (gt.h, gt.w) {
            return Err(Error::Shape {
                op: "accumulate",
                lhs: vec![pred.h, pred.w],
                rhs: vec![gt.h, gt.w],
            });
        }
        for (&p, &t) in pred.data.iter().zip(&gt.data) {
            let (p, t) = (p as usize, t as usize);
            if p == t {
                if p > 0 {
                    self.tp[p - 1] += 1;
                }
                continue;
            }
            if p > 0 {
                self.fp[p - 1] += 1;
            }
            if t > 0 {
                self.fn_[t - 1] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) {
        for c in 0..N_CLASSES {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
    }

    fn evaluable(&self, c: usize) -> bool {
        self.tp[c] + self.fp[c] + self.fn_[c] > 0
    }

    pub fn class_iou(&self, c: usize) -> Option<f64> {
        self.evaluable(c)
            .then(|| 100.0 * self.tp[c] as f64 / (self.tp[c] + self.fp[c] + self.fn_[c]) as f64)
    }

    /// Pixel accuracy of class `c`; a class only ever predicted (never in
    /// the ground truth) scores 0.
    pub fn class_acc(&self, c: usize) -> Option<f64> {
        self.evaluable(c).then(|| {
            let d = self.tp[c] + self.fn_[c];
            if d == 0 {
                0.0
            } else {
                100.0 * self.tp[c] as f64 / d as f64
            }
        })
    }

    fn mean(&self, f: impl Fn(usize) -> Option<f64>) -> Result<f64> {
        let v: Vec<f64> = (0..N_CLASSES).filter_map(f).collect();
        if v.is_empty() {
            return Err(Error::Eval("no class appears in predictions or ground truth".into()));
        }
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean IoU in percent over classes present in the predictions or truth.
    pub fn miou(&self) -> Result<f64> {
        self.mean(|c| self.class_iou(c))
    }

    /// Mean per-class accuracy in percent, same class set as [`Self::miou`].
    pub fn macc(&self) -> Result<f64> {
        self.mean(|c| self.class_acc(c))
    }

    pub fn per_class(&self) -> Vec<ClassMetric> {
        (0..N_CLASSES)
            .map(|c| ClassMetric {
                class: CLASS_NAMES[c].to_string(),
                iou: self.class_iou(c).map(round2),
                acc: self.class_acc(c).map(round2),
                tp: self.tp[c],
                fp: self.fp[c],
                fn_: self.fn_[c],
            })
            .collect()
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Metrics of one evaluated model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub macc: f64,
    pub images: usize,
    pub per_class: Vec<ClassMetric>,
}

impl EvalReport {
    pub fn from_confusion(acc: &ConfusionAccumulator, images: usize) -> Result<Self> {
        Ok(EvalReport {
            miou: round2(acc.miou()?),
            macc: round2(acc.macc()?),
            images,
            per_class: acc.per_class(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("images: {}\nmIoU: {:.2}\nmAcc: {:.2}\n\n", self.images, self.miou, self.macc);
        s += &format!("{:<20} {:>8} {:>8}\n", "class", "IoU", "Acc");
        for m in &self.per_class {
            let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
            s += &format!("{:<20} {:>8} {:>8}\n", m.class, f(m.iou), f(m.acc));
        }
        s
    }
}

/// One row of a comparison table: mean metrics over the listed runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub miou: Option<f64>,
    pub macc: Option<f64>,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

impl TableRow {
    pub fn from_runs(label: &str, runs: &[(u64, f64, f64)]) -> Self {
        if runs.is_empty() {
            return TableRow {
                label: label.to_string(),
                miou: None,
                macc: None,
                seeds: Vec::new(),
                note: Some("missing run".into()),
            };
        }
        let n = runs.len() as f64;
        TableRow {
            label: label.to_string(),
            miou: Some(round2(runs.iter().map(|r| r.1).sum::<f64>() / n)),
            macc: Some(round2(runs.iter().map(|r| r.2).sum::<f64>() / n)),
            seeds: runs.iter().map(|r| r.0).collect(),
            note: None,
        }
    }
}

/// Component ablation, graph-depth and reference-count comparisons.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub components: Vec<TableRow>,
    pub gat_depth: Vec<TableRow>,
    /// `(k, row)` sorted by `k`.
    pub refs: Vec<(usize, TableRow)>,
}

impl AblationReport {
    pub fn sort(&mut self) {
        self.refs.sort_by_key(|(k, _)| *k);
    }

    pub fn to_text(&self) -> String {
        fn table(title: &str, rows: &[&TableRow]) -> String {
            let mut s = format!("{title}\n{:<12} {:>8} {:>8}  seeds\n", "config", "mIoU", "mAcc");
            for r in rows {
                let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
                let seeds: Vec<String> = r.seeds.iter().map(|s| s.to_string()).collect();
                s += &format!("{:<12} {:>8} {:>8}  {}", r.label, f(r.miou), f(r.macc), seeds.join(","));
                if let Some(n) = &r.note {
                    s += &format!("  ({n})");
                }
                s.push('\n');
            }
            s
        }
        let mut out = String::new();
        if !self.components.is_empty() {
            out += &table("components", &self.components.iter().collect::<Vec<_>>());
        }
        if !self.gat_depth.is_empty() {
            out += "\n";
            out += &table("graph layers", &self.gat_depth.iter().collect::<Vec<_>>());
        }
        if !self.refs.is_empty() {
            out += "\n";
            out += &table("references", &self.refs.iter().map(|(_, r)| r).collect::<Vec<_>>());
        }
        out
    }

    pub fn row(&self, label: &str) -> Option<&TableRow> {
        self.components.iter().find(|r| r.label == label)
    }

    /// `(k, mIoU)` pairs of the reference sweep, ascending in `k`.
    pub fn sweep_points(&self) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self.refs.iter().filter_map(|(k, r)| r.miou.map(|m| (*k, m))).collect();
        v.sort_by_key(|p| p.0);
        v
    }
}

/// Minimum scores a report must reach; unset fields are not checked.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Test mIoU of an evaluated model, or of the Full row of a table.
    pub miou: Option<f64>,
    /// mIoU of Full minus Base.
    pub full_over_base_miou: Option<f64>,
    /// mAcc of +VP+RAM minus Base.
    pub vp_over_base_macc: Option<f64>,
}

impl Thresholds {
    /// Unmet thresholds of a single evaluation, as messages.
    pub fn check_eval(&self, r: &EvalReport) -> Vec<String> {
        match self.miou {
            Some(t) if r.miou < t => vec![format!("mIoU {:.2} < {t:.2}", r.miou)],
            _ => Vec::new(),
        }
    }

    /// Unmet thresholds of a comparison table. A threshold whose rows are
    /// missing counts as unmet.
    pub fn check_ablation(&self, a: &AblationReport) -> Vec<String> {
        let mut fails = Vec::new();
        let metric = |label: &str, f: fn(&TableRow) -> Option<f64>| a.row(label).and_then(f);
        if let Some(t) = self.miou {
            match metric("Full", |r| r.miou) {
                Some(v) if v >= t => {}
                v => fails.push(format!("Full mIoU {v:?} < {t:.2}")),
            }
        }
        let gain = |l: &str, f: fn(&TableRow) -> Option<f64>| Some(metric(l, f)? - metric("Base", f)?);
        if let Some(t) = self.full_over_base_miou {
            match gain("Full", |r| r.miou) {
                Some(v) if v >= t => {}
                v => fails.push(format!("Full - Base mIoU {v:?} < {t:.2}")),
            }
        }
        if let Some(t) = self.vp_over_base_macc {
            match gain("+VP+RAM", |r| r.macc) {
                Some(v) if v >= t => {}
                v => fails.push(format!("+VP+RAM - Base mAcc {v:?} < {t:.2}")),
            }
        }
        fails
    }
}
