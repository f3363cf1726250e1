//! Detection metrics: confusion matrix, per-class precision and FDR, one-vs-rest
//! ROC curves with AUC, and the text report.
//!
//! Undefined ratios (0/0) are `None` and are left out of macro averages.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{invalid, Error, Result, Shape};

/// Counts with rows = predicted class, columns = actual class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if n == 0 || counts.iter().any(|r| r.len() != n) {
            return Err(invalid("confusion matrix must be square and non-empty"));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn from_predictions(predicted: &[usize], actual: &[usize], n: usize) -> Result<Self> {
        check_lengths(predicted.len(), actual.len())?;
        let mut cm = ConfusionMatrix::new(n);
        for (&p, &a) in predicted.iter().zip(actual) {
            if p >= n || a >= n {
                return Err(invalid(format!("class id outside 0..{n}")));
            }
            cm.counts[p][a] += 1;
        }
        Ok(cm)
    }

    pub fn class_count(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, predicted: usize, actual: usize) -> u64 {
        self.counts[predicted][actual]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Windows predicted as `c`.
    pub fn predicted_total(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    /// Windows whose true class is `c`.
    pub fn actual_total(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn precision(&self, c: usize) -> Option<f64> {
        ratio(self.counts[c][c], self.predicted_total(c))
    }

    /// Detection rate `TP / (TP + FN)` of class `c`.
    pub fn fdr(&self, c: usize) -> Option<f64> {
        ratio(self.counts[c][c], self.actual_total(c))
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            context: "predictions vs truths",
            left: Shape(a, 1),
            right: Shape(b, 1),
        });
    }
    Ok(())
}

/// Mean of the defined entries, with the number left out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroAverage {
    pub value: Option<f64>,
    pub excluded: usize,
}

pub fn macro_average(values: &[Option<f64>]) -> MacroAverage {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    MacroAverage {
        value: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        excluded: values.len() - defined.len(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Decreasing; the first entry is +inf for the (0, 0) point.
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
}

impl RocCurve {
    /// `threshold,fpr,tpr` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for k in 0..self.thresholds.len() {
            let _ = writeln!(out, "{},{},{}", self.thresholds[k], self.fpr[k], self.tpr[k]);
        }
        out
    }
}

/// ROC of a binary scoring. Equal scores form a single step, so the curve
/// takes a diagonal segment across them.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Result<RocCurve> {
    check_lengths(scores.len(), positive.len())?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid("ROC scores must be finite"));
    }
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(invalid("ROC needs both positive and negative examples"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = RocCurve {
        thresholds: vec![f64::INFINITY],
        fpr: vec![0.0],
        tpr: vec![0.0],
        auc: 0.0,
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    // Twice the trapezoid area in units of 1/(pos*neg), kept exact.
    let mut area2: u128 = 0;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        let (tp0, fp0) = (tp, fp);
        while k < order.len() && scores[order[k]] == s {
            if positive[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        area2 += ((fp - fp0) * (tp + tp0)) as u128;
        curve.thresholds.push(s);
        curve.fpr.push(fp as f64 / neg as f64);
        curve.tpr.push(tp as f64 / pos as f64);
    }
    curve.auc = area2 as f64 / (2.0 * pos as f64 * neg as f64);
    Ok(curve)
}

/// One-vs-rest ROC for class `c` from per-window probability vectors.
pub fn roc_auc(probabilities: &[Vec<f64>], truths: &[usize], c: usize) -> Result<RocCurve> {
    check_lengths(probabilities.len(), truths.len())?;
    let scores = probabilities
        .iter()
        .map(|p| p.get(c).copied().ok_or_else(|| invalid(format!("class {c} has no probability column"))))
        .collect::<Result<Vec<_>>>()?;
    let positive: Vec<bool> = truths.iter().map(|&t| t == c).collect();
    roc_curve(&scores, &positive)
}

/// ROC over every (window, class) decision pooled together.
pub fn micro_roc(probabilities: &[Vec<f64>], truths: &[usize], n: usize) -> Result<RocCurve> {
    check_lengths(probabilities.len(), truths.len())?;
    let mut scores = Vec::with_capacity(probabilities.len() * n);
    let mut positive = Vec::with_capacity(probabilities.len() * n);
    for (p, &t) in probabilities.iter().zip(truths) {
        if p.len() != n {
            return Err(invalid(format!("probability vector of length {} for {n} classes", p.len())));
        }
        for (c, &s) in p.iter().enumerate() {
            scores.push(s);
            positive.push(t == c);
        }
    }
    roc_curve(&scores, &positive)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub confusion: ConfusionMatrix,
    pub precision: Vec<Option<f64>>,
    pub fdr: Vec<Option<f64>>,
    /// Over every class present in the ground truth, normal included.
    pub macro_fdr: MacroAverage,
    /// Over classes 1.. only.
    pub macro_fdr_faults: MacroAverage,
    pub macro_precision: MacroAverage,
    pub auc: Vec<Option<f64>>,
    pub micro_auc: Option<f64>,
    pub macro_auc: MacroAverage,
    pub accuracy: f64,
}

impl DetectionReport {
    pub fn class_count(&self) -> usize {
        self.confusion.class_count()
    }

    pub fn total(&self) -> u64 {
        self.confusion.total()
    }

    /// Windows assigned to each class.
    pub fn prediction_counts(&self) -> Vec<u64> {
        (0..self.class_count()).map(|c| self.confusion.predicted_total(c)).collect()
    }

    pub fn actual_counts(&self) -> Vec<u64> {
        (0..self.class_count()).map(|c| self.confusion.actual_total(c)).collect()
    }

    pub fn to_text(&self) -> String {
        let n = self.class_count();
        let mut out = String::new();
        let _ = writeln!(out, "windows evaluated: {}", self.total());
        let _ = writeln!(out, "accuracy: {:.4}", self.accuracy);
        let _ = writeln!(out);
        let _ = writeln!(out, "class\tactual\tpredicted\tprecision\tFDR\tAUC");
        let actual = self.actual_counts();
        let predicted = self.prediction_counts();
        for c in 0..n {
            let _ = writeln!(
                out,
                "{c}\t{}\t{}\t{}\t{}\t{}",
                actual[c],
                predicted[c],
                fmt4(self.precision[c]),
                fmt4(self.fdr[c]),
                fmt4(self.auc[c])
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "macro FDR (all classes): {} ({} excluded)",
            fmt4(self.macro_fdr.value),
            self.macro_fdr.excluded
        );
        let _ = writeln!(
            out,
            "macro FDR (fault classes): {} ({} excluded)",
            fmt4(self.macro_fdr_faults.value),
            self.macro_fdr_faults.excluded
        );
        let _ = writeln!(
            out,
            "macro precision: {} ({} excluded)",
            fmt4(self.macro_precision.value),
            self.macro_precision.excluded
        );
        let _ = writeln!(out, "micro AUC: {}", fmt4(self.micro_auc));
        let _ = writeln!(out, "macro AUC: {} ({} excluded)", fmt4(self.macro_auc.value), self.macro_auc.excluded);
        let _ = writeln!(out);
        let _ = writeln!(out, "confusion matrix (rows predicted, columns actual)");
        let header: Vec<String> = (0..n).map(|c| c.to_string()).collect();
        let _ = writeln!(out, "\t{}", header.join("\t"));
        for (p, row) in self.confusion.counts().iter().enumerate() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(out, "{p}\t{}", cells.join("\t"));
        }
        out
    }

    /// `key=value` lines between `BEGIN METRICS` and `END METRICS`.
    /// Undefined values are written as `undefined`; reals use shortest
    /// round-trip formatting.
    pub fn to_machine_block(&self) -> String {
        let n = self.class_count();
        let mut out = String::from("BEGIN METRICS\n");
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("classes", n.to_string());
        put("windows", self.total().to_string());
        put("accuracy", self.accuracy.to_string());
        for (name, m) in [
            ("macro_fdr", self.macro_fdr),
            ("macro_fdr_faults", self.macro_fdr_faults),
            ("macro_precision", self.macro_precision),
            ("macro_auc", self.macro_auc),
        ] {
            put(name, opt(m.value));
            put(&format!("{name}_excluded"), m.excluded.to_string());
        }
        put("micro_auc", opt(self.micro_auc));
        for c in 0..n {
            put(&format!("precision.{c}"), opt(self.precision[c]));
            put(&format!("fdr.{c}"), opt(self.fdr[c]));
            put(&format!("auc.{c}"), opt(self.auc[c]));
        }
        for p in 0..n {
            for a in 0..n {
                put(&format!("confusion.{p}.{a}"), self.confusion.get(p, a).to_string());
            }
        }
        out.push_str("END METRICS\n");
        out
    }

    /// Rebuilds a report from the output of [`Self::to_machine_block`]; text
    /// around the block is ignored.
    pub fn from_machine_block(text: &str) -> Result<Self> {
        let kv = parse_machine_block(text)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| invalid(format!("metrics block lacks {k}")));
        let real = |k: &str| -> Result<Option<f64>> {
            let v = get(k)?;
            if v == "undefined" {
                return Ok(None);
            }
            v.parse().map(Some).map_err(|_| invalid(format!("bad value for {k}: {v}")))
        };
        let count = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| invalid(format!("bad count for {k}"))) };
        let avg = |k: &str| -> Result<MacroAverage> {
            Ok(MacroAverage {
                value: real(k)?,
                excluded: count(&format!("{k}_excluded"))? as usize,
            })
        };
        let n = count("classes")? as usize;
        let mut counts = vec![vec![0; n]; n];
        for (p, row) in counts.iter_mut().enumerate() {
            for (a, cell) in row.iter_mut().enumerate() {
                *cell = count(&format!("confusion.{p}.{a}"))?;
            }
        }
        let per_class = |name: &str| (0..n).map(|c| real(&format!("{name}.{c}"))).collect::<Result<Vec<_>>>();
        Ok(DetectionReport {
            confusion: ConfusionMatrix::from_counts(counts)?,
            precision: per_class("precision")?,
            fdr: per_class("fdr")?,
            macro_fdr: avg("macro_fdr")?,
            macro_fdr_faults: avg("macro_fdr_faults")?,
            macro_precision: avg("macro_precision")?,
            auc: per_class("auc")?,
            micro_auc: real("micro_auc")?,
            macro_auc: avg("macro_auc")?,
            accuracy: real("accuracy")?.ok_or_else(|| invalid("accuracy undefined"))?,
        })
    }
}

fn fmt4(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

pub fn parse_machine_block(text: &str) -> Result<BTreeMap<String, String>> {
    let mut lines = text.lines().skip_while(|l| l.trim() != "BEGIN METRICS");
    if lines.next().is_none() {
        return Err(invalid("no BEGIN METRICS line"));
    }
    let mut kv = BTreeMap::new();
    for line in lines {
        let line = line.trim();
        if line == "END METRICS" {
            return Ok(kv);
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid(format!("metrics line without '=': {line}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    Err(invalid("no END METRICS line"))
}

/// Full report from predicted ids, probability vectors and true ids.
pub fn report(predicted: &[usize], probabilities: &[Vec<f64>], truths: &[usize], n: usize) -> Result<DetectionReport> {
    check_lengths(predicted.len(), truths.len())?;
    check_lengths(probabilities.len(), truths.len())?;
    if truths.is_empty() {
        return Err(Error::Empty("evaluation windows"));
    }
    let confusion = ConfusionMatrix::from_predictions(predicted, truths, n)?;
    let precision: Vec<Option<f64>> = (0..n).map(|c| confusion.precision(c)).collect();
    let fdr: Vec<Option<f64>> = (0..n).map(|c| confusion.fdr(c)).collect();
    let auc: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let present = truths.iter().any(|&t| t == c);
            let absent = truths.iter().any(|&t| t != c);
            if present && absent {
                roc_auc(probabilities, truths, c).map(|r| Some(r.auc))
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    let micro_auc = if n >= 2 {
        Some(micro_roc(probabilities, truths, n)?.auc)
    } else {
        None
    };
    let correct = (0..n).map(|c| confusion.get(c, c)).sum::<u64>();
    Ok(DetectionReport {
        macro_fdr: macro_average(&fdr),
        macro_fdr_faults: macro_average(fdr.get(1..).unwrap_or(&[])),
        macro_precision: macro_average(&precision),
        macro_auc: macro_average(&auc),
        accuracy: correct as f64 / truths.len() as f64,
        confusion,
        precision,
        fdr,
        auc,
        micro_auc,
    })
}
