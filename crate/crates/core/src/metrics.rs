//! Exact-match robustness metrics.
//!
//! `Acc` compares a method's noisy-input predictions with ground truth,
//! `Noisy` with the clean-input predictions of the untreated model, and `GSR`
//! with the same method's clean-input predictions. Each uses its own valid set
//! (ids where both sides hold a real label). `CRS` is their mean.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INVALID: &str = "INVALID";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Prediction {
    Label(String),
    Invalid,
}

impl Prediction {
    pub fn from_option(answer: Option<String>) -> Self {
        answer.map_or(Prediction::Invalid, Prediction::Label)
    }

    pub fn label(&self) -> Option<&str> {
        match self {
            Prediction::Label(s) => Some(s),
            Prediction::Invalid => None,
        }
    }
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label().unwrap_or(INVALID))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRecord {
    id: String,
    prediction: String,
}

/// Predictions keyed by instance id. Absent ids read as invalid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionFile {
    entries: BTreeMap<String, Prediction>,
}

impl PredictionFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, pred: Prediction) {
        self.entries.insert(id.into(), pred);
    }

    pub fn insert_label(&mut self, id: impl Into<String>, label: impl Into<String>) {
        self.insert(id, Prediction::Label(label.into()));
    }

    pub fn get(&self, id: &str) -> &Prediction {
        self.entries.get(id).unwrap_or(&Prediction::Invalid)
    }

    pub fn label(&self, id: &str) -> Option<&str> {
        self.get(id).label()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Prediction)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (id, pred) in &self.entries {
            let rec = PredictionRecord {
                id: id.clone(),
                prediction: pred.to_string(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Self::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PredictionRecord = serde_json::from_str(&line)?;
            if out.entries.contains_key(&rec.id) {
                return Err(Error::InvalidField {
                    field: "id".into(),
                    reason: format!("duplicate prediction id `{}`", rec.id),
                });
            }
            let pred = if rec.prediction == INVALID {
                Prediction::Invalid
            } else {
                Prediction::Label(rec.prediction)
            };
            out.entries.insert(rec.id, pred);
        }
        Ok(out)
    }
}

/// Ids from `universe` where both files hold a label.
pub fn valid_ids<'a>(
    a: &PredictionFile,
    b: &PredictionFile,
    universe: impl IntoIterator<Item = &'a str>,
) -> Vec<String> {
    universe
        .into_iter()
        .filter(|id| a.label(id).is_some() && b.label(id).is_some())
        .map(str::to_string)
        .collect()
}

/// Fraction of `valid` ids with equal labels. Ids lacking a label on either
/// side are dropped from the denominator.
pub fn exact_match(a: &PredictionFile, b: &PredictionFile, valid: &[String]) -> Result<f64> {
    let mut total = 0usize;
    let mut hits = 0usize;
    for id in valid {
        if let (Some(x), Some(y)) = (a.label(id), b.label(id)) {
            total += 1;
            hits += usize::from(x == y);
        }
    }
    if total == 0 {
        return Err(Error::EmptyValidSet("exact_match".into()));
    }
    Ok(hits as f64 / total as f64)
}

fn named_em(name: &str, a: &PredictionFile, b: &PredictionFile, universe: &[&str]) -> Result<(f64, usize)> {
    let valid = valid_ids(a, b, universe.iter().copied());
    match exact_match(a, b, &valid) {
        Ok(v) => Ok((v, valid.len())),
        Err(Error::EmptyValidSet(_)) => Err(Error::EmptyValidSet(name.into())),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub micro: f64,
    pub macro_: f64,
    pub average: f64,
}

/// Multiclass F1. An invalid prediction is a false negative for its true class
/// and a false positive for none.
pub fn f1_scores(preds: &PredictionFile, targets: &PredictionFile, labels: &[String]) -> F1Scores {
    let mut tp = BTreeMap::<&str, usize>::new();
    let mut fp = BTreeMap::<&str, usize>::new();
    let mut fneg = BTreeMap::<&str, usize>::new();
    for (id, truth) in targets.iter() {
        let Some(truth) = truth.label() else { continue };
        match preds.label(id) {
            Some(p) if p == truth => *tp.entry(truth).or_default() += 1,
            Some(p) => {
                *fp.entry(p).or_default() += 1;
                *fneg.entry(truth).or_default() += 1;
            }
            None => *fneg.entry(truth).or_default() += 1,
        }
    }
    let get = |m: &BTreeMap<&str, usize>, l: &str| *m.get(l).unwrap_or(&0) as f64;
    let f1 = |t: f64, p: f64, n: f64| {
        if t == 0.0 {
            0.0
        } else {
            2.0 * t / (2.0 * t + p + n)
        }
    };
    let (mut st, mut sp, mut sn) = (0.0, 0.0, 0.0);
    let mut macro_sum = 0.0;
    for l in labels {
        let (t, p, n) = (get(&tp, l), get(&fp, l), get(&fneg, l));
        st += t;
        sp += p;
        sn += n;
        macro_sum += f1(t, p, n);
    }
    let micro = f1(st, sp, sn);
    let macro_ = if labels.is_empty() {
        0.0
    } else {
        macro_sum / labels.len() as f64
    };
    F1Scores {
        micro,
        macro_,
        average: (micro + macro_) / 2.0,
    }
}

/// `(Corrected - Broken) / n_total * 100`, flips of correctness from
/// `reference_noisy` to `method_noisy`.
pub fn net_correction(
    method_noisy: &PredictionFile,
    reference_noisy: &PredictionFile,
    targets: &PredictionFile,
    n_total: usize,
) -> Result<f64> {
    if n_total == 0 {
        return Err(Error::Config("net correction needs n_total > 0".into()));
    }
    let (mut corrected, mut broken) = (0i64, 0i64);
    for (id, truth) in targets.iter() {
        let Some(truth) = truth.label() else { continue };
        let m = method_noisy.label(id) == Some(truth);
        let r = reference_noisy.label(id) == Some(truth);
        match (r, m) {
            (false, true) => corrected += 1,
            (true, false) => broken += 1,
            _ => {}
        }
    }
    Ok(net_correction_from_counts(corrected, broken, n_total))
}

pub fn net_correction_from_counts(corrected: i64, broken: i64, n_total: usize) -> f64 {
    (corrected - broken) as f64 / n_total as f64 * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub acc: f64,
    pub noisy: f64,
    pub gsr: f64,
    pub crs: f64,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub f1_avg: f64,
    pub net_correction: Option<f64>,
    pub valid_counts: BTreeMap<String, usize>,
}

/// Inputs for [`compute_metrics`]. All files share the id universe of `targets`.
#[derive(Debug, Clone, Copy)]
pub struct MetricInputs<'a> {
    pub noisy_preds: &'a PredictionFile,
    pub clean_preds: &'a PredictionFile,
    pub base_clean_preds: &'a PredictionFile,
    pub targets: &'a PredictionFile,
    /// Reference system's noisy predictions for the net-correction rate.
    pub reference_noisy: Option<&'a PredictionFile>,
}

pub fn compute_metrics(inputs: MetricInputs<'_>) -> Result<RunMetrics> {
    let universe: Vec<&str> = inputs.targets.ids().collect();
    let (acc, n_acc) = named_em("acc", inputs.noisy_preds, inputs.targets, &universe)?;
    let (noisy, n_noisy) = named_em("noisy", inputs.noisy_preds, inputs.base_clean_preds, &universe)?;
    let (gsr, n_gsr) = named_em("gsr", inputs.noisy_preds, inputs.clean_preds, &universe)?;
    let labels: Vec<String> = inputs
        .targets
        .iter()
        .filter_map(|(_, p)| p.label().map(str::to_string))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let f1 = f1_scores(inputs.noisy_preds, inputs.targets, &labels);
    let net = inputs
        .reference_noisy
        .map(|r| net_correction(inputs.noisy_preds, r, inputs.targets, universe.len()))
        .transpose()?;
    Ok(RunMetrics {
        acc,
        noisy,
        gsr,
        crs: (acc + noisy + gsr) / 3.0,
        f1_micro: f1.micro,
        f1_macro: f1.macro_,
        f1_avg: f1.average,
        net_correction: net,
        valid_counts: [("acc", n_acc), ("noisy", n_noisy), ("gsr", n_gsr)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
    })
}

/// Two-decimal percentage, the reporting convention for every score.
pub fn pct(x: f64) -> f64 {
    (x * 10000.0).round() / 100.0
}

impl RunMetrics {
    /// Scores scaled by 100 and rounded to two decimals (net correction is
    /// already a percentage and is only rounded).
    pub fn reported(&self) -> RunMetrics {
        RunMetrics {
            acc: pct(self.acc),
            noisy: pct(self.noisy),
            gsr: pct(self.gsr),
            crs: pct(self.crs),
            f1_micro: pct(self.f1_micro),
            f1_macro: pct(self.f1_macro),
            f1_avg: pct(self.f1_avg),
            net_correction: self.net_correction.map(|v| (v * 100.0).round() / 100.0),
            valid_counts: self.valid_counts.clone(),
        }
    }

    pub fn table(&self, label: &str) -> String {
        let r = self.reported();
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8}",
            "run", "Acc", "Noisy", "GSR", "CRS", "F1avg", "NetCorr"
        );
        let _ = writeln!(
            s,
            "{:<14} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>8}",
            label,
            r.acc,
            r.noisy,
            r.gsr,
            r.crs,
            r.f1_avg,
            r.net_correction.map_or("-".into(), |v| format!("{v:.2}"))
        );
        s
    }
}
