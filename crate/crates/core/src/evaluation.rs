//! Per-anomaly accuracy, chance baselines, ablation deltas and report output.
//!
//! Everything is accumulated as exact fractions; floats and rounding only
//! appear when a report is rendered.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AnomalyTaxonomy, OneHotVector};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("prediction and truth sample sets differ (missing predictions: {missing_predictions:?}; missing truths: {missing_truths:?})")]
    KeyMismatch {
        missing_predictions: Vec<String>,
        missing_truths: Vec<String>,
    },
    #[error("sample `{sample_id}` has vectors of length {prediction} and {truth}")]
    LengthMismatch {
        sample_id: String,
        prediction: usize,
        truth: usize,
    },
    #[error("anomaly index {index} is out of range for vectors of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("no samples to evaluate")]
    NoSamples,
    #[error("cannot average an empty list")]
    EmptyAverage,
    #[error("prevalence {0} is outside [0, 1]")]
    InvalidPrevalence(Exact),
    #[error("reports cover different taxonomies ({0} vs {1})")]
    TaxonomyMismatch(String, String),
    #[error("invalid decimal `{0}`")]
    InvalidDecimal(String),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Exact non-integer value; serialized as `"num/den"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Exact(Ratio<i128>);

impl Exact {
    pub fn new(num: i128, den: i128) -> Self {
        Self(Ratio::new(num, den))
    }

    pub fn zero() -> Self {
        Self::new(0, 1)
    }

    pub fn one() -> Self {
        Self::new(1, 1)
    }

    pub fn numer(&self) -> i128 {
        *self.0.numer()
    }

    pub fn denom(&self) -> i128 {
        *self.0.denom()
    }

    /// Parses a plain decimal such as `0.738` exactly.
    pub fn from_decimal_str(s: &str) -> Result<Self> {
        let bad = || EvalError::InvalidDecimal(s.to_string());
        let t = s.trim();
        let (neg, t) = match t.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, t),
        };
        let (int, frac) = t.split_once('.').unwrap_or((t, ""));
        if int.is_empty() && frac.is_empty() {
            return Err(bad());
        }
        if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || frac.len() > 30 {
            return Err(bad());
        }
        let digits = format!("{int}{frac}");
        let num: i128 = digits.parse().map_err(|_| bad())?;
        let den = 10i128.pow(frac.len() as u32);
        Ok(Self::new(if neg { -num } else { num }, den))
    }

    pub fn to_f64(&self) -> f64 {
        self.numer() as f64 / self.denom() as f64
    }

    /// Fixed-point decimal with `places` digits, ties rounded away from zero.
    pub fn round_half_up(&self, places: u32) -> String {
        let scale = 10i128.pow(places);
        let (n, d) = (self.numer(), self.denom());
        let mag = (2 * n.abs() * scale + d) / (2 * d);
        let sign = if n < 0 && mag != 0 { "-" } else { "" };
        if places == 0 {
            return format!("{sign}{mag}");
        }
        format!(
            "{sign}{}.{:0width$}",
            mag / scale,
            mag % scale,
            width = places as usize
        )
    }
}

impl std::ops::Add for Exact {
    type Output = Exact;
    fn add(self, o: Exact) -> Exact {
        Exact(self.0 + o.0)
    }
}

impl std::ops::Sub for Exact {
    type Output = Exact;
    fn sub(self, o: Exact) -> Exact {
        Exact(self.0 - o.0)
    }
}

impl std::ops::Mul for Exact {
    type Output = Exact;
    fn mul(self, o: Exact) -> Exact {
        Exact(self.0 * o.0)
    }
}

impl fmt::Display for Exact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numer(), self.denom())
    }
}

impl FromStr for Exact {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('/') {
            Some((n, d)) => {
                let n: i128 = n.trim().parse().map_err(|_| EvalError::InvalidDecimal(s.into()))?;
                let d: i128 = d.trim().parse().map_err(|_| EvalError::InvalidDecimal(s.into()))?;
                if d == 0 {
                    return Err(EvalError::InvalidDecimal(s.into()));
                }
                Ok(Self::new(n, d))
            }
            None => Self::from_decimal_str(s),
        }
    }
}

impl Serialize for Exact {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Exact {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positives: u64,
    pub true_negatives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_positives + self.true_negatives + self.false_positives + self.false_negatives
    }

    pub fn record(&mut self, predicted: u8, truth: u8) {
        match (predicted, truth) {
            (1, 1) => self.true_positives += 1,
            (0, 0) => self.true_negatives += 1,
            (1, 0) => self.false_positives += 1,
            _ => self.false_negatives += 1,
        }
    }

    /// `(TP + TN) / total`.
    pub fn accuracy(&self) -> Result<Exact> {
        let total = self.total();
        if total == 0 {
            return Err(EvalError::NoSamples);
        }
        Ok(Exact::new(
            (self.true_positives + self.true_negatives) as i128,
            total as i128,
        ))
    }

    /// `(TP + FN) / total`.
    pub fn prevalence(&self) -> Result<Exact> {
        let total = self.total();
        if total == 0 {
            return Err(EvalError::NoSamples);
        }
        Ok(Exact::new(
            (self.true_positives + self.false_negatives) as i128,
            total as i128,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyScore {
    pub anomaly_name: String,
    pub accuracy: Exact,
    pub prevalence: Exact,
    pub counts: ConfusionCounts,
}

pub type Vectors = BTreeMap<String, OneHotVector>;

fn check_keys(predictions: &Vectors, truths: &Vectors) -> Result<()> {
    let missing_predictions: Vec<String> = truths.keys().filter(|k| !predictions.contains_key(*k)).cloned().collect();
    let missing_truths: Vec<String> = predictions.keys().filter(|k| !truths.contains_key(*k)).cloned().collect();
    if missing_predictions.is_empty() && missing_truths.is_empty() {
        Ok(())
    } else {
        Err(EvalError::KeyMismatch {
            missing_predictions,
            missing_truths,
        })
    }
}

pub fn anomaly_accuracy(predictions: &Vectors, truths: &Vectors, anomaly_index: usize, anomaly_name: &str) -> Result<AnomalyScore> {
    check_keys(predictions, truths)?;
    let mut counts = ConfusionCounts::default();
    for (id, truth) in truths {
        let pred = &predictions[id];
        if pred.len() != truth.len() {
            return Err(EvalError::LengthMismatch {
                sample_id: id.clone(),
                prediction: pred.len(),
                truth: truth.len(),
            });
        }
        if anomaly_index >= truth.len() {
            return Err(EvalError::IndexOutOfRange {
                index: anomaly_index,
                len: truth.len(),
            });
        }
        counts.record(pred.bits()[anomaly_index], truth.bits()[anomaly_index]);
    }
    Ok(AnomalyScore {
        anomaly_name: anomaly_name.to_string(),
        accuracy: counts.accuracy()?,
        prevalence: counts.prevalence()?,
        counts,
    })
}

pub fn mean(values: &[Exact]) -> Result<Exact> {
    if values.is_empty() {
        return Err(EvalError::EmptyAverage);
    }
    let sum = values.iter().fold(Exact::zero(), |a, &b| a + b);
    Ok(sum * Exact::new(1, values.len() as i128))
}

pub fn dataset_average(scores: &[AnomalyScore]) -> Result<Exact> {
    mean(&scores.iter().map(|s| s.accuracy).collect::<Vec<_>>())
}

fn check_prevalence(p: Exact) -> Result<Exact> {
    if p < Exact::zero() || p > Exact::one() {
        return Err(EvalError::InvalidPrevalence(p));
    }
    Ok(p)
}

/// Accuracy of the predictor that always answers 1.
pub fn baseline_always_positive(p: Exact) -> Result<Exact> {
    check_prevalence(p)
}

/// Expected accuracy of a predictor answering 1 with probability `p`: `p² + (1 − p)²`.
pub fn baseline_proportional(p: Exact) -> Result<Exact> {
    let p = check_prevalence(p)?;
    let q = Exact::one() - p;
    Ok(p * p + q * q)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Baselines {
    pub anomaly_name: String,
    pub always_positive: Exact,
    pub proportional_chance: Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub with_retrieval: Exact,
    pub without_retrieval: Exact,
    pub delta: Exact,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset_id: String,
    pub anomalies: Vec<String>,
    pub sample_count: usize,
    pub per_anomaly: Vec<AnomalyScore>,
    pub dataset_average: Exact,
    pub baselines: Vec<Baselines>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ablation: Option<Ablation>,
}

/// Scores every taxonomy anomaly over the given samples.
pub fn evaluate(taxonomy: &AnomalyTaxonomy, predictions: &Vectors, truths: &Vectors) -> Result<EvaluationReport> {
    if truths.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let per_anomaly = taxonomy
        .anomalies()
        .iter()
        .enumerate()
        .map(|(i, name)| anomaly_accuracy(predictions, truths, i, name))
        .collect::<Result<Vec<_>>>()?;
    let baselines = per_anomaly
        .iter()
        .map(|s| {
            Ok(Baselines {
                anomaly_name: s.anomaly_name.clone(),
                always_positive: baseline_always_positive(s.prevalence)?,
                proportional_chance: baseline_proportional(s.prevalence)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationReport {
        dataset_id: taxonomy.dataset_id().to_string(),
        anomalies: taxonomy.anomalies().to_vec(),
        sample_count: truths.len(),
        dataset_average: dataset_average(&per_anomaly)?,
        per_anomaly,
        baselines,
        ablation: None,
    })
}

pub fn ablation_compare(with: &EvaluationReport, without: &EvaluationReport) -> Result<Ablation> {
    if with.dataset_id != without.dataset_id || with.anomalies != without.anomalies {
        return Err(EvalError::TaxonomyMismatch(
            with.dataset_id.clone(),
            without.dataset_id.clone(),
        ));
    }
    Ok(Ablation::new(with.dataset_average, without.dataset_average))
}

impl Ablation {
    pub fn new(with_retrieval: Exact, without_retrieval: Exact) -> Self {
        Self {
            with_retrieval,
            without_retrieval,
            delta: with_retrieval - without_retrieval,
        }
    }
}

/// Mean of the deltas over several datasets.
pub fn mean_delta(rows: &[Ablation]) -> Result<Exact> {
    mean(&rows.iter().map(|a| a.delta).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Markdown,
}

pub const DECIMALS: u32 = 3;

fn r3(x: Exact) -> String {
    x.round_half_up(DECIMALS)
}

pub fn emit_report(report: &EvaluationReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut b = serde_json::to_vec_pretty(report).expect("report serializes");
            b.push(b'\n');
            b
        }
        ReportFormat::Markdown => render_markdown(report).into_bytes(),
    }
}

fn render_markdown(report: &EvaluationReport) -> String {
    let mut out = format!(
        "# Evaluation: {}\n\nSamples: {}\n\n| Anomaly | Always-Positive Baseline | Proportional Baseline | Accuracy |\n|---|---|---|---|\n",
        report.dataset_id, report.sample_count
    );
    for (s, b) in report.per_anomaly.iter().zip(&report.baselines) {
        out.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            s.anomaly_name,
            r3(b.always_positive),
            r3(b.proportional_chance),
            r3(s.accuracy)
        ));
    }
    out.push_str(&format!("\nDataset average accuracy: {}\n", r3(report.dataset_average)));
    if let Some(a) = &report.ablation {
        out.push_str(&format!(
            "\nWith retrieval: {}. Without retrieval: {}. Delta: {}.\n",
            r3(a.with_retrieval),
            r3(a.without_retrieval),
            r3(a.delta)
        ));
    }
    out
}

/// Dataset-level table of with/without-retrieval averages.
pub fn render_ablation_markdown(rows: &[(String, Ablation)]) -> String {
    let mut out = String::from(
        "# Retrieval ablation\n\n| Dataset | With Retrieval | Without Retrieval | Delta |\n|---|---|---|---|\n",
    );
    for (id, a) in rows {
        out.push_str(&format!(
            "| {id} | {} | {} | {} |\n",
            r3(a.with_retrieval),
            r3(a.without_retrieval),
            r3(a.delta)
        ));
    }
    if let Ok(m) = mean_delta(&rows.iter().map(|(_, a)| *a).collect::<Vec<_>>()) {
        out.push_str(&format!("\nMean delta: {}\n", r3(m)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(s: &str) -> Exact {
        Exact::from_decimal_str(s).unwrap()
    }

    fn vecs(rows: &[(&str, Vec<u8>)]) -> Vectors {
        rows.iter()
            .map(|(id, b)| (id.to_string(), OneHotVector::from_bits("t", b.clone()).unwrap()))
            .collect()
    }

    #[test]
    fn decimals_and_rounding() {
        assert_eq!(d("0.738"), Exact::new(738, 1000));
        assert_eq!(d("1"), Exact::one());
        assert_eq!(d(".5"), Exact::new(1, 2));
        assert!(Exact::from_decimal_str("1e3").is_err());
        assert!(Exact::from_decimal_str(".").is_err());
        assert_eq!(Exact::new(12375, 100_000).round_half_up(3), "0.124");
        assert_eq!(Exact::new(1, 8).round_half_up(2), "0.13");
        assert_eq!(Exact::new(2, 3).round_half_up(3), "0.667");
        assert_eq!(Exact::new(-1, 8).round_half_up(2), "-0.13");
        assert_eq!(Exact::new(-1, 10_000).round_half_up(3), "0.000");
        assert_eq!(Exact::one().round_half_up(3), "1.000");
        assert_eq!("7/10".parse::<Exact>().unwrap(), d("0.7"));
    }

    #[test]
    fn seven_of_ten() {
        let truths = vecs(&(0..10).map(|i| (["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"][i], vec![1])).collect::<Vec<_>>());
        let mut preds = truths.clone();
        for id in ["a", "b", "c"] {
            preds.insert(id.into(), OneHotVector::from_bits("t", vec![0]).unwrap());
        }
        let s = anomaly_accuracy(&preds, &truths, 0, "X").unwrap();
        assert_eq!(s.accuracy, d("0.7"));
        assert_eq!(s.counts.total(), 10);
        assert_eq!(anomaly_accuracy(&truths, &truths, 0, "X").unwrap().accuracy, Exact::one());
    }

    #[test]
    fn inversion_and_errors() {
        let t = vecs(&[("a", vec![1, 0]), ("b", vec![0, 1])]);
        let p = vecs(&[("a", vec![0, 1]), ("b", vec![1, 0])]);
        assert_eq!(anomaly_accuracy(&p, &t, 1, "X").unwrap().accuracy, Exact::zero());
        let short = vecs(&[("a", vec![0, 1])]);
        match anomaly_accuracy(&short, &t, 0, "X") {
            Err(EvalError::KeyMismatch { missing_predictions, .. }) => assert_eq!(missing_predictions, vec!["b"]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(anomaly_accuracy(&p, &t, 2, "X"), Err(EvalError::IndexOutOfRange { .. })));
        assert_eq!(mean(&[]), Err(EvalError::EmptyAverage));
    }

    #[test]
    fn table_a4_average() {
        let col = ["1", "1", "0.4", "0.8", "0.2", "0.8", "0.6", "1", "1", "0.4", "0.6", "1", "0.8"];
        let m = mean(&col.map(d)).unwrap();
        assert_eq!(m, Exact::new(96, 130));
        assert_eq!(m.round_half_up(3), "0.738");
        assert_eq!(mean(&[d("0.5"), d("0.5")]).unwrap(), d("0.5"));
    }

    #[test]
    fn baselines() {
        assert_eq!(baseline_always_positive(d("0.96")).unwrap(), d("0.96"));
        assert_eq!(baseline_proportional(d("0.5")).unwrap(), d("0.5"));
        assert_eq!(baseline_proportional(Exact::zero()).unwrap(), Exact::one());
        assert_eq!(baseline_proportional(d("0.6")).unwrap(), d("0.52"));
        assert!(baseline_proportional(d("1.5")).is_err());
    }

    #[test]
    fn ablation() {
        let a = Ablation::new(d("0.621"), d("0.471"));
        assert_eq!(a.delta, d("0.150"));
        let rows = [
            Ablation::new(d("0.620"), d("0.610")),
            a,
            Ablation::new(d("0.521"), d("0.401")),
            Ablation::new(d("0.738"), d("0.523")),
        ];
        assert_eq!(mean_delta(&rows).unwrap(), d("0.12375"));
    }

    fn two_anomaly_report() -> EvaluationReport {
        let tax = AnomalyTaxonomy::new("toy", vec!["Soot".into(), "Debris".into()]).unwrap();
        let t = vecs(&[("a", vec![1, 0]), ("b", vec![1, 1]), ("c", vec![0, 0])]);
        let p = vecs(&[("a", vec![1, 0]), ("b", vec![0, 1]), ("c", vec![0, 0])]);
        evaluate(&tax, &p, &t).unwrap()
    }

    #[test]
    fn markdown_layout() {
        let r = two_anomaly_report();
        let md = String::from_utf8(emit_report(&r, ReportFormat::Markdown)).unwrap();
        let expected = "# Evaluation: toy\n\nSamples: 3\n\n| Anomaly | Always-Positive Baseline | Proportional Baseline | Accuracy |\n|---|---|---|---|\n| Soot | 0.667 | 0.556 | 0.667 |\n| Debris | 0.333 | 0.556 | 1.000 |\n\nDataset average accuracy: 0.833\n";
        assert_eq!(md, expected);
        assert_eq!(emit_report(&r, ReportFormat::Markdown), emit_report(&r, ReportFormat::Markdown));
    }

    #[test]
    fn json_round_trip() {
        let mut r = two_anomaly_report();
        r.ablation = Some(ablation_compare(&r, &r).unwrap());
        assert_eq!(r.ablation.unwrap().delta, Exact::zero());
        let back: EvaluationReport = serde_json::from_slice(&emit_report(&r, ReportFormat::Json)).unwrap();
        assert_eq!(back, r);
        let mut other = r.clone();
        other.anomalies.reverse();
        assert!(ablation_compare(&r, &other).is_err());
    }

    fn sets() -> impl Strategy<Value = (Vec<Vec<u8>>, Vec<Vec<u8>>, usize)> {
        (1usize..=13, 1usize..=200).prop_flat_map(|(m, n)| {
            (
                prop::collection::vec(prop::collection::vec(0u8..=1, m), n),
                prop::collection::vec(prop::collection::vec(0u8..=1, m), n),
                0..m,
            )
        })
    }

    fn to_vectors(rows: &[Vec<u8>]) -> Vectors {
        rows.iter()
            .enumerate()
            .map(|(i, b)| (format!("s{i:03}"), OneHotVector::from_bits("t", b.clone()).unwrap()))
            .collect()
    }

    proptest! {
        #[test]
        fn constant_predictors_match_prevalence((truth, _p, j) in sets()) {
            let t = to_vectors(&truth);
            let ones = to_vectors(&truth.iter().map(|r| vec![1; r.len()]).collect::<Vec<_>>());
            let zeros = to_vectors(&truth.iter().map(|r| vec![0; r.len()]).collect::<Vec<_>>());
            let s1 = anomaly_accuracy(&ones, &t, j, "x").unwrap();
            let s0 = anomaly_accuracy(&zeros, &t, j, "x").unwrap();
            prop_assert_eq!(s1.accuracy, s1.prevalence);
            prop_assert_eq!(s0.accuracy, Exact::one() - s0.prevalence);
        }

        #[test]
        fn proportional_bounds(n in 0i128..=1000) {
            let b = baseline_proportional(Exact::new(n, 1000)).unwrap();
            prop_assert!(b >= Exact::new(1, 2) && b <= Exact::one());
        }

        #[test]
        fn average_is_permutation_invariant(mut xs in prop::collection::vec(0i128..=100, 1..20)) {
            let a = mean(&xs.iter().map(|&x| Exact::new(x, 100)).collect::<Vec<_>>()).unwrap();
            xs.reverse();
            let n = xs.len();
            xs.rotate_left(1 % n);
            let b = mean(&xs.iter().map(|&x| Exact::new(x, 100)).collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn matches_brute_force_recount((truth, pred, j) in sets()) {
            let s = anomaly_accuracy(&to_vectors(&pred), &to_vectors(&truth), j, "x").unwrap();
            let matches = truth.iter().zip(&pred).filter(|(t, p)| t[j] == p[j]).count();
            prop_assert_eq!(s.accuracy, Exact::new(matches as i128, truth.len() as i128));
        }
    }
}
