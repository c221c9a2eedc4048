//! Micro-averaged multi-label metrics and Hamming loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Running counts over evaluated samples. Accumulators built over disjoint
/// shards can be merged in any order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricAccumulator {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub bit_errors: u64,
    pub num_samples: u64,
    pub num_labels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub hamming_loss: f64,
}

impl MetricAccumulator {
    pub fn new(num_labels: usize) -> Self {
        Self {
            num_labels,
            ..Self::default()
        }
    }

    /// Adds one sample. Both sets must hold distinct labels in `0..K`.
    pub fn accumulate(&mut self, gold: &[usize], pred: &[usize]) -> Result<()> {
        let k = self.num_labels;
        let mut g = vec![false; k];
        let mut p = vec![false; k];
        for (set, mask, name) in [(gold, &mut g, "gold"), (pred, &mut p, "predicted")] {
            for &l in set {
                let slot = mask.get_mut(l).ok_or_else(|| {
                    Error::Contract(format!("{name} label {l} out of range for K = {k}"))
                })?;
                *slot = true;
            }
        }
        for (&gi, &pi) in g.iter().zip(&p) {
            match (gi, pi) {
                (true, true) => self.tp += 1,
                (false, true) => {
                    self.fp += 1;
                    self.bit_errors += 1;
                }
                (true, false) => {
                    self.fn_ += 1;
                    self.bit_errors += 1;
                }
                (false, false) => {}
            }
        }
        self.num_samples += 1;
        Ok(())
    }

    pub fn merge(&self, other: &Self) -> Self {
        debug_assert_eq!(self.num_labels, other.num_labels);
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            bit_errors: self.bit_errors + other.bit_errors,
            num_samples: self.num_samples + other.num_samples,
            num_labels: self.num_labels.max(other.num_labels),
        }
    }

    pub fn finalize(&self) -> Metrics {
        let ratio = |num: u64, den: u64| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let slots = self.num_samples * self.num_labels as u64;
        Metrics {
            f1,
            precision,
            recall,
            hamming_loss: ratio(self.bit_errors, slots),
        }
    }
}

impl Metrics {
    /// Flat key-value form.
    pub fn to_map(&self) -> BTreeMap<&'static str, f64> {
        BTreeMap::from([
            ("f1", self.f1),
            ("precision", self.precision),
            ("recall", self.recall),
            ("hamming_loss", self.hamming_loss),
        ])
    }

    pub fn to_key_value(&self) -> String {
        self.to_map()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Renders rows as `Model | F1(+) | P(+) | R(+) | HL(-)`.
pub fn format_table(rows: &[(String, Metrics)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    let mut out = format!(
        "{:<width$} | {:>6} | {:>6} | {:>6} | {:>7}\n",
        "Model", "F1(+)", "P(+)", "R(+)", "HL(-)"
    );
    for (name, m) in rows {
        out.push_str(&format!(
            "{:<width$} | {:>6.3} | {:>6.3} | {:>6.3} | {:>7.4}\n",
            name, m.f1, m.precision, m.recall, m.hamming_loss
        ));
    }
    out
}

pub fn evaluate(gold: &[Vec<usize>], pred: &[Vec<usize>], k: usize) -> Result<Metrics> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} gold sets but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    let mut acc = MetricAccumulator::new(k);
    for (g, p) in gold.iter().zip(pred) {
        acc.accumulate(g, p)?;
    }
    Ok(acc.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let (a, b, c) = (0, 1, 2);
        let mut acc = MetricAccumulator::new(3);
        acc.accumulate(&[a, b], &[a]).unwrap();
        acc.accumulate(&[c], &[b, c]).unwrap();
        assert_eq!((acc.tp, acc.fp, acc.fn_), (2, 1, 1));
        let m = acc.finalize();
        assert_eq!(m.precision, 2.0 / 3.0);
        assert_eq!(m.recall, 2.0 / 3.0);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.hamming_loss, 1.0 / 3.0);
    }

    #[test]
    fn perfect_predictions() {
        let mut acc = MetricAccumulator::new(4);
        acc.accumulate(&[0, 3], &[3, 0]).unwrap();
        acc.accumulate(&[1], &[1]).unwrap();
        assert_eq!((acc.fp, acc.fn_), (0, 0));
        let m = acc.finalize();
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.hamming_loss, 0.0);
    }

    #[test]
    fn empty_predictions() {
        let mut acc = MetricAccumulator::new(2);
        acc.accumulate(&[0], &[]).unwrap();
        assert_eq!(acc.fn_, 1);
        let m = acc.finalize();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut acc = MetricAccumulator::new(2);
        assert!(acc.accumulate(&[2], &[]).is_err());
        assert!(acc.accumulate(&[], &[7]).is_err());
    }

    #[test]
    fn report_keys() {
        let m = Metrics {
            f1: 0.5,
            precision: 0.5,
            recall: 0.5,
            hamming_loss: 0.1,
        };
        let keys: Vec<_> = m.to_map().keys().copied().collect();
        assert_eq!(keys, vec!["f1", "hamming_loss", "precision", "recall"]);
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(v.as_object().unwrap().len(), 4);
        assert!(m.to_key_value().contains("hamming_loss=0.1"));
        let table = format_table(&[("full".into(), m), ("wo/GCN".into(), m)]);
        assert_eq!(table.lines().count(), 3);
        assert!(table.starts_with("Model"));
    }

    fn arb_case(k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        let set = proptest::collection::btree_set(0..k, 0..=k)
            .prop_map(|s| s.into_iter().collect::<Vec<_>>());
        (set.clone(), set)
    }

    proptest! {
        #[test]
        fn merge_equals_single_pass(
            cases in proptest::collection::vec(arb_case(5), 1..30),
            split in 0usize..30,
        ) {
            let split = split.min(cases.len());
            let mut whole = MetricAccumulator::new(5);
            let mut left = MetricAccumulator::new(5);
            let mut right = MetricAccumulator::new(5);
            for (i, (g, p)) in cases.iter().enumerate() {
                whole.accumulate(g, p).unwrap();
                if i < split { left.accumulate(g, p).unwrap() } else { right.accumulate(g, p).unwrap() }
            }
            prop_assert_eq!(left.merge(&right), whole);
            prop_assert_eq!(right.merge(&left), whole);
            let m = whole.finalize();
            prop_assert!((0.0..=1.0).contains(&m.hamming_loss));
            prop_assert!((0.0..=1.0).contains(&m.f1));
            prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-15);
        }
    }
}
