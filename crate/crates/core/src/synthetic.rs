//! Deterministic synthetic multi-label corpora.
//!
//! The word pool `w0 .. w{vocab_size-1}` is split into trigger words (the
//! first `num_labels * triggers_per_label`) and distractors. Label `k` owns
//! triggers `w{k*t} .. w{k*t + t - 1}`. A sample's labels are drawn as
//! independent Bernoulli(`label_rate`) events, then each co-occurrence rule
//! `(given, then, prob)` resets `then` to present with probability `prob`
//! whenever `given` is present. The text holds one trigger per label plus
//! distractors, shuffled, so the gold set is exactly what the trigger table
//! implies.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RawSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoOccurrence {
    pub given: usize,
    pub then: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_labels: usize,
    pub vocab_size: usize,
    pub triggers_per_label: usize,
    pub label_rate: f64,
    pub co_occurrence: Vec<CoOccurrence>,
    pub min_distractors: usize,
    pub max_distractors: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_labels: 8,
            vocab_size: 60,
            triggers_per_label: 2,
            label_rate: 0.2,
            co_occurrence: Vec::new(),
            min_distractors: 2,
            max_distractors: 6,
            train_size: 200,
            valid_size: 50,
            test_size: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub train: Vec<RawSample>,
    pub valid: Vec<RawSample>,
    pub test: Vec<RawSample>,
}

pub fn label_name(k: usize) -> String {
    format!("L{k}")
}

pub fn word(i: usize) -> String {
    format!("w{i}")
}

impl SyntheticSpec {
    pub fn trigger_capacity(&self) -> usize {
        self.num_labels * self.triggers_per_label
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::SyntheticSpec(m));
        if self.num_labels == 0 || self.triggers_per_label == 0 {
            return fail("num_labels and triggers_per_label must be positive".into());
        }
        if self.trigger_capacity() > self.vocab_size {
            return fail(format!(
                "{} labels x {} triggers need {} words but vocab_size is {}",
                self.num_labels,
                self.triggers_per_label,
                self.trigger_capacity(),
                self.vocab_size
            ));
        }
        if self.max_distractors > 0 && self.trigger_capacity() == self.vocab_size {
            return fail("no words left for distractors".into());
        }
        if self.min_distractors > self.max_distractors {
            return fail("min_distractors exceeds max_distractors".into());
        }
        if !(self.label_rate > 0.0 && self.label_rate <= 1.0) {
            return fail(format!(
                "label_rate must lie in (0, 1], got {}",
                self.label_rate
            ));
        }
        for c in &self.co_occurrence {
            if c.given >= self.num_labels || c.then >= self.num_labels || c.given == c.then {
                return fail(format!("bad co-occurrence rule {c:?}"));
            }
            if !(0.0..=1.0).contains(&c.prob) {
                return fail(format!(
                    "co-occurrence probability {} outside [0, 1]",
                    c.prob
                ));
            }
        }
        Ok(())
    }

    /// Labels implied by the trigger words in `text`, sorted by index.
    pub fn rule_labels(&self, text: &str) -> Vec<usize> {
        let mut labels: Vec<usize> = text
            .split_whitespace()
            .filter_map(|w| w.strip_prefix('w')?.parse::<usize>().ok())
            .filter(|&i| i < self.trigger_capacity())
            .map(|i| i / self.triggers_per_label)
            .collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    fn sample_labels(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        loop {
            let mut present: Vec<bool> = (0..self.num_labels)
                .map(|_| rng.gen::<f64>() < self.label_rate)
                .collect();
            for c in &self.co_occurrence {
                if present[c.given] {
                    present[c.then] = rng.gen::<f64>() < c.prob;
                }
            }
            let labels: Vec<usize> = (0..self.num_labels).filter(|&k| present[k]).collect();
            if !labels.is_empty() {
                return labels;
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> RawSample {
        let labels = self.sample_labels(rng);
        let t = self.triggers_per_label;
        let mut words: Vec<String> = labels
            .iter()
            .map(|&k| word(k * t + rng.gen_range(0..t)))
            .collect();
        let n = rng.gen_range(self.min_distractors..=self.max_distractors);
        let first = self.trigger_capacity();
        for _ in 0..n {
            words.push(word(rng.gen_range(first..self.vocab_size)));
        }
        words.shuffle(rng);
        RawSample {
            text: words.join(" "),
            labels: labels.into_iter().map(label_name).collect(),
        }
    }

    pub fn generate(&self) -> Result<SyntheticCorpus> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut split = |n: usize| (0..n).map(|_| self.sample(&mut rng)).collect::<Vec<_>>();
        let train = split(self.train_size);
        let valid = split(self.valid_size);
        let test = split(self.test_size);
        Ok(SyntheticCorpus { train, valid, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Corpus;
    use crate::graph::{build_counts, conditional_probabilities};

    fn label_index(name: &str) -> usize {
        name[1..].parse().unwrap()
    }

    #[test]
    fn generated_gold_is_rule_consistent() {
        let spec = SyntheticSpec {
            seed: 5,
            ..SyntheticSpec::default()
        };
        let c = spec.generate().unwrap();
        assert_eq!(c.train.len(), 200);
        for s in c.train.iter().chain(&c.valid).chain(&c.test) {
            let gold: Vec<usize> = s.labels.iter().map(|l| label_index(l)).collect();
            assert!(!gold.is_empty());
            assert_eq!(spec.rule_labels(&s.text), gold);
        }
    }

    #[test]
    fn identical_spec_identical_corpus() {
        let spec = SyntheticSpec::default();
        assert_eq!(spec.generate().unwrap(), spec.generate().unwrap());
        let other = SyntheticSpec {
            seed: 1,
            ..SyntheticSpec::default()
        };
        assert_ne!(spec.generate().unwrap(), other.generate().unwrap());
    }

    #[test]
    fn trigger_capacity_enforced() {
        let spec = SyntheticSpec {
            num_labels: 40,
            vocab_size: 60,
            ..SyntheticSpec::default()
        };
        assert!(matches!(spec.generate(), Err(Error::SyntheticSpec(_))));
    }

    fn cond_prob_by_label(spec: &SyntheticSpec) -> (Vec<Vec<f64>>, Vec<f64>) {
        let corpus = spec.generate().unwrap();
        let c = Corpus::from_raw(&corpus.train, &[], &[]).unwrap();
        let counts = build_counts(&c.train.label_sets(), c.labels.len()).unwrap();
        let p = conditional_probabilities(&counts);
        let k = spec.num_labels;
        let mut out = vec![vec![0.0; k]; k];
        let mut marginal = vec![0.0; k];
        for i in 0..c.labels.len() {
            let li = label_index(c.labels.name(i).unwrap());
            marginal[li] = counts.occurrences()[i] as f64 / c.train.len() as f64;
            for j in 0..c.labels.len() {
                out[li][label_index(c.labels.name(j).unwrap())] = p.at(i, j);
            }
        }
        (out, marginal)
    }

    #[test]
    fn bias_controls_conditional_probability() {
        let spec = SyntheticSpec {
            train_size: 1000,
            co_occurrence: vec![CoOccurrence {
                given: 1,
                then: 2,
                prob: 0.9,
            }],
            seed: 17,
            ..SyntheticSpec::default()
        };
        let (p, _) = cond_prob_by_label(&spec);
        assert!((p[1][2] - 0.9).abs() <= 0.05, "P_12 = {}", p[1][2]);
    }

    #[test]
    fn zero_bias_tracks_marginal_rates() {
        let spec = SyntheticSpec {
            train_size: 4000,
            seed: 23,
            ..SyntheticSpec::default()
        };
        let (p, marginal) = cond_prob_by_label(&spec);
        for i in 0..spec.num_labels {
            for j in 0..spec.num_labels {
                if i != j {
                    // Rejecting empty samples lifts the marginals slightly
                    // above label_rate; P(j | i) is unaffected by it.
                    assert!(
                        (p[i][j] - spec.label_rate).abs() <= 0.05,
                        "P_{i}{j} = {}",
                        p[i][j]
                    );
                    assert!(
                        (p[i][j] - marginal[j]).abs() <= 0.08,
                        "P_{i}{j} = {}",
                        p[i][j]
                    );
                }
            }
        }
    }
}
