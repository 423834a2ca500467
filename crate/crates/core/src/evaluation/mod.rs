//! Metrics, ground truth, synthetic archives, the bootstrap protocol and the
//! supervised-vs-semi-supervised benchmark.

mod benchmark;
mod bootstrap;
mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClassTag, Sample};
use crate::error::{Error, Result};
use crate::linear_head::Scorer;

pub use benchmark::{
    benchmark_specs, compare_supervised_semisupervised, BenchmarkCase, mean_std, write_benchmark_csv, BenchmarkRow,
    BENCHMARK_HEADER,
};
pub use bootstrap::{bootstrap_step, run_bootstrap_iterations, BootstrapRound, BootstrapStep};
pub use synthetic::{generate_synthetic, seed_examples, SyntheticData, SyntheticSpec};

/// Threshold on P_T above which a prediction counts as task.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn record(&mut self, truth: ClassTag, predicted: ClassTag) {
        match (truth, predicted) {
            (ClassTag::Task, ClassTag::Task) => self.tp += 1,
            (ClassTag::Background, ClassTag::Background) => self.tn += 1,
            (ClassTag::Background, ClassTag::Task) => self.fp += 1,
            (ClassTag::Task, ClassTag::Background) => self.fn_ += 1,
        }
    }
}

/// `(TP + TN) / total` as an exact fraction in lowest terms.
pub fn accuracy_exact(c: &ConfusionCounts) -> Result<Ratio<u64>> {
    if c.total() == 0 {
        return Err(Error::range("accuracy of an empty confusion matrix"));
    }
    Ok(Ratio::new(c.tp + c.tn, c.total()))
}

pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    let r = accuracy_exact(c)?;
    Ok(*r.numer() as f64 / *r.denom() as f64)
}

/// Share of a class's promoted samples that really belong to it.
pub fn precision_class(correct: u64, incorrect: u64) -> Result<f64> {
    let n = correct + incorrect;
    if n == 0 {
        return Err(Error::range("precision over zero samples"));
    }
    Ok(correct as f64 / n as f64)
}

pub fn predicted_class(conf: f64) -> ClassTag {
    if conf >= DECISION_THRESHOLD {
        ClassTag::Task
    } else {
        ClassTag::Background
    }
}

/// Hidden per-sample labels. Curation code only ever sees samples; the
/// labels are reachable only through the scoring helpers below.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    labels: HashMap<String, ClassTag>,
}

#[derive(Serialize, Deserialize)]
struct TruthRow {
    id: String,
    class: ClassTag,
}

impl GroundTruth {
    pub(crate) fn insert(&mut self, id: String, class: ClassTag) {
        self.labels.insert(id, class);
    }

    #[cfg(test)]
    pub(crate) fn get(&self, id: &str) -> Option<ClassTag> {
        self.labels.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn lookup(&self, id: &str) -> Result<ClassTag> {
        self.labels
            .get(id)
            .copied()
            .ok_or_else(|| Error::schema(format!("no ground truth for sample {id}")))
    }

    /// Confusion of thresholded confidences, one per sample id.
    pub fn confusion<'a, I>(&self, scored: I) -> Result<ConfusionCounts>
    where
        I: IntoIterator<Item = (&'a str, f64)>,
    {
        let mut c = ConfusionCounts::default();
        for (id, conf) in scored {
            c.record(self.lookup(id)?, predicted_class(conf));
        }
        Ok(c)
    }

    /// Score `samples` with `scorer` and compare against the truth.
    pub fn evaluate(&self, scorer: &dyn Scorer, samples: &[Sample]) -> Result<ConfusionCounts> {
        let refs: Vec<&Sample> = samples.iter().collect();
        let conf = scorer.score_samples(&refs)?;
        self.confusion(samples.iter().map(|s| s.id.as_str()).zip(conf))
    }

    /// `(correct, incorrect)` for ids all claimed to be `class`.
    pub fn tally<'a, I>(&self, ids: I, class: ClassTag) -> Result<(u64, u64)>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let (mut good, mut bad) = (0, 0);
        for id in ids {
            if self.lookup(id)? == class {
                good += 1;
            } else {
                bad += 1;
            }
        }
        Ok((good, bad))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut ids: Vec<&String> = self.labels.keys().collect();
        ids.sort();
        let mut w = csv::Writer::from_writer(Vec::new());
        for id in ids {
            w.serialize(TruthRow {
                id: id.clone(),
                class: self.labels[id],
            })
            .map_err(|e| Error::schema(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::schema(e.to_string()))?;
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path, 0, e.to_string()))?;
        let mut truth = Self::default();
        for row in r.deserialize() {
            let row: TruthRow = row.map_err(|e: csv::Error| {
                let line = e.position().map_or(0, |p| p.line());
                Error::parse(path, line, e.to_string())
            })?;
            truth.insert(row.id, row.class);
        }
        Ok(truth)
    }
}
