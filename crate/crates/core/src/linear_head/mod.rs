//! Single linear layer over frozen embeddings, trained on the alpha-weighted
//! binary cross-entropy.

mod external;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClassTag, LabeledExample, Sample, TrainingEntry, WeightedCorpus};
use crate::error::{Error, Result};

pub use external::{serve_request, ExternalScorer, ScoreRequest, ScoreResponse};

/// Anything that can turn samples into task-class confidences.
pub trait Scorer: Sync {
    fn score_samples(&self, samples: &[&Sample]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub w: Vec<f64>,
    pub b: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of a logit against a 0/1 target.
fn bce(z: f64, target: f64) -> f64 {
    if target > 0.5 {
        softplus(-z)
    } else {
        softplus(z)
    }
}

impl LinearHead {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w: vec![0.0; dim],
            b: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn logit(&self, e: &[f32]) -> Result<f64> {
        if e.len() != self.w.len() {
            return Err(Error::schema(format!(
                "embedding dimension {} does not match head dimension {}",
                e.len(),
                self.w.len()
            )));
        }
        Ok(self.logit_unchecked(e))
    }

    fn logit_unchecked(&self, e: &[f32]) -> f64 {
        self.w
            .iter()
            .zip(e)
            .fold(self.b, |acc, (w, &x)| acc + w * f64::from(x))
    }

    /// P_T, the probability of the task class. P_B is `1 - P_T`.
    pub fn predict_confidence(&self, e: &[f32]) -> Result<f64> {
        self.logit(e).map(sigmoid)
    }

    pub fn background_confidence(&self, e: &[f32]) -> Result<f64> {
        self.predict_confidence(e).map(|p| 1.0 - p)
    }

    fn is_finite(&self) -> bool {
        self.b.is_finite() && self.w.iter().all(|w| w.is_finite())
    }
}

impl Scorer for LinearHead {
    fn score_samples(&self, samples: &[&Sample]) -> Result<Vec<f64>> {
        samples
            .iter()
            .map(|s| self.predict_confidence(&s.embedding))
            .collect()
    }
}

/// Σ α · BCE over the given entries.
pub fn weighted_loss_entries(head: &LinearHead, entries: &[TrainingEntry<'_>]) -> Result<f64> {
    let mut total = 0.0;
    for e in entries {
        total += f64::from(e.weight) * bce(head.logit(e.embedding)?, e.label.target());
    }
    Ok(total)
}

/// The corpus loss: every sample's cross-entropy scaled by its alpha.
pub fn weighted_loss(head: &LinearHead, corpus: &WeightedCorpus) -> Result<f64> {
    weighted_loss_entries(head, &corpus.effective_training_multiset())
}

/// Analytic gradient of [`weighted_loss_entries`]: `(∂/∂w, ∂/∂b)`.
pub fn loss_gradient(head: &LinearHead, entries: &[TrainingEntry<'_>]) -> Result<(Vec<f64>, f64)> {
    let mut gw = vec![0.0; head.dim()];
    let mut gb = 0.0;
    for e in entries {
        let residual = sigmoid(head.logit(e.embedding)?) - e.label.target();
        let scale = f64::from(e.weight) * residual;
        for (g, &x) in gw.iter_mut().zip(e.embedding) {
            *g += scale * f64::from(x);
        }
        gb += scale;
    }
    Ok((gw, gb))
}

/// Parameter `p` of the head, with the bias at index `dim`.
fn param_mut(head: &mut LinearHead, p: usize) -> &mut f64 {
    if p < head.w.len() {
        &mut head.w[p]
    } else {
        &mut head.b
    }
}

/// Finite-difference step used by [`gradient_check`].
pub const GRADIENT_CHECK_STEP: f64 = 1e-5;

/// Largest relative disagreement between the analytic gradient and central
/// finite differences, over every parameter. Denominators are floored at
/// 1e-6 so that vanishing components compare absolutely.
pub fn gradient_check(head: &LinearHead, entries: &[TrainingEntry<'_>]) -> Result<f64> {
    let (gw, gb) = loss_gradient(head, entries)?;
    let h = GRADIENT_CHECK_STEP;
    let mut worst = 0.0f64;
    let mut probe = head.clone();
    for (p, analytic) in gw.into_iter().chain([gb]).enumerate() {
        let orig = param_mut(&mut probe, p).to_owned();
        *param_mut(&mut probe, p) = orig + h;
        let up = weighted_loss_entries(&probe, entries)?;
        *param_mut(&mut probe, p) = orig - h;
        let down = weighted_loss_entries(&probe, entries)?;
        *param_mut(&mut probe, p) = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Weighted loss divided by total weight, after the epoch.
    pub mean_loss: f64,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// The checkpoint with the best validation accuracy (earliest on ties),
    /// or the last epoch when no validation set was given.
    pub head: LinearHead,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    /// Every parameter vector visited, one per epoch (epoch 0 = initialization).
    pub trajectory: Vec<LinearHead>,
}

impl TrainOutcome {
    pub fn best_validation_accuracy(&self) -> Option<f64> {
        self.metrics[self.best_epoch].validation_accuracy
    }
}

/// Fraction of examples whose thresholded P_T (≥ 0.5 means task) matches the label.
pub fn accuracy_on(head: &LinearHead, examples: &[LabeledExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::range("accuracy of an empty set"));
    }
    let mut correct = 0usize;
    for ex in examples {
        let predicted = if head.predict_confidence(&ex.sample.embedding)? >= 0.5 {
            ClassTag::Task
        } else {
            ClassTag::Background
        };
        correct += usize::from(predicted == ex.label);
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Merge entries with identical class and embedding bits into one entry
/// carrying the summed weight, keeping first-occurrence order. A sample
/// with alpha `k` and `k` physical copies of it therefore train identically.
fn coalesce<'a>(entries: &[TrainingEntry<'a>]) -> Vec<TrainingEntry<'a>> {
    let mut index: HashMap<(ClassTag, Vec<u32>), usize> = HashMap::with_capacity(entries.len());
    let mut out: Vec<TrainingEntry<'a>> = Vec::with_capacity(entries.len());
    for e in entries.iter().filter(|e| e.weight > 0) {
        let key = (e.label, e.embedding.iter().map(|x| x.to_bits()).collect());
        match index.get(&key) {
            Some(&i) => out[i].weight += e.weight,
            None => {
                index.insert(key, out.len());
                out.push(*e);
            }
        }
    }
    out
}

pub fn train(
    corpus: &WeightedCorpus,
    cfg: &TrainConfig,
    validation: &[LabeledExample],
) -> Result<TrainOutcome> {
    train_entries(&corpus.effective_training_multiset(), cfg, validation)
}

/// Mini-batch SGD on the weighted loss, starting from a zero head.
///
/// Each step moves along the batch gradient divided by the batch's total
/// weight. Batch order comes from a ChaCha8 stream seeded with `cfg.seed`,
/// so identical inputs give bitwise-identical heads.
pub fn train_entries(
    entries: &[TrainingEntry<'_>],
    cfg: &TrainConfig,
    validation: &[LabeledExample],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let entries = coalesce(entries);
    for tag in [ClassTag::Task, ClassTag::Background] {
        if !entries.iter().any(|e| e.label == tag) {
            return Err(Error::Config(format!("no {tag} samples with alpha >= 1")));
        }
    }
    let dim = entries[0].embedding.len();
    if let Some(bad) = entries.iter().find(|e| e.embedding.len() != dim) {
        return Err(Error::schema(format!(
            "training embedding of dimension {} among dimension {dim}",
            bad.embedding.len()
        )));
    }
    let total_weight: f64 = entries.iter().map(|e| f64::from(e.weight)).sum();

    let evaluate = |head: &LinearHead, epoch: usize| -> Result<EpochMetrics> {
        let mean_loss = weighted_loss_entries(head, &entries)? / total_weight;
        if !mean_loss.is_finite() || !head.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("non-finite loss {mean_loss}"),
            });
        }
        let validation_accuracy = if validation.is_empty() {
            None
        } else {
            Some(accuracy_on(head, validation)?)
        };
        Ok(EpochMetrics {
            epoch,
            mean_loss,
            validation_accuracy,
        })
    };

    let mut head = LinearHead::zeros(dim);
    let mut metrics = vec![evaluate(&head, 0)?];
    let mut trajectory = vec![head.clone()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..entries.len()).collect();
    let mut gw = vec![0.0; dim];

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(cfg.batch_size) {
            gw.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            let mut weight = 0.0;
            for &i in batch {
                let e = &entries[i];
                let residual = sigmoid(head.logit_unchecked(e.embedding)) - e.label.target();
                let scale = f64::from(e.weight) * residual;
                for (g, &x) in gw.iter_mut().zip(e.embedding) {
                    *g += scale * f64::from(x);
                }
                gb += scale;
                weight += f64::from(e.weight);
            }
            let step = cfg.learning_rate / weight;
            for (w, g) in head.w.iter_mut().zip(&gw) {
                *w -= step * g;
            }
            head.b -= step * gb;
        }
        metrics.push(evaluate(&head, epoch)?);
        trajectory.push(head.clone());
    }

    let best_epoch = if validation.is_empty() {
        cfg.epochs
    } else {
        let mut best = 0;
        for m in &metrics {
            if m.validation_accuracy > metrics[best].validation_accuracy {
                best = m.epoch;
            }
        }
        best
    };
    Ok(TrainOutcome {
        head: trajectory[best_epoch].clone(),
        best_epoch,
        metrics,
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::test_support::{sample, small_corpus};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn entry(e: &[f32], label: ClassTag, weight: u32) -> TrainingEntry<'_> {
        TrainingEntry {
            embedding: e,
            label,
            weight,
        }
    }

    #[test]
    fn zero_head_is_undecided() {
        let h = LinearHead::zeros(3);
        assert_eq!(h.predict_confidence(&[5.0, -2.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn hand_computed_confidence() {
        let h = LinearHead { w: vec![1.0, -1.0], b: 0.0 };
        let p = h.predict_confidence(&[2.0, 1.0]).unwrap();
        assert!((p - 0.731_058_6).abs() < 1e-7);
        assert!(matches!(h.predict_confidence(&[1.0]), Err(Error::Schema(_))));
    }

    #[test]
    fn class_probabilities_sum_to_one() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let h = LinearHead {
                w: (0..4).map(|_| r.gen_range(-5.0..5.0)).collect(),
                b: r.gen_range(-5.0..5.0),
            };
            let e: Vec<f32> = (0..4).map(|_| r.gen_range(-3.0..3.0)).collect();
            let pt = h.predict_confidence(&e).unwrap();
            let pb = h.background_confidence(&e).unwrap();
            assert!((pt + pb - 1.0).abs() <= f64::EPSILON);
            assert!((0.0..=1.0).contains(&pt));
        }
    }

    #[test]
    fn confidence_is_monotone_in_logit() {
        let mut prev = 0.0;
        for i in -400..=400 {
            let p = sigmoid(f64::from(i) / 20.0);
            assert!(p > prev);
            prev = p;
        }
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn unit_alpha_loss_is_plain_cross_entropy() {
        let mut c = small_corpus(3, 1);
        c.task.alpha.iter_mut().for_each(|a| *a = 1);
        c.background.alpha.iter_mut().for_each(|a| *a = 1);
        let h = LinearHead { w: vec![0.3, -0.1], b: 0.2 };
        let mut plain = 0.0;
        for (g, y) in [(&c.task, 1.0f64), (&c.background, 0.0)] {
            for s in &g.samples {
                let p = h.predict_confidence(&s.embedding).unwrap();
                plain -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
        }
        let l = weighted_loss(&h, &c).unwrap();
        assert!((l - plain).abs() < 1e-12 * plain.max(1.0));
    }

    #[test]
    fn zero_alpha_sample_is_inert() {
        let mut c = small_corpus(3, 1);
        c.task.alpha[4] = 0;
        let h = LinearHead { w: vec![0.7, 0.05], b: -0.1 };
        let with = weighted_loss(&h, &c).unwrap();
        let mut without = c.clone();
        without.task.samples.remove(4);
        without.task.alpha.remove(4);
        without.task.conf.remove(4);
        assert_eq!(with, weighted_loss(&h, &without).unwrap());
    }

    #[test]
    fn doubled_alpha_equals_duplicate_loss() {
        // 5-sample fixture: weight 2 on sample 1 against an explicit copy
        let embs: Vec<Vec<f32>> = vec![
            vec![0.5, 1.0],
            vec![-1.0, 0.25],
            vec![2.0, -0.5],
            vec![0.0, 0.75],
            vec![-0.3, -1.2],
        ];
        let labels = [ClassTag::Task, ClassTag::Background, ClassTag::Task, ClassTag::Background, ClassTag::Task];
        let h = LinearHead { w: vec![0.4, -0.9], b: 0.15 };
        let weighted: Vec<_> = embs
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (e, l))| entry(e, l, if i == 1 { 2 } else { 1 }))
            .collect();
        let mut duplicated: Vec<_> = embs.iter().zip(labels).map(|(e, l)| entry(e, l, 1)).collect();
        duplicated.push(entry(&embs[1], labels[1], 1));

        // independent hand expansion of the same sum
        let mut by_hand = 0.0;
        for (e, l) in embs.iter().zip(labels).chain(std::iter::once((&embs[1], labels[1]))) {
            let p = h.predict_confidence(e).unwrap();
            by_hand -= if l == ClassTag::Task { p.ln() } else { (1.0 - p).ln() };
        }
        let a = weighted_loss_entries(&h, &weighted).unwrap();
        let b = weighted_loss_entries(&h, &duplicated).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!((a - by_hand).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let h = LinearHead {
                w: (0..8).map(|_| r.gen_range(-1.0..1.0)).collect(),
                b: r.gen_range(-1.0..1.0),
            };
            let e: Vec<f32> = (0..8).map(|_| StandardNormal.sample(&mut r)).collect();
            let label = if r.gen() { ClassTag::Task } else { ClassTag::Background };
            let err = gradient_check(&h, &[entry(&e, label, r.gen_range(1..4))]).unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn zero_weight_has_zero_gradient() {
        let h = LinearHead { w: vec![0.2, 0.3], b: 0.1 };
        let e = [1.0f32, 2.0];
        let (gw, gb) = loss_gradient(&h, &[entry(&e, ClassTag::Task, 0)]).unwrap();
        assert_eq!(gw, vec![0.0, 0.0]);
        assert_eq!(gb, 0.0);
    }

    #[test]
    fn symmetric_start_gradient() {
        let h = LinearHead::zeros(3);
        let e = [1.5f32, -2.0, 0.5];
        for (label, y) in [(ClassTag::Task, 1.0), (ClassTag::Background, 0.0)] {
            let (gw, gb) = loss_gradient(&h, &[entry(&e, label, 1)]).unwrap();
            for (g, &x) in gw.iter().zip(&e) {
                assert_eq!(*g, (0.5 - y) * f64::from(x));
            }
            assert_eq!(gb, 0.5 - y);
        }
    }

    fn blobs(n: usize, sep: f32, seed: u64, id_prefix: &str) -> Vec<LabeledExample> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..2 * n)
            .map(|i| {
                let label = if i % 2 == 0 { ClassTag::Task } else { ClassTag::Background };
                let shift = if label == ClassTag::Task { sep / 2.0 } else { -sep / 2.0 };
                let x: f32 = StandardNormal.sample(&mut r);
                let y: f32 = StandardNormal.sample(&mut r);
                LabeledExample {
                    sample: sample(&format!("{id_prefix}{i}"), "l", (2020, 1, 1), vec![x + shift, y]),
                    label,
                }
            })
            .collect()
    }

    fn entries_of(ex: &[LabeledExample]) -> Vec<TrainingEntry<'_>> {
        ex.iter().map(|e| entry(&e.sample.embedding, e.label, 1)).collect()
    }

    #[test]
    fn separable_blobs_train_well() {
        // margin of 2σ either side of the boundary: Bayes accuracy Φ(2) ≈ 0.977
        let train_set = blobs(200, 4.0, 1, "t");
        let val = blobs(200, 4.0, 2, "v");
        let out = train_entries(&entries_of(&train_set), &TrainConfig::default(), &val).unwrap();
        assert!(out.best_validation_accuracy().unwrap() >= 0.95);
        assert_eq!(out.metrics.len(), 21);
        assert_eq!(out.head, out.trajectory[out.best_epoch]);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let train_set = blobs(50, 4.0, 1, "t");
        let val = blobs(50, 4.0, 2, "v");
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = train_entries(&entries_of(&train_set), &cfg, &val).unwrap();
        assert_eq!(out.head, LinearHead::zeros(2));
        assert_eq!(out.best_validation_accuracy(), Some(0.5));
    }

    #[test]
    fn training_is_deterministic() {
        let train_set = blobs(80, 2.0, 4, "t");
        let cfg = TrainConfig { seed: 99, ..TrainConfig::default() };
        let a = train_entries(&entries_of(&train_set), &cfg, &[]).unwrap();
        let b = train_entries(&entries_of(&train_set), &cfg, &[]).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.best_epoch, cfg.epochs);
    }

    #[test]
    fn empty_class_is_config_error() {
        let train_set = blobs(10, 2.0, 4, "t");
        let only_task: Vec<_> = entries_of(&train_set)
            .into_iter()
            .filter(|e| e.label == ClassTag::Task)
            .collect();
        assert!(matches!(
            train_entries(&only_task, &TrainConfig::default(), &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn divergence_names_epoch() {
        let big = [3.0e38f32, 3.0e38];
        let small = [-3.0e38f32, -3.0e38];
        let entries = [entry(&big, ClassTag::Background, 1), entry(&small, ClassTag::Task, 1)];
        let cfg = TrainConfig { learning_rate: 1e308, ..TrainConfig::default() };
        match train_entries(&entries, &cfg, &[]) {
            Err(Error::Training { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn duplication_trajectory_matches_weight() {
        let train_set = blobs(20, 2.0, 8, "t");
        let mut weighted = entries_of(&train_set);
        weighted[3].weight = 2;
        let mut duplicated = entries_of(&train_set);
        duplicated.push(duplicated[3]);
        let cfg = TrainConfig { batch_size: 4, seed: 5, ..TrainConfig::default() };
        let a = train_entries(&weighted, &cfg, &[]).unwrap();
        let b = train_entries(&duplicated, &cfg, &[]).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
    }
}
