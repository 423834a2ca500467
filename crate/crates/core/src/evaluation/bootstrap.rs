//! Moving the most confident test predictions into the training set.

use serde::{Deserialize, Serialize};

use super::{accuracy, precision_class, GroundTruth};
use crate::corpus::{ClassTag, LabeledExample, Sample, TrainingEntry};
use crate::error::{Error, Result};
use crate::linear_head::{accuracy_on, train_entries, LinearHead, Scorer, TrainConfig};
use crate::selection::top_k_heap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapStep {
    pub moved_task: usize,
    pub moved_background: usize,
    /// Absent when nothing was moved.
    pub precision_task: Option<f64>,
    pub precision_background: Option<f64>,
}

/// Promote the `step_size` test samples with the highest P_T as task and
/// the `step_size` with the lowest P_T as background.
///
/// The two picks are disjoint: the background pick is made among the
/// samples left after the task pick.
pub fn bootstrap_step(
    train: &mut Vec<LabeledExample>,
    test: &mut Vec<Sample>,
    model: &dyn Scorer,
    step_size: usize,
    truth: &GroundTruth,
) -> Result<BootstrapStep> {
    if 2 * step_size > test.len() {
        return Err(Error::range(format!(
            "step size {step_size} per class exceeds the {} test samples",
            test.len()
        )));
    }
    if step_size == 0 {
        return Ok(BootstrapStep {
            moved_task: 0,
            moved_background: 0,
            precision_task: None,
            precision_background: None,
        });
    }
    let refs: Vec<&Sample> = test.iter().collect();
    let conf = model.score_samples(&refs)?;

    let task_pick = top_k_heap(&conf, step_size, true)?;
    let mut taken = vec![false; test.len()];
    task_pick.iter().for_each(|&i| taken[i] = true);
    let rest: Vec<usize> = (0..test.len()).filter(|&i| !taken[i]).collect();
    let rest_conf: Vec<f64> = rest.iter().map(|&i| conf[i]).collect();
    let bg_pick: Vec<usize> = top_k_heap(&rest_conf, step_size, false)?
        .into_iter()
        .map(|j| rest[j])
        .collect();
    bg_pick.iter().for_each(|&i| taken[i] = true);

    let (tc, ti) = truth.tally(task_pick.iter().map(|&i| test[i].id.as_str()), ClassTag::Task)?;
    let (bc, bi) = truth.tally(bg_pick.iter().map(|&i| test[i].id.as_str()), ClassTag::Background)?;

    let mut label = vec![None; test.len()];
    task_pick.iter().for_each(|&i| label[i] = Some(ClassTag::Task));
    bg_pick.iter().for_each(|&i| label[i] = Some(ClassTag::Background));
    let old = std::mem::take(test);
    for (s, l) in old.into_iter().zip(label) {
        match l {
            Some(label) => train.push(LabeledExample { sample: s, label }),
            None => test.push(s),
        }
    }
    Ok(BootstrapStep {
        moved_task: task_pick.len(),
        moved_background: bg_pick.len(),
        precision_task: Some(precision_class(tc, ti)?),
        precision_background: Some(precision_class(bc, bi)?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRound {
    pub round: usize,
    pub train_task: usize,
    pub train_background: usize,
    pub test_size: usize,
    /// Accuracy of this round's model on the remaining test set.
    pub test_accuracy: f64,
    pub validation_accuracy: Option<f64>,
    /// Promotion that produced this round's training set; absent for round 0.
    pub step: Option<BootstrapStep>,
}

impl BootstrapRound {
    pub fn train_total(&self) -> usize {
        self.train_task + self.train_background
    }
}

fn fit(train: &[LabeledExample], validation: &[LabeledExample], cfg: &TrainConfig) -> Result<LinearHead> {
    let entries: Vec<TrainingEntry<'_>> = train
        .iter()
        .map(|e| TrainingEntry {
            embedding: &e.sample.embedding,
            label: e.label,
            weight: 1,
        })
        .collect();
    Ok(train_entries(&entries, cfg, validation)?.head)
}

fn round_report(
    round: usize,
    train: &[LabeledExample],
    test: &[Sample],
    head: &LinearHead,
    validation: &[LabeledExample],
    truth: &GroundTruth,
    step: Option<BootstrapStep>,
) -> Result<BootstrapRound> {
    let confusion = truth.evaluate(head, test)?;
    debug_assert_eq!(confusion.total() as usize, test.len());
    let train_task = train.iter().filter(|e| e.label == ClassTag::Task).count();
    Ok(BootstrapRound {
        round,
        train_task,
        train_background: train.len() - train_task,
        test_size: test.len(),
        test_accuracy: accuracy(&confusion)?,
        validation_accuracy: if validation.is_empty() {
            None
        } else {
            Some(accuracy_on(head, validation)?)
        },
        step,
    })
}

/// Train, then `rounds` times promote `step_size` per class and retrain.
/// Returns the baseline report followed by one report per round.
#[allow(clippy::too_many_arguments)]
pub fn run_bootstrap_iterations(
    train: &mut Vec<LabeledExample>,
    validation: &[LabeledExample],
    test: &mut Vec<Sample>,
    step_size: usize,
    rounds: usize,
    cfg: &TrainConfig,
    truth: &GroundTruth,
) -> Result<Vec<BootstrapRound>> {
    let mut head = fit(train, validation, cfg)?;
    let mut reports = vec![round_report(0, train, test, &head, validation, truth, None)?];
    for round in 1..=rounds {
        if 2 * step_size > test.len() {
            return Err(Error::range(format!(
                "round {round}: {} test samples left, {} needed",
                test.len(),
                2 * step_size
            )));
        }
        let step = bootstrap_step(train, test, &head, step_size, truth)?;
        head = fit(train, validation, cfg)?;
        reports.push(round_report(round, train, test, &head, validation, truth, Some(step))?);
    }
    Ok(reports)
}
