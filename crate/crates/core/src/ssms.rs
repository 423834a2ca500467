//! The semi-supervised model step and the iteration schedule around it.
//!
//! Each step trains a model on the alpha-weighted corpus, re-scores every
//! capture in both groups, then applies the task, background and confounder
//! updates in that order. After the last step every background alpha is
//! incremented once and a final model is trained.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{load_state_into, sum_alpha, write_state, LabeledExample, Sample, WeightedCorpus};
use crate::error::{Error, Result};
use crate::linear_head::{train, LinearHead, Scorer, TrainConfig};
use crate::selection::{update_background, update_confounders, update_task};

/// The default six-step schedule as CSV.
pub const DEFAULT_SCHEDULE_CSV: &str = include_str!("../data/default_schedule.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleStep {
    /// Task window, months.
    pub d_t: u32,
    /// Background window, months.
    pub d_b: u32,
    pub m_t: usize,
    pub m_b: usize,
    pub m_c: usize,
}

impl ScheduleStep {
    pub const fn new(d_t: u32, d_b: u32, m_t: usize, m_b: usize, m_c: usize) -> Self {
        Self { d_t, d_b, m_t, m_b, m_c }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    steps: Vec<ScheduleStep>,
}

impl Schedule {
    pub fn new(steps: Vec<ScheduleStep>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Config("schedule has no steps".into()));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[ScheduleStep] {
        &self.steps
    }

    pub fn from_csv_str(text: &str, origin: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::parse(origin, 1, e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != ["d_t", "d_b", "m_t", "m_b", "m_c"] {
            return Err(Error::parse(origin, 1, "expected header d_t,d_b,m_t,m_b,m_c"));
        }
        let mut steps = Vec::new();
        for record in reader.deserialize() {
            let step: ScheduleStep = record.map_err(|e: csv::Error| {
                let line = e.position().map_or(0, |p| p.line());
                Error::parse(origin, line, e.to_string())
            })?;
            steps.push(step);
        }
        Self::new(steps)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        Self::from_csv_str(&fs::read_to_string(path)?, path)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("d_t,d_b,m_t,m_b,m_c\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{},{},{}\n", s.d_t, s.d_b, s.m_t, s.m_b, s.m_c));
        }
        out
    }

    /// Quotas multiplied by `factor` and rounded, windows unchanged. Used to
    /// run the default schedule on corpora smaller than 100 seeds per class.
    pub fn scaled(&self, factor: f64) -> Self {
        let scale = |m: usize| (m as f64 * factor).round() as usize;
        Self {
            steps: self
                .steps
                .iter()
                .map(|s| ScheduleStep {
                    m_t: scale(s.m_t),
                    m_b: scale(s.m_b),
                    m_c: scale(s.m_c),
                    ..*s
                })
                .collect(),
        }
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::from_csv_str(DEFAULT_SCHEDULE_CSV, Path::new("default_schedule.csv"))
            .expect("bundled schedule parses")
    }
}

/// Builds a scorer from the weighted corpus.
pub trait Trainer {
    type Model: Scorer + Serialize;

    fn train(
        &self,
        corpus: &WeightedCorpus,
        validation: &[LabeledExample],
        seed: u64,
    ) -> Result<Trained<Self::Model>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained<M> {
    pub model: M,
    pub validation_accuracy: Option<f64>,
}

/// The linear head trained by mini-batch SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTrainer {
    pub config: TrainConfig,
}

impl Trainer for LinearTrainer {
    type Model = LinearHead;

    fn train(
        &self,
        corpus: &WeightedCorpus,
        validation: &[LabeledExample],
        seed: u64,
    ) -> Result<Trained<LinearHead>> {
        let cfg = TrainConfig {
            seed,
            ..self.config.clone()
        };
        let out = train(corpus, &cfg, validation)?;
        Ok(Trained {
            validation_accuracy: out.best_validation_accuracy(),
            model: out.head,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    /// 0 is the state before any step.
    pub step: usize,
    pub task_increments: usize,
    pub background_increments: usize,
    pub confounder_increments: usize,
    pub sum_alpha_task: u64,
    pub sum_alpha_background: u64,
    pub validation_accuracy: Option<f64>,
}

impl IterationReport {
    pub fn initial(corpus: &WeightedCorpus) -> Self {
        Self {
            step: 0,
            task_increments: 0,
            background_increments: 0,
            confounder_increments: 0,
            sum_alpha_task: sum_alpha(&corpus.task),
            sum_alpha_background: sum_alpha(&corpus.background),
            validation_accuracy: None,
        }
    }
}

/// Seed for the training and selection randomness of one step.
pub fn step_seed(run_seed: u64, step: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = run_seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Score samples, fanning out over `workers` threads. Output order matches input.
pub fn score_all<S: Scorer + ?Sized>(scorer: &S, samples: &[Sample], workers: usize) -> Result<Vec<f64>> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let workers = workers.max(1).min(refs.len().max(1));
    if workers == 1 {
        return scorer.score_samples(&refs);
    }
    let chunk = refs.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = refs
            .chunks(chunk)
            .map(|part| scope.spawn(move || scorer.score_samples(part)))
            .collect();
        let mut out = Vec::with_capacity(refs.len());
        for h in handles {
            out.extend(h.join().expect("scoring worker panicked")?);
        }
        Ok(out)
    })
}

fn check_quotas(corpus: &WeightedCorpus, step: &ScheduleStep) -> Result<()> {
    let (nt, nb) = (corpus.task.len(), corpus.background.len());
    for (name, m, n) in [("M_T", step.m_t, nt), ("M_B", step.m_b, nb), ("M_C", step.m_c, nb)] {
        if m > n {
            return Err(Error::range(format!("{name} = {m} exceeds group size {n}")));
        }
    }
    Ok(())
}

/// One train → predict → update pass. `index` is the 1-based step number.
#[allow(clippy::too_many_arguments)]
pub fn ssms_step<T: Trainer>(
    corpus: &mut WeightedCorpus,
    step: &ScheduleStep,
    index: usize,
    trainer: &T,
    validation: &[LabeledExample],
    seed: u64,
    workers: usize,
) -> Result<(IterationReport, T::Model)> {
    check_quotas(corpus, step)?;
    let trained = trainer.train(corpus, validation, seed)?;

    let task_conf = score_all(&trained.model, &corpus.task.samples, workers)?;
    let bg_conf = score_all(&trained.model, &corpus.background.samples, workers)?;
    corpus.task.conf = task_conf;
    corpus.background.conf = bg_conf;
    corpus.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task_increments = update_task(corpus, step.m_t, step.d_t, &mut rng)?;
    let background_increments = update_background(corpus, step.m_b, step.d_b, &mut rng)?;
    let confounder_increments = update_confounders(corpus, step.m_c, step.d_b, &mut rng)?;

    let report = IterationReport {
        step: index,
        task_increments,
        background_increments,
        confounder_increments,
        sum_alpha_task: sum_alpha(&corpus.task),
        sum_alpha_background: sum_alpha(&corpus.background),
        validation_accuracy: trained.validation_accuracy,
    };
    Ok((report, trained.model))
}

/// Give every background capture one more unit of weight.
pub fn finalize(corpus: &mut WeightedCorpus) {
    corpus.background.alpha.iter_mut().for_each(|a| *a += 1);
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub run_id: String,
    pub seed: u64,
    /// Where state, models and manifests are written after every step.
    pub state_dir: Option<PathBuf>,
    pub workers: usize,
}

impl RunOptions {
    pub fn in_memory(seed: u64) -> Self {
        Self {
            run_id: format!("run-{seed}"),
            seed,
            state_dir: None,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Last completed step; 0 before any step.
    pub step: usize,
    pub schedule: Vec<ScheduleStep>,
    pub seed: u64,
    pub sum_alpha_task: u64,
    pub sum_alpha_background: u64,
    pub corpus_state_path: PathBuf,
    pub model_path: Option<PathBuf>,
    pub timestamp: String,
    /// Set once the background promotion and final training are done.
    pub finalized: bool,
    pub reports: Vec<IterationReport>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome<M> {
    /// Step 0 (initial sums) followed by one report per schedule step.
    pub reports: Vec<IterationReport>,
    pub final_model: M,
    pub final_validation_accuracy: Option<f64>,
}

impl<M> RunOutcome<M> {
    pub fn task_trajectory(&self) -> Vec<u64> {
        self.reports.iter().map(|r| r.sum_alpha_task).collect()
    }

    pub fn background_trajectory(&self) -> Vec<u64> {
        self.reports.iter().map(|r| r.sum_alpha_background).collect()
    }
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Checkpointer<'a> {
    dir: &'a Path,
    opts: &'a RunOptions,
    steps: &'a [ScheduleStep],
}

impl Checkpointer<'_> {
    fn save<M: Serialize>(
        &self,
        corpus: &WeightedCorpus,
        tag: &str,
        step: usize,
        model: Option<&M>,
        reports: &[IterationReport],
        finalized: bool,
    ) -> Result<()> {
        let state = self.dir.join(format!("state-{tag}.jsonl"));
        let tmp = state.with_extension("tmp");
        write_state(&tmp, corpus)?;
        fs::rename(&tmp, &state)?;
        let model_path = match model {
            Some(m) => {
                let p = self.dir.join(format!("model-{tag}.json"));
                write_json_atomic(&p, m)?;
                Some(p)
            }
            None => None,
        };
        let manifest = RunManifest {
            run_id: self.opts.run_id.clone(),
            step,
            schedule: self.steps.to_vec(),
            seed: self.opts.seed,
            sum_alpha_task: sum_alpha(&corpus.task),
            sum_alpha_background: sum_alpha(&corpus.background),
            corpus_state_path: state,
            model_path,
            timestamp: chrono::Utc::now().to_rfc3339(),
            finalized,
            reports: reports.to_vec(),
        };
        write_json_atomic(&self.dir.join(format!("manifest-{tag}.json")), &manifest)?;
        write_json_atomic(&self.dir.join("manifest.json"), &manifest)
    }
}

/// Run every step, promote the background, and train the final model.
pub fn run_schedule<T: Trainer>(
    corpus: &mut WeightedCorpus,
    steps: &[ScheduleStep],
    trainer: &T,
    validation: &[LabeledExample],
    opts: &RunOptions,
) -> Result<RunOutcome<T::Model>> {
    let reports = vec![IterationReport::initial(corpus)];
    if let Some(dir) = &opts.state_dir {
        fs::create_dir_all(dir)?;
        let cp = Checkpointer { dir, opts, steps };
        cp.save::<T::Model>(corpus, "step-0", 0, None, &reports, false)?;
    }
    continue_schedule(corpus, steps, trainer, validation, opts, reports)
}

/// Continue an interrupted run from its manifest. `corpus` must be the
/// run's corpus as loaded from metadata; its alpha/conf state is replaced
/// by the manifest's.
pub fn resume_schedule<T: Trainer>(
    corpus: &mut WeightedCorpus,
    manifest_path: &Path,
    trainer: &T,
    validation: &[LabeledExample],
    opts: &RunOptions,
) -> Result<RunOutcome<T::Model>> {
    let manifest = RunManifest::read(manifest_path)?;
    if manifest.finalized {
        return Err(Error::Config(format!(
            "run {} is already complete",
            manifest.run_id
        )));
    }
    load_state_into(corpus, &manifest.corpus_state_path)?;
    if sum_alpha(&corpus.task) != manifest.sum_alpha_task
        || sum_alpha(&corpus.background) != manifest.sum_alpha_background
    {
        return Err(Error::schema("corpus state does not match manifest sums"));
    }
    let opts = RunOptions {
        run_id: manifest.run_id.clone(),
        seed: manifest.seed,
        ..opts.clone()
    };
    let mut reports = manifest.reports;
    reports.truncate(manifest.step + 1);
    continue_schedule(corpus, &manifest.schedule, trainer, validation, &opts, reports)
}

fn continue_schedule<T: Trainer>(
    corpus: &mut WeightedCorpus,
    steps: &[ScheduleStep],
    trainer: &T,
    validation: &[LabeledExample],
    opts: &RunOptions,
    mut reports: Vec<IterationReport>,
) -> Result<RunOutcome<T::Model>> {
    if let Some(dir) = &opts.state_dir {
        fs::create_dir_all(dir)?;
    }
    let checkpointer = opts.state_dir.as_deref().map(|dir| Checkpointer { dir, opts, steps });
    let done = reports.len() - 1;
    for (i, step) in steps.iter().enumerate().skip(done) {
        let index = i + 1;
        let (report, model) = ssms_step(
            corpus,
            step,
            index,
            trainer,
            validation,
            step_seed(opts.seed, index),
            opts.workers,
        )?;
        reports.push(report);
        if let Some(cp) = &checkpointer {
            cp.save(corpus, &format!("step-{index}"), index, Some(&model), &reports, false)?;
        }
    }

    finalize(corpus);
    let trained = trainer.train(corpus, validation, step_seed(opts.seed, steps.len() + 1))?;
    if let Some(cp) = &checkpointer {
        cp.save(corpus, "final", steps.len(), Some(&trained.model), &reports, true)?;
    }
    Ok(RunOutcome {
        reports,
        final_model: trained.model,
        final_validation_accuracy: trained.validation_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::test_support::small_corpus;

    fn trainer() -> LinearTrainer {
        LinearTrainer {
            config: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn default_schedule_steps() {
        let s = Schedule::default();
        assert_eq!(
            s.steps(),
            &[
                ScheduleStep::new(6, 24, 0, 0, 500),
                ScheduleStep::new(6, 24, 50, 0, 500),
                ScheduleStep::new(12, 24, 100, 0, 500),
                ScheduleStep::new(12, 24, 150, 0, 500),
                ScheduleStep::new(24, 48, 150, 250, 0),
                ScheduleStep::new(48, 84, 350, 350, 0),
            ]
        );
        let again = Schedule::from_csv_str(&s.to_csv(), Path::new("x")).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn schedule_parse_errors() {
        assert!(matches!(
            Schedule::from_csv_str("d_t,d_b,m_t,m_b,m_c\n", Path::new("s")),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Schedule::from_csv_str("a,b\n1,2\n", Path::new("s")),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            Schedule::from_csv_str("d_t,d_b,m_t,m_b,m_c\n6,24,0,0,5\n6,x,0,0,5\n", Path::new("s")),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn scaled_schedule() {
        let s = Schedule::default().scaled(0.1);
        assert_eq!(s.steps()[0], ScheduleStep::new(6, 24, 0, 0, 50));
        assert_eq!(s.steps()[5], ScheduleStep::new(48, 84, 35, 35, 0));
    }

    #[test]
    fn zero_quota_step_only_refreshes_confidences() {
        let mut c = small_corpus(4, 2);
        let alphas = (c.task.alpha.clone(), c.background.alpha.clone());
        let (report, _) =
            ssms_step(&mut c, &ScheduleStep::new(6, 24, 0, 0, 0), 1, &trainer(), &[], 1, 1).unwrap();
        assert_eq!((c.task.alpha.clone(), c.background.alpha.clone()), alphas);
        assert!(c.task.conf.iter().chain(&c.background.conf).all(|&p| p != 0.5));
        assert_eq!(report.task_increments + report.background_increments + report.confounder_increments, 0);
    }

    #[test]
    fn oversized_quota_is_range_error_before_training() {
        let mut c = small_corpus(2, 1);
        let before = c.clone();
        let err = ssms_step(&mut c, &ScheduleStep::new(6, 24, 0, 0, 7), 1, &trainer(), &[], 1, 1);
        assert!(matches!(err, Err(Error::Range(_))));
        assert_eq!(c, before);
    }

    #[test]
    fn finalize_adds_one_each_call() {
        let mut c = small_corpus(1, 2);
        c.background.alpha = vec![0, 0, 3];
        finalize(&mut c);
        assert_eq!(c.background.alpha, vec![1, 1, 4]);
        finalize(&mut c);
        assert_eq!(c.background.alpha, vec![2, 2, 5]);
        assert_eq!(c.task.alpha, vec![1, 0, 0]);
    }

    #[test]
    fn empty_schedule_finalizes_and_trains() {
        let mut c = small_corpus(3, 2);
        let bg = c.background.len() as u64;
        let out = run_schedule(&mut c, &[], &trainer(), &[], &RunOptions::in_memory(3)).unwrap();
        assert_eq!(out.reports.len(), 1);
        assert_eq!(sum_alpha(&c.background), 3 + bg);
    }

    #[test]
    fn parallel_scoring_matches_serial() {
        let c = small_corpus(7, 3);
        let head = LinearHead { w: vec![0.3, -0.2], b: 0.1 };
        let serial = score_all(&head, &c.task.samples, 1).unwrap();
        for w in [2, 3, 8, 64] {
            assert_eq!(score_all(&head, &c.task.samples, w).unwrap(), serial);
        }
    }

    #[test]
    fn step_seeds_differ() {
        assert_ne!(step_seed(1, 1), step_seed(1, 2));
        assert_ne!(step_seed(1, 1), step_seed(2, 1));
        assert_eq!(step_seed(9, 4), step_seed(9, 4));
    }
}
