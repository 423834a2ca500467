//! The weighted archival corpus.
//!
//! A corpus holds two [`HistoryGroup`]s: every capture at a task-labeled
//! location and every capture at a background-labeled location. Each sample
//! carries an integer loss weight (`alpha`) and the task-class confidence of
//! the most recent model. The first `seed_count` entries of each group are
//! the human-labeled seeds.

mod io;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tilegrid::TileKey;

pub use io::{
    load_corpus, load_labeled, load_state_into, read_embeddings, read_metadata, read_state, save_corpus,
    save_labeled, write_embeddings, write_metadata, write_state, CorpusPaths, MetadataRow,
    StateRecord, EMBEDDINGS_MAGIC,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassTag {
    Task,
    Background,
}

impl ClassTag {
    /// Binary target of the task-class detector.
    pub fn target(self) -> f64 {
        match self {
            ClassTag::Task => 1.0,
            ClassTag::Background => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassTag::Task => "task",
            ClassTag::Background => "background",
        }
    }
}

impl fmt::Display for ClassTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task" => Ok(ClassTag::Task),
            "background" => Ok(ClassTag::Background),
            other => Err(Error::schema(format!("unknown class {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub location_id: String,
    pub tile: TileKey,
    pub capture_date: NaiveDate,
    pub embedding: Vec<f32>,
    pub seed_label: Option<ClassTag>,
}

/// An embedding with a known class, used for validation and test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub sample: Sample,
    pub label: ClassTag,
}

/// Calendar-month distance `later - earlier`, ignoring the day of month.
pub fn months_between(later: NaiveDate, earlier: NaiveDate) -> i64 {
    let index = |d: NaiveDate| i64::from(d.year()) * 12 + i64::from(d.month0());
    index(later) - index(earlier)
}

/// Φ_T or Φ_B with aligned loss weights and task confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryGroup {
    pub class_tag: ClassTag,
    pub samples: Vec<Sample>,
    pub alpha: Vec<u32>,
    pub conf: Vec<f64>,
}

impl HistoryGroup {
    pub fn new(class_tag: ClassTag) -> Self {
        Self {
            class_tag,
            samples: Vec::new(),
            alpha: Vec::new(),
            conf: Vec::new(),
        }
    }

    pub fn push(&mut self, sample: Sample, alpha: u32, conf: f64) {
        self.samples.push(sample);
        self.alpha.push(alpha);
        self.conf.push(conf);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.len() != self.samples.len() || self.conf.len() != self.samples.len() {
            return Err(Error::schema(format!(
                "{} group misaligned: {} samples, {} alphas, {} confidences",
                self.class_tag,
                self.samples.len(),
                self.alpha.len(),
                self.conf.len()
            )));
        }
        if let Some((i, c)) = self
            .conf
            .iter()
            .enumerate()
            .find(|(_, c)| !(0.0..=1.0).contains(*c))
        {
            return Err(Error::schema(format!(
                "{} confidence {c} of {} outside [0, 1]",
                self.class_tag, self.samples[i].id
            )));
        }
        Ok(())
    }
}

pub fn sum_alpha(group: &HistoryGroup) -> u64 {
    group.alpha.iter().map(|&a| u64::from(a)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCorpus {
    pub task: HistoryGroup,
    pub background: HistoryGroup,
    /// Latest capture date across both groups.
    pub date_ref: NaiveDate,
    /// Seeds per class; they occupy the first `seed_count` slots of each group.
    pub seed_count: usize,
    /// Samples at locations with no seed label. Not part of training.
    pub pool: Vec<Sample>,
}

/// Initial confidence before any model has scored a sample.
pub const UNSCORED_CONF: f64 = 0.5;

impl WeightedCorpus {
    /// Build a corpus from a flat sample list.
    ///
    /// Seed-labeled samples define the class of their location. Every other
    /// sample at a labeled location joins that location's group; samples at
    /// unlabeled locations form the pool. Within each group the seeds come
    /// first, both seeds and history keeping input order. Seeds start with
    /// alpha 1 and history with alpha 0.
    pub fn from_samples(samples: Vec<Sample>) -> Result<Self> {
        let mut location_class: HashMap<&str, ClassTag> = HashMap::new();
        for s in &samples {
            if let Some(label) = s.seed_label {
                match location_class.insert(&s.location_id, label) {
                    Some(prev) if prev != label => {
                        return Err(Error::schema(format!(
                            "location {} carries both task and background seeds",
                            s.location_id
                        )))
                    }
                    _ => {}
                }
            }
        }
        let location_class: HashMap<String, ClassTag> = location_class
            .into_iter()
            .map(|(k, v)| (k.to_owned(), v))
            .collect();

        let mut task_seeds = Vec::new();
        let mut task_hist = Vec::new();
        let mut bg_seeds = Vec::new();
        let mut bg_hist = Vec::new();
        let mut pool = Vec::new();
        for s in samples {
            match (s.seed_label, location_class.get(&s.location_id)) {
                (Some(ClassTag::Task), _) => task_seeds.push(s),
                (Some(ClassTag::Background), _) => bg_seeds.push(s),
                (None, Some(ClassTag::Task)) => task_hist.push(s),
                (None, Some(ClassTag::Background)) => bg_hist.push(s),
                (None, None) => pool.push(s),
            }
        }
        if task_seeds.is_empty() || bg_seeds.is_empty() {
            return Err(Error::schema(
                "corpus needs at least one seed sample per class",
            ));
        }
        if task_seeds.len() != bg_seeds.len() {
            return Err(Error::schema(format!(
                "seed counts differ between classes: {} task, {} background",
                task_seeds.len(),
                bg_seeds.len()
            )));
        }
        let seed_count = task_seeds.len();

        let build = |tag, seeds: Vec<Sample>, hist: Vec<Sample>| {
            let mut g = HistoryGroup::new(tag);
            for s in seeds {
                g.push(s, 1, UNSCORED_CONF);
            }
            for s in hist {
                g.push(s, 0, UNSCORED_CONF);
            }
            g
        };
        let task = build(ClassTag::Task, task_seeds, task_hist);
        let background = build(ClassTag::Background, bg_seeds, bg_hist);
        let date_ref = task
            .samples
            .iter()
            .chain(&background.samples)
            .map(|s| s.capture_date)
            .max()
            .expect("groups are non-empty");

        let corpus = Self {
            task,
            background,
            date_ref,
            seed_count,
            pool,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn group(&self, tag: ClassTag) -> &HistoryGroup {
        match tag {
            ClassTag::Task => &self.task,
            ClassTag::Background => &self.background,
        }
    }

    pub fn group_mut(&mut self, tag: ClassTag) -> &mut HistoryGroup {
        match tag {
            ClassTag::Task => &mut self.task,
            ClassTag::Background => &mut self.background,
        }
    }

    /// Embedding dimension shared by every sample.
    pub fn dim(&self) -> usize {
        self.task.samples[0].embedding.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.background.validate()?;
        if self.task.class_tag != ClassTag::Task || self.background.class_tag != ClassTag::Background
        {
            return Err(Error::schema("group class tags swapped"));
        }
        if self.task.len() < self.seed_count || self.background.len() < self.seed_count {
            return Err(Error::schema("group smaller than seed count"));
        }
        let d = self.dim();
        let all = self
            .task
            .samples
            .iter()
            .chain(&self.background.samples)
            .chain(&self.pool);
        for s in all {
            if s.embedding.len() != d {
                return Err(Error::schema(format!(
                    "sample {} has embedding dimension {}, expected {d}",
                    s.id,
                    s.embedding.len()
                )));
            }
        }
        Ok(())
    }

    /// Every sample with alpha ≥ 1, once, weighted by its alpha.
    pub fn effective_training_multiset(&self) -> Vec<TrainingEntry<'_>> {
        [&self.task, &self.background]
            .into_iter()
            .flat_map(|g| {
                g.samples
                    .iter()
                    .zip(&g.alpha)
                    .filter(|(_, &a)| a > 0)
                    .map(move |(s, &a)| TrainingEntry {
                        embedding: &s.embedding,
                        label: g.class_tag,
                        weight: a,
                    })
            })
            .collect()
    }
}

/// One row of the training multiset: an embedding, its class and its weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingEntry<'a> {
    pub embedding: &'a [f32],
    pub label: ClassTag,
    pub weight: u32,
}
