//! Gaussian archival corpora with known labels.

use chrono::{Months, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::GroundTruth;
use crate::corpus::{ClassTag, LabeledExample, Sample, WeightedCorpus};
use crate::error::{Error, Result};
use crate::tilegrid::{latlon_to_tile, GeoPoint, TileKey, IMAGERY_ZOOM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub dim: usize,
    /// Labeled locations per class; each contributes one seed.
    pub seeds_per_class: usize,
    /// Held-out single-capture examples per class.
    pub validation_per_class: usize,
    /// Unlabeled locations; their captures form the test pool.
    pub pool_locations: usize,
    /// Distance between the class means in units of the component standard deviation.
    pub separation: f64,
    /// Probability that a pool location hosts the task feature.
    pub task_prevalence: f64,
    pub captures_per_location: usize,
    /// Spacing between successive captures. 0 spaces them one day apart.
    pub capture_interval_months: u32,
    /// Task locations show the feature in at least this many of their most
    /// recent captures; the construction point is drawn uniformly above it.
    pub min_task_captures: usize,
    /// Probability that a historical capture's embedding is drawn from the
    /// other class (occlusion, bad imagery). Labels are unaffected.
    pub noise_rate: f64,
    pub seed: u64,
    /// Date of the newest capture everywhere.
    pub date_ref: NaiveDate,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 8,
            seeds_per_class: 100,
            validation_per_class: 100,
            pool_locations: 200,
            separation: 2.0,
            task_prevalence: 0.5,
            captures_per_location: 6,
            capture_interval_months: 0,
            min_task_captures: 1,
            noise_rate: 0.0,
            seed: 0,
            date_ref: NaiveDate::from_ymd_opt(2023, 6, 28).expect("valid date"),
        }
    }
}

impl SyntheticSpec {
    /// 100 seeds per class, six captures each, all within the same month,
    /// so every update window admits every capture.
    pub fn reference() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::range(m));
        if self.dim == 0 {
            return fail("embedding dimension must be positive".into());
        }
        if self.seeds_per_class == 0 {
            return fail("need at least one labeled location per class".into());
        }
        if self.captures_per_location == 0 {
            return fail("need at least one capture per location".into());
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return fail(format!("separation {} must be finite and non-negative", self.separation));
        }
        if !(self.task_prevalence > 0.0 && self.task_prevalence <= 1.0) {
            return fail(format!("task prevalence {} outside (0, 1]", self.task_prevalence));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return fail(format!("noise rate {} outside [0, 1]", self.noise_rate));
        }
        if self.min_task_captures == 0 || self.min_task_captures > self.captures_per_location {
            return fail(format!(
                "min_task_captures {} outside 1..={}",
                self.min_task_captures, self.captures_per_location
            ));
        }
        if self.capture_interval_months == 0 && self.captures_per_location > 28 {
            return fail("more than 28 daily captures would cross a month boundary".into());
        }
        Ok(())
    }

    fn capture_date(&self, age: usize) -> Result<NaiveDate> {
        let d = if self.capture_interval_months == 0 {
            self.date_ref.checked_sub_days(chrono::Days::new(age as u64))
        } else {
            self.date_ref
                .checked_sub_months(Months::new(self.capture_interval_months * age as u32))
        };
        d.ok_or_else(|| Error::range(format!("capture {age} predates the calendar")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub corpus: WeightedCorpus,
    pub validation: Vec<LabeledExample>,
    /// Labels for every history and pool capture.
    pub truth: GroundTruth,
}

impl SyntheticData {
    /// Pool captures, usable as an unlabeled test set.
    pub fn test_set(&self) -> &[Sample] {
        &self.corpus.pool
    }
}

struct Generator<'a> {
    spec: &'a SyntheticSpec,
    rng: ChaCha8Rng,
    origin: TileKey,
    next_tile: u32,
}

impl Generator<'_> {
    fn embedding(&mut self, class: ClassTag) -> Vec<f32> {
        let half = self.spec.separation / 2.0;
        let shift = match class {
            ClassTag::Task => half,
            ClassTag::Background => -half,
        };
        (0..self.spec.dim)
            .map(|i| {
                let z: f64 = self.rng.sample(StandardNormal);
                (z + if i == 0 { shift } else { 0.0 }) as f32
            })
            .collect()
    }

    fn tile(&mut self) -> TileKey {
        let i = self.next_tile;
        self.next_tile += 1;
        TileKey {
            x: self.origin.x + i % 1024,
            y: self.origin.y + i / 1024,
            zoom: self.origin.zoom,
        }
    }

    /// Captures of one location, newest first, with their true classes.
    fn location(&mut self, loc: &str, is_task: bool) -> Result<Vec<(Sample, ClassTag)>> {
        let n = self.spec.captures_per_location;
        let on = if is_task {
            self.rng.gen_range(self.spec.min_task_captures..=n)
        } else {
            0
        };
        let tile = self.tile();
        let mut out = Vec::with_capacity(n);
        for age in 0..n {
            let truth = if age < on { ClassTag::Task } else { ClassTag::Background };
            let look = if age > 0 && self.rng.gen_bool(self.spec.noise_rate) {
                opposite(truth)
            } else {
                truth
            };
            out.push((
                Sample {
                    id: format!("{loc}-{age}"),
                    location_id: loc.to_owned(),
                    tile,
                    capture_date: self.spec.capture_date(age)?,
                    embedding: self.embedding(look),
                    seed_label: None,
                },
                truth,
            ));
        }
        Ok(out)
    }
}

fn opposite(c: ClassTag) -> ClassTag {
    match c {
        ClassTag::Task => ClassTag::Background,
        ClassTag::Background => ClassTag::Task,
    }
}

/// Draw a corpus, a validation set and the hidden labels.
///
/// Task locations show the background class before a drawn construction
/// point and the task class after it; background locations never show the
/// task class. The newest capture of each labeled location is its seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let origin = latlon_to_tile(GeoPoint::new(-37.8136, 144.9631)?, IMAGERY_ZOOM)?;
    let mut g = Generator {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        origin,
        next_tile: 0,
    };
    let mut truth = GroundTruth::default();
    let mut samples = Vec::new();

    for class in [ClassTag::Task, ClassTag::Background] {
        let prefix = &class.as_str()[..1];
        for l in 0..spec.seeds_per_class {
            let loc = format!("{prefix}{l:05}");
            for (age, (mut s, t)) in g.location(&loc, class == ClassTag::Task)?.into_iter().enumerate() {
                if age == 0 {
                    s.seed_label = Some(class);
                } else {
                    truth.insert(s.id.clone(), t);
                }
                samples.push(s);
            }
        }
    }

    let mut validation = Vec::with_capacity(2 * spec.validation_per_class);
    for class in [ClassTag::Task, ClassTag::Background] {
        for l in 0..spec.validation_per_class {
            let sample = Sample {
                id: format!("v{}{l:05}", &class.as_str()[..1]),
                location_id: format!("v{}{l:05}", &class.as_str()[..1]),
                tile: g.tile(),
                capture_date: spec.date_ref,
                embedding: g.embedding(class),
                seed_label: None,
            };
            validation.push(LabeledExample { sample, label: class });
        }
    }

    for l in 0..spec.pool_locations {
        let is_task = g.rng.gen_bool(spec.task_prevalence);
        for (s, t) in g.location(&format!("p{l:06}"), is_task)? {
            truth.insert(s.id.clone(), t);
            samples.push(s);
        }
    }

    Ok(SyntheticData {
        corpus: WeightedCorpus::from_samples(samples)?,
        validation,
        truth,
    })
}

/// The seed captures of a corpus as labeled examples.
pub fn seed_examples(corpus: &WeightedCorpus) -> Vec<LabeledExample> {
    [&corpus.task, &corpus.background]
        .into_iter()
        .flat_map(|g| {
            g.samples[..corpus.seed_count].iter().map(|s| LabeledExample {
                sample: s.clone(),
                label: g.class_tag,
            })
        })
        .collect()
}
