//! Seeds-only training against the full semi-supervised schedule.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{accuracy, generate_synthetic, SyntheticSpec};
use crate::error::{Error, Result};
use crate::linear_head::TrainConfig;
use crate::ssms::{run_schedule, step_seed, LinearTrainer, RunOptions, Schedule, Trainer};

pub const BENCHMARK_HEADER: &str = "class,runs,supervised_mean,supervised_std,semi_mean,semi_std,delta";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkCase {
    pub name: String,
    pub spec: SyntheticSpec,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub class: String,
    pub runs: usize,
    pub supervised_mean: f64,
    pub supervised_std: f64,
    pub semi_mean: f64,
    pub semi_std: f64,
    pub delta: f64,
    pub supervised: Vec<f64>,
    pub semi: Vec<f64>,
}

impl BenchmarkRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.class,
            self.runs,
            self.supervised_mean,
            self.supervised_std,
            self.semi_mean,
            self.semi_std,
            self.delta
        )
    }

    /// Semi-supervised at least as accurate on average and no more spread out.
    pub fn semi_dominates(&self) -> bool {
        self.semi_mean >= self.supervised_mean && self.semi_std <= self.supervised_std
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Test accuracy of both pipelines over `runs` independent draws.
///
/// Run `r` regenerates the corpus with data seed `spec.seed + r` and trains
/// with seeds derived from `r`, so the spread reflects both sampling and
/// optimisation noise.
pub fn compare_supervised_semisupervised(
    case: &BenchmarkCase,
    runs: usize,
    cfg: &TrainConfig,
) -> Result<BenchmarkRow> {
    if runs < 2 {
        return Err(Error::range(format!("need at least 2 runs, got {runs}")));
    }
    let trainer = LinearTrainer { config: cfg.clone() };
    let mut supervised = Vec::with_capacity(runs);
    let mut semi = Vec::with_capacity(runs);
    for r in 0..runs {
        let spec = SyntheticSpec {
            seed: case.spec.seed.wrapping_add(r as u64),
            ..case.spec.clone()
        };
        let data = generate_synthetic(&spec)?;
        let run_seed = step_seed(cfg.seed, r);

        let baseline = trainer.train(&data.corpus, &data.validation, step_seed(run_seed, 0))?;
        supervised.push(accuracy(&data.truth.evaluate(&baseline.model, data.test_set())?)?);

        let mut corpus = data.corpus.clone();
        let out = run_schedule(
            &mut corpus,
            case.schedule.steps(),
            &trainer,
            &data.validation,
            &RunOptions::in_memory(run_seed),
        )?;
        semi.push(accuracy(&data.truth.evaluate(&out.final_model, data.test_set())?)?);
    }
    let (supervised_mean, supervised_std) = mean_std(&supervised);
    let (semi_mean, semi_std) = mean_std(&semi);
    Ok(BenchmarkRow {
        class: case.name.clone(),
        runs,
        supervised_mean,
        supervised_std,
        semi_mean,
        semi_std,
        delta: semi_mean - supervised_mean,
        supervised,
        semi,
    })
}

/// Five moderate-separation archives standing in for five feature classes.
pub fn benchmark_specs() -> Vec<BenchmarkCase> {
    let base = SyntheticSpec {
        dim: 32,
        seeds_per_class: 20,
        validation_per_class: 100,
        pool_locations: 400,
        separation: 1.5,
        task_prevalence: 0.5,
        captures_per_location: 6,
        capture_interval_months: 6,
        min_task_captures: 2,
        noise_rate: 0.0,
        seed: 0,
        ..SyntheticSpec::default()
    };
    let schedule = Schedule::default().scaled(base.seeds_per_class as f64 / 100.0);
    let cases = [
        ("alpha", 32, 1.5, 1000),
        ("beta", 24, 1.25, 2000),
        ("gamma", 48, 2.0, 3000),
        ("delta", 32, 1.0, 4000),
        ("epsilon", 16, 1.75, 5000),
    ];
    cases
        .into_iter()
        .map(|(name, dim, separation, seed)| BenchmarkCase {
            name: name.to_owned(),
            spec: SyntheticSpec {
                dim,
                separation,
                seed,
                ..base.clone()
            },
            schedule: schedule.clone(),
        })
        .collect()
}

pub fn write_benchmark_csv(path: &Path, rows: &[BenchmarkRow]) -> Result<()> {
    let mut out = String::from(BENCHMARK_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
