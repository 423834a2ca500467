use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use archboot::corpus::{load_corpus, load_labeled, save_corpus, save_labeled, write_state, CorpusPaths, LabeledExample, Sample, WeightedCorpus};
use archboot::evaluation::{
    accuracy, benchmark_specs, compare_supervised_semisupervised, generate_synthetic, run_bootstrap_iterations,
    seed_examples, write_benchmark_csv, GroundTruth, SyntheticSpec, BENCHMARK_HEADER,
};
use archboot::linear_head::{serve_request, train, ExternalScorer, LinearHead, Scorer, TrainConfig};
use archboot::pipeline::{export_gis, parallel_score, plan_shards, read_scores, select_top_k_global, StateDirLock};
use archboot::ssms::{resume_schedule, run_schedule, ssms_step, LinearTrainer, RunOptions, Schedule, ScheduleStep};
use archboot::tilegrid::{coverage_area_km2, latlon_to_tile, meters_per_pixel, GeoPoint, TileKey};

const METADATA: &str = "metadata.csv";
const EMBEDDINGS: &str = "embeddings.aemb";
const VALIDATION: &str = "validation.csv";
const VALIDATION_EMB: &str = "validation.aemb";
const TRUTH: &str = "truth.csv";
const STATE: &str = "state.jsonl";
const MODEL: &str = "model.json";

#[derive(Parser)]
#[command(name = "archboot", version, about = "Grow labeled training sets from archival imagery embeddings")]
struct Cli {
    /// Directory for corpus state, models, manifests and scores.
    #[arg(long, global = true, env = "ARCHBOOT_STATE_DIR")]
    state_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic archival corpus with hidden labels.
    Synth {
        /// JSON synthetic spec; omitted fields take the reference values.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the linear head on the weighted corpus.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Where to write the model (default: <state-dir>/model.json).
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Score every capture in parallel shards and merge the results by id.
    Score {
        #[command(flatten)]
        data: DataArgs,
        /// `builtin` or `external:<dir>`.
        #[arg(long, default_value = "builtin")]
        scorer: String,
        /// Model for the builtin scorer (default: <state-dir>/model.json).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        shards: usize,
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory for shard files and scores.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Also print the ids of the K most confident captures.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Run one semi-supervised step on the stored state.
    Step {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        d_t: u32,
        #[arg(long)]
        d_b: u32,
        #[arg(long, default_value_t = 0)]
        m_t: usize,
        #[arg(long, default_value_t = 0)]
        m_b: usize,
        #[arg(long, default_value_t = 0)]
        m_c: usize,
        #[arg(long, default_value_t = 1)]
        step_index: usize,
    },
    /// Run a full schedule, checkpointing after every step.
    Run {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Schedule CSV (default: the bundled six-step schedule).
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// Continue from a run manifest.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Repeatedly move confident test predictions into the training set.
    Bootstrap {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        step_size: usize,
        #[arg(long, default_value_t = 3)]
        rounds: usize,
    },
    /// Confusion counts of a scores file against the ground truth.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        scores: PathBuf,
    },
    /// Seeds-only versus semi-supervised accuracy over the benchmark archives.
    Bench {
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write first-detection points as GeoJSON.
    ExportGis {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value = "task")]
        class: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Web-mercator tile utilities.
    Tile {
        #[command(subcommand)]
        op: TileOp,
    },
    /// Answer one external-scorer request with a linear head.
    #[command(hide = true)]
    ServeScorer {
        #[arg(long)]
        model: PathBuf,
        request: PathBuf,
    },
}

#[derive(Subcommand)]
enum TileOp {
    /// Tile containing a point.
    Locate {
        #[arg(long, allow_hyphen_values = true)]
        lat: f64,
        #[arg(long, allow_hyphen_values = true)]
        lon: f64,
        #[arg(long, default_value_t = 21)]
        zoom: u8,
    },
    /// Centre of a tile.
    Centroid {
        #[arg(long)]
        x: u32,
        #[arg(long)]
        y: u32,
        #[arg(long, default_value_t = 21)]
        zoom: u8,
    },
    /// Nominal ground area of a number of tiles, km².
    Area {
        #[arg(long)]
        tiles: u64,
        #[arg(long, default_value_t = 21)]
        zoom: u8,
    },
    /// Equatorial ground resolution.
    Resolution {
        #[arg(long, default_value_t = 21)]
        zoom: u8,
        #[arg(long, default_value_t = 256)]
        tile_px: u32,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding metadata.csv, embeddings.aemb and optionally
    /// validation.csv, validation.aemb and truth.csv.
    #[arg(long)]
    data: PathBuf,
}

impl DataArgs {
    fn paths(&self, state: Option<PathBuf>) -> CorpusPaths {
        CorpusPaths {
            metadata: self.data.join(METADATA),
            embeddings: self.data.join(EMBEDDINGS),
            state,
        }
    }

    fn corpus(&self, state_dir: Option<&Path>) -> Result<WeightedCorpus> {
        let state = state_dir.map(|d| d.join(STATE)).filter(|p| p.exists());
        let paths = self.paths(state);
        load_corpus(&paths).with_context(|| format!("loading corpus from {}", self.data.display()))
    }

    fn validation(&self) -> Result<Vec<LabeledExample>> {
        let meta = self.data.join(VALIDATION);
        if !meta.exists() {
            return Ok(Vec::new());
        }
        Ok(load_labeled(&meta, &self.data.join(VALIDATION_EMB))?)
    }

    fn truth(&self) -> Result<GroundTruth> {
        let p = self.data.join(TRUTH);
        GroundTruth::read_csv(&p).with_context(|| format!("reading {}", p.display()))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            shuffle: true,
        }
    }
}

fn require_state_dir(dir: Option<PathBuf>) -> Result<PathBuf> {
    dir.context("this command needs --state-dir or ARCHBOOT_STATE_DIR")
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_model(path: &Path) -> Result<LinearHead> {
    let bytes = fs::read(path).with_context(|| format!("reading model {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn all_samples(corpus: &WeightedCorpus) -> Vec<Sample> {
    corpus
        .task
        .samples
        .iter()
        .chain(&corpus.background.samples)
        .chain(&corpus.pool)
        .cloned()
        .collect()
}

fn main() {
    if let Err(e) = real_main() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    let state_dir = cli.state_dir;
    match cli.command {
        Command::Synth { spec, seed, out } => {
            let mut spec: SyntheticSpec = match spec {
                Some(p) => serde_json::from_slice(&fs::read(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => SyntheticSpec::reference(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let data = generate_synthetic(&spec)?;
            fs::create_dir_all(&out)?;
            save_corpus(
                &data.corpus,
                &CorpusPaths {
                    metadata: out.join(METADATA),
                    embeddings: out.join(EMBEDDINGS),
                    state: None,
                },
            )?;
            save_labeled(&data.validation, &out.join(VALIDATION), &out.join(VALIDATION_EMB))?;
            data.truth.write_csv(&out.join(TRUTH))?;
            write_json(&out.join("spec.json"), &spec)?;
            println!(
                "wrote {} task, {} background, {} pool captures and {} validation examples to {}",
                data.corpus.task.len(),
                data.corpus.background.len(),
                data.corpus.pool.len(),
                data.validation.len(),
                out.display()
            );
        }
        Command::Train { data, train: t, model_out } => {
            let model_out = match model_out {
                Some(p) => p,
                None => require_state_dir(state_dir.clone())?.join(MODEL),
            };
            let _lock = state_dir.as_deref().map(StateDirLock::acquire).transpose()?;
            let corpus = data.corpus(state_dir.as_deref())?;
            let validation = data.validation()?;
            let out = train(&corpus, &t.config(), &validation)?;
            if let Some(parent) = model_out.parent() {
                fs::create_dir_all(parent)?;
            }
            write_json(&model_out, &out.head)?;
            match out.best_validation_accuracy() {
                Some(a) => println!("best epoch {} validation accuracy {a:.4}", out.best_epoch),
                None => println!("trained {} epochs", out.best_epoch),
            }
        }
        Command::Score {
            data,
            scorer,
            model,
            shards,
            workers,
            out,
            top_k,
        } => {
            let corpus = data.corpus(None)?;
            let samples = all_samples(&corpus);
            let scorer: Box<dyn Scorer> = if scorer == "builtin" {
                let model = match model {
                    Some(p) => p,
                    None => require_state_dir(state_dir)?.join(MODEL),
                };
                Box::new(read_model(&model)?)
            } else if let Some(dir) = scorer.strip_prefix("external:") {
                Box::new(ExternalScorer::new(dir)?)
            } else {
                bail!("unknown scorer {scorer:?}; expected builtin or external:<dir>");
            };
            let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
            let plan = plan_shards(&ids, shards, &out)?;
            let merged = parallel_score(&samples, scorer.as_ref(), &plan, workers.unwrap_or_else(default_workers))?;
            println!("scored {} captures into {}", samples.len(), merged.display());
            if let Some(k) = top_k {
                for id in select_top_k_global(&[merged], k)? {
                    println!("{id}");
                }
            }
        }
        Command::Step {
            data,
            train: t,
            d_t,
            d_b,
            m_t,
            m_b,
            m_c,
            step_index,
        } => {
            let dir = require_state_dir(state_dir)?;
            let _lock = StateDirLock::acquire(&dir)?;
            let mut corpus = data.corpus(Some(&dir))?;
            let validation = data.validation()?;
            let trainer = LinearTrainer { config: t.config() };
            let step = ScheduleStep::new(d_t, d_b, m_t, m_b, m_c);
            let (report, model) = ssms_step(&mut corpus, &step, step_index, &trainer, &validation, t.seed, 1)?;
            write_state(&dir.join(STATE), &corpus)?;
            write_json(&dir.join(MODEL), &model)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Run {
            data,
            train: t,
            schedule,
            resume,
            run_id,
            workers,
        } => {
            let dir = require_state_dir(state_dir)?;
            let _lock = StateDirLock::acquire(&dir)?;
            let mut corpus = data.corpus(None)?;
            let validation = data.validation()?;
            let trainer = LinearTrainer { config: t.config() };
            let opts = RunOptions {
                run_id: run_id.unwrap_or_else(|| format!("run-{}", t.seed)),
                seed: t.seed,
                state_dir: Some(dir.clone()),
                workers: workers.unwrap_or_else(default_workers),
            };
            let outcome = match resume {
                Some(manifest) => resume_schedule(&mut corpus, &manifest, &trainer, &validation, &opts)?,
                None => {
                    let schedule = match schedule {
                        Some(p) => Schedule::from_csv_path(&p)?,
                        None => Schedule::default(),
                    };
                    run_schedule(&mut corpus, schedule.steps(), &trainer, &validation, &opts)?
                }
            };
            write_state(&dir.join(STATE), &corpus)?;
            write_json(&dir.join(MODEL), &outcome.final_model)?;
            println!("step,sum_alpha_task,sum_alpha_background,task_increments,background_increments,confounder_increments");
            for r in &outcome.reports {
                println!(
                    "{},{},{},{},{},{}",
                    r.step,
                    r.sum_alpha_task,
                    r.sum_alpha_background,
                    r.task_increments,
                    r.background_increments,
                    r.confounder_increments
                );
            }
        }
        Command::Bootstrap {
            data,
            train: t,
            step_size,
            rounds,
        } => {
            let corpus = data.corpus(None)?;
            let validation = data.validation()?;
            let truth = data.truth()?;
            let mut train_set = seed_examples(&corpus);
            let mut test = corpus.pool.clone();
            let reports =
                run_bootstrap_iterations(&mut train_set, &validation, &mut test, step_size, rounds, &t.config(), &truth)?;
            println!("round,train_task,train_background,test,test_accuracy,precision_task,precision_background");
            let fmt = |p: Option<f64>| p.map_or(String::new(), |v| format!("{v:.4}"));
            for r in reports {
                let (pt, pb) = r
                    .step
                    .as_ref()
                    .map_or((None, None), |s| (s.precision_task, s.precision_background));
                println!(
                    "{},{},{},{},{:.4},{},{}",
                    r.round,
                    r.train_task,
                    r.train_background,
                    r.test_size,
                    r.test_accuracy,
                    fmt(pt),
                    fmt(pb)
                );
            }
        }
        Command::Eval { data, scores } => {
            let truth = data.truth()?;
            let scores = read_scores(&scores)?;
            let corpus = data.corpus(None)?;
            let pool: Vec<(&str, f64)> = corpus
                .pool
                .iter()
                .filter_map(|s| scores.get(&s.id).map(|&c| (s.id.as_str(), c)))
                .collect();
            if pool.is_empty() {
                bail!("scores file covers none of the unlabeled captures");
            }
            let c = truth.confusion(pool)?;
            println!("tp,tn,fp,fn,accuracy");
            println!("{},{},{},{},{:.4}", c.tp, c.tn, c.fp, c.fn_, accuracy(&c)?);
        }
        Command::Bench { runs, seed, out } => {
            let cfg = TrainConfig { seed, ..TrainConfig::default() };
            let mut rows = Vec::new();
            println!("{BENCHMARK_HEADER}");
            for case in benchmark_specs() {
                let row = compare_supervised_semisupervised(&case, runs, &cfg)?;
                println!("{}", row.to_csv_line());
                rows.push(row);
            }
            if let Some(p) = out {
                write_benchmark_csv(&p, &rows)?;
            }
        }
        Command::ExportGis {
            data,
            scores,
            threshold,
            class,
            out,
        } => {
            if !(0.0..=1.0).contains(&threshold) {
                bail!("threshold {threshold} outside [0, 1]");
            }
            let corpus = data.corpus(None)?;
            let scores = read_scores(&scores)?;
            let samples = all_samples(&corpus);
            let scored: Vec<(&Sample, f64)> = samples
                .iter()
                .filter_map(|s| scores.get(&s.id).map(|&c| (s, c)))
                .collect();
            let features = export_gis(&scored, threshold, &class, &out)?;
            println!("wrote {} features to {}", features.len(), out.display());
        }
        Command::Tile { op } => match op {
            TileOp::Locate { lat, lon, zoom } => {
                let t = latlon_to_tile(GeoPoint::new(lat, lon)?, zoom)?;
                println!("{} {} {}", t.x, t.y, t.zoom);
            }
            TileOp::Centroid { x, y, zoom } => {
                let c = TileKey::new(x, y, zoom)?.centroid();
                println!("{:.8} {:.8}", c.lat, c.lon);
            }
            TileOp::Area { tiles, zoom } => println!("{:.4}", coverage_area_km2(tiles, zoom)?),
            TileOp::Resolution { zoom, tile_px } => println!("{:.6}", meters_per_pixel(zoom, tile_px)?),
        },
        Command::ServeScorer { model, request } => {
            serve_request(&request, &read_model(&model)?)?;
        }
    }
    Ok(())
}
