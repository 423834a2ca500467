//! File-exchange protocol for out-of-process scorers.
//!
//! A scorer directory holds an executable named `score`. For each call the
//! engine creates a fresh `exchange-<n>` subdirectory containing the
//! embeddings (`AEMB` format), the requested ids (one per line) and a
//! `request.json` manifest, then runs `score <request.json>`. The scorer
//! answers with JSON Lines `{"id":..., "conf":...}` at the manifest's
//! `output` path, one line per requested id.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::Scorer;
use crate::corpus::{read_embeddings, write_embeddings, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub embeddings: PathBuf,
    pub ids: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub id: String,
    pub conf: f64,
}

const MAX_DIAGNOSTICS: usize = 4096;

#[derive(Debug)]
pub struct ExternalScorer {
    dir: PathBuf,
    calls: AtomicUsize,
}

impl ExternalScorer {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let exe = dir.join("score");
        if !exe.is_file() {
            return Err(Error::Config(format!(
                "scorer directory {} has no `score` executable",
                dir.display()
            )));
        }
        Ok(Self {
            dir,
            calls: AtomicUsize::new(0),
        })
    }

    fn exchange_dir(&self) -> Result<PathBuf> {
        let n = self.calls.fetch_add(1, Ordering::Relaxed);
        let dir = self.dir.join(format!("exchange-{n}"));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

impl Scorer for ExternalScorer {
    fn score_samples(&self, samples: &[&Sample]) -> Result<Vec<f64>> {
        let exchange = self.exchange_dir()?;
        let request = ScoreRequest {
            embeddings: exchange.join("embeddings.aemb"),
            ids: exchange.join("ids.txt"),
            output: exchange.join("response.jsonl"),
        };
        let dim = samples.first().map_or(1, |s| s.embedding.len());
        write_embeddings(
            &request.embeddings,
            dim,
            samples.iter().map(|s| (s.id.as_str(), s.embedding.as_slice())),
        )?;
        let mut ids = BufWriter::new(File::create(&request.ids)?);
        for s in samples {
            writeln!(ids, "{}", s.id)?;
        }
        ids.flush()?;
        let manifest = exchange.join("request.json");
        fs::write(&manifest, serde_json::to_vec_pretty(&request)?)?;

        let out = Command::new(self.dir.join("score")).arg(&manifest).output()?;
        if !out.status.success() {
            let mut diagnostics = String::from_utf8_lossy(&out.stderr).into_owned();
            if diagnostics.len() > MAX_DIAGNOSTICS {
                let cut = diagnostics.len() - MAX_DIAGNOSTICS;
                let cut = (cut..diagnostics.len())
                    .find(|&i| diagnostics.is_char_boundary(i))
                    .unwrap_or(diagnostics.len());
                diagnostics = diagnostics.split_off(cut);
            }
            return Err(Error::Scorer {
                status: out.status.to_string(),
                diagnostics: diagnostics.trim().to_owned(),
            });
        }
        let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
        read_response(&request.output, &ids)
    }
}

/// Parse a response file and align it with `ids`. Every id must be answered
/// exactly once with a confidence in [0, 1].
pub(crate) fn read_response(path: &Path, ids: &[&str]) -> Result<Vec<f64>> {
    let position: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut conf: Vec<Option<f64>> = vec![None; ids.len()];
    let file = File::open(path).map_err(|e| Error::Protocol {
        line: None,
        message: format!("cannot read response {}: {e}", path.display()),
    })?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = Some(i as u64 + 1);
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ScoreResponse = serde_json::from_str(&line).map_err(|e| Error::Protocol {
            line: line_no,
            message: e.to_string(),
        })?;
        let Some(&slot) = position.get(r.id.as_str()) else {
            return Err(Error::Protocol {
                line: line_no,
                message: format!("unrequested id {:?}", r.id),
            });
        };
        if !(0.0..=1.0).contains(&r.conf) {
            return Err(Error::Protocol {
                line: line_no,
                message: format!("confidence {} outside [0, 1]", r.conf),
            });
        }
        if conf[slot].replace(r.conf).is_some() {
            return Err(Error::Protocol {
                line: line_no,
                message: format!("id {:?} answered twice", r.id),
            });
        }
    }
    let missing = conf.iter().filter(|c| c.is_none()).count();
    if missing > 0 {
        let first = ids[conf.iter().position(Option::is_none).unwrap()];
        return Err(Error::Protocol {
            line: None,
            message: format!("{missing} ids unanswered, first {first:?}"),
        });
    }
    Ok(conf.into_iter().map(Option::unwrap).collect())
}

/// Answer a request with an in-process scorer; the serving side of the protocol.
pub fn serve_request(request_path: &Path, scorer: &dyn Scorer) -> Result<()> {
    let request: ScoreRequest = serde_json::from_slice(&fs::read(request_path)?)?;
    let (_, mut embeddings) = read_embeddings(&request.embeddings)?;
    let ids = fs::read_to_string(&request.ids)?;
    let mut samples = Vec::new();
    for id in ids.lines().filter(|l| !l.is_empty()) {
        let embedding = embeddings
            .remove(id)
            .ok_or_else(|| Error::schema(format!("no embedding for requested id {id}")))?;
        samples.push(Sample {
            id: id.to_owned(),
            location_id: String::new(),
            tile: crate::tilegrid::TileKey { x: 0, y: 0, zoom: 0 },
            capture_date: chrono::NaiveDate::MIN,
            embedding,
            seed_label: None,
        });
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let conf = scorer.score_samples(&refs)?;
    let mut w = BufWriter::new(File::create(&request.output)?);
    for (s, c) in samples.iter().zip(conf) {
        serde_json::to_writer(
            &mut w,
            &ScoreResponse {
                id: s.id.clone(),
                conf: c,
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
