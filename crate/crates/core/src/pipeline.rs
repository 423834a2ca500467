//! Sharded batch scoring, global top-K over shard outputs, GIS export and
//! the state-directory lock.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::Datelike;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::linear_head::{ScoreResponse, Scorer};
use crate::selection::TopKStream;
use crate::temporal::{first_detection, smooth_series, LocationSeries};
use crate::tilegrid::{GeoPoint, TileKey};

/// Samples per scorer call inside a shard.
const SCORE_BATCH: usize = 4096;

pub const MERGED_SCORES: &str = "scores.jsonl";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlan {
    pub dir: PathBuf,
    /// Sorted ids, split into contiguous runs.
    pub shards: Vec<Vec<String>>,
}

impl ShardPlan {
    pub fn len(&self) -> usize {
        self.shards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.is_empty()
    }

    pub fn shard_path(&self, i: usize) -> PathBuf {
        self.dir.join(format!("shard-{i:04}.jsonl"))
    }

    pub fn shard_paths(&self) -> Vec<PathBuf> {
        (0..self.len()).map(|i| self.shard_path(i)).collect()
    }

    pub fn merged_path(&self) -> PathBuf {
        self.dir.join(MERGED_SCORES)
    }
}

/// Sort the ids and cut them into `n` contiguous shards whose sizes differ
/// by at most one, larger shards first.
pub fn plan_shards(ids: &[String], n: usize, dir: impl Into<PathBuf>) -> Result<ShardPlan> {
    if n == 0 {
        return Err(Error::range("shard count must be at least 1"));
    }
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::schema(format!("duplicate sample id {}", w[0])));
    }
    let (base, extra) = (sorted.len() / n, sorted.len() % n);
    let mut shards = Vec::with_capacity(n);
    let mut rest = sorted.into_iter();
    for i in 0..n {
        let size = base + usize::from(i < extra);
        shards.push(rest.by_ref().take(size).collect());
    }
    Ok(ShardPlan {
        dir: dir.into(),
        shards,
    })
}

fn write_line(out: &mut impl Write, id: &str, conf: f64) -> Result<()> {
    serde_json::to_writer(&mut *out, &json!({ "id": id, "conf": conf }))?;
    out.write_all(b"\n")?;
    Ok(())
}

fn score_shard(
    plan: &ShardPlan,
    i: usize,
    by_id: &HashMap<&str, &Sample>,
    scorer: &dyn Scorer,
) -> Result<()> {
    let path = plan.shard_path(i);
    let tmp = path.with_extension("tmp");
    let mut out = BufWriter::new(File::create(&tmp)?);
    for chunk in plan.shards[i].chunks(SCORE_BATCH) {
        let batch: Vec<&Sample> = chunk
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::schema(format!("shard {i} names unknown sample {id}")))
            })
            .collect::<Result<_>>()?;
        let conf = scorer.score_samples(&batch)?;
        if conf.len() != batch.len() {
            return Err(Error::Protocol {
                line: None,
                message: format!("scorer returned {} confidences for {} samples", conf.len(), batch.len()),
            });
        }
        for (id, c) in chunk.iter().zip(conf) {
            write_line(&mut out, id, c)?;
        }
    }
    out.into_inner().map_err(|e| e.into_error())?.sync_data()?;
    fs::rename(&tmp, &path)?;
    Ok(())
}

/// Score every planned shard on a pool of `workers` threads, then merge the
/// shard files by id into [`ShardPlan::merged_path`].
///
/// A failing shard is retried once. If it fails again the run stops with a
/// worker error; shards already written stay on disk.
pub fn parallel_score(
    samples: &[Sample],
    scorer: &dyn Scorer,
    plan: &ShardPlan,
    workers: usize,
) -> Result<PathBuf> {
    fs::create_dir_all(&plan.dir)?;
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let workers = workers.clamp(1, plan.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if failure.lock().expect("lock poisoned").is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= plan.len() {
                    return;
                }
                let result = score_shard(plan, i, &by_id, scorer)
                    .or_else(|_| score_shard(plan, i, &by_id, scorer));
                if let Err(e) = result {
                    let _ = fs::remove_file(plan.shard_path(i).with_extension("tmp"));
                    let mut slot = failure.lock().expect("lock poisoned");
                    if slot.is_none() {
                        *slot = Some(Error::Worker {
                            shard: i,
                            message: e.to_string(),
                        });
                    }
                    return;
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("lock poisoned") {
        return Err(e);
    }
    let merged = plan.merged_path();
    merge_by_id(&plan.shard_paths(), &merged)?;
    Ok(merged)
}

struct ShardCursor {
    lines: std::io::Lines<BufReader<File>>,
    path: PathBuf,
    line_no: u64,
}

impl ShardCursor {
    fn next_record(&mut self) -> Result<Option<(String, String)>> {
        match self.lines.next() {
            None => Ok(None),
            Some(line) => {
                let line = line?;
                self.line_no += 1;
                let rec: ScoreResponse = serde_json::from_str(&line)
                    .map_err(|e| Error::parse(&self.path, self.line_no, e.to_string()))?;
                Ok(Some((rec.id, line)))
            }
        }
    }
}

/// k-way merge of id-sorted JSONL score files, copying lines verbatim.
pub fn merge_by_id(inputs: &[PathBuf], output: &Path) -> Result<()> {
    let mut cursors = Vec::with_capacity(inputs.len());
    let mut heap = BinaryHeap::new();
    for (k, path) in inputs.iter().enumerate() {
        let mut c = ShardCursor {
            lines: BufReader::new(File::open(path)?).lines(),
            path: path.clone(),
            line_no: 0,
        };
        if let Some((id, line)) = c.next_record()? {
            heap.push(Reverse((id, k, line)));
        }
        cursors.push(c);
    }
    let tmp = output.with_extension("tmp");
    let mut out = BufWriter::new(File::create(&tmp)?);
    let mut last: Option<String> = None;
    while let Some(Reverse((id, k, line))) = heap.pop() {
        if last.as_deref() == Some(id.as_str()) {
            return Err(Error::schema(format!("id {id} appears in more than one shard")));
        }
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
        if let Some((nid, nline)) = cursors[k].next_record()? {
            if nid < id {
                return Err(Error::parse(&cursors[k].path, cursors[k].line_no, "ids not sorted"));
            }
            heap.push(Reverse((nid, k, nline)));
        }
        last = Some(id);
    }
    out.into_inner().map_err(|e| e.into_error())?.sync_data()?;
    fs::rename(&tmp, output)?;
    Ok(())
}

fn for_each_record(files: &[PathBuf], mut f: impl FnMut(ScoreResponse) -> Result<()>) -> Result<()> {
    for path in files {
        let reader = BufReader::new(File::open(path)?);
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let rec: ScoreResponse =
                serde_json::from_str(&line).map_err(|e| Error::parse(path, n as u64 + 1, e.to_string()))?;
            f(rec)?;
        }
    }
    Ok(())
}

/// Ids of the `k` highest confidences across the files, in file order.
///
/// Positions count through the files in the order given, and ties go to the
/// earlier position, exactly as the selection module's heap route would
/// rank the concatenated confidences. Two streaming passes; memory is O(k).
pub fn select_top_k_global(files: &[PathBuf], k: usize) -> Result<Vec<String>> {
    let mut stream = TopKStream::new(k, true);
    for_each_record(files, |r| {
        stream.push(r.conf);
        Ok(())
    })?;
    let positions = stream.finish()?;
    let mut ids = Vec::with_capacity(positions.len());
    let mut want = positions.iter().peekable();
    let mut pos = 0usize;
    for_each_record(files, |r| {
        if want.peek() == Some(&&pos) {
            ids.push(r.id);
            want.next();
        }
        pos += 1;
        Ok(())
    })?;
    Ok(ids)
}

/// Read a scores file into an id → confidence map.
pub fn read_scores(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for_each_record(&[path.to_path_buf()], |r| {
        out.insert(r.id, r.conf);
        Ok(())
    })?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFeature {
    pub location_id: String,
    pub tile: TileKey,
    pub centroid: GeoPoint,
    pub year: i32,
    pub class: String,
    /// Raw model confidence at the detecting capture.
    pub confidence: f64,
}

/// One feature per location whose smoothed series reaches `threshold`,
/// dated by the first capture that does. Sorted by location id.
pub fn detect_locations(
    scored: &[(&Sample, f64)],
    threshold: f64,
    class: &str,
) -> Result<Vec<DetectionFeature>> {
    let mut by_loc: BTreeMap<&str, Vec<(&Sample, f64)>> = BTreeMap::new();
    for &(s, c) in scored {
        by_loc.entry(&s.location_id).or_default().push((s, c));
    }
    let mut features = Vec::new();
    for (loc, mut caps) in by_loc {
        caps.sort_by_key(|(s, _)| s.capture_date);
        let series = LocationSeries::new(loc, caps.iter().map(|(s, c)| (s.capture_date, *c)).collect())?;
        let smoothed = smooth_series(&series)?;
        if let Some(i) = first_detection(&smoothed, threshold) {
            let (s, conf) = caps[i];
            features.push(DetectionFeature {
                location_id: loc.to_owned(),
                tile: s.tile,
                centroid: s.tile.centroid(),
                year: s.capture_date.year(),
                class: class.to_owned(),
                confidence: conf,
            });
        }
    }
    Ok(features)
}

pub fn feature_collection(features: &[DetectionFeature]) -> serde_json::Value {
    let features: Vec<_> = features
        .iter()
        .map(|f| {
            json!({
                "type": "Feature",
                "id": f.location_id,
                "geometry": { "type": "Point", "coordinates": [f.centroid.lon, f.centroid.lat] },
                "properties": { "year": f.year, "class": f.class, "confidence": f.confidence },
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": features })
}

/// Detect and write a GeoJSON FeatureCollection of Point features.
pub fn export_gis(
    scored: &[(&Sample, f64)],
    threshold: f64,
    class: &str,
    path: &Path,
) -> Result<Vec<DetectionFeature>> {
    let features = detect_locations(scored, threshold, class)?;
    let mut bytes = serde_json::to_vec_pretty(&feature_collection(&features))?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(features)
}

/// Exclusive hold on a state directory, released on drop.
#[derive(Debug)]
pub struct StateDirLock {
    path: PathBuf,
}

impl StateDirLock {
    pub const FILE: &'static str = ".lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for StateDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
