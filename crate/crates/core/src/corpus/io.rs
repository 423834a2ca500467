//! On-disk formats: metadata CSV, binary embeddings and the JSON Lines
//! alpha/confidence state.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{ClassTag, LabeledExample, Sample, WeightedCorpus};
use crate::error::{Error, Result};
use crate::tilegrid::TileKey;

pub const EMBEDDINGS_MAGIC: &[u8; 4] = b"AEMB";

const METADATA_HEADER: [&str; 7] = ["id", "location_id", "tile_x", "tile_y", "zoom", "date", "class"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataRow {
    pub id: String,
    pub location_id: String,
    pub tile_x: u32,
    pub tile_y: u32,
    pub zoom: u8,
    pub date: String,
    pub class: String,
}

impl MetadataRow {
    fn from_sample(s: &Sample, class: Option<ClassTag>) -> Self {
        Self {
            id: s.id.clone(),
            location_id: s.location_id.clone(),
            tile_x: s.tile.x,
            tile_y: s.tile.y,
            zoom: s.tile.zoom,
            date: s.capture_date.format("%Y-%m-%d").to_string(),
            class: class.map_or("unlabeled", ClassTag::as_str).to_owned(),
        }
    }
}

/// Parsed metadata row with its validated fields, before embeddings are attached.
struct RowFields {
    id: String,
    location_id: String,
    tile: TileKey,
    date: NaiveDate,
    class: Option<ClassTag>,
}

fn parse_row(path: &Path, line: u64, row: MetadataRow) -> Result<RowFields> {
    let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d")
        .map_err(|e| Error::parse(path, line, format!("bad date {:?}: {e}", row.date)))?;
    let tile = TileKey::new(row.tile_x, row.tile_y, row.zoom)
        .map_err(|e| Error::parse(path, line, e.to_string()))?;
    let class = match row.class.as_str() {
        "unlabeled" => None,
        other => Some(
            other
                .parse()
                .map_err(|e: Error| Error::parse(path, line, e.to_string()))?,
        ),
    };
    if row.id.is_empty() {
        return Err(Error::parse(path, line, "empty id"));
    }
    Ok(RowFields {
        id: row.id,
        location_id: row.location_id,
        tile,
        date,
        class,
    })
}

pub fn read_metadata(path: &Path) -> Result<Vec<MetadataRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != METADATA_HEADER {
        return Err(Error::parse(
            path,
            1,
            format!("expected header {}", METADATA_HEADER.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        rows.push(record.map_err(|e| csv_error(path, e))?);
    }
    Ok(rows)
}

pub fn write_metadata(path: &Path, rows: &[MetadataRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::parse(path, line, format!("{kind:?}")),
    }
}

/// Read an `AEMB` file into `(dim, id → embedding)`.
pub fn read_embeddings(path: &Path) -> Result<(usize, HashMap<String, Vec<f32>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::parse(path, 0, "truncated header"))?;
    if &magic != EMBEDDINGS_MAGIC {
        return Err(Error::parse(path, 0, "missing AEMB magic"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)
        .map_err(|_| Error::parse(path, 0, "truncated header"))?;
    let dim = u32::from_le_bytes(word) as usize;
    if dim == 0 {
        return Err(Error::schema("embedding dimension is zero"));
    }

    let mut out = HashMap::new();
    let mut record = 0u64;
    let mut values = vec![0u8; dim * 4];
    loop {
        record += 1;
        let mut len = [0u8; 2];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let mut id = vec![0u8; usize::from(u16::from_le_bytes(len))];
        r.read_exact(&mut id)
            .and_then(|_| r.read_exact(&mut values))
            .map_err(|_| Error::parse(path, record, "truncated record"))?;
        let id = String::from_utf8(id)
            .map_err(|_| Error::parse(path, record, "id is not valid UTF-8"))?;
        let emb = values
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if out.insert(id.clone(), emb).is_some() {
            return Err(Error::parse(path, record, format!("duplicate id {id:?}")));
        }
    }
    Ok((dim, out))
}

pub fn write_embeddings<'a, I>(path: &Path, dim: usize, records: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a [f32])>,
{
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EMBEDDINGS_MAGIC)?;
    w.write_all(&u32::try_from(dim).map_err(|_| Error::schema("dimension too large"))?.to_le_bytes())?;
    for (id, emb) in records {
        if emb.len() != dim {
            return Err(Error::schema(format!(
                "embedding {id} has dimension {}, expected {dim}",
                emb.len()
            )));
        }
        let len = u16::try_from(id.len()).map_err(|_| Error::schema(format!("id too long: {id}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        for v in emb {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub id: String,
    pub alpha: u32,
    pub conf: f64,
}

pub fn read_state(path: &Path) -> Result<Vec<StateRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StateRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, i as u64 + 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_state(path: &Path, corpus: &WeightedCorpus) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for g in [&corpus.task, &corpus.background] {
        for ((s, &alpha), &conf) in g.samples.iter().zip(&g.alpha).zip(&g.conf) {
            serde_json::to_writer(
                &mut w,
                &StateRecord {
                    id: s.id.clone(),
                    alpha,
                    conf,
                },
            )?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusPaths {
    pub metadata: PathBuf,
    pub embeddings: PathBuf,
    /// Alpha/confidence state; when absent, seeds get alpha 1 and history 0.
    pub state: Option<PathBuf>,
}

fn attach_embeddings(
    path: &Path,
    rows: Vec<MetadataRow>,
    embeddings: &mut HashMap<String, Vec<f32>>,
) -> Result<Vec<Sample>> {
    let mut seen = HashSet::new();
    rows.into_iter()
        .enumerate()
        .map(|(i, row)| {
            // header is line 1
            let line = i as u64 + 2;
            let f = parse_row(path, line, row)?;
            if !seen.insert(f.id.clone()) {
                return Err(Error::parse(path, line, format!("duplicate id {:?}", f.id)));
            }
            let embedding = embeddings
                .remove(&f.id)
                .ok_or_else(|| Error::schema(format!("no embedding for sample {}", f.id)))?;
            Ok(Sample {
                id: f.id,
                location_id: f.location_id,
                tile: f.tile,
                capture_date: f.date,
                embedding,
                seed_label: f.class,
            })
        })
        .collect()
}

pub fn load_corpus(paths: &CorpusPaths) -> Result<WeightedCorpus> {
    let rows = read_metadata(&paths.metadata)?;
    if rows.is_empty() {
        return Err(Error::schema(format!(
            "{} contains no samples",
            paths.metadata.display()
        )));
    }
    let (_, mut embeddings) = read_embeddings(&paths.embeddings)?;
    let samples = attach_embeddings(&paths.metadata, rows, &mut embeddings)?;
    let mut corpus = WeightedCorpus::from_samples(samples)?;

    if let Some(state_path) = &paths.state {
        apply_state(&mut corpus, state_path, read_state(state_path)?)?;
    }
    Ok(corpus)
}

/// Replace the corpus's alpha and conf with those stored in a state file.
pub fn load_state_into(corpus: &mut WeightedCorpus, path: &Path) -> Result<()> {
    apply_state(corpus, path, read_state(path)?)
}

/// Overwrite alpha and conf from state records. Every group member must be
/// covered exactly once.
fn apply_state(
    corpus: &mut WeightedCorpus,
    path: &Path,
    records: Vec<StateRecord>,
) -> Result<()> {
    let mut by_id: HashMap<String, (u32, f64)> = HashMap::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        if !(0.0..=1.0).contains(&r.conf) {
            return Err(Error::parse(path, i as u64 + 1, format!("conf {} outside [0, 1]", r.conf)));
        }
        if by_id.insert(r.id.clone(), (r.alpha, r.conf)).is_some() {
            return Err(Error::parse(path, i as u64 + 1, format!("duplicate id {:?}", r.id)));
        }
    }
    for g in [&mut corpus.task, &mut corpus.background] {
        for (i, s) in g.samples.iter().enumerate() {
            let (alpha, conf) = by_id
                .remove(&s.id)
                .ok_or_else(|| Error::schema(format!("state has no record for {}", s.id)))?;
            g.alpha[i] = alpha;
            g.conf[i] = conf;
        }
    }
    if let Some(extra) = by_id.keys().next() {
        return Err(Error::schema(format!("state record {extra} matches no corpus sample")));
    }
    Ok(())
}

pub fn save_corpus(corpus: &WeightedCorpus, paths: &CorpusPaths) -> Result<()> {
    corpus.validate()?;
    let ordered: Vec<&Sample> = corpus
        .task
        .samples
        .iter()
        .chain(&corpus.background.samples)
        .chain(&corpus.pool)
        .collect();
    let rows: Vec<MetadataRow> = ordered
        .iter()
        .map(|s| MetadataRow::from_sample(s, s.seed_label))
        .collect();
    write_metadata(&paths.metadata, &rows)?;
    write_embeddings(
        &paths.embeddings,
        corpus.dim(),
        ordered.iter().map(|s| (s.id.as_str(), s.embedding.as_slice())),
    )?;
    if let Some(state) = &paths.state {
        write_state(state, corpus)?;
    }
    Ok(())
}

/// Load a labeled set (validation or test). Every row must carry a class.
pub fn load_labeled(metadata: &Path, embeddings: &Path) -> Result<Vec<LabeledExample>> {
    let rows = read_metadata(metadata)?;
    let (_, mut emb) = read_embeddings(embeddings)?;
    let samples = attach_embeddings(metadata, rows, &mut emb)?;
    samples
        .into_iter()
        .enumerate()
        .map(|(i, mut s)| {
            let label = s.seed_label.take().ok_or_else(|| {
                Error::parse(metadata, i as u64 + 2, format!("{} has no class", s.id))
            })?;
            Ok(LabeledExample { sample: s, label })
        })
        .collect()
}

pub fn save_labeled(examples: &[LabeledExample], metadata: &Path, embeddings: &Path) -> Result<()> {
    let rows: Vec<MetadataRow> = examples
        .iter()
        .map(|e| MetadataRow::from_sample(&e.sample, Some(e.label)))
        .collect();
    write_metadata(metadata, &rows)?;
    let dim = examples.first().map_or(1, |e| e.sample.embedding.len());
    write_embeddings(
        embeddings,
        dim,
        examples
            .iter()
            .map(|e| (e.sample.id.as_str(), e.sample.embedding.as_slice())),
    )
}
