//! Embedding sets, trial lists, and speaker-grouped batching.
//!
//! Two on-disk formats are supported for embedding sets:
//!
//! * binary: `"NDAE"`, `u8` version (1), `u32` record count, `u32` dim, then
//!   for each record a `u16`-length-prefixed UTF-8 utterance id, a
//!   `u16`-length-prefixed UTF-8 speaker id and `dim` little-endian `f64`s.
//! * CSV: header `utt,speaker,v0,...,v{dim-1}`, one record per row.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"NDAE";
pub const BINARY_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Binary,
}

impl Format {
    /// Picks CSV for `.csv` paths and binary for everything else.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "binary" | "bin" => Ok(Format::Binary),
            other => Err(Error::invalid(format!("unknown embedding format '{other}'"))),
        }
    }
}

/// A labelled set of fixed-dimension embedding vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    utt_ids: Vec<String>,
    speaker_ids: Vec<String>,
    data: Vec<f64>,
}

impl EmbeddingSet {
    pub fn new(
        dim: usize,
        utt_ids: Vec<String>,
        speaker_ids: Vec<String>,
        data: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        if utt_ids.len() != speaker_ids.len() || data.len() != utt_ids.len() * dim {
            return Err(Error::invalid(format!(
                "inconsistent set: {} utt ids, {} speaker ids, {} values for dim {dim}",
                utt_ids.len(),
                speaker_ids.len(),
                data.len()
            )));
        }
        let mut seen = HashSet::with_capacity(utt_ids.len());
        for id in &utt_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("duplicate utterance id '{id}'")));
            }
        }
        for (i, row) in data.chunks_exact(dim).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("vector of utterance '{}'", utt_ids[i])));
            }
        }
        Ok(EmbeddingSet {
            dim,
            utt_ids,
            speaker_ids,
            data,
        })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new(), Vec::new(), Vec::new())
    }

    /// Builds a set from `(utt_id, speaker_id, vector)` records.
    pub fn from_records<I, U, S>(dim: usize, records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (U, S, Vec<f64>)>,
        U: Into<String>,
        S: Into<String>,
    {
        let mut utts = Vec::new();
        let mut spks = Vec::new();
        let mut data = Vec::new();
        for (u, s, v) in records {
            let u = u.into();
            if v.len() != dim {
                return Err(Error::invalid(format!(
                    "utterance '{u}' has {} values, expected {dim}",
                    v.len()
                )));
            }
            utts.push(u);
            spks.push(s.into());
            data.extend_from_slice(&v);
        }
        Self::new(dim, utts, spks, data)
    }

    /// Same labels, new vectors (possibly of another dimension).
    pub fn with_vectors(&self, dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(dim, self.utt_ids.clone(), self.speaker_ids.clone(), data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.utt_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utt_ids.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vectors(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn utt_id(&self, i: usize) -> &str {
        &self.utt_ids[i]
    }

    pub fn speaker_id(&self, i: usize) -> &str {
        &self.speaker_ids[i]
    }

    pub fn utt_ids(&self) -> &[String] {
        &self.utt_ids
    }

    pub fn speaker_ids(&self) -> &[String] {
        &self.speaker_ids
    }

    /// Map from utterance id to row index.
    pub fn index(&self) -> HashMap<&str, usize> {
        self.utt_ids
            .iter()
            .enumerate()
            .map(|(i, u)| (u.as_str(), i))
            .collect()
    }

    /// Row indices per speaker, speakers in order of first appearance.
    pub fn speaker_groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<(String, Vec<usize>)> = Vec::new();
        let mut pos: HashMap<&str, usize> = HashMap::new();
        for (i, s) in self.speaker_ids.iter().enumerate() {
            match pos.get(s.as_str()) {
                Some(&k) => order[k].1.push(i),
                None => {
                    pos.insert(s.as_str(), order.len());
                    order.push((s.clone(), vec![i]));
                }
            }
        }
        order
    }

    pub fn num_speakers(&self) -> usize {
        self.speaker_ids.iter().collect::<HashSet<_>>().len()
    }

    /// Applies `f` to every vector, producing a set with the same labels.
    pub fn map_vectors<F>(&self, out_dim: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
    {
        let mut data = Vec::with_capacity(self.len() * out_dim);
        for (i, v) in self.vectors().enumerate() {
            let out = f(i, v)?;
            if out.len() != out_dim {
                return Err(Error::Dimension {
                    expected: out_dim,
                    found: out.len(),
                });
            }
            data.extend(out);
        }
        self.with_vectors(out_dim, data)
    }
}

pub fn read_embedding_set(path: impl AsRef<Path>, format: Format) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    match format {
        Format::Binary => read_binary(path),
        Format::Csv => read_csv(path),
    }
}

pub fn write_embedding_set(set: &EmbeddingSet, path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    // Sets built through `new` are always finite; re-check so a file is never
    // produced from data that could not be read back.
    if let Some(i) = set.vectors().position(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite(format!("vector of utterance '{}'", set.utt_id(i))));
    }
    match format {
        Format::Binary => write_binary(set, path),
        Format::Csv => write_csv(set, path),
    }
}

fn write_binary(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(13 + set.data.len() * 8);
    buf.extend_from_slice(BINARY_MAGIC);
    buf.push(BINARY_VERSION);
    let count = u32::try_from(set.len()).map_err(|_| Error::invalid("too many records"))?;
    let dim = u32::try_from(set.dim).map_err(|_| Error::invalid("dimension too large"))?;
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    for i in 0..set.len() {
        for id in [set.utt_id(i), set.speaker_id(i)] {
            let len = u16::try_from(id.len())
                .map_err(|_| Error::invalid(format!("identifier longer than 65535 bytes: '{id}'")))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
        }
        for v in set.vector(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                message: format!("truncated file at byte {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, row: usize) -> Result<String> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Parse {
            path: self.path.to_path_buf(),
            row,
            message: "identifier is not valid UTF-8".into(),
        })
    }
}

fn read_binary(path: &Path) -> Result<EmbeddingSet> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };
    let format_err = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if cur.take(4)? != BINARY_MAGIC {
        return Err(format_err("bad magic, not an NDAE embedding file".into()));
    }
    let version = cur.take(1)?[0];
    if version != BINARY_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let dim = cur.u32()? as usize;
    if dim == 0 {
        return Err(format_err("dimension is zero".into()));
    }
    let mut utts = Vec::with_capacity(count);
    let mut spks = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count.saturating_mul(dim).min(1 << 28));
    let mut seen = HashSet::with_capacity(count);
    for row in 1..=count {
        let utt = cur.string(row)?;
        let spk = cur.string(row)?;
        for _ in 0..dim {
            let v = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row,
                    message: format!("non-finite value in utterance '{utt}'"),
                });
            }
            data.push(v);
        }
        if !seen.insert(utt.clone()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row,
                message: format!("duplicate utterance id '{utt}'"),
            });
        }
        utts.push(utt);
        spks.push(spk);
    }
    if cur.pos != bytes.len() {
        return Err(format_err(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    EmbeddingSet::new(dim, utts, spks, data)
}

fn write_csv(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut header = vec!["utt".to_string(), "speaker".to_string()];
    header.extend((0..set.dim).map(|j| format!("v{j}")));
    w.write_record(&header).map_err(csv_err)?;
    let mut row = Vec::with_capacity(set.dim + 2);
    for i in 0..set.len() {
        row.clear();
        row.push(set.utt_id(i).to_string());
        row.push(set.speaker_id(i).to_string());
        // 17 significant digits
        row.extend(set.vector(i).iter().map(|v| format!("{v:.16e}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv(path: &Path) -> Result<EmbeddingSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let parse_err = |row: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        message,
    };
    let header = r.headers().map_err(|e| parse_err(0, e.to_string()))?.clone();
    if header.len() < 3 || &header[0] != "utt" || &header[1] != "speaker" {
        return Err(parse_err(0, "expected header 'utt,speaker,v0,...'".into()));
    }
    let dim = header.len() - 2;
    let mut utts = Vec::new();
    let mut spks = Vec::new();
    let mut data = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| parse_err(row, e.to_string()))?;
        if rec.len() != dim + 2 {
            return Err(parse_err(
                row,
                format!("expected {dim} values, found {}", rec.len().saturating_sub(2)),
            ));
        }
        let utt = rec[0].to_string();
        for field in rec.iter().skip(2) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(row, format!("not a number: '{field}'")))?;
            if !v.is_finite() {
                return Err(parse_err(row, format!("non-finite value in utterance '{utt}'")));
            }
            data.push(v);
        }
        if !seen.insert(utt.clone()) {
            return Err(parse_err(row, format!("duplicate utterance id '{utt}'")));
        }
        utts.push(utt);
        spks.push(rec[1].to_string());
    }
    EmbeddingSet::new(dim, utts, spks, data)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: Vec<String>,
    pub test: String,
    pub is_target: bool,
}

impl Trial {
    pub fn new(enroll: Vec<String>, test: String, is_target: bool) -> Result<Self> {
        if enroll.is_empty() || enroll.iter().any(|e| e.is_empty()) {
            return Err(Error::invalid("trial has an empty enrollment field"));
        }
        if enroll.contains(&test) {
            return Err(Error::invalid(format!(
                "test utterance '{test}' is also an enrollment utterance"
            )));
        }
        Ok(Trial {
            enroll,
            test,
            is_target,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn parse(text: &str) -> std::result::Result<Self, (usize, String)> {
        let mut trials = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = i + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err((row, format!("expected 3 fields, found {}", fields.len())));
            }
            let is_target = match fields[2] {
                "target" => true,
                "nontarget" => false,
                other => return Err((row, format!("unknown label '{other}'"))),
            };
            let enroll: Vec<String> = fields[0].split(',').map(str::to_string).collect();
            let trial =
                Trial::new(enroll, fields[1].to_string(), is_target).map_err(|e| (row, e.to_string()))?;
            trials.push(trial);
        }
        Ok(TrialList { trials })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.trials {
            out.push_str(&t.enroll.join(","));
            out.push(' ');
            out.push_str(&t.test);
            out.push(' ');
            out.push_str(if t.is_target { "target" } else { "nontarget" });
            out.push('\n');
        }
        out
    }

    /// Utterance ids referenced by the trials but missing from `set`.
    pub fn missing_utts(&self, set: &EmbeddingSet) -> Vec<String> {
        let index = set.index();
        let mut missing: Vec<String> = Vec::new();
        let mut seen = HashSet::new();
        for t in &self.trials {
            for u in t.enroll.iter().chain(std::iter::once(&t.test)) {
                if !index.contains_key(u.as_str()) && seen.insert(u.clone()) {
                    missing.push(u.clone());
                }
            }
        }
        missing
    }
}

pub fn read_trial_list(path: impl AsRef<Path>) -> Result<TrialList> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TrialList::parse(&text).map_err(|(row, message)| Error::Parse {
        path: path.to_path_buf(),
        row,
        message,
    })
}

pub fn write_trial_list(list: &TrialList, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(list.to_text().as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// All of one speaker's vectors within a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerGroup {
    pub speaker_id: String,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerBatch {
    pub groups: Vec<SpeakerGroup>,
    pub total_speakers: usize,
}

/// Shuffles speakers with `seed` and chunks them into batches of
/// `speakers_per_batch`; the last batch may be short.
pub fn partition_speaker_batches(
    set: &EmbeddingSet,
    speakers_per_batch: usize,
    seed: u64,
) -> Result<Vec<SpeakerBatch>> {
    if speakers_per_batch == 0 {
        return Err(Error::invalid("speakers_per_batch must be at least 1"));
    }
    if let Some(i) = set.speaker_ids.iter().position(|s| s.is_empty()) {
        return Err(Error::invalid(format!(
            "utterance '{}' has no speaker label",
            set.utt_id(i)
        )));
    }
    let mut groups = set.speaker_groups();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    let batches = groups
        .chunks(speakers_per_batch)
        .map(|chunk| {
            let groups: Vec<SpeakerGroup> = chunk
                .iter()
                .map(|(spk, rows)| SpeakerGroup {
                    speaker_id: spk.clone(),
                    vectors: rows.iter().map(|&i| set.vector(i).to_vec()).collect(),
                })
                .collect();
            SpeakerBatch {
                total_speakers: groups.len(),
                groups,
            }
        })
        .collect();
    Ok(batches)
}
