//! Patient/note data model, JSONL corpus loading, and synthetic corpus generation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmenter::SimilarityCategory;

const TIMESTAMP_OUT: &str = "%Y-%m-%dT%H:%M:%S%.f";

/// One timestamped free-text note.
#[derive(Debug, Clone, PartialEq)]
pub struct NoteRecord {
    pub patient_id: String,
    pub timestamp: NaiveDateTime,
    pub text: String,
}

/// A patient and their notes in chronological order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub notes: Vec<NoteRecord>,
}

impl PatientRecord {
    /// Builds a record, sorting notes by timestamp. The sort is stable so
    /// notes sharing a timestamp keep their input order.
    pub fn new(patient_id: impl Into<String>, mut notes: Vec<NoteRecord>) -> Result<Self> {
        let patient_id = patient_id.into();
        if notes.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if let Some(n) = notes.iter().find(|n| n.patient_id != patient_id) {
            return Err(Error::Format(format!(
                "note for {:?} filed under patient {:?}",
                n.patient_id, patient_id
            )));
        }
        notes.sort_by_key(|n| n.timestamp);
        Ok(Self { patient_id, notes })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub patients: usize,
    pub notes: usize,
    pub mean_notes_per_patient: f64,
    pub median_notes_per_patient: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    patients: BTreeMap<String, PatientRecord>,
    summary: CorpusSummary,
}

impl Corpus {
    pub fn new(patients: BTreeMap<String, PatientRecord>) -> Result<Self> {
        if patients.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let summary = summarize(&patients);
        Ok(Self { patients, summary })
    }

    pub fn from_notes(notes: Vec<NoteRecord>) -> Result<Self> {
        let mut grouped: BTreeMap<String, Vec<NoteRecord>> = BTreeMap::new();
        for note in notes {
            grouped.entry(note.patient_id.clone()).or_default().push(note);
        }
        let patients = grouped
            .into_iter()
            .map(|(id, notes)| PatientRecord::new(id.clone(), notes).map(|p| (id, p)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::new(patients)
    }

    pub fn patients(&self) -> impl Iterator<Item = &PatientRecord> {
        self.patients.values()
    }

    pub fn patient(&self, id: &str) -> Option<&PatientRecord> {
        self.patients.get(id)
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn summary(&self) -> CorpusSummary {
        self.summary
    }
}

fn summarize(patients: &BTreeMap<String, PatientRecord>) -> CorpusSummary {
    let mut counts: Vec<usize> = patients.values().map(|p| p.notes.len()).collect();
    counts.sort_unstable();
    let notes: usize = counts.iter().sum();
    let n = counts.len();
    let median = if n == 0 {
        0.0
    } else if n % 2 == 1 {
        counts[n / 2] as f64
    } else {
        (counts[n / 2 - 1] + counts[n / 2]) as f64 / 2.0
    };
    CorpusSummary {
        patients: n,
        notes,
        mean_notes_per_patient: if n == 0 { 0.0 } else { notes as f64 / n as f64 },
        median_notes_per_patient: median,
    }
}

/// Patient count, note count, mean and median notes per patient.
pub fn corpus_stats(corpus: &Corpus) -> CorpusSummary {
    summarize(&corpus.patients)
}

/// Parses an ISO-8601 date or date-time. A missing time part means midnight;
/// values carrying an offset are converted to UTC.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    for fmt in [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

pub fn format_timestamp(ts: &NaiveDateTime) -> String {
    ts.format(TIMESTAMP_OUT).to_string()
}

#[derive(Deserialize)]
struct NoteLine {
    patient_id: String,
    timestamp: String,
    text: String,
}

#[derive(Serialize)]
struct NoteLineOut<'a> {
    patient_id: &'a str,
    timestamp: String,
    text: &'a str,
}

fn jsonl_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files = Vec::new();
        let entries = std::fs::read_dir(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(path.display().to_string(), e))?;
            let p = entry.path();
            if p.extension().is_some_and(|ext| ext == "jsonl") {
                files.push(p);
            }
        }
        files.sort();
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn read_notes(path: &Path, out: &mut Vec<NoteRecord>) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: NoteLine =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let timestamp = parse_timestamp(&raw.timestamp)
            .ok_or_else(|| parse_err(lineno, format!("unparseable timestamp {:?}", raw.timestamp)))?;
        if raw.text.trim().is_empty() {
            return Err(parse_err(lineno, "empty note text".into()));
        }
        if raw.patient_id.is_empty() {
            return Err(parse_err(lineno, "empty patient_id".into()));
        }
        out.push(NoteRecord {
            patient_id: raw.patient_id,
            timestamp,
            text: raw.text,
        });
    }
    Ok(())
}

/// Loads a JSONL file, or every `*.jsonl` file of a directory in name order.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let mut notes = Vec::new();
    for file in jsonl_files(path)? {
        read_notes(&file, &mut notes)?;
    }
    if notes.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Corpus::from_notes(notes)
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for patient in corpus.patients() {
        for note in &patient.notes {
            let line = NoteLineOut {
                patient_id: &note.patient_id,
                timestamp: format_timestamp(&note.timestamp),
                text: &note.text,
            };
            serde_json::to_writer(&mut w, &line).map_err(|e| Error::Format(e.to_string()))?;
            w.write_all(b"\n").map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes the planted assignment as `patient_id,cluster`.
pub fn write_assignment(assignment: &BTreeMap<String, usize>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["patient_id", "cluster"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for (id, cluster) in assignment {
        w.write_record([id.as_str(), &cluster.to_string()])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_assignment(path: impl AsRef<Path>) -> Result<BTreeMap<String, usize>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (idx, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 2,
            message,
        };
        let id = rec.get(0).ok_or_else(|| parse_err("missing patient_id".into()))?;
        let cluster = rec
            .get(1)
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| parse_err("missing or bad cluster".into()))?;
        out.insert(id.to_string(), cluster);
    }
    Ok(out)
}

/// Parameters for [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_patients: usize,
    pub n_clusters: usize,
    /// Inclusive range of notes per patient.
    pub notes_per_patient: (usize, usize),
    pub seed: u64,
    pub vocab_size: usize,
    /// Titles used for segments of each category. Empty means the built-in table.
    pub category_titles: BTreeMap<SimilarityCategory, Vec<String>>,
}

impl SynthSpec {
    pub fn new(n_patients: usize, n_clusters: usize, seed: u64) -> Self {
        Self {
            n_patients,
            n_clusters,
            notes_per_patient: (8, 14),
            seed,
            vocab_size: 3000,
            category_titles: default_category_titles(),
        }
    }

    fn titles(&self) -> BTreeMap<SimilarityCategory, Vec<String>> {
        if self.category_titles.is_empty() {
            default_category_titles()
        } else {
            self.category_titles.clone()
        }
    }

    fn min_vocab(&self) -> usize {
        let blocks = self.titles().len() * (self.n_clusters + 1) + 1;
        blocks * MIN_BLOCK
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.n_patients == 0 {
            return bad("n_patients must be positive");
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_patients {
            return bad("n_clusters must be in 1..=n_patients");
        }
        let (lo, hi) = self.notes_per_patient;
        if lo == 0 || lo > hi {
            return bad("notes_per_patient must be a non-empty positive range");
        }
        let titles = self.titles();
        if titles.values().any(|t| t.is_empty()) {
            return bad("every category needs at least one title");
        }
        if self.vocab_size < self.min_vocab() {
            return Err(Error::InvalidSpec(format!(
                "vocab_size {} too small, need at least {}",
                self.vocab_size,
                self.min_vocab()
            )));
        }
        Ok(())
    }
}

const MIN_BLOCK: usize = 8;

/// Built-in segment titles per category. The first title of each list is the
/// prototype used for relevancy expansion.
pub fn default_category_titles() -> BTreeMap<SimilarityCategory, Vec<String>> {
    use SimilarityCategory::*;
    let table: [(SimilarityCategory, &[&str]); 10] = [
        (Age, &["age", "patient age", "born"]),
        (FamilyHistory, &["family history", "fa", "relatives"]),
        (MedicalHistory, &["medical history", "pa", "past illnesses"]),
        (SocialHistory, &["social history", "sa", "lifestyle"]),
        (Medication, &["medication", "drugs", "m"]),
        (Allergies, &["allergies", "aa", "intolerances"]),
        (TumorType, &["diagnosis", "histology", "dg"]),
        (Treatment, &["treatment plan", "therapy plan", "plan"]),
        (TreatmentType, &["treatment", "procedure", "th"]),
        (SideEffects, &["side effects", "toxicity", "adverse events"]),
    ];
    table
        .into_iter()
        .map(|(c, t)| (c, t.iter().map(|s| s.to_string()).collect()))
        .collect()
}

const SYLLABLES: [&str; 16] = [
    "ba", "ko", "mi", "tu", "re", "sa", "lo", "ne", "vi", "da", "pe", "zu", "ga", "ri", "fo", "hy",
];

/// Deterministic pseudo-word for a vocabulary index: at least three syllables,
/// so it never collides with short title words.
fn pseudo_word(mut idx: usize) -> String {
    let mut word = String::new();
    for _ in 0..3 {
        word.push_str(SYLLABLES[idx % SYLLABLES.len()]);
        idx /= SYLLABLES.len();
    }
    while idx > 0 {
        word.push_str(SYLLABLES[idx % SYLLABLES.len()]);
        idx /= SYLLABLES.len();
    }
    word
}

struct Vocab {
    background: Vec<String>,
    category_common: Vec<Vec<String>>,
    topics: Vec<Vec<Vec<String>>>,
}

impl Vocab {
    fn build(vocab_size: usize, n_categories: usize, n_clusters: usize) -> Self {
        let words: Vec<String> = (0..vocab_size).map(pseudo_word).collect();
        let n_blocks = 1 + n_categories * (n_clusters + 1);
        let block = vocab_size / n_blocks;
        let mut chunks = words.chunks(block).map(|c| c.to_vec());
        let background = chunks.next().unwrap_or_default();
        let category_common = (0..n_categories)
            .map(|_| chunks.next().unwrap_or_default())
            .collect();
        let topics = (0..n_clusters)
            .map(|_| {
                (0..n_categories)
                    .map(|_| chunks.next().unwrap_or_default())
                    .collect()
            })
            .collect();
        Self {
            background,
            category_common,
            topics,
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Generates a corpus with planted cluster structure.
///
/// Each note is a handful of titled segments. A segment body for category `k`
/// of a patient in cluster `c` mixes words from a block private to `(c, k)`,
/// a block shared by all clusters for `k` (so synonym titles look alike in the
/// title space), and a global background block. Untitled background paragraphs
/// are sprinkled in as noise. Patient `i` belongs to cluster `i % n_clusters`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Corpus, BTreeMap<String, usize>)> {
    spec.validate()?;
    let titles: Vec<(SimilarityCategory, Vec<String>)> = spec.titles().into_iter().collect();
    let vocab = Vocab::build(spec.vocab_size, titles.len(), spec.n_clusters);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = NaiveDate::from_ymd_opt(2015, 1, 1)
        .and_then(|d| d.and_hms_opt(8, 0, 0))
        .expect("valid base date");
    let width = spec.n_patients.to_string().len().max(4);

    let mut patients = BTreeMap::new();
    let mut assignment = BTreeMap::new();
    for i in 0..spec.n_patients {
        let cluster = i % spec.n_clusters;
        let id = format!("P{:0width$}", i + 1, width = width);
        let n_notes = rng.random_range(spec.notes_per_patient.0..=spec.notes_per_patient.1);
        let mut ts = base + chrono::Duration::days(rng.random_range(0..1000));
        let mut notes = Vec::with_capacity(n_notes);
        for _ in 0..n_notes {
            ts += chrono::Duration::days(rng.random_range(1..60))
                + chrono::Duration::minutes(rng.random_range(0..600));
            let text = synth_note(&mut rng, &titles, &vocab, cluster);
            notes.push(NoteRecord {
                patient_id: id.clone(),
                timestamp: ts,
                text,
            });
        }
        assignment.insert(id.clone(), cluster);
        patients.insert(id.clone(), PatientRecord::new(id, notes)?);
    }
    Ok((Corpus::new(patients)?, assignment))
}

fn synth_note(
    rng: &mut ChaCha8Rng,
    titles: &[(SimilarityCategory, Vec<String>)],
    vocab: &Vocab,
    cluster: usize,
) -> String {
    let n_segments = rng.random_range(2..=4).min(titles.len());
    let mut order: Vec<usize> = (0..titles.len()).collect();
    order.shuffle(rng);
    let mut paragraphs = Vec::new();
    for &k in order.iter().take(n_segments) {
        let title = titles[k].1.choose(rng).expect("non-empty title list");
        let n_tokens = rng.random_range(8..=20);
        let body: Vec<&str> = (0..n_tokens)
            .map(|_| {
                let roll: f64 = rng.random();
                let pool = if roll < 0.5 {
                    &vocab.topics[cluster][k]
                } else if roll < 0.8 {
                    &vocab.category_common[k]
                } else {
                    &vocab.background
                };
                pool.choose(rng).map(String::as_str).unwrap_or("")
            })
            .collect();
        let sep = if rng.random_bool(0.5) { " " } else { "\n" };
        paragraphs.push(format!("{}:{}{}", capitalize(title), sep, body.join(" ")));
    }
    if rng.random_bool(0.3) {
        let n_tokens = rng.random_range(5..=12);
        let noise: Vec<&str> = (0..n_tokens)
            .map(|_| vocab.background.choose(rng).map(String::as_str).unwrap_or(""))
            .collect();
        let at = rng.random_range(0..=paragraphs.len());
        paragraphs.insert(at, noise.join(" "));
    }
    paragraphs.join("\n\n")
}
