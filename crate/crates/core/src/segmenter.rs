//! Note segmentation, title-space prototype expansion, and category filtering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{Corpus, PatientRecord};
use crate::error::{Error, Result};
use crate::vectorizer::{self, VectorizerConfig};

/// Title assigned to paragraphs that carry no title of their own.
pub const UNTITLED: &str = "untitled";

/// Maximum number of whitespace-separated words before the colon of a title.
pub const MAX_TITLE_WORDS: usize = 6;

/// Default cosine threshold for prototype expansion.
pub const DEFAULT_EXPANSION_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SimilarityCategory {
    Age,
    FamilyHistory,
    MedicalHistory,
    SocialHistory,
    Medication,
    Allergies,
    TumorType,
    Treatment,
    TreatmentType,
    SideEffects,
}

impl SimilarityCategory {
    pub const ALL: [SimilarityCategory; 10] = [
        Self::Age,
        Self::FamilyHistory,
        Self::MedicalHistory,
        Self::SocialHistory,
        Self::Medication,
        Self::Allergies,
        Self::TumorType,
        Self::Treatment,
        Self::TreatmentType,
        Self::SideEffects,
    ];

    /// Fixed id in `1..=10`.
    pub fn id(self) -> u8 {
        Self::ALL.iter().position(|&c| c == self).expect("listed") as u8 + 1
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(usize::from(id).checked_sub(1)?).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Age => "Age",
            Self::FamilyHistory => "Family history",
            Self::MedicalHistory => "Medical history",
            Self::SocialHistory => "Social history",
            Self::Medication => "Medication",
            Self::Allergies => "Allergies",
            Self::TumorType => "Type of tumor",
            Self::Treatment => "Treatment",
            Self::TreatmentType => "Treatment type",
            Self::SideEffects => "Side effects",
        }
    }

    /// File-name friendly form, e.g. `05_medication`.
    pub fn slug(self) -> String {
        format!("{:02}_{}", self.id(), self.name().to_lowercase().replace(' ', "_"))
    }
}

impl fmt::Display for SimilarityCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimilarityCategory {
    type Err = Error;

    /// Accepts the display name (any case, `_` or `-` for spaces), the id, or the slug.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if let Ok(id) = t.parse::<u8>() {
            return Self::from_id(id).ok_or_else(|| Error::UnknownCategory(s.to_string()));
        }
        let key: String = t
            .to_lowercase()
            .chars()
            .map(|c| if c == '_' || c == '-' { ' ' } else { c })
            .collect();
        let key = key.trim_start_matches(|c: char| c.is_ascii_digit() || c == ' ');
        Self::ALL
            .into_iter()
            .find(|c| c.name().to_lowercase() == key)
            .ok_or_else(|| Error::UnknownCategory(s.to_string()))
    }
}

impl Serialize for SimilarityCategory {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for SimilarityCategory {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A titled fragment of a note.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub title: String,
    pub body: String,
    pub note_index: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SegmentOptions {
    /// Give untitled paragraphs the title of the preceding titled segment in the same note.
    pub inherit_titles: bool,
}

/// Lowercases, collapses whitespace, and strips trailing colons.
pub fn normalize_title(t: &str) -> String {
    let joined = t.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    joined
        .trim_end_matches(|c: char| c == ':' || c.is_whitespace())
        .to_string()
}

/// Splits `line` into a normalized title and the remainder after the colon,
/// if the line opens with at most [`MAX_TITLE_WORDS`] words ending in `:`.
fn split_title(line: &str) -> Option<(String, &str)> {
    let colon = line.find(':')?;
    let prefix = &line[..colon];
    let words = prefix.split_whitespace().count();
    if words == 0 || words > MAX_TITLE_WORDS {
        return None;
    }
    let title = normalize_title(prefix);
    if title.is_empty() {
        return None;
    }
    Some((title, &line[colon + 1..]))
}

fn paragraphs(text: &str) -> Vec<Vec<&str>> {
    let mut out = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn segment_note(text: &str) -> Vec<Segment> {
    segment_note_with(text, 0, SegmentOptions::default())
}

/// Segments one note. A paragraph whose only content is a title passes that
/// title on to the next paragraph when that paragraph is untitled.
pub fn segment_note_with(text: &str, note_index: usize, opts: SegmentOptions) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    let mut pending: Option<(String, String)> = None;
    let mut last_title: Option<String> = None;

    for lines in paragraphs(text) {
        let raw = lines.join("\n");
        let (title, body) = match split_title(lines[0]) {
            Some((title, rest)) => {
                let mut body = rest.trim().to_string();
                for l in &lines[1..] {
                    if !body.is_empty() {
                        body.push('\n');
                    }
                    body.push_str(l.trim_end());
                }
                (Some(title), body.trim().to_string())
            }
            None => (None, raw.trim().to_string()),
        };

        if let Some((ptitle, praw)) = pending.take() {
            if title.is_none() {
                last_title = Some(ptitle.clone());
                out.push(Segment { title: ptitle, body, note_index });
                continue;
            }
            out.push(Segment { title: UNTITLED.to_string(), body: praw, note_index });
        }

        match title {
            Some(t) if body.is_empty() => pending = Some((t, raw.trim().to_string())),
            Some(t) => {
                last_title = Some(t.clone());
                out.push(Segment { title: t, body, note_index });
            }
            None => {
                let t = match (&last_title, opts.inherit_titles) {
                    (Some(prev), true) => prev.clone(),
                    _ => UNTITLED.to_string(),
                };
                out.push(Segment { title: t, body, note_index });
            }
        }
    }
    if let Some((_, praw)) = pending {
        out.push(Segment { title: UNTITLED.to_string(), body: praw, note_index });
    }
    out
}

/// Segments every note of every patient, in patient then chronological order.
pub fn segment_corpus(corpus: &Corpus, opts: SegmentOptions) -> Vec<(String, Segment)> {
    corpus
        .patients()
        .flat_map(|p| {
            p.notes.iter().enumerate().flat_map(move |(i, n)| {
                segment_note_with(&n.text, i, opts)
                    .into_iter()
                    .map(move |s| (p.patient_id.clone(), s))
            })
        })
        .collect()
}

pub fn write_segments(segments: &[(String, Segment)], path: impl AsRef<Path>) -> Result<()> {
    use std::io::Write;
    #[derive(Serialize)]
    struct Line<'a> {
        patient_id: &'a str,
        note_index: usize,
        title: &'a str,
        body: &'a str,
    }
    let path = path.as_ref();
    let ctx = || path.display().to_string();
    let file = std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for (pid, s) in segments {
        let line = Line {
            patient_id: pid,
            note_index: s.note_index,
            title: &s.title,
            body: &s.body,
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

/// Unit-norm embedding per segment title.
#[derive(Debug, Clone, PartialEq)]
pub struct TitleSpace {
    pub embeddings: BTreeMap<String, Vec<f64>>,
}

impl TitleSpace {
    pub fn cosine(&self, a: &str, b: &str) -> Option<f64> {
        let va = self.embeddings.get(a)?;
        let vb = self.embeddings.get(b)?;
        Some(dot(va, vb))
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Distinct titles (excluding the untitled sentinel) with their concatenated bodies.
pub fn title_documents(corpus: &Corpus, opts: SegmentOptions) -> BTreeMap<String, String> {
    let mut docs: BTreeMap<String, String> = BTreeMap::new();
    for (_, seg) in segment_corpus(corpus, opts) {
        if seg.title == UNTITLED {
            continue;
        }
        let doc = docs.entry(seg.title).or_default();
        doc.push_str(&seg.body);
        doc.push('\n');
    }
    docs
}

/// Embeds each distinct segment title by fitting LSA over one document per
/// title (the bag of all bodies filed under it).
pub fn build_title_space(corpus: &Corpus, dim: usize, seed: u64) -> Result<TitleSpace> {
    build_title_space_from_docs(&title_documents(corpus, SegmentOptions::default()), dim, seed)
}

pub fn build_title_space_from_docs(
    docs: &BTreeMap<String, String>,
    dim: usize,
    seed: u64,
) -> Result<TitleSpace> {
    if docs.len() < 2 {
        return Err(Error::InsufficientTitles(docs.len()));
    }
    let texts: Vec<&str> = docs.values().map(String::as_str).collect();
    let config = VectorizerConfig {
        dim,
        seed,
        ..VectorizerConfig::default()
    };
    let model = vectorizer::fit_lsa(&texts, &config)?;
    let embeddings = docs
        .iter()
        .filter_map(|(title, text)| model.embed(text).map(|v| (title.clone(), v)))
        .collect();
    Ok(TitleSpace { embeddings })
}

/// Per-category set of relevant titles.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelevancyMap {
    pub entries: BTreeMap<SimilarityCategory, BTreeSet<String>>,
}

impl RelevancyMap {
    pub fn titles(&self, category: SimilarityCategory) -> Option<&BTreeSet<String>> {
        self.entries.get(&category)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let raw: BTreeMap<SimilarityCategory, Vec<String>> =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(Self {
            entries: raw
                .into_iter()
                .map(|(c, ts)| (c, ts.iter().map(|t| normalize_title(t)).collect()))
                .collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Every category maps to every title in `titles`.
    pub fn all_titles<'a>(titles: impl IntoIterator<Item = &'a str> + Clone) -> Self {
        Self {
            entries: SimilarityCategory::ALL
                .into_iter()
                .map(|c| (c, titles.clone().into_iter().map(str::to_string).collect()))
                .collect(),
        }
    }
}

/// Prototype titles have the same shape as a relevancy map.
pub type Prototypes = RelevancyMap;

/// The first built-in synthetic title of each category.
pub fn default_prototypes() -> Prototypes {
    RelevancyMap {
        entries: crate::corpus::default_category_titles()
            .into_iter()
            .map(|(c, ts)| (c, ts.into_iter().take(1).collect()))
            .collect(),
    }
}

/// Grows each category's prototypes with every title whose cosine to any
/// prototype of that category reaches `threshold`.
pub fn expand_prototypes(prototypes: &Prototypes, space: &TitleSpace, threshold: f64) -> Result<RelevancyMap> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("expansion threshold {threshold} not in (0, 1]")));
    }
    let mut entries = BTreeMap::new();
    for (&category, protos) in &prototypes.entries {
        let mut proto_vecs = Vec::with_capacity(protos.len());
        for p in protos {
            let v = space
                .embeddings
                .get(p)
                .ok_or_else(|| Error::UnknownTitle(p.clone()))?;
            proto_vecs.push(v);
        }
        let mut set = protos.clone();
        for (title, v) in &space.embeddings {
            if proto_vecs.iter().any(|p| dot(p, v) >= threshold) {
                set.insert(title.clone());
            }
        }
        entries.insert(category, set);
    }
    Ok(RelevancyMap { entries })
}

/// A note reduced to its category-relevant text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilteredNote {
    /// Position of the note in the patient's full chronological sequence.
    pub note_index: usize,
    pub text: String,
}

/// Keeps the segments whose titles are relevant to `category`. Notes with
/// nothing retained are dropped.
pub fn filter_patient(
    patient: &PatientRecord,
    category: SimilarityCategory,
    relevancy: &RelevancyMap,
) -> Vec<FilteredNote> {
    filter_patient_with(patient, category, relevancy, SegmentOptions::default())
}

pub fn filter_patient_with(
    patient: &PatientRecord,
    category: SimilarityCategory,
    relevancy: &RelevancyMap,
    opts: SegmentOptions,
) -> Vec<FilteredNote> {
    let Some(keep) = relevancy.titles(category) else {
        return Vec::new();
    };
    patient
        .notes
        .iter()
        .enumerate()
        .filter_map(|(i, note)| {
            let bodies: Vec<String> = segment_note_with(&note.text, i, opts)
                .into_iter()
                .filter(|s| keep.contains(&s.title))
                .map(|s| s.body)
                .collect();
            (!bodies.is_empty()).then(|| FilteredNote {
                note_index: i,
                text: bodies.join("\n"),
            })
        })
        .collect()
}

/// Every note, whole, for runs without category filtering.
pub fn unfiltered_patient(patient: &PatientRecord) -> Vec<FilteredNote> {
    patient
        .notes
        .iter()
        .enumerate()
        .map(|(i, n)| FilteredNote {
            note_index: i,
            text: n.text.clone(),
        })
        .collect()
}
