//! TF-IDF + truncated SVD note embeddings, imported embeddings, and patient matrices.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PatientRecord};
use crate::error::{Error, Result};
use crate::segmenter::{self, FilteredNote, RelevancyMap, SegmentOptions, SimilarityCategory};
use crate::svd::{truncated_svd, CsrMatrix, SvdParams};

pub const LSA_MAGIC: &str = "PATSIM-LSA-1";
pub const MATRICES_MAGIC: &str = "PATSIM-MAT-1";

/// Tolerance for the unit-norm row invariant.
pub const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VectorMethod {
    Lsa,
    Import,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorizerConfig {
    pub method: VectorMethod,
    pub dim: usize,
    pub import_path: Option<PathBuf>,
    pub seed: u64,
    pub min_doc_freq: usize,
    pub sublinear_tf: bool,
}

impl Default for VectorizerConfig {
    fn default() -> Self {
        Self {
            method: VectorMethod::Lsa,
            dim: 50,
            import_path: None,
            seed: 0,
            min_doc_freq: 1,
            sublinear_tf: true,
        }
    }
}

/// Lowercased runs of alphanumeric characters. Digit-letter runs such as
/// `100mg` stay one token.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// A fitted TF-IDF + SVD projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsaModel {
    /// Tokens in column order.
    pub tokens: Vec<String>,
    #[serde(skip)]
    vocabulary: BTreeMap<String, usize>,
    pub idf: Vec<f64>,
    /// vocab × dim, row-major.
    pub projection: Vec<f64>,
    pub dim: usize,
    pub sublinear_tf: bool,
    pub singular_values: Vec<f64>,
}

impl LsaModel {
    fn index_vocabulary(&mut self) {
        self.vocabulary = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn vocabulary(&self) -> &BTreeMap<String, usize> {
        &self.vocabulary
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    /// Projection column `c` as a vector over the vocabulary.
    pub fn projection_column(&self, c: usize) -> Vec<f64> {
        (0..self.vocab_size()).map(|r| self.projection[r * self.dim + c]).collect()
    }

    fn tfidf_row(&self, tokens: &[String]) -> Vec<(usize, f64)> {
        tfidf(tokens, &self.vocabulary, &self.idf, self.sublinear_tf)
    }

    /// L2-normalized embedding, or `None` when no token is in the vocabulary.
    pub fn embed(&self, text: &str) -> Option<Vec<f64>> {
        let row = self.tfidf_row(&tokenize(text));
        let mut out = vec![0.0; self.dim];
        for (j, w) in row {
            let proj = &self.projection[j * self.dim..(j + 1) * self.dim];
            for (o, p) in out.iter_mut().zip(proj) {
                *o += w * p;
            }
        }
        normalized(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ctx = || path.display().to_string();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);
        writeln!(w, "{LSA_MAGIC}").map_err(|e| Error::io(ctx(), e))?;
        serde_json::to_writer(&mut w, self).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(ctx(), e))?;
        w.flush().map_err(|e| Error::io(ctx(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let body = text
            .strip_prefix(LSA_MAGIC)
            .and_then(|r| r.strip_prefix('\n'))
            .ok_or_else(|| Error::Format(format!("{}: missing {LSA_MAGIC} header", path.display())))?;
        let mut model: LsaModel = serde_json::from_str(body).map_err(|e| Error::Format(e.to_string()))?;
        if model.projection.len() != model.tokens.len() * model.dim || model.idf.len() != model.tokens.len() {
            return Err(Error::Format("inconsistent model dimensions".into()));
        }
        model.index_vocabulary();
        Ok(model)
    }
}

fn tfidf(
    tokens: &[String],
    vocabulary: &BTreeMap<String, usize>,
    idf: &[f64],
    sublinear: bool,
) -> Vec<(usize, f64)> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for t in tokens {
        if let Some(&j) = vocabulary.get(t) {
            *counts.entry(j).or_default() += 1;
        }
    }
    let mut row: Vec<(usize, f64)> = counts
        .into_iter()
        .map(|(j, c)| {
            let tf = if sublinear { 1.0 + (c as f64).ln() } else { c as f64 };
            (j, tf * idf[j])
        })
        .collect();
    let norm = row.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, v) in &mut row {
            *v /= norm;
        }
    }
    row
}

/// Scales `v` to unit length; `None` for zero or non-finite vectors.
pub fn normalized(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return None;
    }
    for x in &mut v {
        *x /= norm;
    }
    Some(v)
}

/// Fits TF-IDF (smoothed idf, row-normalized) and a rank-`dim` randomized
/// truncated SVD; the projection is the top right singular vectors.
pub fn fit_lsa<S: AsRef<str>>(docs: &[S], config: &VectorizerConfig) -> Result<LsaModel> {
    let tokenized: Vec<Vec<String>> = docs.iter().map(|d| tokenize(d.as_ref())).collect();
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for toks in &tokenized {
        let mut seen: Vec<&str> = toks.iter().map(String::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_default() += 1;
        }
    }
    let min_df = config.min_doc_freq.max(1);
    let tokens: Vec<String> = df
        .iter()
        .filter(|(_, &c)| c >= min_df)
        .map(|(t, _)| t.to_string())
        .collect();
    let n_docs = docs.len() as f64;
    let idf: Vec<f64> = tokens
        .iter()
        .map(|t| ((1.0 + n_docs) / (1.0 + df[t.as_str()] as f64)).ln() + 1.0)
        .collect();
    let mut model = LsaModel {
        tokens,
        vocabulary: BTreeMap::new(),
        idf,
        projection: Vec::new(),
        dim: config.dim,
        sublinear_tf: config.sublinear_tf,
        singular_values: Vec::new(),
    };
    model.index_vocabulary();

    if config.dim == 0 {
        return Err(Error::Config("dim must be positive".into()));
    }
    if model.vocab_size() < config.dim {
        return Err(Error::DimTooLarge {
            dim: config.dim,
            what: "vocabulary size",
            available: model.vocab_size(),
        });
    }
    let rows: Vec<Vec<(usize, f64)>> = tokenized
        .iter()
        .map(|t| model.tfidf_row(t))
        .filter(|r| !r.is_empty())
        .collect();
    if rows.len() < config.dim {
        return Err(Error::DimTooLarge {
            dim: config.dim,
            what: "non-empty documents",
            available: rows.len(),
        });
    }
    let matrix = CsrMatrix::from_rows(model.vocab_size(), &rows);
    let svd = truncated_svd(&matrix, &SvdParams::new(config.dim, config.seed));
    let v = svd.right;
    model.projection = (0..v.nrows())
        .flat_map(|r| (0..v.ncols()).map(move |c| (r, c)))
        .map(|(r, c)| v[(r, c)])
        .collect();
    model.singular_values = svd.singular_values;
    Ok(model)
}

/// Externally computed note vectors keyed by `(patient_id, note_index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportedEmbeddings {
    pub dim: usize,
    pub vectors: BTreeMap<(String, usize), Vec<f64>>,
}

#[derive(Deserialize)]
struct ImportLine {
    patient_id: String,
    note_index: usize,
    vector: Vec<f64>,
}

fn read_import(path: &Path, expected_dim: Option<usize>) -> Result<ImportedEmbeddings> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut vectors = BTreeMap::new();
    let mut dim = expected_dim;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: ImportLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let key = format!("{}#{}", raw.patient_id, raw.note_index);
        let expected = *dim.get_or_insert(raw.vector.len());
        if raw.vector.len() != expected {
            return Err(Error::DimMismatch {
                key,
                expected,
                found: raw.vector.len(),
            });
        }
        if raw.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::BadVector(key));
        }
        let v = normalized(raw.vector).ok_or_else(|| Error::BadVector(key.clone()))?;
        if vectors.insert((raw.patient_id, raw.note_index), v).is_some() {
            return Err(Error::DuplicateKey(key));
        }
    }
    Ok(ImportedEmbeddings {
        dim: dim.unwrap_or(0),
        vectors,
    })
}

/// Reads an embeddings JSONL file, requiring every vector to have `expected_dim` entries.
pub fn import_embeddings(path: impl AsRef<Path>, expected_dim: usize) -> Result<ImportedEmbeddings> {
    read_import(path.as_ref(), Some(expected_dim))
}

/// Reads an embeddings file, taking the dimension from its first vector.
pub fn import_embeddings_native(path: impl AsRef<Path>) -> Result<ImportedEmbeddings> {
    read_import(path.as_ref(), None)
}

/// Projects imported vectors onto their own top-`dim` right singular vectors.
pub fn compress_embeddings(emb: &ImportedEmbeddings, dim: usize, seed: u64) -> Result<ImportedEmbeddings> {
    if dim > emb.dim || dim > emb.vectors.len() {
        return Err(Error::DimTooLarge {
            dim,
            what: "imported vectors",
            available: emb.dim.min(emb.vectors.len()),
        });
    }
    let rows: Vec<Vec<f64>> = emb.vectors.values().cloned().collect();
    let svd = truncated_svd(&CsrMatrix::from_dense(&rows), &SvdParams::new(dim, seed));
    let mut vectors = BTreeMap::new();
    for (key, v) in &emb.vectors {
        let projected: Vec<f64> = (0..dim)
            .map(|c| v.iter().enumerate().map(|(r, x)| x * svd.right[(r, c)]).sum())
            .collect();
        let p = normalized(projected).ok_or_else(|| Error::BadVector(format!("{}#{}", key.0, key.1)))?;
        vectors.insert(key.clone(), p);
    }
    Ok(ImportedEmbeddings { dim, vectors })
}

/// Loads imported vectors for a configured dimension, compressing when the
/// file's native dimension is larger.
pub fn load_imported_for_dim(path: impl AsRef<Path>, dim: usize, seed: u64) -> Result<ImportedEmbeddings> {
    let native = import_embeddings_native(path.as_ref())?;
    match native.dim.cmp(&dim) {
        std::cmp::Ordering::Equal => Ok(native),
        std::cmp::Ordering::Greater => compress_embeddings(&native, dim, seed),
        std::cmp::Ordering::Less => Err(Error::DimMismatch {
            key: path.as_ref().display().to_string(),
            expected: dim,
            found: native.dim,
        }),
    }
}

/// A patient's note embeddings stacked in chronological order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientMatrix {
    pub patient_id: String,
    n: usize,
    dim: usize,
    data: Vec<f64>,
    pub note_indices: Vec<usize>,
}

impl PatientMatrix {
    /// Stacks `rows`, normalizing each to unit length.
    pub fn from_rows(patient_id: impl Into<String>, rows: Vec<Vec<f64>>, note_indices: Vec<usize>) -> Result<Self> {
        let patient_id = patient_id.into();
        let dim = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || dim == 0 {
            return Err(Error::Degenerate(format!("empty matrix for {patient_id}")));
        }
        if note_indices.len() != rows.len() {
            return Err(Error::LengthMismatch(note_indices.len(), rows.len()));
        }
        let n = rows.len();
        let mut data = Vec::with_capacity(n * dim);
        for (i, r) in rows.into_iter().enumerate() {
            if r.len() != dim {
                return Err(Error::DimMismatch {
                    key: format!("{patient_id} row {i}"),
                    expected: dim,
                    found: r.len(),
                });
            }
            let r = normalized(r).ok_or_else(|| Error::BadVector(format!("{patient_id} row {i}")))?;
            data.extend(r);
        }
        Ok(Self { patient_id, n, dim, data, note_indices })
    }

    /// Stacks rows that are already unit length, leaving their bits untouched.
    pub fn from_unit_rows(patient_id: impl Into<String>, rows: Vec<Vec<f64>>, note_indices: Vec<usize>) -> Result<Self> {
        let patient_id = patient_id.into();
        for (i, r) in rows.iter().enumerate() {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= UNIT_TOL) {
                return Err(Error::BadVector(format!("{patient_id} row {i} has norm {norm}")));
            }
        }
        let mut m = Self::from_rows(patient_id, rows.clone(), note_indices)?;
        m.data = rows.into_iter().flatten().collect();
        Ok(m)
    }

    /// Builds with sequential note indices `0..n`.
    pub fn from_unindexed(patient_id: impl Into<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let idx = (0..rows.len()).collect();
        Self::from_rows(patient_id, rows, idx)
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Same rows in a different order; `perm[k]` is the source row of row `k`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        Self {
            patient_id: self.patient_id.clone(),
            n: self.n,
            dim: self.dim,
            data,
            note_indices: perm.iter().map(|&p| self.note_indices[p]).collect(),
        }
    }
}

/// Where note vectors come from.
pub enum Embedder<'a> {
    Lsa(&'a LsaModel),
    Imported(&'a ImportedEmbeddings),
}

impl Embedder<'_> {
    pub fn dim(&self) -> usize {
        match self {
            Embedder::Lsa(m) => m.dim,
            Embedder::Imported(e) => e.dim,
        }
    }
}

/// One row per filtered note that yields a non-zero embedding; `None` when no rows remain.
pub fn build_patient_matrix(
    patient: &PatientRecord,
    filtered: &[FilteredNote],
    embedder: &Embedder<'_>,
) -> Result<Option<PatientMatrix>> {
    let mut rows = Vec::with_capacity(filtered.len());
    let mut indices = Vec::with_capacity(filtered.len());
    for note in filtered {
        let v = match embedder {
            Embedder::Lsa(model) => model.embed(&note.text),
            Embedder::Imported(imp) => {
                let key = (patient.patient_id.clone(), note.note_index);
                let v = imp.vectors.get(&key).ok_or_else(|| Error::MissingEmbedding {
                    patient_id: patient.patient_id.clone(),
                    note_index: note.note_index,
                })?;
                Some(v.clone())
            }
        };
        if let Some(v) = v {
            rows.push(v);
            indices.push(note.note_index);
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    PatientMatrix::from_rows(patient.patient_id.clone(), rows, indices).map(Some)
}

/// Patient matrices for one (filter, vectorization) configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSet {
    pub label: String,
    pub category: Option<SimilarityCategory>,
    pub dim: usize,
    pub matrices: BTreeMap<String, PatientMatrix>,
    /// Patients with no usable rows.
    pub excluded: Vec<String>,
}

/// How to filter notes before vectorizing.
#[derive(Clone, Copy)]
pub enum NoteFilter<'a> {
    None,
    Category(SimilarityCategory, &'a RelevancyMap),
}

impl NoteFilter<'_> {
    pub fn apply(&self, patient: &PatientRecord, opts: SegmentOptions) -> Vec<FilteredNote> {
        match self {
            NoteFilter::None => segmenter::unfiltered_patient(patient),
            NoteFilter::Category(c, map) => segmenter::filter_patient_with(patient, *c, map, opts),
        }
    }

    pub fn category(&self) -> Option<SimilarityCategory> {
        match self {
            NoteFilter::None => None,
            NoteFilter::Category(c, _) => Some(*c),
        }
    }
}

/// Vector source for [`vectorize_corpus`].
pub enum VectorSource<'a> {
    /// Fit LSA on the filtered notes of the corpus.
    Lsa(&'a VectorizerConfig),
    Imported(&'a ImportedEmbeddings),
}

/// Filters, embeds, and stacks every patient of the corpus.
pub fn vectorize_corpus(
    corpus: &Corpus,
    filter: NoteFilter<'_>,
    source: VectorSource<'_>,
    label: &str,
    opts: SegmentOptions,
) -> Result<(MatrixSet, Option<LsaModel>)> {
    let patients: Vec<&PatientRecord> = corpus.patients().collect();
    let filtered: Vec<Vec<FilteredNote>> = patients.par_iter().map(|p| filter.apply(p, opts)).collect();
    let model = match source {
        VectorSource::Lsa(cfg) => {
            let docs: Vec<&str> = filtered.iter().flatten().map(|n| n.text.as_str()).collect();
            Some(fit_lsa(&docs, cfg)?)
        }
        VectorSource::Imported(_) => None,
    };
    let embedder = match (&model, source) {
        (Some(m), _) => Embedder::Lsa(m),
        (None, VectorSource::Imported(imp)) => Embedder::Imported(imp),
        (None, VectorSource::Lsa(_)) => unreachable!("model fitted above"),
    };
    let built: Vec<Option<PatientMatrix>> = patients
        .par_iter()
        .zip(filtered.par_iter())
        .map(|(p, f)| build_patient_matrix(p, f, &embedder))
        .collect::<Result<_>>()?;
    let mut matrices = BTreeMap::new();
    let mut excluded = Vec::new();
    for (p, m) in patients.iter().zip(built) {
        match m {
            Some(m) => {
                matrices.insert(p.patient_id.clone(), m);
            }
            None => excluded.push(p.patient_id.clone()),
        }
    }
    let set = MatrixSet {
        label: label.to_string(),
        category: filter.category(),
        dim: embedder.dim(),
        matrices,
        excluded,
    };
    Ok((set, model))
}

#[derive(Serialize, Deserialize)]
struct MatrixHeader {
    format: String,
    label: String,
    category: Option<SimilarityCategory>,
    dim: usize,
    patients: usize,
    excluded: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct MatrixLine {
    patient_id: String,
    note_indices: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl MatrixSet {
    /// JSONL: a header object, then one object per patient.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ctx = || path.display().to_string();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);
        let header = MatrixHeader {
            format: MATRICES_MAGIC.to_string(),
            label: self.label.clone(),
            category: self.category,
            dim: self.dim,
            patients: self.matrices.len(),
            excluded: self.excluded.clone(),
        };
        let fmt_err = |e: serde_json::Error| Error::Format(e.to_string());
        serde_json::to_writer(&mut w, &header).map_err(fmt_err)?;
        w.write_all(b"\n").map_err(|e| Error::io(ctx(), e))?;
        for m in self.matrices.values() {
            let line = MatrixLine {
                patient_id: m.patient_id.clone(),
                note_indices: m.note_indices.clone(),
                rows: m.rows().map(<[f64]>::to_vec).collect(),
            };
            serde_json::to_writer(&mut w, &line).map_err(fmt_err)?;
            w.write_all(b"\n").map_err(|e| Error::io(ctx(), e))?;
        }
        w.flush().map_err(|e| Error::io(ctx(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut lines = BufReader::new(file).lines();
        let parse = |line: usize, e: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e,
        };
        let first = lines
            .next()
            .ok_or_else(|| Error::Format(format!("{}: empty matrices file", path.display())))?
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let header: MatrixHeader = serde_json::from_str(&first).map_err(|e| parse(1, e.to_string()))?;
        if header.format != MATRICES_MAGIC {
            return Err(Error::Format(format!("unsupported matrices format {:?}", header.format)));
        }
        let mut matrices = BTreeMap::new();
        for (idx, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: MatrixLine = serde_json::from_str(&line).map_err(|e| parse(idx + 2, e.to_string()))?;
            let m = PatientMatrix::from_unit_rows(raw.patient_id.clone(), raw.rows, raw.note_indices)?;
            if m.dim() != header.dim {
                return Err(Error::DimMismatch {
                    key: raw.patient_id,
                    expected: header.dim,
                    found: m.dim(),
                });
            }
            if matrices.insert(raw.patient_id.clone(), m).is_some() {
                return Err(Error::DuplicateKey(raw.patient_id));
            }
        }
        if matrices.len() != header.patients {
            return Err(Error::Format(format!(
                "header lists {} patients, file holds {}",
                header.patients,
                matrices.len()
            )));
        }
        Ok(Self {
            label: header.label,
            category: header.category,
            dim: header.dim,
            matrices,
            excluded: header.excluded,
        })
    }
}
