//! Parallel all-pairs similarity matrices, their binary file format, and timing reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matsim::{self, MatSimMethod, Rv2Gram, SimScore};
use crate::segmenter::SimilarityCategory;
use crate::vectorizer::PatientMatrix;

pub const SIM_MAGIC: &[u8; 12] = b"PATSIM-SIM-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VectorFamily {
    Lsa,
    D2v,
    Rbc,
    Combined,
}

impl VectorFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lsa => "lsa",
            Self::D2v => "d2v",
            Self::Rbc => "rbc",
            Self::Combined => "combined",
        }
    }
}

/// Vectorization option: a family and an output dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VMethod {
    pub family: VectorFamily,
    pub dim: usize,
}

impl VMethod {
    pub const LSA050: Self = Self::new(VectorFamily::Lsa, 50);
    pub const LSA200: Self = Self::new(VectorFamily::Lsa, 200);
    pub const D2V050: Self = Self::new(VectorFamily::D2v, 50);
    pub const D2V200: Self = Self::new(VectorFamily::D2v, 200);
    pub const RBC050: Self = Self::new(VectorFamily::Rbc, 50);
    pub const RBC200: Self = Self::new(VectorFamily::Rbc, 200);
    pub const COMBINED: Self = Self::new(VectorFamily::Combined, 50);

    /// The seven grid options in report column order.
    pub const GRID: [Self; 7] = [
        Self::LSA050,
        Self::LSA200,
        Self::D2V050,
        Self::D2V200,
        Self::RBC050,
        Self::RBC200,
        Self::COMBINED,
    ];

    /// Legs averaged by `combined`.
    pub const COMBINED_LEGS: [Self; 3] = [Self::LSA050, Self::D2V050, Self::RBC050];

    pub const fn new(family: VectorFamily, dim: usize) -> Self {
        Self { family, dim }
    }

    pub fn label(self) -> String {
        match self.family {
            VectorFamily::Combined => "combined".to_string(),
            f => format!("{}{:03}", f.as_str(), self.dim),
        }
    }
}

impl fmt::Display for VMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for VMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_lowercase();
        let t = t.strip_prefix('v').unwrap_or(&t);
        if t == "combined" {
            return Ok(Self::COMBINED);
        }
        let bad = || Error::Config(format!("unknown vectorization method {s:?}"));
        let (family, rest) = if let Some(r) = t.strip_prefix("lsa") {
            (VectorFamily::Lsa, r)
        } else if let Some(r) = t.strip_prefix("d2v") {
            (VectorFamily::D2v, r)
        } else if let Some(r) = t.strip_prefix("rbc") {
            (VectorFamily::Rbc, r)
        } else {
            return Err(bad());
        };
        let dim: usize = rest.parse().map_err(|_| bad())?;
        if dim == 0 {
            return Err(bad());
        }
        Ok(Self::new(family, dim))
    }
}

impl Serialize for VMethod {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for VMethod {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RunConfig {
    pub filter: bool,
    /// Names the run; only used for note selection when `filter` is on.
    pub category: SimilarityCategory,
    pub vmethod: VMethod,
    pub mmethod: MatSimMethod,
    pub workers: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(vmethod: VMethod, mmethod: MatSimMethod) -> Self {
        Self {
            filter: false,
            category: SimilarityCategory::Age,
            vmethod,
            mmethod,
            workers: 1,
            seed: 0,
        }
    }
}

/// Fixed-length bit set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    len: usize,
    bytes: Vec<u8>,
}

impl Bitmap {
    pub fn from_bools(bits: &[bool]) -> Self {
        let mut bytes = vec![0u8; bits.len().div_ceil(8)];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        Self { len: bits.len(), bytes }
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        self.bytes[i / 8] & (1 << (i % 8)) != 0
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }
}

/// Number of unordered pairs of `n` items.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Linear index of pair `(i, j)`, `i < j`, in row-major strict upper-triangle order.
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

/// Inverse of [`pair_index`].
pub fn pair_at(n: usize, t: usize) -> (usize, usize) {
    // Largest i with pair_index(n, i, i + 1) <= t.
    let (mut lo, mut hi) = (0usize, n - 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if pair_index(n, mid, mid + 1) <= t {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let i = if hi < n - 1 && pair_index(n, hi, hi + 1) <= t { hi } else { lo };
    (i, t - pair_index(n, i, i + 1) + i + 1)
}

/// Symmetric all-pairs scores stored as a packed strict upper triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub patient_ids: Vec<String>,
    scores: Vec<f64>,
    defined: Bitmap,
    diagonal: Bitmap,
    pub config: RunConfig,
    pub wall_time_seconds: f64,
    /// Patients absent from this configuration.
    pub excluded: Vec<String>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patient_ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.patient_ids.binary_search_by(|p| p.as_str().cmp(id)).ok()
    }

    pub fn get(&self, i: usize, j: usize) -> SimScore {
        use std::cmp::Ordering::*;
        match i.cmp(&j) {
            Equal => {
                if self.diagonal.get(i) {
                    SimScore::new(1.0)
                } else {
                    SimScore::undefined()
                }
            }
            Less | Greater => {
                let t = pair_index(self.len(), i.min(j), i.max(j));
                if self.defined.get(t) {
                    SimScore::new(self.scores[t])
                } else {
                    SimScore::undefined()
                }
            }
        }
    }

    /// Score by patient id; `None` when either patient is missing.
    pub fn get_by_id(&self, a: &str, b: &str) -> Option<SimScore> {
        Some(self.get(self.index_of(a)?, self.index_of(b)?))
    }

    /// The same matrix with `f` applied to every defined off-diagonal score.
    pub fn mapped(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for (t, s) in out.scores.iter_mut().enumerate() {
            if out.defined.get(t) {
                *s = f(*s);
            }
        }
        out
    }

    /// Raw packed upper-triangle values.
    pub fn packed_scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn defined_pairs(&self) -> &Bitmap {
        &self.defined
    }

    /// Bit patterns of scores and definedness, for determinism checks.
    pub fn score_bits(&self) -> Vec<u64> {
        self.scores
            .iter()
            .enumerate()
            .map(|(t, s)| if self.defined.get(t) { s.to_bits() } else { u64::MAX })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }

    /// Magic, id table, triangle payload, diagonal and pair definedness
    /// bitmaps, then a length-prefixed JSON trailer with config and timing.
    /// Integers are little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.len();
        let mut out = Vec::with_capacity(64 + n * 16 + self.scores.len() * 8);
        out.extend_from_slice(SIM_MAGIC);
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for id in &self.patient_ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for s in &self.scores {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&self.diagonal.bytes);
        out.extend_from_slice(&self.defined.bytes);
        let trailer = Trailer {
            config: self.config,
            wall_time_seconds: self.wall_time_seconds,
            excluded: self.excluded.clone(),
        };
        let json = serde_json::to_vec(&trailer).map_err(|e| Error::Format(e.to_string()))?;
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(SIM_MAGIC.len())? != SIM_MAGIC {
            return Err(Error::Format("not a PATSIM-SIM-1 file".into()));
        }
        let n = r.u64()? as usize;
        if n > bytes.len() {
            return Err(Error::Format("implausible patient count".into()));
        }
        let mut patient_ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format(e.to_string()))?;
            patient_ids.push(id.to_string());
        }
        if patient_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("patient ids not strictly sorted".into()));
        }
        let m = pair_count(n);
        let payload = r.take(m.checked_mul(8).ok_or_else(|| Error::Format("overflow".into()))?)?;
        let scores = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let diagonal = Bitmap { len: n, bytes: r.take(n.div_ceil(8))?.to_vec() };
        let defined = Bitmap { len: m, bytes: r.take(m.div_ceil(8))?.to_vec() };
        let tlen = r.u64()? as usize;
        let trailer: Trailer = serde_json::from_slice(r.take(tlen)?).map_err(|e| Error::Format(e.to_string()))?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after trailer".into()));
        }
        Ok(Self {
            patient_ids,
            scores,
            defined,
            diagonal,
            config: trailer.config,
            wall_time_seconds: trailer.wall_time_seconds,
            excluded: trailer.excluded,
        })
    }

    /// `id_a,id_b,score,defined` for every unordered pair.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let err = |e: csv::Error| Error::Format(e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["id_a", "id_b", "score", "defined"]).map_err(err)?;
        let n = self.len();
        for i in 0..n {
            for j in i + 1..n {
                let s = self.get(i, j);
                let value = s.get().map(|v| v.to_string()).unwrap_or_default();
                w.write_record([
                    self.patient_ids[i].as_str(),
                    self.patient_ids[j].as_str(),
                    &value,
                    if s.defined { "true" } else { "false" },
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    config: RunConfig,
    wall_time_seconds: f64,
    excluded: Vec<String>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated similarity file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

enum Prepared<'a> {
    Rv2(Vec<Rv2Gram>),
    Rows(Vec<&'a PatientMatrix>),
}

impl Prepared<'_> {
    fn pair(&self, method: MatSimMethod, i: usize, j: usize) -> SimScore {
        match self {
            Prepared::Rv2(grams) => grams[i].score(&grams[j]),
            Prepared::Rows(rows) => matsim::similarity(method, rows[i], rows[j]).expect("dims checked"),
        }
    }

    fn diagonal(&self) -> Vec<bool> {
        match self {
            Prepared::Rv2(grams) => grams.iter().map(|g| !g.is_degenerate()).collect(),
            Prepared::Rows(rows) => vec![true; rows.len()],
        }
    }
}

fn default_chunk(pairs: usize, workers: usize) -> usize {
    pairs.div_ceil(workers.max(1) * 16).max(1)
}

/// All pairwise scores for `config.mmethod`, computed by `config.workers` threads.
pub fn compute_all_pairs(matrices: &BTreeMap<String, PatientMatrix>, config: &RunConfig) -> Result<SimilarityMatrix> {
    let pairs = pair_count(matrices.len());
    compute_all_pairs_chunked(matrices, config, default_chunk(pairs, config.workers))
}

/// As [`compute_all_pairs`] with an explicit number of pairs per work chunk.
pub fn compute_all_pairs_chunked(
    matrices: &BTreeMap<String, PatientMatrix>,
    config: &RunConfig,
    chunk: usize,
) -> Result<SimilarityMatrix> {
    let n = matrices.len();
    if n < 2 {
        return Err(Error::TooFewPatients(n));
    }
    let rows: Vec<&PatientMatrix> = matrices.values().collect();
    let dim = rows[0].dim();
    if let Some(bad) = rows.iter().find(|m| m.dim() != dim) {
        return Err(Error::DimMismatch {
            key: bad.patient_id.clone(),
            expected: dim,
            found: bad.dim(),
        });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;

    let start = Instant::now();
    let (scores, defined, diagonal) = pool.install(|| {
        let prepared = match config.mmethod {
            MatSimMethod::Rv2 => Prepared::Rv2(rows.par_iter().map(|m| Rv2Gram::new(m)).collect()),
            _ => Prepared::Rows(rows.clone()),
        };
        let m = pair_count(n);
        let mut scores = vec![0.0f64; m];
        let mut defined = vec![false; m];
        scores
            .par_chunks_mut(chunk.max(1))
            .zip(defined.par_chunks_mut(chunk.max(1)))
            .enumerate()
            .for_each(|(c, (out, ok))| {
                let (mut i, mut j) = pair_at(n, c * chunk.max(1));
                for (o, d) in out.iter_mut().zip(ok.iter_mut()) {
                    let s = prepared.pair(config.mmethod, i, j);
                    *o = if s.defined { s.value } else { f64::NAN };
                    *d = s.defined;
                    j += 1;
                    if j == n {
                        i += 1;
                        j = i + 1;
                    }
                }
            });
        (scores, defined, prepared.diagonal())
    });
    let wall_time_seconds = start.elapsed().as_secs_f64();

    Ok(SimilarityMatrix {
        patient_ids: matrices.keys().cloned().collect(),
        scores,
        defined: Bitmap::from_bools(&defined),
        diagonal: Bitmap::from_bools(&diagonal),
        config: *config,
        wall_time_seconds,
        excluded: Vec::new(),
    })
}

/// Averages per-vectorization matrices pair by pair over the union of their
/// patients. A leg missing a patient contributes an undefined score.
pub fn combine_matrices(legs: &[&SimilarityMatrix], config: &RunConfig) -> Result<SimilarityMatrix> {
    if legs.is_empty() {
        return Err(Error::Degenerate("no legs to combine".into()));
    }
    let mut ids: Vec<String> = legs.iter().flat_map(|l| l.patient_ids.iter().cloned()).collect();
    ids.sort();
    ids.dedup();
    let n = ids.len();
    if n < 2 {
        return Err(Error::TooFewPatients(n));
    }
    let maps: Vec<Vec<Option<usize>>> = legs
        .iter()
        .map(|l| ids.iter().map(|id| l.index_of(id)).collect())
        .collect();
    let leg_score = |leg: usize, i: usize, j: usize| match (maps[leg][i], maps[leg][j]) {
        (Some(a), Some(b)) => legs[leg].get(a, b),
        _ => SimScore::undefined(),
    };
    let m = pair_count(n);
    let mut scores = Vec::with_capacity(m);
    let mut defined = Vec::with_capacity(m);
    for i in 0..n {
        for j in i + 1..n {
            let parts: Vec<SimScore> = (0..legs.len()).map(|l| leg_score(l, i, j)).collect();
            let s = matsim::combined(&parts)?;
            scores.push(if s.defined { s.value } else { f64::NAN });
            defined.push(s.defined);
        }
    }
    let diagonal: Vec<bool> = (0..n).map(|i| (0..legs.len()).any(|l| leg_score(l, i, i).defined)).collect();
    let mut excluded: Vec<String> = legs.iter().flat_map(|l| l.excluded.iter().cloned()).collect();
    excluded.sort();
    excluded.dedup();
    excluded.retain(|e| ids.binary_search(e).is_err());
    Ok(SimilarityMatrix {
        patient_ids: ids,
        scores,
        defined: Bitmap::from_bools(&defined),
        diagonal: Bitmap::from_bools(&diagonal),
        config: *config,
        wall_time_seconds: legs.iter().map(|l| l.wall_time_seconds).sum(),
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub mmethod: MatSimMethod,
    pub dim: usize,
    pub wall_time_seconds: f64,
    pub patients: usize,
    pub pairs: usize,
}

/// One row per run; repeated (method, dim) runs keep their mean time.
pub fn timing_report(runs: &[&SimilarityMatrix]) -> Vec<TimingRow> {
    let mut acc: BTreeMap<(usize, MatSimMethod), (f64, usize, usize)> = BTreeMap::new();
    for r in runs {
        let e = acc.entry((r.config.vmethod.dim, r.config.mmethod)).or_insert((0.0, 0, r.len()));
        e.0 += r.wall_time_seconds;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|((dim, mmethod), (t, k, patients))| TimingRow {
            mmethod,
            dim,
            wall_time_seconds: t / k as f64,
            patients,
            pairs: pair_count(patients),
        })
        .collect()
}

/// Rows by dimension, columns rv2 / mms / eds, seconds.
pub fn render_timing_table(rows: &[TimingRow]) -> String {
    let mut dims: Vec<usize> = rows.iter().map(|r| r.dim).collect();
    dims.sort_unstable();
    dims.dedup();
    let mut out = String::from("| dimension | rv2 | mms | eds |\n|---:|---:|---:|---:|\n");
    for d in dims {
        out.push_str(&format!("| {d} |"));
        for m in MatSimMethod::ALL {
            match rows.iter().find(|r| r.dim == d && r.mmethod == m) {
                Some(r) => out.push_str(&format!(" {:.3}s |", r.wall_time_seconds)),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}
