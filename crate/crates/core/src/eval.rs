//! Kendall τ-b evaluation against annotations, inter-annotator agreement,
//! the configuration grid, and report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use rayon::prelude::*;

use crate::corpus::Corpus;
use crate::engine::{self, RunConfig, SimilarityMatrix, VMethod, VectorFamily};
use crate::error::{Error, Result};
use crate::matsim::MatSimMethod;
use crate::segmenter::{self, RelevancyMap, SegmentOptions, SimilarityCategory};
use crate::vectorizer::{self, ImportedEmbeddings, MatrixSet, NoteFilter, VectorSource, VectorizerConfig};

/// Score meaning "incomparable".
pub const INCOMPARABLE: i8 = -1;

/// Kendall τ-b of two equal-length sequences; `None` when either sequence is
/// entirely tied. Runs in O(n log n): ties are counted on sorted runs and
/// discordant pairs as merge-sort exchanges.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::TooShort(n));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::Degenerate("NaN in rank correlation input".into()));
    }
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let tied_pairs = |runs: &mut dyn Iterator<Item = usize>| -> u64 {
        runs.map(|t| (t as u64) * (t as u64 - 1) / 2).sum()
    };
    let run_lengths = |eq: &dyn Fn(usize) -> bool| {
        let mut runs = Vec::new();
        let mut len = 1;
        for i in 1..n {
            if eq(i) {
                len += 1;
            } else {
                runs.push(len);
                len = 1;
            }
        }
        runs.push(len);
        runs
    };
    let tx = tied_pairs(&mut run_lengths(&|i| pairs[i].0 == pairs[i - 1].0).into_iter());
    let txy = tied_pairs(&mut run_lengths(&|i| pairs[i] == pairs[i - 1]).into_iter());

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = ys.clone();
    let swaps = merge_count(&mut ys, &mut buf);
    let ty = tied_pairs(&mut run_lengths(&|i| ys[i] == ys[i - 1]).into_iter());

    let n0 = (n as u64) * (n as u64 - 1) / 2;
    // concordant − discordant over pairs tied in neither sequence
    let diff = n0 as i64 - tx as i64 - ty as i64 + txy as i64 - 2 * swaps as i64;
    let concordant = (n0 as i64 - tx as i64 - ty as i64 + txy as i64 - swaps as i64) as u64;
    Ok(tau_b_from_counts(n0, concordant, (concordant as i64 - diff) as u64, tx, ty))
}

/// `(C − D) / sqrt((n₀ − t_x)(n₀ − t_y))`, undefined when a radicand is zero.
pub fn tau_b_from_counts(n0: u64, concordant: u64, discordant: u64, tx: u64, ty: u64) -> Option<f64> {
    let (rx, ry) = (n0 - tx, n0 - ty);
    if rx == 0 || ry == 0 {
        return None;
    }
    Some((concordant as f64 - discordant as f64) / ((rx as f64) * (ry as f64)).sqrt())
}

/// Stable merge sort that returns the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    let k = k + mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnnotationRecord {
    pub annotator_id: String,
    pub pivot_id: String,
    pub relevant_id: String,
    pub category: SimilarityCategory,
    /// `-1` (incomparable) or `0..=10`.
    pub score: i8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationSet {
    pub pivots: Vec<String>,
    pub relevants: BTreeMap<String, Vec<String>>,
    pub annotations: Vec<AnnotationRecord>,
}

type AnnKey = (String, String, SimilarityCategory);

impl ValidationSet {
    /// Builds the set, deriving pivots and relevants in first-seen order and
    /// rejecting duplicate (annotator, pivot, relevant, category) records.
    pub fn from_records(annotations: Vec<AnnotationRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut pivots: Vec<String> = Vec::new();
        let mut relevants: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for a in &annotations {
            if !(a.score == INCOMPARABLE || (0..=10).contains(&a.score)) {
                return Err(Error::Format(format!("annotation score {} out of range", a.score)));
            }
            let key = (a.annotator_id.clone(), a.pivot_id.clone(), a.relevant_id.clone(), a.category);
            if !seen.insert(key) {
                return Err(Error::DuplicateKey(format!(
                    "{}/{}/{}/{}",
                    a.annotator_id, a.pivot_id, a.relevant_id, a.category
                )));
            }
            if !relevants.contains_key(&a.pivot_id) {
                pivots.push(a.pivot_id.clone());
            }
            let rel = relevants.entry(a.pivot_id.clone()).or_default();
            if !rel.contains(&a.relevant_id) {
                rel.push(a.relevant_id.clone());
            }
        }
        Ok(Self { pivots, relevants, annotations })
    }

    pub fn annotators(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.annotations.iter().map(|a| a.annotator_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    fn by_key(&self) -> BTreeMap<AnnKey, Vec<&AnnotationRecord>> {
        let mut m: BTreeMap<AnnKey, Vec<&AnnotationRecord>> = BTreeMap::new();
        for a in &self.annotations {
            m.entry((a.pivot_id.clone(), a.relevant_id.clone(), a.category)).or_default().push(a);
        }
        m
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let headers = r.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
        let expected = ["annotator_id", "pivot_id", "relevant_id", "category", "score"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected header {}", expected.join(",")),
            });
        }
        let mut out = Vec::new();
        for (idx, rec) in r.records().enumerate() {
            let line = idx + 2;
            let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line, message };
            let rec = rec.map_err(|e| parse_err(e.to_string()))?;
            let category: SimilarityCategory = rec[3].parse().map_err(|e: Error| parse_err(e.to_string()))?;
            let score: i8 = rec[4].parse().map_err(|_| parse_err(format!("bad score {:?}", &rec[4])))?;
            if !(score == INCOMPARABLE || (0..=10).contains(&score)) {
                return Err(parse_err(format!("score {score} outside -1..=10")));
            }
            out.push(AnnotationRecord {
                annotator_id: rec[0].to_string(),
                pivot_id: rec[1].to_string(),
                relevant_id: rec[2].to_string(),
                category,
                score,
            });
        }
        Self::from_records(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let err = |e: csv::Error| Error::Format(e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["annotator_id", "pivot_id", "relevant_id", "category", "score"]).map_err(err)?;
        for a in &self.annotations {
            w.write_record([
                a.annotator_id.as_str(),
                &a.pivot_id,
                &a.relevant_id,
                a.category.name(),
                &a.score.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Mean over annotators excluding `-1`; `None` if nothing usable was recorded.
pub fn mean_annotation(
    validation: &ValidationSet,
    pivot: &str,
    relevant: &str,
    category: SimilarityCategory,
) -> Option<f64> {
    let scores: Vec<f64> = validation
        .annotations
        .iter()
        .filter(|a| a.pivot_id == pivot && a.relevant_id == relevant && a.category == category)
        .filter(|a| a.score != INCOMPARABLE)
        .map(|a| f64::from(a.score))
        .collect();
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PivotEval {
    pub pivot: String,
    /// `None` when skipped (fewer than 2 usable relevants) or all-tied.
    pub tau: Option<f64>,
    pub usable: usize,
    /// Relevants left out because the model or the annotators gave no score.
    pub excluded: usize,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryEval {
    pub category: SimilarityCategory,
    pub pivots: Vec<PivotEval>,
    /// Mean of the defined per-pivot τ values.
    pub mean: Option<f64>,
}

fn mean_of(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.into_iter().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Per-pivot τ-b between mean annotations and model scores, and their mean.
pub fn evaluate_config(sim: &SimilarityMatrix, validation: &ValidationSet, category: SimilarityCategory) -> CategoryEval {
    let ann = validation.by_key();
    let mean_ann = |p: &str, r: &str| -> Option<f64> {
        let recs = ann.get(&(p.to_string(), r.to_string(), category))?;
        mean_of(recs.iter().filter(|a| a.score != INCOMPARABLE).map(|a| f64::from(a.score)))
    };
    let mut pivots = Vec::new();
    for pivot in &validation.pivots {
        let rels = validation.relevants.get(pivot).map(Vec::as_slice).unwrap_or(&[]);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for r in rels {
            let model = sim.get_by_id(pivot, r).and_then(|s| s.get());
            if let (Some(a), Some(m)) = (mean_ann(pivot, r), model) {
                xs.push(a);
                ys.push(m);
            }
        }
        let usable = xs.len();
        let skipped = usable < 2;
        let tau = if skipped { None } else { kendall_tau_b(&xs, &ys).expect("equal lengths, n >= 2") };
        pivots.push(PivotEval {
            pivot: pivot.clone(),
            tau,
            usable,
            excluded: rels.len() - usable,
            skipped,
        });
    }
    let mean = mean_of(pivots.iter().filter_map(|p| p.tau));
    CategoryEval { category, pivots, mean }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementSummary {
    pub category: SimilarityCategory,
    /// τ-b for every (annotator pair, pivot) with a defined value.
    pub values: Vec<f64>,
    pub min: Option<f64>,
    pub median: Option<f64>,
    pub max: Option<f64>,
}

fn median(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2]),
        _ => Some((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0),
    }
}

/// Pairwise annotator τ-b per category and pivot over commonly scored relevants.
pub fn inter_annotator_agreement(validation: &ValidationSet) -> Vec<AgreementSummary> {
    let annotators = validation.annotators();
    let mut score: BTreeMap<(&str, &str, &str, SimilarityCategory), f64> = BTreeMap::new();
    for a in &validation.annotations {
        if a.score != INCOMPARABLE {
            score.insert((&a.annotator_id, &a.pivot_id, &a.relevant_id, a.category), f64::from(a.score));
        }
    }
    SimilarityCategory::ALL
        .into_iter()
        .map(|category| {
            let mut values = Vec::new();
            for (ia, a) in annotators.iter().enumerate() {
                for b in &annotators[ia + 1..] {
                    for pivot in &validation.pivots {
                        let mut xs = Vec::new();
                        let mut ys = Vec::new();
                        for r in validation.relevants.get(pivot).into_iter().flatten() {
                            let sa = score.get(&(a.as_str(), pivot.as_str(), r.as_str(), category));
                            let sb = score.get(&(b.as_str(), pivot.as_str(), r.as_str(), category));
                            if let (Some(&x), Some(&y)) = (sa, sb) {
                                xs.push(x);
                                ys.push(y);
                            }
                        }
                        if xs.len() >= 2 {
                            if let Ok(Some(t)) = kendall_tau_b(&xs, &ys) {
                                values.push(t);
                            }
                        }
                    }
                }
            }
            values.sort_by(f64::total_cmp);
            AgreementSummary {
                category,
                min: values.first().copied(),
                median: median(&values),
                max: values.last().copied(),
                values,
            }
        })
        .collect()
}

/// Parameters for [`synthetic_validation`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSpec {
    pub n_pivots: usize,
    pub n_relevants: usize,
    /// Of the relevants, how many come from the pivot's own cluster.
    pub n_same_cluster: usize,
    pub n_annotators: usize,
    /// Standard deviation of per-annotator noise on the 0..10 scale.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ValidationSpec {
    fn default() -> Self {
        Self {
            n_pivots: 10,
            n_relevants: 5,
            n_same_cluster: 2,
            n_annotators: 3,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// Annotations derived from planted clusters: same-cluster relevants score
/// around 8, others around 2, plus Gaussian annotator noise, rounded and
/// clamped to 0..=10.
pub fn synthetic_validation(assignment: &BTreeMap<String, usize>, spec: &ValidationSpec) -> Result<ValidationSet> {
    if spec.n_relevants < 2 || spec.n_same_cluster > spec.n_relevants || spec.n_annotators == 0 {
        return Err(Error::InvalidSpec("need >= 2 relevants and >= 1 annotator".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut by_cluster: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
    for (id, &c) in assignment {
        by_cluster.entry(c).or_default().push(id);
    }
    let mut ids: Vec<&String> = assignment.keys().collect();
    ids.shuffle(&mut rng);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut records = Vec::new();
    let mut pivots_done = 0;
    for pivot in ids.iter().copied() {
        if pivots_done == spec.n_pivots {
            break;
        }
        let c = assignment[pivot];
        let same: Vec<&String> = by_cluster[&c].iter().copied().filter(|p| *p != pivot).collect();
        let other: Vec<&String> = assignment.iter().filter(|(_, &k)| k != c).map(|(id, _)| id).collect();
        let n_other = spec.n_relevants - spec.n_same_cluster;
        if same.len() < spec.n_same_cluster || other.len() < n_other {
            continue;
        }
        let mut rel: Vec<(&String, bool)> = same
            .choose_multiple(&mut rng, spec.n_same_cluster)
            .map(|r| (*r, true))
            .chain(other.choose_multiple(&mut rng, n_other).map(|r| (*r, false)))
            .collect();
        rel.shuffle(&mut rng);
        for a in 0..spec.n_annotators {
            for category in SimilarityCategory::ALL {
                for &(r, same_cluster) in &rel {
                    let base = if same_cluster { 8.0 } else { 2.0 };
                    let v = (base + noise.sample(&mut rng)).round().clamp(0.0, 10.0);
                    records.push(AnnotationRecord {
                        annotator_id: format!("A{}", a + 1),
                        pivot_id: pivot.clone(),
                        relevant_id: r.clone(),
                        category,
                        score: v as i8,
                    });
                }
            }
        }
        pivots_done += 1;
    }
    ValidationSet::from_records(records)
}

/// Mean fraction of each patient's `k` nearest neighbours (by defined score)
/// that share its planted cluster.
pub fn precision_at_k(sim: &SimilarityMatrix, assignment: &BTreeMap<String, usize>, k: usize) -> f64 {
    let n = sim.len();
    let mut total = 0.0;
    let mut counted = 0usize;
    for i in 0..n {
        let Some(&ci) = assignment.get(&sim.patient_ids[i]) else { continue };
        let mut neigh: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .filter_map(|j| sim.get(i, j).get().map(|s| (s, j)))
            .collect();
        if neigh.len() < k {
            continue;
        }
        neigh.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let hits = neigh[..k]
            .iter()
            .filter(|(_, j)| assignment.get(&sim.patient_ids[*j]) == Some(&ci))
            .count();
        total += hits as f64 / k as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", content = "reason", rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    /// Some `combined` legs were unavailable.
    Partial(String),
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub filter: bool,
    pub vmethod: VMethod,
    pub mmethod: MatSimMethod,
    pub status: CellStatus,
    /// Indexed by category id − 1.
    pub category_means: Vec<Option<f64>>,
    /// Mean of the defined category means.
    pub mean: Option<f64>,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

impl GridCell {
    pub fn is_skipped(&self) -> bool {
        matches!(self.status, CellStatus::Skipped(_))
    }

    /// Mean as printed: the mean of the two-decimal category values, shown
    /// with three decimals so it agrees with the printed components.
    pub fn display_mean(&self) -> Option<f64> {
        mean_of(self.category_means.iter().flatten().map(|&v| round2(v))).map(|m| (m * 1000.0).round() / 1000.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub cells: Vec<GridCell>,
    pub agreement: Vec<AgreementSummary>,
    /// Free-form notes about skipped legs or dropped prototypes.
    pub notes: Vec<String>,
}

/// Inputs for [`grid_search`].
#[derive(Debug, Clone)]
pub struct GridOptions {
    pub workers: usize,
    pub seed: u64,
    /// Directory holding `d2v050.jsonl`, `rbc200.jsonl`, ... (or `d2v.jsonl` /
    /// `rbc.jsonl` at a larger native dimension, compressed on load).
    pub imports: Option<std::path::PathBuf>,
    pub relevancy: Option<RelevancyMap>,
    pub prototypes: RelevancyMap,
    pub title_dim: usize,
    pub threshold: f64,
    pub segment: SegmentOptions,
    pub vectorizer: VectorizerConfig,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            seed: 0,
            imports: None,
            relevancy: None,
            prototypes: segmenter::default_prototypes(),
            title_dim: 10,
            threshold: segmenter::DEFAULT_EXPANSION_THRESHOLD,
            segment: SegmentOptions::default(),
            vectorizer: VectorizerConfig::default(),
        }
    }
}

/// Builds a relevancy map from the corpus: title space, then prototype
/// expansion. Prototype titles absent from the corpus are dropped and listed.
pub fn derive_relevancy(corpus: &Corpus, opts: &GridOptions) -> Result<(RelevancyMap, Vec<String>)> {
    let docs = segmenter::title_documents(corpus, opts.segment);
    let dim = opts.title_dim.min(docs.len()).max(1);
    let space = segmenter::build_title_space_from_docs(&docs, dim, opts.seed)?;
    let mut dropped = Vec::new();
    let mut known = RelevancyMap::default();
    for (c, titles) in &opts.prototypes.entries {
        let mut keep = BTreeSet::new();
        for t in titles {
            if space.embeddings.contains_key(t) {
                keep.insert(t.clone());
            } else {
                dropped.push(t.clone());
            }
        }
        known.entries.insert(*c, keep);
    }
    Ok((segmenter::expand_prototypes(&known, &space, opts.threshold)?, dropped))
}

enum Leg {
    Lsa(VectorizerConfig),
    Imported(ImportedEmbeddings),
}

fn load_legs(opts: &GridOptions, notes: &mut Vec<String>) -> Result<BTreeMap<VMethod, Leg>> {
    let mut legs = BTreeMap::new();
    for vm in VMethod::GRID {
        match vm.family {
            VectorFamily::Combined => {}
            VectorFamily::Lsa => {
                let cfg = VectorizerConfig { dim: vm.dim, seed: opts.seed, ..opts.vectorizer.clone() };
                legs.insert(vm, Leg::Lsa(cfg));
            }
            VectorFamily::D2v | VectorFamily::Rbc => {
                let Some(dir) = &opts.imports else {
                    notes.push(format!("{}: no imports directory", vm.label()));
                    continue;
                };
                let exact = dir.join(format!("{}.jsonl", vm.label()));
                let native = dir.join(format!("{}.jsonl", vm.family.as_str()));
                let path = if exact.exists() {
                    exact
                } else if native.exists() {
                    native
                } else {
                    notes.push(format!("{}: no import file in {}", vm.label(), dir.display()));
                    continue;
                };
                legs.insert(vm, Leg::Imported(vectorizer::load_imported_for_dim(&path, vm.dim, opts.seed)?));
            }
        }
    }
    Ok(legs)
}

type CategoryMeans = Vec<(SimilarityCategory, Option<f64>)>;

#[derive(Default)]
struct UnitOutcome {
    means: BTreeMap<(VMethod, MatSimMethod), CategoryMeans>,
    failures: Vec<(VMethod, String)>,
    notes: Vec<String>,
}

fn run_unit(
    corpus: &Corpus,
    validation: &ValidationSet,
    opts: &GridOptions,
    relevancy: &RelevancyMap,
    legs: &BTreeMap<VMethod, Leg>,
    filter: bool,
    unit: Option<SimilarityCategory>,
) -> Result<UnitOutcome> {
    let mut out = UnitOutcome::default();
    let note_filter = match unit {
        None => NoteFilter::None,
        Some(c) => NoteFilter::Category(c, relevancy),
    };
    let mut sims: BTreeMap<(VMethod, MatSimMethod), SimilarityMatrix> = BTreeMap::new();
    for (&vm, leg) in legs {
        let source = match leg {
            Leg::Lsa(cfg) => VectorSource::Lsa(cfg),
            Leg::Imported(imp) => VectorSource::Imported(imp),
        };
        let set = match vectorizer::vectorize_corpus(corpus, note_filter, source, &vm.label(), opts.segment) {
            Ok((set, _)) => set,
            Err(e) => {
                let what = unit.map_or("unfiltered".to_string(), |c| c.name().to_string());
                out.notes.push(format!("{} {what}: {e}", vm.label()));
                out.failures.push((vm, e.to_string()));
                continue;
            }
        };
        for mm in MatSimMethod::ALL {
            if let Some(sim) = run_pairs(&set, filter, unit, vm, mm, opts)? {
                sims.insert((vm, mm), sim);
            }
        }
    }
    for mm in MatSimMethod::ALL {
        let legs_here: Vec<&SimilarityMatrix> = VMethod::COMBINED_LEGS
            .iter()
            .filter_map(|vm| sims.get(&(*vm, mm)))
            .collect();
        if !legs_here.is_empty() {
            let mut cfg = run_config(filter, unit, VMethod::COMBINED, mm, opts);
            cfg.workers = opts.workers;
            sims.insert((VMethod::COMBINED, mm), engine::combine_matrices(&legs_here, &cfg)?);
        }
    }
    let categories: Vec<SimilarityCategory> = match unit {
        None => SimilarityCategory::ALL.to_vec(),
        Some(c) => vec![c],
    };
    for ((vm, mm), sim) in &sims {
        let means = categories
            .iter()
            .map(|&c| (c, evaluate_config(sim, validation, c).mean))
            .collect();
        out.means.insert((*vm, *mm), means);
    }
    Ok(out)
}

/// Runs every (filter, vmethod, mmethod) configuration end to end.
///
/// Unfiltered runs produce one similarity matrix evaluated in all ten
/// categories; filtered runs produce one matrix per category, each evaluated
/// in its own category.
pub fn grid_search(corpus: &Corpus, validation: &ValidationSet, opts: &GridOptions) -> Result<EvalReport> {
    let mut notes = Vec::new();
    let relevancy = match &opts.relevancy {
        Some(r) => r.clone(),
        None => {
            let (r, dropped) = derive_relevancy(corpus, opts)?;
            if !dropped.is_empty() {
                notes.push(format!("prototype titles not in corpus: {}", dropped.join(", ")));
            }
            r
        }
    };
    let legs = load_legs(opts, &mut notes)?;

    // Each (filter, category) unit is an independent job; results merge in unit order.
    let units: Vec<(bool, Option<SimilarityCategory>)> = std::iter::once((false, None))
        .chain(SimilarityCategory::ALL.into_iter().map(|c| (true, Some(c))))
        .collect();
    let outcomes = units
        .par_iter()
        .map(|&(filter, unit)| run_unit(corpus, validation, opts, &relevancy, &legs, filter, unit))
        .collect::<Vec<_>>();

    // (filter, vmethod, mmethod) -> per-category τ means
    let mut results: BTreeMap<(bool, VMethod, MatSimMethod), Vec<Option<f64>>> = BTreeMap::new();
    let mut failures: BTreeMap<(bool, VMethod), String> = BTreeMap::new();
    for (&(filter, _), outcome) in units.iter().zip(outcomes) {
        let outcome = outcome?;
        notes.extend(outcome.notes);
        for (vm, e) in outcome.failures {
            failures.entry((filter, vm)).or_insert(e);
        }
        for ((vm, mm), means) in outcome.means {
            let entry = results
                .entry((filter, vm, mm))
                .or_insert_with(|| vec![None; SimilarityCategory::ALL.len()]);
            for (c, mean) in means {
                entry[usize::from(c.id()) - 1] = mean;
            }
        }
    }

    let available_combined = VMethod::COMBINED_LEGS.iter().filter(|vm| legs.contains_key(vm)).count();
    let mut cells = Vec::new();
    for filter in [false, true] {
        for vm in VMethod::GRID {
            for mm in MatSimMethod::ALL {
                let status = if vm == VMethod::COMBINED {
                    if available_combined == 0 {
                        CellStatus::Skipped("no dim-50 legs".into())
                    } else if available_combined < VMethod::COMBINED_LEGS.len() {
                        CellStatus::Partial(format!(
                            "{available_combined} of {} legs",
                            VMethod::COMBINED_LEGS.len()
                        ))
                    } else {
                        CellStatus::Ok
                    }
                } else if !legs.contains_key(&vm) {
                    CellStatus::Skipped("import file missing".into())
                } else if !results.contains_key(&(filter, vm, mm)) {
                    CellStatus::Skipped(
                        failures.get(&(filter, vm)).cloned().unwrap_or_else(|| "no similarity matrix".into()),
                    )
                } else {
                    CellStatus::Ok
                };
                let category_means = match status {
                    CellStatus::Skipped(_) => vec![None; SimilarityCategory::ALL.len()],
                    _ => results
                        .get(&(filter, vm, mm))
                        .cloned()
                        .unwrap_or_else(|| vec![None; SimilarityCategory::ALL.len()]),
                };
                let mean = mean_of(category_means.iter().flatten().copied());
                cells.push(GridCell { filter, vmethod: vm, mmethod: mm, status, category_means, mean });
            }
        }
    }
    Ok(EvalReport { cells, agreement: inter_annotator_agreement(validation), notes })
}

fn run_config(
    filter: bool,
    unit: Option<SimilarityCategory>,
    vm: VMethod,
    mm: MatSimMethod,
    opts: &GridOptions,
) -> RunConfig {
    RunConfig {
        filter,
        category: unit.unwrap_or(SimilarityCategory::Age),
        vmethod: vm,
        mmethod: mm,
        workers: opts.workers,
        seed: opts.seed,
    }
}

fn run_pairs(
    set: &MatrixSet,
    filter: bool,
    unit: Option<SimilarityCategory>,
    vm: VMethod,
    mm: MatSimMethod,
    opts: &GridOptions,
) -> Result<Option<SimilarityMatrix>> {
    if set.matrices.len() < 2 {
        return Ok(None);
    }
    let mut sim = engine::compute_all_pairs(&set.matrices, &run_config(filter, unit, vm, mm, opts))?;
    sim.excluded = set.excluded.clone();
    Ok(Some(sim))
}

fn fmt2(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{:.2}", round2(x)))
}

fn fmt3(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.3}"))
}

fn filter_mark(filter: bool) -> &'static str {
    if filter {
        "✓"
    } else {
        "✗"
    }
}

/// Summary table: rows are matrix methods, columns vmethod × filter.
pub fn render_summary_table(report: &EvalReport) -> String {
    let mut out = String::from("| mmethod |");
    for filter in [false, true] {
        for vm in VMethod::GRID {
            out.push_str(&format!(" {} {} |", vm.label(), filter_mark(filter)));
        }
    }
    out.push_str("\n|---|");
    out.push_str(&"---:|".repeat(2 * VMethod::GRID.len()));
    out.push('\n');
    for mm in MatSimMethod::ALL {
        out.push_str(&format!("| {mm} |"));
        for filter in [false, true] {
            for vm in VMethod::GRID {
                let cell = report
                    .cells
                    .iter()
                    .find(|c| c.filter == filter && c.vmethod == vm && c.mmethod == mm)
                    .expect("every grid cell present");
                let text = match &cell.status {
                    CellStatus::Skipped(_) => "skipped".to_string(),
                    CellStatus::Partial(_) => format!("{}*", fmt3(cell.display_mean())),
                    CellStatus::Ok => fmt3(cell.display_mean()),
                };
                out.push_str(&format!(" {text} |"));
            }
        }
        out.push('\n');
    }
    if report.cells.iter().any(|c| matches!(c.status, CellStatus::Partial(_))) {
        out.push_str("\n\\* combined averaged over the available dim-50 legs only\n");
    }
    out
}

/// Non-skipped cells ordered by mean, best first.
pub fn ranked_cells(report: &EvalReport) -> Vec<&GridCell> {
    let mut cells: Vec<&GridCell> = report.cells.iter().filter(|c| !c.is_skipped() && c.mean.is_some()).collect();
    cells.sort_by(|a, b| b.mean.unwrap_or(f64::NEG_INFINITY).total_cmp(&a.mean.unwrap_or(f64::NEG_INFINITY)));
    cells
}

/// Per-category detail of the best `top` configurations.
pub fn render_detail_table(report: &EvalReport, top: usize) -> String {
    let mut out = String::from("| mmethod | vmethod | filter |");
    for c in SimilarityCategory::ALL {
        out.push_str(&format!(" {:02} |", c.id()));
    }
    out.push_str(" mean |\n|---|---|---|");
    out.push_str(&"---:|".repeat(SimilarityCategory::ALL.len() + 1));
    out.push('\n');
    for cell in ranked_cells(report).into_iter().take(top) {
        out.push_str(&format!("| {} | {} | {} |", cell.mmethod, cell.vmethod.label(), filter_mark(cell.filter)));
        for v in &cell.category_means {
            out.push_str(&format!(" {} |", fmt2(*v)));
        }
        out.push_str(&format!(" {} |\n", fmt3(cell.display_mean())));
    }
    out
}

pub fn render_agreement_table(report: &EvalReport) -> String {
    let mut out = String::from("| category | pairs | min | median | max |\n|---|---:|---:|---:|---:|\n");
    for a in &report.agreement {
        out.push_str(&format!(
            "| {:02} {} | {} | {} | {} | {} |\n",
            a.category.id(),
            a.category.name(),
            a.values.len(),
            fmt2(a.min),
            fmt2(a.median),
            fmt2(a.max)
        ));
    }
    out
}

/// Writes `summary.md`, `detail.md`, `agreement.md`, `cells.csv`, and `agreement.csv`.
pub fn write_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(p.display().to_string(), e))
    };
    write("summary.md", render_summary_table(report))?;
    write("detail.md", render_detail_table(report, 10))?;
    write("agreement.md", render_agreement_table(report))?;

    let err = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::Writer::from_path(dir.join("cells.csv")).map_err(err)?;
    let mut header = vec!["mmethod".to_string(), "vmethod".into(), "filter".into(), "status".into()];
    header.extend(SimilarityCategory::ALL.iter().map(|c| format!("{:02}", c.id())));
    header.push("mean".into());
    w.write_record(&header).map_err(err)?;
    for c in &report.cells {
        let status = match &c.status {
            CellStatus::Ok => "ok",
            CellStatus::Partial(_) => "partial",
            CellStatus::Skipped(_) => "skipped",
        };
        let mut rec = vec![c.mmethod.to_string(), c.vmethod.label(), c.filter.to_string(), status.to_string()];
        rec.extend(c.category_means.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
        rec.push(c.mean.map(|x| x.to_string()).unwrap_or_default());
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("cells.csv", e))?;

    let mut w = csv::Writer::from_path(dir.join("agreement.csv")).map_err(err)?;
    w.write_record(["category", "pairs", "min", "median", "max"]).map_err(err)?;
    for a in &report.agreement {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([a.category.name().to_string(), a.values.len().to_string(), f(a.min), f(a.median), f(a.max)])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("agreement.csv", e))
}
