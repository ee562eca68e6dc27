//! The `patsim` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Deserialize;

use crate::corpus::{self, SynthSpec};
use crate::engine::{self, RunConfig, SimilarityMatrix, VMethod, VectorFamily};
use crate::error::{Error, Result};
use crate::eval::{self, GridOptions, ValidationSet, ValidationSpec};
use crate::matsim::MatSimMethod;
use crate::segmenter::{self, RelevancyMap, SegmentOptions, SimilarityCategory};
use crate::vectorizer::{self, MatrixSet, NoteFilter, VectorMethod, VectorSource, VectorizerConfig};

#[derive(Parser, Debug)]
#[command(name = "patsim", version, about = "Patient similarity from clinical notes")]
pub struct Cli {
    /// TOML pipeline configuration; command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus with planted clusters.
    Synth(SynthArgs),
    /// Split notes into titled segments.
    Segment(SegmentArgs),
    /// Build patient matrices.
    Vectorize(VectorizeArgs),
    /// Compute the all-pairs similarity matrix.
    Pairs(PairsArgs),
    /// Score a similarity matrix against annotations.
    Evaluate(EvaluateArgs),
    /// Run every (filter, vmethod, mmethod) configuration.
    Gridsearch(GridArgs),
    /// Timing table and CSV export of similarity files.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    pub patients: usize,
    #[arg(long, default_value_t = 5)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub min_notes: usize,
    #[arg(long, default_value_t = 14)]
    pub max_notes: usize,
    #[arg(long, default_value_t = 3000)]
    pub vocab: usize,
    /// Corpus JSONL to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Planted cluster assignment CSV.
    #[arg(long)]
    pub assignment: Option<PathBuf>,
    /// Synthetic annotation CSV derived from the planted clusters.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub pivots: usize,
    #[arg(long, default_value_t = 5)]
    pub relevants: usize,
    #[arg(long, default_value_t = 3)]
    pub annotators: usize,
    /// Standard deviation of annotator noise on the 0..10 scale.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    /// Corpus file or directory [default: from --config]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Carry the title of a title-only paragraph to the next untitled one
    /// [default: off]
    #[arg(long)]
    pub inherit_titles: bool,
}

#[derive(Args, Debug, Clone)]
pub struct RelevancyArgs {
    /// Relevancy map JSON; skips prototype expansion [default: from --config]
    #[arg(long)]
    pub relevancy: Option<PathBuf>,
    /// Prototype titles JSON [default: built-in prototypes]
    #[arg(long)]
    pub prototypes: Option<PathBuf>,
    /// Cosine threshold for prototype expansion.
    #[arg(long, default_value_t = segmenter::DEFAULT_EXPANSION_THRESHOLD)]
    pub threshold: f64,
    /// Dimension of the title space.
    #[arg(long, default_value_t = 10)]
    pub title_dim: usize,
}

#[derive(Args, Debug)]
pub struct VectorizeArgs {
    /// Corpus file or directory [default: from --config]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Category name or id, `all` (one file per category, --out is a
    /// directory), or `unfiltered`.
    #[arg(long, default_value = "unfiltered")]
    pub category: String,
    #[arg(long, value_parser = ["lsa", "import"], default_value = "lsa")]
    pub method: String,
    #[arg(long, default_value_t = 50)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Imported embeddings JSONL (method import).
    #[arg(long = "import")]
    pub import_path: Option<PathBuf>,
    /// Family label recorded for imported vectors.
    #[arg(long, value_parser = ["d2v", "rbc"], default_value = "d2v")]
    pub family: String,
    #[arg(long, default_value_t = 1)]
    pub min_doc_freq: usize,
    /// Use raw term counts instead of 1 + ln(count) [default: off]
    #[arg(long)]
    pub raw_tf: bool,
    /// Also write the fitted LSA model (single category only).
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    #[command(flatten)]
    pub relevancy: RelevancyArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PairsArgs {
    /// Patient matrices JSONL written by `vectorize`.
    #[arg(long)]
    pub matrices: PathBuf,
    #[arg(long, value_parser = parse_mmethod)]
    pub mmethod: MatSimMethod,
    /// Worker threads.
    #[arg(long, env = "PATSIM_WORKERS", default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also export `id_a,id_b,score,defined` CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub sim: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Category name or id, or `all`.
    #[arg(long, default_value = "all")]
    pub category: String,
    /// Per-pivot CSV to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    /// Corpus file or directory [default: from --config]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Directory of imported embeddings (`d2v050.jsonl`, ...); legs without
    /// a file are skipped [default: from --config]
    #[arg(long)]
    pub imports: Option<PathBuf>,
    #[arg(long, env = "PATSIM_WORKERS", default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub relevancy: RelevancyArgs,
    /// Report directory [default: from --config]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Similarity files.
    #[arg(long, required = true, num_args = 1..)]
    pub sim: Vec<PathBuf>,
    /// Directory for one pairs CSV per similarity file.
    #[arg(long)]
    pub export_csv: Option<PathBuf>,
}

fn parse_mmethod(s: &str) -> std::result::Result<MatSimMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Values shared by subcommands, read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: Option<PathBuf>,
    pub relevancy: Option<PathBuf>,
    pub prototypes: Option<PathBuf>,
    pub imports: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub dim: Option<usize>,
    pub title_dim: Option<usize>,
    pub threshold: Option<f64>,
    pub workers: Option<usize>,
    pub categories: Option<Vec<String>>,
}

impl PipelineConfig {
    /// Parses and validates: unknown keys are rejected and every referenced
    /// path must exist. Relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for v in [&mut cfg.corpus, &mut cfg.relevancy, &mut cfg.prototypes, &mut cfg.imports].into_iter().flatten() {
            if v.is_relative() {
                *v = base.join(&*v);
            }
            if !v.exists() {
                return Err(Error::Config(format!("path does not exist: {}", v.display())));
            }
        }
        if let Some(v) = &mut cfg.out_dir {
            if v.is_relative() {
                *v = base.join(&*v);
            }
        }
        for c in cfg.categories.iter().flatten() {
            c.parse::<SimilarityCategory>().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(cfg)
    }
}

enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// A flag's value unless it was left at its default, in which case the
/// config file value wins when present.
fn pick<T: Clone>(m: &ArgMatches, id: &str, flag: T, file: Option<T>) -> T {
    match (m.value_source(id), file) {
        (Some(ValueSource::CommandLine), _) | (_, None) => flag,
        (_, Some(f)) => f,
    }
}

fn require_path(flag: Option<PathBuf>, file: Option<PathBuf>, name: &str) -> std::result::Result<PathBuf, Failure> {
    flag.or(file)
        .ok_or_else(|| Failure::Usage(format!("--{name} is required (directly or via --config)")))
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 on domain errors, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m.clone()).expect("subcommand required");
    let outcome = cli
        .config
        .as_deref()
        .map(PipelineConfig::load)
        .transpose()
        .map_err(Failure::Domain)
        .and_then(|cfg| dispatch(cli.command, &sub, &cfg.unwrap_or_default()));
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command, m: &ArgMatches, cfg: &PipelineConfig) -> CmdResult {
    match command {
        Command::Synth(a) => synth(a, m, cfg),
        Command::Segment(a) => segment(a, cfg),
        Command::Vectorize(a) => vectorize(a, m, cfg),
        Command::Pairs(a) => pairs(a, m, cfg),
        Command::Evaluate(a) => evaluate(a),
        Command::Gridsearch(a) => gridsearch(a, m, cfg),
        Command::Report(a) => report(a),
    }
}

fn synth(a: SynthArgs, m: &ArgMatches, cfg: &PipelineConfig) -> CmdResult {
    let seed = pick(m, "seed", a.seed, cfg.seed);
    let mut spec = SynthSpec::new(a.patients, a.clusters, seed);
    spec.notes_per_patient = (a.min_notes, a.max_notes);
    spec.vocab_size = a.vocab;
    let (corpus, assignment) = corpus::generate_synthetic(&spec)?;
    corpus::write_corpus(&corpus, &a.out)?;
    if let Some(p) = &a.assignment {
        corpus::write_assignment(&assignment, p)?;
    }
    if let Some(p) = &a.annotations {
        let vspec = ValidationSpec {
            n_pivots: a.pivots,
            n_relevants: a.relevants,
            n_same_cluster: a.relevants.min(2),
            n_annotators: a.annotators,
            noise: a.noise,
            seed,
        };
        eval::synthetic_validation(&assignment, &vspec)?.save(p)?;
    }
    let s = corpus.summary();
    eprintln!("wrote {} patients, {} notes to {}", s.patients, s.notes, a.out.display());
    Ok(())
}

fn segment(a: SegmentArgs, cfg: &PipelineConfig) -> CmdResult {
    let path = require_path(a.corpus, cfg.corpus.clone(), "corpus")?;
    let corpus = corpus::load_corpus(&path)?;
    let segs = segmenter::segment_corpus(&corpus, SegmentOptions { inherit_titles: a.inherit_titles });
    segmenter::write_segments(&segs, &a.out)?;
    eprintln!("wrote {} segments to {}", segs.len(), a.out.display());
    Ok(())
}

fn relevancy_map(
    r: &RelevancyArgs,
    m: &ArgMatches,
    cfg: &PipelineConfig,
    corpus: &corpus::Corpus,
    seed: u64,
) -> Result<RelevancyMap> {
    if let Some(p) = r.relevancy.as_ref().or(cfg.relevancy.as_ref()) {
        return RelevancyMap::load(p);
    }
    let opts = grid_options_base(r, m, cfg, seed)?;
    let (map, dropped) = eval::derive_relevancy(corpus, &opts)?;
    if !dropped.is_empty() {
        eprintln!("note: prototype titles not in corpus: {}", dropped.join(", "));
    }
    Ok(map)
}

fn grid_options_base(r: &RelevancyArgs, m: &ArgMatches, cfg: &PipelineConfig, seed: u64) -> Result<GridOptions> {
    let prototypes = match r.prototypes.as_ref().or(cfg.prototypes.as_ref()) {
        Some(p) => RelevancyMap::load(p)?,
        None => segmenter::default_prototypes(),
    };
    Ok(GridOptions {
        seed,
        prototypes,
        threshold: pick(m, "threshold", r.threshold, cfg.threshold),
        title_dim: pick(m, "title_dim", r.title_dim, cfg.title_dim),
        ..GridOptions::default()
    })
}

enum CategoryChoice {
    Unfiltered,
    One(SimilarityCategory),
    All,
}

fn parse_category_choice(s: &str) -> std::result::Result<CategoryChoice, Failure> {
    match s {
        "unfiltered" => Ok(CategoryChoice::Unfiltered),
        "all" => Ok(CategoryChoice::All),
        other => other
            .parse()
            .map(CategoryChoice::One)
            .map_err(|e: Error| Failure::Usage(e.to_string())),
    }
}

fn vectorize(a: VectorizeArgs, m: &ArgMatches, cfg: &PipelineConfig) -> CmdResult {
    let choice = parse_category_choice(&a.category)?;
    let path = require_path(a.corpus.clone(), cfg.corpus.clone(), "corpus")?;
    let corpus = corpus::load_corpus(&path)?;
    let seed = pick(m, "seed", a.seed, cfg.seed);
    let dim = pick(m, "dim", a.dim, cfg.dim);
    let method = if a.method == "import" { VectorMethod::Import } else { VectorMethod::Lsa };
    let vcfg = VectorizerConfig {
        method,
        dim,
        import_path: a.import_path.clone(),
        seed,
        min_doc_freq: a.min_doc_freq,
        sublinear_tf: !a.raw_tf,
    };
    let imported = match method {
        VectorMethod::Lsa => None,
        VectorMethod::Import => {
            let p = a
                .import_path
                .as_ref()
                .ok_or_else(|| Failure::Usage("--import is required with --method import".into()))?;
            Some(vectorizer::load_imported_for_dim(p, dim, seed)?)
        }
    };
    let family = match (method, a.family.as_str()) {
        (VectorMethod::Lsa, _) => VectorFamily::Lsa,
        (_, "rbc") => VectorFamily::Rbc,
        _ => VectorFamily::D2v,
    };
    let label = VMethod::new(family, dim).label();
    let source = || match &imported {
        Some(imp) => VectorSource::Imported(imp),
        None => VectorSource::Lsa(&vcfg),
    };
    let categories: Vec<SimilarityCategory> = match choice {
        CategoryChoice::Unfiltered => {
            let (set, model) = vectorizer::vectorize_corpus(&corpus, NoteFilter::None, source(), &label, SegmentOptions::default())?;
            return finish_single(set, model, &a);
        }
        CategoryChoice::One(c) => vec![c],
        CategoryChoice::All => SimilarityCategory::ALL.to_vec(),
    };
    let map = relevancy_map(&a.relevancy, m, cfg, &corpus, seed)?;
    if let [c] = categories[..] {
        let (set, model) =
            vectorizer::vectorize_corpus(&corpus, NoteFilter::Category(c, &map), source(), &label, SegmentOptions::default())?;
        return finish_single(set, model, &a);
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(a.out.display().to_string(), e))?;
    for c in categories {
        let out = a.out.join(format!("{}.jsonl", c.slug()));
        match vectorizer::vectorize_corpus(&corpus, NoteFilter::Category(c, &map), source(), &label, SegmentOptions::default()) {
            Ok((set, _)) => {
                set.save(&out)?;
                eprintln!("{}: {} patients, {} excluded", c.slug(), set.matrices.len(), set.excluded.len());
            }
            Err(e) => eprintln!("{}: skipped: {e}", c.slug()),
        }
    }
    Ok(())
}

fn finish_single(set: MatrixSet, model: Option<vectorizer::LsaModel>, a: &VectorizeArgs) -> CmdResult {
    set.save(&a.out)?;
    if let (Some(p), Some(model)) = (&a.model_out, model) {
        model.save(p)?;
    }
    eprintln!(
        "wrote {} patient matrices ({} excluded) to {}",
        set.matrices.len(),
        set.excluded.len(),
        a.out.display()
    );
    Ok(())
}

fn pairs(a: PairsArgs, m: &ArgMatches, cfg: &PipelineConfig) -> CmdResult {
    let set = MatrixSet::load(&a.matrices)?;
    let vmethod = set.label.parse().unwrap_or(VMethod::new(VectorFamily::Lsa, set.dim));
    let config = RunConfig {
        filter: set.category.is_some(),
        category: set.category.unwrap_or(SimilarityCategory::Age),
        vmethod,
        mmethod: a.mmethod,
        workers: pick(m, "workers", a.workers, cfg.workers).max(1),
        seed: pick(m, "seed", a.seed, cfg.seed),
    };
    let mut sim = engine::compute_all_pairs(&set.matrices, &config)?;
    sim.excluded = set.excluded.clone();
    sim.save(&a.out)?;
    let sidecar = sidecar_path(&a.out);
    let text: String = sim.excluded.iter().map(|id| format!("{id}\n")).collect();
    std::fs::write(&sidecar, text).map_err(|e| Error::io(sidecar.display().to_string(), e))?;
    if let Some(p) = &a.csv {
        sim.write_csv(p)?;
    }
    eprintln!(
        "{} patients, {} pairs, {:.3}s",
        sim.len(),
        engine::pair_count(sim.len()),
        sim.wall_time_seconds
    );
    Ok(())
}

/// `<out>.excluded.txt`: patients left out of the matrix, one per line.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".excluded.txt");
    PathBuf::from(s)
}

fn evaluate(a: EvaluateArgs) -> CmdResult {
    let categories = match a.category.as_str() {
        "all" => SimilarityCategory::ALL.to_vec(),
        other => vec![other.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?],
    };
    let sim = SimilarityMatrix::load(&a.sim)?;
    let validation = ValidationSet::load(&a.annotations)?;
    let evals: Vec<eval::CategoryEval> = categories
        .into_iter()
        .map(|c| eval::evaluate_config(&sim, &validation, c))
        .collect();
    let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
    println!("| category | mean tau | pivots | skipped | undefined | excluded relevants |");
    println!("|---|---:|---:|---:|---:|---:|");
    for e in &evals {
        let skipped = e.pivots.iter().filter(|p| p.skipped).count();
        let undefined = e.pivots.iter().filter(|p| !p.skipped && p.tau.is_none()).count();
        let excluded: usize = e.pivots.iter().map(|p| p.excluded).sum();
        println!(
            "| {:02} {} | {} | {} | {} | {} | {} |",
            e.category.id(),
            e.category.name(),
            fmt(e.mean),
            e.pivots.len(),
            skipped,
            undefined,
            excluded
        );
    }
    let defined: Vec<f64> = evals.iter().filter_map(|e| e.mean).collect();
    let overall = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    println!("\nmean: {}", fmt(overall));
    if let Some(p) = &a.out {
        let err = |e: csv::Error| Error::Format(e.to_string());
        let mut w = csv::Writer::from_path(p).map_err(err)?;
        w.write_record(["category", "pivot", "tau", "usable", "excluded", "skipped"]).map_err(err)?;
        for e in &evals {
            for pv in &e.pivots {
                w.write_record([
                    e.category.name().to_string(),
                    pv.pivot.clone(),
                    pv.tau.map(|t| t.to_string()).unwrap_or_default(),
                    pv.usable.to_string(),
                    pv.excluded.to_string(),
                    pv.skipped.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::io(p.display().to_string(), e))?;
    }
    Ok(())
}

fn gridsearch(a: GridArgs, m: &ArgMatches, cfg: &PipelineConfig) -> CmdResult {
    let corpus_path = require_path(a.corpus.clone(), cfg.corpus.clone(), "corpus")?;
    let out = require_path(a.out.clone(), cfg.out_dir.clone(), "out")?;
    let corpus = corpus::load_corpus(&corpus_path)?;
    let validation = ValidationSet::load(&a.annotations)?;
    let seed = pick(m, "seed", a.seed, cfg.seed);
    let mut opts = grid_options_base(&a.relevancy, m, cfg, seed)?;
    opts.workers = pick(m, "workers", a.workers, cfg.workers).max(1);
    opts.imports = a.imports.clone().or(cfg.imports.clone());
    opts.relevancy = a.relevancy.relevancy.as_ref().or(cfg.relevancy.as_ref()).map(RelevancyMap::load).transpose()?;
    let report = eval::grid_search(&corpus, &validation, &opts)?;
    eval::write_report(&report, &out)?;
    let done = report.cells.iter().filter(|c| !c.is_skipped()).count();
    println!("{}", eval::render_summary_table(&report));
    println!("{}", eval::render_detail_table(&report, 10));
    for n in &report.notes {
        eprintln!("note: {n}");
    }
    eprintln!("{} cells, {} evaluated, {} skipped; report in {}", report.cells.len(), done, report.cells.len() - done, out.display());
    Ok(())
}

fn report(a: ReportArgs) -> CmdResult {
    let sims: Vec<SimilarityMatrix> = a.sim.iter().map(SimilarityMatrix::load).collect::<Result<_>>()?;
    let refs: Vec<&SimilarityMatrix> = sims.iter().collect();
    print!("{}", engine::render_timing_table(&engine::timing_report(&refs)));
    if let Some(dir) = &a.export_csv {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut used: BTreeMap<String, usize> = BTreeMap::new();
        for (path, sim) in a.sim.iter().zip(&sims) {
            let stem = path.file_stem().map_or("sim".into(), |s| s.to_string_lossy().into_owned());
            let n = used.entry(stem.clone()).or_default();
            let name = if *n == 0 { format!("{stem}.csv") } else { format!("{stem}-{n}.csv") };
            *n += 1;
            sim.write_csv(dir.join(name))?;
        }
    }
    Ok(())
}
