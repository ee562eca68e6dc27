//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Oracles here are written independently of the library code.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use patsim::corpus::{self, SynthSpec};
use patsim::engine::{self, RunConfig, SimilarityMatrix, VMethod};
use patsim::eval::{self, GridOptions, ValidationSpec};
use patsim::matsim::{self, CrossSimMatrix, MatSimMethod};
use patsim::segmenter::{SegmentOptions, SimilarityCategory};
use patsim::vectorizer::{self, NoteFilter, PatientMatrix, VectorSource, VectorizerConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
            if norm > 1e-3 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

fn patient(rng: &mut ChaCha8Rng, id: &str, n: usize, d: usize) -> PatientMatrix {
    PatientMatrix::from_unindexed(id, unit_rows(rng, n, d)).unwrap()
}

// ---- 1: eds against exhaustive path enumeration ----

fn best_path_mean(c: &[Vec<f64>]) -> f64 {
    fn walk(c: &[Vec<f64>], i: usize, j: usize, sum: f64, len: usize, best: &mut f64) {
        let (sum, len) = (sum + c[i][j], len + 1);
        let (n1, n2) = (c.len(), c[0].len());
        if i == n1 - 1 && j == n2 - 1 {
            *best = best.max(sum / len as f64);
            return;
        }
        if i + 1 < n1 {
            walk(c, i + 1, j, sum, len, best);
        }
        if j + 1 < n2 {
            walk(c, i, j + 1, sum, len, best);
        }
        if i + 1 < n1 && j + 1 < n2 {
            walk(c, i + 1, j + 1, sum, len, best);
        }
    }
    let mut best = f64::NEG_INFINITY;
    walk(c, 0, 0, 0.0, 0, &mut best);
    best
}

fn criterion_eds_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let (n1, n2) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let rows: Vec<Vec<f64>> = (0..n1)
            .map(|_| (0..n2).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        let got = matsim::eds_cross(&CrossSimMatrix::from_rows(&rows)).score.get().unwrap();
        let want = best_path_mean(&rows);
        worst = worst.max((got - want).abs());
        check((got - want).abs() <= 1e-9, || format!("case {case} ({n1}x{n2}): {got} vs {want}"))?;
    }
    Ok(format!("200 cases up to 7x7, max |err| {worst:.1e}"))
}

// ---- 2: τ-b against pair enumeration ----

fn tau_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut c, mut d, mut tx, mut ty) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let sx = (x[i] - x[j]).signum() * f64::from(u8::from(x[i] != x[j]));
            let sy = (y[i] - y[j]).signum() * f64::from(u8::from(y[i] != y[j]));
            tx += u64::from(sx == 0.0);
            ty += u64::from(sy == 0.0);
            match sx * sy {
                p if p > 0.0 => c += 1,
                p if p < 0.0 => d += 1,
                _ => {}
            }
        }
    }
    eval::tau_b_from_counts((n * (n - 1) / 2) as u64, c, d, tx, ty)
}

fn criterion_tau_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut undefined = 0;
    for case in 0..500 {
        let n = rng.random_range(2..=50);
        // alternate between heavily tied, lightly tied, and tie-free inputs
        let levels = [3, 11, 1_000_000][case % 3];
        let x: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels))).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels))).collect();
        let got = eval::kendall_tau_b(&x, &y).map_err(|e| e.to_string())?;
        let want = tau_oracle(&x, &y);
        undefined += usize::from(want.is_none());
        check(got == want, || format!("case {case} (n={n}): {got:?} vs {want:?}"))?;
    }
    Ok(format!("500 sequences n<=50, exact match ({undefined} undefined)"))
}

// ---- 3: rv2 against straight-line trace evaluation ----

fn rv2_oracle(a: &PatientMatrix, b: &PatientMatrix) -> Option<f64> {
    let hat = |m: &PatientMatrix| {
        let x = DMatrix::from_fn(m.nrows(), m.dim(), |i, j| m.row(i)[j]);
        let s = x.transpose() * &x;
        let mut h = s.clone();
        h.fill_diagonal(0.0);
        (h, s.norm())
    };
    let (ha, na) = hat(a);
    let (hb, nb) = hat(b);
    if ha.norm() <= 1e-12 * na || hb.norm() <= 1e-12 * nb {
        return None;
    }
    let num = (&ha * &hb).trace();
    Some(num / ((&ha * &ha).trace() * (&hb * &hb).trace()).sqrt())
}

fn criterion_rv2_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let d = rng.random_range(2..=16);
        let (na, nb) = (rng.random_range(1..=20), rng.random_range(1..=20));
        let a = patient(&mut rng, "a", na, d);
        let b = patient(&mut rng, "b", nb, d);
        let got = matsim::rv2(&a, &b).map_err(|e| e.to_string())?.get();
        let want = rv2_oracle(&a, &b);
        match (got, want) {
            (Some(g), Some(w)) => {
                worst = worst.max((g - w).abs());
                check((g - w).abs() <= 1e-12, || format!("case {case}: {g} vs {w}"))?;
            }
            (g, w) => check(g.is_none() && w.is_none(), || format!("case {case}: {g:?} vs {w:?}"))?,
        }
    }
    Ok(format!("100 pairs n<=20 d<=16, max |err| {worst:.1e}"))
}

// ---- 4: LSA singular values against a dense SVD of an independent TF-IDF ----

fn dense_tfidf(docs: &[Vec<String>]) -> DMatrix<f64> {
    let vocab: BTreeSet<&str> = docs.iter().flatten().map(String::as_str).collect();
    let index: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let n = docs.len() as f64;
    let mut df = vec![0usize; vocab.len()];
    for d in docs {
        let uniq: BTreeSet<&str> = d.iter().map(String::as_str).collect();
        for t in uniq {
            df[index[t]] += 1;
        }
    }
    let nonempty: Vec<&Vec<String>> = docs.iter().filter(|d| !d.is_empty()).collect();
    let mut m = DMatrix::zeros(nonempty.len(), vocab.len());
    for (r, d) in nonempty.iter().enumerate() {
        let mut counts = vec![0usize; vocab.len()];
        for t in d.iter() {
            counts[index[t.as_str()]] += 1;
        }
        for (j, &c) in counts.iter().enumerate() {
            if c > 0 {
                let idf = ((1.0 + n) / (1.0 + df[j] as f64)).ln() + 1.0;
                m[(r, j)] = (1.0 + (c as f64).ln()) * idf;
            }
        }
        let norm = m.row(r).norm();
        m.row_mut(r).scale_mut(1.0 / norm);
    }
    m
}

fn criterion_svd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut worst_sv, mut worst_orth) = (0.0f64, 0.0f64);
    for case in 0..50 {
        let n_docs = rng.random_range(20..=300);
        let vocab = rng.random_range(20..=500);
        let docs: Vec<Vec<String>> = (0..n_docs)
            .map(|_| {
                let len = rng.random_range(1..=40);
                // skewed term choice gives a spread-out spectrum
                (0..len)
                    .map(|_| {
                        let u: f64 = rng.random();
                        format!("w{}", (u * u * vocab as f64) as usize)
                    })
                    .collect()
            })
            .collect();
        let dense = dense_tfidf(&docs);
        let limit = dense.nrows().min(dense.ncols()).min(50);
        let dim = rng.random_range(1..=limit.max(1));
        let texts: Vec<String> = docs.iter().map(|d| d.join(" ")).collect();
        let cfg = VectorizerConfig { dim, seed: case, ..VectorizerConfig::default() };
        let model = vectorizer::fit_lsa(&texts, &cfg).map_err(|e| format!("case {case}: {e}"))?;
        let mut oracle: Vec<f64> = dense.singular_values().iter().copied().collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        for (k, (got, want)) in model.singular_values.iter().zip(&oracle).enumerate() {
            let rel = (got - want).abs() / want;
            worst_sv = worst_sv.max(rel);
            check(rel <= 1e-6, || format!("case {case} (docs {n_docs}, dim {dim}) sigma_{k}: {got} vs {want}"))?;
        }
        let cols: Vec<Vec<f64>> = (0..dim).map(|c| model.projection_column(c)).collect();
        for i in 0..dim {
            for j in 0..dim {
                let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let err = (dot - if i == j { 1.0 } else { 0.0 }).abs();
                worst_orth = worst_orth.max(err);
                check(err <= 1e-6, || format!("case {case}: column gram ({i},{j}) off by {err}"))?;
            }
        }
    }
    Ok(format!("50 corpora, max rel sigma err {worst_sv:.1e}, max orthonormality err {worst_orth:.1e}"))
}

// ---- 5: property suite ----

fn criterion_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut witnesses = 0;
    for case in 0..1000 {
        let d = rng.random_range(2..=8);
        let (na, nb) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let mut a_rows = unit_rows(&mut rng, na, d);
        if case % 5 == 0 {
            // repeated rows
            let r = a_rows[0].clone();
            a_rows.push(r);
        }
        let a = PatientMatrix::from_unindexed("a", a_rows).unwrap();
        let b = patient(&mut rng, "b", nb, d);
        for m in MatSimMethod::ALL {
            let ab = matsim::similarity(m, &a, &b).unwrap();
            let ba = matsim::similarity(m, &b, &a).unwrap();
            check(ab.defined == ba.defined, || format!("case {case}: {m} definedness asymmetric"))?;
            if let (Some(x), Some(y)) = (ab.get(), ba.get()) {
                check((x - y).abs() <= 1e-12, || format!("case {case}: {m} asymmetric {x} vs {y}"))?;
                check((-1.0 - 1e-9..=1.0 + 1e-9).contains(&x), || format!("case {case}: {m} out of bounds {x}"))?;
            }
            let aa = matsim::similarity(m, &a, &a).unwrap();
            if let Some(x) = aa.get() {
                check((x - 1.0).abs() <= 1e-12, || format!("case {case}: {m} self-similarity {x}"))?;
            } else {
                check(m == MatSimMethod::Rv2, || format!("case {case}: {m} self-similarity undefined"))?;
            }
        }
        let mut perm: Vec<usize> = (0..a.nrows()).collect();
        perm.shuffle(&mut rng);
        let pa = a.permuted(&perm);
        for m in [MatSimMethod::Rv2, MatSimMethod::Mms] {
            let x = matsim::similarity(m, &a, &b).unwrap();
            let y = matsim::similarity(m, &pa, &b).unwrap();
            check(x.defined == y.defined, || format!("case {case}: {m} permutation changed definedness"))?;
            if let (Some(x), Some(y)) = (x.get(), y.get()) {
                check((x - y).abs() <= 1e-12, || format!("case {case}: {m} not permutation invariant"))?;
            }
        }
        // order sensitivity: reversing a patient's notes leaves mms at 1 but
        // forces the eds path through the mismatched corner cell
        let rev: Vec<usize> = (0..a.nrows()).rev().collect();
        let ra = a.permuted(&rev);
        let corner: f64 = a.row(0).iter().zip(ra.row(0)).map(|(x, y)| x * y).sum();
        if corner < 1.0 - 1e-6 {
            let e = matsim::eds(&a, &ra).unwrap().get().unwrap();
            let mm = matsim::mms(&a, &ra).unwrap().get().unwrap();
            check(e < 1.0 - 1e-9, || format!("case {case}: eds not order sensitive ({e})"))?;
            check((mm - 1.0).abs() <= 1e-12, || format!("case {case}: mms of reversal {mm}"))?;
            witnesses += 1;
        }
        let res = matsim::eds_cross(&matsim::cross_sim(&a, &b).unwrap());
        check(res.lambdas.windows(2).all(|w| w[0] <= w[1]), || format!("case {case}: lambda trace decreased"))?;
        check(res.score.get() == res.lambdas.last().copied(), || format!("case {case}: score is not the final lambda"))?;
        check(res.residual.abs() <= matsim::EDS_RESIDUAL_TOL, || format!("case {case}: residual {}", res.residual))?;
    }
    check(witnesses > 100, || format!("only {witnesses} order-sensitivity witnesses"))?;
    Ok(format!("1000 instances x 3 methods, {witnesses} order-sensitivity witnesses"))
}

// ---- 6: planted cluster recovery ----

struct Planted {
    corpus: corpus::Corpus,
    assignment: BTreeMap<String, usize>,
    lsa050: BTreeMap<String, PatientMatrix>,
}

fn planted_500() -> Planted {
    let (corpus, assignment) = corpus::generate_synthetic(&SynthSpec::new(500, 5, 7)).unwrap();
    let (set, _) = vectorizer::vectorize_corpus(
        &corpus,
        NoteFilter::None,
        VectorSource::Lsa(&VectorizerConfig::default()),
        "lsa050",
        SegmentOptions::default(),
    )
    .unwrap();
    Planted { corpus, assignment, lsa050: set.matrices }
}

fn criterion_cluster_recovery(p: &Planted) -> Outcome {
    let cfg = RunConfig::new(VMethod::LSA050, MatSimMethod::Rv2);
    let sim = engine::compute_all_pairs(&p.lsa050, &cfg).map_err(|e| e.to_string())?;
    let unfiltered = eval::precision_at_k(&sim, &p.assignment, 5);
    check(unfiltered >= 0.9, || format!("unfiltered precision@5 {unfiltered:.3} < 0.9"))?;
    let (relevancy, _) = eval::derive_relevancy(&p.corpus, &GridOptions::default()).map_err(|e| e.to_string())?;
    let mut worst = f64::INFINITY;
    for c in SimilarityCategory::ALL {
        let (set, _) = vectorizer::vectorize_corpus(
            &p.corpus,
            NoteFilter::Category(c, &relevancy),
            VectorSource::Lsa(&VectorizerConfig::default()),
            "lsa050",
            SegmentOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        let sim = engine::compute_all_pairs(&set.matrices, &RunConfig { filter: true, category: c, ..cfg })
            .map_err(|e| e.to_string())?;
        let p5 = eval::precision_at_k(&sim, &p.assignment, 5);
        worst = worst.min(p5);
        check(p5 >= 0.8, || format!("{c}: filtered precision@5 {p5:.3} < 0.8"))?;
    }
    Ok(format!("500 patients, rv2+lsa050 precision@5 unfiltered {unfiltered:.3}, worst filtered category {worst:.3}"))
}

// ---- 7: grid shape and report arithmetic ----

fn write_stub_imports(corpus: &corpus::Corpus, assignment: &BTreeMap<String, usize>, dir: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for label in ["d2v050", "d2v200", "rbc050", "rbc200"] {
        let dim: usize = label[3..].parse().unwrap();
        let centroids = unit_rows(&mut rng, 10, dim);
        let mut f = std::fs::File::create(dir.join(format!("{label}.jsonl"))).unwrap();
        for p in corpus.patients() {
            let c = &centroids[assignment[&p.patient_id]];
            for idx in 0..p.notes.len() {
                let v: Vec<f64> = c.iter().map(|x| x + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
                let line = serde_json::json!({"patient_id": p.patient_id, "note_index": idx, "vector": v});
                writeln!(f, "{line}").unwrap();
            }
        }
    }
}

fn table_rows(table: &str) -> Vec<Vec<String>> {
    table
        .lines()
        .filter(|l| l.starts_with('|') && !l.starts_with("|---"))
        .skip(1)
        .map(|l| l.trim_matches('|').split('|').map(|c| c.trim().to_string()).collect())
        .collect()
}

fn criterion_grid() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (corpus, assignment) = corpus::generate_synthetic(&SynthSpec::new(80, 4, 11)).unwrap();
    write_stub_imports(&corpus, &assignment, dir.path());
    let validation = eval::synthetic_validation(&assignment, &ValidationSpec::default()).unwrap();
    let opts = GridOptions { imports: Some(dir.path().to_path_buf()), ..GridOptions::default() };
    let report = eval::grid_search(&corpus, &validation, &opts).map_err(|e| e.to_string())?;
    check(report.cells.len() == 42, || format!("{} cells", report.cells.len()))?;
    let skipped = report.cells.iter().filter(|c| c.is_skipped()).count();
    check(skipped == 0, || format!("{skipped} cells skipped with all imports present"))?;

    let summary = eval::render_summary_table(&report);
    let detail = eval::render_detail_table(&report, 10);
    let srows = table_rows(&summary);
    check(srows.len() == 3 && srows.iter().all(|r| r.len() == 15), || "summary table shape".into())?;
    let drows = table_rows(&detail);
    check(drows.len() == 10 && drows.iter().all(|r| r.len() == 14), || "detail table shape".into())?;
    let mut checked = 0;
    for row in &drows {
        let comps: Vec<f64> = row[3..13].iter().filter_map(|c| c.parse().ok()).collect();
        let printed: f64 = row[13].parse().map_err(|_| format!("bad mean {:?}", row[13]))?;
        let mean = comps.iter().sum::<f64>() / comps.len() as f64;
        check((mean - printed).abs() <= 5e-3, || format!("row {row:?}: mean {mean} printed {printed}"))?;
        checked += 1;
    }
    let best = report.cells.iter().filter_map(|c| c.mean).fold(f64::NEG_INFINITY, f64::max);
    let top = eval::ranked_cells(&report)[0];
    check(top.mean == Some(best), || "detail table not led by the best cell".into())?;
    // summary cells print the same mean as the detail rows
    let header = summary.lines().next().unwrap_or_default();
    let heads: Vec<&str> = header.trim_matches('|').split('|').map(str::trim).collect();
    for row in &drows {
        let col = heads
            .iter()
            .position(|h| *h == format!("{} {}", row[1], row[2]))
            .ok_or("detail row has no summary column")?;
        let srow = srows.iter().find(|r| r[0] == row[0]).ok_or("missing mmethod row")?;
        check(srow[col].trim_end_matches('*') == row[13], || format!("summary {} vs detail {}", srow[col], row[13]))?;
    }
    eval::write_report(&report, dir.path().join("report")).map_err(|e| e.to_string())?;
    for f in ["summary.md", "detail.md", "agreement.md", "cells.csv", "agreement.csv"] {
        check(dir.path().join("report").join(f).exists(), || format!("{f} not written"))?;
    }
    Ok(format!("42 cells, {checked} detail rows re-added within 5e-3"))
}

// ---- 8: timing ordering ----

fn best_time(matrices: &BTreeMap<String, PatientMatrix>, cfg: &RunConfig) -> f64 {
    (0..3)
        .map(|_| engine::compute_all_pairs(matrices, cfg).unwrap().wall_time_seconds)
        .fold(f64::INFINITY, f64::min)
}

fn criterion_timing(p: &Planted) -> Outcome {
    let t = |m: MatSimMethod| best_time(&p.lsa050, &RunConfig::new(VMethod::LSA050, m));
    let (rv2, mms, eds) = (t(MatSimMethod::Rv2), t(MatSimMethod::Mms), t(MatSimMethod::Eds));
    // timing depends only on shape, so dim 200 uses random rows with the same note counts
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let wide: BTreeMap<String, PatientMatrix> = p
        .lsa050
        .iter()
        .map(|(id, m)| (id.clone(), patient(&mut rng, id, m.nrows(), 200)))
        .collect();
    let rv2_200 = best_time(&wide, &RunConfig::new(VMethod::LSA200, MatSimMethod::Rv2));
    let line = format!(
        "500 patients: rv2 {rv2:.3}s < mms {mms:.3}s < eds {eds:.3}s; rv2 dim 200 {rv2_200:.3}s = {:.1}x dim 50",
        rv2_200 / rv2
    );
    check(rv2 < mms && mms < eds, || format!("ordering violated: {line}"))?;
    check(rv2_200 >= 4.0 * rv2, || format!("dim blow-up below 4x: {line}"))?;
    Ok(line)
}

// ---- 9: determinism ----

fn patsim(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_patsim"))
        .args(args)
        .env_remove("PATSIM_WORKERS")
        .output()
        .expect("run patsim")
}

fn run_ok(args: &[&str]) -> Result<(), String> {
    let out = patsim(args);
    check(out.status.success(), || {
        format!("patsim {} exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr))
    })
}

fn pipeline(dir: &Path, patients: usize) -> Result<(), String> {
    let p = |f: &str| dir.join(f).to_string_lossy().into_owned();
    let n = patients.to_string();
    run_ok(&["synth", "--patients", &n, "--clusters", "5", "--seed", "7", "--out", &p("c.jsonl"),
        "--assignment", &p("clusters.csv"), "--annotations", &p("ann.csv")])?;
    run_ok(&["segment", "--corpus", &p("c.jsonl"), "--out", &p("segments.jsonl")])?;
    run_ok(&["vectorize", "--corpus", &p("c.jsonl"), "--category", "unfiltered", "--method", "lsa", "--dim", "50",
        "--seed", "7", "--out", &p("matrices.jsonl"), "--model-out", &p("lsa.model")])?;
    run_ok(&["vectorize", "--corpus", &p("c.jsonl"), "--category", "Medication", "--seed", "7",
        "--out", &p("medication.jsonl")])?;
    for m in ["rv2", "mms", "eds"] {
        run_ok(&["pairs", "--matrices", &p("matrices.jsonl"), "--mmethod", m, "--workers", "2",
            "--out", &p(&format!("{m}.sim")), "--csv", &p(&format!("{m}.csv"))])?;
    }
    run_ok(&["pairs", "--matrices", &p("medication.jsonl"), "--mmethod", "rv2", "--out", &p("medication.sim")])?;
    run_ok(&["evaluate", "--sim", &p("rv2.sim"), "--annotations", &p("ann.csv"), "--category", "all",
        "--out", &p("eval.csv")])?;
    run_ok(&["evaluate", "--sim", &p("medication.sim"), "--annotations", &p("ann.csv"), "--category", "Medication"])
}

fn without_timing(path: &Path) -> Result<Vec<u8>, String> {
    let mut sim = SimilarityMatrix::load(path).map_err(|e| e.to_string())?;
    sim.wall_time_seconds = 0.0;
    sim.to_bytes().map_err(|e| e.to_string())
}

fn criterion_determinism() -> Outcome {
    let (corpus, _) = corpus::generate_synthetic(&SynthSpec::new(80, 4, 9)).unwrap();
    let (set, _) = vectorizer::vectorize_corpus(
        &corpus,
        NoteFilter::None,
        VectorSource::Lsa(&VectorizerConfig::default()),
        "lsa050",
        SegmentOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    for m in MatSimMethod::ALL {
        let bits: Vec<Vec<u64>> = [1, 4, 8]
            .iter()
            .map(|&w| {
                let cfg = RunConfig { workers: w, ..RunConfig::new(VMethod::LSA050, m) };
                engine::compute_all_pairs(&set.matrices, &cfg).unwrap().score_bits()
            })
            .collect();
        check(bits[0] == bits[1] && bits[1] == bits[2], || format!("{m}: scores differ across workers"))?;
    }
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    pipeline(a.path(), 60)?;
    pipeline(b.path(), 60)?;
    let mut files = 0;
    for entry in std::fs::read_dir(a.path()).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap().to_owned();
        let other = b.path().join(&name);
        let (x, y) = if path.extension().is_some_and(|e| e == "sim") {
            (without_timing(&path)?, without_timing(&other)?)
        } else {
            (std::fs::read(&path).map_err(|e| e.to_string())?, std::fs::read(&other).map_err(|e| e.to_string())?)
        };
        check(x == y, || format!("{} differs between runs", name.to_string_lossy()))?;
        files += 1;
    }
    Ok(format!("workers 1/4/8 bitwise equal for 3 methods; {files} pipeline outputs byte-identical"))
}

// ---- 10: end-to-end smoke ----

fn criterion_smoke() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    pipeline(dir.path(), 100)?;
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("synth -> segment -> vectorize -> pairs -> evaluate on 100 patients in {secs:.1}s, all exit 0"))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or(e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {why} [{secs:.1}s]");
            }
        }
    };
    report(1, "eds oracle equivalence", &criterion_eds_oracle);
    report(2, "tau-b oracle equivalence", &criterion_tau_oracle);
    report(3, "rv2 oracle equivalence", &criterion_rv2_oracle);
    report(4, "truncated SVD accuracy", &criterion_svd);
    report(5, "property suite", &criterion_properties);
    let planted = planted_500();
    report(6, "planted cluster recovery", &|| criterion_cluster_recovery(&planted));
    report(7, "grid shape and report arithmetic", &criterion_grid);
    report(8, "timing ordering", &|| criterion_timing(&planted));
    report(9, "determinism", &criterion_determinism);
    report(10, "end-to-end smoke", &criterion_smoke);
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
