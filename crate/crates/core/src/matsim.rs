//! Matrix similarity between two patient matrices: rv2, mms, eds, and the
//! `combined` ensemble.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vectorizer::PatientMatrix;

/// Relative size below which a diagonal-free Gram matrix counts as zero.
const RV2_DEGENERATE_REL: f64 = 1e-12;
const EDS_MAX_ITERS: usize = 100;
/// Dinkelbach residual tolerance on the inner max path sum.
pub const EDS_RESIDUAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatSimMethod {
    Rv2,
    Mms,
    Eds,
}

impl MatSimMethod {
    pub const ALL: [MatSimMethod; 3] = [Self::Rv2, Self::Mms, Self::Eds];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rv2 => "rv2",
            Self::Mms => "mms",
            Self::Eds => "eds",
        }
    }
}

impl fmt::Display for MatSimMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatSimMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().trim_start_matches('r') {
            "v2" => Ok(Self::Rv2),
            "mms" => Ok(Self::Mms),
            "eds" => Ok(Self::Eds),
            _ => Err(Error::Config(format!("unknown matrix similarity method {s:?}"))),
        }
    }
}

/// A similarity value, or an undefined marker for degenerate inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimScore {
    pub value: f64,
    pub defined: bool,
}

impl SimScore {
    pub fn new(value: f64) -> Self {
        Self { value, defined: true }
    }

    pub fn undefined() -> Self {
        Self { value: f64::NAN, defined: false }
    }

    pub fn get(self) -> Option<f64> {
        self.defined.then_some(self.value)
    }
}

/// Pairwise cosine similarities between the rows of two patients.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSimMatrix {
    pub n1: usize,
    pub n2: usize,
    /// Row-major, `n1 × n2`.
    pub values: Vec<f64>,
}

impl CrossSimMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n1 = rows.len();
        let n2 = rows.first().map_or(0, Vec::len);
        Self {
            n1,
            n2,
            values: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n2 + j]
    }

    pub fn transpose(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for j in 0..self.n2 {
            for i in 0..self.n1 {
                values.push(self.get(i, j));
            }
        }
        Self { n1: self.n2, n2: self.n1, values }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(a: &PatientMatrix, b: &PatientMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            key: format!("{} vs {}", a.patient_id, b.patient_id),
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}

/// `A · Bᵀ` for unit-row matrices.
pub fn cross_sim(a: &PatientMatrix, b: &PatientMatrix) -> Result<CrossSimMatrix> {
    check_dims(a, b)?;
    let mut values = Vec::with_capacity(a.nrows() * b.nrows());
    for ra in a.rows() {
        for rb in b.rows() {
            values.push(dot(ra, rb));
        }
    }
    Ok(CrossSimMatrix {
        n1: a.nrows(),
        n2: b.nrows(),
        values,
    })
}

/// A patient's `AᵀA` with the diagonal removed, packed as its strict upper
/// triangle, plus the norms rv2 needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Rv2Gram {
    dim: usize,
    upper: Vec<f64>,
    /// Frobenius norm of the diagonal-free matrix.
    norm: f64,
    degenerate: bool,
}

impl Rv2Gram {
    pub fn new(m: &PatientMatrix) -> Self {
        let d = m.dim();
        let mut full = vec![0.0; d * d];
        for r in m.rows() {
            for i in 0..d {
                let ri = r[i];
                if ri == 0.0 {
                    continue;
                }
                let dst = &mut full[i * d..(i + 1) * d];
                for (o, &rj) in dst.iter_mut().zip(r) {
                    *o += ri * rj;
                }
            }
        }
        let mut upper = Vec::with_capacity(d * d.saturating_sub(1) / 2);
        let mut diag_sq = 0.0;
        for i in 0..d {
            diag_sq += full[i * d + i] * full[i * d + i];
            upper.extend_from_slice(&full[i * d + i + 1..(i + 1) * d]);
        }
        let off_sq = 2.0 * upper.iter().map(|x| x * x).sum::<f64>();
        let norm = off_sq.sqrt();
        let full_norm = (off_sq + diag_sq).sqrt();
        Self {
            dim: d,
            upper,
            norm,
            degenerate: !(norm > RV2_DEGENERATE_REL * full_norm),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Self-similarity: one, or undefined for a degenerate Gram matrix.
    pub fn self_score(&self) -> SimScore {
        if self.degenerate {
            SimScore::undefined()
        } else {
            SimScore::new(1.0)
        }
    }

    /// `tr(Ŝ_A Ŝ_B) / sqrt(tr(Ŝ_A²) tr(Ŝ_B²))`; the traces are Frobenius
    /// inner products because both matrices are symmetric.
    pub fn score(&self, other: &Rv2Gram) -> SimScore {
        debug_assert_eq!(self.dim, other.dim);
        if self.degenerate || other.degenerate {
            return SimScore::undefined();
        }
        let inner = 2.0 * dot(&self.upper, &other.upper);
        SimScore::new((inner / (self.norm * other.norm)).clamp(-1.0, 1.0))
    }
}

/// Modified RV coefficient of the column cross-product matrices.
pub fn rv2(a: &PatientMatrix, b: &PatientMatrix) -> Result<SimScore> {
    check_dims(a, b)?;
    Ok(Rv2Gram::new(a).score(&Rv2Gram::new(b)))
}

/// Mean of the concatenated row-wise and column-wise maxima of the cross matrix.
pub fn mms(a: &PatientMatrix, b: &PatientMatrix) -> Result<SimScore> {
    check_dims(a, b)?;
    let mut row_max = vec![f64::NEG_INFINITY; a.nrows()];
    let mut col_max = vec![f64::NEG_INFINITY; b.nrows()];
    for (i, ra) in a.rows().enumerate() {
        for (j, rb) in b.rows().enumerate() {
            let c = dot(ra, rb);
            if c > row_max[i] {
                row_max[i] = c;
            }
            if c > col_max[j] {
                col_max[j] = c;
            }
        }
    }
    Ok(SimScore::new(mean_maxima(&row_max, &col_max)))
}

pub fn mms_cross(c: &CrossSimMatrix) -> SimScore {
    let row_max: Vec<f64> = (0..c.n1)
        .map(|i| (0..c.n2).map(|j| c.get(i, j)).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let col_max: Vec<f64> = (0..c.n2)
        .map(|j| (0..c.n1).map(|i| c.get(i, j)).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    SimScore::new(mean_maxima(&row_max, &col_max))
}

fn mean_maxima(row_max: &[f64], col_max: &[f64]) -> f64 {
    let total: f64 = row_max.iter().sum::<f64>() + col_max.iter().sum::<f64>();
    total / (row_max.len() + col_max.len()) as f64
}

/// Outcome of the max-mean path search.
#[derive(Debug, Clone, PartialEq)]
pub struct EdsResult {
    pub score: SimScore,
    /// Cells of the best path from `(0, 0)` to `(n1-1, n2-1)`.
    pub path: Vec<(usize, usize)>,
    /// Dinkelbach parameter after each iteration; non-decreasing.
    pub lambdas: Vec<f64>,
    /// Max path sum of `c - λ` at the final λ.
    pub residual: f64,
}

/// Maximum mean cosine over monotone corner-to-corner paths.
pub fn eds(a: &PatientMatrix, b: &PatientMatrix) -> Result<SimScore> {
    Ok(eds_cross(&cross_sim(a, b)?).score)
}

/// Parametric (Dinkelbach) search: for a candidate mean λ, the path
/// maximizing `Σ (c − λ)` is found by DP; λ moves to that path's mean until
/// no path improves on it.
pub fn eds_cross(c: &CrossSimMatrix) -> EdsResult {
    let mut dp = vec![0.0; c.n1 * c.n2];
    let mut path = max_sum_path(c, 0.0, &mut dp).1;
    let mut lambda = path_mean(c, &path);
    let mut lambdas = vec![lambda];
    let mut residual;
    loop {
        let (sum, candidate) = max_sum_path(c, lambda, &mut dp);
        residual = sum;
        let m = path_mean(c, &candidate);
        if m <= lambda || lambdas.len() >= EDS_MAX_ITERS {
            break;
        }
        lambda = m;
        path = candidate;
        lambdas.push(lambda);
    }
    EdsResult {
        score: SimScore::new(lambda),
        path,
        lambdas,
        residual,
    }
}

fn path_mean(c: &CrossSimMatrix, path: &[(usize, usize)]) -> f64 {
    path.iter().map(|&(i, j)| c.get(i, j)).sum::<f64>() / path.len() as f64
}

/// Best path for `Σ (c − λ)` with moves down, right, or diagonal. Ties prefer
/// the diagonal, then down, then right.
fn max_sum_path(c: &CrossSimMatrix, lambda: f64, dp: &mut [f64]) -> (f64, Vec<(usize, usize)>) {
    let (n1, n2) = (c.n1, c.n2);
    for i in 0..n1 {
        for j in 0..n2 {
            let here = c.get(i, j) - lambda;
            let prev = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => dp[j - 1],
                (_, 0) => dp[(i - 1) * n2],
                _ => dp[(i - 1) * n2 + j - 1]
                    .max(dp[(i - 1) * n2 + j])
                    .max(dp[i * n2 + j - 1]),
            };
            dp[i * n2 + j] = prev + here;
        }
    }
    let mut path = Vec::with_capacity(n1 + n2);
    let (mut i, mut j) = (n1 - 1, n2 - 1);
    path.push((i, j));
    while (i, j) != (0, 0) {
        (i, j) = match (i, j) {
            (0, _) => (0, j - 1),
            (_, 0) => (i - 1, 0),
            _ => {
                let diag = dp[(i - 1) * n2 + j - 1];
                let up = dp[(i - 1) * n2 + j];
                let left = dp[i * n2 + j - 1];
                if diag >= up && diag >= left {
                    (i - 1, j - 1)
                } else if up >= left {
                    (i - 1, j)
                } else {
                    (i, j - 1)
                }
            }
        };
        path.push((i, j));
    }
    path.reverse();
    (dp[n1 * n2 - 1], path)
}

/// One method applied to one pair.
pub fn similarity(method: MatSimMethod, a: &PatientMatrix, b: &PatientMatrix) -> Result<SimScore> {
    match method {
        MatSimMethod::Rv2 => rv2(a, b),
        MatSimMethod::Mms => mms(a, b),
        MatSimMethod::Eds => eds(a, b),
    }
}

/// Mean of the defined scores; undefined only when every score is undefined.
pub fn combined(scores: &[SimScore]) -> Result<SimScore> {
    if scores.is_empty() {
        return Err(Error::Degenerate("combined needs at least one score".into()));
    }
    let defined: Vec<f64> = scores.iter().filter_map(|s| s.get()).collect();
    if defined.is_empty() {
        return Ok(SimScore::undefined());
    }
    Ok(SimScore::new(defined.iter().sum::<f64>() / defined.len() as f64))
}
