//! Sparse row matrices and randomized truncated SVD by subspace iteration.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Compressed sparse row matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_rows(ncols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for row in rows {
            for &(j, v) in row {
                debug_assert!(j < ncols);
                indices.push(j);
                data.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            nrows: rows.len(),
            ncols,
            indptr,
            indices,
            data,
        }
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let ncols = rows.first().map_or(0, Vec::len);
        let sparse: Vec<Vec<(usize, f64)>> = rows
            .iter()
            .map(|r| r.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect())
            .collect();
        Self::from_rows(ncols, &sparse)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for k in self.indptr[i]..self.indptr[i + 1] {
                m[(i, self.indices[k])] += self.data[k];
            }
        }
        m
    }

    /// `self · x` for dense `x` (ncols × l).
    fn mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let l = x.ncols();
        let xt = x.transpose();
        let xs = xt.as_slice();
        let mut out = vec![0.0; self.nrows * l];
        for i in 0..self.nrows {
            let row = &mut out[i * l..(i + 1) * l];
            for k in self.indptr[i]..self.indptr[i + 1] {
                let v = self.data[k];
                let src = &xs[self.indices[k] * l..(self.indices[k] + 1) * l];
                for (o, s) in row.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
        DMatrix::from_row_slice(self.nrows, l, &out)
    }

    /// `selfᵀ · x` for dense `x` (nrows × l).
    fn tmul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let l = x.ncols();
        let xt = x.transpose();
        let xs = xt.as_slice();
        let mut out = vec![0.0; self.ncols * l];
        for i in 0..self.nrows {
            let src = &xs[i * l..(i + 1) * l];
            for k in self.indptr[i]..self.indptr[i + 1] {
                let v = self.data[k];
                let j = self.indices[k];
                for (o, s) in out[j * l..(j + 1) * l].iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
        DMatrix::from_row_slice(self.ncols, l, &out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SvdParams {
    pub rank: usize,
    pub oversample: usize,
    pub power_iters: usize,
    /// Extra iterations continue until every Ritz residual `‖A vᵢ − σᵢ uᵢ‖`
    /// falls below `tol · σᵢ`, up to `max_iters` in total. The residual bounds
    /// the distance from σᵢ to a true singular value.
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl SvdParams {
    pub fn new(rank: usize, seed: u64) -> Self {
        Self {
            rank,
            oversample: 10.max(rank),
            power_iters: 4,
            tol: 1e-7,
            max_iters: 400,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    /// Descending.
    pub singular_values: Vec<f64>,
    /// ncols × rank, orthonormal columns.
    pub right: DMatrix<f64>,
    pub iterations: usize,
}

fn orth(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

/// Top-`rank` right singular vectors and singular values of `a`.
pub fn truncated_svd(a: &CsrMatrix, params: &SvdParams) -> TruncatedSvd {
    let k = params.rank;
    let width = (k + params.oversample).min(a.nrows.min(a.ncols)).max(k);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let omega = DMatrix::from_fn(a.ncols, width, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orth(a.mul(&omega));

    let mut iterations = 0;
    loop {
        let at_q = a.tmul(&q);
        // Ritz extraction and the residual check are costly; do them every few steps.
        if iterations >= params.power_iters && (iterations - params.power_iters).is_multiple_of(4) {
            let (sv, right, left) = ritz(&at_q, &q, k);
            let converged = iterations + 4 > params.max_iters || {
                let av = a.mul(&right);
                let floor = sv.first().copied().unwrap_or(0.0) * 1e-12;
                (0..k).all(|i| {
                    let r = av.column(i) - left.column(i) * sv[i];
                    r.norm() <= params.tol * sv[i].max(floor)
                })
            };
            if converged {
                return TruncatedSvd {
                    singular_values: sv,
                    right: canonical_signs(right),
                    iterations,
                };
            }
        }
        q = orth(a.mul(&at_q));
        iterations += 1;
    }
}

/// Rayleigh–Ritz on the subspace `q`, given `Aᵀq`. Returns the top-k singular
/// values, right vectors (ncols × k) and left vectors (nrows × k).
fn ritz(at_q: &DMatrix<f64>, q: &DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    // Aᵀq = Bᵀ with B = qᵀA; Bᵀ = U Σ Wᵀ gives right vectors U and left vectors q W.
    let svd = at_q.clone().svd(true, true);
    let u = svd.u.expect("requested u");
    let w = svd.v_t.expect("requested v_t").transpose();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let order = &order[..k];
    let sv = order.iter().map(|&i| svd.singular_values[i]).collect();
    let right = DMatrix::from_fn(u.nrows(), k, |r, c| u[(r, order[c])]);
    let wk = DMatrix::from_fn(w.nrows(), k, |r, c| w[(r, order[c])]);
    (sv, right, q * wk)
}

/// Flips each column so its largest-magnitude entry is positive.
fn canonical_signs(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for mut col in m.column_iter_mut() {
        let mut best = 0.0f64;
        for &v in col.iter() {
            if v.abs() > best.abs() {
                best = v;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_sparse(rng: &mut ChaCha8Rng, m: usize, n: usize, density: f64) -> CsrMatrix {
        let rows: Vec<Vec<(usize, f64)>> = (0..m)
            .map(|_| {
                let mut row = Vec::new();
                for j in 0..n {
                    if rng.random_bool(density) {
                        row.push((j, rng.random_range(0.1..2.0)));
                    }
                }
                row
            })
            .collect();
        CsrMatrix::from_rows(n, &rows)
    }

    fn dense_singular_values(a: &CsrMatrix) -> Vec<f64> {
        let d = a.to_dense();
        let gram = if d.nrows() <= d.ncols() { &d * d.transpose() } else { d.transpose() * &d };
        let mut ev: Vec<f64> = gram.symmetric_eigenvalues().iter().map(|v| v.max(0.0).sqrt()).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    #[test]
    fn products_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_sparse(&mut rng, 7, 5, 0.4);
        let x = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(7, 2, |_, _| rng.random_range(-1.0..1.0));
        let d = a.to_dense();
        assert!((a.mul(&x) - &d * &x).norm() < 1e-12);
        assert!((a.tmul(&y) - d.transpose() * &y).norm() < 1e-12);
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_sparse(&mut rng, 120, 80, 0.1);
        let svd = truncated_svd(&a, &SvdParams::new(8, 5));
        let oracle = dense_singular_values(&a);
        for (got, want) in svd.singular_values.iter().zip(&oracle) {
            assert!((got - want).abs() <= 1e-6 * want, "{got} vs {want}");
        }
        let gram = svd.right.transpose() * &svd.right;
        assert!((gram - DMatrix::identity(8, 8)).amax() < 1e-6);
    }

    #[test]
    fn deterministic_for_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_sparse(&mut rng, 40, 30, 0.2);
        let x = truncated_svd(&a, &SvdParams::new(4, 9));
        let y = truncated_svd(&a, &SvdParams::new(4, 9));
        assert_eq!(x.right.as_slice(), y.right.as_slice());
        assert_eq!(x.singular_values, y.singular_values);
    }

    #[test]
    fn rank_one_input() {
        let a = CsrMatrix::from_dense(&[vec![1.0, 2.0, 0.0], vec![2.0, 4.0, 0.0], vec![3.0, 6.0, 0.0]]);
        let svd = truncated_svd(&a, &SvdParams::new(1, 0));
        let want = (14.0f64 * 5.0).sqrt();
        assert!((svd.singular_values[0] - want).abs() < 1e-10);
        let v = svd.right.column(0);
        assert!((v[0] - 1.0 / 5f64.sqrt()).abs() < 1e-10 && (v[1] - 2.0 / 5f64.sqrt()).abs() < 1e-10);
    }
}
