//! Sparse linear algebra: triplet assembly, CSR storage, a direct sparse-LU
//! solve with residual verification, and a restarted-GMRES fallback.

use std::io::Write;
use std::sync::Once;

use crate::error::{Error, Result};

/// Coordinate-format assembly buffer. Duplicate (row, col) entries are summed
/// when the matrix is compressed.
#[derive(Debug, Clone)]
pub struct TripletList {
    pub n_rows: usize,
    pub n_cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl TripletList {
    pub fn new(n_rows: usize, n_cols: usize) -> Self {
        TripletList {
            n_rows,
            n_cols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.n_rows && col < self.n_cols, "({row},{col})");
        if value != 0.0 {
            self.entries.push((row, col, value));
        }
    }

    /// Compresses to CSR, summing duplicates and dropping entries that cancel
    /// to exactly zero.
    pub fn to_csr(&self) -> SparseMatrix {
        let mut sorted = self.entries.clone();
        sorted.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; self.n_rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values = Vec::with_capacity(sorted.len());
        let mut k = 0;
        while k < sorted.len() {
            let (r, c, mut v) = sorted[k];
            k += 1;
            while k < sorted.len() && sorted[k].0 == r && sorted[k].1 == c {
                v += sorted[k].2;
                k += 1;
            }
            if v != 0.0 {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
            }
        }
        for r in 0..self.n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        SparseMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            row_ptr,
            col_idx,
            values,
        }
    }
}

/// Compressed-sparse-row matrix.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols);
        let mut y = vec![0.0; self.n_rows];
        for r in 0..self.n_rows {
            let mut s = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            y[r] = s;
        }
        y
    }

    /// Writes the matrix in MatrixMarket coordinate format (1-based indices).
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.n_rows, self.n_cols, self.nnz())?;
        for r in 0..self.n_rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                writeln!(w, "{} {} {:.17e}", r + 1, self.col_idx[k] + 1, self.values[k])?;
            }
        }
        Ok(())
    }
}

/// Appends a mean-zero constraint `sum_i w_i x_i = 0` as a bordered row and
/// column (Lagrange multiplier), growing the system by one.
pub fn attach_mean_zero_gauge(trips: &mut TripletList, rhs: &mut Vec<f64>, weights: &[(usize, f64)]) {
    assert_eq!(trips.n_rows, trips.n_cols);
    assert_eq!(rhs.len(), trips.n_rows);
    let n = trips.n_rows;
    trips.n_rows = n + 1;
    trips.n_cols = n + 1;
    for &(i, w) in weights {
        trips.push(i, n, w);
        trips.push(n, i, w);
    }
    rhs.push(0.0);
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Accept a solution only if `||Ax - b||_2 <= residual_tol * max(||b||_2, 1)`.
    pub residual_tol: f64,
    pub gmres_restart: usize,
    pub gmres_max_iters: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            residual_tol: 1e-10,
            gmres_restart: 200,
            gmres_max_iters: 20_000,
        }
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn residual_norm(a: &SparseMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.matvec(x);
    norm2(&ax.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<_>>())
}

static FAER_SETUP: Once = Once::new();

/// A sparse LU factorization kept around for repeated right-hand sides.
pub struct Factorized {
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
    n: usize,
}

impl Factorized {
    pub fn new(a: &SparseMatrix) -> Result<Self> {
        FAER_SETUP.call_once(|| {
            // Sequential by default so callers can parallelize over
            // independent solves; POROFLOW_THREADS overrides for one big run.
            let par = std::env::var("POROFLOW_THREADS")
                .ok()
                .and_then(|v| v.parse::<usize>().ok())
                .filter(|&n| n > 1)
                .map_or(faer::Par::Seq, faer::Par::rayon);
            faer::set_global_parallelism(par);
        });
        if a.n_rows != a.n_cols {
            return Err(Error::Config(format!(
                "factorization needs a square matrix, got {}x{}",
                a.n_rows, a.n_cols
            )));
        }
        let mut triplets = Vec::with_capacity(a.nnz());
        for r in 0..a.n_rows {
            for k in a.row_ptr[r]..a.row_ptr[r + 1] {
                triplets.push(faer::sparse::Triplet::new(r, a.col_idx[k], a.values[k]));
            }
        }
        let mat = faer::sparse::SparseColMat::<usize, f64>::try_new_from_triplets(
            a.n_rows, a.n_cols, &triplets,
        )
        .map_err(|e| Error::Config(format!("sparse matrix creation failed: {e:?}")))?;
        let lu = mat
            .sp_lu()
            .map_err(|e| Error::Singular(format!("sparse LU factorization failed: {e:?}")))?;
        Ok(Factorized { lu, n: a.n_rows })
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let rhs = faer::Mat::from_fn(b.len(), 1, |i, _| b[i]);
        let sol = faer::linalg::solvers::Solve::solve(&self.lu, &rhs);
        (0..b.len()).map(|i| sol[(i, 0)]).collect()
    }
}

/// Sparse LU solve. Deterministic: the backend runs sequentially; callers
/// parallelize over independent solves instead.
pub fn solve_direct(a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    Ok(Factorized::new(a)?.solve_vec(b))
}

/// Restarted GMRES without preconditioning; fallback path only.
pub fn solve_gmres(
    a: &SparseMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    restart: usize,
    max_iters: usize,
) -> Result<Vec<f64>> {
    assert_eq!(a.n_cols, a.n_rows);
    gmres_operator(|x| a.matvec(x), b, x0, tol, restart, max_iters)
}

/// Restarted GMRES on an abstract linear operator (matrix-free form).
pub fn gmres_operator<F>(
    apply: F,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    restart: usize,
    max_iters: usize,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let (x, rel, iterations) = gmres_best_effort(apply, b, x0, tol, restart, max_iters);
    if rel <= tol {
        Ok(x)
    } else {
        Err(Error::NoConvergence {
            residual: rel,
            iterations,
            tol,
        })
    }
}

/// Core restarted-GMRES loop; always returns the best iterate together with
/// its relative residual and the iteration count, leaving the accept/reject
/// decision to the caller.
pub fn gmres_best_effort<F>(
    apply: F,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    restart: usize,
    max_iters: usize,
) -> (Vec<f64>, f64, usize)
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let bnorm = norm2(b).max(1.0);
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let mut total = 0usize;
    let m = restart.max(1).min(n.max(1));
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut prev_beta = f64::INFINITY;
    loop {
        let ax = apply(&x);
        let r0: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
        let beta = norm2(&r0);
        if best.as_ref().map_or(true, |(_, bb)| beta < *bb) {
            best = Some((x.clone(), beta));
        }
        // Stop on convergence, iteration budget, or a restart cycle that no
        // longer makes headway (round-off floor reached).
        let stalled = beta > 0.95 * prev_beta;
        if beta <= tol * bnorm || total >= max_iters || stalled {
            let (xb, bb) = best.unwrap();
            return (xb, bb / bnorm, total);
        }
        prev_beta = beta;
        // Arnoldi with modified Gram-Schmidt and Givens rotations.
        let mut v: Vec<Vec<f64>> = vec![r0.iter().map(|z| z / beta).collect()];
        let mut h = vec![vec![0.0f64; m]; m + 1];
        let mut cs = vec![0.0f64; m];
        let mut sn = vec![0.0f64; m];
        let mut g = vec![0.0f64; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            total += 1;
            let mut w = apply(&v[k]);
            for i in 0..=k {
                let hik: f64 = w.iter().zip(&v[i]).map(|(p, q)| p * q).sum();
                h[i][k] = hik;
                for (wj, vj) in w.iter_mut().zip(&v[i]) {
                    *wj -= hik * vj;
                }
            }
            let hk1 = norm2(&w);
            h[k + 1][k] = hk1;
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let denom = (h[k][k] * h[k][k] + hk1 * hk1).sqrt();
            if denom == 0.0 {
                k_used = k;
                break;
            }
            cs[k] = h[k][k] / denom;
            sn[k] = hk1 / denom;
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            if hk1 > 0.0 {
                v.push(w.iter().map(|z| z / hk1).collect());
            }
            if g[k + 1].abs() <= tol * bnorm || hk1 == 0.0 || total >= max_iters {
                break;
            }
        }
        // Back substitution for the least-squares coefficients.
        let mut y = vec![0.0f64; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        for i in 0..k_used {
            for (xj, vj) in x.iter_mut().zip(&v[i]) {
                *xj += y[i] * vj;
            }
        }
    }
}

/// Copies of the system with every row scaled to unit max magnitude. Row
/// scaling leaves the solution unchanged but makes the factorization's
/// backward error relative to each equation's own scale; saddle-point
/// assemblies mix momentum rows ~1/h^2 with mass rows ~1/h, and without
/// equilibration the small rows keep residuals orders above machine
/// precision no matter how the refinement iterates.
fn equilibrate_rows(a: &SparseMatrix, b: &[f64]) -> (SparseMatrix, Vec<f64>) {
    let mut scaled = a.clone();
    let mut bs = b.to_vec();
    for r in 0..a.n_rows {
        let lo = a.row_ptr[r];
        let hi = a.row_ptr[r + 1];
        let max = a.values[lo..hi]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if max > 0.0 && max != 1.0 {
            let s = 1.0 / max;
            for v in &mut scaled.values[lo..hi] {
                *v *= s;
            }
            bs[r] *= s;
        }
    }
    (scaled, bs)
}

/// Direct solve with residual verification, on the row-equilibrated system.
/// The factorization is reused for iterative refinement until the residual
/// of the original system stops improving; if the result still misses the
/// tolerance, refines with GMRES before giving up.
pub fn solve(a: &SparseMatrix, b: &[f64], opts: &SolveOptions) -> Result<Vec<f64>> {
    let bnorm = norm2(b).max(1.0);
    let (a_eq, b_eq) = equilibrate_rows(a, b);
    let fact = Factorized::new(&a_eq)?;
    let mut x = fact.solve_vec(&b_eq);
    let mut res = residual_norm(a, &x, b);
    for _ in 0..3 {
        if res <= 1e-14 * bnorm {
            break;
        }
        let ax = a_eq.matvec(&x);
        let r: Vec<f64> = b_eq.iter().zip(&ax).map(|(p, q)| p - q).collect();
        let dx = fact.solve_vec(&r);
        let candidate: Vec<f64> = x.iter().zip(&dx).map(|(xi, di)| xi + di).collect();
        let cres = residual_norm(a, &candidate, b);
        if cres >= res {
            break;
        }
        x = candidate;
        res = cres;
    }
    if res <= opts.residual_tol * bnorm {
        return Ok(x);
    }
    solve_gmres(
        a,
        b,
        Some(&x),
        opts.residual_tol,
        opts.gmres_restart,
        opts.gmres_max_iters,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    /// Dense Gaussian elimination with partial pivoting; oracle for the
    /// sparse solver on small systems.
    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a.iter().cloned().collect();
        let mut rhs = b.to_vec();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| {
                m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap()
            })?;
            if m[piv][col].abs() < 1e-14 {
                return None;
            }
            m.swap(col, piv);
            rhs.swap(col, piv);
            for row in col + 1..n {
                let f = m[row][col] / m[col][col];
                for k in col..n {
                    m[row][k] -= f * m[col][k];
                }
                rhs[row] -= f * rhs[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let mut s = rhs[row];
            for k in row + 1..n {
                s -= m[row][k] * x[k];
            }
            x[row] = s / m[row][row];
        }
        Some(x)
    }

    fn random_system(seed: u64, n: usize) -> (TripletList, Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut trips = TripletList::new(n, n);
        let mut dense = vec![vec![0.0; n]; n];
        for r in 0..n {
            // Diagonally dominant so the system is comfortably nonsingular.
            let d = 4.0 + rng.random::<f64>();
            trips.push(r, r, d);
            dense[r][r] += d;
            for _ in 0..3 {
                let c = rng.random_range(0..n);
                let v = rng.random_range(-1.0..1.0);
                trips.push(r, c, v);
                dense[r][c] += v;
            }
        }
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        (trips, dense, b)
    }

    #[test]
    fn direct_matches_dense_oracle() {
        for seed in 0..20u64 {
            let (trips, dense, b) = random_system(seed, 40);
            let a = trips.to_csr();
            let x = solve(&a, &b, &SolveOptions::default()).unwrap();
            let y = dense_solve(&dense, &b).unwrap();
            for (p, q) in x.iter().zip(&y) {
                assert!((p - q).abs() < 1e-9, "seed {seed}: {p} vs {q}");
            }
        }
    }

    #[test]
    fn gmres_matches_direct() {
        let (trips, _, b) = random_system(7, 60);
        let a = trips.to_csr();
        let xd = solve_direct(&a, &b).unwrap();
        let xg = solve_gmres(&a, &b, None, 1e-11, 60, 5000).unwrap();
        for (p, q) in xd.iter().zip(&xg) {
            assert!((p - q).abs() < 1e-8);
        }
    }

    #[test]
    fn duplicate_triplets_are_summed_and_zeros_dropped() {
        let mut trips = TripletList::new(2, 2);
        trips.push(0, 0, 1.5);
        trips.push(0, 0, 0.5);
        trips.push(0, 1, 1.0);
        trips.push(0, 1, -1.0);
        trips.push(1, 1, 3.0);
        let a = trips.to_csr();
        assert_eq!(a.nnz(), 2);
        assert_eq!(a.matvec(&[1.0, 1.0]), vec![2.0, 3.0]);
    }

    #[test]
    fn structurally_singular_matrix_reported() {
        let mut trips = TripletList::new(3, 3);
        trips.push(0, 0, 1.0);
        trips.push(1, 1, 1.0);
        // Row 2 cancels to nothing.
        trips.push(2, 2, 1.0);
        trips.push(2, 2, -1.0);
        let a = trips.to_csr();
        match solve_direct(&a, &[1.0, 1.0, 1.0]) {
            Err(Error::Singular(_)) => {}
            other => panic!("expected singularity error, got {other:?}"),
        }
    }

    #[test]
    fn mean_zero_gauge_fixes_nullspace() {
        // 1D Neumann Laplacian: singular until the mean-zero row is attached.
        let n = 8;
        let mut trips = TripletList::new(n, n);
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            let mut diag = 0.0;
            if i > 0 {
                trips.push(i, i - 1, -1.0);
                diag += 1.0;
            }
            if i + 1 < n {
                trips.push(i, i + 1, -1.0);
                diag += 1.0;
            }
            trips.push(i, i, diag);
            rhs[i] = (i as f64) - (n as f64 - 1.0) / 2.0;
        }
        let weights: Vec<(usize, f64)> = (0..n).map(|i| (i, 1.0)).collect();
        attach_mean_zero_gauge(&mut trips, &mut rhs, &weights);
        let a = trips.to_csr();
        let x = solve(&a, &rhs, &SolveOptions::default()).unwrap();
        let mean: f64 = x[..n].iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-10);
        let res = {
            let ax = a.matvec(&x);
            ax.iter()
                .zip(&rhs)
                .map(|(p, q)| (p - q).abs())
                .fold(0.0f64, f64::max)
        };
        assert!(res < 1e-10);
    }

    #[test]
    fn matrix_market_roundtrip_shape() {
        let mut trips = TripletList::new(2, 3);
        trips.push(0, 0, 1.0);
        trips.push(1, 2, -2.5);
        let a = trips.to_csr();
        let mut buf = Vec::new();
        a.write_matrix_market(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("%%MatrixMarket"));
        assert_eq!(lines.next().unwrap(), "2 3 2");
        assert!(text.contains("1 1 "));
        assert!(text.contains("2 3 "));
    }
}
