//! Small dense linear-algebra helpers shared by the state-space code.
//!
//! Everything here works on `nalgebra` dynamic matrices; the state dimensions
//! involved are small (tens), so clarity wins over blocking tricks except in
//! the few hot paths called once per time step.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Smallest jitter, relative to `trace / dim`, tried before giving up.
pub const JITTER_START: f64 = 1e-10;
/// Largest jitter, relative to `trace / dim`.
pub const JITTER_MAX: f64 = 1e-4;

/// Replace `m` with `(m + m^T) / 2` in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    let v = m.as_mut_slice();
    for j in 0..n {
        for i in (j + 1)..n {
            let x = 0.5 * (v[j * n + i] + v[i * n + j]);
            v[j * n + i] = x;
            v[i * n + j] = x;
        }
    }
}

/// `H P` for symmetric `P`, skipping the zero entries of `H`: row `i` of the
/// result is `Σ_c H[i, c] · P[:, c]^T`, reading contiguous columns of `P`.
pub fn sparse_mul_sym(h: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let (q, n) = h.shape();
    let pv = p.as_slice();
    let mut out = DMatrix::zeros(q, n);
    for i in 0..q {
        for c in 0..n {
            let w = h[(i, c)];
            if w == 0.0 {
                continue;
            }
            let col = &pv[c * n..(c + 1) * n];
            for (j, &x) in col.iter().enumerate() {
                out[(i, j)] += w * x;
            }
        }
    }
    out
}

pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

/// Cholesky factorisation with the jitter ladder: no jitter first, then
/// `1e-10 * trace/dim` escalating by 10x up to `1e-4 * trace/dim`.
pub fn cholesky_jitter(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let scale = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * 1.000_001 {
        let mut j = m.clone();
        for i in 0..n {
            j[(i, i)] += rel * scale;
        }
        if let Some(c) = Cholesky::new(j) {
            return Ok(c);
        }
        rel *= 10.0;
    }
    Err(Error::Cholesky { dim: n })
}

/// Lower-triangular Cholesky factor, with jitter as needed.
pub fn cholesky_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(cholesky_jitter(m)?.l())
}

/// Solve `S X = B` for symmetric `S`. Cholesky when `S` is positive definite,
/// LU otherwise (EP sites may make `S` indefinite). `None` when singular.
pub fn solve_symmetric(s: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(c) = Cholesky::new(s.clone()) {
        return Some(c.solve(b));
    }
    let lu = s.clone().lu();
    let x = lu.solve(b)?;
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Inverse of a symmetric matrix; `None` when singular or non-finite.
pub fn inverse_symmetric(s: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = s.nrows();
    if n == 1 {
        let v = s[(0, 0)];
        return if v != 0.0 && v.is_finite() {
            Some(DMatrix::from_element(1, 1, 1.0 / v))
        } else {
            None
        };
    }
    solve_symmetric(s, &DMatrix::identity(n, n)).map(symmetrized)
}

/// `log |M|` for a positive-definite `M`, via the jittered Cholesky factor.
pub fn log_det_pd(m: &DMatrix<f64>) -> Result<f64> {
    let c = cholesky_jitter(m)?;
    Ok(2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Block-diagonal stacking of square or rectangular blocks.
pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

// Padé coefficients b_0..b_13 and the 1-norm thresholds of Higham (2005).
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA: [f64; 5] = [
    1.495585217958292e-2,
    2.539398330063230e-1,
    9.504178996162932e-1,
    2.097847961257068e0,
    5.371920351148152e0,
];

fn pade_low(a: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    // even powers I, A^2, A^4, ...
    let mut pow = id.clone();
    let mut u = DMatrix::zeros(n, n);
    let mut v = DMatrix::zeros(n, n);
    let m = b.len() - 1;
    let mut k = 0;
    while k <= m {
        v += &pow * b[k];
        if k + 1 <= m {
            u += &pow * b[k + 1];
        }
        pow = &pow * &a2;
        k += 2;
    }
    (a * u, v)
}

fn pade13(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let b = &PADE13;
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u = a * (&a6 * inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1]);
    let inner_v = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    (u, v)
}

/// Matrix exponential by scaling and squaring with a Padé approximant
/// (degree 3..13 chosen from the 1-norm, Higham 2005).
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm requires a square matrix");
    if n == 0 {
        return a.clone();
    }
    let norm = one_norm(a);
    if norm == 0.0 {
        return DMatrix::identity(n, n);
    }
    let (u, v, squarings) = if norm <= THETA[0] {
        let (u, v) = pade_low(a, &PADE3);
        (u, v, 0)
    } else if norm <= THETA[1] {
        let (u, v) = pade_low(a, &PADE5);
        (u, v, 0)
    } else if norm <= THETA[2] {
        let (u, v) = pade_low(a, &PADE7);
        (u, v, 0)
    } else if norm <= THETA[3] {
        let (u, v) = pade_low(a, &PADE9);
        (u, v, 0)
    } else {
        let s = ((norm / THETA[4]).log2().ceil()).max(0.0) as i32;
        let scaled = a / 2f64.powi(s);
        let (u, v) = pade13(&scaled);
        (u, v, s)
    };
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q.lu().solve(&p).expect("Padé denominator is nonsingular");
    for _ in 0..squarings {
        r = &r * &r;
    }
    r
}

/// Solve the continuous Lyapunov equation `F P + P F^T + N = 0` through its
/// Kronecker-vectorised form. Requires `F` stable (no eigenvalue pair summing
/// to zero).
pub fn solve_lyapunov(f: &DMatrix<f64>, noise: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let s = f.nrows();
    let id = DMatrix::<f64>::identity(s, s);
    // vec(F P) = (I ⊗ F) vec(P), vec(P F^T) = (F ⊗ I) vec(P) for column-major vec.
    let op = id.kronecker(f) + f.kronecker(&id);
    let rhs = DVector::from_iterator(s * s, noise.iter().map(|v| -v));
    let sol = op.lu().solve(&rhs)?;
    let p = DMatrix::from_column_slice(s, s, sol.as_slice());
    Some(symmetrized(p))
}

/// `true` when `m` is symmetric positive semi-definite up to `tol` (relative
/// to the largest diagonal entry).
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    let scale = m.diagonal().iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1.0);
    let eig = symmetrized(m.clone()).symmetric_eigenvalues();
    eig.iter().all(|&l| l >= -tol * scale)
}
