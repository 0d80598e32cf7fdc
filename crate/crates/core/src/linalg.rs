//! Dense linear-algebra primitives shared by every model class: validated
//! stochastic/generator matrix types, the matrix exponential, stationary
//! distributions, and the inverse multinomial-logit link for transition rows.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Row sums of stochastic objects may drift by this much before we reject.
pub const ROW_SUM_TOL: f64 = 1e-10;
/// Entries this far below zero are treated as roundoff and clamped to zero.
pub const ENTRY_CLAMP: f64 = 1e-12;
/// Condition-number estimate above which a stationary system is rejected.
const COND_LIMIT: f64 = 1e12;

/// Row-stochastic matrix. Entries in [0, 1], rows sum to 1 within `ROW_SUM_TOL`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix(DMatrix<f64>);

/// Infinitesimal generator. Off-diagonals nonnegative, rows sum to 0 within
/// `ROW_SUM_TOL`. Absorbing rows (all zeros) are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix(DMatrix<f64>);

/// Probability vector. Entries in [0, 1], sums to 1 within `ROW_SUM_TOL`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(DVector<f64>);

impl TransitionMatrix {
    /// Validates and stores a row-stochastic matrix. Entries in
    /// (-ENTRY_CLAMP, 0) and (1, 1 + ENTRY_CLAMP) are clamped to the boundary;
    /// anything further out is rejected.
    pub fn new(mut m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::invalid(format!(
                "transition matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        for e in m.iter_mut() {
            if !e.is_finite() {
                return Err(Error::invalid("transition matrix has non-finite entry"));
            }
            if *e < 0.0 {
                if *e < -ENTRY_CLAMP {
                    return Err(Error::invalid(format!(
                        "transition matrix entry {e} is negative"
                    )));
                }
                *e = 0.0;
            } else if *e > 1.0 {
                if *e > 1.0 + ENTRY_CLAMP {
                    return Err(Error::invalid(format!(
                        "transition matrix entry {e} exceeds one"
                    )));
                }
                *e = 1.0;
            }
        }
        for i in 0..m.nrows() {
            let s: f64 = m.row(i).iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!(
                    "transition matrix row {i} sums to {s}, expected 1"
                )));
            }
        }
        Ok(TransitionMatrix(m))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

impl GeneratorMatrix {
    pub fn new(mut q: DMatrix<f64>) -> Result<Self> {
        if !q.is_square() {
            return Err(Error::invalid(format!(
                "generator must be square, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        let n = q.nrows();
        for i in 0..n {
            for j in 0..n {
                let e = q[(i, j)];
                if !e.is_finite() {
                    return Err(Error::invalid("generator has non-finite entry"));
                }
                if i != j && e < 0.0 {
                    if e < -ENTRY_CLAMP {
                        return Err(Error::invalid(format!(
                            "generator off-diagonal ({i},{j}) is negative: {e}"
                        )));
                    }
                    q[(i, j)] = 0.0;
                }
            }
        }
        for i in 0..n {
            let s: f64 = q.row(i).iter().sum();
            if s.abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!(
                    "generator row {i} sums to {s}, expected 0"
                )));
            }
        }
        Ok(GeneratorMatrix(q))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

impl ProbabilityVector {
    pub fn new(mut v: DVector<f64>) -> Result<Self> {
        for e in v.iter_mut() {
            if !e.is_finite() {
                return Err(Error::invalid("probability vector has non-finite entry"));
            }
            if *e < 0.0 {
                if *e < -ENTRY_CLAMP {
                    return Err(Error::invalid(format!(
                        "probability vector entry {e} is negative"
                    )));
                }
                *e = 0.0;
            }
        }
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::invalid(format!(
                "probability vector sums to {s}, expected 1"
            )));
        }
        Ok(ProbabilityVector(v))
    }

    pub fn n(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

/// Maximum absolute column sum.
pub fn norm_1(a: &DMatrix<f64>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..a.ncols() {
        let s: f64 = a.column(j).iter().map(|x| x.abs()).sum();
        best = best.max(s);
    }
    best
}

// Pade approximant coefficients and the 1-norm bounds under which each degree
// keeps the backward error below unit roundoff.
const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const B9: [f64; 10] = [
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
const B13: [f64; 14] = [
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

const THETA_3: f64 = 1.495585217958292e-2;
const THETA_5: f64 = 2.539398330063230e-1;
const THETA_7: f64 = 9.504178996162932e-1;
const THETA_9: f64 = 2.097847961257068;
const THETA_13: f64 = 5.371920351148152;

/// Solves (V - U) X = (V + U), the rational reconstruction shared by all
/// Pade degrees.
fn pade_solve(u: DMatrix<f64>, v: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lhs = &v - &u;
    let rhs = v + u;
    lhs.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::invalid("matrix exponential: Pade denominator is singular"))
}

fn pade_low(a: &DMatrix<f64>, b: &[f64]) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    // Horner in A^2: odd coefficients feed U = A * (...), even feed V.
    let mut u_poly = DMatrix::<f64>::zeros(n, n);
    let mut v_poly = DMatrix::<f64>::zeros(n, n);
    let mut pow = id.clone();
    let mut k = 0;
    loop {
        v_poly += &pow * b[k];
        if k + 1 < b.len() {
            u_poly += &pow * b[k + 1];
        }
        k += 2;
        if k >= b.len() {
            break;
        }
        pow = &pow * &a2;
    }
    let u = a * u_poly;
    pade_solve(u, v_poly)
}

fn pade_13(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let b = &B13;
    let u_hi = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = a * (u_hi + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1]);
    let v_hi = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = v_hi + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    pade_solve(u, v)
}

/// Matrix exponential by scaling and squaring with a degree-13 Pade
/// approximant (lower degrees when the norm permits). Accepts any square
/// matrix with finite entries.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::invalid(format!(
            "matrix exponential needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(
            "matrix exponential input has non-finite entry",
        ));
    }
    let norm = norm_1(a);
    if norm <= THETA_3 {
        return pade_low(a, &B3);
    }
    if norm <= THETA_5 {
        return pade_low(a, &B5);
    }
    if norm <= THETA_7 {
        return pade_low(a, &B7);
    }
    if norm <= THETA_9 {
        return pade_low(a, &B9);
    }
    let mut s = 0u32;
    let mut scaled = a.clone();
    if norm > THETA_13 {
        s = (norm / THETA_13).log2().ceil() as u32;
        scaled /= 2f64.powi(s as i32);
    }
    let mut f = pade_13(&scaled)?;
    for _ in 0..s {
        f = &f * &f;
    }
    Ok(f)
}

/// Left stationary distribution of a transition matrix: the probability row
/// vector with delta * Gamma = delta. One column of (Gamma - I) is replaced by
/// the normalization constraint and the system solved by LU with partial
/// pivoting; an ill-conditioned system is reported as non-unique.
pub fn stationary_discrete(tpm: &TransitionMatrix) -> Result<ProbabilityVector> {
    let n = tpm.n();
    let mut m = tpm.as_matrix() - DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        m[(i, n - 1)] = 1.0;
    }
    solve_stationary(m)
}

/// Stationary distribution of a generator: delta * Q = 0 with sum(delta) = 1.
pub fn stationary_continuous(q: &GeneratorMatrix) -> Result<ProbabilityVector> {
    let n = q.n();
    let mut m = q.as_matrix().clone();
    for i in 0..n {
        m[(i, n - 1)] = 1.0;
    }
    solve_stationary(m)
}

/// `m` already carries the normalization column; solves x^T m = e_n^T.
fn solve_stationary(m: DMatrix<f64>) -> Result<ProbabilityVector> {
    let n = m.nrows();
    let a = m.transpose();
    let lu = a.clone().lu();
    let inv = lu
        .try_inverse()
        .ok_or_else(|| Error::NonUniqueStationary("singular linear system".into()))?;
    let cond = norm_1(&a) * norm_1(&inv);
    if !cond.is_finite() || cond > COND_LIMIT {
        return Err(Error::NonUniqueStationary(format!(
            "condition estimate {cond:.3e} exceeds {COND_LIMIT:.0e}"
        )));
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let mut x = lu
        .solve(&b)
        .ok_or_else(|| Error::NonUniqueStationary("singular linear system".into()))?;
    // One step of iterative refinement keeps the residual near roundoff.
    let r = &b - &a * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    let total: f64 = x.iter().sum();
    if !total.is_finite() || total.abs() < f64::MIN_POSITIVE {
        return Err(Error::NonUniqueStationary(
            "solution does not normalize".into(),
        ));
    }
    x /= total;
    ProbabilityVector::new(x)
}

/// Numerically stable softmax. Shift-invariant: adding a constant to every
/// entry leaves the result unchanged up to roundoff.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Inverse multinomial-logit link for transition rows. `eta` holds the
/// unconstrained off-diagonal predictors with an exactly-zero diagonal (the
/// diagonal is the reference category); each row is mapped through a softmax.
pub fn tpm_from_eta(eta: &DMatrix<f64>) -> Result<TransitionMatrix> {
    if !eta.is_square() {
        return Err(Error::invalid(format!(
            "eta must be square, got {}x{}",
            eta.nrows(),
            eta.ncols()
        )));
    }
    let n = eta.nrows();
    for i in 0..n {
        if eta[(i, i)] != 0.0 {
            return Err(Error::invalid(format!(
                "eta diagonal entry ({i},{i}) must be exactly zero, got {}",
                eta[(i, i)]
            )));
        }
    }
    if eta.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("eta has non-finite entry"));
    }
    let mut out = DMatrix::<f64>::zeros(n, n);
    let mut row = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            row[j] = eta[(i, j)];
        }
        let p = softmax(&row);
        for j in 0..n {
            out[(i, j)] = p[j];
        }
    }
    TransitionMatrix::new(out)
}
