//! Per-step transition operators. Each model class contributes one kernel:
//! expm(Q dt) for continuous-time chains, exp((Q - Lambda) y) Lambda for
//! Markov-modulated Poisson events, and covariate-driven transition matrices
//! for inhomogeneous discrete-time chains.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{expm, norm_1, tpm_from_eta, GeneratorMatrix, TransitionMatrix};

/// Largest rate-time norm the kernels will exponentiate. Beyond this the
/// scaling-and-squaring in expm needs so many squarings that slow rates
/// round away entirely (their scaled diagonals vanish against 1), silently
/// dropping survival penalties. Real parameter scales sit many orders below
/// this; an optimizer probing such values gets an error, which the fitting
/// layer treats as a penalized point.
const MAX_KERNEL_NORM: f64 = 1e8;

fn check_kernel_norm(m: &DMatrix<f64>) -> Result<()> {
    let norm = norm_1(m);
    if norm > MAX_KERNEL_NORM {
        return Err(Error::invalid(format!(
            "rate-time product norm {norm:.3e} is too stiff to exponentiate reliably"
        )));
    }
    Ok(())
}

/// Which off-diagonal generator entries are free parameters. Masked entries
/// are structural zeros (impossible transitions); the diagonal is never free.
/// Rows with no free entry are absorbing.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMask {
    n: usize,
    free: Vec<bool>,
}

impl GeneratorMask {
    /// All off-diagonal transitions free.
    pub fn full(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("generator mask needs at least one state"));
        }
        let mut free = vec![true; n * n];
        for i in 0..n {
            free[i * n + i] = false;
        }
        Ok(GeneratorMask { n, free })
    }

    /// Only the listed (from, to) transitions are free. Indices are 0-based.
    pub fn from_free_pairs(n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("generator mask needs at least one state"));
        }
        let mut free = vec![false; n * n];
        for &(i, j) in pairs {
            if i >= n || j >= n {
                return Err(Error::invalid(format!(
                    "transition ({i},{j}) out of range for {n} states"
                )));
            }
            if i == j {
                return Err(Error::invalid(format!(
                    "diagonal entry ({i},{i}) cannot be a free transition"
                )));
            }
            free[i * n + j] = true;
        }
        Ok(GeneratorMask { n, free })
    }

    /// All off-diagonal transitions free except the listed ones.
    pub fn from_blocked_pairs(n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut mask = GeneratorMask::full(n)?;
        for &(i, j) in pairs {
            if i >= n || j >= n {
                return Err(Error::invalid(format!(
                    "transition ({i},{j}) out of range for {n} states"
                )));
            }
            mask.free[i * n + j] = false;
        }
        Ok(mask)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_free(&self, i: usize, j: usize) -> bool {
        self.free[i * self.n + j]
    }

    /// Number of free rate parameters.
    pub fn n_free(&self) -> usize {
        self.free.iter().filter(|&&b| b).count()
    }

    /// Free (from, to) pairs in row-major order; this is the parameter order
    /// used by `generator_from_params`.
    pub fn free_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_free());
        for i in 0..self.n {
            for j in 0..self.n {
                if self.free[i * self.n + j] {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Builds a generator from log transition rates. `log_rates` fills the free
/// off-diagonal entries in row-major order; masked entries stay zero and each
/// diagonal becomes the negative row sum.
pub fn generator_from_params(mask: &GeneratorMask, log_rates: &[f64]) -> Result<GeneratorMatrix> {
    if log_rates.len() != mask.n_free() {
        return Err(Error::invalid(format!(
            "expected {} log rates for the mask, got {}",
            mask.n_free(),
            log_rates.len()
        )));
    }
    if log_rates.iter().any(|x| x.is_nan()) {
        return Err(Error::invalid("log rates must not be NaN"));
    }
    let n = mask.n();
    let mut q = DMatrix::<f64>::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        let mut off_sum = 0.0;
        for j in 0..n {
            if mask.is_free(i, j) {
                let r = log_rates[k].exp();
                q[(i, j)] = r;
                off_sum += r;
                k += 1;
            }
        }
        q[(i, i)] = -off_sum;
    }
    GeneratorMatrix::new(q)
}

/// Transition matrix over an elapsed time: expm(Q dt) with roundoff-level
/// negative entries clamped to zero.
pub fn omega_cthmm(q: &GeneratorMatrix, dt: f64) -> Result<TransitionMatrix> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!(
            "elapsed time must be positive, got {dt}"
        )));
    }
    let m = q.as_matrix() * dt;
    check_kernel_norm(&m)?;
    let e = expm(&m)?;
    TransitionMatrix::new(e)
}

/// One Markov-modulated Poisson step: exp((Q - Lambda) y), optionally
/// post-multiplied by Lambda = diag(rates) to absorb the event intensity at
/// the end of the waiting time. The result is substochastic, not a
/// transition matrix: entry (i, j) is the probability of moving from i to j
/// with no arrival in (0, y) (times the arrival rate at j when the factor is
/// on).
pub fn omega_mmpp(
    q: &GeneratorMatrix,
    rates: &[f64],
    y: f64,
    with_rate_factor: bool,
) -> Result<DMatrix<f64>> {
    let n = q.n();
    if rates.len() != n {
        return Err(Error::invalid(format!(
            "expected {n} arrival rates, got {}",
            rates.len()
        )));
    }
    if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::invalid("arrival rates must be finite and nonnegative"));
    }
    if !(y > 0.0 && y.is_finite()) {
        return Err(Error::invalid(format!(
            "waiting time must be positive, got {y}"
        )));
    }
    let mut a = q.as_matrix().clone();
    for i in 0..n {
        a[(i, i)] -= rates[i];
    }
    a *= y;
    check_kernel_norm(&a)?;
    let mut e = expm(&a)?;
    if with_rate_factor {
        for j in 0..n {
            let mut col = e.column_mut(j);
            col *= rates[j];
        }
    }
    Ok(e)
}

/// Transition matrices for a covariate-driven discrete-time chain. `beta` has
/// one row per off-diagonal transition in row-major (from, to) order and one
/// column per design column; `design` has one row per time step (the first
/// column is conventionally the intercept). Row t of the output is
/// softmax-linked from eta_ij(t) = beta_(i,j) . design_t.
pub fn hmm_tpm_sequence(
    beta: &DMatrix<f64>,
    design: &DMatrix<f64>,
    n_states: usize,
) -> Result<Vec<TransitionMatrix>> {
    if n_states < 2 {
        return Err(Error::invalid("need at least two states"));
    }
    let n_off = n_states * (n_states - 1);
    if beta.nrows() != n_off {
        return Err(Error::invalid(format!(
            "beta has {} rows, expected {} off-diagonal transitions",
            beta.nrows(),
            n_off
        )));
    }
    if beta.ncols() != design.ncols() {
        return Err(Error::invalid(format!(
            "beta has {} columns but the design matrix has {}",
            beta.ncols(),
            design.ncols()
        )));
    }
    let mut out = Vec::with_capacity(design.nrows());
    let mut eta = DMatrix::<f64>::zeros(n_states, n_states);
    for t in 0..design.nrows() {
        let mut k = 0;
        for i in 0..n_states {
            for j in 0..n_states {
                if i == j {
                    eta[(i, j)] = 0.0;
                    continue;
                }
                let mut v = 0.0;
                for c in 0..beta.ncols() {
                    v += beta[(k, c)] * design[(t, c)];
                }
                eta[(i, j)] = v;
                k += 1;
            }
        }
        out.push(tpm_from_eta(&eta)?);
    }
    Ok(out)
}
