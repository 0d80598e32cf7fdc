//! Midpoint discretization of scalar autoregressive state processes. A
//! continuous state space is cut into m cells; transition kernels become
//! m x m matrices whose rows hold cell width times the transition density at
//! the midpoints. Rows sum to slightly less than one, the defect being the
//! mass that escaped the grid; renormalization is optional and off by default.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{GeneratorMatrix, ProbabilityVector};

/// Equally spaced midpoint grid over (lower, upper).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    lower: f64,
    upper: f64,
    h: f64,
    mids: Vec<f64>,
}

/// Gaussian AR(1): s_t = mu + phi (s_{t-1} - mu) + sigma eps_t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AR1Params {
    pub phi: f64,
    pub mu: f64,
    pub sigma: f64,
}

/// Ornstein-Uhlenbeck diffusion: dS = theta (mu - S) dt + sigma dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OUParams {
    pub theta: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl Grid {
    pub fn new(lower: f64, upper: f64, m: usize) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite()) {
            return Err(Error::invalid("grid bounds must be finite"));
        }
        if upper <= lower {
            return Err(Error::invalid(format!(
                "grid upper bound {upper} must exceed lower bound {lower}"
            )));
        }
        if m < 2 {
            return Err(Error::invalid(format!("grid needs at least 2 cells, got {m}")));
        }
        let h = (upper - lower) / m as f64;
        let mids = (0..m).map(|i| lower + (i as f64 + 0.5) * h).collect();
        Ok(Grid { lower, upper, h, mids })
    }

    pub fn m(&self) -> usize {
        self.mids.len()
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn midpoints(&self) -> &[f64] {
        &self.mids
    }
}

impl AR1Params {
    pub fn validate(self) -> Result<()> {
        if !(self.phi.is_finite() && self.phi.abs() < 1.0) {
            return Err(Error::invalid(format!(
                "AR(1) phi must lie in (-1, 1), got {}",
                self.phi
            )));
        }
        if !self.mu.is_finite() {
            return Err(Error::invalid("AR(1) mu must be finite"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "AR(1) sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn stationary_var(&self) -> f64 {
        self.sigma * self.sigma / (1.0 - self.phi * self.phi)
    }
}

impl OUParams {
    pub fn validate(self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::invalid(format!(
                "OU theta must be positive, got {}",
                self.theta
            )));
        }
        if !self.mu.is_finite() {
            return Err(Error::invalid("OU mu must be finite"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "OU sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn stationary_var(&self) -> f64 {
        self.sigma * self.sigma / (2.0 * self.theta)
    }

    /// E[S_{t+dt} | S_t = s].
    pub fn conditional_mean(&self, s: f64, dt: f64) -> f64 {
        let decay = (-self.theta * dt).exp();
        decay * s + self.mu * (1.0 - decay)
    }

    /// Var[S_{t+dt} | S_t].
    pub fn conditional_var(&self, dt: f64) -> f64 {
        self.stationary_var() * (1.0 - (-2.0 * self.theta * dt).exp())
    }
}

/// Writes h * N(mid_j; mean, var) into `out`. The exponent is skipped where
/// it would underflow to zero anyway.
fn gaussian_row(mids: &[f64], mean: f64, var: f64, h: f64, out: &mut [f64]) {
    let inv_sd = 1.0 / var.sqrt();
    let scale = h * inv_sd / (2.0 * std::f64::consts::PI).sqrt();
    for (o, &b) in out.iter_mut().zip(mids.iter()) {
        let z = (b - mean) * inv_sd;
        let e = 0.5 * z * z;
        *o = if e > 745.0 { 0.0 } else { scale * (-e).exp() };
    }
}

/// One-step transition matrix of the discretized AR(1): entry (i, j) is
/// h * N(b_j; mu + phi (b_i - mu), sigma^2). Rows sum to at most 1; the
/// deficit is truncation mass outside the grid.
pub fn ar1_tpm(grid: &Grid, p: &AR1Params) -> Result<DMatrix<f64>> {
    p.validate()?;
    let m = grid.m();
    let mut buf = vec![0.0; m * m];
    let var = p.sigma * p.sigma;
    for i in 0..m {
        let mean = p.mu + p.phi * (grid.mids[i] - p.mu);
        gaussian_row(&grid.mids, mean, var, grid.h, &mut buf[i * m..(i + 1) * m]);
    }
    Ok(DMatrix::from_row_slice(m, m, &buf))
}

/// Transition matrix of the discretized OU process over a step of length
/// `dt`, using the exact Gaussian transition density.
pub fn ou_tpm(grid: &Grid, p: &OUParams, dt: f64) -> Result<DMatrix<f64>> {
    p.validate()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("OU step must be positive, got {dt}")));
    }
    let m = grid.m();
    let mut buf = vec![0.0; m * m];
    let var = p.conditional_var(dt);
    let decay = (-p.theta * dt).exp();
    for i in 0..m {
        let mean = decay * grid.mids[i] + p.mu * (1.0 - decay);
        gaussian_row(&grid.mids, mean, var, grid.h, &mut buf[i * m..(i + 1) * m]);
    }
    Ok(DMatrix::from_row_slice(m, m, &buf))
}

fn normalized_initial(grid: &Grid, mean: f64, var: f64) -> Result<ProbabilityVector> {
    let m = grid.m();
    let mut w = vec![0.0; m];
    gaussian_row(&grid.mids, mean, var, grid.h, &mut w);
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid(
            "stationary density has no mass on the grid; widen the bounds",
        ));
    }
    let v = DVector::from_iterator(m, w.into_iter().map(|x| x / total));
    ProbabilityVector::new(v)
}

/// Stationary distribution of the discretized AR(1): cell weights
/// proportional to h * N(b_i; mu, sigma^2 / (1 - phi^2)), normalized.
pub fn ar1_initial(grid: &Grid, p: &AR1Params) -> Result<ProbabilityVector> {
    p.validate()?;
    normalized_initial(grid, p.mu, p.stationary_var())
}

/// Stationary distribution of the discretized OU process: cell weights
/// proportional to h * N(b_i; mu, sigma^2 / (2 theta)), normalized.
pub fn ou_initial(grid: &Grid, p: &OUParams) -> Result<ProbabilityVector> {
    p.validate()?;
    normalized_initial(grid, p.mu, p.stationary_var())
}

/// Recovers a generator from a transition matrix over a short step:
/// off-diagonals are gamma_ij / dt_star, each diagonal is reset to the
/// negative off-diagonal row sum so the result is a valid generator.
pub fn generator_approx(gamma_star: &DMatrix<f64>, dt_star: f64) -> Result<GeneratorMatrix> {
    if !gamma_star.is_square() {
        return Err(Error::invalid(format!(
            "transition matrix must be square, got {}x{}",
            gamma_star.nrows(),
            gamma_star.ncols()
        )));
    }
    if !(dt_star > 0.0 && dt_star.is_finite()) {
        return Err(Error::invalid(format!(
            "generator reconstruction step must be positive, got {dt_star}"
        )));
    }
    let n = gamma_star.nrows();
    let mut q = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let mut off_sum = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            let g = gamma_star[(i, j)];
            if !g.is_finite() || g < 0.0 {
                return Err(Error::invalid(format!(
                    "transition matrix entry ({i},{j}) = {g} is not a probability"
                )));
            }
            let r = g / dt_star;
            q[(i, j)] = r;
            off_sum += r;
        }
        q[(i, i)] = -off_sum;
    }
    GeneratorMatrix::new(q)
}

/// Divides each row by its sum. Rows with zero mass are left untouched.
pub fn renormalize_rows(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        let s: f64 = m.row(i).iter().sum();
        if s > 0.0 {
            let mut row = m.row_mut(i);
            row /= s;
        }
    }
}

/// Largest row-sum deficit: how much probability mass the grid truncates.
pub fn max_truncation_mass(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        let s: f64 = m.row(i).iter().sum();
        worst = worst.max(1.0 - s);
    }
    worst
}
