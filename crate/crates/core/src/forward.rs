//! Scaled forward recursion, most-likely-path decoding, and forecast
//! propagation. Every model class reduces to the same recursion once its
//! per-step kernel and emission diagonal are in hand, so this module is
//! deliberately ignorant of where those come from.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::ProbabilityVector;

/// Per-step transition kernels for observations 2..=T. `at(tau)` yields the
/// kernel applied between observations tau-1 and tau. Kernels need not be
/// row-stochastic (point-process kernels are substochastic), only
/// nonnegative.
pub enum Omegas<'a> {
    /// One kernel shared by every step (homogeneous chains).
    Constant(&'a DMatrix<f64>),
    /// One kernel per step; index tau-2 serves step tau.
    PerStep(&'a [DMatrix<f64>]),
    /// Kernels built on demand, for models where materializing all steps
    /// would dominate memory (large grids, long irregular time series).
    Lazy(&'a dyn Fn(usize) -> Result<DMatrix<f64>>),
}

impl Omegas<'_> {
    pub fn at(&self, tau: usize) -> Result<Cow<'_, DMatrix<f64>>> {
        debug_assert!(tau >= 2);
        match self {
            Omegas::Constant(m) => Ok(Cow::Borrowed(*m)),
            Omegas::PerStep(v) => v.get(tau - 2).map(Cow::Borrowed).ok_or_else(|| {
                Error::invalid(format!(
                    "no transition kernel for step {tau}; {} were supplied",
                    v.len()
                ))
            }),
            Omegas::Lazy(f) => f(tau).map(Cow::Owned),
        }
    }
}

/// One scaled forward recursion in progress. Holds the running log
/// likelihood and the filtered state distribution; memory is O(m) regardless
/// of sequence length, which is what makes rolling forecasts over thousands
/// of origins affordable.
pub struct ForwardPass {
    phi: DVector<f64>,
    scratch: DVector<f64>,
    loglik: f64,
    t: usize,
}

impl ForwardPass {
    /// Absorb the first observation: phi ~ delta .* p1.
    pub fn start(delta: &ProbabilityVector, p1: &[f64]) -> Result<Self> {
        let n = delta.n();
        if p1.len() != n {
            return Err(Error::invalid(format!(
                "emission diagonal has {} entries for {n} states",
                p1.len()
            )));
        }
        let mut phi = DVector::from_fn(n, |i, _| delta.as_vector()[i] * p1[i]);
        let sum: f64 = phi.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::ZeroLikelihood { tau: 1 });
        }
        phi /= sum;
        Ok(ForwardPass {
            scratch: DVector::zeros(n),
            phi,
            loglik: sum.ln(),
            t: 1,
        })
    }

    /// Absorb the next observation: phi ~ (phi' Omega)' .* p.
    pub fn step(&mut self, omega: &DMatrix<f64>, p: &[f64]) -> Result<()> {
        let n = self.phi.len();
        if omega.nrows() != n || omega.ncols() != n {
            return Err(Error::invalid(format!(
                "transition kernel is {}x{} for {n} states",
                omega.nrows(),
                omega.ncols()
            )));
        }
        if p.len() != n {
            return Err(Error::invalid(format!(
                "emission diagonal has {} entries for {n} states",
                p.len()
            )));
        }
        self.scratch.gemv_tr(1.0, omega, &self.phi, 0.0);
        let mut sum = 0.0;
        for (v, &pi) in self.scratch.iter_mut().zip(p.iter()) {
            *v *= pi;
            sum += *v;
        }
        self.t += 1;
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::ZeroLikelihood { tau: self.t });
        }
        std::mem::swap(&mut self.phi, &mut self.scratch);
        self.phi /= sum;
        self.loglik += sum.ln();
        Ok(())
    }

    /// Accumulated log likelihood of the observations absorbed so far.
    pub fn log_likelihood(&self) -> f64 {
        self.loglik
    }

    /// Filtered state distribution P(S_t = i | x_1..x_t).
    pub fn state_probs(&self) -> &DVector<f64> {
        &self.phi
    }

    /// Number of observations absorbed.
    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }
}

/// Log likelihood of a whole sequence. `diag_at(tau)` returns the emission
/// diagonal of observation tau (1-based).
pub fn log_likelihood(
    delta: &ProbabilityVector,
    omegas: &Omegas<'_>,
    diag_at: &mut dyn FnMut(usize) -> Result<Vec<f64>>,
    t_len: usize,
) -> Result<f64> {
    if t_len == 0 {
        return Err(Error::invalid("empty observation sequence"));
    }
    let mut pass = ForwardPass::start(delta, &diag_at(1)?)?;
    for tau in 2..=t_len {
        pass.step(omegas.at(tau)?.as_ref(), &diag_at(tau)?)?;
    }
    Ok(pass.log_likelihood())
}

/// Most likely state path and its log joint density.
pub struct ViterbiPath {
    /// 0-based state indices, one per observation.
    pub states: Vec<usize>,
    /// ln p(path, observations); never exceeds the log likelihood.
    pub log_joint: f64,
}

/// Log-space most-likely-path decoding. `ln_diag_at(tau)` returns log
/// emission densities. Ties resolve to the lowest state index.
pub fn viterbi(
    delta: &ProbabilityVector,
    omegas: &Omegas<'_>,
    ln_diag_at: &mut dyn FnMut(usize) -> Result<Vec<f64>>,
    t_len: usize,
) -> Result<ViterbiPath> {
    if t_len == 0 {
        return Err(Error::invalid("empty observation sequence"));
    }
    let n = delta.n();
    let check = |v: &[f64], tau: usize| -> Result<()> {
        if v.len() != n {
            return Err(Error::invalid(format!(
                "emission diagonal has {} entries for {n} states",
                v.len()
            )));
        }
        if v.iter().all(|x| *x == f64::NEG_INFINITY) {
            return Err(Error::ZeroLikelihood { tau });
        }
        Ok(())
    };

    let ln_of = |m: &DMatrix<f64>| m.map(f64::ln);
    // For a constant kernel take the log once; per-step kernels log as used.
    let ln_const = match omegas {
        Omegas::Constant(m) => Some(ln_of(m)),
        _ => None,
    };

    let p1 = ln_diag_at(1)?;
    check(&p1, 1)?;
    let mut score = DVector::from_fn(n, |i, _| delta.as_vector()[i].ln() + p1[i]);
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(t_len.saturating_sub(1));
    let mut next = DVector::zeros(n);

    for tau in 2..=t_len {
        let ln_om = match &ln_const {
            Some(m) => Cow::Borrowed(m),
            None => Cow::Owned(ln_of(omegas.at(tau)?.as_ref())),
        };
        let p = ln_diag_at(tau)?;
        check(&p, tau)?;
        let mut ptr = vec![0usize; n];
        for j in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0usize;
            for i in 0..n {
                let v = score[i] + ln_om[(i, j)];
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            next[j] = best + p[j];
            ptr[j] = arg;
        }
        if next.iter().all(|x| *x == f64::NEG_INFINITY) {
            return Err(Error::ZeroLikelihood { tau });
        }
        std::mem::swap(&mut score, &mut next);
        back.push(ptr);
    }

    let mut best = f64::NEG_INFINITY;
    let mut arg = 0usize;
    for i in 0..n {
        if score[i] > best {
            best = score[i];
            arg = i;
        }
    }
    let mut states = vec![0usize; t_len];
    states[t_len - 1] = arg;
    for (tau, ptr) in back.iter().enumerate().rev() {
        states[tau] = ptr[states[tau + 1]];
    }
    Ok(ViterbiPath {
        states,
        log_joint: best,
    })
}

/// One-step-ahead forecast distribution evaluated on a grid of candidate
/// observations. Quantiles come from the accumulated grid weights, since
/// state mixtures have no closed-form inverse cdf.
pub struct ForecastDist {
    /// Normalized state weights after the transition kernel.
    pub weights: Vec<f64>,
    pub eval_points: Vec<f64>,
    /// Mixture density sum_j w_j f_j(x) at each eval point.
    pub density: Vec<f64>,
}

impl ForecastDist {
    /// Smallest eval point whose accumulated (normalized) density weight
    /// reaches `level`. With a fine grid this is the lower `level`-quantile.
    pub fn quantile(&self, level: f64) -> Result<f64> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::invalid(format!(
                "quantile level must lie in (0,1), got {level}"
            )));
        }
        let total: f64 = self.density.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::invalid(
                "forecast density has no mass on the evaluation grid",
            ));
        }
        let mut acc = 0.0;
        for (x, d) in self.eval_points.iter().zip(self.density.iter()) {
            acc += d / total;
            if acc >= level {
                return Ok(*x);
            }
        }
        Ok(*self.eval_points.last().expect("nonempty grid"))
    }
}

/// One-step forecast past the filtered distribution: state weights
/// w = normalize(phi' next_omega), mixture density at each eval point via
/// `density_at(state, x)`.
pub fn forecast(
    phi: &DVector<f64>,
    next_omega: &DMatrix<f64>,
    eval_points: &[f64],
    density_at: &mut dyn FnMut(usize, f64) -> Result<f64>,
) -> Result<ForecastDist> {
    let n = phi.len();
    if next_omega.nrows() != n || next_omega.ncols() != n {
        return Err(Error::invalid(format!(
            "transition kernel is {}x{} for {n} states",
            next_omega.nrows(),
            next_omega.ncols()
        )));
    }
    if eval_points.is_empty() {
        return Err(Error::invalid("forecast needs a nonempty evaluation grid"));
    }
    let mut w = DVector::zeros(n);
    w.gemv_tr(1.0, next_omega, phi, 0.0);
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::invalid(
            "forecast state weights vanished under the transition kernel",
        ));
    }
    w /= total;
    let mut density = Vec::with_capacity(eval_points.len());
    for &x in eval_points {
        let mut f = 0.0;
        for j in 0..n {
            if w[j] > 0.0 {
                f += w[j] * density_at(j, x)?;
            }
        }
        density.push(f);
    }
    Ok(ForecastDist {
        weights: w.iter().copied().collect(),
        eval_points: eval_points.to_vec(),
        density,
    })
}
