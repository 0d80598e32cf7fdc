//! Model specifications, datasets, the per-class likelihood assembly, and
//! the maximum-likelihood driver with delta-method confidence intervals.

mod assemble;
mod optim;
mod pack;

pub use assemble::{
    dataset_loglik, decode_sequence, emission_diag_for, filtered_pass, grid_midpoints,
    initial_distribution, sequence_loglik, state_density, transition_kernel,
};
pub use optim::{OptimOptions, OptimOutcome, PENALTY};
pub use pack::{pack, unpack, Layout, Segment, Transform};

use nalgebra::{DMatrix, DVector};

use crate::emissions::{EmissionFamily, ValueDist};
use crate::error::{Error, Result};
use crate::grid::{AR1Params, Grid, OUParams};
use crate::kernels::GeneratorMask;
use crate::linalg::{ProbabilityVector, TransitionMatrix};

/// How the initial state distribution is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum InitMode {
    /// Solve the stationary equation of the fitted dynamics. Requires an
    /// irreducible structure.
    Stationary,
    /// Estimate the initial distribution as free parameters.
    Estimated,
    /// Hold the initial distribution fixed at the given probabilities, for
    /// chains with absorbing states where no stationary law exists.
    Fixed(Vec<f64>),
}

/// Discrete-time hidden Markov model. With `covariates` nonempty the
/// transition matrix is driven per step by those observation covariates
/// (design row: intercept, then the listed covariate values of the step's
/// source observation).
#[derive(Debug, Clone, PartialEq)]
pub struct HmmSpec {
    pub n_states: usize,
    pub init: InitMode,
    pub covariates: Vec<usize>,
}

/// AR(1) state-space model discretized onto a fixed grid. Grid bounds stay
/// fixed for the whole fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmAr1Spec {
    pub grid: Grid,
}

/// Continuous-time HMM on irregularly spaced observation times.
#[derive(Debug, Clone, PartialEq)]
pub struct CtHmmSpec {
    pub mask: GeneratorMask,
    pub init: InitMode,
}

/// OU-driven state-space model on a grid, observed at irregular times.
#[derive(Debug, Clone, PartialEq)]
pub struct CtSsmOuSpec {
    pub grid: Grid,
}

/// Markov-modulated Poisson process; `marked` adds emission distributions
/// for observations attached to the events. States listed in `zero_rates`
/// never produce events.
#[derive(Debug, Clone, PartialEq)]
pub struct MmppSpec {
    pub mask: GeneratorMask,
    pub zero_rates: Vec<bool>,
    pub marked: bool,
}

/// Cox process approximated by a many-state MMPP: OU log-intensity on a
/// grid, event rate exp(b_i*) in cell i, generator from the small-step
/// kernel ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct CoxOuMmppSpec {
    pub grid: Grid,
    pub dt_star: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Hmm(HmmSpec),
    SsmAr1(SsmAr1Spec),
    CtHmm(CtHmmSpec),
    CtSsmOu(CtSsmOuSpec),
    Mmpp(MmppSpec),
    CoxOuMmpp(CoxOuMmppSpec),
}

impl ModelSpec {
    /// Number of latent states (grid cells for grid classes).
    pub fn n_states(&self) -> usize {
        match self {
            ModelSpec::Hmm(s) => s.n_states,
            ModelSpec::SsmAr1(s) => s.grid.m(),
            ModelSpec::CtHmm(s) => s.mask.n(),
            ModelSpec::CtSsmOu(s) => s.grid.m(),
            ModelSpec::Mmpp(s) => s.mask.n(),
            ModelSpec::CoxOuMmpp(s) => s.grid.m(),
        }
    }

    /// True when observation times carry information (continuous-time and
    /// point-process classes).
    pub fn needs_times(&self) -> bool {
        !matches!(self, ModelSpec::Hmm(_) | ModelSpec::SsmAr1(_))
    }

    /// True when the likelihood is a point-process product over events.
    pub fn is_point_process(&self) -> bool {
        matches!(self, ModelSpec::Mmpp(_) | ModelSpec::CoxOuMmpp(_))
    }
}

/// Transition parameterization of a discrete-time HMM.
#[derive(Debug, Clone, PartialEq)]
pub enum TpmParams {
    Homogeneous(TransitionMatrix),
    /// Coefficient matrix with one row per off-diagonal transition in
    /// row-major order and one column per design column (intercept first).
    CovariateDriven(DMatrix<f64>),
}

/// Natural parameters of one model. The emission families carry their own
/// parameter values.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Hmm {
        tpm: TpmParams,
        emissions: EmissionFamily,
        init: Option<ProbabilityVector>,
    },
    SsmAr1 {
        latent: AR1Params,
        obs: ValueDist,
    },
    CtHmm {
        rates: Vec<f64>,
        emissions: EmissionFamily,
        init: Option<ProbabilityVector>,
    },
    CtSsmOu {
        latent: OUParams,
        obs: ValueDist,
    },
    Mmpp {
        switch_rates: Vec<f64>,
        event_rates: Vec<f64>,
        marks: EmissionFamily,
    },
    CoxOuMmpp {
        latent: OUParams,
    },
}

/// One observation sequence. `times` must be empty for discrete-time
/// classes; for continuous-time classes it holds observation instants, and
/// for point processes the event times measured from the start of the
/// observation window.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub times: Vec<f64>,
    pub obs: Vec<crate::emissions::Observation>,
}

/// A collection of independent sequences sharing one parameter set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn n_obs(&self) -> usize {
        self.sequences.iter().map(|s| s.obs.len()).sum()
    }
}

fn check_init(init: &InitMode, params_init: &Option<ProbabilityVector>, n: usize) -> Result<()> {
    match init {
        InitMode::Stationary => {
            if params_init.is_some() {
                return Err(Error::invalid(
                    "stationary initial mode takes no initial-distribution parameters",
                ));
            }
        }
        InitMode::Estimated => match params_init {
            Some(d) if d.n() == n => {}
            Some(d) => {
                return Err(Error::invalid(format!(
                    "initial distribution has {} entries for {n} states",
                    d.n()
                )))
            }
            None => {
                return Err(Error::invalid(
                    "estimated initial mode needs a starting initial distribution",
                ))
            }
        },
        InitMode::Fixed(v) => {
            if v.len() != n {
                return Err(Error::invalid(format!(
                    "fixed initial distribution has {} entries for {n} states",
                    v.len()
                )));
            }
            ProbabilityVector::new(DVector::from_vec(v.clone()))?;
            if params_init.is_some() {
                return Err(Error::invalid(
                    "fixed initial mode takes no initial-distribution parameters",
                ));
            }
        }
    }
    Ok(())
}

/// Checks that the parameters fit the specification's shape and domain.
pub fn validate(spec: &ModelSpec, params: &ModelParams) -> Result<()> {
    match (spec, params) {
        (ModelSpec::Hmm(s), ModelParams::Hmm { tpm, emissions, init }) => {
            if s.n_states == 0 {
                return Err(Error::invalid("need at least one state"));
            }
            match tpm {
                TpmParams::Homogeneous(g) => {
                    if g.n() != s.n_states {
                        return Err(Error::invalid(format!(
                            "transition matrix is {}x{} for {} states",
                            g.n(),
                            g.n(),
                            s.n_states
                        )));
                    }
                    if !s.covariates.is_empty() {
                        return Err(Error::invalid(
                            "covariate-driven spec needs coefficient parameters, not a fixed matrix",
                        ));
                    }
                }
                TpmParams::CovariateDriven(beta) => {
                    if s.covariates.is_empty() {
                        return Err(Error::invalid(
                            "coefficient parameters need transition covariates in the spec",
                        ));
                    }
                    let n_off = s.n_states * (s.n_states - 1);
                    if beta.nrows() != n_off || beta.ncols() != 1 + s.covariates.len() {
                        return Err(Error::invalid(format!(
                            "coefficient matrix is {}x{}, expected {}x{}",
                            beta.nrows(),
                            beta.ncols(),
                            n_off,
                            1 + s.covariates.len()
                        )));
                    }
                    if matches!(s.init, InitMode::Stationary) {
                        return Err(Error::invalid(
                            "stationary initial mode is undefined for a covariate-driven transition matrix",
                        ));
                    }
                }
            }
            emissions.validate(s.n_states)?;
            check_init(&s.init, init, s.n_states)
        }
        (ModelSpec::SsmAr1(_), ModelParams::SsmAr1 { latent, obs }) => {
            latent.validate()?;
            obs.validate()
        }
        (ModelSpec::CtHmm(s), ModelParams::CtHmm { rates, emissions, init }) => {
            if rates.len() != s.mask.n_free() {
                return Err(Error::invalid(format!(
                    "expected {} transition rates for the mask, got {}",
                    s.mask.n_free(),
                    rates.len()
                )));
            }
            if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                return Err(Error::invalid("transition rates must be positive and finite"));
            }
            emissions.validate(s.mask.n())?;
            check_init(&s.init, init, s.mask.n())
        }
        (ModelSpec::CtSsmOu(_), ModelParams::CtSsmOu { latent, obs }) => {
            latent.validate()?;
            obs.validate()
        }
        (ModelSpec::Mmpp(s), ModelParams::Mmpp { switch_rates, event_rates, marks }) => {
            let n = s.mask.n();
            if s.zero_rates.len() != n {
                return Err(Error::invalid(format!(
                    "zero-rate mask has {} entries for {n} states",
                    s.zero_rates.len()
                )));
            }
            if switch_rates.len() != s.mask.n_free() {
                return Err(Error::invalid(format!(
                    "expected {} switch rates for the mask, got {}",
                    s.mask.n_free(),
                    switch_rates.len()
                )));
            }
            if switch_rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                return Err(Error::invalid("switch rates must be positive and finite"));
            }
            if event_rates.len() != n {
                return Err(Error::invalid(format!(
                    "expected {n} event rates, got {}",
                    event_rates.len()
                )));
            }
            for (i, (&rate, &zeroed)) in event_rates.iter().zip(s.zero_rates.iter()).enumerate() {
                if zeroed && rate != 0.0 {
                    return Err(Error::invalid(format!(
                        "state {} is marked zero-rate but has rate {rate}",
                        i + 1
                    )));
                }
                if !zeroed && !(rate > 0.0 && rate.is_finite()) {
                    return Err(Error::invalid(format!(
                        "state {} needs a positive finite event rate, got {rate}",
                        i + 1
                    )));
                }
            }
            if s.marked {
                if matches!(marks, EmissionFamily::Unmarked) {
                    return Err(Error::invalid("marked point process needs mark emissions"));
                }
                marks.validate(n)?;
            } else if !matches!(marks, EmissionFamily::Unmarked) {
                return Err(Error::invalid(
                    "unmarked point process cannot carry mark emissions",
                ));
            }
            Ok(())
        }
        (ModelSpec::CoxOuMmpp(s), ModelParams::CoxOuMmpp { latent }) => {
            if !(s.dt_star > 0.0 && s.dt_star.is_finite()) {
                return Err(Error::invalid(format!(
                    "generator step must be positive, got {}",
                    s.dt_star
                )));
            }
            latent.validate()
        }
        _ => Err(Error::invalid(
            "parameter object does not match the model class",
        )),
    }
}

/// Checks a dataset against the specification's sequence requirements.
pub fn validate_data(spec: &ModelSpec, data: &Dataset) -> Result<()> {
    if data.sequences.is_empty() {
        return Err(Error::invalid("dataset has no sequences"));
    }
    for (k, seq) in data.sequences.iter().enumerate() {
        let label = || format!("sequence {}", k + 1);
        if seq.obs.is_empty() {
            return Err(Error::invalid(format!("{} has no observations", label())));
        }
        if spec.needs_times() {
            if seq.times.len() != seq.obs.len() {
                return Err(Error::invalid(format!(
                    "{} has {} times for {} observations",
                    label(),
                    seq.times.len(),
                    seq.obs.len()
                )));
            }
            if seq.times.iter().any(|t| !t.is_finite()) {
                return Err(Error::invalid(format!("{} has non-finite times", label())));
            }
            let mut prev = if spec.is_point_process() {
                // Event times are waiting-time anchors from the window start.
                0.0
            } else {
                f64::NEG_INFINITY
            };
            for &t in &seq.times {
                if t <= prev {
                    return Err(Error::invalid(format!(
                        "{} times must be strictly increasing{}",
                        label(),
                        if spec.is_point_process() {
                            " and positive"
                        } else {
                            ""
                        }
                    )));
                }
                prev = t;
            }
        } else if !seq.times.is_empty() && seq.times.len() != seq.obs.len() {
            return Err(Error::invalid(format!(
                "{} has {} times for {} observations",
                label(),
                seq.times.len(),
                seq.obs.len()
            )));
        }
    }
    Ok(())
}

/// Optimizer and interval settings.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub optim: OptimOptions,
    /// Confidence level for the reported intervals.
    pub ci_level: f64,
    /// Relative step for the finite-difference Hessian.
    pub hessian_step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            optim: OptimOptions::default(),
            ci_level: 0.95,
            hessian_step: 1e-4,
        }
    }
}

/// One reported parameter: natural-scale point estimate and interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEstimate {
    pub name: String,
    pub value: f64,
    /// None when the Hessian was unavailable or not positive definite.
    pub interval: Option<(f64, f64)>,
}

/// Everything a fit produces.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub used_fallback: bool,
    /// Number of free parameters.
    pub n_params: usize,
    pub n_obs: usize,
    pub aic: f64,
    pub bic: f64,
    pub estimates: Vec<ParamEstimate>,
    /// Covariance of the unconstrained parameters, when available.
    pub covariance: Option<DMatrix<f64>>,
    /// Accepted negative log-likelihood values, nonincreasing.
    pub trace: Vec<f64>,
    layout: Layout,
    x_hat: DVector<f64>,
}

impl FitResult {
    /// Recompute intervals at another confidence level from the stored
    /// covariance.
    pub fn intervals(&self, level: f64) -> Result<Vec<ParamEstimate>> {
        interval_estimates(&self.layout, &self.x_hat, self.covariance.as_ref(), level)
    }
}

/// Delta-method intervals at the given level; free-standing form of
/// `FitResult::intervals`.
pub fn hessian_ci(result: &FitResult, level: f64) -> Result<Vec<ParamEstimate>> {
    result.intervals(level)
}

fn normal_quantile(p: f64) -> Result<f64> {
    use statrs::distribution::ContinuousCDF;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!(
            "confidence level must lie in (0,1), got quantile argument {p}"
        )));
    }
    let norm = statrs::distribution::Normal::new(0.0, 1.0)
        .map_err(|e| Error::invalid(e.to_string()))?;
    Ok(norm.inverse_cdf(p))
}

fn interval_estimates(
    layout: &Layout,
    x: &DVector<f64>,
    covariance: Option<&DMatrix<f64>>,
    level: f64,
) -> Result<Vec<ParamEstimate>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!(
            "confidence level must lie in (0,1), got {level}"
        )));
    }
    let z = normal_quantile(0.5 * (1.0 + level))?;
    let mut out = Vec::new();
    let mut k = 0usize;
    for seg in &layout.segments {
        match seg {
            Segment::Scalar { name, transform } => {
                let est = x[k];
                let value = transform.to_natural(est);
                let interval = covariance.map(|cov| {
                    let se = cov[(k, k)].max(0.0).sqrt();
                    (
                        transform.to_natural(est - z * se),
                        transform.to_natural(est + z * se),
                    )
                });
                out.push(ParamEstimate {
                    name: name.clone(),
                    value,
                    interval,
                });
                k += 1;
            }
            Segment::Mlogit { names, ref_index } => {
                let cells = names.len();
                let free = cells - 1;
                let probs = pack::unpack_row(x.as_slice(), k, cells, *ref_index);
                for (j, name) in names.iter().enumerate() {
                    let interval = covariance.map(|cov| {
                        // dp_j/deta_l = p_j (1{j=l} - p_l) over the free cells.
                        let mut grad = Vec::with_capacity(free);
                        for (l, &pl) in probs.iter().enumerate() {
                            if l == *ref_index {
                                continue;
                            }
                            let ind = if l == j { 1.0 } else { 0.0 };
                            grad.push(probs[j] * (ind - pl));
                        }
                        let mut var = 0.0;
                        for (a, &ga) in grad.iter().enumerate() {
                            for (b, &gb) in grad.iter().enumerate() {
                                var += ga * gb * cov[(k + a, k + b)];
                            }
                        }
                        let se = var.max(0.0).sqrt();
                        (
                            (probs[j] - z * se).max(0.0),
                            (probs[j] + z * se).min(1.0),
                        )
                    });
                    out.push(ParamEstimate {
                        name: name.clone(),
                        value: probs[j],
                        interval,
                    });
                }
                k += free;
            }
        }
    }
    Ok(out)
}

fn finite_difference_hessian(
    f: &(dyn Fn(&DVector<f64>) -> f64 + Sync),
    x: &DVector<f64>,
    step: f64,
) -> DMatrix<f64> {
    let k = x.len();
    let h: Vec<f64> = x.iter().map(|v| step * v.abs().max(1.0)).collect();
    let f0 = f(x);
    let mut hess = DMatrix::zeros(k, k);
    for i in 0..k {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h[i];
        xm[i] -= h[i];
        hess[(i, i)] = (f(&xp) - 2.0 * f0 + f(&xm)) / (h[i] * h[i]);
        for j in (i + 1)..k {
            let mut xpp = x.clone();
            let mut xpm = x.clone();
            let mut xmp = x.clone();
            let mut xmm = x.clone();
            xpp[i] += h[i];
            xpp[j] += h[j];
            xpm[i] += h[i];
            xpm[j] -= h[j];
            xmp[i] -= h[i];
            xmp[j] += h[j];
            xmm[i] -= h[i];
            xmm[j] -= h[j];
            let v = (f(&xpp) - f(&xpm) - f(&xmp) + f(&xmm)) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Maximum-likelihood fit. The negative log-likelihood over unconstrained
/// parameters is minimized by a quasi-Newton search with finite-difference
/// gradients, falling back to Nelder-Mead when a line search stalls.
pub fn fit_mle(
    spec: &ModelSpec,
    data: &Dataset,
    init: &ModelParams,
    opts: &FitOptions,
) -> Result<FitResult> {
    validate(spec, init)?;
    validate_data(spec, data)?;
    let (layout, x0) = pack(spec, init)?;

    // A zero likelihood at the starting point is a modelling error, not an
    // optimization state; surface it before searching.
    let ll0 = dataset_loglik(spec, init, data)?;
    if !ll0.is_finite() {
        return Err(Error::invalid(
            "log-likelihood is not finite at the initial parameters",
        ));
    }

    let template = init.clone();
    let objective = move |x: &DVector<f64>| -> f64 {
        match unpack(spec, &template, x).and_then(|p| dataset_loglik(spec, &p, data)) {
            Ok(ll) if ll.is_finite() => -ll,
            _ => PENALTY,
        }
    };

    let outcome = optim::minimize(&objective, x0, &opts.optim);

    let params = unpack(spec, init, &outcome.x)?;
    let log_likelihood = dataset_loglik(spec, &params, data)?;

    let covariance = if layout.len() == 0 {
        Some(DMatrix::zeros(0, 0))
    } else {
        let hess = finite_difference_hessian(&objective, &outcome.x, opts.hessian_step);
        nalgebra::linalg::Cholesky::new(hess).map(|c| c.inverse())
    };
    let estimates =
        interval_estimates(&layout, &outcome.x, covariance.as_ref(), opts.ci_level)?;

    let k = layout.len();
    let n_obs = data.n_obs();
    Ok(FitResult {
        params,
        log_likelihood,
        converged: outcome.converged,
        iterations: outcome.iterations,
        used_fallback: outcome.used_fallback,
        n_params: k,
        n_obs,
        aic: 2.0 * k as f64 - 2.0 * log_likelihood,
        bic: k as f64 * (n_obs as f64).ln() - 2.0 * log_likelihood,
        estimates,
        covariance,
        trace: outcome.trace,
        layout,
        x_hat: outcome.x,
    })
}
