//! Per-class assembly: turns a specification, parameters, and one sequence
//! into the initial distribution, step kernels, and emission diagonals the
//! forward machinery consumes. Grid-kernel classes with irregular gaps
//! produce their kernels lazily; materializing every m-by-m step matrix
//! for a long series would dominate memory.

use nalgebra::{DMatrix, DVector};

use super::{InitMode, ModelParams, ModelSpec, Sequence, TpmParams};
use crate::emissions::{emission_diag, log_emission_diag, EmissionFamily, Observation, StateSpace};
use crate::error::{Error, Result};
use crate::forward::{self, ForwardPass, Omegas, ViterbiPath};
use crate::grid::{ar1_initial, ar1_tpm, generator_approx, ou_initial, ou_tpm, Grid};
use crate::kernels::{generator_from_params, hmm_tpm_sequence, omega_cthmm, omega_mmpp, GeneratorMask};
use crate::linalg::{stationary_continuous, stationary_discrete, GeneratorMatrix, ProbabilityVector};

enum Kernels<'a> {
    Constant(DMatrix<f64>),
    PerStep(Vec<DMatrix<f64>>),
    Lazy(Box<dyn Fn(usize) -> Result<DMatrix<f64>> + 'a>),
}

impl Kernels<'_> {
    fn omegas(&self) -> Omegas<'_> {
        match self {
            Kernels::Constant(m) => Omegas::Constant(m),
            Kernels::PerStep(v) => Omegas::PerStep(v),
            Kernels::Lazy(f) => Omegas::Lazy(f.as_ref()),
        }
    }
}

type DiagFn<'a> = Box<dyn Fn(usize) -> Result<Vec<f64>> + 'a>;

struct Assembled<'a> {
    delta: ProbabilityVector,
    kernels: Kernels<'a>,
    diag: DiagFn<'a>,
    ln_diag: DiagFn<'a>,
    t_len: usize,
}

fn init_delta(
    mode: &InitMode,
    init: &Option<ProbabilityVector>,
    stationary: impl FnOnce() -> Result<ProbabilityVector>,
) -> Result<ProbabilityVector> {
    match mode {
        InitMode::Stationary => stationary(),
        InitMode::Estimated => init
            .clone()
            .ok_or_else(|| Error::invalid("estimated initial mode needs a starting distribution")),
        InitMode::Fixed(v) => ProbabilityVector::new(DVector::from_vec(v.clone())),
    }
}

fn cthmm_generator(mask: &GeneratorMask, rates: &[f64]) -> Result<GeneratorMatrix> {
    let logs: Vec<f64> = rates.iter().map(|r| r.ln()).collect();
    generator_from_params(mask, &logs)
}

fn cox_pieces(grid: &Grid, latent: &crate::grid::OUParams, dt_star: f64) -> Result<(GeneratorMatrix, Vec<f64>)> {
    let gamma_star = ou_tpm(grid, latent, dt_star)?;
    let q = generator_approx(&gamma_star, dt_star)?;
    let rates: Vec<f64> = grid.midpoints().iter().map(|b| b.exp()).collect();
    Ok((q, rates))
}

fn check_timed_lengths(seq: &Sequence) -> Result<()> {
    if seq.times.len() != seq.obs.len() {
        return Err(Error::invalid(format!(
            "sequence has {} times for {} observations",
            seq.times.len(),
            seq.obs.len()
        )));
    }
    Ok(())
}

fn hmm_design(covariates: &[usize], obs: &[Observation]) -> Result<DMatrix<f64>> {
    let rows = obs.len().saturating_sub(1);
    let p = 1 + covariates.len();
    let mut design = DMatrix::zeros(rows, p);
    // The kernel into observation tau uses the covariates of observation
    // tau - 1, so the design rows are the first T - 1 records.
    for (t, record) in obs.iter().take(rows).enumerate() {
        design[(t, 0)] = 1.0;
        for (c, &ci) in covariates.iter().enumerate() {
            let v = record.covariates.get(ci).copied().ok_or_else(|| {
                Error::invalid(format!(
                    "observation {} has no covariate {ci} for the transition model",
                    t + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::invalid(format!(
                    "observation {} has a non-finite transition covariate",
                    t + 1
                )));
            }
            design[(t, c + 1)] = v;
        }
    }
    Ok(design)
}

fn discrete_diags<'a>(n: usize, fam: &'a EmissionFamily, seq: &'a Sequence) -> (DiagFn<'a>, DiagFn<'a>) {
    let records = seq.obs.as_slice();
    let diag: DiagFn<'a> =
        Box::new(move |tau| emission_diag(fam, &StateSpace::Discrete(n), &records[tau - 1]));
    let ln_diag: DiagFn<'a> =
        Box::new(move |tau| log_emission_diag(fam, &StateSpace::Discrete(n), &records[tau - 1]));
    (diag, ln_diag)
}

/// Mark diagonals for a point process: step 1 is the virtual window start
/// with no observation, steps 2.. are the events in order.
fn mark_diags<'a>(n: usize, marks: &'a EmissionFamily, seq: &'a Sequence) -> Result<(DiagFn<'a>, DiagFn<'a>)> {
    if matches!(marks, EmissionFamily::Unmarked) {
        let diag: DiagFn<'a> = Box::new(move |_| Ok(vec![1.0; n]));
        let ln_diag: DiagFn<'a> = Box::new(move |_| Ok(vec![0.0; n]));
        return Ok((diag, ln_diag));
    }
    if seq.obs.len() != seq.times.len() {
        return Err(Error::invalid(format!(
            "marked point process has {} marks for {} events",
            seq.obs.len(),
            seq.times.len()
        )));
    }
    let records = seq.obs.as_slice();
    let diag: DiagFn<'a> = Box::new(move |tau| {
        if tau == 1 {
            Ok(vec![1.0; n])
        } else {
            emission_diag(marks, &StateSpace::Discrete(n), &records[tau - 2])
        }
    });
    let ln_diag: DiagFn<'a> = Box::new(move |tau| {
        if tau == 1 {
            Ok(vec![0.0; n])
        } else {
            log_emission_diag(marks, &StateSpace::Discrete(n), &records[tau - 2])
        }
    });
    Ok((diag, ln_diag))
}

/// Waiting time ending at event `tau - 1` (1-based forward step), measured
/// from the window start for the first event.
fn waiting_time(times: &[f64], tau: usize) -> f64 {
    let end = times[tau - 2];
    if tau > 2 {
        end - times[tau - 3]
    } else {
        end
    }
}

fn assemble<'a>(
    spec: &'a ModelSpec,
    params: &'a ModelParams,
    seq: &'a Sequence,
) -> Result<Assembled<'a>> {
    match (spec, params) {
        (ModelSpec::Hmm(s), ModelParams::Hmm { tpm, emissions, init }) => {
            let t_len = seq.obs.len();
            let kernels = match tpm {
                TpmParams::Homogeneous(g) => Kernels::Constant(g.as_matrix().clone()),
                TpmParams::CovariateDriven(beta) => {
                    let design = hmm_design(&s.covariates, &seq.obs)?;
                    let steps = hmm_tpm_sequence(beta, &design, s.n_states)?
                        .into_iter()
                        .map(|g| g.into_inner())
                        .collect();
                    Kernels::PerStep(steps)
                }
            };
            let delta = init_delta(&s.init, init, || match tpm {
                TpmParams::Homogeneous(g) => stationary_discrete(g),
                TpmParams::CovariateDriven(_) => Err(Error::invalid(
                    "stationary initial mode is undefined for a covariate-driven transition matrix",
                )),
            })?;
            let (diag, ln_diag) = discrete_diags(s.n_states, emissions, seq);
            Ok(Assembled { delta, kernels, diag, ln_diag, t_len })
        }
        (ModelSpec::SsmAr1(s), ModelParams::SsmAr1 { latent, obs }) => {
            let t_len = seq.obs.len();
            let kernels = Kernels::Constant(ar1_tpm(&s.grid, latent)?);
            let delta = ar1_initial(&s.grid, latent)?;
            let fam = EmissionFamily::StateValue(obs.clone());
            let (diag, ln_diag) = grid_diags_owned(&s.grid, fam, seq);
            Ok(Assembled { delta, kernels, diag, ln_diag, t_len })
        }
        (ModelSpec::CtHmm(s), ModelParams::CtHmm { rates, emissions, init }) => {
            check_timed_lengths(seq)?;
            let t_len = seq.obs.len();
            let q = cthmm_generator(&s.mask, rates)?;
            let mut steps = Vec::with_capacity(t_len.saturating_sub(1));
            for tau in 2..=t_len {
                let dt = seq.times[tau - 1] - seq.times[tau - 2];
                steps.push(omega_cthmm(&q, dt)?.into_inner());
            }
            let delta = init_delta(&s.init, init, || stationary_continuous(&q))?;
            let (diag, ln_diag) = discrete_diags(s.mask.n(), emissions, seq);
            Ok(Assembled { delta, kernels: Kernels::PerStep(steps), diag, ln_diag, t_len })
        }
        (ModelSpec::CtSsmOu(s), ModelParams::CtSsmOu { latent, obs }) => {
            check_timed_lengths(seq)?;
            let t_len = seq.obs.len();
            let delta = ou_initial(&s.grid, latent)?;
            let grid = s.grid.clone();
            let latent = *latent;
            let times = seq.times.as_slice();
            let kernels = Kernels::Lazy(Box::new(move |tau| {
                let dt = times[tau - 1] - times[tau - 2];
                ou_tpm(&grid, &latent, dt)
            }));
            let fam = EmissionFamily::StateValue(obs.clone());
            let (diag, ln_diag) = grid_diags_owned(&s.grid, fam, seq);
            Ok(Assembled { delta, kernels, diag, ln_diag, t_len })
        }
        (ModelSpec::Mmpp(s), ModelParams::Mmpp { switch_rates, event_rates, marks }) => {
            let t_len = seq.times.len() + 1;
            let q = cthmm_generator(&s.mask, switch_rates)?;
            let delta = stationary_continuous(&q)?;
            let (diag, ln_diag) = mark_diags(s.mask.n(), marks, seq)?;
            let rates = event_rates.clone();
            let times = seq.times.as_slice();
            let kernels = Kernels::Lazy(Box::new(move |tau| {
                omega_mmpp(&q, &rates, waiting_time(times, tau), true)
            }));
            Ok(Assembled { delta, kernels, diag, ln_diag, t_len })
        }
        (ModelSpec::CoxOuMmpp(s), ModelParams::CoxOuMmpp { latent }) => {
            let t_len = seq.times.len() + 1;
            let (q, rates) = cox_pieces(&s.grid, latent, s.dt_star)?;
            let delta = stationary_continuous(&q)?;
            let m = s.grid.m();
            let diag: DiagFn<'a> = Box::new(move |_| Ok(vec![1.0; m]));
            let ln_diag: DiagFn<'a> = Box::new(move |_| Ok(vec![0.0; m]));
            let times = seq.times.as_slice();
            let kernels = Kernels::Lazy(Box::new(move |tau| {
                omega_mmpp(&q, &rates, waiting_time(times, tau), true)
            }));
            Ok(Assembled { delta, kernels, diag, ln_diag, t_len })
        }
        _ => Err(Error::invalid(
            "parameter object does not match the model class",
        )),
    }
}

/// Like `grid_diags` but the family is owned by the closures.
fn grid_diags_owned<'a>(
    grid: &Grid,
    fam: EmissionFamily,
    seq: &'a Sequence,
) -> (DiagFn<'a>, DiagFn<'a>) {
    let mids: Vec<f64> = grid.midpoints().to_vec();
    let records = seq.obs.as_slice();
    let fam2 = fam.clone();
    let mids2 = mids.clone();
    let diag: DiagFn<'a> = Box::new(move |tau| {
        emission_diag(&fam, &StateSpace::Grid(&mids), &records[tau - 1])
    });
    let ln_diag: DiagFn<'a> = Box::new(move |tau| {
        log_emission_diag(&fam2, &StateSpace::Grid(&mids2), &records[tau - 1])
    });
    (diag, ln_diag)
}

/// Log-likelihood of one sequence under the model.
pub fn sequence_loglik(spec: &ModelSpec, params: &ModelParams, seq: &Sequence) -> Result<f64> {
    let a = assemble(spec, params, seq)?;
    let omegas = a.kernels.omegas();
    let mut diag = |tau: usize| (a.diag)(tau);
    forward::log_likelihood(&a.delta, &omegas, &mut diag, a.t_len)
}

/// Log-likelihood of every sequence summed. Sequences are scanned in order
/// so the result is reproducible to the last bit.
pub fn dataset_loglik(spec: &ModelSpec, params: &ModelParams, data: &super::Dataset) -> Result<f64> {
    let mut total = 0.0;
    for seq in &data.sequences {
        total += sequence_loglik(spec, params, seq)?;
    }
    Ok(total)
}

/// Most probable state path for one sequence. Point-process paths include
/// the virtual window-start step, so they are one longer than the event
/// list. Indices are zero-based; grid classes index grid cells.
pub fn decode_sequence(spec: &ModelSpec, params: &ModelParams, seq: &Sequence) -> Result<ViterbiPath> {
    let a = assemble(spec, params, seq)?;
    let omegas = a.kernels.omegas();
    let mut ln_diag = |tau: usize| (a.ln_diag)(tau);
    forward::viterbi(&a.delta, &omegas, &mut ln_diag, a.t_len)
}

/// Runs the scaled forward recursion over the whole sequence and returns
/// the pass, whose final state probabilities feed forecasting.
pub fn filtered_pass(spec: &ModelSpec, params: &ModelParams, seq: &Sequence) -> Result<ForwardPass> {
    let a = assemble(spec, params, seq)?;
    let omegas = a.kernels.omegas();
    let mut pass = ForwardPass::start(&a.delta, &(a.diag)(1)?)?;
    for tau in 2..=a.t_len {
        pass.step(omegas.at(tau)?.as_ref(), &(a.diag)(tau)?)?;
    }
    Ok(pass)
}

/// The initial state distribution the likelihood uses.
pub fn initial_distribution(spec: &ModelSpec, params: &ModelParams) -> Result<ProbabilityVector> {
    match (spec, params) {
        (ModelSpec::Hmm(s), ModelParams::Hmm { tpm, init, .. }) => {
            init_delta(&s.init, init, || match tpm {
                TpmParams::Homogeneous(g) => stationary_discrete(g),
                TpmParams::CovariateDriven(_) => Err(Error::invalid(
                    "stationary initial mode is undefined for a covariate-driven transition matrix",
                )),
            })
        }
        (ModelSpec::SsmAr1(s), ModelParams::SsmAr1 { latent, .. }) => ar1_initial(&s.grid, latent),
        (ModelSpec::CtHmm(s), ModelParams::CtHmm { rates, init, .. }) => {
            let q = cthmm_generator(&s.mask, rates)?;
            init_delta(&s.init, init, || stationary_continuous(&q))
        }
        (ModelSpec::CtSsmOu(s), ModelParams::CtSsmOu { latent, .. }) => ou_initial(&s.grid, latent),
        (ModelSpec::Mmpp(s), ModelParams::Mmpp { switch_rates, .. }) => {
            stationary_continuous(&cthmm_generator(&s.mask, switch_rates)?)
        }
        (ModelSpec::CoxOuMmpp(s), ModelParams::CoxOuMmpp { latent }) => {
            let (q, _) = cox_pieces(&s.grid, latent, s.dt_star)?;
            stationary_continuous(&q)
        }
        _ => Err(Error::invalid(
            "parameter object does not match the model class",
        )),
    }
}

/// One-step transition kernel for forecasting. Continuous-time classes
/// need the step length `dt`; discrete-time classes ignore it. Not defined
/// for point processes or covariate-driven transitions.
pub fn transition_kernel(
    spec: &ModelSpec,
    params: &ModelParams,
    dt: Option<f64>,
) -> Result<DMatrix<f64>> {
    let need_dt = || {
        dt.ok_or_else(|| {
            Error::invalid("continuous-time forecasting needs the step length ahead")
        })
    };
    match (spec, params) {
        (ModelSpec::Hmm(_), ModelParams::Hmm { tpm, .. }) => match tpm {
            TpmParams::Homogeneous(g) => Ok(g.as_matrix().clone()),
            TpmParams::CovariateDriven(_) => Err(Error::invalid(
                "forecasting with a covariate-driven transition matrix needs the next design row",
            )),
        },
        (ModelSpec::SsmAr1(s), ModelParams::SsmAr1 { latent, .. }) => ar1_tpm(&s.grid, latent),
        (ModelSpec::CtHmm(s), ModelParams::CtHmm { rates, .. }) => {
            let q = cthmm_generator(&s.mask, rates)?;
            Ok(omega_cthmm(&q, need_dt()?)?.into_inner())
        }
        (ModelSpec::CtSsmOu(s), ModelParams::CtSsmOu { latent, .. }) => {
            ou_tpm(&s.grid, latent, need_dt()?)
        }
        (ModelSpec::Mmpp(_), _) | (ModelSpec::CoxOuMmpp(_), _) => Err(Error::invalid(
            "value forecasting is not defined for point-process classes",
        )),
        _ => Err(Error::invalid(
            "parameter object does not match the model class",
        )),
    }
}

/// Grid cell midpoints for grid-state classes, None for finite-state ones.
pub fn grid_midpoints(spec: &ModelSpec) -> Option<Vec<f64>> {
    match spec {
        ModelSpec::SsmAr1(s) => Some(s.grid.midpoints().to_vec()),
        ModelSpec::CtSsmOu(s) => Some(s.grid.midpoints().to_vec()),
        ModelSpec::CoxOuMmpp(s) => Some(s.grid.midpoints().to_vec()),
        ModelSpec::Hmm(_) | ModelSpec::CtHmm(_) | ModelSpec::Mmpp(_) => None,
    }
}

/// Emission densities of one observation record across the state space.
pub fn emission_diag_for(
    spec: &ModelSpec,
    params: &ModelParams,
    obs: &Observation,
) -> Result<Vec<f64>> {
    match (spec, params) {
        (ModelSpec::Hmm(s), ModelParams::Hmm { emissions, .. }) => {
            emission_diag(emissions, &StateSpace::Discrete(s.n_states), obs)
        }
        (ModelSpec::SsmAr1(s), ModelParams::SsmAr1 { obs: dist, .. }) => {
            let fam = EmissionFamily::StateValue(dist.clone());
            emission_diag(&fam, &StateSpace::Grid(s.grid.midpoints()), obs)
        }
        (ModelSpec::CtHmm(s), ModelParams::CtHmm { emissions, .. }) => {
            emission_diag(emissions, &StateSpace::Discrete(s.mask.n()), obs)
        }
        (ModelSpec::CtSsmOu(s), ModelParams::CtSsmOu { obs: dist, .. }) => {
            let fam = EmissionFamily::StateValue(dist.clone());
            emission_diag(&fam, &StateSpace::Grid(s.grid.midpoints()), obs)
        }
        (ModelSpec::Mmpp(s), ModelParams::Mmpp { marks, .. }) => {
            emission_diag(marks, &StateSpace::Discrete(s.mask.n()), obs)
        }
        (ModelSpec::CoxOuMmpp(s), ModelParams::CoxOuMmpp { .. }) => Ok(vec![1.0; s.grid.m()]),
        _ => Err(Error::invalid(
            "parameter object does not match the model class",
        )),
    }
}

/// Density of a scalar observation value in one state; the per-state
/// mixture component a forecast combines.
pub fn state_density(
    spec: &ModelSpec,
    params: &ModelParams,
    state: usize,
    x: f64,
) -> Result<f64> {
    let diag = emission_diag_for(spec, params, &Observation::scalar(x))?;
    diag.get(state).copied().ok_or_else(|| {
        Error::invalid(format!(
            "state index {state} out of range for {} states",
            diag.len()
        ))
    })
}
