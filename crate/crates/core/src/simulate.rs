//! Simulators for every model class: exact latent draws composed with
//! emission draws, used by the simulate-recover tests and for generating
//! synthetic datasets.
//!
//! Reproducibility: all randomness comes from a seedable portable generator.
//! A fixed seed gives bitwise-identical output across runs. Multi-sequence
//! simulations give each sequence its own stream via `stream_rng`, so the
//! result does not depend on the order sequences are drawn in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp, Gamma as GammaDist, Poisson, StandardNormal};

use crate::emissions::{EmissionFamily, Observation, StateDist, ValueDist};
use crate::error::{Error, Result};
use crate::grid::{AR1Params, OUParams};
use crate::linalg::{GeneratorMatrix, ProbabilityVector, TransitionMatrix};

/// The generator used throughout simulation.
pub type StreamRng = ChaCha12Rng;

/// Independent stream `stream` of the generator seeded with `seed`.
/// Different streams of one seed never overlap.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn standard_normal(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Inverse-CDF draw from a probability row.
fn categorical<I: Iterator<Item = f64>>(probs: I, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (j, p) in probs.enumerate() {
        acc += p;
        last = j;
        if u < acc {
            return j;
        }
    }
    // Roundoff can leave acc marginally below 1; credit the final cell.
    last
}

fn draw_exponential(rate: f64, rng: &mut StreamRng) -> Result<f64> {
    let exp = Exp::new(rate).map_err(|e| Error::invalid(format!("exponential rate {rate}: {e}")))?;
    Ok(exp.sample(rng))
}

/// Von Mises draw by the Best-Fisher rejection method; exact for kappa > 0,
/// uniform on a full circle at kappa = 0.
fn draw_von_mises(mean: f64, kappa: f64, rng: &mut StreamRng) -> f64 {
    use std::f64::consts::PI;
    if kappa < 1e-10 {
        return mean + (rng.gen::<f64>() * 2.0 - 1.0) * PI;
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.gen();
            let angle = f.clamp(-1.0, 1.0).acos();
            return mean + if u3 > 0.5 { angle } else { -angle };
        }
    }
}

enum Part {
    Value(f64),
    Event,
}

fn sample_state_dist(d: &StateDist, rng: &mut StreamRng) -> Result<Part> {
    Ok(match d {
        StateDist::Normal { mean, sd } => Part::Value(mean + sd * standard_normal(rng)),
        StateDist::NormalLinearMean { .. } => {
            return Err(Error::invalid(
                "covariate-dependent emissions need externally supplied covariates; they cannot be simulated standalone",
            ))
        }
        StateDist::Gamma { shape, scale } => {
            let g = GammaDist::new(*shape, *scale)
                .map_err(|e| Error::invalid(format!("gamma emission: {e}")))?;
            Part::Value(g.sample(rng))
        }
        StateDist::VonMises { mean, kappa } => Part::Value(draw_von_mises(*mean, *kappa, rng)),
        StateDist::Poisson { rate } => {
            let p = Poisson::new(*rate)
                .map_err(|e| Error::invalid(format!("poisson emission: {e}")))?;
            Part::Value(p.sample(rng))
        }
        StateDist::Bernoulli { prob } => Part::Value(if rng.gen::<f64>() < *prob { 1.0 } else { 0.0 }),
        StateDist::EventIndicator => Part::Event,
    })
}

fn sample_value_dist(d: &ValueDist, g: f64, rng: &mut StreamRng) -> f64 {
    match d {
        ValueDist::Normal { sd } => g + sd * standard_normal(rng),
        ValueDist::SvScaledNormal { mu, beta } => {
            mu + beta * (0.5 * g).exp() * standard_normal(rng)
        }
        ValueDist::BernoulliOffset { beta0 } => {
            let p = 1.0 / (1.0 + (-(beta0 + g)).exp());
            if rng.gen::<f64>() < p {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn collect_parts(family: &EmissionFamily, state: usize, rng: &mut StreamRng, out: &mut Vec<Part>) -> Result<()> {
    match family {
        EmissionFamily::PerState(dists) => {
            let d = dists.get(state).ok_or_else(|| {
                Error::invalid(format!(
                    "state index {state} out of range for {} states",
                    dists.len()
                ))
            })?;
            out.push(sample_state_dist(d, rng)?);
            Ok(())
        }
        EmissionFamily::Product(comps) => {
            for c in comps {
                collect_parts(c, state, rng, out)?;
            }
            Ok(())
        }
        EmissionFamily::StateValue(_) => Err(Error::invalid(
            "state-value emissions are sampled from a latent value, not a state index",
        )),
        EmissionFamily::Unmarked => Ok(()),
    }
}

/// One observation record from a discrete state's emission family. An
/// event-indicator component makes the whole record an event marker.
fn sample_discrete_obs(family: &EmissionFamily, state: usize, rng: &mut StreamRng) -> Result<Observation> {
    let mut parts = Vec::new();
    collect_parts(family, state, rng, &mut parts)?;
    if parts.iter().any(|p| matches!(p, Part::Event)) {
        return Ok(Observation::event_marker());
    }
    let values: Vec<f64> = parts
        .iter()
        .map(|p| match p {
            Part::Value(v) => *v,
            Part::Event => unreachable!(),
        })
        .collect();
    if values.is_empty() {
        return Ok(Observation::empty());
    }
    let missing = vec![false; values.len()];
    Ok(Observation {
        values,
        missing,
        event: false,
        covariates: Vec::new(),
    })
}

/// Latent state sequence of a discrete-time Markov chain, zero-based.
pub fn sim_markov_chain(
    gamma: &TransitionMatrix,
    delta1: &ProbabilityVector,
    t_len: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    sim_markov_chain_rng(gamma, delta1, t_len, &mut stream_rng(seed, 0))
}

pub fn sim_markov_chain_rng(
    gamma: &TransitionMatrix,
    delta1: &ProbabilityVector,
    t_len: usize,
    rng: &mut StreamRng,
) -> Result<Vec<usize>> {
    if gamma.n() != delta1.n() {
        return Err(Error::invalid(format!(
            "transition matrix has {} states, initial distribution {}",
            gamma.n(),
            delta1.n()
        )));
    }
    let mut states = Vec::with_capacity(t_len);
    if t_len == 0 {
        return Ok(states);
    }
    let mut s = categorical(delta1.as_vector().iter().copied(), rng.gen());
    states.push(s);
    let g = gamma.as_matrix();
    for _ in 1..t_len {
        s = categorical(g.row(s).iter().copied(), rng.gen());
        states.push(s);
    }
    Ok(states)
}

/// Piecewise-constant trajectory of a continuous-time chain: `states[k]` is
/// entered at `times[k]`, with `times[0] = 0`. An absorbing state ends the
/// jumps.
#[derive(Debug, Clone, PartialEq)]
pub struct CtmcPath {
    pub times: Vec<f64>,
    pub states: Vec<usize>,
}

impl CtmcPath {
    /// State occupied at time `t` (the path is right-continuous).
    pub fn state_at(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&s| s <= t);
        self.states[k.saturating_sub(1)]
    }

    /// Total time spent in each of `n` states up to `horizon`.
    pub fn occupancy(&self, n: usize, horizon: f64) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (k, &s) in self.states.iter().enumerate() {
            let start = self.times[k];
            let end = if k + 1 < self.times.len() {
                self.times[k + 1].min(horizon)
            } else {
                horizon
            };
            if end > start {
                out[s] += end - start;
            }
        }
        out
    }
}

/// Exact jump-chain simulation: exponential holding time at rate -q_ii,
/// then a jump to j with probability q_ij / -q_ii.
pub fn sim_ctmc(
    q: &GeneratorMatrix,
    delta: &ProbabilityVector,
    horizon: f64,
    seed: u64,
) -> Result<CtmcPath> {
    sim_ctmc_rng(q, delta, horizon, &mut stream_rng(seed, 0))
}

pub fn sim_ctmc_rng(
    q: &GeneratorMatrix,
    delta: &ProbabilityVector,
    horizon: f64,
    rng: &mut StreamRng,
) -> Result<CtmcPath> {
    let n = q.n();
    if n != delta.n() {
        return Err(Error::invalid(format!(
            "generator has {} states, initial distribution {}",
            n,
            delta.n()
        )));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::invalid(format!(
            "horizon must be nonnegative and finite, got {horizon}"
        )));
    }
    let qm = q.as_matrix();
    let mut s = categorical(delta.as_vector().iter().copied(), rng.gen());
    let mut t = 0.0;
    let mut path = CtmcPath {
        times: vec![0.0],
        states: vec![s],
    };
    loop {
        let rate = -qm[(s, s)];
        if rate <= 0.0 {
            break;
        }
        t += draw_exponential(rate, rng)?;
        if t >= horizon {
            break;
        }
        let u: f64 = rng.gen();
        let row = (0..n).map(|j| if j == s { 0.0 } else { qm[(s, j)] / rate });
        s = categorical(row, u);
        path.times.push(t);
        path.states.push(s);
    }
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuMethod {
    /// s_{k+1} = s_k + theta (mu - s_k) step + sigma sqrt(step) z_k.
    EulerMaruyama,
    /// Draws from the Gaussian transition density; no discretization error.
    Exact,
}

/// Path sampled at multiples of `step` on [0, horizon], starting at `s0`.
/// Accepts sigma = 0 (noiseless mean reversion), unlike the fitting-side
/// domain checks.
pub fn sim_ou_path(
    p: &OUParams,
    s0: f64,
    horizon: f64,
    step: f64,
    method: OuMethod,
    seed: u64,
) -> Result<Vec<f64>> {
    sim_ou_path_rng(p, s0, horizon, step, method, &mut stream_rng(seed, 0))
}

pub fn sim_ou_path_rng(
    p: &OUParams,
    s0: f64,
    horizon: f64,
    step: f64,
    method: OuMethod,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    if !(p.theta > 0.0 && p.theta.is_finite() && p.mu.is_finite()) || !(p.sigma >= 0.0 && p.sigma.is_finite()) {
        return Err(Error::invalid(
            "OU simulation needs theta > 0, finite mu, and sigma >= 0",
        ));
    }
    if !(step > 0.0 && step.is_finite() && horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::invalid(
            "OU simulation needs a positive step and nonnegative horizon",
        ));
    }
    let n_steps = (horizon / step + 1e-9).floor() as usize;
    let mut path = Vec::with_capacity(n_steps + 1);
    let mut s = s0;
    path.push(s);
    match method {
        OuMethod::EulerMaruyama => {
            let noise = p.sigma * step.sqrt();
            for _ in 0..n_steps {
                s += p.theta * (p.mu - s) * step + noise * standard_normal(rng);
                path.push(s);
            }
        }
        OuMethod::Exact => {
            let sd = p.conditional_var(step).sqrt();
            for _ in 0..n_steps {
                s = p.conditional_mean(s, step) + sd * standard_normal(rng);
                path.push(s);
            }
        }
    }
    Ok(path)
}

/// Hidden Markov model draw: the latent chain plus one observation per step.
#[derive(Debug, Clone, PartialEq)]
pub struct SimHmm {
    pub states: Vec<usize>,
    pub obs: Vec<Observation>,
}

pub fn sim_hmm(
    gamma: &TransitionMatrix,
    delta1: &ProbabilityVector,
    emissions: &EmissionFamily,
    t_len: usize,
    seed: u64,
) -> Result<SimHmm> {
    sim_hmm_rng(gamma, delta1, emissions, t_len, &mut stream_rng(seed, 0))
}

pub fn sim_hmm_rng(
    gamma: &TransitionMatrix,
    delta1: &ProbabilityVector,
    emissions: &EmissionFamily,
    t_len: usize,
    rng: &mut StreamRng,
) -> Result<SimHmm> {
    emissions.validate(gamma.n())?;
    let states = sim_markov_chain_rng(gamma, delta1, t_len, rng)?;
    let mut obs = Vec::with_capacity(t_len);
    for &s in &states {
        obs.push(sample_discrete_obs(emissions, s, rng)?);
    }
    Ok(SimHmm { states, obs })
}

/// State-space model draw: the continuous latent path (not discretized)
/// plus one observation per step.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSsm {
    pub latent: Vec<f64>,
    pub obs: Vec<Observation>,
}

/// AR(1) latent process started from its stationary law.
pub fn sim_ssm_ar1(
    latent: &AR1Params,
    obs: &ValueDist,
    t_len: usize,
    seed: u64,
) -> Result<SimSsm> {
    sim_ssm_ar1_rng(latent, obs, t_len, &mut stream_rng(seed, 0))
}

pub fn sim_ssm_ar1_rng(
    latent: &AR1Params,
    obs: &ValueDist,
    t_len: usize,
    rng: &mut StreamRng,
) -> Result<SimSsm> {
    latent.validate()?;
    obs.validate()?;
    let mut g_path = Vec::with_capacity(t_len);
    let mut x_path = Vec::with_capacity(t_len);
    if t_len == 0 {
        return Ok(SimSsm { latent: g_path, obs: x_path });
    }
    let mut g = latent.mu + latent.stationary_var().sqrt() * standard_normal(rng);
    for _ in 0..t_len {
        g_path.push(g);
        x_path.push(Observation::scalar(sample_value_dist(obs, g, rng)));
        g = latent.mu + latent.phi * (g - latent.mu) + latent.sigma * standard_normal(rng);
    }
    Ok(SimSsm { latent: g_path, obs: x_path })
}

/// OU latent process observed at the given (strictly increasing) times,
/// started from its stationary law and advanced by exact transitions.
pub fn sim_ctssm_ou(
    latent: &OUParams,
    obs: &ValueDist,
    times: &[f64],
    seed: u64,
) -> Result<SimSsm> {
    sim_ctssm_ou_rng(latent, obs, times, &mut stream_rng(seed, 0))
}

pub fn sim_ctssm_ou_rng(
    latent: &OUParams,
    obs: &ValueDist,
    times: &[f64],
    rng: &mut StreamRng,
) -> Result<SimSsm> {
    latent.validate()?;
    obs.validate()?;
    check_increasing(times)?;
    let mut g_path = Vec::with_capacity(times.len());
    let mut x_path = Vec::with_capacity(times.len());
    if times.is_empty() {
        return Ok(SimSsm { latent: g_path, obs: x_path });
    }
    let mut s = latent.mu + latent.stationary_var().sqrt() * standard_normal(rng);
    g_path.push(s);
    x_path.push(Observation::scalar(sample_value_dist(obs, s, rng)));
    for w in times.windows(2) {
        let dt = w[1] - w[0];
        s = latent.conditional_mean(s, dt) + latent.conditional_var(dt).sqrt() * standard_normal(rng);
        g_path.push(s);
        x_path.push(Observation::scalar(sample_value_dist(obs, s, rng)));
    }
    Ok(SimSsm { latent: g_path, obs: x_path })
}

fn check_increasing(times: &[f64]) -> Result<()> {
    for w in times.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::invalid("observation times must be strictly increasing"));
        }
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("observation times must be finite"));
    }
    Ok(())
}

/// Continuous-time HMM draw: latent jump path plus snapshot observations at
/// the requested times.
#[derive(Debug, Clone, PartialEq)]
pub struct SimCtHmm {
    /// State at each observation time.
    pub states: Vec<usize>,
    pub obs: Vec<Observation>,
    pub path: CtmcPath,
}

pub fn sim_cthmm(
    q: &GeneratorMatrix,
    delta: &ProbabilityVector,
    emissions: &EmissionFamily,
    times: &[f64],
    seed: u64,
) -> Result<SimCtHmm> {
    sim_cthmm_rng(q, delta, emissions, times, &mut stream_rng(seed, 0))
}

pub fn sim_cthmm_rng(
    q: &GeneratorMatrix,
    delta: &ProbabilityVector,
    emissions: &EmissionFamily,
    times: &[f64],
    rng: &mut StreamRng,
) -> Result<SimCtHmm> {
    emissions.validate(q.n())?;
    check_increasing(times)?;
    if times.first().is_some_and(|&t| t < 0.0) {
        return Err(Error::invalid("observation times must be nonnegative"));
    }
    let horizon = times.last().copied().unwrap_or(0.0);
    let path = sim_ctmc_rng(q, delta, horizon, rng)?;
    let mut states = Vec::with_capacity(times.len());
    let mut obs = Vec::with_capacity(times.len());
    for &t in times {
        let s = path.state_at(t);
        states.push(s);
        obs.push(sample_discrete_obs(emissions, s, rng)?);
    }
    Ok(SimCtHmm { states, obs, path })
}

/// Point-process draw: event times with the latent state at each event,
/// optional marks, and the underlying jump path.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMmpp {
    pub times: Vec<f64>,
    pub marks: Vec<Observation>,
    /// Latent state at each event time.
    pub states: Vec<usize>,
    pub path: CtmcPath,
}

/// Events by thinning a rate-lambda_max Poisson process against the
/// simulated jump path, which gives exact event times across state
/// switches. Marks are drawn from the emission family of the state
/// occupied at the event instant.
pub fn sim_mmpp(
    q: &GeneratorMatrix,
    rates: &[f64],
    horizon: f64,
    marks: Option<&EmissionFamily>,
    seed: u64,
) -> Result<SimMmpp> {
    sim_mmpp_rng(q, rates, horizon, marks, &mut stream_rng(seed, 0))
}

pub fn sim_mmpp_rng(
    q: &GeneratorMatrix,
    rates: &[f64],
    horizon: f64,
    marks: Option<&EmissionFamily>,
    rng: &mut StreamRng,
) -> Result<SimMmpp> {
    let n = q.n();
    if rates.len() != n {
        return Err(Error::invalid(format!(
            "expected {n} event rates, got {}",
            rates.len()
        )));
    }
    if rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
        return Err(Error::invalid("event rates must be nonnegative and finite"));
    }
    if let Some(fam) = marks {
        fam.validate(n)?;
    }
    let delta = crate::linalg::stationary_continuous(q)?;
    let path = sim_ctmc_rng(q, &delta, horizon, rng)?;
    let mut out = SimMmpp {
        times: Vec::new(),
        marks: Vec::new(),
        states: Vec::new(),
        path,
    };
    let lambda_max = rates.iter().cloned().fold(0.0, f64::max);
    if lambda_max == 0.0 {
        return Ok(out);
    }
    let mut t = 0.0;
    loop {
        t += draw_exponential(lambda_max, rng)?;
        if t >= horizon {
            break;
        }
        let s = out.path.state_at(t);
        if rng.gen::<f64>() < rates[s] / lambda_max {
            out.times.push(t);
            out.states.push(s);
            let mark = match marks {
                Some(fam) => sample_discrete_obs(fam, s, rng)?,
                None => Observation::event_marker(),
            };
            out.marks.push(mark);
        }
    }
    Ok(out)
}
