//! Bijection between natural model parameters and the flat unconstrained
//! vector the optimizer searches. Positives map through log, the AR
//! persistence through atanh, probabilities through (multinomial) logit
//! with a pinned reference cell, and unconstrained reals pass through.

use nalgebra::{DMatrix, DVector};

use super::{InitMode, ModelParams, ModelSpec, TpmParams};
use crate::emissions::{EmissionFamily, StateDist, ValueDist};
use crate::error::{Error, Result};
use crate::grid::{AR1Params, OUParams};
use crate::linalg::{softmax, ProbabilityVector, TransitionMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Free,
    Log,
    Atanh,
    Logit,
}

impl Transform {
    pub fn to_unconstrained(self, v: f64) -> Result<f64> {
        if !v.is_finite() {
            return Err(Error::invalid(format!("parameter value {v} is not finite")));
        }
        match self {
            Transform::Free => Ok(v),
            Transform::Log => {
                if v <= 0.0 {
                    Err(Error::invalid(format!("expected a positive value, got {v}")))
                } else {
                    Ok(v.ln())
                }
            }
            Transform::Atanh => {
                if v <= -1.0 || v >= 1.0 {
                    Err(Error::invalid(format!(
                        "expected a value in (-1,1), got {v}"
                    )))
                } else {
                    Ok(v.atanh())
                }
            }
            Transform::Logit => {
                if v <= 0.0 || v >= 1.0 {
                    Err(Error::invalid(format!("expected a value in (0,1), got {v}")))
                } else {
                    Ok((v / (1.0 - v)).ln())
                }
            }
        }
    }

    pub fn to_natural(self, x: f64) -> f64 {
        match self {
            Transform::Free => x,
            Transform::Log => x.exp(),
            Transform::Atanh => x.tanh(),
            Transform::Logit => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
        }
    }
}

/// One slice of the unconstrained vector.
#[derive(Debug, Clone)]
pub enum Segment {
    Scalar {
        name: String,
        transform: Transform,
    },
    /// A probability row over `names.len()` cells; the reference cell's
    /// logit is pinned at zero, leaving `names.len() - 1` stored values.
    Mlogit {
        names: Vec<String>,
        ref_index: usize,
    },
}

impl Segment {
    pub fn len(&self) -> usize {
        match self {
            Segment::Scalar { .. } => 1,
            Segment::Mlogit { names, .. } => names.len() - 1,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Layout {
    pub segments: Vec<Segment>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.len()).sum()
    }
}

/// Natural probabilities from a stored logit row starting at `offset`.
pub(super) fn unpack_row(x: &[f64], offset: usize, cells: usize, ref_index: usize) -> Vec<f64> {
    let mut etas = Vec::with_capacity(cells);
    let mut idx = offset;
    for c in 0..cells {
        if c == ref_index {
            etas.push(0.0);
        } else {
            etas.push(x[idx]);
            idx += 1;
        }
    }
    softmax(&etas)
}

fn pack_row(probs: &[f64], ref_index: usize) -> Result<Vec<f64>> {
    let p_ref = probs[ref_index];
    if p_ref <= 0.0 {
        return Err(Error::invalid(
            "probability row has a zero reference cell; cannot parameterize",
        ));
    }
    let mut out = Vec::with_capacity(probs.len() - 1);
    for (c, &p) in probs.iter().enumerate() {
        if c == ref_index {
            continue;
        }
        if p <= 0.0 {
            return Err(Error::invalid(
                "probability row has a zero cell; cannot parameterize",
            ));
        }
        out.push((p / p_ref).ln());
    }
    Ok(out)
}

struct Packer {
    segments: Vec<Segment>,
    x: Vec<f64>,
}

impl Packer {
    fn new() -> Self {
        Packer {
            segments: Vec::new(),
            x: Vec::new(),
        }
    }

    fn scalar(&mut self, name: impl Into<String>, transform: Transform, value: f64) -> Result<()> {
        let name = name.into();
        let u = transform
            .to_unconstrained(value)
            .map_err(|e| Error::invalid(format!("{name}: {e}")))?;
        self.segments.push(Segment::Scalar { name, transform });
        self.x.push(u);
        Ok(())
    }

    fn mlogit(&mut self, names: Vec<String>, ref_index: usize, probs: &[f64]) -> Result<()> {
        let etas = pack_row(probs, ref_index)
            .map_err(|e| Error::invalid(format!("{}: {e}", names[ref_index])))?;
        self.x.extend_from_slice(&etas);
        self.segments.push(Segment::Mlogit { names, ref_index });
        Ok(())
    }
}

struct Cursor<'a> {
    x: &'a [f64],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self) -> Result<f64> {
        let v = *self
            .x
            .get(self.pos)
            .ok_or_else(|| Error::invalid("parameter vector is too short for the model"))?;
        self.pos += 1;
        Ok(v)
    }

    fn take_row(&mut self, cells: usize, ref_index: usize) -> Result<Vec<f64>> {
        if self.pos + (cells - 1) > self.x.len() {
            return Err(Error::invalid("parameter vector is too short for the model"));
        }
        let probs = unpack_row(self.x, self.pos, cells, ref_index);
        self.pos += cells - 1;
        Ok(probs)
    }
}

fn pack_state_dist(prefix: &str, d: &StateDist, p: &mut Packer) -> Result<()> {
    match d {
        StateDist::Normal { mean, sd } => {
            p.scalar(format!("{prefix}.mean"), Transform::Free, *mean)?;
            p.scalar(format!("{prefix}.sd"), Transform::Log, *sd)
        }
        StateDist::NormalLinearMean { intercept, slope, sd, .. } => {
            p.scalar(format!("{prefix}.intercept"), Transform::Free, *intercept)?;
            p.scalar(format!("{prefix}.slope"), Transform::Free, *slope)?;
            p.scalar(format!("{prefix}.sd"), Transform::Log, *sd)
        }
        StateDist::Gamma { shape, scale } => {
            p.scalar(format!("{prefix}.shape"), Transform::Log, *shape)?;
            p.scalar(format!("{prefix}.scale"), Transform::Log, *scale)
        }
        StateDist::VonMises { mean, kappa } => {
            p.scalar(format!("{prefix}.mean"), Transform::Free, *mean)?;
            p.scalar(format!("{prefix}.kappa"), Transform::Log, *kappa)
        }
        StateDist::Poisson { rate } => p.scalar(format!("{prefix}.rate"), Transform::Log, *rate),
        StateDist::Bernoulli { prob } => {
            p.scalar(format!("{prefix}.prob"), Transform::Logit, *prob)
        }
        StateDist::EventIndicator => Ok(()),
    }
}

fn unpack_state_dist(template: &StateDist, cur: &mut Cursor<'_>) -> Result<StateDist> {
    Ok(match template {
        StateDist::Normal { .. } => StateDist::Normal {
            mean: cur.take()?,
            sd: cur.take()?.exp(),
        },
        StateDist::NormalLinearMean { cov, .. } => StateDist::NormalLinearMean {
            intercept: cur.take()?,
            slope: cur.take()?,
            cov: *cov,
            sd: cur.take()?.exp(),
        },
        StateDist::Gamma { .. } => StateDist::Gamma {
            shape: cur.take()?.exp(),
            scale: cur.take()?.exp(),
        },
        StateDist::VonMises { .. } => StateDist::VonMises {
            mean: cur.take()?,
            kappa: cur.take()?.exp(),
        },
        StateDist::Poisson { .. } => StateDist::Poisson {
            rate: cur.take()?.exp(),
        },
        StateDist::Bernoulli { .. } => StateDist::Bernoulli {
            prob: Transform::Logit.to_natural(cur.take()?),
        },
        StateDist::EventIndicator => StateDist::EventIndicator,
    })
}

fn pack_value_dist(prefix: &str, d: &ValueDist, p: &mut Packer) -> Result<()> {
    match d {
        ValueDist::Normal { sd } => p.scalar(format!("{prefix}.sd"), Transform::Log, *sd),
        ValueDist::SvScaledNormal { mu, beta } => {
            p.scalar(format!("{prefix}.mu"), Transform::Free, *mu)?;
            p.scalar(format!("{prefix}.beta"), Transform::Log, *beta)
        }
        ValueDist::BernoulliOffset { beta0 } => {
            p.scalar(format!("{prefix}.beta0"), Transform::Free, *beta0)
        }
    }
}

fn unpack_value_dist(template: &ValueDist, cur: &mut Cursor<'_>) -> Result<ValueDist> {
    Ok(match template {
        ValueDist::Normal { .. } => ValueDist::Normal {
            sd: cur.take()?.exp(),
        },
        ValueDist::SvScaledNormal { .. } => ValueDist::SvScaledNormal {
            mu: cur.take()?,
            beta: cur.take()?.exp(),
        },
        ValueDist::BernoulliOffset { .. } => ValueDist::BernoulliOffset {
            beta0: cur.take()?,
        },
    })
}

fn pack_family(prefix: &str, fam: &EmissionFamily, p: &mut Packer) -> Result<()> {
    match fam {
        EmissionFamily::PerState(dists) => {
            for (j, d) in dists.iter().enumerate() {
                pack_state_dist(&format!("{prefix}state[{}]", j + 1), d, p)?;
            }
            Ok(())
        }
        EmissionFamily::StateValue(v) => pack_value_dist(&format!("{prefix}obs"), v, p),
        EmissionFamily::Product(comps) => {
            for (k, c) in comps.iter().enumerate() {
                pack_family(&format!("{prefix}comp[{}].", k + 1), c, p)?;
            }
            Ok(())
        }
        EmissionFamily::Unmarked => Ok(()),
    }
}

fn unpack_family(template: &EmissionFamily, cur: &mut Cursor<'_>) -> Result<EmissionFamily> {
    Ok(match template {
        EmissionFamily::PerState(dists) => EmissionFamily::PerState(
            dists
                .iter()
                .map(|d| unpack_state_dist(d, cur))
                .collect::<Result<Vec<_>>>()?,
        ),
        EmissionFamily::StateValue(v) => EmissionFamily::StateValue(unpack_value_dist(v, cur)?),
        EmissionFamily::Product(comps) => EmissionFamily::Product(
            comps
                .iter()
                .map(|c| unpack_family(c, cur))
                .collect::<Result<Vec<_>>>()?,
        ),
        EmissionFamily::Unmarked => EmissionFamily::Unmarked,
    })
}

/// The latent-process mean is only identifiable when the emission reads the
/// state value directly; under an exponential-type link it absorbs into the
/// link intercept and is held fixed.
fn latent_mean_free(obs: &ValueDist) -> bool {
    matches!(obs, ValueDist::Normal { .. })
}

fn pack_ar1(latent: &AR1Params, obs: &ValueDist, p: &mut Packer) -> Result<()> {
    p.scalar("phi", Transform::Atanh, latent.phi)?;
    if latent_mean_free(obs) {
        p.scalar("mu", Transform::Free, latent.mu)?;
    }
    p.scalar("sigma", Transform::Log, latent.sigma)
}

fn pack_ou(latent: &OUParams, mean_free: bool, p: &mut Packer) -> Result<()> {
    p.scalar("theta", Transform::Log, latent.theta)?;
    if mean_free {
        p.scalar("mu", Transform::Free, latent.mu)?;
    }
    p.scalar("sigma", Transform::Log, latent.sigma)
}

fn pack_init(
    init_mode: &InitMode,
    init: &Option<ProbabilityVector>,
    n: usize,
    p: &mut Packer,
) -> Result<()> {
    if let (InitMode::Estimated, Some(d)) = (init_mode, init) {
        let names = (0..n).map(|j| format!("delta[{}]", j + 1)).collect();
        let probs: Vec<f64> = d.as_vector().iter().copied().collect();
        p.mlogit(names, 0, &probs)?;
    }
    Ok(())
}

fn unpack_init(
    init_mode: &InitMode,
    n: usize,
    cur: &mut Cursor<'_>,
) -> Result<Option<ProbabilityVector>> {
    if matches!(init_mode, InitMode::Estimated) {
        let probs = cur.take_row(n, 0)?;
        Ok(Some(ProbabilityVector::new(DVector::from_vec(probs))?))
    } else {
        Ok(None)
    }
}

fn rate_pair_names(pairs: &[(usize, usize)], base: &str) -> Vec<String> {
    pairs
        .iter()
        .map(|(i, j)| format!("{base}[{}->{}]", i + 1, j + 1))
        .collect()
}

/// Flattens natural parameters into the unconstrained vector, together with
/// the layout describing every slice.
pub fn pack(spec: &ModelSpec, params: &ModelParams) -> Result<(Layout, DVector<f64>)> {
    super::validate(spec, params)?;
    let mut p = Packer::new();
    match (spec, params) {
        (ModelSpec::Hmm(s), ModelParams::Hmm { tpm, emissions, init }) => {
            match tpm {
                TpmParams::Homogeneous(g) => {
                    let n = s.n_states;
                    for i in 0..n {
                        let names = (0..n)
                            .map(|j| format!("gamma[{},{}]", i + 1, j + 1))
                            .collect();
                        let row: Vec<f64> = g.as_matrix().row(i).iter().copied().collect();
                        p.mlogit(names, i, &row)?;
                    }
                }
                TpmParams::CovariateDriven(beta) => {
                    let n = s.n_states;
                    let mut k = 0;
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            for c in 0..beta.ncols() {
                                p.scalar(
                                    format!("tpm[{}->{}].b{}", i + 1, j + 1, c),
                                    Transform::Free,
                                    beta[(k, c)],
                                )?;
                            }
                            k += 1;
                        }
                    }
                }
            }
            pack_family("", emissions, &mut p)?;
            pack_init(&s.init, init, s.n_states, &mut p)?;
        }
        (ModelSpec::SsmAr1(_), ModelParams::SsmAr1 { latent, obs }) => {
            pack_ar1(latent, obs, &mut p)?;
            pack_value_dist("obs", obs, &mut p)?;
        }
        (ModelSpec::CtHmm(s), ModelParams::CtHmm { rates, emissions, init }) => {
            for (name, &r) in rate_pair_names(&s.mask.free_pairs(), "q")
                .into_iter()
                .zip(rates.iter())
            {
                p.scalar(name, Transform::Log, r)?;
            }
            pack_family("", emissions, &mut p)?;
            pack_init(&s.init, init, s.mask.n(), &mut p)?;
        }
        (ModelSpec::CtSsmOu(_), ModelParams::CtSsmOu { latent, obs }) => {
            pack_ou(latent, latent_mean_free(obs), &mut p)?;
            pack_value_dist("obs", obs, &mut p)?;
        }
        (ModelSpec::Mmpp(s), ModelParams::Mmpp { switch_rates, event_rates, marks }) => {
            for (name, &r) in rate_pair_names(&s.mask.free_pairs(), "q")
                .into_iter()
                .zip(switch_rates.iter())
            {
                p.scalar(name, Transform::Log, r)?;
            }
            for (j, (&rate, &zeroed)) in event_rates.iter().zip(s.zero_rates.iter()).enumerate()
            {
                if !zeroed {
                    p.scalar(format!("lambda[{}]", j + 1), Transform::Log, rate)?;
                }
            }
            pack_family("", marks, &mut p)?;
        }
        (ModelSpec::CoxOuMmpp(_), ModelParams::CoxOuMmpp { latent }) => {
            pack_ou(latent, true, &mut p)?;
        }
        _ => unreachable!("validate checked the class pairing"),
    }
    Ok((
        Layout {
            segments: p.segments,
        },
        DVector::from_vec(p.x),
    ))
}

/// Rebuilds natural parameters from an unconstrained vector. The template
/// supplies every fixed quantity (covariate indices, zero rates, fixed
/// latent means) and must match the spec used for packing.
pub fn unpack(spec: &ModelSpec, template: &ModelParams, x: &DVector<f64>) -> Result<ModelParams> {
    let mut cur = Cursor {
        x: x.as_slice(),
        pos: 0,
    };
    let out = match (spec, template) {
        (ModelSpec::Hmm(s), ModelParams::Hmm { tpm, emissions, .. }) => {
            let n = s.n_states;
            let tpm = match tpm {
                TpmParams::Homogeneous(_) => {
                    let mut g = DMatrix::zeros(n, n);
                    for i in 0..n {
                        let row = cur.take_row(n, i)?;
                        for j in 0..n {
                            g[(i, j)] = row[j];
                        }
                    }
                    TpmParams::Homogeneous(TransitionMatrix::new(g)?)
                }
                TpmParams::CovariateDriven(beta) => {
                    let mut b = DMatrix::zeros(beta.nrows(), beta.ncols());
                    for k in 0..beta.nrows() {
                        for c in 0..beta.ncols() {
                            b[(k, c)] = cur.take()?;
                        }
                    }
                    TpmParams::CovariateDriven(b)
                }
            };
            let emissions = unpack_family(emissions, &mut cur)?;
            let init = unpack_init(&s.init, n, &mut cur)?;
            ModelParams::Hmm {
                tpm,
                emissions,
                init,
            }
        }
        (ModelSpec::SsmAr1(_), ModelParams::SsmAr1 { latent, obs }) => {
            let phi = cur.take()?.tanh();
            let mu = if latent_mean_free(obs) {
                cur.take()?
            } else {
                latent.mu
            };
            let sigma = cur.take()?.exp();
            let obs = unpack_value_dist(obs, &mut cur)?;
            ModelParams::SsmAr1 {
                latent: AR1Params { phi, mu, sigma },
                obs,
            }
        }
        (ModelSpec::CtHmm(s), ModelParams::CtHmm { emissions, .. }) => {
            let rates = (0..s.mask.n_free())
                .map(|_| cur.take().map(f64::exp))
                .collect::<Result<Vec<_>>>()?;
            let emissions = unpack_family(emissions, &mut cur)?;
            let init = unpack_init(&s.init, s.mask.n(), &mut cur)?;
            ModelParams::CtHmm {
                rates,
                emissions,
                init,
            }
        }
        (ModelSpec::CtSsmOu(_), ModelParams::CtSsmOu { latent, obs }) => {
            let theta = cur.take()?.exp();
            let mu = if latent_mean_free(obs) {
                cur.take()?
            } else {
                latent.mu
            };
            let sigma = cur.take()?.exp();
            let obs = unpack_value_dist(obs, &mut cur)?;
            ModelParams::CtSsmOu {
                latent: OUParams { theta, mu, sigma },
                obs,
            }
        }
        (ModelSpec::Mmpp(s), ModelParams::Mmpp { marks, .. }) => {
            let switch_rates = (0..s.mask.n_free())
                .map(|_| cur.take().map(f64::exp))
                .collect::<Result<Vec<_>>>()?;
            let mut event_rates = Vec::with_capacity(s.mask.n());
            for &zeroed in &s.zero_rates {
                if zeroed {
                    event_rates.push(0.0);
                } else {
                    event_rates.push(cur.take()?.exp());
                }
            }
            let marks = unpack_family(marks, &mut cur)?;
            ModelParams::Mmpp {
                switch_rates,
                event_rates,
                marks,
            }
        }
        (ModelSpec::CoxOuMmpp(_), ModelParams::CoxOuMmpp { .. }) => {
            let theta = cur.take()?.exp();
            let mu = cur.take()?;
            let sigma = cur.take()?.exp();
            ModelParams::CoxOuMmpp {
                latent: OUParams { theta, mu, sigma },
            }
        }
        _ => {
            return Err(Error::invalid(
                "parameter template does not match the model class",
            ))
        }
    };
    if cur.pos != x.len() {
        return Err(Error::invalid(format!(
            "parameter vector has {} entries, the model uses {}",
            x.len(),
            cur.pos
        )));
    }
    Ok(out)
}
