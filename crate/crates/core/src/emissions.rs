//! State-dependent observation densities. A family maps a latent state (a
//! discrete label or a grid midpoint) and one observation record to a log
//! density; `emission_diag` evaluates the whole state space at once and is
//! what the forward recursion multiplies in at each step.
//!
//! Conventions: missing components contribute density one, out-of-support
//! values give log density negative infinity, and the result is never NaN.

use crate::error::{Error, Result};

/// One observation record. `values` and `missing` are aligned per component;
/// integer-valued families read their component as a float. `event` is the
/// absorbing-event marker (for example a recorded death); a record with
/// `event = false` is evidence the event has not happened yet. `covariates`
/// carries per-record predictors referenced by index.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
    pub event: bool,
    pub covariates: Vec<f64>,
}

impl Observation {
    /// Fully observed single-component record.
    pub fn scalar(x: f64) -> Self {
        Observation {
            values: vec![x],
            missing: vec![false],
            event: false,
            covariates: Vec::new(),
        }
    }

    /// Single-component record with the value missing.
    pub fn missing_scalar() -> Self {
        Observation {
            values: vec![0.0],
            missing: vec![true],
            event: false,
            covariates: Vec::new(),
        }
    }

    /// Event-marker record (no measured components).
    pub fn event_marker() -> Self {
        Observation {
            values: vec![0.0],
            missing: vec![true],
            event: true,
            covariates: Vec::new(),
        }
    }

    /// Record with no observable content at all; every state gets density 1.
    pub fn empty() -> Self {
        Observation {
            values: Vec::new(),
            missing: Vec::new(),
            event: false,
            covariates: Vec::new(),
        }
    }

    fn component(&self, k: usize) -> (f64, bool) {
        if k < self.values.len() {
            (self.values[k], self.missing[k])
        } else {
            (0.0, true)
        }
    }
}

/// Distribution of one discrete state's observation component.
#[derive(Debug, Clone, PartialEq)]
pub enum StateDist {
    Normal { mean: f64, sd: f64 },
    /// Normal whose mean is linear in a per-record covariate:
    /// mean = intercept + slope * covariates[cov].
    NormalLinearMean { intercept: f64, slope: f64, cov: usize, sd: f64 },
    Gamma { shape: f64, scale: f64 },
    VonMises { mean: f64, kappa: f64 },
    Poisson { rate: f64 },
    Bernoulli { prob: f64 },
    /// Density one exactly when the event marker is set; zero otherwise.
    /// Used for absorbing states whose occupancy is observed directly.
    EventIndicator,
}

/// Distribution parameterized by the continuous latent value `g` (a grid
/// midpoint in discretized state-space models).
#[derive(Debug, Clone, PartialEq)]
pub enum ValueDist {
    /// x ~ N(g, sd^2): a noisy direct measurement of the latent value.
    Normal { sd: f64 },
    /// x ~ N(mu, (beta * exp(g/2))^2): scale driven by the latent log-variance.
    SvScaledNormal { mu: f64, beta: f64 },
    /// x in {0,1} with logit(P(x=1)) = beta0 + g.
    BernoulliOffset { beta0: f64 },
}

/// Observation model for a whole state space.
#[derive(Debug, Clone, PartialEq)]
pub enum EmissionFamily {
    /// One distribution per discrete state; states may use different kinds.
    PerState(Vec<StateDist>),
    /// One value-parameterized distribution shared across grid cells.
    StateValue(ValueDist),
    /// Independent components, one sub-family per observation component.
    Product(Vec<EmissionFamily>),
    /// No marks: every state has density one (point-process events without
    /// an observed mark).
    Unmarked,
}

/// Latent state argument for a single-state density query.
#[derive(Debug, Clone, Copy)]
pub enum StateRef {
    Index(usize),
    Value(f64),
}

/// State space over which `emission_diag` evaluates.
#[derive(Debug, Clone, Copy)]
pub enum StateSpace<'a> {
    Discrete(usize),
    Grid(&'a [f64]),
}

impl StateSpace<'_> {
    pub fn len(&self) -> usize {
        match self {
            StateSpace::Discrete(n) => *n,
            StateSpace::Grid(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const LN_2PI: f64 = 1.8378770664093453;

fn ln_normal(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
}

/// log I0, the modified Bessel function of the first kind, order zero.
/// Power series below 15, asymptotic expansion beyond; stays finite for
/// arguments far past the overflow point of I0 itself.
pub fn ln_bessel_i0(x: f64) -> f64 {
    let x = x.abs();
    if x < 15.0 {
        let q = x * x / 4.0;
        let mut term = 1.0f64;
        let mut sum = 1.0f64;
        let mut k = 1.0f64;
        while term > sum * 1e-17 {
            term *= q / (k * k);
            sum += term;
            k += 1.0;
        }
        sum.ln()
    } else {
        let mut term = 1.0f64;
        let mut sum = 1.0f64;
        let mut prev = f64::INFINITY;
        let mut k = 1.0f64;
        // Divergent series: stop at the smallest term.
        while k <= 30.0 {
            let odd = 2.0 * k - 1.0;
            term *= odd * odd / (8.0 * k * x);
            if term >= prev || term < sum * 1e-17 {
                break;
            }
            sum += term;
            prev = term;
            k += 1.0;
        }
        x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + sum.ln()
    }
}

fn ln_softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow.
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl StateDist {
    /// Parameter-range check; arity against the observation is checked by the
    /// owning family.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        match self {
            StateDist::Normal { mean, sd } => {
                if !mean.is_finite() || !sd.is_finite() || *sd <= 0.0 {
                    return bad(format!("normal emission needs finite mean and sd > 0, got ({mean}, {sd})"));
                }
            }
            StateDist::NormalLinearMean { intercept, slope, sd, .. } => {
                if !intercept.is_finite() || !slope.is_finite() || !sd.is_finite() || *sd <= 0.0 {
                    return bad("linear-mean normal emission needs finite coefficients and sd > 0".to_string());
                }
            }
            StateDist::Gamma { shape, scale } => {
                if !(*shape > 0.0 && shape.is_finite() && *scale > 0.0 && scale.is_finite()) {
                    return bad(format!("gamma emission needs shape, scale > 0, got ({shape}, {scale})"));
                }
            }
            StateDist::VonMises { mean, kappa } => {
                if !mean.is_finite() || !kappa.is_finite() || *kappa < 0.0 {
                    return bad(format!("von Mises emission needs finite mean and kappa >= 0, got ({mean}, {kappa})"));
                }
            }
            StateDist::Poisson { rate } => {
                if !(*rate > 0.0 && rate.is_finite()) {
                    return bad(format!("Poisson emission needs rate > 0, got {rate}"));
                }
            }
            StateDist::Bernoulli { prob } => {
                if !(*prob > 0.0 && *prob < 1.0) {
                    return bad(format!("Bernoulli emission needs prob in (0,1), got {prob}"));
                }
            }
            StateDist::EventIndicator => {}
        }
        Ok(())
    }

    fn log_density(&self, x: f64, missing: bool, event: bool, covariates: &[f64]) -> f64 {
        if event {
            // An event record is incompatible with every measurement state.
            return match self {
                StateDist::EventIndicator => 0.0,
                _ => f64::NEG_INFINITY,
            };
        }
        if let StateDist::EventIndicator = self {
            return f64::NEG_INFINITY;
        }
        if missing {
            return 0.0;
        }
        if !x.is_finite() {
            return f64::NEG_INFINITY;
        }
        match self {
            StateDist::Normal { mean, sd } => ln_normal(x, *mean, *sd),
            StateDist::NormalLinearMean { intercept, slope, cov, sd } => {
                let z = covariates.get(*cov).copied().unwrap_or(0.0);
                ln_normal(x, intercept + slope * z, *sd)
            }
            StateDist::Gamma { shape, scale } => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                (shape - 1.0) * x.ln()
                    - x / scale
                    - shape * scale.ln()
                    - statrs::function::gamma::ln_gamma(*shape)
            }
            StateDist::VonMises { mean, kappa } => {
                kappa * (x - mean).cos() - LN_2PI - ln_bessel_i0(*kappa)
            }
            StateDist::Poisson { rate } => {
                if x < 0.0 || x.fract() != 0.0 {
                    return f64::NEG_INFINITY;
                }
                x * rate.ln() - rate - statrs::function::gamma::ln_gamma(x + 1.0)
            }
            StateDist::Bernoulli { prob } => {
                if x == 1.0 {
                    prob.ln()
                } else if x == 0.0 {
                    (1.0 - prob).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            StateDist::EventIndicator => unreachable!(),
        }
    }
}

impl ValueDist {
    pub fn validate(&self) -> Result<()> {
        match self {
            ValueDist::Normal { sd } => {
                if !(*sd > 0.0 && sd.is_finite()) {
                    return Err(Error::invalid(format!(
                        "state-value normal emission needs sd > 0, got {sd}"
                    )));
                }
            }
            ValueDist::SvScaledNormal { mu, beta } => {
                if !mu.is_finite() || !(*beta > 0.0 && beta.is_finite()) {
                    return Err(Error::invalid(format!(
                        "scaled-normal emission needs finite mu and beta > 0, got ({mu}, {beta})"
                    )));
                }
            }
            ValueDist::BernoulliOffset { beta0 } => {
                if !beta0.is_finite() {
                    return Err(Error::invalid("Bernoulli-offset emission needs finite beta0"));
                }
            }
        }
        Ok(())
    }

    fn log_density(&self, g: f64, x: f64, missing: bool, event: bool) -> f64 {
        if event {
            return f64::NEG_INFINITY;
        }
        if missing {
            return 0.0;
        }
        if !x.is_finite() {
            return f64::NEG_INFINITY;
        }
        match self {
            ValueDist::Normal { sd } => ln_normal(x, g, *sd),
            ValueDist::SvScaledNormal { mu, beta } => ln_normal(x, *mu, beta * (g / 2.0).exp()),
            ValueDist::BernoulliOffset { beta0 } => {
                let eta = beta0 + g;
                if x == 1.0 {
                    -ln_softplus(-eta)
                } else if x == 0.0 {
                    -ln_softplus(eta)
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }
}

impl EmissionFamily {
    /// Number of observation components this family reads.
    pub fn n_components(&self) -> usize {
        match self {
            EmissionFamily::Product(c) => c.len(),
            EmissionFamily::Unmarked => 0,
            _ => 1,
        }
    }

    /// Validates parameters and per-state arity against a state space of
    /// `n_states` labels (grid families ignore the count).
    pub fn validate(&self, n_states: usize) -> Result<()> {
        match self {
            EmissionFamily::PerState(dists) => {
                if dists.len() != n_states {
                    return Err(Error::invalid(format!(
                        "emission family has {} state distributions, model has {} states",
                        dists.len(),
                        n_states
                    )));
                }
                dists.iter().try_for_each(|d| d.validate())
            }
            EmissionFamily::StateValue(d) => d.validate(),
            EmissionFamily::Product(components) => {
                if components.len() < 2 {
                    return Err(Error::invalid(
                        "product emission family needs at least two components",
                    ));
                }
                for c in components {
                    if matches!(c, EmissionFamily::Product(_) | EmissionFamily::Unmarked) {
                        return Err(Error::invalid(
                            "product emission components must be plain families",
                        ));
                    }
                    c.validate(n_states)?;
                }
                Ok(())
            }
            EmissionFamily::Unmarked => Ok(()),
        }
    }

    fn log_density_component(&self, state: StateRef, x: &Observation, comp: usize) -> Result<f64> {
        match (self, state) {
            (EmissionFamily::PerState(dists), StateRef::Index(j)) => {
                let d = dists.get(j).ok_or_else(|| {
                    Error::invalid(format!("state index {j} out of range for {} states", dists.len()))
                })?;
                let (v, miss) = x.component(comp);
                Ok(d.log_density(v, miss, x.event, &x.covariates))
            }
            (EmissionFamily::StateValue(d), StateRef::Value(g)) => {
                let (v, miss) = x.component(comp);
                Ok(d.log_density(g, v, miss, x.event))
            }
            (EmissionFamily::Unmarked, _) => Ok(0.0),
            (EmissionFamily::Product(components), _) => {
                let mut total = 0.0;
                for (k, c) in components.iter().enumerate() {
                    total += c.log_density_component(state, x, comp + k)?;
                    if total == f64::NEG_INFINITY {
                        break;
                    }
                }
                Ok(total)
            }
            (EmissionFamily::PerState(_), StateRef::Value(_)) => Err(Error::invalid(
                "per-state emission family queried with a state value; use a state index",
            )),
            (EmissionFamily::StateValue(_), StateRef::Index(_)) => Err(Error::invalid(
                "state-value emission family queried with a state index; pass the grid midpoint",
            )),
        }
    }
}

/// Log density of one observation record in one state.
pub fn log_density(family: &EmissionFamily, state: StateRef, x: &Observation) -> Result<f64> {
    family.log_density_component(state, x, 0)
}

/// Densities of one observation record across the whole state space: the
/// diagonal of P(x) in the forward recursion. Missing records give the
/// all-ones vector; an unmarked family always does.
pub fn emission_diag(
    family: &EmissionFamily,
    space: &StateSpace<'_>,
    x: &Observation,
) -> Result<Vec<f64>> {
    let n = space.len();
    let mut out = Vec::with_capacity(n);
    match space {
        StateSpace::Discrete(_) => {
            for j in 0..n {
                out.push(log_density(family, StateRef::Index(j), x)?.exp());
            }
        }
        StateSpace::Grid(mids) => {
            for &g in mids.iter() {
                out.push(log_density(family, StateRef::Value(g), x)?.exp());
            }
        }
    }
    Ok(out)
}

/// Log-scale version of `emission_diag`, used by log-space path decoding.
pub fn log_emission_diag(
    family: &EmissionFamily,
    space: &StateSpace<'_>,
    x: &Observation,
) -> Result<Vec<f64>> {
    let n = space.len();
    let mut out = Vec::with_capacity(n);
    match space {
        StateSpace::Discrete(_) => {
            for j in 0..n {
                out.push(log_density(family, StateRef::Index(j), x)?);
            }
        }
        StateSpace::Grid(mids) => {
            for &g in mids.iter() {
                out.push(log_density(family, StateRef::Value(g), x)?);
            }
        }
    }
    Ok(out)
}
