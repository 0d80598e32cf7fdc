//! Declarative run configuration: one TOML file names the model class and
//! structure, the parameter initialization, the data column bindings, and
//! per-command settings. The fit command writes its results back in the
//! same format, so an estimates file is itself a runnable config.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use latent_markov::emissions::{EmissionFamily, StateDist, ValueDist};
use latent_markov::fit::{
    CoxOuMmppSpec, CtHmmSpec, CtSsmOuSpec, FitOptions, FitResult, HmmSpec, InitMode, MmppSpec,
    ModelParams, ModelSpec, SsmAr1Spec, TpmParams,
};
use latent_markov::grid::{AR1Params, Grid, OUParams};
use latent_markov::kernels::GeneratorMask;
use latent_markov::linalg::{ProbabilityVector, TransitionMatrix};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelBlock,
    pub params: ParamsBlock,
    #[serde(default)]
    pub data: DataBlock,
    #[serde(default)]
    pub optim: OptimBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forecast: Option<ForecastBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelClass {
    Hmm,
    SsmAr1,
    Cthmm,
    CtssmOu,
    Mmpp,
    CoxOuMmpp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub class: ModelClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitBlock>,
    /// Covariate column names driving the transition matrix (discrete HMM).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub covariates: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_star: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorBlock>,
    /// 1-based states that never produce events (MMPP).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub silent_states: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marked: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitBlock {
    Named(String),
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub lower: f64,
    pub upper: f64,
    pub m: usize,
}

/// Free or blocked off-diagonal generator entries, 1-based (from, to)
/// pairs. Omitting the block means every off-diagonal entry is free.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocked: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tpm: Option<Vec<Vec<f64>>>,
    /// Covariate coefficients: one row per off-diagonal transition in
    /// row-major order, one column per design column (intercept first).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_rates: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_rates: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub emission: Vec<EmissionBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obs: Option<ObsBlock>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmissionBlock {
    Normal { mean: f64, sd: f64 },
    /// Mean linear in a covariate column: intercept + slope * cov.
    NormalLinear { intercept: f64, slope: f64, cov: String, sd: f64 },
    Gamma { shape: f64, scale: f64 },
    VonMises { mean: f64, kappa: f64 },
    Poisson { rate: f64 },
    Bernoulli { prob: f64 },
    EventIndicator {},
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObsBlock {
    Normal { sd: f64 },
    SvScaledNormal { mu: f64, beta: f64 },
    BernoulliOffset { beta0: f64 },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<String>,
    /// Observation component columns, in emission component order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<String>,
    /// Event-marker column (0/1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
    /// Per-record covariate columns, in the index order emissions and
    /// transition formulas refer to.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimBlock {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub rel_obj_tol: f64,
    pub fd_step: f64,
    pub nm_fallback: bool,
    pub ci_level: f64,
    pub hessian_step: f64,
}

impl Default for OptimBlock {
    fn default() -> Self {
        let f = FitOptions::default();
        OptimBlock {
            max_iters: f.optim.max_iters,
            grad_tol: f.optim.grad_tol,
            rel_obj_tol: f.optim.rel_obj_tol,
            fd_step: f.optim.fd_step,
            nm_fallback: f.optim.nm_fallback,
            ci_level: f.ci_level,
            hessian_step: f.hessian_step,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateBlock {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Number of independent sequences (default 1).
    #[serde(default = "default_n_seq")]
    pub n_seq: usize,
    /// Observations per sequence (discrete and snapshot classes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_len: Option<usize>,
    /// Observation window length (point processes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    /// Mean spacing of irregular snapshot times; gaps are uniform on
    /// (0.5, 1.5) times this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_gap: Option<f64>,
}

fn default_seed() -> u64 {
    1
}

fn default_n_seq() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastBlock {
    pub eval_lower: f64,
    pub eval_upper: f64,
    #[serde(default = "default_eval_points")]
    pub eval_points: usize,
    /// Rolling backtest length counted back from the end of each sequence;
    /// 0 or absent forecasts only past the last observation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<usize>,
    /// Step length ahead for continuous-time classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

fn default_eval_points() -> usize {
    512
}

/// Fit results embedded in an estimates file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitBlock {
    pub log_likelihood: f64,
    pub aic: f64,
    pub bic: f64,
    pub converged: bool,
    pub iterations: usize,
    pub used_fallback: bool,
    pub n_params: usize,
    pub n_obs: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub estimate: Vec<EstimateBlock>,
    /// Covariance of the unconstrained parameters, row by row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    /// Accepted negative log-likelihood values, one per iteration.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateBlock {
    pub name: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| anyhow!("config {}: {e}", path.display()))
}

pub fn save(cfg: &RunConfig, path: &Path) -> Result<()> {
    let text = toml::to_string_pretty(cfg)
        .with_context(|| "cannot serialize configuration".to_string())?;
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn init_mode(block: &Option<InitBlock>) -> Result<InitMode> {
    match block {
        None => Ok(InitMode::Stationary),
        Some(InitBlock::Named(s)) => match s.as_str() {
            "stationary" => Ok(InitMode::Stationary),
            "estimated" => Ok(InitMode::Estimated),
            other => bail!(
                "[model] init must be \"stationary\", \"estimated\", or a probability array, got \"{other}\""
            ),
        },
        Some(InitBlock::Fixed(v)) => Ok(InitMode::Fixed(v.clone())),
    }
}

fn grid_of(block: &Option<GridBlock>) -> Result<Grid> {
    let g = block
        .as_ref()
        .ok_or_else(|| anyhow!("[model.grid] is required for this model class"))?;
    Grid::new(g.lower, g.upper, g.m).map_err(|e| anyhow!("[model.grid]: {e}"))
}

fn n_states_of(block: &ModelBlock) -> Result<usize> {
    block
        .states
        .ok_or_else(|| anyhow!("[model] states is required for this model class"))
}

fn mask_of(block: &ModelBlock) -> Result<GeneratorMask> {
    let n = n_states_of(block)?;
    let to_pairs = |pairs: &[(usize, usize)], label: &str| -> Result<Vec<(usize, usize)>> {
        pairs
            .iter()
            .map(|&(i, j)| {
                if i == 0 || j == 0 {
                    bail!("[model.generator] {label} pairs are 1-based, got ({i}, {j})");
                }
                Ok((i - 1, j - 1))
            })
            .collect()
    };
    let mask = match &block.generator {
        None => GeneratorMask::full(n),
        Some(g) => match (&g.free, &g.blocked) {
            (Some(_), Some(_)) => {
                bail!("[model.generator] lists both free and blocked pairs; use one")
            }
            (Some(free), None) => GeneratorMask::from_free_pairs(n, &to_pairs(free, "free")?),
            (None, Some(blocked)) => {
                GeneratorMask::from_blocked_pairs(n, &to_pairs(blocked, "blocked")?)
            }
            (None, None) => GeneratorMask::full(n),
        },
    };
    mask.map_err(|e| anyhow!("[model.generator]: {e}"))
}

pub fn build_spec(cfg: &RunConfig) -> Result<ModelSpec> {
    let m = &cfg.model;
    match m.class {
        ModelClass::Hmm => {
            let n_states = n_states_of(m)?;
            let covariates = (0..m.covariates.len()).collect();
            Ok(ModelSpec::Hmm(HmmSpec {
                n_states,
                init: init_mode(&m.init)?,
                covariates,
            }))
        }
        ModelClass::SsmAr1 => Ok(ModelSpec::SsmAr1(SsmAr1Spec { grid: grid_of(&m.grid)? })),
        ModelClass::Cthmm => Ok(ModelSpec::CtHmm(CtHmmSpec {
            mask: mask_of(m)?,
            init: init_mode(&m.init)?,
        })),
        ModelClass::CtssmOu => Ok(ModelSpec::CtSsmOu(CtSsmOuSpec { grid: grid_of(&m.grid)? })),
        ModelClass::Mmpp => {
            let mask = mask_of(m)?;
            let n = mask.n();
            let mut zero_rates = vec![false; n];
            for &s in &m.silent_states {
                if s == 0 || s > n {
                    bail!("[model] silent_states entries are 1-based states up to {n}, got {s}");
                }
                zero_rates[s - 1] = true;
            }
            Ok(ModelSpec::Mmpp(MmppSpec {
                mask,
                zero_rates,
                marked: m.marked.unwrap_or(false),
            }))
        }
        ModelClass::CoxOuMmpp => {
            let dt_star = m
                .dt_star
                .ok_or_else(|| anyhow!("[model] dt_star is required for the Cox class"))?;
            Ok(ModelSpec::CoxOuMmpp(CoxOuMmppSpec {
                grid: grid_of(&m.grid)?,
                dt_star,
            }))
        }
    }
}

fn covariate_index(name: &str, data: &DataBlock) -> Result<usize> {
    data.covariates
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| {
            anyhow!("emission covariate \"{name}\" is not listed in [data] covariates")
        })
}

fn state_dist(block: &EmissionBlock, data: &DataBlock) -> Result<StateDist> {
    Ok(match block {
        EmissionBlock::Normal { mean, sd } => StateDist::Normal { mean: *mean, sd: *sd },
        EmissionBlock::NormalLinear { intercept, slope, cov, sd } => StateDist::NormalLinearMean {
            intercept: *intercept,
            slope: *slope,
            cov: covariate_index(cov, data)?,
            sd: *sd,
        },
        EmissionBlock::Gamma { shape, scale } => StateDist::Gamma { shape: *shape, scale: *scale },
        EmissionBlock::VonMises { mean, kappa } => {
            StateDist::VonMises { mean: *mean, kappa: *kappa }
        }
        EmissionBlock::Poisson { rate } => StateDist::Poisson { rate: *rate },
        EmissionBlock::Bernoulli { prob } => StateDist::Bernoulli { prob: *prob },
        EmissionBlock::EventIndicator {} => StateDist::EventIndicator,
    })
}

fn emission_block(dist: &StateDist, data: &DataBlock) -> Result<EmissionBlock> {
    Ok(match dist {
        StateDist::Normal { mean, sd } => EmissionBlock::Normal { mean: *mean, sd: *sd },
        StateDist::NormalLinearMean { intercept, slope, cov, sd } => {
            let name = data.covariates.get(*cov).ok_or_else(|| {
                anyhow!("emission covariate index {cov} has no column in [data] covariates")
            })?;
            EmissionBlock::NormalLinear {
                intercept: *intercept,
                slope: *slope,
                cov: name.clone(),
                sd: *sd,
            }
        }
        StateDist::Gamma { shape, scale } => EmissionBlock::Gamma { shape: *shape, scale: *scale },
        StateDist::VonMises { mean, kappa } => {
            EmissionBlock::VonMises { mean: *mean, kappa: *kappa }
        }
        StateDist::Poisson { rate } => EmissionBlock::Poisson { rate: *rate },
        StateDist::Bernoulli { prob } => EmissionBlock::Bernoulli { prob: *prob },
        StateDist::EventIndicator => EmissionBlock::EventIndicator {},
    })
}

fn per_state_family(cfg: &RunConfig, n_states: usize) -> Result<EmissionFamily> {
    if cfg.params.emission.len() != n_states {
        bail!(
            "[params] has {} emission blocks for {n_states} states",
            cfg.params.emission.len()
        );
    }
    let dists = cfg
        .params
        .emission
        .iter()
        .map(|b| state_dist(b, &cfg.data))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmissionFamily::PerState(dists))
}

fn value_dist(cfg: &RunConfig) -> Result<ValueDist> {
    let block = cfg
        .params
        .obs
        .as_ref()
        .ok_or_else(|| anyhow!("[params.obs] is required for state-space classes"))?;
    Ok(match block {
        ObsBlock::Normal { sd } => ValueDist::Normal { sd: *sd },
        ObsBlock::SvScaledNormal { mu, beta } => ValueDist::SvScaledNormal { mu: *mu, beta: *beta },
        ObsBlock::BernoulliOffset { beta0 } => ValueDist::BernoulliOffset { beta0: *beta0 },
    })
}

fn obs_block(dist: &ValueDist) -> ObsBlock {
    match dist {
        ValueDist::Normal { sd } => ObsBlock::Normal { sd: *sd },
        ValueDist::SvScaledNormal { mu, beta } => ObsBlock::SvScaledNormal { mu: *mu, beta: *beta },
        ValueDist::BernoulliOffset { beta0 } => ObsBlock::BernoulliOffset { beta0: *beta0 },
    }
}

fn matrix_rows(rows: &[Vec<f64>], label: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        bail!("[params] {label} must have at least one row");
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        bail!("[params] {label} rows have unequal lengths");
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn init_vector(cfg: &RunConfig) -> Result<Option<ProbabilityVector>> {
    match (&cfg.model.init, &cfg.params.init) {
        (Some(InitBlock::Named(s)), Some(v)) if s == "estimated" => {
            let p = ProbabilityVector::new(DVector::from_vec(v.clone()))
                .map_err(|e| anyhow!("[params] init: {e}"))?;
            Ok(Some(p))
        }
        (Some(InitBlock::Named(s)), None) if s == "estimated" => {
            bail!("[params] init starting probabilities are required when [model] init = \"estimated\"")
        }
        (_, Some(_)) => bail!("[params] init is only used when [model] init = \"estimated\""),
        _ => Ok(None),
    }
}

fn ou_params(cfg: &RunConfig) -> Result<OUParams> {
    let p = &cfg.params;
    let need = |v: Option<f64>, name: &str| {
        v.ok_or_else(|| anyhow!("[params] {name} is required for this model class"))
    };
    Ok(OUParams {
        theta: need(p.theta, "theta")?,
        mu: need(p.mu, "mu")?,
        sigma: need(p.sigma, "sigma")?,
    })
}

pub fn build_params(cfg: &RunConfig, spec: &ModelSpec) -> Result<ModelParams> {
    let p = &cfg.params;
    match spec {
        ModelSpec::Hmm(s) => {
            let tpm = match (&p.tpm, &p.beta) {
                (Some(_), Some(_)) => bail!("[params] lists both tpm and beta; use one"),
                (Some(rows), None) => {
                    let m = matrix_rows(rows, "tpm")?;
                    TpmParams::Homogeneous(
                        TransitionMatrix::new(m).map_err(|e| anyhow!("[params] tpm: {e}"))?,
                    )
                }
                (None, Some(rows)) => TpmParams::CovariateDriven(matrix_rows(rows, "beta")?),
                (None, None) => bail!("[params] tpm (or beta) is required for the HMM class"),
            };
            Ok(ModelParams::Hmm {
                tpm,
                emissions: per_state_family(cfg, s.n_states)?,
                init: init_vector(cfg)?,
            })
        }
        ModelSpec::SsmAr1(_) => {
            let need = |v: Option<f64>, name: &str| {
                v.ok_or_else(|| anyhow!("[params] {name} is required for this model class"))
            };
            Ok(ModelParams::SsmAr1 {
                latent: AR1Params {
                    phi: need(p.phi, "phi")?,
                    mu: need(p.mu, "mu")?,
                    sigma: need(p.sigma, "sigma")?,
                },
                obs: value_dist(cfg)?,
            })
        }
        ModelSpec::CtHmm(s) => {
            let rates = p
                .rates
                .clone()
                .ok_or_else(|| anyhow!("[params] rates is required for the ctHMM class"))?;
            Ok(ModelParams::CtHmm {
                rates,
                emissions: per_state_family(cfg, s.mask.n())?,
                init: init_vector(cfg)?,
            })
        }
        ModelSpec::CtSsmOu(_) => Ok(ModelParams::CtSsmOu {
            latent: ou_params(cfg)?,
            obs: value_dist(cfg)?,
        }),
        ModelSpec::Mmpp(s) => {
            let switch_rates = p
                .switch_rates
                .clone()
                .ok_or_else(|| anyhow!("[params] switch_rates is required for the MMPP class"))?;
            let event_rates = p
                .event_rates
                .clone()
                .ok_or_else(|| anyhow!("[params] event_rates is required for the MMPP class"))?;
            let marks = if s.marked {
                per_state_family(cfg, s.mask.n())?
            } else {
                if !cfg.params.emission.is_empty() {
                    bail!("[params] emission blocks given but [model] marked is not set");
                }
                EmissionFamily::Unmarked
            };
            Ok(ModelParams::Mmpp { switch_rates, event_rates, marks })
        }
        ModelSpec::CoxOuMmpp(_) => Ok(ModelParams::CoxOuMmpp { latent: ou_params(cfg)? }),
    }
}

/// The [params] block describing fitted parameters, shaped exactly like the
/// input so the output file is itself a runnable config.
pub fn params_block(params: &ModelParams, data: &DataBlock) -> Result<ParamsBlock> {
    let mut out = ParamsBlock::default();
    match params {
        ModelParams::Hmm { tpm, emissions, init } => {
            match tpm {
                TpmParams::Homogeneous(g) => {
                    let m = g.as_matrix();
                    out.tpm = Some(
                        (0..m.nrows())
                            .map(|i| m.row(i).iter().copied().collect())
                            .collect(),
                    );
                }
                TpmParams::CovariateDriven(b) => {
                    out.beta = Some(
                        (0..b.nrows())
                            .map(|i| b.row(i).iter().copied().collect())
                            .collect(),
                    );
                }
            }
            out.emission = family_blocks(emissions, data)?;
            if let Some(d) = init {
                out.init = Some(d.as_vector().iter().copied().collect());
            }
        }
        ModelParams::SsmAr1 { latent, obs } => {
            out.phi = Some(latent.phi);
            out.mu = Some(latent.mu);
            out.sigma = Some(latent.sigma);
            out.obs = Some(obs_block(obs));
        }
        ModelParams::CtHmm { rates, emissions, init } => {
            out.rates = Some(rates.clone());
            out.emission = family_blocks(emissions, data)?;
            if let Some(d) = init {
                out.init = Some(d.as_vector().iter().copied().collect());
            }
        }
        ModelParams::CtSsmOu { latent, obs } => {
            out.theta = Some(latent.theta);
            out.mu = Some(latent.mu);
            out.sigma = Some(latent.sigma);
            out.obs = Some(obs_block(obs));
        }
        ModelParams::Mmpp { switch_rates, event_rates, marks } => {
            out.switch_rates = Some(switch_rates.clone());
            out.event_rates = Some(event_rates.clone());
            out.emission = family_blocks(marks, data)?;
        }
        ModelParams::CoxOuMmpp { latent } => {
            out.theta = Some(latent.theta);
            out.mu = Some(latent.mu);
            out.sigma = Some(latent.sigma);
        }
    }
    Ok(out)
}

fn family_blocks(family: &EmissionFamily, data: &DataBlock) -> Result<Vec<EmissionBlock>> {
    match family {
        EmissionFamily::PerState(dists) => {
            dists.iter().map(|d| emission_block(d, data)).collect()
        }
        EmissionFamily::Unmarked => Ok(Vec::new()),
        EmissionFamily::StateValue(_) | EmissionFamily::Product(_) => {
            bail!("this emission family has no config representation")
        }
    }
}

pub fn fit_options(cfg: &RunConfig) -> FitOptions {
    let o = &cfg.optim;
    let mut f = FitOptions::default();
    f.optim.max_iters = o.max_iters;
    f.optim.grad_tol = o.grad_tol;
    f.optim.rel_obj_tol = o.rel_obj_tol;
    f.optim.fd_step = o.fd_step;
    f.optim.nm_fallback = o.nm_fallback;
    f.ci_level = o.ci_level;
    f.hessian_step = o.hessian_step;
    f
}

/// The estimates file: the input config with [params] replaced by the
/// fitted values and a [fit] block of results appended.
pub fn estimates_config(cfg: &RunConfig, result: &FitResult) -> Result<RunConfig> {
    let mut out = cfg.clone();
    out.params = params_block(&result.params, &cfg.data)?;
    out.fit = Some(FitBlock {
        log_likelihood: result.log_likelihood,
        aic: result.aic,
        bic: result.bic,
        converged: result.converged,
        iterations: result.iterations,
        used_fallback: result.used_fallback,
        n_params: result.n_params,
        n_obs: result.n_obs,
        estimate: result
            .estimates
            .iter()
            .map(|e| EstimateBlock {
                name: e.name.clone(),
                value: e.value,
                lower: e.interval.map(|(lo, _)| lo),
                upper: e.interval.map(|(_, hi)| hi),
            })
            .collect(),
        covariance: result.covariance.as_ref().map(|c| {
            (0..c.nrows())
                .map(|i| c.row(i).iter().copied().collect())
                .collect()
        }),
        trace: result.trace.clone(),
    });
    Ok(out)
}
