//! The four batch commands. Each returns a process exit code: 0 for
//! success, 2 for a fit that ran but did not converge; input errors bubble
//! up as errors and exit 1 from main.

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use latent_markov::emissions::{EmissionFamily, Observation, StateDist, ValueDist};
use latent_markov::fit::{
    dataset_loglik, decode_sequence, emission_diag_for, fit_mle, grid_midpoints,
    initial_distribution, transition_kernel, Dataset, FitResult, ModelParams, ModelSpec,
    TpmParams,
};
use latent_markov::forward::{forecast, ForwardPass};
use latent_markov::kernels::GeneratorMask;
use latent_markov::linalg::GeneratorMatrix;
use latent_markov::simulate::{
    sim_cthmm_rng, sim_ctssm_ou_rng, sim_hmm_rng, sim_mmpp_rng, sim_ssm_ar1_rng, stream_rng,
};

use crate::config::{self, RunConfig};
use crate::data::{self, format_float, BoundData, Table};

/// Progress reporting on stdout. Write failures (a closed pipe when the
/// output is paged or truncated) must not abort the run: the artifacts on
/// disk are the product, the prints are advisory.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn load_model(path: &Path) -> Result<(RunConfig, ModelSpec, ModelParams)> {
    let cfg = config::load(path)?;
    let spec = config::build_spec(&cfg)?;
    let params = config::build_params(&cfg, &spec)?;
    Ok((cfg, spec, params))
}

fn load_bound(cfg: &RunConfig, spec: &ModelSpec, data_path: &Path) -> Result<BoundData> {
    let table = data::read_table(data_path)?;
    data::bind(table, &cfg.data, spec)
}

/// Observation components the data file must carry for this model.
fn expected_value_columns(params: &ModelParams) -> usize {
    match params {
        ModelParams::Hmm { emissions, .. } | ModelParams::CtHmm { emissions, .. } => {
            emissions.n_components()
        }
        ModelParams::SsmAr1 { .. } | ModelParams::CtSsmOu { .. } => 1,
        ModelParams::Mmpp { marks, .. } => match marks {
            EmissionFamily::Unmarked => 0,
            fam => fam.n_components(),
        },
        ModelParams::CoxOuMmpp { .. } => 0,
    }
}

fn check_value_columns(cfg: &RunConfig, params: &ModelParams) -> Result<()> {
    let expected = expected_value_columns(params);
    if cfg.data.values.len() != expected {
        bail!(
            "[data] values lists {} columns but the model reads {expected}",
            cfg.data.values.len()
        );
    }
    Ok(())
}

fn family_has_event_state(family: &EmissionFamily) -> bool {
    match family {
        EmissionFamily::PerState(dists) => {
            dists.iter().any(|d| matches!(d, StateDist::EventIndicator))
        }
        _ => false,
    }
}

fn build_generator(mask: &GeneratorMask, rates: &[f64]) -> Result<GeneratorMatrix> {
    let pairs = mask.free_pairs();
    if rates.len() != pairs.len() {
        bail!(
            "[params] rates lists {} entries but the generator mask frees {}",
            rates.len(),
            pairs.len()
        );
    }
    let n = mask.n();
    let mut q = DMatrix::<f64>::zeros(n, n);
    for (&(i, j), &r) in pairs.iter().zip(rates) {
        q[(i, j)] = r;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| q[(i, j)]).sum();
        q[(i, i)] = -off;
    }
    GeneratorMatrix::new(q).map_err(|e| anyhow!("[params] rates: {e}"))
}

// ---------------------------------------------------------------- simulate

/// Simulated content of one sequence before layout into CSV rows.
struct SimSeq {
    /// Observation times, or 1-based step indices for discrete classes.
    times: Vec<f64>,
    obs: Vec<Observation>,
    /// Latent truth: 1-based state index or continuous latent value.
    latent: Vec<f64>,
}

fn uniform_gap_times(t_len: usize, mean_gap: f64, rng: &mut latent_markov::simulate::StreamRng) -> Vec<f64> {
    let mut times = Vec::with_capacity(t_len);
    let mut t = 0.0;
    for k in 0..t_len {
        if k > 0 {
            t += mean_gap * (0.5 + rng.gen::<f64>());
        }
        times.push(t);
    }
    times
}

fn simulate_sequences(
    cfg: &RunConfig,
    spec: &ModelSpec,
    params: &ModelParams,
    seed: u64,
    n_seq: usize,
) -> Result<Vec<SimSeq>> {
    let sim = cfg.simulate.as_ref().expect("checked by caller");
    let need_t_len =
        || sim.t_len.ok_or_else(|| anyhow!("[simulate] t_len is required for this model class"));
    let need_mean_gap = || {
        sim.mean_gap.filter(|g| *g > 0.0).ok_or_else(|| {
            anyhow!("[simulate] mean_gap must be positive for irregular snapshot times")
        })
    };
    let need_horizon = || {
        sim.horizon.filter(|h| *h > 0.0).ok_or_else(|| {
            anyhow!("[simulate] horizon must be positive for point-process classes")
        })
    };

    let mut out = Vec::with_capacity(n_seq);
    for k in 0..n_seq {
        let mut rng = stream_rng(seed, k as u64);
        let seq = match (spec, params) {
            (ModelSpec::Hmm(_), ModelParams::Hmm { tpm, emissions, .. }) => {
                let gamma = match tpm {
                    TpmParams::Homogeneous(g) => g,
                    TpmParams::CovariateDriven(_) => bail!(
                        "simulation with a covariate-driven transition matrix is not supported"
                    ),
                };
                let delta1 = initial_distribution(spec, params)?;
                let t_len = need_t_len()?;
                let draw = sim_hmm_rng(gamma, &delta1, emissions, t_len, &mut rng)?;
                SimSeq {
                    times: (1..=t_len).map(|t| t as f64).collect(),
                    obs: draw.obs,
                    latent: draw.states.iter().map(|&s| (s + 1) as f64).collect(),
                }
            }
            (ModelSpec::SsmAr1(_), ModelParams::SsmAr1 { latent, obs }) => {
                let t_len = need_t_len()?;
                let draw = sim_ssm_ar1_rng(latent, obs, t_len, &mut rng)?;
                SimSeq {
                    times: (1..=t_len).map(|t| t as f64).collect(),
                    obs: draw.obs,
                    latent: draw.latent,
                }
            }
            (ModelSpec::CtHmm(s), ModelParams::CtHmm { rates, emissions, .. }) => {
                let times = uniform_gap_times(need_t_len()?, need_mean_gap()?, &mut rng);
                let q = build_generator(&s.mask, rates)?;
                let delta = initial_distribution(spec, params)?;
                let draw = sim_cthmm_rng(&q, &delta, emissions, &times, &mut rng)?;
                // Nothing is observed after an absorbing event is recorded.
                let cut = draw
                    .obs
                    .iter()
                    .position(|o| o.event)
                    .map_or(times.len(), |i| i + 1);
                SimSeq {
                    times: times[..cut].to_vec(),
                    obs: draw.obs[..cut].to_vec(),
                    latent: draw.states[..cut].iter().map(|&s| (s + 1) as f64).collect(),
                }
            }
            (ModelSpec::CtSsmOu(_), ModelParams::CtSsmOu { latent, obs }) => {
                let times = uniform_gap_times(need_t_len()?, need_mean_gap()?, &mut rng);
                let draw = sim_ctssm_ou_rng(latent, obs, &times, &mut rng)?;
                SimSeq {
                    times,
                    obs: draw.obs,
                    latent: draw.latent,
                }
            }
            (ModelSpec::Mmpp(s), ModelParams::Mmpp { switch_rates, event_rates, marks }) => {
                let q = build_generator(&s.mask, switch_rates)?;
                let mark_family = match marks {
                    EmissionFamily::Unmarked => None,
                    fam => Some(fam),
                };
                let draw =
                    sim_mmpp_rng(&q, event_rates, need_horizon()?, mark_family, &mut rng)?;
                SimSeq {
                    times: draw.times,
                    obs: draw.marks,
                    latent: draw.states.iter().map(|&s| (s + 1) as f64).collect(),
                }
            }
            (ModelSpec::CoxOuMmpp(_), _) => {
                bail!("simulation is not supported for the Cox class; simulate an MMPP instead")
            }
            _ => bail!("parameter object does not match the model class"),
        };
        out.push(seq);
    }
    Ok(out)
}

pub fn cmd_simulate(config_path: &Path, out_dir: &Path, seed_override: Option<u64>) -> Result<i32> {
    let (cfg, spec, params) = load_model(config_path)?;
    let sim = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| anyhow!("[simulate] block is required for the simulate command"))?;
    let seed = seed_override.unwrap_or(sim.seed);
    let n_seq = sim.n_seq.max(1);

    check_value_columns(&cfg, &params)?;
    if !cfg.model.covariates.is_empty() {
        bail!("simulation with transition covariates is not supported");
    }
    let id_name = match (&cfg.data.id, n_seq) {
        (Some(name), _) => Some(name.clone()),
        (None, 1) => None,
        (None, _) => bail!("[data] id column name is required to simulate more than one sequence"),
    };
    let time_name = if spec.needs_times() {
        Some(cfg.data.time.clone().ok_or_else(|| {
            anyhow!("[data] time column name is required for this model class")
        })?)
    } else {
        cfg.data.time.clone()
    };
    let event_required = match &params {
        ModelParams::Hmm { emissions, .. } | ModelParams::CtHmm { emissions, .. } => {
            family_has_event_state(emissions)
        }
        _ => false,
    };
    if spec.is_point_process() && cfg.data.event.is_some() {
        bail!("[data] event column does not apply to point-process data; events are the rows");
    }
    if event_required && cfg.data.event.is_none() {
        bail!("[data] event column name is required when a state emits an event indicator");
    }

    let sequences = simulate_sequences(&cfg, &spec, &params, seed, n_seq)?;

    let mut headers = Vec::new();
    if let Some(n) = &id_name {
        headers.push(n.clone());
    }
    if let Some(n) = &time_name {
        headers.push(n.clone());
    }
    headers.extend(cfg.data.values.iter().cloned());
    if let Some(n) = &cfg.data.event {
        headers.push(n.clone());
    }
    let mut table = Table::new(headers);

    let latent_label = if grid_midpoints(&spec).is_some()
        || matches!(spec, ModelSpec::SsmAr1(_) | ModelSpec::CtSsmOu(_))
    {
        "g"
    } else {
        "state"
    };
    let mut latent_headers = Vec::new();
    if id_name.is_some() {
        latent_headers.push(id_name.clone().unwrap());
    }
    latent_headers.push(time_name.clone().unwrap_or_else(|| "time".to_string()));
    latent_headers.push(latent_label.to_string());
    let mut latent_table = Table::new(latent_headers);

    let n_values = cfg.data.values.len();
    for (k, seq) in sequences.iter().enumerate() {
        let id_field = (k + 1).to_string();
        for (t, obs) in seq.obs.iter().enumerate() {
            let mut row = Vec::new();
            if id_name.is_some() {
                row.push(id_field.clone());
            }
            if time_name.is_some() {
                row.push(format_float(seq.times[t]));
            }
            for c in 0..n_values {
                if c < obs.values.len() && !obs.missing[c] {
                    row.push(format_float(obs.values[c]));
                } else {
                    row.push(String::new());
                }
            }
            if cfg.data.event.is_some() {
                row.push(if obs.event { "1" } else { "0" }.to_string());
            }
            table.rows.push(row);

            let mut lrow = Vec::new();
            if id_name.is_some() {
                lrow.push(id_field.clone());
            }
            lrow.push(format_float(seq.times[t]));
            lrow.push(format_float(seq.latent[t]));
            latent_table.rows.push(lrow);
        }
    }

    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    let data_path = out_dir.join("data.csv");
    let latent_path = out_dir.join("latent.csv");
    data::write_table(&table, &data_path)?;
    data::write_table(&latent_table, &latent_path)?;
    say!(
        "wrote {} ({} rows, {} sequences, seed {seed})",
        data_path.display(),
        table.rows.len(),
        sequences.len()
    );
    say!("wrote {}", latent_path.display());
    Ok(0)
}

// --------------------------------------------------------------------- fit

fn print_fit(result: &FitResult, label: Option<&str>) {
    let prefix = match label {
        Some(id) => format!("id {id}: "),
        None => String::new(),
    };
    say!("{prefix}log_likelihood = {}", result.log_likelihood);
    say!("{prefix}aic = {}", result.aic);
    say!("{prefix}bic = {}", result.bic);
    say!(
        "{prefix}converged = {} ({} iterations{})",
        result.converged,
        result.iterations,
        if result.used_fallback { ", simplex fallback" } else { "" }
    );
    for e in &result.estimates {
        match e.interval {
            Some((lo, hi)) => say!("{prefix}{} = {}  [{}, {}]", e.name, e.value, lo, hi),
            None => say!("{prefix}{} = {}", e.name, e.value),
        }
    }
}

fn safe_file_id(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

pub fn cmd_fit(config_path: &Path, data_path: &Path, out_dir: &Path, per_id: bool) -> Result<i32> {
    let (cfg, spec, start) = load_model(config_path)?;
    check_value_columns(&cfg, &start)?;
    let bound = load_bound(&cfg, &spec, data_path)?;
    let options = config::fit_options(&cfg);
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;

    if !per_id {
        let result = fit_mle(&spec, &bound.dataset, &start, &options)?;
        print_fit(&result, None);
        let est = config::estimates_config(&cfg, &result)?;
        let path = out_dir.join("estimates.toml");
        config::save(&est, &path)?;
        say!("wrote {}", path.display());
        return Ok(if result.converged { 0 } else { 2 });
    }

    if cfg.data.id.is_none() {
        bail!("[data] id column is required for per-id fitting");
    }
    let fits: Vec<Result<FitResult>> = bound
        .dataset
        .sequences
        .par_iter()
        .map(|seq| {
            let ds = Dataset { sequences: vec![seq.clone()] };
            fit_mle(&spec, &ds, &start, &options).map_err(Into::into)
        })
        .collect();

    let mut all_converged = true;
    for (id, fit) in bound.ids.iter().zip(fits) {
        let result = fit.with_context(|| format!("fit for id \"{id}\" failed"))?;
        print_fit(&result, Some(id));
        let est = config::estimates_config(&cfg, &result)?;
        let path = out_dir.join(format!("estimates-{}.toml", safe_file_id(id)));
        config::save(&est, &path)?;
        say!("wrote {}", path.display());
        all_converged &= result.converged;
    }
    Ok(if all_converged { 0 } else { 2 })
}

// ------------------------------------------------------------------ decode

pub fn cmd_decode(config_path: &Path, data_path: &Path, out_dir: &Path) -> Result<i32> {
    let (cfg, spec, params) = load_model(config_path)?;
    let bound = load_bound(&cfg, &spec, data_path)?;

    let ll = dataset_loglik(&spec, &params, &bound.dataset)?;
    say!("log_likelihood = {ll}");

    let mut decoded: Vec<Vec<usize>> = Vec::with_capacity(bound.dataset.sequences.len());
    for seq in &bound.dataset.sequences {
        let path = decode_sequence(&spec, &params, seq)?;
        // Point-process paths carry a virtual window-start step before the
        // first event; rows only exist for the events.
        let states = if spec.is_point_process() {
            path.states[1..].to_vec()
        } else {
            path.states
        };
        debug_assert_eq!(states.len(), seq.obs.len());
        decoded.push(states);
    }

    let midpoints = grid_midpoints(&spec);
    let vol = matches!(
        &params,
        ModelParams::SsmAr1 { obs: ValueDist::SvScaledNormal { .. }, .. }
    );
    let mut new_cols = vec!["decoded_state".to_string()];
    if midpoints.is_some() {
        new_cols.push("decoded_value".to_string());
    }
    if vol {
        new_cols.push("decoded_vol".to_string());
    }
    for name in &new_cols {
        if bound.table.headers.contains(name) {
            bail!(
                "data file {} already has a column named \"{name}\"",
                bound.table.path
            );
        }
    }

    let mut out_table = bound.table.clone();
    out_table.headers.extend(new_cols);
    for (row, &(k, t)) in bound.row_map.iter().enumerate() {
        let s = decoded[k][t];
        out_table.rows[row].push((s + 1).to_string());
        if let Some(mid) = &midpoints {
            let g = mid[s];
            out_table.rows[row].push(format_float(g));
            if vol {
                out_table.rows[row].push(format_float((g / 2.0).exp()));
            }
        }
    }

    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    let path = out_dir.join("decoded.csv");
    data::write_table(&out_table, &path)?;
    say!("wrote {}", path.display());
    Ok(0)
}

// ---------------------------------------------------------------- forecast

#[derive(Serialize)]
struct ForecastReport {
    level: f64,
    series: Vec<SeriesReport>,
}

#[derive(Serialize)]
struct SeriesReport {
    id: String,
    /// Lower `level`-quantile of the next-step forecast past the last
    /// observation.
    var: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    exceedances: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frequency: Option<f64>,
}

fn kernel_at<'a>(
    constant: Option<&'a DMatrix<f64>>,
    spec: &ModelSpec,
    params: &ModelParams,
    dt: Option<f64>,
) -> Result<Cow<'a, DMatrix<f64>>> {
    match constant {
        Some(m) => Ok(Cow::Borrowed(m)),
        None => Ok(Cow::Owned(transition_kernel(spec, params, dt)?)),
    }
}

pub fn cmd_forecast(config_path: &Path, data_path: &Path, out_dir: &Path, level: f64) -> Result<i32> {
    let (cfg, spec, params) = load_model(config_path)?;
    if spec.is_point_process() {
        bail!("value forecasting is not defined for point-process classes");
    }
    let fc = cfg
        .forecast
        .as_ref()
        .ok_or_else(|| anyhow!("[forecast] block is required for the forecast command"))?;
    if !(fc.eval_upper > fc.eval_lower) {
        bail!("[forecast] eval_upper must exceed eval_lower");
    }
    if fc.eval_points < 2 {
        bail!("[forecast] eval_points must be at least 2, got {}", fc.eval_points);
    }
    let bound = load_bound(&cfg, &spec, data_path)?;
    let holdout = fc.holdout.unwrap_or(0);

    let p = fc.eval_points;
    let eval: Vec<f64> = (0..p)
        .map(|i| fc.eval_lower + (fc.eval_upper - fc.eval_lower) * i as f64 / (p - 1) as f64)
        .collect();

    // Discrete classes have one kernel for every step; continuous-time
    // classes need one per observation gap.
    let constant = if spec.needs_times() {
        None
    } else {
        Some(transition_kernel(&spec, &params, None)?)
    };
    let delta = initial_distribution(&spec, &params)?;

    let mut report = ForecastReport { level, series: Vec::new() };
    let mut density_headers = Vec::new();
    if cfg.data.id.is_some() {
        density_headers.push(cfg.data.id.clone().unwrap());
    }
    density_headers.push("x".to_string());
    density_headers.push("density".to_string());
    let mut density_table = Table::new(density_headers);

    for (k, (id, seq)) in bound.ids.iter().zip(&bound.dataset.sequences).enumerate() {
        let id = if id.is_empty() { (k + 1).to_string() } else { id.clone() };
        let t_total = seq.obs.len();
        if holdout > 0 && holdout + 1 > t_total {
            bail!(
                "holdout of {holdout} steps needs at least {} observations, id \"{id}\" has {t_total}",
                holdout + 1
            );
        }

        let mut cache: Option<(f64, Vec<f64>)> = None;
        let mut density_at = |j: usize, x: f64| -> latent_markov::Result<f64> {
            if !cache.as_ref().is_some_and(|(cx, _)| *cx == x) {
                let diag = emission_diag_for(&spec, &params, &Observation::scalar(x))?;
                cache = Some((x, diag));
            }
            Ok(cache.as_ref().expect("just filled").1[j])
        };

        let mut pass = ForwardPass::start(
            &delta,
            &emission_diag_for(&spec, &params, &seq.obs[0])?,
        )?;
        let mut steps = 0usize;
        let mut exceedances = 0usize;
        for t in 1..t_total {
            let dt = if spec.needs_times() {
                Some(seq.times[t] - seq.times[t - 1])
            } else {
                None
            };
            let kernel = kernel_at(constant.as_ref(), &spec, &params, dt)?;
            if t + holdout >= t_total {
                let dist = forecast(pass.state_probs(), kernel.as_ref(), &eval, &mut density_at)?;
                let var = dist.quantile(level)?;
                let target = &seq.obs[t];
                if !target.values.is_empty() && !target.missing[0] {
                    steps += 1;
                    if target.values[0] < var {
                        exceedances += 1;
                    }
                }
            }
            pass.step(kernel.as_ref(), &emission_diag_for(&spec, &params, &seq.obs[t])?)?;
        }

        let dt_ahead = if spec.needs_times() {
            Some(fc.dt.filter(|d| *d > 0.0).ok_or_else(|| {
                anyhow!("[forecast] dt must be a positive step length for continuous-time classes")
            })?)
        } else {
            None
        };
        let kernel = kernel_at(constant.as_ref(), &spec, &params, dt_ahead)?;
        let dist = forecast(pass.state_probs(), kernel.as_ref(), &eval, &mut density_at)?;
        let var = dist.quantile(level)?;

        for (x, d) in dist.eval_points.iter().zip(&dist.density) {
            let mut row = Vec::new();
            if cfg.data.id.is_some() {
                row.push(id.clone());
            }
            row.push(format_float(*x));
            row.push(format_float(*d));
            density_table.rows.push(row);
        }

        let (steps_out, exceed_out, freq_out) = if holdout > 0 {
            let freq = if steps > 0 { exceedances as f64 / steps as f64 } else { 0.0 };
            (Some(steps), Some(exceedances), Some(freq))
        } else {
            (None, None, None)
        };
        if let Some(f) = freq_out {
            say!(
                "id {id}: var = {var} (exceeded {exceedances} of {steps} holdout steps, frequency {f})"
            );
        } else {
            say!("id {id}: var = {var}");
        }
        report.series.push(SeriesReport {
            id: id.clone(),
            var,
            steps: steps_out,
            exceedances: exceed_out,
            frequency: freq_out,
        });
    }

    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    let csv_path = out_dir.join("forecast.csv");
    data::write_table(&density_table, &csv_path)?;
    let toml_path = out_dir.join("forecast.toml");
    let text = toml::to_string_pretty(&report).context("cannot serialize forecast report")?;
    fs::write(&toml_path, text)
        .with_context(|| format!("cannot write {}", toml_path.display()))?;
    say!("wrote {}", csv_path.display());
    say!("wrote {}", toml_path.display());
    Ok(0)
}
