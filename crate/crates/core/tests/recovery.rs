//! Simulate-then-fit round trips through the public API: data drawn at
//! known parameters must be recovered within sampling error, and the
//! optimizer must reach the same optimum from different starting points.

use latent_markov::emissions::{EmissionFamily, StateDist, ValueDist};
use latent_markov::fit::{
    dataset_loglik, fit_mle, Dataset, FitOptions, FitResult, HmmSpec, InitMode, MmppSpec,
    ModelParams, ModelSpec, Sequence, SsmAr1Spec, TpmParams,
};
use latent_markov::grid::{AR1Params, Grid};
use latent_markov::kernels::GeneratorMask;
use latent_markov::linalg::{stationary_discrete, GeneratorMatrix, TransitionMatrix};
use latent_markov::simulate::{sim_hmm, sim_mmpp, sim_ssm_ar1};
use nalgebra::DMatrix;

fn tpm(rows: &[&[f64]]) -> TransitionMatrix {
    let n = rows.len();
    TransitionMatrix::new(DMatrix::from_fn(n, n, |i, j| rows[i][j])).unwrap()
}

/// Point estimate and standard error of a named parameter, with the SE
/// backed out of the reported interval.
fn estimate(result: &FitResult, name: &str) -> (f64, f64) {
    let est = result
        .estimates
        .iter()
        .find(|e| e.name == name)
        .unwrap_or_else(|| panic!("no estimate named {name}"));
    let (lo, hi) = est
        .interval
        .unwrap_or_else(|| panic!("{name} has no interval"));
    (est.value, (hi - lo) / (2.0 * 1.959964))
}

fn assert_recovered(result: &FitResult, name: &str, truth: f64) {
    let (value, se) = estimate(result, name);
    assert!(
        (value - truth).abs() < 3.0 * se.max(1e-8),
        "{name}: estimate {value} vs truth {truth} (se {se})"
    );
}

#[test]
fn gaussian_hmm_round_trip_recovers_the_generating_parameters() {
    let truth_tpm = tpm(&[&[0.9, 0.1], &[0.2, 0.8]]);
    let delta = stationary_discrete(&truth_tpm).unwrap();
    let emissions = EmissionFamily::PerState(vec![
        StateDist::Normal { mean: -2.0, sd: 1.0 },
        StateDist::Normal { mean: 2.0, sd: 1.0 },
    ]);
    let sim = sim_hmm(&truth_tpm, &delta, &emissions, 2000, 2024).unwrap();
    let data = Dataset {
        sequences: vec![Sequence { times: vec![], obs: sim.obs }],
    };

    let spec = ModelSpec::Hmm(HmmSpec {
        n_states: 2,
        init: InitMode::Stationary,
        covariates: vec![],
    });
    let start = ModelParams::Hmm {
        tpm: TpmParams::Homogeneous(tpm(&[&[0.8, 0.2], &[0.3, 0.7]])),
        emissions: EmissionFamily::PerState(vec![
            StateDist::Normal { mean: -1.0, sd: 1.5 },
            StateDist::Normal { mean: 1.0, sd: 1.5 },
        ]),
        init: None,
    };
    let result = fit_mle(&spec, &data, &start, &FitOptions::default()).unwrap();
    assert!(result.converged);

    assert_recovered(&result, "state[1].mean", -2.0);
    assert_recovered(&result, "state[2].mean", 2.0);
    assert_recovered(&result, "state[1].sd", 1.0);
    assert_recovered(&result, "state[2].sd", 1.0);
    assert_recovered(&result, "gamma[1,2]", 0.1);
    assert_recovered(&result, "gamma[2,1]", 0.2);
}

#[test]
fn different_starting_points_reach_the_same_optimum() {
    let truth_tpm = tpm(&[&[0.95, 0.05], &[0.1, 0.9]]);
    let delta = stationary_discrete(&truth_tpm).unwrap();
    let emissions = EmissionFamily::PerState(vec![
        StateDist::Poisson { rate: 1.0 },
        StateDist::Poisson { rate: 6.0 },
    ]);
    let sim = sim_hmm(&truth_tpm, &delta, &emissions, 1500, 111).unwrap();
    let data = Dataset {
        sequences: vec![Sequence { times: vec![], obs: sim.obs }],
    };
    let spec = ModelSpec::Hmm(HmmSpec {
        n_states: 2,
        init: InitMode::Stationary,
        covariates: vec![],
    });

    let starts = [
        ModelParams::Hmm {
            tpm: TpmParams::Homogeneous(tpm(&[&[0.9, 0.1], &[0.1, 0.9]])),
            emissions: EmissionFamily::PerState(vec![
                StateDist::Poisson { rate: 2.0 },
                StateDist::Poisson { rate: 4.0 },
            ]),
            init: None,
        },
        ModelParams::Hmm {
            tpm: TpmParams::Homogeneous(tpm(&[&[0.6, 0.4], &[0.4, 0.6]])),
            emissions: EmissionFamily::PerState(vec![
                StateDist::Poisson { rate: 0.5 },
                StateDist::Poisson { rate: 8.0 },
            ]),
            init: None,
        },
    ];
    let fits: Vec<FitResult> = starts
        .iter()
        .map(|s| fit_mle(&spec, &data, s, &FitOptions::default()).unwrap())
        .collect();
    assert!(fits.iter().all(|f| f.converged));
    assert!(
        (fits[0].log_likelihood - fits[1].log_likelihood).abs() < 1e-6,
        "optima differ: {} vs {}",
        fits[0].log_likelihood,
        fits[1].log_likelihood
    );
    for name in ["state[1].rate", "state[2].rate", "gamma[1,2]", "gamma[2,1]"] {
        let (a, _) = estimate(&fits[0], name);
        let (b, _) = estimate(&fits[1], name);
        assert!((a - b).abs() < 1e-3, "{name}: {a} vs {b}");
    }
}

#[test]
fn volatility_likelihood_is_stable_under_grid_refinement() {
    let latent = AR1Params { phi: 0.888, mu: 0.0, sigma: 0.554 };
    let obs = ValueDist::SvScaledNormal { mu: 0.0012, beta: 0.026 };
    let sim = sim_ssm_ar1(&latent, &obs, 3000, 314).unwrap();
    let data = Dataset {
        sequences: vec![Sequence { times: vec![], obs: sim.obs }],
    };
    let params = ModelParams::SsmAr1 { latent, obs };

    let stat_sd = latent.stationary_var().sqrt();
    let (lo, hi) = (-5.0 * stat_sd, 5.0 * stat_sd);
    let coarse = ModelSpec::SsmAr1(SsmAr1Spec { grid: Grid::new(lo, hi, 75).unwrap() });
    let fine = ModelSpec::SsmAr1(SsmAr1Spec { grid: Grid::new(lo, hi, 150).unwrap() });

    let ll_coarse = dataset_loglik(&coarse, &params, &data).unwrap();
    let ll_fine = dataset_loglik(&fine, &params, &data).unwrap();
    let per_obs = (ll_coarse - ll_fine).abs() / data.n_obs() as f64;
    assert!(
        per_obs <= 1e-2,
        "per-observation log-likelihood moved by {per_obs} under refinement"
    );
}

#[test]
fn switching_point_process_round_trip_recovers_the_rates() {
    let q = GeneratorMatrix::new(DMatrix::from_row_slice(
        2,
        2,
        &[-0.5, 0.5, 0.75, -0.75],
    ))
    .unwrap();
    let rates = [3.0, 0.5];
    let sim = sim_mmpp(&q, &rates, 600.0, None, 271).unwrap();
    assert!(sim.times.len() > 500, "simulation produced too few events");
    let data = Dataset {
        sequences: vec![Sequence { times: sim.times, obs: sim.marks }],
    };

    let spec = ModelSpec::Mmpp(MmppSpec {
        mask: GeneratorMask::full(2).unwrap(),
        zero_rates: vec![false, false],
        marked: false,
    });
    let start = ModelParams::Mmpp {
        switch_rates: vec![0.3, 0.4],
        event_rates: vec![2.0, 1.0],
        marks: EmissionFamily::Unmarked,
    };
    let result = fit_mle(&spec, &data, &start, &FitOptions::default()).unwrap();
    assert!(result.converged);

    assert_recovered(&result, "lambda[1]", 3.0);
    assert_recovered(&result, "lambda[2]", 0.5);
    assert_recovered(&result, "q[1->2]", 0.5);
    assert_recovered(&result, "q[2->1]", 0.75);
}
