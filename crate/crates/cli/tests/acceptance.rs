//! Acceptance gate: one test per release criterion, library properties and
//! the end-to-end binary together. Each test line is the pass/fail verdict
//! for its criterion; stated runtime budgets are asserted.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use tempfile::TempDir;

use latent_markov::emissions::{EmissionFamily, Observation, StateDist, ValueDist};
use latent_markov::fit::{
    dataset_loglik, fit_mle, sequence_loglik, CtHmmSpec, CtSsmOuSpec, Dataset,
    FitOptions, FitResult, HmmSpec, InitMode, MmppSpec, ModelParams, ModelSpec, Sequence,
    SsmAr1Spec, TpmParams,
};
use latent_markov::forward::{log_likelihood, viterbi, Omegas};
use latent_markov::grid::{generator_approx, ou_tpm, AR1Params, Grid, OUParams};
use latent_markov::kernels::GeneratorMask;
use latent_markov::linalg::{
    expm, stationary_continuous, stationary_discrete, GeneratorMatrix, ProbabilityVector,
    TransitionMatrix,
};
use latent_markov::simulate::{sim_ctssm_ou, sim_hmm, sim_mmpp, sim_ssm_ar1, stream_rng};

// ----------------------------------------------------------------- helpers

fn prob_vector(v: Vec<f64>) -> ProbabilityVector {
    ProbabilityVector::new(DVector::from_vec(v)).expect("valid probabilities")
}

fn tpm(rows: &[&[f64]]) -> TransitionMatrix {
    let n = rows.len();
    let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    TransitionMatrix::new(m).expect("valid transition matrix")
}

fn random_stochastic_rows(n: usize, rng: &mut StdRng) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.05..1.0));
    for i in 0..n {
        let s: f64 = m.row(i).iter().sum();
        for j in 0..n {
            m[(i, j)] /= s;
        }
    }
    m
}

fn random_simplex(n: usize, rng: &mut StdRng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

/// Generator with every off-diagonal entry drawn uniformly; row-major free
/// order matches `GeneratorMask::full`.
fn random_generator(n: usize, rng: &mut StdRng) -> (DMatrix<f64>, Vec<f64>) {
    let mut q = DMatrix::zeros(n, n);
    let mut rates = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let r = rng.gen_range(0.1..1.0);
                q[(i, j)] = r;
                rates.push(r);
            }
        }
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| q[(i, j)]).sum();
        q[(i, i)] = -off;
    }
    (q, rates)
}

fn ln_normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Likelihood by exhaustive enumeration over all n^t state paths.
fn brute_force_loglik(delta: &[f64], omegas: &[DMatrix<f64>], diags: &[Vec<f64>]) -> f64 {
    let t_len = diags.len();
    let n = delta.len();
    assert_eq!(omegas.len(), t_len - 1);
    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    'paths: loop {
        let mut p = delta[path[0]] * diags[0][path[0]];
        for tau in 1..t_len {
            p *= omegas[tau - 1][(path[tau - 1], path[tau])] * diags[tau][path[tau]];
        }
        total += p;
        for slot in path.iter_mut() {
            *slot += 1;
            if *slot < n {
                continue 'paths;
            }
            *slot = 0;
        }
        break;
    }
    total.ln()
}

fn assert_rel_close(a: f64, b: f64, tol: f64, what: &str) {
    let scale = 1f64.max(a.abs()).max(b.abs());
    assert!(
        (a - b).abs() <= tol * scale,
        "{what}: {a} vs {b} (relative tolerance {tol})"
    );
}

fn estimate_value(result: &FitResult, name: &str) -> f64 {
    result
        .estimates
        .iter()
        .find(|e| e.name == name)
        .unwrap_or_else(|| panic!("no estimate named {name}"))
        .value
}

/// Truth must sit inside the 99% interval and, when nonzero, within 10%
/// relative error of the point estimate.
fn check_recovery(result: &FitResult, label: &str, checks: &[(&str, f64)]) {
    let wide = result.intervals(0.99).expect("99% intervals");
    for &(name, truth) in checks {
        let value = estimate_value(result, name);
        let (lo, hi) = wide
            .iter()
            .find(|e| e.name == name)
            .unwrap_or_else(|| panic!("{label}: no interval row for {name}"))
            .interval
            .unwrap_or_else(|| panic!("{label}: {name} has no interval"));
        assert!(
            lo <= truth && truth <= hi,
            "{label}: {name} truth {truth} outside 99% interval [{lo}, {hi}]"
        );
        if truth != 0.0 {
            let rel = (value - truth).abs() / truth.abs();
            assert!(
                rel <= 0.10,
                "{label}: {name} = {value} is {:.1}% from truth {truth}",
                100.0 * rel
            );
        }
    }
}

// -------------------------------------------------------------- criterion 1

#[test]
fn criterion_01_likelihood_matches_brute_force_enumeration() {
    let start = Instant::now();
    for inst in 0..50u64 {
        let mut rng = StdRng::seed_from_u64(1000 + inst);
        let n = if rng.gen_bool(0.5) { 2 } else { 3 };
        let t: usize = rng.gen_range(3..=5);

        // Discrete-time HMM with Gaussian emissions.
        let gamma = random_stochastic_rows(n, &mut rng);
        let delta = random_simplex(n, &mut rng);
        let means: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let sds: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
        let values: Vec<f64> = (0..t).map(|_| rng.gen_range(-4.0..4.0)).collect();

        let spec = ModelSpec::Hmm(HmmSpec {
            n_states: n,
            init: InitMode::Fixed(delta.clone()),
            covariates: vec![],
        });
        let params = ModelParams::Hmm {
            tpm: TpmParams::Homogeneous(TransitionMatrix::new(gamma.clone()).unwrap()),
            emissions: EmissionFamily::PerState(
                (0..n).map(|i| StateDist::Normal { mean: means[i], sd: sds[i] }).collect(),
            ),
            init: None,
        };
        let seq = Sequence {
            times: vec![],
            obs: values.iter().map(|&x| Observation::scalar(x)).collect(),
        };
        let ll = sequence_loglik(&spec, &params, &seq).unwrap();
        let diags: Vec<Vec<f64>> = values
            .iter()
            .map(|&x| (0..n).map(|i| ln_normal_pdf(x, means[i], sds[i]).exp()).collect())
            .collect();
        let omegas = vec![gamma.clone(); t - 1];
        let brute = brute_force_loglik(&delta, &omegas, &diags);
        assert_rel_close(ll, brute, 1e-10, &format!("hmm instance {inst}"));

        // Continuous-time HMM at irregular times.
        let (q, rates) = random_generator(n, &mut rng);
        let mut times = Vec::with_capacity(t);
        let mut now = 0.0;
        for _ in 0..t {
            times.push(now);
            now += rng.gen_range(0.2..1.5);
        }
        let spec = ModelSpec::CtHmm(CtHmmSpec {
            mask: GeneratorMask::full(n).unwrap(),
            init: InitMode::Fixed(delta.clone()),
        });
        let params = ModelParams::CtHmm {
            rates: rates.clone(),
            emissions: EmissionFamily::PerState(
                (0..n).map(|i| StateDist::Normal { mean: means[i], sd: sds[i] }).collect(),
            ),
            init: None,
        };
        let seq = Sequence {
            times: times.clone(),
            obs: values.iter().map(|&x| Observation::scalar(x)).collect(),
        };
        let ll = sequence_loglik(&spec, &params, &seq).unwrap();
        let omegas: Vec<DMatrix<f64>> = (1..t)
            .map(|k| expm(&(&q * (times[k] - times[k - 1]))).unwrap())
            .collect();
        let brute = brute_force_loglik(&delta, &omegas, &diags);
        assert_rel_close(ll, brute, 1e-10, &format!("cthmm instance {inst}"));

        // Unmarked MMPP: enumeration runs over the states at the window
        // start and at each event; the event rate sits in the kernel.
        let lambdas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
        let mut event_times = Vec::with_capacity(t);
        let mut now = 0.0;
        for _ in 0..t {
            now += rng.gen_range(0.1..1.0);
            event_times.push(now);
        }
        let spec = ModelSpec::Mmpp(MmppSpec {
            mask: GeneratorMask::full(n).unwrap(),
            zero_rates: vec![false; n],
            marked: false,
        });
        let params = ModelParams::Mmpp {
            switch_rates: rates,
            event_rates: lambdas.clone(),
            marks: EmissionFamily::Unmarked,
        };
        let seq = Sequence {
            times: event_times.clone(),
            obs: event_times.iter().map(|_| Observation::event_marker()).collect(),
        };
        let ll = sequence_loglik(&spec, &params, &seq).unwrap();

        let q_gen = GeneratorMatrix::new(q.clone()).unwrap();
        let pi = stationary_continuous(&q_gen).unwrap();
        let pi: Vec<f64> = pi.as_vector().iter().copied().collect();
        let mut q_minus = q.clone();
        for i in 0..n {
            q_minus[(i, i)] -= lambdas[i];
        }
        let omegas: Vec<DMatrix<f64>> = (0..t)
            .map(|k| {
                let gap = if k == 0 { event_times[0] } else { event_times[k] - event_times[k - 1] };
                let mut m = expm(&(&q_minus * gap)).unwrap();
                for (j, &lam) in lambdas.iter().enumerate() {
                    let mut col = m.column_mut(j);
                    col *= lam;
                }
                m
            })
            .collect();
        let diags = vec![vec![1.0; n]; t + 1];
        let brute = brute_force_loglik(&pi, &omegas, &diags);
        assert_rel_close(ll, brute, 1e-10, &format!("mmpp instance {inst}"));
    }
    assert!(start.elapsed() < Duration::from_secs(5), "took {:?}", start.elapsed());
}

// -------------------------------------------------------------- criterion 2

/// 50-term Taylor series with naive scaling and squaring; slow but
/// transparently correct for well-scaled inputs.
fn expm_taylor(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm: f64 = (0..n)
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let k = if norm > 0.25 { (norm / 0.25).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(k);
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = DMatrix::<f64>::identity(n, n);
    for j in 1..=50 {
        term = (&term * &scaled) / j as f64;
        sum += &term;
    }
    for _ in 0..k {
        sum = &sum * &sum;
    }
    sum
}

#[test]
fn criterion_02_matrix_exponential_matches_independent_oracles() {
    let start = Instant::now();
    for inst in 0..40u64 {
        let mut rng = StdRng::seed_from_u64(2000 + inst);
        let n = rng.gen_range(2..=8);
        let (q, _) = random_generator(n, &mut rng);
        let dt = rng.gen_range(0.1..3.0);
        let a = &q * dt;
        let ours = expm(&a).unwrap();
        let oracle = expm_taylor(&a);
        let err = (&ours - &oracle).abs().max();
        assert!(err <= 1e-9, "instance {inst}: max-abs {err}");

        // Semigroup: exp(A s) exp(A t) = exp(A (s+t)).
        let s = rng.gen_range(0.1..1.0);
        let t = rng.gen_range(0.1..1.0);
        let left = expm(&(&q * s)).unwrap() * expm(&(&q * t)).unwrap();
        let right = expm(&(&q * (s + t))).unwrap();
        let err = (&left - &right).abs().max();
        assert!(err <= 1e-9, "instance {inst}: semigroup max-abs {err}");
    }

    // Two states, rates 1 and 2, t = 1: the (1,1) entry has the closed form
    // (2 + exp(-3)) / 3 = 0.683262.
    let q = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 2.0, -2.0]);
    let e = expm(&q).unwrap();
    assert!((e[(0, 0)] - 0.683262).abs() <= 1e-5, "gamma11 {}", e[(0, 0)]);
    assert!((e[(0, 0)] - (2.0 + (-3.0f64).exp()) / 3.0).abs() <= 1e-12);

    assert!(start.elapsed() < Duration::from_secs(2), "took {:?}", start.elapsed());
}

// -------------------------------------------------------------- criterion 3

#[test]
fn criterion_03_single_state_point_process_reduces_to_iid_exponential() {
    let spec = ModelSpec::Mmpp(MmppSpec {
        mask: GeneratorMask::full(1).unwrap(),
        zero_rates: vec![false],
        marked: false,
    });
    for inst in 0..1000u64 {
        let mut rng = StdRng::seed_from_u64(3000 + inst);
        let lambda = rng.gen_range(0.3..3.0);
        let n: usize = rng.gen_range(3..=40);
        let mut now = 0.0;
        let mut times = Vec::with_capacity(n);
        let mut gaps = Vec::with_capacity(n);
        for _ in 0..n {
            let gap = rng.gen_range(0.05..1.5);
            now += gap;
            gaps.push(gap);
            times.push(now);
        }
        let params = ModelParams::Mmpp {
            switch_rates: vec![],
            event_rates: vec![lambda],
            marks: EmissionFamily::Unmarked,
        };
        let seq = Sequence {
            times,
            obs: (0..n).map(|_| Observation::event_marker()).collect(),
        };
        let ll = sequence_loglik(&spec, &params, &seq).unwrap();
        let iid: f64 = gaps.iter().map(|x| lambda.ln() - lambda * x).sum();
        assert!(
            (ll - iid).abs() <= 1e-12,
            "instance {inst}: {ll} vs iid {iid}"
        );
    }

    // The fitted rate is the closed-form count over total time.
    let mut rng = StdRng::seed_from_u64(3999);
    let mut now = 0.0;
    let times: Vec<f64> = (0..200)
        .map(|_| {
            now += rng.gen_range(0.1..1.0);
            now
        })
        .collect();
    let total = *times.last().unwrap();
    let mle = times.len() as f64 / total;
    let data = Dataset {
        sequences: vec![Sequence {
            times,
            obs: (0..200).map(|_| Observation::event_marker()).collect(),
        }],
    };
    let start = ModelParams::Mmpp {
        switch_rates: vec![],
        event_rates: vec![1.0],
        marks: EmissionFamily::Unmarked,
    };
    let mut options = FitOptions::default();
    options.optim.grad_tol = 1e-8;
    let result = fit_mle(&spec, &data, &start, &options).unwrap();
    let lambda_hat = estimate_value(&result, "lambda[1]");
    assert!(
        (lambda_hat - mle).abs() <= 1e-6,
        "lambda {lambda_hat} vs closed form {mle}"
    );
}

// -------------------------------------------------------------- criterion 4

#[test]
fn criterion_04_volatility_grid_refinement_converges() {
    let start = Instant::now();
    let latent = AR1Params { phi: 0.888, mu: 0.0, sigma: 0.554 };
    let obs = ValueDist::SvScaledNormal { mu: 0.0, beta: 0.026 };
    let draw = sim_ssm_ar1(&latent, &obs, 5000, 404).unwrap();
    let data = Dataset {
        sequences: vec![Sequence { times: vec![], obs: draw.obs }],
    };
    let params = ModelParams::SsmAr1 { latent, obs };

    let ll_at = |m: usize| {
        let spec = ModelSpec::SsmAr1(SsmAr1Spec {
            grid: Grid::new(-6.0, 6.0, m).unwrap(),
        });
        dataset_loglik(&spec, &params, &data).unwrap()
    };
    let (l100, l200, l400) = (ll_at(100), ll_at(200), ll_at(400));
    let d_coarse = (l100 - l200).abs();
    let d_fine = (l200 - l400).abs();
    assert!(
        d_coarse > d_fine,
        "refinement must tighten: {d_coarse} then {d_fine}"
    );
    assert!(d_fine <= 1e-2, "fine-grid gap {d_fine}");
    assert!(start.elapsed() < Duration::from_secs(60), "took {:?}", start.elapsed());
}

// -------------------------------------------------------------- criterion 5

fn fit_options_for_recovery() -> FitOptions {
    FitOptions::default()
}

fn recover_hmm() {
    let gamma = tpm(&[&[0.95, 0.05], &[0.10, 0.90]]);
    let delta = prob_vector(vec![2.0 / 3.0, 1.0 / 3.0]);
    let emissions = EmissionFamily::PerState(vec![
        StateDist::Normal { mean: -2.0, sd: 1.0 },
        StateDist::Normal { mean: 2.0, sd: 1.0 },
    ]);
    let draw = sim_hmm(&gamma, &delta, &emissions, 10_000, 501).unwrap();
    let spec = ModelSpec::Hmm(HmmSpec {
        n_states: 2,
        init: InitMode::Stationary,
        covariates: vec![],
    });
    let start = ModelParams::Hmm {
        tpm: TpmParams::Homogeneous(tpm(&[&[0.9, 0.1], &[0.2, 0.8]])),
        emissions: EmissionFamily::PerState(vec![
            StateDist::Normal { mean: -1.5, sd: 1.3 },
            StateDist::Normal { mean: 1.5, sd: 1.3 },
        ]),
        init: None,
    };
    let data = Dataset {
        sequences: vec![Sequence { times: vec![], obs: draw.obs }],
    };
    let result = fit_mle(&spec, &data, &start, &fit_options_for_recovery()).unwrap();
    assert!(result.converged, "hmm fit did not converge");
    check_recovery(
        &result,
        "hmm",
        &[
            ("gamma[1,1]", 0.95),
            ("gamma[1,2]", 0.05),
            ("gamma[2,1]", 0.10),
            ("gamma[2,2]", 0.90),
            ("state[1].mean", -2.0),
            ("state[1].sd", 1.0),
            ("state[2].mean", 2.0),
            ("state[2].sd", 1.0),
        ],
    );
}

fn recover_cthmm() {
    let mask = GeneratorMask::from_free_pairs(3, &[(0, 1), (0, 2), (1, 2)]).unwrap();
    let rates = [0.4, 0.15, 0.3];
    let mut q = DMatrix::zeros(3, 3);
    q[(0, 1)] = rates[0];
    q[(0, 2)] = rates[1];
    q[(1, 2)] = rates[2];
    q[(0, 0)] = -(rates[0] + rates[1]);
    q[(1, 1)] = -rates[2];
    let q = GeneratorMatrix::new(q).unwrap();
    let delta = prob_vector(vec![1.0, 0.0, 0.0]);
    let emissions = EmissionFamily::PerState(vec![
        StateDist::Normal { mean: 95.0, sd: 8.0 },
        StateDist::Normal { mean: 70.0, sd: 12.0 },
        StateDist::EventIndicator,
    ]);

    let mut sequences = Vec::new();
    let mut n_obs = 0usize;
    for patient in 0..910u64 {
        let mut rng = stream_rng(502, patient);
        let mut times = Vec::with_capacity(12);
        let mut now = 0.0;
        for visit in 0..12 {
            if visit > 0 {
                now += rng.gen_range(0.5..1.5);
            }
            times.push(now);
        }
        let draw =
            latent_markov::simulate::sim_cthmm_rng(&q, &delta, &emissions, &times, &mut rng)
                .unwrap();
        let cut = draw.obs.iter().position(|o| o.event).map_or(times.len(), |i| i + 1);
        n_obs += cut;
        sequences.push(Sequence {
            times: times[..cut].to_vec(),
            obs: draw.obs[..cut].to_vec(),
        });
    }
    assert!(n_obs >= 4500, "want about five thousand snapshots, got {n_obs}");

    let spec = ModelSpec::CtHmm(CtHmmSpec {
        mask,
        init: InitMode::Fixed(vec![1.0, 0.0, 0.0]),
    });
    let start = ModelParams::CtHmm {
        rates: vec![0.3, 0.2, 0.4],
        emissions: EmissionFamily::PerState(vec![
            StateDist::Normal { mean: 90.0, sd: 10.0 },
            StateDist::Normal { mean: 65.0, sd: 15.0 },
            StateDist::EventIndicator,
        ]),
        init: None,
    };
    let data = Dataset { sequences };
    let result = fit_mle(&spec, &data, &start, &fit_options_for_recovery()).unwrap();
    assert!(result.converged, "cthmm fit did not converge");
    check_recovery(
        &result,
        "cthmm",
        &[
            ("q[1->2]", 0.4),
            ("q[1->3]", 0.15),
            ("q[2->3]", 0.3),
            ("state[1].mean", 95.0),
            ("state[1].sd", 8.0),
            ("state[2].mean", 70.0),
            ("state[2].sd", 12.0),
        ],
    );
}

fn recover_sv() {
    let latent = AR1Params { phi: 0.888, mu: 0.0, sigma: 0.554 };
    let obs = ValueDist::SvScaledNormal { mu: 0.0, beta: 0.026 };
    let draw = sim_ssm_ar1(&latent, &obs, 20_000, 503).unwrap();
    let spec = ModelSpec::SsmAr1(SsmAr1Spec {
        grid: Grid::new(-6.0, 6.0, 150).unwrap(),
    });
    let start = ModelParams::SsmAr1 {
        latent: AR1Params { phi: 0.85, mu: 0.0, sigma: 0.6 },
        obs: ValueDist::SvScaledNormal { mu: 0.0, beta: 0.03 },
    };
    let data = Dataset {
        sequences: vec![Sequence { times: vec![], obs: draw.obs }],
    };
    let result = fit_mle(&spec, &data, &start, &fit_options_for_recovery()).unwrap();
    assert!(result.converged, "sv fit did not converge");
    check_recovery(
        &result,
        "sv",
        &[("phi", 0.888), ("sigma", 0.554), ("obs.mu", 0.0), ("obs.beta", 0.026)],
    );
}

fn recover_ou_ctssm() {
    let latent = OUParams { theta: 0.5, mu: 0.3, sigma: 0.8 };
    let obs = ValueDist::Normal { sd: 0.4 };
    let mut rng = stream_rng(504, 0);
    let mut times = Vec::with_capacity(5000);
    let mut now = 0.0;
    for k in 0..5000 {
        if k > 0 {
            now += rng.gen_range(0.5..1.5);
        }
        times.push(now);
    }
    let draw = sim_ctssm_ou(&latent, &obs, &times, 504).unwrap();
    // Stationary sd 0.8; the grid spans the mean plus and minus four of them.
    let spec = ModelSpec::CtSsmOu(CtSsmOuSpec {
        grid: Grid::new(0.3 - 3.2, 0.3 + 3.2, 60).unwrap(),
    });
    let start = ModelParams::CtSsmOu {
        latent: OUParams { theta: 0.4, mu: 0.2, sigma: 0.7 },
        obs: ValueDist::Normal { sd: 0.5 },
    };
    let data = Dataset {
        sequences: vec![Sequence { times, obs: draw.obs }],
    };
    let result = fit_mle(&spec, &data, &start, &fit_options_for_recovery()).unwrap();
    assert!(result.converged, "ou ctssm fit did not converge");
    check_recovery(
        &result,
        "ou",
        &[("theta", 0.5), ("mu", 0.3), ("sigma", 0.8), ("obs.sd", 0.4)],
    );
}

fn recover_mmpp() {
    let q = GeneratorMatrix::new(DMatrix::from_row_slice(
        2,
        2,
        &[-0.5, 0.5, 0.75, -0.75],
    ))
    .unwrap();
    let rates = [3.0, 0.5];
    let draw = sim_mmpp(&q, &rates, 2500.0, None, 511).unwrap();
    assert!(draw.times.len() >= 4000, "want about 5000 events, got {}", draw.times.len());
    let spec = ModelSpec::Mmpp(MmppSpec {
        mask: GeneratorMask::full(2).unwrap(),
        zero_rates: vec![false, false],
        marked: false,
    });
    let start = ModelParams::Mmpp {
        switch_rates: vec![0.4, 0.6],
        event_rates: vec![2.5, 0.8],
        marks: EmissionFamily::Unmarked,
    };
    let n = draw.times.len();
    let data = Dataset {
        sequences: vec![Sequence {
            times: draw.times,
            obs: (0..n).map(|_| Observation::event_marker()).collect(),
        }],
    };
    let result = fit_mle(&spec, &data, &start, &fit_options_for_recovery()).unwrap();
    assert!(result.converged, "mmpp fit did not converge");
    check_recovery(
        &result,
        "mmpp",
        &[
            ("q[1->2]", 0.5),
            ("q[2->1]", 0.75),
            ("lambda[1]", 3.0),
            ("lambda[2]", 0.5),
        ],
    );
}

#[test]
fn criterion_05_every_model_class_recovers_its_generating_parameters() {
    let start = Instant::now();
    recover_hmm();
    recover_cthmm();
    recover_mmpp();
    recover_ou_ctssm();
    recover_sv();
    assert!(start.elapsed() < Duration::from_secs(600), "took {:?}", start.elapsed());
}

// -------------------------------------------------------------- criterion 6

#[test]
fn criterion_06_intensity_generator_approximation_tightens_with_dt() {
    let start = Instant::now();
    let p = OUParams { theta: 1.0, mu: 0.0, sigma: 1.0 };
    let grid = Grid::new(-4.0, 4.0, 100).unwrap();
    let delta = 0.5;
    let reference = ou_tpm(&grid, &p, delta).unwrap();

    let error_at = |dt_star: f64| {
        let gamma_star = ou_tpm(&grid, &p, dt_star).unwrap();
        let g = generator_approx(&gamma_star, dt_star).unwrap();
        let approx = expm(&(g.as_matrix() * delta)).unwrap();
        (&approx - &reference).abs().max()
    };
    let d: Vec<f64> = [0.02, 0.01, 0.005].iter().map(|&s| error_at(s)).collect();
    assert!(d[1] <= 1.2 * d[0], "0.02 -> 0.01: {} then {}", d[0], d[1]);
    assert!(d[2] <= 1.2 * d[1], "0.01 -> 0.005: {} then {}", d[1], d[2]);
    assert!(d[2] < d[0], "overall decrease: {} to {}", d[0], d[2]);
    assert!(start.elapsed() < Duration::from_secs(30), "took {:?}", start.elapsed());
}

// -------------------------------------------------------------- criterion 7

#[test]
fn criterion_07_forward_recursion_invariants_hold() {
    for inst in 0..200u64 {
        let mut rng = StdRng::seed_from_u64(7000 + inst);
        let n = rng.gen_range(2..=4);
        let t: usize = rng.gen_range(5..=30);
        let gamma = random_stochastic_rows(n, &mut rng);
        let delta = prob_vector(random_simplex(n, &mut rng));
        let diags: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..n).map(|_| rng.gen_range(0.01..2.0)).collect())
            .collect();

        let omegas = Omegas::Constant(&gamma);
        let mut diag_at = |tau: usize| Ok(diags[tau - 1].clone());
        let ll = log_likelihood(&delta, &omegas, &mut diag_at, t).unwrap();

        // Emission scaling moves the log likelihood by exactly t ln c and
        // cannot change which path is most likely.
        let c = rng.gen_range(0.1..10.0);
        let mut diag_scaled = |tau: usize| {
            Ok(diags[tau - 1].iter().map(|p| p * c).collect())
        };
        let ll_scaled = log_likelihood(&delta, &omegas, &mut diag_scaled, t).unwrap();
        assert!(
            (ll_scaled - (ll + t as f64 * c.ln())).abs() <= 1e-9,
            "instance {inst}: scaling shifted by {} not {}",
            ll_scaled - ll,
            t as f64 * c.ln()
        );
        let mut ln_diag = |tau: usize| {
            Ok(diags[tau - 1].iter().map(|p| p.ln()).collect())
        };
        let mut ln_diag_scaled = |tau: usize| {
            Ok(diags[tau - 1].iter().map(|p| (p * c).ln()).collect())
        };
        let path = viterbi(&delta, &omegas, &mut ln_diag, t).unwrap();
        let path_scaled = viterbi(&delta, &omegas, &mut ln_diag_scaled, t).unwrap();
        assert_eq!(path.states, path_scaled.states, "instance {inst}");

        // The joint density of the best single path cannot beat the sum
        // over all paths.
        assert!(
            path.log_joint <= ll + 1e-12,
            "instance {inst}: log joint {} above log likelihood {ll}",
            path.log_joint
        );

        // Relabeling the states permutes nothing observable.
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                p.swap(i, j);
            }
            p
        };
        let gamma_p = DMatrix::from_fn(n, n, |i, j| gamma[(perm[i], perm[j])]);
        let delta_p = prob_vector(perm.iter().map(|&i| delta.as_vector()[i]).collect());
        let omegas_p = Omegas::Constant(&gamma_p);
        let mut diag_p = |tau: usize| {
            Ok(perm.iter().map(|&i| diags[tau - 1][i]).collect())
        };
        let ll_p = log_likelihood(&delta_p, &omegas_p, &mut diag_p, t).unwrap();
        assert!(
            (ll - ll_p).abs() <= 1e-12,
            "instance {inst}: relabeling moved the log likelihood by {}",
            ll - ll_p
        );
    }
}

// -------------------------------------------------------------- criterion 8

#[test]
fn criterion_08_stationary_distributions_solve_their_equations() {
    for inst in 0..100u64 {
        let mut rng = StdRng::seed_from_u64(8000 + inst);
        let n = rng.gen_range(2..=6);

        let gamma = TransitionMatrix::new(random_stochastic_rows(n, &mut rng)).unwrap();
        let pi = stationary_discrete(&gamma).unwrap();
        let v = pi.as_vector();
        let res = (v.transpose() * gamma.as_matrix() - v.transpose()).abs().max();
        assert!(res <= 1e-10, "instance {inst}: discrete residual {res}");

        let (q, _) = random_generator(n, &mut rng);
        let q = GeneratorMatrix::new(q).unwrap();
        let pi_c = stationary_continuous(&q).unwrap();
        let w = pi_c.as_vector();
        let res = (w.transpose() * q.as_matrix()).abs().max();
        assert!(res <= 1e-10, "instance {inst}: continuous residual {res}");

        // The continuous chain and its one-unit skeleton share a
        // stationary law.
        let skeleton = latent_markov::kernels::omega_cthmm(&q, 1.0).unwrap();
        let pi_d = stationary_discrete(&skeleton).unwrap();
        let diff = (pi_d.as_vector() - w).abs().max();
        assert!(diff <= 1e-8, "instance {inst}: skeleton gap {diff}");
    }
}

// -------------------------------------------------------------- criterion 9

fn bin_dir() -> &'static Path {
    Path::new(env!("CARGO_BIN_EXE_lmk")).parent().unwrap()
}

fn run_cli(args: &[&str]) -> String {
    let out = Command::new(bin_dir().join("lmk"))
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn criterion_09_rolling_var_backtest_hits_its_nominal_rate() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("sv.toml");
    fs::write(
        &cfg,
        r#"
[model]
class = "ssm_ar1"

[model.grid]
lower = -6.0
upper = 6.0
m = 100

[params]
phi = 0.888
mu = 0.0
sigma = 0.554

[params.obs]
dist = "sv_scaled_normal"
mu = 0.0
beta = 0.026

[data]
values = ["return"]

[simulate]
seed = 901
t_len = 2500

[forecast]
eval_lower = -0.6
eval_upper = 0.6
eval_points = 1201
holdout = 2000
"#,
    )
    .unwrap();
    let sim = dir.path().join("sim");
    run_cli(&["simulate", "--config", cfg.to_str().unwrap(), "--out", sim.to_str().unwrap()]);
    let fc = dir.path().join("fc");
    run_cli(&[
        "forecast",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        sim.join("data.csv").to_str().unwrap(),
        "--out",
        fc.to_str().unwrap(),
        "--level",
        "0.01",
    ]);
    let report: toml::Value = fs::read_to_string(fc.join("forecast.toml"))
        .unwrap()
        .parse()
        .unwrap();
    let series = &report["series"][0];
    assert_eq!(series["steps"].as_integer(), Some(2000));
    let freq = series["frequency"].as_float().unwrap();
    assert!(
        (0.004..=0.02).contains(&freq),
        "exceedance frequency {freq} outside the 99.9% band around 0.01"
    );
}

// ------------------------------------------------------------- criterion 10

#[test]
fn criterion_10_cli_pipeline_is_deterministic_end_to_end() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("model.toml");
    fs::write(
        &cfg,
        r#"
[model]
class = "hmm"
states = 2

[params]
tpm = [[0.9, 0.1], [0.2, 0.8]]

[[params.emission]]
dist = "normal"
mean = -1.5
sd = 0.8

[[params.emission]]
dist = "normal"
mean = 1.5
sd = 0.8

[data]
id = "series"
time = "t"
values = ["x"]

[simulate]
seed = 1001
n_seq = 2
t_len = 400

[forecast]
eval_lower = -5.0
eval_upper = 5.0
eval_points = 501
holdout = 50
"#,
    )
    .unwrap();

    let run_pipeline = |label: &str| {
        let base = dir.path().join(label);
        let sim = base.join("sim");
        let fit = base.join("fit");
        let dec = base.join("dec");
        let fc = base.join("fc");
        run_cli(&["simulate", "--config", cfg.to_str().unwrap(), "--out", sim.to_str().unwrap()]);
        let data = sim.join("data.csv");
        run_cli(&[
            "fit",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            fit.to_str().unwrap(),
        ]);
        let est = fit.join("estimates.toml");
        run_cli(&[
            "decode",
            "--config",
            est.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            dec.to_str().unwrap(),
        ]);
        run_cli(&[
            "forecast",
            "--config",
            est.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            fc.to_str().unwrap(),
        ]);
        [
            sim.join("data.csv"),
            sim.join("latent.csv"),
            fit.join("estimates.toml"),
            dec.join("decoded.csv"),
            fc.join("forecast.csv"),
            fc.join("forecast.toml"),
        ]
        .map(|p| fs::read_to_string(p).unwrap())
    };

    let first = run_pipeline("one");
    let second = run_pipeline("two");
    for (a, b) in first.iter().zip(second.iter()) {
        assert_eq!(a, b, "pipeline output differs between identical runs");
    }
}

