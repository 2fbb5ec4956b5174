//! Acceptance suite: one test per release criterion, each printing a PASS
//! line with its headline numbers (run with `--nocapture` to see them).
//!
//! Expected values come from independent oracles computed inside this file:
//! finite differences for derivatives, exact rational arithmetic for the
//! boosting and vote formulas, brute-force counting for fairness metrics,
//! classical empirical-CDF statistics for KS and Wasserstein, and the
//! analytic Bayes values available on synthetic data with known noise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sigmafair::data::{split, synth_binary, synth_regression, Dataset, SplitSpec};
use sigmafair::estimators::{
    self, selective_ensemble_uncertainty, self_inconsistency, sigma_to_prob, EnsembleCounts,
    Estimator, Prediction, ProbSource,
};
use sigmafair::eval::{calibration_bins, consistency, nll_binary, nll_normal};
use sigmafair::fairness::{
    abstention_curve, binary_metrics, ks_uasp, wasserstein_1d, GroupedPredictions, MixtureCdf,
};
use sigmafair::gbt::{self, leaf_weight, split_gain, PipelineConfig, SweepParam};
use sigmafair::losses::{BetaNll, FaithfulNll, Logistic, NormalNll, SquaredError};
use std::sync::Mutex;
use std::time::Instant;

/// The heavy criteria each saturate the machine through rayon; running them
/// one at a time keeps every per-criterion runtime meaningful.
static GATE: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[values.len() / 2]
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

// ---------------------------------------------------------------------
// Criterion 1: loss gradients and Hessians against central finite
// differences at 100 random points per loss.
// ---------------------------------------------------------------------

fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn second_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
}

fn assert_derivative(analytic: f64, numeric: f64, rel_tol: f64, label: &str) {
    if numeric.abs() >= 1e-3 {
        let rel = (analytic - numeric).abs() / numeric.abs();
        assert!(
            rel <= rel_tol,
            "FAIL criterion 1 ({label}): analytic={analytic} numeric={numeric} rel={rel}"
        );
    } else {
        // near-degenerate point: fall back to an absolute check
        assert!(
            (analytic - numeric).abs() <= 1e-6,
            "FAIL criterion 1 ({label}): analytic={analytic} numeric={numeric}"
        );
    }
}

#[test]
fn criterion_01_loss_derivatives_match_finite_differences() {
    use sigmafair::gbt::Loss;
    let _gate = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let beta = BetaNll::new(0.5).unwrap();
    let mut g1 = [0.0];
    let mut h1 = [0.0];
    let mut g2 = [0.0, 0.0];
    let mut h2 = [0.0, 0.0];

    for _ in 0..100 {
        let s = rng.gen_range(-4.0..4.0);
        let y = rng.gen_range(-4.0..4.0);
        let yb = f64::from(rng.gen_bool(0.5));
        let m = rng.gen_range(-3.0..3.0);
        let t = rng.gen_range(-1.5..1.5);

        SquaredError.gradient(y, &[s], &mut g1);
        assert_derivative(g1[0], central_diff(|x| SquaredError.value(y, &[x]), s, 1e-5), 1e-5, "squared g");
        SquaredError.hessian(y, &[s], &mut h1);
        assert_derivative(h1[0], second_diff(|x| SquaredError.value(y, &[x]), s, 2e-4), 1e-4, "squared h");

        Logistic.gradient(yb, &[s], &mut g1);
        assert_derivative(g1[0], central_diff(|x| Logistic.value(yb, &[x]), s, 1e-5), 1e-5, "logistic g");
        Logistic.hessian(yb, &[s], &mut h1);
        assert_derivative(h1[0], second_diff(|x| Logistic.value(yb, &[x]), s, 2e-4), 1e-4, "logistic h");

        NormalNll.gradient(y, &[m, t], &mut g2);
        assert_derivative(g2[0], central_diff(|x| NormalNll.value(y, &[x, t]), m, 1e-5), 1e-5, "normal gm");
        assert_derivative(g2[1], central_diff(|x| NormalNll.value(y, &[m, x]), t, 1e-5), 1e-5, "normal gt");
        NormalNll.hessian(y, &[m, t], &mut h2);
        assert_derivative(h2[0], second_diff(|x| NormalNll.value(y, &[x, t]), m, 2e-4), 1e-4, "normal hm");
        assert_derivative(h2[1], second_diff(|x| NormalNll.value(y, &[m, x]), t, 2e-4), 1e-4, "normal ht");

        // beta-NLL freezes the sigma^(2 beta) multiplier at the evaluation
        // point: differentiate the frozen objective
        let w = t.exp(); // sigma^(2*0.5) = exp(t)
        beta.gradient(y, &[m, t], &mut g2);
        assert_derivative(g2[0], central_diff(|x| w * NormalNll.value(y, &[x, t]), m, 1e-5), 1e-5, "beta gm");
        assert_derivative(g2[1], central_diff(|x| w * NormalNll.value(y, &[m, x]), t, 1e-5), 1e-5, "beta gt");
        beta.hessian(y, &[m, t], &mut h2);
        assert_derivative(h2[0], second_diff(|x| w * NormalNll.value(y, &[x, t]), m, 2e-4), 1e-4, "beta hm");
        assert_derivative(h2[1], second_diff(|x| w * NormalNll.value(y, &[m, x]), t, 2e-4), 1e-4, "beta ht");

        // faithful differentiates per-coordinate partial objectives
        FaithfulNll.gradient(y, &[m, t], &mut g2);
        assert_derivative(g2[0], central_diff(|x| SquaredError.value(y, &[x]), m, 1e-5), 1e-5, "faithful gm");
        assert_derivative(g2[1], central_diff(|x| NormalNll.value(y, &[m, x]), t, 1e-5), 1e-5, "faithful gt");
        FaithfulNll.hessian(y, &[m, t], &mut h2);
        assert_derivative(h2[0], second_diff(|x| SquaredError.value(y, &[x]), m, 2e-4), 1e-4, "faithful hm");
        assert_derivative(h2[1], second_diff(|x| NormalNll.value(y, &[m, x]), t, 2e-4), 1e-4, "faithful ht");
    }
    println!(
        "PASS criterion 1: 5 losses x 100 points match finite differences ({:.2?})",
        started.elapsed()
    );
}

// ---------------------------------------------------------------------
// Criterion 2: boosting formulas against exact recomputation; monotone
// squared-error training loss.
// ---------------------------------------------------------------------

fn gcd(mut a: i128, mut b: i128) -> i128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.abs().max(1)
}

#[test]
fn criterion_02_boosting_formulas_and_monotone_training() {
    let _gate = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);

    // (a) continuous inputs: bit-exact agreement with an independently
    // written arrangement of the same algebra
    for _ in 0..1000 {
        let g = rng.gen_range(-50.0..50.0);
        let h = rng.gen_range(0.01..50.0);
        let ridge = rng.gen_range(0.0..5.0);
        assert_eq!(leaf_weight(g, h, ridge).unwrap(), -g / (h + ridge));

        let (gl, gr) = (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
        let (hl, hr) = (rng.gen_range(0.01..50.0), rng.gen_range(0.01..50.0));
        let gamma = rng.gen_range(0.0..2.0);
        let oracle = 0.5
            * (gl * gl / (hl + ridge) + gr * gr / (hr + ridge)
                - (gl + gr) * (gl + gr) / (hl + hr + ridge))
            - gamma;
        assert_eq!(split_gain(gl, hl, gr, hr, ridge, gamma).unwrap(), oracle);
    }

    // (b) exact rational oracle on dyadic inputs where every intermediate
    // is representable: equality must be exact
    for _ in 0..1000 {
        // leaf weight: reduced-fraction route must round identically
        let g: i128 = rng.gen_range(-1_000_000..=1_000_000);
        let h: i128 = rng.gen_range(1..=1_000_000);
        let r: i128 = rng.gen_range(0..=1_000_000);
        let (num, den) = (-g, h + r);
        let d = gcd(num, den);
        let oracle = (num / d) as f64 / (den / d) as f64;
        assert_eq!(leaf_weight(g as f64, h as f64, r as f64).unwrap(), oracle);

        // split gain with power-of-two denominators: fully dyadic
        let a: u32 = rng.gen_range(2..=8);
        let gl: i128 = rng.gen_range(-1024..=1024);
        let gr: i128 = rng.gen_range(-1024..=1024);
        let k: i128 = rng.gen_range(0..=16); // gamma = k/16
        // exact value over denominator 2^(a+2) and 16
        let core = 2 * gl * gl + 2 * gr * gr - (gl + gr) * (gl + gr); // / 2^(a+2)
        let exact = core as f64 / (1i128 << (a + 2)) as f64 - k as f64 / 16.0;
        let got = split_gain(
            gl as f64,
            (1i128 << a) as f64,
            gr as f64,
            (1i128 << a) as f64,
            0.0,
            k as f64 / 16.0,
        )
        .unwrap();
        assert_eq!(got, exact, "gl={gl} gr={gr} a={a} k={k}");
    }

    // (c) squared-error training loss is non-increasing over 50 rounds on
    // 20 random datasets
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let columns: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..500).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let targets: Vec<f64> = (0..500)
            .map(|i| {
                columns[0][i] - 0.5 * columns[1][i] + columns[2][i] * columns[3][i]
                    + rng.gen_range(-1.0..1.0)
            })
            .collect();
        let config = PipelineConfig {
            n_trees: 50,
            ..PipelineConfig::default()
        };
        let model = gbt::fit(&columns, &targets, &SquaredError, &config).unwrap();
        for (round, w) in model.training_loss.windows(2).enumerate() {
            assert!(
                w[1] <= w[0] + 1e-12,
                "FAIL criterion 2: loss rose {} -> {} at round {round} (seed {seed})",
                w[0],
                w[1]
            );
        }
    }
    println!(
        "PASS criterion 2: leaf/gain formulas exact on 2000 inputs; 20 monotone runs ({:.2?})",
        started.elapsed()
    );
}

// ---------------------------------------------------------------------
// Criterion 3: selective-ensemble p-values and self-inconsistency against
// exhaustive enumeration for all k <= 12.
// ---------------------------------------------------------------------

#[test]
fn criterion_03_vote_statistics_match_exact_enumeration() {
    let _gate = serial();
    let started = Instant::now();
    for k in 1..=12usize {
        for k0 in 0..=k {
            let counts = EnsembleCounts::new(k0, k - k0).unwrap();

            // binomial tail by explicit enumeration in integers
            let m = k0.min(k - k0);
            let mut tail: u64 = 0;
            for i in 0..=m {
                let mut c: u64 = 1;
                for j in 0..i {
                    c = c * (k - j) as u64 / (j + 1) as u64;
                }
                tail += c;
            }
            let oracle_p = (2.0 * tail as f64 / (1u64 << k) as f64).min(1.0);
            assert_eq!(
                selective_ensemble_uncertainty(&counts),
                oracle_p,
                "FAIL criterion 3: p-value mismatch at k={k} k0={k0}"
            );

            if k >= 2 {
                let oracle_si = 2.0 * (k0 * (k - k0)) as f64 / (k * (k - 1)) as f64;
                assert_eq!(
                    self_inconsistency(&counts).unwrap(),
                    oracle_si,
                    "FAIL criterion 3: inconsistency mismatch at k={k} k0={k0}"
                );
            }
        }
    }
    println!(
        "PASS criterion 3: vote statistics exact for all k <= 12 ({:.2?})",
        started.elapsed()
    );
}

// ---------------------------------------------------------------------
// Criterion 4: probability -> sigma -> probability round trip.
// ---------------------------------------------------------------------

#[test]
fn criterion_04_sigma_probability_round_trip() {
    let _gate = serial();
    let started = Instant::now();
    let mut worst = 0.0f64;
    for i in 1..1000 {
        let p = i as f64 / 1000.0;
        let sigma = (p * (1.0 - p)).sqrt();
        let label = u8::from(p >= 0.5);
        let back = sigma_to_prob(sigma, label);
        worst = worst.max((back - p).abs());
        assert!(
            (back - p).abs() <= 1e-12,
            "FAIL criterion 4: p={p} came back as {back}"
        );
    }
    println!(
        "PASS criterion 4: round trip over 999 grid points, worst error {worst:.2e} ({:.2?})",
        started.elapsed()
    );
}

// ---------------------------------------------------------------------
// Criterion 5: binary calibration ordering at desk scale and the gap to
// the analytic Bayes NLL.
// ---------------------------------------------------------------------

/// Mean Bernoulli entropy of the true probabilities: the NLL of the Bayes
/// predictor on this test set.
fn bayes_binary_nll(test: &Dataset) -> f64 {
    let gt = test.ground_truth().expect("synthetic data");
    mean(
        &gt.true_mean
            .iter()
            .map(|&p| {
                let p = p.clamp(1e-9, 1.0 - 1e-9);
                -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
            })
            .collect::<Vec<f64>>(),
    )
}

#[test]
fn criterion_05_binary_nll_ordering_and_bayes_gap() {
    let _gate = serial();
    let started = Instant::now();
    let mut nll_binomial = Vec::new();
    let mut nll_ensemble = Vec::new();
    let mut nll_selective = Vec::new();
    let mut nll_inconsistency = Vec::new();
    let mut bayes = Vec::new();

    for seed in 0..10u64 {
        let ds = synth_binary(25_000, seed, "default").unwrap();
        let (train, test) = split(&ds, &SplitSpec { test_fraction: 0.2, seed }).unwrap();
        assert_eq!(test.n_rows(), 5000);
        let config = PipelineConfig { seed, ..PipelineConfig::default() };

        let run_nll = |est: Estimator| -> f64 {
            let preds = est.run(&train, &test, &config).unwrap();
            nll_binary(&preds, test.outcome(), est.prob_source())
                .unwrap()
                .mean_nll
        };
        nll_binomial.push(run_nll(Estimator::BinomialNll));
        nll_ensemble.push(run_nll(Estimator::Ensemble { k: 10 }));
        nll_selective.push(run_nll(Estimator::SelectiveEnsemble { k: 10 }));
        nll_inconsistency.push(run_nll(Estimator::SelfInconsistency { k: 10 }));
        bayes.push(bayes_binary_nll(&test));
    }

    let (b, e, s, i, bay) = (
        mean(&nll_binomial),
        mean(&nll_ensemble),
        mean(&nll_selective),
        mean(&nll_inconsistency),
        mean(&bayes),
    );
    assert!(b < e, "FAIL criterion 5: binomial {b} !< ensemble {e}");
    assert!(b < s, "FAIL criterion 5: binomial {b} !< selective {s}");
    assert!(b < i, "FAIL criterion 5: binomial {b} !< self-inconsistency {i}");
    assert!(
        (b - bay).abs() <= 0.05,
        "FAIL criterion 5: binomial NLL {b} vs Bayes {bay}"
    );
    println!(
        "PASS criterion 5: NLL binomial={b:.4} < ensemble={e:.4}, selective={s:.4}, \
         inconsistency={i:.4}; Bayes={bay:.4} gap={:.4} ({:.2?})",
        (b - bay).abs(),
        started.elapsed()
    );
}

// ---------------------------------------------------------------------
// Criterion 6: consistency ordering across max_depth in {1..8}.
// ---------------------------------------------------------------------

#[test]
fn criterion_06_consistency_ordering_across_depths() {
    let _gate = serial();
    let started = Instant::now();
    let grid: Vec<f64> = (1..=8).map(|d| d as f64).collect();
    let mut max_std_binomial = Vec::new();
    let mut max_std_ensemble = Vec::new();
    let mut max_std_selective = Vec::new();

    for seed in 0..10u64 {
        let ds = synth_binary(25_000, seed, "default").unwrap();
        let (train, test) = split(&ds, &SplitSpec { test_fraction: 0.2, seed }).unwrap();
        let base = PipelineConfig {
            n_trees: 80,
            seed,
            ..PipelineConfig::default()
        };
        let run = |est: Estimator| -> f64 {
            consistency(&train, &test, &est, &base, SweepParam::MaxDepth, &grid)
                .unwrap()
                .max_std
        };
        max_std_binomial.push(run(Estimator::BinomialNll));
        max_std_ensemble.push(run(Estimator::Ensemble { k: 10 }));
        max_std_selective.push(run(Estimator::SelectiveEnsemble { k: 10 }));
    }

    let b = median(&mut max_std_binomial);
    let e = median(&mut max_std_ensemble);
    let s = median(&mut max_std_selective);
    assert!(b < s, "FAIL criterion 6: binomial median {b} !< selective {s}");
    assert!(e < s, "FAIL criterion 6: ensemble median {e} !< selective {s}");
    println!(
        "PASS criterion 6: median max-std binomial={b:.3}, ensemble={e:.3} < selective={s:.3} ({:.2?})",
        started.elapsed()
    );
}

// ---------------------------------------------------------------------
// Criterion 7: regression calibration identity and NLL ordering.
// ---------------------------------------------------------------------

#[test]
fn criterion_07_regression_calibration_identity() {
    let _gate = serial();
    let started = Instant::now();
    let ds = synth_regression(50_000, 0, "default").unwrap();
    let (train, test) = split(&ds, &SplitSpec { test_fraction: 0.3, seed: 0 }).unwrap();
    let config = PipelineConfig::default();

    let normal = Estimator::NormalNll.run(&train, &test, &config).unwrap();
    let bins = calibration_bins(&normal, test.outcome(), 10).unwrap();
    let xs: Vec<f64> = bins.bins.iter().map(|b| b.mean_sigma).collect();
    let ys: Vec<f64> = bins.bins.iter().map(|b| b.empirical_std).collect();
    let (xm, ym) = (mean(&xs), mean(&ys));
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - xm) * (y - ym))
        .sum::<f64>()
        / xs.iter().map(|x| (x - xm).powi(2)).sum::<f64>();
    assert!(
        (0.8..=1.2).contains(&slope),
        "FAIL criterion 7: calibration slope {slope} outside [0.8, 1.2]"
    );

    let normal_nll = nll_normal(&normal, test.outcome(), false).unwrap();
    let ensemble = Estimator::Ensemble { k: 10 }.run(&train, &test, &config).unwrap();
    let ensemble_nll = nll_normal(&ensemble, test.outcome(), false).unwrap();
    assert!(
        ensemble_nll > normal_nll,
        "FAIL criterion 7: ensemble NLL {ensemble_nll} !> normal NLL {normal_nll}"
    );
    println!(
        "PASS criterion 7: slope={slope:.3}; NLL normal={normal_nll:.3} < ensemble={ensemble_nll:.3} ({:.2?})",
        started.elapsed()
    );
}

// ---------------------------------------------------------------------
// Criterion 8: abstention lowers error for informative uncertainty, does
// nothing systematic for random uncertainty or statistical parity.
// ---------------------------------------------------------------------

/// (error, statistical parity) at 100% and 75% inclusion for one estimator
/// and seed. The balanced scenario keeps uncertainty group-neutral, which
/// is the premise behind the "no reliable parity effect" claim.
fn abstention_endpoints(est: &Estimator, seed: u64) -> ((f64, f64), (f64, f64)) {
    let ds = synth_binary(6000, seed, "balanced").unwrap();
    let (train, test) = split(&ds, &SplitSpec { test_fraction: 0.25, seed }).unwrap();
    let config = PipelineConfig { seed, ..PipelineConfig::default() };
    let preds = est.run(&train, &test, &config).unwrap();
    let gp = GroupedPredictions::from_test_set(preds, &test).unwrap();
    let curve = abstention_curve(&gp, &[0.0, 0.25]).unwrap();
    let get = |idx: usize| {
        let m = curve.points[idx].metrics.as_ref().expect("nonempty groups");
        (m.error_rate, m.statistical_parity)
    };
    (get(0), get(1))
}

#[test]
fn criterion_08_abstention_error_and_parity_behavior() {
    let _gate = serial();
    let started = Instant::now();

    // informative uncertainty: error at 75% inclusion <= error at 100%
    // in at least 9 of 10 seeds
    let mut improved = 0;
    for seed in 0..10u64 {
        let ((err_full, _), (err_75, _)) = abstention_endpoints(&Estimator::BinomialNll, seed);
        if err_75 <= err_full {
            improved += 1;
        }
    }
    assert!(
        improved >= 9,
        "FAIL criterion 8: binomial abstention improved error in only {improved}/10 seeds"
    );

    // random uncertainty: no systematic error change over 20 seeds
    let mut err_delta = Vec::new();
    let mut sp_delta_random = Vec::new();
    let mut sp_delta_binomial = Vec::new();
    for seed in 0..20u64 {
        let ((err_full, sp_full), (err_75, sp_75)) =
            abstention_endpoints(&Estimator::Random, seed);
        err_delta.push(err_75 - err_full);
        sp_delta_random.push(sp_75 - sp_full);
        let ((_, sp_full_b), (_, sp_75_b)) = abstention_endpoints(&Estimator::BinomialNll, seed);
        sp_delta_binomial.push(sp_75_b - sp_full_b);
    }
    let (m_err, s_err) = (mean(&err_delta), sample_std(&err_delta));
    assert!(
        m_err.abs() <= 2.0 * s_err,
        "FAIL criterion 8: random-uncertainty error shifted systematically ({m_err} vs std {s_err})"
    );

    // statistical parity: no systematic improvement for either estimator
    for (name, deltas) in [("random", &sp_delta_random), ("binomial_nll", &sp_delta_binomial)] {
        let (m, s) = (mean(deltas), sample_std(deltas));
        assert!(
            m.abs() <= 2.0 * s,
            "FAIL criterion 8: {name} SP changed systematically (mean {m} vs std {s})"
        );
    }
    println!(
        "PASS criterion 8: binomial improved {improved}/10; random error delta {m_err:+.4} \
         within noise; SP deltas within noise ({:.2?})",
        started.elapsed()
    );
}

// ---------------------------------------------------------------------
// Criterion 9: KS-based UA-SP against Monte-Carlo and the classical
// statistic; direction on group-dependent noise.
// ---------------------------------------------------------------------

/// Classical two-sample KS statistic over empirical CDFs.
fn classical_ks(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let mut best = 0.0f64;
    let (mut ia, mut ib) = (0usize, 0usize);
    while ia < sa.len() || ib < sb.len() {
        let x = match (sa.get(ia), sb.get(ib)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        while ia < sa.len() && sa[ia] <= x {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] <= x {
            ib += 1;
        }
        best = best.max((ia as f64 / na - ib as f64 / nb).abs());
    }
    best
}

fn sample_mixture(m: &MixtureCdf, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let comps = m.components();
    (0..n)
        .map(|_| {
            let (mu, sigma) = comps[rng.gen_range(0..comps.len())];
            let eps: f64 = rng.sample(StandardNormal);
            mu + sigma * eps
        })
        .collect()
}

#[test]
fn criterion_09_uasp_ks_correctness_and_direction() {
    let _gate = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(909);

    // (a) 20 random mixture pairs against 10^6-sample Monte-Carlo
    let mut worst_mc = 0.0f64;
    for _ in 0..20 {
        let make = |rng: &mut ChaCha8Rng| {
            let comps: Vec<(f64, f64)> = (0..rng.gen_range(1..=8))
                .map(|_| {
                    let sigma = if rng.gen_bool(0.25) { 0.0 } else { rng.gen_range(0.05..2.0) };
                    (rng.gen_range(-3.0..3.0), sigma)
                })
                .collect();
            MixtureCdf::new(comps).unwrap()
        };
        let a = make(&mut rng);
        let b = make(&mut rng);
        let analytic = ks_uasp(&a, &b);
        let sa = sample_mixture(&a, 1_000_000, &mut rng);
        let sb = sample_mixture(&b, 1_000_000, &mut rng);
        let mc = classical_ks(&sa, &sb);
        worst_mc = worst_mc.max((analytic - mc).abs());
        assert!(
            (analytic - mc).abs() <= 0.01,
            "FAIL criterion 9: analytic {analytic} vs Monte-Carlo {mc}"
        );
    }

    // (b) all-zero sigma reduces exactly to the classical statistic
    for _ in 0..30 {
        let xa: Vec<f64> = (0..rng.gen_range(2..50)).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let xb: Vec<f64> = (0..rng.gen_range(2..50)).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let got = ks_uasp(
            &MixtureCdf::point_masses(&xa).unwrap(),
            &MixtureCdf::point_masses(&xb).unwrap(),
        );
        assert_eq!(got, classical_ks(&xa, &xb), "FAIL criterion 9: zero-sigma KS mismatch");
    }

    // (c) with group-dependent noise, the smoothed UA-SP of the normal NLL
    // model sits strictly below the baseline's point-mass SP
    let mut below = 0;
    for seed in 0..10u64 {
        let ds = synth_regression(4000, seed, "group-noise").unwrap();
        let (train, test) = split(&ds, &SplitSpec { test_fraction: 0.3, seed }).unwrap();
        let config = PipelineConfig { seed, ..PipelineConfig::default() };
        let mask = test.privileged_mask();
        let split_mix = |preds: &[Prediction], zero_sigma: bool| {
            let pick = |want: bool| {
                preds
                    .iter()
                    .zip(&mask)
                    .filter(|(_, &m)| m == want)
                    .map(|(p, _)| (p.mu, if zero_sigma { 0.0 } else { p.sigma }))
                    .collect::<Vec<_>>()
            };
            (
                MixtureCdf::new(pick(false)).unwrap(),
                MixtureCdf::new(pick(true)).unwrap(),
            )
        };

        let model = gbt::fit(&train.model_columns(), train.outcome(), &SquaredError, &config).unwrap();
        let baseline: Vec<Prediction> = model
            .predict_linked(&test.model_columns(), &SquaredError)
            .unwrap()
            .into_iter()
            .map(|(mu, _)| Prediction { mu, sigma: 0.0, label: None })
            .collect();
        let (u, p) = split_mix(&baseline, true);
        let sp_baseline = ks_uasp(&u, &p);

        let normal = Estimator::NormalNll.run(&train, &test, &config).unwrap();
        let (u, p) = split_mix(&normal, false);
        let uasp_normal = ks_uasp(&u, &p);
        if uasp_normal < sp_baseline {
            below += 1;
        }
    }
    assert!(
        below >= 9,
        "FAIL criterion 9: UA-SP below baseline SP in only {below}/10 seeds"
    );
    println!(
        "PASS criterion 9: MC agreement (worst {worst_mc:.4}), exact classical reduction, \
         direction {below}/10 ({:.2?})",
        started.elapsed()
    );
}

// ---------------------------------------------------------------------
// Criterion 10: fairness metrics against a brute-force counting oracle;
// Wasserstein against the sorted-sample / quantile oracle.
// ---------------------------------------------------------------------

#[test]
fn criterion_10_fairness_metrics_and_wasserstein_oracles() {
    let _gate = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);

    for case in 0..200 {
        let n = rng.gen_range(4..=50);
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        let outcomes: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..=1u8))).collect();
        let mut privileged: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        privileged[0] = true;
        privileged[1] = false;

        let gp = GroupedPredictions::new(
            labels
                .iter()
                .map(|&l| Prediction { mu: l as f64, sigma: 0.0, label: Some(l) })
                .collect(),
            outcomes.clone(),
            privileged.clone(),
        )
        .unwrap();
        let m = binary_metrics(&gp).unwrap();

        // counting oracle, one filter chain per quantity
        let idx = |want: bool| (0..n).filter(|&i| privileged[i] == want).collect::<Vec<_>>();
        let (unpriv, priv_) = (idx(false), idx(true));
        let rate = |rows: &[usize]| {
            rows.iter().filter(|&&i| labels[i] == 1).count() as f64 / rows.len() as f64
        };
        let cond_rate = |rows: &[usize], y: f64| {
            let cell: Vec<usize> = rows.iter().copied().filter(|&i| outcomes[i] == y).collect();
            (!cell.is_empty())
                .then(|| cell.iter().filter(|&&i| labels[i] == 1).count() as f64 / cell.len() as f64)
        };
        let precision = |rows: &[usize]| {
            let pos: Vec<usize> = rows.iter().copied().filter(|&i| labels[i] == 1).collect();
            (!pos.is_empty())
                .then(|| pos.iter().filter(|&&i| outcomes[i] == 1.0).count() as f64 / pos.len() as f64)
        };
        let gap = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => Some((a - b).abs()),
            _ => None,
        };

        let err_oracle = (0..n)
            .filter(|&i| (labels[i] == 1) != (outcomes[i] == 1.0))
            .count() as f64
            / n as f64;
        assert_eq!(m.error_rate, err_oracle, "case {case}");
        assert_eq!(m.statistical_parity, (rate(&unpriv) - rate(&priv_)).abs(), "case {case}");

        let eopp = gap(cond_rate(&unpriv, 1.0), cond_rate(&priv_, 1.0));
        let fpr = gap(cond_rate(&unpriv, 0.0), cond_rate(&priv_, 0.0));
        let eodds = match (eopp, fpr) {
            (Some(a), Some(b)) => Some(a.max(b)),
            _ => None,
        };
        let di = (rate(&priv_) > 0.0).then(|| rate(&unpriv) / rate(&priv_));
        let pp = gap(precision(&unpriv), precision(&priv_));

        assert_eq!(m.equal_opportunity.get(), eopp, "case {case}");
        assert_eq!(m.fpr_gap.get(), fpr, "case {case}");
        assert_eq!(m.equalized_odds.get(), eodds, "case {case}");
        assert_eq!(m.disparate_impact.get(), di, "case {case}");
        assert_eq!(m.predictive_parity.get(), pp, "case {case}");
    }

    // Wasserstein: equal sizes against the sorted-sample mean, unequal
    // sizes against the quantile-grid integral
    for _ in 0..100 {
        let n = rng.gen_range(2..80);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut sa = a.clone();
        let mut sb = b.clone();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        let oracle: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
        let got = wasserstein_1d(&a, &b).unwrap();
        assert!((got - oracle).abs() <= 1e-12, "equal-size: {got} vs {oracle}");
    }
    for _ in 0..100 {
        let na = rng.gen_range(2..60);
        let nb = rng.gen_range(2..60);
        let a: Vec<f64> = (0..na).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..nb).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut sa = a.clone();
        let mut sb = b.clone();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        // quantile-grid oracle: integrate |A^{-1}(q) - B^{-1}(q)| over the
        // merged quantile breakpoints
        let mut qs: Vec<f64> = (0..=na)
            .map(|i| i as f64 / na as f64)
            .chain((0..=nb).map(|j| j as f64 / nb as f64))
            .collect();
        qs.sort_by(f64::total_cmp);
        qs.dedup();
        let mut oracle = 0.0;
        for w in qs.windows(2) {
            let q = 0.5 * (w[0] + w[1]);
            let x = sa[((q * na as f64).floor() as usize).min(na - 1)];
            let y = sb[((q * nb as f64).floor() as usize).min(nb - 1)];
            oracle += (x - y).abs() * (w[1] - w[0]);
        }
        let got = wasserstein_1d(&a, &b).unwrap();
        assert!(
            (got - oracle).abs() <= 1e-12,
            "unequal-size: {got} vs {oracle} (na={na} nb={nb})"
        );
    }
    println!(
        "PASS criterion 10: 200 metric datasets and 200 Wasserstein cases match oracles ({:.2?})",
        started.elapsed()
    );
}

// ---------------------------------------------------------------------
// Criterion 11: end-to-end determinism of experiment reports.
// ---------------------------------------------------------------------

#[test]
fn criterion_11_end_to_end_determinism() {
    use sigmafair::experiment::{
        run_experiment, DatasetSource, ExperimentConfig, ExperimentKind, PipelineOverrides,
    };
    let _gate = serial();
    let started = Instant::now();

    let configs = [
        ExperimentConfig {
            experiment: ExperimentKind::Calibration,
            dataset: DatasetSource::Synthetic {
                task: sigmafair::data::Task::Binary,
                scenario: "default".to_string(),
                n: 800,
            },
            estimators: vec!["binomial_nll".to_string(), "ensemble".to_string()],
            output_dir: "unused".to_string(),
            pipeline: PipelineOverrides {
                n_trees: Some(10),
                ..PipelineOverrides::default()
            },
            sweep: None,
            seeds: vec![0, 1, 2],
            test_fraction: 0.3,
            ensemble_size: 4,
            beta: 0.5,
            calibration_groups: 5,
            workers: None,
        },
        ExperimentConfig {
            experiment: ExperimentKind::UaspRegression,
            dataset: DatasetSource::Synthetic {
                task: sigmafair::data::Task::Regression,
                scenario: "group-noise".to_string(),
                n: 600,
            },
            estimators: vec!["normal_nll".to_string()],
            output_dir: "unused".to_string(),
            pipeline: PipelineOverrides {
                n_trees: Some(10),
                ..PipelineOverrides::default()
            },
            sweep: None,
            seeds: vec![0, 1],
            test_fraction: 0.3,
            ensemble_size: 4,
            beta: 0.5,
            calibration_groups: 5,
            workers: None,
        },
    ];

    for config in &configs {
        let a = run_experiment(config).unwrap();
        let b = run_experiment(config).unwrap();
        let strip = |r: &sigmafair::experiment::ExperimentReport| {
            let mut v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
            v.as_object_mut().unwrap().remove("wall_clock_seconds");
            v
        };
        assert_eq!(
            strip(&a),
            strip(&b),
            "FAIL criterion 11: {:?} report differs across reruns",
            config.experiment
        );
    }
    println!(
        "PASS criterion 11: reports identical across reruns (wall clock aside) ({:.2?})",
        started.elapsed()
    );
}
