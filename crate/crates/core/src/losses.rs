//! Concrete losses for the boosting engine.
//!
//! Single-output: squared error and logistic (binomial NLL). Two-output
//! (mean score `m` first, log-scale score `t` second, `sigma = exp(t)`):
//! the normal NLL, its beta-weighted variant, and the faithful variant that
//! fits the mean by squared error while the scale follows the NLL.
//!
//! Training values omit distribution constants; they do not affect
//! gradients. The evaluation-side NLL can add them back (see `eval`).

use crate::error::{Error, Result};
use crate::gbt::Loss;

fn sigmoid(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

// Base scores are accumulated in sorted-value order so that fitting is
// invariant to training-row permutation bit for bit.
fn mean(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum::<f64>() / sorted.len() as f64
}

fn population_std(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.iter().sum::<f64>() / sorted.len() as f64;
    (sorted.iter().map(|v| (v - m).powi(2)).sum::<f64>() / sorted.len() as f64).sqrt()
}

/// Base scores for the two-output NLL family: target mean and log of the
/// target's population standard deviation (floored to stay finite).
fn normal_base(targets: &[f64]) -> Vec<f64> {
    vec![mean(targets), population_std(targets).max(1e-8).ln()]
}

fn assert_binary(y: f64) {
    assert!(y == 0.0 || y == 1.0, "logistic loss requires y in {{0,1}}, got {y}");
}

/// `1/2 (y - m)^2`. Link maps the score to `(m, 0)`.
pub struct SquaredError;

impl Loss for SquaredError {
    fn name(&self) -> &'static str {
        "squared_error"
    }
    fn n_outputs(&self) -> usize {
        1
    }
    fn value(&self, y: f64, scores: &[f64]) -> f64 {
        0.5 * (y - scores[0]).powi(2)
    }
    fn gradient(&self, y: f64, scores: &[f64], out: &mut [f64]) {
        out[0] = scores[0] - y;
    }
    fn hessian(&self, _y: f64, _scores: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }
    fn link(&self, scores: &[f64]) -> (f64, f64) {
        (scores[0], 0.0)
    }
    fn base_score(&self, targets: &[f64]) -> Vec<f64> {
        vec![mean(targets)]
    }
}

/// Binary cross-entropy on a raw score; `p = sigmoid(s)`. Link maps the
/// score to `(p, sqrt(p (1-p)))`, the binomial standard deviation.
pub struct Logistic;

impl Loss for Logistic {
    fn name(&self) -> &'static str {
        "logistic"
    }
    fn n_outputs(&self) -> usize {
        1
    }
    fn value(&self, y: f64, scores: &[f64]) -> f64 {
        assert_binary(y);
        softplus(scores[0]) - y * scores[0]
    }
    fn gradient(&self, y: f64, scores: &[f64], out: &mut [f64]) {
        assert_binary(y);
        out[0] = sigmoid(scores[0]) - y;
    }
    fn hessian(&self, _y: f64, scores: &[f64], out: &mut [f64]) {
        let p = sigmoid(scores[0]);
        out[0] = p * (1.0 - p);
    }
    fn link(&self, scores: &[f64]) -> (f64, f64) {
        let p = sigmoid(scores[0]);
        (p, (p * (1.0 - p)).max(0.0).sqrt())
    }
    fn base_score(&self, targets: &[f64]) -> Vec<f64> {
        let p = mean(targets).clamp(1e-9, 1.0 - 1e-9);
        vec![(p / (1.0 - p)).ln()]
    }
}

/// Normal negative log-likelihood over `(m, t)` with `sigma = exp(t)`:
/// `t + 1/2 (y - m)^2 exp(-2t)`.
pub struct NormalNll;

impl NormalNll {
    fn grads(y: f64, m: f64, t: f64) -> (f64, f64) {
        let e = (-2.0 * t).exp();
        ((m - y) * e, 1.0 - (y - m).powi(2) * e)
    }

    fn hessians(y: f64, m: f64, t: f64) -> (f64, f64) {
        let e = (-2.0 * t).exp();
        (e, 2.0 * (y - m).powi(2) * e)
    }
}

impl Loss for NormalNll {
    fn name(&self) -> &'static str {
        "normal_nll"
    }
    fn n_outputs(&self) -> usize {
        2
    }
    fn value(&self, y: f64, scores: &[f64]) -> f64 {
        let (m, t) = (scores[0], scores[1]);
        t + 0.5 * (y - m).powi(2) * (-2.0 * t).exp()
    }
    fn gradient(&self, y: f64, scores: &[f64], out: &mut [f64]) {
        let (gm, gt) = NormalNll::grads(y, scores[0], scores[1]);
        out[0] = gm;
        out[1] = gt;
    }
    fn hessian(&self, y: f64, scores: &[f64], out: &mut [f64]) {
        let (hm, ht) = NormalNll::hessians(y, scores[0], scores[1]);
        out[0] = hm;
        out[1] = ht;
    }
    fn link(&self, scores: &[f64]) -> (f64, f64) {
        (scores[0], scores[1].exp())
    }
    fn base_score(&self, targets: &[f64]) -> Vec<f64> {
        normal_base(targets)
    }
}

/// Normal NLL scaled by `sigma^(2 beta)`, with the multiplier treated as a
/// per-observation constant: no derivative flows through it.
pub struct BetaNll {
    beta: f64,
}

impl BetaNll {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config("beta", format!("must lie in [0,1], got {beta}")));
        }
        Ok(BetaNll { beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    fn multiplier(&self, t: f64) -> f64 {
        (2.0 * self.beta * t).exp()
    }
}

impl Loss for BetaNll {
    fn name(&self) -> &'static str {
        "beta_nll"
    }
    fn n_outputs(&self) -> usize {
        2
    }
    fn value(&self, y: f64, scores: &[f64]) -> f64 {
        self.multiplier(scores[1]) * NormalNll.value(y, scores)
    }
    fn gradient(&self, y: f64, scores: &[f64], out: &mut [f64]) {
        let w = self.multiplier(scores[1]);
        let (gm, gt) = NormalNll::grads(y, scores[0], scores[1]);
        out[0] = w * gm;
        out[1] = w * gt;
    }
    fn hessian(&self, y: f64, scores: &[f64], out: &mut [f64]) {
        let w = self.multiplier(scores[1]);
        let (hm, ht) = NormalNll::hessians(y, scores[0], scores[1]);
        out[0] = w * hm;
        out[1] = w * ht;
    }
    fn link(&self, scores: &[f64]) -> (f64, f64) {
        (scores[0], scores[1].exp())
    }
    fn base_score(&self, targets: &[f64]) -> Vec<f64> {
        normal_base(targets)
    }
}

/// Mean score fitted by squared error, scale score by the normal NLL with
/// the mean held fixed. The reported value is the plain NLL.
pub struct FaithfulNll;

impl Loss for FaithfulNll {
    fn name(&self) -> &'static str {
        "faithful_nll"
    }
    fn n_outputs(&self) -> usize {
        2
    }
    fn value(&self, y: f64, scores: &[f64]) -> f64 {
        NormalNll.value(y, scores)
    }
    fn gradient(&self, y: f64, scores: &[f64], out: &mut [f64]) {
        let (_, gt) = NormalNll::grads(y, scores[0], scores[1]);
        out[0] = scores[0] - y;
        out[1] = gt;
    }
    fn hessian(&self, y: f64, scores: &[f64], out: &mut [f64]) {
        let (_, ht) = NormalNll::hessians(y, scores[0], scores[1]);
        out[0] = 1.0;
        out[1] = ht;
    }
    fn link(&self, scores: &[f64]) -> (f64, f64) {
        (scores[0], scores[1].exp())
    }
    fn base_score(&self, targets: &[f64]) -> Vec<f64> {
        normal_base(targets)
    }
}

/// Resolves a loss by its canonical CLI name. `beta` only applies to
/// `beta_nll`.
pub fn by_name(name: &str, beta: f64) -> Result<Box<dyn Loss>> {
    match name {
        "squared_error" => Ok(Box::new(SquaredError)),
        "logistic" => Ok(Box::new(Logistic)),
        "normal_nll" => Ok(Box::new(NormalNll)),
        "beta_nll" => Ok(Box::new(BetaNll::new(beta)?)),
        "faithful_nll" => Ok(Box::new(FaithfulNll)),
        other => Err(Error::config("loss", format!("unknown loss `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn second_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
    }

    /// Relative agreement with a guard for near-zero derivatives.
    fn check_close(analytic: f64, numeric: f64, rel_tol: f64, label: &str) {
        if numeric.abs() >= 1e-3 {
            let rel = (analytic - numeric).abs() / numeric.abs();
            assert!(rel <= rel_tol, "{label}: analytic={analytic} numeric={numeric} rel={rel}");
        } else {
            assert!(
                (analytic - numeric).abs() <= 1e-6,
                "{label}: analytic={analytic} numeric={numeric}"
            );
        }
    }

    #[test]
    fn squared_error_examples() {
        let mut g = [0.0];
        let mut h = [0.0];
        assert_eq!(SquaredError.value(3.0, &[3.0]), 0.0);
        SquaredError.gradient(3.0, &[3.0], &mut g);
        assert_eq!(g[0], 0.0);
        assert_eq!(SquaredError.value(0.0, &[2.0]), 2.0);
        SquaredError.gradient(0.0, &[2.0], &mut g);
        assert_eq!(g[0], 2.0);
        SquaredError.hessian(0.0, &[2.0], &mut h);
        assert_eq!(h[0], 1.0);
        assert_eq!(SquaredError.link(&[1.5]), (1.5, 0.0));
    }

    #[test]
    fn logistic_examples() {
        let mut g = [0.0];
        let mut h = [0.0];
        let v = Logistic.value(1.0, &[0.0]);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        Logistic.gradient(1.0, &[0.0], &mut g);
        assert_eq!(g[0], -0.5);
        Logistic.hessian(1.0, &[0.0], &mut h);
        assert_eq!(h[0], 0.25);
        Logistic.gradient(0.0, &[0.0], &mut g);
        assert_eq!(g[0], 0.5);

        let (p, sigma) = Logistic.link(&[0.0]);
        assert_eq!((p, sigma), (0.5, 0.5));
        let (p, sigma) = Logistic.link(&[60.0]);
        assert!((p - 1.0).abs() < 1e-12 && sigma < 1e-6);
    }

    #[test]
    #[should_panic(expected = "requires y in")]
    fn logistic_rejects_non_binary_targets() {
        Logistic.value(0.5, &[0.0]);
    }

    #[test]
    fn logistic_value_matches_clipped_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let s = rng.gen_range(-6.0..6.0);
            let y = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            let p = sigmoid(s).clamp(1e-9, 1.0 - 1e-9);
            let ce = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            assert!((Logistic.value(y, &[s]) - ce).abs() < 1e-12);
        }
    }

    #[test]
    fn normal_nll_examples() {
        let mut g = [0.0, 0.0];
        assert_eq!(NormalNll.value(2.0, &[2.0, 0.0]), 0.0);
        NormalNll.gradient(2.0, &[2.0, 0.0], &mut g);
        assert_eq!(g, [0.0, 1.0]);
        // scale stationarity: (y-m)^2 = sigma^2 makes the t-gradient vanish
        let t: f64 = 0.7;
        let y = 1.0 + t.exp();
        NormalNll.gradient(y, &[1.0, t], &mut g);
        assert!(g[1].abs() < 1e-12);
        assert_eq!(NormalNll.link(&[1.0, t]), (1.0, t.exp()));
    }

    #[test]
    fn normal_nll_t_gradient_changes_sign_at_stationary_scale() {
        let (y, m) = (3.0f64, 1.2f64);
        let t_star = 0.5 * ((y - m) * (y - m)).ln();
        let mut g = [0.0, 0.0];
        NormalNll.gradient(y, &[m, t_star - 0.1], &mut g);
        assert!(g[1] < 0.0);
        NormalNll.gradient(y, &[m, t_star + 0.1], &mut g);
        assert!(g[1] > 0.0);
    }

    #[test]
    fn beta_nll_limits() {
        let mut g0 = [0.0, 0.0];
        let mut g1 = [0.0, 0.0];
        let beta0 = BetaNll::new(0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let y = rng.gen_range(-3.0..3.0);
            let s = [rng.gen_range(-3.0..3.0), rng.gen_range(-1.5..1.5)];
            beta0.gradient(y, &s, &mut g0);
            NormalNll.gradient(y, &s, &mut g1);
            assert_eq!(g0, g1);
        }
        let beta1 = BetaNll::new(1.0).unwrap();
        for _ in 0..100 {
            let y = rng.gen_range(-3.0..3.0);
            let s = [rng.gen_range(-3.0..3.0), rng.gen_range(-1.5..1.5)];
            beta1.gradient(y, &s, &mut g0);
            assert!((g0[0] - (s[0] - y)).abs() < 1e-12);
        }
    }

    #[test]
    fn beta_nll_half_example() {
        // sigma = 4, y - m = 1: m-gradient is sigma * (-(y-m)/sigma^2) = -0.25
        let beta = BetaNll::new(0.5).unwrap();
        let t = 4.0f64.ln();
        let mut g = [0.0, 0.0];
        beta.gradient(1.0, &[0.0, t], &mut g);
        assert!((g[0] - (-0.25)).abs() < 1e-12);
    }

    #[test]
    fn beta_out_of_range_is_rejected() {
        assert!(BetaNll::new(-0.1).is_err());
        assert!(BetaNll::new(1.5).is_err());
    }

    #[test]
    fn faithful_examples() {
        let mut g = [0.0, 0.0];
        FaithfulNll.gradient(2.0, &[2.0, 0.3], &mut g);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 1.0);
        // m-gradient does not depend on t
        FaithfulNll.gradient(1.0, &[0.25, 0.0], &mut g);
        let gm0 = g[0];
        FaithfulNll.gradient(1.0, &[0.25, 5.0], &mut g);
        assert_eq!(g[0], gm0);
    }

    #[test]
    fn single_output_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = [0.0];
        let mut h = [0.0];
        for _ in 0..100 {
            let s = rng.gen_range(-4.0..4.0);
            let y = rng.gen_range(-4.0..4.0);
            SquaredError.gradient(y, &[s], &mut g);
            check_close(g[0], central_diff(|x| SquaredError.value(y, &[x]), s, 1e-5), 1e-5, "sq g");
            SquaredError.hessian(y, &[s], &mut h);
            check_close(h[0], second_diff(|x| SquaredError.value(y, &[x]), s, 2e-4), 1e-4, "sq h");

            let yb = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            Logistic.gradient(yb, &[s], &mut g);
            check_close(g[0], central_diff(|x| Logistic.value(yb, &[x]), s, 1e-5), 1e-5, "log g");
            Logistic.hessian(yb, &[s], &mut h);
            check_close(h[0], second_diff(|x| Logistic.value(yb, &[x]), s, 2e-4), 1e-4, "log h");
        }
    }

    #[test]
    fn two_output_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut g = [0.0, 0.0];
        let mut h = [0.0, 0.0];
        let beta = BetaNll::new(0.5).unwrap();
        for _ in 0..100 {
            let y = rng.gen_range(-3.0..3.0);
            let m = rng.gen_range(-3.0..3.0);
            let t = rng.gen_range(-1.5..1.5);

            NormalNll.gradient(y, &[m, t], &mut g);
            check_close(g[0], central_diff(|x| NormalNll.value(y, &[x, t]), m, 1e-5), 1e-5, "nll gm");
            check_close(g[1], central_diff(|x| NormalNll.value(y, &[m, x]), t, 1e-5), 1e-5, "nll gt");
            NormalNll.hessian(y, &[m, t], &mut h);
            check_close(h[0], second_diff(|x| NormalNll.value(y, &[x, t]), m, 2e-4), 1e-4, "nll hm");
            check_close(h[1], second_diff(|x| NormalNll.value(y, &[m, x]), t, 2e-4), 1e-4, "nll ht");

            // beta-NLL differentiates the NLL with the multiplier frozen at t
            let w = (2.0 * 0.5 * t).exp();
            beta.gradient(y, &[m, t], &mut g);
            check_close(
                g[1],
                central_diff(|x| w * NormalNll.value(y, &[m, x]), t, 1e-5),
                1e-5,
                "beta gt",
            );

            // faithful differentiates the per-coordinate partial objectives
            FaithfulNll.gradient(y, &[m, t], &mut g);
            check_close(
                g[0],
                central_diff(|x| SquaredError.value(y, &[x]), m, 1e-5),
                1e-5,
                "faithful gm",
            );
            check_close(
                g[1],
                central_diff(|x| NormalNll.value(y, &[m, x]), t, 1e-5),
                1e-5,
                "faithful gt",
            );
        }
    }

    #[test]
    fn by_name_resolves_all_losses() {
        for name in ["squared_error", "logistic", "normal_nll", "beta_nll", "faithful_nll"] {
            assert_eq!(by_name(name, 0.5).unwrap().name(), name);
        }
        assert!(by_name("hinge", 0.5).is_err());
    }
}
