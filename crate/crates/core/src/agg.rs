//! Dynamic gradient aggregation for the outer fusion update.
//!
//! Per iteration the two task hypergradients are combined as
//! `omega <- omega - lr * (lambda_V * G_V + lambda_P * G_P)`. The headline
//! scheme draws the weights at random (RLW: softmax of two standard-normal
//! draws); the classical baselines — equal, manual, GradNorm, DWA — are kept
//! for budget-matched comparisons.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::bilevel::HyperGradient;
use crate::error::{Error, Result};
use crate::math;
use crate::net::ParamSet;
use crate::rng::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Rlw,
    Equal,
    Manual,
    GradNorm,
    Dwa,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Rlw => "rlw",
            Strategy::Equal => "equal",
            Strategy::Manual => "manual",
            Strategy::GradNorm => "gradnorm",
            Strategy::Dwa => "dwa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rlw" => Some(Strategy::Rlw),
            "equal" => Some(Strategy::Equal),
            "manual" => Some(Strategy::Manual),
            "gradnorm" => Some(Strategy::GradNorm),
            "dwa" => Some(Strategy::Dwa),
            _ => None,
        }
    }

    pub const ALL: [Strategy; 5] = [
        Strategy::Rlw,
        Strategy::Equal,
        Strategy::Manual,
        Strategy::GradNorm,
        Strategy::Dwa,
    ];
}

/// Task trade-off weights for one outer step. Normalized strategies sum the
/// pair to 1; GradNorm keeps its own sum-2 convention; manual is verbatim.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggWeights {
    pub lambda_v: f64,
    pub lambda_p: f64,
    pub strategy: Strategy,
}

/// Numerically stable two-way softmax.
pub fn softmax2(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let ea = math::exp(a - m);
    let eb = math::exp(b - m);
    let z = ea + eb;
    (ea / z, eb / z)
}

/// Random loss weighting: independent standard-normal draws per task,
/// softmax-normalized. The visual task draws first.
pub fn rlw_sample(rng: &mut SeedStream) -> AggWeights {
    let z_v = rng.normal();
    let z_p = rng.normal();
    let (lambda_v, lambda_p) = softmax2(z_v, z_p);
    AggWeights { lambda_v, lambda_p, strategy: Strategy::Rlw }
}

/// One outer SGD step on the fusion parameters.
pub fn aggregate_step(
    g_v: &HyperGradient,
    g_p: &HyperGradient,
    weights: &AggWeights,
    omega: &mut ParamSet,
    lr: f64,
) -> Result<()> {
    if g_v.total.len() != omega.param_count() || g_p.total.len() != omega.param_count() {
        return Err(Error::shape(
            "aggregate_step",
            &[g_v.total.len(), g_p.total.len()],
            &[omega.param_count()],
        ));
    }
    let combined: Vec<f64> = g_v
        .total
        .iter()
        .zip(&g_p.total)
        .map(|(v, p)| weights.lambda_v * v + weights.lambda_p * p)
        .collect();
    if combined.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(String::from(
            "aggregate_step: combined gradient is non-finite",
        )));
    }
    omega.apply_step(&combined, lr)
}

/// Per-iteration record the adaptive baselines consume.
#[derive(Debug, Clone, Copy)]
struct TaskRecord {
    loss_v: f64,
    loss_p: f64,
    gnorm_v: f64,
    gnorm_p: f64,
}

/// Stateful weight source for one training run. Call [`Aggregator::record`]
/// after every iteration so DWA and GradNorm see the loss/gradient history
/// they need; until then they fall back to equal weights with a notice.
#[derive(Debug, Clone)]
pub struct Aggregator {
    strategy: Strategy,
    manual: (f64, f64),
    rng: SeedStream,
    history: Vec<TaskRecord>,
    gradnorm_w: (f64, f64),
    last_notice: Option<String>,
    /// DWA temperature.
    pub temperature: f64,
    /// GradNorm asymmetry exponent and inner learning rate.
    pub gradnorm_alpha: f64,
    pub gradnorm_lr: f64,
}

impl Aggregator {
    pub fn new(strategy: Strategy, manual: (f64, f64), seed: u64) -> Self {
        Aggregator {
            strategy,
            manual,
            rng: SeedStream::derive(seed, "aggregator"),
            history: Vec::new(),
            gradnorm_w: (1.0, 1.0),
            last_notice: None,
            temperature: 2.0,
            gradnorm_alpha: 1.5,
            gradnorm_lr: 0.025,
        }
    }

    pub fn record(&mut self, loss_v: f64, loss_p: f64, gnorm_v: f64, gnorm_p: f64) {
        self.history.push(TaskRecord { loss_v, loss_p, gnorm_v, gnorm_p });
    }

    /// Notice emitted by the last `next_weights` call (history fallback).
    pub fn take_notice(&mut self) -> Option<String> {
        self.last_notice.take()
    }

    fn equal(&self, strategy: Strategy) -> AggWeights {
        AggWeights { lambda_v: 0.5, lambda_p: 0.5, strategy }
    }

    pub fn next_weights(&mut self) -> AggWeights {
        self.last_notice = None;
        match self.strategy {
            Strategy::Rlw => rlw_sample(&mut self.rng),
            Strategy::Equal => self.equal(Strategy::Equal),
            Strategy::Manual => AggWeights {
                lambda_v: self.manual.0,
                lambda_p: self.manual.1,
                strategy: Strategy::Manual,
            },
            Strategy::Dwa => self.dwa(),
            Strategy::GradNorm => self.gradnorm(),
        }
    }

    /// Softmax of the loss descent ratios `L(t-1)/L(t-2)` over temperature.
    fn dwa(&mut self) -> AggWeights {
        let len = self.history.len();
        if len < 2 {
            self.last_notice = Some(format!(
                "dwa needs two recorded iterations, have {len}; using equal weights"
            ));
            return self.equal(Strategy::Dwa);
        }
        let (prev, prev2) = (self.history[len - 1], self.history[len - 2]);
        if prev2.loss_v.abs() < 1e-12 || prev2.loss_p.abs() < 1e-12 {
            self.last_notice = Some(String::from(
                "dwa loss ratio undefined (vanishing loss); using equal weights",
            ));
            return self.equal(Strategy::Dwa);
        }
        let w_v = prev.loss_v / prev2.loss_v;
        let w_p = prev.loss_p / prev2.loss_p;
        let (lambda_v, lambda_p) = softmax2(w_v / self.temperature, w_p / self.temperature);
        AggWeights { lambda_v, lambda_p, strategy: Strategy::Dwa }
    }

    /// One projected-gradient update of the GradNorm weight pair toward
    /// equalized relative inverse training rates, renormalized to sum 2.
    fn gradnorm(&mut self) -> AggWeights {
        let Some(last) = self.history.last().copied() else {
            self.last_notice = Some(String::from(
                "gradnorm needs one recorded iteration; using equal weights",
            ));
            return self.equal(Strategy::GradNorm);
        };
        let first = self.history[0];
        if first.loss_v.abs() < 1e-12 || first.loss_p.abs() < 1e-12 {
            self.last_notice = Some(String::from(
                "gradnorm training rate undefined (vanishing initial loss); using equal weights",
            ));
            return self.equal(Strategy::GradNorm);
        }
        let rate_v = last.loss_v / first.loss_v;
        let rate_p = last.loss_p / first.loss_p;
        let mean_rate = 0.5 * (rate_v + rate_p);
        if mean_rate.abs() < 1e-12 {
            self.last_notice = Some(String::from(
                "gradnorm mean training rate vanished; using equal weights",
            ));
            return self.equal(Strategy::GradNorm);
        }
        let gbar = 0.5 * (self.gradnorm_w.0 * last.gnorm_v + self.gradnorm_w.1 * last.gnorm_p);
        let target_v = gbar * libm::pow(rate_v / mean_rate, self.gradnorm_alpha);
        let target_p = gbar * libm::pow(rate_p / mean_rate, self.gradnorm_alpha);
        let err_v = self.gradnorm_w.0 * last.gnorm_v - target_v;
        let err_p = self.gradnorm_w.1 * last.gnorm_p - target_p;
        let mut w_v = self.gradnorm_w.0 - self.gradnorm_lr * err_v.signum() * last.gnorm_v;
        let mut w_p = self.gradnorm_w.1 - self.gradnorm_lr * err_p.signum() * last.gnorm_p;
        w_v = w_v.max(1e-3);
        w_p = w_p.max(1e-3);
        let scale = 2.0 / (w_v + w_p);
        self.gradnorm_w = (w_v * scale, w_p * scale);
        AggWeights {
            lambda_v: self.gradnorm_w.0,
            lambda_p: self.gradnorm_w.1,
            strategy: Strategy::GradNorm,
        }
    }
}

/// Plain SGD with optional momentum for the lower-level parameter updates.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    pub momentum: f64,
    buf: Option<Vec<f64>>,
}

impl SgdState {
    pub fn new(momentum: f64) -> Self {
        SgdState { momentum, buf: None }
    }

    pub fn step(&mut self, params: &mut ParamSet, grad: &[f64], lr: f64) -> Result<()> {
        if self.momentum == 0.0 {
            return params.apply_step(grad, lr);
        }
        let buf = self.buf.get_or_insert_with(|| alloc::vec![0.0; grad.len()]);
        if buf.len() != grad.len() {
            return Err(Error::shape("sgd_step", &[buf.len()], &[grad.len()]));
        }
        for (b, g) in buf.iter_mut().zip(grad) {
            *b = self.momentum * *b + g;
        }
        let dir = buf.clone();
        params.apply_step(&dir, lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bilevel::HyperGradient;
    use crate::net::{ParamName, ParamSet};
    use crate::tensor::Tensor;

    fn toy_params(n: usize) -> ParamSet {
        let mut set = ParamSet::new(ParamName::Omega, 0);
        set.push("w", Tensor::zeros(&[n])).unwrap();
        set
    }

    fn hyper(vals: &[f64]) -> HyperGradient {
        HyperGradient::direct_only(vals.to_vec()).unwrap()
    }

    #[test]
    fn softmax_worked_example() {
        // draws (0.5, -0.3) -> (0.6900, 0.3100) to 4 decimals
        let (a, b) = softmax2(0.5, -0.3);
        assert!((a - 0.6900).abs() < 5e-5, "{a}");
        assert!((b - 0.3100).abs() < 5e-5, "{b}");
    }

    #[test]
    fn equal_draws_split_evenly() {
        let (a, b) = softmax2(1.234, 1.234);
        assert_eq!(a, 0.5);
        assert_eq!(b, 0.5);
    }

    #[test]
    fn rlw_mean_and_autocorrelation() {
        let mut rng = SeedStream::derive(7, "rlw-test");
        let draws: Vec<f64> = (0..10_000).map(|_| rlw_sample(&mut rng).lambda_v).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((0.48..=0.52).contains(&mean), "mean {mean}");

        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / draws.len() as f64;
        let lag1: f64 = draws
            .windows(2)
            .map(|w| (w[0] - mean) * (w[1] - mean))
            .sum::<f64>()
            / ((draws.len() - 1) as f64 * var);
        assert!(lag1.abs() < 0.05, "lag-1 autocorrelation {lag1}");
    }

    #[test]
    fn rlw_weights_sum_to_one() {
        let mut rng = SeedStream::new(99);
        for _ in 0..100 {
            let w = rlw_sample(&mut rng);
            assert!((w.lambda_v + w.lambda_p - 1.0).abs() < 1e-15);
            assert!(w.lambda_v >= 0.0 && w.lambda_p >= 0.0);
        }
    }

    #[test]
    fn degenerate_weights_give_single_task_step() {
        let mut omega = toy_params(2);
        let w = AggWeights { lambda_v: 1.0, lambda_p: 0.0, strategy: Strategy::Manual };
        aggregate_step(&hyper(&[1.0, -2.0]), &hyper(&[100.0, 100.0]), &w, &mut omega, 0.1).unwrap();
        assert_eq!(omega.flatten(), vec![-0.1, 0.2]);
        assert_eq!(omega.step_count(), 1);
    }

    #[test]
    fn cancelling_gradients_leave_params_unchanged() {
        let mut omega = toy_params(2);
        let w = AggWeights { lambda_v: 0.5, lambda_p: 0.5, strategy: Strategy::Equal };
        aggregate_step(&hyper(&[3.0, -1.0]), &hyper(&[-3.0, 1.0]), &w, &mut omega, 0.1).unwrap();
        assert_eq!(omega.flatten(), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_learning_rate_still_counts_steps() {
        let mut omega = toy_params(1);
        let w = AggWeights { lambda_v: 0.5, lambda_p: 0.5, strategy: Strategy::Equal };
        aggregate_step(&hyper(&[5.0]), &hyper(&[7.0]), &w, &mut omega, 0.0).unwrap();
        assert_eq!(omega.flatten(), vec![0.0]);
        assert_eq!(omega.step_count(), 1);
    }

    #[test]
    fn step_linearity() {
        // lambda*G then (1-lambda)*G' equals one combined step.
        let g1 = hyper(&[0.3, -0.9, 2.2]);
        let g2 = hyper(&[-1.1, 0.4, 0.7]);
        let zero = hyper(&[0.0, 0.0, 0.0]);
        let lam = 0.37;
        let lr = 0.01;

        let mut split = toy_params(3);
        let w1 = AggWeights { lambda_v: lam, lambda_p: 0.0, strategy: Strategy::Manual };
        aggregate_step(&g1, &zero, &w1, &mut split, lr).unwrap();
        let w2 = AggWeights { lambda_v: 1.0 - lam, lambda_p: 0.0, strategy: Strategy::Manual };
        aggregate_step(&g2, &zero, &w2, &mut split, lr).unwrap();

        let mut combined = toy_params(3);
        let w = AggWeights { lambda_v: lam, lambda_p: 1.0 - lam, strategy: Strategy::Manual };
        aggregate_step(&g1, &g2, &w, &mut combined, lr).unwrap();

        for (a, b) in split.flatten().iter().zip(combined.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_combined_gradient_aborts() {
        let mut omega = toy_params(1);
        let bad = HyperGradient {
            direct: vec![f64::MAX],
            indirect: vec![f64::MAX],
            total: vec![f64::MAX],
            coefficient: Some(1.0),
        };
        let w = AggWeights { lambda_v: 2.0, lambda_p: 2.0, strategy: Strategy::Manual };
        assert!(matches!(
            aggregate_step(&bad, &bad, &w, &mut omega, 1.0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn equal_strategy_is_constant() {
        let mut agg = Aggregator::new(Strategy::Equal, (0.5, 0.5), 1);
        let w = agg.next_weights();
        assert_eq!((w.lambda_v, w.lambda_p), (0.5, 0.5));
    }

    #[test]
    fn manual_strategy_uses_config_verbatim() {
        let mut agg = Aggregator::new(Strategy::Manual, (0.8, 0.3), 1);
        let w = agg.next_weights();
        assert_eq!((w.lambda_v, w.lambda_p), (0.8, 0.3));
    }

    #[test]
    fn dwa_equal_ratios_split_evenly() {
        let mut agg = Aggregator::new(Strategy::Dwa, (0.5, 0.5), 1);
        agg.record(2.0, 4.0, 1.0, 1.0);
        agg.record(1.0, 2.0, 1.0, 1.0);
        let w = agg.next_weights();
        assert_eq!((w.lambda_v, w.lambda_p), (0.5, 0.5));
    }

    #[test]
    fn dwa_worked_example() {
        // ratios (1.0, 2.0) at T = 2 -> softmax(0.5, 1.0) = (0.3775, 0.6225)
        let mut agg = Aggregator::new(Strategy::Dwa, (0.5, 0.5), 1);
        agg.record(1.0, 1.0, 1.0, 1.0);
        agg.record(1.0, 2.0, 1.0, 1.0);
        let w = agg.next_weights();
        assert!((w.lambda_v - 0.3775).abs() < 5e-5, "{}", w.lambda_v);
        assert!((w.lambda_p - 0.6225).abs() < 5e-5, "{}", w.lambda_p);
    }

    #[test]
    fn dwa_without_history_falls_back_to_equal_with_notice() {
        let mut agg = Aggregator::new(Strategy::Dwa, (0.5, 0.5), 1);
        let w = agg.next_weights();
        assert_eq!((w.lambda_v, w.lambda_p), (0.5, 0.5));
        assert!(agg.take_notice().is_some());
        assert!(agg.take_notice().is_none());
    }

    #[test]
    fn gradnorm_weights_keep_sum_two() {
        let mut agg = Aggregator::new(Strategy::GradNorm, (0.5, 0.5), 1);
        agg.record(1.0, 1.0, 2.0, 0.5);
        for _ in 0..5 {
            let w = agg.next_weights();
            assert!((w.lambda_v + w.lambda_p - 2.0).abs() < 1e-12);
            assert!(w.lambda_v > 0.0 && w.lambda_p > 0.0);
            agg.record(0.8, 0.9, 2.0, 0.5);
        }
    }

    #[test]
    fn strategies_are_deterministic_for_a_seed() {
        let run = || {
            let mut agg = Aggregator::new(Strategy::Rlw, (0.5, 0.5), 42);
            (0..50).map(|_| agg.next_weights().lambda_v).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn momentum_sgd_accumulates_velocity() {
        let mut params = toy_params(1);
        let mut sgd = SgdState::new(0.9);
        sgd.step(&mut params, &[1.0], 0.1).unwrap();
        sgd.step(&mut params, &[1.0], 0.1).unwrap();
        // velocities 1.0 then 1.9 -> total displacement 0.29
        assert!((params.flatten()[0] + 0.29).abs() < 1e-12);
    }
}
