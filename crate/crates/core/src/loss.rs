//! Scalar training objectives.
//!
//! Three losses drive the whole system: the critic loss (Wasserstein gap
//! plus gradient penalty), the fusion visual loss (saliency-weighted pixel
//! terms minus the critic score), and per-pixel cross-entropy for the task
//! head. Each returns a [`LossValue`] whose named parts always recombine
//! into the total.
//!
//! The gradient penalty needs the derivative of a gradient norm, which a
//! first-order tape cannot express. Its parameter/image gradients are built
//! from a central-difference Jacobian-vector product instead: perturb the
//! scored image along the penalty direction, differentiate the two
//! perturbed critic sums, and divide by the step (see
//! [`disc_loss_with_grads`]). The step defaults to [`DEFAULT_FD_STEP`] and
//! the construction is unit-tested against full finite differences.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::net::{bind, collect_flat_grad, CriticNet, ParamSet};
use crate::tensor::{Tape, Tensor, VarId};

/// Step for the penalty's central-difference Jacobian-vector product.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// A scalar objective with its named breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    parts: Vec<(&'static str, f64)>,
}

impl LossValue {
    pub fn new(total: f64, parts: Vec<(&'static str, f64)>) -> Self {
        LossValue { total, parts }
    }

    pub fn parts(&self) -> &[(&'static str, f64)] {
        &self.parts
    }

    pub fn part(&self, name: &str) -> Option<f64> {
        self.parts.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    /// Name of the first non-finite scalar in this loss, if any.
    pub fn non_finite_part(&self) -> Option<&'static str> {
        if let Some((n, _)) = self.parts.iter().find(|(_, v)| !v.is_finite()) {
            return Some(n);
        }
        if !self.total.is_finite() {
            return Some("total");
        }
        None
    }
}

// ---------------------------------------------------------------------------
// Fusion visual loss
// ---------------------------------------------------------------------------

/// Tape handles for the visual loss terms.
pub struct VisualLossVars {
    pub total: VarId,
    pub pixel_x: VarId,
    pub pixel_y: VarId,
    pub adv: VarId,
}

/// Wire the fusion visual loss onto an existing tape:
/// `mean((u - m1*x)^2) + mean((u - m2*y)^2) - adv_coeff * mean(T_V(u))`.
///
/// `target_x`/`target_y` are the saliency-weighted targets `m1*x`, `m2*y`.
pub fn fusion_visual_loss_on_tape(
    tape: &mut Tape,
    u: VarId,
    target_x: VarId,
    target_y: VarId,
    critic: &dyn CriticNet,
    critic_params: &crate::net::BoundParams,
    adv_coeff: f64,
) -> Result<VisualLossVars> {
    let dx = tape.sub(u, target_x)?;
    let sqx = tape.square(dx)?;
    let pixel_x = tape.mean(sqx)?;
    let dy = tape.sub(u, target_y)?;
    let sqy = tape.square(dy)?;
    let pixel_y = tape.mean(sqy)?;
    let scores = critic.score(tape, u, critic_params)?;
    let adv = tape.mean(scores)?;
    let neg_adv = tape.scalar_mul(adv, -adv_coeff)?;
    let pix = tape.add(pixel_x, pixel_y)?;
    let total = tape.add(pix, neg_adv)?;
    Ok(VisualLossVars { total, pixel_x, pixel_y, adv })
}

pub fn visual_loss_value(tape: &Tape, vars: &VisualLossVars) -> LossValue {
    LossValue::new(
        tape.value(vars.total).item(),
        vec![
            ("pixel_x", tape.value(vars.pixel_x).item()),
            ("pixel_y", tape.value(vars.pixel_y).item()),
            ("adv", tape.value(vars.adv).item()),
        ],
    )
}

/// Elementwise product of two equal-shape tensors (plain data, no tape).
pub fn weighted_target(weight: &Tensor, img: &Tensor) -> Result<Tensor> {
    if weight.shape() != img.shape() {
        return Err(Error::shape("weighted_target", weight.shape(), img.shape()));
    }
    let data: Vec<f64> = weight.data().iter().zip(img.data()).map(|(a, b)| a * b).collect();
    Tensor::new(weight.shape(), data)
}

/// Standalone visual-loss evaluation. `u`, `x`, `y`, `m1`, `m2` share one
/// batch shape; weights must satisfy `m1 + m2 = 1` pointwise.
#[allow(clippy::too_many_arguments)]
pub fn fusion_visual_loss(
    u: &Tensor,
    x: &Tensor,
    y: &Tensor,
    m1: &Tensor,
    m2: &Tensor,
    critic: &dyn CriticNet,
    theta: &ParamSet,
    adv_coeff: f64,
) -> Result<LossValue> {
    let mut tape = Tape::new();
    let uv = tape.constant(u.clone())?;
    let tx = tape.constant(weighted_target(m1, x)?)?;
    let ty = tape.constant(weighted_target(m2, y)?)?;
    let bound = bind(&mut tape, theta, false)?;
    let vars = fusion_visual_loss_on_tape(&mut tape, uv, tx, ty, critic, &bound, adv_coeff)?;
    Ok(visual_loss_value(&tape, &vars))
}

// ---------------------------------------------------------------------------
// Task loss
// ---------------------------------------------------------------------------

/// Mean per-pixel cross-entropy from channel log-softmax.
pub fn task_loss_on_tape(tape: &mut Tape, logits: VarId, labels: &[usize]) -> Result<VarId> {
    let lp = tape.log_softmax_channels(logits)?;
    tape.nll_from_log_softmax(lp, labels)
}

pub fn task_loss(logits: &Tensor, labels: &[usize]) -> Result<LossValue> {
    let mut tape = Tape::new();
    let lv = tape.constant(logits.clone())?;
    let ce = task_loss_on_tape(&mut tape, lv, labels)?;
    let v = tape.value(ce).item();
    Ok(LossValue::new(v, vec![("ce", v)]))
}

// ---------------------------------------------------------------------------
// Critic loss
// ---------------------------------------------------------------------------

/// Critic loss value plus its gradients with respect to the critic
/// parameters (flat, entry order) and the fused batch.
#[derive(Debug, Clone)]
pub struct DiscLossGrads {
    pub value: LossValue,
    pub grad_theta: Vec<f64>,
    pub grad_u: Tensor,
}

fn check_batch_pair(u: &Tensor, u_m: &Tensor) -> Result<()> {
    if u.shape() != u_m.shape() {
        return Err(Error::shape("disc_loss", u.shape(), u_m.shape()));
    }
    if u.shape().len() != 4 {
        return Err(Error::shape("disc_loss", u.shape(), &[0, 1, 0, 0]));
    }
    Ok(())
}

/// Image the penalty is evaluated at: the fused batch itself, or per-sample
/// interpolates `eps*u + (1-eps)*u_m` when `penalty_eps` is given.
fn penalty_point(u: &Tensor, u_m: &Tensor, penalty_eps: Option<&[f64]>) -> Result<Tensor> {
    match penalty_eps {
        None => Ok(u.clone()),
        Some(eps) => {
            let n = u.shape()[0];
            if eps.len() != n {
                return Err(Error::shape("disc_loss_eps", &[eps.len()], &[n]));
            }
            let per = u.numel() / n;
            let mut data = vec![0.0; u.numel()];
            for i in 0..n {
                let e = eps[i];
                for p in 0..per {
                    let idx = i * per + p;
                    data[idx] = e * u.data()[idx] + (1.0 - e) * u_m.data()[idx];
                }
            }
            Tensor::new(u.shape(), data)
        }
    }
}

/// Gradient of the summed critic scores with respect to the scored image,
/// optionally also with respect to the parameters.
fn critic_input_grad(
    critic: &dyn CriticNet,
    theta: &ParamSet,
    img: &Tensor,
    want_theta: bool,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let mut tape = Tape::new();
    let iv = tape.leaf(img.clone(), true)?;
    let bound = bind(&mut tape, theta, want_theta)?;
    let s = critic.score(&mut tape, iv, &bound)?;
    let total = tape.sum(s)?;
    tape.backward(total)?;
    let gi = tape
        .grad(iv)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; img.numel()]);
    let gt = want_theta.then(|| collect_flat_grad(&tape, &bound, theta));
    Ok((gi, gt))
}

/// Per-sample Euclidean norms of a `[N, ...]` buffer.
fn sample_norms(v: &[f64], n: usize) -> Vec<f64> {
    let per = v.len() / n;
    (0..n).map(|i| math::l2_norm(&v[i * per..(i + 1) * per])).collect()
}

fn penalty_from_norms(norms: &[f64]) -> f64 {
    norms.iter().map(|g| (g - 1.0) * (g - 1.0)).sum::<f64>() / norms.len() as f64
}

/// Critic loss value: `mean T_V(u) - mean T_V(u_m) + eta * penalty`, with
/// `penalty = mean over samples of (||grad_u T_V|| - 1)^2` evaluated at the
/// fused samples (or at interpolates when `penalty_eps` is given).
pub fn disc_loss(
    critic: &dyn CriticNet,
    theta: &ParamSet,
    u: &Tensor,
    u_m: &Tensor,
    eta: f64,
    penalty_eps: Option<&[f64]>,
) -> Result<LossValue> {
    if eta < 0.0 {
        return Err(Error::Config(format!("disc_loss: eta must be >= 0, got {eta}")));
    }
    check_batch_pair(u, u_m)?;
    let n = u.shape()[0];

    let mut tape = Tape::new();
    let uv = tape.constant(u.clone())?;
    let umv = tape.constant(u_m.clone())?;
    let bound = bind(&mut tape, theta, false)?;
    let su = critic.score(&mut tape, uv, &bound)?;
    let sm = critic.score(&mut tape, umv, &bound)?;
    let wass = tape.value(su).data().iter().sum::<f64>() / n as f64
        - tape.value(sm).data().iter().sum::<f64>() / n as f64;

    let up = penalty_point(u, u_m, penalty_eps)?;
    let (v, _) = critic_input_grad(critic, theta, &up, false)?;
    let penalty = penalty_from_norms(&sample_norms(&v, n));

    Ok(LossValue::new(
        wass + eta * penalty,
        vec![("wasserstein", wass), ("penalty", penalty)],
    ))
}

/// Critic loss with gradients for training.
///
/// The Wasserstein part differentiates on the tape. The penalty part is a
/// function of `grad_u T_V`, so its theta/image gradients come from the
/// central-difference JVP described in the module docs, scaled back by the
/// norm of the penalty direction.
pub fn disc_loss_with_grads(
    critic: &dyn CriticNet,
    theta: &ParamSet,
    u: &Tensor,
    u_m: &Tensor,
    eta: f64,
    penalty_eps: Option<&[f64]>,
    fd_step: f64,
) -> Result<DiscLossGrads> {
    if eta < 0.0 {
        return Err(Error::Config(format!("disc_loss: eta must be >= 0, got {eta}")));
    }
    if !(fd_step > 0.0 && fd_step <= 1e-2) {
        return Err(Error::Usage(format!("disc_loss: fd_step out of range: {fd_step}")));
    }
    check_batch_pair(u, u_m)?;
    let n = u.shape()[0];
    let per = u.numel() / n;

    // Wasserstein gap and its exact first-order gradients.
    let mut tape = Tape::new();
    let uv = tape.leaf(u.clone(), true)?;
    let umv = tape.constant(u_m.clone())?;
    let bound = bind(&mut tape, theta, true)?;
    let su = critic.score(&mut tape, uv, &bound)?;
    let sm = critic.score(&mut tape, umv, &bound)?;
    let mu = tape.mean(su)?;
    let mm = tape.mean(sm)?;
    let wass = tape.sub(mu, mm)?;
    let wass_val = tape.value(wass).item();
    tape.backward(wass)?;
    let mut grad_theta = collect_flat_grad(&tape, &bound, theta);
    let mut grad_u = tape
        .grad(uv)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; u.numel()]);

    // Penalty value at the penalty point.
    let up = penalty_point(u, u_m, penalty_eps)?;
    let (v, _) = critic_input_grad(critic, theta, &up, false)?;
    let norms = sample_norms(&v, n);
    let penalty = penalty_from_norms(&norms);

    // Penalty direction r_i = 2/N (g_i - 1)/g_i * v_i; zero-norm samples
    // contribute nothing (subgradient 0, mirroring the tape's norm rule).
    let mut r = vec![0.0; v.len()];
    for i in 0..n {
        if norms[i] > 0.0 {
            let c = 2.0 / n as f64 * (norms[i] - 1.0) / norms[i];
            for p in 0..per {
                r[i * per + p] = c * v[i * per + p];
            }
        }
    }
    let rnorm = math::l2_norm(&r);

    if rnorm > 0.0 {
        let unit: Vec<f64> = r.iter().map(|x| x / rnorm).collect();
        let perturb = |sign: f64| -> Result<(Vec<f64>, Vec<f64>)> {
            let data: Vec<f64> = up
                .data()
                .iter()
                .zip(&unit)
                .map(|(x, d)| x + sign * fd_step * d)
                .collect();
            let point = Tensor::new(up.shape(), data)?;
            let (gi, gt) = critic_input_grad(critic, theta, &point, true)?;
            Ok((gi, gt.expect("theta gradient requested")))
        };
        let (gi_plus, gt_plus) = perturb(1.0)?;
        let (gi_minus, gt_minus) = perturb(-1.0)?;
        let scale = rnorm / (2.0 * fd_step);

        for (dst, (p, m)) in grad_theta.iter_mut().zip(gt_plus.iter().zip(&gt_minus)) {
            *dst += eta * scale * (p - m);
        }
        // Chain back through the interpolation when the penalty point is not
        // the fused batch itself: d(up)/d(u) = eps per sample.
        for i in 0..n {
            let chain = penalty_eps.map(|eps| eps[i]).unwrap_or(1.0);
            for p in 0..per {
                let idx = i * per + p;
                grad_u[idx] += eta * scale * chain * (gi_plus[idx] - gi_minus[idx]);
            }
        }
    }

    Ok(DiscLossGrads {
        value: LossValue::new(
            wass_val + eta * penalty,
            vec![("wasserstein", wass_val), ("penalty", penalty)],
        ),
        grad_theta,
        grad_u: Tensor::new(u.shape(), grad_u)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{BoundParams, Discriminator, ParamName, TaskHead};
    use crate::rng::SeedStream;

    /// Critic that sums all pixels of each sample; no parameters.
    struct SumCritic;

    impl CriticNet for SumCritic {
        fn param_specs(&self) -> crate::net::ParamSpecs {
            Vec::new()
        }

        fn score(&self, tape: &mut Tape, u: VarId, _params: &BoundParams) -> Result<VarId> {
            let sh = tape.value(u).shape().to_vec();
            let hw = (sh[2] * sh[3]) as f64;
            let pooled = tape.mean_hw(u)?;
            let summed = tape.scalar_mul(pooled, hw)?;
            tape.reshape(summed, &[sh[0]])
        }
    }

    /// Critic that always scores zero; no parameters.
    struct ZeroCritic;

    impl CriticNet for ZeroCritic {
        fn param_specs(&self) -> crate::net::ParamSpecs {
            Vec::new()
        }

        fn score(&self, tape: &mut Tape, u: VarId, _params: &BoundParams) -> Result<VarId> {
            let sh = tape.value(u).shape().to_vec();
            let pooled = tape.mean_hw(u)?;
            let zero = tape.scalar_mul(pooled, 0.0)?;
            tape.reshape(zero, &[sh[0]])
        }
    }

    fn empty_params() -> ParamSet {
        ParamSet::new(ParamName::ThetaV, 0)
    }

    fn batch(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = SeedStream::new(seed);
        let data: Vec<f64> = (0..n * h * w).map(|_| rng.uniform()).collect();
        Tensor::new(&[n, 1, h, w], data).unwrap()
    }

    #[test]
    fn one_pixel_sum_critic_case() {
        // One pixel: grad_u T = 1, norm = 1, penalty = 0,
        // wasserstein = u - u_m.
        let u = Tensor::new(&[1, 1, 1, 1], vec![0.7]).unwrap();
        let um = Tensor::new(&[1, 1, 1, 1], vec![0.3]).unwrap();
        let out = disc_loss_with_grads(&SumCritic, &empty_params(), &u, &um, 10.0, None, 1e-4).unwrap();
        assert!((out.value.part("wasserstein").unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(out.value.part("penalty").unwrap(), 0.0);
        assert!((out.value.total - 0.4).abs() < 1e-15);
        assert!((out.grad_u.data()[0] - 1.0).abs() < 1e-12);
        assert!(out.grad_theta.is_empty());
    }

    #[test]
    fn zero_critic_penalty_is_eta() {
        let disc = Discriminator;
        let theta = disc.init_zeros();
        let u = batch(2, 16, 16, 1);
        let um = batch(2, 16, 16, 2);
        let v = disc_loss(&disc, &theta, &u, &um, 10.0, None).unwrap();
        assert_eq!(v.part("wasserstein").unwrap(), 0.0);
        assert_eq!(v.part("penalty").unwrap(), 1.0);
        assert_eq!(v.total, 10.0);
    }

    #[test]
    fn negative_eta_is_config_error() {
        let u = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(matches!(
            disc_loss(&SumCritic, &empty_params(), &u, &u, -1.0, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn penalty_value_matches_finite_difference_norms() {
        // Re-derive ||grad_u T_V|| purely from finite differences of the
        // critic score and rebuild the penalty from those norms.
        let disc = Discriminator;
        let theta = disc.init(77);
        let u = batch(2, 16, 16, 5);
        let um = batch(2, 16, 16, 6);
        let eta = 10.0;
        let loss = disc_loss(&disc, &theta, &u, &um, eta, None).unwrap();

        let h = 1e-5;
        let n = 2;
        let per = u.numel() / n;
        let score_at = |data: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let iv = tape.constant(Tensor::new(u.shape(), data.to_vec()).unwrap()).unwrap();
            let bound = bind(&mut tape, &theta, false).unwrap();
            let s = disc.score(&mut tape, iv, &bound).unwrap();
            tape.value(s).data().to_vec()
        };
        let mut fd_grad = vec![0.0; u.numel()];
        for i in 0..u.numel() {
            let mut plus = u.data().to_vec();
            plus[i] += h;
            let mut minus = u.data().to_vec();
            minus[i] -= h;
            let sample = i / per;
            fd_grad[i] = (score_at(&plus)[sample] - score_at(&minus)[sample]) / (2.0 * h);
        }
        let fd_penalty = penalty_from_norms(&sample_norms(&fd_grad, n));
        let got = loss.part("penalty").unwrap();
        assert!((got - fd_penalty).abs() < 1e-4, "{got} vs {fd_penalty}");
    }

    #[test]
    fn penalty_theta_gradient_matches_finite_difference() {
        // The JVP-built theta gradient of the full loss against central
        // differences of the loss value, probed on a spread of coordinates.
        let disc = Discriminator;
        let theta = disc.init(91);
        let u = batch(1, 16, 16, 7);
        let um = batch(1, 16, 16, 8);
        let eta = 10.0;
        let out = disc_loss_with_grads(&disc, &theta, &u, &um, eta, None, 1e-4).unwrap();

        let flat = theta.flatten();
        let h = 1e-5;
        let count = flat.len();
        let probe: Vec<usize> = (0..12).map(|i| i * (count / 12)).collect();
        for &idx in &probe {
            let eval = |delta: f64| -> f64 {
                let mut t2 = theta.clone();
                let mut f2 = flat.clone();
                f2[idx] += delta;
                t2.assign_flat(&f2).unwrap();
                disc_loss(&disc, &t2, &u, &um, eta, None).unwrap().total
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = out.grad_theta[idx];
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            assert!(err < 2e-4, "coord {idx}: {analytic} vs {numeric} (err {err})");
        }
    }

    #[test]
    fn loss_u_gradient_matches_finite_difference() {
        let disc = Discriminator;
        let theta = disc.init(13);
        let u = batch(1, 16, 16, 9);
        let um = batch(1, 16, 16, 10);
        let eta = 5.0;
        let out = disc_loss_with_grads(&disc, &theta, &u, &um, eta, None, 1e-4).unwrap();

        let h = 1e-5;
        for idx in [0, 17, 64, 130, 255] {
            let eval = |delta: f64| -> f64 {
                let mut data = u.data().to_vec();
                data[idx] += delta;
                let u2 = Tensor::new(u.shape(), data).unwrap();
                disc_loss(&disc, &theta, &u2, &um, eta, None).unwrap().total
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = out.grad_u.data()[idx];
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            assert!(err < 2e-4, "pixel {idx}: {analytic} vs {numeric} (err {err})");
        }
    }

    #[test]
    fn interpolate_penalty_point_blends_batches() {
        let u = Tensor::new(&[2, 1, 1, 1], vec![1.0, 0.0]).unwrap();
        let um = Tensor::new(&[2, 1, 1, 1], vec![0.0, 1.0]).unwrap();
        let p = penalty_point(&u, &um, Some(&[0.25, 0.75])).unwrap();
        assert_eq!(p.data(), &[0.25, 0.25]);
    }

    #[test]
    fn disc_loss_parts_recombine() {
        let disc = Discriminator;
        let theta = disc.init(3);
        let u = batch(2, 16, 16, 11);
        let um = batch(2, 16, 16, 12);
        let eta = 7.5;
        let v = disc_loss(&disc, &theta, &u, &um, eta, None).unwrap();
        let recombined = v.part("wasserstein").unwrap() + eta * v.part("penalty").unwrap();
        assert!((v.total - recombined).abs() < 1e-12);
    }

    #[test]
    fn visual_loss_equal_sources_equal_pixel_parts() {
        let x = batch(1, 16, 16, 21);
        let m = Tensor::full(&[1, 1, 16, 16], 0.5);
        let u = batch(1, 16, 16, 22);
        let v = fusion_visual_loss(&u, &x, &x, &m, &m, &ZeroCritic, &empty_params(), 1.0).unwrap();
        let px = v.part("pixel_x").unwrap();
        let py = v.part("pixel_y").unwrap();
        assert!((px - py).abs() < 1e-15);
        assert_eq!(v.part("adv").unwrap(), 0.0);
        assert!((v.total - (px + py)).abs() < 1e-15);
    }

    #[test]
    fn visual_loss_parts_recombine() {
        let disc = Discriminator;
        let theta = disc.init(51);
        let u = batch(1, 16, 16, 23);
        let x = batch(1, 16, 16, 24);
        let y = batch(1, 16, 16, 25);
        let m1 = Tensor::full(&[1, 1, 16, 16], 0.6);
        let m2 = Tensor::full(&[1, 1, 16, 16], 0.4);
        let coeff = 0.8;
        let v = fusion_visual_loss(&u, &x, &y, &m1, &m2, &disc, &theta, coeff).unwrap();
        let recombined =
            v.part("pixel_x").unwrap() + v.part("pixel_y").unwrap() - coeff * v.part("adv").unwrap();
        assert!((v.total - recombined).abs() < 1e-12);
    }

    #[test]
    fn pixel_terms_minimized_at_half_blend() {
        // Grid search over a single scalar pixel: argmin of
        // (u - a)^2 + (u - b)^2 sits at (a + b) / 2.
        let x = Tensor::new(&[1, 1, 1, 1], vec![0.8]).unwrap();
        let y = Tensor::new(&[1, 1, 1, 1], vec![0.4]).unwrap();
        let m1 = Tensor::new(&[1, 1, 1, 1], vec![0.75]).unwrap();
        let m2 = Tensor::new(&[1, 1, 1, 1], vec![0.25]).unwrap();
        let mut best = (f64::INFINITY, 0.0);
        for step in 0..=10_000 {
            let cand = step as f64 / 10_000.0;
            let u = Tensor::new(&[1, 1, 1, 1], vec![cand]).unwrap();
            let v = fusion_visual_loss(&u, &x, &y, &m1, &m2, &ZeroCritic, &empty_params(), 1.0)
                .unwrap()
                .total;
            if v < best.0 {
                best = (v, cand);
            }
        }
        let expected = (0.75 * 0.8 + 0.25 * 0.4) / 2.0;
        assert!((best.1 - expected).abs() < 1e-3, "argmin {} vs {expected}", best.1);
    }

    #[test]
    fn visual_loss_descends_along_negative_gradient() {
        let disc = Discriminator;
        let theta = disc.init(61);
        let u0 = batch(1, 16, 16, 26);
        let x = batch(1, 16, 16, 27);
        let y = batch(1, 16, 16, 28);
        let m1 = Tensor::full(&[1, 1, 16, 16], 0.5);
        let m2 = Tensor::full(&[1, 1, 16, 16], 0.5);

        let eval_with_grad = |u: &Tensor| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let uv = tape.leaf(u.clone(), true).unwrap();
            let tx = tape.constant(weighted_target(&m1, &x).unwrap()).unwrap();
            let ty = tape.constant(weighted_target(&m2, &y).unwrap()).unwrap();
            let bound = bind(&mut tape, &theta, false).unwrap();
            let vars =
                fusion_visual_loss_on_tape(&mut tape, uv, tx, ty, &disc, &bound, 1.0).unwrap();
            let total = tape.value(vars.total).item();
            tape.backward(vars.total).unwrap();
            (total, tape.grad(uv).unwrap().to_vec())
        };

        let (before, grad) = eval_with_grad(&u0);
        let stepped: Vec<f64> = u0.data().iter().zip(&grad).map(|(v, g)| v - 1e-4 * g).collect();
        let (after, _) = eval_with_grad(&Tensor::new(u0.shape(), stepped).unwrap());
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn uniform_logits_cost_ln_classes() {
        let logits = Tensor::zeros(&[1, 3, 4, 4]);
        let labels = vec![1; 16];
        let v = task_loss(&logits, &labels).unwrap();
        assert!((v.total - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        let mut data = vec![0.0; 3 * 4];
        for p in 0..4 {
            data[p] = 50.0; // class 0 plane gets a huge margin
        }
        let logits = Tensor::new(&[1, 3, 2, 2], data).unwrap();
        let labels = vec![0; 4];
        let v = task_loss(&logits, &labels).unwrap();
        assert!(v.total < 1e-12, "{}", v.total);
    }

    #[test]
    fn cross_entropy_matches_explicit_softmax() {
        let mut rng = SeedStream::new(71);
        let data: Vec<f64> = (0..3 * 16).map(|_| rng.normal()).collect();
        let logits = Tensor::new(&[1, 3, 4, 4], data.clone()).unwrap();
        let labels: Vec<usize> = (0..16).map(|_| rng.below(3)).collect();
        let v = task_loss(&logits, &labels).unwrap();

        let mut expected = 0.0;
        for p in 0..16 {
            let row: Vec<f64> = (0..3).map(|c| data[c * 16 + p]).collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&l| (l - mx).exp()).sum();
            let prob = ((row[labels[p]] - mx).exp()) / z;
            expected -= prob.ln();
        }
        expected /= 16.0;
        assert!((v.total - expected).abs() < 1e-12);
    }

    #[test]
    fn task_head_loss_is_deterministic() {
        let head = TaskHead::new(3);
        let theta = head.init(81);
        let u = batch(1, 8, 8, 82);
        let labels: Vec<usize> = (0..64).map(|i| i % 3).collect();
        let eval = || {
            let mut tape = Tape::new();
            let uv = tape.constant(u.clone()).unwrap();
            let bound = bind(&mut tape, &theta, false).unwrap();
            let logits = head.forward(&mut tape, uv, &bound).unwrap();
            let ce = task_loss_on_tape(&mut tape, logits, &labels).unwrap();
            tape.value(ce).item()
        };
        assert_eq!(eval(), eval());
    }
}
