//! Hypergradient machinery for the bi-level training loop.
//!
//! The upper-level gradient of each task splits into a direct part and an
//! indirect part flowing through the lower-level optimum. The indirect part
//! would need second-order information; [`gn_approx_hypergrad`] replaces it
//! with the Gauss-Newton inner-product ratio of first-order gradients:
//!
//! ```text
//! c = <g_theta_upper, g_theta_lower> / <g_theta_lower, g_theta_lower>
//! indirect = c * g_omega_lower,   total = g_omega_upper + indirect
//! ```
//!
//! [`QuadraticBilevel`] provides closed-form fixtures where the implicit
//! function theorem gives the exact hypergradient, used to validate the
//! approximation and the finite-difference oracles.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::loss::LossValue;
use crate::math;

/// Threshold below which the lower-level gradient is treated as vanished
/// and the correction coefficient collapses to zero.
pub const COEFF_DENOM_GUARD: f64 = 1e-12;

// ---------------------------------------------------------------------------
// HyperGradient
// ---------------------------------------------------------------------------

/// Assembled upper-level gradient: direct part, indirect correction, and
/// their sum. `coefficient` is the Gauss-Newton scalar when the indirect
/// part came from the approximation (`None` for the exact closed form).
#[derive(Debug, Clone)]
pub struct HyperGradient {
    pub direct: Vec<f64>,
    pub indirect: Vec<f64>,
    pub total: Vec<f64>,
    pub coefficient: Option<f64>,
}

impl HyperGradient {
    fn assemble(direct: Vec<f64>, indirect: Vec<f64>, coefficient: Option<f64>) -> Result<Self> {
        debug_assert_eq!(direct.len(), indirect.len());
        let total: Vec<f64> = direct.iter().zip(&indirect).map(|(d, i)| d + i).collect();
        if total.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "hypergradient" });
        }
        Ok(HyperGradient { direct, indirect, total, coefficient })
    }

    /// A gradient with no indirect correction.
    pub fn direct_only(direct: Vec<f64>) -> Result<Self> {
        let zeros = vec![0.0; direct.len()];
        HyperGradient::assemble(direct, zeros, Some(0.0))
    }

    pub fn norm(&self) -> f64 {
        math::l2_norm(&self.total)
    }
}

/// First-order Gauss-Newton approximation of the indirect term.
///
/// Degenerate lower-level gradients (squared norm below
/// [`COEFF_DENOM_GUARD`]) mean the inner problem sits at a stationary point;
/// the correction direction is undefined there and is dropped (`c = 0`).
pub fn gn_approx_hypergrad(
    grad_theta_upper: &[f64],
    grad_theta_lower: &[f64],
    grad_omega_lower: &[f64],
    grad_omega_upper: &[f64],
) -> Result<HyperGradient> {
    if grad_theta_upper.len() != grad_theta_lower.len() {
        return Err(Error::shape(
            "gn_approx_theta",
            &[grad_theta_upper.len()],
            &[grad_theta_lower.len()],
        ));
    }
    if grad_omega_upper.len() != grad_omega_lower.len() {
        return Err(Error::shape(
            "gn_approx_omega",
            &[grad_omega_upper.len()],
            &[grad_omega_lower.len()],
        ));
    }
    let denom = math::dot(grad_theta_lower, grad_theta_lower);
    let c = if denom < COEFF_DENOM_GUARD {
        0.0
    } else {
        math::dot(grad_theta_upper, grad_theta_lower) / denom
    };
    let indirect: Vec<f64> = grad_omega_lower.iter().map(|g| c * g).collect();
    HyperGradient::assemble(grad_omega_upper.to_vec(), indirect, Some(c))
}

// ---------------------------------------------------------------------------
// Small dense linear algebra for the quadratic fixtures
// ---------------------------------------------------------------------------

/// Row-major dense matrix. Only what the quadratic fixtures need.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("mat_new", &[rows, cols], &[data.len()]));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for j in 0..i {
                if (self.at(i, j) - self.at(j, i)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| math::dot(&self.data[i * self.cols..(i + 1) * self.cols], v))
            .collect()
    }

    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, r) in out.iter_mut().zip(row) {
                *o += v[i] * r;
            }
        }
        out
    }
}

/// Cholesky factor of a symmetric positive-definite matrix. Factorization
/// failure is exactly the SPD test used at fixture construction.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Mat,
}

impl Cholesky {
    pub fn factor(a: &Mat) -> Result<Self> {
        if !a.is_symmetric(1e-10) {
            return Err(Error::Usage(String::from("cholesky: matrix not symmetric")));
        }
        let n = a.rows;
        let mut l = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = a.at(i, j);
                for k in 0..j {
                    s -= l.at(i, k) * l.at(j, k);
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::Usage(String::from(
                            "cholesky: matrix not positive definite",
                        )));
                    }
                    l.data[i * n + j] = math::sqrt(s);
                } else {
                    l.data[i * n + j] = s / l.at(j, j);
                }
            }
        }
        Ok(Cholesky { l })
    }

    /// Solve `A x = b` via the two triangular systems.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.rows;
        debug_assert_eq!(b.len(), n);
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l.at(i, k) * y[k];
            }
            y[i] = s / self.l.at(i, i);
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l.at(k, i) * x[k];
            }
            x[i] = s / self.l.at(i, i);
        }
        x
    }
}

// ---------------------------------------------------------------------------
// Quadratic bi-level fixtures
// ---------------------------------------------------------------------------

/// Upper objective
/// `Phi(omega, theta) = 1/2 w'Pw + 1/2 t'Qt + w'Rt + p'w + q't`
/// with symmetric `P` (m x m), `Q` (n x n) and coupling `R` (m x n).
#[derive(Debug, Clone)]
pub struct QuadUpper {
    pub p: Mat,
    pub q: Mat,
    pub r: Mat,
    pub lin_omega: Vec<f64>,
    pub lin_theta: Vec<f64>,
}

impl QuadUpper {
    pub fn value(&self, omega: &[f64], theta: &[f64]) -> f64 {
        0.5 * math::dot(omega, &self.p.matvec(omega))
            + 0.5 * math::dot(theta, &self.q.matvec(theta))
            + math::dot(omega, &self.r.matvec(theta))
            + math::dot(&self.lin_omega, omega)
            + math::dot(&self.lin_theta, theta)
    }

    pub fn grads(&self, omega: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut g_omega = self.p.matvec(omega);
        for (g, (r, l)) in g_omega
            .iter_mut()
            .zip(self.r.matvec(theta).iter().zip(&self.lin_omega))
        {
            *g += r + l;
        }
        let mut g_theta = self.q.matvec(theta);
        for (g, (r, l)) in g_theta
            .iter_mut()
            .zip(self.r.matvec_t(omega).iter().zip(&self.lin_theta))
        {
            *g += r + l;
        }
        (g_omega, g_theta)
    }
}

/// Bi-level test problem with lower level
/// `phi(omega, theta) = 1/2 t'At - t'Bw`, whose unique minimizer is
/// `theta*(omega) = A^-1 B omega`.
#[derive(Debug, Clone)]
pub struct QuadraticBilevel {
    a: Mat,
    b: Mat,
    chol: Cholesky,
    pub upper: QuadUpper,
}

impl QuadraticBilevel {
    /// `a` must be symmetric positive definite (checked here), `b` is n x m.
    pub fn new(a: Mat, b: Mat, upper: QuadUpper) -> Result<Self> {
        if a.rows() != b.rows() {
            return Err(Error::shape("quadratic_bilevel", &[a.rows(), a.cols()], &[b.rows(), b.cols()]));
        }
        let chol = Cholesky::factor(&a)?;
        Ok(QuadraticBilevel { a, b, chol, upper })
    }

    pub fn dim_theta(&self) -> usize {
        self.a.rows()
    }

    pub fn dim_omega(&self) -> usize {
        self.b.cols()
    }

    pub fn theta_star(&self, omega: &[f64]) -> Vec<f64> {
        self.chol.solve(&self.b.matvec(omega))
    }

    pub fn lower_value(&self, omega: &[f64], theta: &[f64]) -> f64 {
        0.5 * math::dot(theta, &self.a.matvec(theta)) - math::dot(theta, &self.b.matvec(omega))
    }

    /// `(grad_omega phi, grad_theta phi)` at an arbitrary point.
    pub fn lower_grads(&self, omega: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let g_omega: Vec<f64> = self.b.matvec_t(theta).iter().map(|v| -v).collect();
        let mut g_theta = self.a.matvec(theta);
        for (g, b) in g_theta.iter_mut().zip(self.b.matvec(omega)) {
            *g -= b;
        }
        (g_omega, g_theta)
    }

    /// Reduced upper objective `omega -> Phi(omega, theta*(omega))`.
    pub fn reduced_value(&self, omega: &[f64]) -> f64 {
        let theta = self.theta_star(omega);
        self.upper.value(omega, &theta)
    }

    /// Exact hypergradient from the implicit function theorem. The lower
    /// Jacobian is `d theta*/d omega = A^-1 B`, so the indirect term is
    /// `B' A^-1 grad_theta Phi`, evaluated at `theta*(omega)`.
    pub fn exact_hypergrad(&self, omega: &[f64]) -> Result<HyperGradient> {
        if omega.len() != self.dim_omega() {
            return Err(Error::shape("exact_hypergrad", &[omega.len()], &[self.dim_omega()]));
        }
        let theta = self.theta_star(omega);
        let (direct, g_theta) = self.upper.grads(omega, &theta);
        let solved = self.chol.solve(&g_theta);
        let indirect = self.b.matvec_t(&solved);
        HyperGradient::assemble(direct, indirect, None)
    }
}

/// Deterministic random SPD instance for oracle sweeps: `A = M M' + n*I`,
/// random `B` and upper-level forms.
pub fn random_instance(n: usize, m: usize, rng: &mut crate::rng::SeedStream) -> QuadraticBilevel {
    let mut rand_mat = |rows: usize, cols: usize| -> Mat {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
        Mat::new(rows, cols, data).expect("sized data")
    };
    let m_raw = rand_mat(n, n);
    let mut a = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += m_raw.at(i, k) * m_raw.at(j, k);
            }
            a.data[i * n + j] = s + if i == j { n as f64 } else { 0.0 };
        }
    }
    let b = rand_mat(n, m);
    let p_raw = rand_mat(m, m);
    let mut p = Mat::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            p.data[i * m + j] = 0.5 * (p_raw.at(i, j) + p_raw.at(j, i));
        }
    }
    let q_raw = rand_mat(n, n);
    let mut q = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            q.data[i * n + j] = 0.5 * (q_raw.at(i, j) + q_raw.at(j, i));
        }
    }
    let upper = QuadUpper {
        p,
        q,
        r: rand_mat(m, n),
        lin_omega: (0..m).map(|_| rng.normal()).collect(),
        lin_theta: (0..n).map(|_| rng.normal()).collect(),
    };
    QuadraticBilevel::new(a, b, upper).expect("constructed SPD")
}

// ---------------------------------------------------------------------------
// Task gradient assembly
// ---------------------------------------------------------------------------

/// One objective evaluation: loss breakdown plus flat gradients with respect
/// to the fusion parameters and this task's own parameters.
#[derive(Debug, Clone)]
pub struct TaskEval {
    pub loss: LossValue,
    pub grad_omega: Vec<f64>,
    pub grad_theta: Vec<f64>,
}

/// A task exposing its upper objective (validation split) and lower
/// objective (training split) at the current parameters.
pub trait BilevelTask {
    fn task_name(&self) -> &'static str;

    /// Evaluate the upper objective and its gradients.
    fn upper(&mut self) -> Result<TaskEval>;

    /// Evaluate the lower objective and its gradients.
    fn lower(&mut self) -> Result<TaskEval>;
}

/// Hypergradient for one task plus the loss breakdowns it was built from.
#[derive(Debug, Clone)]
pub struct AssembledGradient {
    pub hyper: HyperGradient,
    pub upper: LossValue,
    pub lower: LossValue,
}

fn check_finite(task: &str, stage: &str, eval: &TaskEval) -> Result<()> {
    if let Some(part) = eval.loss.non_finite_part() {
        return Err(Error::Numeric(format!(
            "task {task}: non-finite {stage} loss part '{part}'"
        )));
    }
    if eval.grad_omega.iter().any(|v| !v.is_finite())
        || eval.grad_theta.iter().any(|v| !v.is_finite())
    {
        return Err(Error::Numeric(format!(
            "task {task}: non-finite {stage} gradient"
        )));
    }
    Ok(())
}

/// Evaluate both objectives of a task and assemble its upper-level gradient.
/// With `indirect_enabled = false` the result is exactly the direct gradient
/// of the upper objective.
pub fn assemble_task_gradient(
    task: &mut dyn BilevelTask,
    indirect_enabled: bool,
) -> Result<AssembledGradient> {
    let up = task.upper()?;
    check_finite(task.task_name(), "upper", &up)?;
    if !indirect_enabled {
        return Ok(AssembledGradient {
            hyper: HyperGradient::direct_only(up.grad_omega)?,
            upper: up.loss,
            lower: LossValue::new(0.0, vec![]),
        });
    }
    let low = task.lower()?;
    check_finite(task.task_name(), "lower", &low)?;
    let hyper = gn_approx_hypergrad(
        &up.grad_theta,
        &low.grad_theta,
        &low.grad_omega,
        &up.grad_omega,
    )?;
    Ok(AssembledGradient { hyper, upper: up.loss, lower: low.loss })
}
