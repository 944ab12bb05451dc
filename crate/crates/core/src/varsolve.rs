//! Variational reconstruction with a prior frame: Landweber-type gradient
//! iteration for the quadratic penalty, FISTA for the shifted L¹ penalty, and
//! primal-dual hybrid gradient for L¹ plus anisotropic total variation.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{norm, operator_norm, LinearOperator};

/// Safety factor on power-iteration norm estimates used for step sizes.
pub const NORM_SAFETY: f64 = 1.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIter,
    DiscrepancyIncrease,
    Tolerance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// `‖A x_k − ψ‖₂` for `k = 0..=iterations`.
    pub discrepancy: Vec<f64>,
    /// Objective after each iteration (index 0 is the start point).
    pub objective_history: Vec<f64>,
    pub objective: f64,
    pub stop: StopReason,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterOptions {
    pub max_iter: usize,
    /// Precomputed `‖AᵀA‖`; estimated by power iteration when absent.
    pub op_norm: Option<f64>,
    /// Overrides the default step size.
    pub step: Option<f64>,
}

impl IterOptions {
    pub fn l2() -> Self {
        IterOptions {
            max_iter: 19,
            op_norm: None,
            step: None,
        }
    }

    pub fn fista() -> Self {
        IterOptions {
            max_iter: 200,
            ..Self::l2()
        }
    }

    pub fn pdhg() -> Self {
        IterOptions {
            max_iter: 500,
            ..Self::l2()
        }
    }

    pub fn with_norm(mut self, n: f64) -> Self {
        self.op_norm = Some(n);
        self
    }

    pub fn with_max_iter(mut self, n: usize) -> Self {
        self.max_iter = n;
        self
    }
}

pub fn soft_threshold(v: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda >= 0.0) {
        return Err(CoreError::input("soft_threshold", format!("threshold {lambda} < 0")));
    }
    Ok(v.iter().map(|&x| soft(x, lambda)).collect())
}

#[inline]
fn soft(x: f64, lambda: f64) -> f64 {
    x.signum() * (x.abs() - lambda).max(0.0)
}

/// Proximal map of `λ‖· − a‖₁`.
pub fn prox_shifted_l1(v: &[f64], lambda: f64, a: &[f64]) -> Result<Vec<f64>> {
    if v.len() != a.len() {
        return Err(CoreError::input("prox_shifted_l1", format!("lengths {} and {}", v.len(), a.len())));
    }
    if !(lambda >= 0.0) {
        return Err(CoreError::input("prox_shifted_l1", format!("threshold {lambda} < 0")));
    }
    if lambda == 0.0 {
        return Ok(v.to_vec());
    }
    Ok(v.iter().zip(a).map(|(&x, &p)| p + soft(x - p, lambda)).collect())
}

/// Next term of the accelerated momentum sequence `h_{k+1} = (1 + √(1 + 4h_k²)) / 2`.
pub fn momentum_next(h: f64) -> f64 {
    (1.0 + (1.0 + 4.0 * h * h).sqrt()) / 2.0
}

fn check_problem(op: &dyn LinearOperator, psi: &[f64], prior: &[f64], x0: &[f64], alpha: f64, name: &'static str) -> Result<()> {
    if !(alpha >= 0.0) {
        return Err(CoreError::input(name, format!("regularisation weight {alpha} < 0")));
    }
    if psi.len() != op.range_len() {
        return Err(CoreError::input(name, format!("data length {} but operator range {}", psi.len(), op.range_len())));
    }
    let n = op.domain_len();
    if prior.len() != n || x0.len() != n {
        return Err(CoreError::input(name, format!("prior {} / start {} for image length {n}", prior.len(), x0.len())));
    }
    if psi.iter().chain(prior).chain(x0).any(|v| !v.is_finite()) {
        return Err(CoreError::input(name, "non-finite input"));
    }
    Ok(())
}

fn residual(op: &dyn LinearOperator, x: &[f64], psi: &[f64]) -> Vec<f64> {
    let mut r = op.apply(x);
    r.iter_mut().zip(psi).for_each(|(a, b)| *a -= b);
    r
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

fn l1_dist(x: &[f64], p: &[f64]) -> f64 {
    x.iter().zip(p).map(|(a, b)| (a - b).abs()).sum()
}

/// `½‖Ax − ψ‖² + (α/2)‖x − prior‖²`
pub fn l2_objective(op: &dyn LinearOperator, psi: &[f64], prior: &[f64], alpha: f64, x: &[f64]) -> f64 {
    let d: f64 = x.iter().zip(prior).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * sq(&residual(op, x, psi)) + 0.5 * alpha * d
}

/// `½‖Ax − ψ‖² + α‖x − prior‖₁ + β‖∇x‖₁`
pub fn l1_tv_objective(op: &dyn LinearOperator, psi: &[f64], prior: &[f64], alpha: f64, beta: f64, x: &[f64], size: usize) -> f64 {
    let tv = if beta > 0.0 { grad2d(x, size).iter().map(|g| g.abs()).sum::<f64>() } else { 0.0 };
    0.5 * sq(&residual(op, x, psi)) + alpha * l1_dist(x, prior) + beta * tv
}

/// Gradient iteration on `½‖Ax − ψ‖² + (α/2)‖x − prior‖²`, stopped before the data
/// discrepancy first increases.
///
/// The default step is `1 / (1.01 (‖AᵀA‖ + α))`, the inverse Lipschitz constant
/// of the full gradient; with `α = 0` this is the plain Landweber step.
pub fn l2_tcr(op: &dyn LinearOperator, psi: &[f64], prior: &[f64], alpha: f64, x0: &[f64], opts: &IterOptions) -> Result<(Vec<f64>, SolveReport)> {
    check_problem(op, psi, prior, x0, alpha, "l2_tcr")?;
    let tau = match opts.step {
        Some(s) => s,
        None => {
            let l = opts.op_norm.unwrap_or_else(|| operator_norm(op));
            1.0 / (NORM_SAFETY * (l + alpha))
        }
    };
    let mut x = x0.to_vec();
    let mut r = residual(op, &x, psi);
    let mut disc = vec![norm(&r)];
    let mut objs = vec![l2_objective(op, psi, prior, alpha, &x)];
    let mut stop = StopReason::MaxIter;
    for _ in 0..opts.max_iter {
        let g = op.adjoint(&r);
        let next: Vec<f64> = x
            .iter()
            .zip(&g)
            .zip(prior)
            .map(|((xi, gi), pi)| xi - tau * (gi + alpha * (xi - pi)))
            .collect();
        let r_next = residual(op, &next, psi);
        let d = norm(&r_next);
        if d > *disc.last().unwrap() {
            stop = StopReason::DiscrepancyIncrease;
            break;
        }
        x = next;
        r = r_next;
        disc.push(d);
        objs.push(l2_objective(op, psi, prior, alpha, &x));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numerical {
            module: "l2_tcr",
            step: disc.len() - 1,
            msg: "iterate became non-finite".into(),
        });
    }
    Ok((
        x,
        SolveReport {
            iterations: disc.len() - 1,
            objective: *objs.last().unwrap(),
            discrepancy: disc,
            objective_history: objs,
            stop,
        },
    ))
}

/// Plain Landweber from zero with the discrepancy-increase stop.
pub fn landweber(op: &dyn LinearOperator, psi: &[f64], opts: &IterOptions) -> Result<(Vec<f64>, SolveReport)> {
    let zero = vec![0.0; op.domain_len()];
    l2_tcr(op, psi, &zero, 0.0, &zero, opts)
}

/// FISTA on `½‖Ax − ψ‖² + α‖x − prior‖₁` with a fixed iteration count.
pub fn l1_tcr_fista(op: &dyn LinearOperator, psi: &[f64], prior: &[f64], alpha: f64, x0: &[f64], opts: &IterOptions) -> Result<(Vec<f64>, SolveReport)> {
    check_problem(op, psi, prior, x0, alpha, "l1_tcr_fista")?;
    let step = match opts.step {
        Some(s) => s,
        None => 1.0 / (NORM_SAFETY * opts.op_norm.unwrap_or_else(|| operator_norm(op))),
    };
    let objective = |x: &[f64], r: &[f64]| 0.5 * sq(r) + alpha * l1_dist(x, prior);
    let mut x = x0.to_vec();
    let mut y = x.clone();
    let mut h = 1.0;
    let r0 = residual(op, &x, psi);
    let mut disc = vec![norm(&r0)];
    let mut objs = vec![objective(&x, &r0)];
    for _ in 0..opts.max_iter {
        let g = op.adjoint(&residual(op, &y, psi));
        let v: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        let next = prox_shifted_l1(&v, step * alpha, prior)?;
        let h_next = momentum_next(h);
        let w = (h - 1.0) / h_next;
        y = next.iter().zip(&x).map(|(n, o)| n + w * (n - o)).collect();
        x = next;
        h = h_next;
        let r = residual(op, &x, psi);
        disc.push(norm(&r));
        objs.push(objective(&x, &r));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numerical {
            module: "l1_tcr_fista",
            step: opts.max_iter,
            msg: "iterate became non-finite".into(),
        });
    }
    Ok((
        x,
        SolveReport {
            iterations: opts.max_iter,
            objective: *objs.last().unwrap(),
            discrepancy: disc,
            objective_history: objs,
            stop: StopReason::MaxIter,
        },
    ))
}

/// Forward differences with replicate boundary: `[∂x; ∂y]`, each `size²` long.
/// `∂x` runs along columns, `∂y` along rows.
pub fn grad2d(img: &[f64], size: usize) -> Vec<f64> {
    let n = size * size;
    let mut g = vec![0.0; 2 * n];
    for i in 0..size {
        for j in 0..size {
            let p = i * size + j;
            if j + 1 < size {
                g[p] = img[p + 1] - img[p];
            }
            if i + 1 < size {
                g[n + p] = img[p + size] - img[p];
            }
        }
    }
    g
}

/// Negative adjoint of [`grad2d`].
pub fn div2d(field: &[f64], size: usize) -> Vec<f64> {
    let n = size * size;
    let (px, py) = field.split_at(n);
    let mut d = vec![0.0; n];
    for i in 0..size {
        for j in 0..size {
            let p = i * size + j;
            let mut v = 0.0;
            if j + 1 < size {
                v += px[p];
            }
            if j > 0 {
                v -= px[p - 1];
            }
            if i + 1 < size {
                v += py[p];
            }
            if i > 0 {
                v -= py[p - size];
            }
            d[p] = v;
        }
    }
    d
}

/// `x ↦ (A x, ∇x)`, the coupling operator of the TV solver.
pub struct StackedGradient<'a> {
    pub op: &'a dyn LinearOperator,
    pub size: usize,
}

impl LinearOperator for StackedGradient<'_> {
    fn domain_len(&self) -> usize {
        self.size * self.size
    }
    fn range_len(&self) -> usize {
        self.op.range_len() + 2 * self.size * self.size
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.op.apply(x);
        out.extend(grad2d(x, self.size));
        out
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        let (ya, yg) = y.split_at(self.op.range_len());
        let mut out = self.op.adjoint(ya);
        out.iter_mut().zip(div2d(yg, self.size)).for_each(|(o, d)| *o -= d);
        out
    }
}

/// Primal-dual hybrid gradient for `½‖Ax − ψ‖² + α‖x − prior‖₁ + β‖∇x‖₁`.
///
/// `op_norm` in `opts`, when given, must be `‖AᵀA + ∇ᵀ∇‖`.
pub fn l1_tv_tcr_pdhg(
    op: &dyn LinearOperator,
    psi: &[f64],
    prior: &[f64],
    alpha: f64,
    beta: f64,
    x0: &[f64],
    opts: &IterOptions,
) -> Result<(Vec<f64>, SolveReport)> {
    check_problem(op, psi, prior, x0, alpha, "l1_tv_tcr_pdhg")?;
    if !(beta >= 0.0) {
        return Err(CoreError::input("l1_tv_tcr_pdhg", format!("TV weight {beta} < 0")));
    }
    let n = x0.len();
    let size = (n as f64).sqrt().round() as usize;
    if size * size != n {
        return Err(CoreError::input("l1_tv_tcr_pdhg", format!("image length {n} is not square")));
    }
    let k = StackedGradient { op, size };
    let l = opts.op_norm.unwrap_or_else(|| operator_norm(&k)).sqrt();
    let (tau, sigma) = match opts.step {
        Some(s) => (s, s),
        None => (0.99 / l, 0.99 / l),
    };
    let m = op.range_len();
    let mut x = x0.to_vec();
    let mut xbar = x.clone();
    let mut y1 = vec![0.0; m];
    let mut y2 = vec![0.0; 2 * n];
    let mut disc = vec![norm(&residual(op, &x, psi))];
    let mut objs = vec![l1_tv_objective(op, psi, prior, alpha, beta, &x, size)];
    for _ in 0..opts.max_iter {
        let ax = op.apply(&xbar);
        for ((y, a), p) in y1.iter_mut().zip(&ax).zip(psi) {
            *y = (*y + sigma * (a - p)) / (1.0 + sigma);
        }
        let gx = grad2d(&xbar, size);
        for (y, g) in y2.iter_mut().zip(&gx) {
            *y = (*y + sigma * g).clamp(-beta, beta);
        }
        let aty = op.adjoint(&y1);
        let dv = div2d(&y2, size);
        let v: Vec<f64> = x.iter().zip(aty.iter().zip(&dv)).map(|(xi, (a, d))| xi - tau * (a - d)).collect();
        let next = prox_shifted_l1(&v, tau * alpha, prior)?;
        xbar = next.iter().zip(&x).map(|(a, b)| 2.0 * a - b).collect();
        x = next;
        disc.push(norm(&residual(op, &x, psi)));
        objs.push(l1_tv_objective(op, psi, prior, alpha, beta, &x, size));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numerical {
            module: "l1_tv_tcr_pdhg",
            step: opts.max_iter,
            msg: "iterate became non-finite".into(),
        });
    }
    Ok((
        x,
        SolveReport {
            iterations: opts.max_iter,
            objective: *objs.last().unwrap(),
            discrepancy: disc,
            objective_history: objs,
            stop: StopReason::MaxIter,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(&[0.0, 2.0, -0.3], 0.5).unwrap(), vec![0.0, 1.5, 0.0]);
        assert!(soft_threshold(&[1.0], -0.1).is_err());
        assert_eq!(prox_shifted_l1(&[3.0], 0.5, &[1.0]).unwrap(), vec![2.5]);
        assert!((momentum_next(1.0) - 1.618033988749895).abs() < 1e-15);
    }
}
