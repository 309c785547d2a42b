//! Independent double-precision checks: finite-difference Hessians, Taylor
//! predictions, exhaustive candidate search, and the literal Jacobian form of
//! the unit objective.

mod hessian;
pub mod net64;
mod unit;

pub use hessian::{
    full_hessian, hessian_blocks, hessian_fd, taylor_curve, tridiagonal_mass, HessianBlocks, Loss64, LossNet, MassRow,
    Matrix, TaylorPoint, DENSE_BUDGET,
};
pub use unit::{brute_force_unit, jacobian_objective, objective64, relaxed_objective64, BruteForce, BRUTE_FORCE_MAX};

use crate::error::{dim_err, Result};

/// Relative finite-difference step.
pub const FD_REL_STEP: f64 = 1e-3;

pub fn fd_step(w: f64) -> f64 {
    FD_REL_STEP * w.abs().max(1.0)
}

/// `Δwᵀ H Δw`.
pub fn quadratic_form(dw: &[f64], h: &Matrix) -> Result<f64> {
    if h.rows != dw.len() || h.cols != dw.len() {
        return Err(dim_err(
            "quadratic_form",
            format!("vector of {} vs matrix {}×{}", dw.len(), h.rows, h.cols),
        ));
    }
    Ok((0..h.rows)
        .map(|i| dw[i] * (0..h.cols).map(|j| h.get(i, j) * dw[j]).sum::<f64>())
        .sum())
}

/// `Δwᵀg + ½ ΔwᵀHΔw`.
pub fn taylor_increase(dw: &[f64], g: &[f64], h: &Matrix) -> Result<f64> {
    if g.len() != dw.len() {
        return Err(dim_err("taylor_increase", format!("Δw has {} entries, g has {}", dw.len(), g.len())));
    }
    let first: f64 = dw.iter().zip(g).map(|(a, b)| a * b).sum();
    Ok(first + 0.5 * quadratic_form(dw, h)?)
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|j| {
            let h = fd_step(x[j]);
            p[j] = x[j] + h;
            let up = f(&p);
            p[j] = x[j] - h;
            let down = f(&p);
            p[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise `|a − b| / max(|b|, 1e-3·‖b‖∞)`; exact zeros on both
/// sides count as agreement.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let inf = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * inf;
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).abs();
            if d == 0.0 {
                0.0
            } else {
                d / y.abs().max(floor).max(f64::MIN_POSITIVE)
            }
        })
        .fold(0.0, f64::max)
}
