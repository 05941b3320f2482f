//! Quasi log-likelihood `ℓn(θ) = Σ_α [Σ_{events} log λ^α(t-, θ) - ∫_{T0}^{T1} n λ^α(t, θ) dt]`,
//! its derivatives and the local random-field quantities built on it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::engine::{self, EvalOut};
use crate::model::ModelSpec;
use crate::simulate::PointPath;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    Value = 0,
    Gradient = 1,
    Hessian = 2,
}

/// Value, gradient and Hessian of `ℓn` at one parameter point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodEval {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Vec<Vec<f64>>,
    pub feasible: bool,
}

impl LikelihoodEval {
    /// `Γn(θ) = -n⁻¹ ∂²ℓn(θ)`.
    pub fn observed_information(&self, n: f64) -> Vec<Vec<f64>> {
        self.hessian
            .iter()
            .map(|r| r.iter().map(|x| -x / n).collect())
            .collect()
    }
}

fn run(model: &ModelSpec, theta: &[f64], path: &PointPath, order: Order, mask: Option<&[bool]>) -> Result<EvalOut> {
    model.check_shapes()?;
    model.check_theta(theta)?;
    engine::check_path(model, path)?;
    engine::sweep(model, theta, path, order as u8, mask, &[], true)
}

pub fn evaluate(model: &ModelSpec, theta: &[f64], path: &PointPath, order: Order) -> Result<LikelihoodEval> {
    let out = run(model, theta, path, order, None)?;
    let p = model.p();
    let hessian = if order >= Order::Hessian {
        (0..p)
            .map(|i| (0..p).map(|j| 0.5 * (out.hess[i * p + j] + out.hess[j * p + i])).collect())
            .collect()
    } else {
        Vec::new()
    };
    Ok(LikelihoodEval {
        value: out.value,
        gradient: if order >= Order::Gradient { out.grad } else { Vec::new() },
        hessian,
        feasible: out.feasible,
    })
}

pub fn quasi_loglik(model: &ModelSpec, theta: &[f64], path: &PointPath) -> Result<f64> {
    Ok(run(model, theta, path, Order::Value, None)?.value)
}

/// `ℓn` restricted to the components selected by `mask`.
pub fn quasi_loglik_masked(model: &ModelSpec, theta: &[f64], path: &PointPath, mask: &[bool]) -> Result<f64> {
    if mask.len() != model.d {
        return Err(Error::ModelDefinition(format!("mask has length {} but d = {}", mask.len(), model.d)));
    }
    Ok(run(model, theta, path, Order::Value, Some(mask))?.value)
}

/// Per-component contributions to `ℓn`.
pub fn component_logliks(model: &ModelSpec, theta: &[f64], path: &PointPath) -> Result<Vec<f64>> {
    Ok(run(model, theta, path, Order::Value, None)?.per_component)
}

fn infeasible(theta: &[f64]) -> Error {
    Error::Infeasible(format!("λ vanishes at an event for θ = {theta:?}"))
}

pub fn score(model: &ModelSpec, theta: &[f64], path: &PointPath) -> Result<Vec<f64>> {
    let e = evaluate(model, theta, path, Order::Gradient)?;
    if !e.feasible {
        return Err(infeasible(theta));
    }
    Ok(e.gradient)
}

pub fn hessian(model: &ModelSpec, theta: &[f64], path: &PointPath) -> Result<Vec<Vec<f64>>> {
    let e = evaluate(model, theta, path, Order::Hessian)?;
    if !e.feasible {
        return Err(infeasible(theta));
    }
    Ok(e.hessian)
}

/// `Γn(θ) = -n⁻¹ ∂²ℓn(θ)`.
pub fn observed_information(model: &ModelSpec, theta: &[f64], path: &PointPath) -> Result<Vec<Vec<f64>>> {
    Ok(hessian(model, theta, path)?
        .into_iter()
        .map(|r| r.into_iter().map(|x| -x / model.n_f64()).collect())
        .collect())
}

/// A point `u` of the local field `ℤn(u) = exp(ℓn(θ* + u/√n) - ℓn(θ*))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomFieldPoint {
    pub u: Vec<f64>,
    pub z: f64,
    pub log_z: f64,
}

/// `θ* + u/√n`, checked against the closed box.
pub fn local_theta(model: &ModelSpec, theta_star: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if u.len() != theta_star.len() {
        return Err(Error::ModelDefinition("u and θ* differ in length".into()));
    }
    let s = model.n_f64().sqrt();
    let th: Vec<f64> = theta_star.iter().zip(u).map(|(t, x)| t + x / s).collect();
    if !model.param_space.contains_closed(&th) {
        return Err(Error::Domain(format!("u = {u:?} leaves the local parameter set")));
    }
    Ok(th)
}

pub fn random_field_z(model: &ModelSpec, theta_star: &[f64], u: &[f64], path: &PointPath) -> Result<RandomFieldPoint> {
    let l0 = quasi_loglik(model, theta_star, path)?;
    random_field_z_with_base(model, theta_star, u, path, l0)
}

/// As [`random_field_z`] with `ℓn(θ*)` supplied by the caller.
pub fn random_field_z_with_base(
    model: &ModelSpec,
    theta_star: &[f64],
    u: &[f64],
    path: &PointPath,
    l_star: f64,
) -> Result<RandomFieldPoint> {
    let th = local_theta(model, theta_star, u)?;
    let l = quasi_loglik(model, &th, path)?;
    let log_z = if l == f64::NEG_INFINITY { f64::NEG_INFINITY } else { l - l_star };
    Ok(RandomFieldPoint { u: u.to_vec(), z: log_z.exp(), log_z })
}

/// `Δn = n^{-1/2} ∂ℓn(θ*)`.
pub fn delta_n(model: &ModelSpec, theta_star: &[f64], path: &PointPath) -> Result<Vec<f64>> {
    let s = model.n_f64().sqrt();
    Ok(score(model, theta_star, path)?.into_iter().map(|x| x / s).collect())
}

/// `rn(u) = log ℤn(u) - Δn[u] + ½ Γ[u⊗²]`.
pub fn lamn_residual(
    model: &ModelSpec,
    theta_star: &[f64],
    u: &[f64],
    path: &PointPath,
    gamma: &[Vec<f64>],
) -> Result<f64> {
    let p = model.p();
    if gamma.len() != p || gamma.iter().any(|r| r.len() != p) {
        return Err(Error::ModelDefinition(format!("Γ must be {p} x {p}")));
    }
    let z = random_field_z(model, theta_star, u, path)?;
    let delta = delta_n(model, theta_star, path)?;
    let du: f64 = delta.iter().zip(u).map(|(a, b)| a * b).sum();
    let mut q = 0.0;
    for i in 0..p {
        for j in 0..p {
            q += u[i] * gamma[i][j] * u[j];
        }
    }
    Ok(z.log_z - du + 0.5 * q)
}

/// `𝕐n(θ) = n⁻¹ (ℓn(θ) - ℓn(θ*))`.
pub fn y_field(model: &ModelSpec, path: &PointPath, theta: &[f64], theta_star: &[f64]) -> Result<f64> {
    let l = quasi_loglik(model, theta, path)?;
    if l == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let l0 = quasi_loglik(model, theta_star, path)?;
    Ok((l - l0) / model.n_f64())
}

/// Central finite-difference gradient of `ℓn`, with step `rel_step · max(1, |θ_i|)`.
pub fn fd_gradient(model: &ModelSpec, theta: &[f64], path: &PointPath, rel_step: f64) -> Result<Vec<f64>> {
    let mut g = vec![0.0; theta.len()];
    let mut th = theta.to_vec();
    for i in 0..theta.len() {
        let h = rel_step * theta[i].abs().max(1.0);
        th[i] = theta[i] + h;
        let up = quasi_loglik(model, &th, path)?;
        th[i] = theta[i] - h;
        let dn = quasi_loglik(model, &th, path)?;
        th[i] = theta[i];
        g[i] = (up - dn) / (2.0 * h);
    }
    Ok(g)
}
