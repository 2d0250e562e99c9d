//! The periodic corrector and the effective conductivity matrix.
//!
//! For a direction ξ the corrector solves (μ + ∇*A∇) φ = -∇*(A ξ̂) with
//! ξ̂ the constant edge lift of ξ; with μ = 0 and the mean-zero gauge this
//! is the periodic cell problem. The effective matrix replaces the
//! ensemble average by the spatial edge average of the corrected energy,
//!
//!   A_h[j,k] = L^{-d} Σ_e (e_j + ∇φ^{(j)})(e) a(e) (e_k + ∇φ^{(k)})(e),
//!
//! with replica aggregation recovering error bars.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{sample_environment, ConductanceLaw, Environment, SeedSpec};
use crate::error::{Error, Result};
use crate::lattice::{divergence, gradient, lift_vector, EdgeField, LatticeShape, VertexField};
use crate::solver::{solve, SolveReport, SolverConfig};
use crate::util::norm2;

/// A solved corrector with its residual certificate.
#[derive(Debug, Clone)]
pub struct CorrectorSolution {
    pub xi: Vec<f64>,
    pub mu: f64,
    pub phi: VertexField,
    /// ||μφ + ∇*A(ξ̂ + ∇φ)|| / ||∇*(A ξ̂)||, zero for a zero right-hand side.
    pub residual: f64,
    pub env_seed: SeedSpec,
    pub solve_report: SolveReport,
}

/// Manifest written next to a dumped corrector field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectorManifest {
    pub xi: Vec<f64>,
    pub mu: f64,
    pub residual: f64,
    pub seed: SeedSpec,
    pub solve_report: SolveReport,
}

impl CorrectorSolution {
    pub fn manifest(&self) -> CorrectorManifest {
        CorrectorManifest {
            xi: self.xi.clone(),
            mu: self.mu,
            residual: self.residual,
            seed: self.env_seed,
            solve_report: self.solve_report,
        }
    }

    /// ∇φ + ξ̂, the corrected gradient entering currents and derivatives.
    pub fn corrected_gradient(&self, shape: LatticeShape) -> EdgeField {
        let mut g = gradient(&self.phi);
        let d = shape.d;
        for v in 0..shape.n_vertices() {
            for i in 0..d {
                g.values[v * d + i] += self.xi[i];
            }
        }
        g
    }
}

/// Solve the corrector problem for direction ξ; ξ = 0 returns φ = 0.
pub fn solve_corrector(
    env: &Environment,
    xi: &[f64],
    mu: f64,
    cfg: &SolverConfig,
) -> Result<CorrectorSolution> {
    let shape = env.shape;
    let lifted = lift_vector(shape, xi)?;
    // g = -∇*(A ξ̂)
    let mut flux = lifted.clone();
    for (f, a) in flux.values.iter_mut().zip(&env.a.values) {
        *f *= a;
    }
    let mut g = divergence(&flux);
    for v in g.values.iter_mut() {
        *v = -*v;
    }
    let g_norm = g.norm();
    if g_norm == 0.0 {
        return Ok(CorrectorSolution {
            xi: xi.to_vec(),
            mu,
            phi: VertexField::zeros(shape),
            residual: 0.0,
            env_seed: env.seed,
            solve_report: SolveReport { iterations: 0, final_rel_residual: 0.0, converged: true },
        });
    }
    let (phi, solve_report) = solve(env, mu, &g, cfg)?;
    // direct certificate: ||μφ + ∇*A(ξ̂ + ∇φ)|| / ||∇*(A ξ̂)||
    let mut corrected = gradient(&phi);
    for i in 0..corrected.values.len() {
        corrected.values[i] = (corrected.values[i] + lifted.values[i]) * env.a.values[i];
    }
    let mut res = divergence(&corrected);
    for (r, p) in res.values.iter_mut().zip(&phi.values) {
        *r += mu * p;
    }
    let residual = norm2(&res.values) / g_norm;
    Ok(CorrectorSolution { xi: xi.to_vec(), mu, phi, residual, env_seed: env.seed, solve_report })
}

/// Basis correctors φ^{(e_1)}, ..., φ^{(e_d)} on one environment.
pub fn basis_correctors(
    env: &Environment,
    mu: f64,
    cfg: &SolverConfig,
) -> Result<Vec<CorrectorSolution>> {
    (0..env.shape.d)
        .map(|j| {
            let mut xi = vec![0.0; env.shape.d];
            xi[j] = 1.0;
            solve_corrector(env, &xi, mu, cfg)
        })
        .collect()
}

/// Single-cell effective matrix from the d basis correctors.
pub fn effective_matrix(
    env: &Environment,
    correctors: &[CorrectorSolution],
) -> Result<DMatrix<f64>> {
    let shape = env.shape;
    let d = shape.d;
    if correctors.len() != d {
        return Err(Error::Precondition(format!(
            "need {d} basis correctors, got {}",
            correctors.len()
        )));
    }
    for (j, c) in correctors.iter().enumerate() {
        if c.env_seed != env.seed || c.phi.shape != shape {
            return Err(Error::Precondition(
                "corrector was computed on a different environment".into(),
            ));
        }
        for (i, &x) in c.xi.iter().enumerate() {
            let expect = if i == j { 1.0 } else { 0.0 };
            if x != expect {
                return Err(Error::Precondition(format!(
                    "corrector {j} is not for the basis direction e_{j}"
                )));
            }
        }
    }
    let grads: Vec<EdgeField> = correctors.iter().map(|c| c.corrected_gradient(shape)).collect();
    let vol = shape.n_vertices() as f64;
    let mut m = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        for k in j..d {
            let mut s = 0.0;
            for e in 0..shape.n_edges() {
                s += grads[j].values[e] * env.a.values[e] * grads[k].values[e];
            }
            let v = s / vol;
            m[(j, k)] = v;
            m[(k, j)] = v;
        }
    }
    Ok(m)
}

/// Monte Carlo aggregate of per-replica effective matrices.
#[derive(Debug, Clone)]
pub struct EffectiveMatrix {
    pub mean: DMatrix<f64>,
    /// Per-entry standard error of the mean.
    pub stderr: DMatrix<f64>,
    pub n_replicas: usize,
}

/// Estimate A_h over replicas `0..n_replicas` of `master_seed`.
pub fn ensemble_effective_matrix(
    shape: LatticeShape,
    law: ConductanceLaw,
    master_seed: u64,
    n_replicas: usize,
    mu: f64,
    cfg: &SolverConfig,
) -> Result<EffectiveMatrix> {
    if n_replicas < 2 {
        return Err(Error::Precondition("ensemble needs at least 2 replicas".into()));
    }
    let per_replica: Vec<Result<DMatrix<f64>>> = (0..n_replicas)
        .into_par_iter()
        .map(|r| {
            let env = sample_environment(shape, law, SeedSpec::new(master_seed, r as u32));
            let basis = basis_correctors(&env, mu, cfg)?;
            effective_matrix(&env, &basis)
        })
        .collect();
    let mut mats = Vec::with_capacity(n_replicas);
    for m in per_replica {
        mats.push(m?);
    }
    let d = shape.d;
    let mut mean = DMatrix::<f64>::zeros(d, d);
    for m in &mats {
        mean += m;
    }
    mean /= n_replicas as f64;
    let mut var = DMatrix::<f64>::zeros(d, d);
    for m in &mats {
        let dm = m - &mean;
        var += dm.component_mul(&dm);
    }
    let stderr = (var / ((n_replicas - 1) as f64 * n_replicas as f64)).map(f64::sqrt);
    Ok(EffectiveMatrix { mean, stderr, n_replicas })
}
