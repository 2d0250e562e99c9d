//! Matrix-free conjugate gradients for (μ + ∇*A∇) u = g on the torus,
//! with a residual certificate, plus a dense direct oracle for small
//! instances.
//!
//! The μ = 0 kernel (constants) is handled by projecting the right-hand
//! side and the iterates onto the mean-zero subspace, where the operator
//! is positive definite. The default preconditioner inverts the
//! constant-coefficient surrogate μ + ā ∇*∇ exactly by FFT, with ā the
//! geometric mean of the conductance bounds.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::environment::Environment;
use crate::error::{Error, Result};
use crate::fft::TorusFft;
use crate::lattice::{EdgeId, VertexField};
use crate::util::{dot, norm2};

/// Preconditioner choice for the CG iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    None,
    Jacobi,
    #[default]
    ConstantCoefficientSpectral,
}

/// Iterative solver configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Relative residual target, ||(μ + ∇*A∇)u - g|| <= rel_tol ||g||.
    pub rel_tol: f64,
    pub max_iter: usize,
    pub preconditioner: Preconditioner,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { rel_tol: 1e-10, max_iter: 10_000, preconditioner: Preconditioner::default() }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) {
            return Err(Error::Config(format!("rel_tol must be > 0, got {}", self.rel_tol)));
        }
        if self.max_iter < 1 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// Certificate attached to every solve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// True relative residual of the returned solution.
    pub final_rel_residual: f64,
    pub converged: bool,
}

enum Precond {
    None,
    Jacobi(Vec<f64>),
    Spectral { fft: TorusFft, mu: f64, abar: f64 },
}

impl Precond {
    fn build(env: &Environment, mu: f64, kind: Preconditioner) -> Precond {
        match kind {
            Preconditioner::None => Precond::None,
            Preconditioner::Jacobi => {
                let shape = env.shape;
                let d = shape.d;
                let mut diag = vec![mu; shape.n_vertices()];
                for (v, slot) in diag.iter_mut().enumerate() {
                    for i in 0..d {
                        *slot += env.a.values[v * d + i] + env.a.values[shape.down(v, i) * d + i];
                    }
                }
                Precond::Jacobi(diag)
            }
            Preconditioner::ConstantCoefficientSpectral => {
                let abar = (env.law.lambda_min * env.law.lambda_max).sqrt();
                Precond::Spectral { fft: TorusFft::new(env.shape), mu, abar }
            }
        }
    }

    fn apply(&self, r: &VertexField) -> VertexField {
        match self {
            Precond::None => r.clone(),
            Precond::Jacobi(diag) => {
                let mut z = r.clone();
                for (zi, di) in z.values.iter_mut().zip(diag) {
                    *zi /= di;
                }
                z
            }
            Precond::Spectral { fft, mu, abar } => {
                // exact inverse of the surrogate; cannot fail on matching shapes
                fft.solve_constant_coefficient(*mu, *abar, r).expect("spectral preconditioner")
            }
        }
    }
}

/// Solve (μ + ∇*A∇) u = g to the configured relative residual.
///
/// For μ = 0 the right-hand side must have mean zero within
/// 1e-12 ||g|| (torus compatibility) and the solution is gauged to
/// mean(u) = 0 by explicit projection.
pub fn solve(
    env: &Environment,
    mu: f64,
    g: &VertexField,
    cfg: &SolverConfig,
) -> Result<(VertexField, SolveReport)> {
    cfg.validate()?;
    if g.shape != env.shape {
        return Err(Error::Precondition("right-hand side on a different lattice".into()));
    }
    if mu < 0.0 {
        return Err(Error::Precondition(format!("mu must be >= 0, got {mu}")));
    }
    let g_norm = g.norm();
    if g_norm == 0.0 {
        let report = SolveReport { iterations: 0, final_rel_residual: 0.0, converged: true };
        return Ok((VertexField::zeros(env.shape), report));
    }

    let mut rhs = g.clone();
    if mu == 0.0 {
        let mean = rhs.mean();
        if mean.abs() > 1e-12 * g_norm {
            return Err(Error::Precondition(format!(
                "mu = 0 requires mean-zero right-hand side; |mean| = {:.3e} > 1e-12 ||g|| = {:.3e}",
                mean.abs(),
                1e-12 * g_norm
            )));
        }
        rhs.project_mean_zero();
    }

    let precond = Precond::build(env, mu, cfg.preconditioner);
    let project = mu == 0.0;

    let mut u = VertexField::zeros(env.shape);
    let mut r = rhs.clone();
    let mut z = precond.apply(&r);
    if project {
        z.project_mean_zero();
    }
    let mut p = z.clone();
    let mut rz = dot(&r.values, &z.values);
    let mut iterations = 0usize;
    let tol_abs = cfg.rel_tol * g_norm;

    while iterations < cfg.max_iter {
        let r_norm = norm2(&r.values);
        if r_norm <= tol_abs {
            // recurrence says converged; certify with the true residual below
            break;
        }
        let ap = env.apply_operator(mu, &p);
        let pap = dot(&p.values, &ap.values);
        if pap <= 0.0 {
            // numerically singular direction; bail out and certify whatever we have
            break;
        }
        let alpha = rz / pap;
        for i in 0..u.values.len() {
            u.values[i] += alpha * p.values[i];
            r.values[i] -= alpha * ap.values[i];
        }
        z = precond.apply(&r);
        if project {
            z.project_mean_zero();
        }
        let rz_new = dot(&r.values, &z.values);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..p.values.len() {
            p.values[i] = z.values[i] + beta * p.values[i];
        }
        iterations += 1;
    }

    if project {
        u.project_mean_zero();
    }
    // residual certificate computed from scratch
    let mut residual = env.apply_operator(mu, &u);
    for (ri, gi) in residual.values.iter_mut().zip(&rhs.values) {
        *ri -= gi;
    }
    let rel = norm2(&residual.values) / g_norm;
    let report = SolveReport { iterations, final_rel_residual: rel, converged: rel <= cfg.rel_tol };
    if !report.converged {
        return Err(Error::SolverDidNotConverge { iterations, rel_residual: rel });
    }
    Ok((u, report))
}

/// Solve with the dipole right-hand side δ_head - δ_base of edge `e`,
/// returning x ↦ G(x, head) - G(x, base) for the operator μ + ∇*A∇.
///
/// The dipole is exactly mean-zero, so μ = 0 is always admissible; the
/// result carries the mean-zero gauge in that case.
pub fn dipole_solve(
    env: &Environment,
    e: EdgeId,
    mu: f64,
    cfg: &SolverConfig,
) -> Result<VertexField> {
    let mut g = VertexField::zeros(env.shape);
    g.values[e.head(&env.shape)] += 1.0;
    g.values[e.base] -= 1.0;
    let (u, _) = solve(env, mu, &g, cfg)?;
    Ok(u)
}

/// Maximum vertex count accepted by the dense oracle.
pub const DENSE_ORACLE_MAX_VERTICES: usize = 4096;

/// Assemble the dense matrix of μ + ∇*A∇ (test oracle and direct solver).
pub fn dense_operator_matrix(env: &Environment, mu: f64) -> DMatrix<f64> {
    let shape = env.shape;
    let n = shape.n_vertices();
    let d = shape.d;
    let mut m = DMatrix::<f64>::zeros(n, n);
    for v in 0..n {
        m[(v, v)] += mu;
        for i in 0..d {
            let w = shape.up(v, i);
            let ae = env.a.values[v * d + i];
            m[(v, v)] += ae;
            m[(w, w)] += ae;
            m[(v, w)] -= ae;
            m[(w, v)] -= ae;
        }
    }
    m
}

/// Direct dense solve. For μ = 0 the mean-zero pseudo-inverse is used:
/// the system is augmented with the rank-one term P0 = (1/n) 1 1ᵀ, which
/// is exact on mean-zero data, and the result is projected.
pub fn dense_oracle_solve(env: &Environment, mu: f64, g: &VertexField) -> Result<VertexField> {
    let n = env.shape.n_vertices();
    if n > DENSE_ORACLE_MAX_VERTICES {
        return Err(Error::SizeGuard(format!(
            "dense oracle limited to {DENSE_ORACLE_MAX_VERTICES} vertices, lattice has {n}"
        )));
    }
    if g.shape != env.shape {
        return Err(Error::Precondition("right-hand side on a different lattice".into()));
    }
    let g_norm = g.norm();
    let mut rhs = nalgebra::DVector::from_column_slice(&g.values);
    let mut m = dense_operator_matrix(env, mu);
    if mu == 0.0 {
        if g_norm > 0.0 {
            let mean = g.mean();
            if mean.abs() > 1e-12 * g_norm {
                return Err(Error::Precondition(
                    "mu = 0 requires mean-zero right-hand side".into(),
                ));
            }
            for v in rhs.iter_mut() {
                *v -= mean;
            }
        }
        let c = 1.0 / n as f64;
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] += c;
            }
        }
    }
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Precondition("dense operator is not positive definite".into()))?;
    let x = chol.solve(&rhs);
    let mut u = VertexField::from_values(env.shape, x.as_slice().to_vec())?;
    if mu == 0.0 {
        u.project_mean_zero();
    }
    Ok(u)
}
