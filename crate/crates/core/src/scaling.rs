//! The rescaled corrector field Φ_ε(f), the homogenized Green function,
//! the limit covariance kernel, the limit variance σ²(f), and the fit of
//! the covariance matrix Q from measured correlations.
//!
//! Conventions:
//!   Φ_ε(f)   = ε^{d/2+1} Σ_x f(εx) φ(x), summed over the centered
//!              fundamental domain of the torus;
//!   f_λ(x)   = λ^{-d} f(x/λ);
//!   𝒢(x)     = Γ(d/2-1) / (4 π^{d/2} √det A) (x·A⁻¹x)^{(2-d)/2};
//!   𝒦(x)     = (2π)^{-d} ∫ e^{ip·x} (p·Qp)/(p·A p)² dp, homogeneous of
//!              degree 2-d (see `kernel_k` for the evaluation);
//!   σ²(f)    = (2π)^{-d} ∫ |f̂(p)|² (p·Qp)/(p·A p)² dp by quadrature.

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::corrector::CorrectorSolution;
use crate::environment::SeedSpec;
use crate::error::{Error, Result};
use crate::fft::TorusFft;
use crate::lattice::{LatticeShape, VertexField};

const FOUR_PI: f64 = 4.0 * std::f64::consts::PI;

// ---------------------------------------------------------------------------
// Test functions
// ---------------------------------------------------------------------------

/// Smooth compactly supported test function families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunctionKind {
    /// Radial bump exp(-1/(1-|x|²)) on |x| < 1, normalized to ∫f = 1.
    MollifierBump,
    /// Product of per-axis bumps, squeezed so the support stays inside
    /// the unit ball; normalized to ∫f = 1.
    ProductBump,
}

/// A normalized test function on R^d, vanishing outside the unit ball
/// around `center`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub kind: TestFunctionKind,
    pub d: usize,
    /// Support radius; fixed to 1 (the admissibility guards assume it).
    pub support_radius: f64,
    pub center: Vec<f64>,
    norm: f64,
}

/// Serializable descriptor (the normalization constant is derived).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunctionDesc {
    pub kind: TestFunctionKind,
    pub d: usize,
    pub support_radius: f64,
    pub center: Vec<f64>,
}

fn bump1(t: f64) -> f64 {
    if t.abs() < 1.0 {
        (-1.0 / (1.0 - t * t)).exp()
    } else {
        0.0
    }
}

/// Surface area of the unit sphere S^{d-1}.
fn sphere_area(d: usize) -> f64 {
    2.0 * std::f64::consts::PI.powf(d as f64 / 2.0)
        / statrs::function::gamma::gamma(d as f64 / 2.0)
}

impl TestFunction {
    pub fn new(kind: TestFunctionKind, d: usize) -> Result<Self> {
        if d < 1 {
            return Err(Error::Config("test function dimension must be >= 1".into()));
        }
        let norm = match kind {
            TestFunctionKind::MollifierBump => {
                // ∫ = S_{d-1} ∫_0^1 r^{d-1} bump(r) dr
                let radial =
                    integrate_gl_panels(&|r: f64| r.powi(d as i32 - 1) * bump1(r), 0.0, 1.0, 4, 32);
                1.0 / (sphere_area(d) * radial)
            }
            TestFunctionKind::ProductBump => {
                // per-axis support 1/√d keeps the product inside the unit ball
                let c1 = 2.0 * integrate_gl_panels(&bump1, 0.0, 1.0, 4, 32);
                let sd = (d as f64).sqrt();
                1.0 / (c1 / sd).powi(d as i32)
            }
        };
        Ok(Self { kind, d, support_radius: 1.0, center: vec![0.0; d], norm })
    }

    pub fn desc(&self) -> TestFunctionDesc {
        TestFunctionDesc {
            kind: self.kind,
            d: self.d,
            support_radius: self.support_radius,
            center: self.center.clone(),
        }
    }

    /// f(y), normalized so that ∫ f = 1.
    pub fn eval(&self, y: &[f64]) -> f64 {
        debug_assert_eq!(y.len(), self.d);
        match self.kind {
            TestFunctionKind::MollifierBump => {
                let mut r2 = 0.0;
                for i in 0..self.d {
                    let t = y[i] - self.center[i];
                    r2 += t * t;
                }
                if r2 < 1.0 {
                    self.norm * (-1.0 / (1.0 - r2)).exp()
                } else {
                    0.0
                }
            }
            TestFunctionKind::ProductBump => {
                let sd = (self.d as f64).sqrt();
                let mut v = self.norm;
                for i in 0..self.d {
                    let t = (y[i] - self.center[i]) * sd;
                    if t.abs() >= 1.0 {
                        return 0.0;
                    }
                    v *= bump1(t);
                }
                v
            }
        }
    }

    /// f_λ(y) = λ^{-d} f(y/λ).
    pub fn eval_scaled(&self, y: &[f64], lambda: f64) -> f64 {
        let scaled: Vec<f64> = y.iter().map(|&t| t / lambda).collect();
        lambda.powi(-(self.d as i32)) * self.eval(&scaled)
    }

    /// Radial profile f(r) for the radial family.
    fn radial(&self, r: f64) -> f64 {
        debug_assert_eq!(self.kind, TestFunctionKind::MollifierBump);
        self.norm * bump1(r)
    }

    /// Fourier transform f̂(p) = ∫ f(x) e^{-ip·x} dx for radial f in d = 3:
    /// f̂(s) = 4π ∫_0^1 f(r) r² sinc(sr) dr. f̂(0) = 1 by normalization.
    pub fn fourier_radial_d3(&self, s: f64) -> f64 {
        let f = |r: f64| {
            let x = s * r;
            let sinc = if x.abs() < 1e-8 { 1.0 - x * x / 6.0 } else { x.sin() / x };
            self.radial(r) * r * r * sinc
        };
        let panels = 8 + (s.abs() / std::f64::consts::PI).ceil() as usize;
        FOUR_PI * integrate_gl_panels(&f, 0.0, 1.0, panels, 16)
    }
}

// ---------------------------------------------------------------------------
// Quadrature helpers
// ---------------------------------------------------------------------------

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration.
pub(crate) fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Composite Gauss-Legendre over equal panels.
pub(crate) fn integrate_gl_panels(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    panels: usize,
    order: usize,
) -> f64 {
    let (nodes, weights) = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        let half = 0.5 * h;
        let mut s = 0.0;
        for i in 0..order {
            s += weights[i] * f(mid + half * nodes[i]);
        }
        total += s * half;
    }
    total
}

// ---------------------------------------------------------------------------
// Φ_ε(f_λ)
// ---------------------------------------------------------------------------

/// One scalar observation of the rescaled field with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub value: f64,
    pub eps: f64,
    pub lambda: f64,
    pub f: TestFunctionDesc,
    pub seed: SeedSpec,
}

/// Smallest side length that admits (ε, λ) for support reach `r`.
pub fn minimal_side(eps: f64, lambda: f64, r: f64) -> usize {
    (2.0 * lambda * r / eps).floor() as usize + 1
}

fn check_admissible(shape: LatticeShape, f: &TestFunction, lambda: f64, eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Precondition(format!("eps must lie in (0, 1], got {eps}")));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Precondition(format!("lambda must lie in (0, 1], got {lambda}")));
    }
    let reach =
        f.support_radius + f.center.iter().fold(0.0f64, |m, &c| m.max(c.abs()));
    if !(lambda * reach / eps < shape.l as f64 / 2.0) {
        return Err(Error::Precondition(format!(
            "support of f_lambda does not fit in the centered fundamental domain: \
             lambda*reach/eps = {:.3} >= L/2 = {}; smallest admissible L is {}",
            lambda * reach / eps,
            shape.l as f64 / 2.0,
            minimal_side(eps, lambda, reach)
        )));
    }
    Ok(())
}

/// The weight x ↦ ε^{d/2+1} f_λ(εx) on the centered fundamental domain,
/// returned as a vertex field in the fixed layout. Shared by the field
/// evaluation and the adjoint solve.
pub fn weight_field(
    shape: LatticeShape,
    f: &TestFunction,
    lambda: f64,
    eps: f64,
) -> Result<VertexField> {
    if f.d != shape.d {
        return Err(Error::Precondition("test function dimension != lattice dimension".into()));
    }
    check_admissible(shape, f, lambda, eps)?;
    let d = shape.d;
    let prefactor = eps.powf(d as f64 / 2.0 + 1.0);
    let bound = (lambda * f.support_radius / eps).floor() as i64
        + (lambda * f.center.iter().fold(0.0f64, |m, &c| m.max(c.abs())) / eps).ceil() as i64;
    let mut w = VertexField::zeros(shape);
    let mut coord = vec![-bound; d];
    let mut y = vec![0.0; d];
    'outer: loop {
        for i in 0..d {
            y[i] = eps * coord[i] as f64;
        }
        let fv = f.eval_scaled(&y, lambda);
        if fv != 0.0 {
            let mut flat = 0usize;
            for &c in coord.iter() {
                let wrapped = c.rem_euclid(shape.l as i64) as usize;
                flat = flat * shape.l + wrapped;
            }
            w.values[flat] = prefactor * fv;
        }
        for i in (0..d).rev() {
            coord[i] += 1;
            if coord[i] <= bound {
                continue 'outer;
            }
            coord[i] = -bound;
        }
        break;
    }
    Ok(w)
}

/// Φ_ε(f_λ) = ε^{d/2+1} Σ_x f_λ(εx) φ(x) over the centered fundamental
/// domain. Rejects pairs (ε, λ) whose support would wrap around.
pub fn phi_eps(
    phi: &CorrectorSolution,
    f: &TestFunction,
    lambda: f64,
    eps: f64,
) -> Result<FieldSample> {
    let shape = phi.phi.shape;
    let w = weight_field(shape, f, lambda, eps)?;
    // summed in index order so the value is schedule-independent
    let mut value = 0.0;
    for (wi, pi) in w.values.iter().zip(&phi.phi.values) {
        if *wi != 0.0 {
            value += wi * pi;
        }
    }
    Ok(FieldSample { value, eps, lambda, f: f.desc(), seed: phi.env_seed })
}

// ---------------------------------------------------------------------------
// Homogenized Green function and covariance kernel
// ---------------------------------------------------------------------------

fn check_symmetric(m: &DMatrix<f64>, d: usize, name: &str) -> Result<()> {
    if m.nrows() != d || m.ncols() != d {
        return Err(Error::Precondition(format!("{name} must be {d}x{d}")));
    }
    let scale = m.amax().max(1e-300);
    for j in 0..d {
        for k in 0..d {
            if (m[(j, k)] - m[(k, j)]).abs() > 1e-10 * scale {
                return Err(Error::Precondition(format!("{name} is not symmetric")));
            }
        }
    }
    Ok(())
}

/// Green function of -∇·A∇ on R^d, d >= 3:
/// 𝒢(x) = Γ(d/2-1) / (4 π^{d/2} √det A) (x·A⁻¹x)^{(2-d)/2}.
pub fn homogenized_green(a_h: &DMatrix<f64>, x: &[f64]) -> Result<f64> {
    let d = x.len();
    if d < 3 {
        return Err(Error::Config(format!("the Green kernel requires d >= 3, got {d}")));
    }
    check_symmetric(a_h, d, "A_h")?;
    let xv = DVector::from_column_slice(x);
    if xv.norm() == 0.0 {
        return Err(Error::Singularity("Green function evaluated at x = 0".into()));
    }
    let chol = a_h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Precondition("A_h is not positive definite".into()))?;
    let det = chol.determinant();
    let quad = xv.dot(&chol.solve(&xv));
    let dd = d as f64;
    let coeff = statrs::function::gamma::gamma(dd / 2.0 - 1.0)
        / (4.0 * std::f64::consts::PI.powf(dd / 2.0) * det.sqrt());
    Ok(coeff * quad.powf((2.0 - dd) / 2.0))
}

/// The pair (A_h, Q) defining the limit covariance. A_h must be symmetric
/// positive definite and Q symmetric positive semi-definite.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    pub a_h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    inv_sqrt_a: DMatrix<f64>,
    det_a: f64,
}

impl CovarianceModel {
    pub fn new(a_h: DMatrix<f64>, q: DMatrix<f64>) -> Result<Self> {
        let d = a_h.nrows();
        check_symmetric(&a_h, d, "A_h")?;
        check_symmetric(&q, d, "Q")?;
        let eig = a_h.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&v| v <= 0.0) {
            return Err(Error::Precondition("A_h is not positive definite".into()));
        }
        let qeig = q.clone().symmetric_eigen();
        let qscale = qeig.eigenvalues.amax().max(1e-300);
        if qeig.eigenvalues.iter().any(|&v| v < -1e-9 * qscale) {
            return Err(Error::Precondition("Q is not positive semi-definite".into()));
        }
        let mut det_a = 1.0;
        for &v in eig.eigenvalues.iter() {
            det_a *= v;
        }
        let mut inv_sqrt_diag = DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            inv_sqrt_diag[(i, i)] = 1.0 / eig.eigenvalues[i].sqrt();
        }
        let inv_sqrt_a = &eig.eigenvectors * inv_sqrt_diag * eig.eigenvectors.transpose();
        Ok(Self { a_h, q, inv_sqrt_a, det_a })
    }

    pub fn d(&self) -> usize {
        self.a_h.nrows()
    }
}

/// The covariance kernel 𝒦(x) for x ≠ 0, d >= 3.
///
/// Substituting p → A^{-1/2}p in the Fourier integral reduces 𝒦 to the
/// flat kernel of M = A^{-1/2} Q A^{-1/2}, whose transform evaluates in
/// closed form:
///
///   (2π)^{-d} ∫ e^{ip·y} (p·Mp)/|p|⁴ dp
///     = Γ(d/2-1)/(8 π^{d/2}) [ tr M |y|^{2-d} + (2-d)(y·My)|y|^{-d} ],
///
/// so 𝒦(x) = det(A)^{-1/2} × (that at y = A^{-1/2}x). This reproduces
/// q·𝒢 for Q = q·A and is exactly homogeneous of degree 2-d.
pub fn kernel_k(model: &CovarianceModel, x: &[f64]) -> Result<f64> {
    let d = model.d();
    if x.len() != d {
        return Err(Error::Precondition("x has the wrong dimension".into()));
    }
    if d < 3 {
        return Err(Error::Config(format!("the covariance kernel requires d >= 3, got {d}")));
    }
    let xv = DVector::from_column_slice(x);
    if xv.norm() == 0.0 {
        return Err(Error::Singularity("covariance kernel evaluated at x = 0".into()));
    }
    let y = &model.inv_sqrt_a * &xv;
    let m = &model.inv_sqrt_a * &model.q * &model.inv_sqrt_a;
    let r = y.norm();
    let dd = d as f64;
    let c_d = statrs::function::gamma::gamma(dd / 2.0 - 1.0)
        / (8.0 * std::f64::consts::PI.powf(dd / 2.0));
    let quad = y.dot(&(&m * &y));
    Ok(c_d / model.det_a.sqrt()
        * (m.trace() * r.powf(2.0 - dd) + (2.0 - dd) * quad * r.powf(-dd)))
}

// ---------------------------------------------------------------------------
// σ²(f_λ)
// ---------------------------------------------------------------------------

/// σ²(f_λ) = (2π)^{-d} ∫ |f̂_λ(p)|² (p·Qp)/(p·A p)² dp.
///
/// The radial integral is truncated where f̂ has decayed below roundoff;
/// the truncation tail and the refinement delta between two quadrature
/// resolutions are returned as the error estimate. Implemented for d = 3.
pub fn sigma2(model: &CovarianceModel, f: &TestFunction, lambda: f64) -> Result<(f64, f64)> {
    let d = model.d();
    if d != 3 || f.d != 3 {
        return Err(Error::Config("sigma2 is implemented for d = 3".into()));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Precondition(format!("lambda must lie in (0, 1], got {lambda}")));
    }
    if model.q.amax() == 0.0 {
        return Ok((0.0, 0.0));
    }
    let g = |omega: &[f64; 3]| {
        let ov = DVector::from_column_slice(omega);
        let num = ov.dot(&(&model.q * &ov));
        let den = ov.dot(&(&model.a_h * &ov));
        num / (den * den)
    };

    match f.kind {
        TestFunctionKind::MollifierBump => {
            // radial f: the integral separates into radial × angular factors
            let ang_lo = sphere_integral(&g, 24, 48);
            let ang_hi = sphere_integral(&g, 48, 96);
            let ang_err = (ang_hi - ang_lo).abs();

            let s_cut = 60.0; // |f̂| < 1e-12 beyond this for the unit bump
            let r_max = s_cut / lambda;
            let integrand = |r: f64| {
                let v = f.fourier_radial_d3(lambda * r);
                v * v
            };
            let panels = 16 + (s_cut / std::f64::consts::PI).ceil() as usize;
            let rad_lo = integrate_gl_panels(&integrand, 0.0, r_max, panels, 16);
            let rad_hi = integrate_gl_panels(&integrand, 0.0, r_max, 2 * panels, 16);
            let rad_err = (rad_hi - rad_lo).abs();
            let tail = integrand(r_max) * r_max;

            let norm = (2.0 * std::f64::consts::PI).powi(-3);
            let value = norm * rad_hi * ang_hi;
            let err =
                norm * (rad_err * ang_hi.abs() + ang_err * rad_hi.abs() + tail * ang_hi.abs());
            finish_sigma2(value, err)
        }
        TestFunctionKind::ProductBump => {
            // f̂(p) = norm Π_i b̂(p_i/√d)/√d; tabulate the 1-d transform once
            let sd = 3.0f64.sqrt();
            let s_cut = 90.0;
            let table = BumpTransformTable::build(s_cut / sd + 1.0, 4.0e-3);
            let fhat = |p: &[f64; 3]| {
                let mut v = f.norm;
                for &pi in p {
                    v *= table.eval(pi / sd) / sd;
                }
                v
            };
            let r_max = s_cut / lambda;
            let inner = |omega: &[f64; 3], panels: usize| {
                let integrand = |r: f64| {
                    let p = [lambda * r * omega[0], lambda * r * omega[1], lambda * r * omega[2]];
                    let v = fhat(&p);
                    v * v
                };
                integrate_gl_panels(&integrand, 0.0, r_max, panels, 8)
            };
            let base_panels = 8 + (s_cut / std::f64::consts::PI).ceil() as usize;
            let combined_lo = |omega: &[f64; 3]| g(omega) * inner(omega, base_panels);
            let combined_hi = |omega: &[f64; 3]| g(omega) * inner(omega, 2 * base_panels);
            let lo = sphere_integral(&combined_lo, 16, 32);
            let hi = sphere_integral(&combined_hi, 32, 64);
            let norm = (2.0 * std::f64::consts::PI).powi(-3);
            let value = norm * hi;
            let err = norm * (hi - lo).abs();
            finish_sigma2(value, err)
        }
    }
}

fn finish_sigma2(value: f64, err: f64) -> Result<(f64, f64)> {
    if value != 0.0 && err > 1e-4 * value.abs() {
        return Err(Error::Accuracy("sigma2 quadrature did not converge".into(), err));
    }
    Ok((value, err))
}

/// The model prediction of Var[Φ_ε(f_λ)] on the torus itself: the exact
/// lattice mode sum
///
///   (1/L^d) Σ_{k≠0} |ŵ(k)|² (s·Qs)/(s·A s)²,   s_j = 2 sin(π k_j / L),
///
/// with ŵ the DFT of the weight ε^{d/2+1} f_λ(ε·). The k = 0 mode is
/// excluded, matching the mean-zero gauge of the corrector; the gap to
/// the continuum `sigma2` closes like 1/(εL), which is the dominant
/// finite-volume effect on measured variances.
pub fn sigma2_torus(
    model: &CovarianceModel,
    f: &TestFunction,
    lambda: f64,
    eps: f64,
    shape: LatticeShape,
) -> Result<f64> {
    if model.d() != shape.d {
        return Err(Error::Precondition("model dimension != lattice dimension".into()));
    }
    let w = weight_field(shape, f, lambda, eps)?;
    let fft = TorusFft::new(shape);
    let mut data: Vec<Complex64> = w.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.forward(&mut data);
    let l = shape.l;
    let d = shape.d;
    // signed symbol of the centered mode: odd under k -> -k so that the
    // off-diagonal entries of Q enter with the right parity
    let sin_table: Vec<f64> = (0..l)
        .map(|k| {
            let centered = shape.centered(k) as f64;
            2.0 * (std::f64::consts::PI * centered / l as f64).sin()
        })
        .collect();
    let mut total = 0.0;
    let mut s = DVector::<f64>::zeros(d);
    for (idx, v) in data.iter().enumerate() {
        if idx == 0 {
            continue;
        }
        let mut rest = idx;
        for axis in (0..d).rev() {
            s[axis] = sin_table[rest % l];
            rest /= l;
        }
        let num = s.dot(&(&model.q * &s));
        let den = s.dot(&(&model.a_h * &s));
        total += v.norm_sqr() * num / (den * den);
    }
    Ok(total / shape.n_vertices() as f64)
}

/// ∫_{S²} h(ω) dσ by Gauss-Legendre in cos θ × uniform in φ.
pub(crate) fn sphere_integral(h: &dyn Fn(&[f64; 3]) -> f64, n_theta: usize, n_phi: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(n_theta);
    let mut total = 0.0;
    for i in 0..n_theta {
        let ct = nodes[i];
        let st = (1.0 - ct * ct).sqrt();
        let mut ring = 0.0;
        for j in 0..n_phi {
            let phi = std::f64::consts::TAU * (j as f64 + 0.5) / n_phi as f64;
            let omega = [st * phi.cos(), st * phi.sin(), ct];
            ring += h(&omega);
        }
        total += weights[i] * ring * std::f64::consts::TAU / n_phi as f64;
    }
    total
}

/// Dense table of b̂(s) = 2 ∫_0^1 exp(-1/(1-t²)) cos(st) dt with cubic
/// interpolation; b̂ is even.
struct BumpTransformTable {
    step: f64,
    values: Vec<f64>,
}

impl BumpTransformTable {
    fn build(s_max: f64, step: f64) -> Self {
        let n = (s_max / step).ceil() as usize + 4;
        let values = (0..n)
            .map(|i| {
                let s = i as f64 * step;
                let f = |t: f64| bump1(t) * (s * t).cos();
                let panels = 4 + (s / std::f64::consts::PI).ceil() as usize;
                2.0 * integrate_gl_panels(&f, 0.0, 1.0, panels, 16)
            })
            .collect();
        Self { step, values }
    }

    fn eval(&self, s: f64) -> f64 {
        let s = s.abs();
        let u = s / self.step;
        let i = u.floor() as usize;
        if i + 2 >= self.values.len() {
            return 0.0;
        }
        let t = u - i as f64;
        let p0 = self.values[i.saturating_sub(1)];
        let p1 = self.values[i];
        let p2 = self.values[i + 1];
        let p3 = self.values[i + 2];
        0.5 * (2.0 * p1
            + (-p0 + p2) * t
            + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t
            + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t * t * t)
    }
}

// ---------------------------------------------------------------------------
// Empirical covariance and the Q fit
// ---------------------------------------------------------------------------

/// Monte Carlo estimate of the two-point function of the corrector,
/// Ĉ(x) = mean over replicas of the spatial average of φ(y)φ(y+x).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceTable {
    pub d: usize,
    pub l: usize,
    pub offsets: Vec<Vec<i64>>,
    pub c_hat: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_replicas: usize,
}

/// Streaming accumulator over replicas; keeps running sums of the full
/// autocorrelation field instead of the replica fields themselves.
pub struct CovarianceAccumulator {
    shape: LatticeShape,
    fft: TorusFft,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    n: usize,
}

impl CovarianceAccumulator {
    pub fn new(shape: LatticeShape) -> Self {
        let n = shape.n_vertices();
        Self { shape, fft: TorusFft::new(shape), sum: vec![0.0; n], sumsq: vec![0.0; n], n: 0 }
    }

    /// Add one replica's corrector field.
    pub fn add(&mut self, phi: &VertexField) {
        assert_eq!(phi.shape, self.shape);
        let ac = self.autocorrelation(phi);
        for (i, v) in ac.iter().enumerate() {
            self.sum[i] += v;
            self.sumsq[i] += v * v;
        }
        self.n += 1;
    }

    /// Merge another accumulator over the same lattice.
    pub fn merge(&mut self, other: &CovarianceAccumulator) {
        assert_eq!(self.shape, other.shape);
        for i in 0..self.sum.len() {
            self.sum[i] += other.sum[i];
            self.sumsq[i] += other.sumsq[i];
        }
        self.n += other.n;
    }

    /// ac(x) = (1/L^d) Σ_y φ(y) φ(y+x) for every offset, via FFT.
    fn autocorrelation(&self, phi: &VertexField) -> Vec<f64> {
        let mut data: Vec<Complex64> =
            phi.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.forward(&mut data);
        for v in data.iter_mut() {
            *v = Complex64::new(v.norm_sqr(), 0.0);
        }
        self.fft.inverse(&mut data);
        let n = self.shape.n_vertices() as f64;
        data.iter().map(|c| c.re / n).collect()
    }

    pub fn n_replicas(&self) -> usize {
        self.n
    }

    /// Extract the table at the requested offsets.
    pub fn table(&self, offsets: &[Vec<i64>]) -> Result<CovarianceTable> {
        if self.n < 2 {
            return Err(Error::Precondition("covariance needs at least 2 replicas".into()));
        }
        let mut c_hat = Vec::with_capacity(offsets.len());
        let mut stderr = Vec::with_capacity(offsets.len());
        let nf = self.n as f64;
        for off in offsets {
            if off.len() != self.shape.d {
                return Err(Error::Precondition("offset has the wrong dimension".into()));
            }
            let mut flat = 0usize;
            for &c in off {
                flat = flat * self.shape.l + c.rem_euclid(self.shape.l as i64) as usize;
            }
            let mean = self.sum[flat] / nf;
            let var = (self.sumsq[flat] / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
            c_hat.push(mean);
            stderr.push((var / nf).sqrt());
        }
        Ok(CovarianceTable {
            d: self.shape.d,
            l: self.shape.l,
            offsets: offsets.to_vec(),
            c_hat,
            stderr,
            n_replicas: self.n,
        })
    }
}

/// Ĉ(x) over the given offsets from stored correctors (at least 2 replicas
/// on identical shapes).
pub fn empirical_covariance(
    replicas: &[CorrectorSolution],
    offsets: &[Vec<i64>],
) -> Result<CovarianceTable> {
    if replicas.len() < 2 {
        return Err(Error::Precondition("covariance needs at least 2 replicas".into()));
    }
    let shape = replicas[0].phi.shape;
    if replicas.iter().any(|c| c.phi.shape != shape) {
        return Err(Error::Precondition("replicas live on different lattices".into()));
    }
    let mut acc = CovarianceAccumulator::new(shape);
    for c in replicas {
        acc.add(&c.phi);
    }
    acc.table(offsets)
}

/// All centered offsets with r_min <= |x| <= r_max.
pub fn shell_offsets(shape: LatticeShape, r_min: f64, r_max: f64) -> Vec<Vec<i64>> {
    let half = (shape.l / 2) as i64;
    let bound = r_max.floor() as i64;
    let d = shape.d;
    let lo = -bound.min(half);
    let hi = bound.min(half - 1 + (shape.l as i64 % 2));
    let mut out = Vec::new();
    let mut coord = vec![lo; d];
    'outer: loop {
        let r2: i64 = coord.iter().map(|&c| c * c).sum();
        let r = (r2 as f64).sqrt();
        if r >= r_min && r <= r_max {
            out.push(coord.clone());
        }
        for i in (0..d).rev() {
            coord[i] += 1;
            if coord[i] <= hi {
                continue 'outer;
            }
            coord[i] = lo;
        }
        break;
    }
    out
}

/// Result of fitting Q to a covariance table.
#[derive(Debug, Clone)]
pub struct QFit {
    pub model: CovarianceModel,
    /// Fitted additive constant absorbing the torus zero-mode offset.
    pub offset: f64,
    /// Weighted RMS residual relative to the weighted RMS of the data.
    pub rel_residual: f64,
    pub n_points: usize,
}

/// Weighted least-squares fit of a symmetric PSD matrix Q so that the
/// image-periodized kernel (plus a fitted constant absorbing the
/// mean-zero gauge) matches the measured covariance over the table's
/// offsets. The fitted Q is projected onto the PSD cone.
pub fn fit_q(table: &CovarianceTable, a_h: &DMatrix<f64>) -> Result<QFit> {
    let d = table.d;
    if table.l < 32 {
        return Err(Error::Precondition(format!(
            "fit_q requires a lattice with L >= 32, got {}",
            table.l
        )));
    }
    let n_pairs = d * (d + 1) / 2;
    let n_params = n_pairs + 1;
    if table.offsets.len() < n_params {
        return Err(Error::Precondition(format!(
            "underdetermined fit: {} offsets for {} parameters",
            table.offsets.len(),
            n_params
        )));
    }
    let mut pair_index = Vec::with_capacity(n_pairs);
    for j in 0..d {
        for k in j..d {
            pair_index.push((j, k));
        }
    }
    let mut basis = Vec::with_capacity(n_pairs);
    for &(j, k) in &pair_index {
        let mut e = DMatrix::<f64>::zeros(d, d);
        e[(j, k)] = 1.0;
        e[(k, j)] = 1.0;
        basis.push(kernel_basis(a_h, &e)?);
    }

    let n_pts = table.offsets.len();
    let mut design = DMatrix::<f64>::zeros(n_pts, n_params);
    let mut rhs = DVector::<f64>::zeros(n_pts);
    // inverse-variance weights with a floor; unweighted for synthetic tables
    let any_err = table.stderr.iter().any(|&s| s > 0.0);
    let floor = if any_err {
        let mut sorted: Vec<f64> = table.stderr.iter().cloned().filter(|&s| s > 0.0).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted[sorted.len() / 2] * 0.25
    } else {
        1.0
    };
    let weight = |row: usize| -> f64 {
        if any_err {
            1.0 / table.stderr[row].max(floor).powi(2)
        } else {
            1.0
        }
    };
    let mut wsum = 0.0;
    let mut wyy = 0.0;
    for (row, off) in table.offsets.iter().enumerate() {
        let x: Vec<f64> = off.iter().map(|&c| c as f64).collect();
        let w = weight(row);
        let sw = w.sqrt();
        for (col, kb) in basis.iter().enumerate() {
            design[(row, col)] = sw * periodized_basis(kb, &x, table.l);
        }
        design[(row, n_pairs)] = sw;
        rhs[row] = sw * table.c_hat[row];
        wsum += w;
        wyy += w * table.c_hat[row] * table.c_hat[row];
    }
    let svd = design.svd(true, true);
    let coeffs = svd
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Precondition(format!("least squares failed: {e}")))?;

    let mut q = DMatrix::<f64>::zeros(d, d);
    for (idx, &(j, k)) in pair_index.iter().enumerate() {
        q[(j, k)] = coeffs[idx];
        q[(k, j)] = coeffs[idx];
    }
    let offset = coeffs[n_pairs];
    // PSD projection: clamp negative eigenvalues
    let eig = q.symmetric_eigen();
    let mut q_psd = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        let ev = eig.eigenvalues[i].max(0.0);
        let v = eig.eigenvectors.column(i);
        q_psd += ev * v * v.transpose();
    }
    // residual of the projected model
    let mut ss = 0.0;
    for (row, off) in table.offsets.iter().enumerate() {
        let x: Vec<f64> = off.iter().map(|&c| c as f64).collect();
        let w = weight(row);
        let mut pred = offset;
        for (idx, &(j, k)) in pair_index.iter().enumerate() {
            pred += q_psd[(j, k)] * periodized_basis(&basis[idx], &x, table.l);
        }
        let r = table.c_hat[row] - pred;
        ss += w * r * r;
    }
    let rel_residual = (ss / wsum).sqrt() / (wyy / wsum).sqrt().max(1e-300);
    let model = CovarianceModel::new(a_h.clone(), q_psd)?;
    Ok(QFit { model, offset, rel_residual, n_points: n_pts })
}

/// Precomputed pieces of the kernel for one basis matrix E:
/// K_E(x) = c [ tr(M) |y|^{2-d} + (2-d)(y·My)|y|^{-d} ], y = A^{-1/2}x.
struct KernelBasis {
    inv_sqrt_a: DMatrix<f64>,
    m: DMatrix<f64>,
    m_trace: f64,
    c: f64,
    d: usize,
}

fn kernel_basis(a_h: &DMatrix<f64>, e: &DMatrix<f64>) -> Result<KernelBasis> {
    let d = a_h.nrows();
    check_symmetric(a_h, d, "A_h")?;
    let eig = a_h.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&v| v <= 0.0) {
        return Err(Error::Precondition("A_h is not positive definite".into()));
    }
    let mut det = 1.0;
    let mut inv_sqrt_diag = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        det *= eig.eigenvalues[i];
        inv_sqrt_diag[(i, i)] = 1.0 / eig.eigenvalues[i].sqrt();
    }
    let inv_sqrt_a = &eig.eigenvectors * inv_sqrt_diag * eig.eigenvectors.transpose();
    let m = &inv_sqrt_a * e * &inv_sqrt_a;
    let dd = d as f64;
    let c = statrs::function::gamma::gamma(dd / 2.0 - 1.0)
        / (8.0 * std::f64::consts::PI.powf(dd / 2.0) * det.sqrt());
    let m_trace = m.trace();
    Ok(KernelBasis { inv_sqrt_a, m, m_trace, c, d })
}

fn kernel_basis_eval(kb: &KernelBasis, x: &[f64]) -> f64 {
    let xv = DVector::from_column_slice(x);
    let y = &kb.inv_sqrt_a * xv;
    let r = y.norm();
    if r == 0.0 {
        return 0.0;
    }
    let dd = kb.d as f64;
    let quad = y.dot(&(&kb.m * &y));
    kb.c * (kb.m_trace * r.powf(2.0 - dd) + (2.0 - dd) * quad * r.powf(-dd))
}

/// Kernel periodized over the nearest image shell {-1, 0, 1}^d.
fn periodized_basis(kb: &KernelBasis, x: &[f64], l: usize) -> f64 {
    let d = kb.d;
    let mut total = 0.0;
    let mut image = vec![-1i64; d];
    let mut shifted = vec![0.0; d];
    'outer: loop {
        for i in 0..d {
            shifted[i] = x[i] + (image[i] * l as i64) as f64;
        }
        total += kernel_basis_eval(kb, &shifted);
        for i in (0..d).rev() {
            image[i] += 1;
            if image[i] <= 1 {
                continue 'outer;
            }
            image[i] = -1;
        }
        break;
    }
    total
}

impl CovarianceTable {
    /// CSV with columns x_1..x_d, c_hat, stderr.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 1..=self.d {
            out.push_str(&format!("x_{i},"));
        }
        out.push_str("c_hat,stderr\n");
        for (row, off) in self.offsets.iter().enumerate() {
            for c in off {
                out.push_str(&format!("{c},"));
            }
            out.push_str(&format!("{},{}\n", self.c_hat[row], self.stderr[row]));
        }
        out
    }
}
