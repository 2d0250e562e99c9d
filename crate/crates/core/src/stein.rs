//! Sensitivity of the rescaled field to the Gaussian drivers, and the
//! normal-approximation bound built from it.
//!
//! Writing Φ = ε^{d/2+1} Σ_x w(x) φ(x) with w(x) = f_λ(εx), the Green
//! identities for ∂_e φ collapse into an adjoint-state computation:
//! one solve (∇*A∇) u = w̃ yields
//!
//!   ∂_e Φ = -𝐚'(ζ_e) (∇φ + ξ)(e) ∇u(e)                       for all e,
//!
//! and one dipole solve v = ∇G(·, e') per anchor e' yields the whole row
//! of second derivatives: with D(e) = ∇v(e),
//!
//!   ∂_{e'}∂_e Φ = 𝐚'(ζ_e) 𝐚'(ζ_{e'}) D(e)
//!                 [ ∇u(e')(∇φ+ξ)(e) + ∇u(e)(∇φ+ξ)(e') ]      (e ≠ e'),
//!   ∂²_{e'} Φ   = [ 2 𝐚'(ζ_{e'})² D(e') - 𝐚''(ζ_{e'}) ]
//!                 ∇u(e')(∇φ+ξ)(e'),
//!
//! exact identities on the torus, validated against finite differences.
//! The normal-approximation bound for F = Φ/σ_ε is
//!
//!   √(5/π) √( Σ_{e'} ( Σ_e ⟨|∂_e F|⁴⟩^{1/4} ⟨|∂_{e'}∂_e F|⁴⟩^{1/4} )² ),
//!
//! estimated by Monte Carlo with the inner sum truncated at |e-e'| <= R
//! (power-law tail extrapolation) and the outer sum over a stratified
//! anchor sample extrapolated by shell.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::{solve_corrector, CorrectorSolution};
use crate::environment::{sample_environment, ConductanceLaw, Environment, SeedSpec};
use crate::error::{Error, Result};
use crate::lattice::{gradient, EdgeField, EdgeId, LatticeShape, VertexField};
use crate::scaling::{weight_field, TestFunction, TestFunctionKind};
use crate::solver::{dipole_solve, solve, SolverConfig};
use crate::stats::FitStatus;
use crate::util::{mean_std, ols, stream_key};

const STREAM_ANCHORS: u64 = 0x414E_4348; // "ANCH"

/// First or second order derivative values of Φ with respect to the
/// Gaussian drivers.
#[derive(Debug, Clone)]
pub struct DerivativeField {
    pub order: u8,
    /// Anchor edge e' for order-2 rows; none for the order-1 field.
    pub anchor: Option<EdgeId>,
    pub values: EdgeField,
}

/// Adjoint state: one μ-regularized solve against the mean-projected
/// weight ε^{d/2+1} f_λ(ε·); ∇u(e) then carries all first derivatives.
pub fn adjoint_field(
    env: &Environment,
    f: &TestFunction,
    lambda: f64,
    eps: f64,
    mu: f64,
    cfg: &SolverConfig,
) -> Result<VertexField> {
    let mut w = weight_field(env.shape, f, lambda, eps)?;
    if mu == 0.0 {
        w.project_mean_zero();
    }
    let (u, _) = solve(env, mu, &w, cfg)?;
    Ok(u)
}

/// ∂_e Φ for every edge in one O(#edges) pass after the adjoint solve.
pub fn first_derivatives_all_edges(
    env: &Environment,
    corrector: &CorrectorSolution,
    adjoint: &VertexField,
) -> DerivativeField {
    let shape = env.shape;
    let grad_u = gradient(adjoint);
    let grad_phi = corrector.corrected_gradient(shape);
    let mut values = EdgeField::zeros(shape);
    for e in 0..shape.n_edges() {
        values.values[e] = -env.a_deriv(e) * grad_phi.values[e] * grad_u.values[e];
    }
    DerivativeField { order: 1, anchor: None, values }
}

/// The full row ∂_{e'}∂_e Φ over e, from one dipole solve at the anchor.
pub fn second_derivative_row(
    env: &Environment,
    corrector: &CorrectorSolution,
    adjoint: &VertexField,
    e_prime: EdgeId,
    cfg: &SolverConfig,
) -> Result<DerivativeField> {
    let shape = env.shape;
    let v = dipole_solve(env, e_prime, corrector.mu, cfg)?;
    let grad_u = gradient(adjoint);
    let grad_phi = corrector.corrected_gradient(shape);
    let row = second_row_from_dipole(env, &grad_phi, &grad_u, &v, e_prime);
    Ok(DerivativeField { order: 2, anchor: Some(e_prime), values: row })
}

/// Row assembly shared by the public row computation and the bound
/// estimator (which reuses one dipole solve across ε).
fn second_row_from_dipole(
    env: &Environment,
    grad_phi: &EdgeField,
    grad_u: &EdgeField,
    v: &VertexField,
    e_prime: EdgeId,
) -> EdgeField {
    let shape = env.shape;
    let d = shape.d;
    let ep_flat = e_prime.flat(&shape);
    let c_prime = env.a_deriv(ep_flat);
    let gp_prime = grad_phi.values[ep_flat];
    let gu_prime = grad_u.values[ep_flat];
    let mut row = EdgeField::zeros(shape);
    for base in 0..shape.n_vertices() {
        for dir in 0..d {
            let e = base * d + dir;
            let dv = v.values[shape.up(base, dir)] - v.values[base];
            row.values[e] = if e == ep_flat {
                (2.0 * c_prime * c_prime * dv - env.a_deriv2(ep_flat)) * gu_prime * gp_prime
            } else {
                env.a_deriv(e)
                    * c_prime
                    * dv
                    * (gu_prime * grad_phi.values[e] + grad_u.values[e] * gp_prime)
            };
        }
    }
    row
}

/// ∂_e φ as a vertex field: -𝐚'(ζ_e)(∇φ+ξ)(e) ∇_e G(·, e).
pub fn first_derivative_phi_field(
    env: &Environment,
    corrector: &CorrectorSolution,
    e: EdgeId,
    cfg: &SolverConfig,
) -> Result<VertexField> {
    let v = dipole_solve(env, e, corrector.mu, cfg)?;
    let grad_phi = corrector.corrected_gradient(env.shape);
    let c = -env.a_deriv(e.flat(&env.shape)) * grad_phi.values[e.flat(&env.shape)];
    let mut out = v;
    for x in out.values.iter_mut() {
        *x *= c;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Stein bound estimation
// ---------------------------------------------------------------------------

/// Inputs of the bound estimation campaign.
#[derive(Debug, Clone)]
pub struct SteinParams {
    pub shape: LatticeShape,
    pub law: ConductanceLaw,
    pub xi: Vec<f64>,
    pub mu: f64,
    pub f_kind: TestFunctionKind,
    pub lambda: f64,
    pub eps_list: Vec<f64>,
    pub n_replicas: usize,
    pub master_seed: u64,
    /// Inner-sum truncation radius R (base-point distance).
    pub truncation_radius: f64,
    /// Number of anchor edges e' sampled for the outer sum.
    pub anchor_count: usize,
    pub solver: SolverConfig,
}

/// The estimated bound at one ε, with its sampling pieces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteinBoundReport {
    pub eps: f64,
    pub lambda: f64,
    pub bound: f64,
    /// Stratified-sampling standard error of the bound.
    pub bound_stderr: f64,
    /// bound minus the same estimate without the inner-sum tail term.
    pub tail_estimate: f64,
    pub truncation_radius: f64,
    pub sampled_anchors: usize,
    pub mc_replicas: usize,
    pub sigma_eps: f64,
}

struct AnchorPlan {
    /// Sampled anchors grouped by stratum: (population, anchor edge ids).
    strata: Vec<(usize, Vec<EdgeId>)>,
    anchors: Vec<EdgeId>,
    /// For each ball entry relative to an anchor: (offset move, dir, separation).
    ball: Vec<(Vec<i64>, usize, f64)>,
}

fn plan_anchors(shape: LatticeShape, m: usize, radius: f64, master_seed: u64) -> AnchorPlan {
    let d = shape.d;
    // strata by the distance of the base point from the origin
    let max_r = (d as f64).sqrt() * shape.l as f64 / 2.0;
    let mut bounds = vec![0.0, 1.0];
    while *bounds.last().unwrap() < max_r {
        let last = *bounds.last().unwrap();
        bounds.push(last * 2.0);
    }
    let n_strata = bounds.len() - 1;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_strata];
    for v in 0..shape.n_vertices() {
        let c = shape.centered_coords(v);
        let r = (c.iter().map(|&x| (x * x) as f64).sum::<f64>()).sqrt();
        let s = bounds.windows(2).position(|w| r >= w[0] && r < w[1]).unwrap_or(n_strata - 1);
        for dir in 0..d {
            members[s].push(v * d + dir);
        }
    }
    let total: usize = members.iter().map(Vec::len).sum();
    let mut strata = Vec::new();
    let mut anchors = Vec::new();
    for (s, list) in members.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let quota =
            ((m as f64 * list.len() as f64 / total as f64).round() as usize).clamp(1, list.len());
        let mut rng =
            ChaCha8Rng::seed_from_u64(stream_key(&[master_seed, STREAM_ANCHORS, s as u64]));
        // partial Fisher-Yates over a copy of the member list
        let mut pool = list.clone();
        let mut picked = Vec::with_capacity(quota);
        for i in 0..quota {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
            picked.push(EdgeId::from_flat(&shape, pool[i]));
        }
        anchors.extend(picked.iter().copied());
        strata.push((list.len(), picked));
    }
    // ball offsets |Δ| <= R around any anchor base, every direction
    let rad = radius.floor() as i64;
    let mut ball = Vec::new();
    let mut coord = vec![-rad; d];
    'outer: loop {
        let r2: i64 = coord.iter().map(|&c| c * c).sum();
        let r = (r2 as f64).sqrt();
        if r <= radius {
            for dir in 0..d {
                ball.push((coord.clone(), dir, r));
            }
        }
        for i in (0..d).rev() {
            coord[i] += 1;
            if coord[i] <= rad {
                continue 'outer;
            }
            coord[i] = -rad;
        }
        break;
    }
    AnchorPlan { strata, anchors, ball }
}

fn translate(shape: LatticeShape, base: usize, offset: &[i64]) -> usize {
    let coords = shape.vertex_coords(base);
    let mut flat = 0usize;
    for (i, &c) in coords.iter().enumerate() {
        let moved = (c as i64 + offset[i]).rem_euclid(shape.l as i64) as usize;
        flat = flat * shape.l + moved;
    }
    flat
}

/// Histogram of base-point separations beyond the truncation radius,
/// Σ_{|Δ| > R} d · |Δ|^{-d}, used for the inner-sum tail extrapolation.
fn tail_weight_beyond(shape: LatticeShape, radius: f64) -> f64 {
    let d = shape.d;
    let mut total = 0.0;
    for v in 0..shape.n_vertices() {
        let c = shape.centered_coords(v);
        let r = (c.iter().map(|&x| (x * x) as f64).sum::<f64>()).sqrt();
        if r > radius {
            total += d as f64 * r.powi(-(d as i32));
        }
    }
    total
}

/// Estimate the normal-approximation bound for every ε in the grid.
/// Dipole solves are shared across ε; anchors run in parallel and are
/// merged in a fixed order.
pub fn stein_bounds(params: &SteinParams) -> Result<Vec<SteinBoundReport>> {
    if params.n_replicas < 16 {
        return Err(Error::Precondition(format!(
            "fourth moments need at least 16 replicas, got {}",
            params.n_replicas
        )));
    }
    let shape = params.shape;
    if params.truncation_radius > shape.l as f64 / 2.0 {
        return Err(Error::Precondition("truncation radius exceeds L/2".into()));
    }
    let f = TestFunction::new(params.f_kind, shape.d)?;
    for &eps in &params.eps_list {
        weight_field(shape, &f, params.lambda, eps)?;
    }
    let n_eps = params.eps_list.len();
    let plan = plan_anchors(shape, params.anchor_count, params.truncation_radius, params.master_seed);
    let n_anchors = plan.anchors.len();
    let ball_len = plan.ball.len();

    let mut q1_acc = vec![vec![0.0f64; shape.n_edges()]; n_eps];
    let mut q2_acc = vec![vec![0.0f64; ball_len]; n_eps * n_anchors];
    let mut phi_samples = vec![Vec::with_capacity(params.n_replicas); n_eps];

    for replica in 0..params.n_replicas {
        let seed = SeedSpec::new(params.master_seed, replica as u32);
        let env = sample_environment(shape, params.law, seed);
        let corr = solve_corrector(&env, &params.xi, params.mu, &params.solver)?;
        let grad_phi = corr.corrected_gradient(shape);
        let mut grad_us = Vec::with_capacity(n_eps);
        for (ei, &eps) in params.eps_list.iter().enumerate() {
            let u = adjoint_field(&env, &f, params.lambda, eps, params.mu, &params.solver)?;
            let sample = crate::scaling::phi_eps(&corr, &f, params.lambda, eps)?;
            phi_samples[ei].push(sample.value);
            let gu = gradient(&u);
            // first derivatives, all edges
            for e in 0..shape.n_edges() {
                let d1 = -env.a_deriv(e) * grad_phi.values[e] * gu.values[e];
                q1_acc[ei][e] += d1.powi(4);
            }
            grad_us.push(gu);
        }
        // one dipole solve per anchor, rows for every ε
        let rows: Vec<Result<Vec<Vec<f64>>>> = plan
            .anchors
            .par_iter()
            .map(|&anchor| {
                let v = dipole_solve(&env, anchor, params.mu, &params.solver)?;
                let ap_flat = anchor.flat(&shape);
                let c_prime = env.a_deriv(ap_flat);
                let gp_prime = grad_phi.values[ap_flat];
                let mut per_eps = Vec::with_capacity(n_eps);
                for gu in &grad_us {
                    let gu_prime = gu.values[ap_flat];
                    let mut vals = Vec::with_capacity(ball_len);
                    for (offset, dir, _) in &plan.ball {
                        let tbase = translate(shape, anchor.base, offset);
                        let e = tbase * shape.d + dir;
                        let dv = v.values[shape.up(tbase, *dir)] - v.values[tbase];
                        let val = if e == ap_flat {
                            (2.0 * c_prime * c_prime * dv - env.a_deriv2(ap_flat))
                                * gu_prime
                                * gp_prime
                        } else {
                            env.a_deriv(e)
                                * c_prime
                                * dv
                                * (gu_prime * grad_phi.values[e] + gu.values[e] * gp_prime)
                        };
                        vals.push(val);
                    }
                    per_eps.push(vals);
                }
                Ok(per_eps)
            })
            .collect();
        for (ai, row) in rows.into_iter().enumerate() {
            let row = row?;
            for (ei, vals) in row.into_iter().enumerate() {
                let acc = &mut q2_acc[ei * n_anchors + ai];
                for (k, v) in vals.into_iter().enumerate() {
                    acc[k] += v.powi(4);
                }
            }
        }
    }

    let tail_weight = tail_weight_beyond(shape, params.truncation_radius);
    let nf = params.n_replicas as f64;
    let mut reports = Vec::with_capacity(n_eps);
    for (ei, &eps) in params.eps_list.iter().enumerate() {
        let (_, sigma) = mean_std(&phi_samples[ei]);
        if sigma == 0.0 {
            reports.push(SteinBoundReport {
                eps,
                lambda: params.lambda,
                bound: 0.0,
                bound_stderr: 0.0,
                tail_estimate: 0.0,
                truncation_radius: params.truncation_radius,
                sampled_anchors: n_anchors,
                mc_replicas: params.n_replicas,
                sigma_eps: 0.0,
            });
            continue;
        }
        // ⟨|∂F|⁴⟩^{1/4} with F = Φ/σ
        let q1: Vec<f64> =
            q1_acc[ei].iter().map(|&s| (s / nf).powf(0.25) / sigma).collect();
        let q1_mean = crate::util::pairwise_sum(&q1) / q1.len() as f64;

        let inner_of_anchor = |ai: usize| -> (f64, f64) {
            let acc = &q2_acc[ei * n_anchors + ai];
            let anchor = plan.anchors[ai];
            let mut inner = 0.0;
            let mut fit_num = 0.0;
            let mut fit_cnt = 0usize;
            for (k, (offset, dir, sep)) in plan.ball.iter().enumerate() {
                let q2 = (acc[k] / nf).powf(0.25) / sigma;
                let tbase = translate(shape, anchor.base, offset);
                let e = tbase * shape.d + dir;
                inner += q1[e] * q2;
                if *sep >= params.truncation_radius / 2.0 && *sep > 0.0 {
                    fit_num += q2 * sep.powi(shape.d as i32);
                    fit_cnt += 1;
                }
            }
            let c2 = if fit_cnt > 0 { fit_num / fit_cnt as f64 } else { 0.0 };
            let tail = c2 * q1_mean * tail_weight;
            (inner, tail)
        };

        // stratified outer sum of (inner + tail)²
        let mut total = 0.0;
        let mut total_no_tail = 0.0;
        let mut var_total = 0.0;
        let mut ai = 0usize;
        for (pop, picked) in &plan.strata {
            let mut vals = Vec::with_capacity(picked.len());
            let mut vals_nt = Vec::with_capacity(picked.len());
            for _ in picked {
                let (inner, tail) = inner_of_anchor(ai);
                vals.push((inner + tail) * (inner + tail));
                vals_nt.push(inner * inner);
                ai += 1;
            }
            let mean = crate::util::pairwise_sum(&vals) / vals.len() as f64;
            let mean_nt = crate::util::pairwise_sum(&vals_nt) / vals_nt.len() as f64;
            total += *pop as f64 * mean;
            total_no_tail += *pop as f64 * mean_nt;
            let var = if vals.len() > 1 {
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / (vals.len() - 1) as f64
                    / vals.len() as f64
            } else {
                mean * mean // conservative for singleton strata
            };
            var_total += (*pop as f64) * (*pop as f64) * var;
        }
        let c = (5.0 / std::f64::consts::PI).sqrt();
        let bound = c * total.sqrt();
        let bound_no_tail = c * total_no_tail.sqrt();
        let bound_stderr =
            if total > 0.0 { c * var_total.sqrt() / (2.0 * total.sqrt()) } else { 0.0 };
        reports.push(SteinBoundReport {
            eps,
            lambda: params.lambda,
            bound,
            bound_stderr,
            tail_estimate: bound - bound_no_tail,
            truncation_radius: params.truncation_radius,
            sampled_anchors: n_anchors,
            mc_replicas: params.n_replicas,
            sigma_eps: sigma,
        });
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Decay exponent fits
// ---------------------------------------------------------------------------

/// One shell of the decay table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShellStat {
    pub separation: f64,
    pub rms: f64,
    pub stderr: f64,
    pub count: usize,
}

/// Log-log fit of a root-mean-square derivative against separation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayFit {
    pub exponent: Option<f64>,
    pub r2: Option<f64>,
    pub shells: Vec<ShellStat>,
    pub status: FitStatus,
}

impl DecayFit {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("separation,rms,stderr,count\n");
        for s in &self.shells {
            out.push_str(&format!("{},{},{},{}\n", s.separation, s.rms, s.stderr, s.count));
        }
        out
    }
}

fn fit_shells(shells: &[ShellStat]) -> DecayFit {
    if shells.len() < 3 {
        return DecayFit {
            exponent: None,
            r2: None,
            shells: shells.to_vec(),
            status: FitStatus::Inconclusive {
                reason: format!("only {} shells; the lattice is too small", shells.len()),
            },
        };
    }
    let xs: Vec<f64> = shells.iter().map(|s| s.separation.ln()).collect();
    let ys: Vec<f64> = shells.iter().map(|s| s.rms.ln()).collect();
    let (slope, _, r2) = ols(&xs, &ys);
    DecayFit { exponent: Some(slope), r2: Some(r2), shells: shells.to_vec(), status: FitStatus::Ok }
}

/// Synthetic-data entry point shared with the Monte Carlo fits: bin
/// squared values by integer separation and fit the RMS decay over
/// [r_min, r_max].
pub fn decay_fit_from_samples(samples: &[(f64, f64)], r_min: f64, r_max: f64) -> DecayFit {
    let mut bins: std::collections::BTreeMap<i64, (f64, f64, f64, usize)> =
        std::collections::BTreeMap::new();
    for &(sep, sq) in samples {
        if sep < r_min || sep > r_max {
            continue;
        }
        let key = sep.floor() as i64;
        let slot = bins.entry(key).or_insert((0.0, 0.0, 0.0, 0));
        slot.0 += sq;
        slot.1 += sq * sq;
        slot.2 += sep;
        slot.3 += 1;
    }
    let shells: Vec<ShellStat> = bins
        .values()
        .filter(|(_, _, _, n)| *n > 0)
        .map(|&(sum, sumsq, sep_sum, n)| {
            let nf = n as f64;
            let mean = sum / nf;
            let var = (sumsq / nf - mean * mean).max(0.0);
            ShellStat {
                separation: sep_sum / nf,
                rms: mean.sqrt(),
                // delta method: se(√m) = se(m) / (2√m)
                stderr: if mean > 0.0 && n > 1 {
                    (var / nf).sqrt() / (2.0 * mean.sqrt())
                } else {
                    0.0
                },
                count: n,
            }
        })
        .filter(|s| s.rms > 0.0)
        .collect();
    fit_shells(&shells)
}

/// Decay of ⟨|∂_e φ(x)|²⟩^{1/2} in |x - e| for the edge at the origin,
/// fitted over 2 <= |x - e| <= L/4. Expected exponent: -(d-1).
pub fn decay_fit_first_derivative(
    shape: LatticeShape,
    law: ConductanceLaw,
    xi: &[f64],
    n_replicas: usize,
    master_seed: u64,
    cfg: &SolverConfig,
) -> Result<DecayFit> {
    if n_replicas < 16 {
        return Err(Error::Precondition("decay statistics need at least 16 replicas".into()));
    }
    let e = EdgeId::new(0, 0);
    let n = shape.n_vertices();
    let sq_sums: Vec<Vec<f64>> = (0..n_replicas)
        .into_par_iter()
        .map(|r| {
            let env = sample_environment(shape, law, SeedSpec::new(master_seed, r as u32));
            let corr = solve_corrector(&env, xi, 0.0, cfg)?;
            let field = first_derivative_phi_field(&env, &corr, e, cfg)?;
            Ok(field.values.iter().map(|v| v * v).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::with_capacity(n);
    for v in 0..n {
        let c = shape.centered_coords(v);
        let sep = (c.iter().map(|&x| (x * x) as f64).sum::<f64>()).sqrt();
        let mean_sq = sq_sums.iter().map(|row| row[v]).sum::<f64>() / n_replicas as f64;
        samples.push((sep, mean_sq));
    }
    Ok(decay_fit_from_samples(&samples, 2.0, shape.l as f64 / 4.0))
}

/// Decay of ⟨|∂_{e'}∂_e φ(x)|²⟩^{1/2} in |e - e'| at a fixed |x - e'| band,
/// anchor at the origin. Expected exponent: -d.
pub fn decay_fit_second_derivative(
    shape: LatticeShape,
    law: ConductanceLaw,
    xi: &[f64],
    n_replicas: usize,
    master_seed: u64,
    cfg: &SolverConfig,
) -> Result<DecayFit> {
    if n_replicas < 16 {
        return Err(Error::Precondition("decay statistics need at least 16 replicas".into()));
    }
    let d = shape.d;
    let e_prime = EdgeId::new(0, 0);
    let ep_flat = e_prime.flat(&shape);
    // evaluation band |x| ≈ L/4: one representative per axis direction
    let band = shape.l as i64 / 4;
    let mut x_points = Vec::new();
    for axis in 0..d {
        for sign in [1i64, -1] {
            let mut coords = vec![0i64; d];
            coords[axis] = sign * band;
            let coords: Vec<usize> =
                coords.iter().map(|&c| c.rem_euclid(shape.l as i64) as usize).collect();
            x_points.push(shape.vertex_index(&coords));
        }
    }
    let n_edges = shape.n_edges();
    let sq_sums: Vec<Vec<f64>> = (0..n_replicas)
        .into_par_iter()
        .map(|r| {
            let env = sample_environment(shape, law, SeedSpec::new(master_seed, r as u32));
            let corr = solve_corrector(&env, xi, 0.0, cfg)?;
            let grad_phi = corr.corrected_gradient(shape);
            let v_prime = dipole_solve(&env, e_prime, 0.0, cfg)?;
            let c_prime = env.a_deriv(ep_flat);
            let gp_prime = grad_phi.values[ep_flat];
            // w_x = G(·, x) per band point gives ∇_e G(x, e) for all e
            let mut sums = vec![0.0f64; n_edges];
            for &x in &x_points {
                let mut g = VertexField::zeros(shape);
                let nf = shape.n_vertices() as f64;
                for val in g.values.iter_mut() {
                    *val = -1.0 / nf;
                }
                g.values[x] += 1.0;
                let (w_x, _) = solve(&env, 0.0, &g, cfg)?;
                let vpx = v_prime.values[x];
                for base in 0..shape.n_vertices() {
                    for dir in 0..d {
                        let e = base * d + dir;
                        if e == ep_flat {
                            continue;
                        }
                        let dv = v_prime.values[shape.up(base, dir)] - v_prime.values[base];
                        let ve_x = w_x.values[shape.up(base, dir)] - w_x.values[base];
                        let val = env.a_deriv(e)
                            * c_prime
                            * dv
                            * (vpx * grad_phi.values[e] + ve_x * gp_prime);
                        sums[e] += val * val;
                    }
                }
            }
            Ok(sums)
        })
        .collect::<Result<Vec<_>>>()?;
    let denom = (n_replicas * x_points.len()) as f64;
    let mut samples = Vec::with_capacity(n_edges);
    for base in 0..shape.n_vertices() {
        let c = shape.centered_coords(base);
        let sep = (c.iter().map(|&x| (x * x) as f64).sum::<f64>()).sqrt();
        for dir in 0..d {
            let e = base * d + dir;
            let mean_sq = sq_sums.iter().map(|row| row[e]).sum::<f64>() / denom;
            samples.push((sep, mean_sq));
        }
    }
    Ok(decay_fit_from_samples(&samples, 2.0, shape.l as f64 / 4.0))
}
