//! Acceptance suite: one integration test per criterion, each printing a
//! pass line (run with `-- --nocapture` to see them). The heavy joint
//! campaign (criteria 7, 8, 11) is computed once and shared.
//!
//! The full-size variance-convergence run lives behind `--ignored`
//! (overnight budget); the default test is the documented smoke version
//! with doubled statistical tolerances.

use nalgebra::DMatrix;
use once_cell::sync::Lazy;

use corrlab_core::corrector::basis_correctors;
use corrlab_core::scaling::{
    fit_q, homogenized_green, kernel_k, phi_eps, shell_offsets, sigma2, sigma2_torus,
    CovarianceModel, QFit, TestFunction, TestFunctionKind,
};
use corrlab_core::stats::{
    gaussian_w1_noise_floor, mc_campaign, moment_scan, rate_fit, Campaign, CampaignParams,
    FitStatus, StatsReport,
};
use corrlab_core::stein::{
    adjoint_field, decay_fit_first_derivative, decay_fit_second_derivative,
    first_derivatives_all_edges, second_derivative_row, stein_bounds, SteinBoundReport,
    SteinParams,
};
use corrlab_core::util::{dot, standard_normal_from_key, stream_key};
use corrlab_core::{
    apply_operator, boundlab, dense_oracle_solve, divergence, effective_matrix,
    ensemble_effective_matrix, gradient, sample_environment, solve, solve_corrector,
    ConductanceLaw, EdgeField, EdgeId, Environment, LatticeShape, SeedSpec, SolverConfig,
    VertexField,
};

const MASTER_SEED: u64 = 20260810;

fn random_vertex_field(shape: LatticeShape, seed: u64) -> VertexField {
    let values = (0..shape.n_vertices())
        .map(|i| standard_normal_from_key(stream_key(&[seed, 1, i as u64])))
        .collect();
    VertexField { shape, values }
}

fn random_edge_field(shape: LatticeShape, seed: u64) -> EdgeField {
    let values = (0..shape.n_edges())
        .map(|i| standard_normal_from_key(stream_key(&[seed, 2, i as u64])))
        .collect();
    EdgeField { shape, values }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

// ---------------------------------------------------------------------------
// 1. Discrete calculus
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_discrete_calculus_randomized() {
    let mut cases = 0;
    let mut case_seed = 0u64;
    while cases < 1000 {
        case_seed += 1;
        let d = 1 + (stream_key(&[case_seed, 10]) % 3) as usize;
        let l = 2 + (stream_key(&[case_seed, 11]) % 3) as usize;
        let shape = LatticeShape::new(d, l).unwrap();
        let f = random_edge_field(shape, case_seed);
        let g = random_vertex_field(shape, case_seed + 1_000_000);
        // adjointness <∇*F, g> = <F, ∇g>
        let lhs = dot(&divergence(&f).values, &g.values);
        let rhs = dot(&f.values, &gradient(&g).values);
        assert!(rel_close(lhs, rhs, 1e-12), "case {case_seed}: adjointness {lhs} vs {rhs}");
        // ∇*∇ = 2d·Id - adjacency
        let lap = divergence(&gradient(&g));
        for v in 0..shape.n_vertices() {
            let mut neighbor_sum = 0.0;
            for i in 0..d {
                neighbor_sum += g.values[shape.up(v, i)] + g.values[shape.down(v, i)];
            }
            let stencil = 2.0 * d as f64 * g.values[v] - neighbor_sum;
            assert!(
                rel_close(lap.values[v], stencil, 1e-12),
                "case {case_seed}: stencil at {v}"
            );
        }
        // operator symmetry <Au, v> = <u, Av> with positive weights
        let a = EdgeField {
            shape,
            values: f.values.iter().map(|x| 1.0 + x.abs()).collect(),
        };
        let u = random_vertex_field(shape, case_seed + 2_000_000);
        let mu = 0.25;
        let au = apply_operator(&a, mu, &u);
        let av = apply_operator(&a, mu, &g);
        let s1 = dot(&au.values, &g.values);
        let s2 = dot(&u.values, &av.values);
        assert!(rel_close(s1, s2, 1e-12), "case {case_seed}: symmetry {s1} vs {s2}");
        cases += 1;
    }
    println!("acceptance criterion 01 (discrete calculus, 1000 cases): PASS");
}

// ---------------------------------------------------------------------------
// 2. Solver vs dense oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_solver_vs_dense_oracle() {
    let shape = LatticeShape::new(3, 3).unwrap();
    for k in 0..20u64 {
        let env = sample_environment(
            shape,
            ConductanceLaw::default_tanh(),
            SeedSpec::new(MASTER_SEED + k, 0),
        );
        let mu = if k % 2 == 0 { 0.0 } else { 0.5 };
        let mut g = random_vertex_field(shape, 5_000 + k);
        if mu == 0.0 {
            g.project_mean_zero();
        }
        let (u, report) = solve(&env, mu, &g, &SolverConfig::default()).unwrap();
        assert!(report.converged);
        let dense = dense_oracle_solve(&env, mu, &g).unwrap();
        for (a, b) in u.values.iter().zip(&dense.values) {
            assert!((a - b).abs() <= 1e-9, "instance {k}: {a} vs {b}");
        }
    }
    println!("acceptance criterion 02 (solver vs dense oracle, 20 instances): PASS");
}

// ---------------------------------------------------------------------------
// 3. Constant-environment degeneracy
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_constant_environment_degeneracy() {
    let c = 2.0;
    let shape = LatticeShape::new(3, 8).unwrap();
    let law = ConductanceLaw::constant(c).unwrap();
    let env = sample_environment(shape, law, SeedSpec::new(MASTER_SEED, 0));
    let corr = solve_corrector(&env, &[1.0, 0.0, 0.0], 0.0, &SolverConfig::default()).unwrap();
    assert!(corr.phi.max_abs() <= 1e-9, "phi sup {}", corr.phi.max_abs());

    let basis = basis_correctors(&env, 0.0, &SolverConfig::default()).unwrap();
    let a_h = effective_matrix(&env, &basis).unwrap();
    for j in 0..3 {
        for k in 0..3 {
            assert_eq!(a_h[(j, k)], if j == k { c } else { 0.0 });
        }
    }

    let f = TestFunction::new(TestFunctionKind::MollifierBump, 3).unwrap();
    let u = adjoint_field(&env, &f, 1.0, 0.5, 0.0, &SolverConfig::default()).unwrap();
    let d1 = first_derivatives_all_edges(&env, &corr, &u);
    assert!(d1.values.values.iter().all(|&v| v == 0.0));
    let row =
        second_derivative_row(&env, &corr, &u, EdgeId::new(0, 0), &SolverConfig::default())
            .unwrap();
    assert!(row.values.values.iter().all(|&v| v == 0.0));

    let stein = stein_bounds(&SteinParams {
        shape,
        law,
        xi: vec![1.0, 0.0, 0.0],
        mu: 0.0,
        f_kind: TestFunctionKind::MollifierBump,
        lambda: 1.0,
        eps_list: vec![0.5],
        n_replicas: 16,
        master_seed: MASTER_SEED,
        truncation_radius: 3.0,
        anchor_count: 8,
        solver: SolverConfig::default(),
    })
    .unwrap();
    assert_eq!(stein[0].bound, 0.0);
    println!("acceptance criterion 03 (constant environment degeneracy): PASS");
}

// ---------------------------------------------------------------------------
// 4. Effective-matrix sanity
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_effective_matrix_sanity() {
    let shape = LatticeShape::new(3, 16).unwrap();
    let est = ensemble_effective_matrix(
        shape,
        ConductanceLaw::default_tanh(),
        MASTER_SEED,
        32,
        0.0,
        &SolverConfig::default(),
    )
    .unwrap();
    let eig = est.mean.clone().symmetric_eigen().eigenvalues;
    for &ev in eig.iter() {
        assert!((1.0 - 1e-9..=4.0 + 1e-9).contains(&ev), "eigenvalue {ev} outside [1, 4]");
    }
    for j in 0..3 {
        for k in 0..3 {
            if j != k {
                let v = est.mean[(j, k)].abs();
                let tol = 3.0 * est.stderr[(j, k)];
                assert!(v <= tol, "offdiag ({j},{k}) = {v:.3e} exceeds 3 stderr {tol:.3e}");
            }
        }
    }
    println!(
        "acceptance criterion 04 (effective matrix, 32 replicas, eigenvalues {:?}): PASS",
        eig.as_slice()
    );
}

// ---------------------------------------------------------------------------
// 5. Exact rescaling identity
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_rescaling_identity_exhaustive() {
    let shape = LatticeShape::new(3, 72).unwrap();
    let f = TestFunction::new(TestFunctionKind::MollifierBump, 3).unwrap();
    for replica in 0..2u32 {
        let env = sample_environment(
            shape,
            ConductanceLaw::default_tanh(),
            SeedSpec::new(MASTER_SEED, replica),
        );
        let corr = solve_corrector(&env, &[1.0, 0.0, 0.0], 0.0, &SolverConfig::default()).unwrap();
        for &lambda in &[1.0, 0.5, 0.25] {
            for &eps in &[0.25, 0.125, 0.0625, 0.03125] {
                let lhs = phi_eps(&corr, &f, lambda, eps).unwrap().value;
                let r = eps / lambda;
                let rhs = lambda.powf(1.0 - 1.5) * phi_eps(&corr, &f, 1.0, r).unwrap().value;
                assert!(
                    (lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1e-300),
                    "replica {replica}, eps {eps}, lambda {lambda}: {lhs} vs {rhs}"
                );
            }
        }
    }
    println!("acceptance criterion 05 (rescaling identity, exhaustive grid): PASS");
}

// ---------------------------------------------------------------------------
// 6. Kernel homogeneity and isotropic reduction
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_kernel_homogeneity_and_isotropy() {
    // 100 random (x, Q, A_h)
    for s in 0..100u64 {
        let r = |t: u64| standard_normal_from_key(stream_key(&[s, 60, t]));
        let b = DMatrix::from_fn(3, 3, |i, j| r(3 * i as u64 + j as u64));
        let a = &b * b.transpose() + 0.4 * DMatrix::identity(3, 3);
        let c = DMatrix::from_fn(3, 3, |i, j| r(20 + 3 * i as u64 + j as u64));
        let q = &c * c.transpose();
        let model = CovarianceModel::new(a, q).unwrap();
        let x = [r(40) + 0.1, r(41), r(42)];
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let k1 = kernel_k(&model, &x).unwrap();
        let k2 = kernel_k(&model, &x2).unwrap();
        // homogeneity of degree 2 - d = -1
        assert!(
            (k2 - 0.5 * k1).abs() <= 1e-6 * k1.abs().max(1e-300),
            "sample {s}: {k2} vs {}",
            0.5 * k1
        );
    }
    // isotropic reduction K = q G in d = 3
    let q = 2.3;
    let eye = DMatrix::identity(3, 3);
    let model = CovarianceModel::new(eye.clone(), q * &eye).unwrap();
    for s in 0..20u64 {
        let r = |t: u64| standard_normal_from_key(stream_key(&[s, 61, t]));
        let x = [r(0) + 0.05, r(1), r(2)];
        let k = kernel_k(&model, &x).unwrap();
        let g = q * homogenized_green(&eye, &x).unwrap();
        assert!((k - g).abs() <= 1e-6 * g.abs(), "sample {s}: {k} vs {g}");
    }
    println!("acceptance criterion 06 (kernel homogeneity + isotropic reduction): PASS");
}

// ---------------------------------------------------------------------------
// Joint campaign shared by criteria 7, 8 and 11
// ---------------------------------------------------------------------------

struct Joint {
    campaign: Campaign,
    f: TestFunction,
    qfit: QFit,
    model: CovarianceModel,
    sigma2_continuum: f64,
    noise_floor: f64,
    stein: Vec<SteinBoundReport>,
}

fn run_joint(l: usize, eps_list: Vec<f64>, n_replicas: usize, stein_replicas: usize) -> Joint {
    let shape = LatticeShape::new(3, l).unwrap();
    let law = ConductanceLaw::default_tanh();
    let mut params = CampaignParams::new(shape, law, MASTER_SEED);
    params.eps_list = eps_list;
    params.n_replicas = n_replicas;
    params.collect_covariance = true;
    let campaign = mc_campaign(&params).unwrap();

    let est = ensemble_effective_matrix(shape, law, MASTER_SEED, 16, 0.0, &SolverConfig::default())
        .unwrap();
    let cov = campaign.covariance.as_ref().unwrap();
    let table = cov.table(&shell_offsets(shape, 4.0, 10.0)).unwrap();
    let qfit = fit_q(&table, &est.mean).unwrap();
    let model = CovarianceModel::new(est.mean.clone(), qfit.model.q.clone()).unwrap();
    let f = TestFunction::new(TestFunctionKind::MollifierBump, 3).unwrap();
    let (sigma2_continuum, _) = sigma2(&model, &f, 1.0).unwrap();
    let noise_floor = gaussian_w1_noise_floor(n_replicas, 200, MASTER_SEED, 0.9);

    let stein = stein_bounds(&SteinParams {
        shape,
        law,
        xi: vec![1.0, 0.0, 0.0],
        mu: 0.0,
        f_kind: TestFunctionKind::MollifierBump,
        lambda: 1.0,
        eps_list: campaign.params.eps_list.clone(),
        n_replicas: stein_replicas,
        master_seed: MASTER_SEED,
        truncation_radius: 12.0,
        anchor_count: 48,
        solver: SolverConfig::default(),
    })
    .unwrap();

    Joint { campaign, f, qfit, model, sigma2_continuum, noise_floor, stein }
}

static JOINT: Lazy<Joint> = Lazy::new(|| run_joint(64, vec![0.25, 0.125, 0.0625], 200, 32));

fn variance_convergence_checks(joint: &Joint, shape: LatticeShape, widen: f64) {
    let reports: Vec<&StatsReport> = {
        let mut r: Vec<&StatsReport> = joint.campaign.reports.iter().collect();
        r.sort_by(|a, b| b.eps.partial_cmp(&a.eps).unwrap());
        r
    };
    assert!(joint.qfit.rel_residual < 0.1, "covariance fit residual {}", joint.qfit.rel_residual);

    // consecutive variance estimates agree within (widened) intervals
    for pair in reports.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (alo, ahi) = widen_sq(a, widen);
        let (blo, bhi) = widen_sq(b, widen);
        assert!(
            alo.max(blo) <= ahi.min(bhi),
            "variance intervals at eps {} and {} do not overlap: ({alo:.3e},{ahi:.3e}) vs ({blo:.3e},{bhi:.3e})",
            a.eps,
            b.eps
        );
    }

    // the fitted-Q finite-volume prediction matches every estimate, the
    // smallest-eps one within its unwidened interval
    let mut torus_preds = Vec::new();
    for (i, rep) in reports.iter().enumerate() {
        let pred = sigma2_torus(&joint.model, &joint.f, 1.0, rep.eps, shape).unwrap();
        torus_preds.push(pred);
        let (lo, hi) = widen_sq(rep, widen);
        assert!(
            pred >= lo && pred <= hi,
            "eps {}: finite-volume prediction {pred:.3e} outside ({lo:.3e}, {hi:.3e})",
            rep.eps
        );
        if i == reports.len() - 1 {
            let (lo1, hi1) = widen_sq(rep, 1.0);
            assert!(
                pred >= lo1 && pred <= hi1,
                "smallest eps {}: prediction {pred:.3e} outside unwidened ({lo1:.3e}, {hi1:.3e})",
                rep.eps
            );
        }
    }

    // predictions increase monotonically toward the continuum value as εL
    // grows (reports are in decreasing eps = decreasing εL... increasing eps
    // = increasing εL; reports[0] has the largest eps)
    for w in torus_preds.windows(2) {
        // torus_preds follows decreasing eps, so values must decrease
        assert!(w[0] >= w[1], "finite-volume predictions not monotone in εL: {torus_preds:?}");
    }
    for &pred in &torus_preds {
        assert!(
            pred <= joint.sigma2_continuum,
            "finite-volume prediction {pred:.3e} above the continuum value {:.3e}",
            joint.sigma2_continuum
        );
    }
    println!(
        "  sigma_eps^2 = {:?}",
        reports.iter().map(|r| r.sigma_eps.powi(2)).collect::<Vec<_>>()
    );
    println!("  finite-volume predictions = {torus_preds:?}");
    println!("  continuum sigma2(f) = {:.6e}", joint.sigma2_continuum);
}

fn widen_sq(rep: &StatsReport, widen: f64) -> (f64, f64) {
    let lo = rep.sigma_eps_ci.0.powi(2);
    let hi = rep.sigma_eps_ci.1.powi(2);
    let mid = rep.sigma_eps.powi(2);
    (mid - widen * (mid - lo), mid + widen * (hi - mid))
}

#[test]
fn criterion_07_variance_convergence_smoke() {
    let joint = &*JOINT;
    let shape = LatticeShape::new(3, 64).unwrap();
    variance_convergence_checks(joint, shape, 2.0);
    println!("acceptance criterion 07 (variance convergence, L=64 smoke, 2x tolerances): PASS");
}

#[test]
#[ignore = "overnight budget: L=128, 200 replicas"]
fn criterion_07_variance_convergence_full() {
    let joint = run_joint(128, vec![0.25, 0.125, 0.0625, 0.03125], 200, 32);
    let shape = LatticeShape::new(3, 128).unwrap();
    variance_convergence_checks(&joint, shape, 1.0);
    println!("acceptance criterion 07 (variance convergence, L=128 full): PASS");
}

// ---------------------------------------------------------------------------
// 8. Gaussianity rate
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_gaussianity_rate() {
    let joint = &*JOINT;
    let mut eps = Vec::new();
    let mut dks = Vec::new();
    for r in &joint.campaign.reports {
        eps.push(r.eps);
        dks.push(r.dk);
    }
    let fit = rate_fit(3, &eps, &dks, joint.noise_floor).unwrap();
    match &fit.status {
        FitStatus::Ok => {
            let slope = fit.slope.unwrap();
            assert!(
                (0.7..=1.3).contains(&slope),
                "rate slope {slope} outside 1 +- 0.3 (r2 {:?})",
                fit.r2
            );
            println!(
                "acceptance criterion 08 (gaussianity rate): PASS, slope {slope:.3}, r2 {:.3}",
                fit.r2.unwrap()
            );
        }
        FitStatus::Inconclusive { reason } => {
            // fewer than 3 points above the noise floor: the report must
            // carry the fit inputs, the mask and the floor instead of a
            // bare pass/fail
            assert_eq!(fit.eps_grid.len(), eps.len());
            assert_eq!(fit.mask.len(), eps.len());
            assert!(fit.noise_floor > 0.0);
            assert!(fit.slope.is_none() && fit.r2.is_none());
            assert!(!reason.is_empty());
            println!(
                "acceptance criterion 08 (gaussianity rate): PASS via inconclusive report \
                 (dK = {dks:?}, floor {:.4}, mask {:?})",
                joint.noise_floor, fit.mask
            );
        }
    }
}

// ---------------------------------------------------------------------------
// 9. Derivatives vs finite differences
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_derivatives_vs_finite_differences() {
    let tight = SolverConfig { rel_tol: 1e-12, max_iter: 20_000, ..Default::default() };
    let f = TestFunction::new(TestFunctionKind::MollifierBump, 3).unwrap();
    let phi_value = |env: &Environment, lambda: f64, eps: f64| -> f64 {
        let corr = solve_corrector(env, &[1.0, 0.0, 0.0], 0.0, &tight).unwrap();
        phi_eps(&corr, &f, lambda, eps).unwrap().value
    };

    // first order: 20 random edges, d=3, L=8, tolerance 1e-5 relative
    {
        let shape = LatticeShape::new(3, 8).unwrap();
        let env =
            sample_environment(shape, ConductanceLaw::default_tanh(), SeedSpec::new(MASTER_SEED, 0));
        let corr = solve_corrector(&env, &[1.0, 0.0, 0.0], 0.0, &tight).unwrap();
        let (lambda, eps) = (1.0, 0.5);
        let u = adjoint_field(&env, &f, lambda, eps, 0.0, &tight).unwrap();
        let d1 = first_derivatives_all_edges(&env, &corr, &u);
        let h = 1e-4;
        for k in 0..20u64 {
            let e = EdgeId::from_flat(
                &shape,
                (stream_key(&[700, k]) % shape.n_edges() as u64) as usize,
            );
            let plus = phi_value(&env.perturb_edge(e, h), lambda, eps);
            let minus = phi_value(&env.perturb_edge(e, -h), lambda, eps);
            let fd = (plus - minus) / (2.0 * h);
            let an = d1.values.at(e);
            assert!(
                (fd - an).abs() <= 1e-5 * an.abs().max(1e-12),
                "edge {k}: fd {fd} vs analytic {an}"
            );
        }
    }

    // second order: 5 nearby pairs, d=3, L=6, tolerance 1e-3 relative
    {
        let shape = LatticeShape::new(3, 6).unwrap();
        let env =
            sample_environment(shape, ConductanceLaw::default_tanh(), SeedSpec::new(MASTER_SEED, 1));
        let corr = solve_corrector(&env, &[1.0, 0.0, 0.0], 0.0, &tight).unwrap();
        let (lambda, eps) = (1.0, 0.5);
        let u = adjoint_field(&env, &f, lambda, eps, 0.0, &tight).unwrap();
        let h = 1e-3;
        for k in 0..5u64 {
            let base = (stream_key(&[701, k]) % shape.n_vertices() as u64) as usize;
            let ep = EdgeId::new(base, (k % 3) as usize);
            let e = EdgeId::new(shape.up(base, (k as usize + 1) % 3), ((k + 2) % 3) as usize);
            let row = second_derivative_row(&env, &corr, &u, ep, &tight).unwrap();
            let pp = phi_value(&env.perturb_edge(e, h).perturb_edge(ep, h), lambda, eps);
            let pm = phi_value(&env.perturb_edge(e, h).perturb_edge(ep, -h), lambda, eps);
            let mp = phi_value(&env.perturb_edge(e, -h).perturb_edge(ep, h), lambda, eps);
            let mm = phi_value(&env.perturb_edge(e, -h).perturb_edge(ep, -h), lambda, eps);
            let fd = (pp - pm - mp + mm) / (4.0 * h * h);
            let an = row.values.at(e);
            assert!(
                (fd - an).abs() <= 1e-3 * an.abs().max(1e-10),
                "pair {k}: fd {fd} vs analytic {an}"
            );
        }
    }
    println!("acceptance criterion 09 (derivatives vs finite differences): PASS");
}

// ---------------------------------------------------------------------------
// 10. Decay exponents
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_decay_exponents() {
    let shape = LatticeShape::new(3, 32).unwrap();
    let law = ConductanceLaw::default_tanh();
    let xi = [1.0, 0.0, 0.0];
    let first =
        decay_fit_first_derivative(shape, law, &xi, 64, MASTER_SEED, &SolverConfig::default())
            .unwrap();
    let e1 = first.exponent.expect("first-derivative fit conclusive");
    assert!(
        (-2.3..=-1.7).contains(&e1),
        "first-derivative exponent {e1} outside -(d-1) +- 0.3"
    );
    let second =
        decay_fit_second_derivative(shape, law, &xi, 64, MASTER_SEED, &SolverConfig::default())
            .unwrap();
    let e2 = second.exponent.expect("second-derivative fit conclusive");
    assert!((-3.4..=-2.6).contains(&e2), "mixed exponent {e2} outside -d +- 0.4");
    println!(
        "acceptance criterion 10 (decay exponents {e1:.3} vs -2, {e2:.3} vs -3): PASS"
    );
}

// ---------------------------------------------------------------------------
// 11. Normal-approximation bound dominates the measured distance
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_bound_dominates_measured_distance() {
    let joint = &*JOINT;
    for rep in &joint.stein {
        let stats = joint
            .campaign
            .reports
            .iter()
            .find(|r| r.eps == rep.eps)
            .expect("matching eps in campaign");
        let slack =
            (stats.dk_ci.1 - stats.dk_ci.0) / 2.0 + rep.bound_stderr + joint.noise_floor;
        assert!(
            stats.dk <= rep.bound + slack,
            "eps {}: dK {:.4} exceeds bound {:.4} + uncertainty {:.4}",
            rep.eps,
            stats.dk,
            rep.bound,
            slack
        );
        println!(
            "  eps {}: dK {:.4} <= bound {:.4} (+ slack {:.4}, tail {:.2e})",
            rep.eps, stats.dk, rep.bound, slack, rep.tail_estimate
        );
    }
    println!("acceptance criterion 11 (bound dominance on the joint campaign): PASS");
}

// ---------------------------------------------------------------------------
// 12. Moment scaling in λ
// ---------------------------------------------------------------------------

#[test]
fn criterion_12_moment_scaling_flat_in_lambda() {
    let shape = LatticeShape::new(3, 32).unwrap();
    let mut params = CampaignParams::new(shape, ConductanceLaw::default_tanh(), MASTER_SEED);
    params.lambdas = vec![1.0, 0.5, 0.25];
    params.eps_list = vec![0.125];
    params.n_replicas = 200;
    let campaign = mc_campaign(&params).unwrap();
    let table = moment_scan(&campaign.sets, &[2, 4], 3, 400).unwrap();
    for &p in &[2u32, 4] {
        let vals: Vec<f64> =
            table.rows.iter().filter(|r| r.p == p).map(|r| r.normalized).collect();
        assert_eq!(vals.len(), 3);
        let max = vals.iter().cloned().fold(f64::MIN, f64::max);
        let min = vals.iter().cloned().fold(f64::MAX, f64::min);
        assert!(
            max / min <= 2.0,
            "p = {p}: normalized moments {vals:?} vary by more than 2x"
        );
        println!("  p = {p}: normalized moments over lambda {{1, 1/2, 1/4}}: {vals:?}");
    }
    println!("acceptance criterion 12 (moment scaling flat in lambda): PASS");
}

// ---------------------------------------------------------------------------
// 13. Convolution-bound scans
// ---------------------------------------------------------------------------

#[test]
fn criterion_13_lemma_scans() {
    // ε = 1 hand-countable case, exact
    let check = boundlab::xesum_check(3, &[2, 0, 0], 1.0).unwrap();
    let expect = (1.0f64 + 2.0).powi(-2)
        + (1.0f64 + 1.0).powi(-2)
        + (1.0f64 + 3.0).powi(-2)
        + 4.0 * (1.0 + 5.0f64.sqrt()).powi(-2);
    assert_eq!(check.lhs, expect);

    // finite, stable max ratios under grid refinement (< 20% drift)
    let coarse = boundlab::xesum_scan(3, &[0.125, 0.03125]).unwrap();
    let fine = boundlab::xesum_scan(3, &[0.125, 0.0625, 0.03125, 0.015625]).unwrap();
    assert!(coarse.max_ratio.is_finite() && fine.max_ratio.is_finite());
    let drift = (fine.max_ratio - coarse.max_ratio).abs() / coarse.max_ratio;
    assert!(drift < 0.2, "ball-sum max ratio drift {drift}");

    let coarse = boundlab::eepsum_scan(3, &[0.125, 0.03125], &[4.0, 3.0]).unwrap();
    let fine = boundlab::eepsum_scan(3, &[0.125, 0.0625, 0.03125], &[4.0, 3.0]).unwrap();
    let drift = (fine.max_ratio - coarse.max_ratio).abs() / coarse.max_ratio;
    assert!(drift < 0.2, "pair-sum max ratio drift {drift}");
    println!(
        "acceptance criterion 13 (lemma scans, max ratios {:.3} / {:.3}): PASS",
        fine.max_ratio, coarse.max_ratio
    );
}

// criterion 14 (byte-identical reruns of the same config) is exercised
// end-to-end against the binary in crates/cli/tests/cli.rs.
