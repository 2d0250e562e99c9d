//! Subcommand implementations. Every command materializes its outputs
//! under a content-addressed directory and returns a JSON summary for the
//! manifest; data files are byte-deterministic, timestamps live only in
//! the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use corrlab_core::error::{Error, Result};
use corrlab_core::scaling::{
    fit_q, shell_offsets, sigma2, CovarianceModel, TestFunction, TestFunctionKind,
};
use corrlab_core::stats::{
    gaussian_w1_noise_floor, mc_campaign, moment_scan, rate_fit, Campaign, CampaignParams,
    FitStatus,
};
use corrlab_core::stein::{stein_bounds, SteinParams};
use corrlab_core::{
    basis_correctors, boundlab, effective_matrix, sample_environment, save_environment,
    solve_corrector, CorrectorSolution, SeedSpec,
};
use serde_json::{json, Value};

use crate::config::ExperimentConfig;

/// What a command hands back for the manifest.
pub struct Outcome {
    pub outputs: Vec<String>,
    pub summary: Value,
    pub inconclusive: bool,
}

impl Outcome {
    fn new(summary: Value, outputs: Vec<String>) -> Self {
        Self { outputs, summary, inconclusive: false }
    }
}

fn write_output(dir: &Path, name: &str, contents: &str, outputs: &mut Vec<String>) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    outputs.push(name.to_string());
    Ok(())
}

fn test_function(cfg: &ExperimentConfig) -> Result<TestFunction> {
    TestFunction::new(TestFunctionKind::MollifierBump, cfg.d)
}

/// Largest admissible ε subset for the widest λ in the grid; empty grids
/// are a guard violation.
fn admissible_eps(cfg: &ExperimentConfig, f: &TestFunction) -> Result<Vec<f64>> {
    let shape = cfg.shape()?;
    let lambda_max = cfg.lambda_list.iter().cloned().fold(0.0f64, f64::max);
    let eps: Vec<f64> = cfg
        .eps_list
        .iter()
        .cloned()
        .filter(|&e| corrlab_core::scaling::weight_field(shape, f, lambda_max, e).is_ok())
        .collect();
    if eps.is_empty() {
        return Err(Error::Precondition(format!(
            "no eps in {:?} is admissible at L = {} for lambda = {lambda_max}",
            cfg.eps_list, cfg.l
        )));
    }
    Ok(eps)
}

fn campaign_params(cfg: &ExperimentConfig, lambdas: Vec<f64>, eps: Vec<f64>) -> Result<CampaignParams> {
    Ok(CampaignParams {
        shape: cfg.shape()?,
        law: cfg.law,
        xi: cfg.xi.clone(),
        mu: cfg.mu,
        f_kind: TestFunctionKind::MollifierBump,
        lambdas,
        eps_list: eps,
        n_replicas: cfg.n_replicas,
        master_seed: cfg.master_seed,
        solver: cfg.solver,
        collect_covariance: false,
        bootstrap_resamples: 1000,
    })
}

// ---------------------------------------------------------------------------

pub fn gen_env(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let shape = cfg.shape()?;
    let env = sample_environment(shape, cfg.law, SeedSpec::new(cfg.master_seed, 0));
    save_environment(&env, dir)?;
    let (amin, amax) = env
        .a
        .values
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let summary = json!({
        "edges": shape.n_edges(),
        "a_min_observed": amin,
        "a_max_observed": amax,
        "a_deriv_sup": env.law.deriv_sup(),
        "a_deriv2_sup": env.law.deriv2_sup(),
    });
    Ok(Outcome::new(
        summary,
        vec!["zeta.bin".into(), "a.bin".into(), "environment.json".into()],
    ))
}

pub fn solve_corrector_cmd(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let shape = cfg.shape()?;
    let env = sample_environment(shape, cfg.law, SeedSpec::new(cfg.master_seed, 0));
    let corr = solve_corrector(&env, &cfg.xi, cfg.mu, &cfg.solver)?;
    let mut outputs = Vec::new();
    let mut file = fs::File::create(dir.join("phi.bin"))?;
    corr.phi.write_dump(&mut file)?;
    outputs.push("phi.bin".into());
    write_output(
        dir,
        "corrector.json",
        &serde_json::to_string_pretty(&corr.manifest()).unwrap(),
        &mut outputs,
    )?;
    let summary = json!({
        "residual": corr.residual,
        "phi_max_abs": corr.phi.max_abs(),
        "phi_mean": corr.phi.mean(),
    });
    Ok(Outcome::new(summary, outputs))
}

pub fn effective_matrix_cmd(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let shape = cfg.shape()?;
    let est = corrlab_core::ensemble_effective_matrix(
        shape,
        cfg.law,
        cfg.master_seed,
        cfg.n_replicas,
        cfg.mu,
        &cfg.solver,
    )?;
    let mut csv = String::from("j,k,mean,stderr\n");
    for j in 0..cfg.d {
        for k in 0..cfg.d {
            csv.push_str(&format!("{},{},{},{}\n", j, k, est.mean[(j, k)], est.stderr[(j, k)]));
        }
    }
    let mut outputs = Vec::new();
    write_output(dir, "effective_matrix.csv", &csv, &mut outputs)?;
    let eig = est.mean.clone().symmetric_eigen().eigenvalues;
    let summary = json!({
        "n_replicas": est.n_replicas,
        "eigenvalues": eig.iter().cloned().collect::<Vec<f64>>(),
        "matrix": matrix_rows(&est.mean),
        "stderr": matrix_rows(&est.stderr),
    });
    Ok(Outcome::new(summary, outputs))
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|j| (0..m.ncols()).map(|k| m[(j, k)]).collect()).collect()
}

pub fn sample_field(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let f = test_function(cfg)?;
    let eps = admissible_eps(cfg, &f)?;
    let params = campaign_params(cfg, cfg.lambda_list.clone(), eps)?;
    let campaign = mc_campaign(&params)?;
    let mut csv = String::from("replica,eps,lambda,value\n");
    for set in &campaign.sets {
        for (r, v) in set.values.iter().enumerate() {
            csv.push_str(&format!("{},{},{},{}\n", r, set.eps, set.lambda, v));
        }
    }
    let mut outputs = Vec::new();
    write_output(dir, "samples.csv", &csv, &mut outputs)?;
    let summary = json!({
        "n_replicas": cfg.n_replicas,
        "pairs": campaign.sets.len(),
        "eps_used": campaign.params.eps_list,
    });
    Ok(Outcome::new(summary, outputs))
}

pub fn stats_cmd(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let f = test_function(cfg)?;
    let eps = admissible_eps(cfg, &f)?;
    let lambda = cfg.lambda_list[0];
    let params = campaign_params(cfg, vec![lambda], eps)?;
    let campaign = mc_campaign(&params)?;
    let mut outputs = Vec::new();
    write_output(dir, "stats.csv", &campaign.to_csv(lambda), &mut outputs)?;
    let (fit, floor) = fit_rate(cfg, &campaign, lambda)?;
    write_output(dir, "rate_fit.json", &serde_json::to_string_pretty(&fit).unwrap(), &mut outputs)?;
    let inconclusive = !matches!(fit.status, FitStatus::Ok);
    let summary = json!({
        "lambda": lambda,
        "noise_floor": floor,
        "rate_fit_status": fit.status,
        "reports": campaign.reports,
    });
    Ok(Outcome { outputs, summary, inconclusive })
}

fn fit_rate(
    cfg: &ExperimentConfig,
    campaign: &Campaign,
    lambda: f64,
) -> Result<(corrlab_core::stats::RateFit, f64)> {
    let floor = gaussian_w1_noise_floor(cfg.n_replicas, 200, cfg.master_seed, 0.9);
    let mut eps = Vec::new();
    let mut dks = Vec::new();
    for r in campaign.reports.iter().filter(|r| r.lambda == lambda && !r.degenerate) {
        eps.push(r.eps);
        dks.push(r.dk);
    }
    if eps.is_empty() {
        // degenerate everywhere (constant law): report an inconclusive fit
        return Ok((
            corrlab_core::stats::RateFit {
                eps_grid: vec![],
                dk_values: vec![],
                mask: vec![],
                noise_floor: floor,
                slope: None,
                intercept: None,
                r2: None,
                status: FitStatus::Inconclusive { reason: "all sample sets degenerate".into() },
            },
            floor,
        ));
    }
    Ok((rate_fit(cfg.d, &eps, &dks, floor)?, floor))
}

pub fn moment_scan_cmd(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let f = test_function(cfg)?;
    let eps = admissible_eps(cfg, &f)?;
    let params = campaign_params(cfg, cfg.lambda_list.clone(), eps)?;
    let campaign = mc_campaign(&params)?;
    let table = moment_scan(&campaign.sets, &cfg.p_list, cfg.d, 1000)?;
    let mut outputs = Vec::new();
    write_output(dir, "moments.csv", &table.to_csv(), &mut outputs)?;
    write_output(dir, "moments.json", &serde_json::to_string_pretty(&table).unwrap(), &mut outputs)?;
    Ok(Outcome::new(json!({"rows": table.rows.len()}), outputs))
}

/// Covariance shell bounds: [4, min(10, L/4)] keeps the fit away from
/// both the local lattice scale and the periodization boundary.
fn covariance_shell(l: usize) -> (f64, f64) {
    (4.0, 10.0f64.min(l as f64 / 4.0))
}

pub fn covariance_cmd(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let shape = cfg.shape()?;
    if cfg.n_replicas < 2 {
        return Err(Error::Precondition("covariance needs at least 2 replicas".into()));
    }
    // per replica: basis correctors give A_h; the xi-corrector feeds Ĉ
    let is_basis = cfg.xi.iter().filter(|&&x| x != 0.0).count() == 1
        && cfg.xi.iter().any(|&x| x == 1.0);
    let mut acc = corrlab_core::scaling::CovarianceAccumulator::new(shape);
    let mut a_sum = nalgebra::DMatrix::<f64>::zeros(cfg.d, cfg.d);
    use rayon::prelude::*;
    const CHUNK: usize = 8;
    let mut done = 0usize;
    while done < cfg.n_replicas {
        let hi = (done + CHUNK).min(cfg.n_replicas);
        let chunk: Vec<Result<(nalgebra::DMatrix<f64>, CorrectorSolution)>> = (done..hi)
            .into_par_iter()
            .map(|r| {
                let env =
                    sample_environment(shape, cfg.law, SeedSpec::new(cfg.master_seed, r as u32));
                let basis = basis_correctors(&env, cfg.mu, &cfg.solver)?;
                let a_h = effective_matrix(&env, &basis)?;
                let xi_corr = if is_basis {
                    let axis = cfg.xi.iter().position(|&x| x == 1.0).unwrap();
                    basis[axis].clone()
                } else {
                    solve_corrector(&env, &cfg.xi, cfg.mu, &cfg.solver)?
                };
                Ok((a_h, xi_corr))
            })
            .collect();
        for item in chunk {
            let (a_h, corr) = item?;
            a_sum += a_h;
            acc.add(&corr.phi);
        }
        done = hi;
    }
    let a_mean = a_sum / cfg.n_replicas as f64;
    let (r_min, r_max) = covariance_shell(cfg.l);
    let table = acc.table(&shell_offsets(shape, r_min, r_max))?;
    let mut outputs = Vec::new();
    write_output(dir, "covariance.csv", &table.to_csv(), &mut outputs)?;
    let fit_json = match fit_q(&table, &a_mean) {
        Ok(fit) => json!({
            "q": matrix_rows(&fit.model.q),
            "a_h": matrix_rows(&a_mean),
            "offset": fit.offset,
            "rel_residual": fit.rel_residual,
            "n_points": fit.n_points,
            "shell": [r_min, r_max],
            "note": "Q is a least-squares fit to the measured covariance, not the model's exact matrix",
        }),
        // the table is still useful on lattices too small for the fit
        Err(Error::Precondition(reason)) => json!({
            "a_h": matrix_rows(&a_mean),
            "fit_skipped": reason,
        }),
        Err(e) => return Err(e),
    };
    write_output(dir, "q_fit.json", &serde_json::to_string_pretty(&fit_json).unwrap(), &mut outputs)?;
    Ok(Outcome::new(fit_json, outputs))
}

pub fn stein_bound_cmd(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let f = test_function(cfg)?;
    let eps = admissible_eps(cfg, &f)?;
    let params = SteinParams {
        shape: cfg.shape()?,
        law: cfg.law,
        xi: cfg.xi.clone(),
        mu: cfg.mu,
        f_kind: TestFunctionKind::MollifierBump,
        lambda: cfg.lambda_list[0],
        eps_list: eps,
        n_replicas: cfg.n_replicas,
        master_seed: cfg.master_seed,
        truncation_radius: cfg.stein_radius(),
        anchor_count: cfg.stein.anchor_sample_size,
        solver: cfg.solver,
    };
    let reports = stein_bounds(&params)?;
    let mut csv =
        String::from("eps,bound,bound_stderr,tail_estimate,sigma_eps,anchors,replicas\n");
    for r in &reports {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.eps, r.bound, r.bound_stderr, r.tail_estimate, r.sigma_eps, r.sampled_anchors,
            r.mc_replicas
        ));
    }
    let mut outputs = Vec::new();
    write_output(dir, "stein.csv", &csv, &mut outputs)?;
    write_output(dir, "stein.json", &serde_json::to_string_pretty(&reports).unwrap(), &mut outputs)?;
    Ok(Outcome::new(json!({"reports": reports}), outputs))
}

/// Scan grids per dimension, inside the exact-enumeration guards.
fn lemma_grids(d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let xe = match d {
        3 => vec![0.125, 0.0625, 0.03125, 0.015625],
        4 => vec![0.125, 0.0625, 0.03125],
        _ => vec![0.125, 0.0625],
    };
    let eep = match d {
        3 => vec![0.125, 0.0625, 0.03125],
        4 => vec![0.125, 0.0625],
        _ => vec![0.125],
    };
    let p = vec![2.0 * (d as f64 - 1.0), d as f64];
    (xe, eep, p)
}

pub fn lemma_check(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let (xe_grid, eep_grid, p_grid) = lemma_grids(cfg.d);
    let xe = boundlab::xesum_scan(cfg.d, &xe_grid)?;
    let eep = boundlab::eepsum_scan(cfg.d, &eep_grid, &p_grid)?;
    let mut outputs = Vec::new();
    write_output(dir, "lemma_ball_sum.csv", &xe.to_csv(), &mut outputs)?;
    write_output(dir, "lemma_pair_sum.csv", &eep.to_csv(), &mut outputs)?;
    let summary = json!({
        "ball_sum_max_ratio": xe.max_ratio,
        "ball_sum_argmax": xe.rows[xe.argmax],
        "pair_sum_max_ratio": eep.max_ratio,
        "pair_sum_argmax": eep.rows[eep.argmax],
    });
    write_output(dir, "lemma_summary.json", &serde_json::to_string_pretty(&summary).unwrap(), &mut outputs)?;
    Ok(Outcome::new(summary, outputs))
}

pub fn full_campaign(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let f = test_function(cfg)?;
    let eps = admissible_eps(cfg, &f)?;
    let mut params = campaign_params(cfg, cfg.lambda_list.clone(), eps)?;
    params.collect_covariance = true;
    let campaign = mc_campaign(&params)?;
    let mut outputs = Vec::new();
    let mut summary = serde_json::Map::new();
    let mut inconclusive = false;

    for &lambda in &cfg.lambda_list {
        write_output(
            dir,
            &format!("stats_lambda_{lambda}.csv"),
            &campaign.to_csv(lambda),
            &mut outputs,
        )?;
    }

    // rate fit at the widest test function
    let lambda0 = cfg.lambda_list[0];
    let (fit, floor) = fit_rate(cfg, &campaign, lambda0)?;
    write_output(dir, "rate_fit.json", &serde_json::to_string_pretty(&fit).unwrap(), &mut outputs)?;
    if !matches!(fit.status, FitStatus::Ok) {
        inconclusive = true;
    }
    summary.insert("noise_floor".into(), json!(floor));
    summary.insert("rate_fit_status".into(), json!(fit.status));

    // moments
    let table = moment_scan(&campaign.sets, &cfg.p_list, cfg.d, 1000)?;
    write_output(dir, "moments.csv", &table.to_csv(), &mut outputs)?;

    // effective matrix on a bounded sub-ensemble
    let ens_n = cfg.n_replicas.clamp(2, 32);
    let est = corrlab_core::ensemble_effective_matrix(
        cfg.shape()?,
        cfg.law,
        cfg.master_seed,
        ens_n,
        cfg.mu,
        &cfg.solver,
    )?;
    summary.insert("a_h".into(), json!(matrix_rows(&est.mean)));

    // covariance fit and the variance-convergence comparison
    if cfg.l >= 32 {
        let (r_min, r_max) = covariance_shell(cfg.l);
        let cov = campaign.covariance.as_ref().expect("covariance collected");
        let table = cov.table(&shell_offsets(cfg.shape()?, r_min, r_max))?;
        write_output(dir, "covariance.csv", &table.to_csv(), &mut outputs)?;
        let qfit = fit_q(&table, &est.mean)?;
        let model = CovarianceModel::new(est.mean.clone(), qfit.model.q.clone())?;
        let mut rows = Vec::new();
        for &lambda in &cfg.lambda_list {
            let (pred, quad_err) = match sigma2(&model, &f, lambda) {
                Ok(v) => v,
                Err(Error::Config(_)) => break, // d != 3
                Err(e) => return Err(e),
            };
            let smallest = campaign
                .reports
                .iter()
                .filter(|r| r.lambda == lambda)
                .min_by(|a, b| a.eps.partial_cmp(&b.eps).unwrap());
            if let Some(rep) = smallest {
                let ci = (rep.sigma_eps_ci.0.powi(2), rep.sigma_eps_ci.1.powi(2));
                rows.push(json!({
                    "lambda": lambda,
                    "sigma2_predicted": pred,
                    "quad_err": quad_err,
                    "smallest_eps": rep.eps,
                    "sigma_eps_sq": rep.sigma_eps.powi(2),
                    "sigma_eps_sq_ci": ci,
                    "contained": pred >= ci.0 && pred <= ci.1,
                }));
            }
        }
        let qjson = json!({
            "q": matrix_rows(&qfit.model.q),
            "offset": qfit.offset,
            "rel_residual": qfit.rel_residual,
            "variance_convergence": rows,
        });
        write_output(dir, "q_fit.json", &serde_json::to_string_pretty(&qjson).unwrap(), &mut outputs)?;
        summary.insert("q_fit".into(), qjson);

        // sigma2 report: eps = 0 rows carry the continuum value with its
        // quadrature error, finite-eps rows the exact lattice mode sum
        let mut csv = String::from("lambda,eps,sigma2,quad_err\n");
        for &lambda in &cfg.lambda_list {
            match sigma2(&model, &f, lambda) {
                Ok((value, err)) => csv.push_str(&format!("{lambda},0,{value},{err}\n")),
                Err(Error::Config(_)) => break,
                Err(e) => return Err(e),
            }
            for &eps in &campaign.params.eps_list {
                let v = corrlab_core::scaling::sigma2_torus(&model, &f, lambda, eps, cfg.shape()?)?;
                csv.push_str(&format!("{lambda},{eps},{v},0\n"));
            }
        }
        write_output(dir, "sigma2.csv", &csv, &mut outputs)?;
    }

    // derivative decay tables
    if cfg.n_replicas >= 16 {
        let decay_n = cfg.n_replicas.min(64);
        let first = corrlab_core::stein::decay_fit_first_derivative(
            cfg.shape()?,
            cfg.law,
            &cfg.xi,
            decay_n,
            cfg.master_seed,
            &cfg.solver,
        )?;
        write_output(dir, "decay_first.csv", &first.to_csv(), &mut outputs)?;
        let second = corrlab_core::stein::decay_fit_second_derivative(
            cfg.shape()?,
            cfg.law,
            &cfg.xi,
            decay_n,
            cfg.master_seed,
            &cfg.solver,
        )?;
        write_output(dir, "decay_second.csv", &second.to_csv(), &mut outputs)?;
        summary.insert(
            "decay_exponents".into(),
            json!({"first": first.exponent, "second": second.exponent,
                   "first_status": first.status, "second_status": second.status}),
        );
    }

    // normal-approximation bound and the dominance comparison
    if cfg.n_replicas >= 16 {
        let stein_params = SteinParams {
            shape: cfg.shape()?,
            law: cfg.law,
            xi: cfg.xi.clone(),
            mu: cfg.mu,
            f_kind: TestFunctionKind::MollifierBump,
            lambda: lambda0,
            eps_list: campaign.params.eps_list.clone(),
            n_replicas: cfg.n_replicas,
            master_seed: cfg.master_seed,
            truncation_radius: cfg.stein_radius(),
            anchor_count: cfg.stein.anchor_sample_size,
            solver: cfg.solver,
        };
        let reports = stein_bounds(&stein_params)?;
        write_output(dir, "stein.json", &serde_json::to_string_pretty(&reports).unwrap(), &mut outputs)?;
        let mut rows = Vec::new();
        for rep in &reports {
            let stats = campaign
                .reports
                .iter()
                .find(|r| r.lambda == lambda0 && r.eps == rep.eps)
                .expect("matching eps");
            let slack = (stats.dk_ci.1 - stats.dk_ci.0) / 2.0 + rep.bound_stderr + floor;
            rows.push(json!({
                "eps": rep.eps,
                "dk": stats.dk,
                "bound": rep.bound,
                "combined_uncertainty": slack,
                "dominated": stats.dk <= rep.bound + slack,
            }));
        }
        write_output(dir, "dominance.json", &serde_json::to_string_pretty(&rows).unwrap(), &mut outputs)?;
        summary.insert("dominance".into(), Value::Array(rows));
    }

    // deterministic lemma scans
    let lemma = lemma_check(cfg, dir)?;
    outputs.extend(lemma.outputs);
    summary.insert("lemma".into(), lemma.summary);

    Ok(Outcome { outputs, summary: Value::Object(summary), inconclusive })
}

/// Resolve the content-addressed output directory for a subcommand.
pub fn prepare_outdir(cfg: &ExperimentConfig, subcommand: &str) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.output_dir).join(format!("{subcommand}-{}", cfg.short_hash()));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}
