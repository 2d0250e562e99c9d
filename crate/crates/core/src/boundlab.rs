//! Deterministic verification of the two convolution-sum bounds used by
//! the normal-approximation argument:
//!
//!   (A)  Σ_{|x| <= 1/ε} (1 + |x-e|)^{1-d}          <=  C ε⁻¹ / (1+|εe|)^{d-1}
//!   (B)  Σ_e (1+|e-e'|)^{-d} (1+|εe|)^{-p}         <=  C ( |log ε| / (1+|εe'|)^d
//!                                                       + |log ε| / (1+|εe'|)^p )
//!
//! Left-hand sides are exact lattice sums (Euclidean balls, integer
//! enumeration); for (B) the sum is truncated at a radius >= 4/ε and a
//! conservative integral-comparison tail is added, so the reported ratios
//! are upper estimates. Scans over parameter grids read off the implied
//! constants empirically.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which bound a scan refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lemma {
    /// Bound (A): the ball sum of (1+|x-e|)^{1-d}.
    XeSum,
    /// Bound (B): the weighted lattice convolution with two rhs terms.
    EepSum,
}

/// One evaluated inequality instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// Largest 1/ε enumerable exactly per dimension (ball of ~(2/ε)^d points).
fn max_inv_eps(d: usize) -> f64 {
    match d {
        3 => 128.0,
        4 => 48.0,
        5 => 20.0,
        _ => 8.0,
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d < 3 {
        return Err(Error::Precondition(format!("bounds require d >= 3, got {d}")));
    }
    if d > 5 {
        return Err(Error::SizeGuard(format!("exact enumeration supported for d <= 5, got {d}")));
    }
    Ok(())
}

fn norm(v: &[i64]) -> f64 {
    (v.iter().map(|&c| (c * c) as f64).sum::<f64>()).sqrt()
}

/// Iterate all lattice points with |x| <= radius, calling `visit`.
fn for_ball(d: usize, radius: f64, mut visit: impl FnMut(&[i64])) {
    let r = radius.floor() as i64;
    let r2 = radius * radius;
    let mut coord = vec![-r; d];
    'outer: loop {
        let n2: i64 = coord.iter().map(|&c| c * c).sum();
        if (n2 as f64) <= r2 {
            visit(&coord);
        }
        for i in (0..d).rev() {
            coord[i] += 1;
            if coord[i] <= r {
                continue 'outer;
            }
            coord[i] = -r;
        }
        break;
    }
}

/// Exact evaluation of bound (A) at one (d, e, ε).
pub fn xesum_check(d: usize, e: &[i64], eps: f64) -> Result<LemmaCheck> {
    check_dim(d)?;
    if e.len() != d {
        return Err(Error::Precondition("e has the wrong dimension".into()));
    }
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Precondition(format!("eps must lie in (0, 1], got {eps}")));
    }
    let inv = 1.0 / eps;
    if inv > max_inv_eps(d) {
        return Err(Error::SizeGuard(format!(
            "1/eps = {inv} exceeds the exact-summation guard {} for d = {d}",
            max_inv_eps(d)
        )));
    }
    let power = 1 - d as i32;
    let mut lhs = 0.0;
    for_ball(d, inv, |x| {
        let mut dist2 = 0.0;
        for i in 0..d {
            let t = (x[i] - e[i]) as f64;
            dist2 += t * t;
        }
        lhs += (1.0 + dist2.sqrt()).powi(power);
    });
    let scaled = eps * norm(e);
    let rhs = inv / (1.0 + scaled).powi(d as i32 - 1);
    Ok(LemmaCheck { lhs, rhs, ratio: lhs / rhs })
}

/// Evaluation of bound (B) at one (d, p, e', ε): exact sum within
/// `radius`, plus a conservative integral tail.
pub fn eepsum_check(d: usize, p: f64, e_prime: &[i64], eps: f64, radius: f64) -> Result<LemmaCheck> {
    check_dim(d)?;
    if e_prime.len() != d {
        return Err(Error::Precondition("e' has the wrong dimension".into()));
    }
    if !(p > 0.0) {
        return Err(Error::Precondition(format!("p must be > 0, got {p}")));
    }
    if !(eps > 0.0 && eps <= 0.5) {
        return Err(Error::Precondition(format!("eps must lie in (0, 1/2], got {eps}")));
    }
    if radius < 4.0 / eps {
        return Err(Error::Precondition(format!(
            "summation radius {radius} below the guard 4/eps = {}",
            4.0 / eps
        )));
    }
    let cap = 2.0 * max_inv_eps(d);
    if radius > cap {
        return Err(Error::SizeGuard(format!(
            "radius {radius} exceeds the enumeration cap {cap} for d = {d}"
        )));
    }
    if norm(e_prime) > radius / 2.0 {
        return Err(Error::Precondition(
            "|e'| must be <= radius/2 for the tail comparison".into(),
        ));
    }
    let mut lhs = 0.0;
    for_ball(d, radius, |x| {
        let mut dist2 = 0.0;
        for i in 0..d {
            let t = (x[i] - e_prime[i]) as f64;
            dist2 += t * t;
        }
        lhs += (1.0 + dist2.sqrt()).powi(-(d as i32)) * (1.0 + eps * norm(x)).powf(-p);
    });
    // tail: for |y| > radius and |e'| <= radius/2 we have |y-e'| >= |y|/2,
    // so the summand is below 2^d |y|^{-d} (ε|y|)^{-p}; the integral
    // comparison gives 2^d S_{d-1} ε^{-p} radius^{-p} / p, doubled for the
    // lattice-vs-integral slop
    let dd = d as f64;
    let sphere_area =
        2.0 * std::f64::consts::PI.powf(dd / 2.0) / statrs::function::gamma::gamma(dd / 2.0);
    let tail =
        2.0 * 2f64.powi(d as i32) * sphere_area * eps.powf(-p) * radius.powf(-p) / p;
    lhs += tail;

    let log_eps = eps.ln().abs();
    let scaled = eps * norm(e_prime);
    let rhs = log_eps / (1.0 + scaled).powi(d as i32) + log_eps / (1.0 + scaled).powf(p);
    Ok(LemmaCheck { lhs, rhs, ratio: lhs / rhs })
}

/// One row of a scan: grid coordinates and the checked values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanRow {
    pub eps: f64,
    /// |e| (bound A) or |e'| (bound B).
    pub point_norm: f64,
    pub point: Vec<i64>,
    pub p: Option<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// Scan results: the empirical implied constant is the max ratio.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundScan {
    pub lemma: Lemma,
    pub d: usize,
    pub rows: Vec<ScanRow>,
    pub max_ratio: f64,
    pub argmax: usize,
}

impl BoundScan {
    fn from_rows(lemma: Lemma, d: usize, rows: Vec<ScanRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Precondition("empty scan grid".into()));
        }
        let mut max_ratio = f64::NEG_INFINITY;
        let mut argmax = 0;
        for (i, r) in rows.iter().enumerate() {
            if !r.ratio.is_finite() || r.ratio <= 0.0 {
                return Err(Error::Precondition(format!(
                    "non-finite or non-positive ratio at row {i}"
                )));
            }
            if r.ratio > max_ratio {
                max_ratio = r.ratio;
                argmax = i;
            }
        }
        Ok(Self { lemma, d, rows, max_ratio, argmax })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps,point_norm,point,p,lhs,rhs,ratio\n");
        for r in &self.rows {
            let pt = r
                .point
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            let p = r.p.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{pt},{p},{},{},{}\n",
                r.eps, r.point_norm, r.lhs, r.rhs, r.ratio
            ));
        }
        out
    }
}

/// Sample points along axes and diagonals at geometric radii <= `max_mult`
/// times 1/ε (the far regime of the bound starts beyond 2/ε).
fn point_grid(d: usize, inv_eps: f64, max_mult: f64) -> Vec<Vec<i64>> {
    let mut out = vec![vec![0i64; d]];
    let mut radius = 1.0;
    while radius <= max_mult * inv_eps {
        // axis direction and the main diagonal
        let mut axis = vec![0i64; d];
        axis[0] = radius as i64;
        out.push(axis);
        // floor keeps the diagonal point inside the current radius
        let diag_c = (radius / (d as f64).sqrt()).floor() as i64;
        if diag_c > 0 {
            out.push(vec![diag_c; d]);
        }
        radius *= 2.0;
    }
    out.dedup();
    out
}

/// Scan bound (A) over an ε grid with points up to 8/ε.
pub fn xesum_scan(d: usize, eps_grid: &[f64]) -> Result<BoundScan> {
    let mut rows = Vec::new();
    for &eps in eps_grid {
        for point in point_grid(d, 1.0 / eps, 8.0) {
            let check = xesum_check(d, &point, eps)?;
            rows.push(ScanRow {
                eps,
                point_norm: norm(&point),
                point,
                p: None,
                lhs: check.lhs,
                rhs: check.rhs,
                ratio: check.ratio,
            });
        }
    }
    BoundScan::from_rows(Lemma::XeSum, d, rows)
}

/// Scan bound (B) over (ε, p) grids with anchors up to 2/ε.
pub fn eepsum_scan(d: usize, eps_grid: &[f64], p_grid: &[f64]) -> Result<BoundScan> {
    let mut rows = Vec::new();
    for &eps in eps_grid {
        let radius = 4.0 / eps;
        for &p in p_grid {
            for point in point_grid(d, 1.0 / eps, 2.0) {
                let check = eepsum_check(d, p, &point, eps, radius)?;
                rows.push(ScanRow {
                    eps,
                    point_norm: norm(&point),
                    point,
                    p: Some(p),
                    lhs: check.lhs,
                    rhs: check.rhs,
                    ratio: check.ratio,
                });
            }
        }
    }
    BoundScan::from_rows(Lemma::EepSum, d, rows)
}
