//! Random conductances: i.i.d. Gaussian drivers mapped through a smooth,
//! bounded law.
//!
//! Each edge e carries a standard Gaussian ζ_e and the conductance
//! a(e) = 𝐚(ζ_e), where 𝐚 is twice differentiable with bounded
//! derivatives and takes values in [λ, Λ] ⊂ (0, ∞). Sampling is
//! counter-based: ζ_e is a pure function of (master_seed, replica_index,
//! edge index), so parallel generation is order-free and replicas never
//! share a stream.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{apply_operator, EdgeField, EdgeId, LatticeShape, VertexField};
use crate::util::{standard_normal_from_key, stream_key};

const STREAM_ZETA: u64 = 0x5A45_5441; // "ZETA"

/// Supported conductance law families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LawKind {
    /// 𝐚(z) = (λ+Λ)/2 + ((Λ-λ)/2) tanh z
    Tanh,
    /// 𝐚(z) = (λ+Λ)/2 + ((Λ-λ)/2) erf(√π z / 2); affine near 0 with the
    /// same slope as the tanh family, smoothly clamped to [λ, Λ].
    AffineClampedSmooth,
}

/// A smooth bounded map z ↦ 𝐚(z) ∈ [λ, Λ].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConductanceLaw {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub kind: LawKind,
}

impl ConductanceLaw {
    /// λ = Λ is allowed and yields the constant law 𝐚 ≡ λ (zero corrector).
    pub fn new(lambda_min: f64, lambda_max: f64, kind: LawKind) -> Result<Self> {
        if !(lambda_min > 0.0) || !lambda_min.is_finite() {
            return Err(Error::Config(format!("lambda_min must be > 0, got {lambda_min}")));
        }
        if !(lambda_max >= lambda_min) || !lambda_max.is_finite() {
            return Err(Error::Config(format!(
                "lambda_max must be >= lambda_min, got ({lambda_min}, {lambda_max})"
            )));
        }
        Ok(Self { lambda_min, lambda_max, kind })
    }

    /// Default production law: tanh with λ=1, Λ=4.
    pub fn default_tanh() -> Self {
        Self { lambda_min: 1.0, lambda_max: 4.0, kind: LawKind::Tanh }
    }

    /// Constant law a ≡ c.
    pub fn constant(c: f64) -> Result<Self> {
        Self::new(c, c, LawKind::Tanh)
    }

    #[inline]
    fn mid(&self) -> f64 {
        0.5 * (self.lambda_min + self.lambda_max)
    }

    #[inline]
    fn half(&self) -> f64 {
        0.5 * (self.lambda_max - self.lambda_min)
    }

    /// 𝐚(z).
    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        match self.kind {
            LawKind::Tanh => self.mid() + self.half() * z.tanh(),
            LawKind::AffineClampedSmooth => {
                let s = 0.5 * std::f64::consts::PI.sqrt() * z;
                self.mid() + self.half() * statrs::function::erf::erf(s)
            }
        }
    }

    /// 𝐚'(z).
    #[inline]
    pub fn deriv(&self, z: f64) -> f64 {
        match self.kind {
            LawKind::Tanh => {
                let t = z.tanh();
                self.half() * (1.0 - t * t)
            }
            LawKind::AffineClampedSmooth => {
                // d/dz erf(√π z/2) = exp(-π z²/4)
                self.half() * (-std::f64::consts::PI * z * z / 4.0).exp()
            }
        }
    }

    /// 𝐚''(z).
    #[inline]
    pub fn deriv2(&self, z: f64) -> f64 {
        match self.kind {
            LawKind::Tanh => {
                let t = z.tanh();
                -2.0 * self.half() * t * (1.0 - t * t)
            }
            LawKind::AffineClampedSmooth => {
                let c = -std::f64::consts::PI * z / 2.0;
                self.half() * c * (-std::f64::consts::PI * z * z / 4.0).exp()
            }
        }
    }

    /// 𝐚, 𝐚' or 𝐚''.
    pub fn law_eval(&self, z: f64, order: u8) -> Result<f64> {
        match order {
            0 => Ok(self.eval(z)),
            1 => Ok(self.deriv(z)),
            2 => Ok(self.deriv2(z)),
            o => Err(Error::Config(format!("derivative order must be 0, 1 or 2, got {o}"))),
        }
    }

    /// Analytic sup of |𝐚'|.
    pub fn deriv_sup(&self) -> f64 {
        // both families have slope (Λ-λ)/2 at the origin, which is the max
        self.half()
    }

    /// Analytic sup of |𝐚''|.
    pub fn deriv2_sup(&self) -> f64 {
        match self.kind {
            // max of |tanh z| sech² z is 2/(3√3), attained at tanh z = 1/√3
            LawKind::Tanh => self.half() * 4.0 / (3.0 * 3.0f64.sqrt()),
            // max of |πz/2| e^{-πz²/4} at z = √(2/π): √(π/2) e^{-1/2}
            LawKind::AffineClampedSmooth => {
                self.half() * (std::f64::consts::PI / 2.0).sqrt() * (-0.5f64).exp()
            }
        }
    }
}

/// Identifies one replica of the random environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub replica_index: u32,
}

impl SeedSpec {
    pub fn new(master_seed: u64, replica_index: u32) -> Self {
        Self { master_seed, replica_index }
    }

    /// Key of the Gaussian driver on edge `edge_index`.
    #[inline]
    pub fn edge_key(&self, edge_index: usize) -> u64 {
        stream_key(&[self.master_seed, STREAM_ZETA, self.replica_index as u64, edge_index as u64])
    }
}

/// One sampled environment: drivers, conductances, and their provenance.
#[derive(Debug, Clone)]
pub struct Environment {
    pub shape: LatticeShape,
    pub zeta: EdgeField,
    pub a: EdgeField,
    pub law: ConductanceLaw,
    pub seed: SeedSpec,
}

/// Sample ζ i.i.d. N(0,1) and a = 𝐚(ζ) entrywise, keyed per edge.
pub fn sample_environment(shape: LatticeShape, law: ConductanceLaw, seed: SeedSpec) -> Environment {
    let n = shape.n_edges();
    let mut zeta = vec![0.0; n];
    zeta.par_iter_mut()
        .enumerate()
        .for_each(|(i, slot)| *slot = standard_normal_from_key(seed.edge_key(i)));
    let a: Vec<f64> = zeta.par_iter().map(|&z| law.eval(z)).collect();
    Environment {
        shape,
        zeta: EdgeField { shape, values: zeta },
        a: EdgeField { shape, values: a },
        law,
        seed,
    }
}

impl Environment {
    /// New environment with ζ(e) shifted by h; all other edges untouched.
    pub fn perturb_edge(&self, e: EdgeId, h: f64) -> Environment {
        let mut out = self.clone();
        let idx = e.flat(&self.shape);
        out.zeta.values[idx] += h;
        out.a.values[idx] = self.law.eval(out.zeta.values[idx]);
        out
    }

    /// Apply μ·Id + ∇*(a∇·) with this environment's conductances.
    pub fn apply_operator(&self, mu: f64, u: &VertexField) -> VertexField {
        apply_operator(&self.a, mu, u)
    }

    /// 𝐚'(ζ_e) for an edge, the sensitivity of a(e) to its driver.
    #[inline]
    pub fn a_deriv(&self, edge_flat: usize) -> f64 {
        self.law.deriv(self.zeta.values[edge_flat])
    }

    /// 𝐚''(ζ_e) for an edge.
    #[inline]
    pub fn a_deriv2(&self, edge_flat: usize) -> f64 {
        self.law.deriv2(self.zeta.values[edge_flat])
    }
}

/// Sidecar describing a dumped environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct EnvSidecar {
    law: ConductanceLaw,
    seed: SeedSpec,
}

/// Dump an environment as two binary edge fields plus a JSON sidecar.
pub fn save_environment(env: &Environment, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut zeta = fs::File::create(dir.join("zeta.bin"))?;
    env.zeta.write_dump(&mut zeta)?;
    let mut a = fs::File::create(dir.join("a.bin"))?;
    env.a.write_dump(&mut a)?;
    let sidecar = EnvSidecar { law: env.law, seed: env.seed };
    fs::write(
        dir.join("environment.json"),
        serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    Ok(())
}

/// Restore an environment dumped by [`save_environment`].
pub fn load_environment(dir: &Path) -> Result<Environment> {
    let sidecar: EnvSidecar =
        serde_json::from_str(&fs::read_to_string(dir.join("environment.json"))?)
            .map_err(|e| Error::Format(e.to_string()))?;
    let mut zf = fs::File::open(dir.join("zeta.bin"))?;
    let zeta = EdgeField::read_dump(&mut zf)?;
    let mut af = fs::File::open(dir.join("a.bin"))?;
    let a = EdgeField::read_dump(&mut af)?;
    if zeta.shape != a.shape {
        return Err(Error::Format("zeta and a dumps have different shapes".into()));
    }
    Ok(Environment { shape: zeta.shape, zeta, a, law: sidecar.law, seed: sidecar.seed })
}
