//! The experiment configuration: one human-editable JSON document with
//! every default materialized, so a run is fully described by its config
//! hash.

use corrlab_core::error::{Error, Result};
use corrlab_core::{ConductanceLaw, LatticeShape, SolverConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteinSection {
    /// Inner-sum truncation radius R; omitted values materialize to
    /// min(8, L/2).
    pub truncation_radius: Option<f64>,
    /// Number of sampled anchors m for the outer sum.
    pub anchor_sample_size: usize,
}

impl Default for SteinSection {
    fn default() -> Self {
        Self { truncation_radius: None, anchor_sample_size: 32 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub d: usize,
    pub l: usize,
    pub law: ConductanceLaw,
    pub xi: Vec<f64>,
    pub mu: f64,
    pub eps_list: Vec<f64>,
    pub lambda_list: Vec<f64>,
    pub p_list: Vec<u32>,
    pub n_replicas: usize,
    pub master_seed: u64,
    pub solver: SolverConfig,
    pub stein: SteinSection,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            d: 3,
            l: 64,
            law: ConductanceLaw::default_tanh(),
            xi: vec![1.0, 0.0, 0.0],
            mu: 0.0,
            eps_list: vec![0.25, 0.125, 0.0625, 0.03125],
            lambda_list: vec![1.0, 0.5, 0.25],
            p_list: vec![2, 4],
            n_replicas: 32,
            master_seed: 20260810,
            solver: SolverConfig::default(),
            stein: SteinSection::default(),
            output_dir: "corrlab-out".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn shape(&self) -> Result<LatticeShape> {
        LatticeShape::new(self.d, self.l)
    }

    /// Fill in the L-dependent defaults so the stored config is
    /// self-describing (hashes are computed after this step).
    pub fn materialize(&mut self) {
        if self.stein.truncation_radius.is_none() {
            self.stein.truncation_radius = Some(8.0f64.min(self.l as f64 / 2.0));
        }
    }

    /// The materialized truncation radius.
    pub fn stein_radius(&self) -> f64 {
        self.stein.truncation_radius.unwrap_or_else(|| 8.0f64.min(self.l as f64 / 2.0))
    }

    /// Validate every module guard that does not depend on runtime data.
    pub fn validate(&self) -> Result<()> {
        let shape = self.shape()?;
        ConductanceLaw::new(self.law.lambda_min, self.law.lambda_max, self.law.kind)?;
        if self.xi.len() != self.d {
            return Err(Error::Config(format!(
                "xi has {} components, d = {}",
                self.xi.len(),
                self.d
            )));
        }
        if self.mu < 0.0 {
            return Err(Error::Config(format!("mu must be >= 0, got {}", self.mu)));
        }
        self.solver.validate()?;
        if self.n_replicas < 1 {
            return Err(Error::Config("n_replicas must be >= 1".into()));
        }
        for &eps in &self.eps_list {
            if !(eps > 0.0 && eps <= 1.0) {
                return Err(Error::Config(format!("eps values must lie in (0,1], got {eps}")));
            }
        }
        for &lambda in &self.lambda_list {
            if !(lambda > 0.0 && lambda <= 1.0) {
                return Err(Error::Config(format!(
                    "lambda values must lie in (0,1], got {lambda}"
                )));
            }
        }
        if self.eps_list.is_empty() || self.lambda_list.is_empty() {
            return Err(Error::Config("eps_list and lambda_list must be nonempty".into()));
        }
        for &p in &self.p_list {
            if p == 0 || p % 2 != 0 || p > 8 {
                return Err(Error::Config(format!(
                    "moment orders must be even integers in 2..=8, got {p}"
                )));
            }
        }
        let radius = self.stein_radius();
        if radius <= 0.0 || radius > shape.l as f64 / 2.0 {
            return Err(Error::Config(format!(
                "stein truncation radius must lie in (0, L/2], got {radius}"
            )));
        }
        if self.stein.anchor_sample_size < 1 {
            return Err(Error::Config("stein anchor_sample_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical JSON of the materialized config.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Content hash of the materialized config (first 12 hex chars used
    /// for directory names).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }
}
