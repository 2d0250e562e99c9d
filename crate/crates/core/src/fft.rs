//! d-dimensional FFT on the torus and the exact constant-coefficient solve.
//!
//! The discrete Fourier basis diagonalizes μ + ā ∇*∇ with eigenvalues
//! μ + ā Σ_i (2 - 2 cos(2π k_i / L)), which gives an exact solver for
//! constant conductances and the spectral preconditioner for the
//! variable-coefficient CG.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lattice::{LatticeShape, VertexField};

/// Shared FFT plans for one lattice shape.
pub struct TorusFft {
    shape: LatticeShape,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl TorusFft {
    pub fn new(shape: LatticeShape) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(shape.l);
        let inverse = planner.plan_fft_inverse(shape.l);
        Self { shape, forward, inverse }
    }

    pub fn shape(&self) -> LatticeShape {
        self.shape
    }

    fn transform_axes(&self, data: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        let l = self.shape.l;
        let n = self.shape.n_vertices();
        let mut line = vec![Complex64::new(0.0, 0.0); l];
        for axis in 0..self.shape.d {
            let stride = self.shape.stride(axis);
            // every index whose `axis` coordinate is zero starts one line
            for base in 0..n {
                if (base / stride) % l != 0 {
                    continue;
                }
                for (j, slot) in line.iter_mut().enumerate() {
                    *slot = data[base + j * stride];
                }
                fft.process(&mut line);
                for (j, &v) in line.iter().enumerate() {
                    data[base + j * stride] = v;
                }
            }
        }
    }

    /// In-place forward DFT along every axis (no normalization).
    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform_axes(data, &self.forward);
    }

    /// In-place inverse DFT along every axis, normalized by 1/L^d.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform_axes(data, &self.inverse);
        let scale = 1.0 / self.shape.n_vertices() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    /// Laplacian symbol per flat vertex index: Σ_i (2 - 2cos(2π k_i / L)).
    pub fn laplacian_symbol(&self) -> Vec<f64> {
        let l = self.shape.l;
        let n = self.shape.n_vertices();
        let per_axis: Vec<f64> = (0..l)
            .map(|k| 2.0 - 2.0 * (std::f64::consts::TAU * k as f64 / l as f64).cos())
            .collect();
        let mut sym = vec![0.0; n];
        for (idx, s) in sym.iter_mut().enumerate() {
            let mut rest = idx;
            let mut acc = 0.0;
            for _ in 0..self.shape.d {
                acc += per_axis[rest % l];
                rest /= l;
            }
            *s = acc;
        }
        sym
    }

    /// Solve (μ + ā ∇*∇) u = g exactly by spectral diagonalization.
    ///
    /// For μ = 0 the zero mode is projected out and the mean-zero solution
    /// is returned; `g` must then have (numerically) zero mean.
    pub fn solve_constant_coefficient(
        &self,
        mu: f64,
        abar: f64,
        g: &VertexField,
    ) -> Result<VertexField> {
        if g.shape != self.shape {
            return Err(Error::Precondition("field shape does not match FFT plan".into()));
        }
        if abar <= 0.0 {
            return Err(Error::Config(format!("abar must be positive, got {abar}")));
        }
        let mut data: Vec<Complex64> =
            g.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut data);
        let sym = self.laplacian_symbol();
        for (i, v) in data.iter_mut().enumerate() {
            let denom = mu + abar * sym[i];
            if i == 0 && mu == 0.0 {
                *v = Complex64::new(0.0, 0.0);
            } else {
                *v /= denom;
            }
        }
        self.inverse(&mut data);
        Ok(VertexField { shape: self.shape, values: data.iter().map(|c| c.re).collect() })
    }
}
