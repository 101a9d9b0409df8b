//! Random and parametric material inputs: standardized sample sets with
//! rejection rules, affine scalar fields over mesh elements, and the
//! Karhunen-Loeve discretization of exponentially correlated fields.

use crate::error::{Error, Result};
use crate::mesh::{Kinematics, Mesh};
use nalgebra::DMatrix;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Standardized random variable driving one sample-matrix column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum VariableKind {
    /// Standard normal, redrawn while the draw falls below `floor` (in
    /// standard deviations); keeps affine transforms above their physical
    /// floor, e.g. E >= 0.1 * mean at 10 % spread needs floor = -9.
    GaussianTruncated { floor: f64 },
    /// Uniform on [-sqrt(3), sqrt(3)] (zero mean, unit variance).
    UniformUnit,
}

/// Row-major matrix of standardized samples, one row per realization, one
/// column per random variable, together with the seed that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    data: Vec<f64>,
    n_samples: usize,
    n_dim: usize,
    pub seed: u64,
    pub specs: Vec<VariableKind>,
}

impl SampleSet {
    pub fn from_matrix(
        data: Vec<f64>,
        n_samples: usize,
        specs: Vec<VariableKind>,
        seed: u64,
    ) -> Result<SampleSet> {
        let n_dim = specs.len();
        if data.len() != n_samples * n_dim {
            return Err(Error::DimensionMismatch(format!(
                "sample matrix has {} entries, expected {} x {}",
                data.len(),
                n_samples,
                n_dim
            )));
        }
        Ok(SampleSet {
            data,
            n_samples,
            n_dim,
            seed,
            specs,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_dim(&self) -> usize {
        self.n_dim
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.n_dim..(s + 1) * self.n_dim]
    }

    pub fn value(&self, s: usize, j: usize) -> f64 {
        self.data[s * self.n_dim + j]
    }

    pub fn matrix(&self) -> &[f64] {
        &self.data
    }
}

/// Draw `n` standardized rows with per-column rejection rules. A rule that
/// rejects more than 99 % of its draws aborts instead of spinning.
pub fn draw_samples(specs: &[VariableKind], n: usize, seed: u64) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::InfeasibleSampling("sample count must be >= 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut data = vec![0.0; n * specs.len()];
    let unit = Uniform::new_inclusive(-(3.0_f64.sqrt()), 3.0_f64.sqrt());
    for (j, spec) in specs.iter().enumerate() {
        let mut attempts: u64 = 0;
        let budget = (100 * n.max(1)) as u64;
        for s in 0..n {
            let v = loop {
                attempts += 1;
                if attempts > budget {
                    return Err(Error::InfeasibleSampling(format!(
                        "column {j}: acceptance rate below 1 %"
                    )));
                }
                match spec {
                    VariableKind::GaussianTruncated { floor } => {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        if x >= *floor {
                            break x;
                        }
                    }
                    VariableKind::UniformUnit => break unit.sample(&mut rng),
                }
            };
            data[s * specs.len() + j] = v;
        }
    }
    SampleSet::from_matrix(data, n, specs.to_vec(), seed)
}

/// One affine term: scale * field(x) * xi_{variable}.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineTerm {
    /// Column index into the sample matrix.
    pub variable: usize,
    /// sqrt(eigenvalue) for KL terms, the standard deviation for scalar RVs.
    pub scale: f64,
    /// Per-element spatial profile.
    pub field: Vec<f64>,
}

/// Scalar field affine in standardized variables:
/// value(x, theta) = mean(x) + sum_i scale_i * field_i(x) * xi_i(theta).
#[derive(Clone, Debug, PartialEq)]
pub struct AffineField {
    pub mean: Vec<f64>,
    pub terms: Vec<AffineTerm>,
}

impl AffineField {
    pub fn deterministic(mean: Vec<f64>) -> AffineField {
        AffineField {
            mean,
            terms: Vec::new(),
        }
    }

    pub fn uniform(value: f64, n_elements: usize) -> AffineField {
        AffineField::deterministic(vec![value; n_elements])
    }

    /// Spatially uniform field driven by a single standardized variable.
    pub fn scalar_random(
        mean: f64,
        std_dev: f64,
        variable: usize,
        n_elements: usize,
    ) -> AffineField {
        AffineField {
            mean: vec![mean; n_elements],
            terms: vec![AffineTerm {
                variable,
                scale: std_dev,
                field: vec![1.0; n_elements],
            }],
        }
    }

    pub fn n_elements(&self) -> usize {
        self.mean.len()
    }

    /// Number of stochastic terms (the mean is deterministic).
    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn validate(&self, n_elements: usize, n_dim: usize) -> Result<()> {
        if self.mean.len() != n_elements {
            return Err(Error::DimensionMismatch(format!(
                "field mean has {} entries for {} elements",
                self.mean.len(),
                n_elements
            )));
        }
        for (i, t) in self.terms.iter().enumerate() {
            if t.field.len() != n_elements {
                return Err(Error::DimensionMismatch(format!(
                    "term {i} has {} entries for {} elements",
                    t.field.len(),
                    n_elements
                )));
            }
            if t.variable >= n_dim {
                return Err(Error::DimensionMismatch(format!(
                    "term {i} references variable {} of {}",
                    t.variable, n_dim
                )));
            }
            if !t.scale.is_finite() {
                return Err(Error::IllPosed(format!("term {i} has non-finite scale")));
            }
        }
        Ok(())
    }

    /// Field values for one standardized sample row.
    pub fn evaluate_row(&self, xi: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.mean);
        for t in &self.terms {
            let a = t.scale * xi[t.variable];
            for (o, f) in out.iter_mut().zip(&t.field) {
                *o += a * f;
            }
        }
    }

    /// Dense n_samples x n_elements evaluation.
    pub fn evaluate(&self, samples: &SampleSet) -> Vec<f64> {
        let ne = self.n_elements();
        let mut out = vec![0.0; samples.n_samples() * ne];
        for s in 0..samples.n_samples() {
            self.evaluate_row(samples.row(s), &mut out[s * ne..(s + 1) * ne]);
        }
        out
    }
}

/// Exponential covariance with per-axis correlation lengths:
/// cov(x1, x2) = variance_scale/3 * exp(-|dx|/lx - |dy|/ly - |dz|/lz).
///
/// The 1/3 prefactor is part of the model definition used throughout the
/// kit; change it and every downstream spread changes with it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    /// chi^2, the squared amplitude before the 1/3 prefactor.
    pub variance_scale: f64,
    pub lengths: [f64; 3],
}

impl CovarianceSpec {
    pub fn evaluate(&self, a: &[f64; 3], b: &[f64; 3]) -> f64 {
        let e = -((a[0] - b[0]).abs() / self.lengths[0]
            + (a[1] - b[1]).abs() / self.lengths[1]
            + (a[2] - b[2]).abs() / self.lengths[2]);
        self.variance_scale / 3.0 * e.exp()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance_scale > 0.0) || self.lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::IllPosed(
                "covariance needs positive variance and correlation lengths".into(),
            ));
        }
        Ok(())
    }
}

/// Truncated KL expansion over element centroids.
#[derive(Clone, Debug)]
pub struct KlExpansion {
    /// Kept eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// modes[i][e], orthonormal in the volume-weighted inner product.
    pub modes: Vec<Vec<f64>>,
    /// Achieved truncation indicator kappa_r / sum_{i<=r} kappa_i.
    pub truncation: f64,
}

impl KlExpansion {
    pub fn n_terms(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Affine field mean + sum sqrt(kappa_i) mode_i xi_{first_variable + i}.
    pub fn to_affine(&self, mean: Vec<f64>, first_variable: usize) -> AffineField {
        let terms = self
            .eigenvalues
            .iter()
            .zip(&self.modes)
            .enumerate()
            .map(|(i, (&ev, mode))| AffineTerm {
                variable: first_variable + i,
                scale: ev.sqrt(),
                field: mode.clone(),
            })
            .collect();
        AffineField { mean, terms }
    }
}

/// Truncation indicator kappa_r / sum_{i<=r} kappa_i for a descending
/// spectrum (1-based r).
pub fn truncation_error(eigenvalues: &[f64], r: usize) -> Result<f64> {
    if r == 0 || r > eigenvalues.len() {
        return Err(Error::DimensionMismatch(format!(
            "rank {r} outside spectrum of length {}",
            eigenvalues.len()
        )));
    }
    let partial: f64 = eigenvalues[..r].iter().sum();
    if !(partial > 0.0) {
        return Err(Error::IllPosed("spectrum has no positive mass".into()));
    }
    Ok(eigenvalues[r - 1] / partial)
}

/// Nystrom discretization of the covariance at element centroids with
/// volume weights: solve the symmetrized problem
/// W^{1/2} C W^{1/2} psi = kappa psi and rescale phi = W^{-1/2} psi, so the
/// modes are orthonormal under sum_e vol_e phi_i(e) phi_j(e).
/// Keeps the smallest r with truncation_error <= tol.
pub fn kl_expand(
    mesh: &Mesh,
    kin: &Kinematics,
    cov: &CovarianceSpec,
    tol: f64,
) -> Result<KlExpansion> {
    cov.validate()?;
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::IllPosed(format!("truncation tol {tol} outside (0, 1)")));
    }
    let ne = mesh.n_elements();
    let centroids: Vec<[f64; 3]> = (0..ne).map(|e| mesh.element_centroid(e)).collect();
    let sqrt_w: Vec<f64> = (0..ne).map(|e| kin.volume(e).sqrt()).collect();

    let mut b = DMatrix::zeros(ne, ne);
    for i in 0..ne {
        for j in i..ne {
            let v = cov.evaluate(&centroids[i], &centroids[j]) * sqrt_w[i] * sqrt_w[j];
            b[(i, j)] = v;
            b[(j, i)] = v;
        }
    }

    let eig = nalgebra::linalg::SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..ne).collect();
    order.sort_by(|&a, &c| {
        eig.eigenvalues[c]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("eigenvalues are finite")
    });

    let top = eig.eigenvalues[order[0]];
    if !(top > 0.0) {
        return Err(Error::IllPosed("covariance operator has no positive mass".into()));
    }

    let mut eigenvalues = Vec::new();
    let mut modes = Vec::new();
    let mut partial = 0.0;
    let mut truncation = f64::INFINITY;
    for &idx in &order {
        let mut ev = eig.eigenvalues[idx];
        if ev < 0.0 {
            if ev.abs() <= 1e-10 * top {
                // Rounding leakage from an SPD kernel; treat as exhausted.
                log::warn!("clipping tiny negative KL eigenvalue {ev:.3e}");
                ev = 0.0;
            } else {
                return Err(Error::IllPosed(format!(
                    "covariance discretization produced negative eigenvalue {ev:.6e}"
                )));
            }
        }
        if ev == 0.0 {
            break;
        }
        partial += ev;
        let mut mode = vec![0.0; ne];
        for e in 0..ne {
            mode[e] = eig.eigenvectors[(e, idx)] / sqrt_w[e];
        }
        // Deterministic sign: largest-magnitude entry positive.
        let mut pick = 0;
        for (e, v) in mode.iter().enumerate() {
            if v.abs() > mode[pick].abs() {
                pick = e;
            }
        }
        if mode[pick] < 0.0 {
            mode.iter_mut().for_each(|v| *v = -*v);
        }
        eigenvalues.push(ev);
        modes.push(mode);
        truncation = ev / partial;
        if truncation <= tol {
            return Ok(KlExpansion {
                eigenvalues,
                modes,
                truncation,
            });
        }
    }
    Err(Error::ConvergenceFailure(format!(
        "KL truncation stalled at {truncation:.3e} > tol {tol:.3e} after {} modes",
        eigenvalues.len()
    )))
}
