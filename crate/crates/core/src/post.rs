//! Postprocessing: per-sample relative errors, kernel density estimates,
//! stress recovery from displacement histories, and plot-ready CSV output.

use crate::error::{Error, Result};
use crate::plasticity::{state_from_trial, stress_from_trial, trial_state, MaterialPoint, PlasticState};
use crate::problem::Problem;
use crate::tensor::SymTensor;
use nalgebra::DMatrix;
use std::io::Write;

/// Relative Euclidean distance between two equally sampled time series:
/// ||ref - cand|| / ||ref||. The norm is the plain Euclidean norm over the
/// series entries, with no time-step weighting.
pub fn l2_error(reference: &[f64], candidate: &[f64]) -> Result<f64> {
    if reference.len() != candidate.len() {
        return Err(Error::DimensionMismatch(format!(
            "series lengths differ: {} vs {}",
            reference.len(),
            candidate.len()
        )));
    }
    if reference.is_empty() {
        return Err(Error::DimensionMismatch("empty series".into()));
    }
    let mut diff2 = 0.0;
    let mut ref2 = 0.0;
    for (r, c) in reference.iter().zip(candidate) {
        diff2 += (r - c) * (r - c);
        ref2 += r * r;
    }
    if !(ref2 > 0.0) {
        return Err(Error::IllPosed(
            "reference series has zero norm, relative error is undefined".into(),
        ));
    }
    Ok((diff2 / ref2).sqrt())
}

/// Gaussian kernel density estimate on an explicit support grid.
#[derive(Debug, Clone)]
pub struct PdfEstimate {
    /// Evaluation points, strictly increasing.
    pub support: Vec<f64>,
    /// Density values, trapezoid-normalized to unit mass on the support.
    pub density: Vec<f64>,
    /// Kernel bandwidth that was used.
    pub bandwidth: f64,
    /// Number of samples behind the estimate.
    pub n_samples: usize,
}

impl PdfEstimate {
    /// Trapezoidal integral of the density over its support.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.support, &self.density)
    }
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len().saturating_sub(1) {
        acc += 0.5 * (y[i] + y[i + 1]) * (x[i + 1] - x[i]);
    }
    acc
}

/// Bandwidth from the usual normal-reference rule:
/// 0.9 * min(std, IQR / 1.34) * n^(-1/5), skipping whichever spread
/// measure degenerates to zero. Errors when both do (constant samples).
fn reference_bandwidth(values: &[f64]) -> Result<f64> {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    let std = var.sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let mut spread = f64::INFINITY;
    if std > 0.0 {
        spread = spread.min(std);
    }
    if iqr > 0.0 {
        spread = spread.min(iqr / 1.34);
    }
    if !spread.is_finite() {
        return Err(Error::IllPosed(
            "samples have no spread, density estimate is degenerate".into(),
        ));
    }
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

/// Linear-interpolation quantile of an already sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n as f64 - 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Gaussian kernel density estimate on an automatic support grid covering
/// the sample range plus four bandwidths on each side, evaluated at
/// `n_points` equally spaced points. Requires at least 30 samples and a
/// nonzero spread.
pub fn pdf_estimate(values: &[f64], n_points: usize) -> Result<PdfEstimate> {
    if values.len() < 30 {
        return Err(Error::DimensionMismatch(format!(
            "density estimation needs at least 30 samples, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllPosed("samples must be finite".into()));
    }
    if n_points < 2 {
        return Err(Error::DimensionMismatch(
            "support grid needs at least 2 points".into(),
        ));
    }
    let h = reference_bandwidth(values)?;
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min) - 4.0 * h;
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 4.0 * h;
    let support: Vec<f64> = (0..n_points)
        .map(|i| lo + (hi - lo) * i as f64 / (n_points - 1) as f64)
        .collect();
    pdf_estimate_on(values, support, h)
}

/// Kernel density estimate on a caller-provided support grid, e.g. to put
/// two ensembles on a common axis. The bandwidth still comes from the
/// normal-reference rule on `values`.
pub fn pdf_estimate_with_support(values: &[f64], support: Vec<f64>) -> Result<PdfEstimate> {
    if values.len() < 30 {
        return Err(Error::DimensionMismatch(format!(
            "density estimation needs at least 30 samples, got {}",
            values.len()
        )));
    }
    let h = reference_bandwidth(values)?;
    pdf_estimate_on(values, support, h)
}

fn pdf_estimate_on(values: &[f64], support: Vec<f64>, h: f64) -> Result<PdfEstimate> {
    if support.len() < 2 || support.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::IllPosed(
            "support grid must be strictly increasing with at least 2 points".into(),
        ));
    }
    let n = values.len() as f64;
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    let mut density: Vec<f64> = support
        .iter()
        .map(|x| {
            let mut acc = 0.0;
            for v in values {
                let z = (x - v) / h;
                acc += (-0.5 * z * z).exp();
            }
            acc * norm
        })
        .collect();
    let mass = trapezoid(&support, &density);
    if !(mass > 0.0) {
        return Err(Error::IllPosed(
            "density mass on the requested support vanishes".into(),
        ));
    }
    density.iter_mut().for_each(|d| *d /= mass);
    Ok(PdfEstimate {
        support,
        density,
        bandwidth: h,
        n_samples: values.len(),
    })
}

/// Replay the constitutive law along a displacement history (rows = time
/// steps, columns = dofs) and return per-element stress histories indexed
/// as `[element][step]`. Feeding back a solver's own displacements
/// reproduces the stresses it tracked internally.
pub fn stress_recovery(
    problem: &Problem,
    mp: &[MaterialPoint],
    displacements: &DMatrix<f64>,
) -> Result<Vec<Vec<SymTensor>>> {
    let ne = problem.n_elements();
    let n_t = displacements.nrows();
    if mp.len() != ne {
        return Err(Error::DimensionMismatch(format!(
            "{} material points for {} elements",
            mp.len(),
            ne
        )));
    }
    if displacements.ncols() != problem.n_dofs() {
        return Err(Error::DimensionMismatch(format!(
            "history has {} columns for {} dofs",
            displacements.ncols(),
            problem.n_dofs()
        )));
    }
    let mut out = vec![vec![SymTensor::ZERO; n_t]; ne];
    let mut u = vec![0.0; problem.n_dofs()];
    let mut states = vec![PlasticState::default(); ne];
    for i in 0..n_t {
        for (j, v) in u.iter_mut().enumerate() {
            *v = displacements[(i, j)];
        }
        for e in 0..ne {
            let strain = problem.kinematics.strain(&problem.mesh, e, &u);
            let trial = trial_state(&mp[e], &strain, &states[e]);
            out[e][i] = stress_from_trial(&mp[e], &trial);
            states[e] = state_from_trial(&mp[e], &trial, &states[e]);
        }
    }
    Ok(out)
}

/// Write a per-sample error table. Header: `sample,with_update,without_update`.
pub fn write_error_table<W: Write>(
    mut w: W,
    with_update: &[f64],
    without_update: &[f64],
) -> Result<()> {
    if with_update.len() != without_update.len() {
        return Err(Error::DimensionMismatch(
            "error columns have different lengths".into(),
        ));
    }
    writeln!(w, "sample,with_update,without_update")?;
    for (s, (a, b)) in with_update.iter().zip(without_update).enumerate() {
        writeln!(w, "{s},{a:.17e},{b:.17e}")?;
    }
    Ok(())
}

/// Write density curves in long format so several labeled curves can share
/// one file. Header: `label,x,density`.
pub fn write_pdf_curves<W: Write>(mut w: W, curves: &[(&str, &PdfEstimate)]) -> Result<()> {
    writeln!(w, "label,x,density")?;
    for (label, pdf) in curves {
        if label.contains(',') || label.contains('\n') {
            return Err(Error::IllPosed(format!(
                "curve label {label:?} must not contain commas or newlines"
            )));
        }
        for (x, d) in pdf.support.iter().zip(&pdf.density) {
            writeln!(w, "{label},{x:.17e},{d:.17e}")?;
        }
    }
    Ok(())
}

/// Write the per-term convergence log of a separated-expansion run.
/// Header: `k,eps_u,inner_iterations,newton_failures`.
pub fn write_convergence_log<W: Write>(mut w: W, state: &crate::latin::LatinState) -> Result<()> {
    writeln!(w, "k,eps_u,inner_iterations,newton_failures")?;
    for (i, (eps, st)) in state.eps_u_log.iter().zip(&state.stats).enumerate() {
        writeln!(
            w,
            "{},{:.17e},{},{}",
            i + 1,
            eps,
            st.inner_iterations,
            st.newton_failures
        )?;
    }
    Ok(())
}
