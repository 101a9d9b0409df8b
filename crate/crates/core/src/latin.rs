//! Alternating solver building a separated expansion
//! u(x, t, theta) = sum_k lambda_k(theta) g_k(t) d_k(x).
//!
//! Each outer term alternates a global stage (one linear spatial solve with
//! sample-averaged stiffness weights and a time-averaged residual load) with
//! a local stage (per-sample, per-step scalar Newton along the fixed spatial
//! direction), until the direction stabilizes. Directions are kept
//! orthonormal; the per-term coefficient spectrum drives the stopping rule.

use crate::error::{Error, Result};
use crate::field::SampleSet;
use crate::mesh::apply_dirichlet;
use crate::plasticity::{
    state_from_trial, stress_from_trial, tangent_quadratic, trial_state, MaterialPoint,
    PlasticState,
};
use crate::problem::Problem;
use crate::sparse::SparseSym;
use crate::tensor::SymTensor;
use crate::timegrid::TimeGrid;
use nalgebra::DMatrix;
use rayon::prelude::*;

/// One separated term: per-sample coefficient, unit-time-norm profile, and
/// unit-Euclidean-norm nodal shape orthonormal to the earlier shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub coeffs: Vec<f64>,
    pub profile: Vec<f64>,
    pub shape: Vec<f64>,
}

/// Convergence bookkeeping for one accepted term.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TripletStats {
    pub inner_iterations: usize,
    /// Direction-change indicator per inner iteration (starts at the second).
    pub eps_d: Vec<f64>,
    /// Scalar-Newton failures summed over the term's local stages.
    pub newton_failures: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    /// Inner-loop direction tolerance.
    pub eps_d: f64,
    /// Outer-loop spectral tolerance.
    pub eps_u: f64,
    /// Scalar Newton tolerance of the local stage.
    pub eps_g: f64,
    pub max_terms: usize,
    pub max_inner: usize,
    pub max_newton: usize,
    /// Run aborts when more than this fraction of samples fails Newton.
    pub failure_fraction: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            eps_d: 1e-3,
            eps_u: 1e-8,
            eps_g: 1e-10,
            max_terms: 30,
            max_inner: 20,
            max_newton: 50,
            failure_fraction: 0.01,
        }
    }
}

/// Per-sample, per-element, per-step stress storage (6 components each).
#[derive(Clone, Debug, PartialEq)]
pub struct StressHistory {
    data: Vec<f64>,
    n_samples: usize,
    n_elements: usize,
    n_steps: usize,
}

impl StressHistory {
    pub fn zeros(n_samples: usize, n_elements: usize, n_steps: usize) -> StressHistory {
        StressHistory {
            data: vec![0.0; n_samples * n_elements * n_steps * 6],
            n_samples,
            n_elements,
            n_steps,
        }
    }

    pub fn from_flat(
        data: Vec<f64>,
        n_samples: usize,
        n_elements: usize,
        n_steps: usize,
    ) -> Result<StressHistory> {
        if data.len() != n_samples * n_elements * n_steps * 6 {
            return Err(Error::DimensionMismatch(format!(
                "stress history has {} entries, expected {}",
                data.len(),
                n_samples * n_elements * n_steps * 6
            )));
        }
        Ok(StressHistory {
            data,
            n_samples,
            n_elements,
            n_steps,
        })
    }

    #[inline]
    fn offset(&self, s: usize, e: usize, t: usize) -> usize {
        ((s * self.n_elements + e) * self.n_steps + t) * 6
    }

    pub fn get(&self, s: usize, e: usize, t: usize) -> SymTensor {
        let o = self.offset(s, e, t);
        SymTensor::new([
            self.data[o],
            self.data[o + 1],
            self.data[o + 2],
            self.data[o + 3],
            self.data[o + 4],
            self.data[o + 5],
        ])
    }

    pub fn set(&mut self, s: usize, e: usize, t: usize, v: &SymTensor) {
        let o = self.offset(s, e, t);
        self.data[o..o + 6].copy_from_slice(&v.0);
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_samples, self.n_elements, self.n_steps)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Writable sample block [e][t][c], for parallel fills.
    fn sample_blocks(&mut self) -> impl IndexedParallelIterator<Item = &mut [f64]> {
        let stride = self.n_elements * self.n_steps * 6;
        self.data.par_chunks_mut(stride)
    }
}

/// Why the outer loop stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Spectral indicator reached the target.
    Tolerance,
    /// No further independent direction exists (residual exhausted); the
    /// expansion is as complete as the sample set can express.
    BasisExhausted,
    /// Term budget hit before the indicator target.
    TermLimit,
}

/// Solver state: accepted terms plus everything needed to continue the run
/// or feed the downstream stages.
#[derive(Clone, Debug)]
pub struct LatinState {
    pub triplets: Vec<Triplet>,
    pub samples: SampleSet,
    pub grid: TimeGrid,
    /// Spectral error indicator after each accepted term.
    pub eps_u_log: Vec<f64>,
    pub stats: Vec<TripletStats>,
    pub global_solves: usize,
    pub stop_reason: StopReason,
    /// Stress history of the current expansion over the iteration samples.
    pub stress_history: StressHistory,
    /// Opaque run-configuration text persisted alongside the state.
    pub config_snapshot: String,
}

impl LatinState {
    pub fn k(&self) -> usize {
        self.triplets.len()
    }

    /// Expansion displacement history at one dof for one iteration sample.
    pub fn dof_history(&self, sample: usize, dof: usize) -> Vec<f64> {
        let n_t = self.grid.n_steps();
        let mut out = vec![0.0; n_t];
        for t in &self.triplets {
            let a = t.coeffs[sample] * t.shape[dof];
            for (o, p) in out.iter_mut().zip(&t.profile) {
                *o += a * p;
            }
        }
        out
    }

    /// Full expansion displacement vector for one sample at one time step.
    pub fn displacement(&self, sample: usize, step: usize) -> Vec<f64> {
        let n_dofs = self.triplets.first().map_or(0, |t| t.shape.len());
        let mut out = vec![0.0; n_dofs];
        for t in &self.triplets {
            let a = t.coeffs[sample] * t.profile[step];
            for (o, d) in out.iter_mut().zip(&t.shape) {
                *o += a * d;
            }
        }
        out
    }

    pub fn validate(&self, problem: &Problem) -> Result<()> {
        if self.samples.n_dim() != problem.stochastic_dimension() {
            return Err(Error::DimensionMismatch(format!(
                "state carries {} variables, problem has {}",
                self.samples.n_dim(),
                problem.stochastic_dimension()
            )));
        }
        if self.grid != problem.grid {
            return Err(Error::DimensionMismatch(
                "state time grid differs from the problem's".into(),
            ));
        }
        let n_s = self.samples.n_samples();
        for (i, t) in self.triplets.iter().enumerate() {
            if t.coeffs.len() != n_s
                || t.profile.len() != self.grid.n_steps()
                || t.shape.len() != problem.n_dofs()
            {
                return Err(Error::DimensionMismatch(format!(
                    "term {i} has inconsistent dimensions"
                )));
            }
        }
        if self.eps_u_log.len() != self.triplets.len() || self.stats.len() != self.triplets.len() {
            return Err(Error::Integrity(
                "per-term logs out of sync with term count".into(),
            ));
        }
        Ok(())
    }
}

/// Sample mean.
pub fn expectation(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Stiffness weights of the global stage: entry 0 is E{lambda^2} for the
/// mean component, entry 1 + i is E{lambda^2 * xi_{v_i}} for the stochastic
/// component driven by variable v_i.
pub fn component_weights(
    lambda: &[f64],
    samples: &SampleSet,
    term_variables: &[usize],
) -> Vec<f64> {
    debug_assert_eq!(lambda.len(), samples.n_samples());
    let n = lambda.len() as f64;
    let mut z = vec![0.0; 1 + term_variables.len()];
    for (s, &l) in lambda.iter().enumerate() {
        let l2 = l * l;
        z[0] += l2;
        for (i, &v) in term_variables.iter().enumerate() {
            z[1 + i] += l2 * samples.value(s, v);
        }
    }
    z.iter_mut().for_each(|v| *v /= n);
    z
}

/// Direction-change indicator between successive unit directions.
pub fn triplet_error(current: &[f64], previous: &[f64]) -> f64 {
    debug_assert_eq!(current.len(), previous.len());
    let dot: f64 = current.iter().zip(previous).map(|(a, b)| a * b).sum();
    2.0 - 2.0 * dot
}

/// Twice-re-orthogonalized Gram-Schmidt against an orthonormal basis,
/// then normalized. Rejects directions that collapse under projection.
pub fn orthonormalize(direction: &[f64], basis: &[&[f64]]) -> Result<Vec<f64>> {
    let norm0 = l2(direction);
    if !(norm0 > 0.0) {
        return Err(Error::DependentDirection);
    }
    let mut d: Vec<f64> = direction.iter().map(|v| v / norm0).collect();
    for _ in 0..2 {
        for b in basis {
            debug_assert_eq!(b.len(), d.len());
            let proj: f64 = b.iter().zip(&d).map(|(x, y)| x * y).sum();
            for (di, bi) in d.iter_mut().zip(*b) {
                *di -= proj * bi;
            }
        }
    }
    let norm = l2(&d);
    if norm < 1e-12 {
        return Err(Error::DependentDirection);
    }
    d.iter_mut().for_each(|v| *v /= norm);
    Ok(d)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dominant rank-1 split of the local-stage amplitude matrix. The time
/// profile is rescaled to unit temporal norm with its largest-magnitude
/// entry positive; magnitude and signs move into the coefficients.
///
/// The dominant pair is taken from the symmetric eigendecomposition of the
/// small temporal Gram matrix A^T A rather than from a bidiagonal SVD of A
/// itself: the structured amplitude matrices that arise here (exact zero
/// columns at load reversals, numerically exact low rank) are inputs on
/// which general SVD routines are easy to get wrong, while the symmetric
/// solver handles them without trouble.
pub fn split_rank1(amplitudes: &DMatrix<f64>, grid: &TimeGrid) -> Result<(Vec<f64>, Vec<f64>)> {
    if amplitudes.ncols() != grid.n_steps() {
        return Err(Error::DimensionMismatch(format!(
            "amplitude matrix has {} columns for {} time points",
            amplitudes.ncols(),
            grid.n_steps()
        )));
    }
    if amplitudes.amax() == 0.0 {
        return Err(Error::DegenerateTriplet);
    }
    let n_s = amplitudes.nrows();
    let n_t = amplitudes.ncols();
    let mut gram = DMatrix::zeros(n_t, n_t);
    for i in 0..n_t {
        for j in i..n_t {
            let mut acc = 0.0;
            for s in 0..n_s {
                acc += amplitudes[(s, i)] * amplitudes[(s, j)];
            }
            gram[(i, j)] = acc;
            gram[(j, i)] = acc;
        }
    }
    let eig = nalgebra::linalg::SymmetricEigen::new(gram);
    let mut top = 0;
    for (i, v) in eig.eigenvalues.iter().enumerate() {
        if *v > eig.eigenvalues[top] {
            top = i;
        }
    }
    if !(eig.eigenvalues[top] > 0.0) {
        return Err(Error::DegenerateTriplet);
    }
    let v: Vec<f64> = (0..n_t).map(|j| eig.eigenvectors[(j, top)]).collect();
    let c = grid.time_norm(&v);
    if !(c > 0.0) {
        return Err(Error::DegenerateTriplet);
    }
    let g: Vec<f64> = v.iter().map(|x| x / c).collect();
    // With g = v/c the best coefficients are lambda = c * (A v).
    let mut lambda: Vec<f64> = (0..n_s)
        .map(|s| c * (0..n_t).map(|j| amplitudes[(s, j)] * v[j]).sum::<f64>())
        .collect();
    let mut g = g;
    // Sign convention: the largest-magnitude profile entry is positive.
    let mut pick = 0;
    for (i, v) in g.iter().enumerate() {
        if v.abs() > g[pick].abs() {
            pick = i;
        }
    }
    if g[pick] < 0.0 {
        g.iter_mut().for_each(|v| *v = -*v);
        lambda.iter_mut().for_each(|v| *v = -*v);
    }
    Ok((lambda, g))
}

/// Spectral error indicator: smallest eigenvalue of the coefficient second
/// -moment matrix over its trace. Non-increasing in the term count by
/// eigenvalue interlacing.
pub fn solution_error(coeff_rows: &[&[f64]]) -> Result<f64> {
    let k = coeff_rows.len();
    if k == 0 {
        return Err(Error::DimensionMismatch("no terms".into()));
    }
    let n_s = coeff_rows[0].len();
    if n_s == 0 || coeff_rows.iter().any(|r| r.len() != n_s) {
        return Err(Error::DimensionMismatch(
            "coefficient rows must share a positive sample count".into(),
        ));
    }
    let mut cov = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let m = coeff_rows[i]
                .iter()
                .zip(coeff_rows[j])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / n_s as f64;
            cov[(i, j)] = m;
            cov[(j, i)] = m;
        }
    }
    let eig = nalgebra::linalg::SymmetricEigen::new(cov);
    // Gram spectra are nonnegative; clamp rounding leakage.
    let mut evs: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    evs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let trace: f64 = evs.iter().sum();
    if !(trace > 0.0) {
        return Err(Error::IllPosed("all coefficient samples vanish".into()));
    }
    Ok(evs[k - 1] / trace)
}

/// Spatial stage: solve (sum_i z_i K_i) d = F on the free dofs, where F
/// combines the time-averaged external load with the time- and
/// sample-averaged stress residual of the current expansion. Returns the raw
/// (not yet orthonormalized) full-length direction.
pub fn global_stage(
    problem: &Problem,
    components: &[SparseSym],
    lambda: &[f64],
    g: &[f64],
    samples: &SampleSet,
    stress_history: &StressHistory,
) -> Result<Vec<f64>> {
    let grid = &problem.grid;
    let n_s = samples.n_samples();
    if lambda.len() != n_s {
        return Err(Error::DimensionMismatch(
            "coefficient vector does not match sample count".into(),
        ));
    }
    if g.len() != grid.n_steps() {
        return Err(Error::DimensionMismatch(
            "time profile does not match the grid".into(),
        ));
    }
    let term_vars = problem.stiffness_variables();
    if components.len() != 1 + term_vars.len() {
        return Err(Error::DimensionMismatch(
            "stiffness components do not match the modulus expansion".into(),
        ));
    }
    let z = component_weights(lambda, samples, &term_vars);
    if !(z[0] > 0.0) {
        return Err(Error::IllPosed(
            "coefficient samples are identically zero".into(),
        ));
    }

    let refs: Vec<&SparseSym> = components.iter().collect();
    let k = SparseSym::linear_combination(&z, &refs)?;

    // Midpoint weights g(t*) dt shared by both load terms.
    let weights: Vec<f64> = (0..grid.n_intervals())
        .map(|i| grid.midpoint(g, i) * grid.dt(i))
        .collect();

    // External traction term.
    let mean_lambda = expectation(lambda);
    let w_ext: f64 = (0..grid.n_intervals())
        .map(|i| weights[i] * grid.midpoint_multiplier(i))
        .sum::<f64>()
        * mean_lambda;
    let mut rhs: Vec<f64> = problem.traction_unit().iter().map(|f| w_ext * f).collect();

    // Stress residual of the current expansion, averaged over samples with
    // coefficient weights and over time with midpoint weights.
    let (hs, he, ht) = stress_history.dims();
    if hs != n_s || he != problem.n_elements() || ht != grid.n_steps() {
        return Err(Error::DimensionMismatch(
            "stress history does not match the problem".into(),
        ));
    }
    let mut avg = vec![SymTensor::ZERO; he];
    for s in 0..n_s {
        let ws = lambda[s] / n_s as f64;
        if ws == 0.0 {
            continue;
        }
        for e in 0..he {
            let mut acc = SymTensor::ZERO;
            for (i, &w) in weights.iter().enumerate() {
                let mid = stress_history
                    .get(s, e, i)
                    .add(&stress_history.get(s, e, i + 1))
                    .scale(0.5);
                acc = acc.add_scaled(w, &mid);
            }
            avg[e] = avg[e].add_scaled(ws, &acc);
        }
    }
    let residual = crate::mesh::assemble_internal_force(&problem.mesh, &problem.kinematics, &avg)?;
    for (r, q) in rhs.iter_mut().zip(&residual) {
        *r -= q;
    }

    let reduced = apply_dirichlet(&k, &rhs, problem.mesh.dirichlet_dofs())?;
    reduced.solve()
}

/// Outcome of one local stage.
#[derive(Clone, Debug)]
pub struct LocalStageResult {
    /// Per-sample, per-step amplitude along the direction.
    pub amplitudes: DMatrix<f64>,
    pub failed_samples: Vec<usize>,
    pub newton_iterations: usize,
}

struct SweepTermRefs<'a> {
    coeff: f64,
    profile: &'a [f64],
    strains: &'a [SymTensor],
}

/// March one sample through all time steps, solving the scalar Newton
/// problem along `dir_strain` at each step and committing internal
/// variables at step convergence. Returns (amplitudes, converged, iterations).
#[allow(clippy::too_many_arguments)]
fn scalar_sweep(
    grid: &TimeGrid,
    volumes: &[f64],
    mp: &[MaterialPoint],
    terms: &[SweepTermRefs<'_>],
    dir_strain: &[SymTensor],
    fd: f64,
    eps_g: f64,
    max_newton: usize,
) -> (Vec<f64>, bool, usize) {
    let n_t = grid.n_steps();
    let ne = volumes.len();
    let mut states = vec![PlasticState::default(); ne];
    let mut base = vec![SymTensor::ZERO; ne];
    let mut amplitudes = vec![0.0; n_t];
    let mut converged = true;
    let mut total_iters = 0;

    for i in 0..n_t {
        // Strain of the frozen expansion at this step.
        for (e, b) in base.iter_mut().enumerate() {
            let mut acc = SymTensor::ZERO;
            for t in terms {
                acc = acc.add_scaled(t.coeff * t.profile[i], &t.strains[e]);
            }
            *b = acc;
        }
        let mult = grid.multipliers()[i];
        let mut g = if i == 0 { 0.0 } else { amplitudes[i - 1] };
        let mut step_ok = false;
        // The residual is strictly decreasing in g (its slope is -a with
        // a > 0), so every evaluation brackets the root from one side.
        // Newton proposals that leave the bracket are replaced by
        // bisection, which keeps the iteration convergent across the
        // stiffness kinks at elastic-plastic transitions.
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for _ in 0..max_newton {
            total_iters += 1;
            let mut a = 0.0;
            let mut b = mult * fd;
            // Magnitude of the residual's summands, for the rounding floor.
            let mut babs = b.abs();
            for e in 0..ne {
                let strain = base[e].add_scaled(g, &dir_strain[e]);
                let trial = trial_state(&mp[e], &strain, &states[e]);
                let sigma = stress_from_trial(&mp[e], &trial);
                let w = volumes[e] * sigma.ddot(&dir_strain[e]);
                b -= w;
                babs += w.abs();
                a += volumes[e] * tangent_quadratic(&mp[e], &trial, &dir_strain[e]);
            }
            if !(a > 0.0) || !a.is_finite() || !b.is_finite() {
                step_ok = false;
                break;
            }
            // Residual at the cancellation floor of its own summands:
            // nothing left to resolve (covers directions the expansion
            // already equilibrates, where g has no meaningful scale).
            if b.abs() <= 1e-13 * babs {
                step_ok = true;
                break;
            }
            if b > 0.0 {
                lo = lo.max(g);
            } else {
                hi = hi.min(g);
            }
            let mut next = g + b / a;
            if !(next > lo && next < hi) && lo.is_finite() && hi.is_finite() {
                next = 0.5 * (lo + hi);
            }
            let dg = next - g;
            g = next;
            if dg * dg <= eps_g * g * g || dg == 0.0 {
                step_ok = true;
                break;
            }
        }
        if !step_ok {
            converged = false;
        }
        // Commit internal variables along the accepted trajectory.
        for e in 0..ne {
            let strain = base[e].add_scaled(g, &dir_strain[e]);
            let trial = trial_state(&mp[e], &strain, &states[e]);
            states[e] = state_from_trial(&mp[e], &trial, &states[e]);
        }
        amplitudes[i] = g;
    }
    (amplitudes, converged, total_iters)
}

fn basis_strains(problem: &Problem, triplets: &[Triplet]) -> Result<Vec<Vec<SymTensor>>> {
    triplets
        .iter()
        .map(|t| crate::mesh::strain_from_displacement(&problem.mesh, &problem.kinematics, &t.shape))
        .collect()
}

fn element_volumes(problem: &Problem) -> Vec<f64> {
    (0..problem.n_elements())
        .map(|e| problem.kinematics.volume(e))
        .collect()
}

/// Temporal-stochastic stage: for every sample, re-solve the amplitude of
/// the direction over all time steps with the expansion u_{k-1} frozen.
pub fn local_stage(
    problem: &Problem,
    realizations: &[Vec<MaterialPoint>],
    prior: &[Triplet],
    direction: &[f64],
    opts: &SolverOptions,
) -> Result<LocalStageResult> {
    let n_s = realizations.len();
    if n_s == 0 {
        return Err(Error::DimensionMismatch("no samples".into()));
    }
    let dir_strain =
        crate::mesh::strain_from_displacement(&problem.mesh, &problem.kinematics, direction)?;
    let strains = basis_strains(problem, prior)?;
    let volumes = element_volumes(problem);
    let fd: f64 = problem
        .traction_unit()
        .iter()
        .zip(direction)
        .map(|(f, d)| f * d)
        .sum();

    let rows: Vec<(Vec<f64>, bool, usize)> = realizations
        .par_iter()
        .enumerate()
        .map(|(s, mp)| {
            let terms: Vec<SweepTermRefs<'_>> = prior
                .iter()
                .zip(&strains)
                .map(|(t, st)| SweepTermRefs {
                    coeff: t.coeffs[s],
                    profile: &t.profile,
                    strains: st,
                })
                .collect();
            scalar_sweep(
                &problem.grid,
                &volumes,
                mp,
                &terms,
                &dir_strain,
                fd,
                opts.eps_g,
                opts.max_newton,
            )
        })
        .collect();

    let n_t = problem.grid.n_steps();
    let mut amplitudes = DMatrix::zeros(n_s, n_t);
    let mut failed = Vec::new();
    let mut iters = 0;
    for (s, (row, ok, it)) in rows.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            amplitudes[(s, t)] = *v;
        }
        if !ok {
            failed.push(s);
        }
        iters += it;
    }
    if failed.len() as f64 > opts.failure_fraction * n_s as f64 {
        return Err(Error::ConvergenceFailure(format!(
            "{} of {} samples failed the scalar Newton stage",
            failed.len(),
            n_s
        )));
    }
    if !failed.is_empty() {
        log::warn!(
            "local stage: {} of {} samples did not reach tolerance",
            failed.len(),
            n_s
        );
    }
    Ok(LocalStageResult {
        amplitudes,
        failed_samples: failed,
        newton_iterations: iters,
    })
}

/// Strain-driven constitutive sweep of the expansion over all samples and
/// steps; returns the stress history and leaves the committed internal
/// variables behind. Runs at the start of every term and once at the end.
pub fn stress_sweep(
    problem: &Problem,
    realizations: &[Vec<MaterialPoint>],
    triplets: &[Triplet],
) -> Result<StressHistory> {
    let n_s = realizations.len();
    let ne = problem.n_elements();
    let n_t = problem.grid.n_steps();
    let strains = basis_strains(problem, triplets)?;
    let mut history = StressHistory::zeros(n_s, ne, n_t);
    history
        .sample_blocks()
        .enumerate()
        .for_each(|(s, block)| {
            let mp = &realizations[s];
            let mut states = vec![PlasticState::default(); ne];
            for i in 0..n_t {
                for e in 0..ne {
                    let mut strain = SymTensor::ZERO;
                    for (t, st) in triplets.iter().zip(&strains) {
                        strain = strain.add_scaled(t.coeffs[s] * t.profile[i], &st[e]);
                    }
                    let trial = trial_state(&mp[e], &strain, &states[e]);
                    let sigma = stress_from_trial(&mp[e], &trial);
                    states[e] = state_from_trial(&mp[e], &trial, &states[e]);
                    let o = ((e) * n_t + i) * 6;
                    block[o..o + 6].copy_from_slice(&sigma.0);
                }
            }
        });
    Ok(history)
}

/// Fit per-sample coefficients of the frozen basis for new samples by
/// re-running the scalar temporal stage term by term; this is the
/// "expansion without the update pass" evaluation for samples outside the
/// iteration set. Returns an n_samples x k coefficient matrix.
pub fn project_samples(
    problem: &Problem,
    state: &LatinState,
    samples: &SampleSet,
    opts: &SolverOptions,
) -> Result<DMatrix<f64>> {
    state.validate(problem)?;
    if samples.n_dim() != problem.stochastic_dimension() {
        return Err(Error::DimensionMismatch(
            "samples do not match the problem's variables".into(),
        ));
    }
    let k = state.k();
    let n_s = samples.n_samples();
    let strains = basis_strains(problem, &state.triplets)?;
    let volumes = element_volumes(problem);
    let fds: Vec<f64> = state
        .triplets
        .iter()
        .map(|t| {
            problem
                .traction_unit()
                .iter()
                .zip(&t.shape)
                .map(|(f, d)| f * d)
                .sum()
        })
        .collect();

    let rows: Vec<Result<Vec<f64>>> = (0..n_s)
        .into_par_iter()
        .map(|s| {
            let mp = problem.material_realization(samples.row(s))?;
            let mut coeffs = vec![0.0; k];
            for term in 0..k {
                let term_refs: Vec<SweepTermRefs<'_>> = (0..term)
                    .map(|l| SweepTermRefs {
                        coeff: coeffs[l],
                        profile: &state.triplets[l].profile,
                        strains: &strains[l],
                    })
                    .collect();
                let (amps, ok, _) = scalar_sweep(
                    &problem.grid,
                    &volumes,
                    &mp,
                    &term_refs,
                    &strains[term],
                    fds[term],
                    opts.eps_g,
                    opts.max_newton,
                );
                if !ok {
                    return Err(Error::ConvergenceFailure(format!(
                        "sample {s} failed while fitting term {term}"
                    )));
                }
                // Least-squares fit onto the unit-norm profile.
                coeffs[term] = problem
                    .grid
                    .time_dot(&amps, &state.triplets[term].profile);
            }
            Ok(coeffs)
        })
        .collect();

    let mut out = DMatrix::zeros(n_s, k);
    for (s, row) in rows.into_iter().enumerate() {
        let row = row?;
        for (j, v) in row.into_iter().enumerate() {
            out[(s, j)] = v;
        }
    }
    Ok(out)
}

/// Run the alternating iteration from scratch.
pub fn solve(problem: &Problem, samples: SampleSet, opts: &SolverOptions) -> Result<LatinState> {
    let n_s = samples.n_samples();
    let state = LatinState {
        triplets: Vec::new(),
        grid: problem.grid.clone(),
        eps_u_log: Vec::new(),
        stats: Vec::new(),
        global_solves: 0,
        stop_reason: StopReason::TermLimit,
        stress_history: StressHistory::zeros(n_s, problem.n_elements(), problem.n_steps()),
        config_snapshot: String::new(),
        samples,
    };
    run(problem, state, opts)
}

/// Continue a previous run; already-accepted terms are kept verbatim.
pub fn resume(problem: &Problem, state: LatinState, opts: &SolverOptions) -> Result<LatinState> {
    run(problem, state, opts)
}

fn run(problem: &Problem, mut state: LatinState, opts: &SolverOptions) -> Result<LatinState> {
    validate_options(opts)?;
    state.validate(problem)?;
    let n_s = state.samples.n_samples();
    let components = problem.stiffness_components()?;
    let realizations: Vec<Vec<MaterialPoint>> = (0..n_s)
        .into_par_iter()
        .map(|s| problem.material_realization(state.samples.row(s)))
        .collect::<Result<_>>()?;
    let g0 = problem.grid.normalized_multiplier()?;

    loop {
        if let Some(&last) = state.eps_u_log.last() {
            if last <= opts.eps_u {
                state.stop_reason = StopReason::Tolerance;
                break;
            }
        }
        if state.k() >= opts.max_terms {
            log::warn!(
                "stopping at {} terms with indicator {:.3e} above target {:.3e}",
                state.k(),
                state.eps_u_log.last().copied().unwrap_or(1.0),
                opts.eps_u
            );
            state.stop_reason = StopReason::TermLimit;
            break;
        }

        let history = stress_sweep(problem, &realizations, &state.triplets)?;
        let mut lambda = vec![1.0; n_s];
        let mut g = g0.clone();
        let mut prev_d: Option<Vec<f64>> = None;
        let mut eps_d_trace = Vec::new();
        let mut newton_failures = 0;
        let mut inner = 0;
        let mut accepted: Option<(Vec<f64>, Vec<f64>, Vec<f64>)> = None;
        let mut stop_outer = false;

        for j in 1..=opts.max_inner {
            inner = j;
            let d_raw = global_stage(
                problem,
                &components,
                &lambda,
                &g,
                &state.samples,
                &history,
            )?;
            state.global_solves += 1;
            let basis: Vec<&[f64]> = state.triplets.iter().map(|t| t.shape.as_slice()).collect();
            let d = match orthonormalize(&d_raw, &basis) {
                Ok(d) => d,
                Err(Error::DependentDirection) => {
                    log::info!(
                        "term {}: direction is dependent on the basis, stopping",
                        state.k() + 1
                    );
                    stop_outer = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            let local = local_stage(problem, &realizations, &state.triplets, &d, opts)?;
            newton_failures += local.failed_samples.len();
            let (lam, prof) = match split_rank1(&local.amplitudes, &problem.grid) {
                Ok(x) => x,
                Err(Error::DegenerateTriplet) => {
                    log::info!(
                        "term {}: local amplitudes vanish, stopping",
                        state.k() + 1
                    );
                    stop_outer = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            // Noise-floor guard: once the residual's amplitude falls to
            // rounding level relative to the accepted terms, the basis is
            // exhausted and further terms would only encode noise.
            let prev_scale = state
                .triplets
                .iter()
                .map(|t| l2(&t.coeffs))
                .fold(0.0_f64, f64::max);
            if !state.triplets.is_empty() && l2(&lam) <= 1e-14 * prev_scale {
                log::info!(
                    "term {}: amplitudes at the noise floor, stopping",
                    state.k() + 1
                );
                stop_outer = true;
                break;
            }
            lambda = lam;
            g = prof;
            if let Some(pd) = &prev_d {
                let e = triplet_error(&d, pd);
                eps_d_trace.push(e);
                if e <= opts.eps_d {
                    accepted = Some((lambda.clone(), g.clone(), d));
                    break;
                }
            }
            if j == opts.max_inner {
                log::warn!(
                    "term {}: direction not settled after {} inner iterations (last indicator {:.3e}), accepting current direction",
                    state.k() + 1,
                    j,
                    eps_d_trace.last().copied().unwrap_or(f64::NAN)
                );
                accepted = Some((lambda.clone(), g.clone(), d));
            } else {
                prev_d = Some(d);
            }
        }

        if stop_outer {
            state.stop_reason = StopReason::BasisExhausted;
            break;
        }
        let (lam, prof, d) = accepted.expect("inner loop always yields a direction");
        state.triplets.push(Triplet {
            coeffs: lam,
            profile: prof,
            shape: d,
        });
        state.stats.push(TripletStats {
            inner_iterations: inner,
            eps_d: eps_d_trace,
            newton_failures,
        });
        let rows: Vec<&[f64]> = state.triplets.iter().map(|t| t.coeffs.as_slice()).collect();
        let eps = solution_error(&rows)?;
        state.eps_u_log.push(eps);
        log::info!(
            "term {}: {} inner iterations, indicator {:.3e}",
            state.k(),
            inner,
            eps
        );
    }

    state.stress_history = stress_sweep(problem, &realizations, &state.triplets)?;
    Ok(state)
}

fn validate_options(opts: &SolverOptions) -> Result<()> {
    let positive = [
        ("eps_d", opts.eps_d),
        ("eps_u", opts.eps_u),
        ("eps_g", opts.eps_g),
        ("failure_fraction", opts.failure_fraction),
    ];
    for (name, v) in positive {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::IllPosed(format!("{name} must be positive, got {v}")));
        }
    }
    if opts.max_terms == 0 || opts.max_inner == 0 || opts.max_newton == 0 {
        return Err(Error::IllPosed("iteration limits must be >= 1".into()));
    }
    Ok(())
}
