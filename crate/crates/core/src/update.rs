//! Reduced-order recomputation pass: with the spatial basis D frozen, every
//! sample gets its full temporal coefficient trajectories re-solved by a
//! k-dimensional Newton iteration per time step. This sharpens the separated
//! expansion (which ties each sample to rank-1 time behaviour per term) into
//! the best solution expressible on span(D), and evaluates new samples that
//! never entered the iteration.

use crate::error::{Error, Result};
use crate::field::SampleSet;
use crate::latin::LatinState;
use crate::plasticity::{
    state_from_trial, stress_from_trial, tangent_apply, trial_state, MaterialPoint, PlasticState,
};
use crate::problem::Problem;
use crate::tensor::SymTensor;
use crate::timegrid::TimeGrid;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

#[derive(Clone, Copy, Debug)]
pub struct UpdateOptions {
    /// Relative Newton increment tolerance of the per-step solve.
    pub eps_newton: f64,
    pub max_newton: usize,
    /// Run aborts when more than this fraction of samples fails.
    pub failure_fraction: f64,
}

impl Default for UpdateOptions {
    fn default() -> Self {
        UpdateOptions {
            eps_newton: 1e-10,
            max_newton: 50,
            failure_fraction: 0.01,
        }
    }
}

/// Per-sample coefficient trajectories on the frozen basis, self-contained
/// for postprocessing (carries the basis and the grid).
#[derive(Clone, Debug)]
pub struct ReducedSolution {
    /// Flat coefficients, laid out sample-major: [s][t][l].
    data: Vec<f64>,
    n_samples: usize,
    n_steps: usize,
    k: usize,
    /// Unit-norm spatial basis vectors, one per term.
    pub basis: Vec<Vec<f64>>,
    pub grid: TimeGrid,
    /// False entries mark samples that missed the Newton tolerance at some
    /// step; exclude them from statistics.
    pub converged: Vec<bool>,
    /// Total Newton iterations per sample.
    pub iterations: Vec<usize>,
}

impl ReducedSolution {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        data: Vec<f64>,
        n_samples: usize,
        n_steps: usize,
        k: usize,
        basis: Vec<Vec<f64>>,
        grid: TimeGrid,
        converged: Vec<bool>,
        iterations: Vec<usize>,
    ) -> Result<ReducedSolution> {
        if data.len() != n_samples * n_steps * k
            || basis.len() != k
            || grid.n_steps() != n_steps
            || converged.len() != n_samples
            || iterations.len() != n_samples
        {
            return Err(Error::DimensionMismatch(
                "reduced solution parts are inconsistent".into(),
            ));
        }
        Ok(ReducedSolution {
            data,
            n_samples,
            n_steps,
            k,
            basis,
            grid,
            converged,
            iterations,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn coeff(&self, sample: usize, step: usize, term: usize) -> f64 {
        self.data[(sample * self.n_steps + step) * self.k + term]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Displacement history of one dof for one sample.
    pub fn dof_history(&self, sample: usize, dof: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_steps];
        for (l, shape) in self.basis.iter().enumerate() {
            let d = shape[dof];
            for (t, o) in out.iter_mut().enumerate() {
                *o += self.coeff(sample, t, l) * d;
            }
        }
        out
    }

    /// Full displacement vector of one sample at one step.
    pub fn displacement(&self, sample: usize, step: usize) -> Vec<f64> {
        let n = self.basis.first().map_or(0, |b| b.len());
        let mut out = vec![0.0; n];
        for (l, shape) in self.basis.iter().enumerate() {
            let c = self.coeff(sample, step, l);
            for (o, s) in out.iter_mut().zip(shape) {
                *o += c * s;
            }
        }
        out
    }
}

/// Residual of the reduced problem (external minus internal contraction
/// against every basis vector) at the given coefficients.
fn reduced_residual(
    basis_strains: &[Vec<SymTensor>],
    volumes: &[f64],
    mp: &[MaterialPoint],
    states: &[PlasticState],
    coeffs: &[f64],
    external: &[f64],
) -> Vec<f64> {
    let ne = volumes.len();
    let mut f_t = external.to_vec();
    for e in 0..ne {
        let mut strain = SymTensor::ZERO;
        for (l, st) in basis_strains.iter().enumerate() {
            strain = strain.add_scaled(coeffs[l], &st[e]);
        }
        let trial = trial_state(&mp[e], &strain, &states[e]);
        let sigma = stress_from_trial(&mp[e], &trial);
        for (l, st) in basis_strains.iter().enumerate() {
            f_t[l] -= volumes[e] * sigma.ddot(&st[e]);
        }
    }
    f_t
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One Newton step of the reduced problem at a fixed time: returns the
/// coefficient increment, the reduced tangent, and the reduced residual.
/// `external` holds the current load contraction against each basis vector;
/// `states` are the internal variables committed at the previous step.
pub fn reduced_newton_step(
    basis_strains: &[Vec<SymTensor>],
    volumes: &[f64],
    mp: &[MaterialPoint],
    states: &[PlasticState],
    coeffs: &[f64],
    external: &[f64],
) -> Result<(Vec<f64>, DMatrix<f64>, Vec<f64>)> {
    let k = basis_strains.len();
    debug_assert_eq!(coeffs.len(), k);
    debug_assert_eq!(external.len(), k);
    let ne = volumes.len();
    let mut k_t = DMatrix::zeros(k, k);
    let mut f_t = DVector::from_column_slice(external);
    let mut applied = vec![SymTensor::ZERO; k];
    for e in 0..ne {
        let mut strain = SymTensor::ZERO;
        for (l, st) in basis_strains.iter().enumerate() {
            strain = strain.add_scaled(coeffs[l], &st[e]);
        }
        let trial = trial_state(&mp[e], &strain, &states[e]);
        let sigma = stress_from_trial(&mp[e], &trial);
        let v = volumes[e];
        for (l, st) in basis_strains.iter().enumerate() {
            f_t[l] -= v * sigma.ddot(&st[e]);
            applied[l] = tangent_apply(&mp[e], &trial, &st[e]);
        }
        for l in 0..k {
            for m in l..k {
                let t = v * applied[m].ddot(&basis_strains[l][e]);
                k_t[(l, m)] += t;
                if m != l {
                    k_t[(m, l)] += t;
                }
            }
        }
    }
    let delta = match k_t.clone().cholesky() {
        Some(ch) => ch.solve(&f_t),
        None => {
            // Near-singular reduced tangent (elastic/plastic switching):
            // regularize with a small ridge relative to the diagonal scale.
            let ridge = 1e-12 * k_t.diagonal().amax().max(1.0);
            log::warn!("reduced tangent not positive definite; adding ridge {ridge:.3e}");
            let mut kr = k_t.clone();
            for i in 0..k {
                kr[(i, i)] += ridge;
            }
            match kr.cholesky() {
                Some(ch) => ch.solve(&f_t),
                None => {
                    return Err(Error::SingularSystem(
                        "reduced tangent singular even after regularization".into(),
                    ))
                }
            }
        }
    };
    Ok((
        delta.iter().copied().collect(),
        k_t,
        f_t.iter().copied().collect(),
    ))
}

/// March all samples through the time grid, re-solving the reduced
/// coefficients with warm starts from the previous step and committing the
/// internal variables at each step's converged point.
pub fn update_stage(
    problem: &Problem,
    state: &LatinState,
    samples: &SampleSet,
    opts: &UpdateOptions,
) -> Result<ReducedSolution> {
    state.validate(problem)?;
    let k = state.k();
    if k == 0 {
        return Err(Error::DimensionMismatch(
            "no terms to update; run the solver first".into(),
        ));
    }
    let n_s = samples.n_samples();
    if n_s == 0 {
        return Err(Error::DimensionMismatch("no samples to update".into()));
    }
    if samples.n_dim() != problem.stochastic_dimension() {
        return Err(Error::DimensionMismatch(
            "update samples do not match the problem's variables".into(),
        ));
    }
    if !(opts.eps_newton > 0.0) || opts.max_newton == 0 {
        return Err(Error::IllPosed("update tolerances must be positive".into()));
    }
    let strains: Vec<Vec<SymTensor>> = state
        .triplets
        .iter()
        .map(|t| {
            crate::mesh::strain_from_displacement(&problem.mesh, &problem.kinematics, &t.shape)
        })
        .collect::<Result<_>>()?;
    let volumes: Vec<f64> = (0..problem.n_elements())
        .map(|e| problem.kinematics.volume(e))
        .collect();
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
    let n_t = problem.n_steps();
    let ne = problem.n_elements();
    // Load magnitude that anchors the absolute residual floor.
    let load_scale = problem
        .grid
        .multipliers()
        .iter()
        .map(|m| m.abs())
        .fold(0.0_f64, f64::max)
        * l2(&fds);

    struct Row {
        coeffs: Vec<f64>,
        converged: bool,
        iterations: usize,
    }

    let rows: Vec<Result<Row>> = (0..n_s)
        .into_par_iter()
        .map(|s| {
            let mp = problem.material_realization(samples.row(s))?;
            let mut states = vec![PlasticState::default(); ne];
            let mut coeffs = vec![0.0; k];
            let mut out = vec![0.0; n_t * k];
            let mut converged = true;
            let mut iterations = 0;
            // Largest coefficient norm committed so far; keeps the relative
            // test meaningful at steps where the solution passes through 0.
            let mut c_ref = 0.0_f64;
            for i in 0..n_t {
                let mult = problem.grid.multipliers()[i];
                let external: Vec<f64> = fds.iter().map(|f| mult * f).collect();
                let mut step_ok = false;
                for _ in 0..opts.max_newton {
                    iterations += 1;
                    let (delta, _, resid) = reduced_newton_step(
                        &strains, &volumes, &mp, &states, &coeffs, &external,
                    )?;
                    let r0 = l2(&resid);
                    if r0 <= 1e-12 * load_scale {
                        step_ok = true;
                        break;
                    }
                    // Backtrack on the residual norm: across elastic-plastic
                    // transitions the tangent drops and the full step
                    // overshoots, so damp it until the residual decreases.
                    let mut eta = 1.0;
                    for _ in 0..30 {
                        let trial_coeffs: Vec<f64> = coeffs
                            .iter()
                            .zip(&delta)
                            .map(|(c, d)| c + eta * d)
                            .collect();
                        let rt = l2(&reduced_residual(
                            &strains,
                            &volumes,
                            &mp,
                            &states,
                            &trial_coeffs,
                            &external,
                        ));
                        if rt <= (1.0 - 1e-4 * eta) * r0 {
                            break;
                        }
                        eta *= 0.5;
                    }
                    let mut d2 = 0.0;
                    let mut c2 = 0.0;
                    for (c, d) in coeffs.iter_mut().zip(&delta) {
                        let step = eta * d;
                        *c += step;
                        d2 += step * step;
                        c2 += *c * *c;
                    }
                    // Increment-based exit only for undamped steps, whose
                    // size is an honest measure of distance to the root.
                    if eta == 1.0
                        && (d2.sqrt() <= opts.eps_newton * c2.sqrt().max(c_ref) || d2 == 0.0)
                    {
                        step_ok = true;
                        break;
                    }
                }
                if !step_ok {
                    converged = false;
                }
                c_ref = c_ref.max(coeffs.iter().map(|c| c * c).sum::<f64>().sqrt());
                // Commit internal variables at the accepted coefficients.
                for e in 0..ne {
                    let mut strain = SymTensor::ZERO;
                    for (l, st) in strains.iter().enumerate() {
                        strain = strain.add_scaled(coeffs[l], &st[e]);
                    }
                    let trial = trial_state(&mp[e], &strain, &states[e]);
                    states[e] = state_from_trial(&mp[e], &trial, &states[e]);
                }
                out[i * k..(i + 1) * k].copy_from_slice(&coeffs);
            }
            Ok(Row {
                coeffs: out,
                converged,
                iterations,
            })
        })
        .collect();

    let mut data = Vec::with_capacity(n_s * n_t * k);
    let mut converged = Vec::with_capacity(n_s);
    let mut iterations = Vec::with_capacity(n_s);
    for row in rows {
        let row = row?;
        data.extend_from_slice(&row.coeffs);
        converged.push(row.converged);
        iterations.push(row.iterations);
    }
    let failed = converged.iter().filter(|c| !**c).count();
    if failed as f64 > opts.failure_fraction * n_s as f64 {
        return Err(Error::ConvergenceFailure(format!(
            "{failed} of {n_s} samples failed the reduced Newton pass"
        )));
    }
    if failed > 0 {
        log::warn!("reduced pass: {failed} of {n_s} samples flagged non-converged");
    }
    ReducedSolution::from_parts(
        data,
        n_s,
        n_t,
        k,
        state.triplets.iter().map(|t| t.shape.clone()).collect(),
        problem.grid.clone(),
        converged,
        iterations,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AffineField, VariableKind};
    use crate::latin::{solve, SolverOptions};
    use crate::mesh::{build_box_mesh, Face};
    use crate::sparse::SparseSym;
    use approx::assert_relative_eq;

    fn elastic_problem(n_vars: usize) -> Problem {
        let mesh = build_box_mesh([2.0, 1.0, 1.0], [2, 1, 1], Face::XNeg, Face::XPos).unwrap();
        let ne = mesh.n_elements();
        let youngs = if n_vars > 0 {
            AffineField::scalar_random(2.11e5, 2.11e4, 0, ne)
        } else {
            AffineField::uniform(2.11e5, ne)
        };
        Problem::new(
            mesh,
            youngs,
            // Yield far above any stress this load produces: purely elastic.
            AffineField::uniform(1e9, ne),
            0.29,
            0.01,
            [0.0, 20.0, 0.0],
            TimeGrid::default_profile(11).unwrap(),
            vec![VariableKind::UniformUnit; n_vars],
        )
        .unwrap()
    }

    fn problem_strains(problem: &Problem, shape: &[f64]) -> Vec<SymTensor> {
        crate::mesh::strain_from_displacement(&problem.mesh, &problem.kinematics, shape).unwrap()
    }

    #[test]
    fn single_term_step_matches_scalar_stage_quantities() {
        // For k = 1 the reduced tangent and residual are exactly the scalar
        // a and b of the per-sample temporal stage.
        let problem = elastic_problem(0);
        let mp = problem.material_realization(&[]).unwrap();
        let components = problem.stiffness_components().unwrap();
        let k0 = SparseSym::linear_combination(&[1.0], &[&components[0]]).unwrap();
        let stat = crate::mesh::apply_dirichlet(
            &k0,
            problem.traction_unit(),
            problem.mesh.dirichlet_dofs(),
        )
        .unwrap()
        .solve()
        .unwrap();
        let d = crate::latin::orthonormalize(&stat, &[]).unwrap();
        let strains = vec![problem_strains(&problem, &d)];
        let volumes: Vec<f64> = (0..problem.n_elements())
            .map(|e| problem.kinematics.volume(e))
            .collect();
        let states = vec![PlasticState::default(); problem.n_elements()];
        let fd: f64 = problem
            .traction_unit()
            .iter()
            .zip(&d)
            .map(|(f, x)| f * x)
            .sum();
        let mult = 0.7;
        let coeff = 1e-4;
        let (delta, k_t, f_t) = reduced_newton_step(
            &strains,
            &volumes,
            &mp,
            &states,
            &[coeff],
            &[mult * fd],
        )
        .unwrap();
        // Oracle: a = d^T K d (elastic), b = mult*fd - coeff * a.
        let kd = k0.matvec(&d);
        let a: f64 = kd.iter().zip(&d).map(|(x, y)| x * y).sum();
        assert_relative_eq!(k_t[(0, 0)], a, max_relative = 1e-12);
        assert_relative_eq!(f_t[0], mult * fd - coeff * a, max_relative = 1e-10);
        assert_relative_eq!(delta[0], f_t[0] / a, max_relative = 1e-12);
    }

    #[test]
    fn zero_load_zero_history_gives_zero_step() {
        let problem = elastic_problem(0);
        let mp = problem.material_realization(&[]).unwrap();
        let d: Vec<f64> = (0..problem.n_dofs())
            .map(|i| if i == problem.n_dofs() - 1 { 1.0 } else { 0.0 })
            .collect();
        let strains = vec![problem_strains(&problem, &d)];
        let volumes: Vec<f64> = (0..problem.n_elements())
            .map(|e| problem.kinematics.volume(e))
            .collect();
        let states = vec![PlasticState::default(); problem.n_elements()];
        let (delta, _, f_t) =
            reduced_newton_step(&strains, &volumes, &mp, &states, &[0.0], &[0.0]).unwrap();
        assert_eq!(delta[0], 0.0);
        assert_eq!(f_t[0], 0.0);
    }

    #[test]
    fn elastic_update_reproduces_the_separated_solution() {
        // Elastic with a single scaling variable: the exact solution is
        // rank-1, so the reduced pass on the iteration samples must land on
        // coeff(s, t) = lambda_s * g(t).
        let problem = elastic_problem(1);
        let samples = problem.draw_samples(6, 3).unwrap();
        let state = solve(&problem, samples, &SolverOptions::default()).unwrap();
        assert_eq!(state.k(), 1, "elastic scalar problem is rank-1");
        let red = update_stage(
            &problem,
            &state,
            &state.samples,
            &UpdateOptions::default(),
        )
        .unwrap();
        assert!(red.converged.iter().all(|c| *c));
        let t1 = &state.triplets[0];
        let scale = t1
            .coeffs
            .iter()
            .map(|c| c.abs())
            .fold(0.0_f64, f64::max);
        for s in 0..red.n_samples() {
            for t in 0..red.n_steps() {
                let want = t1.coeffs[s] * t1.profile[t];
                let got = red.coeff(s, t, 0);
                assert!(
                    (got - want).abs() <= 1e-8 * scale,
                    "sample {s} step {t}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn sample_order_permutes_outputs() {
        let problem = elastic_problem(1);
        let samples = problem.draw_samples(5, 11).unwrap();
        let state = solve(&problem, samples, &SolverOptions::default()).unwrap();
        let fwd = update_stage(&problem, &state, &state.samples, &UpdateOptions::default())
            .unwrap();
        // Reverse the sample rows and update again.
        let n = state.samples.n_samples();
        let dim = state.samples.n_dim();
        let mut rev_data = Vec::with_capacity(n * dim);
        for s in (0..n).rev() {
            rev_data.extend_from_slice(state.samples.row(s));
        }
        let rev_set = SampleSet::from_matrix(
            rev_data,
            n,
            state.samples.specs.clone(),
            state.samples.seed,
        )
        .unwrap();
        let rev = update_stage(&problem, &state, &rev_set, &UpdateOptions::default()).unwrap();
        for s in 0..n {
            for t in 0..fwd.n_steps() {
                assert_eq!(fwd.coeff(s, t, 0), rev.coeff(n - 1 - s, t, 0));
            }
        }
    }

    #[test]
    fn exhausted_iterations_trip_the_failure_policy() {
        let problem = elastic_problem(1);
        let samples = problem.draw_samples(4, 5).unwrap();
        let state = solve(&problem, samples, &SolverOptions::default()).unwrap();
        let opts = UpdateOptions {
            max_newton: 1,
            ..UpdateOptions::default()
        };
        match update_stage(&problem, &state, &state.samples, &opts) {
            Err(Error::ConvergenceFailure(_)) => {}
            other => panic!("expected ConvergenceFailure, got {other:?}"),
        }
    }

    #[test]
    fn update_requires_terms_and_samples() {
        let problem = elastic_problem(1);
        let samples = problem.draw_samples(4, 5).unwrap();
        let state = solve(&problem, samples, &SolverOptions::default()).unwrap();
        let empty = SampleSet::from_matrix(vec![], 0, state.samples.specs.clone(), 0).unwrap();
        assert!(update_stage(&problem, &state, &empty, &UpdateOptions::default()).is_err());
    }

    #[test]
    fn full_unit_basis_reproduces_the_full_order_newton_solver() {
        // With one unit vector per free dof the reduced pass IS the full
        // Newton march written in a permuted basis, plastic steps included,
        // so the two solvers must agree to rounding.
        let text = "4\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n1\n0 1 2 3\n3\n0 1 2\n1\n1 2 3\n";
        let mesh = crate::mesh::parse_mesh(text).unwrap();
        let problem = Problem::new(
            mesh,
            AffineField::scalar_random(2.11e5, 2.11e4, 0, 1),
            AffineField::uniform(245.0, 1),
            0.29,
            2.11e3,
            [0.0, 400.0, 0.0],
            crate::timegrid::TimeGrid::default_profile(9).unwrap(),
            vec![VariableKind::UniformUnit],
        )
        .unwrap();
        let samples = problem.draw_samples(3, 21).unwrap();
        let n_t = problem.n_steps();
        let free = problem.free_dofs().to_vec();
        let triplets: Vec<crate::latin::Triplet> = free
            .iter()
            .map(|&dof| {
                let mut shape = vec![0.0; problem.n_dofs()];
                shape[dof] = 1.0;
                crate::latin::Triplet {
                    coeffs: vec![0.0; samples.n_samples()],
                    profile: vec![0.0; n_t],
                    shape,
                }
            })
            .collect();
        let k = triplets.len();
        let state = crate::latin::LatinState {
            triplets,
            grid: problem.grid.clone(),
            eps_u_log: vec![1.0; k],
            stats: vec![
                crate::latin::TripletStats {
                    inner_iterations: 0,
                    eps_d: Vec::new(),
                    newton_failures: 0,
                };
                k
            ],
            global_solves: 0,
            stop_reason: crate::latin::StopReason::TermLimit,
            stress_history: crate::latin::StressHistory::zeros(
                samples.n_samples(),
                problem.n_elements(),
                n_t,
            ),
            config_snapshot: String::new(),
            samples: samples.clone(),
        };
        let red = update_stage(&problem, &state, &samples, &UpdateOptions::default()).unwrap();
        assert!(red.converged.iter().all(|c| *c));
        let mut any_yield = false;
        for s in 0..samples.n_samples() {
            let mp = problem.material_realization(samples.row(s)).unwrap();
            let run = crate::mcs::newton_solve_sample(
                &problem,
                &mp,
                &crate::mcs::McsOptions::default(),
            )
            .unwrap();
            assert!(run.converged);
            any_yield |= run.yielded;
            let umax = run.displacements.amax();
            for t in 0..n_t {
                let u = red.displacement(s, t);
                for (j, v) in u.iter().enumerate() {
                    let gap = (v - run.displacements[(t, j)]).abs();
                    assert!(
                        gap <= 1e-9 * umax,
                        "sample {s} step {t} dof {j}: {v} vs {} (gap {gap:.3e})",
                        run.displacements[(t, j)]
                    );
                }
            }
        }
        assert!(any_yield, "intended to exercise the plastic branch");
    }
}
