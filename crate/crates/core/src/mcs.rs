//! Full-order incremental Newton reference solver: every sample is marched
//! through the time grid with a consistent-tangent Newton iteration on the
//! complete finite-element system. Serves as the ground truth the separated
//! expansion is measured against.

use crate::error::{Error, Result};
use crate::field::SampleSet;
use crate::mesh::{apply_dirichlet, assemble_internal_force};
use crate::plasticity::{
    state_from_trial, stress_from_trial, tangent_from_trial, trial_state, MaterialPoint,
    PlasticState,
};
use crate::problem::Problem;
use crate::tensor::SymTensor;
use nalgebra::DMatrix;
use rayon::prelude::*;

#[derive(Clone, Copy, Debug)]
pub struct McsOptions {
    /// Relative increment tolerance |du| <= eps * |u| per time step.
    pub eps_newton: f64,
    pub max_newton: usize,
    /// Run aborts when more than this fraction of samples fails.
    pub failure_fraction: f64,
    /// Solve the purely linear-elastic problem (yield ignored).
    pub elastic: bool,
    /// Keep per-iteration residual norms for convergence diagnostics.
    pub record_residuals: bool,
}

impl Default for McsOptions {
    fn default() -> Self {
        McsOptions {
            eps_newton: 1e-10,
            max_newton: 50,
            failure_fraction: 0.01,
            elastic: false,
            record_residuals: false,
        }
    }
}

/// One sample's full-order march.
#[derive(Clone, Debug)]
pub struct SampleRun {
    /// Full displacement vector per step (n_t x n_dofs).
    pub displacements: DMatrix<f64>,
    pub converged: bool,
    /// True when any material point left the elastic domain.
    pub yielded: bool,
    pub newton_iterations: usize,
    /// Per-step residual norms before each solve, normalized by the peak
    /// external load; filled only when requested.
    pub residual_log: Vec<Vec<f64>>,
}

/// March one material realization through all time steps with full Newton.
pub fn newton_solve_sample(
    problem: &Problem,
    mp: &[MaterialPoint],
    opts: &McsOptions,
) -> Result<SampleRun> {
    let mesh = &problem.mesh;
    let kin = &problem.kinematics;
    let n_dofs = problem.n_dofs();
    let ne = problem.n_elements();
    if mp.len() != ne {
        return Err(Error::DimensionMismatch(
            "material realization does not match the mesh".into(),
        ));
    }
    let n_t = problem.n_steps();
    let f_unit = problem.traction_unit();
    let load_scale = problem
        .grid
        .multipliers()
        .iter()
        .map(|m| m.abs())
        .fold(0.0_f64, f64::max)
        * l2(f_unit);

    let mut states = vec![PlasticState::default(); ne];
    let mut u = vec![0.0; n_dofs];
    let mut history = DMatrix::zeros(n_t, n_dofs);
    let mut kmat = crate::sparse::SparseSym::zeros(problem.assembler.pattern());
    let mut converged = true;
    let mut yielded = false;
    let mut total_iters = 0;
    let mut residual_log = Vec::new();
    // Largest displacement norm seen along the march; anchors the increment
    // tolerance at steps whose exact solution is (near) zero.
    let mut u_ref = 0.0_f64;

    for i in 0..n_t {
        let mult = problem.grid.multipliers()[i];
        let mut step_ok = false;
        let mut step_residuals = Vec::new();
        for _ in 0..opts.max_newton {
            total_iters += 1;
            // Stress and tangent at the current iterate.
            let mut stresses = vec![SymTensor::ZERO; ne];
            let mut tangents = vec![crate::tensor::Matrix6::zeros(); ne];
            for e in 0..ne {
                let strain = kin.strain(mesh, e, &u);
                if opts.elastic {
                    stresses[e] = mp[e].elastic().apply(&strain);
                    tangents[e] = mp[e].elastic().voigt();
                } else {
                    let trial = trial_state(&mp[e], &strain, &states[e]);
                    stresses[e] = stress_from_trial(&mp[e], &trial);
                    tangents[e] = tangent_from_trial(&mp[e], &trial);
                }
            }
            let internal = assemble_internal_force(mesh, kin, &stresses)?;
            let mut rhs = vec![0.0; n_dofs];
            for d in 0..n_dofs {
                rhs[d] = mult * f_unit[d] - internal[d];
            }
            let r0 = l2_free(&rhs, mesh.dirichlet_dofs());
            if opts.record_residuals {
                step_residuals.push(r0 / load_scale.max(1e-300));
            }
            if r0 <= 1e-12 * load_scale {
                step_ok = true;
                break;
            }
            problem
                .assembler
                .assemble_matrix_into(mesh, kin, |e| tangents[e], &mut kmat);
            let delta = apply_dirichlet(&kmat, &rhs, mesh.dirichlet_dofs())?.solve()?;
            // Backtrack on the residual norm: across elastic-plastic
            // transitions the tangent drops and the full step overshoots,
            // so damp it until the residual decreases. The elastic problem
            // is linear and needs no safeguard.
            let mut eta = 1.0;
            if !opts.elastic {
                let mut u_try = vec![0.0; n_dofs];
                let mut try_stresses = vec![SymTensor::ZERO; ne];
                for _ in 0..30 {
                    for (t, (x, d)) in u_try.iter_mut().zip(u.iter().zip(&delta)) {
                        *t = x + eta * d;
                    }
                    for e in 0..ne {
                        let strain = kin.strain(mesh, e, &u_try);
                        let trial = trial_state(&mp[e], &strain, &states[e]);
                        try_stresses[e] = stress_from_trial(&mp[e], &trial);
                    }
                    let mut rhs_try = assemble_internal_force(mesh, kin, &try_stresses)?;
                    for (r, f) in rhs_try.iter_mut().zip(f_unit) {
                        *r = mult * f - *r;
                    }
                    if l2_free(&rhs_try, mesh.dirichlet_dofs()) <= (1.0 - 1e-4 * eta) * r0 {
                        break;
                    }
                    eta *= 0.5;
                }
            }
            let mut d2 = 0.0;
            let mut u2 = 0.0;
            for (x, d) in u.iter_mut().zip(&delta) {
                let step = eta * d;
                *x += step;
                d2 += step * step;
                u2 += *x * *x;
            }
            // Increment-based exit only for undamped steps, whose size is
            // an honest measure of distance to the root.
            if eta == 1.0 && d2.sqrt() <= opts.eps_newton * u2.sqrt().max(u_ref) {
                step_ok = true;
                break;
            }
        }
        if !step_ok {
            converged = false;
        }
        u_ref = u_ref.max(l2(&u));
        // Commit internal variables at the accepted displacement.
        if !opts.elastic {
            for e in 0..ne {
                let strain = kin.strain(mesh, e, &u);
                let trial = trial_state(&mp[e], &strain, &states[e]);
                if trial.indicator > 0.0 {
                    yielded = true;
                }
                states[e] = state_from_trial(&mp[e], &trial, &states[e]);
            }
        }
        for (d, &v) in u.iter().enumerate() {
            history[(i, d)] = v;
        }
        if opts.record_residuals {
            residual_log.push(step_residuals);
        }
    }
    Ok(SampleRun {
        displacements: history,
        converged,
        yielded,
        newton_iterations: total_iters,
        residual_log,
    })
}

/// Ensemble of full-order runs; full histories are kept only for the tracked
/// dofs, plus the complete field at the final step.
#[derive(Clone, Debug)]
pub struct EnsembleResult {
    pub samples: SampleSet,
    pub tracked_dofs: Vec<usize>,
    /// Tracked histories, laid out [s][t][j].
    data: Vec<f64>,
    n_samples: usize,
    n_steps: usize,
    /// Full displacement vector at the final step, per sample.
    pub final_fields: Vec<Vec<f64>>,
    pub converged: Vec<bool>,
    pub yielded: Vec<bool>,
    /// Per-sample wall time; informational only, never persisted.
    pub wall_seconds: Vec<f64>,
    pub total_newton_iterations: usize,
}

impl EnsembleResult {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        samples: SampleSet,
        tracked_dofs: Vec<usize>,
        data: Vec<f64>,
        n_steps: usize,
        final_fields: Vec<Vec<f64>>,
        converged: Vec<bool>,
        yielded: Vec<bool>,
    ) -> Result<EnsembleResult> {
        let n_samples = samples.n_samples();
        if data.len() != n_samples * n_steps * tracked_dofs.len()
            || final_fields.len() != n_samples
            || converged.len() != n_samples
            || yielded.len() != n_samples
        {
            return Err(Error::DimensionMismatch(
                "ensemble parts are inconsistent".into(),
            ));
        }
        Ok(EnsembleResult {
            samples,
            tracked_dofs,
            data,
            n_samples,
            n_steps,
            final_fields,
            converged,
            yielded,
            wall_seconds: vec![0.0; n_samples],
            total_newton_iterations: 0,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn get(&self, sample: usize, step: usize, tracked: usize) -> f64 {
        self.data[(sample * self.n_steps + step) * self.tracked_dofs.len() + tracked]
    }

    /// Time series of one tracked dof (by tracked index) for one sample.
    pub fn trajectory(&self, sample: usize, tracked: usize) -> Vec<f64> {
        (0..self.n_steps).map(|t| self.get(sample, t, tracked)).collect()
    }

    /// Tracked index of a dof id, if present.
    pub fn tracked_index(&self, dof: usize) -> Option<usize> {
        self.tracked_dofs.iter().position(|&d| d == dof)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }
}

/// Independent full-order solves over a sample set.
pub fn run_mcs(
    problem: &Problem,
    samples: &SampleSet,
    tracked_dofs: &[usize],
    opts: &McsOptions,
) -> Result<EnsembleResult> {
    let n_s = samples.n_samples();
    if n_s == 0 {
        return Err(Error::DimensionMismatch("no samples".into()));
    }
    if samples.n_dim() != problem.stochastic_dimension() {
        return Err(Error::DimensionMismatch(
            "samples do not match the problem's variables".into(),
        ));
    }
    if tracked_dofs.iter().any(|&d| d >= problem.n_dofs()) {
        return Err(Error::DimensionMismatch("tracked dof out of range".into()));
    }

    struct Row {
        tracked: Vec<f64>,
        final_field: Vec<f64>,
        converged: bool,
        yielded: bool,
        iterations: usize,
        seconds: f64,
    }

    let n_t = problem.n_steps();
    let rows: Vec<Result<Row>> = (0..n_s)
        .into_par_iter()
        .map(|s| {
            let start = std::time::Instant::now();
            let mp = problem.material_realization(samples.row(s))?;
            let run = newton_solve_sample(problem, &mp, opts)?;
            let mut tracked = Vec::with_capacity(n_t * tracked_dofs.len());
            for t in 0..n_t {
                for &d in tracked_dofs {
                    tracked.push(run.displacements[(t, d)]);
                }
            }
            let final_field = run.displacements.row(n_t - 1).iter().copied().collect();
            Ok(Row {
                tracked,
                final_field,
                converged: run.converged,
                yielded: run.yielded,
                iterations: run.newton_iterations,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect();

    let mut data = Vec::with_capacity(n_s * n_t * tracked_dofs.len());
    let mut final_fields = Vec::with_capacity(n_s);
    let mut converged = Vec::with_capacity(n_s);
    let mut yielded = Vec::with_capacity(n_s);
    let mut seconds = Vec::with_capacity(n_s);
    let mut total_iters = 0;
    for row in rows {
        let row = row?;
        data.extend_from_slice(&row.tracked);
        final_fields.push(row.final_field);
        converged.push(row.converged);
        yielded.push(row.yielded);
        seconds.push(row.seconds);
        total_iters += row.iterations;
    }
    let failed = converged.iter().filter(|c| !**c).count();
    if failed as f64 > opts.failure_fraction * n_s as f64 {
        return Err(Error::ConvergenceFailure(format!(
            "{failed} of {n_s} reference solves failed"
        )));
    }
    if failed > 0 {
        log::warn!("reference ensemble: {failed} of {n_s} samples flagged non-converged");
    }
    let mut out = EnsembleResult::from_parts(
        samples.clone(),
        tracked_dofs.to_vec(),
        data,
        n_t,
        final_fields,
        converged,
        yielded,
    )?;
    out.wall_seconds = seconds;
    out.total_newton_iterations = total_iters;
    Ok(out)
}

/// Cumulative external work minus stored (elastic + hardening) energy per
/// step along a displacement history; nonnegative up to quadrature error
/// because plastic dissipation cannot be negative.
pub fn work_energy_gap(
    problem: &Problem,
    mp: &[MaterialPoint],
    displacements: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let mesh = &problem.mesh;
    let kin = &problem.kinematics;
    let ne = problem.n_elements();
    let n_t = problem.n_steps();
    if displacements.nrows() != n_t || displacements.ncols() != problem.n_dofs() {
        return Err(Error::DimensionMismatch(
            "history does not match the problem".into(),
        ));
    }
    let f_unit = problem.traction_unit();
    let mut states = vec![PlasticState::default(); ne];
    let mut gaps = Vec::with_capacity(n_t);
    let mut work = 0.0;
    for i in 0..n_t {
        let u: Vec<f64> = displacements.row(i).iter().copied().collect();
        if i > 0 {
            // Trapezoidal external work over the load path increment.
            let m_prev = problem.grid.multipliers()[i - 1];
            let m_cur = problem.grid.multipliers()[i];
            let mut inc = 0.0;
            for d in 0..problem.n_dofs() {
                let du = u[d] - displacements[(i - 1, d)];
                inc += 0.5 * (m_prev + m_cur) * f_unit[d] * du;
            }
            work += inc;
        }
        let mut stored = 0.0;
        for e in 0..ne {
            let strain = kin.strain(mesh, e, &u);
            let trial = trial_state(&mp[e], &strain, &states[e]);
            let new_state = state_from_trial(&mp[e], &trial, &states[e]);
            let elastic = strain.sub(&new_state.plastic_strain);
            let sigma = mp[e].elastic().apply(&elastic);
            stored += 0.5 * kin.volume(e) * sigma.ddot(&elastic);
            if mp[e].hardening > 0.0 {
                stored += 0.5 * kin.volume(e) * new_state.back_stress.ddot(&new_state.back_stress)
                    / mp[e].hardening;
            }
            states[e] = new_state;
        }
        gaps.push(work - stored);
    }
    Ok(gaps)
}

/// Fraction of recorded steps whose final Newton contraction is at least
/// quadratic: with normalized residuals r, the last satisfies
/// r_last <= r_prev^1.5. Steps with fewer than three iterations are skipped
/// (nothing to measure); returns 1.0 when no step qualifies.
pub fn quadratic_phase_fraction(residual_log: &[Vec<f64>]) -> f64 {
    let mut eligible = 0;
    let mut passing = 0;
    for step in residual_log {
        if step.len() < 3 {
            continue;
        }
        let r_prev = step[step.len() - 2];
        let r_last = step[step.len() - 1];
        if r_prev <= 0.0 {
            continue;
        }
        eligible += 1;
        if r_last <= r_prev.powf(1.5) {
            passing += 1;
        }
    }
    if eligible == 0 {
        1.0
    } else {
        passing as f64 / eligible as f64
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn l2_free(v: &[f64], dirichlet: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut fixed = dirichlet.iter().peekable();
    for (i, x) in v.iter().enumerate() {
        if fixed.peek() == Some(&&i) {
            fixed.next();
            continue;
        }
        sum += x * x;
    }
    sum.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::AffineField;
    use crate::mesh::{build_box_mesh, parse_mesh, Face};
    use crate::timegrid::TimeGrid;

    fn cube_problem(traction: [f64; 3], yield_stress: f64, n_t: usize) -> Problem {
        let mesh = build_box_mesh([1.0, 1.0, 1.0], [1, 1, 1], Face::XNeg, Face::XPos).unwrap();
        let ne = mesh.n_elements();
        Problem::new(
            mesh,
            AffineField::uniform(2.11e5, ne),
            AffineField::uniform(yield_stress, ne),
            0.29,
            0.01,
            traction,
            TimeGrid::default_profile(n_t).unwrap(),
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn zero_load_stays_at_rest() {
        let problem = cube_problem([0.0, 0.0, 0.0], 245.0, 6);
        let mp = problem.material_realization(&[]).unwrap();
        let run = newton_solve_sample(&problem, &mp, &McsOptions::default()).unwrap();
        assert!(run.converged);
        assert!(!run.yielded);
        assert!(run.displacements.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elastic_march_matches_direct_linear_solves() {
        let problem = cube_problem([0.0, 30.0, 0.0], 1e9, 11);
        let mp = problem.material_realization(&[]).unwrap();
        let run = newton_solve_sample(&problem, &mp, &McsOptions::default()).unwrap();
        assert!(run.converged);
        assert!(!run.yielded);
        // A linear problem needs one productive iteration per step plus one
        // or two confirming ones at the rounding floor.
        assert!(run.newton_iterations <= 3 * problem.n_steps());

        let components = problem.stiffness_components().unwrap();
        let stat = apply_dirichlet(
            &components[0],
            problem.traction_unit(),
            problem.mesh.dirichlet_dofs(),
        )
        .unwrap()
        .solve()
        .unwrap();
        let umax = stat.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for (i, &mult) in problem.grid.multipliers().iter().enumerate() {
            for d in 0..problem.n_dofs() {
                assert!(
                    (run.displacements[(i, d)] - mult * stat[d]).abs() <= 1e-10 * umax,
                    "step {i} dof {d}"
                );
            }
        }
    }

    #[test]
    fn plastic_march_matches_derivative_free_oracle() {
        // Single tetrahedron, three nodes fixed, traction ramp on the free
        // face driving the element past yield. The oracle re-solves each
        // step with a finite-difference Jacobian on the same residual,
        // sharing no code with the consistent-tangent Newton path.
        let text = "4\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n1\n0 1 2 3\n3\n0 1 2\n1\n1 2 3\n";
        let mesh = parse_mesh(text).unwrap();
        // Kinematic hardening of 1% of E keeps the single element's limit
        // load above the applied ramp while still yielding well past 245.
        let problem = Problem::new(
            mesh,
            AffineField::uniform(2.11e5, 1),
            AffineField::uniform(245.0, 1),
            0.29,
            2.11e3,
            [0.0, 400.0, 0.0],
            TimeGrid::from_profile(&[(0.0, 0.0), (1.0, 1.0)], 9).unwrap(),
            vec![],
        )
        .unwrap();
        let mp = problem.material_realization(&[]).unwrap();
        let run = newton_solve_sample(&problem, &mp, &McsOptions::default()).unwrap();
        assert!(run.converged);
        assert!(run.yielded, "load must drive the element past yield");

        // Oracle: march the free dofs with fixed-point iteration on a
        // finite-difference Jacobian of the residual.
        let free = problem.mesh.free_dofs();
        assert_eq!(free.len(), 3);
        let kin = &problem.kinematics;
        let f_unit = problem.traction_unit();
        let mut state = PlasticState::default();
        let mut x = vec![0.0; 3];
        let umax = run
            .displacements
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        for (i, &mult) in problem.grid.multipliers().iter().enumerate() {
            let residual = |x: &[f64], state: &PlasticState| -> Vec<f64> {
                let mut u = vec![0.0; problem.n_dofs()];
                for (j, &d) in free.iter().enumerate() {
                    u[d] = x[j];
                }
                let strain = kin.strain(&problem.mesh, 0, &u);
                let trial = trial_state(&mp[0], &strain, state);
                let sigma = stress_from_trial(&mp[0], &trial);
                let mut internal = vec![0.0; problem.n_dofs()];
                kin.add_internal_force(&problem.mesh, 0, &sigma, &mut internal);
                free.iter()
                    .map(|&d| mult * f_unit[d] - internal[d])
                    .collect()
            };
            // Derivative-free Newton: numerical Jacobian, dense solve.
            for _ in 0..200 {
                let r = residual(&x, &state);
                let rn = l2(&r);
                if rn <= 1e-12 * l2(f_unit).max(1.0) {
                    break;
                }
                let h = 1e-7 * (1.0 + l2(&x));
                let mut jac = DMatrix::zeros(3, 3);
                for j in 0..3 {
                    let mut xp = x.clone();
                    xp[j] += h;
                    let rp = residual(&xp, &state);
                    for k in 0..3 {
                        jac[(k, j)] = (r[k] - rp[k]) / h;
                    }
                }
                let dx = jac.lu().solve(&nalgebra::DVector::from_column_slice(&r));
                let dx = dx.expect("oracle jacobian solvable");
                for (xi, di) in x.iter_mut().zip(dx.iter()) {
                    *xi += di;
                }
            }
            // Commit the oracle's internal state.
            let mut u = vec![0.0; problem.n_dofs()];
            for (j, &d) in free.iter().enumerate() {
                u[d] = x[j];
            }
            let strain = kin.strain(&problem.mesh, 0, &u);
            let trial = trial_state(&mp[0], &strain, &state);
            state = state_from_trial(&mp[0], &trial, &state);
            for (j, &d) in free.iter().enumerate() {
                assert!(
                    (run.displacements[(i, d)] - x[j]).abs() <= 1e-6 * umax,
                    "step {i} free dof {j}: {} vs {}",
                    run.displacements[(i, d)],
                    x[j]
                );
            }
        }
    }

    #[test]
    fn ensembles_are_reproducible() {
        let mesh = build_box_mesh([2.0, 1.0, 1.0], [2, 1, 1], Face::XNeg, Face::XPos).unwrap();
        let ne = mesh.n_elements();
        let problem = Problem::new(
            mesh,
            AffineField::scalar_random(2.11e5, 2.11e4, 0, ne),
            AffineField::uniform(245.0, ne),
            0.29,
            0.01,
            [0.0, 60.0, 0.0],
            TimeGrid::default_profile(9).unwrap(),
            vec![crate::field::VariableKind::UniformUnit],
        )
        .unwrap();
        let samples = problem.draw_samples(5, 9).unwrap();
        let tracked = [1usize, 7, 20];
        let a = run_mcs(&problem, &samples, &tracked, &McsOptions::default()).unwrap();
        let b = run_mcs(&problem, &samples, &tracked, &McsOptions::default()).unwrap();
        assert_eq!(a.as_flat(), b.as_flat());
        assert_eq!(a.final_fields, b.final_fields);
        // Single-sample ensemble equals the direct solve.
        let one = SampleSet::from_matrix(
            samples.row(0).to_vec(),
            1,
            samples.specs.clone(),
            samples.seed,
        )
        .unwrap();
        let ens = run_mcs(&problem, &one, &tracked, &McsOptions::default()).unwrap();
        let mp = problem.material_realization(samples.row(0)).unwrap();
        let run = newton_solve_sample(&problem, &mp, &McsOptions::default()).unwrap();
        for t in 0..problem.n_steps() {
            for (j, &d) in tracked.iter().enumerate() {
                assert_eq!(ens.get(0, t, j), run.displacements[(t, d)]);
            }
        }
    }

    #[test]
    fn dissipation_is_nonnegative_and_newton_contracts() {
        // Plastic cyclic run on the unit cube.
        let problem = cube_problem([0.0, 170.0, 0.0], 245.0, 21);
        let mp = problem.material_realization(&[]).unwrap();
        let opts = McsOptions {
            record_residuals: true,
            ..McsOptions::default()
        };
        let run = newton_solve_sample(&problem, &mp, &opts).unwrap();
        assert!(run.converged);
        assert!(run.yielded);
        let gaps = work_energy_gap(&problem, &mp, &run.displacements).unwrap();
        let scale = gaps.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
        for (i, g) in gaps.iter().enumerate() {
            assert!(*g >= -1e-8 * scale, "step {i}: gap {g}");
        }
        assert!(
            quadratic_phase_fraction(&run.residual_log) >= 0.9,
            "quadratic contraction fraction {}",
            quadratic_phase_fraction(&run.residual_log)
        );
    }
}
