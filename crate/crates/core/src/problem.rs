//! Problem definition: mesh, affine material fields, surface load and time
//! grid, plus the derived caches (kinematics, assembler, free dofs) shared
//! by all solver stages.

use crate::error::{Error, Result};
use crate::field::{AffineField, SampleSet, VariableKind};
use crate::mesh::{assemble_component_stiffness, assemble_traction_force, Assembler, Kinematics, Mesh};
use crate::plasticity::MaterialPoint;
use crate::sparse::SparseSym;
use crate::tensor::ElasticTensor;
use crate::timegrid::TimeGrid;

/// Quasi-static elastoplastic problem with affine random material fields.
///
/// Young's modulus and yield stress are scalar fields affine in the
/// standardized variables listed in `variables`; Poisson's ratio and the
/// kinematic hardening modulus are deterministic. The surface load is the
/// peak traction scaled by the time grid's multiplier.
#[derive(Clone, Debug)]
pub struct Problem {
    pub mesh: Mesh,
    pub kinematics: Kinematics,
    pub assembler: Assembler,
    pub youngs: AffineField,
    pub yield_stress: AffineField,
    pub poisson: f64,
    /// Kinematic hardening modulus (MPa).
    pub hardening: f64,
    /// Peak traction on the loaded faces (N/mm^2).
    pub traction: [f64; 3],
    pub grid: TimeGrid,
    pub variables: Vec<VariableKind>,
    free_dofs: Vec<usize>,
    traction_unit: Vec<f64>,
}

impl Problem {
    /// The argument list mirrors the problem definition one-to-one; a
    /// builder would only add ceremony here.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mesh: Mesh,
        youngs: AffineField,
        yield_stress: AffineField,
        poisson: f64,
        hardening: f64,
        traction: [f64; 3],
        grid: TimeGrid,
        variables: Vec<VariableKind>,
    ) -> Result<Problem> {
        if !(poisson > 0.0 && poisson < 0.5) {
            return Err(Error::IllPosed(format!(
                "poisson ratio {poisson} outside (0, 0.5)"
            )));
        }
        if !(hardening >= 0.0) {
            return Err(Error::IllPosed("hardening modulus must be >= 0".into()));
        }
        youngs.validate(mesh.n_elements(), variables.len())?;
        yield_stress.validate(mesh.n_elements(), variables.len())?;
        let kinematics = Kinematics::new(&mesh)?;
        let assembler = Assembler::new(&mesh);
        let free_dofs = mesh.free_dofs();
        if free_dofs.is_empty() {
            return Err(Error::EmptySystem);
        }
        let traction_unit = assemble_traction_force(&mesh, traction);
        Ok(Problem {
            mesh,
            kinematics,
            assembler,
            youngs,
            yield_stress,
            poisson,
            hardening,
            traction,
            grid,
            variables,
            free_dofs,
            traction_unit,
        })
    }

    /// Number of standardized random variables.
    pub fn stochastic_dimension(&self) -> usize {
        self.variables.len()
    }

    pub fn n_elements(&self) -> usize {
        self.mesh.n_elements()
    }

    pub fn n_dofs(&self) -> usize {
        self.mesh.n_dofs()
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn free_dofs(&self) -> &[usize] {
        &self.free_dofs
    }

    /// Nodal force of the peak traction; the load at time t is
    /// multiplier(t) * this vector.
    pub fn traction_unit(&self) -> &[f64] {
        &self.traction_unit
    }

    /// Default iteration sample count: ten per stochastic dimension, at
    /// least four so degenerate (deterministic) inputs still average.
    pub fn default_iteration_samples(&self) -> usize {
        (10 * self.stochastic_dimension()).max(4)
    }

    pub fn draw_samples(&self, n: usize, seed: u64) -> Result<SampleSet> {
        crate::field::draw_samples(&self.variables, n, seed)
    }

    /// Per-element material points for one standardized sample row.
    pub fn material_realization(&self, xi: &[f64]) -> Result<Vec<MaterialPoint>> {
        if xi.len() != self.variables.len() {
            return Err(Error::DimensionMismatch(format!(
                "sample row has {} entries for {} variables",
                xi.len(),
                self.variables.len()
            )));
        }
        let ne = self.n_elements();
        let mut e_field = vec![0.0; ne];
        let mut y_field = vec![0.0; ne];
        self.youngs.evaluate_row(xi, &mut e_field);
        self.yield_stress.evaluate_row(xi, &mut y_field);
        let mut out = Vec::with_capacity(ne);
        for e in 0..ne {
            if !(e_field[e] > 0.0) {
                return Err(Error::IllPosed(format!(
                    "sample realizes non-positive Young's modulus {} on element {e}",
                    e_field[e]
                )));
            }
            if !(y_field[e] > 0.0) {
                return Err(Error::IllPosed(format!(
                    "sample realizes non-positive yield stress {} on element {e}",
                    y_field[e]
                )));
            }
            out.push(MaterialPoint::from_youngs(
                e_field[e],
                self.poisson,
                self.hardening,
                y_field[e],
            ));
        }
        Ok(out)
    }

    /// Stiffness components of the affine elasticity decomposition: entry 0
    /// carries the mean modulus field (weight E{lambda^2}), entry 1 + i the
    /// i-th stochastic term of the modulus (weight E{lambda^2 xi_i}).
    pub fn stiffness_components(&self) -> Result<Vec<SparseSym>> {
        let ne = self.n_elements();
        let mut components = Vec::with_capacity(1 + self.youngs.n_terms());
        let as_elastic = |field: &[f64], scale: f64| -> Vec<ElasticTensor> {
            field
                .iter()
                .map(|&v| ElasticTensor::from_youngs(v * scale, self.poisson))
                .collect()
        };
        components.push(assemble_component_stiffness(
            &self.mesh,
            &self.kinematics,
            &self.assembler,
            &as_elastic(&self.youngs.mean, 1.0),
        )?);
        for term in &self.youngs.terms {
            debug_assert_eq!(term.field.len(), ne);
            components.push(assemble_component_stiffness(
                &self.mesh,
                &self.kinematics,
                &self.assembler,
                &as_elastic(&term.field, term.scale),
            )?);
        }
        Ok(components)
    }

    /// Variable index driving each stochastic stiffness component (parallel
    /// to `stiffness_components()[1..]`).
    pub fn stiffness_variables(&self) -> Vec<usize> {
        self.youngs.terms.iter().map(|t| t.variable).collect()
    }

    /// Node nearest the centroid of the loaded face, the default watch
    /// location for error metrics.
    pub fn loaded_face_center_node(&self) -> Option<usize> {
        let faces = self.mesh.neumann_faces();
        if faces.is_empty() {
            return None;
        }
        let mut centroid = [0.0_f64; 3];
        let mut total = 0.0;
        for f in faces {
            for &n in &f.nodes {
                for k in 0..3 {
                    centroid[k] += self.mesh.nodes()[n][k] * f.area;
                }
            }
            total += 3.0 * f.area;
        }
        for k in 0..3 {
            centroid[k] /= total;
        }
        let mut nodes_on_face: Vec<usize> = faces.iter().flat_map(|f| f.nodes).collect();
        nodes_on_face.sort_unstable();
        nodes_on_face.dedup();
        nodes_on_face.into_iter().min_by(|&a, &b| {
            let da = dist2(&self.mesh.nodes()[a], &centroid);
            let db = dist2(&self.mesh.nodes()[b], &centroid);
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        })
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}
