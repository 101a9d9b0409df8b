//! Run configuration: a versioned TOML schema that fully determines a run.
//! Unknown keys are rejected so typos fail fast, and the parsed structure
//! round-trips losslessly through serialization.

use serde::{Deserialize, Serialize};
use std::path::Path;
use stolatin::{
    kl_expand, AffineField, CovarianceSpec, Error, Face, KlExpansion, Problem, Result,
    SolverOptions, TimeGrid, UpdateOptions, VariableKind,
};

pub const CONFIG_VERSION: u32 = 1;

/// Top-level run configuration. Units: lengths in mm, stresses and moduli
/// in MPa (N/mm^2), tractions in N/mm^2 on the loaded face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub mesh: MeshSpec,
    pub load: LoadSpec,
    pub material: MaterialSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshSpec {
    /// Axis-aligned box split into tetrahedra.
    Box {
        size: [f64; 3],
        divisions: [usize; 3],
        #[serde(default = "default_fixed_face")]
        fixed_face: String,
        #[serde(default = "default_loaded_face")]
        loaded_face: String,
    },
    /// Plain-text mesh file (counts + nodes + tets + fixed nodes + faces).
    File { path: String },
}

fn default_fixed_face() -> String {
    "-x".into()
}

fn default_loaded_face() -> String {
    "+x".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSpec {
    /// Traction vector applied on the loaded face, N/mm^2.
    pub traction: [f64; 3],
    /// Number of time points (pseudo-time, including t = 0).
    #[serde(default = "default_n_t")]
    pub n_t: usize,
    /// Optional piecewise-linear multiplier profile as (time, multiplier)
    /// knots; a built-in two-cycle profile is used when absent.
    #[serde(default)]
    pub knots: Option<Vec<[f64; 2]>>,
}

fn default_n_t() -> usize {
    41
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSpec {
    /// Poisson ratio.
    #[serde(default = "default_nu")]
    pub nu: f64,
    /// Kinematic hardening modulus, MPa.
    pub hardening: f64,
    pub youngs: FieldSpec,
    pub yield_stress: FieldSpec,
}

fn default_nu() -> f64 {
    0.29
}

/// How one material field varies across samples (and possibly space).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    /// Fixed value everywhere.
    Deterministic { value: f64 },
    /// One uniform random variable on [low, high], spatially constant.
    Interval { low: f64, high: f64 },
    /// One truncated-Gaussian variable, spatially constant. `floor` is the
    /// rejection bound in standard deviations (default -9).
    Gaussian {
        mean: f64,
        std: f64,
        #[serde(default = "default_floor")]
        floor: f64,
    },
    /// Spatially varying random field from a truncated series expansion of
    /// an exponential covariance with pointwise standard deviation `std`
    /// and per-axis correlation `lengths`; modes are kept until the
    /// spectral tail ratio drops to `tol`.
    Kl {
        mean: f64,
        std: f64,
        lengths: [f64; 3],
        #[serde(default = "default_kl_tol")]
        tol: f64,
        #[serde(default = "default_floor")]
        floor: f64,
    },
}

fn default_floor() -> f64 {
    -9.0
}

fn default_kl_tol() -> f64 {
    1e-2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSpec {
    /// Inner-loop direction tolerance.
    pub eps_d: f64,
    /// Outer-loop spectral indicator target.
    pub eps_u: f64,
    /// Scalar temporal Newton tolerance.
    pub eps_g: f64,
    /// Full/reduced Newton relative increment tolerance.
    pub eps_newton: f64,
    pub max_terms: usize,
    pub max_inner: usize,
    pub max_newton: usize,
    /// Iteration sample count; 0 means ten per stochastic dimension.
    pub n_s1: usize,
    /// Update / Monte Carlo sample count.
    pub n_s2: usize,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            eps_d: 1e-3,
            eps_u: 1e-8,
            eps_g: 1e-10,
            eps_newton: 1e-10,
            max_terms: 30,
            max_inner: 20,
            max_newton: 50,
            n_s1: 0,
            n_s2: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    /// Output directory; the --out flag overrides it.
    pub dir: String,
    /// Watched node indices (all three displacement components each);
    /// empty means the central node of the loaded face.
    pub watch_nodes: Vec<usize>,
    /// Time-step indices at which density curves are exported by compare.
    pub pdf_steps: Vec<usize>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: "out".into(),
            watch_nodes: Vec::new(),
            pdf_steps: Vec::new(),
        }
    }
}

/// Parse and validate a configuration from TOML text.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<()> {
    if cfg.version != CONFIG_VERSION {
        return Err(Error::Parse(format!(
            "config version {} unsupported, expected {CONFIG_VERSION}",
            cfg.version
        )));
    }
    let s = &cfg.solver;
    for (name, v) in [
        ("eps_d", s.eps_d),
        ("eps_u", s.eps_u),
        ("eps_g", s.eps_g),
        ("eps_newton", s.eps_newton),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::IllPosed(format!(
                "solver.{name} must be positive, got {v}"
            )));
        }
    }
    if s.max_terms == 0 || s.max_inner == 0 || s.max_newton == 0 {
        return Err(Error::IllPosed("solver iteration limits must be >= 1".into()));
    }
    if !(cfg.material.nu > -1.0 && cfg.material.nu < 0.5) {
        return Err(Error::IllPosed(format!(
            "material.nu = {} outside (-1, 0.5)",
            cfg.material.nu
        )));
    }
    if !(cfg.material.hardening > 0.0) {
        return Err(Error::IllPosed("material.hardening must be positive".into()));
    }
    if cfg.load.n_t < 2 {
        return Err(Error::IllPosed("load.n_t must be at least 2".into()));
    }
    for (name, f) in [
        ("youngs", &cfg.material.youngs),
        ("yield_stress", &cfg.material.yield_stress),
    ] {
        validate_field(name, f)?;
    }
    Ok(())
}

fn validate_field(name: &str, f: &FieldSpec) -> Result<()> {
    let bad = |msg: String| Err(Error::IllPosed(format!("material.{name}: {msg}")));
    match f {
        FieldSpec::Deterministic { value } => {
            if !(*value > 0.0) {
                return bad(format!("value {value} must be positive"));
            }
        }
        FieldSpec::Interval { low, high } => {
            if !(*low > 0.0 && high > low) {
                return bad(format!("interval [{low}, {high}] must be positive and increasing"));
            }
        }
        FieldSpec::Gaussian { mean, std, floor } => {
            if !(*mean > 0.0 && *std > 0.0) {
                return bad(format!("mean {mean} and std {std} must be positive"));
            }
            if mean + floor * std <= 0.0 {
                return bad(format!(
                    "floor {floor} allows non-positive draws (mean {mean}, std {std})"
                ));
            }
        }
        FieldSpec::Kl {
            mean,
            std,
            lengths,
            tol,
            ..
        } => {
            if !(*mean > 0.0 && *std > 0.0) {
                return bad(format!("mean {mean} and std {std} must be positive"));
            }
            if lengths.iter().any(|l| !(*l > 0.0)) {
                return bad("correlation lengths must be positive".into());
            }
            if !(*tol > 0.0 && *tol < 1.0) {
                return bad(format!("tol {tol} outside (0, 1)"));
            }
        }
    }
    Ok(())
}

/// Everything a command needs that is derived from the configuration.
pub struct BuiltProblem {
    pub problem: Problem,
    /// Truncated expansions behind any spatially varying fields, in the
    /// order (youngs, yield_stress) where applicable.
    pub kl_reports: Vec<(String, KlExpansion)>,
}

/// Construct the mechanical problem a configuration describes.
pub fn build_problem(cfg: &RunConfig) -> Result<BuiltProblem> {
    let mesh = match &cfg.mesh {
        MeshSpec::Box {
            size,
            divisions,
            fixed_face,
            loaded_face,
        } => stolatin::build_box_mesh(
            *size,
            *divisions,
            Face::parse(fixed_face)?,
            Face::parse(loaded_face)?,
        )?,
        MeshSpec::File { path } => {
            let text = std::fs::read_to_string(Path::new(path))?;
            stolatin::parse_mesh(&text)?
        }
    };
    let kin = stolatin::Kinematics::new(&mesh)?;
    let ne = mesh.n_elements();

    let mut variables: Vec<VariableKind> = Vec::new();
    let mut kl_reports = Vec::new();
    let mut build_field = |name: &str, spec: &FieldSpec, vars: &mut Vec<VariableKind>| -> Result<AffineField> {
        Ok(match spec {
            FieldSpec::Deterministic { value } => AffineField::uniform(*value, ne),
            FieldSpec::Interval { low, high } => {
                let idx = vars.len();
                vars.push(VariableKind::UniformUnit);
                // A unit-variance uniform variable spans [-sqrt(3), sqrt(3)].
                AffineField::scalar_random(
                    0.5 * (low + high),
                    (high - low) / (2.0 * 3.0_f64.sqrt()),
                    idx,
                    ne,
                )
            }
            FieldSpec::Gaussian { mean, std, floor } => {
                let idx = vars.len();
                vars.push(VariableKind::GaussianTruncated { floor: *floor });
                AffineField::scalar_random(*mean, *std, idx, ne)
            }
            FieldSpec::Kl {
                mean,
                std,
                lengths,
                tol,
                floor,
            } => {
                let cov = CovarianceSpec {
                    // Pointwise variance is variance_scale / 3.
                    variance_scale: 3.0 * std * std,
                    lengths: *lengths,
                };
                let kl = kl_expand(&mesh, &kin, &cov, *tol)?;
                let first = vars.len();
                for _ in 0..kl.n_terms() {
                    vars.push(VariableKind::GaussianTruncated { floor: *floor });
                }
                let field = kl.to_affine(vec![*mean; ne], first);
                kl_reports.push((name.to_string(), kl));
                field
            }
        })
    };

    let youngs = build_field("youngs", &cfg.material.youngs, &mut variables)?;
    let yield_stress = build_field("yield_stress", &cfg.material.yield_stress, &mut variables)?;

    let grid = match &cfg.load.knots {
        Some(knots) => {
            let pairs: Vec<(f64, f64)> = knots.iter().map(|k| (k[0], k[1])).collect();
            TimeGrid::from_profile(&pairs, cfg.load.n_t)?
        }
        None => TimeGrid::default_profile(cfg.load.n_t)?,
    };

    let problem = Problem::new(
        mesh,
        youngs,
        yield_stress,
        cfg.material.nu,
        cfg.material.hardening,
        cfg.load.traction,
        grid,
        variables,
    )?;
    Ok(BuiltProblem {
        problem,
        kl_reports,
    })
}

impl RunConfig {
    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            eps_d: self.solver.eps_d,
            eps_u: self.solver.eps_u,
            eps_g: self.solver.eps_g,
            max_terms: self.solver.max_terms,
            max_inner: self.solver.max_inner,
            max_newton: self.solver.max_newton,
            ..SolverOptions::default()
        }
    }

    pub fn update_options(&self) -> UpdateOptions {
        UpdateOptions {
            eps_newton: self.solver.eps_newton,
            max_newton: self.solver.max_newton,
            ..UpdateOptions::default()
        }
    }

    pub fn iteration_samples(&self, problem: &Problem) -> usize {
        if self.solver.n_s1 > 0 {
            self.solver.n_s1
        } else {
            problem.default_iteration_samples()
        }
    }

    /// Watched dofs: three components per watched node; defaults to the
    /// central node of the loaded face.
    pub fn tracked_dofs(&self, problem: &Problem) -> Result<Vec<usize>> {
        let nodes = if self.output.watch_nodes.is_empty() {
            vec![problem.loaded_face_center_node().ok_or_else(|| {
                Error::IllPosed("no loaded face to pick a default watch node from".into())
            })?]
        } else {
            self.output.watch_nodes.clone()
        };
        let n_nodes = problem.n_dofs() / 3;
        let mut dofs = Vec::with_capacity(3 * nodes.len());
        for n in nodes {
            if n >= n_nodes {
                return Err(Error::IllPosed(format!(
                    "watch node {n} outside the mesh ({n_nodes} nodes)"
                )));
            }
            dofs.extend_from_slice(&[3 * n, 3 * n + 1, 3 * n + 2]);
        }
        Ok(dofs)
    }
}
