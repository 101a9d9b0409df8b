//! Von Mises plasticity with linear kinematic hardening: explicit radial
//! return from the previous committed state plus the consistent tangent of
//! that update.
//!
//! Conventions: the yield function compares the full-tensor Frobenius norm
//! of the relative deviatoric stress against the yield stress (no sqrt(2/3)
//! factor; the yield parameter absorbs it), and the hardening modulus enters
//! as 2*mu + hardening in every return-map denominator.

use crate::tensor::{ElasticTensor, Matrix6, SymTensor};

/// Material parameters at a quadrature point. All moduli in consistent
/// stress units (MPa throughout the kit).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaterialPoint {
    pub kappa: f64,
    pub mu: f64,
    /// Kinematic hardening modulus (varpi).
    pub hardening: f64,
    pub yield_stress: f64,
}

impl MaterialPoint {
    pub fn new(kappa: f64, mu: f64, hardening: f64, yield_stress: f64) -> Self {
        debug_assert!(kappa > 0.0 && mu > 0.0 && hardening >= 0.0 && yield_stress > 0.0);
        MaterialPoint {
            kappa,
            mu,
            hardening,
            yield_stress,
        }
    }

    pub fn from_youngs(e: f64, nu: f64, hardening: f64, yield_stress: f64) -> Self {
        let el = ElasticTensor::from_youngs(e, nu);
        MaterialPoint::new(el.kappa, el.mu, hardening, yield_stress)
    }

    pub fn elastic(&self) -> ElasticTensor {
        ElasticTensor::new(self.kappa, self.mu)
    }
}

/// Internal variables committed at the end of a time step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PlasticState {
    pub plastic_strain: SymTensor,
    pub back_stress: SymTensor,
}

/// Elastic predictor quantities shared by stress, tangent and state update.
#[derive(Clone, Copy, Debug)]
pub struct TrialState {
    /// Elastic predictor stress C : (eps - eps_p_prev).
    pub elastic_stress: SymTensor,
    /// Relative deviatoric stress dev(sigma0) - beta_prev.
    pub relative_stress: SymTensor,
    /// Norm of the relative stress.
    pub relative_norm: f64,
    /// Yield indicator gamma = 1 - sigma_y / |relative|; -inf at |relative| = 0
    /// so the elastic branch is taken.
    pub indicator: f64,
}

/// Elastic predictor for a total strain against the previously committed state.
pub fn trial_state(mp: &MaterialPoint, strain: &SymTensor, prev: &PlasticState) -> TrialState {
    let elastic_strain = strain.sub(&prev.plastic_strain);
    let elastic_stress = mp.elastic().apply(&elastic_strain);
    let relative_stress = elastic_stress.dev().sub(&prev.back_stress);
    let relative_norm = relative_stress.norm();
    let indicator = if relative_norm == 0.0 {
        f64::NEG_INFINITY
    } else {
        1.0 - mp.yield_stress / relative_norm
    };
    TrialState {
        elastic_stress,
        relative_stress,
        relative_norm,
        indicator,
    }
}

/// Yield function |dev(sigma) - beta| - sigma_y.
pub fn yield_value(stress: &SymTensor, back_stress: &SymTensor, yield_stress: f64) -> f64 {
    stress.dev().sub(back_stress).norm() - yield_stress
}

fn plastic_fraction(mp: &MaterialPoint, trial: &TrialState) -> f64 {
    // <gamma> / (2 mu + varpi) scaled pieces share this positive part.
    trial.indicator.max(0.0) / (2.0 * mp.mu + mp.hardening)
}

/// Updated stress for the given total strain (radial return).
pub fn return_map_stress(mp: &MaterialPoint, strain: &SymTensor, prev: &PlasticState) -> SymTensor {
    let trial = trial_state(mp, strain, prev);
    stress_from_trial(mp, &trial)
}

pub fn stress_from_trial(mp: &MaterialPoint, trial: &TrialState) -> SymTensor {
    let f = plastic_fraction(mp, trial);
    trial
        .elastic_stress
        .add_scaled(-2.0 * mp.mu * f, &trial.relative_stress)
}

/// Internal variables after the step: the back stress and plastic strain
/// move along the relative-stress direction, split by the hardening ratio.
pub fn update_internal(mp: &MaterialPoint, strain: &SymTensor, prev: &PlasticState) -> PlasticState {
    let trial = trial_state(mp, strain, prev);
    state_from_trial(mp, &trial, prev)
}

pub fn state_from_trial(
    mp: &MaterialPoint,
    trial: &TrialState,
    prev: &PlasticState,
) -> PlasticState {
    let f = plastic_fraction(mp, trial);
    PlasticState {
        plastic_strain: prev.plastic_strain.add_scaled(f, &trial.relative_stress),
        back_stress: prev
            .back_stress
            .add_scaled(mp.hardening * f, &trial.relative_stress),
    }
}

/// Consistent tangent of the radial return, as a 6x6 on engineering-strain
/// vectors. Elastic branch (indicator <= 0) returns the elastic matrix
/// exactly.
pub fn consistent_tangent(mp: &MaterialPoint, strain: &SymTensor, prev: &PlasticState) -> Matrix6 {
    let trial = trial_state(mp, strain, prev);
    tangent_from_trial(mp, &trial)
}

pub fn tangent_from_trial(mp: &MaterialPoint, trial: &TrialState) -> Matrix6 {
    let mut m = mp.elastic().voigt();
    let gamma = trial.indicator;
    if gamma <= 0.0 {
        return m;
    }
    let c = 4.0 * mp.mu * mp.mu / (2.0 * mp.mu + mp.hardening) * gamma;
    let w = 1.0 / gamma - 1.0;
    let s = &trial.relative_stress.0;
    let n2 = trial.relative_norm * trial.relative_norm;
    let dev = crate::tensor::deviatoric_voigt();
    for i in 0..6 {
        for j in 0..6 {
            m[(i, j)] -= c * (dev[(i, j)] + w * s[i] * s[j] / n2);
        }
    }
    m
}

/// Directional tangent action C_T : dir without forming the 6x6, used by the
/// scalar stages. `dir` is a true-component symmetric tensor.
pub fn tangent_apply(
    mp: &MaterialPoint,
    trial: &TrialState,
    dir: &SymTensor,
) -> SymTensor {
    let elastic = mp.elastic().apply(dir);
    let gamma = trial.indicator;
    if gamma <= 0.0 {
        return elastic;
    }
    let c = 4.0 * mp.mu * mp.mu / (2.0 * mp.mu + mp.hardening) * gamma;
    let w = 1.0 / gamma - 1.0;
    let n2 = trial.relative_norm * trial.relative_norm;
    let proj = trial.relative_stress.ddot(dir) / n2;
    elastic
        .add_scaled(-c, &dir.dev())
        .add_scaled(-c * w * proj, &trial.relative_stress)
}

/// Quadratic form dir : C_T : dir for the scalar Newton updates.
pub fn tangent_quadratic(mp: &MaterialPoint, trial: &TrialState, dir: &SymTensor) -> f64 {
    tangent_apply(mp, trial, dir).ddot(dir)
}
