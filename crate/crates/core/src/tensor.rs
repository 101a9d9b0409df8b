//! Symmetric second-order tensors and the isotropic elastic tensor.
//!
//! Storage is Voigt order (11, 22, 33, 12, 23, 13) holding true tensor
//! components. Engineering (doubled) shear shows up only in the
//! strain-displacement matrices of the assembly layer and in the 6x6
//! realizations of fourth-order tensors, which act on engineering-strain
//! vectors. Norms and double contractions are always evaluated in
//! full-tensor space, so shear components count twice.

use nalgebra::{Matrix3, SMatrix};

/// 6x6 matrix acting on engineering-strain Voigt vectors.
pub type Matrix6 = SMatrix<f64, 6, 6>;

/// Symmetric 3x3 tensor, Voigt order (11, 22, 33, 12, 23, 13), true components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SymTensor(pub [f64; 6]);

impl SymTensor {
    pub const ZERO: SymTensor = SymTensor([0.0; 6]);

    pub fn new(c: [f64; 6]) -> Self {
        SymTensor(c)
    }

    /// a * identity.
    pub fn spherical(a: f64) -> Self {
        SymTensor([a, a, a, 0.0, 0.0, 0.0])
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        SymTensor([
            m[(0, 0)],
            m[(1, 1)],
            m[(2, 2)],
            0.5 * (m[(0, 1)] + m[(1, 0)]),
            0.5 * (m[(1, 2)] + m[(2, 1)]),
            0.5 * (m[(0, 2)] + m[(2, 0)]),
        ])
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let c = &self.0;
        Matrix3::new(
            c[0], c[3], c[5], //
            c[3], c[1], c[4], //
            c[5], c[4], c[2],
        )
    }

    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[1] + self.0[2]
    }

    /// Deviatoric part.
    pub fn dev(&self) -> SymTensor {
        let p = self.trace() / 3.0;
        let c = &self.0;
        SymTensor([c[0] - p, c[1] - p, c[2] - p, c[3], c[4], c[5]])
    }

    /// Full double contraction a_ij b_ij; off-diagonal terms count twice.
    pub fn ddot(&self, other: &SymTensor) -> f64 {
        let a = &self.0;
        let b = &other.0;
        a[0] * b[0]
            + a[1] * b[1]
            + a[2] * b[2]
            + 2.0 * (a[3] * b[3] + a[4] * b[4] + a[5] * b[5])
    }

    /// Frobenius norm of the full tensor.
    pub fn norm(&self) -> f64 {
        self.ddot(self).sqrt()
    }

    pub fn scale(&self, a: f64) -> SymTensor {
        let c = &self.0;
        SymTensor([a * c[0], a * c[1], a * c[2], a * c[3], a * c[4], a * c[5]])
    }

    pub fn add(&self, other: &SymTensor) -> SymTensor {
        let a = &self.0;
        let b = &other.0;
        SymTensor([
            a[0] + b[0],
            a[1] + b[1],
            a[2] + b[2],
            a[3] + b[3],
            a[4] + b[4],
            a[5] + b[5],
        ])
    }

    pub fn sub(&self, other: &SymTensor) -> SymTensor {
        self.add(&other.scale(-1.0))
    }

    /// self + a * other, fused form used in the hot loops.
    pub fn add_scaled(&self, a: f64, other: &SymTensor) -> SymTensor {
        let s = &self.0;
        let o = &other.0;
        SymTensor([
            s[0] + a * o[0],
            s[1] + a * o[1],
            s[2] + a * o[2],
            s[3] + a * o[3],
            s[4] + a * o[4],
            s[5] + a * o[5],
        ])
    }

    /// Engineering-strain Voigt vector (shears doubled). Only meaningful
    /// when the tensor is a strain.
    pub fn to_engineering(&self) -> [f64; 6] {
        let c = &self.0;
        [c[0], c[1], c[2], 2.0 * c[3], 2.0 * c[4], 2.0 * c[5]]
    }

    pub fn from_engineering(v: [f64; 6]) -> Self {
        SymTensor([v[0], v[1], v[2], 0.5 * v[3], 0.5 * v[4], 0.5 * v[5]])
    }
}

impl std::ops::Add for SymTensor {
    type Output = SymTensor;
    fn add(self, rhs: SymTensor) -> SymTensor {
        SymTensor::add(&self, &rhs)
    }
}

impl std::ops::Sub for SymTensor {
    type Output = SymTensor;
    fn sub(self, rhs: SymTensor) -> SymTensor {
        SymTensor::sub(&self, &rhs)
    }
}

impl std::ops::Mul<f64> for SymTensor {
    type Output = SymTensor;
    fn mul(self, rhs: f64) -> SymTensor {
        self.scale(rhs)
    }
}

/// Isotropic fourth-order elastic tensor kappa * I(x)I + 2 mu * I_dev.
///
/// The moduli are plain fields: affine stiffness components carry
/// sign-indefinite coefficients, so no positivity is enforced here. Material
/// points validate positivity where it matters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElasticTensor {
    pub kappa: f64,
    pub mu: f64,
}

impl ElasticTensor {
    pub fn new(kappa: f64, mu: f64) -> Self {
        ElasticTensor { kappa, mu }
    }

    /// Bulk and shear moduli from Young's modulus and Poisson's ratio.
    pub fn from_youngs(e: f64, nu: f64) -> Self {
        ElasticTensor {
            kappa: e / (3.0 * (1.0 - 2.0 * nu)),
            mu: e / (2.0 * (1.0 + nu)),
        }
    }

    /// Apply to a symmetric tensor: kappa*tr(e)*I + 2*mu*dev(e).
    pub fn apply(&self, e: &SymTensor) -> SymTensor {
        let tr = e.trace();
        let d = e.dev();
        SymTensor::spherical(self.kappa * tr).add_scaled(2.0 * self.mu, &d)
    }

    /// 6x6 realization acting on engineering-strain Voigt vectors.
    pub fn voigt(&self) -> Matrix6 {
        let lam = self.kappa - 2.0 * self.mu / 3.0;
        let mut m = Matrix6::zeros();
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] = lam;
            }
            m[(i, i)] = lam + 2.0 * self.mu;
            m[(i + 3, i + 3)] = self.mu;
        }
        m
    }
}

/// Deviatoric projector as a 6x6 on engineering-strain vectors.
pub fn deviatoric_voigt() -> Matrix6 {
    let mut m = Matrix6::zeros();
    for i in 0..3 {
        for j in 0..3 {
            m[(i, j)] = if i == j { 2.0 / 3.0 } else { -1.0 / 3.0 };
        }
        m[(i + 3, i + 3)] = 0.5;
    }
    m
}
