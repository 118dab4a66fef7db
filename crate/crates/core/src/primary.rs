//! Passivity-based primary voltage controller of a bus.
//!
//! The converter applies the state feedback `v_t = k1·v + k2·i_f + k3·e`
//! where `e` integrates `v_ref − v`. Substituting into the filter equation
//! gives `di_f/dt = α v + β i_f + γ e`.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::grid::BusParams;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    /// Dimensionless voltage gain.
    pub k1: f64,
    /// Ohm.
    pub k2: f64,
    /// Ohm per second.
    pub k3: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerivedGains {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl DerivedGains {
    /// Normalization of the storage function that cancels the `ṽ·ĩ_f` cross
    /// term in its time derivative, `ω = γ − αβ`. Negative for gains that
    /// pass [`validate_passivity`].
    pub fn dissipative_omega(&self) -> f64 {
        self.gamma - self.alpha * self.beta
    }
}

pub fn derive_gains(gains: &ControllerGains, bus: &BusParams) -> DerivedGains {
    let l = bus.filter_inductance;
    DerivedGains { alpha: (gains.k1 - 1.0) / l, beta: (gains.k2 - bus.filter_resistance) / l, gamma: gains.k3 / l }
}

/// One inequality of the gain conditions, written as `value < bound`.
#[derive(Clone, Debug, PartialEq)]
pub struct GainCondition {
    pub name: &'static str,
    pub value: f64,
    pub bound: f64,
    /// `bound − value`; strictly positive when satisfied.
    pub margin: f64,
    pub satisfied: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PassivityReport {
    pub conditions: Vec<GainCondition>,
    pub passed: bool,
}

impl PassivityReport {
    pub fn violated(&self) -> impl Iterator<Item = &GainCondition> {
        self.conditions.iter().filter(|c| !c.satisfied)
    }
}

fn condition(name: &'static str, value: f64, bound: f64) -> GainCondition {
    let margin = bound - value;
    GainCondition { name, value, bound, margin, satisfied: margin > 0.0 }
}

/// Checks `k1 < 1`, `k2 < R_f` and `0 < k3 < (k1 − 1)(k2 − R_f)/L_f`.
pub fn validate_passivity(gains: &ControllerGains, bus: &BusParams) -> PassivityReport {
    let k3_bound = (gains.k1 - 1.0) * (gains.k2 - bus.filter_resistance) / bus.filter_inductance;
    let conditions = vec![
        condition("k1 < 1", gains.k1, 1.0),
        condition("k2 < R_f", gains.k2, bus.filter_resistance),
        condition("0 < k3", 0.0, gains.k3),
        condition("k3 < (k1-1)(k2-R_f)/L_f", gains.k3, k3_bound),
    ];
    let passed = conditions.iter().all(|c| c.satisfied);
    PassivityReport { conditions, passed }
}

/// Quadratic storage function of one bus over `(ṽ, ĩ_f, ẽ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StorageMatrix {
    matrix: Matrix3<f64>,
    omega: f64,
}

impl StorageMatrix {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.matrix).eigenvalues.min()
    }

    /// `S(ṽ, ĩ_f, ẽ) = x̃ᵀ S x̃`.
    pub fn evaluate(&self, v: f64, i_f: f64, e: f64) -> f64 {
        let x = nalgebra::Vector3::new(v, i_f, e);
        x.dot(&(self.matrix * x))
    }
}

/// `[[C_f, 0, 0], [0, β/ω, γ/ω], [0, γ/ω, αγ/ω]]`, rejected unless positive
/// definite.
pub fn storage_matrix(gains: &DerivedGains, bus: &BusParams, omega: f64) -> Result<StorageMatrix> {
    if omega == 0.0 || !omega.is_finite() {
        return Err(Error::InvalidParameter(format!("storage normalization must be nonzero, got {omega}")));
    }
    let b = gains.beta / omega;
    let g = gains.gamma / omega;
    let ag = gains.alpha * gains.gamma / omega;
    let matrix = Matrix3::new(
        bus.filter_capacitance,
        0.0,
        0.0, //
        0.0,
        b,
        g, //
        0.0,
        g,
        ag,
    );
    let storage = StorageMatrix { matrix, omega };
    let min_eigenvalue = storage.min_eigenvalue();
    if !(min_eigenvalue > 0.0) {
        return Err(Error::NotPositiveDefinite { min_eigenvalue });
    }
    Ok(storage)
}
