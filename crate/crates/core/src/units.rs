//! Unit bookkeeping for the internal hbar = c = 1 system.
//!
//! All solver-facing quantities are expressed in an arbitrary length unit
//! chosen per scene (typically the hole radius). Energies are 1/length,
//! forces 1/length^2, both in units of hbar*c. Conversion to SI only needs
//! the physical size of the length unit.

use serde::{Deserialize, Serialize};

/// hbar * c in J * m.
pub const HBAR_C_JOULE_METER: f64 = 3.1615e-26;

/// Speed of light in m/s, used to map internal inverse lengths to rad/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Declares what one internal length unit means physically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitSystem {
    /// Physical size of the internal length unit, in meters.
    pub length_unit_m: f64,
}

impl UnitSystem {
    pub fn new(length_unit_m: f64) -> Self {
        Self { length_unit_m }
    }

    /// Internal force (hbar*c/length^2) to newtons.
    pub fn force_to_newtons(&self, force_internal: f64) -> f64 {
        force_internal * HBAR_C_JOULE_METER / (self.length_unit_m * self.length_unit_m)
    }

    /// Internal energy (hbar*c/length) to joules.
    pub fn energy_to_joules(&self, energy_internal: f64) -> f64 {
        energy_internal * HBAR_C_JOULE_METER / self.length_unit_m
    }

    /// Internal imaginary frequency (inverse length) to rad/s.
    pub fn xi_to_rad_per_s(&self, xi_internal: f64) -> f64 {
        xi_internal * SPEED_OF_LIGHT / self.length_unit_m
    }
}
