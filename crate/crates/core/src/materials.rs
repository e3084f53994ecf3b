//! Permittivity models evaluated at imaginary frequency.
//!
//! Along the imaginary axis every causal permittivity is real and >= 1,
//! which is what keeps the field operators positive definite. Perfect
//! conductors are kept symbolic (a marker, never a large number) so the
//! rasterizer can turn them into hard constraints instead of ill-conditioned
//! cell values.

use crate::units::UnitSystem;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Gold plasma frequency in rad/s for the lossless-plasma model.
pub const GOLD_PLASMA_FREQ_RAD_S: f64 = 1.37e16;

/// Fused silica, treated as non-dispersive.
pub const SILICA_EPSILON: f64 = 2.25;

/// Response of one material axis at one imaginary frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AxisResponse {
    /// Ideal conductor: the field component is constrained, not weighted.
    Conductor,
    /// Finite permittivity value (>= 1).
    Value(f64),
}

impl AxisResponse {
    pub fn is_conductor(&self) -> bool {
        matches!(self, AxisResponse::Conductor)
    }

    /// Finite value, or None for a conductor axis.
    pub fn finite(&self) -> Option<f64> {
        match self {
            AxisResponse::Conductor => None,
            AxisResponse::Value(v) => Some(*v),
        }
    }
}

/// Permittivity along the three cylindrical axes (r, phi, z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Permittivity {
    pub radial: AxisResponse,
    pub azimuthal: AxisResponse,
    pub axial: AxisResponse,
}

impl Permittivity {
    pub fn isotropic(resp: AxisResponse) -> Self {
        Self {
            radial: resp,
            azimuthal: resp,
            axial: resp,
        }
    }

    pub fn axis(&self, axis: Axis) -> AxisResponse {
        match axis {
            Axis::Radial => self.radial,
            Axis::Azimuthal => self.azimuthal,
            Axis::Axial => self.axial,
        }
    }
}

/// Cylindrical field/material axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Radial,
    Azimuthal,
    Axial,
}

pub const ALL_AXES: [Axis; 3] = [Axis::Radial, Axis::Azimuthal, Axis::Axial];

impl Axis {
    /// Position in the (r, phi, z) ordering used by per-axis arrays.
    pub fn index(self) -> usize {
        match self {
            Axis::Radial => 0,
            Axis::Azimuthal => 1,
            Axis::Axial => 2,
        }
    }
}

#[derive(Debug, Error)]
pub enum MaterialError {
    #[error("plasma frequency must be positive, got {0} rad/s")]
    NonPositivePlasmaFrequency(f64),
    #[error("constant permittivity must be >= 1 on the imaginary axis, got {0}")]
    PermittivityBelowOne(f64),
    #[error("unknown material name {name:?}; expected one of pec, gold-plasma, silica, uniaxial-pec-z, uniaxial-gold-z, dielectric:<value>")]
    UnknownName { name: String },
    #[error("material {0:?} is dispersive and needs a physical length unit to map xi to rad/s")]
    MissingUnits(String),
}

/// Isotropic dispersion law for a single axis family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum IsotropicLaw {
    PerfectConductor,
    /// eps(i xi) = 1 + (omega_p / xi)^2, xi in rad/s.
    PlasmaMetal {
        plasma_freq_rad_s: f64,
    },
    ConstantDielectric {
        eps: f64,
    },
    Vacuum,
}

impl IsotropicLaw {
    fn validate(self) -> Result<Self, MaterialError> {
        match self {
            IsotropicLaw::PlasmaMetal { plasma_freq_rad_s } if plasma_freq_rad_s <= 0.0 => {
                Err(MaterialError::NonPositivePlasmaFrequency(plasma_freq_rad_s))
            }
            IsotropicLaw::ConstantDielectric { eps } if eps < 1.0 => {
                Err(MaterialError::PermittivityBelowOne(eps))
            }
            law => Ok(law),
        }
    }

    fn response_at(
        &self,
        xi_internal: f64,
        units: Option<&UnitSystem>,
        name: &str,
    ) -> Result<AxisResponse, MaterialError> {
        Ok(match self {
            IsotropicLaw::PerfectConductor => AxisResponse::Conductor,
            IsotropicLaw::Vacuum => AxisResponse::Value(1.0),
            IsotropicLaw::ConstantDielectric { eps } => AxisResponse::Value(*eps),
            IsotropicLaw::PlasmaMetal { plasma_freq_rad_s } => {
                let units = units.ok_or_else(|| MaterialError::MissingUnits(name.to_string()))?;
                let xi_si = units.xi_to_rad_per_s(xi_internal);
                let ratio = plasma_freq_rad_s / xi_si;
                AxisResponse::Value(1.0 + ratio * ratio)
            }
        })
    }

    fn is_dispersive(&self) -> bool {
        matches!(self, IsotropicLaw::PlasmaMetal { .. })
    }
}

/// Material of a body: isotropic, or uniaxial with a distinguished z axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MaterialModel {
    Isotropic(IsotropicLaw),
    /// Transverse (r, phi) law and axial (z) law may differ.
    UniaxialZ {
        transverse: IsotropicLaw,
        axial: IsotropicLaw,
    },
}

impl MaterialModel {
    pub fn perfect_conductor() -> Self {
        MaterialModel::Isotropic(IsotropicLaw::PerfectConductor)
    }

    pub fn plasma_metal(plasma_freq_rad_s: f64) -> Result<Self, MaterialError> {
        Ok(MaterialModel::Isotropic(
            IsotropicLaw::PlasmaMetal { plasma_freq_rad_s }.validate()?,
        ))
    }

    pub fn constant_dielectric(eps: f64) -> Result<Self, MaterialError> {
        Ok(MaterialModel::Isotropic(
            IsotropicLaw::ConstantDielectric { eps }.validate()?,
        ))
    }

    pub fn uniaxial_z(
        transverse: IsotropicLaw,
        axial: IsotropicLaw,
    ) -> Result<Self, MaterialError> {
        Ok(MaterialModel::UniaxialZ {
            transverse: transverse.validate()?,
            axial: axial.validate()?,
        })
    }

    /// Parses the scene-config material names.
    pub fn parse(name: &str) -> Result<Self, MaterialError> {
        match name {
            "pec" => Ok(Self::perfect_conductor()),
            "gold-plasma" => Self::plasma_metal(GOLD_PLASMA_FREQ_RAD_S),
            "silica" => Self::constant_dielectric(SILICA_EPSILON),
            "uniaxial-pec-z" => {
                Self::uniaxial_z(IsotropicLaw::Vacuum, IsotropicLaw::PerfectConductor)
            }
            "uniaxial-gold-z" => Self::uniaxial_z(
                IsotropicLaw::Vacuum,
                IsotropicLaw::PlasmaMetal {
                    plasma_freq_rad_s: GOLD_PLASMA_FREQ_RAD_S,
                },
            ),
            other => {
                if let Some(value) = other.strip_prefix("dielectric:") {
                    let eps: f64 = value.parse().map_err(|_| MaterialError::UnknownName {
                        name: other.to_string(),
                    })?;
                    Self::constant_dielectric(eps)
                } else {
                    Err(MaterialError::UnknownName {
                        name: other.to_string(),
                    })
                }
            }
        }
    }

    /// Per-axis response at internal imaginary frequency `xi_internal`.
    ///
    /// `units` is only consulted by dispersive laws; pass None for scenes
    /// with no physical length anchor.
    pub fn permittivity_at(
        &self,
        xi_internal: f64,
        units: Option<&UnitSystem>,
    ) -> Result<Permittivity, MaterialError> {
        match self {
            MaterialModel::Isotropic(law) => Ok(Permittivity::isotropic(law.response_at(
                xi_internal,
                units,
                "isotropic",
            )?)),
            MaterialModel::UniaxialZ { transverse, axial } => Ok(Permittivity {
                radial: transverse.response_at(xi_internal, units, "uniaxial transverse")?,
                azimuthal: transverse.response_at(xi_internal, units, "uniaxial transverse")?,
                axial: axial.response_at(xi_internal, units, "uniaxial axial")?,
            }),
        }
    }

    /// True if the response depends on frequency (breaks geometric scaling).
    pub fn is_dispersive(&self) -> bool {
        match self {
            MaterialModel::Isotropic(law) => law.is_dispersive(),
            MaterialModel::UniaxialZ { transverse, axial } => {
                transverse.is_dispersive() || axial.is_dispersive()
            }
        }
    }

    /// Conductor flags per (r, phi, z) axis; frequency-independent.
    pub fn conductor_axes(&self) -> [bool; 3] {
        match self {
            MaterialModel::Isotropic(law) => {
                let c = matches!(law, IsotropicLaw::PerfectConductor);
                [c, c, c]
            }
            MaterialModel::UniaxialZ { transverse, axial } => {
                let t = matches!(transverse, IsotropicLaw::PerfectConductor);
                let a = matches!(axial, IsotropicLaw::PerfectConductor);
                [t, t, a]
            }
        }
    }

    /// True if any axis is an ideal conductor at all frequencies.
    pub fn has_conductor_axis(&self) -> bool {
        self.conductor_axes().iter().any(|&c| c)
    }
}
