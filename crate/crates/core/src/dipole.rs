//! Casimir-Polder energies and axial forces for small anisotropic particles
//! above axisymmetric scenes.
//!
//! The particle is a point polarizability, diagonal in the cylindrical frame
//! at its own azimuth. Its interaction energy with the scene is
//!
//! ```text
//! U(r, z) = 2 Int_0^inf dxi  xi^2 Sum_a alpha_a(xi) Gamma_a(r, z; xi)
//! ```
//!
//! where Gamma_a is the mode-summed scattered Green's diagonal from
//! [`SceneSolver::scattered_green_traces`]. The prefactor 2 is pinned once by
//! requiring that a wide perfect-conductor slab at distance d reproduce the
//! wall law U = -3 alpha / (8 pi d^4) for a static isotropic particle
//! (internal units, hbar = c = 1); it is never retuned per scene.
//!
//! Forces are energy derivatives: F_z = -dU/dz by central differences with
//! one Richardson refinement. All four stencil energies are evaluated on one
//! shared grid per frequency so their differences stay smooth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::AxisymScene;
use crate::materials::{Axis, ALL_AXES};
use crate::search;
use crate::solver::{SceneSolver, SolverConfig, SolverError};
use crate::spectral::{QuadratureScheme, SpectralError};

/// Wall-law anchoring constant of the energy integral; see the module docs.
const CP_PREFACTOR: f64 = 2.0;

/// Diagonal polarizability tensor in volume units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Polarizability {
    /// Conducting-needle idealization: responds along z only.
    NeedleZ { alpha_z: f64 },
    /// Isotropic sphere, alpha = a^3.
    Sphere { alpha: f64 },
    /// Explicit (radial, azimuthal, axial) entries tabulated over xi in
    /// internal units, linearly interpolated and clamped at the ends.
    Table { samples: Vec<(f64, [f64; 3])> },
}

impl Polarizability {
    /// (radial, azimuthal, axial) entries at one imaginary frequency.
    pub fn diag(&self, xi: f64) -> [f64; 3] {
        match self {
            Polarizability::NeedleZ { alpha_z } => [0.0, 0.0, *alpha_z],
            Polarizability::Sphere { alpha } => [*alpha; 3],
            Polarizability::Table { samples } => {
                if samples.is_empty() {
                    return [0.0; 3];
                }
                if xi <= samples[0].0 {
                    return samples[0].1;
                }
                let last = samples.len() - 1;
                if xi >= samples[last].0 {
                    return samples[last].1;
                }
                let hi = samples.partition_point(|(x, _)| *x < xi).max(1);
                let (x0, lo_v) = samples[hi - 1];
                let (x1, hi_v) = samples[hi];
                let t = (xi - x0) / (x1 - x0);
                std::array::from_fn(|k| lo_v[k] + t * (hi_v[k] - lo_v[k]))
            }
        }
    }

    /// Same tensor with every entry multiplied by `factor` (>= 0).
    pub fn scaled(&self, factor: f64) -> Polarizability {
        assert!(
            factor.is_finite() && factor >= 0.0,
            "polarizability scale factor must be finite and non-negative"
        );
        match self {
            Polarizability::NeedleZ { alpha_z } => Polarizability::NeedleZ {
                alpha_z: factor * alpha_z,
            },
            Polarizability::Sphere { alpha } => Polarizability::Sphere {
                alpha: factor * alpha,
            },
            Polarizability::Table { samples } => Polarizability::Table {
                samples: samples
                    .iter()
                    .map(|&(x, v)| (x, [factor * v[0], factor * v[1], factor * v[2]]))
                    .collect(),
            },
        }
    }
}

/// Static z polarizability of a conducting needle of length `h` and diameter
/// `w`, from the prolate-spheroid closed form with semi-axes (h/2, w/2).
/// Transverse entries are zero by the needle idealization; users with
/// tabulated data can substitute [`Polarizability::Table`].
pub fn needle_polarizability(h: f64, w: f64) -> Result<Polarizability, DipoleError> {
    if !h.is_finite() || !w.is_finite() || w <= 0.0 || w >= h {
        return Err(DipoleError::InvalidAspect { h, w });
    }
    let a = 0.5 * h;
    let b = 0.5 * w;
    let e2 = 1.0 - (b / a) * (b / a);
    Ok(Polarizability::NeedleZ {
        alpha_z: a * b * b / (3.0 * prolate_depolarization(e2)),
    })
}

/// Static isotropic polarizability a^3 of a conducting sphere of radius `a`.
pub fn sphere_polarizability(a: f64) -> Result<Polarizability, DipoleError> {
    if !a.is_finite() || a <= 0.0 {
        return Err(DipoleError::BadRadius(a));
    }
    Ok(Polarizability::Sphere { alpha: a * a * a })
}

/// Tabulated diagonal polarizability; `samples` must be non-empty, strictly
/// ascending in xi, with finite non-negative entries.
pub fn table_polarizability(samples: Vec<(f64, [f64; 3])>) -> Result<Polarizability, DipoleError> {
    if samples.is_empty() {
        return Err(DipoleError::BadTable("table is empty".into()));
    }
    for (k, (xi, v)) in samples.iter().enumerate() {
        if !xi.is_finite() || *xi < 0.0 {
            return Err(DipoleError::BadTable(format!("bad frequency {xi}")));
        }
        if k > 0 && *xi <= samples[k - 1].0 {
            return Err(DipoleError::BadTable(format!(
                "frequencies must be strictly ascending, got {} after {}",
                xi,
                samples[k - 1].0
            )));
        }
        if v.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(DipoleError::BadTable(format!(
                "entries at xi = {xi} must be finite and non-negative, got {v:?}"
            )));
        }
    }
    Ok(Polarizability::Table { samples })
}

/// Depolarization factor of a prolate spheroid along its major axis, as a
/// function of eccentricity squared. A series branch keeps near-spherical
/// shapes accurate where the closed form loses digits to cancellation.
fn prolate_depolarization(e2: f64) -> f64 {
    if e2 < 1e-3 {
        (1.0 - e2) * (1.0 / 3.0 + e2 / 5.0 + e2 * e2 / 7.0 + e2 * e2 * e2 / 9.0)
    } else {
        let e = e2.sqrt();
        (1.0 - e2) / e2 * (0.5 / e * ((1.0 + e) / (1.0 - e)).ln() - 1.0)
    }
}

/// Particle position (r, phi = 0, z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticlePlacement {
    pub r: f64,
    pub z: f64,
}

impl ParticlePlacement {
    pub fn new(r: f64, z: f64) -> Self {
        Self { r, z }
    }

    pub fn on_axis(z: f64) -> Self {
        Self { r: 0.0, z }
    }
}

#[derive(Debug, Error)]
pub enum DipoleError {
    #[error("needle needs 0 < w < h, got h = {h}, w = {w}")]
    InvalidAspect { h: f64, w: f64 },
    #[error("sphere radius must be positive and finite, got {0}")]
    BadRadius(f64),
    #[error("polarizability table invalid: {0}")]
    BadTable(String),
    #[error("placement (r = {r}, z = {z}) invalid: {reason}")]
    BadPlacement { r: f64, z: f64, reason: String },
    #[error("placement (r = {r}, z = {z}) lies inside body {label:?}")]
    PlacementInsideBody { r: f64, z: f64, label: String },
    #[error("difference stencil at z = {z} with step {step} is invalid: {reason}")]
    Stencil { z: f64, step: f64, reason: String },
    #[error("z window [{lo}, {hi}] is empty or not finite")]
    BadWindow { lo: f64, hi: f64 },
    #[error("profile reference force {0:.6e} is not repulsive; nothing to normalize by")]
    DegenerateReference(f64),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Numerical controls shared by all Casimir-Polder evaluations.
#[derive(Debug, Clone, Copy)]
pub struct DipoleSettings {
    pub solver: SolverConfig,
    pub quad: QuadratureScheme,
    /// Relative tolerance of the azimuthal mode sum.
    pub m_rel_tol: f64,
    /// Hard cap on the azimuthal mode index.
    pub m_max: usize,
    /// Central-difference step of d/dz, in scene length units.
    pub step: f64,
}

impl DipoleSettings {
    /// Defaults tuned to a scene whose features live at `scale`: quadrature
    /// clustered near xi ~ 1/scale and a difference step of scale/100.
    pub fn for_scale(scale: f64) -> Result<Self, DipoleError> {
        Ok(Self {
            solver: SolverConfig::default(),
            quad: QuadratureScheme::new(24, 1.0 / scale)?,
            m_rel_tol: 1e-5,
            m_max: 32,
            step: 0.01 * scale,
        })
    }
}

/// One energy with its accumulated mode-sum truncation bound.
#[derive(Debug, Clone, Copy)]
struct EnergySample {
    value: f64,
    truncation: f64,
}

/// An axial force with its numerical error budget.
#[derive(Debug, Clone, Copy)]
pub struct ForceResult {
    /// F_z = -dU/dz; positive pushes the particle away from the scene.
    pub value: f64,
    /// Magnitude of the Richardson correction, an estimate of the remaining
    /// finite-difference error.
    pub stencil_error: f64,
    /// Propagated azimuthal truncation bound.
    pub truncation: f64,
}

/// Casimir-Polder energy of a particle at `placement`, in internal units.
pub fn cp_energy(
    scene: &AxisymScene,
    placement: ParticlePlacement,
    alpha: &Polarizability,
    settings: &DipoleSettings,
) -> Result<f64, DipoleError> {
    Ok(cp_energies(scene, &[placement], alpha, settings)?[0].value)
}

/// Axial Casimir-Polder force -dU/dz at `placement`: central differences
/// with steps `settings.step` and half of it, combined by one Richardson
/// extrapolation. All four energies share each frequency's grid.
pub fn cp_force_z(
    scene: &AxisymScene,
    placement: ParticlePlacement,
    alpha: &Polarizability,
    settings: &DipoleSettings,
) -> Result<ForceResult, DipoleError> {
    let h = settings.step;
    if !h.is_finite() || h <= 0.0 {
        return Err(DipoleError::Stencil {
            z: placement.z,
            step: h,
            reason: "step must be positive and finite".into(),
        });
    }
    let at = |z: f64| ParticlePlacement { r: placement.r, z };
    let stencil = [
        at(placement.z - h),
        at(placement.z + h),
        at(placement.z - 0.5 * h),
        at(placement.z + 0.5 * h),
    ];
    for p in &stencil {
        ensure_placement_clear(scene, *p).map_err(|e| DipoleError::Stencil {
            z: placement.z,
            step: h,
            reason: e.to_string(),
        })?;
    }
    let u = cp_energies(scene, &stencil, alpha, settings)?;
    let wide = (u[0].value - u[1].value) / (2.0 * h);
    let half = (u[2].value - u[3].value) / h;
    let value = (4.0 * half - wide) / 3.0;
    Ok(ForceResult {
        value,
        stencil_error: (value - half).abs(),
        truncation: ((u[0].truncation + u[1].truncation) / (2.0 * h)
            + 4.0 * (u[2].truncation + u[3].truncation) / h)
            / 3.0,
    })
}

/// Peak of the on-axis force and where it sits.
pub struct AxialMaximum {
    pub z: f64,
    pub force: ForceResult,
}

/// Largest on-axis F_z over `z_window`, found by a coarse scan plus
/// golden-section refinement to half a stencil step.
pub fn max_on_axis_force(
    scene: &AxisymScene,
    alpha: &Polarizability,
    settings: &DipoleSettings,
    z_window: (f64, f64),
) -> Result<AxialMaximum, DipoleError> {
    let (lo, hi) = z_window;
    if !lo.is_finite() || !hi.is_finite() || hi <= lo {
        return Err(DipoleError::BadWindow { lo, hi });
    }
    let best = search::maximize_on_interval(
        |z| cp_force_z(scene, ParticlePlacement::on_axis(z), alpha, settings).map(|f| (f.value, f)),
        lo,
        hi,
        0.5 * settings.step,
    )?;
    Ok(AxialMaximum {
        z: best.x,
        force: best.payload,
    })
}

/// Radial force profile at fixed height, normalized by the peak on-axis
/// repulsion over `z_window`.
#[derive(Debug, Clone)]
pub struct EnhancementProfile {
    /// Peak on-axis F_z over the window, the normalizer.
    pub reference_force: f64,
    /// Height at which the reference peaks.
    pub reference_z: f64,
    pub points: Vec<ProfilePoint>,
}

#[derive(Debug, Clone, Copy)]
pub struct ProfilePoint {
    pub r: f64,
    pub force: f64,
    /// force / reference_force; sign and shape are data, never asserted here.
    pub enhancement: f64,
}

pub fn enhancement_profile(
    scene: &AxisymScene,
    z: f64,
    r_samples: &[f64],
    alpha: &Polarizability,
    settings: &DipoleSettings,
    z_window: (f64, f64),
) -> Result<EnhancementProfile, DipoleError> {
    let reference = max_on_axis_force(scene, alpha, settings, z_window)?;
    if !reference.force.value.is_finite() || reference.force.value <= 0.0 {
        return Err(DipoleError::DegenerateReference(reference.force.value));
    }
    let mut points = Vec::with_capacity(r_samples.len());
    for &r in r_samples {
        let force = cp_force_z(scene, ParticlePlacement { r, z }, alpha, settings)?;
        points.push(ProfilePoint {
            r,
            force: force.value,
            enhancement: force.value / reference.force.value,
        });
    }
    Ok(EnhancementProfile {
        reference_force: reference.force.value,
        reference_z: reference.z,
        points,
    })
}

/// Energies for a batch of placements, sharing every frequency's rasterized
/// grid and per-mode factorizations across the whole batch.
fn cp_energies(
    scene: &AxisymScene,
    placements: &[ParticlePlacement],
    alpha: &Polarizability,
    settings: &DipoleSettings,
) -> Result<Vec<EnergySample>, DipoleError> {
    for p in placements {
        ensure_placement_clear(scene, *p)?;
    }
    let zero = EnergySample {
        value: 0.0,
        truncation: 0.0,
    };
    let mut out = vec![zero; placements.len()];
    let axes = active_axes(alpha);
    if axes.is_empty() || placements.is_empty() {
        return Ok(out);
    }

    let solver = SceneSolver::new(scene, settings.solver);
    let delta = 1.0 / settings.solver.resolution;
    let positions: Vec<(f64, f64)> = placements.iter().map(|p| (p.r, p.z)).collect();
    let standoff: Vec<f64> = placements
        .iter()
        .map(|p| nearest_body_distance(scene, *p).unwrap_or(delta).max(delta))
        .collect();

    for node in settings.quad.xi_nodes() {
        let hints: Vec<f64> = standoff.iter().map(|&d| trace_scale(node.xi, d)).collect();
        let traces = solver.scattered_green_traces(
            &positions,
            &axes,
            node.xi,
            settings.m_max,
            settings.m_rel_tol,
            &hints,
        )?;
        let diag = alpha.diag(node.xi);
        let alpha_sum: f64 = axes.iter().map(|&a| diag[a.index()]).sum();
        let w = CP_PREFACTOR * node.weight * node.xi * node.xi;
        for (sample, trace) in out.iter_mut().zip(&traces) {
            let coupled: f64 = trace
                .values
                .iter()
                .map(|&(axis, g)| diag[axis.index()] * g)
                .sum();
            sample.value += w * coupled;
            sample.truncation += w * alpha_sum * trace.truncation;
        }
    }
    Ok(out)
}

fn active_axes(alpha: &Polarizability) -> Vec<Axis> {
    match alpha {
        Polarizability::NeedleZ { alpha_z } => {
            if *alpha_z > 0.0 {
                vec![Axis::Axial]
            } else {
                Vec::new()
            }
        }
        Polarizability::Sphere { alpha } => {
            if *alpha > 0.0 {
                ALL_AXES.to_vec()
            } else {
                Vec::new()
            }
        }
        Polarizability::Table { samples } => ALL_AXES
            .iter()
            .copied()
            .filter(|a| samples.iter().any(|(_, v)| v[a.index()] > 0.0))
            .collect(),
    }
}

fn ensure_placement_clear(scene: &AxisymScene, p: ParticlePlacement) -> Result<(), DipoleError> {
    if !p.r.is_finite() || !p.z.is_finite() || p.r < 0.0 {
        return Err(DipoleError::BadPlacement {
            r: p.r,
            z: p.z,
            reason: "coordinates must be finite with r >= 0".into(),
        });
    }
    for body in scene.bodies() {
        let cs = body.shape.cross_section();
        if p.r >= cs.r_lo && p.r <= cs.r_hi && p.z >= cs.z_lo && p.z <= cs.z_hi {
            return Err(DipoleError::PlacementInsideBody {
                r: p.r,
                z: p.z,
                label: body.label.clone(),
            });
        }
    }
    Ok(())
}

/// Half-plane distance from a placement to the nearest body cross section,
/// which for solids of revolution equals the true 3D standoff of a particle
/// at phi = 0. None when the scene is empty.
fn nearest_body_distance(scene: &AxisymScene, p: ParticlePlacement) -> Option<f64> {
    scene
        .bodies()
        .iter()
        .map(|b| {
            let cs = b.shape.cross_section();
            let dr = (cs.r_lo - p.r).max(p.r - cs.r_hi).max(0.0);
            let dz = (cs.z_lo - p.z).max(p.z - cs.z_hi).max(0.0);
            dr.hypot(dz)
        })
        .min_by(f64::total_cmp)
}

/// Outer scale for the per-frequency mode sums: the peak over xi of the
/// image-wall integrand xi^2 |G| at standoff `d`, equal to 1/(2 pi (2d)^3),
/// mapped back to Green's-function units at this node's xi. Unlike the local
/// image magnitude it does not decay exponentially in xi, so late quadrature
/// nodes whose true contribution is negligible terminate immediately instead
/// of chasing solver noise, and symmetry-suppressed traces terminate against
/// the scale of the surviving energy integral.
fn trace_scale(xi: f64, d: f64) -> f64 {
    1.0 / (16.0 * std::f64::consts::PI * d * d * d * xi * xi)
}
