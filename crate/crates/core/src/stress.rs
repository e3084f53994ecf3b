//! Net axial Casimir force on one body, from the Maxwell stress tensor
//! integrated over a closed surface of revolution around it.
//!
//! The surface is a rectangle in the (r, z) half plane: two annular caps and
//! up to two cylindrical walls (the inner wall exists only around annular
//! bodies). On every sample point the needed fluctuation correlators come
//! from scattered Green's samples, full scene minus vacuum on the same grid,
//! folded over azimuthal modes:
//!
//! ```text
//! F_z = -(1/pi) Int_0^inf dxi xi^2 Sum_p w_p n_j [ T^E_zj + T^M_zj ](p)
//! T_zj = Gamma_zj - (delta_zj / 2) Gamma_kk
//! ```
//!
//! Electric entries are field-probe sandwiches. Magnetic entries come from
//! curl-row sandwiches divided by -xi^2; their z-r cross entry flips sign
//! because the radial and axial curl rows absorb opposite imaginary factors
//! in the real-reduced representation (pinned by the vacuum duality test in
//! the solver). The overall prefactor is fixed by the same wall-law anchor
//! as the point-particle engine, so both engines share one normalization.
//!
//! Positive force pushes the body toward +z. The error budget carries three
//! independently estimated terms: frequency quadrature, azimuthal
//! truncation, and the closure defect, measured as the force difference
//! against a twin surface two cells away (the net stress flux through the
//! empty shell between them, which would vanish on a perfect grid).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    build_scene, scale_scene, AxisymScene, CrossSection, Domain, GeometryError,
};
use crate::materials::Axis;
use crate::search;
use crate::solver::{
    Probe, SceneSolver, SolverConfig, SolverError, MODE_GREEN_PREFACTOR, SAMPLE_NOISE_FACTOR,
};
use crate::spectral::{QuadratureScheme, SpectralError};

/// Smallest allowed gap, in cells, between the surface and any body. Below
/// two cells the staircase registration of the conductor faces dominates the
/// stress samples.
const MIN_CLEARANCE_CELLS: f64 = 2.0;

/// Closed integration surface around the target body, in grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationSurface {
    /// Gap between the body's bounding cross section and the surface.
    pub clearance_cells: f64,
    /// Spacing of stress samples along each face.
    pub spacing_cells: f64,
    /// Offset of the closure-defect twin surface.
    pub twin_gap_cells: f64,
}

impl Default for IntegrationSurface {
    fn default() -> Self {
        Self {
            clearance_cells: 3.0,
            spacing_cells: 1.0,
            twin_gap_cells: 2.0,
        }
    }
}

/// Numerical controls shared by all stress-tensor evaluations.
#[derive(Debug, Clone, Copy)]
pub struct StressSettings {
    pub solver: SolverConfig,
    pub quad: QuadratureScheme,
    /// Relative tolerance of the azimuthal mode sum.
    pub m_rel_tol: f64,
    /// Hard cap on the azimuthal mode index.
    pub m_max: usize,
}

impl StressSettings {
    /// Defaults tuned to a scene whose features live at `scale`.
    pub fn for_scale(scale: f64) -> Result<Self, StressError> {
        Ok(Self {
            solver: SolverConfig::default(),
            quad: QuadratureScheme::new(16, 1.0 / scale)?,
            m_rel_tol: 1e-3,
            m_max: 48,
        })
    }
}

/// Independently estimated, non-negative error terms, in force units.
#[derive(Debug, Clone, Copy, Default)]
pub struct ErrorBudget {
    /// Difference against a trapezoid rule over the same frequency nodes, a
    /// deliberate overestimate of the quadrature error.
    pub quadrature: f64,
    /// Propagated magnitude of the last azimuthal term at every frequency.
    pub mode_truncation: f64,
    /// Force difference against the twin surface.
    pub closure_defect: f64,
}

impl ErrorBudget {
    pub fn total(&self) -> f64 {
        self.quadrature + self.mode_truncation + self.closure_defect
    }
}

/// The net axial force on one body with its numerical metadata.
#[derive(Debug, Clone, Copy)]
pub struct ForceResult {
    /// Net force along +z in internal units (hbar c / length^2).
    pub force: f64,
    /// The same force in newtons when the solver carries a unit system.
    pub force_newtons: Option<f64>,
    /// Axial midpoint of the target body when the force was taken.
    pub z_position: f64,
    pub budget: ErrorBudget,
    pub resolution: f64,
    pub xi_nodes: usize,
    /// Stress samples on the main surface.
    pub surface_points: usize,
}

/// Result of a force maximization over the body's axial position.
#[derive(Debug, Clone, Copy)]
pub struct ZMaximum {
    pub z: f64,
    pub force: ForceResult,
    /// False when the force is attractive everywhere on the window.
    pub repulsive: bool,
}

/// Forces before and after uniform geometric scaling.
#[derive(Debug, Clone, Copy)]
pub struct ScaleCheck {
    pub base: ForceResult,
    pub scaled: ForceResult,
    /// scaled force * factor^2 / base force; 1 under exact a^-2 scaling.
    pub ratio: f64,
}

#[derive(Debug, Error)]
pub enum StressError {
    #[error("no body labelled {0:?} in the scene")]
    UnknownBody(String),
    #[error("several bodies are labelled {0:?}; the target label must be unique")]
    AmbiguousBody(String),
    #[error("integration surface invalid: {reason}")]
    InvalidSurface { reason: String },
    #[error("z window [{lo}, {hi}] is empty or not finite")]
    BadWindow { lo: f64, hi: f64 },
    #[error("geometric scaling needs dispersion-free materials, but {label:?} is dispersive")]
    ScalingNotApplicable { label: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Net axial force on the body labelled `target`.
pub fn force_z(
    scene: &AxisymScene,
    target: &str,
    surface: &IntegrationSurface,
    settings: &StressSettings,
) -> Result<ForceResult, StressError> {
    let (idx, cs) = find_target(scene, target)?;
    validate_surface_params(surface)?;
    let delta = 1.0 / settings.solver.resolution;

    let main = SurfaceRect::around(&cs, surface.clearance_cells * delta);
    validate_surface(scene, idx, &main, delta)?;
    let twin = pick_twin(scene, idx, &main, surface.twin_gap_cells * delta, delta)?;

    let (main_pts, mut probes) = sample_surface(&main, delta, surface.spacing_cells);
    let (twin_pts, twin_probes) = offset_samples(&twin, delta, surface.spacing_cells, probes.len());
    probes.extend(twin_probes);
    let corners = [
        (main.r_out, main.z_lo),
        (main.r_out, main.z_hi),
        (twin.r_out, twin.z_lo),
        (twin.r_out, twin.z_hi),
    ];

    let solver = SceneSolver::new(scene, settings.solver);
    let noise_unit = SAMPLE_NOISE_FACTOR * settings.solver.residual_tol;
    let mut samples: Vec<NodeSample> = Vec::with_capacity(settings.quad.node_count);
    let mut peak = 0.0f64;

    for node in settings.quad.xi_nodes() {
        let ctx = solver.xi_context(node.xi, &corners)?;
        let xi2 = node.xi * node.xi;
        // Scale hint from the frequency integral: modes negligible against
        // the largest integrand seen so far need not converge on their own.
        let hint = if xi2 > 0.0 { peak / xi2 } else { 0.0 };

        let mut s_main = 0.0f64;
        let mut s_twin = 0.0f64;
        let mut scale = hint;
        let mut last = 0.0f64;
        let mut small_run = 0usize;
        let mut converged = false;
        for m in 0..=settings.m_max {
            let pair = ctx.mode_pair(m)?;
            let (g, mags) = pair.scattered_green_scaled(&probes, &settings.solver)?;
            let deg = if m == 0 { 1.0 } else { 2.0 };
            let (t1, fl1) = surface_term(&main_pts, &g, &mags, xi2, noise_unit);
            let (t2, fl2) = surface_term(&twin_pts, &g, &mags, xi2, noise_unit);
            s_main += deg * t1;
            s_twin += deg * t2;
            let term = deg * t1.abs().max(t2.abs());
            let floor = deg * fl1.max(fl2);
            scale = scale.max(s_main.abs()).max(s_twin.abs()).max(term);
            last = term;
            if m >= 1 {
                if term <= (settings.m_rel_tol * scale).max(floor) {
                    small_run += 1;
                    if small_run >= 2 {
                        converged = true;
                        break;
                    }
                } else {
                    small_run = 0;
                }
            }
        }
        if !converged && last > (settings.m_rel_tol * scale).max(0.0) {
            return Err(SolverError::ModeSumTruncated {
                m_cap: settings.m_max,
                last_term: last,
            }
            .into());
        }
        let folded = MODE_GREEN_PREFACTOR * s_main;
        peak = peak.max(xi2 * folded.abs());
        samples.push(NodeSample {
            xi: node.xi,
            weight: node.weight,
            main: folded,
            twin: MODE_GREEN_PREFACTOR * s_twin,
            truncation: MODE_GREEN_PREFACTOR * last,
        });
    }

    let integrate = |pick: fn(&NodeSample) -> f64| -> f64 {
        -samples
            .iter()
            .map(|s| s.weight * s.xi * s.xi * pick(s))
            .sum::<f64>()
            / PI
    };
    let force = integrate(|s| s.main);
    let force_twin = integrate(|s| s.twin);
    let mode_truncation = samples
        .iter()
        .map(|s| s.weight * s.xi * s.xi * s.truncation)
        .sum::<f64>()
        / PI;

    Ok(ForceResult {
        force,
        force_newtons: settings.solver.units.map(|u| u.force_to_newtons(force)),
        z_position: 0.5 * (cs.z_lo + cs.z_hi),
        budget: ErrorBudget {
            quadrature: quadrature_defect(&samples, settings.quad.xi0, force),
            mode_truncation,
            closure_defect: (force_twin - force).abs(),
        },
        resolution: settings.solver.resolution,
        xi_nodes: settings.quad.node_count,
        surface_points: main_pts.len(),
    })
}

/// Largest F_z over axial positions of the target body: a coarse scan plus
/// golden-section refinement to a bracket of `z_tol`. The surface follows
/// the body; every candidate scene is re-validated, so positions where the
/// body would collide with another are reported as errors rather than
/// silently skipped.
pub fn maximize_force_z(
    scene: &AxisymScene,
    target: &str,
    z_window: (f64, f64),
    z_tol: f64,
    surface: &IntegrationSurface,
    settings: &StressSettings,
) -> Result<ZMaximum, StressError> {
    let (lo, hi) = z_window;
    if !lo.is_finite() || !hi.is_finite() || hi <= lo || !z_tol.is_finite() || z_tol <= 0.0 {
        return Err(StressError::BadWindow { lo, hi });
    }
    let best = search::maximize_on_interval(
        |z| {
            let moved = scene_with_target_at(scene, target, z)?;
            force_z(&moved, target, surface, settings).map(|f| (f.force, f))
        },
        lo,
        hi,
        z_tol,
    )?;
    Ok(ZMaximum {
        z: best.x,
        force: best.payload,
        repulsive: best.value > 0.0,
    })
}

/// Verifies the a^-2 force scaling under uniform geometric scaling by
/// `factor`. The discretization scales along (cell size and quadrature scale
/// both follow the geometry), so only a hidden absolute length in the
/// pipeline can break the ratio. Dispersive materials carry such a length
/// physically and are rejected.
pub fn force_vs_scale(
    scene: &AxisymScene,
    target: &str,
    factor: f64,
    surface: &IntegrationSurface,
    settings: &StressSettings,
) -> Result<ScaleCheck, StressError> {
    if let Some(body) = scene.bodies().iter().find(|b| b.material.is_dispersive()) {
        return Err(StressError::ScalingNotApplicable {
            label: body.label.clone(),
        });
    }
    let base = force_z(scene, target, surface, settings)?;
    let scaled_scene = scale_scene(scene, factor)?;
    let mut scaled_settings = *settings;
    scaled_settings.solver.resolution = settings.solver.resolution / factor;
    scaled_settings.quad = QuadratureScheme::new(settings.quad.node_count, settings.quad.xi0 / factor)?;
    let scaled = force_z(&scaled_scene, target, surface, &scaled_settings)?;
    Ok(ScaleCheck {
        base,
        scaled,
        ratio: scaled.force * factor * factor / base.force,
    })
}

/// One frequency node's folded surface integrals.
struct NodeSample {
    xi: f64,
    weight: f64,
    main: f64,
    twin: f64,
    truncation: f64,
}

/// Rectangle of revolution in the (r, z) half plane. `r_in` is zero when the
/// surface is closed at the axis.
#[derive(Debug, Clone, Copy)]
struct SurfaceRect {
    r_in: f64,
    r_out: f64,
    z_lo: f64,
    z_hi: f64,
}

impl SurfaceRect {
    fn around(cs: &CrossSection, gap: f64) -> SurfaceRect {
        let r_in = if cs.r_lo - gap >= 2.0 * gap / 3.0 {
            cs.r_lo - gap
        } else {
            0.0
        };
        SurfaceRect {
            r_in,
            r_out: cs.r_hi + gap,
            z_lo: cs.z_lo - gap,
            z_hi: cs.z_hi + gap,
        }
    }

    fn grown(&self, g: f64) -> SurfaceRect {
        SurfaceRect {
            r_in: if self.r_in > 0.0 {
                (self.r_in - g).max(0.0)
            } else {
                0.0
            },
            r_out: self.r_out + g,
            z_lo: self.z_lo - g,
            z_hi: self.z_hi + g,
        }
    }

    fn shrunk(&self, g: f64) -> SurfaceRect {
        SurfaceRect {
            r_in: if self.r_in > 0.0 { self.r_in + g } else { 0.0 },
            r_out: self.r_out - g,
            z_lo: self.z_lo + g,
            z_hi: self.z_hi - g,
        }
    }
}

/// Outward-normal orientation of one face.
#[derive(Debug, Clone, Copy)]
enum Face {
    /// Annular cap; +1 for the top (normal +z), -1 for the bottom.
    Cap { sign: f64 },
    /// Cylindrical wall; +1 for the outer (normal +r), -1 for the inner.
    Wall { sign: f64 },
}

/// One stress sample: an area weight and the index of its first probe.
#[derive(Debug, Clone, Copy)]
struct SamplePoint {
    face: Face,
    weight: f64,
    base: usize,
}

/// Probes per cap point: fields r, phi, z then curls r, phi, z.
const CAP_PROBES: usize = 6;
/// Probes per wall point: fields r, z then curls r, z.
const WALL_PROBES: usize = 4;

fn sample_surface(rect: &SurfaceRect, delta: f64, spacing: f64) -> (Vec<SamplePoint>, Vec<Probe>) {
    offset_samples(rect, delta, spacing, 0)
}

/// Midpoint samples along every face, with `base` offsetting probe indices
/// so several surfaces can share one probe list.
fn offset_samples(
    rect: &SurfaceRect,
    delta: f64,
    spacing: f64,
    base: usize,
) -> (Vec<SamplePoint>, Vec<Probe>) {
    let mut points = Vec::new();
    let mut probes = Vec::new();
    let step = spacing * delta;

    let span_r = rect.r_out - rect.r_in;
    let n_r = (span_r / step).ceil().max(1.0) as usize;
    let h_r = span_r / n_r as f64;
    for (z, sign) in [(rect.z_hi, 1.0), (rect.z_lo, -1.0)] {
        for k in 0..n_r {
            let r = rect.r_in + (k as f64 + 0.5) * h_r;
            points.push(SamplePoint {
                face: Face::Cap { sign },
                weight: 2.0 * PI * r * h_r,
                base: base + probes.len(),
            });
            for axis in [Axis::Radial, Axis::Azimuthal, Axis::Axial] {
                probes.push(Probe::field(axis, r, z));
            }
            for axis in [Axis::Radial, Axis::Azimuthal, Axis::Axial] {
                probes.push(Probe::flux(axis, r, z));
            }
        }
    }

    let span_z = rect.z_hi - rect.z_lo;
    let n_z = (span_z / step).ceil().max(1.0) as usize;
    let h_z = span_z / n_z as f64;
    let mut walls = vec![(rect.r_out, 1.0)];
    if rect.r_in > 0.0 {
        walls.push((rect.r_in, -1.0));
    }
    for (r, sign) in walls {
        for j in 0..n_z {
            let z = rect.z_lo + (j as f64 + 0.5) * h_z;
            points.push(SamplePoint {
                face: Face::Wall { sign },
                weight: 2.0 * PI * r * h_z,
                base: base + probes.len(),
            });
            probes.push(Probe::field(Axis::Radial, r, z));
            probes.push(Probe::field(Axis::Axial, r, z));
            probes.push(Probe::flux(Axis::Radial, r, z));
            probes.push(Probe::flux(Axis::Axial, r, z));
        }
    }
    (points, probes)
}

/// One azimuthal mode's surface integral of n_j T_zj, with the matching
/// subtraction-noise floor built from the same linear combination of
/// pre-subtraction magnitudes.
fn surface_term(
    points: &[SamplePoint],
    g: &[Vec<f64>],
    mags: &[f64],
    xi2: f64,
    noise_unit: f64,
) -> (f64, f64) {
    let mut value = 0.0;
    let mut floor = 0.0;
    for p in points {
        let b = p.base;
        match p.face {
            Face::Cap { sign } => {
                let e = g[b + 2][b + 2] - g[b][b] - g[b + 1][b + 1];
                let f = g[b + 5][b + 5] - g[b + 3][b + 3] - g[b + 4][b + 4];
                value += sign * p.weight * 0.5 * (e - f / xi2);
                let e_mag = mags[b] + mags[b + 1] + mags[b + 2];
                let f_mag = mags[b + 3] + mags[b + 4] + mags[b + 5];
                floor += p.weight * 0.5 * (e_mag + f_mag / xi2) * noise_unit;
            }
            Face::Wall { sign } => {
                let e = g[b + 1][b];
                let f = g[b + 3][b + 2];
                value += sign * p.weight * (e + f / xi2);
                let e_mag = 0.5 * (mags[b] + mags[b + 1]);
                let f_mag = 0.5 * (mags[b + 2] + mags[b + 3]);
                floor += p.weight * (e_mag + f_mag / xi2) * noise_unit;
            }
        }
    }
    (value, floor)
}

fn find_target(scene: &AxisymScene, label: &str) -> Result<(usize, CrossSection), StressError> {
    let mut hit = None;
    for (i, body) in scene.bodies().iter().enumerate() {
        if body.label == label {
            if hit.is_some() {
                return Err(StressError::AmbiguousBody(label.into()));
            }
            hit = Some((i, body.shape.cross_section()));
        }
    }
    hit.ok_or_else(|| StressError::UnknownBody(label.into()))
}

fn validate_surface_params(surface: &IntegrationSurface) -> Result<(), StressError> {
    let bad = |reason: String| Err(StressError::InvalidSurface { reason });
    if !surface.clearance_cells.is_finite() || surface.clearance_cells < MIN_CLEARANCE_CELLS {
        return bad(format!(
            "clearance must be at least {MIN_CLEARANCE_CELLS} cells, got {}",
            surface.clearance_cells
        ));
    }
    if !surface.spacing_cells.is_finite() || surface.spacing_cells <= 0.0 {
        return bad(format!(
            "sample spacing must be positive, got {}",
            surface.spacing_cells
        ));
    }
    if !surface.twin_gap_cells.is_finite() || surface.twin_gap_cells < 1.0 {
        return bad(format!(
            "twin gap must be at least one cell, got {}",
            surface.twin_gap_cells
        ));
    }
    Ok(())
}

/// The surface must enclose the target with working clearance on every face
/// and keep at least the minimum clearance to everything else. Distances are
/// between half-plane rectangles, so a surface may legitimately thread
/// through the hole of an annular body it does not enclose.
fn validate_surface(
    scene: &AxisymScene,
    target_idx: usize,
    rect: &SurfaceRect,
    delta: f64,
) -> Result<(), StressError> {
    let bad = |reason: String| Err(StressError::InvalidSurface { reason });
    if rect.r_out - rect.r_in <= 0.0 || rect.z_hi <= rect.z_lo {
        return bad(format!(
            "degenerate surface r [{:.4}, {:.4}], z [{:.4}, {:.4}]",
            rect.r_in, rect.r_out, rect.z_lo, rect.z_hi
        ));
    }
    let min_gap = MIN_CLEARANCE_CELLS * delta * (1.0 - 1e-9);
    for (i, body) in scene.bodies().iter().enumerate() {
        let b = body.shape.cross_section();
        if i == target_idx {
            let enclosed = b.r_hi + min_gap <= rect.r_out
                && b.z_lo - min_gap >= rect.z_lo
                && b.z_hi + min_gap <= rect.z_hi
                && (rect.r_in == 0.0 || rect.r_in + min_gap <= b.r_lo);
            if !enclosed {
                return bad(format!(
                    "target {:?} not enclosed with {MIN_CLEARANCE_CELLS} cells of clearance",
                    body.label
                ));
            }
        } else {
            let dr = (b.r_lo - rect.r_out).max(rect.r_in - b.r_hi).max(0.0);
            let dz = (b.z_lo - rect.z_hi).max(rect.z_lo - b.z_hi).max(0.0);
            if dr.hypot(dz) < min_gap {
                return bad(format!(
                    "body {:?} is within {MIN_CLEARANCE_CELLS} cells of the surface",
                    body.label
                ));
            }
        }
    }
    Ok(())
}

/// Twin surface for the closure defect: grown outward when there is room,
/// otherwise shrunk toward the body.
fn pick_twin(
    scene: &AxisymScene,
    target_idx: usize,
    main: &SurfaceRect,
    gap: f64,
    delta: f64,
) -> Result<SurfaceRect, StressError> {
    for candidate in [main.grown(gap), main.shrunk(gap)] {
        if validate_surface(scene, target_idx, &candidate, delta).is_ok() {
            return Ok(candidate);
        }
    }
    Err(StressError::InvalidSurface {
        reason: "no room for the closure-defect twin surface on either side".into(),
    })
}

/// Same scene with the target body's axial midpoint moved to `z`. The
/// declared domain grows if the move requires it; the margin is preserved.
fn scene_with_target_at(
    scene: &AxisymScene,
    target: &str,
    z: f64,
) -> Result<AxisymScene, StressError> {
    let (idx, cs) = find_target(scene, target)?;
    let mut bodies = scene.bodies().to_vec();
    bodies[idx].shape = bodies[idx].shape.shifted_z(z - 0.5 * (cs.z_lo + cs.z_hi));
    let moved = bodies[idx].shape.cross_section();
    let d = *scene.domain();
    let domain = Domain {
        r_max: d.r_max.max(moved.r_hi + d.margin),
        z_min: d.z_min.min(moved.z_lo - d.margin),
        z_max: d.z_max.max(moved.z_hi + d.margin),
        margin: d.margin,
    };
    Ok(build_scene(bodies, domain)?)
}

/// Conservative quadrature-error proxy: the same integrand samples fed to a
/// trapezoid rule in the compactified variable u = xi / (xi0 + xi), with a
/// rectangle closing u -> 0 and a linear decay to zero closing u -> 1. The
/// Gauss rule converges much faster, so the difference overestimates its
/// error rather than matching it.
fn quadrature_defect(samples: &[NodeSample], xi0: f64, gauss_value: f64) -> f64 {
    if samples.len() < 2 {
        return gauss_value.abs();
    }
    let mut trap = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for s in samples {
        let u = s.xi / (xi0 + s.xi);
        let jac = xi0 / ((1.0 - u) * (1.0 - u));
        let gu = -s.xi * s.xi * s.main / PI * jac;
        match prev {
            None => trap += u * gu,
            Some((u0, g0)) => trap += 0.5 * (u - u0) * (g0 + gu),
        }
        prev = Some((u, gu));
    }
    let (u_last, g_last) = prev.expect("at least two samples");
    trap += 0.5 * (1.0 - u_last) * g_last;
    (gauss_value - trap).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_scene, BodySpec, Domain, RasterSettings, Shape};
    use crate::materials::MaterialModel;
    use proptest::prelude::*;

    fn pec() -> MaterialModel {
        MaterialModel::perfect_conductor()
    }

    fn settings(resolution: f64, nodes: usize, xi0: f64) -> StressSettings {
        let mut s = StressSettings::for_scale(1.0).unwrap();
        s.solver.resolution = resolution;
        s.solver.raster = RasterSettings {
            min_cells_per_feature: 0.0,
        };
        s.solver.margin_floor_factor = 0.3;
        s.solver.margin_cap_factor = 0.4;
        s.quad = QuadratureScheme::new(nodes, xi0).unwrap();
        s
    }

    fn scene_of(bodies: Vec<BodySpec>) -> AxisymScene {
        let sections: Vec<_> = bodies.iter().map(|b| b.shape.cross_section()).collect();
        build_scene(bodies, Domain::enclosing(&sections, 0.25)).unwrap()
    }

    fn small_cylinder(z_center: f64) -> BodySpec {
        BodySpec::new(
            "probe",
            Shape::Cylinder {
                height: 0.4,
                width: 0.2,
                z_center,
            },
            pec(),
        )
    }

    fn disk(label: &str, radius: f64, thickness: f64, z_top: f64) -> BodySpec {
        BodySpec::new(
            label,
            Shape::Capsule {
                outer_radius: radius,
                inner_radius: 0.0,
                height: thickness,
                z_center: z_top - 0.5 * thickness,
            },
            pec(),
        )
    }

    fn holed_sheet(hole: f64, outer: f64) -> BodySpec {
        BodySpec::new(
            "plate",
            Shape::PlateWithHole {
                hole_radius: hole,
                outer_radius: outer,
                thickness: 0.0,
                z_mid: 0.0,
            },
            pec(),
        )
    }

    #[test]
    fn surface_validation_rejects_bad_inputs() {
        let scene = scene_of(vec![small_cylinder(0.5), disk("plate", 2.0, 0.25, 0.0)]);
        let s = settings(10.0, 8, 1.0);

        let err = force_z(&scene, "nobody", &IntegrationSurface::default(), &s).unwrap_err();
        assert!(matches!(err, StressError::UnknownBody(_)));

        let thin = IntegrationSurface {
            clearance_cells: 1.0,
            ..Default::default()
        };
        let err = force_z(&scene, "probe", &thin, &s).unwrap_err();
        assert!(matches!(err, StressError::InvalidSurface { .. }));

        // Clearance 3 cells of 0.1 reaches z = 0.0, the plate's top face.
        let err = force_z(&scene, "probe", &IntegrationSurface::default(), &s).unwrap_err();
        assert!(matches!(err, StressError::InvalidSurface { .. }));

        let twins = scene_of(vec![small_cylinder(0.5), small_cylinder(2.0)]);
        let err = force_z(&twins, "probe", &IntegrationSurface::default(), &s).unwrap_err();
        assert!(matches!(err, StressError::AmbiguousBody(_)));
    }

    #[test]
    fn isolated_body_feels_no_net_force() {
        let surface = IntegrationSurface {
            spacing_cells: 2.0,
            ..Default::default()
        };
        let s = settings(16.0, 12, 1.5);

        let lone = scene_of(vec![small_cylinder(0.0)]);
        let f_lone = force_z(&lone, "probe", &surface, &s).unwrap();

        let above = scene_of(vec![small_cylinder(0.55), disk("plate", 2.0, 0.25, 0.0)]);
        let f_above = force_z(&above, "probe", &surface, &s).unwrap();

        assert!(f_above.force < 0.0, "plate must attract: {:?}", f_above);
        assert!(
            f_lone.force.abs() < 1e-3 * f_above.force.abs(),
            "isolated {:.3e} vs plate {:.3e}",
            f_lone.force,
            f_above.force
        );
    }

    #[test]
    fn coaxial_disks_feel_the_mirror_pressure() {
        // Two thick conducting disks of radius five gaps: the force per area
        // approaches the ideal-mirror value pi^2/240 per gap^4.
        let gap = 1.0;
        let radius = 5.0;
        let scene = scene_of(vec![
            disk("upper", radius, 0.25, gap + 0.25),
            disk("lower", radius, 0.25, 0.0),
        ]);
        let mut s = settings(12.0, 16, 1.0);
        s.solver.margin_floor_factor = 0.15;
        s.solver.margin_cap_factor = 0.2;
        let surface = IntegrationSurface {
            spacing_cells: 3.0,
            ..Default::default()
        };
        let f = force_z(&scene, "upper", &surface, &s).unwrap();
        let want = -PI * PI / 240.0 * PI * radius * radius / gap.powi(4);
        assert!(
            (f.force - want).abs() <= 0.10 * want.abs(),
            "force {:.4}, mirror law {:.4}, budget {:?}",
            f.force,
            want,
            f.budget
        );
        assert!(f.force_newtons.is_none());
        assert_eq!(f.z_position, gap + 0.125);
    }

    #[test]
    fn holed_plate_repels_and_surfaces_agree() {
        let scene = scene_of(vec![
            BodySpec::new(
                "pillar",
                Shape::Cylinder {
                    height: 0.4,
                    width: 0.1,
                    z_center: 0.35,
                },
                pec(),
            ),
            holed_sheet(1.0, 3.0),
        ]);
        let s = settings(16.0, 12, 1.0);
        let near = IntegrationSurface {
            spacing_cells: 1.5,
            ..Default::default()
        };
        let far = IntegrationSurface {
            clearance_cells: 6.0,
            spacing_cells: 1.5,
            ..Default::default()
        };
        let f_near = force_z(&scene, "pillar", &near, &s).unwrap();
        let f_far = force_z(&scene, "pillar", &far, &s).unwrap();
        assert!(
            f_near.force > 0.0,
            "expected repulsion through the hole, got {:.3e}",
            f_near.force
        );
        let allowed = f_near.budget.closure_defect + f_far.budget.closure_defect;
        assert!(
            (f_near.force - f_far.force).abs() <= allowed,
            "surfaces disagree: {:.4e} vs {:.4e}, defects {:.2e} + {:.2e}",
            f_near.force,
            f_far.force,
            f_near.budget.closure_defect,
            f_far.budget.closure_defect
        );
    }

    #[test]
    fn uniform_plate_attracts_everywhere_and_maximize_reports_it() {
        let scene = scene_of(vec![small_cylinder(0.6), disk("plate", 2.0, 0.25, 0.0)]);
        let s = settings(12.0, 10, 1.0);
        let surface = IntegrationSurface {
            spacing_cells: 2.0,
            ..Default::default()
        };
        let best =
            maximize_force_z(&scene, "probe", (0.55, 1.1), 0.08, &surface, &s).unwrap();
        assert!(!best.repulsive, "uniform plate cannot repel: {:?}", best.force);
        assert!(best.force.force < 0.0);

        // Brute-force oracle: the best value must beat a plain z scan.
        for z in [0.6, 0.75, 0.9, 1.05] {
            let moved = scene_with_target_at(&scene, "probe", z).unwrap();
            let f = force_z(&moved, "probe", &surface, &s).unwrap();
            assert!(f.force < 0.0, "F({z}) = {:.3e}", f.force);
            assert!(best.force.force >= f.force - 1e-12);
        }
    }

    #[test]
    fn maximize_finds_the_repulsive_window() {
        let scene = scene_of(vec![
            BodySpec::new(
                "pillar",
                Shape::Cylinder {
                    height: 0.4,
                    width: 0.1,
                    z_center: 0.5,
                },
                pec(),
            ),
            holed_sheet(1.0, 3.0),
        ]);
        let s = settings(12.0, 10, 1.0);
        let surface = IntegrationSurface {
            spacing_cells: 2.0,
            ..Default::default()
        };
        let best =
            maximize_force_z(&scene, "pillar", (0.3, 0.9), 0.05, &surface, &s).unwrap();
        assert!(best.repulsive, "no repulsion found: {:?}", best.force);
        assert!(best.force.force > 0.0);
        assert!(best.z > 0.3 && best.z < 0.9);
        assert_eq!(best.force.z_position, best.z);
    }

    #[test]
    fn scaling_holds_for_conductors_and_rejects_dispersion() {
        let scene = scene_of(vec![small_cylinder(0.55), disk("plate", 1.2, 0.25, 0.0)]);
        let s = settings(16.0, 10, 1.0);
        let surface = IntegrationSurface {
            spacing_cells: 2.0,
            ..Default::default()
        };
        let check = force_vs_scale(&scene, "probe", 2.0, &surface, &s).unwrap();
        assert!(check.base.force < 0.0);
        assert!(
            (check.ratio - 1.0).abs() <= 0.05,
            "scaling ratio {:.6}",
            check.ratio
        );

        let dispersive = scene_of(vec![
            small_cylinder(0.55),
            BodySpec::new(
                "plate",
                Shape::Capsule {
                    outer_radius: 1.2,
                    inner_radius: 0.0,
                    height: 0.25,
                    z_center: -0.125,
                },
                MaterialModel::plasma_metal(1.37e16).unwrap(),
            ),
        ]);
        let err = force_vs_scale(&dispersive, "probe", 2.0, &surface, &s).unwrap_err();
        assert!(matches!(err, StressError::ScalingNotApplicable { .. }));
    }

    #[test]
    fn action_equals_reaction_between_disks() {
        let scene = scene_of(vec![
            disk("upper", 1.2, 0.25, 0.75),
            disk("lower", 1.2, 0.25, -0.5),
        ]);
        let s = settings(12.0, 12, 1.0);
        let surface = IntegrationSurface {
            spacing_cells: 2.0,
            ..Default::default()
        };
        let up = force_z(&scene, "upper", &surface, &s).unwrap();
        let down = force_z(&scene, "lower", &surface, &s).unwrap();
        assert!(up.force < 0.0 && down.force > 0.0);
        let residual = (up.force + down.force).abs();
        assert!(
            residual <= 2.0 * (up.budget.total() + down.budget.total()),
            "third law residual {:.3e}, budgets {:?} {:?}",
            residual,
            up.budget,
            down.budget
        );
        assert!(residual <= 0.05 * up.force.abs());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sample_weights_tile_every_face(
            r_in in prop_oneof![Just(0.0), 0.2f64..1.0],
            width in 0.3f64..2.0,
            z_lo in -1.0f64..1.0,
            span in 0.2f64..2.0,
            spacing in 0.6f64..4.0,
        ) {
            let rect = SurfaceRect { r_in, r_out: r_in + width, z_lo, z_hi: z_lo + span };
            let (points, probes) = sample_surface(&rect, 0.05, spacing);
            let mut cap_up = 0.0;
            let mut cap_down = 0.0;
            let mut wall_out = 0.0;
            let mut wall_in = 0.0;
            for p in &points {
                let expected = match p.face {
                    Face::Cap { .. } => CAP_PROBES,
                    Face::Wall { .. } => WALL_PROBES,
                };
                prop_assert!(p.base + expected <= probes.len());
                match p.face {
                    Face::Cap { sign } if sign > 0.0 => cap_up += p.weight,
                    Face::Cap { .. } => cap_down += p.weight,
                    Face::Wall { sign } if sign > 0.0 => wall_out += p.weight,
                    Face::Wall { .. } => wall_in += p.weight,
                }
            }
            let cap_area = PI * (rect.r_out * rect.r_out - rect.r_in * rect.r_in);
            prop_assert!((cap_up - cap_area).abs() < 1e-9 * cap_area);
            prop_assert!((cap_down - cap_area).abs() < 1e-9 * cap_area);
            let out_area = 2.0 * PI * rect.r_out * span;
            prop_assert!((wall_out - out_area).abs() < 1e-9 * out_area);
            if r_in > 0.0 {
                let in_area = 2.0 * PI * rect.r_in * span;
                prop_assert!((wall_in - in_area).abs() < 1e-9 * in_area);
            } else {
                prop_assert_eq!(wall_in, 0.0);
            }
        }
    }
}
