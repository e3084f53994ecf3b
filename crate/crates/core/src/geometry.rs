//! Axisymmetric scenes and their rasterization onto uniform (r, z) grids.
//!
//! Every supported body has a rectangular cross section in the (r, z)
//! half-plane, so overlap tests and volume fractions are exact. Conductors
//! rasterize to per-axis cell masks by cell-center membership; dielectrics
//! get exact volume-fraction averaging on boundary cells. A conductor whose
//! extent is thinner than one cell (a zero-thickness plate in particular)
//! snaps to a single cell layer instead of vanishing.

use crate::materials::{Axis, MaterialError, MaterialModel, ALL_AXES};
use crate::units::UnitSystem;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Closed rectangle in the (r, z) half-plane, the cross section of a solid
/// of revolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossSection {
    pub r_lo: f64,
    pub r_hi: f64,
    pub z_lo: f64,
    pub z_hi: f64,
}

impl CrossSection {
    /// True if the open interiors intersect. Touching faces do not count,
    /// which lets a post abut the bottom of the body it supports.
    pub fn interiors_overlap(&self, other: &CrossSection) -> bool {
        self.r_lo < other.r_hi
            && other.r_lo < self.r_hi
            && self.z_lo < other.z_hi
            && other.z_lo < self.z_hi
    }

    /// Volume of the solid of revolution, pi (r_hi^2 - r_lo^2) (z_hi - z_lo).
    pub fn volume(&self) -> f64 {
        std::f64::consts::PI
            * (self.r_hi * self.r_hi - self.r_lo * self.r_lo)
            * (self.z_hi - self.z_lo)
    }
}

/// Shape of one axisymmetric body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape {
    /// Annular plate: hole of radius `hole_radius`, outer rim at
    /// `outer_radius`, centered on the plane z = `z_mid`. `thickness` may be
    /// zero, meaning "as thin as the grid can render".
    PlateWithHole {
        hole_radius: f64,
        outer_radius: f64,
        thickness: f64,
        z_mid: f64,
    },
    /// Hollow cylindrical shell (solid when `inner_radius` = 0), centered at
    /// height `z_center`.
    Capsule {
        outer_radius: f64,
        inner_radius: f64,
        height: f64,
        z_center: f64,
    },
    /// Solid on-axis cylinder of diameter `width`.
    Cylinder {
        height: f64,
        width: f64,
        z_center: f64,
    },
    /// Solid on-axis cylinder spanning [z_bottom, z_top], used as a support.
    Post {
        width: f64,
        z_bottom: f64,
        z_top: f64,
    },
}

impl Shape {
    pub fn cross_section(&self) -> CrossSection {
        match *self {
            Shape::PlateWithHole {
                hole_radius,
                outer_radius,
                thickness,
                z_mid,
            } => CrossSection {
                r_lo: hole_radius,
                r_hi: outer_radius,
                z_lo: z_mid - 0.5 * thickness,
                z_hi: z_mid + 0.5 * thickness,
            },
            Shape::Capsule {
                outer_radius,
                inner_radius,
                height,
                z_center,
            } => CrossSection {
                r_lo: inner_radius,
                r_hi: outer_radius,
                z_lo: z_center - 0.5 * height,
                z_hi: z_center + 0.5 * height,
            },
            Shape::Cylinder {
                height,
                width,
                z_center,
            } => CrossSection {
                r_lo: 0.0,
                r_hi: 0.5 * width,
                z_lo: z_center - 0.5 * height,
                z_hi: z_center + 0.5 * height,
            },
            Shape::Post {
                width,
                z_bottom,
                z_top,
            } => CrossSection {
                r_lo: 0.0,
                r_hi: 0.5 * width,
                z_lo: z_bottom,
                z_hi: z_top,
            },
        }
    }

    fn validate(&self) -> Result<(), String> {
        match *self {
            Shape::PlateWithHole {
                hole_radius,
                outer_radius,
                thickness,
                ..
            } => {
                if hole_radius <= 0.0 || outer_radius <= hole_radius {
                    return Err(format!(
                        "need 0 < hole radius < outer radius, got {hole_radius} and {outer_radius}"
                    ));
                }
                if thickness < 0.0 {
                    return Err(format!("thickness must be >= 0, got {thickness}"));
                }
            }
            Shape::Capsule {
                outer_radius,
                inner_radius,
                height,
                ..
            } => {
                if inner_radius < 0.0 || outer_radius <= inner_radius {
                    return Err(format!(
                        "need 0 <= inner radius < outer radius, got {inner_radius} and {outer_radius}"
                    ));
                }
                if height <= 0.0 {
                    return Err(format!("height must be positive, got {height}"));
                }
            }
            Shape::Cylinder { height, width, .. } => {
                if height <= 0.0 || width <= 0.0 {
                    return Err(format!(
                        "height and width must be positive, got {height} and {width}"
                    ));
                }
            }
            Shape::Post {
                width,
                z_bottom,
                z_top,
            } => {
                if width <= 0.0 {
                    return Err(format!("width must be positive, got {width}"));
                }
                if z_top <= z_bottom {
                    return Err(format!(
                        "z_top must exceed z_bottom, got {z_bottom}..{z_top}"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Named finite dimensions that the grid must resolve.
    fn features(&self) -> Vec<(&'static str, f64)> {
        match *self {
            Shape::PlateWithHole {
                hole_radius,
                outer_radius,
                thickness,
                ..
            } => {
                let mut f = vec![
                    ("hole radius", hole_radius),
                    ("annular width", outer_radius - hole_radius),
                ];
                if thickness > 0.0 {
                    f.push(("plate thickness", thickness));
                }
                f
            }
            Shape::Capsule {
                outer_radius,
                inner_radius,
                height,
                ..
            } => {
                let radial = if inner_radius > 0.0 {
                    ("wall thickness", outer_radius - inner_radius)
                } else {
                    ("radius", outer_radius)
                };
                vec![radial, ("height", height)]
            }
            Shape::Cylinder { height, width, .. } => {
                vec![("width", width), ("height", height)]
            }
            Shape::Post {
                width,
                z_bottom,
                z_top,
            } => vec![("width", width), ("height", z_top - z_bottom)],
        }
    }

    fn scaled(&self, a: f64) -> Shape {
        match *self {
            Shape::PlateWithHole {
                hole_radius,
                outer_radius,
                thickness,
                z_mid,
            } => Shape::PlateWithHole {
                hole_radius: a * hole_radius,
                outer_radius: a * outer_radius,
                thickness: a * thickness,
                z_mid: a * z_mid,
            },
            Shape::Capsule {
                outer_radius,
                inner_radius,
                height,
                z_center,
            } => Shape::Capsule {
                outer_radius: a * outer_radius,
                inner_radius: a * inner_radius,
                height: a * height,
                z_center: a * z_center,
            },
            Shape::Cylinder {
                height,
                width,
                z_center,
            } => Shape::Cylinder {
                height: a * height,
                width: a * width,
                z_center: a * z_center,
            },
            Shape::Post {
                width,
                z_bottom,
                z_top,
            } => Shape::Post {
                width: a * width,
                z_bottom: a * z_bottom,
                z_top: a * z_top,
            },
        }
    }

    /// The same shape moved by `dz` along the axis.
    pub fn shifted_z(&self, dz: f64) -> Shape {
        let mut s = *self;
        match &mut s {
            Shape::PlateWithHole { z_mid, .. } => *z_mid += dz,
            Shape::Capsule { z_center, .. } | Shape::Cylinder { z_center, .. } => *z_center += dz,
            Shape::Post { z_bottom, z_top, .. } => {
                *z_bottom += dz;
                *z_top += dz;
            }
        }
        s
    }
}

/// One body: a labelled shape with a material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodySpec {
    pub label: String,
    pub shape: Shape,
    pub material: MaterialModel,
}

impl BodySpec {
    pub fn new(label: impl Into<String>, shape: Shape, material: MaterialModel) -> Self {
        Self {
            label: label.into(),
            shape,
            material,
        }
    }
}

/// Computational half-plane box with a required clearance between bodies and
/// the outer walls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub r_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub margin: f64,
}

impl Domain {
    /// Tight domain around the given cross sections with `margin` clearance
    /// on the wall sides (the axis r = 0 is a symmetry plane, not a wall).
    pub fn enclosing(sections: &[CrossSection], margin: f64) -> Domain {
        let mut r_max: f64 = 0.0;
        let mut z_lo = f64::INFINITY;
        let mut z_hi = f64::NEG_INFINITY;
        for s in sections {
            r_max = r_max.max(s.r_hi);
            z_lo = z_lo.min(s.z_lo);
            z_hi = z_hi.max(s.z_hi);
        }
        if sections.is_empty() {
            z_lo = 0.0;
            z_hi = 0.0;
        }
        Domain {
            r_max: r_max + margin,
            z_min: z_lo - margin,
            z_max: z_hi + margin,
            margin,
        }
    }
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("body {label:?}: {reason}")]
    InvalidShape { label: String, reason: String },
    #[error("bodies {a:?} and {b:?} overlap")]
    Overlap { a: String, b: String },
    #[error("body {label:?} violates the domain margin {margin} (domain r<={r_max}, z in {z_min}..{z_max})")]
    OutsideDomain {
        label: String,
        margin: f64,
        r_max: f64,
        z_min: f64,
        z_max: f64,
    },
    #[error("domain is degenerate: r_max={r_max}, z range {z_min}..{z_max}")]
    DegenerateDomain { r_max: f64, z_min: f64, z_max: f64 },
    #[error("scale factor must be positive and finite, got {0}")]
    BadScale(f64),
    #[error(
        "{feature} of body {label:?} spans {cells:.2} cells but at least {required} are required; \
         refine the grid or relax RasterSettings::min_cells_per_feature"
    )]
    ResolutionTooCoarse {
        label: String,
        feature: &'static str,
        cells: f64,
        required: f64,
    },
    #[error("grid spacing must be positive and finite, got resolution {0}")]
    BadResolution(f64),
    #[error(transparent)]
    Material(#[from] MaterialError),
}

/// Validated, immutable scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisymScene {
    bodies: Vec<BodySpec>,
    domain: Domain,
}

impl AxisymScene {
    pub fn bodies(&self) -> &[BodySpec] {
        &self.bodies
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    /// Same bodies under a different domain, re-validated.
    pub fn with_domain(&self, domain: Domain) -> Result<AxisymScene, GeometryError> {
        build_scene(self.bodies.clone(), domain)
    }

    /// Largest body dimension (radial extent or z span), the characteristic
    /// scale used for wall-placement rules. Zero for an empty scene.
    pub fn body_extent(&self) -> f64 {
        self.bodies
            .iter()
            .map(|b| {
                let s = b.shape.cross_section();
                s.r_hi.max(s.z_hi - s.z_lo)
            })
            .fold(0.0, f64::max)
    }

    pub fn is_dispersive(&self) -> bool {
        self.bodies.iter().any(|b| b.material.is_dispersive())
    }
}

/// Validates shapes, pairwise separation, and the domain margin.
pub fn build_scene(bodies: Vec<BodySpec>, domain: Domain) -> Result<AxisymScene, GeometryError> {
    let span = domain.z_max - domain.z_min;
    if !domain.r_max.is_finite()
        || domain.r_max <= 0.0
        || !span.is_finite()
        || span <= 0.0
        || domain.margin.is_nan()
        || domain.margin < 0.0
    {
        return Err(GeometryError::DegenerateDomain {
            r_max: domain.r_max,
            z_min: domain.z_min,
            z_max: domain.z_max,
        });
    }
    for body in &bodies {
        body.shape
            .validate()
            .map_err(|reason| GeometryError::InvalidShape {
                label: body.label.clone(),
                reason,
            })?;
    }
    for (n, a) in bodies.iter().enumerate() {
        for b in bodies.iter().skip(n + 1) {
            if a.shape
                .cross_section()
                .interiors_overlap(&b.shape.cross_section())
            {
                return Err(GeometryError::Overlap {
                    a: a.label.clone(),
                    b: b.label.clone(),
                });
            }
        }
    }
    for body in &bodies {
        let s = body.shape.cross_section();
        let fits = s.r_hi + domain.margin <= domain.r_max
            && s.z_lo - domain.margin >= domain.z_min
            && s.z_hi + domain.margin <= domain.z_max;
        if !fits {
            return Err(GeometryError::OutsideDomain {
                label: body.label.clone(),
                margin: domain.margin,
                r_max: domain.r_max,
                z_min: domain.z_min,
                z_max: domain.z_max,
            });
        }
    }
    Ok(AxisymScene { bodies, domain })
}

/// Multiplies every length in bodies and domain by `factor`.
pub fn scale_scene(scene: &AxisymScene, factor: f64) -> Result<AxisymScene, GeometryError> {
    if !factor.is_finite() || factor <= 0.0 {
        return Err(GeometryError::BadScale(factor));
    }
    let bodies = scene
        .bodies
        .iter()
        .map(|b| BodySpec {
            label: b.label.clone(),
            shape: b.shape.scaled(factor),
            material: b.material,
        })
        .collect();
    let d = scene.domain;
    build_scene(
        bodies,
        Domain {
            r_max: factor * d.r_max,
            z_min: factor * d.z_min,
            z_max: factor * d.z_max,
            margin: factor * d.margin,
        },
    )
}

/// Uniform grid over the domain. Cell (i, j) covers
/// r in [i d, (i+1) d], z in [z_min + j d, z_min + (j+1) d].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nr: usize,
    pub nz: usize,
    pub delta: f64,
    pub z_min: f64,
}

impl GridSpec {
    pub fn cell_count(&self) -> usize {
        self.nr * self.nz
    }

    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nr && j < self.nz);
        j * self.nr + i
    }

    pub fn r_node(&self, i: usize) -> f64 {
        i as f64 * self.delta
    }

    pub fn z_node(&self, j: usize) -> f64 {
        self.z_min + j as f64 * self.delta
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            (i as f64 + 0.5) * self.delta,
            self.z_min + (j as f64 + 0.5) * self.delta,
        )
    }

    /// Volume of the annular ring swept by cell (i, _).
    pub fn cell_volume(&self, i: usize) -> f64 {
        let r0 = self.r_node(i);
        let r1 = r0 + self.delta;
        std::f64::consts::PI * (r1 * r1 - r0 * r0) * self.delta
    }

    pub fn r_max(&self) -> f64 {
        self.nr as f64 * self.delta
    }

    pub fn z_max(&self) -> f64 {
        self.z_min + self.nz as f64 * self.delta
    }
}

/// Rasterization knobs.
#[derive(Debug, Clone, Copy)]
pub struct RasterSettings {
    /// Minimum number of cells across each named body feature. The default
    /// matches the documented contract; thin-conductor studies lower it
    /// deliberately.
    pub min_cells_per_feature: f64,
}

impl Default for RasterSettings {
    fn default() -> Self {
        Self {
            min_cells_per_feature: 8.0,
        }
    }
}

/// Per-body raster record holding the exact coverage fractions used for
/// dielectric averaging.
#[derive(Debug, Clone)]
struct RasterBody {
    material: MaterialModel,
    /// (cell, volume fraction) for every cell the exact cross section meets.
    coverage: Vec<(usize, f64)>,
}

/// Zero-thickness conductor plate restricted to a single grid node plane.
///
/// An ideal infinitely thin conductor constrains only the tangential
/// electric field on its surface; it has no volume and no response to a
/// purely normal field. Rendering such a plate as a one-cell slab would
/// instead produce a spurious O(delta) normal-field response through the
/// charge double layer on the slab faces, which is exactly the coupling the
/// hole symmetry argument relies on being absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SheetMask {
    /// Index of the z-node plane the sheet lies on.
    pub j_node: usize,
    /// Inclusive radial node span covered by the annulus.
    pub i_lo: usize,
    pub i_hi: usize,
    /// Tangential components the material actually shorts out.
    pub conduct_radial: bool,
    pub conduct_azimuthal: bool,
}

/// Grid-sampled scene: frequency-independent masks plus enough information
/// to evaluate permittivity at any imaginary frequency.
#[derive(Debug, Clone)]
pub struct PermittivityField {
    grid: GridSpec,
    bodies: Vec<RasterBody>,
    conductor: [Vec<bool>; 3],
    occupied: Vec<bool>,
    sheets: Vec<SheetMask>,
    dispersive: bool,
}

/// Dense permittivity values at one imaginary frequency, per axis, cell-major.
#[derive(Debug, Clone)]
pub struct EpsSample {
    pub eps: [Vec<f64>; 3],
}

impl PermittivityField {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Per-cell conductor mask for the given field axis.
    pub fn conductor_mask(&self, axis: Axis) -> &[bool] {
        &self.conductor[axis.index()]
    }

    /// True when no body touches the cell at all.
    pub fn is_vacuum_cell(&self, i: usize, j: usize) -> bool {
        !self.occupied[self.grid.cell_index(i, j)]
    }

    /// Zero-thickness conductor planes, if the scene has any.
    pub fn sheets(&self) -> &[SheetMask] {
        &self.sheets
    }

    pub fn is_dispersive(&self) -> bool {
        self.dispersive
    }

    /// Dense per-axis permittivity at internal frequency `xi`. Conductor
    /// cells keep eps = 1 here; the solver removes their unknowns via the
    /// masks instead of weighting them.
    pub fn sample_eps(
        &self,
        xi: f64,
        units: Option<&UnitSystem>,
    ) -> Result<EpsSample, MaterialError> {
        let n = self.grid.cell_count();
        let mut eps = [vec![1.0; n], vec![1.0; n], vec![1.0; n]];
        for body in &self.bodies {
            let perm = body.material.permittivity_at(xi, units)?;
            for axis in ALL_AXES {
                if let Some(value) = perm.axis(axis).finite() {
                    if value != 1.0 {
                        let dst = &mut eps[axis.index()];
                        for &(cell, frac) in &body.coverage {
                            dst[cell] += frac * (value - 1.0);
                        }
                    }
                }
            }
        }
        Ok(EpsSample { eps })
    }

    /// Total masked volume for the given axis, an oracle hook for tests.
    pub fn masked_volume(&self, axis: Axis) -> f64 {
        let mask = &self.conductor[axis.index()];
        let mut vol = 0.0;
        for j in 0..self.grid.nz {
            for i in 0..self.grid.nr {
                if mask[self.grid.cell_index(i, j)] {
                    vol += self.grid.cell_volume(i);
                }
            }
        }
        vol
    }
}

/// Samples the scene onto a uniform grid with `resolution` cells per unit
/// length.
pub fn rasterize(
    scene: &AxisymScene,
    resolution: f64,
    settings: RasterSettings,
) -> Result<PermittivityField, GeometryError> {
    if !resolution.is_finite() || resolution <= 0.0 {
        return Err(GeometryError::BadResolution(resolution));
    }
    let delta = 1.0 / resolution;
    let d = scene.domain;
    let nr = ((d.r_max / delta).ceil() as usize).max(1);
    let nz = (((d.z_max - d.z_min) / delta).ceil() as usize).max(1);
    let grid = GridSpec {
        nr,
        nz,
        delta,
        z_min: d.z_min,
    };

    for body in &scene.bodies {
        for (feature, size) in body.shape.features() {
            let cells = size / delta;
            if cells + 1e-9 < settings.min_cells_per_feature {
                return Err(GeometryError::ResolutionTooCoarse {
                    label: body.label.clone(),
                    feature,
                    cells,
                    required: settings.min_cells_per_feature,
                });
            }
        }
    }

    let n = grid.cell_count();
    let mut conductor = [vec![false; n], vec![false; n], vec![false; n]];
    let mut occupied = vec![false; n];
    let mut sheets = Vec::new();
    let mut bodies = Vec::with_capacity(scene.bodies.len());

    for body in &scene.bodies {
        let exact = body.shape.cross_section();

        // Conductors with no z extent become tangential sheets on the
        // nearest node plane instead of claiming cells.
        if body.material.has_conductor_axis() && exact.z_hi == exact.z_lo {
            if let Some(sheet) = sheet_mask(&exact, &grid, &body.material) {
                sheets.push(sheet);
            }
            bodies.push(RasterBody {
                material: body.material,
                coverage: Vec::new(),
            });
            continue;
        }

        let snapped = snap_for_membership(&exact, &grid, body.material.has_conductor_axis());

        let member_cells = cells_with_center_inside(&snapped, &grid);
        let coverage = coverage_fractions(&exact, &grid);

        let axes = body.material.conductor_axes();
        for axis in ALL_AXES {
            if axes[axis.index()] {
                for &cell in &member_cells {
                    conductor[axis.index()][cell] = true;
                }
            }
        }
        for &cell in &member_cells {
            occupied[cell] = true;
        }
        for &(cell, _) in &coverage {
            occupied[cell] = true;
        }

        bodies.push(RasterBody {
            material: body.material,
            coverage,
        });
    }

    Ok(PermittivityField {
        grid,
        dispersive: scene.is_dispersive(),
        bodies,
        conductor,
        occupied,
        sheets,
    })
}

fn sheet_mask(
    exact: &CrossSection,
    grid: &GridSpec,
    material: &MaterialModel,
) -> Option<SheetMask> {
    let axes = material.conductor_axes();
    let (conduct_radial, conduct_azimuthal) = (axes[0], axes[1]);
    if !(conduct_radial || conduct_azimuthal) || exact.r_hi <= exact.r_lo {
        return None;
    }
    let d = grid.delta;
    let j_node = (((exact.z_lo - grid.z_min) / d).round().max(0.0) as usize).min(grid.nz);
    let i_lo = ((exact.r_lo / d - 1e-9).ceil().max(0.0)) as usize;
    let i_hi = ((exact.r_hi / d + 1e-9).floor() as usize).min(grid.nr);
    (i_lo <= i_hi).then_some(SheetMask {
        j_node,
        i_lo,
        i_hi,
        conduct_radial,
        conduct_azimuthal,
    })
}

/// Expands a conductor cross section that would otherwise contain no cell
/// centers so that it claims exactly one cell row/column, the one nearest its
/// midline. Dielectrics are left exact: their coverage fractions already
/// degrade gracefully.
fn snap_for_membership(exact: &CrossSection, grid: &GridSpec, conductor: bool) -> CrossSection {
    let mut s = *exact;
    if !conductor {
        return s;
    }
    let centers_r = count_centers(s.r_lo, s.r_hi, 0.0, grid.delta, grid.nr);
    if centers_r == 0 {
        let mid = 0.5 * (s.r_lo + s.r_hi);
        let i = nearest_cell(mid, 0.0, grid.delta, grid.nr);
        s.r_lo = grid.r_node(i);
        s.r_hi = grid.r_node(i) + grid.delta;
    }
    let centers_z = count_centers(s.z_lo, s.z_hi, grid.z_min, grid.delta, grid.nz);
    if centers_z == 0 {
        let mid = 0.5 * (s.z_lo + s.z_hi);
        let j = nearest_cell(mid, grid.z_min, grid.delta, grid.nz);
        s.z_lo = grid.z_node(j);
        s.z_hi = grid.z_node(j) + grid.delta;
    }
    s
}

fn count_centers(lo: f64, hi: f64, origin: f64, delta: f64, count: usize) -> usize {
    (0..count)
        .filter(|&k| {
            let c = origin + (k as f64 + 0.5) * delta;
            c >= lo && c <= hi
        })
        .count()
}

fn nearest_cell(coord: f64, origin: f64, delta: f64, count: usize) -> usize {
    let k = ((coord - origin) / delta - 0.5).round();
    (k.max(0.0) as usize).min(count - 1)
}

fn cells_with_center_inside(s: &CrossSection, grid: &GridSpec) -> Vec<usize> {
    let mut cells = Vec::new();
    for j in 0..grid.nz {
        let zc = grid.z_min + (j as f64 + 0.5) * grid.delta;
        if zc < s.z_lo || zc > s.z_hi {
            continue;
        }
        for i in 0..grid.nr {
            let rc = (i as f64 + 0.5) * grid.delta;
            if rc >= s.r_lo && rc <= s.r_hi {
                cells.push(grid.cell_index(i, j));
            }
        }
    }
    cells
}

/// Exact volume fraction of each cell covered by the cross section, using
/// the annular measure r dr dz.
fn coverage_fractions(s: &CrossSection, grid: &GridSpec) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    let d = grid.delta;
    let j_lo = (((s.z_lo - grid.z_min) / d).floor().max(0.0)) as usize;
    let j_hi = ((s.z_hi - grid.z_min) / d).ceil().max(0.0) as usize;
    let i_lo = ((s.r_lo / d).floor().max(0.0)) as usize;
    let i_hi = (s.r_hi / d).ceil().max(0.0) as usize;
    for j in j_lo..j_hi.min(grid.nz) {
        let z0 = grid.z_node(j);
        let dz_cov = (s.z_hi.min(z0 + d) - s.z_lo.max(z0)).max(0.0);
        if dz_cov <= 0.0 {
            continue;
        }
        for i in i_lo..i_hi.min(grid.nr) {
            let r0 = grid.r_node(i);
            let ra = s.r_lo.max(r0);
            let rb = s.r_hi.min(r0 + d);
            if rb <= ra {
                continue;
            }
            let frac = ((rb * rb - ra * ra) / ((r0 + d) * (r0 + d) - r0 * r0)) * (dz_cov / d);
            if frac > 0.0 {
                out.push((grid.cell_index(i, j), frac));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pec() -> MaterialModel {
        MaterialModel::perfect_conductor()
    }

    fn plate(thickness: f64) -> BodySpec {
        BodySpec::new(
            "plate",
            Shape::PlateWithHole {
                hole_radius: 1.0,
                outer_radius: 8.0,
                thickness,
                z_mid: 0.0,
            },
            pec(),
        )
    }

    fn needle() -> BodySpec {
        BodySpec::new(
            "needle",
            Shape::Cylinder {
                height: 0.64,
                width: 0.04,
                z_center: 0.52,
            },
            pec(),
        )
    }

    fn wide_domain() -> Domain {
        Domain {
            r_max: 10.0,
            z_min: -2.0,
            z_max: 3.0,
            margin: 1.0,
        }
    }

    #[test]
    fn reference_scene_builds() {
        let scene = build_scene(vec![plate(0.0), needle()], wide_domain()).unwrap();
        assert_eq!(scene.bodies().len(), 2);
        assert_relative_eq!(scene.body_extent(), 8.0);
    }

    #[test]
    fn truncated_plate_with_capsule_builds() {
        let capsule = BodySpec::new(
            "capsule",
            Shape::Capsule {
                outer_radius: 0.8,
                inner_radius: 0.0,
                height: 0.5,
                z_center: 0.6,
            },
            pec(),
        );
        let plate = BodySpec::new(
            "plate",
            Shape::PlateWithHole {
                hole_radius: 1.0,
                outer_radius: 1.6,
                thickness: 0.04,
                z_mid: 0.0,
            },
            pec(),
        );
        let domain = Domain {
            r_max: 4.0,
            z_min: -2.0,
            z_max: 3.0,
            margin: 1.0,
        };
        build_scene(vec![plate, capsule], domain).unwrap();
    }

    #[test]
    fn overlapping_capsules_conflict() {
        let a = BodySpec::new(
            "a",
            Shape::Capsule {
                outer_radius: 0.8,
                inner_radius: 0.0,
                height: 0.5,
                z_center: 0.0,
            },
            pec(),
        );
        let b = BodySpec::new(
            "b",
            Shape::Capsule {
                outer_radius: 0.5,
                inner_radius: 0.2,
                height: 0.4,
                z_center: 0.2,
            },
            pec(),
        );
        let err = build_scene(vec![a, b], wide_domain()).unwrap_err();
        match err {
            GeometryError::Overlap { a, b } => {
                assert_eq!((a.as_str(), b.as_str()), ("a", "b"));
            }
            other => panic!("expected overlap error, got {other}"),
        }
    }

    #[test]
    fn touching_faces_do_not_conflict() {
        let capsule = BodySpec::new(
            "capsule",
            Shape::Capsule {
                outer_radius: 0.8,
                inner_radius: 0.0,
                height: 0.5,
                z_center: 0.6,
            },
            pec(),
        );
        let post = BodySpec::new(
            "post",
            Shape::Post {
                width: 0.2,
                z_bottom: -0.5,
                z_top: 0.35,
            },
            MaterialModel::parse("silica").unwrap(),
        );
        build_scene(vec![capsule, post], wide_domain()).unwrap();
    }

    #[test]
    fn margin_violation_is_reported() {
        let domain = Domain {
            r_max: 8.5,
            z_min: -2.0,
            z_max: 3.0,
            margin: 1.0,
        };
        assert!(matches!(
            build_scene(vec![plate(0.0)], domain),
            Err(GeometryError::OutsideDomain { .. })
        ));
    }

    #[test]
    fn scaling_is_linear() {
        let scene = build_scene(vec![plate(0.04)], wide_domain()).unwrap();
        let scaled = scale_scene(&scene, 2.0).unwrap();
        match scaled.bodies()[0].shape {
            Shape::PlateWithHole {
                hole_radius,
                outer_radius,
                thickness,
                ..
            } => {
                assert_relative_eq!(hole_radius, 2.0);
                assert_relative_eq!(outer_radius, 16.0);
                assert_relative_eq!(thickness, 0.08);
            }
            _ => panic!("shape kind changed under scaling"),
        }
        assert_relative_eq!(scaled.domain().r_max, 20.0);
        assert!(scale_scene(&scene, 0.0).is_err());
    }

    #[test]
    fn zero_thickness_plate_becomes_sheet() {
        let scene = build_scene(vec![plate(0.0)], wide_domain()).unwrap();
        let field = rasterize(&scene, 8.0, RasterSettings::default()).unwrap();
        let grid = *field.grid();
        // No cells claimed: the plate is a tangential sheet on a node plane.
        for axis in ALL_AXES {
            assert!(field.conductor_mask(axis).iter().all(|&m| !m));
        }
        assert_eq!(field.sheets().len(), 1);
        let sheet = field.sheets()[0];
        assert!((grid.z_node(sheet.j_node) - 0.0).abs() <= 0.5 * grid.delta);
        assert!(sheet.conduct_radial && sheet.conduct_azimuthal);
        assert_eq!(sheet.i_lo, 8);
        assert_eq!(sheet.i_hi, 64);
        for j in 0..grid.nz {
            for i in 0..grid.nr {
                assert!(field.is_vacuum_cell(i, j), "sheet claimed cell ({i},{j})");
            }
        }
    }

    #[test]
    fn hole_cells_stay_unmasked() {
        let scene = build_scene(vec![plate(0.04)], wide_domain()).unwrap();
        let settings = RasterSettings {
            min_cells_per_feature: 0.0,
        };
        let field = rasterize(&scene, 16.0, settings).unwrap();
        let grid = *field.grid();
        let mask = field.conductor_mask(Axis::Axial);
        let mut masked_any = false;
        for j in 0..grid.nz {
            for i in 0..grid.nr {
                let (rc, _) = grid.cell_center(i, j);
                masked_any |= mask[grid.cell_index(i, j)];
                if rc < 1.0 {
                    assert!(!mask[grid.cell_index(i, j)], "hole cell ({i},{j}) masked");
                }
            }
        }
        assert!(masked_any, "plate produced no mask at all");
    }

    #[test]
    fn sheet_with_axial_only_conduction_vanishes() {
        // Zero thickness with conduction only along z has nothing to short
        // out in its own plane.
        let body = BodySpec::new(
            "film",
            Shape::PlateWithHole {
                hole_radius: 1.0,
                outer_radius: 8.0,
                thickness: 0.0,
                z_mid: 0.0,
            },
            MaterialModel::parse("uniaxial-pec-z").unwrap(),
        );
        let scene = build_scene(vec![body], wide_domain()).unwrap();
        let field = rasterize(&scene, 8.0, RasterSettings::default()).unwrap();
        assert!(field.sheets().is_empty());
        for axis in ALL_AXES {
            assert!(field.conductor_mask(axis).iter().all(|&m| !m));
        }
    }

    #[test]
    fn conductor_capsule_volume_near_analytic() {
        let capsule = BodySpec::new(
            "capsule",
            Shape::Capsule {
                outer_radius: 0.8,
                inner_radius: 0.0,
                height: 0.5,
                z_center: 0.6,
            },
            pec(),
        );
        let scene = build_scene(vec![capsule], wide_domain()).unwrap();
        let field = rasterize(&scene, 40.0, RasterSettings::default()).unwrap();
        let exact = std::f64::consts::PI * 0.8 * 0.8 * 0.5;
        let masked = field.masked_volume(Axis::Radial);
        assert!(
            (masked - exact).abs() <= 0.05 * exact,
            "masked {masked} vs exact {exact}"
        );
    }

    #[test]
    fn dielectric_coverage_volume_is_exact() {
        let post = BodySpec::new(
            "post",
            Shape::Post {
                width: 0.31,
                z_bottom: -0.47,
                z_top: 0.53,
            },
            MaterialModel::parse("silica").unwrap(),
        );
        let scene = build_scene(vec![post], wide_domain()).unwrap();
        let field = rasterize(&scene, 32.0, RasterSettings::default()).unwrap();
        let grid = *field.grid();
        let sample = field.sample_eps(1.0, None).unwrap();
        // Sum of fraction-weighted cell volumes recovers the body volume.
        let mut vol = 0.0;
        for j in 0..grid.nz {
            for i in 0..grid.nr {
                let e = sample.eps[Axis::Axial.index()][grid.cell_index(i, j)];
                vol += (e - 1.0) / (2.25 - 1.0) * grid.cell_volume(i);
            }
        }
        let exact = std::f64::consts::PI * 0.155 * 0.155 * 1.0;
        assert_relative_eq!(vol, exact, max_relative = 1e-9);
    }

    #[test]
    fn uniaxial_capsule_masks_only_axial_field() {
        let capsule = BodySpec::new(
            "capsule",
            Shape::Capsule {
                outer_radius: 0.8,
                inner_radius: 0.0,
                height: 0.5,
                z_center: 0.6,
            },
            MaterialModel::parse("uniaxial-pec-z").unwrap(),
        );
        let scene = build_scene(vec![capsule], wide_domain()).unwrap();
        let field = rasterize(&scene, 16.0, RasterSettings::default()).unwrap();
        assert!(field.conductor_mask(Axis::Axial).iter().any(|&m| m));
        assert!(field.conductor_mask(Axis::Radial).iter().all(|&m| !m));
        assert!(field.conductor_mask(Axis::Azimuthal).iter().all(|&m| !m));
    }

    #[test]
    fn coarse_resolution_names_the_feature() {
        let scene = build_scene(vec![needle(), plate(0.0)], wide_domain()).unwrap();
        let err = rasterize(&scene, 16.0, RasterSettings::default()).unwrap_err();
        match err {
            GeometryError::ResolutionTooCoarse { label, feature, .. } => {
                assert_eq!(label, "needle");
                assert_eq!(feature, "width");
            }
            other => panic!("expected resolution error, got {other}"),
        }
    }

    #[test]
    fn thin_conductor_snaps_to_one_column() {
        // Width under one cell: claims the on-axis column instead of nothing.
        let scene = build_scene(vec![needle()], wide_domain()).unwrap();
        let settings = RasterSettings {
            min_cells_per_feature: 0.0,
        };
        let field = rasterize(&scene, 24.0, settings).unwrap();
        let grid = *field.grid();
        let mask = field.conductor_mask(Axis::Axial);
        let masked_columns: std::collections::BTreeSet<usize> = (0..grid.nz)
            .flat_map(|j| (0..grid.nr).map(move |i| (i, j)))
            .filter(|&(i, j)| mask[grid.cell_index(i, j)])
            .map(|(i, _)| i)
            .collect();
        assert_eq!(masked_columns.into_iter().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn empty_scene_rasterizes_to_vacuum() {
        let scene = build_scene(vec![], wide_domain()).unwrap();
        let field = rasterize(&scene, 8.0, RasterSettings::default()).unwrap();
        let grid = *field.grid();
        assert!(field.conductor_mask(Axis::Radial).iter().all(|&m| !m));
        assert!((0..grid.nr).all(|i| (0..grid.nz).all(|j| field.is_vacuum_cell(i, j))));
        let sample = field.sample_eps(0.5, None).unwrap();
        assert!(sample.eps[0].iter().all(|&e| e == 1.0));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_capsule(idx: usize) -> impl Strategy<Value = BodySpec> {
            (0.1f64..1.5, 0.0f64..0.8, 0.1f64..1.2, -1.0f64..1.5).prop_map(
                move |(outer_extra, inner, height, z_center)| {
                    BodySpec::new(
                        format!("capsule-{idx}"),
                        Shape::Capsule {
                            outer_radius: inner + outer_extra,
                            inner_radius: inner,
                            height,
                            z_center,
                        },
                        MaterialModel::perfect_conductor(),
                    )
                },
            )
        }

        proptest! {
            #[test]
            fn validation_is_order_independent(
                a in arb_capsule(0),
                b in arb_capsule(1),
                c in arb_capsule(2),
            ) {
                let domain = Domain { r_max: 6.0, z_min: -4.0, z_max: 4.0, margin: 1.0 };
                let fwd = build_scene(vec![a.clone(), b.clone(), c.clone()], domain).is_ok();
                let rev = build_scene(vec![c, b, a], domain).is_ok();
                prop_assert_eq!(fwd, rev);
            }

            #[test]
            fn refinement_masks_nest_up_to_one_layer(body in arb_capsule(0)) {
                let domain = Domain { r_max: 6.0, z_min: -4.0, z_max: 4.0, margin: 1.0 };
                let scene = build_scene(vec![body], domain).unwrap();
                let settings = RasterSettings { min_cells_per_feature: 0.0 };
                let coarse = rasterize(&scene, 8.0, settings).unwrap();
                let fine = rasterize(&scene, 16.0, settings).unwrap();
                let cg = *coarse.grid();
                let fg = *fine.grid();
                let cmask = coarse.conductor_mask(Axis::Radial);
                let fmask = fine.conductor_mask(Axis::Radial);
                for j in 0..fg.nz {
                    for i in 0..fg.nr {
                        if !fmask[fg.cell_index(i, j)] {
                            continue;
                        }
                        let (ci, cj) = (i / 2, j / 2);
                        // Fine-mask cells must sit inside the coarse mask
                        // within a one-cell halo.
                        let mut hit = false;
                        for dj in -1i64..=1 {
                            for di in -1i64..=1 {
                                let ii = ci as i64 + di;
                                let jj = cj as i64 + dj;
                                if ii >= 0
                                    && jj >= 0
                                    && (ii as usize) < cg.nr
                                    && (jj as usize) < cg.nz
                                    && cmask[cg.cell_index(ii as usize, jj as usize)]
                                {
                                    hit = true;
                                }
                            }
                        }
                        prop_assert!(hit, "fine mask cell ({i},{j}) escapes coarse halo");
                    }
                }
            }
        }
    }
}
