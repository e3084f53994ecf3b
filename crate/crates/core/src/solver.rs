//! Imaginary-frequency vector Maxwell solves on the staggered (r, z) grid.
//!
//! For each azimuthal mode m the operator is the energy form of
//! (curl curl + xi^2 eps) restricted to that mode. The azimuthal field enters
//! through the substitution E~_phi = i E_phi, which makes every per-mode
//! system real, symmetric, and positive definite, so a sparse Cholesky
//! factorization solves all right-hand sides of a mode at once.
//!
//! Grid staggering: E_r lives at (r_{i+1/2}, z_j), E_z at (r_i, z_{j+1/2}),
//! E~_phi at nodes (r_i, z_j). Curl components live on the dual lattice:
//! X_r at (r_i, z_{j+1/2}), X_phi at cell centers, X_z at (r_{i+1/2}, z_j).
//! The domain boundary is a hard conducting wall (tangential unknowns
//! removed); fields decay like e^(-xi d), so walls placed a few 1/xi away
//! are exponentially harmless.
//!
//! Coincident-point Green's values are always taken as full-minus-vacuum on
//! the same grid, which cancels the discrete self-energy exactly. Magnetic
//! correlators never need their own operator: the discrete identity
//! G^M = (1/xi^2)[V_f^{-1} - K G^E K^T] turns them into curl-row probes of
//! the electric solve, and the local V_f^{-1} term drops out of the
//! same-grid subtraction.

use crate::geometry::{
    rasterize, AxisymScene, CrossSection, Domain, EpsSample, GeometryError, GridSpec,
    PermittivityField, RasterSettings, SheetMask,
};
use crate::materials::{Axis, MaterialError};
use crate::units::UnitSystem;
use faer::linalg::solvers::Solve;
use faer::sparse::linalg::matmul::sparse_dense_matmul;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Accum, Mat, Par, Side};
use std::sync::Once;
use thiserror::Error;

/// Normalization of the azimuthal mode decomposition: a physical
/// Green's-function component is (1/2pi) times the degeneracy-folded sum of
/// per-mode values.
pub const MODE_GREEN_PREFACTOR: f64 = 1.0 / (2.0 * std::f64::consts::PI);

/// Safety factor on the residual contract when bounding how accurately a
/// full-minus-vacuum sample can cancel.
pub(crate) const SAMPLE_NOISE_FACTOR: f64 = 8.0;

fn ensure_sequential() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| faer::set_global_parallelism(Par::Seq));
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("grid {nr} x {nz} needs {unknowns} unknowns, over the budget of {budget}; coarsen the resolution or shrink the domain")]
    ResourceBudget {
        nr: usize,
        nz: usize,
        unknowns: usize,
        budget: usize,
    },
    #[error("invalid source at (r={r}, z={z}): {reason}")]
    InvalidSource { r: f64, z: f64, reason: String },
    #[error("factorization failed for xi={xi}, m={m}: {detail}")]
    Factorization { xi: f64, m: usize, detail: String },
    #[error("solve residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    Numerics { residual: f64, tol: f64 },
    #[error("mode sum not converged by m={m_cap} (last folded term {last_term:.3e})")]
    ModeSumTruncated { m_cap: usize, last_term: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Material(#[from] MaterialError),
}

/// Discretization and wall-placement knobs shared by all engines.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    /// Cells per unit length.
    pub resolution: f64,
    pub raster: RasterSettings,
    /// Wall distance in units of 1/xi.
    pub wall_coeff: f64,
    /// Lower clamp of the wall margin, in units of the body extent.
    pub margin_floor_factor: f64,
    /// Upper clamp of the wall margin, in units of the body extent.
    pub margin_cap_factor: f64,
    /// Hard stop before runaway grids exhaust memory.
    pub max_unknowns: usize,
    /// Relative residual bound checked after every factorized solve.
    pub residual_tol: f64,
    /// Physical unit anchor, needed only by dispersive materials.
    pub units: Option<UnitSystem>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            resolution: 24.0,
            raster: RasterSettings::default(),
            wall_coeff: 3.0,
            margin_floor_factor: 2.0,
            margin_cap_factor: 6.0,
            max_unknowns: 1_500_000,
            residual_tol: 1e-8,
            units: None,
        }
    }
}

/// What a probe couples to: an electric field component, or the curl row
/// used for magnetic correlators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeKind {
    Field(Axis),
    Flux(Axis),
}

/// Point sampler at (r, z); doubles as a source descriptor (the discrete
/// source vector is the sampling stencil, which keeps source and observation
/// adjoint-consistent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub r: f64,
    pub z: f64,
    pub kind: ProbeKind,
}

impl Probe {
    pub fn field(axis: Axis, r: f64, z: f64) -> Self {
        Probe {
            r,
            z,
            kind: ProbeKind::Field(axis),
        }
    }

    pub fn flux(axis: Axis, r: f64, z: f64) -> Self {
        Probe {
            r,
            z,
            kind: ProbeKind::Flux(axis),
        }
    }
}

/// Index maps from edge lattices to packed unknowns, with walls, axis rules,
/// and conductor masks already applied.
#[derive(Debug, Clone)]
struct ModeLayout {
    nr: usize,
    nz: usize,
    er: Vec<i32>,
    ez: Vec<i32>,
    ephi: Vec<i32>,
    n_unknowns: usize,
}

const ABSENT: i32 = -1;

impl ModeLayout {
    fn build(
        grid: &GridSpec,
        m: usize,
        masks: Option<[&[bool]; 3]>,
        sheets: &[SheetMask],
    ) -> ModeLayout {
        let (nr, nz) = (grid.nr, grid.nz);
        let cell = |i: usize, j: usize| j * nr + i;
        let masked = |axis: usize, i: usize, j: usize| -> bool {
            masks.is_some_and(|mk| mk[axis][cell(i, j)])
        };
        let on_sheet_r = |i: usize, j: usize| {
            sheets
                .iter()
                .any(|s| s.conduct_radial && s.j_node == j && i >= s.i_lo && i < s.i_hi)
        };
        let on_sheet_phi = |i: usize, j: usize| {
            sheets
                .iter()
                .any(|s| s.conduct_azimuthal && s.j_node == j && i >= s.i_lo && i <= s.i_hi)
        };

        let mut er = vec![ABSENT; nr * (nz + 1)];
        let mut ez = vec![ABSENT; (nr + 1) * nz];
        let mut ephi = vec![ABSENT; (nr + 1) * (nz + 1)];
        let mut next = 0i32;

        // E_r at (r_{i+1/2}, z_j): z-wall rows removed; masked if either
        // adjacent cell is a conductor for the radial axis, or the edge lies
        // on a conducting sheet.
        for j in 1..nz {
            for i in 0..nr {
                if masked(0, i, j - 1) || masked(0, i, j) || on_sheet_r(i, j) {
                    continue;
                }
                er[j * nr + i] = next;
                next += 1;
            }
        }
        // E_z at (r_i, z_{j+1/2}): outer-wall column removed; the on-axis
        // column survives only for m = 0.
        for j in 0..nz {
            let i_lo = if m == 0 { 0 } else { 1 };
            for i in i_lo..nr {
                let hit = if i == 0 {
                    masked(2, 0, j)
                } else {
                    masked(2, i - 1, j) || masked(2, i, j)
                };
                if hit {
                    continue;
                }
                ez[j * (nr + 1) + i] = next;
                next += 1;
            }
        }
        // E~_phi at nodes: axis and wall columns removed for every mode.
        for j in 1..nz {
            for i in 1..nr {
                let hit = masked(1, i - 1, j - 1)
                    || masked(1, i, j - 1)
                    || masked(1, i - 1, j)
                    || masked(1, i, j)
                    || on_sheet_phi(i, j);
                if hit {
                    continue;
                }
                ephi[j * (nr + 1) + i] = next;
                next += 1;
            }
        }

        ModeLayout {
            nr,
            nz,
            er,
            ez,
            ephi,
            n_unknowns: next as usize,
        }
    }

    fn er_idx(&self, i: usize, j: usize) -> Option<usize> {
        if i >= self.nr || j > self.nz {
            return None;
        }
        let v = self.er[j * self.nr + i];
        (v >= 0).then_some(v as usize)
    }

    fn ez_idx(&self, i: usize, j: usize) -> Option<usize> {
        if i > self.nr || j >= self.nz {
            return None;
        }
        let v = self.ez[j * (self.nr + 1) + i];
        (v >= 0).then_some(v as usize)
    }

    fn ephi_idx(&self, i: usize, j: usize) -> Option<usize> {
        if i > self.nr || j > self.nz {
            return None;
        }
        let v = self.ephi[j * (self.nr + 1) + i];
        (v >= 0).then_some(v as usize)
    }
}

/// Sparse SPD system for one (xi, m) pair.
#[derive(Debug)]
pub struct ModeOperator {
    pub xi: f64,
    pub m: usize,
    grid: GridSpec,
    layout: ModeLayout,
    matrix: SparseColMat<usize, f64>,
    /// Infinity-norm bound from assembly triplets, for residual floors.
    anorm: f64,
    /// Cells touched by any body, for source validation; None for vacuum.
    occupied: Option<Vec<bool>>,
}

/// Assembles the per-mode operator from a rasterized scene.
pub fn assemble(
    field: &PermittivityField,
    sample: &EpsSample,
    xi: f64,
    m: usize,
    config: &SolverConfig,
) -> Result<ModeOperator, SolverError> {
    let masks = [
        field.conductor_mask(Axis::Radial),
        field.conductor_mask(Axis::Azimuthal),
        field.conductor_mask(Axis::Axial),
    ];
    let grid = *field.grid();
    let occupied: Vec<bool> = (0..grid.nz)
        .flat_map(|j| (0..grid.nr).map(move |i| (i, j)))
        .map(|(i, j)| !field.is_vacuum_cell(i, j))
        .collect();
    assemble_parts(
        &grid,
        Some(masks),
        field.sheets(),
        Some(sample),
        Some(occupied),
        xi,
        m,
        config,
    )
}

/// Assembles the matching vacuum operator on the same grid.
pub fn assemble_vacuum(
    grid: &GridSpec,
    xi: f64,
    m: usize,
    config: &SolverConfig,
) -> Result<ModeOperator, SolverError> {
    assemble_parts(grid, None, &[], None, None, xi, m, config)
}

#[allow(clippy::too_many_arguments)]
fn assemble_parts(
    grid: &GridSpec,
    masks: Option<[&[bool]; 3]>,
    sheets: &[SheetMask],
    sample: Option<&EpsSample>,
    occupied: Option<Vec<bool>>,
    xi: f64,
    m: usize,
    config: &SolverConfig,
) -> Result<ModeOperator, SolverError> {
    assert!(xi > 0.0, "imaginary frequency must be positive");
    let layout = ModeLayout::build(grid, m, masks, sheets);
    let n = layout.n_unknowns;
    if n > config.max_unknowns {
        return Err(SolverError::ResourceBudget {
            nr: grid.nr,
            nz: grid.nz,
            unknowns: n,
            budget: config.max_unknowns,
        });
    }

    let (nr, nz) = (grid.nr, grid.nz);
    let d = grid.delta;
    let mf = m as f64;
    let cell = |i: usize, j: usize| j * nr + i;
    let eps_of = |axis: usize, i: usize, j: usize| -> f64 {
        sample.map_or(1.0, |s| s.eps[axis][cell(i, j)])
    };

    let mut triplets: Vec<Triplet<usize, usize, f64>> = Vec::with_capacity(n + 34 * nr * nz);
    let mut push_face = |entries: &[(Option<usize>, f64)], vf: f64| {
        for (a, ca) in entries {
            let Some(a) = a else { continue };
            for (b, cb) in entries {
                let Some(b) = b else { continue };
                triplets.push(Triplet {
                    row: *a,
                    col: *b,
                    val: vf * ca * cb,
                });
            }
        }
    };

    // Curl energy: one stencil per dual face, weight r~ * dr * dz.
    // phi-faces at cell centers: X_phi = dE_r/dz - dE_z/dr.
    for j in 0..nz {
        for i in 0..nr {
            let vf = (i as f64 + 0.5) * d * d * d;
            let entries = [
                (layout.er_idx(i, j + 1), 1.0 / d),
                (layout.er_idx(i, j), -1.0 / d),
                (layout.ez_idx(i + 1, j), -1.0 / d),
                (layout.ez_idx(i, j), 1.0 / d),
            ];
            push_face(&entries, vf);
        }
    }
    // r-faces at (r_i, z_{j+1/2}): X_r = (m/r) E_z + dE~_phi/dz.
    for j in 0..nz {
        for i in 1..nr {
            let r = i as f64 * d;
            let vf = r * d * d;
            let entries = [
                (layout.ez_idx(i, j), mf / r),
                (layout.ephi_idx(i, j + 1), 1.0 / d),
                (layout.ephi_idx(i, j), -1.0 / d),
            ];
            push_face(&entries, vf);
        }
    }
    // z-faces at (r_{i+1/2}, z_j): X_z = (1/r) d(r E~_phi)/dr + (m/r) E_r.
    for j in 1..nz {
        for i in 0..nr {
            let rm = (i as f64 + 0.5) * d;
            let vf = rm * d * d;
            let entries = [
                (layout.ephi_idx(i + 1, j), (i as f64 + 1.0) / rm),
                (layout.ephi_idx(i, j), -(i as f64) / rm),
                (layout.er_idx(i, j), mf / rm),
            ];
            push_face(&entries, vf);
        }
    }

    // Mass term xi^2 eps with dual edge volumes.
    let xi2 = xi * xi;
    for j in 1..nz {
        for i in 0..nr {
            let Some(e) = layout.er_idx(i, j) else {
                continue;
            };
            let ve = (i as f64 + 0.5) * d * d * d;
            let eps = 0.5 * (eps_of(0, i, j - 1) + eps_of(0, i, j));
            triplets.push(Triplet {
                row: e,
                col: e,
                val: xi2 * ve * eps,
            });
        }
    }
    for j in 0..nz {
        for i in 0..nr {
            let Some(e) = layout.ez_idx(i, j) else {
                continue;
            };
            let (ve, eps) = if i == 0 {
                (d * d * d / 8.0, eps_of(2, 0, j))
            } else {
                (
                    i as f64 * d * d * d,
                    0.5 * (eps_of(2, i - 1, j) + eps_of(2, i, j)),
                )
            };
            triplets.push(Triplet {
                row: e,
                col: e,
                val: xi2 * ve * eps,
            });
        }
    }
    for j in 1..nz {
        for i in 1..nr {
            let Some(e) = layout.ephi_idx(i, j) else {
                continue;
            };
            let ve = i as f64 * d * d * d;
            let eps = 0.25
                * (eps_of(1, i - 1, j - 1)
                    + eps_of(1, i, j - 1)
                    + eps_of(1, i - 1, j)
                    + eps_of(1, i, j));
            triplets.push(Triplet {
                row: e,
                col: e,
                val: xi2 * ve * eps,
            });
        }
    }

    let mut row_abs = vec![0.0f64; n];
    for t in &triplets {
        row_abs[t.row] += t.val.abs();
    }
    let anorm = row_abs.iter().fold(0.0f64, |a, &b| a.max(b));

    let matrix = SparseColMat::try_new_from_triplets(n, n, &triplets).map_err(|e| {
        SolverError::Factorization {
            xi,
            m,
            detail: format!("matrix construction: {e:?}"),
        }
    })?;

    Ok(ModeOperator {
        xi,
        m,
        grid: *grid,
        layout,
        matrix,
        anorm,
        occupied,
    })
}

impl ModeOperator {
    pub fn n_unknowns(&self) -> usize {
        self.layout.n_unknowns
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Matrix-vector product, mostly for invariant checks.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.layout.n_unknowns;
        assert_eq!(v.len(), n);
        let x = Mat::from_fn(n, 1, |i, _| v[i]);
        let mut y = Mat::zeros(n, 1);
        sparse_dense_matmul(
            y.as_mut(),
            Accum::Replace,
            self.matrix.as_ref(),
            x.as_ref(),
            1.0,
            Par::Seq,
        );
        (0..n).map(|i| y[(i, 0)]).collect()
    }

    /// Inner product <u, A v>; the operator is symmetric and positive
    /// definite, which tests assert through this.
    pub fn energy_product(&self, u: &[f64], v: &[f64]) -> f64 {
        let av = self.apply(v);
        u.iter().zip(av.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn factorize(self) -> Result<FactoredMode, SolverError> {
        ensure_sequential();
        let llt = self
            .matrix
            .sp_cholesky(Side::Lower)
            .map_err(|e| SolverError::Factorization {
                xi: self.xi,
                m: self.m,
                detail: format!("{e:?}"),
            })?;
        Ok(FactoredMode { op: self, llt })
    }

    /// Sampling/source stencil for a probe. Transverse probes on the axis
    /// shift to r = delta/2, the nearest transverse unknown ring.
    fn probe_stencil(&self, probe: &Probe) -> Result<Vec<(usize, f64)>, SolverError> {
        let g = &self.grid;
        let d = g.delta;
        let mut r = probe.r;
        let z = probe.z;
        if !matches!(
            probe.kind,
            ProbeKind::Field(Axis::Axial) | ProbeKind::Flux(Axis::Axial)
        ) && r < 0.5 * d
        {
            r = 0.5 * d;
        }
        // The axis carries no E~_phi unknown, and the radial curl rows live
        // on the same node rings. For m = 1 both quantities are finite at
        // r = 0, so interpolating against the absent axis entries would
        // silently halve the stencil; sample on the first node ring instead.
        // For other m the implicit zero is the correct axis parity.
        if matches!(
            probe.kind,
            ProbeKind::Field(Axis::Azimuthal) | ProbeKind::Flux(Axis::Radial)
        ) && self.m == 1
            && r < d
        {
            r = d;
        }
        let inside = r >= 0.0 && r <= g.r_max() - d && z >= g.z_min + d && z <= g.z_max() - d;
        if !inside {
            return Err(SolverError::InvalidSource {
                r: probe.r,
                z: probe.z,
                reason: "position must lie inside the domain, at least one cell from walls".into(),
            });
        }
        if let Some(occ) = &self.occupied {
            let ci = ((r / d) as usize).min(g.nr - 1);
            let cj = (((z - g.z_min) / d) as usize).min(g.nz - 1);
            if occ[cj * g.nr + ci] {
                return Err(SolverError::InvalidSource {
                    r: probe.r,
                    z: probe.z,
                    reason: "position lies inside a body".into(),
                });
            }
        }

        let mf = self.m as f64;
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(12);
        let mut add = |idx: Option<usize>, w: f64| {
            if let Some(i) = idx {
                if w != 0.0 {
                    out.push((i, w));
                }
            }
        };

        match probe.kind {
            ProbeKind::Field(Axis::Radial) => {
                for (i, j, w) in bilinear(r / d - 0.5, (z - g.z_min) / d) {
                    add(self.layout.er_idx(i, j), w);
                }
            }
            ProbeKind::Field(Axis::Azimuthal) => {
                for (i, j, w) in bilinear(r / d, (z - g.z_min) / d) {
                    add(self.layout.ephi_idx(i, j), w);
                }
            }
            ProbeKind::Field(Axis::Axial) => {
                for (i, j, w) in bilinear(r / d, (z - g.z_min) / d - 0.5) {
                    add(self.layout.ez_idx(i, j), w);
                }
            }
            ProbeKind::Flux(Axis::Radial) => {
                // r-face curl rows: (m/r_i) E_z + dE~_phi/dz.
                for (i, j, w) in bilinear(r / d, (z - g.z_min) / d - 0.5) {
                    if i == 0 {
                        continue;
                    }
                    let ri = i as f64 * d;
                    add(self.layout.ez_idx(i, j), w * mf / ri);
                    add(self.layout.ephi_idx(i, j + 1), w / d);
                    add(self.layout.ephi_idx(i, j), -w / d);
                }
            }
            ProbeKind::Flux(Axis::Azimuthal) => {
                // phi-face curl rows at cell centers: dE_r/dz - dE_z/dr.
                for (i, j, w) in bilinear(r / d - 0.5, (z - g.z_min) / d - 0.5) {
                    add(self.layout.er_idx(i, j + 1), w / d);
                    add(self.layout.er_idx(i, j), -w / d);
                    add(self.layout.ez_idx(i + 1, j), -w / d);
                    add(self.layout.ez_idx(i, j), w / d);
                }
            }
            ProbeKind::Flux(Axis::Axial) => {
                // z-face curl rows: (1/r) d(r E~_phi)/dr + (m/r) E_r.
                for (i, j, w) in bilinear(r / d - 0.5, (z - g.z_min) / d) {
                    let rm = (i as f64 + 0.5) * d;
                    add(self.layout.ephi_idx(i + 1, j), w * (i as f64 + 1.0) / rm);
                    add(self.layout.ephi_idx(i, j), -w * (i as f64) / rm);
                    add(self.layout.er_idx(i, j), w * mf / rm);
                }
            }
        }
        Ok(out)
    }
}

/// Bilinear weights on a lattice with fractional coordinates (u, v); entries
/// falling off the lattice low side are clamped out by the callers' index
/// lookups.
fn bilinear(u: f64, v: f64) -> [(usize, usize, f64); 4] {
    let u = u.max(0.0);
    let v = v.max(0.0);
    let i0 = u.floor() as usize;
    let j0 = v.floor() as usize;
    let t = u - i0 as f64;
    let s = v - j0 as f64;
    [
        (i0, j0, (1.0 - t) * (1.0 - s)),
        (i0 + 1, j0, t * (1.0 - s)),
        (i0, j0 + 1, (1.0 - t) * s),
        (i0 + 1, j0 + 1, t * s),
    ]
}

/// One field solution with its source descriptor.
#[derive(Debug, Clone)]
pub struct FieldSolution {
    values: Vec<f64>,
    pub source: Probe,
    pub amplitude: f64,
    pub peak: f64,
    pub boundary_peak: f64,
}

impl FieldSolution {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Largest magnitude within one cell of the outer walls, relative to the
    /// overall peak.
    pub fn boundary_ratio(&self) -> f64 {
        if self.peak == 0.0 {
            0.0
        } else {
            self.boundary_peak / self.peak
        }
    }
}

/// Cholesky-factored mode operator plus batched solve entry points.
pub struct FactoredMode {
    op: ModeOperator,
    llt: faer::sparse::linalg::solvers::Llt<usize, f64>,
}

impl FactoredMode {
    pub fn op(&self) -> &ModeOperator {
        &self.op
    }

    fn solve_block(&self, b: &Mat<f64>, tol: f64) -> Result<Mat<f64>, SolverError> {
        let mut x = b.clone();
        self.llt.solve_in_place(x.as_mut());
        // Residual check against the assembled matrix, with a couple of
        // iterative refinement rounds to pull marginally conditioned systems
        // back under the contract. A column is also accepted when its
        // residual sits below the smallest value f64 can certify for this
        // system: evaluating b - A x itself carries noise of order
        // eps * |A| * |x|, so demanding less would reject exact solutions.
        // Near the static limit |x| grows like 1/xi^2 and that floor can
        // exceed the contract.
        let mut worst = f64::INFINITY;
        for round in 0..3 {
            let mut r = Mat::zeros(b.nrows(), b.ncols());
            sparse_dense_matmul(
                r.as_mut(),
                Accum::Replace,
                self.op.matrix.as_ref(),
                x.as_ref(),
                1.0,
                Par::Seq,
            );
            worst = 0.0;
            let mut ok = true;
            for c in 0..b.ncols() {
                let mut num = 0.0;
                let mut den = 0.0;
                let mut xsq = 0.0;
                for i in 0..b.nrows() {
                    let e = r[(i, c)] - b[(i, c)];
                    r[(i, c)] = b[(i, c)] - r[(i, c)];
                    num += e * e;
                    den += b[(i, c)] * b[(i, c)];
                    let xc = x[(i, c)];
                    xsq += xc * xc;
                }
                if den > 0.0 {
                    let resid = (num / den).sqrt();
                    let floor = 32.0 * f64::EPSILON * self.op.anorm * (xsq / den).sqrt();
                    worst = worst.max(resid);
                    if resid > tol.max(floor) {
                        ok = false;
                    }
                }
            }
            if ok {
                return Ok(x);
            }
            if round < 2 {
                self.llt.solve_in_place(r.as_mut());
                for c in 0..b.ncols() {
                    for i in 0..b.nrows() {
                        x[(i, c)] += r[(i, c)];
                    }
                }
            }
        }
        Err(SolverError::Numerics {
            residual: worst,
            tol,
        })
    }

    /// Solves one point-dipole source with the given mode amplitude.
    pub fn solve_point_dipole(
        &self,
        source: Probe,
        amplitude: f64,
        config: &SolverConfig,
    ) -> Result<FieldSolution, SolverError> {
        let stencil = self.op.probe_stencil(&source)?;
        let n = self.op.layout.n_unknowns;
        let mut b = Mat::zeros(n, 1);
        for &(i, w) in &stencil {
            b[(i, 0)] += amplitude * w;
        }
        if amplitude == 0.0 {
            return Ok(FieldSolution {
                values: vec![0.0; n],
                source,
                amplitude,
                peak: 0.0,
                boundary_peak: 0.0,
            });
        }
        let x = self.solve_block(&b, config.residual_tol)?;
        let values: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
        let (peak, boundary_peak) = self.field_extents(&values);
        Ok(FieldSolution {
            values,
            source,
            amplitude,
            peak,
            boundary_peak,
        })
    }

    /// Samples an existing solution with a probe stencil.
    pub fn sample(&self, solution: &FieldSolution, probe: &Probe) -> Result<f64, SolverError> {
        let stencil = self.op.probe_stencil(probe)?;
        Ok(stencil.iter().map(|&(i, w)| w * solution.values[i]).sum())
    }

    /// Pairwise Green's matrix G[a][b] = stencil_a^T A^{-1} stencil_b for a
    /// probe set, solved in batches that share the factorization.
    pub fn green_matrix(
        &self,
        probes: &[Probe],
        config: &SolverConfig,
    ) -> Result<Vec<Vec<f64>>, SolverError> {
        let stencils: Vec<Vec<(usize, f64)>> = probes
            .iter()
            .map(|p| self.op.probe_stencil(p))
            .collect::<Result<_, _>>()?;
        let n = self.op.layout.n_unknowns;
        let k = probes.len();
        let mut green = vec![vec![0.0; k]; k];
        const CHUNK: usize = 64;
        for start in (0..k).step_by(CHUNK) {
            let w = (k - start).min(CHUNK);
            let mut b = Mat::zeros(n, w);
            for c in 0..w {
                for &(i, wgt) in &stencils[start + c] {
                    b[(i, c)] += wgt;
                }
            }
            let x = self.solve_block(&b, config.residual_tol)?;
            for c in 0..w {
                for (a, st) in stencils.iter().enumerate() {
                    let val: f64 = st.iter().map(|&(i, wgt)| wgt * x[(i, c)]).sum();
                    green[a][start + c] = val;
                }
            }
        }
        Ok(green)
    }

    fn field_extents(&self, values: &[f64]) -> (f64, f64) {
        let lay = &self.op.layout;
        let (nr, nz) = (lay.nr, lay.nz);
        let mut peak = 0.0f64;
        let mut boundary = 0.0f64;
        let mut scan = |idx: Option<usize>, near_wall: bool| {
            if let Some(i) = idx {
                let a = values[i].abs();
                peak = peak.max(a);
                if near_wall {
                    boundary = boundary.max(a);
                }
            }
        };
        for j in 1..nz {
            for i in 0..nr {
                scan(lay.er_idx(i, j), j == 1 || j == nz - 1 || i == nr - 1);
            }
        }
        for j in 0..nz {
            for i in 0..nr {
                scan(lay.ez_idx(i, j), i == nr - 1 || j == 0 || j == nz - 1);
            }
        }
        for j in 1..nz {
            for i in 1..nr {
                scan(
                    lay.ephi_idx(i, j),
                    i == 1 || i == nr - 1 || j == 1 || j == nz - 1,
                );
            }
        }
        (peak, boundary)
    }
}

/// Factored full-scene and vacuum operators on the same grid.
pub struct ModePair {
    pub full: FactoredMode,
    pub vacuum: FactoredMode,
}

impl ModePair {
    /// Full-minus-vacuum Green's matrix: the scattering part only, with the
    /// discrete self-energy cancelled.
    pub fn scattered_green(
        &self,
        probes: &[Probe],
        config: &SolverConfig,
    ) -> Result<Vec<Vec<f64>>, SolverError> {
        Ok(self.scattered_green_scaled(probes, config)?.0)
    }

    /// Scattered Green's matrix together with the per-probe diagonal
    /// magnitude before subtraction. The solves certify fields only to the
    /// residual contract, so the subtraction carries noise of that relative
    /// size; callers use the magnitudes to tell residual terms from noise.
    pub fn scattered_green_scaled(
        &self,
        probes: &[Probe],
        config: &SolverConfig,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>), SolverError> {
        let f = self.full.green_matrix(probes, config)?;
        let v = self.vacuum.green_matrix(probes, config)?;
        let mags = (0..probes.len())
            .map(|k| f[k][k].abs().max(v[k][k].abs()))
            .collect();
        let g = f
            .into_iter()
            .zip(v)
            .map(|(fr, vr)| fr.into_iter().zip(vr).map(|(a, b)| a - b).collect())
            .collect();
        Ok((g, mags))
    }
}

/// Per-xi context: the rasterized scene on the wall-rule domain for that
/// frequency, ready to assemble any mode.
pub struct XiContext {
    pub xi: f64,
    field: PermittivityField,
    sample: EpsSample,
    config: SolverConfig,
}

impl XiContext {
    pub fn grid(&self) -> &GridSpec {
        self.field.grid()
    }

    pub fn field(&self) -> &PermittivityField {
        &self.field
    }

    pub fn factor_full(&self, m: usize) -> Result<FactoredMode, SolverError> {
        assemble(&self.field, &self.sample, self.xi, m, &self.config)?.factorize()
    }

    pub fn factor_vacuum(&self, m: usize) -> Result<FactoredMode, SolverError> {
        assemble_vacuum(self.field.grid(), self.xi, m, &self.config)?.factorize()
    }

    pub fn mode_pair(&self, m: usize) -> Result<ModePair, SolverError> {
        Ok(ModePair {
            full: self.factor_full(m)?,
            vacuum: self.factor_vacuum(m)?,
        })
    }
}

/// Scattered Green's values at one point, per axis, mode-summed.
#[derive(Debug, Clone)]
pub struct GreenTrace {
    pub values: Vec<(Axis, f64)>,
    pub m_used: usize,
    /// Magnitude of the last folded mode term, an upper estimate of the
    /// truncation error.
    pub truncation: f64,
}

/// Scene plus solver configuration; the entry point every engine builds on.
pub struct SceneSolver<'a> {
    pub scene: &'a AxisymScene,
    pub config: SolverConfig,
}

impl<'a> SceneSolver<'a> {
    pub fn new(scene: &'a AxisymScene, config: SolverConfig) -> Self {
        Self { scene, config }
    }

    /// Wall-rule domain for one frequency: margin clamp(wall_coeff/xi,
    /// floor*extent, cap*extent) around bodies and any extra points, snapped
    /// outward to whole cells anchored at absolute coordinates, and never
    /// smaller than the scene's own declared domain.
    pub fn domain_for_xi(&self, xi: f64, extra_points: &[(f64, f64)]) -> Domain {
        let d = 1.0 / self.config.resolution;
        let extent = self.scene.body_extent();
        let mut margin = self.config.wall_coeff / xi;
        if extent > 0.0 {
            margin = margin
                .max(self.config.margin_floor_factor * extent)
                .min(self.config.margin_cap_factor * extent);
        }
        let mut sections: Vec<CrossSection> = self
            .scene
            .bodies()
            .iter()
            .map(|b| b.shape.cross_section())
            .collect();
        for &(r, z) in extra_points {
            sections.push(CrossSection {
                r_lo: 0.0,
                r_hi: r,
                z_lo: z,
                z_hi: z,
            });
        }
        let tight = Domain::enclosing(&sections, margin);
        let declared = self.scene.domain();
        let r_max = tight.r_max.max(declared.r_max);
        let z_min = tight.z_min.min(declared.z_min);
        let z_max = tight.z_max.max(declared.z_max);
        // Snap outward in whole cells anchored at the declared z_min, so the
        // scene author's cell alignment survives any margin growth and
        // symmetric setups stay symmetric across frequencies.
        let z_min = declared.z_min - ((declared.z_min - z_min) / d).max(0.0).ceil() * d;
        let z_max = z_min + ((z_max - z_min) / d).ceil() * d;
        Domain {
            r_max: (r_max / d).ceil() * d,
            z_min,
            z_max,
            margin: declared.margin,
        }
    }

    /// Rasterizes the scene on the wall-rule domain for xi.
    pub fn xi_context(
        &self,
        xi: f64,
        extra_points: &[(f64, f64)],
    ) -> Result<XiContext, SolverError> {
        let domain = self.domain_for_xi(xi, extra_points);
        let scene = self.scene.with_domain(domain)?;
        let field = rasterize(&scene, self.config.resolution, self.config.raster)?;
        let sample = field.sample_eps(xi, self.config.units.as_ref())?;
        Ok(XiContext {
            xi,
            field,
            sample,
            config: self.config,
        })
    }

    /// Mode-summed scattered Green's function at one point, one frequency.
    ///
    /// Per mode, full and vacuum systems are solved on the same grid and
    /// subtracted; the m series is folded with degeneracy 2 and stops after
    /// two consecutive negligible terms. `scale_hint` lets callers terminate
    /// series that are negligible relative to an outer accumulation (for
    /// example a frequency integral); pass 0.0 when no such scale exists.
    pub fn scattered_green_trace(
        &self,
        position: (f64, f64),
        axes: &[Axis],
        xi: f64,
        m_max: usize,
        rel_tol: f64,
        scale_hint: f64,
    ) -> Result<GreenTrace, SolverError> {
        let mut traces =
            self.scattered_green_traces(&[position], axes, xi, m_max, rel_tol, &[scale_hint])?;
        Ok(traces.pop().expect("one trace per position"))
    }

    /// [`Self::scattered_green_trace`] for several points at once: every
    /// mode's factorization is shared across all positions, which is what
    /// makes difference stencils and radial profiles affordable. All points
    /// are also fed to the wall rule together, so the returned values live on
    /// one common grid and their differences are smooth.
    ///
    /// `scale_hints` gives one outer-accumulation scale per position (an
    /// empty slice means none); the series stops once two consecutive modes
    /// are negligible for every position and axis at once.
    pub fn scattered_green_traces(
        &self,
        positions: &[(f64, f64)],
        axes: &[Axis],
        xi: f64,
        m_max: usize,
        rel_tol: f64,
        scale_hints: &[f64],
    ) -> Result<Vec<GreenTrace>, SolverError> {
        if positions.is_empty() {
            return Ok(Vec::new());
        }
        let ctx = self.xi_context(xi, positions)?;
        let probes: Vec<Probe> = positions
            .iter()
            .flat_map(|&(r, z)| axes.iter().map(move |&a| Probe::field(a, r, z)))
            .collect();

        let na = axes.len();
        let np = positions.len();
        let mut totals = vec![0.0f64; np * na];
        let mut scales: Vec<f64> = (0..np * na)
            .map(|k| scale_hints.get(k / na).map_or(0.0, |h| h.abs()))
            .collect();
        let mut last_terms = vec![0.0f64; np];
        let mut floors = vec![0.0f64; np * na];
        let mut small_run = 0usize;
        let mut m_used = 0;
        let mut converged = false;

        for m in 0..=m_max {
            let pair = ctx.mode_pair(m)?;
            let (g, mags) = pair.scattered_green_scaled(&probes, &self.config)?;
            let degeneracy = if m == 0 { 1.0 } else { 2.0 };
            let mut all_small = true;
            last_terms.fill(0.0);
            for (k, total) in totals.iter_mut().enumerate() {
                let term = degeneracy * g[k][k];
                *total += term;
                scales[k] = scales[k].max(total.abs()).max(term.abs());
                // Terms below the subtraction noise of this mode's solves
                // are unresolvable; treating them as unconverged would chase
                // noise to the cap.
                floors[k] = SAMPLE_NOISE_FACTOR * self.config.residual_tol * mags[k];
                if term.abs() > (rel_tol * scales[k]).max(floors[k]) {
                    all_small = false;
                }
                let p = k / na;
                last_terms[p] = last_terms[p].max(term.abs());
            }
            m_used = m;
            if m >= 1 && all_small {
                small_run += 1;
                if small_run >= 2 {
                    converged = true;
                    break;
                }
            } else if m >= 1 {
                small_run = 0;
            }
        }
        if !converged && m_used == m_max {
            // The series may simply be exhausted (identically zero terms).
            let worst = last_terms.iter().fold(0.0f64, |a, &b| a.max(b));
            let scale = scales.iter().fold(0.0f64, |a, &b| a.max(b));
            let floor = floors.iter().fold(0.0f64, |a, &b| a.max(b));
            if worst > (rel_tol * scale).max(floor) {
                return Err(SolverError::ModeSumTruncated {
                    m_cap: m_max,
                    last_term: worst,
                });
            }
        }

        Ok((0..np)
            .map(|p| GreenTrace {
                values: axes
                    .iter()
                    .enumerate()
                    .map(|(a, &axis)| (axis, MODE_GREEN_PREFACTOR * totals[p * na + a]))
                    .collect(),
                m_used,
                truncation: MODE_GREEN_PREFACTOR * last_terms[p],
            })
            .collect())
    }
}

/// Closed-form vacuum dyadic Green's function at imaginary frequency, used
/// by oracle tests and the ring engine's free-space couplings.
///
/// G_ij = g(R) [A(u) delta_ij - B(u) Rhat_i Rhat_j], u = xi R,
/// g = e^{-u}/(4 pi R), A = 1 + 1/u + 1/u^2, B = 1 + 3/u + 3/u^2.
pub fn vacuum_green(xi: f64, separation: [f64; 3]) -> [[f64; 3]; 3] {
    let r2 = separation.iter().map(|c| c * c).sum::<f64>();
    let r = r2.sqrt();
    assert!(r > 0.0 && xi > 0.0);
    let u = xi * r;
    let g = (-u).exp() / (4.0 * std::f64::consts::PI * r);
    let a = 1.0 + 1.0 / u + 1.0 / (u * u);
    let b = 1.0 + 3.0 / u + 3.0 / (u * u);
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let rhat = separation[i] / r * separation[j] / r;
            out[i][j] = g * (if i == j { a } else { 0.0 } - b * rhat);
        }
    }
    out
}

/// Image-dipole closed form for the scattered Green's function above an
/// ideal conducting plane at distance d: the (a, a) component at the source
/// point is eta_a G^vac_aa(2 d zhat) with eta = (-1, -1, +1).
pub fn conducting_plane_scattered_green(xi: f64, d: f64, axis: Axis) -> f64 {
    let g = vacuum_green(xi, [0.0, 0.0, 2.0 * d]);
    match axis {
        Axis::Radial => -g[0][0],
        Axis::Azimuthal => -g[1][1],
        Axis::Axial => g[2][2],
    }
}
