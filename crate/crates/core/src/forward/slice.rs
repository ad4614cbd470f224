//! 2-D steady-state slice analogue: single-phase Darcy pressure solve plus
//! advection-diffusion heat transport on a structured cell-centered grid.
//!
//! The physics is a deliberately simplified stand-in for a full geothermal
//! simulator: constant fluid properties, a fixed-temperature / fixed-pressure
//! top boundary, closed sides, a basal conductive heat flux, and a hot mass
//! source at the lower-left corner of the bottom boundary. Permeability is
//! anisotropic and homogeneous within each rock-type region; the region
//! geometry is resolution independent, so the same parameter vector drives
//! both a fine and a coarse discretization of the same problem.
//!
//! Discretization: cell-centered finite volumes, harmonic averaging of face
//! permeabilities, first-order upwinding for advection. Both solves are
//! linear and go through a direct banded LU; the solution is accepted only if
//! the relative residual is below 1e-8.

use thiserror::Error;

use super::{check_input, ForwardModel, ModelRunFailure, ObservationVector, ParameterVector};
use crate::linalg::BandedMatrix;

/// Gravitational acceleration, m/s^2.
const GRAVITY: f64 = 9.81;
/// Top boundary pressure, Pa (1 atm).
const TOP_PRESSURE: f64 = 101_325.0;
/// Relative residual accepted as converged.
const RESIDUAL_TOL: f64 = 1e-8;

/// Constant fluid properties of the desk-scale closure.
#[derive(Debug, Clone, Copy)]
pub struct FluidProperties {
    /// kg/m^3
    pub density: f64,
    /// J/(kg K)
    pub specific_heat: f64,
    /// m^2/s
    pub kinematic_viscosity: f64,
}

impl Default for FluidProperties {
    fn default() -> Self {
        FluidProperties {
            density: 1000.0,
            specific_heat: 4186.0,
            kinematic_viscosity: 3e-7,
        }
    }
}

#[derive(Debug, Error)]
pub enum SliceConfigError {
    #[error("grid must have nx, nz >= 4, got {nx}x{nz}")]
    GridTooCoarse { nx: usize, nz: usize },
    #[error("well at x = {x} m lies outside the domain width {width} m")]
    WellOutsideDomain { x: f64, width: f64 },
    #[error("well depth {depth} m lies outside the domain depth {max} m")]
    DepthOutsideDomain { depth: f64, max: f64 },
    #[error("cell centered at ({x} m, {z} m) is covered by {count} rock regions (need exactly 1)")]
    NotAPartition { x: f64, z: f64, count: usize },
    #[error("rock map has no regions")]
    NoRegions,
}

/// Axis-aligned rectangle, half-open in both axes: `[x0, x1) x [z0, z1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub z0: f64,
    pub z1: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, z: f64) -> bool {
        x >= self.x0 && x < self.x1 && z >= self.z0 && z < self.z1
    }
}

/// One rock type: a name plus the rectangles it occupies.
#[derive(Debug, Clone)]
pub struct RockRegion {
    pub name: String,
    pub rects: Vec<Rect>,
}

/// Resolution-independent assignment of space to rock types.
#[derive(Debug, Clone)]
pub struct RockMap {
    regions: Vec<RockRegion>,
}

impl RockMap {
    pub fn new(regions: Vec<RockRegion>) -> Result<Self, SliceConfigError> {
        if regions.is_empty() {
            return Err(SliceConfigError::NoRegions);
        }
        Ok(RockMap { regions })
    }

    pub fn region_count(&self) -> usize {
        self.regions.len()
    }

    pub fn regions(&self) -> &[RockRegion] {
        &self.regions
    }

    /// Region index owning the point, or an error if the regions fail to
    /// partition it.
    pub fn region_at(&self, x: f64, z: f64) -> Result<usize, SliceConfigError> {
        let mut found = None;
        let mut count = 0;
        for (r, region) in self.regions.iter().enumerate() {
            if region.rects.iter().any(|rect| rect.contains(x, z)) {
                found = Some(r);
                count += 1;
            }
        }
        match (found, count) {
            (Some(r), 1) => Ok(r),
            _ => Err(SliceConfigError::NotAPartition { x, z, count }),
        }
    }

    /// The six-region layout shipped with the crate: a surface band, a cap
    /// rock with a lateral outflow channel on its right, an upflow column
    /// above the deep source, a reservoir body and a basement. Region
    /// boundaries sit on multiples of 250 m (x) and 160 m (depth) so that all
    /// shipped grid resolutions resolve them exactly.
    pub fn six_region_default() -> RockMap {
        let rect = |x0, x1, z0, z1| Rect { x0, x1, z0, z1 };
        RockMap::new(vec![
            RockRegion {
                name: "SURF".into(),
                rects: vec![rect(0.0, 2000.0, 0.0, 160.0)],
            },
            RockRegion {
                name: "CAPRO".into(),
                rects: vec![rect(0.0, 1500.0, 160.0, 480.0)],
            },
            RockRegion {
                name: "OUTFL".into(),
                rects: vec![rect(1500.0, 2000.0, 160.0, 480.0)],
            },
            RockRegion {
                name: "UPFLO".into(),
                rects: vec![rect(0.0, 500.0, 480.0, 1600.0)],
            },
            RockRegion {
                name: "MEDM".into(),
                rects: vec![rect(500.0, 2000.0, 480.0, 1120.0)],
            },
            RockRegion {
                name: "BASE".into(),
                rects: vec![rect(500.0, 2000.0, 1120.0, 1600.0)],
            },
        ])
        .expect("default layout is non-empty")
    }
}

/// A vertical observation well: an x position and the depths sampled down it.
#[derive(Debug, Clone, PartialEq)]
pub struct Well {
    pub x: f64,
    pub depths: Vec<f64>,
}

/// Geometry, boundary conditions and observation layout of the slice problem.
#[derive(Debug, Clone)]
pub struct SliceConfig {
    /// m
    pub width: f64,
    /// m
    pub depth: f64,
    pub nx: usize,
    pub nz: usize,
    pub rock_map: RockMap,
    /// deg C, Dirichlet top boundary
    pub top_temperature: f64,
    /// W/m^2 into the bottom boundary
    pub basal_heat_flux: f64,
    /// x interval of the bottom boundary carrying the deep source
    pub source_x: (f64, f64),
    /// kg/(s m^2)
    pub source_mass_flux: f64,
    /// kJ/kg
    pub source_enthalpy: f64,
    /// W/(m K)
    pub thermal_conductivity: f64,
    /// dimensionless (unused by the steady solves, part of the rock spec)
    pub porosity: f64,
    pub wells: Vec<Well>,
}

impl SliceConfig {
    /// Default slice problem at the given grid resolution: six-region rock
    /// map, seven wells with fifteen observation depths each (105
    /// observations), and the standard boundary conditions.
    pub fn with_grid(nx: usize, nz: usize) -> Result<Self, SliceConfigError> {
        let wells = (1..=7)
            .map(|w| Well {
                x: 250.0 * w as f64,
                depths: (1..=15).map(|d| 100.0 * d as f64).collect(),
            })
            .collect();
        let cfg = SliceConfig {
            width: 2000.0,
            depth: 1600.0,
            nx,
            nz,
            rock_map: RockMap::six_region_default(),
            top_temperature: 15.0,
            basal_heat_flux: 0.080,
            source_x: (0.0, 500.0),
            source_mass_flux: 7.5e-5,
            source_enthalpy: 1200.0,
            thermal_conductivity: 2.5,
            porosity: 0.10,
            wells,
        };
        cfg.validated()
    }

    /// Validate grid size, wells and the rock partition; sorts wells
    /// left-to-right and depths shallow-to-deep so the observation ordering
    /// is canonical.
    pub fn validated(mut self) -> Result<Self, SliceConfigError> {
        if self.nx < 4 || self.nz < 4 {
            return Err(SliceConfigError::GridTooCoarse {
                nx: self.nx,
                nz: self.nz,
            });
        }
        for well in &self.wells {
            if !(0.0..=self.width).contains(&well.x) {
                return Err(SliceConfigError::WellOutsideDomain {
                    x: well.x,
                    width: self.width,
                });
            }
            for &d in &well.depths {
                if !(0.0..=self.depth).contains(&d) {
                    return Err(SliceConfigError::DepthOutsideDomain {
                        depth: d,
                        max: self.depth,
                    });
                }
            }
        }
        self.wells
            .sort_by(|a, b| a.x.partial_cmp(&b.x).expect("well x is finite"));
        for well in &mut self.wells {
            well.depths
                .sort_by(|a, b| a.partial_cmp(b).expect("depth is finite"));
        }
        // Rock regions must partition every cell center.
        let dx = self.width / self.nx as f64;
        let dz = self.depth / self.nz as f64;
        for j in 0..self.nz {
            for i in 0..self.nx {
                let x = (i as f64 + 0.5) * dx;
                let z = (j as f64 + 0.5) * dz;
                self.rock_map.region_at(x, z)?;
            }
        }
        Ok(self)
    }

    pub fn observation_count(&self) -> usize {
        self.wells.iter().map(|w| w.depths.len()).sum()
    }

    /// (well index, x, depth) triple per observation, in output order.
    pub fn observation_coords(&self) -> Vec<(usize, f64, f64)> {
        let mut coords = Vec::with_capacity(self.observation_count());
        for (w, well) in self.wells.iter().enumerate() {
            for &d in &well.depths {
                coords.push((w, well.x, d));
            }
        }
        coords
    }

    fn dx(&self) -> f64 {
        self.width / self.nx as f64
    }

    fn dz(&self) -> f64 {
        self.depth / self.nz as f64
    }
}

/// Scalar field on cell centers of a structured grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub nx: usize,
    pub nz: usize,
    pub dx: f64,
    pub dz: f64,
    pub values: Vec<f64>,
}

impl Field {
    fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.idx(i, j)]
    }

    /// Bilinear interpolation of cell-center values at `(x, z)`, with linear
    /// extrapolation beyond the outermost centers (exact on fields that are
    /// affine in the coordinates).
    pub fn interpolate(&self, x: f64, z: f64) -> f64 {
        let (i0, fx) = axis_weights(x, self.dx, self.nx);
        let (j0, fz) = axis_weights(z, self.dz, self.nz);
        let v00 = self.at(i0, j0);
        let v10 = self.at(i0 + 1, j0);
        let v01 = self.at(i0, j0 + 1);
        let v11 = self.at(i0 + 1, j0 + 1);
        (1.0 - fx) * (1.0 - fz) * v00
            + fx * (1.0 - fz) * v10
            + (1.0 - fx) * fz * v01
            + fx * fz * v11
    }
}

fn axis_weights(coord: f64, spacing: f64, n: usize) -> (usize, f64) {
    let s = coord / spacing - 0.5;
    let max_cell = n.saturating_sub(2);
    let i0 = (s.floor() as isize).clamp(0, max_cell as isize) as usize;
    (i0, s - i0 as f64)
}

/// Cell-wise anisotropic permeability produced by [`map_parameters`].
#[derive(Debug, Clone)]
pub struct PermeabilityField {
    pub kx: Field,
    pub kz: Field,
    /// rock index per cell
    pub rock: Vec<usize>,
}

/// Expand `k` (log10 permeabilities, two per rock type: horizontal then
/// vertical) into per-cell permeability fields on the grid of `cfg`.
pub fn map_parameters(
    k: &ParameterVector,
    cfg: &SliceConfig,
) -> Result<PermeabilityField, ModelRunFailure> {
    let r_count = cfg.rock_map.region_count();
    if k.len() != 2 * r_count {
        return Err(ModelRunFailure::WrongInputDim {
            expected: 2 * r_count,
            got: k.len(),
        });
    }
    let (nx, nz) = (cfg.nx, cfg.nz);
    let (dx, dz) = (cfg.dx(), cfg.dz());
    let mut kx = vec![0.0; nx * nz];
    let mut kz = vec![0.0; nx * nz];
    let mut rock = vec![0usize; nx * nz];
    for j in 0..nz {
        for i in 0..nx {
            let x = (i as f64 + 0.5) * dx;
            let z = (j as f64 + 0.5) * dz;
            let r = cfg
                .rock_map
                .region_at(x, z)
                .map_err(|e| ModelRunFailure::SolveDiverged {
                    detail: e.to_string(),
                })?;
            let idx = j * nx + i;
            rock[idx] = r;
            kx[idx] = 10f64.powf(k[2 * r]);
            kz[idx] = 10f64.powf(k[2 * r + 1]);
        }
    }
    let field = |values: Vec<f64>| Field {
        nx,
        nz,
        dx,
        dz,
        values,
    };
    Ok(PermeabilityField {
        kx: field(kx),
        kz: field(kz),
        rock,
    })
}

/// Converged slice solution plus its boundary balances (W and kg/s per metre
/// of slice thickness).
#[derive(Debug, Clone)]
pub struct SliceSolution {
    pub temperature: Field,
    pub pressure: Field,
    pub energy_in: f64,
    pub energy_out: f64,
    pub mass_in: f64,
    pub mass_out: f64,
}

impl SliceSolution {
    /// Relative gap between boundary energy in and out.
    pub fn energy_imbalance(&self) -> f64 {
        let scale = self.energy_in.abs().max(self.energy_out.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.energy_in - self.energy_out).abs() / scale
        }
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

fn solve_checked(
    matrix: &BandedMatrix,
    rhs: &[f64],
    what: &str,
) -> Result<Vec<f64>, ModelRunFailure> {
    let fail = |detail: String| ModelRunFailure::SolveDiverged { detail };
    let mut x = matrix
        .solve(rhs)
        .ok_or_else(|| fail(format!("{what}: pivot collapse in banded LU")))?;
    let rel_residual = |x: &[f64]| {
        let ax = matrix.mul_vec(x);
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..rhs.len() {
            num += (ax[i] - rhs[i]).powi(2);
            den += rhs[i].powi(2);
        }
        (num.sqrt()) / den.sqrt().max(f64::MIN_POSITIVE)
    };
    let mut res = rel_residual(&x);
    // One sweep of iterative refinement before declaring failure.
    if !(res < RESIDUAL_TOL) {
        let ax = matrix.mul_vec(&x);
        let r: Vec<f64> = (0..rhs.len()).map(|i| rhs[i] - ax[i]).collect();
        if let Some(dx) = matrix.solve(&r) {
            for i in 0..x.len() {
                x[i] += dx[i];
            }
            res = rel_residual(&x);
        }
    }
    if !(res < RESIDUAL_TOL) {
        return Err(fail(format!("{what}: relative residual {res:.3e}")));
    }
    Ok(x)
}

/// Run the pressure and temperature solves for parameter vector `k`.
pub fn slice_simulate(
    k: &ParameterVector,
    cfg: &SliceConfig,
    fluid: &FluidProperties,
) -> Result<SliceSolution, ModelRunFailure> {
    let perm = map_parameters(k, cfg)?;
    let (nx, nz) = (cfg.nx, cfg.nz);
    let (dx, dz) = (cfg.dx(), cfg.dz());
    let n = nx * nz;
    let idx = |i: usize, j: usize| j * nx + i;
    let rho_g = fluid.density * GRAVITY;
    let nu = fluid.kinematic_viscosity;

    // Source mass inflow per bottom cell (kg/s per metre of thickness),
    // assigned by cell-center membership in the source interval.
    let mut source_mass = vec![0.0; nx];
    for i in 0..nx {
        let xc = (i as f64 + 0.5) * dx;
        if xc >= cfg.source_x.0 && xc < cfg.source_x.1 {
            source_mass[i] = cfg.source_mass_flux * dx;
        }
    }

    // --- Pressure: sum of outgoing mass fluxes equals the cell source.
    // Face flux from cell c to neighbour nb: T_f (p_c - p_nb) + gamma, with
    // gamma = +/- (k_f/nu) A rho g on vertical faces (gravity drives flow
    // downward).
    let mut a = BandedMatrix::zeros(n, nx);
    let mut b = vec![0.0; n];
    for j in 0..nz {
        for i in 0..nx {
            let c = idx(i, j);
            // Horizontal faces.
            if i + 1 < nx {
                let kf = harmonic(perm.kx.values[c], perm.kx.values[idx(i + 1, j)]);
                let t = (kf / nu) * dz / dx;
                a.add(c, c, t);
                a.add(c, idx(i + 1, j), -t);
            }
            if i > 0 {
                let kf = harmonic(perm.kx.values[c], perm.kx.values[idx(i - 1, j)]);
                let t = (kf / nu) * dz / dx;
                a.add(c, c, t);
                a.add(c, idx(i - 1, j), -t);
            }
            // Vertical faces (z increases downward).
            if j + 1 < nz {
                let kf = harmonic(perm.kz.values[c], perm.kz.values[idx(i, j + 1)]);
                let t = (kf / nu) * dx / dz;
                a.add(c, c, t);
                a.add(c, idx(i, j + 1), -t);
                b[c] -= (kf / nu) * dx * rho_g; // gamma toward the cell below
            }
            if j > 0 {
                let kf = harmonic(perm.kz.values[c], perm.kz.values[idx(i, j - 1)]);
                let t = (kf / nu) * dx / dz;
                a.add(c, c, t);
                a.add(c, idx(i, j - 1), -t);
                b[c] += (kf / nu) * dx * rho_g;
            }
            if j == 0 {
                // Dirichlet top boundary at half-cell distance.
                let kf = perm.kz.values[c];
                let t = (kf / nu) * dx / (dz / 2.0);
                a.add(c, c, t);
                b[c] += t * TOP_PRESSURE + (kf / nu) * dx * rho_g;
            }
            if j == nz - 1 {
                // Closed bottom except the mass source.
                b[c] += source_mass[i];
            }
        }
    }
    let pressure = solve_checked(&a, &b, "pressure")?;

    // Mass flux from cell c through its top face (positive = upward outflow);
    // needed for advection and the boundary balance.
    let top_outflux: Vec<f64> = (0..nx)
        .map(|i| {
            let c = idx(i, 0);
            let kf = perm.kz.values[c];
            let t = (kf / nu) * dx / (dz / 2.0);
            t * (pressure[c] - TOP_PRESSURE) - (kf / nu) * dx * rho_g
        })
        .collect();

    // --- Temperature: conduction + upwinded advection.
    let cp = fluid.specific_heat;
    let lambda = cfg.thermal_conductivity;
    let mut at = BandedMatrix::zeros(n, nx);
    let mut bt = vec![0.0; n];
    // Mass flux from c to nb, antisymmetric by construction.
    let mass_flux = |ci: usize, cj: usize, ni: usize, nj: usize| -> f64 {
        let c = idx(ci, cj);
        let nb = idx(ni, nj);
        if cj == nj {
            let kf = harmonic(perm.kx.values[c], perm.kx.values[nb]);
            (kf / nu) * (dz / dx) * (pressure[c] - pressure[nb])
        } else {
            let kf = harmonic(perm.kz.values[c], perm.kz.values[nb]);
            let gravity = (kf / nu) * dx * rho_g;
            let sign = if nj > cj { 1.0 } else { -1.0 };
            (kf / nu) * (dx / dz) * (pressure[c] - pressure[nb]) + sign * gravity
        }
    };
    for j in 0..nz {
        for i in 0..nx {
            let c = idx(i, j);
            let mut neighbours: Vec<(usize, usize)> = Vec::with_capacity(4);
            if i + 1 < nx {
                neighbours.push((i + 1, j));
            }
            if i > 0 {
                neighbours.push((i - 1, j));
            }
            if j + 1 < nz {
                neighbours.push((i, j + 1));
            }
            if j > 0 {
                neighbours.push((i, j - 1));
            }
            for &(ni, nj) in &neighbours {
                let nb = idx(ni, nj);
                let area_over_d = if nj == j { dz / dx } else { dx / dz };
                let cond = lambda * area_over_d;
                at.add(c, c, cond);
                at.add(c, nb, -cond);
                let m = mass_flux(i, j, ni, nj);
                if m > 0.0 {
                    at.add(c, c, cp * m);
                } else {
                    at.add(c, nb, cp * m);
                }
            }
            if j == 0 {
                let cond = lambda * dx / (dz / 2.0);
                at.add(c, c, cond);
                bt[c] += cond * cfg.top_temperature;
                let m = top_outflux[i];
                if m > 0.0 {
                    at.add(c, c, cp * m);
                } else {
                    bt[c] -= cp * m * cfg.top_temperature;
                }
            }
            if j == nz - 1 {
                bt[c] += cfg.basal_heat_flux * dx;
                bt[c] += source_mass[i] * cfg.source_enthalpy * 1e3;
            }
        }
    }
    let temperature = solve_checked(&at, &bt, "temperature")?;

    // Boundary balances (only the top boundary is open).
    let mut energy_in = cfg.basal_heat_flux * cfg.width
        + source_mass.iter().sum::<f64>() * cfg.source_enthalpy * 1e3;
    let mut energy_out = 0.0;
    let mut mass_in: f64 = source_mass.iter().sum();
    let mut mass_out = 0.0;
    for i in 0..nx {
        let c = idx(i, 0);
        let cond = lambda * dx / (dz / 2.0);
        let m = top_outflux[i];
        let advected = if m > 0.0 {
            cp * m * temperature[c]
        } else {
            cp * m * cfg.top_temperature
        };
        let flux = cond * (temperature[c] - cfg.top_temperature) + advected;
        if flux > 0.0 {
            energy_out += flux;
        } else {
            energy_in -= flux;
        }
        if m > 0.0 {
            mass_out += m;
        } else {
            mass_in -= m;
        }
    }

    let field = |values: Vec<f64>| Field {
        nx,
        nz,
        dx,
        dz,
        values,
    };
    Ok(SliceSolution {
        temperature: field(temperature),
        pressure: field(pressure),
        energy_in,
        energy_out,
        mass_in,
        mass_out,
    })
}

/// Sample a cell field at the configured wells; ordering is wells
/// left-to-right, depths shallow-to-deep.
pub fn well_observe(field: &Field, cfg: &SliceConfig) -> ObservationVector {
    let mut out = Vec::with_capacity(cfg.observation_count());
    for well in &cfg.wells {
        for &depth in &well.depths {
            out.push(field.interpolate(well.x, depth));
        }
    }
    ObservationVector::from_vec(out)
}

/// The slice forward model: parameters to well temperatures.
#[derive(Debug, Clone)]
pub struct SliceModel {
    cfg: SliceConfig,
    fluid: FluidProperties,
}

impl SliceModel {
    pub fn new(cfg: SliceConfig) -> Self {
        SliceModel {
            cfg,
            fluid: FluidProperties::default(),
        }
    }

    pub fn config(&self) -> &SliceConfig {
        &self.cfg
    }

    pub fn fluid(&self) -> &FluidProperties {
        &self.fluid
    }

    pub fn simulate(&self, k: &ParameterVector) -> Result<SliceSolution, ModelRunFailure> {
        slice_simulate(k, &self.cfg, &self.fluid)
    }
}

impl ForwardModel for SliceModel {
    fn input_dim(&self) -> usize {
        2 * self.cfg.rock_map.region_count()
    }

    fn output_dim(&self) -> usize {
        self.cfg.observation_count()
    }

    fn evaluate(&self, k: &ParameterVector) -> Result<ObservationVector, ModelRunFailure> {
        check_input(self, k)?;
        let solution = self.simulate(k)?;
        Ok(well_observe(&solution.temperature, &self.cfg))
    }
}
