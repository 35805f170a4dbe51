//! Occupancy lattice at the block pitch, mesh voxelization and the
//! voxel-count precision metric.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{cross, dot, mesh_bounds, mesh_volume, sub, Mesh, MeshError, Point3};

pub const DEFAULT_PITCH_MM: f64 = 65.0;
pub const GRID_SCHEMA_VERSION: u32 = 1;

/// Integer lattice coordinate `(x, y, z)`, z up.
pub type Cell = [i32; 3];

const EDGE_EPS: f64 = 1e-9;
const JITTER_SEED: u64 = 0x6a17_7e4e_d5ee_d001;
const MAX_RAY_ATTEMPTS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VoxelError {
    #[error("mesh bounds have zero extent along an axis")]
    DegenerateMesh,
    #[error("mesh volume is zero")]
    ZeroMeshVolume,
    #[error("pitch must be positive, got {0}")]
    InvalidPitch(f64),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("invalid grid file: {0}")]
    InvalidGrid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Alignment {
    #[default]
    MinCorner,
    Centered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pitch_mm: f64,
    origin_mm: Point3,
    dims: [usize; 3],
    occupancy: Vec<bool>,
}

impl VoxelGrid {
    pub fn new(pitch_mm: f64, origin_mm: Point3, dims: [usize; 3]) -> Self {
        assert!(pitch_mm > 0.0, "pitch must be positive");
        let dims = dims.map(|d| d.max(1));
        VoxelGrid { pitch_mm, origin_mm, dims, occupancy: vec![false; dims[0] * dims[1] * dims[2]] }
    }

    /// Grid of `dims` with every cell occupied, origin at zero.
    pub fn filled(dims: [usize; 3]) -> Self {
        let mut g = VoxelGrid::new(DEFAULT_PITCH_MM, [0.0; 3], dims);
        g.occupancy.iter_mut().for_each(|c| *c = true);
        g
    }

    pub fn pitch_mm(&self) -> f64 {
        self.pitch_mm
    }

    pub fn origin_mm(&self) -> Point3 {
        self.origin_mm
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied_count() == 0
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.pitch_mm.powi(3)
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        (0..3).all(|i| c[i] >= 0 && (c[i] as usize) < self.dims[i])
    }

    fn index(&self, c: Cell) -> usize {
        c[0] as usize + self.dims[0] * (c[1] as usize + self.dims[1] * c[2] as usize)
    }

    fn cell_at(&self, idx: usize) -> Cell {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x as i32, y as i32, z as i32]
    }

    /// Out-of-bounds cells read as empty.
    pub fn get(&self, c: Cell) -> bool {
        self.in_bounds(c) && self.occupancy[self.index(c)]
    }

    pub fn set(&mut self, c: Cell, value: bool) {
        assert!(self.in_bounds(c), "cell {c:?} outside grid {:?}", self.dims);
        let i = self.index(c);
        self.occupancy[i] = value;
    }

    /// Marks the box `[min, min + size)`; panics if it leaves the grid.
    pub fn fill_box(&mut self, min: Cell, size: [i32; 3]) {
        for z in min[2]..min[2] + size[2] {
            for y in min[1]..min[1] + size[1] {
                for x in min[0]..min[0] + size[0] {
                    self.set([x, y, z], true);
                }
            }
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&b| b).count()
    }

    /// Occupied cells in lexicographic `(z, y, x)` order.
    pub fn occupied(&self) -> impl Iterator<Item = Cell> + '_ {
        self.occupancy
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| self.cell_at(i))
    }

    /// Centre of a cell in world millimetres.
    pub fn cell_center(&self, c: Cell) -> Point3 {
        [
            self.origin_mm[0] + (c[0] as f64 + 0.5) * self.pitch_mm,
            self.origin_mm[1] + (c[1] as f64 + 0.5) * self.pitch_mm,
            self.origin_mm[2] + (c[2] as f64 + 0.5) * self.pitch_mm,
        ]
    }

    pub fn to_file(&self) -> GridFile {
        GridFile {
            schema_version: GRID_SCHEMA_VERSION,
            pitch_mm: self.pitch_mm,
            origin_mm: self.origin_mm,
            dims: self.dims,
            occupied: self.occupied().collect(),
        }
    }

    pub fn from_file(file: &GridFile) -> Result<Self, VoxelError> {
        if !(file.pitch_mm > 0.0) {
            return Err(VoxelError::InvalidPitch(file.pitch_mm));
        }
        if file.dims.contains(&0) {
            return Err(VoxelError::InvalidGrid("dims must be >= 1".into()));
        }
        let mut g = VoxelGrid::new(file.pitch_mm, file.origin_mm, file.dims);
        for &c in &file.occupied {
            if !g.in_bounds(c) {
                return Err(VoxelError::InvalidGrid(format!("cell {c:?} outside dims {:?}", file.dims)));
            }
            g.set(c, true);
        }
        Ok(g)
    }
}

/// On-disk grid: the contract between pipeline stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFile {
    #[serde(default = "grid_schema_version")]
    pub schema_version: u32,
    pub pitch_mm: f64,
    pub origin_mm: Point3,
    pub dims: [usize; 3],
    pub occupied: Vec<Cell>,
}

fn grid_schema_version() -> u32 {
    GRID_SCHEMA_VERSION
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub n_voxel: usize,
    pub v_voxel_mm3: f64,
    pub v_mesh_mm3: f64,
    pub precision: f64,
    pub watertight: bool,
}

struct Tri {
    v: [Point3; 3],
    yz_min: [f64; 2],
    yz_max: [f64; 2],
}

enum RayResult {
    Crossings(usize),
    Degenerate,
}

fn cast(tris: &[Tri], origin: Point3, dir: Point3, axis_aligned: bool, strict: bool) -> RayResult {
    let mut crossings = 0;
    for tri in tris {
        if axis_aligned
            && (origin[1] < tri.yz_min[0] - EDGE_EPS
                || origin[1] > tri.yz_max[0] + EDGE_EPS
                || origin[2] < tri.yz_min[1] - EDGE_EPS
                || origin[2] > tri.yz_max[1] + EDGE_EPS)
        {
            continue;
        }
        // Moller-Trumbore
        let e1 = sub(tri.v[1], tri.v[0]);
        let e2 = sub(tri.v[2], tri.v[0]);
        let p = cross(dir, e2);
        let det = dot(e1, p);
        let scale = dot(e1, e1).sqrt() * dot(e2, e2).sqrt();
        if det.abs() <= 1e-12 * scale {
            continue;
        }
        let inv = 1.0 / det;
        let s = sub(origin, tri.v[0]);
        let u = dot(s, p) * inv;
        if !(-EDGE_EPS..=1.0 + EDGE_EPS).contains(&u) {
            continue;
        }
        let q = cross(s, e1);
        let v = dot(dir, q) * inv;
        if v < -EDGE_EPS || u + v > 1.0 + EDGE_EPS {
            continue;
        }
        let t = dot(e2, q) * inv;
        if t <= 0.0 {
            continue;
        }
        if strict && (u < EDGE_EPS || v < EDGE_EPS || u + v > 1.0 - EDGE_EPS) {
            return RayResult::Degenerate;
        }
        crossings += 1;
    }
    RayResult::Crossings(crossings)
}

fn jitter_directions() -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(JITTER_SEED);
    (0..MAX_RAY_ATTEMPTS)
        .map(|_| [1.0, rng.gen_range(-1e-3..1e-3), rng.gen_range(-1e-3..1e-3)])
        .collect()
}

fn point_inside(tris: &[Tri], p: Point3, jitter: &[Point3]) -> bool {
    if let RayResult::Crossings(n) = cast(tris, p, [1.0, 0.0, 0.0], true, true) {
        return n % 2 == 1;
    }
    for &dir in jitter {
        if let RayResult::Crossings(n) = cast(tris, p, dir, false, true) {
            return n % 2 == 1;
        }
    }
    // every jittered ray grazed an edge; accept the last one as is
    match cast(tris, p, jitter[jitter.len() - 1], false, false) {
        RayResult::Crossings(n) => n % 2 == 1,
        RayResult::Degenerate => unreachable!(),
    }
}

/// Center-containment voxelization by ray parity along +x.
pub fn voxelize(mesh: &Mesh, pitch_mm: f64, alignment: Alignment) -> Result<VoxelGrid, VoxelError> {
    if !(pitch_mm > 0.0) {
        return Err(VoxelError::InvalidPitch(pitch_mm));
    }
    let bounds = mesh_bounds(mesh)?;
    let extent = bounds.extent();
    if extent.iter().any(|&e| e <= 0.0) {
        return Err(VoxelError::DegenerateMesh);
    }
    let mut dims = [0usize; 3];
    let mut origin = bounds.min;
    for i in 0..3 {
        dims[i] = ((extent[i] / pitch_mm - 1e-9).ceil() as usize).max(1);
        if alignment == Alignment::Centered {
            let slack = dims[i] as f64 * pitch_mm - extent[i];
            origin[i] -= slack / 2.0;
        }
    }
    let tris: Vec<Tri> = mesh
        .facets()
        .map(|v| Tri {
            v,
            yz_min: [v[0][1].min(v[1][1]).min(v[2][1]), v[0][2].min(v[1][2]).min(v[2][2])],
            yz_max: [v[0][1].max(v[1][1]).max(v[2][1]), v[0][2].max(v[1][2]).max(v[2][2])],
        })
        .collect();
    let jitter = jitter_directions();
    let mut grid = VoxelGrid::new(pitch_mm, origin, dims);
    let centers: Vec<Point3> = (0..grid.len()).map(|i| grid.cell_center(grid.cell_at(i))).collect();
    grid.occupancy = centers.par_iter().map(|&p| point_inside(&tris, p, &jitter)).collect();
    Ok(grid)
}

pub fn precision(grid: &VoxelGrid, mesh: &Mesh) -> Result<PrecisionReport, VoxelError> {
    let vol = mesh_volume(mesh);
    precision_from_volume(grid.occupied_count(), grid.pitch_mm, vol.volume_mm3, vol.watertight)
}

pub fn precision_from_volume(
    n_voxel: usize,
    pitch_mm: f64,
    v_mesh_mm3: f64,
    watertight: bool,
) -> Result<PrecisionReport, VoxelError> {
    if !(v_mesh_mm3 > 0.0) {
        return Err(VoxelError::ZeroMeshVolume);
    }
    let v_voxel_mm3 = pitch_mm.powi(3);
    Ok(PrecisionReport {
        n_voxel,
        v_voxel_mm3,
        v_mesh_mm3,
        precision: n_voxel as f64 * v_voxel_mm3 / v_mesh_mm3,
        watertight,
    })
}

pub const FACE_NEIGHBORS: [[i32; 3]; 6] =
    [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

/// Face-connected components, each sorted in scan order; components ordered
/// by their first cell.
pub fn connected_components(grid: &VoxelGrid) -> Vec<Vec<Cell>> {
    let mut seen = vec![false; grid.len()];
    let mut out = Vec::new();
    for start in grid.occupied().collect::<Vec<_>>() {
        if seen[grid.index(start)] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[grid.index(start)] = true;
        while let Some(c) = queue.pop_front() {
            comp.push(c);
            for d in FACE_NEIGHBORS {
                let n = [c[0] + d[0], c[1] + d[1], c[2] + d[2]];
                if grid.get(n) && !seen[grid.index(n)] {
                    seen[grid.index(n)] = true;
                    queue.push_back(n);
                }
            }
        }
        comp.sort_by_key(|c| (c[2], c[1], c[0]));
        out.push(comp);
    }
    out
}
