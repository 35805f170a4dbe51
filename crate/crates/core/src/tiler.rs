//! Greedy hierarchical decomposition of an occupancy grid into compounded
//! blocks: largest pattern first, scanning cells in `(z, y, x)` order.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{mesh_volume, Mesh};
use crate::voxel::{Cell, VoxelGrid, FACE_NEIGHBORS};

pub const TILING_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TileError {
    #[error("pattern set has no 1x1x1 unit pattern")]
    MissingUnitPattern,
    #[error("bad pattern '{0}': expected AxBxC with positive integers")]
    BadPattern(String),
}

/// A compounded block shape, named `"{dx}x{dy}x{dz}"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockPattern {
    pub dims: [i32; 3],
}

impl BlockPattern {
    pub const UNIT: BlockPattern = BlockPattern { dims: [1, 1, 1] };

    pub fn new(dx: i32, dy: i32, dz: i32) -> Self {
        assert!(dx >= 1 && dy >= 1 && dz >= 1, "pattern dims must be >= 1");
        BlockPattern { dims: [dx, dy, dz] }
    }

    pub fn voxel_count(&self) -> usize {
        (self.dims[0] * self.dims[1] * self.dims[2]) as usize
    }

    pub fn is_unit(&self) -> bool {
        *self == Self::UNIT
    }

    pub fn id(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for BlockPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.dims[0], self.dims[1], self.dims[2])
    }
}

impl FromStr for BlockPattern {
    type Err = TileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TileError::BadPattern(s.to_string());
        let parts: Vec<i32> = s
            .trim()
            .split(['x', 'X'])
            .map(|p| p.trim().parse::<i32>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [dx, dy, dz] if dx >= 1 && dy >= 1 && dz >= 1 => Ok(BlockPattern::new(dx, dy, dz)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for BlockPattern {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BlockPattern {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses a comma-separated list such as `"4x2x2,1x1x1"`.
pub fn parse_pattern_list(s: &str) -> Result<Vec<BlockPattern>, TileError> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

pub fn default_patterns() -> Vec<BlockPattern> {
    vec![
        BlockPattern::new(4, 2, 2),
        BlockPattern::new(2, 3, 1),
        BlockPattern::new(2, 2, 1),
        BlockPattern::UNIT,
    ]
}

/// Quarter turn about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Rotation {
    #[default]
    R0,
    R90,
}

impl Serialize for Rotation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u32(match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
        })
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match u32::deserialize(d)? {
            0 => Ok(Rotation::R0),
            90 => Ok(Rotation::R90),
            other => Err(serde::de::Error::custom(format!("rotation must be 0 or 90, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Structure,
    Scaffold,
    BasePlate,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockPlacement {
    pub pattern: BlockPattern,
    pub anchor: Cell,
    pub rot: Rotation,
    #[serde(default)]
    pub role: Role,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub stagger_violation: bool,
}

/// Axis-aligned horizontal rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl Rect {
    pub fn new(x0: i32, y0: i32, w: i32, h: i32) -> Self {
        Rect { x0, y0, x1: x0 + w, y1: y0 + h }
    }

    pub fn overlaps(&self, o: &Rect) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }

    pub fn contains_rect(&self, o: &Rect) -> bool {
        o.x0 >= self.x0 && o.x1 <= self.x1 && o.y0 >= self.y0 && o.y1 <= self.y1
    }

    pub fn contains(&self, x: i32, y: i32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Manhattan gap between two rectangles in cells; 0 when touching or overlapping.
    pub fn gap(&self, o: &Rect) -> i32 {
        let gx = (o.x0 - self.x1).max(self.x0 - o.x1).max(0);
        let gy = (o.y0 - self.y1).max(self.y0 - o.y1).max(0);
        gx + gy
    }

    pub fn cells(self) -> impl Iterator<Item = (i32, i32)> {
        (self.y0..self.y1).flat_map(move |y| (self.x0..self.x1).map(move |x| (x, y)))
    }
}

impl BlockPlacement {
    pub fn new(pattern: BlockPattern, anchor: Cell, rot: Rotation, role: Role) -> Self {
        BlockPlacement { pattern, anchor, rot, role, stagger_violation: false }
    }

    /// Extent after rotation.
    pub fn size(&self) -> [i32; 3] {
        let [dx, dy, dz] = self.pattern.dims;
        match self.rot {
            Rotation::R0 => [dx, dy, dz],
            Rotation::R90 => [dy, dx, dz],
        }
    }

    pub fn layer(&self) -> i32 {
        self.anchor[2]
    }

    /// First free layer above the block.
    pub fn top(&self) -> i32 {
        self.anchor[2] + self.size()[2]
    }

    pub fn footprint(&self) -> Rect {
        let s = self.size();
        Rect::new(self.anchor[0], self.anchor[1], s[0], s[1])
    }

    pub fn voxel_count(&self) -> usize {
        self.pattern.voxel_count()
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> {
        let [ax, ay, az] = self.anchor;
        let [sx, sy, sz] = self.size();
        (az..az + sz).flat_map(move |z| (ay..ay + sy).flat_map(move |y| (ax..ax + sx).map(move |x| [x, y, z])))
    }

    /// Centroid in doubled voxel units (keeps ties exact).
    pub fn centroid2(&self) -> [i32; 3] {
        let s = self.size();
        [2 * self.anchor[0] + s[0], 2 * self.anchor[1] + s[1], 2 * self.anchor[2] + s[2]]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tiling {
    pub placements: Vec<BlockPlacement>,
    pub uncovered: Vec<Cell>,
}

impl Tiling {
    pub fn covered_count(&self) -> usize {
        self.placements.iter().map(|p| p.voxel_count()).sum()
    }

    pub fn stagger_violations(&self) -> usize {
        self.placements.iter().filter(|p| p.stagger_violation).count()
    }

    pub fn to_file(&self, grid: &VoxelGrid) -> TilingFile {
        TilingFile {
            schema_version: TILING_SCHEMA_VERSION,
            pitch_mm: grid.pitch_mm(),
            origin_mm: grid.origin_mm(),
            dims: grid.dims(),
            placements: self.placements.clone(),
        }
    }
}

/// On-disk tiling. Grid metadata travels along so later stages can rebuild
/// the target occupancy without the grid file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilingFile {
    #[serde(default = "tiling_schema_version")]
    pub schema_version: u32,
    pub pitch_mm: f64,
    pub origin_mm: [f64; 3],
    pub dims: [usize; 3],
    pub placements: Vec<BlockPlacement>,
}

fn tiling_schema_version() -> u32 {
    TILING_SCHEMA_VERSION
}

impl TilingFile {
    pub fn tiling(&self) -> Tiling {
        Tiling { placements: self.placements.clone(), uncovered: Vec::new() }
    }

    /// Occupancy covered by the structure placements.
    pub fn target_grid(&self) -> VoxelGrid {
        let mut g = VoxelGrid::new(self.pitch_mm, self.origin_mm, self.dims);
        for p in &self.placements {
            for c in p.cells() {
                if g.in_bounds(c) {
                    g.set(c, true);
                }
            }
        }
        g
    }
}

/// Patterns by descending voxel count, input order breaking ties, duplicates removed.
fn by_priority(patterns: &[BlockPattern]) -> Vec<BlockPattern> {
    let mut out: Vec<BlockPattern> = Vec::new();
    for p in patterns {
        if !out.contains(p) {
            out.push(*p);
        }
    }
    out.sort_by_key(|p| std::cmp::Reverse(p.voxel_count()));
    out
}

/// Exact cover of the occupied cells. Requires the unit pattern.
pub fn tile(grid: &VoxelGrid, patterns: &[BlockPattern]) -> Result<Tiling, TileError> {
    if !patterns.iter().any(BlockPattern::is_unit) {
        return Err(TileError::MissingUnitPattern);
    }
    Ok(tile_greedy(grid, patterns))
}

/// Greedy scan that tolerates pattern sets without a unit block; cells no
/// pattern can cover end up in `uncovered`.
///
/// At each uncovered occupied cell (scan order `(z, y, x)`), patterns are
/// tried by priority with rotations 0 then 90 degrees, anchored at that cell.
/// Among the fitting rotations of the first pattern that fits, a rotation
/// whose seams do not stack exactly on the blocks below is preferred; when
/// every fitting rotation stacks flush the first is placed and marked.
pub fn tile_greedy(grid: &VoxelGrid, patterns: &[BlockPattern]) -> Tiling {
    let order = by_priority(patterns);
    let mut owner: Vec<Option<usize>> = vec![None; grid.len()];
    let idx = |c: Cell| -> usize {
        let d = grid.dims();
        c[0] as usize + d[0] * (c[1] as usize + d[1] * c[2] as usize)
    };
    let mut tiling = Tiling::default();

    for cell in grid.occupied().collect::<Vec<_>>() {
        if owner[idx(cell)].is_some() {
            continue;
        }
        let mut chosen = None;
        for pattern in &order {
            let rotations: &[Rotation] = if pattern.dims[0] == pattern.dims[1] {
                &[Rotation::R0]
            } else {
                &[Rotation::R0, Rotation::R90]
            };
            let fitting: Vec<BlockPlacement> = rotations
                .iter()
                .map(|&rot| BlockPlacement::new(*pattern, cell, rot, Role::Structure))
                .filter(|p| p.cells().all(|c| grid.get(c) && owner[idx(c)].is_none()))
                .collect();
            if fitting.is_empty() {
                continue;
            }
            let flush = |p: &BlockPlacement| stacks_flush(p, grid, &owner, &tiling.placements, idx);
            chosen = Some(match fitting.iter().find(|p| !flush(p)) {
                Some(p) => p.clone(),
                None => {
                    let mut p = fitting[0].clone();
                    p.stagger_violation = true;
                    p
                }
            });
            break;
        }
        match chosen {
            Some(p) => {
                let i = tiling.placements.len();
                for c in p.cells() {
                    owner[idx(c)] = Some(i);
                }
                tiling.placements.push(p);
            }
            None => tiling.uncovered.push(cell),
        }
    }
    tiling
}

/// True when every cell under the footprint is covered and no block below
/// crosses the footprint boundary: the vertical seams line up exactly.
fn stacks_flush(
    p: &BlockPlacement,
    grid: &VoxelGrid,
    owner: &[Option<usize>],
    placed: &[BlockPlacement],
    idx: impl Fn(Cell) -> usize,
) -> bool {
    let z = p.layer();
    if z == 0 {
        return false;
    }
    let fp = p.footprint();
    fp.cells().all(|(x, y)| {
        let below = [x, y, z - 1];
        grid.get(below)
            && owner[idx(below)].is_some_and(|o| fp.contains_rect(&placed[o].footprint()))
    })
}

/// Indices of placements above the base layer with no face contact to any
/// other placement.
pub fn check_block_connectivity(tiling: &Tiling) -> Vec<usize> {
    let mut owner: HashMap<Cell, usize> = HashMap::new();
    for (i, p) in tiling.placements.iter().enumerate() {
        for c in p.cells() {
            owner.insert(c, i);
        }
    }
    tiling
        .placements
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            p.layer() > 0
                && !p.cells().any(|c| {
                    FACE_NEIGHBORS.iter().any(|d| {
                        owner
                            .get(&[c[0] + d[0], c[1] + d[1], c[2] + d[2]])
                            .is_some_and(|o| o != i)
                    })
                })
        })
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub pattern_set: String,
    pub placement_count: usize,
    pub covered_voxels: usize,
    pub coverage: f64,
    pub precision: f64,
}

pub fn pattern_set_name(set: &[BlockPattern]) -> String {
    set.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("+")
}

/// Placement count and achieved precision per pattern set. Sets with the
/// unit block cover exactly; others report their coverage fraction.
pub fn pareto_report(grid: &VoxelGrid, mesh: &Mesh, pattern_sets: &[Vec<BlockPattern>]) -> Vec<ParetoRow> {
    let v_mesh = mesh_volume(mesh).volume_mm3;
    let occupied = grid.occupied_count();
    pattern_sets
        .iter()
        .map(|set| {
            let t = tile_greedy(grid, set);
            let covered = t.covered_count();
            ParetoRow {
                pattern_set: pattern_set_name(set),
                placement_count: t.placements.len(),
                covered_voxels: covered,
                coverage: if occupied == 0 { 1.0 } else { covered as f64 / occupied as f64 },
                precision: if v_mesh > 0.0 { covered as f64 * grid.voxel_volume_mm3() / v_mesh } else { 0.0 },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> BlockPattern {
        s.parse().unwrap()
    }

    #[test]
    fn pattern_parsing() {
        assert_eq!(p("4x2x2").dims, [4, 2, 2]);
        assert_eq!(parse_pattern_list("4x2x2, 1x1x1").unwrap(), vec![p("4x2x2"), BlockPattern::UNIT]);
        assert!("4x2".parse::<BlockPattern>().is_err());
        assert!("0x1x1".parse::<BlockPattern>().is_err());
    }

    #[test]
    fn cube_four_blocks_alternating() {
        let g = VoxelGrid::filled([4, 4, 4]);
        let t = tile(&g, &[p("4x2x2"), BlockPattern::UNIT]).unwrap();
        assert_eq!(t.placements.len(), 4);
        assert!(t.placements.iter().all(|b| b.pattern == p("4x2x2") && !b.stagger_violation));
        let rots: Vec<_> = t.placements.iter().map(|b| (b.layer(), b.rot)).collect();
        assert_eq!(
            rots,
            vec![(0, Rotation::R0), (0, Rotation::R0), (2, Rotation::R90), (2, Rotation::R90)]
        );
        assert!(check_block_connectivity(&t).is_empty());
    }

    #[test]
    fn single_voxel() {
        let mut g = VoxelGrid::new(65.0, [0.0; 3], [3, 3, 3]);
        g.set([1, 1, 1], true);
        let t = tile(&g, &default_patterns()).unwrap();
        assert_eq!(t.placements, vec![BlockPlacement::new(BlockPattern::UNIT, [1, 1, 1], Rotation::R0, Role::Structure)]);
    }

    #[test]
    fn slab_5x2x2() {
        let g = VoxelGrid::filled([5, 2, 2]);
        let t = tile(&g, &[p("4x2x2"), BlockPattern::UNIT]).unwrap();
        let big = t.placements.iter().filter(|b| b.pattern == p("4x2x2")).count();
        let unit = t.placements.iter().filter(|b| b.pattern.is_unit()).count();
        assert_eq!((big, unit), (1, 4));
        // exact cover by enumeration
        let mut cells: Vec<Cell> = t.placements.iter().flat_map(|b| b.cells()).collect();
        cells.sort_by_key(|c| (c[2], c[1], c[0]));
        assert_eq!(cells, g.occupied().collect::<Vec<_>>());
    }

    #[test]
    fn missing_unit() {
        let g = VoxelGrid::filled([2, 2, 2]);
        assert_eq!(tile(&g, &[p("2x2x2")]), Err(TileError::MissingUnitPattern));
    }

    #[test]
    fn connectivity_flags_diagonal_floaters() {
        let t = Tiling {
            placements: vec![
                BlockPlacement::new(BlockPattern::UNIT, [0, 0, 1], Rotation::R0, Role::Structure),
                BlockPlacement::new(BlockPattern::UNIT, [1, 1, 1], Rotation::R0, Role::Structure),
            ],
            uncovered: vec![],
        };
        assert_eq!(check_block_connectivity(&t), vec![0, 1]);
        let base = Tiling {
            placements: vec![BlockPlacement::new(p("4x2x2"), [3, 3, 0], Rotation::R0, Role::Structure)],
            uncovered: vec![],
        };
        assert!(check_block_connectivity(&base).is_empty());
    }

    #[test]
    fn flush_stack_is_marked_when_forced() {
        // a 2-wide wall forces 4x2x2 on top of 4x2x2 with identical footprints
        let g = VoxelGrid::filled([4, 2, 4]);
        let t = tile(&g, &[p("4x2x2"), BlockPattern::UNIT]).unwrap();
        assert_eq!(t.placements.len(), 2);
        assert!(!t.placements[0].stagger_violation);
        assert!(t.placements[1].stagger_violation);
    }

    #[test]
    fn placement_json_shape() {
        let b = BlockPlacement::new(p("4x2x2"), [0, 2, 0], Rotation::R90, Role::Structure);
        let v = serde_json::to_value(&b).unwrap();
        assert_eq!(v, serde_json::json!({"pattern": "4x2x2", "anchor": [0, 2, 0], "rot": 90, "role": "structure"}));
        let back: BlockPlacement = serde_json::from_value(v).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.size(), [2, 4, 2]);
    }

    #[test]
    fn pareto_cube_counts() {
        let mesh = crate::mesh::box_mesh([0.0; 3], [260.0; 3]);
        let g = VoxelGrid::filled([4, 4, 4]);
        let rows = pareto_report(&g, &mesh, &[vec![BlockPattern::UNIT], vec![p("4x2x2"), BlockPattern::UNIT]]);
        assert_eq!(rows[0].placement_count, 64);
        assert_eq!(rows[1].placement_count, 4);
        assert_eq!(rows[0].precision, rows[1].precision);
        let empty = VoxelGrid::new(65.0, [0.0; 3], [2, 2, 2]);
        let rows = pareto_report(&empty, &mesh, &[vec![BlockPattern::UNIT]]);
        assert_eq!(rows[0].placement_count, 0);
    }
}
