//! Foothold graph and A* walk planning over a partially built structure.
//!
//! A robot stands centred on a 2x2 platform. The floor below z = 0 counts as a
//! platform everywhere inside the planning area, so ground stances sit at
//! z = -1.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tiler::{BlockPlacement, Rect};
use crate::voxel::{Cell, VoxelGrid};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PathError {
    #[error("no path from {from:?} to the goal")]
    NoPath { from: Foothold },
    #[error("{0:?} is not a valid stance")]
    InvalidStance(Foothold),
    #[error("no stance can reach the placement at {0:?}")]
    NoStance(Cell),
    #[error("placement at {0:?} overlaps occupied cells")]
    PlacementBlocked(Cell),
}

/// Gait and reach limits. All lengths are in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotModel {
    /// Largest |dx| + |dy| of one step.
    pub step_xy: i32,
    /// Largest |dz| of one step.
    pub step_z: i32,
    /// Clear height the body needs above a stance.
    pub robot_height: i32,
    /// A block whose bottom layer is up to this far above the feet can be placed.
    pub reach_up: i32,
    /// ... and up to this far below.
    pub reach_down: i32,
    /// Nearest allowed distance, in pitches, from the stance node to the block footprint.
    pub arm_min: i32,
    /// Farthest allowed distance from the stance node to the block footprint.
    pub arm_max: i32,
}

impl Default for RobotModel {
    fn default() -> Self {
        RobotModel { step_xy: 2, step_z: 2, robot_height: 4, reach_up: 2, reach_down: 2, arm_min: 2, arm_max: 4 }
    }
}

/// A 2x2 stance: window min corner `(x, y)` on a platform whose top layer is `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i32; 3]", into = "[i32; 3]")]
pub struct Foothold {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl From<[i32; 3]> for Foothold {
    fn from(a: [i32; 3]) -> Self {
        Foothold { x: a[0], y: a[1], z: a[2] }
    }
}

impl From<Foothold> for [i32; 3] {
    fn from(f: Foothold) -> Self {
        [f.x, f.y, f.z]
    }
}

impl Foothold {
    pub fn new(x: i32, y: i32, z: i32) -> Self {
        Foothold { x, y, z }
    }

    pub fn window(&self) -> Rect {
        Rect::new(self.x, self.y, 2, 2)
    }

    /// Height of the feet: the first free layer.
    pub fn feet(&self) -> i32 {
        self.z + 1
    }

    /// Chebyshev distance from the window centre point to a footprint.
    pub fn node_distance(&self, fp: &Rect) -> i32 {
        let (nx, ny) = (self.x + 1, self.y + 1);
        let dx = (fp.x0 - nx).max(nx - fp.x1).max(0);
        let dy = (fp.y0 - ny).max(ny - fp.y1).max(0);
        dx.max(dy)
    }

    /// Body volume as `(window, z range)` with the range inclusive.
    pub fn body(&self, model: &RobotModel) -> (Rect, i32, i32) {
        (self.window(), self.z + 1, self.z + model.robot_height)
    }

    pub fn body_overlaps(&self, other: &Foothold, model: &RobotModel) -> bool {
        let (ra, a0, a1) = self.body(model);
        let (rb, b0, b1) = other.body(model);
        ra.overlaps(&rb) && a0 <= b1 && b0 <= a1
    }

    pub fn body_hits_cells(&self, cells: impl IntoIterator<Item = Cell>, model: &RobotModel) -> bool {
        let (r, z0, z1) = self.body(model);
        cells.into_iter().any(|c| r.contains(c[0], c[1]) && c[2] >= z0 && c[2] <= z1)
    }
}

/// Occupancy snapshot for planning: a dense box with a solid floor below z = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    min: [i32; 2],
    size: [i32; 3],
    cells: Vec<bool>,
}

impl World {
    /// Planning area `[min, max)` in x/y, `height` layers tall.
    pub fn new(min: [i32; 2], max: [i32; 2], height: i32) -> Self {
        let size = [(max[0] - min[0]).max(2), (max[1] - min[1]).max(2), height.max(1)];
        World { min, size, cells: vec![false; (size[0] * size[1] * size[2]) as usize] }
    }

    /// Planning area around a grid, padded by `margin` cells on every side
    /// and with head room for a standing robot on the top layer.
    pub fn around(grid: &VoxelGrid, margin: i32, model: &RobotModel) -> Self {
        let d = grid.dims().map(|v| v as i32);
        World::new([-margin, -margin], [d[0] + margin, d[1] + margin], d[2] + model.robot_height + 2)
    }

    /// Grows the planning area to include `rect` (plus `pad`).
    pub fn include(&mut self, rect: Rect, pad: i32) {
        let min = [self.min[0].min(rect.x0 - pad), self.min[1].min(rect.y0 - pad)];
        let max = [
            (self.min[0] + self.size[0]).max(rect.x1 + pad),
            (self.min[1] + self.size[1]).max(rect.y1 + pad),
        ];
        if min == self.min && max == [self.min[0] + self.size[0], self.min[1] + self.size[1]] {
            return;
        }
        let mut grown = World::new(min, max, self.size[2]);
        for c in self.occupied() {
            grown.set(c, true);
        }
        *self = grown;
    }

    pub fn xy_rect(&self) -> Rect {
        Rect::new(self.min[0], self.min[1], self.size[0], self.size[1])
    }

    pub fn height(&self) -> i32 {
        self.size[2]
    }

    fn index(&self, c: Cell) -> Option<usize> {
        let x = c[0] - self.min[0];
        let y = c[1] - self.min[1];
        if x < 0 || y < 0 || c[2] < 0 || x >= self.size[0] || y >= self.size[1] || c[2] >= self.size[2] {
            return None;
        }
        Some((x + self.size[0] * (y + self.size[1] * c[2])) as usize)
    }

    /// Solid floor below z = 0; empty outside the box.
    pub fn get(&self, c: Cell) -> bool {
        if c[2] < 0 {
            return self.xy_rect().contains(c[0], c[1]);
        }
        self.index(c).is_some_and(|i| self.cells[i])
    }

    pub fn set(&mut self, c: Cell, value: bool) {
        let i = self.index(c).unwrap_or_else(|| panic!("cell {c:?} outside planning area"));
        self.cells[i] = value;
    }

    pub fn contains_cell(&self, c: Cell) -> bool {
        self.index(c).is_some()
    }

    pub fn occupied(&self) -> impl Iterator<Item = Cell> + '_ {
        let [sx, sy, _] = self.size;
        let min = self.min;
        self.cells.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| {
            let i = i as i32;
            [min[0] + i % sx, min[1] + (i / sx) % sy, i / (sx * sy)]
        })
    }

    pub fn place(&mut self, p: &BlockPlacement) {
        for c in p.cells() {
            self.set(c, true);
        }
    }

    pub fn is_free(&self, p: &BlockPlacement) -> bool {
        p.cells().all(|c| self.contains_cell(c) && !self.get(c))
    }

    pub fn is_foothold(&self, f: Foothold) -> bool {
        let w = f.window();
        if !self.xy_rect().contains_rect(&w) || f.z < -1 {
            return false;
        }
        w.cells().all(|(x, y)| self.get([x, y, f.z]) && !self.get([x, y, f.z + 1]))
    }

    fn column_clear(&self, f: Foothold, top: i32) -> bool {
        f.window()
            .cells()
            .all(|(x, y)| (f.z + 1..=top).all(|z| !self.get([x, y, z])))
    }

    /// Step rule: horizontal offset 1..=step_xy, vertical at most step_z, and
    /// the columns over both stances clear up to the higher stance plus the
    /// robot height.
    pub fn step_ok(&self, a: Foothold, b: Foothold, model: &RobotModel) -> bool {
        let dxy = (a.x - b.x).abs() + (a.y - b.y).abs();
        if dxy < 1 || dxy > model.step_xy || (a.z - b.z).abs() > model.step_z {
            return false;
        }
        let top = a.z.max(b.z) + model.robot_height;
        self.column_clear(a, top) && self.column_clear(b, top)
    }

    pub fn neighbors(&self, f: Foothold, model: &RobotModel) -> Vec<Foothold> {
        let mut out = Vec::new();
        for dx in -model.step_xy..=model.step_xy {
            for dy in -model.step_xy..=model.step_xy {
                let m = dx.abs() + dy.abs();
                if m == 0 || m > model.step_xy {
                    continue;
                }
                for dz in -model.step_z..=model.step_z {
                    let n = Foothold::new(f.x + dx, f.y + dy, f.z + dz);
                    if self.is_foothold(n) && self.step_ok(f, n, model) {
                        out.push(n);
                    }
                }
            }
        }
        out
    }
}

/// Every valid stance in the planning area.
pub fn footholds(world: &World) -> Vec<Foothold> {
    let r = world.xy_rect();
    let mut out = Vec::new();
    for z in -1..world.height() {
        for y in r.y0..r.y1 - 1 {
            for x in r.x0..r.x1 - 1 {
                let f = Foothold::new(x, y, z);
                if world.is_foothold(f) {
                    out.push(f);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkPath {
    pub stances: Vec<Foothold>,
    pub cost: u32,
}

impl WalkPath {
    pub fn goal(&self) -> Foothold {
        *self.stances.last().expect("path has a stance")
    }
}

/// A* bookkeeping for one open-list entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchNode {
    pub foothold: Foothold,
    pub g: u32,
    pub h: u32,
    pub f: u32,
    pub parent: Option<Foothold>,
}

impl Ord for SearchNode {
    // min-heap on (f, h, foothold) through Reverse
    fn cmp(&self, other: &Self) -> Ordering {
        (self.f, self.h, self.foothold).cmp(&(other.f, other.h, other.foothold))
    }
}

impl PartialOrd for SearchNode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn div_ceil(a: i32, b: i32) -> u32 {
    ((a + b - 1) / b) as u32
}

/// Manhattan distance measured in steps: the horizontal Manhattan distance
/// over the horizontal step reach, or the vertical distance over the
/// vertical step reach, whichever is larger. Never overestimates.
pub fn heuristic(a: Foothold, b: Foothold, model: &RobotModel) -> u32 {
    let mxy = (a.x - b.x).abs() + (a.y - b.y).abs();
    let mz = (a.z - b.z).abs();
    div_ceil(mxy, model.step_xy).max(div_ceil(mz, model.step_z))
}

pub fn plan_path(world: &World, start: Foothold, goal: Foothold, model: &RobotModel) -> Result<WalkPath, PathError> {
    if !world.is_foothold(goal) {
        return Err(PathError::InvalidStance(goal));
    }
    plan_path_to_any(world, start, &[goal], model, &|_| false)
}

/// A* towards the nearest of several goals. `blocked` removes stances from
/// the graph (used for other robots' bodies).
pub fn plan_path_to_any(
    world: &World,
    start: Foothold,
    goals: &[Foothold],
    model: &RobotModel,
    blocked: &dyn Fn(Foothold) -> bool,
) -> Result<WalkPath, PathError> {
    if !world.is_foothold(start) {
        return Err(PathError::InvalidStance(start));
    }
    let goal_set: HashSet<Foothold> = goals.iter().copied().filter(|g| world.is_foothold(*g)).collect();
    if goal_set.is_empty() {
        return Err(PathError::NoPath { from: start });
    }
    let h_of = |f: Foothold| goal_set.iter().map(|&g| heuristic(f, g, model)).min().unwrap();

    let mut open = BinaryHeap::new();
    let mut best_g: HashMap<Foothold, u32> = HashMap::new();
    let mut parent: HashMap<Foothold, Foothold> = HashMap::new();
    let mut closed: HashSet<Foothold> = HashSet::new();
    let h0 = h_of(start);
    open.push(Reverse(SearchNode { foothold: start, g: 0, h: h0, f: h0, parent: None }));
    best_g.insert(start, 0);

    while let Some(Reverse(node)) = open.pop() {
        if !closed.insert(node.foothold) {
            continue;
        }
        if let Some(p) = node.parent {
            parent.insert(node.foothold, p);
        }
        if goal_set.contains(&node.foothold) {
            let mut stances = vec![node.foothold];
            let mut cur = node.foothold;
            while let Some(&p) = parent.get(&cur) {
                stances.push(p);
                cur = p;
            }
            stances.reverse();
            return Ok(WalkPath { cost: node.g, stances });
        }
        for n in world.neighbors(node.foothold, model) {
            if closed.contains(&n) || blocked(n) {
                continue;
            }
            let g = node.g + 1;
            if best_g.get(&n).is_some_and(|&old| old <= g) {
                continue;
            }
            best_g.insert(n, g);
            let h = h_of(n);
            open.push(Reverse(SearchNode { foothold: n, g, h, f: g + h, parent: Some(node.foothold) }));
        }
    }
    Err(PathError::NoPath { from: start })
}

/// Stances from which `placement` can be dropped, nearest first.
///
/// A stance qualifies when its centre point lies between `arm_min` and
/// `arm_max` pitches from the footprint, the feet are within reach of the
/// block's bottom layer, and the robot body does not intersect the block.
pub fn reachable_stance_for_placement(
    world: &World,
    placement: &BlockPlacement,
    model: &RobotModel,
) -> Result<Vec<Foothold>, PathError> {
    if !world.is_free(placement) {
        return Err(PathError::PlacementBlocked(placement.anchor));
    }
    let fp = placement.footprint();
    let layer = placement.layer();
    let c2 = placement.centroid2();
    let mut out: Vec<(i32, i32, i32, Foothold)> = Vec::new();
    for z in (layer - model.reach_up - 1)..=(layer + model.reach_down - 1) {
        if z < -1 {
            continue;
        }
        for y in fp.y0 - model.arm_max - 1..=fp.y1 + model.arm_max - 1 {
            for x in fp.x0 - model.arm_max - 1..=fp.x1 + model.arm_max - 1 {
                let f = Foothold::new(x, y, z);
                let d = f.node_distance(&fp);
                if d < model.arm_min || d > model.arm_max {
                    continue;
                }
                if !world.is_foothold(f) || f.body_hits_cells(placement.cells(), model) {
                    continue;
                }
                let centre = (2 * x + 2 - c2[0]).abs() + (2 * y + 2 - c2[1]).abs();
                out.push((d, (layer - f.feet()).abs(), centre, f));
            }
        }
    }
    if out.is_empty() {
        return Err(PathError::NoStance(placement.anchor));
    }
    out.sort();
    Ok(out.into_iter().map(|t| t.3).collect())
}
