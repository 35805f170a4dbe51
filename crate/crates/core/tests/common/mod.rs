//! Oracles shared by the integration tests. They restate the rules from
//! scratch on raw occupancy instead of calling the planner's own checks.

#![allow(dead_code)]

use std::collections::{HashMap, HashSet, VecDeque};

use lattice_core::path::{Foothold, RobotModel, World};
use lattice_core::sequencer::BuildPlan;
use lattice_core::tiler::Tiling;
use lattice_core::voxel::{Cell, VoxelGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A stance is a 2x2 window, inside the area, on solid cells at `z` with
/// free cells right above.
pub fn stance_ok(w: &World, f: Foothold) -> bool {
    let r = w.xy_rect();
    if f.z < -1 || f.x < r.x0 || f.y < r.y0 || f.x + 2 > r.x1 || f.y + 2 > r.y1 {
        return false;
    }
    (0..2).all(|i| (0..2).all(|j| w.get([f.x + i, f.y + j, f.z]) && !w.get([f.x + i, f.y + j, f.z + 1])))
}

fn clear(w: &World, f: Foothold, top: i32) -> bool {
    (0..2).all(|i| (0..2).all(|j| (f.z + 1..=top).all(|z| !w.get([f.x + i, f.y + j, z]))))
}

fn moves(w: &World, a: Foothold, m: &RobotModel) -> Vec<Foothold> {
    let mut out = Vec::new();
    for dx in -m.step_xy..=m.step_xy {
        for dy in -m.step_xy..=m.step_xy {
            let h = dx.abs() + dy.abs();
            if h == 0 || h > m.step_xy {
                continue;
            }
            for dz in -m.step_z..=m.step_z {
                let b = Foothold::new(a.x + dx, a.y + dy, a.z + dz);
                let top = a.z.max(b.z) + m.robot_height;
                if stance_ok(w, b) && clear(w, a, top) && clear(w, b, top) {
                    out.push(b);
                }
            }
        }
    }
    out
}

/// Unit-cost breadth-first search; `None` when the goal is unreachable.
pub fn bfs_cost(w: &World, start: Foothold, goal: Foothold, m: &RobotModel) -> Option<u32> {
    let mut dist: HashMap<Foothold, u32> = HashMap::from([(start, 0)]);
    let mut q = VecDeque::from([start]);
    while let Some(a) = q.pop_front() {
        let d = dist[&a];
        if a == goal {
            return Some(d);
        }
        for b in moves(w, a, m) {
            dist.entry(b).or_insert_with(|| {
                q.push_back(b);
                d + 1
            });
        }
    }
    None
}

pub fn all_stances(w: &World) -> Vec<Foothold> {
    let r = w.xy_rect();
    let mut out = Vec::new();
    for z in -1..w.height() {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let f = Foothold::new(x, y, z);
                if stance_ok(w, f) {
                    out.push(f);
                }
            }
        }
    }
    out
}

/// Partially built site: random stacks on a mix of 2x2 and single columns,
/// plus a few loose cells that block head room.
pub fn random_world(seed: u64) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(6..=10);
    let mut w = World::new([-2, -2], [n + 2, n + 2], 10);
    for _ in 0..rng.gen_range(3..=10) {
        let (x, y) = (rng.gen_range(0..n - 1), rng.gen_range(0..n - 1));
        let h = rng.gen_range(1..=5);
        let wide = rng.gen_bool(0.7);
        for z in 0..h {
            for (i, j) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                if wide || (i, j) == (0, 0) {
                    w.set([x + i, y + j, z], true);
                }
            }
        }
    }
    for _ in 0..rng.gen_range(0..4) {
        w.set([rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(2..7)], true);
    }
    w
}

/// Every cell covered once, nothing outside the grid, nothing missing.
pub fn exact_cover(grid: &VoxelGrid, tiling: &Tiling) -> Result<(), String> {
    let mut seen: HashSet<Cell> = HashSet::new();
    for (i, p) in tiling.placements.iter().enumerate() {
        for c in p.cells() {
            if !grid.in_bounds(c) || !grid.get(c) {
                return Err(format!("placement {i} covers empty cell {c:?}"));
            }
            if !seen.insert(c) {
                return Err(format!("cell {c:?} covered twice"));
            }
        }
    }
    match grid.occupied().find(|c| !seen.contains(c)) {
        Some(c) => Err(format!("cell {c:?} uncovered")),
        None => Ok(()),
    }
}

/// Replays `plan.order` and returns placements that land in occupied cells
/// or rest on nothing. A barrier group may lean on its own members.
pub fn support_failures(plan: &BuildPlan) -> Vec<usize> {
    let mut occ: HashSet<Cell> = HashSet::new();
    let mut bad = Vec::new();
    for group in &plan.order {
        let mut after = occ.clone();
        for &i in group {
            after.extend(plan.placements[i].cells());
        }
        for &i in group {
            let p = &plan.placements[i];
            if p.cells().any(|c| occ.contains(&c)) {
                bad.push(i);
                continue;
            }
            let z = p.layer();
            if z > 0 && !p.footprint().cells().any(|(x, y)| after.contains(&[x, y, z - 1])) {
                bad.push(i);
            }
        }
        occ = after;
    }
    bad
}
