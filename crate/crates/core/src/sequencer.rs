//! Build plans: feed assignment, layer-wise ordering, support stairs,
//! lockstep barriers and replay validation.
//!
//! Plans are checked by replaying them against a growing occupancy. Robots
//! take turns in id order; a robot's next placement waits until everything
//! under its footprint is placed and, for structure blocks, until every lower
//! structure layer is complete. The same replay generates support stairs.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path::{plan_path, plan_path_to_any, reachable_stance_for_placement, Foothold, RobotModel, World};
use crate::tiler::{BlockPattern, BlockPlacement, Rect, Role, Rotation, Tiling};
use crate::voxel::{Cell, VoxelGrid};

pub const PLAN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("at least one feed is required")]
    NoFeeds,
    #[error("placement {index} has no block below it")]
    UnsupportedPlacement { index: usize },
    #[error("support stairs for placement {index} collide on every side")]
    ScaffoldCollision { index: usize },
    #[error("feed {id} at {cell:?} lies inside the structure footprint")]
    FeedInsideStructure { id: String, cell: Cell },
    #[error("feed {id} has no free stance")]
    FeedBlocked { id: String },
    #[error("malformed plan: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feed {
    pub id: String,
    pub cell: Cell,
    pub robot_id: String,
}

impl Feed {
    /// Feed `f<i>` served by robot `r<i>`.
    pub fn numbered(i: usize, cell: Cell) -> Self {
        Feed { id: format!("f{i}"), cell, robot_id: format!("r{i}") }
    }

    pub fn numbered_all(cells: &[Cell]) -> Vec<Feed> {
        cells.iter().enumerate().map(|(i, &c)| Feed::numbered(i, c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    /// Blocks carried per trip.
    pub capacity: usize,
    pub robot: RobotModel,
    /// Block used for support stairs.
    pub scaffold_pattern: BlockPattern,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig { capacity: 3, robot: RobotModel::default(), scaffold_pattern: BlockPattern::new(2, 2, 2) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trip {
    pub pickup_count: usize,
    pub placements: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobotPlan {
    pub robot_id: String,
    pub feed_id: String,
    pub feed: Cell,
    /// Where the robot stands to load.
    pub feed_stance: Foothold,
    pub trips: Vec<Trip>,
}

impl RobotPlan {
    pub fn sequence(&self) -> impl Iterator<Item = usize> + '_ {
        self.trips.iter().flat_map(|t| t.placements.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildPlan {
    pub schema_version: u32,
    pub pitch_mm: f64,
    pub origin_mm: [f64; 3],
    pub dims: [usize; 3],
    pub capacity: usize,
    /// Structure placements in tiling order, then scaffold.
    pub placements: Vec<BlockPlacement>,
    /// Planned drop stance per placement.
    pub stances: Vec<Option<Foothold>>,
    pub robots: Vec<RobotPlan>,
    pub barriers: Vec<Vec<usize>>,
    pub scaffold: Vec<usize>,
    /// Validated drop order across robots; barrier groups share a step.
    #[serde(default)]
    pub order: Vec<Vec<usize>>,
}

impl BuildPlan {
    pub fn structure_count(&self) -> usize {
        self.placements.iter().filter(|p| p.role == Role::Structure).count()
    }

    /// Robot index per placement; `None` for placements nobody builds.
    pub fn owners(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.placements.len()];
        for (r, rp) in self.robots.iter().enumerate() {
            for i in rp.sequence() {
                if i < out.len() {
                    out[i] = Some(r);
                }
            }
        }
        out
    }

    pub fn structure_grid(&self) -> VoxelGrid {
        let mut g = VoxelGrid::new(self.pitch_mm, self.origin_mm, self.dims);
        for p in self.placements.iter().filter(|p| p.role == Role::Structure) {
            for c in p.cells() {
                if g.in_bounds(c) {
                    g.set(c, true);
                }
            }
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// Block above the floor with nothing under it.
    Support,
    /// No stance reachable from the feed, or no way back after the drop.
    Reachability,
    /// Block dropped into occupied cells.
    Overlap,
    /// Placement missing from, or repeated across, the robot sequences.
    Partition,
    /// Infill between fronts from two robots; reported as risky only.
    SeamJoin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub index: usize,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Replay order; barrier groups appear as one step.
    pub order: Vec<Vec<usize>>,
    pub stances: Vec<Option<Foothold>>,
}

impl ValidationReport {
    pub fn blocking(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.kind != ViolationKind::SeamJoin)
    }

    pub fn is_feasible(&self) -> bool {
        self.blocking().next().is_none()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

fn feed2(cell: Cell) -> [i32; 3] {
    [2 * cell[0] + 1, 2 * cell[1] + 1, 2 * cell[2] + 1]
}

fn dist2(a: [i32; 3], b: [i32; 3]) -> i32 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

/// Feed index per placement: nearest feed by Manhattan distance from the
/// block centroid. Exact ties rotate through the tied feeds in feed order,
/// one step per tie met in scan order.
pub fn assign_feeds(placements: &[BlockPlacement], feeds: &[Feed]) -> Result<Vec<usize>, PlanError> {
    if feeds.is_empty() {
        return Err(PlanError::NoFeeds);
    }
    let mut turn = 0usize;
    Ok(placements
        .iter()
        .map(|p| {
            let c = p.centroid2();
            let d: Vec<i32> = feeds.iter().map(|f| dist2(c, feed2(f.cell))).collect();
            let best = *d.iter().min().unwrap();
            let tied: Vec<usize> = (0..feeds.len()).filter(|&i| d[i] == best).collect();
            if tied.len() == 1 {
                tied[0]
            } else {
                let pick = tied[turn % tied.len()];
                turn += 1;
                pick
            }
        })
        .collect())
}

/// Whether any placement owns a cell directly under `p`.
fn supporters(p: &BlockPlacement, all: &[BlockPlacement]) -> bool {
    if p.layer() == 0 {
        return true;
    }
    let fp = p.footprint();
    let below = p.layer() - 1;
    all.iter().any(|q| q.layer() <= below && q.top() >= below && q.footprint().overlaps(&fp))
}

/// Orders one robot's placements by layer, then distance from its feed,
/// then scan order.
pub fn build_order(indices: &[usize], feed: &Feed, placements: &[BlockPlacement]) -> Result<Vec<usize>, PlanError> {
    for &i in indices {
        if !supporters(&placements[i], placements) {
            return Err(PlanError::UnsupportedPlacement { index: i });
        }
    }
    let f = feed2(feed.cell);
    let mut out = indices.to_vec();
    out.sort_by_key(|&i| {
        let p = &placements[i];
        let c = p.centroid2();
        (p.layer(), (c[0] - f[0]).abs() + (c[1] - f[1]).abs(), i)
    });
    Ok(out)
}

/// Space a robot sweeps while dropping `p` from `stance`: the box spanning
/// stance window and footprint, from the lower of feet and block to the
/// higher of head and block top.
pub fn envelope(p: &BlockPlacement, stance: Foothold, model: &RobotModel) -> (Rect, i32, i32) {
    let w = stance.window();
    let fp = p.footprint();
    let r = Rect { x0: w.x0.min(fp.x0), y0: w.y0.min(fp.y0), x1: w.x1.max(fp.x1), y1: w.y1.max(fp.y1) };
    (r, stance.feet().min(p.layer()), (stance.z + model.robot_height).max(p.top()))
}

pub fn block_in_envelope(p: &BlockPlacement, env: (Rect, i32, i32)) -> bool {
    let (r, z0, z1) = env;
    p.footprint().overlaps(&r) && p.layer() <= z1 && p.top() >= z0
}

/// Each block sits in the other's drop envelope: whichever goes first
/// blocks the other, so they must drop together.
pub fn mutual_conflict(p: &BlockPlacement, sp: Foothold, q: &BlockPlacement, sq: Foothold, model: &RobotModel) -> bool {
    p.layer() == q.layer()
        && !sp.body_overlaps(&sq, model)
        && block_in_envelope(p, envelope(q, sq, model))
        && block_in_envelope(q, envelope(p, sp, model))
}

fn feed_stance(feed: &Feed, footprint: &HashSet<(i32, i32)>, world: &World, taken: &[Foothold]) -> Result<Foothold, PlanError> {
    let [fx, fy, _] = feed.cell;
    for (dx, dy) in [(-1, -1), (0, -1), (-1, 0), (0, 0)] {
        let f = Foothold::new(fx + dx, fy + dy, -1);
        if f.window().cells().all(|c| !footprint.contains(&c))
            && world.is_foothold(f)
            && taken.iter().all(|t| !t.window().overlaps(&f.window()))
        {
            return Ok(f);
        }
    }
    Err(PlanError::FeedBlocked { id: feed.id.clone() })
}

fn planning_world(placements: &[BlockPlacement], dims: [usize; 3], feeds: &[Feed], model: &RobotModel) -> World {
    let [nx, ny, nz] = dims.map(|d| d as i32);
    let top = placements.iter().map(|p| p.top() + 1).max().unwrap_or(0).max(nz);
    // room for a stair reaching the top plus a walkway around it
    let margin = top + 6;
    let mut w = World::new([-margin, -margin], [nx + margin, ny + margin], top + model.robot_height + 4);
    for f in feeds {
        w.include(Rect::new(f.cell[0] - 1, f.cell[1] - 1, 3, 3), 4);
    }
    w
}

struct Engine<'a> {
    model: &'a RobotModel,
    scaffold_pattern: BlockPattern,
    generate: bool,
    placements: Vec<BlockPlacement>,
    owner: Vec<usize>,
    queues: Vec<VecDeque<usize>>,
    feed_stances: Vec<Foothold>,
    feed_windows: Vec<Rect>,
    world: World,
    target: HashSet<(i32, i32)>,
    cell_owner: HashMap<Cell, usize>,
    placed: Vec<bool>,
    unplaced_layers: BTreeMap<i32, usize>,
    group_of: HashMap<usize, usize>,
    groups: Vec<Vec<usize>>,
    stances: Vec<Option<Foothold>>,
    violations: Vec<Violation>,
    order: Vec<Vec<usize>>,
    stair_tries: HashMap<usize, u32>,
    scaffold_at: HashMap<Cell, usize>,
}

impl<'a> Engine<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        model: &'a RobotModel,
        scaffold_pattern: BlockPattern,
        generate: bool,
        placements: Vec<BlockPlacement>,
        sequences: Vec<Vec<usize>>,
        feed_stances: Vec<Foothold>,
        world: World,
        groups: Vec<Vec<usize>>,
    ) -> Self {
        let mut owner = vec![usize::MAX; placements.len()];
        for (r, s) in sequences.iter().enumerate() {
            for &i in s {
                owner[i] = r;
            }
        }
        let mut unplaced_layers = BTreeMap::new();
        let mut target = HashSet::new();
        let mut scaffold_at = HashMap::new();
        for (i, p) in placements.iter().enumerate() {
            match p.role {
                Role::Structure => {
                    *unplaced_layers.entry(p.layer()).or_insert(0) += 1;
                    target.extend(p.footprint().cells());
                }
                _ => {
                    scaffold_at.insert(p.anchor, i);
                }
            }
        }
        let mut group_of = HashMap::new();
        for (g, members) in groups.iter().enumerate() {
            for &m in members {
                group_of.insert(m, g);
            }
        }
        let n = placements.len();
        Engine {
            model,
            scaffold_pattern,
            generate,
            feed_windows: feed_stances.iter().map(|f| f.window()).collect(),
            placements,
            owner,
            queues: sequences.into_iter().map(VecDeque::from).collect(),
            feed_stances,
            world,
            target,
            cell_owner: HashMap::new(),
            placed: vec![false; n],
            unplaced_layers,
            group_of,
            groups,
            stances: vec![None; n],
            violations: Vec::new(),
            order: Vec::new(),
            stair_tries: HashMap::new(),
            scaffold_at,
        }
    }

    fn stair_attempt(&mut self, i: usize) -> bool {
        let n = self.stair_tries.entry(i).or_insert(0);
        *n += 1;
        *n <= 2
    }

    fn ready(&self, i: usize) -> bool {
        let p = &self.placements[i];
        if p.role == Role::Structure && self.unplaced_layers.range(..p.layer()).any(|(_, &n)| n > 0) {
            return false;
        }
        let fp = p.footprint();
        !self
            .placements
            .iter()
            .enumerate()
            .any(|(j, q)| j != i && !self.placed[j] && q.layer() < p.layer() && q.footprint().overlaps(&fp))
    }

    /// Stances for placements dropped together, or `None` where no stance is
    /// reachable from the feed with a way back afterwards.
    fn find_stances(&mut self, members: &[usize]) -> Vec<Option<Foothold>> {
        let mut candidates: Vec<Vec<Foothold>> = members
            .iter()
            .map(|&i| reachable_stance_for_placement(&self.world, &self.placements[i], self.model).unwrap_or_default())
            .collect();
        let mut out = vec![None; members.len()];
        for _ in 0..4 {
            let mut chosen: Vec<(usize, Foothold)> = Vec::new();
            for (k, &i) in members.iter().enumerate() {
                if out[k].is_some() || candidates[k].is_empty() {
                    continue;
                }
                // partners drop together: keep clear of their bodies and blocks
                let taken: Vec<Foothold> = out.iter().flatten().copied().chain(chosen.iter().map(|c| c.1)).collect();
                let model = self.model;
                let partner_cells: Vec<Cell> = members
                    .iter()
                    .filter(|&&j| j != i)
                    .flat_map(|&j| self.placements[j].cells().collect::<Vec<_>>())
                    .collect();
                let goals: Vec<Foothold> = candidates[k]
                    .iter()
                    .copied()
                    .filter(|g| !taken.iter().any(|t| g.body_overlaps(t, model)) && !g.body_hits_cells(partner_cells.iter().copied(), model))
                    .collect();
                let feed = self.feed_stances[self.owner[i]];
                let blocked = |f: Foothold| taken.iter().any(|t| f.body_overlaps(t, model));
                match plan_path_to_any(&self.world, feed, &goals, self.model, &blocked) {
                    Ok(p) => chosen.push((k, p.goal())),
                    Err(_) => candidates[k].clear(),
                }
            }
            if chosen.is_empty() {
                break;
            }
            let filled: Vec<Cell> = members
                .iter()
                .flat_map(|&i| self.placements[i].cells().collect::<Vec<_>>())
                .filter(|&c| self.world.contains_cell(c) && !self.world.get(c))
                .collect();
            for &c in &filled {
                self.world.set(c, true);
            }
            for (k, s) in chosen {
                let feed = self.feed_stances[self.owner[members[k]]];
                if plan_path(&self.world, s, feed, self.model).is_ok() {
                    out[k] = Some(s);
                } else {
                    candidates[k].retain(|&c| c != s);
                }
            }
            for &c in &filled {
                self.world.set(c, false);
            }
        }
        out
    }

    fn emit(&mut self, members: &[usize], stances: Vec<Option<Foothold>>) {
        for (&i, s) in members.iter().zip(stances) {
            let p = self.placements[i].clone();
            let r = self.owner[i];
            if !self.world.is_free(&p) {
                self.violations.push(Violation { index: i, kind: ViolationKind::Overlap });
            }
            let supported = p.layer() == 0 || p.footprint().cells().any(|(x, y)| self.world.get([x, y, p.layer() - 1]));
            if !supported {
                self.violations.push(Violation { index: i, kind: ViolationKind::Support });
            }
            if s.is_none() {
                self.violations.push(Violation { index: i, kind: ViolationKind::Reachability });
            }
            if p.role == Role::Structure && self.seam_join(&p, r) {
                self.violations.push(Violation { index: i, kind: ViolationKind::SeamJoin });
            }
            self.stances[i] = s;
        }
        for &i in members {
            let p = self.placements[i].clone();
            for c in p.cells() {
                if self.world.contains_cell(c) {
                    self.world.set(c, true);
                }
                self.cell_owner.insert(c, self.owner[i]);
            }
            self.placed[i] = true;
            if p.role == Role::Structure {
                *self.unplaced_layers.get_mut(&p.layer()).unwrap() -= 1;
            }
            let r = self.owner[i];
            if self.queues[r].front() == Some(&i) {
                self.queues[r].pop_front();
            } else {
                self.queues[r].retain(|&j| j != i);
            }
        }
        self.order.push(members.to_vec());
    }

    /// Face contact on two opposite sides with blocks placed by two different robots.
    fn seam_join(&self, p: &BlockPlacement, _robot: usize) -> bool {
        let fp = p.footprint();
        let owners = |cells: Vec<Cell>| -> HashSet<usize> { cells.iter().filter_map(|c| self.cell_owner.get(c).copied()).collect() };
        let zs = p.layer()..=p.top();
        let lo_x = owners(zs.clone().flat_map(|z| (fp.y0..fp.y1).map(move |y| [fp.x0 - 1, y, z])).collect());
        let hi_x = owners(zs.clone().flat_map(|z| (fp.y0..fp.y1).map(move |y| [fp.x1, y, z])).collect());
        let lo_y = owners(zs.clone().flat_map(|z| (fp.x0..fp.x1).map(move |x| [x, fp.y0 - 1, z])).collect());
        let hi_y = owners(zs.flat_map(|z| (fp.x0..fp.x1).map(move |x| [x, fp.y1, z])).collect());
        let split = |a: &HashSet<usize>, b: &HashSet<usize>| a.iter().any(|x| b.iter().any(|y| x != y));
        split(&lo_x, &hi_x) || split(&lo_y, &hi_y)
    }

    fn next_step(&self, r: usize) -> Option<Vec<usize>> {
        let &i = self.queues[r].front()?;
        if !self.ready(i) {
            return None;
        }
        // stairs wait for the block they lead to
        if self.placements[i].role != Role::Structure {
            let served = self.queues[r].iter().find(|&&j| self.placements[j].role == Role::Structure);
            if served.is_some_and(|&j| !self.ready(j)) {
                return None;
            }
        }
        match self.group_of.get(&i) {
            None => Some(vec![i]),
            Some(&g) => {
                let members = &self.groups[g];
                let all_front = members.iter().all(|&m| {
                    !self.placed[m] && self.queues[self.owner[m]].front() == Some(&m) && self.ready(m)
                });
                all_front.then(|| members.clone())
            }
        }
    }

    fn run(&mut self) -> Result<(), PlanError> {
        loop {
            let mut progress = false;
            for r in 0..self.queues.len() {
                // new stairs go to the front of the queue and the turn continues with them
                while let Some(members) = self.next_step(r) {
                    let stances = self.find_stances(&members);
                    let i = members[0];
                    if self.generate
                        && members.len() == 1
                        && stances[0].is_none()
                        && self.placements[i].role == Role::Structure
                        && self.stair_attempt(i)
                    {
                        if let Some(blocks) = self.try_stairs(i)? {
                            for b in blocks.into_iter().rev() {
                                self.queues[r].push_front(b);
                            }
                            continue;
                        }
                    }
                    self.emit(&members, stances);
                    progress = true;
                    break;
                }
            }
            if !progress {
                let Some(r) = (0..self.queues.len()).find(|&r| !self.queues[r].is_empty()) else {
                    return Ok(());
                };
                let i = self.queues[r][0];
                let stances = self.find_stances(&[i]);
                self.emit(&[i], stances);
            }
        }
    }

    /// Builds a straight stair next to placement `i` so its robot can reach
    /// it. Returns the new scaffold placements in build order, or `None` when
    /// no stair helps.
    fn try_stairs(&mut self, i: usize) -> Result<Option<Vec<usize>>, PlanError> {
        let p = self.placements[i].clone();
        let r = self.owner[i];
        let fp = p.footprint();
        let need = (p.layer() - self.model.reach_up).max(2);
        let h0 = need + need % 2;
        let w = self.scaffold_pattern.dims[0].max(self.scaffold_pattern.dims[1]);
        let area = self.world.xy_rect();
        // ranking key, then the stair blocks with their owners
        type Candidate = ((usize, i32, bool, i32, usize, i32, i32), Vec<(usize, BlockPlacement)>);
        let mut valid: Vec<Candidate> = Vec::new();
        for height in [h0, h0 + 2] {
            let n = height / 2;
            for ty in area.y0..area.y1 - w + 1 {
                for tx in area.x0..area.x1 - w + 1 {
                    let top = Foothold::new(tx, ty, height - 1);
                    let d = top.node_distance(&fp);
                    // drop from the top step, or climb from it onto the structure
                    let touches = || {
                        let r = top.window();
                        Rect { x0: r.x0 - 1, y0: r.y0 - 1, x1: r.x1 + 1, y1: r.y1 + 1 }.cells().any(|c| self.target.contains(&c))
                    };
                    if top.window().overlaps(&fp) || (d > self.model.arm_max && !touches()) {
                        continue;
                    }
                    for (dir, (dx, dy)) in [(-1, 0), (1, 0), (0, -1), (0, 1)].into_iter().enumerate() {
                        let columns: Vec<(usize, i32, i32)> = (1..=n)
                            .map(|k| {
                                let run = w * (n - k);
                                (k as usize, tx + dx * run, ty + dy * run)
                            })
                            .collect();
                        if let Some(blocks) = self.stair_blocks(&columns) {
                            let new = blocks.iter().filter(|b| !self.scaffold_at.contains_key(&b.1.anchor)).count();
                            valid.push(((new, height, d < self.model.arm_min, d, dir, ty, tx), blocks));
                        }
                    }
                }
            }
        }
        if valid.is_empty() {
            return Err(PlanError::ScaffoldCollision { index: i });
        }
        valid.sort_by_key(|v| v.0);
        // reachability hinges on the top step; keep its best run direction only
        let mut tops = HashSet::new();
        valid.retain(|v| tops.insert((v.0 .1, v.0 .5, v.0 .6)));
        for (_, blocks) in valid.into_iter().take(96) {
            let new: Vec<(usize, BlockPlacement)> =
                blocks.into_iter().filter(|b| !self.scaffold_at.contains_key(&b.1.anchor)).collect();
            let cells: Vec<Cell> = new.iter().flat_map(|b| b.1.cells().collect::<Vec<_>>()).collect();
            for &c in &cells {
                self.world.set(c, true);
            }
            let ok = self.find_stances(&[i])[0].is_some();
            for &c in &cells {
                self.world.set(c, false);
            }
            if ok {
                let mut new = new;
                new.sort_by_key(|b| (b.1.layer(), b.0));
                let mut out = Vec::new();
                for (_, b) in new {
                    let j = self.placements.len();
                    self.scaffold_at.insert(b.anchor, j);
                    self.placements.push(b);
                    self.owner.push(r);
                    self.placed.push(false);
                    self.stances.push(None);
                    out.push(j);
                }
                return Ok(Some(out));
            }
        }
        Ok(None)
    }

    /// Stair blocks for `(step, x, y)` columns, or `None` if the stair would
    /// leave the planning area, touch the structure or a feed, or clash with
    /// other blocks. Existing scaffold in the same spot is reused.
    fn stair_blocks(&self, columns: &[(usize, i32, i32)]) -> Option<Vec<(usize, BlockPlacement)>> {
        let s = self.scaffold_pattern.dims;
        let mut out = Vec::new();
        for &(k, x, y) in columns {
            let col = Rect::new(x, y, s[0], s[1]);
            if !self.world.xy_rect().contains_rect(&col)
                || col.cells().any(|c| self.target.contains(&c))
                || self.feed_windows.iter().any(|w| w.overlaps(&col))
            {
                return None;
            }
            // the step must end at its own height with head room above it
            let step_top = k as i32 * s[2];
            let above = step_top..step_top + self.model.robot_height;
            let capped = col.cells().any(|(cx, cy)| above.clone().any(|z| self.world.get([cx, cy, z])))
                || self.placements.iter().enumerate().any(|(e, q)| {
                    !self.placed[e] && q.footprint().overlaps(&col) && q.top() >= step_top && q.layer() < above.end
                });
            if capped {
                return None;
            }
            for j in 0..k as i32 {
                let b = BlockPlacement::new(self.scaffold_pattern, [x, y, j * s[2]], Rotation::R0, Role::Scaffold);
                if let Some(&e) = self.scaffold_at.get(&b.anchor) {
                    if self.placements[e].pattern != b.pattern {
                        return None;
                    }
                } else {
                    let clash = b.cells().any(|c| !self.world.contains_cell(c) || self.world.get(c))
                        || self.placements.iter().enumerate().any(|(e, q)| {
                            !self.placed[e]
                                && q.footprint().overlaps(&col)
                                && q.layer() <= b.top()
                                && q.top() >= b.layer()
                        });
                    if clash {
                        return None;
                    }
                }
                out.push((k, b));
            }
        }
        Some(out)
    }
}

fn group_trips(seq: &[usize], placements: &[BlockPlacement], capacity: usize) -> Vec<Trip> {
    let mut trips: Vec<Trip> = Vec::new();
    for &i in seq {
        let p = &placements[i];
        let join = trips.last().is_some_and(|t| {
            let first = &placements[t.placements[0]];
            t.placements.len() < capacity
                && first.role == p.role
                && (p.role != Role::Structure || first.layer() == p.layer())
        });
        if join {
            let t = trips.last_mut().unwrap();
            t.placements.push(i);
            t.pickup_count += 1;
        } else {
            trips.push(Trip { pickup_count: 1, placements: vec![i] });
        }
    }
    trips
}

/// Groups mutually conflicting placements of different robots. Groups are
/// numbered by replay order and never hold two placements of one robot.
pub fn insert_barriers(plan: &BuildPlan, order: &[Vec<usize>], model: &RobotModel) -> Vec<Vec<usize>> {
    let owners = plan.owners();
    let mut pos = vec![usize::MAX; plan.placements.len()];
    for (k, step) in order.iter().enumerate() {
        for &i in step {
            pos[i] = k;
        }
    }
    let n = plan.placements.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], i: usize) -> usize {
        let mut i = i;
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut members: HashMap<usize, Vec<usize>> = (0..n).map(|i| (i, vec![i])).collect();
    for a in 0..n {
        for b in a + 1..n {
            let (pa, pb) = (&plan.placements[a], &plan.placements[b]);
            if pa.role != Role::Structure || pb.role != Role::Structure || owners[a] == owners[b] {
                continue;
            }
            let (Some(sa), Some(sb)) = (plan.stances[a], plan.stances[b]) else { continue };
            if !mutual_conflict(pa, sa, pb, sb, model) {
                continue;
            }
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra == rb {
                continue;
            }
            let robots_a: HashSet<Option<usize>> = members[&ra].iter().map(|&i| owners[i]).collect();
            if members[&rb].iter().any(|&i| robots_a.contains(&owners[i])) {
                continue;
            }
            let moved = members.remove(&rb).unwrap();
            members.get_mut(&ra).unwrap().extend(moved);
            parent[rb] = ra;
        }
    }
    let mut groups: Vec<Vec<usize>> = members.into_values().filter(|m| m.len() > 1).collect();
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort_by_key(|g| (g.iter().map(|&i| pos[i]).min().unwrap_or(usize::MAX), g[0]));
    groups
}

/// Puts each robot's barrier members in group order so that lockstep drops
/// never wait on each other in a cycle.
fn align_barriers(sequences: &mut [Vec<usize>], groups: &[Vec<usize>]) {
    let group_of: HashMap<usize, usize> =
        groups.iter().enumerate().flat_map(|(g, m)| m.iter().map(move |&i| (i, g))).collect();
    for seq in sequences.iter_mut() {
        let slots: Vec<usize> = (0..seq.len()).filter(|&k| group_of.contains_key(&seq[k])).collect();
        let mut members: Vec<usize> = slots.iter().map(|&k| seq[k]).collect();
        members.sort_by_key(|i| group_of[i]);
        for (k, m) in slots.into_iter().zip(members) {
            seq[k] = m;
        }
    }
}

struct Setup {
    world: World,
    feed_stances: Vec<Foothold>,
}

fn setup(placements: &[BlockPlacement], dims: [usize; 3], feeds: &[Feed], model: &RobotModel) -> Result<Setup, PlanError> {
    if feeds.is_empty() {
        return Err(PlanError::NoFeeds);
    }
    let footprint: HashSet<(i32, i32)> = placements
        .iter()
        .filter(|p| p.role == Role::Structure)
        .flat_map(|p| p.footprint().cells())
        .collect();
    for f in feeds {
        if footprint.contains(&(f.cell[0], f.cell[1])) {
            return Err(PlanError::FeedInsideStructure { id: f.id.clone(), cell: f.cell });
        }
    }
    let world = planning_world(placements, dims, feeds, model);
    let mut feed_stances = Vec::new();
    for f in feeds {
        let s = feed_stance(f, &footprint, &world, &feed_stances)?;
        feed_stances.push(s);
    }
    Ok(Setup { world, feed_stances })
}

/// Full planning pass: assign, order, add stairs, find barriers, validate.
pub fn plan_build(grid: &VoxelGrid, tiling: &Tiling, feeds: &[Feed], cfg: &PlanConfig) -> Result<(BuildPlan, ValidationReport), PlanError> {
    let model = &cfg.robot;
    let structure: Vec<BlockPlacement> =
        tiling.placements.iter().cloned().map(|mut p| {
            p.role = Role::Structure;
            p
        }).collect();
    let Setup { world, feed_stances } = setup(&structure, grid.dims(), feeds, model)?;
    let assign = assign_feeds(&structure, feeds)?;
    let mut sequences = Vec::new();
    for (r, f) in feeds.iter().enumerate() {
        let mine: Vec<usize> = (0..structure.len()).filter(|&i| assign[i] == r).collect();
        sequences.push(build_order(&mine, f, &structure)?);
    }

    let mut engine = Engine::new(model, cfg.scaffold_pattern, true, structure, sequences, feed_stances.clone(), world, vec![]);
    engine.run()?;
    let placements = engine.placements.clone();
    let mut sequences: Vec<Vec<usize>> = vec![Vec::new(); feeds.len()];
    for step in &engine.order {
        for &i in step {
            sequences[engine.owner[i]].push(i);
        }
    }
    let mut plan = BuildPlan {
        schema_version: PLAN_SCHEMA_VERSION,
        pitch_mm: grid.pitch_mm(),
        origin_mm: grid.origin_mm(),
        dims: grid.dims(),
        capacity: cfg.capacity,
        scaffold: (0..placements.len()).filter(|&i| placements[i].role == Role::Scaffold).collect(),
        stances: engine.stances.clone(),
        placements,
        robots: Vec::new(),
        barriers: Vec::new(),
        order: Vec::new(),
    };
    plan.robots = robot_plans(feeds, &feed_stances, &sequences, &plan.placements, cfg.capacity);
    let groups = insert_barriers(&plan, &engine.order, model);
    let single = validate_plan(&plan, cfg)?;
    if groups.is_empty() {
        plan.stances = single.stances.clone();
        plan.order = single.order.clone();
        return Ok((plan, single));
    }
    let unordered = plan.robots.clone();
    align_barriers(&mut sequences, &groups);
    plan.barriers = groups;
    plan.robots = robot_plans(feeds, &feed_stances, &sequences, &plan.placements, cfg.capacity);
    let mut report = validate_plan(&plan, cfg)?;
    // a joint drop can cut off a stance that a sequential drop leaves open
    let failing: HashSet<usize> = report.blocking().map(|v| v.index).collect();
    if !failing.is_empty() {
        plan.barriers.retain(|g| !g.iter().any(|i| failing.contains(i)));
        report = validate_plan(&plan, cfg)?;
    }
    if report.blocking().count() > single.blocking().count() {
        plan.barriers.clear();
        plan.robots = unordered;
        report = single;
    }
    plan.stances = report.stances.clone();
    plan.order = report.order.clone();
    Ok((plan, report))
}

fn robot_plans(feeds: &[Feed], stances: &[Foothold], sequences: &[Vec<usize>], placements: &[BlockPlacement], capacity: usize) -> Vec<RobotPlan> {
    feeds
        .iter()
        .zip(stances)
        .zip(sequences)
        .map(|((f, &s), seq)| RobotPlan {
            robot_id: f.robot_id.clone(),
            feed_id: f.id.clone(),
            feed: f.cell,
            feed_stance: s,
            trips: group_trips(seq, placements, capacity.max(1)),
        })
        .collect()
}

/// Replays a plan and reports support, reachability, overlap, partition
/// and seam-join findings. The plan is not modified.
pub fn validate_plan(plan: &BuildPlan, cfg: &PlanConfig) -> Result<ValidationReport, PlanError> {
    let n = plan.placements.len();
    let mut seen = vec![0usize; n];
    let mut sequences = Vec::new();
    for rp in &plan.robots {
        let seq: Vec<usize> = rp.sequence().collect();
        for &i in &seq {
            if i >= n {
                return Err(PlanError::Malformed(format!("placement index {i} out of range")));
            }
            seen[i] += 1;
        }
        sequences.push(seq);
    }
    for b in &plan.barriers {
        if b.iter().any(|&i| i >= n) {
            return Err(PlanError::Malformed("barrier references a missing placement".into()));
        }
    }
    let mut violations: Vec<Violation> = (0..n)
        .filter(|&i| seen[i] != 1 && (plan.placements[i].role == Role::Structure || seen[i] > 1))
        .map(|i| Violation { index: i, kind: ViolationKind::Partition })
        .collect();
    let feeds: Vec<Feed> = plan
        .robots
        .iter()
        .map(|r| Feed { id: r.feed_id.clone(), cell: r.feed, robot_id: r.robot_id.clone() })
        .collect();
    let Setup { world, feed_stances } = setup(&plan.placements, plan.dims, &feeds, &cfg.robot)?;
    // a placement listed twice is replayed once
    let mut listed = HashSet::new();
    let sequences: Vec<Vec<usize>> =
        sequences.into_iter().map(|s| s.into_iter().filter(|&i| listed.insert(i)).collect()).collect();
    let mut engine = Engine::new(
        &cfg.robot,
        cfg.scaffold_pattern,
        false,
        plan.placements.clone(),
        sequences,
        feed_stances,
        world,
        plan.barriers.clone(),
    );
    // placements nobody builds never enter the replay
    for i in 0..n {
        if !listed.contains(&i) {
            engine.placed[i] = true;
            if plan.placements[i].role == Role::Structure {
                *engine.unplaced_layers.get_mut(&plan.placements[i].layer()).unwrap() -= 1;
            }
        }
    }
    engine.run()?;
    violations.extend(engine.violations);
    Ok(ValidationReport { violations, order: engine.order, stances: engine.stances })
}

/// Support stairs one robot builds for a structure on its own.
pub fn generate_scaffold(grid: &VoxelGrid, tiling: &Tiling, feed: &Feed, cfg: &PlanConfig) -> Result<Vec<BlockPlacement>, PlanError> {
    let (plan, _) = plan_build(grid, tiling, std::slice::from_ref(feed), cfg)?;
    Ok(plan.scaffold.iter().map(|&i| plan.placements[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::tiler::{default_patterns, tile};

    fn blk(dims: [i32; 3], anchor: Cell) -> BlockPlacement {
        BlockPlacement::new(BlockPattern::new(dims[0], dims[1], dims[2]), anchor, Rotation::R0, Role::Structure)
    }

    #[test]
    fn one_feed_takes_everything() {
        let ps: Vec<_> = (0..4).map(|i| blk([2, 2, 2], [2 * i, 0, 0])).collect();
        let a = assign_feeds(&ps, &[Feed::numbered(0, [-1, 0, 0])]).unwrap();
        assert_eq!(a, vec![0; 4]);
        assert_eq!(assign_feeds(&ps, &[]), Err(PlanError::NoFeeds));
    }

    #[test]
    fn mirrored_feeds_split_slab() {
        let ps: Vec<_> = (0..4).map(|i| blk([2, 2, 2], [2 * i, 0, 0])).collect();
        let feeds = Feed::numbered_all(&[[-1, 0, 0], [8, 1, 0]]);
        let a = assign_feeds(&ps, &feeds).unwrap();
        assert_eq!(a.iter().filter(|&&f| f == 0).count(), 2);
        assert_eq!(a, vec![0, 0, 1, 1]);
    }

    #[test]
    fn ties_alternate_in_scan_order() {
        // every block on the mirror plane between the feeds
        let ps: Vec<_> = (0..4).map(|i| blk([2, 2, 2], [0, 2 * i + 2, 0])).collect();
        let feeds = Feed::numbered_all(&[[-3, 5, 0], [4, 5, 0]]);
        assert_eq!(assign_feeds(&ps, &feeds).unwrap(), vec![0, 1, 0, 1]);
    }

    #[test]
    fn order_puts_lower_first_and_rejects_floaters() {
        let ps = vec![blk([4, 2, 2], [0, 0, 2]), blk([4, 2, 2], [0, 0, 0])];
        let f = Feed::numbered(0, [-1, 0, 0]);
        assert_eq!(build_order(&[0, 1], &f, &ps).unwrap(), vec![1, 0]);
        let floating = vec![blk([2, 2, 2], [0, 0, 4]), blk([2, 2, 2], [4, 0, 0])];
        assert_eq!(build_order(&[0, 1], &f, &floating), Err(PlanError::UnsupportedPlacement { index: 0 }));
    }

    #[test]
    fn cube_plan_is_clean() {
        let g = fixtures::cube_grid(4);
        let t = tile(&g, &default_patterns()).unwrap();
        let (plan, report) = plan_build(&g, &t, &[Feed::numbered(0, [-1, 1, 0])], &PlanConfig::default()).unwrap();
        assert!(report.violations.is_empty(), "{:?}", report.violations);
        assert!(plan.scaffold.is_empty());
        assert!(plan.barriers.is_empty());
        assert_eq!(plan.robots[0].sequence().count(), 4);
        assert!(plan.stances.iter().all(|s| s.is_some()));
    }

    #[test]
    fn early_high_block_is_a_support_violation() {
        let g = fixtures::cube_grid(4);
        let t = tile(&g, &default_patterns()).unwrap();
        let (mut plan, _) = plan_build(&g, &t, &[Feed::numbered(0, [-1, 1, 0])], &PlanConfig::default()).unwrap();
        let mut seq: Vec<usize> = plan.robots[0].sequence().collect();
        let high = seq.iter().position(|&i| plan.placements[i].layer() == 2).unwrap();
        let moved = seq.remove(high);
        seq.insert(0, moved);
        plan.robots[0].trips = vec![Trip { pickup_count: seq.len(), placements: seq }];
        let r = validate_plan(&plan, &PlanConfig::default()).unwrap();
        assert!(r.violations.contains(&Violation { index: moved, kind: ViolationKind::Support }));
    }

    #[test]
    fn low_structure_needs_no_stairs() {
        let mut g = VoxelGrid::new(65.0, [0.0; 3], [6, 6, 2]);
        g.fill_box([0, 0, 0], [6, 6, 2]);
        let t = tile(&g, &default_patterns()).unwrap();
        let s = generate_scaffold(&g, &t, &Feed::numbered(0, [-1, 2, 0]), &PlanConfig::default()).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn walled_in_target_has_no_stair_side() {
        // a block on a pillar, walled in by structure up to the edge of the planning area
        let model = RobotModel::default();
        let p = blk([2, 2, 2], [4, 4, 4]);
        let mut ring = Vec::new();
        for x in 0..10 {
            for y in 0..10 {
                if !(4..6).contains(&x) || !(4..6).contains(&y) {
                    ring.push(blk([1, 1, 8], [x, y, 0]));
                }
            }
        }
        ring.push(blk([2, 2, 4], [4, 4, 0]));
        let mut placements = vec![p];
        placements.extend(ring);
        let world = World::new([0, 0], [10, 10], 16);
        let feed = Foothold::new(0, 0, 7);
        let mut e = Engine::new(&model, BlockPattern::new(2, 2, 2), true, placements, vec![vec![0]], vec![feed], world, vec![]);
        assert_eq!(e.try_stairs(0), Err(PlanError::ScaffoldCollision { index: 0 }));
    }

    #[test]
    fn plan_json_shape() {
        let g = fixtures::cube_grid(4);
        let t = tile(&g, &default_patterns()).unwrap();
        let (plan, _) = plan_build(&g, &t, &[Feed::numbered(0, [-1, 1, 0])], &PlanConfig { capacity: 2, ..Default::default() }).unwrap();
        let v = serde_json::to_value(&plan).unwrap();
        assert_eq!(v["robots"][0]["trips"][0]["pickup_count"], 2);
        assert!(v["barriers"].as_array().unwrap().is_empty());
        let back: BuildPlan = serde_json::from_value(v).unwrap();
        assert_eq!(back, plan);
    }
}
