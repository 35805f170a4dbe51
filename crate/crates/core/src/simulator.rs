//! Discrete-event execution of build plans.
//!
//! Every robot is a small state machine woken from a shared queue ordered by
//! time and robot index, so equal inputs give identical traces. Blocks become
//! obstacles when dropped and count as placed once stomped.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path::{plan_path_to_any, reachable_stance_for_placement, Foothold, RobotModel, World};
use crate::sequencer::{block_in_envelope, envelope, BuildPlan, PlanConfig};
use crate::tiler::{BlockPlacement, Role};

/// Step time that makes the single-robot 4x4x4 cube with two blocks per trip
/// place 17,576,000 mm^3 in 240 s. Reproduce with [`calibrate`].
pub const CALIBRATED_T_STEP_S: f64 = 18.5;

/// Reference scenario throughput the step time is calibrated against.
pub const TARGET_THROUGHPUT_MM3_PER_MIN: f64 = 4_394_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("deadlock at t={t:.1}s: {}", waiting.join(", "))]
    DeadlockDetected { t: f64, waiting: Vec<String> },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("plan references placement {0} that does not exist")]
    BadPlan(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub t_step: f64,
    pub t_load_per_block: f64,
    pub t_drop: f64,
    pub t_retract: f64,
    pub t_stomp: f64,
    /// Blocks per trip; `None` keeps the plan's trips.
    pub capacity: Option<usize>,
    /// Wall-clock factor for live playback; no effect on sim time.
    pub speed_multiplier: f64,
    /// Chance that a step lands off pose and has to be redone.
    pub deviation_rate: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            t_step: CALIBRATED_T_STEP_S,
            t_load_per_block: 10.0,
            t_drop: 5.0,
            t_retract: 3.0,
            t_stomp: 5.0,
            capacity: None,
            speed_multiplier: 1.0,
            deviation_rate: 0.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let d = [self.t_step, self.t_load_per_block, self.t_drop, self.t_retract, self.t_stomp];
        if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(SimError::InvalidConfig("durations must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.deviation_rate) {
            return Err(SimError::InvalidConfig("deviation_rate must be within [0, 1]".into()));
        }
        if !(self.speed_multiplier > 0.0) {
            return Err(SimError::InvalidConfig("speed_multiplier must be positive".into()));
        }
        if self.capacity == Some(0) {
            return Err(SimError::InvalidConfig("capacity must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Step,
    Load,
    Drop,
    Stomp,
    BlockPlaced,
    BarrierWait,
    BarrierRelease,
    RealignStart,
    RealignDone,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub t: f64,
    pub robot: String,
    pub kind: EventKind,
    /// Time the action takes from `t`.
    pub dur: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<usize>,
    /// Stance after the event (steps) or where it happens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stance: Option<Foothold>,
    /// Blocks picked up (load).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    /// Step onto the dropped block rather than a walking step.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub in_place: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub barrier: Option<usize>,
}

impl SimEvent {
    fn new(t: f64, robot: &str, kind: EventKind, dur: f64) -> Self {
        SimEvent { t, robot: robot.to_string(), kind, dur, placement: None, stance: None, count: None, in_place: false, barrier: None }
    }

    pub fn end(&self) -> f64 {
        self.t + self.dur
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Loading,
    Walking,
    Placing,
    Stomping,
    WaitingBarrier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub robot_id: String,
    pub stance: Foothold,
    pub payload: Vec<usize>,
    pub phase: Phase,
    pub odometer: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotMetrics {
    pub robot_id: String,
    pub steps: u64,
    /// Horizontal walking distance.
    pub distance_mm: f64,
    /// Time spent in timed actions.
    pub busy_s: f64,
    pub utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub total_time_s: f64,
    pub placed_volume_mm3: f64,
    pub volumetric_throughput_mm3_per_min: f64,
    pub placement_count: usize,
    pub scaffold_count: usize,
    pub robots: Vec<RobotMetrics>,
}

impl Metrics {
    /// Recomputes everything from a trace and the plan it ran.
    pub fn from_trace(trace: &[SimEvent], plan: &BuildPlan) -> Metrics {
        let mut acc = MetricsAcc::new(plan);
        for e in trace {
            acc.record(e);
        }
        acc.finish()
    }
}

struct MetricsAcc {
    pitch_mm: f64,
    voxel_mm3: f64,
    roles: Vec<Role>,
    voxels: Vec<usize>,
    ids: Vec<String>,
    robots: BTreeMap<String, (u64, f64, f64)>,
    last_placed: f64,
    placed_volume: f64,
    placements: usize,
    scaffold: usize,
    last_stance: HashMap<String, Foothold>,
}

impl MetricsAcc {
    fn new(plan: &BuildPlan) -> Self {
        MetricsAcc {
            pitch_mm: plan.pitch_mm,
            voxel_mm3: plan.pitch_mm.powi(3),
            roles: plan.placements.iter().map(|p| p.role).collect(),
            voxels: plan.placements.iter().map(|p| p.voxel_count()).collect(),
            ids: plan.robots.iter().map(|r| r.robot_id.clone()).collect(),
            robots: plan.robots.iter().map(|r| (r.robot_id.clone(), (0, 0.0, 0.0))).collect(),
            last_placed: 0.0,
            placed_volume: 0.0,
            placements: 0,
            scaffold: 0,
            last_stance: plan.robots.iter().map(|r| (r.robot_id.clone(), r.feed_stance)).collect(),
        }
    }

    fn record(&mut self, e: &SimEvent) {
        let entry = self.robots.entry(e.robot.clone()).or_insert((0, 0.0, 0.0));
        entry.2 += e.dur;
        match e.kind {
            EventKind::Step => {
                entry.0 += 1;
                if let Some(s) = e.stance {
                    if let Some(prev) = self.last_stance.insert(e.robot.clone(), s) {
                        entry.1 += ((s.x - prev.x).abs() + (s.y - prev.y).abs()) as f64 * self.pitch_mm;
                    }
                }
            }
            EventKind::BlockPlaced => {
                let i = e.placement.unwrap_or(usize::MAX);
                if i < self.roles.len() {
                    if self.roles[i] == Role::Structure {
                        self.placements += 1;
                        self.placed_volume += self.voxels[i] as f64 * self.voxel_mm3;
                        self.last_placed = self.last_placed.max(e.t);
                    } else {
                        self.scaffold += 1;
                        self.last_placed = self.last_placed.max(e.t);
                    }
                }
            }
            _ => {}
        }
    }

    fn finish(self) -> Metrics {
        let total = self.last_placed;
        let robots = self
            .ids
            .iter()
            .map(|id| {
                let (steps, dist, busy) = self.robots.get(id).copied().unwrap_or((0, 0.0, 0.0));
                RobotMetrics {
                    robot_id: id.clone(),
                    steps,
                    distance_mm: dist,
                    busy_s: busy,
                    utilization: if total > 0.0 { busy / total } else { 0.0 },
                }
            })
            .collect();
        Metrics {
            total_time_s: total,
            placed_volume_mm3: self.placed_volume,
            volumetric_throughput_mm3_per_min: if total > 0.0 { self.placed_volume / (total / 60.0) } else { 0.0 },
            placement_count: self.placements,
            scaffold_count: self.scaffold,
            robots,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    /// Walk to the feed stance, then wait for the next trip.
    ToFeed,
    AwaitTrip,
    Load,
    /// Walk to the stance for the front payload block.
    Approach,
    AtStance,
    /// Parked until barrier partners arrive.
    Barrier,
    Drop,
    StepIn,
    Stomp,
    Placed,
    Finished,
}

struct Bot {
    id: String,
    feed: Foothold,
    stance: Foothold,
    stage: Stage,
    phase: Phase,
    trips: VecDeque<Vec<usize>>,
    payload: VecDeque<usize>,
    path: VecDeque<Foothold>,
    goal: Option<Foothold>,
    /// Stance being left and when the step ends.
    leaving: Option<(Foothold, f64)>,
    /// Block being dropped and when the arm is clear again.
    arm: Option<(usize, f64)>,
    waits: u32,
    odometer: u64,
    pending_realign: Option<(Foothold, Foothold)>,
    /// Stances it last tried to walk through while blocked.
    want: Vec<Foothold>,
    /// Asked by a blocked robot to clear these stances.
    make_way: Option<Vec<Foothold>>,
    detour: VecDeque<Foothold>,
    linger_until: f64,
    evacuate: bool,
}

impl Bot {
    fn occupied(&self, t: f64) -> Vec<Foothold> {
        let mut v = vec![self.stance];
        if let Some((from, until)) = self.leaving {
            if t < until {
                v.push(from);
            }
        }
        v
    }
}

pub struct SimOutput {
    pub trace: Vec<SimEvent>,
    pub metrics: Metrics,
}

struct Sim<'a> {
    plan: &'a BuildPlan,
    cfg: &'a SimConfig,
    model: RobotModel,
    world: World,
    bots: Vec<Bot>,
    queue: BinaryHeap<Reverse<(OrdF64, usize, u64)>>,
    seq: u64,
    placed: Vec<bool>,
    dropped: Vec<bool>,
    unplaced_layers: BTreeMap<i32, usize>,
    group_of: HashMap<usize, usize>,
    arrived: HashMap<usize, Vec<usize>>,
    trace: Vec<SimEvent>,
    acc: MetricsAcc,
    rng: ChaCha8Rng,
    last_progress: f64,
    per_block_bound: f64,
    remaining: usize,
    rank: HashMap<usize, usize>,
    first_open_step: std::cell::Cell<usize>,
    listed: HashSet<usize>,
}

#[derive(Debug, Clone, Copy)]
struct OrdF64(f64);
impl PartialEq for OrdF64 {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o).is_eq()
    }
}
impl Eq for OrdF64 {}
impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for OrdF64 {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&o.0)
    }
}

const REPLAN_AFTER_WAITS: u32 = 3;
const YIELD_AFTER_WAITS: u32 = 5;
const LINGER_STEPS: f64 = 3.0;
const DETOUR_DEPTH: usize = 12;

impl<'a> Sim<'a> {
    fn emit(&mut self, e: SimEvent) {
        self.acc.record(&e);
        self.trace.push(e);
    }

    fn wake(&mut self, r: usize, t: f64) {
        self.seq += 1;
        self.queue.push(Reverse((OrdF64(t), r, self.seq)));
    }

    fn ready(&self, i: usize) -> bool {
        let p = &self.plan.placements[i];
        if p.role == Role::Structure && self.unplaced_layers.range(..p.layer()).any(|(_, &n)| n > 0) {
            return false;
        }
        let fp = p.footprint();
        !self
            .plan
            .placements
            .iter()
            .enumerate()
            .any(|(j, q)| j != i && !self.placed[j] && q.layer() < p.layer() && q.footprint().overlaps(&fp))
    }

    /// First step of the drop order with something not yet down.
    fn open_step(&self) -> usize {
        let mut s = self.first_open_step.get();
        while s < self.plan.order.len() && self.plan.order[s].iter().all(|&j| self.dropped[j] || !self.listed.contains(&j)) {
            s += 1;
        }
        self.first_open_step.set(s);
        s
    }

    /// Everything ahead of `i` in the plan's drop order is down.
    fn turn_reached(&self, i: usize) -> bool {
        self.rank.get(&i).is_none_or(|&k| self.open_step() >= k)
    }

    /// Close enough to its turn to set out; keeps waiting robots off the
    /// structure.
    fn near_turn(&self, i: usize) -> bool {
        self.rank.get(&i).is_none_or(|&k| k < self.open_step() + self.bots.len())
    }

    fn others_block(&self, r: usize, f: Foothold, t: f64) -> bool {
        self.bots.iter().enumerate().any(|(k, b)| {
            k != r && b.stage != Stage::Finished && b.occupied(t).iter().any(|o| o.body_overlaps(&f, &self.model))
        })
    }

    /// Block cells inside another robot's body, or inside the envelope of
    /// an arm still dropping and retracting that is not a barrier partner.
    fn drop_blocked(&self, r: usize, i: usize, t: f64) -> bool {
        let p = &self.plan.placements[i];
        let group = self.group_of.get(&i);
        self.bots.iter().enumerate().any(|(k, b)| {
            if k == r || b.stage == Stage::Finished {
                return false;
            }
            if b.occupied(t).iter().any(|o| o.body_hits_cells(p.cells(), &self.model)) {
                return true;
            }
            let Some((j, until)) = b.arm else { return false };
            if t >= until || (group.is_some() && self.group_of.get(&j) == group) {
                return false;
            }
            block_in_envelope(p, envelope(&self.plan.placements[j], b.stance, &self.model))
        })
    }

    /// Active robots that dropping `i` would cut off from their feeds.
    fn stranded_by(&self, r: usize, i: usize) -> Vec<usize> {
        let others: Vec<usize> =
            (0..self.bots.len()).filter(|&k| k != r && self.bots[k].stage != Stage::Finished).collect();
        if others.is_empty() {
            return others;
        }
        let home = |w: &World, k: usize| {
            let b = &self.bots[k];
            plan_path_to_any(w, b.stance, &[b.feed], &self.model, &|_| false).is_ok()
        };
        let mut w = self.world.clone();
        for c in self.plan.placements[i].cells() {
            if w.contains_cell(c) {
                w.set(c, true);
            }
        }
        others.into_iter().filter(|&k| !home(&w, k) && home(&self.world, k)).collect()
    }

    /// Sends a robot back to its feed; it resumes its work from there.
    fn evacuate(&mut self, k: usize, t: f64) {
        if self.bots[k].evacuate || !self.can_yield(k) {
            return;
        }
        if self.bots[k].stage == Stage::Barrier {
            for members in self.arrived.values_mut() {
                members.retain(|&m| m != k);
            }
            self.wake(k, t);
        }
        let b = &mut self.bots[k];
        b.evacuate = true;
        b.want.clear();
        b.detour.clear();
        b.make_way = None;
        b.path.clear();
        b.goal = None;
        b.stage = match b.stage {
            Stage::AwaitTrip => Stage::ToFeed,
            Stage::AtStance | Stage::Drop | Stage::Barrier => Stage::Approach,
            s => s,
        };
    }

    /// Walks towards the feed stance, replanning around robots when stuck.
    fn head_home(&mut self, r: usize, t: f64) {
        let feed = self.bots[r].feed;
        if self.bots[r].path.is_empty() {
            let use_blocked = self.bots[r].waits >= REPLAN_AFTER_WAITS;
            let path = {
                let blocked = |f: Foothold| use_blocked && self.others_block(r, f, t);
                self.path_to(r, &[feed], &blocked)
            };
            match path {
                Some(p) => self.bots[r].path = p.into_iter().skip(1).collect(),
                None => {
                    self.note_route(r, &[feed]);
                    self.resolve_block(r, t);
                    return self.wait(r, t);
                }
            }
        }
        self.bots[r].phase = Phase::Walking;
        self.walk(r, t);
    }

    /// Path to the planned stance for `i`. Without one, the nearest stance
    /// from which the robot can still get home after the drop.
    fn stance_for(&mut self, r: usize, i: usize, t: f64) -> Option<Vec<Foothold>> {
        let p = self.plan.placements[i].clone();
        let use_blocked = self.bots[r].waits >= REPLAN_AFTER_WAITS;
        let blocked = |f: Foothold| use_blocked && self.others_block(r, f, t);
        if let Some(Some(s)) = self.plan.stances.get(i) {
            if !self.world.is_foothold(*s) || s.body_hits_cells(p.cells(), &self.model) {
                return None;
            }
            return self.path_to(r, &[*s], &blocked);
        }
        let mut cands = reachable_stance_for_placement(&self.world, &p, &self.model).ok()?;
        let mut after = self.world.clone();
        after.place(&p);
        let feed = self.bots[r].feed;
        for _ in 0..8 {
            let path = self.path_to(r, &cands, &blocked)?;
            let s = *path.last().unwrap();
            if plan_path_to_any(&after, s, &[feed], &self.model, &|_| false).is_ok() {
                return Some(path);
            }
            cands.retain(|&c| c != s);
        }
        None
    }

    fn path_to(&self, r: usize, goals: &[Foothold], blocked: &dyn Fn(Foothold) -> bool) -> Option<Vec<Foothold>> {
        // occupied goals would only make the search exhaust the graph
        let goals: Vec<Foothold> = goals.iter().copied().filter(|&g| !blocked(g)).collect();
        if goals.is_empty() {
            return None;
        }
        plan_path_to_any(&self.world, self.bots[r].stance, &goals, &self.model, blocked)
            .ok()
            .map(|p| p.stances)
    }

    /// Remembers the route ignoring other robots, so the ones in the way
    /// can be found.
    fn note_route(&mut self, r: usize, goals: &[Foothold]) {
        if let Ok(p) = plan_path_to_any(&self.world, self.bots[r].stance, goals, &self.model, &|_| false) {
            self.bots[r].want = p.stances.into_iter().skip(1).collect();
        }
    }

    fn can_yield(&self, k: usize) -> bool {
        let b = &self.bots[k];
        let free_drop = b.stage == Stage::Drop && b.payload.front().is_some_and(|i| !self.group_of.contains_key(i));
        (free_drop || matches!(b.stage, Stage::ToFeed | Stage::AwaitTrip | Stage::Approach | Stage::AtStance | Stage::Barrier))
            && b.pending_realign.is_none()
    }

    /// Asks lower-priority robots standing where this block goes to move.
    fn clear_drop_site(&mut self, r: usize, i: usize, t: f64) {
        if self.bots[r].waits < YIELD_AFTER_WAITS {
            return;
        }
        let p = &self.plan.placements[i];
        let mine = self.bots[r].stance;
        let movers: Vec<usize> = (0..self.bots.len())
            .filter(|&k| {
                let b = &self.bots[k];
                k != r
                    && b.stage != Stage::Finished
                    && self.can_yield(k)
                    && b.occupied(t).iter().any(|o| o.body_hits_cells(p.cells(), &self.model))
                    && self.priority(k) > self.priority(r)
            })
            .collect();
        for k in movers {
            if self.bots[k].make_way.is_none() && self.bots[k].detour.is_empty() {
                self.bots[k].make_way = Some(vec![mine]);
                if self.bots[k].stage == Stage::Barrier {
                    self.wake(k, t);
                }
            }
        }
    }

    /// Route the most urgent robot still has to walk; others keep off it.
    fn corridor(&self, r: usize) -> Vec<Foothold> {
        let Some(top) = (0..self.bots.len()).filter(|&k| self.bots[k].stage != Stage::Finished).min_by_key(|&k| self.priority(k)) else {
            return Vec::new();
        };
        if top == r {
            return Vec::new();
        }
        let b = &self.bots[top];
        let mut c: Vec<Foothold> = b.detour.iter().chain(&b.path).chain(&b.want).copied().collect();
        c.extend(b.goal);
        c
    }

    /// Lower goes first: robots clearing out, then the drop-order rank of
    /// the robot's next block, finished robots last, robot index on ties.
    fn priority(&self, k: usize) -> (usize, bool, usize) {
        let b = &self.bots[k];
        if b.evacuate {
            return (0, false, k);
        }
        let next = b.payload.front().or_else(|| b.trips.front().and_then(|t| t.first()));
        let rank = next.map_or(usize::MAX, |i| self.rank.get(i).copied().unwrap_or(usize::MAX - 1));
        // a parked barrier member lets its partners through
        (rank, b.stage == Stage::Barrier, k)
    }

    /// A robot stuck behind another either asks it to move aside or moves
    /// aside itself, whichever holds the later block.
    fn resolve_block(&mut self, r: usize, t: f64) {
        if self.bots[r].waits < YIELD_AFTER_WAITS || self.bots[r].want.is_empty() {
            return;
        }
        let want = self.bots[r].want.clone();
        let Some(k) = (0..self.bots.len()).find(|&k| {
            k != r
                && self.bots[k].stage != Stage::Finished
                && self.bots[k].occupied(t).iter().any(|o| want.iter().any(|w| o.body_overlaps(w, &self.model)))
        }) else {
            return;
        };
        let k_first = self.can_yield(k) && (self.priority(k) > self.priority(r) || !self.can_yield(r));
        if k_first {
            if self.bots[k].make_way.is_none() && self.bots[k].detour.is_empty() {
                self.bots[k].make_way = Some(want);
                if self.bots[k].stage == Stage::Barrier {
                    self.wake(k, t);
                }
            }
        } else if self.can_yield(r) && self.bots[r].detour.is_empty() {
            let mut keep = self.bots[k].want.clone();
            keep.extend(self.bots[k].goal);
            keep.push(self.bots[k].stance);
            self.sidestep(r, &keep, t);
        }
    }

    /// Walks to the nearest stance clear of `keep`, other robots and the
    /// blocks they are about to drop.
    fn sidestep(&mut self, r: usize, keep: &[Foothold], t: f64) {
        let start = self.bots[r].stance;
        let clear = |s: &Self, f: Foothold| {
            !keep.iter().any(|k| f.body_overlaps(k, &s.model))
                && !s.bots.iter().enumerate().any(|(k, b)| {
                    k != r
                        && b.stage != Stage::Finished
                        && (b.goal.is_some_and(|g| f.body_overlaps(&g, &s.model))
                            || b.payload.front().is_some_and(|&i| f.body_hits_cells(s.plan.placements[i].cells(), &s.model)))
                })
        };
        let mut prev: HashMap<Foothold, Foothold> = HashMap::new();
        let mut frontier = vec![start];
        let mut found = None;
        'bfs: for _ in 0..DETOUR_DEPTH {
            let mut next = Vec::new();
            for f in frontier {
                for n in self.world.neighbors(f, &self.model) {
                    if n == start || prev.contains_key(&n) || self.others_block(r, n, t) {
                        continue;
                    }
                    prev.insert(n, f);
                    if clear(self, n) {
                        found = Some(n);
                        break 'bfs;
                    }
                    next.push(n);
                }
            }
            frontier = next;
        }
        let Some(mut f) = found else {
            // nowhere to stand aside nearby: clear out entirely
            if self.bots[r].stance != self.bots[r].feed {
                self.evacuate(r, t);
            }
            return;
        };
        let mut route = VecDeque::new();
        while f != start {
            route.push_front(f);
            f = prev[&f];
        }
        if self.bots[r].stage == Stage::Barrier {
            // leaves the barrier and arrives again later
            for members in self.arrived.values_mut() {
                members.retain(|&k| k != r);
            }
        }
        let b = &mut self.bots[r];
        b.detour = route;
        b.path.clear();
        b.goal = None;
        b.waits = 0;
        b.stage = match b.stage {
            Stage::AwaitTrip => Stage::ToFeed,
            Stage::AtStance | Stage::Drop | Stage::Barrier => Stage::Approach,
            s => s,
        };
    }

    fn wait(&mut self, r: usize, t: f64) {
        self.bots[r].waits += 1;
        let dt = self.cfg.t_step;
        self.wake(r, t + dt);
    }

    /// One step along the current path; returns false when it had to wait.
    fn walk(&mut self, r: usize, t: f64) -> bool {
        let detour = !self.bots[r].detour.is_empty();
        let b = &self.bots[r];
        let Some(&next) = (if detour { b.detour.front() } else { b.path.front() }) else { return true };
        let cur = b.stance;
        if !self.world.is_foothold(next) || !self.world.step_ok(cur, next, &self.model) {
            self.bots[r].path.clear();
            self.bots[r].detour.clear();
            self.wait(r, t);
            return false;
        }
        let corridor = self.corridor(r);
        let cur_in = corridor.iter().any(|c| cur.body_overlaps(c, &self.model));
        let into_corridor = !cur_in && corridor.iter().any(|c| next.body_overlaps(c, &self.model));
        if into_corridor || self.others_block(r, next, t) {
            let b = &mut self.bots[r];
            b.want = if detour { b.detour.iter().copied().collect() } else { b.path.iter().copied().collect() };
            if b.waits >= REPLAN_AFTER_WAITS {
                b.path.clear();
                b.detour.clear();
            }
            self.resolve_block(r, t);
            self.wait(r, t);
            return false;
        }
        let b = &mut self.bots[r];
        b.waits = 0;
        b.want.clear();
        if detour {
            b.detour.pop_front();
            if b.detour.is_empty() {
                b.linger_until = t + LINGER_STEPS * self.cfg.t_step;
            }
        } else {
            b.path.pop_front();
        }
        let deviate = self.cfg.deviation_rate > 0.0 && self.rng.gen::<f64>() < self.cfg.deviation_rate;
        let dt = self.cfg.t_step;
        let mut e = SimEvent::new(t, &self.bots[r].id.clone(), EventKind::Step, dt);
        e.stance = Some(next);
        self.emit(e);
        let b = &mut self.bots[r];
        b.odometer += 1;
        b.leaving = Some((cur, t + dt));
        b.stance = next;
        if deviate {
            // keep the old stance reserved for the way back
            b.leaving = Some((cur, f64::INFINITY));
            b.pending_realign = Some((cur, next));
        }
        self.wake(r, t + dt);
        true
    }

    /// Off-pose step: go back to the last stance, then step again at half speed.
    fn realign(&mut self, r: usize, t: f64) {
        let (back, fwd) = self.bots[r].pending_realign.take().unwrap();
        let id = self.bots[r].id.clone();
        let ts = self.cfg.t_step;
        self.emit(SimEvent::new(t, &id, EventKind::RealignStart, 0.0));
        let mut e = SimEvent::new(t, &id, EventKind::Step, ts);
        e.stance = Some(back);
        self.emit(e);
        let mut e = SimEvent::new(t + ts, &id, EventKind::Step, 2.0 * ts);
        e.stance = Some(fwd);
        self.emit(e);
        self.emit(SimEvent::new(t + 3.0 * ts, &id, EventKind::RealignDone, 0.0));
        let b = &mut self.bots[r];
        b.odometer += 2;
        b.leaving = Some((back, t + 3.0 * ts));
        self.wake(r, t + 3.0 * ts);
    }

    fn step_robot(&mut self, r: usize, t: f64) {
        if self.bots[r].pending_realign.is_some() {
            self.realign(r, t);
            return;
        }
        if self.bots[r].leaving.is_some_and(|(_, until)| t >= until) {
            self.bots[r].leaving = None;
        }
        if let Some(keep) = self.bots[r].make_way.take() {
            if self.can_yield(r) && self.bots[r].detour.is_empty() {
                self.sidestep(r, &keep, t);
            }
        }
        if !self.bots[r].detour.is_empty() {
            self.bots[r].phase = Phase::Walking;
            self.walk(r, t);
            return;
        }
        if self.bots[r].evacuate {
            if self.bots[r].stance == self.bots[r].feed {
                let b = &mut self.bots[r];
                b.evacuate = false;
                b.path.clear();
                b.linger_until = t + LINGER_STEPS * self.cfg.t_step;
                let until = b.linger_until;
                self.wake(r, until);
            } else {
                self.head_home(r, t);
            }
            return;
        }
        if t < self.bots[r].linger_until {
            let until = self.bots[r].linger_until;
            self.wake(r, until);
            return;
        }
        let id = self.bots[r].id.clone();
        match self.bots[r].stage {
            Stage::ToFeed => {
                let feed = self.bots[r].feed;
                if self.bots[r].stance == feed {
                    self.bots[r].stage = Stage::AwaitTrip;
                    self.bots[r].phase = Phase::Idle;
                    self.step_robot(r, t);
                    return;
                }
                self.head_home(r, t);
            }
            Stage::AwaitTrip => {
                let Some(trip) = self.bots[r].trips.front() else {
                    self.bots[r].stage = Stage::Finished;
                    self.emit(SimEvent::new(t, &id, EventKind::Done, 0.0));
                    return;
                };
                if !self.ready(trip[0]) || !self.near_turn(trip[0]) {
                    return self.wait(r, t);
                }
                self.bots[r].stage = Stage::Load;
                self.step_robot(r, t);
            }
            Stage::Load => {
                let trip = self.bots[r].trips.pop_front().unwrap();
                let dur = self.cfg.t_load_per_block * trip.len() as f64;
                let mut e = SimEvent::new(t, &id, EventKind::Load, dur);
                e.count = Some(trip.len());
                self.emit(e);
                let b = &mut self.bots[r];
                b.payload = trip.into();
                b.phase = Phase::Loading;
                b.stage = Stage::Approach;
                b.waits = 0;
                self.wake(r, t + dur);
            }
            Stage::Approach => {
                let i = *self.bots[r].payload.front().unwrap();
                let goal_ok = self.bots[r].goal.is_some_and(|g| {
                    self.world.is_foothold(g) && !g.body_hits_cells(self.plan.placements[i].cells(), &self.model)
                });
                if !goal_ok {
                    self.bots[r].path.clear();
                    self.bots[r].goal = None;
                }
                if self.bots[r].goal == Some(self.bots[r].stance) {
                    self.bots[r].stage = Stage::AtStance;
                    self.step_robot(r, t);
                    return;
                }
                if self.bots[r].path.is_empty() {
                    match self.stance_for(r, i, t) {
                        Some(p) => {
                            self.bots[r].goal = p.last().copied();
                            self.bots[r].path = p.into_iter().skip(1).collect();
                            if self.bots[r].path.is_empty() {
                                self.bots[r].stage = Stage::AtStance;
                                self.step_robot(r, t);
                                return;
                            }
                        }
                        None => {
                            if let Some(g) = self.plan.stances.get(i).copied().flatten() {
                                self.note_route(r, &[g]);
                            }
                            self.resolve_block(r, t);
                            return self.wait(r, t);
                        }
                    }
                }
                self.bots[r].phase = Phase::Walking;
                self.walk(r, t);
            }
            Stage::AtStance => {
                let i = *self.bots[r].payload.front().unwrap();
                if !self.ready(i) {
                    return self.wait(r, t);
                }
                self.bots[r].phase = Phase::Placing;
                if let Some(&g) = self.group_of.get(&i) {
                    let arrived = self.arrived.entry(g).or_default();
                    if !arrived.contains(&r) {
                        arrived.push(r);
                        let mut e = SimEvent::new(t, &id, EventKind::BarrierWait, 0.0);
                        e.barrier = Some(g);
                        e.placement = Some(i);
                        self.emit(e);
                    }
                    let all = self.plan.barriers[g].len();
                    if self.arrived[&g].len() < all {
                        self.bots[r].stage = Stage::Barrier;
                        self.bots[r].phase = Phase::WaitingBarrier;
                        return;
                    }
                    let mut members = self.arrived.remove(&g).unwrap();
                    members.sort_unstable();
                    for k in members {
                        let mut e = SimEvent::new(t, &self.bots[k].id.clone(), EventKind::BarrierRelease, 0.0);
                        e.barrier = Some(g);
                        self.emit(e);
                        self.bots[k].stage = Stage::Drop;
                        self.bots[k].phase = Phase::Placing;
                        if k != r {
                            self.wake(k, t);
                        }
                    }
                    self.step_robot(r, t);
                    return;
                }
                self.bots[r].stage = Stage::Drop;
                self.step_robot(r, t);
            }
            Stage::Barrier => {}
            Stage::Drop => {
                let i = *self.bots[r].payload.front().unwrap();
                let partner_drop = self.group_of.contains_key(&i);
                if !partner_drop && self.drop_blocked(r, i, t) {
                    self.clear_drop_site(r, i, t);
                    return self.wait(r, t);
                }
                if !self.turn_reached(i) {
                    self.clear_drop_site(r, i, t);
                    return self.wait(r, t);
                }
                let stranded = if partner_drop { Vec::new() } else { self.stranded_by(r, i) };
                if !stranded.is_empty() {
                    for k in stranded {
                        self.evacuate(k, t);
                    }
                    return self.wait(r, t);
                }
                let p = self.plan.placements[i].clone();
                for c in p.cells() {
                    if self.world.contains_cell(c) {
                        self.world.set(c, true);
                    }
                }
                self.dropped[i] = true;
                self.bots[r].arm = Some((i, t + self.cfg.t_drop + self.cfg.t_retract));
                let mut e = SimEvent::new(t, &id, EventKind::Drop, self.cfg.t_drop);
                e.placement = Some(i);
                e.stance = Some(self.bots[r].stance);
                self.emit(e);
                self.bots[r].stage = Stage::StepIn;
                self.bots[r].waits = 0;
                self.wake(r, t + self.cfg.t_drop + self.cfg.t_retract);
            }
            Stage::StepIn => {
                let i = *self.bots[r].payload.front().unwrap();
                let mut e = SimEvent::new(t, &id, EventKind::Step, self.cfg.t_step);
                e.placement = Some(i);
                e.in_place = true;
                e.stance = Some(self.bots[r].stance);
                self.emit(e);
                self.bots[r].odometer += 1;
                self.bots[r].stage = Stage::Stomp;
                self.wake(r, t + self.cfg.t_step);
            }
            Stage::Stomp => {
                let i = *self.bots[r].payload.front().unwrap();
                let mut e = SimEvent::new(t, &id, EventKind::Stomp, self.cfg.t_stomp);
                e.placement = Some(i);
                self.emit(e);
                self.bots[r].phase = Phase::Stomping;
                self.bots[r].stage = Stage::Placed;
                self.wake(r, t + self.cfg.t_stomp);
            }
            Stage::Placed => {
                let i = self.bots[r].payload.pop_front().unwrap();
                let mut e = SimEvent::new(t, &id, EventKind::BlockPlaced, 0.0);
                e.placement = Some(i);
                self.emit(e);
                self.placed[i] = true;
                self.remaining -= 1;
                self.last_progress = t;
                let p = &self.plan.placements[i];
                if p.role == Role::Structure {
                    *self.unplaced_layers.get_mut(&p.layer()).unwrap() -= 1;
                }
                let b = &mut self.bots[r];
                b.goal = None;
                b.path.clear();
                if !b.payload.is_empty() {
                    b.stage = Stage::Approach;
                } else if !b.trips.is_empty() {
                    b.stage = Stage::ToFeed;
                } else {
                    b.stage = Stage::Finished;
                    b.phase = Phase::Idle;
                    self.emit(SimEvent::new(t, &id, EventKind::Done, 0.0));
                    return;
                }
                self.step_robot(r, t);
            }
            Stage::Finished => {}
        }
    }

    fn deadlock_timeout(&self) -> f64 {
        10.0 * self.per_block_bound * self.remaining.max(1) as f64
    }

    fn run(mut self) -> Result<SimOutput, SimError> {
        for r in 0..self.bots.len() {
            self.wake(r, 0.0);
        }
        while let Some(Reverse((OrdF64(t), r, _))) = self.queue.pop() {
            if self.remaining > 0 && t - self.last_progress > self.deadlock_timeout() {
                let waiting = self
                    .bots
                    .iter()
                    .filter(|b| b.stage != Stage::Finished)
                    .map(|b| format!("{} {:?} at {:?}", b.id, b.stage, b.stance))
                    .collect();
                return Err(SimError::DeadlockDetected { t, waiting });
            }
            self.step_robot(r, t);
        }
        if self.remaining > 0 {
            let waiting = self
                .bots
                .iter()
                .filter(|b| b.stage != Stage::Finished)
                .map(|b| format!("{} {:?} at {:?}", b.id, b.stage, b.stance))
                .collect();
            return Err(SimError::DeadlockDetected { t: self.last_progress, waiting });
        }
        let metrics = self.acc.finish();
        let mut trace = self.trace;
        // realignment writes a few events ahead of the clock
        trace.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(SimOutput { trace, metrics })
    }
}

fn regroup(seq: &[usize], placements: &[BlockPlacement], capacity: usize) -> Vec<Vec<usize>> {
    let mut trips: Vec<Vec<usize>> = Vec::new();
    for &i in seq {
        let p = &placements[i];
        let join = trips.last().is_some_and(|t| {
            let first = &placements[t[0]];
            t.len() < capacity && first.role == p.role && (p.role != Role::Structure || first.layer() == p.layer())
        });
        if join {
            trips.last_mut().unwrap().push(i);
        } else {
            trips.push(vec![i]);
        }
    }
    trips
}

/// Runs a plan to completion.
pub fn run(plan: &BuildPlan, cfg: &SimConfig, plan_cfg: &PlanConfig, seed: u64) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let n = plan.placements.len();
    for rp in &plan.robots {
        if let Some(i) = rp.sequence().find(|&i| i >= n) {
            return Err(SimError::BadPlan(i));
        }
    }
    let model = plan_cfg.robot;
    let world = sim_world(plan, &model);
    let mut unplaced_layers = BTreeMap::new();
    let listed: HashSet<usize> = plan.robots.iter().flat_map(|r| r.sequence()).collect();
    for &i in &listed {
        let p = &plan.placements[i];
        if p.role == Role::Structure {
            *unplaced_layers.entry(p.layer()).or_insert(0) += 1;
        }
    }
    // placements nobody builds are treated as already there for readiness
    let placed: Vec<bool> = (0..n).map(|i| !listed.contains(&i)).collect();
    let bots = plan
        .robots
        .iter()
        .map(|rp| {
            let seq: Vec<usize> = rp.sequence().collect();
            let trips = match cfg.capacity {
                Some(c) => regroup(&seq, &plan.placements, c),
                None => rp.trips.iter().map(|t| t.placements.clone()).collect(),
            };
            Bot {
                id: rp.robot_id.clone(),
                feed: rp.feed_stance,
                stance: rp.feed_stance,
                stage: Stage::ToFeed,
                phase: Phase::Idle,
                trips: trips.into_iter().filter(|t| !t.is_empty()).collect(),
                payload: VecDeque::new(),
                path: VecDeque::new(),
                goal: None,
                leaving: None,
                arm: None,
                waits: 0,
                odometer: 0,
                pending_realign: None,
                want: Vec::new(),
                make_way: None,
                detour: VecDeque::new(),
                linger_until: 0.0,
                evacuate: false,
            }
        })
        .collect();
    let span = (world.xy_rect().x1 - world.xy_rect().x0 + world.xy_rect().y1 - world.xy_rect().y0 + world.height()) as f64;
    let per_block_bound = cfg.t_load_per_block + cfg.t_drop + cfg.t_retract + cfg.t_stomp + cfg.t_step * (1.0 + 2.0 * span);
    let sim = Sim {
        plan,
        cfg,
        model,
        world,
        bots,
        queue: BinaryHeap::new(),
        seq: 0,
        placed,
        dropped: vec![false; n],
        unplaced_layers,
        group_of: plan.barriers.iter().enumerate().flat_map(|(g, m)| m.iter().map(move |&i| (i, g))).collect(),
        arrived: HashMap::new(),
        trace: Vec::new(),
        acc: MetricsAcc::new(plan),
        rng: ChaCha8Rng::seed_from_u64(seed),
        last_progress: 0.0,
        per_block_bound,
        remaining: listed.len(),
        rank: plan.order.iter().enumerate().flat_map(|(k, step)| step.iter().map(move |&i| (i, k))).collect(),
        first_open_step: std::cell::Cell::new(0),
        listed,
    };
    sim.run()
}

fn sim_world(plan: &BuildPlan, model: &RobotModel) -> World {
    let [nx, ny, nz] = plan.dims.map(|d| d as i32);
    let top = plan.placements.iter().map(|p| p.top() + 1).max().unwrap_or(0).max(nz);
    let margin = top + 6;
    let mut w = World::new([-margin, -margin], [nx + margin, ny + margin], top + model.robot_height + 4);
    for r in &plan.robots {
        w.include(crate::tiler::Rect::new(r.feed[0] - 1, r.feed[1] - 1, 3, 3), 4);
    }
    for p in &plan.placements {
        w.include(p.footprint(), 4);
    }
    w
}

pub fn write_trace_jsonl(trace: &[SimEvent]) -> String {
    let mut s = String::new();
    for e in trace {
        s.push_str(&serde_json::to_string(e).expect("event serializes"));
        s.push('\n');
    }
    s
}

pub fn read_trace_jsonl(text: &str) -> Result<Vec<SimEvent>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// Stance windows held by each robot over time, as `(robot, stance, from, to)`.
pub fn stance_intervals(trace: &[SimEvent], plan: &BuildPlan) -> Vec<(String, Foothold, f64, f64)> {
    let mut current: HashMap<String, (Foothold, f64)> =
        plan.robots.iter().map(|r| (r.robot_id.clone(), (r.feed_stance, 0.0))).collect();
    let mut out = Vec::new();
    let mut done: HashMap<String, f64> = HashMap::new();
    for e in trace {
        match e.kind {
            EventKind::Step if !e.in_place => {
                let to = e.stance.expect("walking step has a stance");
                let (from, since) = current[&e.robot];
                // the old stance is held until the step completes, the new one from its start
                out.push((e.robot.clone(), from, since, e.end()));
                current.insert(e.robot.clone(), (to, e.t));
            }
            EventKind::Done => {
                done.insert(e.robot.clone(), e.t);
            }
            _ => {}
        }
    }
    for (id, (s, since)) in current {
        let end = done.get(&id).copied().unwrap_or(f64::INFINITY);
        out.push((id, s, since, end));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0).then(a.2.total_cmp(&b.2)));
    out
}

/// Pairs of robots whose bodies overlap during a common open time interval.
pub fn mutual_exclusion_violations(trace: &[SimEvent], plan: &BuildPlan, model: &RobotModel) -> Vec<(String, String, f64)> {
    let iv = stance_intervals(trace, plan);
    let mut out = Vec::new();
    for (a, x) in iv.iter().enumerate() {
        for y in &iv[a + 1..] {
            if x.0 == y.0 {
                continue;
            }
            let lo = x.2.max(y.2);
            let hi = x.3.min(y.3);
            if lo < hi && x.1.body_overlaps(&y.1, model) {
                out.push((x.0.clone(), y.0.clone(), lo));
            }
        }
    }
    out
}

/// Solves the step time that puts the reference scenario on the target
/// throughput: the remaining durations are fixed and the trace is linear in
/// the step time for a single robot.
pub fn calibrate(base: &SimConfig) -> f64 {
    let (plan, plan_cfg) = reference_plan();
    let cfg = SimConfig { t_step: 1.0, deviation_rate: 0.0, ..base.clone() };
    let out = run(&plan, &cfg, &plan_cfg, 0).expect("reference scenario runs");
    let steps = out.trace.iter().filter(|e| e.kind == EventKind::Step).count() as f64;
    let fixed = out.metrics.total_time_s - steps;
    let target = out.metrics.placed_volume_mm3 / TARGET_THROUGHPUT_MM3_PER_MIN * 60.0;
    (target - fixed) / steps
}

/// Single robot, 4x4x4 cube of 4x2x2 blocks, two blocks per trip.
pub fn reference_plan() -> (BuildPlan, PlanConfig) {
    let grid = crate::fixtures::cube_grid(4);
    let tiling = crate::tiler::tile(&grid, &[crate::tiler::BlockPattern::new(4, 2, 2), crate::tiler::BlockPattern::UNIT])
        .expect("unit pattern present");
    let cfg = PlanConfig { capacity: 2, ..Default::default() };
    let feeds = crate::sequencer::Feed::numbered_all(&crate::fixtures::default_feeds(&grid, 1));
    let (plan, _) = crate::sequencer::plan_build(&grid, &tiling, &feeds, &cfg).expect("reference plan");
    (plan, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub size: usize,
    pub robots: usize,
    pub capacity: usize,
    pub time_s: f64,
    pub throughput_mm3_min: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patterns: Option<String>,
}

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Plan(#[from] crate::sequencer::PlanError),
    #[error("plan for {0} is infeasible")]
    Infeasible(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Tile(#[from] crate::tiler::TileError),
}

/// Plans and runs one cube scenario.
pub fn run_cube(
    size: usize,
    robots: usize,
    capacity: usize,
    patterns: &[crate::tiler::BlockPattern],
    cfg: &SimConfig,
) -> Result<StudyRow, StudyError> {
    let grid = crate::fixtures::cube_grid(size);
    let tiling = crate::tiler::tile(&grid, patterns)?;
    let plan_cfg = PlanConfig { capacity, ..Default::default() };
    let feeds = crate::sequencer::Feed::numbered_all(&crate::fixtures::default_feeds(&grid, robots));
    let (plan, report) = crate::sequencer::plan_build(&grid, &tiling, &feeds, &plan_cfg)?;
    if !report.is_feasible() {
        return Err(StudyError::Infeasible(format!("{size}^3 with {robots} robots")));
    }
    let out = run(&plan, &SimConfig { capacity: None, ..cfg.clone() }, &plan_cfg, 0)?;
    Ok(StudyRow {
        size,
        robots,
        capacity,
        time_s: out.metrics.total_time_s,
        throughput_mm3_min: out.metrics.volumetric_throughput_mm3_per_min,
        patterns: None,
    })
}

/// Build time over cube sizes and robot counts; cells run in parallel and
/// come back in input order.
pub fn scaling_study(sizes: &[usize], robots: &[usize], capacity: usize, cfg: &SimConfig) -> Result<Vec<StudyRow>, StudyError> {
    use rayon::prelude::*;
    let cells: Vec<(usize, usize)> = sizes.iter().flat_map(|&s| robots.iter().map(move |&r| (s, r))).collect();
    let patterns = crate::tiler::default_patterns();
    cells.par_iter().map(|&(s, r)| run_cube(s, r, capacity, &patterns, cfg)).collect()
}

/// Build time over carrying capacities and pattern sets on one cube.
pub fn carrying_study(
    size: usize,
    capacities: &[usize],
    pattern_sets: &[Vec<crate::tiler::BlockPattern>],
    cfg: &SimConfig,
) -> Result<Vec<StudyRow>, StudyError> {
    use rayon::prelude::*;
    let cells: Vec<(usize, usize)> =
        (0..pattern_sets.len()).flat_map(|k| capacities.iter().map(move |&c| (k, c))).collect();
    cells
        .par_iter()
        .map(|&(k, c)| {
            let mut row = run_cube(size, 1, c, &pattern_sets[k], cfg)?;
            row.patterns = Some(crate::tiler::pattern_set_name(&pattern_sets[k]));
            Ok(row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::sequencer::{plan_build, Feed};
    use crate::tiler::{default_patterns, tile, BlockPattern};
    use crate::voxel::VoxelGrid;

    fn one_block_plan() -> (BuildPlan, PlanConfig) {
        let mut g = VoxelGrid::new(65.0, [0.0; 3], [2, 2, 2]);
        g.fill_box([0, 0, 0], [2, 2, 2]);
        let t = tile(&g, &[BlockPattern::new(2, 2, 2), BlockPattern::UNIT]).unwrap();
        let cfg = PlanConfig::default();
        let (plan, rep) = plan_build(&g, &t, &[Feed::numbered(0, [-1, 0, 0])], &cfg).unwrap();
        assert!(rep.is_feasible());
        (plan, cfg)
    }

    #[test]
    fn empty_plan_finishes_at_zero() {
        let g = VoxelGrid::new(65.0, [0.0; 3], [2, 2, 2]);
        let t = tile(&g, &default_patterns()).unwrap();
        let cfg = PlanConfig::default();
        let (plan, _) = plan_build(&g, &t, &[Feed::numbered(0, [-1, 0, 0])], &cfg).unwrap();
        let out = run(&plan, &SimConfig::default(), &cfg, 1).unwrap();
        assert_eq!(out.metrics.total_time_s, 0.0);
        assert!(out.trace.iter().all(|e| e.kind == EventKind::Done));
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn single_block_time_is_the_hand_sum() {
        let (plan, pcfg) = one_block_plan();
        let c = SimConfig::default();
        let out = run(&plan, &c, &pcfg, 0).unwrap();
        let k = out.trace.iter().filter(|e| e.kind == EventKind::Step && !e.in_place).count() as f64;
        let expected = c.t_load_per_block + k * c.t_step + c.t_drop + c.t_retract + c.t_step + c.t_stomp;
        assert!((out.metrics.total_time_s - expected).abs() < 1e-9);
        let kinds: Vec<EventKind> = out.trace.iter().map(|e| e.kind).filter(|k| *k != EventKind::Step).collect();
        assert_eq!(kinds, vec![EventKind::Load, EventKind::Drop, EventKind::Stomp, EventKind::BlockPlaced, EventKind::Done]);
    }

    #[test]
    fn calibrated_step_matches_constant() {
        let t = calibrate(&SimConfig::default());
        assert!((t - CALIBRATED_T_STEP_S).abs() < 5e-3, "calibrated {t}");
    }

    #[test]
    fn reference_scenario_hits_target() {
        let (plan, pcfg) = reference_plan();
        let out = run(&plan, &SimConfig::default(), &pcfg, 0).unwrap();
        assert_eq!(out.metrics.placed_volume_mm3, 17_576_000.0);
        let rel = out.metrics.volumetric_throughput_mm3_per_min / TARGET_THROUGHPUT_MM3_PER_MIN - 1.0;
        assert!(rel.abs() < 0.15, "{rel}");
    }

    #[test]
    fn metrics_recompute_from_trace() {
        let g = fixtures::cube_grid(8);
        let t = tile(&g, &default_patterns()).unwrap();
        let pcfg = PlanConfig::default();
        let feeds = Feed::numbered_all(&fixtures::default_feeds(&g, 2));
        let (plan, _) = plan_build(&g, &t, &feeds, &pcfg).unwrap();
        let out = run(&plan, &SimConfig::default(), &pcfg, 5).unwrap();
        assert_eq!(Metrics::from_trace(&out.trace, &plan), out.metrics);
    }

    #[test]
    fn deviations_only_add_time() {
        let (plan, pcfg) = reference_plan();
        let calm = run(&plan, &SimConfig::default(), &pcfg, 3).unwrap();
        let shaky = run(&plan, &SimConfig { deviation_rate: 0.3, ..Default::default() }, &pcfg, 3).unwrap();
        assert!(shaky.metrics.total_time_s > calm.metrics.total_time_s);
        assert!(shaky.trace.iter().any(|e| e.kind == EventKind::RealignStart));
        let again = run(&plan, &SimConfig { deviation_rate: 0.3, ..Default::default() }, &pcfg, 3).unwrap();
        assert_eq!(write_trace_jsonl(&shaky.trace), write_trace_jsonl(&again.trace));
    }

    #[test]
    fn config_text_round_trip() {
        let c = SimConfig::from_toml("t_step = 2.5\ndeviation_rate = 0.1\n").unwrap();
        assert_eq!(c.t_step, 2.5);
        assert_eq!(c.t_drop, SimConfig::default().t_drop);
        assert!(SimConfig::from_toml("t_step = -1").is_err());
        assert!(SimConfig::from_toml("bogus = 1").is_err());
        let text = toml::to_string(&SimConfig::default()).unwrap();
        assert_eq!(SimConfig::from_toml(&text).unwrap(), SimConfig::default());
    }
}
