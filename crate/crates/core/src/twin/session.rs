//! The authoritative twin session: scene, plan, trace playback and edits.
//!
//! Everything here is synchronous. The server feeds commands and clock ticks
//! in one at a time and fans the returned messages out.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::joints::{motions, sample, Motion, JOINT_RATE_HZ};
use super::protocol::{Command, Control, ControlAction, Edit, ErrorCode, Message, MsgType, Replan};
use super::scene::{BlockView, Bounds, FeedView, GridInfo, RobotPhase, RobotView, SceneFile, SceneModel};
use crate::sequencer::{plan_build, BuildPlan, Feed, PlanConfig, PlanError, Violation, ViolationKind};
use crate::simulator::{self, SimConfig, SimEvent};
use crate::tiler::{default_patterns, parse_pattern_list, tile, BlockPattern, BlockPlacement, Role, Rotation, Tiling};
use crate::voxel::{Cell, VoxelGrid};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimState {
    Paused,
    Running,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub placement_count: usize,
    pub structure_count: usize,
    pub scaffold_count: usize,
    pub barriers: Vec<Vec<usize>>,
    pub order: Vec<Vec<usize>>,
    /// Non-blocking findings; seam joins between robots' fronts.
    pub seam_join: Vec<usize>,
    pub total_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub state: SimState,
    pub sim_time: f64,
    pub speed: f64,
    pub clients: usize,
    pub edit_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub session: SessionInfo,
    pub scene: SceneModel,
}

/// Reply to the sender plus frames for every client.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub reply: Message,
    pub broadcast: Vec<Message>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionExport {
    pub edit_log: Vec<Edit>,
    pub trace: Vec<SimEvent>,
}

struct Playback {
    plan: BuildPlan,
    summary: PlanSummary,
    trace: Vec<SimEvent>,
    motions: Vec<Motion>,
    longest_motion: f64,
    end_time: f64,
    /// Scene at t = 0 of this plan.
    start: SceneModel,
}

pub struct Session {
    grid: GridInfo,
    bounds: Bounds,
    patterns: Vec<BlockPattern>,
    plan_cfg: PlanConfig,
    sim_cfg: SimConfig,
    seed: u64,
    targets: Vec<BlockPlacement>,
    feeds: Vec<FeedView>,
    robots: Vec<RobotView>,
    next_feed: usize,
    next_robot: usize,
    edit_log: Vec<Edit>,
    playback: Option<Playback>,
    scene: SceneModel,
    state: SimState,
    sim_time: f64,
    next_event: usize,
    speed: f64,
    clients: usize,
}

impl Session {
    pub fn new(file: SceneFile) -> Result<Self, SessionError> {
        let bad = |m: String| SessionError::InvalidScene(m);
        file.sim.validate().map_err(|e| bad(e.to_string()))?;
        if file.capacity == 0 || file.dims.contains(&0) || !(file.pitch_mm > 0.0) {
            return Err(bad("dims, pitch and capacity must be positive".into()));
        }
        let patterns = match &file.patterns {
            Some(s) => parse_pattern_list(s).map_err(|e| bad(e.to_string()))?,
            None => default_patterns(),
        };
        let grid = GridInfo { pitch_mm: file.pitch_mm, origin_mm: file.origin_mm, dims: file.dims };
        let mut targets = file.targets.clone();
        if !file.voxels.is_empty() {
            let mut g = VoxelGrid::new(file.pitch_mm, file.origin_mm, file.dims);
            for &c in &file.voxels {
                if !g.in_bounds(c) {
                    return Err(bad(format!("voxel {c:?} outside the grid")));
                }
                g.set(c, true);
            }
            targets.extend(tile(&g, &patterns).map_err(|e| bad(e.to_string()))?.placements);
        }
        let mut s = Session {
            bounds: Bounds::around(file.dims, file.pad.max(0)),
            scene: SceneModel::empty(grid.clone(), Bounds::around(file.dims, file.pad.max(0))),
            grid,
            patterns,
            plan_cfg: PlanConfig { capacity: file.capacity, ..Default::default() },
            speed: file.sim.speed_multiplier,
            sim_cfg: file.sim.clone(),
            seed: file.seed,
            targets: Vec::new(),
            feeds: Vec::new(),
            robots: Vec::new(),
            next_feed: 0,
            next_robot: 0,
            edit_log: Vec::new(),
            playback: None,
            state: SimState::Paused,
            sim_time: 0.0,
            next_event: 0,
            clients: 0,
        };
        for t in targets {
            s.check_target(&t).map_err(|(_, m)| bad(m))?;
            s.targets.push(t);
        }
        for &c in &file.feeds {
            s.check_feed(c).map_err(|(_, m)| bad(m))?;
            let id = s.push_feed(c);
            s.push_robot(&id);
        }
        s.rebuild_scene();
        if !s.robots.is_empty() && !s.targets.is_empty() {
            if let Err(e) = s.build_plan() {
                log::warn!("initial plan failed: {}", e.body["message"]);
            }
        }
        Ok(s)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            session: SessionInfo {
                state: self.state,
                sim_time: self.sim_time,
                speed: self.speed,
                clients: self.clients,
                edit_count: self.edit_log.len(),
                end_time: self.playback.as_ref().map(|p| p.end_time),
                plan: self.playback.as_ref().map(|p| p.summary.clone()),
            },
            scene: self.scene.clone(),
        }
    }

    pub fn snapshot_message(&self) -> Message {
        Message::new(MsgType::Snapshot, serde_json::to_value(self.snapshot()).expect("snapshot serializes"))
    }

    pub fn state(&self) -> SimState {
        self.state
    }

    pub fn sim_time(&self) -> f64 {
        self.sim_time
    }

    pub fn set_clients(&mut self, n: usize) {
        self.clients = n;
    }

    pub fn edit_log(&self) -> &[Edit] {
        &self.edit_log
    }

    pub fn plan(&self) -> Option<&BuildPlan> {
        self.playback.as_ref().map(|p| &p.plan)
    }

    /// Full trace of the current plan.
    pub fn trace(&self) -> &[SimEvent] {
        self.playback.as_ref().map_or(&[], |p| &p.trace)
    }

    pub fn export(&self) -> SessionExport {
        SessionExport { edit_log: self.edit_log.clone(), trace: self.trace().to_vec() }
    }

    /// Handles one text frame.
    pub fn handle_text(&mut self, text: &str) -> Outcome {
        match super::protocol::parse_command(text) {
            Ok((seq, cmd)) => self.handle(seq, cmd),
            Err(reply) => Outcome { reply, broadcast: Vec::new() },
        }
    }

    pub fn handle(&mut self, seq: Option<u64>, cmd: Command) -> Outcome {
        let result = match cmd {
            Command::Control(c) => self.control(c),
            Command::Edit(e) => self.edit(e),
            Command::Replan(r) => self.replan(r),
        };
        match result {
            Ok((body, broadcast)) => Outcome { reply: Message::ack(seq, body), broadcast },
            Err(mut reply) => {
                reply.seq = seq;
                Outcome { reply, broadcast: Vec::new() }
            }
        }
    }

    /// Moves the clock by `wall_dt` seconds of wall time.
    pub fn advance(&mut self, wall_dt: f64) -> Vec<Message> {
        if self.state != SimState::Running {
            return Vec::new();
        }
        let target = self.sim_time + wall_dt * self.speed;
        self.play_until(target)
    }

    fn play_until(&mut self, target: f64) -> Vec<Message> {
        let Some(pb) = &self.playback else {
            return Vec::new();
        };
        let from = self.sim_time;
        let to = target.min(pb.end_time);
        let mut out = Vec::new();
        while let Some(e) = pb.trace.get(self.next_event).filter(|e| e.t <= to) {
            self.scene.apply(e);
            out.push(Message::new(MsgType::Event, serde_json::to_value(e).expect("event serializes")));
            self.next_event += 1;
        }
        out.extend(joint_samples(pb, from, to));
        self.sim_time = to;
        if self.next_event == pb.trace.len() && to >= pb.end_time {
            self.state = SimState::Finished;
            out.push(self.snapshot_message());
        }
        out
    }

    fn control(&mut self, c: Control) -> Result<(Value, Vec<Message>), Message> {
        let need_plan = || Message::error(None, ErrorCode::NoPlan, "no plan; send replan first");
        match c.action {
            ControlAction::Start | ControlAction::Resume => {
                if self.playback.is_none() {
                    return Err(need_plan());
                }
                if self.state == SimState::Finished {
                    self.reset_playback();
                }
                self.state = SimState::Running;
            }
            ControlAction::Pause => {
                if self.state == SimState::Running {
                    self.state = SimState::Paused;
                }
            }
            ControlAction::Step => {
                let Some(pb) = &self.playback else {
                    return Err(need_plan());
                };
                if self.state == SimState::Running {
                    return Err(Message::error(None, ErrorCode::SimRunning, "pause before stepping"));
                }
                let next = pb.trace.get(self.next_event).map_or(pb.end_time, |e| e.t);
                let msgs = self.play_until(next);
                return Ok((json!({ "sim_time": self.sim_time }), msgs));
            }
            ControlAction::Speed => match c.value {
                Some(v) if v > 0.0 && v.is_finite() => self.speed = v,
                _ => return Err(Message::error(None, ErrorCode::InvalidValue, "speed needs a positive value")),
            },
            ControlAction::Reset => {
                if self.playback.is_none() {
                    return Err(need_plan());
                }
                self.reset_playback();
                self.state = SimState::Paused;
            }
        }
        Ok((json!({ "state": self.state, "sim_time": self.sim_time, "speed": self.speed }), vec![self.snapshot_message()]))
    }

    fn reset_playback(&mut self) {
        if let Some(pb) = &self.playback {
            self.scene = pb.start.clone();
        }
        self.sim_time = 0.0;
        self.next_event = 0;
    }

    fn edit(&mut self, e: Edit) -> Result<(Value, Vec<Message>), Message> {
        if self.state == SimState::Running {
            return Err(Message::error(None, ErrorCode::SimRunning, "pause before editing"));
        }
        let err = |(code, m): (ErrorCode, String)| Message::error(None, code, m);
        let mut body = json!({});
        match &e {
            Edit::AddFeed { cell } => {
                self.check_feed(*cell).map_err(err)?;
                body["id"] = json!(self.push_feed(*cell));
            }
            Edit::RemoveFeed { id } => {
                let k = self.feed_index(id).map_err(err)?;
                self.feeds.remove(k);
                self.robots.retain(|r| r.feed_id != *id);
            }
            Edit::AddRobot { feed_id } => {
                self.feed_index(feed_id).map_err(err)?;
                if self.robots.iter().any(|r| r.feed_id == *feed_id) {
                    return Err(Message::error(None, ErrorCode::FeedTaken, format!("feed {feed_id} already has a robot")));
                }
                body["id"] = json!(self.push_robot(feed_id));
            }
            Edit::AddBlockTarget { pattern, anchor, rot } => {
                let p = self.target_from(pattern, *anchor, *rot).map_err(err)?;
                self.check_target(&p).map_err(err)?;
                self.targets.push(p);
                body["index"] = json!(self.targets.len() - 1);
            }
            Edit::RemoveBlockTarget { index } => {
                if *index >= self.targets.len() {
                    return Err(Message::error(None, ErrorCode::UnknownTarget, format!("no target {index}")));
                }
                self.targets.remove(*index);
            }
            Edit::Clear => {
                self.targets.clear();
                self.feeds.clear();
                self.robots.clear();
            }
        }
        self.edit_log.push(e);
        body["edit_index"] = json!(self.edit_log.len() - 1);
        self.playback = None;
        self.rebuild_scene();
        Ok((body, vec![self.snapshot_message()]))
    }

    fn replan(&mut self, r: Replan) -> Result<(Value, Vec<Message>), Message> {
        if self.state == SimState::Running {
            return Err(Message::error(None, ErrorCode::SimRunning, "pause before replanning"));
        }
        if let Some(c) = r.capacity {
            if c == 0 {
                return Err(Message::error(None, ErrorCode::InvalidValue, "capacity must be at least 1"));
            }
            self.plan_cfg.capacity = c;
        }
        let summary = self.build_plan()?;
        Ok((serde_json::to_value(summary).expect("summary serializes"), vec![self.snapshot_message()]))
    }

    /// Tiles, sequences and simulates the current scene.
    fn build_plan(&mut self) -> Result<PlanSummary, Message> {
        if self.robots.is_empty() {
            return Err(Message::error(None, ErrorCode::NoRobots, "add a robot first"));
        }
        if self.targets.is_empty() {
            return Err(Message::error(None, ErrorCode::NoTargets, "add block targets first"));
        }
        let mut grid = VoxelGrid::new(self.grid.pitch_mm, self.grid.origin_mm, self.grid.dims);
        for p in &self.targets {
            for c in p.cells() {
                grid.set(c, true);
            }
        }
        let tiling = Tiling { placements: self.targets.clone(), uncovered: Vec::new() };
        let feeds: Vec<Feed> = self
            .robots
            .iter()
            .map(|r| {
                let cell = self.feeds.iter().find(|f| f.id == r.feed_id).expect("robot feed exists").cell;
                Feed { id: r.feed_id.clone(), cell, robot_id: r.id.clone() }
            })
            .collect();
        let infeasible = |msg: String, violations: Vec<Violation>| {
            Message::error_with(None, ErrorCode::PlanInfeasible, msg, json!({ "violations": violations }))
        };
        let (plan, report) = plan_build(&grid, &tiling, &feeds, &self.plan_cfg).map_err(|e| {
            let v = match e {
                PlanError::UnsupportedPlacement { index } => vec![Violation { index, kind: ViolationKind::Support }],
                _ => Vec::new(),
            };
            infeasible(e.to_string(), v)
        })?;
        if !report.is_feasible() {
            let n = report.blocking().count();
            return Err(infeasible(format!("{n} blocking violations"), report.violations.clone()));
        }
        let out = simulator::run(&plan, &self.sim_cfg, &self.plan_cfg, self.seed)
            .map_err(|e| Message::error(None, ErrorCode::SimFailed, e.to_string()))?;
        let motions = motions(&out.trace, &self.sim_cfg);
        let end_time = out
            .trace
            .iter()
            .map(|e| e.end())
            .chain(motions.iter().map(|m| m.end))
            .fold(0.0, f64::max);
        let summary = PlanSummary {
            placement_count: plan.placements.len(),
            structure_count: plan.structure_count(),
            scaffold_count: plan.scaffold.len(),
            barriers: plan.barriers.clone(),
            order: plan.order.clone(),
            seam_join: report.violations.iter().filter(|v| v.kind == ViolationKind::SeamJoin).map(|v| v.index).collect(),
            total_time_s: out.metrics.total_time_s,
        };
        self.rebuild_scene();
        let start = self.scene.planned(&plan);
        self.scene = start.clone();
        self.playback = Some(Playback {
            longest_motion: motions.iter().map(|m| m.end - m.start).fold(0.0, f64::max),
            plan,
            summary: summary.clone(),
            trace: out.trace,
            motions,
            end_time,
            start,
        });
        self.state = SimState::Paused;
        self.sim_time = 0.0;
        self.next_event = 0;
        Ok(summary)
    }

    fn rebuild_scene(&mut self) {
        let mut s = SceneModel::empty(self.grid.clone(), self.bounds);
        s.feeds = self.feeds.clone();
        s.robots = self
            .robots
            .iter()
            .map(|r| RobotView { stance: None, phase: RobotPhase::Idle, carrying: 0, ..r.clone() })
            .collect();
        s.blocks = self.targets.iter().map(BlockView::target).collect();
        self.scene = s;
        self.state = SimState::Paused;
        self.sim_time = 0.0;
        self.next_event = 0;
    }

    fn push_feed(&mut self, cell: Cell) -> String {
        let id = format!("f{}", self.next_feed);
        self.next_feed += 1;
        self.feeds.push(FeedView { id: id.clone(), cell });
        id
    }

    fn push_robot(&mut self, feed_id: &str) -> String {
        let id = format!("r{}", self.next_robot);
        self.next_robot += 1;
        self.robots.push(RobotView {
            id: id.clone(),
            feed_id: feed_id.to_string(),
            stance: None,
            phase: RobotPhase::Idle,
            carrying: 0,
        });
        id
    }

    fn feed_index(&self, id: &str) -> Result<usize, (ErrorCode, String)> {
        self.feeds.iter().position(|f| f.id == id).ok_or((ErrorCode::UnknownFeed, format!("no feed {id}")))
    }

    fn check_feed(&self, c: Cell) -> Result<(), (ErrorCode, String)> {
        if !self.bounds.contains(c) || c[2] != 0 {
            return Err((ErrorCode::OutOfBounds, format!("feed {c:?} is not a ground cell in bounds")));
        }
        if self.targets.iter().any(|t| t.footprint().contains(c[0], c[1])) || self.feeds.iter().any(|f| f.cell == c) {
            return Err((ErrorCode::OverlapsStructure, format!("feed {c:?} overlaps the structure or another feed")));
        }
        Ok(())
    }

    fn target_from(&self, pattern: &str, anchor: Cell, rot: u32) -> Result<BlockPlacement, (ErrorCode, String)> {
        let pat: BlockPattern = pattern
            .parse()
            .ok()
            .filter(|p| self.patterns.contains(p))
            .ok_or((ErrorCode::UnknownPattern, format!("pattern {pattern} is not in the session set")))?;
        let rot = match rot {
            0 => Rotation::R0,
            90 => Rotation::R90,
            r => return Err((ErrorCode::InvalidValue, format!("rotation {r} is not 0 or 90"))),
        };
        Ok(BlockPlacement::new(pat, anchor, rot, Role::Structure))
    }

    fn check_target(&self, p: &BlockPlacement) -> Result<(), (ErrorCode, String)> {
        let d = self.grid.dims.map(|v| v as i32);
        if p.cells().any(|c| (0..3).any(|i| c[i] < 0 || c[i] >= d[i])) {
            return Err((ErrorCode::OutOfBounds, format!("block at {:?} leaves the grid", p.anchor)));
        }
        let fp = p.footprint();
        let hits_target = self.targets.iter().any(|t| {
            let (a, b) = (t.layer(), t.top());
            t.footprint().overlaps(&fp) && a < p.top() && p.layer() < b
        });
        if hits_target || self.feeds.iter().any(|f| fp.contains(f.cell[0], f.cell[1])) {
            return Err((ErrorCode::OverlapsStructure, format!("block at {:?} overlaps existing occupancy", p.anchor)));
        }
        Ok(())
    }
}

/// Latest 5 Hz joint sample per robot inside `(from, to]`.
fn joint_samples(pb: &Playback, from: f64, to: f64) -> Vec<Message> {
    let mut best: Vec<(String, f64, &Motion)> = Vec::new();
    let lo = pb.motions.partition_point(|m| m.start < from - pb.longest_motion);
    for m in pb.motions[lo..].iter().take_while(|m| m.start <= to) {
        if m.end <= from {
            continue;
        }
        let mut k = (to.min(m.end) * JOINT_RATE_HZ).floor();
        if k / JOINT_RATE_HZ >= m.end {
            k -= 1.0;
        }
        let s = k / JOINT_RATE_HZ;
        if s < m.start || s <= from {
            continue;
        }
        match best.iter_mut().find(|b| b.0 == m.robot) {
            Some(b) if b.1 < s => *b = (m.robot.clone(), s, m),
            Some(_) => {}
            None => best.push((m.robot.clone(), s, m)),
        }
    }
    best.sort_by(|a, b| a.0.cmp(&b.0));
    best.into_iter()
        .filter_map(|(_, s, m)| sample(m, s))
        .map(|j| Message::new(MsgType::JointState, serde_json::to_value(j).expect("joint state serializes")))
        .collect()
}
